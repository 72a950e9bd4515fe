//! Trigger-action rules: parser, evaluation, and action dispatch.
//!
//! Conditions read the `label` and `score` fields of the result carried by
//! the triggering item update. Thing triggers carry no result, so any
//! condition inside a Thing-triggered rule is false.

pub mod ast;
pub mod parser;
pub mod sink;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ast::{Atom, CmpOp, Condition, Rule, RuleSet, Statement, Trigger};
pub use parser::parse_rules;
pub use sink::{Notification, NotificationSink};

use crate::clock::Millis;
use crate::faas_sim::InferenceResult;

/// The doorbell rule file shipped with the crate.
pub const DOORBELL_RULES: &str = include_str!("../../assets/doorbell.rules");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("{line}:{column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("{line}:{column}: duplicate rule name {name:?}")]
    DuplicateRule { name: String, line: usize, column: usize },
    #[error("unknown item {item_id}")]
    UnknownItem { item_id: String },
    #[error("no binding for item {item_id}")]
    UnknownBinding { item_id: String },
    #[error("notification sink: {0}")]
    Sink(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event")]
pub enum RuleEvent {
    ThingChanged {
        thing_id: String,
        from: String,
        to: String,
    },
    ItemUpdate {
        item_id: String,
        result: Option<InferenceResult>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action")]
pub enum Action {
    SendCommand { item_id: String, command: String },
    SendNotification { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemState {
    pub item_id: String,
    pub last_result: Option<InferenceResult>,
    pub last_updated: Option<Millis>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemRegistry {
    items: BTreeMap<String, ItemState>,
}

impl ItemRegistry {
    pub fn register(&mut self, item_id: &str) {
        self.items.entry(item_id.to_string()).or_insert_with(|| ItemState {
            item_id: item_id.to_string(),
            last_result: None,
            last_updated: None,
        });
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.items.contains_key(item_id)
    }

    pub fn get(&self, item_id: &str) -> Option<&ItemState> {
        self.items.get(item_id)
    }

    pub fn update(&mut self, item_id: &str, result: Option<InferenceResult>, at: Millis) -> Result<(), RuleError> {
        let item = self.items.get_mut(item_id).ok_or_else(|| RuleError::UnknownItem {
            item_id: item_id.to_string(),
        })?;
        item.last_result = result;
        item.last_updated = Some(at);
        Ok(())
    }
}

fn holds(cond: &Condition, result: Option<&InferenceResult>) -> bool {
    let Some(r) = result else { return false };
    cond.atoms.iter().all(|a| match a {
        Atom::LabelEq { value } => r.label == *value,
        Atom::Score { op, value } => op.holds(r.score, *value),
    })
}

fn run_body(body: &[Statement], result: Option<&InferenceResult>, out: &mut Vec<Action>) {
    for stmt in body {
        match stmt {
            Statement::SendCommand { item_id, command } => out.push(Action::SendCommand {
                item_id: item_id.clone(),
                command: command.clone(),
            }),
            Statement::SendNotification { text } => out.push(Action::SendNotification { text: text.clone() }),
            Statement::If { condition, then_body } => {
                if holds(condition, result) {
                    run_body(then_body, result, out);
                }
            }
        }
    }
}

fn matches(trigger: &Trigger, event: &RuleEvent) -> bool {
    match (trigger, event) {
        (
            Trigger::ThingChanged {
                thing_id,
                from_state,
                to_state,
            },
            RuleEvent::ThingChanged { thing_id: t, from, to },
        ) => thing_id == t && from_state == from && to_state == to,
        (Trigger::ItemUpdated { item_id }, RuleEvent::ItemUpdate { item_id: i, .. }) => item_id == i,
        _ => false,
    }
}

/// Actions of all rules matching `event`, in file order.
pub fn evaluate(event: &RuleEvent, ruleset: &RuleSet, state: &ItemRegistry) -> Result<Vec<Action>, RuleError> {
    let result = match event {
        RuleEvent::ItemUpdate { item_id, result } => {
            if !state.contains(item_id) {
                return Err(RuleError::UnknownItem {
                    item_id: item_id.clone(),
                });
            }
            result.as_ref()
        }
        RuleEvent::ThingChanged { .. } => None,
    };
    let mut out = Vec::new();
    for rule in ruleset.rules.iter().filter(|r| matches(&r.trigger, event)) {
        run_body(&rule.body, result, &mut out);
    }
    Ok(out)
}

/// Receiver of dispatched actions.
pub trait ActionTarget {
    fn send_command(&mut self, item_id: &str, command: &str) -> Result<(), RuleError>;
    fn notify(&mut self, text: &str) -> Result<(), RuleError>;
}

pub fn dispatch(action: &Action, target: &mut dyn ActionTarget) -> Result<(), RuleError> {
    match action {
        Action::SendCommand { item_id, command } => target.send_command(item_id, command),
        Action::SendNotification { text } => target.notify(text),
    }
}

/// Rule set plus the item registry it reads.
#[derive(Debug, Clone, Default)]
pub struct RuleEngine {
    ruleset: RuleSet,
    items: ItemRegistry,
}

impl RuleEngine {
    pub fn new(ruleset: RuleSet) -> Self {
        Self {
            ruleset,
            items: ItemRegistry::default(),
        }
    }

    pub fn ruleset(&self) -> &RuleSet {
        &self.ruleset
    }

    pub fn items(&self) -> &ItemRegistry {
        &self.items
    }

    pub fn register_item(&mut self, item_id: &str) {
        self.items.register(item_id);
    }

    /// Applies an item update to the registry, then evaluates.
    pub fn process(&mut self, event: &RuleEvent, at: Millis) -> Result<Vec<Action>, RuleError> {
        if let RuleEvent::ItemUpdate { item_id, result } = event {
            self.items.update(item_id, result.clone(), at)?;
        }
        evaluate(event, &self.ruleset, &self.items)
    }
}
