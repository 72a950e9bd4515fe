use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub name: String,
    pub trigger: Trigger,
    pub body: Vec<Statement>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Trigger {
    ThingChanged {
        thing_id: String,
        from_state: String,
        to_state: String,
    },
    ItemUpdated {
        item_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Statement {
    SendCommand { item_id: String, command: String },
    SendNotification { text: String },
    If { condition: Condition, then_body: Vec<Statement> },
}

/// Conjunction of comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub atoms: Vec<Atom>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "field", rename_all = "snake_case")]
pub enum Atom {
    LabelEq { value: String },
    Score { op: CmpOp, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Gt,
    Ge,
    Lt,
    Le,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
        }
    }

    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            CmpOp::Gt => lhs > rhs,
            CmpOp::Ge => lhs >= rhs,
            CmpOp::Lt => lhs < rhs,
            CmpOp::Le => lhs <= rhs,
        }
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn write_body(f: &mut fmt::Formatter<'_>, body: &[Statement], depth: usize) -> fmt::Result {
    let pad = "    ".repeat(depth);
    for stmt in body {
        match stmt {
            Statement::SendCommand { item_id, command } => {
                writeln!(f, "{pad}{item_id}.sendCommand({})", quote(command))?
            }
            Statement::SendNotification { text } => writeln!(f, "{pad}sendNotification({})", quote(text))?,
            Statement::If { condition, then_body } => {
                writeln!(f, "{pad}if {condition} {{")?;
                write_body(f, then_body, depth + 1)?;
                writeln!(f, "{pad}}}")?;
            }
        }
    }
    Ok(())
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, atom) in self.atoms.iter().enumerate() {
            if i > 0 {
                f.write_str(" && ")?;
            }
            match atom {
                Atom::LabelEq { value } => write!(f, "label == {}", quote(value))?,
                Atom::Score { op, value } => write!(f, "score {} {value}", op.symbol())?,
            }
        }
        Ok(())
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rule {}", quote(&self.name))?;
        writeln!(f, "when")?;
        match &self.trigger {
            Trigger::ThingChanged {
                thing_id,
                from_state,
                to_state,
            } => writeln!(
                f,
                "    Thing {} changed from {} to {}",
                quote(thing_id),
                quote(from_state),
                quote(to_state)
            )?,
            Trigger::ItemUpdated { item_id } => writeln!(f, "    Item {} received update", quote(item_id))?,
        }
        writeln!(f, "then")?;
        write_body(f, &self.body, 1)?;
        writeln!(f, "end")
    }
}

/// Canonical pretty-printed form; parses back to an equal value.
impl fmt::Display for RuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, rule) in self.rules.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{rule}")?;
        }
        Ok(())
    }
}
