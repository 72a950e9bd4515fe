//! Lexer and recursive-descent parser for rule files.
//!
//! ```text
//! ruleset := rule*
//! rule    := 'rule' STRING 'when' trigger 'then' stmt* 'end'
//! trigger := 'Thing' STRING 'changed' 'from' STRING 'to' STRING
//!          | 'Item' STRING 'received' 'update'
//! stmt    := ID '.' 'sendCommand' '(' STRING ')'
//!          | 'sendNotification' '(' STRING ')'
//!          | 'if' cond '{' stmt* '}'
//! cond    := atom ('&&' atom)*
//! atom    := 'label' '==' STRING | 'score' ('>'|'>='|'<'|'<=') NUMBER
//! ```

use std::collections::BTreeSet;

use super::ast::{Atom, CmpOp, Condition, Rule, RuleSet, Statement, Trigger};
use super::RuleError;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Num(f64),
    Dot,
    LParen,
    RParen,
    LBrace,
    RBrace,
    AndAnd,
    EqEq,
    Cmp(CmpOp),
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::Num(n) => format!("number {n}"),
            Tok::Dot => "`.`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::AndAnd => "`&&`".into(),
            Tok::EqEq => "`==`".into(),
            Tok::Cmp(op) => format!("`{}`", op.symbol()),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Pos {
    line: usize,
    col: usize,
}

fn err(pos: Pos, message: impl Into<String>) -> RuleError {
    RuleError::Syntax {
        line: pos.line,
        column: pos.col,
        message: message.into(),
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, Pos)>, RuleError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        let pos = Pos { line, col };
        let start = i;
        let tok = match c {
            '\n' => {
                i += 1;
                line += 1;
                col = 1;
                continue;
            }
            c if c.is_whitespace() => {
                i += 1;
                col += 1;
                continue;
            }
            '.' => {
                i += 1;
                Tok::Dot
            }
            '(' => {
                i += 1;
                Tok::LParen
            }
            ')' => {
                i += 1;
                Tok::RParen
            }
            '{' => {
                i += 1;
                Tok::LBrace
            }
            '}' => {
                i += 1;
                Tok::RBrace
            }
            '&' if chars.get(i + 1) == Some(&'&') => {
                i += 2;
                Tok::AndAnd
            }
            '=' if chars.get(i + 1) == Some(&'=') => {
                i += 2;
                Tok::EqEq
            }
            '>' | '<' => {
                let eq = chars.get(i + 1) == Some(&'=');
                i += if eq { 2 } else { 1 };
                Tok::Cmp(match (c, eq) {
                    ('>', false) => CmpOp::Gt,
                    ('>', true) => CmpOp::Ge,
                    ('<', false) => CmpOp::Lt,
                    _ => CmpOp::Le,
                })
            }
            '"' => {
                i += 1;
                let mut s = String::new();
                loop {
                    match chars.get(i) {
                        None | Some('\n') => return Err(err(pos, "unterminated string literal")),
                        Some('"') => {
                            i += 1;
                            break;
                        }
                        Some('\\') => match chars.get(i + 1) {
                            Some(&e @ ('"' | '\\')) => {
                                s.push(e);
                                i += 2;
                            }
                            _ => {
                                return Err(err(
                                    Pos {
                                        line,
                                        col: col + (i - start),
                                    },
                                    "invalid escape sequence",
                                ))
                            }
                        },
                        Some(&ch) => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                Tok::Str(s)
            }
            c if c.is_ascii_digit() => {
                while chars.get(i).is_some_and(|c| c.is_ascii_digit()) {
                    i += 1;
                }
                if chars.get(i) == Some(&'.') && chars.get(i + 1).is_some_and(|c| c.is_ascii_digit()) {
                    i += 1;
                    while chars.get(i).is_some_and(|c| c.is_ascii_digit()) {
                        i += 1;
                    }
                }
                let text: String = chars[start..i].iter().collect();
                Tok::Num(text.parse().map_err(|_| err(pos, format!("invalid number {text}")))?)
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while chars.get(i).is_some_and(|c| c.is_ascii_alphanumeric() || *c == '_') {
                    i += 1;
                }
                Tok::Ident(chars[start..i].iter().collect())
            }
            other => return Err(err(pos, format!("unexpected character {other:?}"))),
        };
        col += i - start;
        out.push((tok, pos));
    }
    out.push((Tok::Eof, Pos { line, col }));
    Ok(out)
}

const KEYWORDS: &[&str] = &["rule", "when", "then", "end", "if", "Thing", "Item"];

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> (Tok, Pos) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn unexpected(&self, wanted: &str) -> RuleError {
        err(self.pos(), format!("expected {wanted}, found {}", self.peek().describe()))
    }

    fn keyword(&mut self, kw: &str) -> Result<(), RuleError> {
        match self.peek() {
            Tok::Ident(s) if s == kw => {
                self.bump();
                Ok(())
            }
            _ => Err(self.unexpected(&format!("`{kw}`"))),
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn string(&mut self, what: &str) -> Result<String, RuleError> {
        match self.peek().clone() {
            Tok::Str(s) => {
                self.bump();
                Ok(s)
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn nonempty_string(&mut self, what: &str) -> Result<String, RuleError> {
        let pos = self.pos();
        let s = self.string(what)?;
        if s.is_empty() {
            return Err(err(pos, format!("{what} must not be empty")));
        }
        Ok(s)
    }

    fn expect(&mut self, tok: Tok) -> Result<(), RuleError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(&tok.describe()))
        }
    }

    fn ruleset(&mut self) -> Result<RuleSet, RuleError> {
        let mut rules = Vec::new();
        let mut names = BTreeSet::new();
        while *self.peek() != Tok::Eof {
            let pos = self.pos();
            let rule = self.rule()?;
            if !names.insert(rule.name.clone()) {
                return Err(RuleError::DuplicateRule {
                    name: rule.name,
                    line: pos.line,
                    column: pos.col,
                });
            }
            rules.push(rule);
        }
        Ok(RuleSet { rules })
    }

    fn rule(&mut self) -> Result<Rule, RuleError> {
        self.keyword("rule")?;
        let name = self.nonempty_string("rule name")?;
        self.keyword("when")?;
        let trigger = self.trigger()?;
        self.keyword("then")?;
        let mut body = Vec::new();
        loop {
            if self.is_keyword("end") {
                self.bump();
                break;
            }
            if *self.peek() == Tok::Eof {
                return Err(err(self.pos(), format!("rule {name:?} is not terminated: expected `end`")));
            }
            body.push(self.statement()?);
        }
        Ok(Rule { name, trigger, body })
    }

    fn trigger(&mut self) -> Result<Trigger, RuleError> {
        if self.is_keyword("Thing") {
            self.bump();
            let thing_id = self.nonempty_string("thing id")?;
            self.keyword("changed")?;
            self.keyword("from")?;
            let from_state = self.string("state")?;
            self.keyword("to")?;
            let to_state = self.string("state")?;
            Ok(Trigger::ThingChanged {
                thing_id,
                from_state,
                to_state,
            })
        } else if self.is_keyword("Item") {
            self.bump();
            let item_id = self.nonempty_string("item id")?;
            self.keyword("received")?;
            self.keyword("update")?;
            Ok(Trigger::ItemUpdated { item_id })
        } else {
            Err(self.unexpected("`Thing` or `Item`"))
        }
    }

    fn statement(&mut self) -> Result<Statement, RuleError> {
        let pos = self.pos();
        let ident = match self.peek().clone() {
            Tok::Ident(s) => s,
            _ => return Err(self.unexpected("statement")),
        };
        self.bump();
        match ident.as_str() {
            "if" => {
                let condition = self.condition()?;
                self.expect(Tok::LBrace)?;
                let mut then_body = Vec::new();
                while *self.peek() != Tok::RBrace {
                    if *self.peek() == Tok::Eof {
                        return Err(err(self.pos(), "unterminated `if` block: expected `}`"));
                    }
                    then_body.push(self.statement()?);
                }
                self.bump();
                Ok(Statement::If { condition, then_body })
            }
            "sendNotification" => {
                self.expect(Tok::LParen)?;
                let text = self.string("notification text")?;
                self.expect(Tok::RParen)?;
                Ok(Statement::SendNotification { text })
            }
            kw if KEYWORDS.contains(&kw) => Err(err(pos, format!("unexpected keyword `{kw}`"))),
            _ => {
                self.expect(Tok::Dot)?;
                self.keyword("sendCommand")?;
                self.expect(Tok::LParen)?;
                let command = self.nonempty_string("command")?;
                self.expect(Tok::RParen)?;
                Ok(Statement::SendCommand {
                    item_id: ident,
                    command,
                })
            }
        }
    }

    fn condition(&mut self) -> Result<Condition, RuleError> {
        let mut atoms = vec![self.atom()?];
        while *self.peek() == Tok::AndAnd {
            self.bump();
            atoms.push(self.atom()?);
        }
        Ok(Condition { atoms })
    }

    fn atom(&mut self) -> Result<Atom, RuleError> {
        let pos = self.pos();
        let field = match self.peek().clone() {
            Tok::Ident(s) => s,
            _ => return Err(self.unexpected("`label` or `score`")),
        };
        self.bump();
        match field.as_str() {
            "label" => match self.peek() {
                Tok::EqEq => {
                    self.bump();
                    Ok(Atom::LabelEq {
                        value: self.string("label string")?,
                    })
                }
                _ => Err(self.unexpected("`==` (label supports equality only)")),
            },
            "score" => match *self.peek() {
                Tok::Cmp(op) => {
                    self.bump();
                    match *self.peek() {
                        Tok::Num(value) => {
                            self.bump();
                            Ok(Atom::Score { op, value })
                        }
                        _ => Err(self.unexpected("number")),
                    }
                }
                _ => Err(self.unexpected("`>`, `>=`, `<` or `<=`")),
            },
            other => Err(err(
                pos,
                format!("unknown result field `{other}`; only `label` and `score` exist"),
            )),
        }
    }
}

pub fn parse_rules(source: &str) -> Result<RuleSet, RuleError> {
    let toks = lex(source)?;
    Parser { toks, at: 0 }.ruleset()
}
