//! Postfix unwind expressions and per-register rule maps as they appear in
//! `STACK CFI` records, e.g. `.cfa: sp 8 + .ra: .cfa -4 + ^`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

/// One token of a postfix expression.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    /// A register (or pseudo-register such as `.cfa`).
    Reg(String),
    /// A signed integer literal, written in decimal.
    Const(i64),
    Add,
    Sub,
    /// Pops an address and pushes the word stored there.
    Deref,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Reg(r) => f.write_str(r),
            Token::Const(c) => write!(f, "{c}"),
            Token::Add => f.write_str("+"),
            Token::Sub => f.write_str("-"),
            Token::Deref => f.write_str("^"),
        }
    }
}

/// A well-formed postfix expression: evaluating it on a stack machine leaves
/// exactly one value.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PostfixExpr {
    tokens: Vec<Token>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ExprError {
    #[error("empty expression")]
    Empty,
    #[error("invalid token `{0}`")]
    BadToken(String),
    #[error("operator `{0}` lacks operands")]
    Underflow(String),
    #[error("expression leaves {0} values on the stack")]
    Leftover(usize),
}

fn is_register_name(tok: &str) -> bool {
    !tok.is_empty()
        && tok.chars().all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '$')
        && !tok.starts_with(|c: char| c.is_ascii_digit())
}

impl PostfixExpr {
    pub fn new(tokens: Vec<Token>) -> Result<Self, ExprError> {
        check_arity(&tokens)?;
        Ok(PostfixExpr { tokens })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// `reg offset +`, the shape used for CFA rules.
    pub fn reg_plus(reg: &str, offset: i64) -> Self {
        PostfixExpr { tokens: vec![Token::Reg(reg.to_string()), Token::Const(offset), Token::Add] }
    }

    /// `.cfa offset + ^`, a register saved in the frame.
    pub fn saved_at_cfa(offset: i64) -> Self {
        PostfixExpr { tokens: vec![Token::Reg(".cfa".to_string()), Token::Const(offset), Token::Add, Token::Deref] }
    }

    pub fn reg(reg: &str) -> Self {
        PostfixExpr { tokens: vec![Token::Reg(reg.to_string())] }
    }

    pub fn references(&self, reg: &str) -> bool {
        self.tokens.iter().any(|t| matches!(t, Token::Reg(r) if r == reg))
    }

    /// If the expression has the form `reg K +`, return `(reg, K)`.
    pub fn as_reg_plus(&self) -> Option<(&str, i64)> {
        match self.tokens.as_slice() {
            [Token::Reg(r), Token::Const(k), Token::Add] => Some((r.as_str(), *k)),
            _ => None,
        }
    }
}

fn check_arity(tokens: &[Token]) -> Result<(), ExprError> {
    if tokens.is_empty() {
        return Err(ExprError::Empty);
    }
    let mut depth = 0usize;
    for t in tokens {
        match t {
            Token::Reg(_) | Token::Const(_) => depth += 1,
            Token::Add | Token::Sub => {
                if depth < 2 {
                    return Err(ExprError::Underflow(t.to_string()));
                }
                depth -= 1;
            }
            Token::Deref => {
                if depth < 1 {
                    return Err(ExprError::Underflow(t.to_string()));
                }
            }
        }
    }
    if depth != 1 {
        return Err(ExprError::Leftover(depth));
    }
    Ok(())
}

pub(crate) fn parse_token(tok: &str) -> Result<Token, ExprError> {
    match tok {
        "+" => Ok(Token::Add),
        "-" => Ok(Token::Sub),
        "^" => Ok(Token::Deref),
        _ => {
            if let Ok(v) = tok.parse::<i64>() {
                Ok(Token::Const(v))
            } else if is_register_name(tok) {
                Ok(Token::Reg(tok.to_string()))
            } else {
                Err(ExprError::BadToken(tok.to_string()))
            }
        }
    }
}

impl FromStr for PostfixExpr {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tokens = s.split_whitespace().map(parse_token).collect::<Result<Vec<_>, _>>()?;
        PostfixExpr::new(tokens)
    }
}

impl fmt::Display for PostfixExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Canonical emission rank of a register name: `.cfa`, `.ra`, then the
/// ARM core registers by number, then anything else by name.
fn register_rank(name: &str) -> (u8, u32) {
    match name {
        ".cfa" => (0, 0),
        ".ra" => (1, 0),
        "sp" => (2, 13),
        "fp" => (2, 11),
        "lr" => (2, 14),
        "pc" => (2, 15),
        _ => match name.strip_prefix('r').and_then(|n| n.parse::<u32>().ok()) {
            Some(n) if name == format!("r{n}") => (2, n),
            _ => (3, 0),
        },
    }
}

pub(crate) fn register_cmp(a: &str, b: &str) -> Ordering {
    register_rank(a).cmp(&register_rank(b)).then_with(|| a.cmp(b))
}

/// Register → expression rules, kept in canonical register order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct RuleMap {
    rules: Vec<(String, PostfixExpr)>,
}

impl RuleMap {
    pub fn new() -> Self {
        RuleMap::default()
    }

    /// Insert or replace the rule for `reg`.
    pub fn set(&mut self, reg: &str, expr: PostfixExpr) {
        match self.rules.binary_search_by(|(r, _)| register_cmp(r, reg)) {
            Ok(i) => self.rules[i].1 = expr,
            Err(i) => self.rules.insert(i, (reg.to_string(), expr)),
        }
    }

    pub fn get(&self, reg: &str) -> Option<&PostfixExpr> {
        self.rules.binary_search_by(|(r, _)| register_cmp(r, reg)).ok().map(|i| &self.rules[i].1)
    }

    pub fn get_mut(&mut self, reg: &str) -> Option<&mut PostfixExpr> {
        self.rules.binary_search_by(|(r, _)| register_cmp(r, reg)).ok().map(move |i| &mut self.rules[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &PostfixExpr)> {
        self.rules.iter().map(|(r, e)| (r.as_str(), e))
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Later rules win, register by register.
    pub fn overlay(&mut self, other: &RuleMap) {
        for (r, e) in other.iter() {
            self.set(r, e.clone());
        }
    }

    /// Parse `reg: expr reg: expr ...`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let mut map = RuleMap::new();
        let mut current: Option<(String, Vec<Token>)> = None;
        let finish = |cur: Option<(String, Vec<Token>)>, map: &mut RuleMap| -> Result<(), String> {
            if let Some((reg, toks)) = cur {
                let expr = PostfixExpr::new(toks).map_err(|e| format!("rule for {reg}: {e}"))?;
                if map.get(&reg).is_some() {
                    return Err(format!("duplicate rule for {reg}"));
                }
                map.set(&reg, expr);
            }
            Ok(())
        };
        for tok in s.split_whitespace() {
            if let Some(reg) = tok.strip_suffix(':') {
                if !is_register_name(reg) {
                    return Err(format!("invalid register `{reg}`"));
                }
                finish(current.take(), &mut map)?;
                current = Some((reg.to_string(), Vec::new()));
            } else {
                match current.as_mut() {
                    Some((_, toks)) => toks.push(parse_token(tok).map_err(|e| e.to_string())?),
                    None => return Err(format!("expression token `{tok}` before any register")),
                }
            }
        }
        finish(current.take(), &mut map)?;
        if let Some(cfa) = map.get(".cfa") {
            if cfa.references(".cfa") {
                return Err(".cfa rule references .cfa".to_string());
            }
        }
        Ok(map)
    }
}

impl fmt::Display for RuleMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (r, e)) in self.rules.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{r}: {e}")?;
        }
        Ok(())
    }
}
