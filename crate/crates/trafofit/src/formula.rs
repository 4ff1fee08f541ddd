//! Formula interface: `response | interacting ~ shifting`.
//!
//! Covariates interacting with the response go on the left of `~` after a
//! `|`, shift effects go on the right. `0 +` on the right suppresses the
//! shift intercept. Term functions: `s(x, df = k)` for smooths, `fac(x)`
//! for factors, `lasso(x)` for L1-penalized linear effects, `nn(...)` /
//! `deep(...)` for named neural-network terms, and `atplag(x)` for
//! autoregressive lag terms. Bare variable names are classified as linear
//! or factor terms against the dataset when the model is compiled.
//!
//! The alternative interface of [`parse_ontram`] takes three one-sided
//! specifications (response / intercept / shift) and produces the same
//! AST as the pipe form.

use serde::{Deserialize, Serialize};

use crate::error::FormulaError;

/// Byte range into the source formula, for error reporting.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TermKind {
    Intercept,
    /// Bare variable, not yet classified against a data schema.
    Var(String),
    /// Continuous linear effect (resolved from a bare name).
    Linear(String),
    Smooth {
        var: String,
        df: f64,
    },
    Factor {
        var: String,
        /// Written as `fac(x)` rather than resolved from a bare name.
        explicit: bool,
    },
    Lasso {
        var: String,
        lambda: f64,
    },
    Deep {
        net: String,
        vars: Vec<String>,
    },
    AtpLag(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermExpr {
    pub kind: TermKind,
    pub span: Span,
}

// Equality ignores source spans so that equivalent formulas written with
// different spacing or through the ontram interface compare equal.
impl PartialEq for TermExpr {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

impl TermExpr {
    pub fn new(kind: TermKind) -> Self {
        Self {
            kind,
            span: Span::default(),
        }
    }

    /// Canonical label used for coefficient names and reports.
    pub fn label(&self) -> String {
        match &self.kind {
            TermKind::Intercept => "1".into(),
            TermKind::Var(v) | TermKind::Linear(v) => v.clone(),
            TermKind::Smooth { var, df } => format!("s({var}, df = {})", fmt_num(*df)),
            TermKind::Factor { var, explicit } => {
                if *explicit {
                    format!("fac({var})")
                } else {
                    var.clone()
                }
            }
            TermKind::Lasso { var, lambda } => {
                if *lambda == DEFAULT_LASSO_LAMBDA {
                    format!("lasso({var})")
                } else {
                    format!("lasso({var}, lambda = {})", fmt_num(*lambda))
                }
            }
            TermKind::Deep { net, vars } => format!("{net}({})", vars.join(", ")),
            TermKind::AtpLag(v) => format!("atplag({v})"),
        }
    }

    /// Variables this term reads from the dataset.
    pub fn vars(&self) -> Vec<&str> {
        match &self.kind {
            TermKind::Intercept => vec![],
            TermKind::Var(v)
            | TermKind::Linear(v)
            | TermKind::Smooth { var: v, .. }
            | TermKind::Factor { var: v, .. }
            | TermKind::Lasso { var: v, .. }
            | TermKind::AtpLag(v) => vec![v.as_str()],
            TermKind::Deep { vars, .. } => vars.iter().map(|s| s.as_str()).collect(),
        }
    }
}

pub const DEFAULT_LASSO_LAMBDA: f64 = 1.0;

/// Parsed model specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: String,
    /// Always starts with the implicit intercept term of the interacting
    /// basis.
    pub interacting: Vec<TermExpr>,
    pub shifting: Vec<TermExpr>,
    /// Set by writing `0 + ...` on the right-hand side.
    pub suppress_shift_intercept: bool,
}

impl std::fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.response)?;
        let ia: Vec<String> = self
            .interacting
            .iter()
            .filter(|t| t.kind != TermKind::Intercept)
            .map(|t| t.label())
            .collect();
        if !ia.is_empty() {
            write!(f, " | {}", ia.join(" + "))?;
        }
        write!(f, " ~ ")?;
        let sh: Vec<String> = self.shifting.iter().map(|t| t.label()).collect();
        match (self.suppress_shift_intercept, sh.is_empty()) {
            (true, true) => write!(f, "0"),
            (true, false) => write!(f, "0 + {}", sh.join(" + ")),
            (false, true) => write!(f, "1"),
            (false, false) => write!(f, "{}", sh.join(" + ")),
        }
    }
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Parse a two-sided formula `response | interacting ~ shifting`.
pub fn parse_formula(text: &str) -> Result<ModelSpec, FormulaError> {
    let tokens = lex(text)?;
    let mut p = Parser::new(tokens);

    let response = p.expect_ident("response variable")?;
    let mut interacting = vec![TermExpr {
        kind: TermKind::Intercept,
        span: Span::default(),
    }];
    if p.eat(&Tok::Pipe) {
        let side = p.parse_terms(Side::Interacting)?;
        interacting.extend(side.terms);
    }
    p.expect(&Tok::Tilde, "`~`")?;
    let side = p.parse_terms(Side::Shifting)?;
    p.expect_end()?;

    let spec = ModelSpec {
        response,
        interacting,
        shifting: side.terms,
        suppress_shift_intercept: side.suppressed,
    };
    validate(&spec)?;
    Ok(spec)
}

/// Parse the alternative three-part interface: separate one-sided
/// specifications for the response, the intercept (interacting) terms and
/// the shift terms. Produces the same AST as the pipe form.
pub fn parse_ontram(
    response: &str,
    intercept: &str,
    shift: &str,
) -> Result<ModelSpec, FormulaError> {
    let response = {
        let tokens = lex(response)?;
        let mut p = Parser::new(tokens);
        p.eat(&Tok::Tilde);
        let name = p.expect_ident("response variable")?;
        p.expect_end()?;
        name
    };

    let mut interacting = vec![TermExpr {
        kind: TermKind::Intercept,
        span: Span::default(),
    }];
    {
        let tokens = lex(intercept)?;
        let mut p = Parser::new(tokens);
        p.eat(&Tok::Tilde);
        let side = p.parse_terms(Side::Interacting)?;
        p.expect_end()?;
        interacting.extend(side.terms);
    }

    let (shifting, suppressed) = {
        let tokens = lex(shift)?;
        let mut p = Parser::new(tokens);
        p.eat(&Tok::Tilde);
        let side = p.parse_terms(Side::Shifting)?;
        p.expect_end()?;
        (side.terms, side.suppressed)
    };

    let spec = ModelSpec {
        response,
        interacting,
        shifting,
        suppress_shift_intercept: suppressed,
    };
    validate(&spec)?;
    Ok(spec)
}

fn validate(spec: &ModelSpec) -> Result<(), FormulaError> {
    for t in &spec.interacting {
        if let TermKind::AtpLag(_) = t.kind {
            return Err(FormulaError::new(
                t.span.start,
                "atplag terms are only allowed in the shifting part",
            ));
        }
        if let TermKind::Lasso { .. } = t.kind {
            return Err(FormulaError::new(
                t.span.start,
                "lasso terms are only allowed in the shifting part",
            ));
        }
        if let TermKind::Smooth { .. } = t.kind {
            return Err(FormulaError::new(
                t.span.start,
                "smooth terms are not supported in the interacting part",
            ));
        }
    }
    for side in [&spec.interacting, &spec.shifting] {
        let mut nets = std::collections::HashSet::new();
        for t in side {
            if let TermKind::Deep { net, vars } = &t.kind {
                if vars.is_empty() {
                    return Err(FormulaError::new(
                        t.span.start,
                        format!("network term `{net}` needs at least one input variable"),
                    ));
                }
                if !nets.insert(net.clone()) {
                    return Err(FormulaError::new(
                        t.span.start,
                        format!("network `{net}` appears more than once on the same side"),
                    ));
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    Pipe,
    Tilde,
    Plus,
    LParen,
    RParen,
    Comma,
    Equals,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    span: Span,
}

fn lex(text: &str) -> Result<Vec<Spanned>, FormulaError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
            }
            '|' => {
                out.push(Spanned { tok: Tok::Pipe, span: Span { start, end: i + 1 } });
                i += 1;
            }
            '~' => {
                out.push(Spanned { tok: Tok::Tilde, span: Span { start, end: i + 1 } });
                i += 1;
            }
            '+' => {
                out.push(Spanned { tok: Tok::Plus, span: Span { start, end: i + 1 } });
                i += 1;
            }
            '(' => {
                out.push(Spanned { tok: Tok::LParen, span: Span { start, end: i + 1 } });
                i += 1;
            }
            ')' => {
                out.push(Spanned { tok: Tok::RParen, span: Span { start, end: i + 1 } });
                i += 1;
            }
            ',' => {
                out.push(Spanned { tok: Tok::Comma, span: Span { start, end: i + 1 } });
                i += 1;
            }
            '=' => {
                out.push(Spanned { tok: Tok::Equals, span: Span { start, end: i + 1 } });
                i += 1;
            }
            c if c.is_ascii_alphabetic() || c == '_' || c == '.' => {
                let mut j = i + 1;
                while j < bytes.len() {
                    let d = bytes[j] as char;
                    if d.is_ascii_alphanumeric() || d == '_' || d == '.' {
                        j += 1;
                    } else {
                        break;
                    }
                }
                out.push(Spanned {
                    tok: Tok::Ident(text[i..j].to_string()),
                    span: Span { start, end: j },
                });
                i = j;
            }
            c if c.is_ascii_digit() => {
                let mut j = i + 1;
                let mut seen_dot = false;
                let mut seen_exp = false;
                while j < bytes.len() {
                    let d = bytes[j] as char;
                    if d.is_ascii_digit() {
                        j += 1;
                    } else if d == '.' && !seen_dot && !seen_exp {
                        seen_dot = true;
                        j += 1;
                    } else if (d == 'e' || d == 'E') && !seen_exp {
                        seen_exp = true;
                        j += 1;
                        if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                            j += 1;
                        }
                    } else {
                        break;
                    }
                }
                let v: f64 = text[i..j].parse().map_err(|_| {
                    FormulaError::new(start, format!("invalid number `{}`", &text[i..j]))
                })?;
                out.push(Spanned {
                    tok: Tok::Number(v),
                    span: Span { start, end: j },
                });
                i = j;
            }
            other => {
                return Err(FormulaError::new(
                    start,
                    format!("unexpected character `{other}`"),
                ));
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum Side {
    Interacting,
    Shifting,
}

struct ParsedSide {
    terms: Vec<TermExpr>,
    suppressed: bool,
}

struct Parser {
    tokens: Vec<Spanned>,
    pos: usize,
    len: usize,
}

impl Parser {
    fn new(tokens: Vec<Spanned>) -> Self {
        let len = tokens.last().map(|t| t.span.end).unwrap_or(0);
        Self { tokens, pos: 0, len }
    }

    fn peek(&self) -> Option<&Spanned> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Spanned> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek().map(|t| &t.tok) == Some(tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn here(&self) -> usize {
        self.peek().map(|t| t.span.start).unwrap_or(self.len)
    }

    fn expect(&mut self, tok: &Tok, what: &str) -> Result<Span, FormulaError> {
        let pos = self.here();
        match self.next() {
            Some(t) if &t.tok == tok => Ok(t.span),
            Some(t) => Err(FormulaError::new(
                t.span.start,
                format!("expected {what}, found {:?}", t.tok),
            )),
            None => Err(FormulaError::new(pos, format!("expected {what}, found end of input"))),
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<String, FormulaError> {
        let pos = self.here();
        match self.next() {
            Some(Spanned { tok: Tok::Ident(name), .. }) => Ok(name),
            Some(t) => Err(FormulaError::new(
                t.span.start,
                format!("expected {what}, found {:?}", t.tok),
            )),
            None => Err(FormulaError::new(pos, format!("expected {what}, found end of input"))),
        }
    }

    fn expect_end(&mut self) -> Result<(), FormulaError> {
        match self.peek() {
            None => Ok(()),
            Some(t) if t.tok == Tok::Pipe => Err(FormulaError::new(
                t.span.start,
                "`|` is only allowed on the left-hand side of `~`",
            )),
            Some(t) => Err(FormulaError::new(
                t.span.start,
                format!("unexpected trailing {:?}", t.tok),
            )),
        }
    }

    fn parse_terms(&mut self, side: Side) -> Result<ParsedSide, FormulaError> {
        let mut terms = Vec::new();
        let mut suppressed = false;
        loop {
            let pos = self.here();
            match self.next() {
                Some(Spanned { tok: Tok::Number(v), span }) if v == 0.0 => {
                    if side == Side::Interacting {
                        return Err(FormulaError::new(
                            span.start,
                            "the interacting part always contains the intercept basis and cannot be suppressed with `0`",
                        ));
                    }
                    suppressed = true;
                }
                Some(Spanned { tok: Tok::Number(v), span }) if v == 1.0 => {
                    // Explicit intercept: the default, nothing to add.
                    let _ = span;
                }
                Some(Spanned { tok: Tok::Number(v), span }) => {
                    return Err(FormulaError::new(
                        span.start,
                        format!("unexpected literal `{v}` in term position"),
                    ));
                }
                Some(Spanned { tok: Tok::Ident(name), span }) => {
                    if self.eat(&Tok::LParen) {
                        let term = self.parse_call(&name, span, side)?;
                        terms.push(term);
                    } else {
                        terms.push(TermExpr {
                            kind: TermKind::Var(name),
                            span,
                        });
                    }
                }
                Some(t) => {
                    return Err(FormulaError::new(
                        t.span.start,
                        format!("expected a term, found {:?}", t.tok),
                    ));
                }
                None => {
                    return Err(FormulaError::new(pos, "expected a term, found end of input"));
                }
            }
            if !self.eat(&Tok::Plus) {
                break;
            }
        }
        Ok(ParsedSide { terms, suppressed })
    }

    /// Parse `name(arg, ..., key = value, ...)` after the opening paren.
    fn parse_call(&mut self, name: &str, start: Span, side: Side) -> Result<TermExpr, FormulaError> {
        let mut positional_idents = Vec::new();
        let mut positional_numbers = Vec::new();
        let mut named: Vec<(String, f64, Span)> = Vec::new();

        if !self.eat(&Tok::RParen) {
            loop {
                let pos = self.here();
                match self.next() {
                    Some(Spanned { tok: Tok::Ident(arg), span }) => {
                        if self.eat(&Tok::Equals) {
                            let vpos = self.here();
                            match self.next() {
                                Some(Spanned { tok: Tok::Number(v), .. }) => {
                                    named.push((arg, v, span));
                                }
                                Some(t) => {
                                    return Err(FormulaError::new(
                                        t.span.start,
                                        "argument values must be numeric literals",
                                    ));
                                }
                                None => {
                                    return Err(FormulaError::new(
                                        vpos,
                                        "expected a value after `=`",
                                    ));
                                }
                            }
                        } else {
                            positional_idents.push((arg, span));
                        }
                    }
                    Some(Spanned { tok: Tok::Number(v), span }) => {
                        positional_numbers.push((v, span));
                    }
                    Some(t) => {
                        return Err(FormulaError::new(
                            t.span.start,
                            format!("unexpected {:?} in argument list", t.tok),
                        ));
                    }
                    None => {
                        return Err(FormulaError::new(pos, "unterminated argument list"));
                    }
                }
                if self.eat(&Tok::RParen) {
                    break;
                }
                self.expect(&Tok::Comma, "`,` or `)`")?;
            }
        }
        let end = self
            .tokens
            .get(self.pos.saturating_sub(1))
            .map(|t| t.span.end)
            .unwrap_or(start.end);
        let span = Span { start: start.start, end };

        let one_var = |idents: &[(String, Span)]| -> Result<String, FormulaError> {
            match idents {
                [(v, _)] => Ok(v.clone()),
                [] => Err(FormulaError::new(span.start, format!("`{name}` needs a variable"))),
                _ => Err(FormulaError::new(
                    span.start,
                    format!("`{name}` takes exactly one variable"),
                )),
            }
        };
        let lookup_named = |key: &str| named.iter().find(|(k, _, _)| k == key).map(|(_, v, _)| *v);
        let reject_unknown_named = |allowed: &[&str]| -> Result<(), FormulaError> {
            for (k, _, s) in &named {
                if !allowed.contains(&k.as_str()) {
                    return Err(FormulaError::new(
                        s.start,
                        format!("unknown argument `{k}` to `{name}`"),
                    ));
                }
            }
            Ok(())
        };

        let kind = match name {
            "s" => {
                reject_unknown_named(&["df"])?;
                let var = one_var(&positional_idents)?;
                let df = lookup_named("df")
                    .or_else(|| positional_numbers.first().map(|(v, _)| *v))
                    .ok_or_else(|| {
                        FormulaError::new(span.start, "`s` needs a `df` argument, e.g. s(x, df = 3)")
                    })?;
                if !(df > 1.0) {
                    return Err(FormulaError::new(span.start, "smooth df must be greater than 1"));
                }
                TermKind::Smooth { var, df }
            }
            "fac" => {
                reject_unknown_named(&[])?;
                TermKind::Factor {
                    var: one_var(&positional_idents)?,
                    explicit: true,
                }
            }
            "lasso" => {
                reject_unknown_named(&["lambda"])?;
                let var = one_var(&positional_idents)?;
                let lambda = lookup_named("lambda")
                    .or_else(|| positional_numbers.first().map(|(v, _)| *v))
                    .unwrap_or(DEFAULT_LASSO_LAMBDA);
                if lambda < 0.0 {
                    return Err(FormulaError::new(span.start, "lasso lambda must be nonnegative"));
                }
                TermKind::Lasso { var, lambda }
            }
            "atplag" => {
                reject_unknown_named(&[])?;
                let var = one_var(&positional_idents)?;
                if side == Side::Interacting {
                    return Err(FormulaError::new(
                        span.start,
                        "atplag terms are only allowed in the shifting part",
                    ));
                }
                TermKind::AtpLag(var)
            }
            "nn" | "deep" => {
                reject_unknown_named(&[])?;
                if !positional_numbers.is_empty() {
                    return Err(FormulaError::new(
                        span.start,
                        format!("`{name}` takes variable names, not literals"),
                    ));
                }
                TermKind::Deep {
                    net: name.to_string(),
                    vars: positional_idents.into_iter().map(|(v, _)| v).collect(),
                }
            }
            other => {
                return Err(FormulaError::new(
                    span.start,
                    format!("unknown term function `{other}`"),
                ));
            }
        };
        Ok(TermExpr { kind, span })
    }
}
