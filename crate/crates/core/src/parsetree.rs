//! Bracketed intent/slot parse trees over a tokenized query.
//!
//! The canonical text form is the one used for TOP-style annotations in this
//! project, for example `(IN:GET_DIRECTIONS (SL:DESTINATION "work" ) )`: every
//! node opens with `(LABEL`, slot spans are quoted space-joined tokens, and
//! every `)` is preceded by a single space.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INTENT_PREFIX: &str = "IN:";
pub const SLOT_PREFIX: &str = "SL:";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("empty input")]
    EmptyInput,
    #[error("unbalanced brackets at byte {0}")]
    UnbalancedBrackets(usize),
    #[error("quoted span {0:?} does not occur in the query")]
    UnknownSpan(String),
    #[error("invalid tree: {0}")]
    Invalid(String),
    #[error("malformed action sequence at position {pos}: {reason}")]
    MalformedSequence { pos: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Intent,
    Slot,
}

impl NodeKind {
    pub fn of_label(label: &str) -> Option<NodeKind> {
        if label.starts_with(INTENT_PREFIX) {
            Some(NodeKind::Intent)
        } else if label.starts_with(SLOT_PREFIX) {
            Some(NodeKind::Slot)
        } else {
            None
        }
    }
}

/// A node of a semantic parse. Slot leaves hold token indices into the query,
/// never substrings, so a tree only has meaning together with its query.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParseTree {
    pub kind: NodeKind,
    pub label: String,
    pub span: Vec<usize>,
    pub children: Vec<ParseTree>,
}

impl ParseTree {
    pub fn intent(label: impl Into<String>, slots: Vec<ParseTree>) -> Self {
        ParseTree { kind: NodeKind::Intent, label: label.into(), span: Vec::new(), children: slots }
    }

    pub fn slot(label: impl Into<String>, span: Vec<usize>) -> Self {
        ParseTree { kind: NodeKind::Slot, label: label.into(), span, children: Vec::new() }
    }

    pub fn nested_slot(label: impl Into<String>, inner: ParseTree) -> Self {
        ParseTree { kind: NodeKind::Slot, label: label.into(), span: Vec::new(), children: vec![inner] }
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(ParseTree::node_count).sum::<usize>()
    }

    pub fn span_token_count(&self) -> usize {
        self.span.len() + self.children.iter().map(ParseTree::span_token_count).sum::<usize>()
    }

    pub fn has_arguments(&self) -> bool {
        !self.children.is_empty()
    }

    /// Every label in depth-first order.
    pub fn labels(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.walk(&mut |t| out.push(t.label.as_str()));
        out
    }

    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a ParseTree)) {
        f(self);
        for c in &self.children {
            c.walk(f);
        }
    }

    /// Checks the structural invariants against a query of `n_tokens` tokens.
    pub fn validate(&self, n_tokens: usize) -> Result<(), TreeError> {
        if self.kind != NodeKind::Intent {
            return Err(TreeError::Invalid("root must be an intent".into()));
        }
        let mut cursor = 0usize;
        self.validate_node(n_tokens, &mut cursor)
    }

    fn validate_node(&self, n_tokens: usize, cursor: &mut usize) -> Result<(), TreeError> {
        if NodeKind::of_label(&self.label) != Some(self.kind) {
            return Err(TreeError::Invalid(format!("label {} does not match node kind", self.label)));
        }
        match self.kind {
            NodeKind::Intent => {
                if !self.span.is_empty() {
                    return Err(TreeError::Invalid(format!("intent {} carries tokens", self.label)));
                }
                for c in &self.children {
                    if c.kind != NodeKind::Slot {
                        return Err(TreeError::Invalid(format!("intent {} has an intent child", self.label)));
                    }
                    c.validate_node(n_tokens, cursor)?;
                }
            }
            NodeKind::Slot => {
                match (self.span.is_empty(), self.children.is_empty()) {
                    (false, true) => {
                        for (k, &i) in self.span.iter().enumerate() {
                            if i >= n_tokens {
                                return Err(TreeError::Invalid(format!("token index {i} out of bounds")));
                            }
                            if k > 0 && i != self.span[k - 1] + 1 {
                                return Err(TreeError::Invalid(format!("slot {} span is not contiguous", self.label)));
                            }
                            if i < *cursor {
                                return Err(TreeError::Invalid("token indices not increasing".into()));
                            }
                            *cursor = i + 1;
                        }
                    }
                    (true, false) => {
                        for c in &self.children {
                            if c.kind != NodeKind::Intent {
                                return Err(TreeError::Invalid(format!("slot {} has a slot child", self.label)));
                            }
                            c.validate_node(n_tokens, cursor)?;
                        }
                    }
                    _ => {
                        return Err(TreeError::Invalid(format!(
                            "slot {} must hold either a span or nested intents",
                            self.label
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Open(String),
    Close,
    Copy(usize),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Open(l) => write!(f, "({l}"),
            Action::Close => write!(f, ")"),
            Action::Copy(i) => write!(f, "@{i}"),
        }
    }
}

pub type ActionSequence = Vec<Action>;

// ---------------------------------------------------------------------------
// Bracket text

#[derive(Debug, Clone, PartialEq)]
enum Lexeme {
    Open(String),
    Close,
    Quoted(String),
}

fn lex(text: &str) -> Result<Vec<(usize, Lexeme)>, TreeError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c == b'(' {
            let start = i;
            i += 1;
            let lstart = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'(' && bytes[i] != b')' && bytes[i] != b'"' {
                i += 1;
            }
            if lstart == i {
                return Err(TreeError::Invalid(format!("missing label after '(' at byte {start}")));
            }
            out.push((start, Lexeme::Open(text[lstart..i].to_string())));
        } else if c == b')' {
            out.push((i, Lexeme::Close));
            i += 1;
        } else if c == b'"' {
            let start = i;
            i += 1;
            let qstart = i;
            while i < bytes.len() && bytes[i] != b'"' {
                i += 1;
            }
            if i >= bytes.len() {
                return Err(TreeError::Invalid(format!("unterminated quote at byte {start}")));
            }
            out.push((start, Lexeme::Quoted(text[qstart..i].to_string())));
            i += 1;
        } else {
            return Err(TreeError::Invalid(format!("unexpected character {:?} at byte {i}", c as char)));
        }
    }
    Ok(out)
}

/// Parses canonical (or loosely spaced) bracket text, resolving each quoted
/// span to the leftmost occurrence in `query_tokens` that starts at or after
/// the end of the previous span.
pub fn parse_bracketed<S: AsRef<str>>(text: &str, query_tokens: &[S]) -> Result<ParseTree, TreeError> {
    let lexemes = lex(text)?;
    if lexemes.is_empty() {
        return Err(TreeError::EmptyInput);
    }
    // bracket balance is checked before anything else so that the error is
    // reported as such rather than as a structural problem
    let mut depth = 0i64;
    for (pos, lx) in &lexemes {
        match lx {
            Lexeme::Open(_) => depth += 1,
            Lexeme::Close => {
                depth -= 1;
                if depth < 0 {
                    return Err(TreeError::UnbalancedBrackets(*pos));
                }
            }
            Lexeme::Quoted(_) => {}
        }
    }
    if depth != 0 {
        return Err(TreeError::UnbalancedBrackets(text.len()));
    }

    let tokens: Vec<&str> = query_tokens.iter().map(|t| t.as_ref()).collect();
    let mut p = BracketParser { lexemes: &lexemes, pos: 0, tokens: &tokens, cursor: 0 };
    let tree = p.node()?;
    if p.pos != lexemes.len() {
        return Err(TreeError::Invalid(format!("trailing input at byte {}", lexemes[p.pos].0)));
    }
    tree.validate(tokens.len())?;
    Ok(tree)
}

struct BracketParser<'a> {
    lexemes: &'a [(usize, Lexeme)],
    pos: usize,
    tokens: &'a [&'a str],
    cursor: usize,
}

impl BracketParser<'_> {
    fn node(&mut self) -> Result<ParseTree, TreeError> {
        let label = match self.lexemes.get(self.pos) {
            Some((_, Lexeme::Open(l))) => l.clone(),
            Some((at, _)) => return Err(TreeError::Invalid(format!("expected '(' at byte {at}"))),
            None => return Err(TreeError::EmptyInput),
        };
        let kind = NodeKind::of_label(&label)
            .ok_or_else(|| TreeError::Invalid(format!("label {label} lacks an IN:/SL: prefix")))?;
        self.pos += 1;
        let mut node = ParseTree { kind, label, span: Vec::new(), children: Vec::new() };
        loop {
            match self.lexemes.get(self.pos) {
                Some((_, Lexeme::Close)) => {
                    self.pos += 1;
                    return Ok(node);
                }
                Some((_, Lexeme::Open(_))) => node.children.push(self.node()?),
                Some((_, Lexeme::Quoted(q))) => {
                    let span = self.resolve(q)?;
                    node.span.extend(span);
                    self.pos += 1;
                }
                None => return Err(TreeError::UnbalancedBrackets(usize::MAX)),
            }
        }
    }

    fn resolve(&mut self, quoted: &str) -> Result<Vec<usize>, TreeError> {
        let needle: Vec<&str> = quoted.split_whitespace().collect();
        if needle.is_empty() {
            return Err(TreeError::UnknownSpan(quoted.to_string()));
        }
        let n = needle.len();
        let found = (self.cursor..self.tokens.len().saturating_sub(n - 1))
            .find(|&s| self.tokens[s..s + n] == needle[..])
            .ok_or_else(|| TreeError::UnknownSpan(quoted.to_string()))?;
        self.cursor = found + n;
        Ok((found..found + n).collect())
    }
}

/// Canonical single-space bracket text.
pub fn serialize<S: AsRef<str>>(tree: &ParseTree, query_tokens: &[S]) -> String {
    let mut out = String::new();
    write_node(tree, query_tokens, &mut out);
    out
}

fn write_node<S: AsRef<str>>(tree: &ParseTree, tokens: &[S], out: &mut String) {
    out.push('(');
    out.push_str(&tree.label);
    out.push(' ');
    if !tree.span.is_empty() {
        out.push('"');
        for (k, &i) in tree.span.iter().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            out.push_str(tokens.get(i).map(|t| t.as_ref()).unwrap_or("<oob>"));
        }
        out.push_str("\" ");
    }
    for c in &tree.children {
        write_node(c, tokens, out);
        out.push(' ');
    }
    out.push(')');
}

/// Canonical form of bracket text: parse then re-serialize.
pub fn canonicalize<S: AsRef<str>>(text: &str, query_tokens: &[S]) -> Result<String, TreeError> {
    Ok(serialize(&parse_bracketed(text, query_tokens)?, query_tokens))
}

// ---------------------------------------------------------------------------
// Action sequences

/// Depth-first OPEN/COPY/CLOSE flattening. The root OPEN is always position 0.
pub fn linearize(tree: &ParseTree) -> ActionSequence {
    let mut out = Vec::with_capacity(2 * tree.node_count() + tree.span_token_count());
    push_actions(tree, &mut out);
    out
}

fn push_actions(tree: &ParseTree, out: &mut ActionSequence) {
    out.push(Action::Open(tree.label.clone()));
    out.extend(tree.span.iter().map(|&i| Action::Copy(i)));
    for c in &tree.children {
        push_actions(c, out);
    }
    out.push(Action::Close);
}

/// Strict inverse of [`linearize`].
pub fn delinearize<S: AsRef<str>>(actions: &[Action], query_tokens: &[S]) -> Result<ParseTree, TreeError> {
    let n = query_tokens.len();
    let mut stack: Vec<ParseTree> = Vec::new();
    let mut root: Option<ParseTree> = None;
    for (pos, a) in actions.iter().enumerate() {
        let bad = |reason: &str| TreeError::MalformedSequence { pos, reason: reason.to_string() };
        if root.is_some() {
            return Err(bad("actions after the root closed"));
        }
        match a {
            Action::Open(label) => {
                let kind = NodeKind::of_label(label).ok_or_else(|| bad("label lacks an IN:/SL: prefix"))?;
                match stack.last() {
                    None if kind != NodeKind::Intent => return Err(bad("root must be an intent")),
                    Some(parent) if parent.kind == kind => return Err(bad("intent/slot nodes must alternate")),
                    Some(parent) if !parent.span.is_empty() => return Err(bad("slot mixes tokens and nested intents")),
                    _ => {}
                }
                stack.push(ParseTree { kind, label: label.clone(), span: Vec::new(), children: Vec::new() });
            }
            Action::Copy(i) => {
                let top = stack.last_mut().ok_or_else(|| bad("COPY before the first OPEN"))?;
                if top.kind != NodeKind::Slot {
                    return Err(bad("COPY outside a slot"));
                }
                if !top.children.is_empty() {
                    return Err(bad("slot mixes tokens and nested intents"));
                }
                if *i >= n {
                    return Err(bad("COPY index out of bounds"));
                }
                if let Some(&last) = top.span.last() {
                    if *i != last + 1 {
                        return Err(bad("non-contiguous span"));
                    }
                }
                top.span.push(*i);
            }
            Action::Close => {
                let node = stack.pop().ok_or_else(|| bad("CLOSE without matching OPEN"))?;
                if node.kind == NodeKind::Slot && node.span.is_empty() && node.children.is_empty() {
                    return Err(bad("empty slot"));
                }
                match stack.last_mut() {
                    Some(parent) => parent.children.push(node),
                    None => root = Some(node),
                }
            }
        }
    }
    let tree = root.ok_or_else(|| TreeError::MalformedSequence {
        pos: actions.len(),
        reason: if actions.is_empty() { "empty sequence".into() } else { "unbalanced: root never closed".into() },
    })?;
    tree.validate(n).map_err(|e| TreeError::MalformedSequence { pos: actions.len(), reason: e.to_string() })?;
    Ok(tree)
}

/// Cuts a decoded sequence right after the CLOSE that balances the first OPEN.
/// Sequences that never balance are returned whole.
pub fn truncate_at_root_close(actions: &[Action]) -> &[Action] {
    let mut depth = 0i64;
    for (i, a) in actions.iter().enumerate() {
        match a {
            Action::Open(_) => depth += 1,
            Action::Close => {
                depth -= 1;
                if depth <= 0 {
                    return &actions[..=i];
                }
            }
            Action::Copy(_) => {}
        }
    }
    actions
}

/// Best-effort reconstruction used for model output: actions that cannot be
/// placed are skipped and unclosed nodes are closed. The flag is `true` only
/// when the strict [`delinearize`] accepts the sequence.
pub fn delinearize_lenient<S: AsRef<str>>(actions: &[Action], query_tokens: &[S]) -> (ParseTree, bool) {
    let actions = truncate_at_root_close(actions);
    if let Ok(t) = delinearize(actions, query_tokens) {
        return (t, true);
    }
    let n = query_tokens.len();
    let mut stack: Vec<ParseTree> = Vec::new();
    let mut root: Option<ParseTree> = None;
    let close = |stack: &mut Vec<ParseTree>, root: &mut Option<ParseTree>| {
        if let Some(node) = stack.pop() {
            let empty_slot = node.kind == NodeKind::Slot && node.span.is_empty() && node.children.is_empty();
            match stack.last_mut() {
                Some(parent) if !empty_slot => parent.children.push(node),
                Some(_) => {}
                None => *root = Some(node),
            }
        }
    };
    for a in actions {
        if root.is_some() {
            break;
        }
        match a {
            Action::Open(label) => {
                let Some(kind) = NodeKind::of_label(label) else { continue };
                let ok = match stack.last() {
                    None => kind == NodeKind::Intent,
                    Some(p) => p.kind != kind && p.span.is_empty(),
                };
                if ok {
                    stack.push(ParseTree { kind, label: label.clone(), span: Vec::new(), children: Vec::new() });
                }
            }
            Action::Copy(i) => {
                if let Some(top) = stack.last_mut() {
                    let contiguous = top.span.last().map_or(true, |&l| *i == l + 1);
                    if top.kind == NodeKind::Slot && top.children.is_empty() && *i < n && contiguous {
                        top.span.push(*i);
                    }
                }
            }
            Action::Close => close(&mut stack, &mut root),
        }
    }
    while root.is_none() && !stack.is_empty() {
        close(&mut stack, &mut root);
    }
    let tree = root.unwrap_or_else(|| ParseTree::intent(format!("{INTENT_PREFIX}INVALID"), Vec::new()));
    (tree, false)
}

/// Whole-tree equality: labels, structure, child order and spans.
pub fn exact_match(a: &ParseTree, b: &ParseTree) -> bool {
    a == b
}

pub fn top_intent(tree: &ParseTree) -> &str {
    &tree.label
}
