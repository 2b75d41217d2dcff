//! Expression trees stored as flat prefix-order element arrays.
//!
//! Every subtree occupies a contiguous range of the array, so subtree
//! containment is range inclusion and replacement is a slice splice.
//! Evaluation fills a [`SemanticsTable`] holding the output vector of every
//! subtree over all input rows in a single bottom-up pass.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Divisors with magnitude below this make a division node return 1.0.
pub const PROTECTED_DIV_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("empty tree")]
    Empty,
    #[error("invalid prefix encoding: {0}")]
    Malformed(String),
    #[error("parse error at token {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("node index {index} out of range for tree of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("range [{start}, {end}) is not a subtree span")]
    InvalidSpan { start: usize, end: usize },
    #[error("circular replacement: target [{}, {}) lies inside source [{}, {})", target.start, target.end, donor.start, donor.end)]
    CircularReplacement { target: Span, donor: Span },
    #[error("feature x{index} requested but inputs have {available} columns")]
    InputMismatch { index: usize, available: usize },
    #[error("input columns must be non-empty and of equal length")]
    RaggedInputs,
    #[error("constant {0} is not finite")]
    NonFiniteConstant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

impl Op {
    pub const ALL: [Op; 4] = [Op::Add, Op::Sub, Op::Mul, Op::Div];

    pub fn arity(self) -> usize {
        2
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "-",
            Op::Mul => "*",
            Op::Div => "div",
        }
    }

    fn from_symbol(s: &str) -> Option<Op> {
        match s {
            "+" => Some(Op::Add),
            "-" => Some(Op::Sub),
            "*" => Some(Op::Mul),
            "div" | "/" => Some(Op::Div),
            _ => None,
        }
    }

    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        let v = match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
            Op::Div => {
                if b.abs() < PROTECTED_DIV_EPS {
                    1.0
                } else {
                    a / b
                }
            }
        };
        saturate(v)
    }

    fn apply_slices(self, a: &[f64], b: &[f64], out: &mut [f64]) {
        match self {
            Op::Add => out.iter_mut().zip(a.iter().zip(b)).for_each(|(o, (x, y))| *o = saturate(x + y)),
            Op::Sub => out.iter_mut().zip(a.iter().zip(b)).for_each(|(o, (x, y))| *o = saturate(x - y)),
            Op::Mul => out.iter_mut().zip(a.iter().zip(b)).for_each(|(o, (x, y))| *o = saturate(x * y)),
            Op::Div => out.iter_mut().zip(a.iter().zip(b)).for_each(|(o, (x, y))| *o = Op::Div.apply(*x, *y)),
        }
    }
}

/// Overflow saturates at the largest finite magnitude so semantics never hold Inf.
#[inline]
fn saturate(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else if v > 0.0 {
        f64::MAX
    } else if v < 0.0 {
        f64::MIN
    } else {
        0.0
    }
}

/// A single program element. Constants compare and hash by bit pattern so
/// that structural equality coincides with equality of canonical text.
#[derive(Clone, Copy, Debug)]
pub enum Element {
    Function(Op),
    Feature(usize),
    Constant(f64),
}

impl Element {
    pub fn arity(&self) -> usize {
        match self {
            Element::Function(op) => op.arity(),
            _ => 0,
        }
    }

    pub fn is_terminal(&self) -> bool {
        !matches!(self, Element::Function(_))
    }
}

impl PartialEq for Element {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Element::Function(a), Element::Function(b)) => a == b,
            (Element::Feature(a), Element::Feature(b)) => a == b,
            (Element::Constant(a), Element::Constant(b)) => a.to_bits() == b.to_bits(),
            _ => false,
        }
    }
}

impl Eq for Element {}

impl Hash for Element {
    fn hash<H: Hasher>(&self, state: &mut H) {
        match self {
            Element::Function(op) => {
                0u8.hash(state);
                op.hash(state);
            }
            Element::Feature(i) => {
                1u8.hash(state);
                i.hash(state);
            }
            Element::Constant(c) => {
                2u8.hash(state);
                c.to_bits().hash(state);
            }
        }
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Element::Function(op) => f.write_str(op.symbol()),
            Element::Feature(i) => write!(f, "x{i}"),
            Element::Constant(c) => write!(f, "{c}"),
        }
    }
}

/// Half-open index range `[start, end)` of a subtree within its tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    /// True when `other` lies within `self` (including equality).
    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// A complete prefix encoding of an expression.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Tree {
    elements: Vec<Element>,
}

impl Tree {
    pub fn new(elements: Vec<Element>) -> Result<Self, ExprError> {
        validate(&elements)?;
        Ok(Tree { elements })
    }

    /// Caller guarantees `elements` is a complete prefix encoding.
    pub(crate) fn from_valid(elements: Vec<Element>) -> Self {
        debug_assert!(validate(&elements).is_ok());
        Tree { elements }
    }

    pub fn terminal(element: Element) -> Self {
        assert!(element.is_terminal());
        Tree { elements: vec![element] }
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn into_elements(self) -> Vec<Element> {
        self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn subtree_span(&self, root: usize) -> Result<Span, ExprError> {
        if root >= self.elements.len() {
            return Err(ExprError::IndexOutOfRange { index: root, len: self.elements.len() });
        }
        let mut open = 1usize;
        let mut end = root;
        while open > 0 {
            open = open - 1 + self.elements[end].arity();
            end += 1;
        }
        Ok(Span::new(root, end))
    }

    /// Node count of the subtree rooted at every index, in one reverse pass.
    pub fn subtree_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.elements.len()];
        let mut stack: Vec<usize> = Vec::new();
        for (i, el) in self.elements.iter().enumerate().rev() {
            let mut size = 1;
            for _ in 0..el.arity() {
                size += stack.pop().expect("valid prefix encoding");
            }
            sizes[i] = size;
            stack.push(size);
        }
        sizes
    }

    pub fn spans(&self) -> Vec<Span> {
        self.subtree_sizes().into_iter().enumerate().map(|(i, s)| Span::new(i, i + s)).collect()
    }

    /// Depth in edges: a lone terminal has depth 0.
    pub fn depth(&self) -> usize {
        let mut depths = vec![0usize; self.elements.len()];
        let mut stack: Vec<usize> = Vec::new();
        for (i, el) in self.elements.iter().enumerate().rev() {
            let mut d = 0;
            for _ in 0..el.arity() {
                d = d.max(stack.pop().expect("valid prefix encoding") + 1);
            }
            depths[i] = d;
            stack.push(d);
        }
        depths[0]
    }

    pub fn terminal_count(&self) -> usize {
        self.elements.iter().filter(|e| e.is_terminal()).count()
    }

    /// Smallest column count the inputs must have to evaluate this tree.
    pub fn required_features(&self) -> usize {
        self.elements
            .iter()
            .filter_map(|e| match e {
                Element::Feature(i) => Some(i + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn subtree(&self, span: Span) -> Result<Tree, ExprError> {
        self.check_span(span)?;
        Ok(Tree::from_valid(self.elements[span.start..span.end].to_vec()))
    }

    fn check_span(&self, span: Span) -> Result<(), ExprError> {
        if span.start >= self.elements.len() || self.subtree_span(span.start)? != span {
            return Err(ExprError::InvalidSpan { start: span.start, end: span.end });
        }
        Ok(())
    }

    /// Replace the subtree at `target` with a copy of the subtree at `source`,
    /// both spans referring to this (original) tree.
    pub fn replace_span(&self, target: Span, source: Span) -> Result<Tree, ExprError> {
        self.check_span(target)?;
        self.check_span(source)?;
        if target == source {
            return Ok(self.clone());
        }
        if source.contains(&target) {
            return Err(ExprError::CircularReplacement { target, donor: source });
        }
        Ok(self.splice_unchecked(target, &self.elements[source.start..source.end]))
    }

    /// Replace the subtree at `target` with the subtree at `source` of `donor`.
    pub fn splice(&self, target: Span, donor: &Tree, source: Span) -> Result<Tree, ExprError> {
        self.check_span(target)?;
        donor.check_span(source)?;
        Ok(self.splice_unchecked(target, &donor.elements[source.start..source.end]))
    }

    pub(crate) fn splice_unchecked(&self, target: Span, replacement: &[Element]) -> Tree {
        let mut out = Vec::with_capacity(self.elements.len() - target.len() + replacement.len());
        out.extend_from_slice(&self.elements[..target.start]);
        out.extend_from_slice(replacement);
        out.extend_from_slice(&self.elements[target.end..]);
        Tree::from_valid(out)
    }

    /// Evaluate over column-major inputs, caching the output of every subtree.
    pub fn evaluate<C: AsRef<[f64]>>(&self, columns: &[C]) -> Result<SemanticsTable, ExprError> {
        let n = check_inputs(columns)?;
        let needed = self.required_features();
        if needed > columns.len() {
            return Err(ExprError::InputMismatch { index: needed - 1, available: columns.len() });
        }
        let sizes = self.subtree_sizes();
        let mut values = vec![0.0f64; self.elements.len() * n];
        for i in (0..self.elements.len()).rev() {
            let (head, tail) = values.split_at_mut((i + 1) * n);
            let out = &mut head[i * n..];
            match self.elements[i] {
                Element::Feature(f) => out.copy_from_slice(columns[f].as_ref()),
                Element::Constant(c) => out.fill(c),
                Element::Function(op) => {
                    let left = i + 1;
                    let right = left + sizes[left];
                    let a = &tail[(left - i - 1) * n..(left - i) * n];
                    let b = &tail[(right - i - 1) * n..(right - i) * n];
                    op.apply_slices(a, b, out);
                }
            }
        }
        Ok(SemanticsTable { n, values })
    }

    /// Output vector of the whole tree.
    pub fn predict<C: AsRef<[f64]>>(&self, columns: &[C]) -> Result<Vec<f64>, ExprError> {
        Ok(self.evaluate(columns)?.root().to_vec())
    }
}

fn check_inputs<C: AsRef<[f64]>>(columns: &[C]) -> Result<usize, ExprError> {
    let n = columns.first().map(|c| c.as_ref().len()).unwrap_or(0);
    if n == 0 || columns.iter().any(|c| c.as_ref().len() != n) {
        return Err(ExprError::RaggedInputs);
    }
    Ok(n)
}

fn validate(elements: &[Element]) -> Result<(), ExprError> {
    if elements.is_empty() {
        return Err(ExprError::Empty);
    }
    let mut open = 1usize;
    for (i, el) in elements.iter().enumerate() {
        if open == 0 {
            return Err(ExprError::Malformed(format!("trailing element at index {i}")));
        }
        if let Element::Constant(c) = el {
            if !c.is_finite() {
                return Err(ExprError::NonFiniteConstant(*c));
            }
        }
        open = open - 1 + el.arity();
    }
    if open != 0 {
        return Err(ExprError::Malformed(format!("{open} operand slot(s) left unfilled")));
    }
    Ok(())
}

/// Output vector of every subtree, indexed by the subtree's root position.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticsTable {
    n: usize,
    values: Vec<f64>,
}

impl SemanticsTable {
    /// Number of instances each vector covers.
    pub fn instances(&self) -> usize {
        self.n
    }

    /// Number of subtrees (equals the tree length).
    pub fn len(&self) -> usize {
        self.values.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, node: usize) -> &[f64] {
        &self.values[node * self.n..(node + 1) * self.n]
    }

    pub fn root(&self) -> &[f64] {
        self.get(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n)
    }
}

impl fmt::Display for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut open: Vec<usize> = Vec::new();
        for el in &self.elements {
            if !open.is_empty() {
                f.write_str(" ")?;
            }
            match el {
                Element::Function(op) => {
                    write!(f, "({}", op.symbol())?;
                    open.push(op.arity());
                }
                terminal => {
                    write!(f, "{terminal}")?;
                    while let Some(top) = open.last_mut() {
                        *top -= 1;
                        if *top > 0 {
                            break;
                        }
                        f.write_str(")")?;
                        open.pop();
                    }
                }
            }
        }
        Ok(())
    }
}

impl FromStr for Tree {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

fn tokenize(s: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, ch) in s.char_indices() {
        if ch == '(' || ch == ')' || ch.is_whitespace() {
            if let Some(st) = start.take() {
                tokens.push(&s[st..i]);
            }
            if !ch.is_whitespace() {
                tokens.push(&s[i..i + 1]);
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(st) = start {
        tokens.push(&s[st..]);
    }
    tokens
}

fn parse_terminal(tok: &str) -> Option<Element> {
    if let Some(idx) = tok.strip_prefix('x') {
        if !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()) {
            return idx.parse().ok().map(Element::Feature);
        }
        return None;
    }
    let first = tok.as_bytes()[0];
    if !(first.is_ascii_digit() || first == b'-' || first == b'+' || first == b'.') {
        return None;
    }
    tok.parse::<f64>().ok().filter(|v| v.is_finite()).map(Element::Constant)
}

/// Iterative parser for `expr := terminal | "(" op expr expr ")"`.
pub fn parse(s: &str) -> Result<Tree, ExprError> {
    let tokens = tokenize(s);
    let err = |position: usize, message: &str| ExprError::Parse { position, message: message.to_string() };
    let mut elements = Vec::new();
    let mut open: Vec<usize> = Vec::new();
    let mut pos = 0;
    while pos < tokens.len() {
        let tok = tokens[pos];
        // A new operand: consumes one slot of the enclosing application.
        let take_slot = |open: &mut Vec<usize>, elements: &Vec<Element>| -> Result<(), ExprError> {
            match open.last_mut() {
                Some(0) => Err(err(pos, "too many operands")),
                Some(top) => {
                    *top -= 1;
                    Ok(())
                }
                None if !elements.is_empty() => Err(err(pos, "trailing input after complete expression")),
                None => Ok(()),
            }
        };
        match tok {
            "(" => {
                take_slot(&mut open, &elements)?;
                let op_tok = tokens.get(pos + 1).ok_or_else(|| err(pos + 1, "expected operator"))?;
                let op =
                    Op::from_symbol(op_tok).ok_or_else(|| err(pos + 1, &format!("unknown operator '{op_tok}'")))?;
                elements.push(Element::Function(op));
                open.push(op.arity());
                pos += 2;
            }
            ")" => {
                match open.pop() {
                    Some(0) => {}
                    Some(_) => return Err(err(pos, "too few operands")),
                    None => return Err(err(pos, "unbalanced ')'")),
                }
                pos += 1;
            }
            _ => {
                take_slot(&mut open, &elements)?;
                let el = parse_terminal(tok).ok_or_else(|| err(pos, &format!("invalid terminal '{tok}'")))?;
                elements.push(el);
                pos += 1;
            }
        }
    }
    if !open.is_empty() {
        return Err(err(tokens.len(), "unexpected end of input"));
    }
    if elements.is_empty() {
        return Err(ExprError::Empty);
    }
    Tree::new(elements)
}

impl Serialize for Tree {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Tree {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse(&s).map_err(serde::de::Error::custom)
    }
}
