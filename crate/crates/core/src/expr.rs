//! Arithmetic expression language for problem coefficients.
//!
//! Generators, terminal payoffs and barrier surfaces can be given as plain
//! text. The grammar is deliberately small so that configurations stay
//! auditable:
//!
//! ```text
//! expression := term { ("+" | "-") term }
//! term       := unary { ("*" | "/") unary }
//! unary      := "-" unary | power
//! power      := atom [ "^" unary ]                  (right associative)
//! atom       := number | variable | call | "(" expression ")"
//! call       := function "(" expression { "," expression } ")"
//! function   := "abs" | "min" | "max" | "exp" | "log" | "sqrt"
//! variable   := "t" | "x" | "y" | "z"
//! number     := digits [ "." digits ] [ ("e" | "E") [ "+" | "-" ] digits ]
//! ```
//!
//! Each slot of a problem admits a fixed variable set (a terminal payoff may
//! only use `x`, a generator only `t`, `y`, `z`, a barrier surface only `t`,
//! `x`); [`parse`] rejects anything else with a byte offset. Evaluation is
//! IEEE double precision and never produces silent non-finite values:
//! division by zero, `0^negative`, `log` of a non-positive number, `sqrt` of
//! a negative number and overflow all surface as [`EvalError`]s.
//!
//! For inner loops an [`Expr`] can be flattened into a postfix [`Program`];
//! the two evaluators produce bit-identical results.

use std::fmt;
use thiserror::Error;

/// Maximum nesting depth accepted by the parser.
///
/// Keeps recursion bounded and lets [`Program::eval`] run on a fixed-size
/// value stack.
pub const MAX_DEPTH: usize = 64;

/// A variable usable inside an expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    /// Time coordinate.
    T,
    /// Spatial coordinate (the Brownian value at a node).
    X,
    /// Current solution value.
    Y,
    /// Martingale integrand.
    Z,
}

impl Var {
    pub const ALL: [Var; 4] = [Var::T, Var::X, Var::Y, Var::Z];

    pub fn name(self) -> &'static str {
        match self {
            Var::T => "t",
            Var::X => "x",
            Var::Y => "y",
            Var::Z => "z",
        }
    }

    fn from_name(name: &str) -> Option<Var> {
        match name {
            "t" => Some(Var::T),
            "x" => Some(Var::X),
            "y" => Some(Var::Y),
            "z" => Some(Var::Z),
            _ => None,
        }
    }

    fn bit(self) -> u8 {
        match self {
            Var::T => 1,
            Var::X => 2,
            Var::Y => 4,
            Var::Z => 8,
        }
    }
}

/// A set of admissible variables for one expression slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarSet(u8);

impl VarSet {
    pub const EMPTY: VarSet = VarSet(0);
    /// Terminal payoffs: `x` only.
    pub const POINT: VarSet = VarSet(2);
    /// Barrier surfaces and Itô coefficients: `t`, `x`.
    pub const SURFACE: VarSet = VarSet(1 | 2);
    /// Generators: `t`, `y`, `z`.
    pub const GENERATOR: VarSet = VarSet(1 | 4 | 8);

    pub fn of(vars: &[Var]) -> VarSet {
        let mut set = 0u8;
        for v in vars {
            set |= v.bit();
        }
        VarSet(set)
    }

    pub fn contains(self, var: Var) -> bool {
        self.0 & var.bit() != 0
    }

    pub fn is_subset_of(self, other: VarSet) -> bool {
        self.0 & !other.0 == 0
    }
}

impl fmt::Display for VarSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for v in Var::ALL {
            if self.contains(v) {
                if !first {
                    write!(f, ", ")?;
                }
                write!(f, "{}", v.name())?;
                first = false;
            }
        }
        Ok(())
    }
}

/// Built-in functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Abs,
    Min,
    Max,
    Exp,
    Log,
    Sqrt,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        match name {
            "abs" => Some(Func::Abs),
            "min" => Some(Func::Min),
            "max" => Some(Func::Max),
            "exp" => Some(Func::Exp),
            "log" => Some(Func::Log),
            "sqrt" => Some(Func::Sqrt),
            _ => None,
        }
    }
}

/// Binary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

/// Variable bindings for evaluation. Unused slots are simply ignored.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Scope {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Scope {
    pub fn get(&self, var: Var) -> f64 {
        match var {
            Var::T => self.t,
            Var::X => self.x,
            Var::Y => self.y,
            Var::Z => self.z,
        }
    }
}

/// A parsed expression tree. Nodes remember their source byte range so both
/// parse- and evaluation-time diagnostics can point into the original text.
#[derive(Debug, Clone)]
pub struct Expr {
    kind: ExprKind,
    span: (usize, usize),
}

#[derive(Debug, Clone)]
enum ExprKind {
    Number(f64),
    Variable(Var),
    Negate(Box<Expr>),
    Binary {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    Call {
        func: Func,
        args: Vec<Expr>,
    },
}

/// Parse failure, carrying the byte offset of the offending token.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseError {
    #[error("unexpected character `{ch}` at offset {offset}")]
    UnexpectedChar { ch: char, offset: usize },
    #[error("invalid number literal at offset {offset}")]
    InvalidNumber { offset: usize },
    #[error("unexpected end of expression at offset {offset}")]
    UnexpectedEnd { offset: usize },
    #[error("expected {expected} at offset {offset}")]
    Expected { expected: &'static str, offset: usize },
    #[error("unknown variable {name} at offset {offset}")]
    UnknownVariable { name: String, offset: usize },
    #[error("variable {name} is not allowed here (allowed: {allowed}) at offset {offset}")]
    DisallowedVariable {
        name: &'static str,
        allowed: VarSet,
        offset: usize,
    },
    #[error("unknown function {name} at offset {offset}")]
    UnknownFunction { name: String, offset: usize },
    #[error("{func} takes {expected} argument(s), got {got} at offset {offset}")]
    WrongArity {
        func: &'static str,
        expected: usize,
        got: usize,
        offset: usize,
    },
    #[error("expression nested deeper than {MAX_DEPTH} levels at offset {offset}")]
    TooDeep { offset: usize },
    #[error("trailing input at offset {offset}")]
    TrailingInput { offset: usize },
}

/// Evaluation failure. These are raised instead of returning NaN or an
/// infinity, since a single such value would silently corrupt a whole
/// backward sweep.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("division by zero at offset {offset}")]
    DivisionByZero { offset: usize },
    #[error("zero raised to negative power {exponent} at offset {offset}")]
    ZeroToNegativePower { exponent: f64, offset: usize },
    #[error("logarithm of non-positive value {value} at offset {offset}")]
    LogDomain { value: f64, offset: usize },
    #[error("square root of negative value {value} at offset {offset}")]
    SqrtDomain { value: f64, offset: usize },
    #[error("non-finite result at offset {offset}")]
    NonFinite { offset: usize },
}

/// Parse `source` into an [`Expr`], admitting only variables in `allowed`.
pub fn parse(source: &str, allowed: VarSet) -> Result<Expr, ParseError> {
    let mut parser = Parser {
        tokens: tokenize(source)?,
        pos: 0,
        allowed,
        end: source.len(),
    };
    let expr = parser.expression(0)?;
    match parser.peek() {
        Some(tok) => Err(ParseError::TrailingInput { offset: tok.offset }),
        None => Ok(expr),
    }
}

impl Expr {
    /// Source byte range `(start, end)` this node was parsed from.
    pub fn span(&self) -> (usize, usize) {
        self.span
    }

    /// The set of variables that actually occur in the tree.
    pub fn variables(&self) -> VarSet {
        let mut set = VarSet::EMPTY;
        self.collect_vars(&mut set);
        set
    }

    fn collect_vars(&self, set: &mut VarSet) {
        match &self.kind {
            ExprKind::Number(_) => {}
            ExprKind::Variable(v) => set.0 |= v.bit(),
            ExprKind::Negate(inner) => inner.collect_vars(set),
            ExprKind::Binary { lhs, rhs, .. } => {
                lhs.collect_vars(set);
                rhs.collect_vars(set);
            }
            ExprKind::Call { args, .. } => {
                for a in args {
                    a.collect_vars(set);
                }
            }
        }
    }

    /// Tree-walking evaluation under `scope`.
    pub fn eval(&self, scope: &Scope) -> Result<f64, EvalError> {
        match &self.kind {
            ExprKind::Number(v) => Ok(*v),
            ExprKind::Variable(var) => Ok(scope.get(*var)),
            ExprKind::Negate(inner) => Ok(-inner.eval(scope)?),
            ExprKind::Binary { op, lhs, rhs } => {
                let l = lhs.eval(scope)?;
                let r = rhs.eval(scope)?;
                apply_binary(*op, l, r, self.span.0)
            }
            ExprKind::Call { func, args } => match func.arity() {
                1 => {
                    let v = args[0].eval(scope)?;
                    apply_unary_fn(*func, v, self.span.0)
                }
                _ => {
                    let a = args[0].eval(scope)?;
                    let b = args[1].eval(scope)?;
                    apply_binary_fn(*func, a, b, self.span.0)
                }
            },
        }
    }

    /// Flatten into a postfix [`Program`] for repeated evaluation.
    ///
    /// `Program::eval` and [`Expr::eval`] apply operations in the same order
    /// and are bit-identical.
    pub fn compile(&self) -> Program {
        let mut instrs = Vec::new();
        self.emit(&mut instrs);
        let max_depth = stack_depth(&instrs);
        debug_assert!(max_depth <= MAX_DEPTH);
        Program { instrs, max_depth }
    }

    fn emit(&self, out: &mut Vec<Instr>) {
        let offset = self.span.0;
        match &self.kind {
            ExprKind::Number(v) => out.push(Instr::Const(*v)),
            ExprKind::Variable(v) => out.push(Instr::Load(*v)),
            ExprKind::Negate(inner) => {
                inner.emit(out);
                out.push(Instr::Neg);
            }
            ExprKind::Binary { op, lhs, rhs } => {
                lhs.emit(out);
                rhs.emit(out);
                out.push(Instr::Binary { op: *op, offset });
            }
            ExprKind::Call { func, args } => {
                for a in args {
                    a.emit(out);
                }
                out.push(Instr::Call { func: *func, offset });
            }
        }
    }

    /// Structural equality, ignoring source spans.
    pub fn structurally_equal(&self, other: &Expr) -> bool {
        match (&self.kind, &other.kind) {
            (ExprKind::Number(a), ExprKind::Number(b)) => a.to_bits() == b.to_bits(),
            (ExprKind::Variable(a), ExprKind::Variable(b)) => a == b,
            (ExprKind::Negate(a), ExprKind::Negate(b)) => a.structurally_equal(b),
            (
                ExprKind::Binary { op, lhs, rhs },
                ExprKind::Binary {
                    op: op2,
                    lhs: lhs2,
                    rhs: rhs2,
                },
            ) => op == op2 && lhs.structurally_equal(lhs2) && rhs.structurally_equal(rhs2),
            (
                ExprKind::Call { func, args },
                ExprKind::Call {
                    func: func2,
                    args: args2,
                },
            ) => {
                func == func2
                    && args.len() == args2.len()
                    && args
                        .iter()
                        .zip(args2)
                        .all(|(a, b)| a.structurally_equal(b))
            }
            _ => false,
        }
    }
}

/// Canonical form: every compound subexpression is parenthesized, numbers
/// use the shortest round-trip decimal. Re-parsing the printed form yields a
/// structurally identical tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ExprKind::Number(v) => {
                if v.is_sign_negative() {
                    write!(f, "(-{})", -v)
                } else {
                    write!(f, "{v}")
                }
            }
            ExprKind::Variable(v) => write!(f, "{}", v.name()),
            ExprKind::Negate(inner) => write!(f, "(-{inner})"),
            ExprKind::Binary { op, lhs, rhs } => write!(f, "({lhs} {} {rhs})", op.symbol()),
            ExprKind::Call { func, args } => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

// ─── Shared operation semantics ─────────────────────────────────────────────

fn apply_binary(op: BinOp, l: f64, r: f64, offset: usize) -> Result<f64, EvalError> {
    let out = match op {
        BinOp::Add => l + r,
        BinOp::Sub => l - r,
        BinOp::Mul => l * r,
        BinOp::Div => {
            if r == 0.0 {
                return Err(EvalError::DivisionByZero { offset });
            }
            l / r
        }
        BinOp::Pow => {
            if l == 0.0 && r < 0.0 {
                return Err(EvalError::ZeroToNegativePower {
                    exponent: r,
                    offset,
                });
            }
            l.powf(r)
        }
    };
    if out.is_finite() {
        Ok(out)
    } else {
        Err(EvalError::NonFinite { offset })
    }
}

fn apply_unary_fn(func: Func, v: f64, offset: usize) -> Result<f64, EvalError> {
    let out = match func {
        Func::Abs => v.abs(),
        Func::Exp => v.exp(),
        Func::Log => {
            if v <= 0.0 {
                return Err(EvalError::LogDomain { value: v, offset });
            }
            v.ln()
        }
        Func::Sqrt => {
            if v < 0.0 {
                return Err(EvalError::SqrtDomain { value: v, offset });
            }
            v.sqrt()
        }
        Func::Min | Func::Max => unreachable!("binary function"),
    };
    if out.is_finite() {
        Ok(out)
    } else {
        Err(EvalError::NonFinite { offset })
    }
}

fn apply_binary_fn(func: Func, a: f64, b: f64, offset: usize) -> Result<f64, EvalError> {
    let out = match func {
        Func::Min => a.min(b),
        Func::Max => a.max(b),
        _ => unreachable!("unary function"),
    };
    if out.is_finite() {
        Ok(out)
    } else {
        Err(EvalError::NonFinite { offset })
    }
}

// ─── Compiled form ──────────────────────────────────────────────────────────

/// A flat postfix program compiled from an [`Expr`].
#[derive(Debug, Clone)]
pub struct Program {
    instrs: Vec<Instr>,
    max_depth: usize,
}

#[derive(Debug, Clone, Copy)]
enum Instr {
    Const(f64),
    Load(Var),
    Neg,
    Binary { op: BinOp, offset: usize },
    Call { func: Func, offset: usize },
}

fn stack_depth(instrs: &[Instr]) -> usize {
    let mut depth = 0usize;
    let mut max = 0usize;
    for instr in instrs {
        match instr {
            Instr::Const(_) | Instr::Load(_) => depth += 1,
            Instr::Neg => {}
            Instr::Binary { .. } => depth -= 1,
            Instr::Call { func, .. } => depth -= func.arity() - 1,
        }
        max = max.max(depth);
    }
    max
}

impl Program {
    /// Evaluate on a fixed-size stack. Semantically identical to
    /// [`Expr::eval`].
    pub fn eval(&self, scope: &Scope) -> Result<f64, EvalError> {
        let mut stack = [0.0f64; MAX_DEPTH];
        let mut top = 0usize;
        for instr in &self.instrs {
            match *instr {
                Instr::Const(v) => {
                    stack[top] = v;
                    top += 1;
                }
                Instr::Load(var) => {
                    stack[top] = scope.get(var);
                    top += 1;
                }
                Instr::Neg => {
                    stack[top - 1] = -stack[top - 1];
                }
                Instr::Binary { op, offset } => {
                    let r = stack[top - 1];
                    let l = stack[top - 2];
                    stack[top - 2] = apply_binary(op, l, r, offset)?;
                    top -= 1;
                }
                Instr::Call { func, offset } => {
                    if func.arity() == 1 {
                        stack[top - 1] = apply_unary_fn(func, stack[top - 1], offset)?;
                    } else {
                        let b = stack[top - 1];
                        let a = stack[top - 2];
                        stack[top - 2] = apply_binary_fn(func, a, b, offset)?;
                        top -= 1;
                    }
                }
            }
        }
        debug_assert_eq!(top, 1);
        Ok(stack[0])
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }
}

// ─── Lexer ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Number(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

#[derive(Debug, Clone, PartialEq)]
struct Token {
    kind: TokenKind,
    offset: usize,
}

fn tokenize(source: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = source.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0usize;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let offset = i;
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
            }
            '+' => {
                tokens.push(Token { kind: TokenKind::Plus, offset });
                i += 1;
            }
            '-' => {
                tokens.push(Token { kind: TokenKind::Minus, offset });
                i += 1;
            }
            '*' => {
                tokens.push(Token { kind: TokenKind::Star, offset });
                i += 1;
            }
            '/' => {
                tokens.push(Token { kind: TokenKind::Slash, offset });
                i += 1;
            }
            '^' => {
                tokens.push(Token { kind: TokenKind::Caret, offset });
                i += 1;
            }
            '(' => {
                tokens.push(Token { kind: TokenKind::LParen, offset });
                i += 1;
            }
            ')' => {
                tokens.push(Token { kind: TokenKind::RParen, offset });
                i += 1;
            }
            ',' => {
                tokens.push(Token { kind: TokenKind::Comma, offset });
                i += 1;
            }
            '0'..='9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    if i >= bytes.len() || !bytes[i].is_ascii_digit() {
                        return Err(ParseError::InvalidNumber { offset: start });
                    }
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &source[start..i];
                let value: f64 = text
                    .parse()
                    .map_err(|_| ParseError::InvalidNumber { offset: start })?;
                tokens.push(Token {
                    kind: TokenKind::Number(value),
                    offset: start,
                });
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                tokens.push(Token {
                    kind: TokenKind::Ident(source[start..i].to_string()),
                    offset: start,
                });
            }
            _ => return Err(ParseError::UnexpectedChar { ch: c, offset }),
        }
    }
    Ok(tokens)
}

// ─── Parser ─────────────────────────────────────────────────────────────────

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    allowed: VarSet,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn advance(&mut self) -> Option<Token> {
        let tok = self.tokens.get(self.pos).cloned();
        if tok.is_some() {
            self.pos += 1;
        }
        tok
    }

    fn offset(&self) -> usize {
        self.peek().map_or(self.end, |t| t.offset)
    }

    fn check_depth(&self, depth: usize) -> Result<(), ParseError> {
        if depth >= MAX_DEPTH {
            Err(ParseError::TooDeep {
                offset: self.offset(),
            })
        } else {
            Ok(())
        }
    }

    fn expression(&mut self, depth: usize) -> Result<Expr, ParseError> {
        self.check_depth(depth)?;
        let mut lhs = self.term(depth + 1)?;
        while let Some(tok) = self.peek() {
            let op = match tok.kind {
                TokenKind::Plus => BinOp::Add,
                TokenKind::Minus => BinOp::Sub,
                _ => break,
            };
            self.advance();
            let rhs = self.term(depth + 1)?;
            let span = (lhs.span.0, rhs.span.1);
            lhs = Expr {
                kind: ExprKind::Binary {
                    op,
                    lhs: Box::new(lhs),
                    rhs: Box::new(rhs),
                },
                span,
            };
        }
        Ok(lhs)
    }

    fn term(&mut self, depth: usize) -> Result<Expr, ParseError> {
        self.check_depth(depth)?;
        let mut lhs = self.unary(depth + 1)?;
        while let Some(tok) = self.peek() {
            let op = match tok.kind {
                TokenKind::Star => BinOp::Mul,
                TokenKind::Slash => BinOp::Div,
                _ => break,
            };
            self.advance();
            let rhs = self.unary(depth + 1)?;
            let span = (lhs.span.0, rhs.span.1);
            lhs = Expr {
                kind: ExprKind::Binary {
                    op,
                    lhs: Box::new(lhs),
                    rhs: Box::new(rhs),
                },
                span,
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self, depth: usize) -> Result<Expr, ParseError> {
        self.check_depth(depth)?;
        if let Some(tok) = self.peek() {
            if tok.kind == TokenKind::Minus {
                let start = tok.offset;
                self.advance();
                let inner = self.unary(depth + 1)?;
                let span = (start, inner.span.1);
                return Ok(Expr {
                    kind: ExprKind::Negate(Box::new(inner)),
                    span,
                });
            }
        }
        self.power(depth + 1)
    }

    fn power(&mut self, depth: usize) -> Result<Expr, ParseError> {
        self.check_depth(depth)?;
        let base = self.atom(depth + 1)?;
        if let Some(tok) = self.peek() {
            if tok.kind == TokenKind::Caret {
                self.advance();
                // Right associative; a unary minus is allowed in the exponent.
                let exponent = self.unary(depth + 1)?;
                let span = (base.span.0, exponent.span.1);
                return Ok(Expr {
                    kind: ExprKind::Binary {
                        op: BinOp::Pow,
                        lhs: Box::new(base),
                        rhs: Box::new(exponent),
                    },
                    span,
                });
            }
        }
        Ok(base)
    }

    fn atom(&mut self, depth: usize) -> Result<Expr, ParseError> {
        self.check_depth(depth)?;
        let tok = match self.advance() {
            Some(tok) => tok,
            None => return Err(ParseError::UnexpectedEnd { offset: self.end }),
        };
        match tok.kind {
            TokenKind::Number(value) => Ok(Expr {
                kind: ExprKind::Number(value),
                span: (tok.offset, self.offset_before_current(tok.offset)),
            }),
            TokenKind::LParen => {
                let inner = self.expression(depth + 1)?;
                match self.advance() {
                    Some(Token {
                        kind: TokenKind::RParen,
                        ..
                    }) => Ok(inner),
                    Some(other) => Err(ParseError::Expected {
                        expected: "closing parenthesis",
                        offset: other.offset,
                    }),
                    None => Err(ParseError::UnexpectedEnd { offset: self.end }),
                }
            }
            TokenKind::Ident(name) => {
                let is_call = matches!(
                    self.peek(),
                    Some(Token {
                        kind: TokenKind::LParen,
                        ..
                    })
                );
                if is_call {
                    let func = Func::from_name(&name).ok_or(ParseError::UnknownFunction {
                        name: name.clone(),
                        offset: tok.offset,
                    })?;
                    self.advance(); // consume "("
                    let mut args = vec![self.expression(depth + 1)?];
                    loop {
                        match self.advance() {
                            Some(Token {
                                kind: TokenKind::Comma,
                                ..
                            }) => args.push(self.expression(depth + 1)?),
                            Some(Token {
                                kind: TokenKind::RParen,
                                ..
                            }) => break,
                            Some(other) => {
                                return Err(ParseError::Expected {
                                    expected: "`,` or closing parenthesis",
                                    offset: other.offset,
                                })
                            }
                            None => return Err(ParseError::UnexpectedEnd { offset: self.end }),
                        }
                    }
                    if args.len() != func.arity() {
                        return Err(ParseError::WrongArity {
                            func: func.name(),
                            expected: func.arity(),
                            got: args.len(),
                            offset: tok.offset,
                        });
                    }
                    let end = self.offset_before_current(tok.offset);
                    Ok(Expr {
                        kind: ExprKind::Call { func, args },
                        span: (tok.offset, end),
                    })
                } else {
                    let var = Var::from_name(&name).ok_or(ParseError::UnknownVariable {
                        name: name.clone(),
                        offset: tok.offset,
                    })?;
                    if !self.allowed.contains(var) {
                        return Err(ParseError::DisallowedVariable {
                            name: var.name(),
                            allowed: self.allowed,
                            offset: tok.offset,
                        });
                    }
                    Ok(Expr {
                        kind: ExprKind::Variable(var),
                        span: (tok.offset, tok.offset + name.len()),
                    })
                }
            }
            _ => Err(ParseError::Expected {
                expected: "number, variable or `(`",
                offset: tok.offset,
            }),
        }
    }

    /// End offset of the node finishing just before the current token.
    fn offset_before_current(&self, start: usize) -> usize {
        self.peek().map_or(self.end, |t| t.offset).max(start)
    }
}
