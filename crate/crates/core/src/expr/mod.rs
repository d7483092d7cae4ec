//! Scalar coefficient expressions over the state variables.
//!
//! Expressions are supplied as text (`"(1/(2*x1^2)) * (|x|/2)^(1+eps)"`),
//! parsed once into an immutable AST, and compiled to a small stack program
//! for evaluation in the simulation hot loop.
//!
//! Grammar (precedence low → high; `^` is right-associative and binds
//! tighter than unary minus, so `-2^2 == -4`):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := number | ident | '|x|' | func '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Identifiers are the state variables `x1..xN` (N = state size fixed at
//! parse time), the time variable `t`, or named constants bound at parse
//! time. `|x|` is the Euclidean norm of the full state vector. Functions:
//! `exp`, `log`, `sqrt`, `abs`, `norm` (one argument; `norm` is the scalar
//! absolute value) and `min`, `max` (two arguments). Numeric literals are
//! double precision.

mod lexer;
mod parser;
mod program;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

pub use program::EvalError;

/// Axis along which a partial derivative is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffVar {
    /// One of the state variables, 0-based.
    State(usize),
    /// The time variable `t`.
    Time,
}

/// Parse-time errors, with 0-based byte positions into the source text.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at position {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown identifier `{name}` at position {position}")]
    UnknownIdentifier { name: String, position: usize },
    #[error("variable index out of range at position {position}: `x{index}` but state size is {state_size}")]
    VarOutOfRange {
        index: usize,
        state_size: usize,
        position: usize,
    },
    #[error("function `{name}` at position {position} takes {expected} argument(s), got {got}")]
    BadArity {
        name: String,
        expected: usize,
        got: usize,
        position: usize,
    },
}

/// Built-in functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
    Abs,
    /// Euclidean norm of a scalar, i.e. the absolute value.
    Norm,
    Min,
    Max,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Norm => "norm",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "norm" => Func::Norm,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// Expression tree node. Spans are byte ranges into the original source.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Literal(f64),
    /// 0-based state variable index.
    Var(usize),
    Time,
    /// `|x|`, the Euclidean norm of the full state vector.
    StateNorm,
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// A parsed, evaluable coefficient expression.
///
/// Immutable after parse; evaluation is pure, so values can be shared and
/// evaluated from many threads concurrently.
#[derive(Debug, Clone)]
pub struct ExpressionAst {
    source: String,
    state_size: usize,
    root: Node,
    program: program::Program,
}

/// Evaluation context: one state/time point with the state norm precomputed
/// so that several expressions evaluated at the same point share it.
#[derive(Debug, Clone, Copy)]
pub struct EvalCtx<'a> {
    pub state: &'a [f64],
    pub time: f64,
    pub norm: f64,
}

impl<'a> EvalCtx<'a> {
    pub fn new(state: &'a [f64], time: f64) -> Self {
        let norm = state.iter().map(|v| v * v).sum::<f64>().sqrt();
        EvalCtx { state, time, norm }
    }
}

/// Parse `source` against a state of `state_size` variables (`x1..x<state_size>`),
/// binding `constants` by name. Constant subtrees are folded at parse time.
pub fn parse(
    source: &str,
    state_size: usize,
    constants: &BTreeMap<String, f64>,
) -> Result<ExpressionAst, ParseError> {
    assert!(state_size >= 1, "state size must be at least 1");
    let root = parser::parse_source(source, state_size, constants)?;
    let root = fold(root);
    let program = program::compile(&root, source);
    Ok(ExpressionAst {
        source: source.to_string(),
        state_size,
        root,
        program,
    })
}

impl ExpressionAst {
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn state_size(&self) -> usize {
        self.state_size
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    /// True if the expression folded to the literal 0 (used to skip
    /// drift work in the simulator).
    pub fn is_literal_zero(&self) -> bool {
        matches!(self.root, Node::Literal(v) if v == 0.0)
    }

    pub fn is_literal(&self) -> Option<f64> {
        match self.root {
            Node::Literal(v) => Some(v),
            _ => None,
        }
    }

    /// Evaluate at `state` (length must equal `state_size`) and `time`.
    ///
    /// Deterministic: identical inputs give bit-identical output.
    pub fn evaluate(&self, state: &[f64], time: f64) -> Result<f64, EvalError> {
        self.evaluate_ctx(&EvalCtx::new(state, time))
    }

    /// Evaluate with a precomputed context.
    #[inline]
    pub fn evaluate_ctx(&self, ctx: &EvalCtx<'_>) -> Result<f64, EvalError> {
        debug_assert_eq!(ctx.state.len(), self.state_size);
        self.program.eval(ctx)
    }

    /// Central finite-difference partial derivative of order 1 or 2 along `var`.
    ///
    /// Step sizes: `h = cbrt(eps) * max(1, |x_i|)` for order 1 and
    /// `h = eps^(1/4) * max(1, |x_i|)` for order 2, with `eps` the machine
    /// epsilon.
    pub fn partial(
        &self,
        state: &[f64],
        time: f64,
        var: DiffVar,
        order: u8,
    ) -> Result<f64, EvalError> {
        assert!(order == 1 || order == 2, "order must be 1 or 2");
        let base = match var {
            DiffVar::State(i) => state[i],
            DiffVar::Time => time,
        };
        let scale = base.abs().max(1.0);
        let h = if order == 1 {
            f64::EPSILON.cbrt() * scale
        } else {
            f64::EPSILON.powf(0.25) * scale
        };
        // Re-derive h from the rounded abscissae so the difference quotient
        // uses the exact step that was applied.
        let hi = (base + h) - base;
        let lo = base - (base - h);
        let mut buf = state.to_vec();
        let eval_at = |buf: &mut [f64], v: f64| -> Result<f64, EvalError> {
            match var {
                DiffVar::State(i) => {
                    buf[i] = v;
                    let r = self.evaluate(buf, time);
                    buf[i] = base;
                    r
                }
                DiffVar::Time => self.evaluate(buf, v),
            }
        };
        if order == 1 {
            let fp = eval_at(&mut buf, base + hi)?;
            let fm = eval_at(&mut buf, base - lo)?;
            Ok((fp - fm) / (hi + lo))
        } else {
            let fp = eval_at(&mut buf, base + hi)?;
            let f0 = eval_at(&mut buf, base)?;
            let fm = eval_at(&mut buf, base - lo)?;
            let h2 = 0.5 * (hi + lo);
            Ok((fp - 2.0 * f0 + fm) / (h2 * h2))
        }
    }

    /// Mixed second partial `d^2 f / dx_i dx_j` (`i != j`) by a cross
    /// central-difference stencil.
    pub fn mixed_partial(
        &self,
        state: &[f64],
        time: f64,
        i: usize,
        j: usize,
    ) -> Result<f64, EvalError> {
        assert_ne!(i, j, "use partial(order = 2) for diagonal second derivatives");
        let hi = f64::EPSILON.powf(0.25) * state[i].abs().max(1.0);
        let hj = f64::EPSILON.powf(0.25) * state[j].abs().max(1.0);
        let mut buf = state.to_vec();
        let mut eval_at = |si: f64, sj: f64| -> Result<f64, EvalError> {
            buf[i] = si;
            buf[j] = sj;
            self.evaluate(&buf, time)
        };
        let pp = eval_at(state[i] + hi, state[j] + hj)?;
        let pm = eval_at(state[i] + hi, state[j] - hj)?;
        let mp = eval_at(state[i] - hi, state[j] + hj)?;
        let mm = eval_at(state[i] - hi, state[j] - hj)?;
        Ok((pp - pm - mp + mm) / (4.0 * hi * hj))
    }

    /// Render the tree back to text. Re-parsing the result yields an AST
    /// that evaluates identically (round-trip property).
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        write_node(&mut out, &self.root, 0).expect("string write");
        out
    }
}

/// Fold constant subtrees. Folding performs the same f64 arithmetic the
/// evaluator would, so it never changes the value of a well-formed tree;
/// subtrees whose folding would raise a domain error are left intact so the
/// error surfaces at evaluation time with a proper report.
fn fold(node: Node) -> Node {
    fn value(node: &Node) -> Option<f64> {
        match node {
            Node::Literal(v) => Some(*v),
            _ => None,
        }
    }
    match node {
        Node::Neg(inner) => {
            let inner = fold(*inner);
            match value(&inner) {
                Some(v) => Node::Literal(-v),
                None => Node::Neg(Box::new(inner)),
            }
        }
        Node::Binary(op, l, r) => {
            let l = fold(*l);
            let r = fold(*r);
            if let (Some(a), Some(b)) = (value(&l), value(&r)) {
                let v = match op {
                    BinOp::Add => Some(a + b),
                    BinOp::Sub => Some(a - b),
                    BinOp::Mul => Some(a * b),
                    BinOp::Div => {
                        if b == 0.0 {
                            None
                        } else {
                            Some(a / b)
                        }
                    }
                    // Mirror the evaluator's power specialization exactly so
                    // folding never changes a value at the bit level.
                    BinOp::Pow => {
                        if a == 0.0 && b < 0.0 {
                            None
                        } else if b.fract() == 0.0 && b.abs() <= 32.0 {
                            Some(a.powi(b as i32))
                        } else if (2.0 * b).fract() == 0.0 && (2.0 * b).abs() <= 63.0 {
                            if a < 0.0 {
                                None
                            } else {
                                Some(a.sqrt().powi((2.0 * b) as i32))
                            }
                        } else {
                            let v = a.powf(b);
                            if v.is_nan() {
                                None
                            } else {
                                Some(v)
                            }
                        }
                    }
                };
                if let Some(v) = v {
                    if v.is_finite() {
                        return Node::Literal(v);
                    }
                }
            }
            Node::Binary(op, Box::new(l), Box::new(r))
        }
        Node::Call(f, args) => {
            let args: Vec<Node> = args.into_iter().map(fold).collect();
            let vals: Option<Vec<f64>> = args.iter().map(value).collect();
            if let Some(vals) = vals {
                let v = match f {
                    Func::Exp => Some(vals[0].exp()),
                    Func::Log => (vals[0] > 0.0).then(|| vals[0].ln()),
                    Func::Sqrt => (vals[0] >= 0.0).then(|| vals[0].sqrt()),
                    Func::Abs | Func::Norm => Some(vals[0].abs()),
                    Func::Min => Some(vals[0].min(vals[1])),
                    Func::Max => Some(vals[0].max(vals[1])),
                };
                if let Some(v) = v {
                    if v.is_finite() {
                        return Node::Literal(v);
                    }
                }
            }
            Node::Call(f, args)
        }
        other => other,
    }
}

// Precedence levels used by the printer; must agree with the parser.
const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_UNARY: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

fn precedence(node: &Node) -> u8 {
    match node {
        Node::Binary(BinOp::Add | BinOp::Sub, ..) => PREC_ADD,
        Node::Binary(BinOp::Mul | BinOp::Div, ..) => PREC_MUL,
        Node::Neg(_) => PREC_UNARY,
        Node::Binary(BinOp::Pow, ..) => PREC_POW,
        Node::Literal(v) if *v < 0.0 => PREC_UNARY,
        _ => PREC_ATOM,
    }
}

fn write_node(out: &mut String, node: &Node, parent_min: u8) -> fmt::Result {
    use fmt::Write;
    let prec = precedence(node);
    let need_parens = prec < parent_min;
    if need_parens {
        out.push('(');
    }
    match node {
        Node::Literal(v) => write!(out, "{v:?}")?,
        Node::Var(i) => write!(out, "x{}", i + 1)?,
        Node::Time => out.push('t'),
        Node::StateNorm => out.push_str("|x|"),
        Node::Neg(inner) => {
            out.push('-');
            // Parenthesize a nested negation so we never print `--`.
            let min = if matches!(**inner, Node::Neg(_) | Node::Literal(_) if precedence(inner) == PREC_UNARY)
            {
                PREC_ATOM
            } else {
                PREC_UNARY
            };
            write_node(out, inner, min)?;
        }
        Node::Binary(op, l, r) => {
            let (sym, lmin, rmin) = match op {
                BinOp::Add => ("+", PREC_ADD, PREC_ADD + 1),
                BinOp::Sub => ("-", PREC_ADD, PREC_ADD + 1),
                BinOp::Mul => ("*", PREC_MUL, PREC_MUL + 1),
                BinOp::Div => ("/", PREC_MUL, PREC_MUL + 1),
                // Right-associative; the exponent slot admits a unary minus.
                BinOp::Pow => ("^", PREC_POW + 1, PREC_UNARY),
            };
            write_node(out, l, lmin)?;
            out.push_str(sym);
            write_node(out, r, rmin)?;
        }
        Node::Call(f, args) => {
            out.push_str(f.name());
            out.push('(');
            for (k, a) in args.iter().enumerate() {
                if k > 0 {
                    out.push_str(", ");
                }
                write_node(out, a, 0)?;
            }
            out.push(')');
        }
    }
    if need_parens {
        out.push(')');
    }
    Ok(())
}
