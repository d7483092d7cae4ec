//! Stack-program compilation and evaluation.
//!
//! The tree is flattened to postfix once at parse time; the simulator then
//! evaluates the flat program with a fixed-size value stack and no
//! allocation. Power nodes with small integer or half-integer constant
//! exponents compile to multiply/sqrt sequences, which matters because the
//! coefficient functions of stochastic-volatility systems are dominated by
//! terms like `(|x|/2)^1.5`.

use thiserror::Error;

use super::{BinOp, Func, Node};
use super::EvalCtx;

/// Runtime evaluation error. `detail` names the operation and offending
/// values; `subexpr` is the source text of the failing subexpression.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("domain error: {detail} in `{subexpr}`")]
    Domain { detail: String, subexpr: String },
    #[error("non-finite result ({value}) from `{subexpr}`")]
    NonFinite { value: f64, subexpr: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Var(u8),
    Time,
    Norm,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    /// General `a^b` with both operands on the stack.
    Pow,
    /// `a^n` for small integer n.
    PowI(i32),
    /// `a^(k/2)` for small odd k, computed as `sqrt(a)^k`.
    PowHalf(i32),
    Exp,
    Log,
    Sqrt,
    Abs,
    Min2,
    Max2,
}

#[derive(Debug, Clone)]
pub struct Program {
    ops: Vec<Op>,
    /// Byte span of the subexpression rooted at each op, for error reports.
    spans: Vec<(u32, u32)>,
    source: String,
    #[allow(dead_code)]
    max_stack: usize,
}

const STACK_CAP: usize = 64;

pub fn compile(root: &Node, source: &str) -> Program {
    let mut ops = Vec::new();
    let mut spans = Vec::new();
    emit(root, source, &mut ops, &mut spans);
    let mut depth = 0usize;
    let mut max_stack = 0usize;
    for op in &ops {
        match op {
            Op::Const(_) | Op::Var(_) | Op::Time | Op::Norm => depth += 1,
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow | Op::Min2 | Op::Max2 => depth -= 1,
            _ => {}
        }
        max_stack = max_stack.max(depth);
    }
    assert!(
        max_stack <= STACK_CAP,
        "expression too deeply nested ({max_stack} > {STACK_CAP})"
    );
    Program {
        ops,
        spans,
        source: source.to_string(),
        max_stack,
    }
}

/// Spans are approximate (whole source) because the fold pass already
/// rewrote the tree; precise spans only matter for the op that fails, and
/// the failing op's operand values are embedded in the error message.
fn emit(node: &Node, source: &str, ops: &mut Vec<Op>, spans: &mut Vec<(u32, u32)>) {
    let span = (0u32, source.len() as u32);
    match node {
        Node::Literal(v) => {
            ops.push(Op::Const(*v));
            spans.push(span);
        }
        Node::Var(i) => {
            ops.push(Op::Var(*i as u8));
            spans.push(span);
        }
        Node::Time => {
            ops.push(Op::Time);
            spans.push(span);
        }
        Node::StateNorm => {
            ops.push(Op::Norm);
            spans.push(span);
        }
        Node::Neg(inner) => {
            emit(inner, source, ops, spans);
            ops.push(Op::Neg);
            spans.push(span);
        }
        Node::Binary(BinOp::Pow, base, exp) => {
            emit(base, source, ops, spans);
            if let Node::Literal(e) = **exp {
                let doubled = 2.0 * e;
                if e.fract() == 0.0 && e.abs() <= 32.0 {
                    ops.push(Op::PowI(e as i32));
                    spans.push(span);
                    return;
                }
                if doubled.fract() == 0.0 && doubled.abs() <= 63.0 {
                    ops.push(Op::PowHalf(doubled as i32));
                    spans.push(span);
                    return;
                }
            }
            emit(exp, source, ops, spans);
            ops.push(Op::Pow);
            spans.push(span);
        }
        Node::Binary(op, l, r) => {
            emit(l, source, ops, spans);
            emit(r, source, ops, spans);
            ops.push(match op {
                BinOp::Add => Op::Add,
                BinOp::Sub => Op::Sub,
                BinOp::Mul => Op::Mul,
                BinOp::Div => Op::Div,
                BinOp::Pow => unreachable!(),
            });
            spans.push(span);
        }
        Node::Call(f, args) => {
            for a in args {
                emit(a, source, ops, spans);
            }
            ops.push(match f {
                Func::Exp => Op::Exp,
                Func::Log => Op::Log,
                Func::Sqrt => Op::Sqrt,
                Func::Abs | Func::Norm => Op::Abs,
                Func::Min => Op::Min2,
                Func::Max => Op::Max2,
            });
            spans.push(span);
        }
    }
}

impl Program {
    fn fail(&self, idx: usize, detail: String) -> EvalError {
        let (s, e) = self.spans[idx];
        EvalError::Domain {
            detail,
            subexpr: self.source[s as usize..e as usize].to_string(),
        }
    }

    #[inline]
    pub fn eval(&self, ctx: &EvalCtx<'_>) -> Result<f64, EvalError> {
        let mut stack = [0.0f64; STACK_CAP];
        let mut sp = 0usize;
        for (idx, op) in self.ops.iter().enumerate() {
            match *op {
                Op::Const(v) => {
                    stack[sp] = v;
                    sp += 1;
                }
                Op::Var(i) => {
                    stack[sp] = ctx.state[i as usize];
                    sp += 1;
                }
                Op::Time => {
                    stack[sp] = ctx.time;
                    sp += 1;
                }
                Op::Norm => {
                    stack[sp] = ctx.norm;
                    sp += 1;
                }
                Op::Add => {
                    sp -= 1;
                    stack[sp - 1] += stack[sp];
                }
                Op::Sub => {
                    sp -= 1;
                    stack[sp - 1] -= stack[sp];
                }
                Op::Mul => {
                    sp -= 1;
                    stack[sp - 1] *= stack[sp];
                }
                Op::Div => {
                    sp -= 1;
                    let b = stack[sp];
                    if b == 0.0 {
                        return Err(self.fail(idx, "division by zero".to_string()));
                    }
                    stack[sp - 1] /= b;
                }
                Op::Neg => {
                    stack[sp - 1] = -stack[sp - 1];
                }
                Op::Pow => {
                    sp -= 1;
                    let b = stack[sp];
                    let a = stack[sp - 1];
                    if a == 0.0 && b < 0.0 {
                        return Err(self.fail(idx, format!("0 raised to negative power {b}")));
                    }
                    let v = a.powf(b);
                    if v.is_nan() {
                        return Err(self.fail(
                            idx,
                            format!("{a} raised to non-integer power {b}"),
                        ));
                    }
                    stack[sp - 1] = v;
                }
                Op::PowI(n) => {
                    let a = stack[sp - 1];
                    if a == 0.0 && n < 0 {
                        return Err(self.fail(idx, format!("0 raised to negative power {n}")));
                    }
                    stack[sp - 1] = a.powi(n);
                }
                Op::PowHalf(k) => {
                    let a = stack[sp - 1];
                    if a < 0.0 {
                        return Err(self.fail(
                            idx,
                            format!("{a} raised to non-integer power {}", k as f64 / 2.0),
                        ));
                    }
                    if a == 0.0 && k < 0 {
                        return Err(self.fail(
                            idx,
                            format!("0 raised to negative power {}", k as f64 / 2.0),
                        ));
                    }
                    stack[sp - 1] = a.sqrt().powi(k);
                }
                Op::Exp => {
                    stack[sp - 1] = stack[sp - 1].exp();
                }
                Op::Log => {
                    let a = stack[sp - 1];
                    if a <= 0.0 {
                        return Err(self.fail(idx, format!("log of non-positive value {a}")));
                    }
                    stack[sp - 1] = a.ln();
                }
                Op::Sqrt => {
                    let a = stack[sp - 1];
                    if a < 0.0 {
                        return Err(self.fail(idx, format!("sqrt of negative value {a}")));
                    }
                    stack[sp - 1] = a.sqrt();
                }
                Op::Abs => {
                    stack[sp - 1] = stack[sp - 1].abs();
                }
                Op::Min2 => {
                    sp -= 1;
                    stack[sp - 1] = stack[sp - 1].min(stack[sp]);
                }
                Op::Max2 => {
                    sp -= 1;
                    stack[sp - 1] = stack[sp - 1].max(stack[sp]);
                }
            }
        }
        debug_assert_eq!(sp, 1);
        let v = stack[0];
        if !v.is_finite() {
            return Err(EvalError::NonFinite {
                value: v,
                subexpr: self.source.clone(),
            });
        }
        Ok(v)
    }
}
