//! Recursive-descent parser.

use std::collections::BTreeMap;

use super::lexer::{tokenize, Tok, Token};
use super::{BinOp, Func, Node, ParseError};

pub fn parse_source(
    source: &str,
    state_size: usize,
    constants: &BTreeMap<String, f64>,
) -> Result<Node, ParseError> {
    if source.trim().is_empty() {
        return Err(ParseError::Syntax {
            position: 0,
            message: "empty expression".to_string(),
        });
    }
    let tokens = tokenize(source)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        state_size,
        constants,
    };
    let node = p.expr()?;
    let t = p.peek();
    if t.tok != Tok::Eof {
        return Err(ParseError::Syntax {
            position: t.start,
            message: format!("unexpected {}", describe(&t.tok)),
        });
    }
    Ok(node)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    state_size: usize,
    constants: &'a BTreeMap<String, f64>,
}

impl Parser<'_> {
    fn peek(&self) -> Token {
        self.tokens[self.pos].clone()
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<Token, ParseError> {
        let t = self.peek();
        if t.tok == tok {
            Ok(self.bump())
        } else {
            Err(ParseError::Syntax {
                position: t.start,
                message: format!("expected {what}, found {}", describe(&t.tok)),
            })
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => break,
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    // `^` binds tighter than unary minus: -2^2 parses as -(2^2).
    fn unary(&mut self) -> Result<Node, ParseError> {
        if self.peek().tok == Tok::Minus {
            self.bump();
            let inner = self.unary()?;
            return Ok(Node::Neg(Box::new(inner)));
        }
        self.power()
    }

    // Right-associative; the exponent slot re-enters `unary` so `2^-3` works.
    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.primary()?;
        if self.peek().tok == Tok::Caret {
            self.bump();
            let exponent = self.unary()?;
            return Ok(Node::Binary(
                BinOp::Pow,
                Box::new(base),
                Box::new(exponent),
            ));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Node, ParseError> {
        let t = self.peek();
        match t.tok {
            Tok::Number(v) => {
                self.bump();
                Ok(Node::Literal(v))
            }
            Tok::StateNorm => {
                self.bump();
                Ok(Node::StateNorm)
            }
            Tok::LParen => {
                self.bump();
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(ref name) => {
                self.bump();
                if self.peek().tok == Tok::LParen {
                    return self.call(name, t.start);
                }
                self.ident(name, t.start)
            }
            ref other => Err(ParseError::Syntax {
                position: t.start,
                message: format!("expected an expression, found {}", describe(other)),
            }),
        }
    }

    fn call(&mut self, name: &str, position: usize) -> Result<Node, ParseError> {
        let func = Func::from_name(name).ok_or_else(|| ParseError::UnknownIdentifier {
            name: name.to_string(),
            position,
        })?;
        self.expect(Tok::LParen, "`(`")?;
        let mut args = vec![self.expr()?];
        while self.peek().tok == Tok::Comma {
            self.bump();
            args.push(self.expr()?);
        }
        self.expect(Tok::RParen, "`)`")?;
        if args.len() != func.arity() {
            return Err(ParseError::BadArity {
                name: name.to_string(),
                expected: func.arity(),
                got: args.len(),
                position,
            });
        }
        Ok(Node::Call(func, args))
    }

    fn ident(&mut self, name: &str, position: usize) -> Result<Node, ParseError> {
        if name == "t" {
            return Ok(Node::Time);
        }
        if let Some(rest) = name.strip_prefix('x') {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                let index: usize = rest.parse().map_err(|_| ParseError::Syntax {
                    position,
                    message: format!("invalid variable `{name}`"),
                })?;
                if index == 0 || index > self.state_size {
                    return Err(ParseError::VarOutOfRange {
                        index,
                        state_size: self.state_size,
                        position,
                    });
                }
                return Ok(Node::Var(index - 1));
            }
        }
        if let Some(&value) = self.constants.get(name) {
            return Ok(Node::Literal(value));
        }
        Err(ParseError::UnknownIdentifier {
            name: name.to_string(),
            position,
        })
    }
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Number(v) => format!("number `{v}`"),
        Tok::Ident(name) => format!("identifier `{name}`"),
        Tok::StateNorm => "`|x|`".to_string(),
        Tok::Plus => "`+`".to_string(),
        Tok::Minus => "`-`".to_string(),
        Tok::Star => "`*`".to_string(),
        Tok::Slash => "`/`".to_string(),
        Tok::Caret => "`^`".to_string(),
        Tok::LParen => "`(`".to_string(),
        Tok::RParen => "`)`".to_string(),
        Tok::Comma => "`,`".to_string(),
        Tok::Eof => "end of input".to_string(),
    }
}
