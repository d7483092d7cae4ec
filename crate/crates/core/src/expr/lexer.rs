//! Tokenizer for the expression grammar.

use super::ParseError;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Number(f64),
    Ident(String),
    StateNorm, // |x|
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    Eof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    /// Byte span [start, end) in the source.
    pub start: usize,
    pub end: usize,
}

pub fn tokenize(source: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = source.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
            }
            b'+' => push(&mut toks, Tok::Plus, i, i + 1, &mut i),
            b'-' => push(&mut toks, Tok::Minus, i, i + 1, &mut i),
            b'*' => push(&mut toks, Tok::Star, i, i + 1, &mut i),
            b'/' => push(&mut toks, Tok::Slash, i, i + 1, &mut i),
            b'^' => push(&mut toks, Tok::Caret, i, i + 1, &mut i),
            b'(' => push(&mut toks, Tok::LParen, i, i + 1, &mut i),
            b')' => push(&mut toks, Tok::RParen, i, i + 1, &mut i),
            b',' => push(&mut toks, Tok::Comma, i, i + 1, &mut i),
            b'|' => {
                if bytes.get(i + 1) == Some(&b'x') && bytes.get(i + 2) == Some(&b'|') {
                    push(&mut toks, Tok::StateNorm, i, i + 3, &mut i);
                } else {
                    return Err(ParseError::Syntax {
                        position: i,
                        message: "expected `|x|`".to_string(),
                    });
                }
            }
            b'0'..=b'9' | b'.' => {
                let start = i;
                i = scan_number(bytes, i);
                let text = &source[start..i];
                let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
                    position: start,
                    message: format!("invalid number literal `{text}`"),
                })?;
                toks.push(Token {
                    tok: Tok::Number(value),
                    start,
                    end: i,
                });
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                toks.push(Token {
                    tok: Tok::Ident(source[start..i].to_string()),
                    start,
                    end: i,
                });
            }
            other => {
                return Err(ParseError::Syntax {
                    position: i,
                    message: format!("unexpected character `{}`", other as char),
                });
            }
        }
    }
    toks.push(Token {
        tok: Tok::Eof,
        start: source.len(),
        end: source.len(),
    });
    Ok(toks)
}

fn push(toks: &mut Vec<Token>, tok: Tok, start: usize, end: usize, i: &mut usize) {
    toks.push(Token { tok, start, end });
    *i = end;
}

/// Scan a number literal: digits, optional fraction, optional exponent.
/// The exponent marker `e`/`E` is consumed only when followed by a digit
/// (with optional sign), so `2e` lexes as `2` then identifier `e`.
fn scan_number(bytes: &[u8], mut i: usize) -> usize {
    while i < bytes.len() && bytes[i].is_ascii_digit() {
        i += 1;
    }
    if i < bytes.len() && bytes[i] == b'.' {
        i += 1;
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
    i
}
