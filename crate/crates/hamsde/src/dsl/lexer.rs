//! Tokenizer for the expression language.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Number,
    Ident,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

/// One lexeme with its byte offset into the source string.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    pub offset: usize,
}

/// Splits `source` into tokens, skipping ASCII whitespace. Numbers accept the
/// forms `12`, `12.`, `12.5`, and an optional exponent `e  E` with optional
/// sign (`1.5e-7`); identifiers are `[A-Za-z][A-Za-z0-9_]*`.
pub fn lex(source: &str) -> Result<Vec<Token>> {
    let bytes = source.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let kind = match b {
            b'+' => Some(TokenKind::Plus),
            b'-' => Some(TokenKind::Minus),
            b'*' => Some(TokenKind::Star),
            b'/' => Some(TokenKind::Slash),
            b'^' => Some(TokenKind::Caret),
            b'(' => Some(TokenKind::LParen),
            b')' => Some(TokenKind::RParen),
            _ => None,
        };
        if let Some(kind) = kind {
            i += 1;
            tokens.push(Token {
                kind,
                text: source[start..i].to_string(),
                offset: start,
            });
            continue;
        }
        if b.is_ascii_digit() {
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'.' {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            // Exponent part only counts when followed by digits (so `2e` lexes
            // as the number 2 and the identifier e, which then fails to bind).
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
            tokens.push(Token {
                kind: TokenKind::Number,
                text: source[start..i].to_string(),
                offset: start,
            });
            continue;
        }
        if b.is_ascii_alphabetic() {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            tokens.push(Token {
                kind: TokenKind::Ident,
                text: source[start..i].to_string(),
                offset: start,
            });
            continue;
        }
        return Err(Error::Lex {
            offset: start,
            found: source[start..].chars().next().unwrap_or('\u{fffd}'),
        });
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_lex_covers_input_with_increasing_offsets() {
        let toks = lex("p1^2/2 + cos(q1)").unwrap();
        let kinds: Vec<TokenKind> = toks.iter().map(|t| t.kind).collect();
        assert_eq!(
            kinds,
            vec![
                TokenKind::Ident,
                TokenKind::Caret,
                TokenKind::Number,
                TokenKind::Slash,
                TokenKind::Number,
                TokenKind::Plus,
                TokenKind::Ident,
                TokenKind::LParen,
                TokenKind::Ident,
                TokenKind::RParen,
            ]
        );
        for pair in toks.windows(2) {
            assert!(pair[0].offset < pair[1].offset);
        }
    }

    #[test]
    fn test_lex_scientific_notation() {
        let toks = lex("1.5e-7+2e3").unwrap();
        assert_eq!(toks[0].text, "1.5e-7");
        assert_eq!(toks[1].kind, TokenKind::Plus);
        assert_eq!(toks[2].text, "2e3");
    }

    #[test]
    fn test_lex_rejects_unknown_character() {
        let err = lex("q1 $ p1").unwrap_err();
        match err {
            Error::Lex { offset, found } => {
                assert_eq!(offset, 3);
                assert_eq!(found, '$');
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn test_bare_exponent_suffix_stays_ident() {
        let toks = lex("2e").unwrap();
        assert_eq!(toks[0].text, "2");
        assert_eq!(toks[1].kind, TokenKind::Ident);
        assert_eq!(toks[1].text, "e");
    }
}
