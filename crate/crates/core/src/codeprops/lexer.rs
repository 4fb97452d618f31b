use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The five lexical classes. Punctuation and delimiters are folded into `Operator`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LexClass {
    Identifier,
    Keyword,
    Operator,
    Number,
    String,
}

impl LexClass {
    pub const ALL: [LexClass; 5] = [
        LexClass::Identifier,
        LexClass::Keyword,
        LexClass::Operator,
        LexClass::Number,
        LexClass::String,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LexClass::Identifier => "Identifier",
            LexClass::Keyword => "Keyword",
            LexClass::Operator => "Operator",
            LexClass::Number => "Number",
            LexClass::String => "String",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexToken {
    pub text: String,
    pub class: LexClass,
    /// Byte offsets `[start, end)` into the source.
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("lexical error at byte {offset}: {message}")]
pub struct LexError {
    pub offset: usize,
    pub message: String,
}

pub const KEYWORDS: &[&str] = &[
    "def", "return", "if", "elif", "else", "while", "for", "in", "and", "or", "not", "pass", "True", "False", "None",
];

const TWO_CHAR_OPS: &[&str] = &["==", "!=", "<=", ">=", "//", "**", "+=", "-=", "->"];

pub fn is_keyword(word: &str) -> bool {
    KEYWORDS.contains(&word)
}

/// Splits source into classified tokens covering every non-whitespace byte.
/// Unknown punctuation becomes `Operator`; any non-keyword word is an
/// `Identifier`. Only an unterminated string literal is an error.
pub fn lex_classify(source: &str) -> Result<Vec<LexToken>, LexError> {
    let bytes = source.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = source[i..].chars().next().expect("char boundary");
        let start = i;
        if c.is_whitespace() {
            i += c.len_utf8();
            continue;
        }
        let class = if c == '"' || c == '\'' {
            i = scan_string(source, i, c)?;
            LexClass::String
        } else if c.is_ascii_digit() {
            i = scan_number(bytes, i);
            LexClass::Number
        } else if c == '_' || c.is_alphabetic() {
            while i < bytes.len() {
                let ch = source[i..].chars().next().expect("char boundary");
                if ch == '_' || ch.is_alphanumeric() {
                    i += ch.len_utf8();
                } else {
                    break;
                }
            }
            if is_keyword(&source[start..i]) {
                LexClass::Keyword
            } else {
                LexClass::Identifier
            }
        } else {
            if TWO_CHAR_OPS.iter().any(|op| source[i..].starts_with(op)) {
                i += 2;
            } else {
                i += c.len_utf8();
            }
            LexClass::Operator
        };
        out.push(LexToken {
            text: source[start..i].to_string(),
            class,
            span: (start, i),
        });
    }
    Ok(out)
}

fn scan_string(source: &str, start: usize, quote: char) -> Result<usize, LexError> {
    let bytes = source.as_bytes();
    let mut i = start + 1;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b'\n' => break,
            b if b == quote as u8 => return Ok(i + 1),
            _ => i += 1,
        }
    }
    Err(LexError {
        offset: start,
        message: "unterminated string literal".into(),
    })
}

fn scan_number(bytes: &[u8], mut i: usize) -> usize {
    while i < bytes.len() && bytes[i].is_ascii_digit() {
        i += 1;
    }
    if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
        i += 1;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
    }
    i
}

#[cfg(test)]
mod tests {
    use super::*;
    use LexClass::{Identifier, Keyword, Number, Operator};

    fn classes(src: &str) -> Vec<(String, LexClass)> {
        lex_classify(src).unwrap().into_iter().map(|t| (t.text, t.class)).collect()
    }

    #[test]
    fn small_function() {
        let got = classes("def f(x): return x + 1");
        let want = [
            ("def", Keyword),
            ("f", Identifier),
            ("(", Operator),
            ("x", Identifier),
            (")", Operator),
            (":", Operator),
            ("return", Keyword),
            ("x", Identifier),
            ("+", Operator),
            ("1", Number),
        ];
        assert_eq!(got.len(), want.len());
        for ((t, c), (wt, wc)) in got.iter().zip(want) {
            assert_eq!((t.as_str(), *c), (wt, wc));
        }
    }

    #[test]
    fn string_literal_is_one_token() {
        assert_eq!(classes("\"hi\""), vec![("\"hi\"".to_string(), LexClass::String)]);
        assert_eq!(classes("'a\\'b'").len(), 1);
    }

    #[test]
    fn unterminated_string_reports_offset() {
        let e = lex_classify("x = \"abc").unwrap_err();
        assert_eq!(e.offset, 4);
        assert!(lex_classify("x = 'ab\ny'").is_err());
    }

    #[test]
    fn graceful_on_foreign_text() {
        let got = classes("a->b @ 3.5 $ ünïcode");
        assert_eq!(got[1], ("->".to_string(), Operator));
        assert_eq!(got[3], ("@".to_string(), Operator));
        assert_eq!(got[4], ("3.5".to_string(), Number));
        assert_eq!(got[5], ("$".to_string(), Operator));
        assert_eq!(got[6].1, Identifier);
    }

    #[test]
    fn spans_reproduce_source() {
        let src = "def g(a, b):\n    if a <= b:\n        return 'x'\n    return a // 2\n";
        let toks = lex_classify(src).unwrap();
        let mut rebuilt = String::new();
        let mut pos = 0;
        for t in &toks {
            assert!(t.span.0 >= pos);
            rebuilt.push_str(&src[pos..t.span.0]);
            assert!(src[pos..t.span.0].chars().all(char::is_whitespace));
            rebuilt.push_str(&t.text);
            pos = t.span.1;
        }
        rebuilt.push_str(&src[pos..]);
        assert_eq!(rebuilt, src);
    }
}
