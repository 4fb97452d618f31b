use std::fmt;

use thiserror::Error;

use super::ast::AstNode;
use super::lexer::{lex_classify, LexClass, LexToken};
use super::CodeError;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct SyntaxError {
    pub line: usize,
    pub column: usize,
    pub expected: Vec<String>,
    pub found: String,
}

impl fmt::Display for SyntaxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "syntax error at {}:{}: expected one of [{}], found {}",
            self.line,
            self.column,
            self.expected.join(", "),
            self.found
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Lex(LexToken),
    Newline,
    Indent,
    Dedent,
    Eof,
}

#[derive(Debug, Clone)]
struct PTok {
    tok: Tok,
    line: usize,
    column: usize,
}

impl PTok {
    fn describe(&self) -> String {
        match &self.tok {
            Tok::Lex(t) => format!("'{}'", t.text),
            Tok::Newline => "end of line".into(),
            Tok::Indent => "indent".into(),
            Tok::Dedent => "dedent".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

/// 1-based line and column of every byte offset's line start.
fn line_starts(source: &str) -> Vec<usize> {
    std::iter::once(0)
        .chain(source.match_indices('\n').map(|(i, _)| i + 1))
        .collect()
}

fn locate(starts: &[usize], offset: usize) -> (usize, usize) {
    let line = starts.partition_point(|&s| s <= offset);
    (line, offset - starts[line - 1] + 1)
}

/// Converts lexer output into a stream with explicit line and indentation
/// markers. Newlines inside brackets are ignored.
fn layout(source: &str, tokens: Vec<LexToken>) -> Result<Vec<PTok>, SyntaxError> {
    let starts = line_starts(source);
    let mut out = Vec::with_capacity(tokens.len() * 2);
    let mut stack = vec![0usize];
    let mut depth = 0i64;
    let mut last_line = 0usize;
    for t in tokens {
        let (line, column) = locate(&starts, t.span.0);
        if line != last_line && depth == 0 {
            if last_line != 0 {
                out.push(PTok { tok: Tok::Newline, line: last_line, column: 0 });
            }
            let indent = column - 1;
            let top = *stack.last().expect("indent stack");
            if indent > top {
                stack.push(indent);
                out.push(PTok { tok: Tok::Indent, line, column });
            } else {
                while indent < *stack.last().expect("indent stack") {
                    stack.pop();
                    out.push(PTok { tok: Tok::Dedent, line, column });
                }
                if indent != *stack.last().expect("indent stack") {
                    return Err(SyntaxError {
                        line,
                        column,
                        expected: vec!["consistent indentation".into()],
                        found: format!("indent {indent}"),
                    });
                }
            }
        }
        last_line = line;
        if t.class == LexClass::Operator {
            match t.text.as_str() {
                "(" | "[" => depth += 1,
                ")" | "]" => depth -= 1,
                _ => {}
            }
        }
        out.push(PTok { tok: Tok::Lex(t), line, column });
    }
    let end = locate(&starts, source.len());
    if last_line != 0 {
        out.push(PTok { tok: Tok::Newline, line: last_line, column: 0 });
    }
    for _ in 1..stack.len() {
        out.push(PTok { tok: Tok::Dedent, line: end.0, column: end.1 });
    }
    out.push(PTok { tok: Tok::Eof, line: end.0, column: end.1 });
    Ok(out)
}

/// Parses a MiniPy module: one or more function definitions.
pub fn parse(source: &str) -> Result<AstNode, CodeError> {
    let tokens = lex_classify(source)?;
    let stream = layout(source, tokens)?;
    let mut p = Parser { toks: stream, pos: 0 };
    Ok(p.module()?)
}

struct Parser {
    toks: Vec<PTok>,
    pos: usize,
}

type PResult<T> = Result<T, SyntaxError>;

fn op_kind(text: &str, unary: bool) -> &'static str {
    match (text, unary) {
        ("-", true) => "USub",
        ("+", true) => "UAdd",
        ("not", _) => "Not",
        ("+", false) => "Add",
        ("-", false) => "Sub",
        ("*", _) => "Mult",
        ("/", _) => "Div",
        ("//", _) => "FloorDiv",
        ("%", _) => "Mod",
        ("**", _) => "Pow",
        ("==", _) => "Eq",
        ("!=", _) => "NotEq",
        ("<", _) => "Lt",
        ("<=", _) => "LtE",
        (">", _) => "Gt",
        (">=", _) => "GtE",
        ("and", _) => "And",
        ("or", _) => "Or",
        _ => "Op",
    }
}

impl Parser {
    fn peek(&self) -> &PTok {
        &self.toks[self.pos]
    }

    fn peek_text(&self) -> Option<&str> {
        match &self.peek().tok {
            Tok::Lex(t) => Some(t.text.as_str()),
            _ => None,
        }
    }

    fn at(&self, text: &str) -> bool {
        self.peek_text() == Some(text)
    }

    fn error<T>(&self, expected: &[&str]) -> PResult<T> {
        let t = self.peek();
        Err(SyntaxError {
            line: t.line,
            column: t.column,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: t.describe(),
        })
    }

    fn bump(&mut self) -> PTok {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, text: &str) -> PResult<LexToken> {
        if self.at(text) {
            match self.bump().tok {
                Tok::Lex(t) => Ok(t),
                _ => unreachable!("matched lexical token"),
            }
        } else {
            self.error(&[text])
        }
    }

    fn expect_marker(&mut self, marker: Tok, name: &str) -> PResult<()> {
        if self.peek().tok == marker {
            self.bump();
            Ok(())
        } else {
            self.error(&[name])
        }
    }

    fn name(&mut self) -> PResult<AstNode> {
        match &self.peek().tok {
            Tok::Lex(t) if t.class == LexClass::Identifier => {
                let leaf = AstNode::leaf("Identifier", &t.text);
                self.bump();
                Ok(leaf)
            }
            _ => self.error(&["identifier"]),
        }
    }

    fn module(&mut self) -> PResult<AstNode> {
        let mut funcs = Vec::new();
        while self.peek().tok != Tok::Eof {
            if !self.at("def") {
                return self.error(&["def", "end of input"]);
            }
            funcs.push(self.funcdef()?);
        }
        if funcs.is_empty() {
            return self.error(&["def"]);
        }
        Ok(AstNode::node("Module", funcs))
    }

    fn funcdef(&mut self) -> PResult<AstNode> {
        self.expect("def")?;
        let name = self.name()?;
        self.expect("(")?;
        let mut params = Vec::new();
        if !self.at(")") {
            params.push(self.name()?);
            while self.at(",") {
                self.bump();
                params.push(self.name()?);
            }
        }
        self.expect(")")?;
        self.expect(":")?;
        let body = self.block()?;
        Ok(AstNode::node("FunctionDef", vec![name, AstNode::node("Params", params), body]))
    }

    fn block(&mut self) -> PResult<AstNode> {
        if self.peek().tok != Tok::Newline {
            let s = self.simple_stmt()?;
            self.expect_marker(Tok::Newline, "end of line")?;
            return Ok(AstNode::node("Body", vec![s]));
        }
        self.bump();
        self.expect_marker(Tok::Indent, "indented block")?;
        let mut stmts = vec![self.stmt()?];
        while self.peek().tok != Tok::Dedent {
            stmts.push(self.stmt()?);
        }
        self.bump();
        Ok(AstNode::node("Body", stmts))
    }

    fn stmt(&mut self) -> PResult<AstNode> {
        match self.peek_text() {
            Some("if") => self.if_stmt(),
            Some("while") => {
                self.bump();
                let test = self.expr()?;
                self.expect(":")?;
                let body = self.block()?;
                Ok(AstNode::node("While", vec![test, body]))
            }
            Some("for") => {
                self.bump();
                let target = self.name()?;
                self.expect("in")?;
                let iter = self.expr()?;
                self.expect(":")?;
                let body = self.block()?;
                Ok(AstNode::node("For", vec![target, iter, body]))
            }
            _ => {
                if self.peek().tok == Tok::Eof || self.peek().tok == Tok::Indent {
                    return self.error(&["statement"]);
                }
                let s = self.simple_stmt()?;
                self.expect_marker(Tok::Newline, "end of line")?;
                Ok(s)
            }
        }
    }

    fn if_stmt(&mut self) -> PResult<AstNode> {
        self.expect("if")?;
        let test = self.expr()?;
        self.expect(":")?;
        let body = self.block()?;
        let mut children = vec![test, body];
        while self.at("elif") {
            self.bump();
            let t = self.expr()?;
            self.expect(":")?;
            let b = self.block()?;
            children.push(AstNode::node("Elif", vec![t, b]));
        }
        if self.at("else") {
            self.bump();
            self.expect(":")?;
            let b = self.block()?;
            children.push(AstNode::node("Else", vec![b]));
        }
        Ok(AstNode::node("If", children))
    }

    fn simple_stmt(&mut self) -> PResult<AstNode> {
        match self.peek_text() {
            Some("return") => {
                self.bump();
                if self.peek().tok == Tok::Newline {
                    Ok(AstNode::node("Return", vec![]))
                } else {
                    Ok(AstNode::node("Return", vec![self.expr()?]))
                }
            }
            Some("pass") => {
                self.bump();
                Ok(AstNode::node("Pass", vec![]))
            }
            _ => {
                let is_assign = matches!(&self.peek().tok, Tok::Lex(t) if t.class == LexClass::Identifier)
                    && matches!(&self.toks[self.pos + 1].tok, Tok::Lex(t) if t.text == "=");
                if is_assign {
                    let target = self.name()?;
                    self.bump();
                    let value = self.expr()?;
                    Ok(AstNode::node("Assign", vec![target, value]))
                } else {
                    let e = self.expr()?;
                    Ok(AstNode::node("ExprStmt", vec![e]))
                }
            }
        }
    }

    fn expr(&mut self) -> PResult<AstNode> {
        self.binary_level(0)
    }

    fn binary_level(&mut self, level: usize) -> PResult<AstNode> {
        const LEVELS: [(&str, &[&str]); 5] = [
            ("BoolOp", &["or"]),
            ("BoolOp", &["and"]),
            ("Compare", &["==", "!=", "<", "<=", ">", ">="]),
            ("BinOp", &["+", "-"]),
            ("BinOp", &["*", "/", "//", "%"]),
        ];
        if level == 2 && self.at("not") {
            let op = self.bump();
            let text = match op.tok {
                Tok::Lex(t) => t.text,
                _ => unreachable!("matched lexical token"),
            };
            let operand = self.binary_level(2)?;
            return Ok(AstNode::node("UnaryOp", vec![AstNode::leaf(op_kind(&text, true), &text), operand]));
        }
        if level == LEVELS.len() {
            return self.unary();
        }
        let (kind, ops) = LEVELS[level];
        let mut left = self.binary_level(level + 1)?;
        while let Some(text) = self.peek_text().filter(|t| ops.contains(t)).map(str::to_string) {
            self.bump();
            let right = self.binary_level(level + 1)?;
            left = AstNode::node(kind, vec![left, AstNode::leaf(op_kind(&text, false), &text), right]);
        }
        Ok(left)
    }

    fn unary(&mut self) -> PResult<AstNode> {
        if let Some(text) = self.peek_text().filter(|t| *t == "-" || *t == "+").map(str::to_string) {
            self.bump();
            let operand = self.unary()?;
            return Ok(AstNode::node("UnaryOp", vec![AstNode::leaf(op_kind(&text, true), &text), operand]));
        }
        self.power()
    }

    fn power(&mut self) -> PResult<AstNode> {
        let base = self.atom()?;
        if self.at("**") {
            self.bump();
            let exp = self.unary()?;
            return Ok(AstNode::node("BinOp", vec![base, AstNode::leaf("Pow", "**"), exp]));
        }
        Ok(base)
    }

    fn atom(&mut self) -> PResult<AstNode> {
        const EXPECTED: &[&str] = &["identifier", "number", "string", "True", "False", "None", "("];
        let t = match &self.peek().tok {
            Tok::Lex(t) => t.clone(),
            _ => return self.error(EXPECTED),
        };
        match t.class {
            LexClass::Number => {
                self.bump();
                Ok(AstNode::leaf("Number", &t.text))
            }
            LexClass::String => {
                self.bump();
                Ok(AstNode::leaf("String", &t.text))
            }
            LexClass::Keyword if matches!(t.text.as_str(), "True" | "False" | "None") => {
                self.bump();
                Ok(AstNode::leaf("Constant", &t.text))
            }
            LexClass::Identifier => {
                let name = self.name()?;
                if self.at("(") {
                    self.bump();
                    let mut args = Vec::new();
                    if !self.at(")") {
                        args.push(self.expr()?);
                        while self.at(",") {
                            self.bump();
                            args.push(self.expr()?);
                        }
                    }
                    self.expect(")")?;
                    return Ok(AstNode::node("Call", vec![name, AstNode::node("Args", args)]));
                }
                Ok(name)
            }
            LexClass::Operator if t.text == "(" => {
                self.bump();
                let inner = self.expr()?;
                self.expect(")")?;
                Ok(AstNode::node("Paren", vec![inner]))
            }
            _ => self.error(EXPECTED),
        }
    }
}
