//! Compiler front end for MiniPy, the small Python-like language used by the
//! toy corpus: lexical classification, parsing, AST-only trees, control-flow
//! graphs and cyclomatic complexity.
//!
//! Grammar (indentation delimits blocks, four spaces by convention):
//!
//! ```text
//! module    := funcdef+
//! funcdef   := "def" NAME "(" [NAME ("," NAME)*] ")" ":" block
//! block     := simple NEWLINE | NEWLINE INDENT stmt+ DEDENT
//! stmt      := if | while | for | simple NEWLINE
//! if        := "if" expr ":" block ("elif" expr ":" block)* ["else" ":" block]
//! while     := "while" expr ":" block
//! for       := "for" NAME "in" expr ":" block
//! simple    := "return" [expr] | "pass" | NAME "=" expr | expr
//! expr      := or
//! or        := and ("or" and)*
//! and       := not ("and" not)*
//! not       := "not" not | cmp
//! cmp       := sum (("=="|"!="|"<"|"<="|">"|">=") sum)*
//! sum       := term (("+"|"-") term)*
//! term      := unary (("*"|"/"|"//"|"%") unary)*
//! unary     := ("-"|"+") unary | power
//! power     := atom ["**" unary]
//! atom      := NAME | NAME "(" [expr ("," expr)*] ")" | NUMBER | STRING
//!            | "True" | "False" | "None" | "(" expr ")"
//! ```

pub mod ast;
pub mod cfg;
pub mod lexer;
pub mod parser;
pub mod transform;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ast::{ast_only, deserialize_ast, serialize_ast, unparse, AstNode};
pub use cfg::{build_cfg, connected_components, count_components, cyclomatic, Block, BlockKind, Cfg};
pub use lexer::{is_keyword, lex_classify, LexClass, LexError, LexToken, KEYWORDS};
pub use parser::{parse, SyntaxError};
pub use transform::{alpha_rename, bound_names, for_range_to_while, rename_identifiers, swap_independent_assignments};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodeError {
    #[error(transparent)]
    Lex(#[from] LexError),
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("ast serialization: {0}")]
    Serialization(String),
    #[error("cfg: {0}")]
    Cfg(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzedToken {
    pub text: String,
    pub class: LexClass,
}

/// Everything the `analyze` command reports for one source file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub tokens: Vec<AnalyzedToken>,
    pub ast_only: String,
    pub nodes: usize,
    pub edges: usize,
    pub components: usize,
    pub cyclomatic: usize,
}

pub fn analyze(source: &str) -> Result<Analysis, CodeError> {
    let tokens = lex_classify(source)?
        .into_iter()
        .map(|t| AnalyzedToken { text: t.text, class: t.class })
        .collect();
    let ast = parse(source)?;
    let cfg = build_cfg(&ast)?;
    Ok(Analysis {
        tokens,
        ast_only: serialize_ast(&ast_only(&ast)).join(" "),
        nodes: cfg.num_nodes(),
        edges: cfg.num_edges(),
        components: connected_components(&cfg),
        cyclomatic: cyclomatic(&cfg),
    })
}

/// Number of decision predicates (`if`, `elif`, `while`, `for`) in a tree.
pub fn count_predicates(ast: &AstNode) -> usize {
    let mut n = 0;
    ast.walk(&mut |node| {
        if matches!(node.kind.as_str(), "If" | "Elif" | "While" | "For") {
            n += 1;
        }
    });
    n
}
