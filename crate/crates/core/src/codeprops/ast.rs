use serde::{Deserialize, Serialize};

use super::CodeError;

/// Syntax tree node. Nonterminals carry no value; terminal leaves carry a
/// type in `kind` and, until stripped by [`ast_only`], their source text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AstNode {
    pub kind: String,
    pub value: Option<String>,
    pub children: Vec<AstNode>,
}

impl AstNode {
    pub fn node(kind: &str, children: Vec<AstNode>) -> Self {
        AstNode {
            kind: kind.to_string(),
            value: None,
            children,
        }
    }

    pub fn leaf(kind: &str, value: &str) -> Self {
        AstNode {
            kind: kind.to_string(),
            value: Some(value.to_string()),
            children: Vec::new(),
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn count(&self) -> usize {
        1 + self.children.iter().map(AstNode::count).sum::<usize>()
    }

    pub fn value_count(&self) -> usize {
        usize::from(self.value.is_some()) + self.children.iter().map(AstNode::value_count).sum::<usize>()
    }

    /// Pre-order traversal.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a AstNode)) {
        f(self);
        for c in &self.children {
            c.walk(f);
        }
    }

    pub fn walk_mut(&mut self, f: &mut impl FnMut(&mut AstNode)) {
        f(self);
        for c in &mut self.children {
            c.walk_mut(f);
        }
    }

    pub fn kinds(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.walk(&mut |n| out.push(n.kind.clone()));
        out
    }
}

/// Removes every terminal value, keeping tree shape and kinds.
pub fn ast_only(ast: &AstNode) -> AstNode {
    AstNode {
        kind: ast.kind.clone(),
        value: None,
        children: ast.children.iter().map(ast_only).collect(),
    }
}

/// Bracketed pre-order serialization `( Kind child… )` as a token sequence.
pub fn serialize_ast(ast: &AstNode) -> Vec<String> {
    let mut out = Vec::with_capacity(ast.count() * 3);
    fn go(n: &AstNode, out: &mut Vec<String>) {
        out.push("(".into());
        out.push(n.kind.clone());
        for c in &n.children {
            go(c, out);
        }
        out.push(")".into());
    }
    go(ast, &mut out);
    out
}

/// Inverse of [`serialize_ast`].
pub fn deserialize_ast(tokens: &[String]) -> Result<AstNode, CodeError> {
    fn go(tokens: &[String], pos: &mut usize) -> Result<AstNode, CodeError> {
        let bad = |p: usize, what: &str| CodeError::Serialization(format!("token {p}: expected {what}"));
        if tokens.get(*pos).map(String::as_str) != Some("(") {
            return Err(bad(*pos, "'('"));
        }
        *pos += 1;
        let kind = match tokens.get(*pos) {
            Some(k) if k != "(" && k != ")" => k.clone(),
            _ => return Err(bad(*pos, "node kind")),
        };
        *pos += 1;
        let mut children = Vec::new();
        loop {
            match tokens.get(*pos).map(String::as_str) {
                Some(")") => {
                    *pos += 1;
                    return Ok(AstNode::node(&kind, children));
                }
                Some("(") => children.push(go(tokens, pos)?),
                _ => return Err(bad(*pos, "'(' or ')'")),
            }
        }
    }
    let mut pos = 0;
    let node = go(tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(CodeError::Serialization(format!("trailing tokens after position {pos}")));
    }
    Ok(node)
}

/// Renders a full (value-bearing) tree back to source with 4-space indentation.
pub fn unparse(ast: &AstNode) -> Result<String, CodeError> {
    let mut out = String::new();
    match ast.kind.as_str() {
        "Module" => {
            for (i, f) in ast.children.iter().enumerate() {
                if i > 0 {
                    out.push('\n');
                }
                stmt(f, 0, &mut out)?;
            }
        }
        _ => stmt(ast, 0, &mut out)?,
    }
    Ok(out)
}

fn bad_shape(n: &AstNode) -> CodeError {
    CodeError::Serialization(format!("cannot unparse node {}", n.kind))
}

fn val(n: &AstNode) -> Result<&str, CodeError> {
    n.value.as_deref().ok_or_else(|| bad_shape(n))
}

fn indent(level: usize, out: &mut String) {
    for _ in 0..level {
        out.push_str("    ");
    }
}

fn body(n: &AstNode, level: usize, out: &mut String) -> Result<(), CodeError> {
    if n.kind != "Body" {
        return Err(bad_shape(n));
    }
    for s in &n.children {
        stmt(s, level, out)?;
    }
    Ok(())
}

fn stmt(n: &AstNode, level: usize, out: &mut String) -> Result<(), CodeError> {
    let c = &n.children;
    match n.kind.as_str() {
        "FunctionDef" => {
            indent(level, out);
            out.push_str("def ");
            out.push_str(val(&c[0])?);
            out.push('(');
            let params: Result<Vec<&str>, _> = c[1].children.iter().map(val).collect();
            out.push_str(&params?.join(", "));
            out.push_str("):\n");
            body(&c[2], level + 1, out)
        }
        "Assign" => {
            indent(level, out);
            out.push_str(val(&c[0])?);
            out.push_str(" = ");
            out.push_str(&expr(&c[1])?);
            out.push('\n');
            Ok(())
        }
        "Return" => {
            indent(level, out);
            out.push_str("return");
            if let Some(e) = c.first() {
                out.push(' ');
                out.push_str(&expr(e)?);
            }
            out.push('\n');
            Ok(())
        }
        "Pass" => {
            indent(level, out);
            out.push_str("pass\n");
            Ok(())
        }
        "ExprStmt" => {
            indent(level, out);
            out.push_str(&expr(&c[0])?);
            out.push('\n');
            Ok(())
        }
        "While" => {
            indent(level, out);
            out.push_str(&format!("while {}:\n", expr(&c[0])?));
            body(&c[1], level + 1, out)
        }
        "For" => {
            indent(level, out);
            out.push_str(&format!("for {} in {}:\n", val(&c[0])?, expr(&c[1])?));
            body(&c[2], level + 1, out)
        }
        "If" => {
            indent(level, out);
            out.push_str(&format!("if {}:\n", expr(&c[0])?));
            body(&c[1], level + 1, out)?;
            for clause in &c[2..] {
                indent(level, out);
                match clause.kind.as_str() {
                    "Elif" => {
                        out.push_str(&format!("elif {}:\n", expr(&clause.children[0])?));
                        body(&clause.children[1], level + 1, out)?;
                    }
                    "Else" => {
                        out.push_str("else:\n");
                        body(&clause.children[0], level + 1, out)?;
                    }
                    _ => return Err(bad_shape(clause)),
                }
            }
            Ok(())
        }
        _ => Err(bad_shape(n)),
    }
}

fn expr(n: &AstNode) -> Result<String, CodeError> {
    let c = &n.children;
    Ok(match n.kind.as_str() {
        "Identifier" | "Number" | "String" | "Constant" => val(n)?.to_string(),
        "BinOp" | "Compare" | "BoolOp" => format!("{} {} {}", expr(&c[0])?, val(&c[1])?, expr(&c[2])?),
        "UnaryOp" => {
            let op = val(&c[0])?;
            if op == "not" {
                format!("not {}", expr(&c[1])?)
            } else {
                format!("{op}{}", expr(&c[1])?)
            }
        }
        "Call" => {
            let args: Result<Vec<String>, _> = c[1].children.iter().map(expr).collect();
            format!("{}({})", val(&c[0])?, args?.join(", "))
        }
        "Paren" => format!("({})", expr(&c[0])?),
        _ => return Err(bad_shape(n)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strip_assign() {
        let t = AstNode::node("Assign", vec![AstNode::leaf("Identifier", "x"), AstNode::leaf("Number", "1")]);
        let s = ast_only(&t);
        assert_eq!(s, AstNode::node("Assign", vec![AstNode::node("Identifier", vec![]), AstNode::node("Number", vec![])]));
        assert_eq!(ast_only(&s), s);
        assert_eq!(s.value_count(), 0);
        assert_eq!(s.count(), t.count());
    }

    #[test]
    fn serialize_terminal_and_back() {
        let n = AstNode::node("Number", vec![]);
        assert_eq!(serialize_ast(&n).join(" "), "( Number )");
        let t = AstNode::node("Assign", vec![AstNode::node("Identifier", vec![]), n]);
        let toks = serialize_ast(&t);
        assert_eq!(deserialize_ast(&toks).unwrap(), t);
        assert!(deserialize_ast(&toks[..toks.len() - 1]).is_err());
    }
}
