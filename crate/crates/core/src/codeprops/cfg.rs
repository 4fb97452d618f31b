use serde::{Deserialize, Serialize};

use super::ast::AstNode;
use super::CodeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Entry,
    Exit,
    Basic,
    /// Loop-condition block of a `while` or desugared `for`.
    LoopTest,
    /// Increment block of a desugared `for`.
    LoopStep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub kind: BlockKind,
    /// Statement kinds in block order; a trailing branch is listed as its
    /// predicate owner (`If`, `Elif`, `While`, `For`).
    pub stmts: Vec<String>,
    /// True when the block ends in a two-way branch.
    pub branches: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cfg {
    pub blocks: Vec<Block>,
    pub edges: Vec<(usize, usize)>,
    pub entry: usize,
    pub exit: usize,
}

impl Cfg {
    pub fn num_nodes(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn successors(&self, b: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.0 == b).map(|e| e.1).collect()
    }

    /// Places several graphs side by side with no connecting edges. The
    /// entry and exit of the result are those of the first part.
    pub fn disjoint_union(parts: &[Cfg]) -> Cfg {
        let mut out = Cfg {
            blocks: Vec::new(),
            edges: Vec::new(),
            entry: parts.first().map_or(0, |p| p.entry),
            exit: parts.first().map_or(0, |p| p.exit),
        };
        for p in parts {
            let base = out.blocks.len();
            out.blocks.extend(p.blocks.iter().cloned());
            out.edges.extend(p.edges.iter().map(|&(a, b)| (a + base, b + base)));
        }
        out
    }
}

/// Builds the control-flow graph of one `FunctionDef`. A `Module` yields the
/// disjoint union of its functions' graphs.
pub fn build_cfg(ast: &AstNode) -> Result<Cfg, CodeError> {
    match ast.kind.as_str() {
        "FunctionDef" => {
            let body = ast
                .children
                .get(2)
                .filter(|b| b.kind == "Body")
                .ok_or_else(|| CodeError::Cfg("function without body".into()))?;
            let mut b = Builder::new();
            let ends = b.body(body, vec![b.entry_id()])?;
            for e in ends {
                b.edge(e, 1);
            }
            Ok(b.finish())
        }
        "Module" => {
            let parts: Result<Vec<Cfg>, _> = ast.children.iter().map(build_cfg).collect();
            Ok(Cfg::disjoint_union(&parts?))
        }
        other => Err(CodeError::Cfg(format!("expected FunctionDef or Module, found {other}"))),
    }
}

/// M = E − N + 2P.
pub fn cyclomatic(cfg: &Cfg) -> usize {
    let p = connected_components(cfg) as i64;
    let m = cfg.num_edges() as i64 - cfg.num_nodes() as i64 + 2 * p;
    m.max(1) as usize
}

pub fn connected_components(cfg: &Cfg) -> usize {
    count_components(cfg.num_nodes(), &cfg.edges)
}

/// Undirected component count by union-find.
pub fn count_components(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut components = n;
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
            components -= 1;
        }
    }
    components
}

struct Builder {
    blocks: Vec<Block>,
    edges: Vec<(usize, usize)>,
}

impl Builder {
    fn new() -> Self {
        let mk = |kind| Block { kind, stmts: Vec::new(), branches: false };
        Builder {
            blocks: vec![mk(BlockKind::Entry), mk(BlockKind::Exit)],
            edges: Vec::new(),
        }
    }

    fn entry_id(&self) -> usize {
        0
    }

    fn finish(self) -> Cfg {
        Cfg {
            blocks: self.blocks,
            edges: self.edges,
            entry: 0,
            exit: 1,
        }
    }

    fn edge(&mut self, a: usize, b: usize) {
        self.edges.push((a, b));
    }

    fn new_block(&mut self, kind: BlockKind, preds: &[usize]) -> usize {
        let id = self.blocks.len();
        self.blocks.push(Block { kind, stmts: Vec::new(), branches: false });
        for &p in preds {
            self.edge(p, id);
        }
        id
    }

    /// Returns a block that can take another statement: the single open
    /// predecessor itself, or a fresh block joined from all predecessors.
    fn open(&mut self, preds: Vec<usize>) -> usize {
        if let [only] = preds[..] {
            let b = &self.blocks[only];
            if b.kind == BlockKind::Basic && !b.branches {
                return only;
            }
        }
        self.new_block(BlockKind::Basic, &preds)
    }

    /// Processes statements reachable from `preds`; returns the blocks that
    /// fall through to whatever follows. An empty result means every path
    /// returned.
    fn body(&mut self, body: &AstNode, mut preds: Vec<usize>) -> Result<Vec<usize>, CodeError> {
        for s in &body.children {
            if preds.is_empty() {
                break;
            }
            preds = self.stmt(s, preds)?;
        }
        Ok(preds)
    }

    fn child<'a>(s: &'a AstNode, i: usize) -> Result<&'a AstNode, CodeError> {
        s.children
            .get(i)
            .ok_or_else(|| CodeError::Cfg(format!("malformed {} node", s.kind)))
    }

    fn stmt(&mut self, s: &AstNode, preds: Vec<usize>) -> Result<Vec<usize>, CodeError> {
        match s.kind.as_str() {
            "Assign" | "ExprStmt" | "Pass" => {
                let b = self.open(preds);
                self.blocks[b].stmts.push(s.kind.clone());
                Ok(vec![b])
            }
            "Return" => {
                let b = self.open(preds);
                self.blocks[b].stmts.push(s.kind.clone());
                self.edge(b, 1);
                Ok(Vec::new())
            }
            "If" => {
                let test = self.open(preds);
                self.blocks[test].stmts.push("If".into());
                self.blocks[test].branches = true;
                let mut ends = self.body(Self::child(s, 1)?, vec![test])?;
                let mut last_test = test;
                let mut has_else = false;
                for clause in &s.children[2..] {
                    match clause.kind.as_str() {
                        "Elif" => {
                            let t = self.new_block(BlockKind::Basic, &[last_test]);
                            self.blocks[t].stmts.push("Elif".into());
                            self.blocks[t].branches = true;
                            ends.extend(self.body(Self::child(clause, 1)?, vec![t])?);
                            last_test = t;
                        }
                        "Else" => {
                            ends.extend(self.body(Self::child(clause, 0)?, vec![last_test])?);
                            has_else = true;
                        }
                        other => return Err(CodeError::Cfg(format!("unexpected {other} in If"))),
                    }
                }
                if !has_else {
                    ends.push(last_test);
                }
                Ok(ends)
            }
            "While" => {
                let test = self.new_block(BlockKind::LoopTest, &preds);
                self.blocks[test].stmts.push("While".into());
                self.blocks[test].branches = true;
                let ends = self.body(Self::child(s, 1)?, vec![test])?;
                for e in ends {
                    self.edge(e, test);
                }
                Ok(vec![test])
            }
            "For" => {
                let init = self.open(preds);
                self.blocks[init].stmts.push("ForInit".into());
                let test = self.new_block(BlockKind::LoopTest, &[init]);
                self.blocks[test].stmts.push("For".into());
                self.blocks[test].branches = true;
                let ends = self.body(Self::child(s, 2)?, vec![test])?;
                if !ends.is_empty() {
                    let step = self.new_block(BlockKind::LoopStep, &ends);
                    self.blocks[step].stmts.push("ForStep".into());
                    self.edge(step, test);
                }
                Ok(vec![test])
            }
            other => Err(CodeError::Cfg(format!("unsupported statement {other}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codeprops::parse;

    fn counts(src: &str) -> (usize, usize, usize, usize) {
        let cfg = build_cfg(&parse(src).unwrap()).unwrap();
        (cfg.num_nodes(), cfg.num_edges(), connected_components(&cfg), cyclomatic(&cfg))
    }

    #[test]
    fn straight_line_is_a_path() {
        let (n, e, p, m) = counts("def f(a):\n    b = a\n    c = b\n    return c\n");
        assert_eq!((n, e, p, m), (3, 2, 1, 1));
    }

    #[test]
    fn loop_accumulator_function() {
        let src = "def sum_to(n):\n    total = 0\n    for i in range(n):\n        total = total + i\n    return total\n";
        assert_eq!(counts(src), (7, 7, 1, 2));
    }

    #[test]
    fn while_containing_if() {
        let src = "def f(n):\n    while n > 0:\n        if n % 2 == 0:\n            n = n - 1\n        n = n - 1\n    return n\n";
        let (n, e, _, m) = counts(src);
        assert_eq!(e as i64 - n as i64 + 2, 3);
        assert_eq!(m, 3);
    }

    #[test]
    fn short_circuit_adds_no_branch() {
        let a = counts("def f(a, b):\n    if a and b:\n        return 1\n    return 0\n");
        let b = counts("def f(a, b):\n    if a:\n        return 1\n    return 0\n");
        assert_eq!(a, b);
        assert_eq!(a.3, 2);
    }

    #[test]
    fn elif_chain_and_dead_code() {
        let src = "def f(x):\n    if x < 0:\n        return 0\n    elif x < 5:\n        return 1\n        y = 2\n    else:\n        return 2\n";
        let (_, _, _, m) = counts(src);
        assert_eq!(m, 3);
    }

    #[test]
    fn two_functions_two_components() {
        let src = "def f(a):\n    return a\ndef g(b):\n    if b:\n        return 1\n    return 2\n";
        let (_, _, p, m) = counts(src);
        assert_eq!(p, 2);
        assert_eq!(m, 1 + 2);
    }
}
