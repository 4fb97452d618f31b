use std::collections::{BTreeSet, HashMap};

use super::ast::AstNode;

/// Names bound inside a function: its parameters, assignment targets and
/// loop variables. Calls to anything else are left alone by renaming.
pub fn bound_names(func: &AstNode) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    if let Some(params) = func.children.get(1) {
        for p in &params.children {
            if let Some(v) = &p.value {
                out.insert(v.clone());
            }
        }
    }
    func.walk(&mut |n| {
        if matches!(n.kind.as_str(), "Assign" | "For") {
            if let Some(v) = n.children.first().and_then(|t| t.value.as_ref()) {
                out.insert(v.clone());
            }
        }
    });
    out
}

/// Applies a consistent identifier renaming to every `Identifier` leaf whose
/// text is a key of `map`.
pub fn rename_identifiers(ast: &AstNode, map: &HashMap<String, String>) -> AstNode {
    let mut out = ast.clone();
    out.walk_mut(&mut |n| {
        if n.kind == "Identifier" {
            if let Some(new) = n.value.as_ref().and_then(|v| map.get(v)) {
                n.value = Some(new.clone());
            }
        }
    });
    out
}

/// Renames the bound names of every function in a module to `prefix0`,
/// `prefix1`, … in first-binding order. Function names are renamed too when
/// `rename_functions` is set. The prefix must not collide with existing names.
pub fn alpha_rename(module: &AstNode, prefix: &str, rename_functions: bool) -> AstNode {
    let mut out = module.clone();
    let funcs: Vec<AstNode> = if module.kind == "Module" {
        module.children.clone()
    } else {
        vec![module.clone()]
    };
    let mut fn_map = HashMap::new();
    if rename_functions {
        for (i, f) in funcs.iter().enumerate() {
            if let Some(name) = f.children.first().and_then(|n| n.value.clone()) {
                fn_map.insert(name, format!("{prefix}fn{i}"));
            }
        }
    }
    let rename_one = |f: &AstNode| {
        let mut order = Vec::new();
        let bound = bound_names(f);
        f.walk(&mut |n| {
            if n.kind == "Identifier" {
                if let Some(v) = &n.value {
                    if bound.contains(v) && !order.contains(v) {
                        order.push(v.clone());
                    }
                }
            }
        });
        let mut map: HashMap<String, String> = fn_map.clone();
        for (i, v) in order.into_iter().enumerate() {
            map.insert(v, format!("{prefix}{i}"));
        }
        rename_identifiers(f, &map)
    };
    if out.kind == "Module" {
        out.children = funcs.iter().map(rename_one).collect();
        out
    } else {
        rename_one(&out)
    }
}

fn identifiers(n: &AstNode) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    n.walk(&mut |x| {
        if x.kind == "Identifier" {
            if let Some(v) = &x.value {
                out.insert(v.clone());
            }
        }
    });
    out
}

fn assign_target(n: &AstNode) -> Option<&str> {
    (n.kind == "Assign").then(|| n.children[0].value.as_deref()).flatten()
}

/// Calls `f` on each statement list (pre-order) until it reports a change.
fn first_body_edit(n: &mut AstNode, f: &mut impl FnMut(&mut Vec<AstNode>) -> bool) -> bool {
    if n.kind == "Body" && f(&mut n.children) {
        return true;
    }
    n.children.iter_mut().any(|c| first_body_edit(c, f))
}

/// Swaps the `skip`-th adjacent pair of independent assignments: distinct
/// targets, and neither right-hand side reads the other's target. Returns
/// `None` when no such pair exists.
pub fn swap_independent_assignments(ast: &AstNode, skip: usize) -> Option<AstNode> {
    let mut out = ast.clone();
    let mut seen = 0;
    let changed = first_body_edit(&mut out, &mut |stmts| {
        for i in 0..stmts.len().saturating_sub(1) {
            let (a, b) = (&stmts[i], &stmts[i + 1]);
            let (Some(ta), Some(tb)) = (assign_target(a), assign_target(b)) else { continue };
            let independent =
                ta != tb && !identifiers(&a.children[1]).contains(tb) && !identifiers(&b.children[1]).contains(ta);
            if independent {
                if seen == skip {
                    stmts.swap(i, i + 1);
                    return true;
                }
                seen += 1;
            }
        }
        false
    });
    changed.then_some(out)
}

/// Rewrites the first `for v in range(e):` loop into the equivalent
/// counter-driven `while`. Applies only when `v` is used nowhere else in the
/// function and the body assigns neither `v` nor any name read by `e`.
pub fn for_range_to_while(func: &AstNode) -> Option<AstNode> {
    let mut out = func.clone();
    let whole = func.clone();
    let changed = first_body_edit(&mut out, &mut |stmts| {
        for i in 0..stmts.len() {
            let s = &stmts[i];
            if s.kind != "For" {
                continue;
            }
            let (target, iter, body) = (&s.children[0], &s.children[1], &s.children[2]);
            let Some(var) = target.value.clone() else { continue };
            let is_range = iter.kind == "Call"
                && iter.children[0].value.as_deref() == Some("range")
                && iter.children[1].children.len() == 1;
            if !is_range {
                continue;
            }
            let bound = &iter.children[1].children[0];
            let mut assigned = BTreeSet::new();
            body.walk(&mut |n| {
                if let Some(t) = assign_target(n) {
                    assigned.insert(t.to_string());
                }
                if n.kind == "For" {
                    if let Some(v) = &n.children[0].value {
                        assigned.insert(v.clone());
                    }
                }
            });
            if assigned.contains(&var) || identifiers(bound).iter().any(|x| assigned.contains(x)) {
                continue;
            }
            let mut inside = 0;
            s.walk(&mut |n| inside += usize::from(n.kind == "Identifier" && n.value.as_deref() == Some(&var)));
            let mut total = 0;
            whole.walk(&mut |n| total += usize::from(n.kind == "Identifier" && n.value.as_deref() == Some(&var)));
            if inside != total {
                continue;
            }
            let ident = || AstNode::leaf("Identifier", &var);
            let init = AstNode::node("Assign", vec![ident(), AstNode::leaf("Number", "0")]);
            let test = AstNode::node("Compare", vec![ident(), AstNode::leaf("Lt", "<"), bound.clone()]);
            let step = AstNode::node(
                "Assign",
                vec![ident(), AstNode::node("BinOp", vec![ident(), AstNode::leaf("Add", "+"), AstNode::leaf("Number", "1")])],
            );
            let mut new_body = body.children.clone();
            new_body.push(step);
            let w = AstNode::node("While", vec![test, AstNode::node("Body", new_body)]);
            stmts.splice(i..=i, [init, w]);
            return true;
        }
        false
    });
    changed.then_some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codeprops::{ast_only, parse, unparse};

    #[test]
    fn rename_preserves_structure() {
        let src = "def add(a, b):\n    c = a + b\n    return len(c)\n";
        let m = parse(src).unwrap();
        let r = alpha_rename(&m, "v", true);
        assert_eq!(ast_only(&r), ast_only(&m));
        let text = unparse(&r).unwrap();
        assert!(text.contains("def vfn0(v0, v1):"));
        assert!(text.contains("len(v2)"));
    }

    #[test]
    fn swap_only_independent_pairs() {
        let m = parse("def f(a):\n    x = a\n    y = x\n    z = 2\n    return y + z\n").unwrap();
        let s = swap_independent_assignments(&m, 0).unwrap();
        assert_eq!(unparse(&s).unwrap(), "def f(a):\n    x = a\n    z = 2\n    y = x\n    return y + z\n");
        assert!(swap_independent_assignments(&m, 1).is_none());
    }

    #[test]
    fn for_range_becomes_while() {
        let m = parse("def f(n):\n    t = 0\n    for i in range(n):\n        t = t + i\n    return t\n").unwrap();
        let w = for_range_to_while(&m).unwrap();
        let text = unparse(&w).unwrap();
        assert!(text.contains("i = 0\n    while i < n:\n        t = t + i\n        i = i + 1\n"));
        let reused = parse("def f(n):\n    for i in range(n):\n        n = i\n    return n\n").unwrap();
        assert!(for_range_to_while(&reused).is_none());
    }

    #[test]
    fn bound_names_cover_params_and_targets() {
        let m = parse("def f(x):\n    for i in range(x):\n        y = i\n    return g(y)\n").unwrap();
        let names: Vec<String> = bound_names(&m.children[0]).into_iter().collect();
        assert_eq!(names, vec!["i", "x", "y"]);
    }
}
