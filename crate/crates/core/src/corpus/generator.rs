use serde::{Deserialize, Serialize};

use super::CorpusRecord;
use crate::codeprops::LexClass;
use crate::numcore::RngStream;

/// Knobs for the toy corpus. Rare-slot probabilities control how many
/// identifiers, numbers and strings fall outside a typical vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub rare_identifier: f64,
    pub rare_number: f64,
    pub rare_string: f64,
    /// Probability of prepending a guard chain; its length is drawn from
    /// `1..=max_guards` with a decaying weight.
    pub guard_prob: f64,
    pub max_guards: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            rare_identifier: 0.3,
            rare_number: 0.3,
            rare_string: 0.5,
            guard_prob: 0.6,
            max_guards: 10,
        }
    }
}

/// Generator-side ground truth retained next to each generated function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenMeta {
    pub tag: String,
    /// Token classes in emission order, one per lexical token.
    pub labels: Vec<LexClass>,
    /// Count of `if`/`elif`/`while`/`for` headers emitted.
    pub predicates: usize,
    pub guards: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedFunction {
    pub code: String,
    pub doc: String,
    pub tokens: Vec<(String, LexClass)>,
    pub meta: GenMeta,
}

enum Stmt {
    Line(&'static str),
    Block(&'static str, Vec<Stmt>),
    /// Owned variant used for generated guard chains.
    OwnedBlock(String, Vec<Stmt>),
    OwnedLine(String),
}

fn s(t: &'static str) -> Stmt {
    Stmt::Line(t)
}

fn b(h: &'static str, body: Vec<Stmt>) -> Stmt {
    Stmt::Block(h, body)
}

struct Problem {
    tag: &'static str,
    names: &'static [&'static str],
    params: &'static [&'static str],
    docs: &'static [&'static str],
    body: fn(&mut RngStream) -> Vec<Stmt>,
}

const GEN_KEYWORDS: &[&str] = &[
    "def", "return", "if", "elif", "else", "while", "for", "in", "and", "or", "not", "pass", "True", "False", "None",
];

const COMMON_NAMES: &[&str] = &[
    "n", "x", "y", "a", "b", "i", "j", "k", "m", "total", "count", "result", "acc", "value", "limit", "step", "left",
    "right", "low", "high", "best", "cur", "idx", "temp", "num", "size", "lo", "hi", "d", "t", "c", "r", "p", "q",
];

const COMMON_STRINGS: &[&str] = &["'done'", "'ok'", "'big'", "'small'", "'yes'", "'no'", "'error'"];

const SYLLABLES: &[&str] = &[
    "ka", "zo", "mi", "ru", "te", "vo", "xi", "pla", "qu", "ne", "sor", "ban", "lek", "dri", "fu", "gar", "hep", "jin",
    "wum", "yal",
];

fn problems() -> Vec<Problem> {
    vec![
        Problem {
            tag: "sum_below",
            names: &["sum_below", "total_below", "sum_range", "add_all"],
            params: &["$n"],
            docs: &[
                "return the sum of all integers below $n",
                "compute the total of numbers from zero up to $n",
                "add up every value less than $n",
            ],
            body: |_| vec![s("$t = 0"), b("for $i in range ( $n ) :", vec![s("$t = $t + $i")]), s("return $t")],
        },
        Problem {
            tag: "factorial_loop",
            names: &["factorial", "fact", "factorial_loop", "product_upto"],
            params: &["$n"],
            docs: &[
                "multiply the integers from one to $n",
                "return the factorial of $n using a for loop",
                "compute the product of the first $n positive integers",
            ],
            body: |_| vec![s("$r = 1"), b("for $i in range ( $n ) :", vec![s("$r = $r * ( $i + 1 )")]), s("return $r")],
        },
        Problem {
            tag: "factorial_countdown",
            names: &["factorial_down", "fact_while", "countdown_product"],
            params: &["$n"],
            docs: &[
                "compute the factorial of $n by counting down",
                "return the factorial of $n with a while loop",
            ],
            body: |_| {
                vec![
                    s("$r = 1"),
                    b("while $n > 1 :", vec![s("$r = $r * $n"), s("$n = $n - 1")]),
                    s("return $r"),
                ]
            },
        },
        Problem {
            tag: "count_multiples",
            names: &["count_multiples", "count_divisible", "multiples_below"],
            params: &["$n", "$k"],
            docs: &[
                "count how many numbers below $n are divisible by $k",
                "return the number of multiples of $k less than $n",
            ],
            body: |_| {
                vec![
                    s("$c = 0"),
                    b("for $i in range ( $n ) :", vec![b("if $i % $k == 0 :", vec![s("$c = $c + 1")])]),
                    s("return $c"),
                ]
            },
        },
        Problem {
            tag: "max_two",
            names: &["max_two", "larger", "bigger_of", "maximum"],
            params: &["$a", "$b"],
            docs: &["return the larger of $a and $b", "pick the maximum of two values $a and $b"],
            body: |rng| {
                if rng.bernoulli(0.5) {
                    vec![b("if $a > $b :", vec![s("return $a")]), b("else :", vec![s("return $b")])]
                } else {
                    vec![b("if $a > $b :", vec![s("return $a")]), s("return $b")]
                }
            },
        },
        Problem {
            tag: "min_two",
            names: &["min_two", "smaller", "smaller_of", "minimum"],
            params: &["$a", "$b"],
            docs: &["return the smaller of $a and $b", "pick the minimum of two values $a and $b"],
            body: |rng| {
                if rng.bernoulli(0.5) {
                    vec![b("if $a < $b :", vec![s("return $a")]), b("else :", vec![s("return $b")])]
                } else {
                    vec![b("if $a < $b :", vec![s("return $a")]), s("return $b")]
                }
            },
        },
        Problem {
            tag: "absolute",
            names: &["absolute", "abs_value", "magnitude"],
            params: &["$x"],
            docs: &["return the absolute value of $x", "compute the magnitude of $x ignoring its sign"],
            body: |_| vec![b("if $x < 0 :", vec![s("return - $x")]), s("return $x")],
        },
        Problem {
            tag: "clamp",
            names: &["clamp", "bound", "limit_to"],
            params: &["$x", "$lo", "$hi"],
            docs: &["clamp $x into the range from $lo to $hi", "restrict $x so it stays between $lo and $hi"],
            body: |_| {
                vec![
                    b("if $x < $lo :", vec![s("return $lo")]),
                    b("elif $x > $hi :", vec![s("return $hi")]),
                    b("else :", vec![s("return $x")]),
                ]
            },
        },
        Problem {
            tag: "gcd",
            names: &["gcd", "greatest_divisor", "common_divisor"],
            params: &["$a", "$b"],
            docs: &[
                "compute the greatest common divisor of $a and $b",
                "return the largest number dividing both $a and $b",
            ],
            body: |_| {
                vec![
                    b("while $b != 0 :", vec![s("$t = $b"), s("$b = $a % $b"), s("$a = $t")]),
                    s("return $a"),
                ]
            },
        },
        Problem {
            tag: "digit_count",
            names: &["digit_count", "num_digits", "count_digits"],
            params: &["$n"],
            docs: &["count the decimal digits of $n", "return how many digits $n has"],
            body: |_| {
                vec![
                    s("$c = 0"),
                    b("while $n > 0 :", vec![s("$n = $n // 10"), s("$c = $c + 1")]),
                    s("return $c"),
                ]
            },
        },
        Problem {
            tag: "is_even",
            names: &["is_even", "even", "check_even"],
            params: &["$n"],
            docs: &["check whether $n is even", "return true when $n is divisible by two"],
            body: |_| vec![s("return $n % 2 == 0")],
        },
        Problem {
            tag: "sign",
            names: &["sign", "signum", "sign_of"],
            params: &["$x"],
            docs: &["return the sign of $x", "return one for positive $x and minus one for negative"],
            body: |_| {
                vec![
                    b("if $x > 0 :", vec![s("return 1")]),
                    b("elif $x < 0 :", vec![s("return - 1")]),
                    b("else :", vec![s("return 0")]),
                ]
            },
        },
        Problem {
            tag: "power",
            names: &["power", "pow_loop", "raise_to"],
            params: &["$b", "$e"],
            docs: &["raise $b to the power $e", "multiply $b by itself $e times"],
            body: |_| vec![s("$r = 1"), b("for $i in range ( $e ) :", vec![s("$r = $r * $b")]), s("return $r")],
        },
        Problem {
            tag: "sum_squares",
            names: &["sum_squares", "square_sum", "squares_total"],
            params: &["$n"],
            docs: &["return the sum of squares below $n", "add up the squares of integers less than $n"],
            body: |_| vec![s("$t = 0"), b("for $i in range ( $n ) :", vec![s("$t = $t + $i * $i")]), s("return $t")],
        },
        Problem {
            tag: "fibonacci",
            names: &["fibonacci", "fib", "nth_fib"],
            params: &["$n"],
            docs: &["return the $n th fibonacci number", "compute fibonacci numbers iteratively up to $n"],
            body: |_| {
                vec![
                    s("$a = 0"),
                    s("$b = 1"),
                    b("for $i in range ( $n ) :", vec![s("$t = $a + $b"), s("$a = $b"), s("$b = $t")]),
                    s("return $a"),
                ]
            },
        },
        Problem {
            tag: "average",
            names: &["average", "mean_two", "midpoint"],
            params: &["$a", "$b"],
            docs: &["return the mean of $a and $b", "compute the midpoint between $a and $b"],
            body: |_| vec![s("return ( $a + $b ) / 2")],
        },
        Problem {
            tag: "count_down",
            names: &["count_down", "countdown", "print_down"],
            params: &["$n"],
            docs: &["print numbers counting down from $n", "show each value from $n down to one"],
            body: |_| {
                vec![
                    b("while $n > 0 :", vec![s("print ( $n )"), s("$n = $n - 1")]),
                    s("return @done"),
                ]
            },
        },
        Problem {
            tag: "distance",
            names: &["distance", "gap", "abs_diff"],
            params: &["$a", "$b"],
            docs: &["return the distance between $a and $b", "compute the absolute difference of $a and $b"],
            body: |_| vec![s("return abs ( $a - $b )")],
        },
        Problem {
            tag: "in_range",
            names: &["in_range", "between", "within"],
            params: &["$x", "$lo", "$hi"],
            docs: &["check whether $x lies between $lo and $hi", "test if $x is inside the interval $lo to $hi"],
            body: |_| vec![s("return $x >= $lo and $x <= $hi")],
        },
        Problem {
            tag: "label_size",
            names: &["label_size", "describe", "size_label"],
            params: &["$x"],
            docs: &["describe $x as big or small compared to #k", "label $x big when it exceeds #k"],
            body: |_| vec![b("if $x > #k :", vec![s("return @big")]), s("return @small")],
        },
        Problem {
            tag: "collatz",
            names: &["collatz", "collatz_steps", "steps_to_one"],
            params: &["$n"],
            docs: &["count collatz steps needed to reach one from $n", "return the collatz sequence length of $n"],
            body: |_| {
                vec![
                    s("$c = 0"),
                    b(
                        "while $n != 1 :",
                        vec![
                            b("if $n % 2 == 0 :", vec![s("$n = $n // 2")]),
                            b("else :", vec![s("$n = 3 * $n + 1")]),
                            s("$c = $c + 1"),
                        ],
                    ),
                    s("return $c"),
                ]
            },
        },
        Problem {
            tag: "sum_evens",
            names: &["sum_evens", "even_total", "add_evens"],
            params: &["$n"],
            docs: &["add up the even numbers below $n", "return the total of even integers less than $n"],
            body: |_| {
                vec![
                    s("$t = 0"),
                    b("for $i in range ( $n ) :", vec![b("if $i % 2 == 0 :", vec![s("$t = $t + $i")])]),
                    s("return $t"),
                ]
            },
        },
        Problem {
            tag: "is_prime",
            names: &["is_prime", "prime", "check_prime"],
            params: &["$n"],
            docs: &["check whether $n is a prime number", "return true when $n has no divisors but one and itself"],
            body: |_| {
                vec![
                    b("if $n < 2 :", vec![s("return False")]),
                    s("$d = 2"),
                    b(
                        "while $d * $d <= $n :",
                        vec![b("if $n % $d == 0 :", vec![s("return False")]), s("$d = $d + 1")],
                    ),
                    s("return True"),
                ]
            },
        },
        Problem {
            tag: "triangle",
            names: &["triangle", "triangular", "tri_number"],
            params: &["$n"],
            docs: &["return the $n th triangular number", "compute the sum one plus two up to $n in closed form"],
            body: |_| vec![s("return $n * ( $n + 1 ) // 2")],
        },
        Problem {
            tag: "swap_sum",
            names: &["scaled_sum", "weighted_pair", "combine"],
            params: &["$a", "$b"],
            docs: &["scale $a and $b by #k and return their sum", "combine $a and $b after scaling each"],
            body: |_| vec![s("$x = $a * #k"), s("$y = $b * #k"), s("return $x + $y")],
        },
    ]
}

/// Frequent variable names used for non-rare identifier slots.
pub fn common_names() -> &'static [&'static str] {
    COMMON_NAMES
}

/// Every non-rare function name across all problems, deduplicated.
pub fn function_names() -> Vec<&'static str> {
    let mut out: Vec<&'static str> = problems().iter().flat_map(|p| p.names.iter().copied()).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Semantic tags in generator order.
pub fn problem_tags() -> Vec<&'static str> {
    problems().iter().map(|p| p.tag).collect()
}

struct Emitter<'a> {
    rng: &'a mut RngStream,
    cfg: &'a GenConfig,
    vars: Vec<(String, String)>,
    consts: Vec<(String, String)>,
    strings: Vec<(String, String)>,
    out: Vec<(String, LexClass)>,
    lines: Vec<String>,
    predicates: usize,
}

fn rare_identifier(rng: &mut RngStream) -> String {
    let parts = rng.range(2, 3);
    let mut s = String::new();
    for _ in 0..parts {
        s.push_str(rng.choose(SYLLABLES));
    }
    s.push_str(&rng.below(100).to_string());
    s
}

fn classify(piece: &str) -> LexClass {
    let first = piece.chars().next().expect("non-empty piece");
    if piece.chars().all(|c| c.is_ascii_digit()) {
        LexClass::Number
    } else if GEN_KEYWORDS.contains(&piece) {
        LexClass::Keyword
    } else if first == '_' || first.is_ascii_alphabetic() {
        LexClass::Identifier
    } else {
        LexClass::Operator
    }
}

impl<'a> Emitter<'a> {
    fn var(&mut self, key: &str) -> String {
        if let Some((_, v)) = self.vars.iter().find(|(k, _)| k == key) {
            return v.clone();
        }
        let name = loop {
            let cand = if self.rng.bernoulli(self.cfg.rare_identifier) {
                rare_identifier(self.rng)
            } else {
                (*self.rng.choose(COMMON_NAMES)).to_string()
            };
            if !self.vars.iter().any(|(_, v)| *v == cand) && !GEN_KEYWORDS.contains(&cand.as_str()) {
                break cand;
            }
        };
        self.vars.push((key.to_string(), name.clone()));
        name
    }

    fn constant(&mut self, key: &str) -> String {
        if let Some((_, v)) = self.consts.iter().find(|(k, _)| k == key) {
            return v.clone();
        }
        let v = if self.rng.bernoulli(self.cfg.rare_number) {
            self.rng.range(100, 99_999).to_string()
        } else {
            self.rng.range(0, 12).to_string()
        };
        self.consts.push((key.to_string(), v.clone()));
        v
    }

    fn string(&mut self, key: &str) -> String {
        if let Some((_, v)) = self.strings.iter().find(|(k, _)| k == key) {
            return v.clone();
        }
        let v = if self.rng.bernoulli(self.cfg.rare_string) {
            format!("'{}'", rare_identifier(self.rng))
        } else if COMMON_STRINGS.contains(&format!("'{key}'").as_str()) {
            format!("'{key}'")
        } else {
            (*self.rng.choose(COMMON_STRINGS)).to_string()
        };
        self.strings.push((key.to_string(), v.clone()));
        v
    }

    /// Emits one template line, labeling every piece by construction.
    fn line(&mut self, template: &str, depth: usize) {
        let mut rendered: Vec<(String, LexClass)> = Vec::new();
        for piece in template.split_whitespace() {
            let tok = if let Some(k) = piece.strip_prefix('$') {
                (self.var(k), LexClass::Identifier)
            } else if let Some(k) = piece.strip_prefix('#') {
                (self.constant(k), LexClass::Number)
            } else if let Some(k) = piece.strip_prefix('@') {
                (self.string(k), LexClass::String)
            } else if piece.starts_with('\'') {
                (piece.to_string(), LexClass::String)
            } else {
                (piece.to_string(), classify(piece))
            };
            rendered.push(tok);
        }
        let mut text = "    ".repeat(depth);
        for (i, (t, _)) in rendered.iter().enumerate() {
            if i > 0 {
                let prev = &rendered[i - 1];
                let tight_before = matches!(t.as_str(), "," | ")" | ":")
                    || (t == "(" && prev.1 == LexClass::Identifier);
                let tight_after = prev.0 == "(" || (prev.0 == "-" && is_unary_minus(&rendered, i - 1));
                if !tight_before && !tight_after {
                    text.push(' ');
                }
            }
            text.push_str(t);
        }
        self.out.extend(rendered);
        self.lines.push(text);
    }

    fn stmts(&mut self, stmts: &[Stmt], depth: usize) {
        for st in stmts {
            match st {
                Stmt::Line(t) => self.line(t, depth),
                Stmt::OwnedLine(t) => self.line(&t.clone(), depth),
                Stmt::Block(h, body) => {
                    self.header(h, depth);
                    self.stmts(body, depth + 1);
                }
                Stmt::OwnedBlock(h, body) => {
                    self.header(&h.clone(), depth);
                    self.stmts(body, depth + 1);
                }
            }
        }
    }

    fn header(&mut self, h: &str, depth: usize) {
        let first = h.split_whitespace().next().unwrap_or("");
        if matches!(first, "if" | "elif" | "while" | "for") {
            self.predicates += 1;
        }
        self.line(h, depth);
    }
}

fn is_unary_minus(toks: &[(String, LexClass)], i: usize) -> bool {
    i == 0 || matches!(toks[i - 1].1, LexClass::Keyword | LexClass::Operator) && toks[i - 1].0 != ")"
}

fn guard_count(rng: &mut RngStream, cfg: &GenConfig) -> usize {
    if cfg.max_guards == 0 || !rng.bernoulli(cfg.guard_prob) {
        return 0;
    }
    let mut g = 1;
    while g < cfg.max_guards && rng.bernoulli(0.65) {
        g += 1;
    }
    g
}

/// Generates one function for problem `problem` (an index into
/// [`problem_tags`]).
pub fn generate_function(problem: usize, rng: &mut RngStream, cfg: &GenConfig) -> GeneratedFunction {
    let probs = problems();
    let p = &probs[problem % probs.len()];
    let body = (p.body)(rng);
    let guards = guard_count(rng, cfg);
    let mut em = Emitter {
        rng,
        cfg,
        vars: Vec::new(),
        consts: Vec::new(),
        strings: Vec::new(),
        out: Vec::new(),
        lines: Vec::new(),
        predicates: 0,
    };
    let fname = if em.rng.bernoulli(cfg.rare_identifier) {
        rare_identifier(em.rng)
    } else {
        (*em.rng.choose(p.names)).to_string()
    };
    // Bind parameters first so their names are stable for the doc string.
    for k in p.params {
        em.var(&k[1..]);
    }
    em.vars.push(("__fn".into(), fname));
    em.line(&format!("def $__fn ( {} ) :", p.params.join(" , ")), 0);

    let mut all = Vec::new();
    let guard_var = p.params[0].to_string();
    for g in 0..guards {
        let kw = if g == 0 { "if" } else { "elif" };
        let c = format!("#g{g}");
        let r = format!("#r{g}");
        all.push(Stmt::OwnedBlock(
            format!("{kw} {guard_var} == {c} :"),
            vec![Stmt::OwnedLine(format!("return {r}"))],
        ));
    }
    all.extend(body);
    em.stmts(&all, 1);

    let doc_t = *em.rng.choose(p.docs);
    let mut doc_words = Vec::new();
    for w in doc_t.split_whitespace() {
        let word = if let Some(k) = w.strip_prefix('$') {
            em.var(k)
        } else if let Some(k) = w.strip_prefix('#') {
            em.constant(k)
        } else {
            w.to_string()
        };
        doc_words.push(word);
    }
    let code = em.lines.join("\n") + "\n";
    let labels = em.out.iter().map(|(_, c)| *c).collect();
    GeneratedFunction {
        code,
        doc: doc_words.join(" "),
        tokens: em.out.clone(),
        meta: GenMeta {
            tag: p.tag.to_string(),
            labels,
            predicates: em.predicates,
            guards,
        },
    }
}

/// Deterministic toy corpus: record `i` is drawn from a stream derived from
/// `(seed, i)`, so prefixes of larger corpora coincide.
pub fn generate_toy_corpus(seed: u64, size: usize) -> Vec<CorpusRecord> {
    generate_toy_corpus_with(seed, size, &GenConfig::default())
}

pub fn generate_toy_corpus_with(seed: u64, size: usize, cfg: &GenConfig) -> Vec<CorpusRecord> {
    let n_problems = problem_tags().len();
    let base = RngStream::new(seed);
    (0..size)
        .map(|i| {
            let mut rng = base.derive(&format!("record/{i}"));
            let problem = rng.below(n_problems);
            let f = generate_function(problem, &mut rng, cfg);
            CorpusRecord::generated(f)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codeprops::{build_cfg, cyclomatic, lex_classify, parse};

    #[test]
    fn deterministic_and_parseable() {
        let a = generate_toy_corpus(7, 60);
        let b = generate_toy_corpus(7, 60);
        assert_eq!(a, b);
        for r in &a {
            let ast = parse(&r.code).unwrap_or_else(|e| panic!("{e}\n{}", r.code));
            let m = cyclomatic(&build_cfg(&ast).unwrap());
            let meta = r.meta.as_ref().unwrap();
            assert_eq!(m, meta.predicates + 1, "{}", r.code);
            let lexed: Vec<LexClass> = lex_classify(&r.code).unwrap().into_iter().map(|t| t.class).collect();
            assert_eq!(lexed, meta.labels, "{}", r.code);
        }
    }

    #[test]
    fn every_problem_generates() {
        let mut rng = RngStream::new(3);
        for p in 0..problem_tags().len() {
            let f = generate_function(p, &mut rng, &GenConfig::default());
            assert!(parse(&f.code).is_ok(), "{}", f.code);
            assert!(!f.doc.is_empty());
        }
    }
}
