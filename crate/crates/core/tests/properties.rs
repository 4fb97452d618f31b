//! Randomised invariants over generated programs, configs and vectors.

use proptest::prelude::*;

use codelayers::codeprops::{
    alpha_rename, ast_only, build_cfg, cyclomatic, deserialize_ast, lex_classify, parse, serialize_ast, unparse,
};
use codelayers::corpus::{generate_toy_corpus, split_of, SplitSpec, Vocabulary};
use codelayers::finetune::apply_freeze;
use codelayers::metrics::{edit_sim, levenshtein};
use codelayers::model::{group_of, param_count, EncoderParams, ModelConfig};
use codelayers::numcore::RngStream;
use codelayers::par::Exec;
use codelayers::rsa::{distance_matrix, pearson};

fn small_config(layers: usize) -> ModelConfig {
    let mut c = ModelConfig::desk(40);
    c.num_layers = layers;
    c.hidden_dim = 8;
    c.ffn_dim = 16;
    c.num_heads = 2;
    c.max_positions = 16;
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn freezing_is_idempotent_and_matches_closed_form(layers in 1usize..5, k_raw in 0usize..5, lm in any::<bool>()) {
        let k = k_raw % (layers + 1);
        let c = small_config(layers);
        let mut p = EncoderParams::<f32>::init(&c, &RngStream::new(layers as u64)).unwrap();
        let a = apply_freeze(&mut p, Some(k), lm).unwrap();
        let flags: Vec<bool> = p.set.iter().map(|x| x.trainable).collect();
        let b = apply_freeze(&mut p, Some(k), lm).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(flags, p.set.iter().map(|x| x.trainable).collect::<Vec<_>>());
        prop_assert_eq!(a.trainable, p.set.trainable_numel());
        prop_assert_eq!(a.trainable, param_count(&c, Some(k), !lm).unwrap().trainable + p.head_numel());
        for x in p.set.iter() {
            if let Some(g) = group_of(&x.name) {
                prop_assert_eq!(x.trainable, g > k, "{}", x.name);
            }
        }
    }

    #[test]
    fn generated_programs_round_trip(seed in 0u64..10_000) {
        for r in generate_toy_corpus(seed, 4) {
            let ast = parse(&r.code).unwrap();
            let again = parse(&unparse(&ast).unwrap()).unwrap();
            prop_assert_eq!(&again, &ast);
            prop_assert_eq!(deserialize_ast(&serialize_ast(&ast)).unwrap(), ast_only(&ast));
            let renamed = alpha_rename(&ast, "v", true);
            prop_assert_eq!(serialize_ast(&ast_only(&renamed)), serialize_ast(&ast_only(&ast)));
            prop_assert_eq!(
                cyclomatic(&build_cfg(&renamed).unwrap()),
                cyclomatic(&build_cfg(&ast).unwrap())
            );
        }
    }

    #[test]
    fn lexer_spans_index_the_source(seed in 0u64..10_000) {
        for r in generate_toy_corpus(seed, 3) {
            let toks = lex_classify(&r.code).unwrap();
            let mut end = 0;
            for t in &toks {
                prop_assert!(t.span.0 >= end);
                prop_assert_eq!(&r.code[t.span.0..t.span.1], t.text.as_str());
                end = t.span.1;
            }
        }
    }

    #[test]
    fn vocabulary_round_trips_known_text(seed in 0u64..10_000) {
        let corpus = generate_toy_corpus(seed, 6);
        let v = Vocabulary::build(&corpus, 1).unwrap();
        for r in &corpus {
            let ids = v.encode(&r.code);
            prop_assert!(!ids.contains(&v.unk()));
            prop_assert_eq!(v.decode(&ids), Vocabulary::canonical(&r.code));
        }
    }

    #[test]
    fn split_assignment_depends_only_on_the_id(seed in 0u64..10_000) {
        let spec = SplitSpec::default();
        let a = generate_toy_corpus(seed, 8);
        let b = generate_toy_corpus(seed, 3);
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.id, &y.id);
            prop_assert_eq!(split_of(&x.id, &spec), split_of(&y.id, &spec));
        }
    }

    #[test]
    fn levenshtein_is_a_metric(a in "[ab c]{0,8}", b in "[ab c]{0,8}", c in "[ab c]{0,8}") {
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        prop_assert_eq!(levenshtein(&a, &b) == 0, a == b);
        let s = edit_sim(&a, &b);
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn rsa_ignores_vector_scale(seed in 0u64..10_000, n in 3usize..12) {
        let mut rng = RngStream::new(seed);
        let vs: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let scaled: Vec<Vec<f64>> = vs
            .iter()
            .map(|v| {
                let s = 0.1 + 10.0 * rng.uniform();
                v.iter().map(|x| x * s).collect()
            })
            .collect();
        let rho = pearson(&distance_matrix(&vs, Exec::Sequential).unwrap(), &distance_matrix(&scaled, Exec::Sequential).unwrap()).unwrap();
        prop_assert!((rho - 1.0).abs() < 1e-12, "{}", rho);
    }
}
