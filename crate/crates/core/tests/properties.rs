use std::collections::HashSet;

use kgreason::checkpoint;
use kgreason::config::{FeatureSource, ModelConfig};
use kgreason::eval::{evaluate, export_embeddings, load_embeddings, predict_topk, Protocol, Side};
use kgreason::gnn::{forward_all, gat_attention, GatParams, GnnKind, GraphIndex, LayerStack, StackShape};
use kgreason::kg::{
    load_entity_texts, load_triples, split_dataset, write_entity_texts, write_triples, Direction, EntityId,
    EntityTexts, KnowledgeGraph, RelationId, Symbols, Triple,
};
use kgreason::linalg::Matrix;
use kgreason::model::ModelState;
use kgreason::scoring::{score_distmult, RelationEmbeddings, ScoreFnSpec, ScoreKind};
use kgreason::ScoringModel;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Entity count, relation count, triples.
fn arb_kg(max_ent: usize) -> impl Strategy<Value = (usize, usize, Vec<Triple>)> {
    (3..=max_ent, 1..=4usize).prop_flat_map(|(n, r)| {
        let triple = (0..n as u32, 0..r as u32, 0..n as u32).prop_map(|(h, r, t)| Triple::new(h, r, t));
        (Just(n), Just(r), prop::collection::vec(triple, 1..4 * n))
    })
}

fn int_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3i32..=3, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v.into_iter().map(f64::from).collect()).unwrap())
}

fn arb_model(n: usize, r: usize) -> impl Strategy<Value = ScoringModel> {
    let spec = prop_oneof![
        Just(ScoreFnSpec::transe(1)),
        Just(ScoreFnSpec::transe(2)),
        Just(ScoreFnSpec::of(ScoreKind::Distmult)),
        Just(ScoreFnSpec::of(ScoreKind::Simple)),
    ];
    (int_matrix(n, 3), int_matrix(r, 3), int_matrix(r, 3), spec).prop_map(|(e, f, i, spec)| ScoringModel {
        entities: e,
        relations: RelationEmbeddings { forward: f, inverse: i },
        spec,
    })
}

fn kg_and_model(max_ent: usize) -> impl Strategy<Value = (KnowledgeGraph, ScoringModel)> {
    arb_kg(max_ent).prop_flat_map(|(n, r, triples)| {
        let kg = KnowledgeGraph::new(n, r, triples).unwrap();
        (Just(kg), arb_model(n, r))
    })
}

fn names(n: usize, prefix: &str) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn symbols(n_ent: usize, n_rel: usize) -> Symbols {
    let mut s = Symbols::new();
    for e in names(n_ent, "ent ") {
        s.entities.intern(&e);
    }
    for r in names(n_rel, "rel_") {
        s.relations.intern(&r);
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_is_a_deterministic_partition((n, r, triples) in arb_kg(30), seed in any::<u64>()) {
        let kg = KnowledgeGraph::new(n, r, triples).unwrap();
        let a = split_dataset(&kg, (0.8, 0.1, 0.1), RelationId(0), seed).unwrap();
        let b = split_dataset(&kg, (0.8, 0.1, 0.1), RelationId(0), seed).unwrap();
        prop_assert_eq!(&a, &b);
        let mut all: Vec<usize> = a.indices.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..kg.triples().len()).collect::<Vec<_>>());
        prop_assert!(a.target_test.iter().all(|t| t.relation == RelationId(0) && a.test.contains(t)));
    }

    #[test]
    fn filtered_mrr_dominates_raw((kg, model) in kg_and_model(20), side in prop_oneof![Just(Side::Head), Just(Side::Tail), Just(Side::Both)]) {
        let known = kg.triple_set();
        let raw = evaluate(&model, kg.triples(), &known, Protocol::Raw, side).unwrap().metrics;
        let filtered = evaluate(&model, kg.triples(), &known, Protocol::Filtered, side).unwrap().metrics;
        prop_assert!(filtered.mrr >= raw.mrr);
        prop_assert!(filtered.mr <= raw.mr);
        prop_assert!(filtered.hit10 >= raw.hit10);
    }

    #[test]
    fn ranks_ignore_positive_rescaling((kg, mut model) in kg_and_model(20)) {
        // doubling every vector scales TransE by 2 and DistMult/SimplE by 8, exactly
        let known = kg.triple_set();
        let before = evaluate(&model, kg.triples(), &known, Protocol::Filtered, Side::Both).unwrap();
        model.entities = model.entities.map(|x| 2.0 * x);
        model.relations.forward = model.relations.forward.map(|x| 2.0 * x);
        model.relations.inverse = model.relations.inverse.map(|x| 2.0 * x);
        let after = evaluate(&model, kg.triples(), &known, Protocol::Filtered, Side::Both).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn topk_over_all_entities_is_a_sorted_permutation((kg, model) in kg_and_model(25), dir in prop_oneof![Just(Direction::Out), Just(Direction::In)]) {
        let n = kg.num_entities();
        let list = predict_topk(&model, EntityId(0), RelationId(0), dir, n, None).unwrap();
        let mut ids: Vec<u32> = list.candidates.iter().map(|c| c.entity.0).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..n as u32).collect::<Vec<_>>());
        let better = |a: f64, b: f64| model.spec.polarity().better(a, b);
        prop_assert!(list.candidates.windows(2).all(|w| !better(w[1].score, w[0].score)));
        let known = kg.triple_set();
        let excluded = predict_topk(&model, EntityId(0), RelationId(0), dir, n, Some(&known)).unwrap();
        for c in &excluded.candidates {
            let t = match dir {
                Direction::Out => Triple { head: EntityId(0), relation: RelationId(0), tail: c.entity },
                Direction::In => Triple { head: c.entity, relation: RelationId(0), tail: EntityId(0) },
            };
            prop_assert!(!known.contains(&t));
        }
    }

    #[test]
    fn distmult_is_symmetric(v in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3, -1e3f64..1e3), 1..32)) {
        let h: Vec<f64> = v.iter().map(|x| x.0).collect();
        let r: Vec<f64> = v.iter().map(|x| x.1).collect();
        let t: Vec<f64> = v.iter().map(|x| x.2).collect();
        prop_assert_eq!(score_distmult(&h, &r, &t), score_distmult(&t, &r, &h));
    }

    #[test]
    fn attention_is_a_distribution(
        w in prop::collection::vec(-4.0f64..4.0, 6),
        a in prop::collection::vec(-4.0f64..4.0, 4),
        nbs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 0..10),
        slope in 0.0f64..0.5,
    ) {
        let p = GatParams { w: Matrix::from_vec(2, 3, w).unwrap(), a: Matrix::from_vec(1, 4, a).unwrap(), leaky_slope: slope };
        let vi = [0.5, -1.0, 2.0];
        let mut hood: Vec<&[f64]> = vec![&vi];
        hood.extend(nbs.iter().map(|v| v.as_slice()));
        let alpha = gat_attention(&p, &vi, &hood).unwrap();
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(alpha.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn graph_stack_is_permutation_equivariant(
        (n, r, triples) in arb_kg(12),
        kind in prop_oneof![Just(GnnKind::Gat), Just(GnnKind::Rgcn)],
        seed in any::<u64>(),
    ) {
        let kg = KnowledgeGraph::new(n, r, triples.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = StackShape { kind, dim: 3, depth: 2, heads: 2, num_relations: r, leaky_slope: 0.2 };
        let stack = LayerStack::init(&shape, false, &mut rng).unwrap();
        let feats = Matrix::from_vec(n, 3, (0..3 * n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0).collect()).unwrap();
        // reverse the entity ids
        let perm = |e: EntityId| EntityId((n - 1) as u32 - e.0);
        let permuted = KnowledgeGraph::new(n, r, triples.iter().map(|t| Triple { head: perm(t.head), relation: t.relation, tail: perm(t.tail) }).collect()).unwrap();
        let mut pfeats = Matrix::zeros(n, 3);
        for e in 0..n {
            pfeats.row_mut(perm(EntityId(e as u32)).index()).copy_from_slice(feats.row(e));
        }
        let out = forward_all(stack.as_ref(), &feats, &GraphIndex::new(&kg)).unwrap();
        let pout = forward_all(stack.as_ref(), &pfeats, &GraphIndex::new(&permuted)).unwrap();
        for e in 0..n {
            let a = out.row(e);
            let b = pout.row(perm(EntityId(e as u32)).index());
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_bytes(
        seed in any::<u64>(),
        kind in prop_oneof![Just(GnnKind::Gat), Just(GnnKind::Rgcn), Just(GnnKind::None)],
        score in prop_oneof![Just(ScoreKind::Transe), Just(ScoreKind::Distmult), Just(ScoreKind::Simple)],
        separate in any::<bool>(),
        random_features in any::<bool>(),
    ) {
        let mut config = ModelConfig::default();
        config.seed = seed;
        config.dim = 4;
        config.text.raw_dim = 16;
        config.gnn.variant = kind;
        config.score = ScoreFnSpec::of(score);
        config.separate_head_tail_mlp = separate;
        if random_features {
            config.stage2.features = FeatureSource::Random;
        }
        let sym = symbols(6, 2);
        let texts: EntityTexts = [(EntityId(0), "a".to_owned()), (EntityId(3), "some words".to_owned())].into();
        let raw = kgreason::text::RawTexts::encode(&config.text.build().unwrap(), &sym, &texts, 6).unwrap();
        let s1 = ModelState::init_stage1(&config, &raw, 2).unwrap();
        let s2 = ModelState::init_stage2(&config, (!random_features).then_some(&s1), 6, 2).unwrap();
        for s in [&s1, &s2] {
            let bytes = checkpoint::to_bytes(s);
            let back = checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, s);
            prop_assert_eq!(checkpoint::to_bytes(&back), bytes);
        }
    }

    #[test]
    fn embeddings_export_round_trips(values in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 12)) {
        let sym = symbols(4, 1);
        let table = Matrix::from_vec(4, 3, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        export_embeddings(&table, &sym, &path).unwrap();
        let (names, back) = load_embeddings(&path).unwrap();
        prop_assert_eq!(names, sym.entities.names().to_vec());
        prop_assert_eq!(back, table);
    }

    #[test]
    fn triples_and_texts_round_trip((n, r, triples) in arb_kg(15), text in "[a-z ]{0,20}") {
        // the loader rejects self-links and counts repeats
        let mut seen = HashSet::new();
        let triples: Vec<Triple> = triples.into_iter().filter(|t| t.head != t.tail && seen.insert(*t)).collect();
        prop_assume!(!triples.is_empty());
        let sym = symbols(n, r);
        let kg = KnowledgeGraph::new(n, r, triples).unwrap();
        let texts: EntityTexts = [(EntityId(0), text.clone()), (EntityId(n as u32 - 1), format!("{text} \"quoted\"\tx"))].into();
        let dir = tempfile::tempdir().unwrap();
        write_triples(&dir.path().join("t.tsv"), kg.triples(), &sym).unwrap();
        write_entity_texts(&dir.path().join("x.jsonl"), &texts, &sym).unwrap();
        let mut loaded = Symbols::new();
        let load = load_triples(&dir.path().join("t.tsv"), &mut loaded).unwrap();
        prop_assert_eq!(load.duplicates, 0);
        let rename = |t: &Triple, from: &Symbols, to: &Symbols| (
            from.entity_name(t.head).to_owned(), from.relation_name(t.relation).to_owned(), to.entity_name(t.tail).to_owned()
        );
        let want: HashSet<_> = kg.triples().iter().map(|t| rename(t, &sym, &sym)).collect();
        let got: HashSet<_> = load.triples.iter().map(|t| rename(t, &loaded, &loaded)).collect();
        prop_assert_eq!(got, want);
        let back = load_entity_texts(&dir.path().join("x.jsonl"), &loaded).unwrap();
        for (id, t) in &texts {
            let name = sym.entity_name(*id);
            if let Ok(e) = loaded.entity(name) {
                prop_assert_eq!(back.texts.get(&e), Some(t));
            } else {
                prop_assert!(back.rejected.iter().any(|r| r == name));
            }
        }
    }
}
