use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stmn::language::{
    embed_tokens, generate_expression, laplacian, laplacian_pe, merge_trees, orient_edges,
    parse_conllu, ConlluDocument, DependencyTree, DirectionMode, Expression, RelationVocabulary,
    Template, TokenEmbeddingTable, WordVocabulary,
};
use stmn::numerics::{ParamStore, Tape};
use stmn::scene::{generate_scene, GeneratorConfig};

const FIXTURES: &str = include_str!("fixtures/sentences.conllu");

#[test]
fn fixtures_parse_and_round_trip() {
    let doc = ConlluDocument::parse(FIXTURES).unwrap();
    assert_eq!(doc.sentences.len(), 10);
    assert_eq!(doc.to_conllu(), FIXTURES);
    for tree in doc.trees() {
        assert_eq!(tree.heads.iter().filter(|&&h| h == 0).count(), 1);
    }
}

#[test]
fn fixture_relation_ids_are_stable() {
    let a = RelationVocabulary::from_trees(&parse_conllu(FIXTURES).unwrap());
    let b = RelationVocabulary::from_trees(&parse_conllu(FIXTURES).unwrap());
    assert_eq!(a, b);
    let mut trees = parse_conllu(FIXTURES).unwrap();
    trees.reverse();
    assert_eq!(RelationVocabulary::from_trees(&trees), a);
}

/// Random valid tree: each token attaches to an earlier-placed token in a
/// shuffled order, the first placed token being the root.
fn arb_tree() -> impl Strategy<Value = DependencyTree> {
    (1usize..9)
        .prop_flat_map(|n| {
            (
                Just(n),
                Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
                proptest::collection::vec(any::<usize>(), n),
                proptest::collection::vec(0usize..4, n),
            )
        })
        .prop_map(|(n, order, picks, rels)| {
            let mut heads = vec![0; n];
            for k in 1..n {
                let parent = order[picks[k] % k];
                heads[order[k]] = parent + 1;
            }
            let labels = ["det", "amod", "nmod", "case"];
            DependencyTree {
                forms: (0..n).map(|i| format!("w{i}")).collect(),
                heads,
                deprels: (0..n)
                    .map(|i| if order[0] == i { "root".into() } else { labels[rels[i]].into() })
                    .collect(),
            }
        })
}

fn find(parent: &mut Vec<usize>, x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    parent[x] = r;
    r
}

proptest! {
    #[test]
    fn merged_graph_is_a_spanning_tree(trees in proptest::collection::vec(arb_tree(), 1..4)) {
        let vocab = RelationVocabulary::from_trees(&trees);
        let g = merge_trees(&trees, &vocab).unwrap();
        let n_w: usize = trees.iter().map(DependencyTree::len).sum();
        prop_assert_eq!(g.node_count, n_w + 1);
        prop_assert_eq!(g.edges.len(), n_w);
        // Union-find: N_w edges joining N_w+1 nodes without a cycle means a
        // connected tree.
        let mut parent: Vec<usize> = (0..g.node_count).collect();
        for e in &g.edges {
            let (a, b) = (find(&mut parent, e.src), find(&mut parent, e.dst));
            prop_assert_ne!(a, b);
            parent[a] = b;
        }
        let mut dests: Vec<usize> = g.edges.iter().map(|e| e.dst).collect();
        dests.sort_unstable();
        prop_assert_eq!(dests, (1..g.node_count).collect::<Vec<_>>());

        for mode in DirectionMode::ALL {
            let o = orient_edges(&g, mode);
            let expect = if mode == DirectionMode::Bidirectional { 2 * n_w } else { n_w };
            prop_assert_eq!(o.edges.len(), expect);
        }
        let twice = orient_edges(&orient_edges(&g, DirectionMode::Reverse), DirectionMode::Reverse);
        prop_assert_eq!(&twice, &g);
    }

    #[test]
    fn laplacian_eigenpairs(trees in proptest::collection::vec(arb_tree(), 1..4), k in 1usize..12) {
        let g = merge_trees(&trees, &RelationVocabulary::from_trees(&trees)).unwrap();
        let pe = laplacian_pe(&orient_edges(&g, DirectionMode::Reverse), k);
        let l = laplacian(&g);
        let available = (g.node_count - 1).min(k);
        for j in 0..k {
            let v = DVector::from_vec(pe.column(j));
            if j >= available {
                prop_assert!(v.iter().all(|&x| x == 0.0));
                continue;
            }
            prop_assert!((v.norm() - 1.0).abs() <= 1e-9);
            prop_assert!((&l * &v - &v * pe.eigenvalues[j]).norm() <= 1e-8);
            prop_assert!(pe.eigenvalues[j] > 1e-9);
            for i in 0..j {
                let u = DVector::from_vec(pe.column(i));
                prop_assert!(u.dot(&v).abs() <= 1e-8);
            }
        }
        prop_assert!(pe.eigenvalues[..available].windows(2).all(|w| w[0] <= w[1] + 1e-12));
    }
}

#[test]
fn generated_expressions_parse() {
    let cfg = GeneratorConfig { n_points: 400, ..Default::default() };
    for seed in 0..30 {
        let (_, objects) = generate_scene(&cfg, "s", seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = generate_expression(&objects, &Template::ALL, &mut rng).unwrap();
        let trees = parse_conllu(&g.conllu).unwrap();
        let expr = Expression::from_trees(&trees, &g.text).unwrap();
        assert_eq!(expr.tokens.join(" "), g.text);
        assert!(objects.iter().any(|o| o.instance == g.target_instance));
        assert_eq!(ConlluDocument::parse(&g.conllu).unwrap().to_conllu(), g.conllu);
    }
}

#[test]
fn embedding_gradients_touch_only_used_rows() {
    let vocab = WordVocabulary::from_words(["a", "b", "c", "d", "e"]);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let table = TokenEmbeddingTable::init(&mut store, vocab, 4, &mut rng);
    let expr = Expression::single("b d b zzz").unwrap();
    let mut tape = Tape::new();
    let (w, _) = embed_tokens(&mut tape, &store, &table, &expr).unwrap();
    let loss = tape.sum_all(w);
    tape.backward(loss, &mut store).unwrap();
    let grad = store.get(table.embedding).grad().unwrap().to_vec();
    let used = table.rows(&expr);
    for r in 0..table.vocabulary.len() {
        let g = &grad[r * 4..(r + 1) * 4];
        let uses = used.iter().filter(|&&u| u == r).count() as f64;
        assert!(g.iter().all(|&x| x == uses), "row {r}: {g:?}");
    }
    assert!(store.get(table.cls).grad().is_none_or(|g| g.iter().all(|&x| x == 0.0)));
}
