mod common;

use graphpb::fixtures::{random_graph, random_tree, seeded_rng, two_iph_graph, u1_graph, u2_graph, TWO_IPH_ANNOTATION};
use graphpb::graph::{
    build_graph, build_graph_with_tally, build_phoneme_chain, export_graph, import_graph, phoneme_chain, to_adjacency,
    EdgeConfig, EdgeKind, GraphError, GraphFormat, IphPairMode,
};
use graphpb::prosody::{parse_annotation, AnnotatedUtterance, MarkerScheme};
use proptest::prelude::*;

fn cfg(pph: bool, iph: bool, seq: bool, mode: IphPairMode) -> EdgeConfig {
    EdgeConfig { include_pph: pph, include_iph: iph, include_seq: seq, iph_pair_mode: mode }
}

#[test]
fn builder_matches_pair_classifier_on_random_trees() {
    let mut rng = seeded_rng(77);
    let modes = [IphPairMode::ConsecutivePphs, IphPairMode::AllPphPairs];
    for i in 0..600 {
        let tree = random_tree(&mut rng, 1, 30);
        let (pph, iph, seq) = (i % 2 == 0 || i % 7 == 1, i % 3 != 2, i % 5 < 2);
        if !(pph || iph || seq) {
            continue;
        }
        let mode = modes[i % 2];
        let g = build_graph(&tree, &cfg(pph, iph, seq, mode)).unwrap();
        assert_eq!(common::graph_edge_map(&g), common::pair_classifier(&tree, pph, iph, seq, mode));
        let texts: Vec<_> = g.nodes().iter().map(|n| n.text.clone()).collect();
        let words: Vec<_> = tree.words().map(|w| w.text.clone()).collect();
        assert_eq!(texts, words);
    }
}

#[test]
fn edge_count_formulas() {
    let mut rng = seeded_rng(5);
    for _ in 0..500 {
        let tree = random_tree(&mut rng, 1, 30);
        let g = build_graph(&tree, &cfg(true, false, false, IphPairMode::ConsecutivePphs)).unwrap();
        let expected: usize = tree.phrases().map(|p| p.words.len() * (p.words.len().saturating_sub(1)) / 2).sum();
        assert_eq!(g.edge_count(), expected);

        let (_, tally) = build_graph_with_tally(&tree, &cfg(false, true, false, IphPairMode::AllPphPairs)).unwrap();
        let sizes: Vec<usize> = tree.phrases().map(|p| p.words.len()).collect();
        for pair in &tally.iph_pairs {
            let (m, n) = (sizes[pair.phrases.0 - 1], sizes[pair.phrases.1 - 1]);
            assert_eq!((pair.left_words, pair.right_words, pair.edges), (m, n, m * n));
        }
    }
}

#[test]
fn two_iph_structure() {
    let g = two_iph_graph();
    assert!(g.has_edge(5, 6) && g.kinds(5, 6).unwrap().contains(&EdgeKind::Pph));
    let mut iph = g.edges_of_kind(EdgeKind::Iph);
    iph.sort();
    assert_eq!(iph, [(5, 7), (5, 8), (5, 9), (6, 7), (6, 8), (6, 9)]);
    // (6,7) is both an intonation and a sequential edge: one entry, two kinds.
    assert_eq!(g.kinds(6, 7).unwrap().len(), 2);
    assert_eq!(g.edges().filter(|e| (e.a, e.b) == (6, 7)).count(), 1);
}

#[test]
fn all_pairs_mode_adds_nonconsecutive_phrases() {
    let tree = parse_annotation("A#2B#2C#4", &MarkerScheme::default()).unwrap();
    let consecutive = build_graph(&tree, &cfg(false, true, false, IphPairMode::ConsecutivePphs)).unwrap();
    let all = build_graph(&tree, &cfg(false, true, false, IphPairMode::AllPphPairs)).unwrap();
    assert_eq!(consecutive.edge_pairs(), [(1, 2), (2, 3)]);
    assert_eq!(all.edge_pairs(), [(1, 2), (1, 3), (2, 3)]);
}

#[test]
fn u1_u2_adjacency() {
    let a1 = to_adjacency(&u1_graph(), &EdgeKind::ALL);
    assert_eq!(a1.as_tensor().to_rows(), [[0.0, 1.0], [1.0, 0.0]]);
    let a2 = to_adjacency(&u2_graph(), &EdgeKind::ALL).into_tensor();
    for i in 0..5 {
        for j in 0..5 {
            let one = matches!((i + 1, j + 1), (1, 2) | (2, 1) | (4, 5) | (5, 4));
            assert_eq!(a2[(i, j)], if one { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn adjacency_symmetric_with_degree_row_sums() {
    let mut rng = seeded_rng(3);
    for _ in 0..100 {
        let g = random_graph(&mut rng, 12);
        let keep = [EdgeKind::Pph, EdgeKind::Seq];
        let a = to_adjacency(&g, &keep);
        let t = a.as_tensor();
        let degree =
            |v: usize| g.edges().filter(|e| (e.a == v || e.b == v) && e.kinds.iter().any(|k| keep.contains(k))).count();
        for i in 0..a.n() {
            assert_eq!(t[(i, i)], 0.0);
            for j in 0..a.n() {
                assert_eq!(t[(i, j)], t[(j, i)]);
            }
            assert_eq!(t.row(i).iter().sum::<f64>(), degree(i + 1) as f64);
            assert_eq!(a.degree(i), degree(i + 1) as f64);
        }
    }
}

#[test]
fn seq_edges_form_hamiltonian_path() {
    let mut rng = seeded_rng(8);
    for _ in 0..200 {
        let tree = random_tree(&mut rng, 1, 25);
        let g = build_graph(&tree, &cfg(true, true, true, IphPairMode::ConsecutivePphs)).unwrap();
        let seq = g.edges_of_kind(EdgeKind::Seq);
        let n = g.node_count();
        assert_eq!(seq, (1..n).map(|i| (i, i + 1)).collect::<Vec<_>>());
        let dist = common::bfs(n, &g.edge_pairs(), 1);
        assert!(dist[1..].iter().all(Option::is_some), "connected");
    }
}

#[test]
fn single_word_has_no_edges() {
    let tree = parse_annotation("好#4", &MarkerScheme::default()).unwrap();
    let g = build_graph(&tree, &cfg(true, true, true, IphPairMode::AllPphPairs)).unwrap();
    assert_eq!((g.node_count(), g.edge_count()), (1, 0));
}

#[test]
fn building_is_idempotent() {
    let tree = parse_annotation(TWO_IPH_ANNOTATION, &MarkerScheme::default()).unwrap();
    let c = cfg(true, true, true, IphPairMode::AllPphPairs);
    let once = build_graph(&tree, &c).unwrap();
    let mut twice = once.clone();
    for e in build_graph(&tree, &c).unwrap().edges() {
        for k in e.kinds {
            twice.add_edge(e.a, e.b, k).unwrap();
        }
    }
    assert_eq!(once, twice);
}

#[test]
fn phoneme_chain_diameter() {
    for n in 1..30 {
        let tokens: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        let g = phoneme_chain(&tokens);
        assert_eq!(g.edge_count(), n - 1);
        assert!(g.edges().all(|e| e.kinds.iter().eq([EdgeKind::Seq].iter())));
        let diameter =
            (1..=n).flat_map(|s| common::bfs(n, &g.edge_pairs(), s).into_iter().flatten().max()).max().unwrap();
        assert_eq!(diameter, n - 1);
    }
    let bare = AnnotatedUtterance { id: "x".into(), raw: "AB#4".into(), phonemes: None };
    assert!(matches!(build_phoneme_chain(&bare), Err(GraphError::NoPhonemes)));
}

#[test]
fn dot_lists_u1_edge_once() {
    let dot = String::from_utf8(export_graph(&u1_graph(), GraphFormat::Dot)).unwrap();
    assert_eq!(dot.matches(" -- ").count(), 1);
    assert!(dot.contains("1 -- 2"));
}

proptest! {
    #[test]
    fn export_import_round_trip(seed in any::<u64>()) {
        let g = random_graph(&mut seeded_rng(seed), 10);
        for f in [GraphFormat::Json, GraphFormat::Dot] {
            let bytes = export_graph(&g, f);
            prop_assert_eq!(import_graph(&bytes, f).unwrap(), g.clone());
            prop_assert_eq!(export_graph(&import_graph(&bytes, f).unwrap(), f), bytes);
        }
    }
}
