//! Canonical example graphs, random generators and toy training data.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::g2s::Example;
use crate::graph::{build_graph, EdgeConfig, EdgeKind, IphPairMode, ProsodyGraph};
use crate::prosody::{parse_annotation, IntonationPhrase, MarkerScheme, ProsodicPhrase, ProsodicWord, ProsodyTree};
use crate::tensor::Tensor;

/// Two words, one phrase: edge (1, 2).
pub const U1_ANNOTATION: &str = "今天天气不错，#1我们出去走走。#4";
/// The same sentence in five words; phrases {1,2}, {3}, {4,5}.
pub const U2_ANNOTATION: &str = "今天#1天气不错，#2我们#2出去#1走走。#4";
/// Nine words: IPH1 = PPH1 {1..4}; IPH2 = PPH2 {5,6} + PPH3 {7,8,9}.
pub const TWO_IPH_ANNOTATION: &str = "我们#1今天#1一起#1去#3看#1电影#2然后#1吃#1晚饭#4";

fn pph_only() -> EdgeConfig {
    EdgeConfig::from_kinds(&[EdgeKind::Pph], IphPairMode::ConsecutivePphs)
}

fn fixture(annotation: &str, cfg: &EdgeConfig) -> ProsodyGraph {
    let tree = parse_annotation(annotation, &MarkerScheme::default()).expect("fixture parses");
    build_graph(&tree, cfg).expect("fixture builds")
}

pub fn u1_graph() -> ProsodyGraph {
    fixture(U1_ANNOTATION, &pph_only())
}

pub fn u2_graph() -> ProsodyGraph {
    fixture(U2_ANNOTATION, &pph_only())
}

/// Phrase and intonation edges (consecutive pairs) plus sequential edges.
pub fn two_iph_graph() -> ProsodyGraph {
    let cfg = EdgeConfig {
        include_pph: true,
        include_iph: true,
        include_seq: true,
        iph_pair_mode: IphPairMode::ConsecutivePphs,
    };
    fixture(TWO_IPH_ANNOTATION, &cfg)
}

const CHARS: &[char] = &[
    '我', '们', '今', '天', '气', '很', '好', '去', '看', '电', '影', '然', '后', '吃', '晚', '饭', '北', '京', '的',
    '春', '风', '，', '。', '、', 'A', 'b', '1', '!',
];

fn random_text<R: Rng + ?Sized>(rng: &mut R, max_len: usize) -> String {
    let len = rng.random_range(1..=max_len);
    (0..len).map(|_| *CHARS.choose(rng).expect("non-empty")).collect()
}

/// A random tree with `min_words..=max_words` words of 1–4 characters.
pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, min_words: usize, max_words: usize) -> ProsodyTree {
    let n = rng.random_range(min_words.max(1)..=max_words.max(min_words.max(1)));
    let mut tree =
        ProsodyTree { intonation_phrases: vec![IntonationPhrase { phrases: vec![ProsodicPhrase { words: vec![] }] }] };
    for index in 1..=n {
        if index > 1 {
            match rng.random_range(0..10) {
                0..=4 => {}
                5..=7 => tree.intonation_phrases.last_mut().unwrap().phrases.push(ProsodicPhrase { words: vec![] }),
                _ => tree.intonation_phrases.push(IntonationPhrase { phrases: vec![ProsodicPhrase { words: vec![] }] }),
            }
        }
        let pph = tree.intonation_phrases.last_mut().unwrap().phrases.last_mut().unwrap();
        pph.words.push(ProsodicWord { index, text: random_text(rng, 4), phonemes: None });
    }
    tree
}

/// Random annotated text using the default markers at every level: interior
/// breaks draw `#1`..`#4` (a mid-text `#4` acts as an intonation break) and
/// the trailing `#4` is sometimes left implicit.
pub fn random_annotation<R: Rng + ?Sized>(rng: &mut R, min_words: usize, max_words: usize) -> String {
    let n = rng.random_range(min_words.max(1)..=max_words);
    let mut out = String::new();
    for i in 0..n {
        out.push_str(&random_text(rng, 4));
        if i + 1 < n {
            let level = *[1, 1, 1, 2, 2, 3, 4].choose(rng).expect("non-empty");
            out.push_str(&format!("#{level}"));
        } else if rng.random_bool(0.7) {
            out.push_str("#4");
        }
    }
    out
}

/// Random graph with arbitrary typed edges, for serialization tests.
pub fn random_graph<R: Rng + ?Sized>(rng: &mut R, max_nodes: usize) -> ProsodyGraph {
    let n = rng.random_range(1..=max_nodes);
    let mut g = ProsodyGraph::with_nodes((0..n).map(|_| random_text(rng, 3)));
    for a in 1..=n {
        for b in a + 1..=n {
            for kind in EdgeKind::ALL {
                if rng.random_bool(0.15) {
                    g.add_edge(a, b, kind).expect("in range");
                }
            }
        }
    }
    g
}

/// Character tokens standing in for phonemes, one per character.
pub fn char_phonemes(graph: &ProsodyGraph) -> Vec<String> {
    graph.nodes().iter().flat_map(|n| n.text.chars().map(String::from)).collect()
}

/// A smooth `frames x mel_dim` target with entries in `[-amplitude, amplitude]`.
pub fn smooth_target(frames: usize, mel_dim: usize, amplitude: f64, phase: f64) -> Tensor {
    let mut t = Tensor::zeros(frames, mel_dim);
    for i in 0..frames {
        for j in 0..mel_dim {
            let x = (i as f64 + 1.0) * 0.7 + j as f64 * 0.15 + phase;
            t[(i, j)] = amplitude * x.sin();
        }
    }
    t
}

/// The single utterance used by the memorisation run.
pub fn memorization_example(frames: usize, mel_dim: usize) -> Example {
    let cfg = EdgeConfig::default();
    let graph = fixture(U2_ANNOTATION, &cfg);
    let phonemes = char_phonemes(&graph);
    Example { id: "u2".into(), graph, phonemes, mel: smooth_target(frames, mel_dim, 0.5, 0.0) }
}

/// Every split of five words into phrases of one to three words, as
/// phrase-edge-only graphs. The target of frame `t` depends on the size of
/// the phrase holding word `t mod 5` and on that word's position in it.
pub fn structure_dataset(frames: usize, mel_dim: usize) -> Vec<Example> {
    fn compositions(rest: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest == 0 {
            out.push(prefix.clone());
            return;
        }
        for k in 1..=rest.min(3) {
            prefix.push(k);
            compositions(rest - k, prefix, out);
            prefix.pop();
        }
    }
    let mut splits = Vec::new();
    compositions(5, &mut Vec::new(), &mut splits);

    splits
        .iter()
        .map(|sizes| {
            let mut graph = ProsodyGraph::with_nodes(["一", "二", "三", "四", "五"]);
            let mut member = Vec::new();
            let mut start = 1;
            for &k in sizes {
                for a in start..start + k {
                    member.push((k, a - start));
                    for b in a + 1..start + k {
                        graph.add_edge(a, b, EdgeKind::Pph).expect("in range");
                    }
                }
                start += k;
            }
            let mut mel = Tensor::zeros(frames, mel_dim);
            for t in 0..frames {
                let (size, pos) = member[t % 5];
                for j in 0..mel_dim {
                    let level = 0.3 * (size as f64 - 2.0);
                    mel[(t, j)] = level + 0.1 * ((j as f64) * 0.2 + pos as f64).cos();
                }
            }
            let id = sizes.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("-");
            Example { id, phonemes: char_phonemes(&graph), graph, mel }
        })
        .collect()
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shapes() {
        assert_eq!(u1_graph().edge_pairs(), [(1, 2)]);
        assert_eq!(u2_graph().edge_pairs(), [(1, 2), (4, 5)]);
        assert_eq!(two_iph_graph().edges_of_kind(EdgeKind::Iph).len(), 6);
    }

    #[test]
    fn random_annotations_parse() {
        let mut rng = seeded_rng(1);
        for _ in 0..200 {
            let s = random_annotation(&mut rng, 1, 30);
            parse_annotation(&s, &MarkerScheme::default()).unwrap_or_else(|e| panic!("{s}: {e}"));
        }
    }

    #[test]
    fn random_trees_are_valid() {
        let mut rng = seeded_rng(2);
        for _ in 0..100 {
            let t = random_tree(&mut rng, 1, 40);
            let idx: Vec<_> = t.words().map(|w| w.index).collect();
            assert_eq!(idx, (1..=t.word_count()).collect::<Vec<_>>());
            assert!(t.phrases().all(|p| !p.words.is_empty()));
        }
    }

    #[test]
    fn structure_dataset_covers_all_splits() {
        let data = structure_dataset(6, 4);
        assert_eq!(data.len(), 13);
        assert!(data.iter().all(|e| e.mel.shape() == (6, 4) && e.phonemes.len() == 5));
    }
}
