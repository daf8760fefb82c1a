//! Independent oracles shared by the integration tests. Nothing here calls
//! the code paths it is used to check.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use graphpb::graph::{EdgeKind, IphPairMode, ProsodyGraph};
use graphpb::prosody::{IntonationPhrase, ProsodicPhrase, ProsodicWord, ProsodyTree};
use graphpb::tensor::Tensor;

/// Splits on the intonation and utterance markers, then on the phrase
/// marker, then on the word marker. Only valid for well-formed input using
/// the default `#1`..`#4` markers.
pub fn three_pass_split(raw: &str) -> ProsodyTree {
    let normalized = raw.replace("#4", "#3");
    let mut index = 0;
    let intonation_phrases = normalized
        .split("#3")
        .filter(|s| !s.is_empty())
        .map(|iph| IntonationPhrase {
            phrases: iph
                .split("#2")
                .map(|pph| ProsodicPhrase {
                    words: pph
                        .split("#1")
                        .map(|w| {
                            index += 1;
                            ProsodicWord { index, text: w.to_owned(), phonemes: None }
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect();
    ProsodyTree { intonation_phrases }
}

/// Every word pair classified by shared phrase / intonation membership and
/// adjacency, straight from the tree.
pub fn pair_classifier(
    tree: &ProsodyTree,
    pph: bool,
    iph: bool,
    seq: bool,
    mode: IphPairMode,
) -> BTreeMap<(usize, usize), BTreeSet<EdgeKind>> {
    // (word index, phrase number, intonation number, phrase number within the intonation phrase)
    let mut words = Vec::new();
    let mut phrase_no = 0;
    for (i, ip) in tree.intonation_phrases.iter().enumerate() {
        for (local, p) in ip.phrases.iter().enumerate() {
            phrase_no += 1;
            for w in &p.words {
                words.push((w.index, phrase_no, i, local));
            }
        }
    }
    let mut out: BTreeMap<(usize, usize), BTreeSet<EdgeKind>> = BTreeMap::new();
    for x in 0..words.len() {
        for y in x + 1..words.len() {
            let (a, pa, ia, la) = words[x];
            let (b, pb, ib, lb) = words[y];
            let mut kinds = BTreeSet::new();
            if pph && pa == pb {
                kinds.insert(EdgeKind::Pph);
            }
            if iph && ia == ib && pa != pb {
                let joined = match mode {
                    IphPairMode::ConsecutivePphs => la.abs_diff(lb) == 1,
                    IphPairMode::AllPphPairs => true,
                };
                if joined {
                    kinds.insert(EdgeKind::Iph);
                }
            }
            if seq && b == a + 1 {
                kinds.insert(EdgeKind::Seq);
            }
            if !kinds.is_empty() {
                out.insert((a, b), kinds);
            }
        }
    }
    out
}

pub fn graph_edge_map(g: &ProsodyGraph) -> BTreeMap<(usize, usize), BTreeSet<EdgeKind>> {
    g.edges().map(|e| ((e.a, e.b), e.kinds.clone())).collect()
}

/// BFS over an explicit neighbour list (not the graph's own BFS).
pub fn bfs(n: usize, edges: &[(usize, usize)], source: usize) -> Vec<Option<usize>> {
    let mut adj = vec![Vec::new(); n + 1];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut dist = vec![None; n + 1];
    dist[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(v) = queue.pop_front() {
        let d = dist[v].unwrap();
        for &u in &adj[v] {
            if dist[u].is_none() {
                dist[u] = Some(d + 1);
                queue.push_back(u);
            }
        }
    }
    dist
}

pub fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// `A·ReLU(A·X·W0)·W1`, one product at a time over nested vectors.
pub fn naive_gcn(a: &[Vec<f64>], x: &[Vec<f64>], w0: &[Vec<f64>], w1: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let ax = naive_matmul(a, x);
    let axw = naive_matmul(&ax, w0);
    let relu: Vec<Vec<f64>> = axw.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
    let ar = naive_matmul(a, &relu);
    naive_matmul(&ar, w1)
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_rows()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

pub fn path_graph(n: usize) -> ProsodyGraph {
    let mut g = ProsodyGraph::with_nodes((1..=n).map(|i| format!("w{i}")));
    for i in 1..n {
        g.add_edge(i, i + 1, EdgeKind::Seq).unwrap();
    }
    g
}

pub fn clique_graph(n: usize) -> ProsodyGraph {
    let mut g = ProsodyGraph::with_nodes((1..=n).map(|i| format!("w{i}")));
    for a in 1..=n {
        for b in a + 1..=n {
            g.add_edge(a, b, EdgeKind::Pph).unwrap();
        }
    }
    g
}

/// Rows (0-based) whose values differ between `a` and `b` at all.
pub fn changed_rows(a: &Tensor, b: &Tensor) -> BTreeSet<usize> {
    (0..a.rows()).filter(|&i| a.row(i).iter().zip(b.row(i)).any(|(x, y)| x != y)).collect()
}
