//! Prosody-boundary graphs.
//!
//! Nodes are prosodic words in reading order (1-based ids). Edges are
//! undirected and typed: words of one prosodic phrase form a clique (`pph`),
//! words of neighbouring phrases inside one intonation phrase are joined
//! bipartitely (`iph`), and consecutive words are chained (`seq`). An edge
//! produced by several rules is stored once with the union of its kinds.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prosody::{AnnotatedUtterance, ProsodyTree};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Pph,
    Iph,
    Seq,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 3] = [EdgeKind::Pph, EdgeKind::Iph, EdgeKind::Seq];

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Pph => "pph",
            EdgeKind::Iph => "iph",
            EdgeKind::Seq => "seq",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pph" => Some(EdgeKind::Pph),
            "iph" => Some(EdgeKind::Iph),
            "seq" => Some(EdgeKind::Seq),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("cannot build a graph from an empty tree")]
    EmptyTree,
    #[error("utterance has no phoneme tokens")]
    NoPhonemes,
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("edge ({a}, {b}) refers to a node outside 1..={n}")]
    NodeOutOfRange { a: usize, b: usize, n: usize },
    #[error("node ids must be 1..=n in order; found {found} at position {position}")]
    NonContiguousIds { position: usize, found: usize },
    #[error("edge ({0}, {1}) has no kinds")]
    EmptyKinds(usize, usize),
    #[error("edge config includes no edge kind")]
    EmptyEdgeConfig,
    #[error("invalid graph json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid graph dot at line {line}: {message}")]
    Dot { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phonemes: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub kinds: BTreeSet<EdgeKind>,
}

/// Undirected typed graph over prosodic words, edges keyed by `(a, b)` with `a < b`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "GraphWire", into = "GraphWire")]
pub struct ProsodyGraph {
    nodes: Vec<Node>,
    edges: BTreeMap<(usize, usize), BTreeSet<EdgeKind>>,
}

impl ProsodyGraph {
    /// Graph with the given node labels (ids assigned 1..=n) and no edges.
    pub fn with_nodes<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let nodes =
            texts.into_iter().enumerate().map(|(i, t)| Node { id: i + 1, text: t.into(), phonemes: None }).collect();
        Self { nodes, edges: BTreeMap::new() }
    }

    pub fn from_parts(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self, GraphError> {
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i + 1 {
                return Err(GraphError::NonContiguousIds { position: i + 1, found: n.id });
            }
        }
        let mut g = Self { nodes, edges: BTreeMap::new() };
        for e in edges {
            if e.kinds.is_empty() {
                return Err(GraphError::EmptyKinds(e.a, e.b));
            }
            for k in e.kinds {
                g.add_edge(e.a, e.b, k)?;
            }
        }
        Ok(g)
    }

    /// Adds an edge; an existing `(a, b)` edge absorbs the new kind.
    pub fn add_edge(&mut self, a: usize, b: usize, kind: EdgeKind) -> Result<(), GraphError> {
        let n = self.nodes.len();
        if a == b {
            return Err(GraphError::SelfLoop(a));
        }
        if a == 0 || b == 0 || a > n || b > n {
            return Err(GraphError::NodeOutOfRange { a, b, n });
        }
        self.edges.entry((a.min(b), a.max(b))).or_default().insert(kind);
        Ok(())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges sorted by `(a, b)`.
    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges.iter().map(|(&(a, b), kinds)| Edge { a, b, kinds: kinds.clone() })
    }

    pub fn edge_pairs(&self) -> Vec<(usize, usize)> {
        self.edges.keys().copied().collect()
    }

    /// Pairs whose kind set contains `kind`.
    pub fn edges_of_kind(&self, kind: EdgeKind) -> Vec<(usize, usize)> {
        self.edges.iter().filter(|(_, k)| k.contains(&kind)).map(|(&p, _)| p).collect()
    }

    pub fn kinds(&self, a: usize, b: usize) -> Option<&BTreeSet<EdgeKind>> {
        self.edges.get(&(a.min(b), a.max(b)))
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.kinds(a, b).is_some()
    }

    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .keys()
            .filter_map(|&(a, b)| {
                if a == v {
                    Some(b)
                } else if b == v {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Copy of the graph keeping only edge kinds in `keep`; edges left
    /// without kinds are dropped.
    pub fn filter_kinds(&self, keep: &[EdgeKind]) -> ProsodyGraph {
        let edges = self
            .edges
            .iter()
            .filter_map(|(&p, kinds)| {
                let k: BTreeSet<_> = kinds.iter().copied().filter(|k| keep.contains(k)).collect();
                (!k.is_empty()).then_some((p, k))
            })
            .collect();
        ProsodyGraph { nodes: self.nodes.clone(), edges }
    }

    /// Renumbers nodes: old node `i` (1-based) becomes `perm[i - 1]`.
    pub fn permuted(&self, perm: &[usize]) -> ProsodyGraph {
        assert_eq!(perm.len(), self.nodes.len());
        let mut nodes = self.nodes.clone();
        for (old, n) in self.nodes.iter().enumerate() {
            nodes[perm[old] - 1] = Node { id: perm[old], ..n.clone() };
        }
        let mut edges: BTreeMap<(usize, usize), BTreeSet<EdgeKind>> = BTreeMap::new();
        for (&(a, b), kinds) in &self.edges {
            let (x, y) = (perm[a - 1], perm[b - 1]);
            edges.insert((x.min(y), x.max(y)), kinds.clone());
        }
        ProsodyGraph { nodes, edges }
    }

    /// BFS hop distances from `source`; `None` for unreachable nodes.
    pub fn distances_from(&self, source: usize) -> Vec<Option<usize>> {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n + 1];
        for &(a, b) in self.edges.keys() {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut dist = vec![None; n + 1];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(v) = queue.pop_front() {
            let d = dist[v].expect("queued nodes have a distance");
            for &u in &adj[v] {
                if dist[u].is_none() {
                    dist[u] = Some(d + 1);
                    queue.push_back(u);
                }
            }
        }
        dist.remove(0);
        dist
    }

    /// True when the edges are exactly `(i, i + 1)` for every consecutive pair.
    pub fn is_chain(&self) -> bool {
        let n = self.nodes.len();
        self.edges.len() == n.saturating_sub(1) && (1..n).all(|i| self.edges.contains_key(&(i, i + 1)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IphPairMode {
    /// Only neighbouring phrases within an intonation phrase are joined.
    #[default]
    ConsecutivePphs,
    AllPphPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub include_pph: bool,
    pub include_iph: bool,
    pub include_seq: bool,
    pub iph_pair_mode: IphPairMode,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self { include_pph: true, include_iph: false, include_seq: true, iph_pair_mode: IphPairMode::default() }
    }
}

impl EdgeConfig {
    pub fn from_kinds(kinds: &[EdgeKind], iph_pair_mode: IphPairMode) -> Self {
        Self {
            include_pph: kinds.contains(&EdgeKind::Pph),
            include_iph: kinds.contains(&EdgeKind::Iph),
            include_seq: kinds.contains(&EdgeKind::Seq),
            iph_pair_mode,
        }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.include_pph || self.include_iph || self.include_seq {
            Ok(())
        } else {
            Err(GraphError::EmptyEdgeConfig)
        }
    }
}

/// Edge counts generated by each rule before duplicates are merged.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgeTally {
    pub pph: usize,
    pub iph_pairs: Vec<IphPairTally>,
    pub seq: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IphPairTally {
    /// Global 1-based phrase indices of the joined pair.
    pub phrases: (usize, usize),
    pub left_words: usize,
    pub right_words: usize,
    pub edges: usize,
}

pub fn build_graph(tree: &ProsodyTree, cfg: &EdgeConfig) -> Result<ProsodyGraph, GraphError> {
    build_graph_with_tally(tree, cfg).map(|(g, _)| g)
}

pub fn build_graph_with_tally(tree: &ProsodyTree, cfg: &EdgeConfig) -> Result<(ProsodyGraph, EdgeTally), GraphError> {
    cfg.validate()?;
    if tree.word_count() == 0 {
        return Err(GraphError::EmptyTree);
    }
    let nodes: Vec<Node> =
        tree.words().map(|w| Node { id: w.index, text: w.text.clone(), phonemes: w.phonemes.clone() }).collect();
    let n = nodes.len();
    let mut g = ProsodyGraph::from_parts(nodes, Vec::new())?;
    let mut tally = EdgeTally::default();

    if cfg.include_pph {
        for pph in tree.phrases() {
            let ids: Vec<usize> = pph.words.iter().map(|w| w.index).collect();
            for (i, &a) in ids.iter().enumerate() {
                for &b in &ids[i + 1..] {
                    g.add_edge(a, b, EdgeKind::Pph)?;
                    tally.pph += 1;
                }
            }
        }
    }

    if cfg.include_iph {
        let mut pph_offset = 0;
        for iph in &tree.intonation_phrases {
            let groups: Vec<Vec<usize>> =
                iph.phrases.iter().map(|p| p.words.iter().map(|w| w.index).collect()).collect();
            let pairs: Vec<(usize, usize)> = match cfg.iph_pair_mode {
                IphPairMode::ConsecutivePphs => (1..groups.len()).map(|j| (j - 1, j)).collect(),
                IphPairMode::AllPphPairs => {
                    (0..groups.len()).flat_map(|i| (i + 1..groups.len()).map(move |j| (i, j))).collect()
                }
            };
            for (i, j) in pairs {
                let mut count = 0;
                for &a in &groups[i] {
                    for &b in &groups[j] {
                        g.add_edge(a, b, EdgeKind::Iph)?;
                        count += 1;
                    }
                }
                tally.iph_pairs.push(IphPairTally {
                    phrases: (pph_offset + i + 1, pph_offset + j + 1),
                    left_words: groups[i].len(),
                    right_words: groups[j].len(),
                    edges: count,
                });
            }
            pph_offset += groups.len();
        }
    }

    if cfg.include_seq {
        for v in 1..n {
            g.add_edge(v, v + 1, EdgeKind::Seq)?;
            tally.seq += 1;
        }
    }
    Ok((g, tally))
}

/// Chain graph over the phoneme tokens of one utterance.
pub fn build_phoneme_chain(utt: &AnnotatedUtterance) -> Result<ProsodyGraph, GraphError> {
    match &utt.phonemes {
        Some(ph) if !ph.is_empty() => Ok(phoneme_chain(ph)),
        _ => Err(GraphError::NoPhonemes),
    }
}

pub fn phoneme_chain<S: AsRef<str>>(tokens: &[S]) -> ProsodyGraph {
    let mut g = ProsodyGraph::with_nodes(tokens.iter().map(|t| t.as_ref().to_owned()));
    for v in 1..tokens.len() {
        g.add_edge(v, v + 1, EdgeKind::Seq).expect("chain edges are in range");
    }
    g
}

/// Symmetric 0/1 adjacency matrix, zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    entries: Tensor,
}

impl AdjacencyMatrix {
    pub fn n(&self) -> usize {
        self.entries.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.entries
    }

    pub fn into_tensor(self) -> Tensor {
        self.entries
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.entries.row(i).iter().sum()
    }

    /// `D^-1/2 (A + I) D^-1/2`, with `D` the degree matrix of `A + I`.
    pub fn normalized(&self) -> Tensor {
        let n = self.n();
        let mut a = self.entries.add(&Tensor::identity(n)).expect("square");
        let d: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum::<f64>().powf(-0.5)).collect();
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] *= d[i] * d[j];
            }
        }
        a
    }

    /// Each row divided by its degree; isolated nodes keep a zero row.
    pub fn row_mean(&self) -> Tensor {
        let mut a = self.entries.clone();
        for i in 0..self.n() {
            let deg = self.degree(i);
            if deg > 0.0 {
                for j in 0..self.n() {
                    a[(i, j)] /= deg;
                }
            }
        }
        a
    }
}

/// Adjacency restricted to edges carrying any of `kinds`.
pub fn to_adjacency(graph: &ProsodyGraph, kinds: &[EdgeKind]) -> AdjacencyMatrix {
    let n = graph.node_count();
    let mut entries = Tensor::zeros(n, n);
    for (&(a, b), k) in &graph.edges {
        if k.iter().any(|k| kinds.contains(k)) {
            entries[(a - 1, b - 1)] = 1.0;
            entries[(b - 1, a - 1)] = 1.0;
        }
    }
    AdjacencyMatrix { entries }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Json,
    Dot,
}

#[derive(Serialize, Deserialize)]
struct GraphWire {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

impl TryFrom<GraphWire> for ProsodyGraph {
    type Error = GraphError;
    fn try_from(w: GraphWire) -> Result<Self, GraphError> {
        ProsodyGraph::from_parts(w.nodes, w.edges)
    }
}

impl From<ProsodyGraph> for GraphWire {
    fn from(g: ProsodyGraph) -> Self {
        GraphWire { edges: g.edges().collect(), nodes: g.nodes }
    }
}

pub fn export_graph(graph: &ProsodyGraph, format: GraphFormat) -> Vec<u8> {
    match format {
        GraphFormat::Json => to_json(graph).into_bytes(),
        GraphFormat::Dot => to_dot(graph).into_bytes(),
    }
}

pub fn import_graph(bytes: &[u8], format: GraphFormat) -> Result<ProsodyGraph, GraphError> {
    match format {
        GraphFormat::Json => {
            let wire: GraphWire = serde_json::from_slice(bytes)?;
            ProsodyGraph::try_from(wire)
        }
        GraphFormat::Dot => {
            let text = std::str::from_utf8(bytes).map_err(|e| GraphError::Dot { line: 0, message: e.to_string() })?;
            from_dot(text)
        }
    }
}

/// Compact canonical JSON: nodes in id order, edges sorted by `(a, b)`.
pub fn to_json(graph: &ProsodyGraph) -> String {
    serde_json::to_string(graph).expect("graph serializes")
}

fn kinds_label(kinds: &BTreeSet<EdgeKind>) -> String {
    kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(",")
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

pub fn to_dot(graph: &ProsodyGraph) -> String {
    let mut out = String::from("graph prosody {\n");
    for n in &graph.nodes {
        let _ = write!(out, "  {} [label=\"{}\"", n.id, dot_escape(&n.text));
        if let Some(ph) = &n.phonemes {
            let _ = write!(out, ", phonemes=\"{}\"", dot_escape(&ph.join(" ")));
        }
        out.push_str("];\n");
    }
    for (&(a, b), kinds) in &graph.edges {
        let _ = writeln!(out, "  {a} -- {b} [kind=\"{}\"];", kinds_label(kinds));
    }
    out.push_str("}\n");
    out
}

/// Parses `key="value", ...` inside a bracketed attribute list.
fn parse_attrs(s: &str, line: usize) -> Result<BTreeMap<String, String>, GraphError> {
    let err = |message: &str| GraphError::Dot { line, message: message.to_owned() };
    let mut attrs = BTreeMap::new();
    let mut chars = s.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace() || *c == ',') {
            chars.next();
        }
        if chars.peek().is_none() {
            return Ok(attrs);
        }
        let key: String = std::iter::from_fn(|| chars.next_if(|c| c.is_alphanumeric() || *c == '_')).collect();
        if key.is_empty() || chars.next() != Some('=') || chars.next() != Some('"') {
            return Err(err("expected key=\"value\""));
        }
        let mut value = String::new();
        loop {
            match chars.next() {
                Some('"') => break,
                Some('\\') => match chars.next() {
                    Some('n') => value.push('\n'),
                    Some(c) => value.push(c),
                    None => return Err(err("dangling escape")),
                },
                Some(c) => value.push(c),
                None => return Err(err("unterminated string")),
            }
        }
        attrs.insert(key, value);
    }
}

/// Reads the DOT subset produced by [`to_dot`].
pub fn from_dot(text: &str) -> Result<ProsodyGraph, GraphError> {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut opened = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| GraphError::Dot { line: line_no, message };
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if !opened {
            if line.starts_with("graph") && line.ends_with('{') {
                opened = true;
                continue;
            }
            return Err(err("expected `graph <name> {`".into()));
        }
        if line == "}" {
            return ProsodyGraph::from_parts(nodes, edges);
        }
        let stmt = line.strip_suffix(';').unwrap_or(line);
        let (head, attrs) = match stmt.find('[') {
            Some(p) => {
                let body = stmt[p + 1..].strip_suffix(']').ok_or_else(|| err("unclosed `[`".into()))?;
                (stmt[..p].trim(), parse_attrs(body, line_no)?)
            }
            None => (stmt.trim(), BTreeMap::new()),
        };
        let parse_id = |s: &str| s.trim().parse::<usize>().map_err(|_| err(format!("bad node id {s:?}")));
        if let Some((a, b)) = head.split_once("--") {
            let kinds = attrs
                .get("kind")
                .ok_or_else(|| err("edge without kind".into()))?
                .split(',')
                .map(|k| EdgeKind::parse(k).ok_or_else(|| err(format!("unknown edge kind {k:?}"))))
                .collect::<Result<BTreeSet<_>, _>>()?;
            edges.push(Edge { a: parse_id(a)?, b: parse_id(b)?, kinds });
        } else {
            let id = parse_id(head)?;
            let text = attrs.get("label").cloned().unwrap_or_default();
            let phonemes = attrs.get("phonemes").map(|p| p.split_whitespace().map(str::to_owned).collect());
            nodes.push(Node { id, text, phonemes });
        }
    }
    Err(GraphError::Dot { line: text.lines().count(), message: "missing closing `}`".into() })
}
