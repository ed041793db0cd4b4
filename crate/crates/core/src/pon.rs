//! Partially observed networks.
//!
//! Every unordered node pair is in exactly one of three states: connected (E),
//! unknown (U) or disconnected (D). E and U are stored sparsely; D is the
//! implicit complement, so memory stays proportional to |E| + |U|.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AlpineError, Result};

/// Unordered node pair `{i, j}` with `i != j`, stored as `(lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    lo: usize,
    hi: usize,
}

impl Pair {
    /// Panics on a self-pair. Use [`Pair::try_new`] for untrusted input.
    pub fn new(i: usize, j: usize) -> Self {
        Self::try_new(i, j).expect("self-pair")
    }

    pub fn try_new(i: usize, j: usize) -> Result<Self> {
        match i.cmp(&j) {
            std::cmp::Ordering::Less => Ok(Pair { lo: i, hi: j }),
            std::cmp::Ordering::Greater => Ok(Pair { lo: j, hi: i }),
            std::cmp::Ordering::Equal => Err(AlpineError::Contract(format!(
                "self-pair {{{i}, {i}}} is not a node pair"
            ))),
        }
    }

    pub fn i(&self) -> usize {
        self.lo
    }

    pub fn j(&self) -> usize {
        self.hi
    }

    pub fn contains(&self, k: usize) -> bool {
        self.lo == k || self.hi == k
    }

    /// The endpoint that is not `k`. `k` must be an endpoint.
    pub fn other(&self, k: usize) -> usize {
        debug_assert!(self.contains(k));
        if self.lo == k {
            self.hi
        } else {
            self.lo
        }
    }

    /// Position of the pair in the row-major enumeration of the strict upper triangle.
    pub fn linear_index(&self, n: usize) -> usize {
        let (i, j) = (self.lo, self.hi);
        i * n - i * (i + 1) / 2 + (j - i - 1)
    }

    /// Inverse of [`Pair::linear_index`].
    pub fn from_linear_index(mut idx: usize, n: usize) -> Self {
        let mut i = 0;
        loop {
            let row = n - 1 - i;
            if idx < row {
                return Pair::new(i, i + 1 + idx);
            }
            idx -= row;
            i += 1;
        }
    }

    fn key(&self) -> u64 {
        ((self.lo as u64) << 32) | self.hi as u64
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lo, self.hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairStatus {
    Connected,
    Disconnected,
    Unknown,
}

/// Answer to a query: the revealed status of a formerly unknown pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Observation {
    Connected,
    Disconnected,
}

impl Observation {
    pub fn is_link(self) -> bool {
        self == Observation::Connected
    }

    pub fn from_link(link: bool) -> Self {
        if link {
            Observation::Connected
        } else {
            Observation::Disconnected
        }
    }
}

impl From<Observation> for PairStatus {
    fn from(o: Observation) -> Self {
        match o {
            Observation::Connected => PairStatus::Connected,
            Observation::Disconnected => PairStatus::Disconnected,
        }
    }
}

/// SplitMix64 finalizer, used for the incremental fingerprint.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn entry_hash(pair: Pair, status: PairStatus) -> u64 {
    let tag = match status {
        PairStatus::Connected => 0x11,
        PairStatus::Unknown => 0x22,
        PairStatus::Disconnected => 0x33,
    };
    mix64(pair.key() ^ mix64(tag))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartialNetwork {
    n: usize,
    edges: BTreeSet<Pair>,
    unknown: BTreeSet<Pair>,
    edge_adj: Vec<BTreeSet<usize>>,
    unknown_adj: Vec<BTreeSet<usize>>,
    labels: Option<Vec<String>>,
    fingerprint: u64,
}

impl PartialNetwork {
    /// Fully observed network over `n` nodes.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = Pair>) -> Result<Self> {
        Self::from_parts(n, edges, std::iter::empty())
    }

    pub fn from_parts(
        n: usize,
        edges: impl IntoIterator<Item = Pair>,
        unknown: impl IntoIterator<Item = Pair>,
    ) -> Result<Self> {
        let mut net = PartialNetwork {
            n,
            edges: BTreeSet::new(),
            unknown: BTreeSet::new(),
            edge_adj: vec![BTreeSet::new(); n],
            unknown_adj: vec![BTreeSet::new(); n],
            labels: None,
            fingerprint: mix64(n as u64),
        };
        for p in edges {
            net.check_pair(p)?;
            if net.edges.insert(p) {
                net.edge_adj[p.i()].insert(p.j());
                net.edge_adj[p.j()].insert(p.i());
                net.fingerprint ^= entry_hash(p, PairStatus::Connected);
            }
        }
        for p in unknown {
            net.check_pair(p)?;
            if net.edges.contains(&p) {
                return Err(AlpineError::Contract(format!(
                    "pair {p} cannot be both connected and unknown"
                )));
            }
            if net.unknown.insert(p) {
                net.unknown_adj[p.i()].insert(p.j());
                net.unknown_adj[p.j()].insert(p.i());
                net.fingerprint ^= entry_hash(p, PairStatus::Unknown);
            }
        }
        Ok(net)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(AlpineError::Contract(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.n
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    fn check_pair(&self, p: Pair) -> Result<()> {
        if p.j() >= self.n {
            return Err(AlpineError::Contract(format!(
                "pair {p} out of range for {} nodes",
                self.n
            )));
        }
        Ok(())
    }

    fn check_node(&self, i: usize) -> Result<()> {
        if i >= self.n {
            return Err(AlpineError::Contract(format!(
                "node {i} out of range for {} nodes",
                self.n
            )));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// n(n-1)/2
    pub fn pair_count(&self) -> usize {
        self.n * self.n.saturating_sub(1) / 2
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn unknown_count(&self) -> usize {
        self.unknown.len()
    }

    pub fn disconnected_count(&self) -> usize {
        self.pair_count() - self.edges.len() - self.unknown.len()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.unknown.is_empty()
    }

    /// Connected pairs in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = Pair> + '_ {
        self.edges.iter().copied()
    }

    /// Unknown pairs in ascending order.
    pub fn unknown_pairs(&self) -> impl Iterator<Item = Pair> + '_ {
        self.unknown.iter().copied()
    }

    pub fn status(&self, p: Pair) -> PairStatus {
        if self.edges.contains(&p) {
            PairStatus::Connected
        } else if self.unknown.contains(&p) {
            PairStatus::Unknown
        } else {
            PairStatus::Disconnected
        }
    }

    pub fn is_unknown(&self, p: Pair) -> bool {
        self.unknown.contains(&p)
    }

    pub fn edge_neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edge_adj[i].iter().copied()
    }

    pub fn unknown_neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.unknown_adj[i].iter().copied()
    }

    /// Number of observed links incident to `i`.
    pub fn observed_degree(&self, i: usize) -> usize {
        self.edge_adj[i].len()
    }

    pub fn unknown_degree(&self, i: usize) -> usize {
        self.unknown_adj[i].len()
    }

    /// Every `j != i` whose pair with `i` is observed, labelled 1 for a link and 0
    /// for a non-link. Enumerated lazily; D is never materialized.
    pub fn observed_neighbors(&self, i: usize) -> impl Iterator<Item = (usize, u8)> + '_ {
        let links = &self.edge_adj[i];
        let unknown = &self.unknown_adj[i];
        (0..self.n)
            .filter(move |&j| j != i && !unknown.contains(&j))
            .map(move |j| (j, u8::from(links.contains(&j))))
    }

    /// Dense row-major status table: 0 D, 1 E, 2 U; diagonal is 2.
    pub fn status_matrix(&self) -> Vec<u8> {
        let n = self.n;
        let mut m = vec![0u8; n * n];
        for i in 0..n {
            m[i * n + i] = 2;
        }
        for p in &self.edges {
            m[p.i() * n + p.j()] = 1;
            m[p.j() * n + p.i()] = 1;
        }
        for p in &self.unknown {
            m[p.i() * n + p.j()] = 2;
            m[p.j() * n + p.i()] = 2;
        }
        m
    }

    /// Move an unknown pair into E or D.
    pub fn reveal(&mut self, p: Pair, obs: Observation) -> Result<()> {
        if !self.unknown.remove(&p) {
            return Err(AlpineError::Contract(format!(
                "cannot reveal {p}: its status is not unknown"
            )));
        }
        self.unknown_adj[p.i()].remove(&p.j());
        self.unknown_adj[p.j()].remove(&p.i());
        self.fingerprint ^= entry_hash(p, PairStatus::Unknown);
        if obs.is_link() {
            self.edges.insert(p);
            self.edge_adj[p.i()].insert(p.j());
            self.edge_adj[p.j()].insert(p.i());
            self.fingerprint ^= entry_hash(p, PairStatus::Connected);
        }
        Ok(())
    }

    /// Copying variant of [`PartialNetwork::reveal`].
    pub fn revealed(&self, p: Pair, obs: Observation) -> Result<Self> {
        let mut next = self.clone();
        next.reveal(p, obs)?;
        Ok(next)
    }

    /// Cheap, incrementally maintained identity of the current status assignment.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// SHA-256 over a canonical listing of n, E and U.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("n {}\n", self.n));
        for p in &self.edges {
            h.update(format!("e {} {}\n", p.i(), p.j()));
        }
        for p in &self.unknown {
            h.update(format!("u {} {}\n", p.i(), p.j()));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn label(&self, i: usize) -> String {
        match &self.labels {
            Some(l) => l[i].clone(),
            None => i.to_string(),
        }
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Resolve an external node id to its dense index.
    pub fn node_by_label(&self, label: &str) -> Option<usize> {
        match &self.labels {
            Some(l) => l.iter().position(|x| x == label),
            None => label.parse().ok().filter(|&i| i < self.n),
        }
    }

    /// Same nodes and links with every pair observed.
    pub fn fully_observed(&self) -> Self {
        let mut net = PartialNetwork::from_edges(self.n, self.edges.iter().copied())
            .expect("edges already validated");
        net.labels = self.labels.clone();
        net
    }

    /// Write U as one `i j` line per pair using node labels.
    pub fn write_mask(&self, mut out: impl Write) -> Result<()> {
        for p in &self.unknown {
            writeln!(out, "{} {}", self.label(p.i()), self.label(p.j()))?;
        }
        Ok(())
    }
}

/// Source of truth for queried pairs.
pub trait Oracle {
    fn query(&self, pair: Pair) -> Result<Observation>;
}

/// Oracle backed by a fully observed reference network.
#[derive(Clone, Debug)]
pub struct GroundTruthOracle {
    truth: Arc<PartialNetwork>,
}

impl GroundTruthOracle {
    pub fn new(truth: PartialNetwork) -> Result<Self> {
        if !truth.is_fully_observed() {
            return Err(AlpineError::Contract(
                "ground truth must be fully observed".into(),
            ));
        }
        Ok(GroundTruthOracle {
            truth: Arc::new(truth),
        })
    }

    pub fn truth(&self) -> &PartialNetwork {
        &self.truth
    }

    pub fn is_link(&self, pair: Pair) -> bool {
        self.truth.edges.contains(&pair)
    }
}

impl Oracle for GroundTruthOracle {
    fn query(&self, pair: Pair) -> Result<Observation> {
        self.truth.check_pair(pair)?;
        Ok(Observation::from_link(self.is_link(pair)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MaskMode {
    /// Hide a fraction of all pairs, links and non-links alike.
    UniformPairs { hide_fraction: f64 },
    /// Hide every pair incident to `node` except `{node, anchor}`.
    NewNode { node: usize, anchor: usize },
    /// Hide exactly these pairs (replay of an exported mask).
    Explicit(BTreeSet<Pair>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mode: MaskMode,
    pub seed: u64,
}

impl MaskSpec {
    pub fn uniform(hide_fraction: f64, seed: u64) -> Self {
        MaskSpec {
            mode: MaskMode::UniformPairs { hide_fraction },
            seed,
        }
    }

    pub fn new_node(node: usize, anchor: usize) -> Self {
        MaskSpec {
            mode: MaskMode::NewNode { node, anchor },
            seed: 0,
        }
    }
}

/// Hide pairs of a fully observed network; the oracle keeps the original.
pub fn apply_mask(
    net: &PartialNetwork,
    spec: &MaskSpec,
) -> Result<(PartialNetwork, GroundTruthOracle)> {
    if !net.is_fully_observed() {
        return Err(AlpineError::Contract(
            "masking requires a fully observed network".into(),
        ));
    }
    let unknown: BTreeSet<Pair> = match &spec.mode {
        MaskMode::UniformPairs { hide_fraction } => {
            let f = *hide_fraction;
            if !(f > 0.0 && f < 1.0) {
                return Err(AlpineError::Config(format!(
                    "hide fraction {f} outside (0, 1)"
                )));
            }
            let total = net.pair_count();
            let k = (f * total as f64).round() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rand::seq::index::sample(&mut rng, total, k)
                .into_iter()
                .map(|idx| Pair::from_linear_index(idx, net.n))
                .collect()
        }
        MaskMode::NewNode { node, anchor } => {
            let (node, anchor) = (*node, *anchor);
            net.check_node(node)?;
            net.check_node(anchor)?;
            if node == anchor {
                return Err(AlpineError::Config(format!(
                    "new node {node} cannot be its own anchor"
                )));
            }
            (0..net.n)
                .filter(|&j| j != node && j != anchor)
                .map(|j| Pair::new(node, j))
                .collect()
        }
        MaskMode::Explicit(pairs) => {
            for &p in pairs {
                net.check_pair(p)?;
            }
            pairs.clone()
        }
    };
    if unknown.is_empty() {
        return Err(AlpineError::Config("mask hides no pairs".into()));
    }
    let edges: Vec<Pair> = net.edges.iter().copied().filter(|p| !unknown.contains(p)).collect();
    let mut masked = PartialNetwork::from_parts(net.n, edges, unknown)?;
    masked.labels = net.labels.clone();
    let oracle = GroundTruthOracle::new(net.clone())?;
    Ok((masked, oracle))
}

/// Counts of entries skipped while reading an edge list.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub self_loops: usize,
    pub duplicates: usize,
}

impl LoadReport {
    pub fn dropped(&self) -> usize {
        self.self_loops + self.duplicates
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(no, line)| {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with('%') {
            None
        } else {
            Some((no + 1, t.split_whitespace().collect()))
        }
    })
}

fn read_text(path: &Path) -> Result<String> {
    let file = std::fs::File::open(path).map_err(|e| AlpineError::io(path, e))?;
    let mut text = String::new();
    let mut reader = BufReader::new(file);
    loop {
        let mut line = String::new();
        let read = reader
            .read_line(&mut line)
            .map_err(|e| AlpineError::io(path, e))?;
        if read == 0 {
            break;
        }
        text.push_str(&line);
    }
    Ok(text)
}

/// Read a whitespace-separated edge list into a fully observed network.
///
/// When every token is a non-negative integer, nodes are indexed in numeric
/// order, so contiguous `0..n` ids map to themselves. Otherwise indices follow
/// first appearance. Self-loops and duplicate edges are dropped and counted.
pub fn load_edge_list(path: impl AsRef<Path>) -> Result<(PartialNetwork, LoadReport)> {
    let path = path.as_ref();
    let text = read_text(path)?;
    parse_edge_list(&text, path)
}

pub fn parse_edge_list(text: &str, path: &Path) -> Result<(PartialNetwork, LoadReport)> {
    let mut raw: Vec<(&str, &str)> = Vec::new();
    for (line, tokens) in data_lines(text) {
        if tokens.len() != 2 {
            return Err(AlpineError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected 2 node tokens, found {}", tokens.len()),
            });
        }
        raw.push((tokens[0], tokens[1]));
    }

    let mut tokens: Vec<&str> = Vec::new();
    let mut seen: HashMap<&str, ()> = HashMap::new();
    for &(a, b) in &raw {
        for t in [a, b] {
            if seen.insert(t, ()).is_none() {
                tokens.push(t);
            }
        }
    }
    let numeric: Option<Vec<u64>> = tokens.iter().map(|t| t.parse::<u64>().ok()).collect();
    if let Some(values) = numeric {
        let mut order: Vec<usize> = (0..tokens.len()).collect();
        order.sort_by_key(|&k| values[k]);
        tokens = order.into_iter().map(|k| tokens[k]).collect();
    }
    let index: HashMap<&str, usize> = tokens.iter().enumerate().map(|(i, &t)| (t, i)).collect();

    let mut report = LoadReport::default();
    let mut edges = BTreeSet::new();
    for (a, b) in raw {
        let (i, j) = (index[a], index[b]);
        if i == j {
            report.self_loops += 1;
            continue;
        }
        if !edges.insert(Pair::new(i, j)) {
            report.duplicates += 1;
        }
    }
    if report.dropped() > 0 {
        warn!(
            "{}: dropped {} self-loops and {} duplicate edges",
            path.display(),
            report.self_loops,
            report.duplicates
        );
    }
    let labels = tokens.iter().map(|t| t.to_string()).collect();
    let net = PartialNetwork::from_edges(tokens.len(), edges)?.with_labels(labels)?;
    Ok((net, report))
}

/// Read a mask file (`i j` labels per line) against the network it was exported from.
pub fn read_mask(path: impl AsRef<Path>, net: &PartialNetwork) -> Result<BTreeSet<Pair>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut pairs = BTreeSet::new();
    for (line, tokens) in data_lines(&text) {
        let parse_err = |message: String| AlpineError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if tokens.len() != 2 {
            return Err(parse_err(format!(
                "expected 2 node tokens, found {}",
                tokens.len()
            )));
        }
        let resolve = |t: &str| {
            net.node_by_label(t)
                .ok_or_else(|| parse_err(format!("unknown node {t:?}")))
        };
        let (i, j) = (resolve(tokens[0])?, resolve(tokens[1])?);
        pairs.insert(Pair::try_new(i, j).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(pairs)
}
