//! Deterministic synthetic graphs used by tests, the bundled datasets and the CLI.

use std::collections::BTreeSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use crate::error::{AlpineError, Result};
use crate::pon::{Pair, PartialNetwork};

/// Plain stochastic block model: every pair an independent coin flip.
pub fn stochastic_block_model(sizes: &[usize], p_in: f64, p_out: f64, seed: u64) -> Result<PartialNetwork> {
    for p in [p_in, p_out] {
        if !(0.0..=1.0).contains(&p) {
            return Err(AlpineError::Config(format!("edge probability {p} outside [0, 1]")));
        }
    }
    let block = block_labels(sizes);
    let n = block.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if block[i] == block[j] { p_in } else { p_out };
            if rng.gen::<f64>() < p {
                edges.push(Pair::new(i, j));
            }
        }
    }
    PartialNetwork::from_edges(n, edges)
}

/// Block index of every node, blocks laid out consecutively.
pub fn block_labels(sizes: &[usize]) -> Vec<usize> {
    sizes.iter().enumerate().flat_map(|(b, &s)| std::iter::repeat(b).take(s)).collect()
}

/// Degree-corrected block model with an exact number of edges.
#[derive(Clone, Debug, PartialEq)]
pub struct DcSbm {
    pub sizes: Vec<usize>,
    pub edges: usize,
    /// Affinity of a between-block pair relative to a within-block pair.
    pub between: f64,
    /// Log-normal sigma of the node propensities.
    pub degree_spread: f64,
    pub seed: u64,
}

/// Every node gets at least one incident edge; the rest are drawn without
/// replacement with weight `theta_i * theta_j * affinity`.
pub fn degree_corrected_sbm(cfg: &DcSbm) -> Result<PartialNetwork> {
    let block = block_labels(&cfg.sizes);
    let n = block.len();
    if n < 2 {
        return Err(AlpineError::Config("need at least two nodes".into()));
    }
    let total = n * (n - 1) / 2;
    if cfg.edges < n.div_ceil(2) || cfg.edges > total {
        return Err(AlpineError::Config(format!(
            "edge count {} impossible for {n} nodes without isolated vertices",
            cfg.edges
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spread = LogNormal::new(0.0, cfg.degree_spread).map_err(|e| AlpineError::Config(e.to_string()))?;
    let theta: Vec<f64> = (0..n).map(|_| spread.sample(&mut rng)).collect();
    let weight = |i: usize, j: usize| {
        let a = if block[i] == block[j] { 1.0 } else { cfg.between };
        theta[i] * theta[j] * a
    };

    weighted_edges(n, cfg.edges, 1, weight, &mut rng)
}

/// Communities as Gaussian clouds in the plane; pairs are drawn without
/// replacement with weight `theta_i * theta_j * exp(-|z_i - z_j|^2 / (2 width^2))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSpace {
    pub sizes: Vec<usize>,
    pub centers: Vec<[f64; 2]>,
    pub spread: f64,
    pub width: f64,
    pub edges: usize,
    pub degree_spread: f64,
    /// Every node first draws this many partners.
    pub min_degree: usize,
    pub seed: u64,
}

pub fn latent_space_graph(cfg: &LatentSpace) -> Result<PartialNetwork> {
    if cfg.centers.len() != cfg.sizes.len() {
        return Err(AlpineError::Config("one center per community required".into()));
    }
    let block = block_labels(&cfg.sizes);
    let n = block.len();
    let total = n * (n.saturating_sub(1)) / 2;
    if n < 2 || cfg.min_degree >= n || cfg.edges > total || cfg.edges < (n * cfg.min_degree).div_ceil(2) {
        return Err(AlpineError::Config(format!("edge count {} impossible for {n} nodes", cfg.edges)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cloud = rand_distr::Normal::new(0.0, cfg.spread).map_err(|e| AlpineError::Config(e.to_string()))?;
    let spread = LogNormal::new(0.0, cfg.degree_spread).map_err(|e| AlpineError::Config(e.to_string()))?;
    let z: Vec<[f64; 2]> = block
        .iter()
        .map(|&b| [cfg.centers[b][0] + cloud.sample(&mut rng), cfg.centers[b][1] + cloud.sample(&mut rng)])
        .collect();
    let theta: Vec<f64> = (0..n).map(|_| spread.sample(&mut rng)).collect();
    let weight = |i: usize, j: usize| {
        let d2 = (z[i][0] - z[j][0]).powi(2) + (z[i][1] - z[j][1]).powi(2);
        theta[i] * theta[j] * (-d2 / (2.0 * cfg.width * cfg.width)).exp()
    };
    weighted_edges(n, cfg.edges, cfg.min_degree, weight, &mut rng)
}

/// Top up every node to `min_degree` partners, then fill to `edges` with a
/// weighted sample without replacement (Efraimidis-Spirakis keys).
fn weighted_edges(
    n: usize,
    edges: usize,
    min_degree: usize,
    weight: impl Fn(usize, usize) -> f64,
    rng: &mut ChaCha8Rng,
) -> Result<PartialNetwork> {
    let mut chosen = BTreeSet::new();
    let mut degree = vec![0usize; n];
    for i in 0..n {
        while degree[i] < min_degree {
            let partners: Vec<usize> = (0..n).filter(|&j| j != i && !chosen.contains(&Pair::new(i, j))).collect();
            let weights: Vec<f64> = partners.iter().map(|&j| weight(i, j)).collect();
            let j = partners[weighted_index(&weights, rng)];
            chosen.insert(Pair::new(i, j));
            degree[i] += 1;
            degree[j] += 1;
        }
    }
    let mut keyed: Vec<(f64, Pair)> = Vec::with_capacity(n * n / 2);
    for i in 0..n {
        for j in i + 1..n {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            keyed.push((u.ln() / weight(i, j), Pair::new(i, j)));
        }
    }
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, p) in keyed {
        if chosen.len() >= edges {
            break;
        }
        chosen.insert(p);
    }
    PartialNetwork::from_edges(n, chosen)
}

/// Mean local clustering coefficient; nodes of degree < 2 count as zero.
pub fn mean_clustering(net: &PartialNetwork) -> f64 {
    let n = net.node_count();
    let mut total = 0.0;
    for i in 0..n {
        let nb: Vec<usize> = net.edge_neighbors(i).collect();
        let k = nb.len();
        if k < 2 {
            continue;
        }
        let mut closed = 0usize;
        for (a, &u) in nb.iter().enumerate() {
            for &v in &nb[a + 1..] {
                if net.edge_neighbors(u).any(|w| w == v) {
                    closed += 1;
                }
            }
        }
        total += closed as f64 / (k * (k - 1) / 2) as f64;
    }
    total / n as f64
}

fn weighted_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut t = rng.gen::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        t -= w;
        if t < 0.0 {
            return k;
        }
    }
    weights.len() - 1
}

/// Stand-in with the published shape of the political books network: 105
/// nodes, 441 edges, communities of 49, 43 and 13, mean clustering near 0.49.
pub fn polbooks_surrogate() -> PartialNetwork {
    latent_space_graph(&LatentSpace {
        sizes: vec![49, 43, 13],
        centers: vec![[-1.0, 0.0], [1.0, 0.0], [0.0, 0.3]],
        spread: 0.45,
        width: 0.2,
        edges: 441,
        degree_spread: 0.6,
        min_degree: 2,
        seed: 0,
    })
    .expect("fixed parameters are valid")
}

/// Sparse modular graph at the scale of the C. elegans neural network: 297
/// nodes, 2148 edges, heavy-tailed degrees, mean clustering near 0.28.
pub fn celegans_like() -> PartialNetwork {
    let centers = (0..6)
        .map(|k| {
            let t = k as f64 * std::f64::consts::TAU / 6.0;
            [t.cos(), t.sin()]
        })
        .collect();
    latent_space_graph(&LatentSpace {
        sizes: vec![60, 55, 50, 48, 44, 40],
        centers,
        spread: 0.5,
        width: 0.5,
        edges: 2148,
        degree_spread: 0.8,
        min_degree: 1,
        seed: 0,
    })
    .expect("fixed parameters are valid")
}

/// Two hubs with ten leaves each, plus pendants hanging off leaves and a new
/// node whose true partners are hub A and some of A's leaves.
#[derive(Clone, Debug)]
pub struct TwoHubGraph {
    pub truth: PartialNetwork,
    pub hub_a: usize,
    pub hub_b: usize,
    pub new_node: usize,
    /// Nodes adjacent to either hub in the ground truth.
    pub hub_adjacent: BTreeSet<usize>,
}

pub fn two_hub_graph(seed: u64) -> Result<TwoHubGraph> {
    const LEAVES: usize = 10;
    const PENDANTS: usize = 6;
    let hub_a = 0;
    let hub_b = 1;
    let leaves_a: Vec<usize> = (2..2 + LEAVES).collect();
    let leaves_b: Vec<usize> = (2 + LEAVES..2 + 2 * LEAVES).collect();
    let first_pendant = 2 + 2 * LEAVES;
    let new_node = first_pendant + PENDANTS;
    let n = new_node + 1;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = BTreeSet::new();
    edges.insert(Pair::new(hub_a, hub_b));
    for &l in &leaves_a {
        edges.insert(Pair::new(hub_a, l));
    }
    for &l in &leaves_b {
        edges.insert(Pair::new(hub_b, l));
    }
    for leaves in [&leaves_a, &leaves_b] {
        for (x, &u) in leaves.iter().enumerate() {
            for &v in &leaves[x + 1..] {
                if rng.gen::<f64>() < 0.2 {
                    edges.insert(Pair::new(u, v));
                }
            }
        }
    }
    for k in 0..PENDANTS {
        let pool = if k % 2 == 0 { &leaves_a } else { &leaves_b };
        let leaf = pool[rng.gen_range(0..pool.len())];
        edges.insert(Pair::new(first_pendant + k, leaf));
    }
    edges.insert(Pair::new(new_node, hub_a));
    let picks = rand::seq::index::sample(&mut rng, LEAVES, 4);
    for idx in picks {
        edges.insert(Pair::new(new_node, leaves_a[idx]));
    }

    let truth = PartialNetwork::from_edges(n, edges)?;
    let hub_adjacent = truth.edge_neighbors(hub_a).chain(truth.edge_neighbors(hub_b)).collect();
    Ok(TwoHubGraph { truth, hub_a, hub_b, new_node, hub_adjacent })
}

pub const POLBOOKS_ENV: &str = "ALPINE_POLBOOKS";

/// The political books graph read from `$ALPINE_POLBOOKS` when set, otherwise
/// the bundled surrogate. Returns the graph and a dataset name.
pub fn polbooks() -> Result<(PartialNetwork, &'static str)> {
    match std::env::var_os(POLBOOKS_ENV) {
        Some(path) => Ok((crate::pon::load_edge_list(path)?.0, "polbooks")),
        None => {
            let text = include_str!("../data/polbooks_surrogate.txt");
            let (net, _) = crate::pon::parse_edge_list(text, std::path::Path::new("polbooks_surrogate.txt"))?;
            Ok((net, "polbooks-surrogate"))
        }
    }
}

/// Write one `u v` line per edge, using node labels when present.
pub fn write_edge_list(net: &PartialNetwork, mut out: impl Write) -> Result<()> {
    for p in net.edges() {
        writeln!(out, "{} {}", net.label(p.i()), net.label(p.j()))?;
    }
    Ok(())
}
