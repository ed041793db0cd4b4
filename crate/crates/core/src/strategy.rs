//! Query strategies: a utility per unknown pair, and greedy top-s selection.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{softplus, EmbeddingModel};
use crate::error::{AlpineError, Result};
use crate::pon::{Pair, PartialNetwork};
use crate::vopt::{score_all_vopt, VoptConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "rand")]
    Random,
    #[serde(rename = "max-deg")]
    MaxDegree,
    #[serde(rename = "page-rank")]
    PageRank,
    #[serde(rename = "min-dis")]
    MinDistance,
    #[serde(rename = "max-prob")]
    MaxProbability,
    #[serde(rename = "max-ent")]
    MaxEntropy,
    #[serde(rename = "v-opt")]
    VOptimality,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Random,
        Strategy::MaxDegree,
        Strategy::PageRank,
        Strategy::MinDistance,
        Strategy::MaxProbability,
        Strategy::MaxEntropy,
        Strategy::VOptimality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "rand",
            Strategy::MaxDegree => "max-deg",
            Strategy::PageRank => "page-rank",
            Strategy::MinDistance => "min-dis",
            Strategy::MaxProbability => "max-prob",
            Strategy::MaxEntropy => "max-ent",
            Strategy::VOptimality => "v-opt",
        }
    }

    pub fn needs_embedding(self) -> bool {
        matches!(
            self,
            Strategy::MinDistance | Strategy::MaxProbability | Strategy::MaxEntropy | Strategy::VOptimality
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = AlpineError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Strategy::ALL.iter().map(|st| st.name()).collect();
                AlpineError::Config(format!("unknown strategy {s:?}; valid: {}", names.join(", ")))
            })
    }
}

/// Identity of the (model, network) pair a score table was computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SnapshotId {
    pub model: u64,
    pub net: u64,
}

impl SnapshotId {
    pub fn of(model: &EmbeddingModel, net: &PartialNetwork) -> Self {
        SnapshotId {
            model: model.fingerprint(),
            net: net.fingerprint(),
        }
    }

    pub fn network_only(net: &PartialNetwork) -> Self {
        SnapshotId {
            model: 0,
            net: net.fingerprint(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtilityScores {
    pub strategy: Strategy,
    pub iteration: usize,
    pub snapshot: SnapshotId,
    /// One entry per unknown pair, in ascending pair order.
    pub scores: Vec<(Pair, f64)>,
    pub complexity: Option<String>,
}

impl UtilityScores {
    /// Pairs sorted by descending score, ties by ascending pair.
    pub fn ranked(&self) -> Vec<(Pair, f64)> {
        let mut v = self.scores.clone();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    /// Score dump: `i,j,score,strategy,iteration`, best first.
    pub fn write_csv(&self, net: &PartialNetwork, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "score", "strategy", "iteration"])?;
        for (p, s) in self.ranked() {
            w.write_record([
                net.label(p.i()),
                net.label(p.j()),
                format!("{s:e}"),
                self.strategy.name().to_string(),
                self.iteration.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `-P ln P - (1 - P) ln(1 - P)`, natural log.
pub fn entropy_utility(model: &EmbeddingModel, pair: Pair) -> f64 {
    let z = model.logit(pair);
    let p = model.link_probability(pair);
    // -ln P = softplus(-z), -ln(1-P) = softplus(z)
    p * softplus(-z) + (1.0 - p) * softplus(z)
}

pub fn prob_utility(model: &EmbeddingModel, pair: Pair) -> f64 {
    model.link_probability(pair)
}

pub fn distance_utility(model: &EmbeddingModel, pair: Pair) -> f64 {
    -model.squared_distance(pair.i(), pair.j()).sqrt()
}

/// Sum of the observed link degrees of both endpoints.
pub fn degree_utility(net: &PartialNetwork, pair: Pair) -> f64 {
    (net.observed_degree(pair.i()) + net.observed_degree(pair.j())) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageRankConfig {
    pub damping: f64,
    pub max_iters: usize,
    /// L1 change between iterates at which iteration stops.
    pub tolerance: f64,
}

impl Default for PageRankConfig {
    fn default() -> Self {
        PageRankConfig {
            damping: 0.85,
            max_iters: 200,
            tolerance: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PageRank {
    pub scores: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration on the observed links with uniform teleport. Unknown pairs
/// count as non-links; dangling nodes spread their mass uniformly.
pub fn pagerank(net: &PartialNetwork, cfg: &PageRankConfig) -> PageRank {
    let n = net.node_count();
    if n == 0 {
        return PageRank { scores: vec![], iterations: 0, converged: true };
    }
    let nf = n as f64;
    let degree: Vec<usize> = (0..n).map(|i| net.observed_degree(i)).collect();
    let mut rank = vec![1.0 / nf; n];
    let mut next = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        iterations += 1;
        let dangling: f64 = (0..n).filter(|&i| degree[i] == 0).map(|i| rank[i]).sum();
        let base = (1.0 - cfg.damping) / nf + cfg.damping * dangling / nf;
        for (i, slot) in next.iter_mut().enumerate() {
            let inflow: f64 = net.edge_neighbors(i).map(|j| rank[j] / degree[j] as f64).sum();
            *slot = base + cfg.damping * inflow;
        }
        let change: f64 = rank.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut rank, &mut next);
        if change < cfg.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("PageRank did not converge in {} iterations; using last iterate", cfg.max_iters);
    }
    PageRank { scores: rank, iterations, converged }
}

pub fn pagerank_utility(ranks: &[f64], pair: Pair) -> f64 {
    ranks[pair.i()] + ranks[pair.j()]
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform score in [0, 1) for `pair`, a pure function of (seed, i, j).
/// No stream position to carry, so pairs can be scored in any order.
pub fn random_utility(seed: u64, pair: Pair) -> f64 {
    let key = ((pair.i() as u64) << 32) | pair.j() as u64;
    let z = splitmix64(splitmix64(seed) ^ key);
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Everything a strategy may read while scoring one iteration.
#[derive(Clone, Copy, Debug)]
pub struct ScoringContext<'a> {
    pub net: &'a PartialNetwork,
    pub model: Option<&'a EmbeddingModel>,
    pub iteration: usize,
    /// Seed of this iteration's random scores.
    pub random_seed: u64,
    pub pagerank: PageRankConfig,
    pub vopt: VoptConfig,
}

fn par_scores(net: &PartialNetwork, f: impl Fn(Pair) -> f64 + Sync) -> Vec<(Pair, f64)> {
    let pool: Vec<Pair> = net.unknown_pairs().collect();
    pool.into_par_iter().map(|p| (p, f(p))).collect()
}

/// Score every pair in U with `strategy`.
pub fn score_pool(strategy: Strategy, ctx: &ScoringContext<'_>) -> Result<UtilityScores> {
    let net = ctx.net;
    let model = match (strategy.needs_embedding(), ctx.model) {
        (true, None) => {
            return Err(AlpineError::Contract(format!("strategy {strategy} needs an embedding")))
        }
        (_, m) => m,
    };
    let snapshot = match model {
        Some(m) => SnapshotId::of(m, net),
        None => SnapshotId::network_only(net),
    };
    let mut complexity = None;
    let scores = match strategy {
        Strategy::Random => {
            let seed = ctx.random_seed;
            net.unknown_pairs().map(|p| (p, random_utility(seed, p))).collect()
        }
        Strategy::MaxDegree => par_scores(net, |p| degree_utility(net, p)),
        Strategy::PageRank => {
            let pr = pagerank(net, &ctx.pagerank);
            par_scores(net, |p| pagerank_utility(&pr.scores, p))
        }
        Strategy::MinDistance => {
            let m = model.expect("checked");
            par_scores(net, |p| distance_utility(m, p))
        }
        Strategy::MaxProbability => {
            let m = model.expect("checked");
            par_scores(net, |p| prob_utility(m, p))
        }
        Strategy::MaxEntropy => {
            let m = model.expect("checked");
            par_scores(net, |p| entropy_utility(m, p))
        }
        Strategy::VOptimality => {
            let table = score_all_vopt(model.expect("checked"), net, &ctx.vopt)?;
            complexity = table.complexity;
            table.scores
        }
    };
    if let Some((p, s)) = scores.iter().find(|(_, s)| !s.is_finite()) {
        return Err(AlpineError::Numeric(format!("{strategy} scored {p} as {s}")));
    }
    Ok(UtilityScores {
        strategy,
        iteration: ctx.iteration,
        snapshot,
        scores,
        complexity,
    })
}

/// The `min(step, budget, |U|)` best pairs, descending by score, ties to the smaller pair.
pub fn select_top(scores: &UtilityScores, step: usize, budget: usize) -> Vec<Pair> {
    select_top_where(scores, step, budget, |_| true)
}

/// [`select_top`] restricted to pairs accepted by `eligible`.
pub fn select_top_where(
    scores: &UtilityScores,
    step: usize,
    budget: usize,
    eligible: impl Fn(Pair) -> bool,
) -> Vec<Pair> {
    let take = step.min(budget);
    let mut pool: Vec<(Pair, f64)> = scores.scores.iter().copied().filter(|(p, _)| eligible(*p)).collect();
    let cmp = |a: &(Pair, f64), b: &(Pair, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if take < pool.len() && take > 0 {
        pool.select_nth_unstable_by(take - 1, cmp);
        pool.truncate(take);
    }
    pool.sort_by(cmp);
    pool.truncate(take);
    pool.into_iter().map(|(p, _)| p).collect()
}
