//! The active learning loop: embed, score, select, query, reveal, repeat.
//!
//! A [`CampaignState`] sits at a round boundary: every round before
//! `iteration` is fully revealed and logged, and `model` is the embedding
//! fitted at the previous boundary (the warm start for the next fit). A round
//! commits only after all of its queries were answered, so a failed oracle
//! leaves the state resumable.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{fit, EmbeddingModel, FitConfig, Init};
use crate::error::{AlpineError, Result};
use crate::metrics::auc;
use crate::pon::{GroundTruthOracle, Observation, Oracle, Pair, PartialNetwork};
use crate::strategy::{score_pool, select_top_where, PageRankConfig, ScoringContext, Strategy, UtilityScores};
use crate::vopt::VoptConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Budget {
    Queries(usize),
    /// Fraction of the initial unknown pool, rounded.
    FractionOfPool(f64),
}

impl Budget {
    pub fn resolve(self, pool: usize) -> Result<usize> {
        let b = match self {
            Budget::Queries(b) => b,
            Budget::FractionOfPool(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(AlpineError::Config(format!("budget fraction {f} outside (0, 1]")));
                }
                ((f * pool as f64).round() as usize).max(1)
            }
        };
        if b == 0 {
            return Err(AlpineError::Config("budget must be >= 1".into()));
        }
        Ok(b.min(pool))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub strategy: Strategy,
    pub step: usize,
    pub budget: Budget,
    pub fit: FitConfig,
    pub gamma: f64,
    pub vopt: VoptConfig,
    pub pagerank: PageRankConfig,
    /// Seeds the random strategy's per-iteration streams.
    pub seed: u64,
    /// Refit from the previous embedding (default) or from a fresh random one.
    pub warm_start: bool,
    /// Stop once the hold-out AUC reaches this value. Needs `holdout_fraction`.
    pub early_stop_auc: Option<f64>,
    /// Fraction of the initial pool labelled up front and never queried.
    pub holdout_fraction: Option<f64>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            strategy: Strategy::VOptimality,
            step: 10,
            budget: Budget::FractionOfPool(0.1),
            fit: FitConfig::default(),
            gamma: 1.0,
            vopt: VoptConfig::default(),
            pagerank: PageRankConfig::default(),
            seed: 0,
            warm_start: true,
            early_stop_auc: None,
            holdout_fraction: None,
        }
    }
}

impl CampaignConfig {
    fn validate(&self) -> Result<()> {
        if self.step == 0 {
            return Err(AlpineError::Config("step size must be >= 1".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(AlpineError::Config("gamma must be positive".into()));
        }
        if self.early_stop_auc.is_some() && self.holdout_fraction.is_none() {
            return Err(AlpineError::Config("early stopping needs a hold-out fraction".into()));
        }
        if let Some(f) = self.holdout_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(AlpineError::Config(format!("hold-out fraction {f} outside (0, 1)")));
            }
        }
        Ok(())
    }

    /// Settings that must not change between an interrupted run and its resumption.
    fn same_campaign(&self, other: &CampaignConfig) -> bool {
        self.strategy == other.strategy
            && self.step == other.step
            && self.budget == other.budget
            && self.gamma == other.gamma
            && self.seed == other.seed
            && self.warm_start == other.warm_start
            && self.vopt == other.vopt
            && self.pagerank == other.pagerank
            && self.early_stop_auc == other.early_stop_auc
            && self.holdout_fraction == other.holdout_fraction
            && self.fit.dim == other.fit.dim
            && self.fit.seed == other.fit.seed
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub pair: Pair,
    pub observation: Observation,
    pub iteration: usize,
}

/// Measurements taken right after the fit at one round boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub queries_used: usize,
    /// AUC over every pair of the initial pool, revealed or not.
    pub auc_initial_pool: Option<f64>,
    /// AUC over the pairs still unknown.
    pub auc_remaining: Option<f64>,
    pub auc_holdout: Option<f64>,
    pub log_likelihood: f64,
    pub fit_epochs: usize,
    pub fit_seconds: f64,
    /// Scoring pass only; `None` when no scoring followed the fit.
    pub score_seconds: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    BudgetExhausted,
    PoolEmpty,
    EarlyStop,
}

/// Ground-truth labels of the initial pool, for measuring link prediction AUC.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pool: Vec<(Pair, bool)>,
}

impl Evaluator {
    pub fn new(initial: &PartialNetwork, truth: &GroundTruthOracle) -> Self {
        Evaluator {
            pool: initial.unknown_pairs().map(|p| (p, truth.is_link(p))).collect(),
        }
    }

    pub fn pool(&self) -> &[(Pair, bool)] {
        &self.pool
    }

    /// AUC on the whole initial pool and on its still-unknown part.
    pub fn measure(&self, model: &EmbeddingModel, net: &PartialNetwork) -> (Option<f64>, Option<f64>) {
        let all: Vec<(f64, bool)> = self.pool.iter().map(|&(p, l)| (model.link_probability(p), l)).collect();
        let remaining: Vec<(f64, bool)> = self
            .pool
            .iter()
            .filter(|(p, _)| net.is_unknown(*p))
            .map(|&(p, l)| (model.link_probability(p), l))
            .collect();
        (auc(&all).ok(), auc(&remaining).ok())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignState {
    pub version: u32,
    pub config: CampaignConfig,
    /// Content hash of the initial partially observed network.
    pub graph_hash: String,
    pub node_count: usize,
    pub initial_unknown: Vec<Pair>,
    pub holdout: Vec<(Pair, bool)>,
    pub budget: usize,
    pub remaining: usize,
    pub iteration: usize,
    pub query_log: Vec<QueryRecord>,
    pub metrics: Vec<IterationMetrics>,
    pub model: Option<EmbeddingModel>,
    pub stop: Option<StopReason>,
    #[serde(skip)]
    net: Option<PartialNetwork>,
}

fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
}

impl CampaignState {
    /// Fresh campaign on `net0`; resolves the budget and draws the hold-out set.
    pub fn start(net0: &PartialNetwork, oracle: &dyn Oracle, config: &CampaignConfig) -> Result<Self> {
        config.validate()?;
        if net0.unknown_count() == 0 {
            return Err(AlpineError::Contract("campaign needs a non-empty unknown pool".into()));
        }
        let initial_unknown: Vec<Pair> = net0.unknown_pairs().collect();
        let holdout = match config.holdout_fraction {
            Some(f) => {
                let k = ((f * initial_unknown.len() as f64).round() as usize).clamp(1, initial_unknown.len() - 1);
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x484F_4C44);
                let mut picked: Vec<Pair> = rand::seq::index::sample(&mut rng, initial_unknown.len(), k)
                    .into_iter()
                    .map(|idx| initial_unknown[idx])
                    .collect();
                picked.sort();
                picked
                    .into_iter()
                    .map(|p| Ok((p, oracle.query(p)?.is_link())))
                    .collect::<Result<Vec<_>>>()?
            }
            None => Vec::new(),
        };
        let budget = config.budget.resolve(initial_unknown.len() - holdout.len())?;
        Ok(CampaignState {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            graph_hash: net0.content_hash(),
            node_count: net0.node_count(),
            initial_unknown,
            holdout,
            budget,
            remaining: budget,
            iteration: 0,
            query_log: Vec::new(),
            metrics: Vec::new(),
            model: None,
            stop: None,
            net: Some(net0.clone()),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.stop.is_some()
    }

    pub fn queries_used(&self) -> usize {
        self.query_log.len()
    }

    /// Current network; available after [`CampaignState::start`] or [`CampaignState::attach`].
    pub fn network(&self) -> Option<&PartialNetwork> {
        self.net.as_ref()
    }

    /// Rebuild the current network of a restored checkpoint from the initial one.
    pub fn attach(&mut self, net0: &PartialNetwork) -> Result<()> {
        if net0.content_hash() != self.graph_hash {
            return Err(AlpineError::Checkpoint(
                "graph content hash differs from the checkpointed campaign".into(),
            ));
        }
        let mut net = net0.clone();
        for q in &self.query_log {
            net.reveal(q.pair, q.observation)?;
        }
        self.net = Some(net);
        Ok(())
    }

    /// Run until the campaign stops, or until `max_rounds` more rounds have been revealed.
    pub fn advance(
        &mut self,
        oracle: &dyn Oracle,
        evaluator: Option<&Evaluator>,
        max_rounds: Option<usize>,
    ) -> Result<()> {
        self.advance_observed(oracle, evaluator, max_rounds, &mut |_| {})
    }

    /// [`CampaignState::advance`], handing every round's score table to `observer`.
    pub fn advance_observed(
        &mut self,
        oracle: &dyn Oracle,
        evaluator: Option<&Evaluator>,
        max_rounds: Option<usize>,
        observer: &mut dyn FnMut(&UtilityScores),
    ) -> Result<()> {
        let mut rounds = 0;
        let holdout: BTreeSet<Pair> = self.holdout.iter().map(|h| h.0).collect();
        while self.stop.is_none() {
            if max_rounds.is_some_and(|m| rounds >= m) {
                break;
            }
            let net = self
                .net
                .as_ref()
                .ok_or_else(|| AlpineError::Contract("campaign state has no network attached".into()))?;
            let cfg = &self.config;

            let fit_cfg = FitConfig {
                init: match (&self.model, cfg.warm_start) {
                    (Some(m), true) => Init::WarmStart(m.clone()),
                    _ => cfg.fit.init.clone(),
                },
                seed: if cfg.warm_start { cfg.fit.seed } else { iteration_seed(cfg.fit.seed, self.iteration) },
                ..cfg.fit.clone()
            };
            let started = Instant::now();
            let fitted = fit(net, &fit_cfg, cfg.gamma)?;
            let fit_seconds = started.elapsed().as_secs_f64();
            let model = fitted.model;

            let (auc_initial_pool, auc_remaining) = match evaluator {
                Some(e) => e.measure(&model, net),
                None => (None, None),
            };
            let auc_holdout = if self.holdout.is_empty() {
                None
            } else {
                let scored: Vec<(f64, bool)> =
                    self.holdout.iter().map(|&(p, l)| (model.link_probability(p), l)).collect();
                auc(&scored).ok()
            };
            let mut metrics = IterationMetrics {
                iteration: self.iteration,
                queries_used: self.query_log.len(),
                auc_initial_pool,
                auc_remaining,
                auc_holdout,
                log_likelihood: *fitted.likelihood_trace.last().expect("trace starts non-empty"),
                fit_epochs: fitted.epochs,
                fit_seconds,
                score_seconds: None,
            };

            let candidates = net.unknown_count() - holdout.len();
            let stop = if self.remaining == 0 {
                Some(StopReason::BudgetExhausted)
            } else if candidates == 0 {
                Some(StopReason::PoolEmpty)
            } else if matches!((cfg.early_stop_auc, auc_holdout), (Some(t), Some(a)) if a >= t) {
                Some(StopReason::EarlyStop)
            } else {
                None
            };
            if let Some(reason) = stop {
                self.metrics.push(metrics);
                self.model = Some(model);
                self.stop = Some(reason);
                info!("campaign stopped after {} rounds: {reason:?}", self.iteration);
                break;
            }

            let ctx = ScoringContext {
                net,
                model: Some(&model),
                iteration: self.iteration,
                random_seed: iteration_seed(cfg.seed, self.iteration),
                pagerank: cfg.pagerank,
                vopt: cfg.vopt,
            };
            let started = Instant::now();
            let scores = score_pool(cfg.strategy, &ctx)?;
            metrics.score_seconds = Some(started.elapsed().as_secs_f64());
            observer(&scores);
            let chosen = select_top_where(&scores, cfg.step, self.remaining, |p| !holdout.contains(&p));

            // Ask about every pair before touching the state.
            let answers = chosen
                .iter()
                .map(|&p| oracle.query(p).map(|o| (p, o)))
                .collect::<Result<Vec<_>>>()?;
            let mut next = net.clone();
            for &(p, o) in &answers {
                next.reveal(p, o)?;
            }
            self.net = Some(next);
            self.query_log.extend(answers.into_iter().map(|(pair, observation)| QueryRecord {
                pair,
                observation,
                iteration: self.iteration,
            }));
            self.remaining -= chosen.len();
            self.metrics.push(metrics);
            self.model = Some(model);
            self.iteration += 1;
            rounds += 1;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).map_err(|e| AlpineError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| AlpineError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AlpineError::io(path, e))?;
        let state: CampaignState = serde_json::from_str(&text)?;
        if state.version != CHECKPOINT_VERSION {
            return Err(AlpineError::Checkpoint(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                state.version
            )));
        }
        Ok(state)
    }
}

/// Run a campaign from scratch to completion.
pub fn run_campaign(
    net0: &PartialNetwork,
    oracle: &dyn Oracle,
    config: &CampaignConfig,
    evaluator: Option<&Evaluator>,
) -> Result<CampaignState> {
    let mut state = CampaignState::start(net0, oracle, config)?;
    state.advance(oracle, evaluator, None)?;
    Ok(state)
}

/// Continue an interrupted campaign. The state must have its network attached
/// (see [`CampaignState::attach`]) and `config` must describe the same campaign.
pub fn resume(
    mut state: CampaignState,
    oracle: &dyn Oracle,
    config: &CampaignConfig,
    evaluator: Option<&Evaluator>,
) -> Result<CampaignState> {
    if !state.config.same_campaign(config) {
        return Err(AlpineError::Checkpoint(format!(
            "configuration differs from the checkpointed campaign (strategy {} vs {})",
            config.strategy, state.config.strategy
        )));
    }
    if state.is_finished() {
        return Ok(state);
    }
    state.advance(oracle, evaluator, None)?;
    Ok(state)
}
