//! Experiment grids, gain summaries, the new-node study and timing reports.

use std::collections::BTreeMap;
use std::io::Write;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::campaign::{CampaignConfig, CampaignState, Evaluator};
use crate::error::{AlpineError, Result};
use crate::metrics::mean;
use crate::pon::{apply_mask, MaskSpec, Pair, PartialNetwork};
use crate::strategy::Strategy;

pub const RESULTS_HEADER: &str = "# alpine-results v1";
pub const RESULT_COLUMNS: [&str; 10] = [
    "dataset",
    "strategy",
    "seed",
    "mask_seed",
    "step",
    "iteration",
    "queries_used",
    "auc_initial_pool",
    "auc_remaining",
    "wall_seconds_per_iteration",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub mask_seed: u64,
    pub step: usize,
    pub iteration: usize,
    pub queries_used: usize,
    pub auc_initial_pool: Option<f64>,
    pub auc_remaining: Option<f64>,
    pub wall_seconds_per_iteration: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellFailure {
    pub strategy: Strategy,
    pub seed: u64,
    pub mask_seed: u64,
    pub step: usize,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CellFailure>,
}

/// Strategies x seeds x mask seeds x step sizes, one campaign per cell.
///
/// `seed` drives both the embedding initialization and the random strategy, so
/// cells sharing a mask seed and a seed start from the same fitted embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentGrid {
    pub dataset: String,
    pub hide_fraction: f64,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub mask_seeds: Vec<u64>,
    pub steps: Vec<usize>,
    /// Extra query streams for the random strategy per seed; the embedding seed
    /// stays fixed and the row's `seed` column holds the stream seed.
    pub random_repeats: u64,
    /// Template for every cell; strategy, step and seeds are overwritten.
    pub base: CampaignConfig,
}

impl ExperimentGrid {
    pub fn cells(&self) -> usize {
        self.strategies.len() * self.seeds.len() * self.mask_seeds.len() * self.steps.len()
    }
}

fn format_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes result rows as they arrive; the header goes out with the first write.
pub struct ResultWriter<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> ResultWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{RESULTS_HEADER}")?;
        let mut out = csv::Writer::from_writer(out);
        out.write_record(RESULT_COLUMNS)?;
        out.flush()?;
        Ok(ResultWriter { out })
    }

    pub fn write_rows(&mut self, rows: &[ResultRow]) -> Result<()> {
        for r in rows {
            self.out.write_record([
                r.dataset.clone(),
                r.strategy.to_string(),
                r.seed.to_string(),
                r.mask_seed.to_string(),
                r.step.to_string(),
                r.iteration.to_string(),
                r.queries_used.to_string(),
                format_opt(r.auc_initial_pool),
                format_opt(r.auc_remaining),
                format_opt(r.wall_seconds_per_iteration),
            ])?;
        }
        self.out.flush()?;
        Ok(())
    }
}

fn campaign_rows(grid: &ExperimentGrid, cfg: &CampaignConfig, mask_seed: u64, state: &CampaignState) -> Vec<ResultRow> {
    state
        .metrics
        .iter()
        .map(|m| ResultRow {
            dataset: grid.dataset.clone(),
            strategy: cfg.strategy,
            seed: cfg.seed,
            mask_seed,
            step: cfg.step,
            iteration: m.iteration,
            queries_used: m.queries_used,
            auc_initial_pool: m.auc_initial_pool,
            auc_remaining: m.auc_remaining,
            wall_seconds_per_iteration: m.score_seconds,
        })
        .collect()
}

/// Run every cell of `grid` on the fully observed `truth`. Rows are appended
/// to `out` cell by cell; a failing cell is recorded and the grid continues.
pub fn run_experiment<W: Write>(
    truth: &PartialNetwork,
    grid: &ExperimentGrid,
    mut out: Option<&mut ResultWriter<W>>,
) -> Result<ExperimentResult> {
    let mut result = ExperimentResult::default();
    if grid.cells() == 0 {
        warn!("experiment grid for {} has no cells; nothing to run", grid.dataset);
        return Ok(result);
    }
    for &mask_seed in &grid.mask_seeds {
        let (net0, oracle) = apply_mask(truth, &MaskSpec::uniform(grid.hide_fraction, mask_seed))?;
        let evaluator = Evaluator::new(&net0, &oracle);
        for &step in &grid.steps {
            for &strategy in &grid.strategies {
                let repeats = if strategy == Strategy::Random { grid.random_repeats.max(1) } else { 1 };
                for (&seed, r) in grid.seeds.iter().flat_map(|s| (0..repeats).map(move |r| (s, r))) {
                    let mut cfg = grid.base.clone();
                    cfg.strategy = strategy;
                    cfg.step = step;
                    cfg.seed = seed.wrapping_add(r << 32);
                    cfg.fit.seed = seed;
                    let outcome = CampaignState::start(&net0, &oracle, &cfg).and_then(|mut state| {
                        state.advance(&oracle, Some(&evaluator), None)?;
                        Ok(state)
                    });
                    match outcome {
                        Ok(state) => {
                            let rows = campaign_rows(grid, &cfg, mask_seed, &state);
                            if let Some(w) = out.as_deref_mut() {
                                w.write_rows(&rows)?;
                            }
                            info!(
                                "{} {strategy} seed {seed} mask {mask_seed} step {step}: {} rounds",
                                grid.dataset, state.iteration
                            );
                            result.rows.extend(rows);
                        }
                        Err(e) => {
                            warn!("{} {strategy} seed {seed} mask {mask_seed} step {step} failed: {e}", grid.dataset);
                            result.failures.push(CellFailure { strategy, seed, mask_seed, step, error: e.to_string() });
                        }
                    }
                }
            }
        }
    }
    Ok(result)
}

/// Final minus initial `auc_initial_pool` of one campaign, in percentage points.
#[derive(Clone, Debug, PartialEq)]
pub struct CampaignGain {
    pub strategy: Strategy,
    pub seed: u64,
    pub mask_seed: u64,
    pub step: usize,
    pub initial: f64,
    pub last: f64,
    pub gain_points: f64,
}

pub fn campaign_gains(result: &ExperimentResult) -> Vec<CampaignGain> {
    let mut groups: BTreeMap<(Strategy, usize, u64, u64), Vec<&ResultRow>> = BTreeMap::new();
    for r in &result.rows {
        groups.entry((r.strategy, r.step, r.mask_seed, r.seed)).or_default().push(r);
    }
    groups
        .into_iter()
        .filter_map(|((strategy, step, mask_seed, seed), rows)| {
            let first = rows.iter().min_by_key(|r| r.iteration)?.auc_initial_pool?;
            let last = rows.iter().max_by_key(|r| r.iteration)?.auc_initial_pool?;
            Some(CampaignGain {
                strategy,
                seed,
                mask_seed,
                step,
                initial: first,
                last,
                gain_points: 100.0 * (last - first),
            })
        })
        .collect()
}

/// Mean gain per (strategy, step), in percentage points.
pub fn mean_gains(result: &ExperimentResult) -> BTreeMap<(Strategy, usize), f64> {
    let mut by: BTreeMap<(Strategy, usize), Vec<f64>> = BTreeMap::new();
    for g in campaign_gains(result) {
        by.entry((g.strategy, g.step)).or_default().push(g.gain_points);
    }
    by.into_iter().filter_map(|(k, v)| mean(&v).map(|m| (k, m))).collect()
}

/// Mean wall seconds of one scoring pass, per strategy.
pub fn timing_report(result: &ExperimentResult) -> BTreeMap<Strategy, f64> {
    let mut by: BTreeMap<Strategy, Vec<f64>> = BTreeMap::new();
    for r in &result.rows {
        if let Some(t) = r.wall_seconds_per_iteration {
            by.entry(r.strategy).or_default().push(t);
        }
    }
    by.into_iter().filter_map(|(k, v)| mean(&v).map(|m| (k, m))).collect()
}

/// One round of the new-node study: every candidate partner of the new node, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyRound {
    pub iteration: usize,
    pub ranking: Vec<(usize, f64)>,
}

impl StudyRound {
    pub fn top(&self) -> Option<usize> {
        self.ranking.first().map(|r| r.0)
    }
}

/// Hide every pair of `node` except its link to `anchor`, then query one pair per round.
pub fn new_node_study(
    truth: &PartialNetwork,
    node: usize,
    anchor: usize,
    iterations: usize,
    base: &CampaignConfig,
) -> Result<Vec<StudyRound>> {
    let n = truth.node_count();
    if node >= n || anchor >= n {
        return Err(AlpineError::Config(format!("node {node} or anchor {anchor} outside 0..{n}")));
    }
    let link = Pair::try_new(node, anchor)?;
    if !truth.edges().any(|e| e == link) {
        return Err(AlpineError::Contract(format!(
            "anchor {} is not linked to node {} in the ground truth",
            truth.label(anchor),
            truth.label(node)
        )));
    }
    let (net0, oracle) = apply_mask(truth, &MaskSpec::new_node(node, anchor))?;
    let cfg = CampaignConfig {
        step: 1,
        budget: crate::campaign::Budget::Queries(iterations.max(1)),
        ..base.clone()
    };
    let mut state = CampaignState::start(&net0, &oracle, &cfg)?;
    let mut rounds = Vec::new();
    state.advance_observed(&oracle, None, Some(iterations), &mut |scores| {
        let ranking = scores
            .ranked()
            .into_iter()
            .filter(|(p, _)| p.contains(node))
            .map(|(p, s)| (p.other(node), s))
            .collect();
        rounds.push(StudyRound { iteration: scores.iteration, ranking });
    })?;
    if let Some(r) = rounds.iter().find(|r| r.top().is_some()) {
        info!("new-node study: first top candidate {}", truth.label(r.top().unwrap_or(0)));
    }
    Ok(rounds)
}
