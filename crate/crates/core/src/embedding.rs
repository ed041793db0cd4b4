//! Conditional embedding fitted by maximum likelihood on the observed pairs.
//!
//! Link probability is `P_ij = sigmoid(beta - gamma/2 * |x_i - x_j|^2)`. Only
//! pairs in E (label 1) and D (label 0) enter the likelihood; unknown pairs
//! contribute nothing.

use std::io::{BufRead, Write};
use std::path::Path;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AlpineError, Result};
use crate::pon::{Pair, PartialNetwork};

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `P(1 - P)` at `P = sigmoid(z)`, without cancellation.
pub fn logistic_variance(z: f64) -> f64 {
    sigmoid(z) * sigmoid(-z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelParts")]
pub struct EmbeddingModel {
    n: usize,
    dim: usize,
    coords: Vec<f64>,
    gamma: f64,
    beta: f64,
    #[serde(skip)]
    fingerprint: u64,
}

#[derive(Deserialize)]
struct ModelParts {
    n: usize,
    dim: usize,
    coords: Vec<f64>,
    gamma: f64,
    beta: f64,
}

impl TryFrom<ModelParts> for EmbeddingModel {
    type Error = AlpineError;

    fn try_from(p: ModelParts) -> Result<Self> {
        EmbeddingModel::new(p.n, p.dim, p.coords, p.gamma, p.beta)
    }
}

impl EmbeddingModel {
    /// `coords` is row-major, `n * dim` long.
    pub fn new(n: usize, dim: usize, coords: Vec<f64>, gamma: f64, beta: f64) -> Result<Self> {
        if dim == 0 {
            return Err(AlpineError::Config("embedding dimension must be >= 1".into()));
        }
        if coords.len() != n * dim {
            return Err(AlpineError::Contract(format!(
                "{} coordinates for a {n}x{dim} embedding",
                coords.len()
            )));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(AlpineError::Config(format!("gamma must be positive, got {gamma}")));
        }
        if !beta.is_finite() || coords.iter().any(|c| !c.is_finite()) {
            return Err(AlpineError::Numeric("embedding has non-finite entries".into()));
        }
        let mut model = EmbeddingModel {
            n,
            dim,
            coords,
            gamma,
            beta,
            fingerprint: 0,
        };
        model.fingerprint = model.compute_fingerprint();
        Ok(model)
    }

    fn compute_fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        (self.n, self.dim).hash(&mut h);
        self.gamma.to_bits().hash(&mut h);
        self.beta.to_bits().hash(&mut h);
        for c in &self.coords {
            c.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    /// Identity of the parameter values; changes whenever any parameter does.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// `x_i - x_j`
    pub fn difference(&self, i: usize, j: usize) -> Vec<f64> {
        self.row(i)
            .iter()
            .zip(self.row(j))
            .map(|(a, b)| a - b)
            .collect()
    }

    pub fn squared_distance(&self, i: usize, j: usize) -> f64 {
        self.row(i)
            .iter()
            .zip(self.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// `beta - gamma/2 * |x_i - x_j|^2`
    pub fn logit(&self, pair: Pair) -> f64 {
        self.beta - 0.5 * self.gamma * self.squared_distance(pair.i(), pair.j())
    }

    pub fn link_probability(&self, pair: Pair) -> f64 {
        sigmoid(self.logit(pair))
    }

    /// Index-based variant; rejects `i == j`.
    pub fn link_probability_between(&self, i: usize, j: usize) -> Result<f64> {
        Ok(self.link_probability(Pair::try_new(i, j)?))
    }

    /// `P_ij (1 - P_ij)`
    pub fn link_variance(&self, pair: Pair) -> f64 {
        logistic_variance(self.logit(pair))
    }

    fn check_net(&self, net: &PartialNetwork) -> Result<()> {
        if net.node_count() != self.n {
            return Err(AlpineError::Contract(format!(
                "model has {} nodes, network has {}",
                self.n,
                net.node_count()
            )));
        }
        Ok(())
    }

    /// Log-likelihood of the observed part of `net`.
    pub fn log_likelihood(&self, net: &PartialNetwork) -> Result<f64> {
        self.check_net(net)?;
        let objective = Objective::exact(net);
        Ok(objective.evaluate(&self.coords, self.dim, self.gamma, self.beta).log_likelihood)
    }

    /// Gradient of [`EmbeddingModel::log_likelihood`] with respect to the coordinates and beta.
    pub fn gradient(&self, net: &PartialNetwork) -> Result<Gradient> {
        self.check_net(net)?;
        let objective = Objective::exact(net);
        let eval = objective.evaluate(&self.coords, self.dim, self.gamma, self.beta);
        Ok(Gradient {
            coords: eval.coord_grad,
            beta: eval.beta_grad,
        })
    }

    /// Text export: header `n d gamma beta`, then one row of `d` values per node.
    pub fn write_text(&self, mut out: impl Write) -> Result<()> {
        writeln!(
            out,
            "{} {} {} {}",
            self.n,
            self.dim,
            format_g17(self.gamma),
            format_g17(self.beta)
        )?;
        for i in 0..self.n {
            let row: Vec<String> = self.row(i).iter().map(|&v| format_g17(v)).collect();
            writeln!(out, "{}", row.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| AlpineError::io(path, e))?;
        let mut lines = std::io::BufReader::new(file).lines().enumerate();
        let parse_err = |line: usize, message: String| AlpineError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))?;
        let header = header.map_err(|e| AlpineError::io(path, e))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(1, "header must be `n d gamma beta`".into()));
        }
        let bad = |what: &str| parse_err(1, format!("bad {what}"));
        let n: usize = fields[0].parse().map_err(|_| bad("n"))?;
        let dim: usize = fields[1].parse().map_err(|_| bad("d"))?;
        let gamma: f64 = fields[2].parse().map_err(|_| bad("gamma"))?;
        let beta: f64 = fields[3].parse().map_err(|_| bad("beta"))?;
        let mut coords = Vec::with_capacity(n * dim);
        for (no, line) in lines {
            let line = line.map_err(|e| AlpineError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(no + 1, e.to_string()))?;
            if row.len() != dim {
                return Err(parse_err(no + 1, format!("expected {dim} values, found {}", row.len())));
            }
            coords.extend(row);
        }
        EmbeddingModel::new(n, dim, coords, gamma, beta)
    }
}

/// Format like C's `%.17g`.
pub fn format_g17(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    fn trim(s: &str) -> &str {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.')
        } else {
            s
        }
    }
    if !(-4..17).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        let decimals = (16 - exp) as usize;
        trim(&format!("{x:.decimals$}")).to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    /// Row-major, same layout as the model coordinates.
    pub coords: Vec<f64>,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Zero-mean Gaussian coordinates; `None` means scale `1/sqrt(d)`.
    RandomGaussian { scale: Option<f64> },
    /// Continue from a previous model's coordinates and bias.
    WarmStart(EmbeddingModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub dim: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    /// Stop once the mean absolute parameter change of an accepted step drops below this.
    pub tolerance: f64,
    pub init: Init,
    pub seed: u64,
    /// Above this node count, non-links may be subsampled (see `negative_samples`).
    pub exact_limit: usize,
    /// Non-link samples per node when `n > exact_limit`; `None` keeps exact sums.
    pub negative_samples: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            dim: 8,
            max_epochs: 500,
            learning_rate: 0.1,
            tolerance: 1e-6,
            init: Init::RandomGaussian { scale: None },
            seed: 0,
            exact_limit: 2000,
            negative_samples: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: EmbeddingModel,
    pub epochs: usize,
    pub converged: bool,
    /// Log-likelihood at the start and after every accepted step.
    pub likelihood_trace: Vec<f64>,
}

struct Evaluation {
    log_likelihood: f64,
    coord_grad: Vec<f64>,
    beta_grad: f64,
}

/// Observed pairs entering the likelihood.
enum Objective {
    /// Dense status table; every non-unknown pair counts with weight 1.
    Exact { n: usize, status: Vec<u8> },
    /// Per-node incidence lists `(other, label, weight)`; each pair appears at both endpoints.
    Sampled { incidence: Vec<Vec<(usize, u8, f64)>> },
}

impl Objective {
    fn exact(net: &PartialNetwork) -> Self {
        Objective::Exact {
            n: net.node_count(),
            status: net.status_matrix(),
        }
    }

    /// Links with weight 1 plus `samples` random non-links per node, reweighted so
    /// the expected objective matches the exact one.
    fn sampled(net: &PartialNetwork, samples: usize, seed: u64) -> Self {
        let n = net.node_count();
        let mut incidence: Vec<Vec<(usize, u8, f64)>> = vec![Vec::new(); n];
        for p in net.edges() {
            incidence[p.i()].push((p.j(), 1, 1.0));
            incidence[p.j()].push((p.i(), 1, 1.0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A4D_504C_4544);
        for i in 0..n {
            let non_links = n - 1 - net.observed_degree(i) - net.unknown_degree(i);
            if non_links == 0 {
                continue;
            }
            let mut drawn = Vec::with_capacity(samples);
            let mut attempts = 0;
            while drawn.len() < samples && attempts < samples * 20 {
                attempts += 1;
                let j = rng.gen_range(0..n);
                if j == i {
                    continue;
                }
                let p = Pair::new(i, j);
                if net.status(p) == crate::pon::PairStatus::Disconnected {
                    drawn.push(j);
                }
            }
            if drawn.is_empty() {
                continue;
            }
            // Each non-link sits in two per-node sums; half weight per side.
            let w = 0.5 * non_links as f64 / drawn.len() as f64;
            for j in drawn {
                incidence[i].push((j, 0, w));
                incidence[j].push((i, 0, w));
            }
        }
        Objective::Sampled { incidence }
    }

    /// Number of observed pairs per node, used to precondition the ascent step.
    fn row_counts(&self) -> Vec<f64> {
        match self {
            Objective::Exact { n, status } => (0..*n)
                .map(|i| status[i * n..(i + 1) * n].iter().filter(|&&s| s != 2).count() as f64)
                .collect(),
            Objective::Sampled { incidence } => incidence
                .iter()
                .map(|row| row.iter().map(|t| t.2).sum())
                .collect(),
        }
    }

    fn evaluate(&self, coords: &[f64], dim: usize, gamma: f64, beta: f64) -> Evaluation {
        let row = |i: usize| &coords[i * dim..(i + 1) * dim];
        let term = |i: usize, j: usize, label: u8, weight: f64, grad: &mut [f64]| -> (f64, f64) {
            let xi = row(i);
            let xj = row(j);
            let d2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
            let z = beta - 0.5 * gamma * d2;
            let (ll, resid) = if label == 1 {
                (-softplus(-z), 1.0 - sigmoid(z))
            } else {
                (-softplus(z), -sigmoid(z))
            };
            let scale = weight * gamma * resid;
            for k in 0..dim {
                grad[k] += scale * (xj[k] - xi[k]);
            }
            (weight * ll, weight * resid)
        };
        let rows: Vec<(f64, Vec<f64>, f64)> = match self {
            Objective::Exact { n, status } => (0..*n)
                .into_par_iter()
                .map(|i| {
                    let mut grad = vec![0.0; dim];
                    let (mut ll, mut bg) = (0.0, 0.0);
                    for (j, &s) in status[i * n..(i + 1) * n].iter().enumerate() {
                        if s == 2 {
                            continue;
                        }
                        let (l, b) = term(i, j, s, 1.0, &mut grad);
                        ll += l;
                        bg += b;
                    }
                    (ll, grad, bg)
                })
                .collect(),
            Objective::Sampled { incidence } => incidence
                .par_iter()
                .enumerate()
                .map(|(i, terms)| {
                    let mut grad = vec![0.0; dim];
                    let (mut ll, mut bg) = (0.0, 0.0);
                    for &(j, label, w) in terms {
                        let (l, b) = term(i, j, label, w, &mut grad);
                        ll += l;
                        bg += b;
                    }
                    (ll, grad, bg)
                })
                .collect(),
        };
        let mut coord_grad = Vec::with_capacity(coords.len());
        let (mut ll, mut bg) = (0.0, 0.0);
        for (l, g, b) in rows {
            ll += l;
            bg += b;
            coord_grad.extend(g);
        }
        // Every pair was visited from both endpoints.
        Evaluation {
            log_likelihood: 0.5 * ll,
            coord_grad,
            beta_grad: 0.5 * bg,
        }
    }
}

fn logit_of(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Fit coordinates and bias by gradient ascent on the observed-pair likelihood.
///
/// Each row's step is scaled by the inverse number of observed pairs at that
/// node (the bias by the inverse total), which keeps one learning rate usable
/// across graph sizes. A step that lowers the likelihood is rejected and the
/// rate halved; accepted steps grow it by 10%.
pub fn fit(net: &PartialNetwork, config: &FitConfig, gamma: f64) -> Result<FitOutcome> {
    let n = net.node_count();
    if n < 2 {
        return Err(AlpineError::Config("embedding needs at least two nodes".into()));
    }
    if config.dim == 0 || config.max_epochs == 0 {
        return Err(AlpineError::Config("dim and max_epochs must be >= 1".into()));
    }
    if !(config.learning_rate > 0.0) || !(config.tolerance > 0.0) {
        return Err(AlpineError::Config("learning rate and tolerance must be positive".into()));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(AlpineError::Config(format!("gamma must be positive, got {gamma}")));
    }
    let dim = config.dim;

    let (mut coords, mut beta) = match &config.init {
        Init::RandomGaussian { scale } => {
            let scale = scale.unwrap_or(1.0 / (dim as f64).sqrt());
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let coords: Vec<f64> = (0..n * dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let observed = net.pair_count() - net.unknown_count();
            let density = if observed == 0 {
                0.5
            } else {
                net.edge_count() as f64 / observed as f64
            };
            (coords, logit_of(density))
        }
        Init::WarmStart(prev) => {
            if prev.node_count() != n || prev.dim() != dim {
                return Err(AlpineError::Config(format!(
                    "warm start is {}x{}, expected {n}x{dim}",
                    prev.node_count(),
                    prev.dim()
                )));
            }
            (prev.coords().to_vec(), prev.beta())
        }
    };

    let objective = match config.negative_samples {
        Some(k) if n > config.exact_limit => Objective::sampled(net, k.max(1), config.seed),
        _ => Objective::exact(net),
    };
    let row_scale: Vec<f64> = objective
        .row_counts()
        .into_iter()
        .map(|c| if c > 0.0 { 1.0 / c } else { 0.0 })
        .collect();
    let total: f64 = (net.pair_count() - net.unknown_count()).max(1) as f64;
    let beta_scale = 1.0 / total;

    let check = |ll: f64| -> Result<f64> {
        if ll.is_finite() {
            Ok(ll)
        } else {
            Err(AlpineError::Numeric(format!(
                "log-likelihood became {ll} (gamma {gamma})"
            )))
        }
    };

    let mut eval = objective.evaluate(&coords, dim, gamma, beta);
    check(eval.log_likelihood)?;
    let mut trace = vec![eval.log_likelihood];
    let mut lr = config.learning_rate;
    let mut converged = false;
    let mut epochs = 0;
    let params = (n * dim + 1) as f64;

    while epochs < config.max_epochs {
        epochs += 1;
        let mut accepted = false;
        for _ in 0..60 {
            let step: Vec<f64> = eval
                .coord_grad
                .iter()
                .enumerate()
                .map(|(k, g)| lr * row_scale[k / dim] * g)
                .collect();
            let beta_step = lr * beta_scale * eval.beta_grad;
            let cand: Vec<f64> = coords.iter().zip(&step).map(|(c, s)| c + s).collect();
            let cand_beta = beta + beta_step;
            let next = objective.evaluate(&cand, dim, gamma, cand_beta);
            check(next.log_likelihood)?;
            if next.log_likelihood >= eval.log_likelihood {
                let moved = (step.iter().map(|s| s.abs()).sum::<f64>() + beta_step.abs()) / params;
                coords = cand;
                beta = cand_beta;
                eval = next;
                trace.push(eval.log_likelihood);
                lr *= 1.1;
                accepted = true;
                if moved < config.tolerance {
                    converged = true;
                }
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            // No ascent step left at machine precision: stationary.
            converged = true;
        }
        if converged {
            break;
        }
    }
    debug!(
        "fit: {epochs} epochs, converged {converged}, log-likelihood {:.6}",
        eval.log_likelihood
    );
    Ok(FitOutcome {
        model: EmbeddingModel::new(n, dim, coords, gamma, beta)?,
        epochs,
        converged,
        likelihood_trace: trace,
    })
}
