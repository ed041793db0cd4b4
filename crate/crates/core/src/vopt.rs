//! V-optimality: expected reduction of the bounded prediction variance over
//! the unknown pool when a single pair is queried.
//!
//! Each node's embedding covariance is bounded by the inverse observed
//! information `C_i = (I(x_i) + ridge * Id)^-1`. Observing pair `{i, j}` adds
//! one rank-one term to `I(x_i)`, so the updated covariance follows from the
//! Sherman-Morrison identity and the utility has a closed form.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingModel;
use crate::error::{AlpineError, Result};
use crate::pon::{Pair, PartialNetwork};
use crate::strategy::{SnapshotId, Strategy, UtilityScores};

pub const DEFAULT_RIDGE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoptConfig {
    pub ridge: f64,
    /// Drop the queried pair's own terms from both endpoint sums.
    pub exclude_self_pair: bool,
}

impl Default for VoptConfig {
    fn default() -> Self {
        VoptConfig {
            ridge: DEFAULT_RIDGE,
            exclude_self_pair: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeCovariance {
    pub node: usize,
    pub info: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    pub ridge: f64,
}

fn row_vector(model: &EmbeddingModel, i: usize, j: usize) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_vec(model.difference(i, j))
}

/// Observed information of node `i`:
/// `gamma^2 * sum over observed j of P_ij (1 - P_ij) (x_i - x_j)(x_i - x_j)^T`.
pub fn fisher_information(model: &EmbeddingModel, net: &PartialNetwork, i: usize) -> DMatrix<f64> {
    let d = model.dim();
    let g2 = model.gamma() * model.gamma();
    let mut info = DMatrix::<f64>::zeros(d, d);
    let xi = model.row(i);
    let mut v = vec![0.0; d];
    for (j, _) in net.observed_neighbors(i) {
        let w = g2 * model.link_variance(Pair::new(i, j));
        let xj = model.row(j);
        for k in 0..d {
            v[k] = xi[k] - xj[k];
        }
        // Upper triangle, mirrored below.
        for a in 0..d {
            let wa = w * v[a];
            for b in a..d {
                info[(a, b)] += wa * v[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            info[(a, b)] = info[(b, a)];
        }
    }
    info
}

/// `(info + ridge * Id)^-1`, symmetrized.
pub fn node_covariance(node: usize, info: DMatrix<f64>, ridge: f64) -> Result<NodeCovariance> {
    if !(ridge >= 0.0) {
        return Err(AlpineError::Config(format!("ridge must be >= 0, got {ridge}")));
    }
    let d = info.nrows();
    let regularized = &info + DMatrix::<f64>::identity(d, d) * ridge;
    let inverse = match regularized.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => regularized.try_inverse().ok_or_else(|| {
            AlpineError::Numeric(format!(
                "information matrix of node {node} is singular (ridge {ridge})"
            ))
        })?,
    };
    if inverse.iter().any(|x| !x.is_finite()) {
        return Err(AlpineError::Numeric(format!(
            "covariance of node {node} is not finite (ridge {ridge})"
        )));
    }
    let cov = (&inverse + inverse.transpose()) * 0.5;
    Ok(NodeCovariance {
        node,
        info,
        cov,
        ridge,
    })
}

/// Covariance of `x_i` once `{i, j}` is observed, by Sherman-Morrison:
/// `C - c C v v^T C / (1 + c v^T C v)` with `c = gamma^2 P_ij (1 - P_ij)`, `v = x_i - x_j`.
pub fn updated_covariance(cov_i: &DMatrix<f64>, model: &EmbeddingModel, i: usize, j: usize) -> DMatrix<f64> {
    let pair = Pair::new(i, j);
    let c = model.gamma() * model.gamma() * model.link_variance(pair);
    let v = row_vector(model, i, j);
    let cv = cov_i * &v;
    let denom = 1.0 + c * v.dot(&cv);
    cov_i - (&cv * cv.transpose()) * (c / denom)
}

/// Covariances of every node for one (model, network) snapshot.
#[derive(Clone, Debug)]
pub struct CovarianceSet {
    snapshot: SnapshotId,
    nodes: Vec<NodeCovariance>,
}

impl CovarianceSet {
    pub fn compute(model: &EmbeddingModel, net: &PartialNetwork, ridge: f64) -> Result<Self> {
        if model.node_count() != net.node_count() {
            return Err(AlpineError::Contract(format!(
                "model has {} nodes, network has {}",
                model.node_count(),
                net.node_count()
            )));
        }
        let nodes = (0..net.node_count())
            .into_par_iter()
            .map(|i| node_covariance(i, fisher_information(model, net, i), ridge))
            .collect::<Result<Vec<_>>>()?;
        Ok(CovarianceSet {
            snapshot: SnapshotId::of(model, net),
            nodes,
        })
    }

    pub fn snapshot(&self) -> SnapshotId {
        self.snapshot
    }

    pub fn node(&self, i: usize) -> &NodeCovariance {
        &self.nodes[i]
    }

    pub fn cov(&self, i: usize) -> &DMatrix<f64> {
        &self.nodes[i].cov
    }
}

/// Variance reduction at endpoint `i` from querying `{i, j}`, summed over the
/// given unknown partners `k` of `i`:
/// `gamma^4 w_ij / (1 + gamma^2 w_ij d_jj) * sum_k w_ik^2 d_kj^2`, `w = P(1 - P)`.
fn endpoint_reduction(
    model: &EmbeddingModel,
    cov_i: &DMatrix<f64>,
    i: usize,
    j: usize,
    partners: impl Iterator<Item = usize>,
) -> f64 {
    let g2 = model.gamma() * model.gamma();
    let w_ij = model.link_variance(Pair::new(i, j));
    let v_j = row_vector(model, i, j);
    let y = cov_i * &v_j;
    let d_jj = v_j.dot(&y);
    let factor = g2 * g2 * w_ij / (1.0 + g2 * w_ij * d_jj);
    let sum: f64 = partners
        .map(|k| {
            let w_ik = model.link_variance(Pair::new(i, k));
            let d_kj = row_vector(model, i, k).dot(&y);
            w_ik * w_ik * d_kj * d_kj
        })
        .sum();
    factor * sum
}

/// Closed-form V-optimality utility of one unknown pair.
pub fn vopt_utility(
    model: &EmbeddingModel,
    net: &PartialNetwork,
    covariances: &CovarianceSet,
    pair: Pair,
    exclude_self_pair: bool,
) -> Result<f64> {
    if covariances.snapshot() != SnapshotId::of(model, net) {
        return Err(AlpineError::Contract(
            "covariances were computed for a different model or network".into(),
        ));
    }
    if !net.is_unknown(pair) {
        return Err(AlpineError::Contract(format!("pair {pair} is not unknown")));
    }
    let (i, j) = (pair.i(), pair.j());
    let keep = |skip: usize| move |k: &usize| !(exclude_self_pair && *k == skip);
    let u_i = endpoint_reduction(model, covariances.cov(i), i, j, net.unknown_neighbors(i).filter(keep(j)));
    let u_j = endpoint_reduction(model, covariances.cov(j), j, i, net.unknown_neighbors(j).filter(keep(i)));
    Ok(u_i + u_j)
}

/// Per-node quantities reused by every candidate touching the node.
struct NodeTerms {
    /// `sum_k w_ik^2 (C_i v_k)(C_i v_k)^T` over unknown partners `k`.
    partner_moment: DMatrix<f64>,
}

/// V-optimality utility for every pair in U.
///
/// With `M_i = sum_k w_ik^2 (C_i v_k)(C_i v_k)^T`, the partner sum at endpoint
/// `i` for candidate `j` is `v_j^T M_i v_j`, so after one pass over nodes each
/// candidate costs O(d^2).
pub fn score_all_vopt(model: &EmbeddingModel, net: &PartialNetwork, cfg: &VoptConfig) -> Result<UtilityScores> {
    let covariances = CovarianceSet::compute(model, net, cfg.ridge)?;
    score_all_vopt_with(model, net, &covariances, cfg)
}

pub fn score_all_vopt_with(
    model: &EmbeddingModel,
    net: &PartialNetwork,
    covariances: &CovarianceSet,
    cfg: &VoptConfig,
) -> Result<UtilityScores> {
    let snapshot = SnapshotId::of(model, net);
    if covariances.snapshot() != snapshot {
        return Err(AlpineError::Contract(
            "covariances were computed for a different model or network".into(),
        ));
    }
    let n = net.node_count();
    let d = model.dim();
    let g2 = model.gamma() * model.gamma();

    let terms: Vec<NodeTerms> = (0..n)
        .into_par_iter()
        .map(|i| {
            let cov = covariances.cov(i);
            let mut m = DMatrix::<f64>::zeros(d, d);
            for k in net.unknown_neighbors(i) {
                let w = model.link_variance(Pair::new(i, k));
                let y = cov * row_vector(model, i, k);
                m += (&y * y.transpose()) * (w * w);
            }
            NodeTerms { partner_moment: m }
        })
        .collect();

    let endpoint = |i: usize, j: usize, w_ij: f64| -> f64 {
        let v = row_vector(model, i, j);
        let cov = covariances.cov(i);
        let d_jj = v.dot(&(cov * &v));
        let mut partner_sum = v.dot(&(&terms[i].partner_moment * &v));
        if cfg.exclude_self_pair {
            partner_sum -= w_ij * w_ij * d_jj * d_jj;
        }
        let factor = g2 * g2 * w_ij / (1.0 + g2 * w_ij * d_jj);
        // Cancellation in the self-pair subtraction can go a hair below zero.
        (factor * partner_sum).max(0.0)
    };

    let pool: Vec<Pair> = net.unknown_pairs().collect();
    let scores: Vec<(Pair, f64)> = pool
        .into_par_iter()
        .map(|p| {
            let w = model.link_variance(p);
            (p, endpoint(p.i(), p.j(), w) + endpoint(p.j(), p.i(), w))
        })
        .collect();
    let deg_sum: usize = (0..n).map(|i| net.unknown_degree(i)).sum();
    Ok(UtilityScores {
        strategy: Strategy::VOptimality,
        iteration: 0,
        snapshot,
        complexity: Some(format!(
            "O(n^2 d^2 + sum_i deg_U(i) d^2 + |U| d^2): n={n}, d={d}, sum deg_U={deg_sum}, |U|={}",
            net.unknown_count()
        )),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pon::Observation;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64, n: usize, d: usize, unknown_rate: f64) -> (PartialNetwork, EmbeddingModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        let mut unknown = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(unknown_rate) {
                    unknown.push(Pair::new(i, j));
                } else if rng.gen_bool(0.4) {
                    edges.push(Pair::new(i, j));
                }
            }
        }
        let net = PartialNetwork::from_parts(n, edges, unknown).unwrap();
        let coords = (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let model = EmbeddingModel::new(n, d, coords, rng.gen_range(0.5..2.0), rng.gen_range(-1.0..1.0)).unwrap();
        (net, model)
    }

    /// Definitional route: explicit inverse for C_i^j, explicit quadratic forms.
    fn definitional_utility(model: &EmbeddingModel, net: &PartialNetwork, covs: &CovarianceSet, p: Pair, exclude_self: bool) -> f64 {
        let g = model.gamma();
        let mut total = 0.0;
        for (a, b) in [(p.i(), p.j()), (p.j(), p.i())] {
            let c_a = covs.cov(a);
            let v = row_vector(model, a, b);
            let weight = g * g * model.link_variance(p);
            let updated = (c_a.clone().try_inverse().unwrap() + &v * v.transpose() * weight)
                .try_inverse()
                .unwrap();
            let diff = c_a - updated;
            for k in net.unknown_neighbors(a) {
                if exclude_self && k == b {
                    continue;
                }
                let vk = row_vector(model, a, k);
                let w = g * model.link_variance(Pair::new(a, k));
                total += w * w * vk.dot(&(&diff * &vk));
            }
        }
        total
    }

    fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
        m.clone().symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn single_neighbor_information_is_rank_one() {
        let net = PartialNetwork::from_parts(3, [Pair::new(0, 1)], [Pair::new(0, 2)]).unwrap();
        let model = EmbeddingModel::new(3, 2, vec![0.0, 0.0, 1.0, 2.0, -1.0, 0.5], 1.5, 0.2).unwrap();
        let info = fisher_information(&model, &net, 0);
        let w = 1.5 * 1.5 * model.link_variance(Pair::new(0, 1));
        let v = nalgebra::DVector::from_vec(vec![-1.0, -2.0]);
        let expected = &v * v.transpose() * w;
        assert_relative_eq!(info, expected, epsilon = 1e-14);
        assert_eq!(info.rank(1e-12), 1);
    }

    #[test]
    fn fully_unknown_node_has_zero_information() {
        let net = PartialNetwork::from_parts(3, [Pair::new(1, 2)], [Pair::new(0, 1), Pair::new(0, 2)]).unwrap();
        let (_, model) = random_instance(1, 3, 2, 0.0);
        assert_eq!(fisher_information(&model, &net, 0), DMatrix::zeros(2, 2));
    }

    #[test]
    fn information_matches_loop_oracle() {
        for seed in 0..5 {
            let (net, model) = random_instance(seed, 6, 3, 0.3);
            for i in 0..6 {
                let mut oracle = DMatrix::<f64>::zeros(3, 3);
                for j in 0..6 {
                    if j == i || net.is_unknown(Pair::new(i, j)) {
                        continue;
                    }
                    let d2: f64 = (0..3).map(|k| (model.row(i)[k] - model.row(j)[k]).powi(2)).sum();
                    let p = 1.0 / (1.0 + (-(model.beta() - 0.5 * model.gamma() * d2)).exp());
                    for a in 0..3 {
                        for b in 0..3 {
                            oracle[(a, b)] += model.gamma().powi(2) * p * (1.0 - p)
                                * (model.row(i)[a] - model.row(j)[a])
                                * (model.row(i)[b] - model.row(j)[b]);
                        }
                    }
                }
                let info = fisher_information(&model, &net, i);
                assert_relative_eq!(info, oracle, epsilon = 1e-12);
                assert_eq!(&info, &info.transpose());
                assert!(min_eigenvalue(&info) >= -1e-10);
            }
        }
    }

    #[test]
    fn covariance_examples() {
        let c = node_covariance(0, DMatrix::identity(3, 3), 0.0).unwrap();
        assert_relative_eq!(c.cov, DMatrix::identity(3, 3), epsilon = 1e-15);
        let c = node_covariance(4, DMatrix::zeros(2, 2), 1e-4).unwrap();
        assert_relative_eq!(c.cov, DMatrix::identity(2, 2) * 1e4, max_relative = 1e-12);
        let err = node_covariance(7, DMatrix::zeros(2, 2), 0.0).unwrap_err();
        assert!(err.to_string().contains("node 7"));
    }

    #[test]
    fn covariance_multiplies_back_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let d = rng.gen_range(1..8);
            let a = DMatrix::<f64>::from_fn(d, d + 2, |_, _| rng.gen_range(-1.0..1.0));
            let info = &a * a.transpose();
            let c = node_covariance(0, info.clone(), 1e-4).unwrap();
            let back = (info + DMatrix::identity(d, d) * 1e-4) * &c.cov;
            assert!((back - DMatrix::<f64>::identity(d, d)).amax() < 1e-8);
        }
    }

    #[test]
    fn sherman_morrison_matches_direct_inverse() {
        for seed in 0..10 {
            let (net, model) = random_instance(seed, 5, 2, 0.3);
            let covs = CovarianceSet::compute(&model, &net, 1e-4).unwrap();
            let (i, j) = (0, 3);
            let sm = updated_covariance(covs.cov(i), &model, i, j);
            let v = row_vector(&model, i, j);
            let c = model.gamma().powi(2) * model.link_variance(Pair::new(i, j));
            let direct = (covs.cov(i).clone().try_inverse().unwrap() + &v * v.transpose() * c)
                .try_inverse()
                .unwrap();
            assert!((&sm - &direct).norm() <= 1e-10 * direct.norm());
            assert!(min_eigenvalue(&(covs.cov(i) - &sm)) >= -1e-10);
        }
    }

    #[test]
    fn coincident_or_saturated_pairs_do_not_update() {
        let model = EmbeddingModel::new(2, 2, vec![0.3, 0.3, 0.3, 0.3], 1.0, 0.0).unwrap();
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(updated_covariance(&cov, &model, 0, 1), cov);
        let saturated = EmbeddingModel::new(2, 2, vec![0.0, 0.0, 1.0, 0.0], 1.0, 50.0).unwrap();
        let up = updated_covariance(&cov, &saturated, 0, 1);
        assert!((&up - &cov).amax() < 1e-18);
    }

    #[test]
    fn three_node_scalar_hand_evaluation() {
        // d = 1: every matrix is a scalar, so the definition can be written out directly.
        let net = PartialNetwork::from_parts(3, [Pair::new(0, 2)], [Pair::new(0, 1)]).unwrap();
        let model = EmbeddingModel::new(3, 1, vec![0.0, 1.0, 2.0], 1.0, 0.0).unwrap();
        let ridge = 1e-4;
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let w = |d: f64| sig(-0.5 * d * d) * (1.0 - sig(-0.5 * d * d));
        let c0 = 1.0 / (w(2.0) * 4.0 + ridge);
        let c1 = 1.0 / (w(1.0) * 1.0 + ridge);
        let w01 = w(1.0);
        let c0_new = 1.0 / (1.0 / c0 + w01 * 1.0);
        let c1_new = 1.0 / (1.0 / c1 + w01 * 1.0);
        let expected = w01 * w01 * (c0 - c0_new) + w01 * w01 * (c1 - c1_new);

        let covs = CovarianceSet::compute(&model, &net, ridge).unwrap();
        let u = vopt_utility(&model, &net, &covs, Pair::new(0, 1), false).unwrap();
        assert_relative_eq!(u, expected, max_relative = 1e-12);
        let all = score_all_vopt(&model, &net, &VoptConfig { ridge, exclude_self_pair: false }).unwrap();
        assert_eq!(all.scores.len(), 1);
        assert_relative_eq!(all.scores[0].1, u, max_relative = 1e-12);
    }

    #[test]
    fn zero_update_vector_gives_zero_utility() {
        let net = PartialNetwork::from_parts(2, [], [Pair::new(0, 1)]).unwrap();
        let model = EmbeddingModel::new(2, 2, vec![1.0, 1.0, 1.0, 1.0], 1.0, 0.0).unwrap();
        let covs = CovarianceSet::compute(&model, &net, 1e-4).unwrap();
        assert_eq!(vopt_utility(&model, &net, &covs, Pair::new(0, 1), false).unwrap(), 0.0);
    }

    #[test]
    fn stale_covariances_are_rejected() {
        let (net, model) = random_instance(3, 6, 2, 0.4);
        let covs = CovarianceSet::compute(&model, &net, 1e-4).unwrap();
        let p = net.unknown_pairs().next().unwrap();
        let moved = net.revealed(p, Observation::Connected).unwrap();
        let q = moved.unknown_pairs().next().unwrap();
        assert!(matches!(
            vopt_utility(&model, &moved, &covs, q, false),
            Err(AlpineError::Contract(_))
        ));
    }

    #[test]
    fn closed_form_matches_definition() {
        for seed in 0..20 {
            let n = 4 + (seed as usize % 7);
            let (net, model) = random_instance(seed, n, 1 + seed as usize % 3, 0.35);
            if net.unknown_count() == 0 {
                continue;
            }
            for exclude in [false, true] {
                let cfg = VoptConfig { ridge: 1e-3, exclude_self_pair: exclude };
                let covs = CovarianceSet::compute(&model, &net, cfg.ridge).unwrap();
                let all = score_all_vopt_with(&model, &net, &covs, &cfg).unwrap();
                for &(p, s) in &all.scores {
                    let single = vopt_utility(&model, &net, &covs, p, exclude).unwrap();
                    let def = definitional_utility(&model, &net, &covs, p, exclude);
                    assert!(single >= 0.0);
                    assert!((single - def).abs() <= 1e-9 * def.abs().max(1e-12), "{single} vs {def}");
                    assert!((s - def).abs() <= 1e-9 * def.abs().max(1e-12) + 1e-15, "{s} vs {def}");
                }
            }
        }
    }

    #[test]
    fn ridge_sweep_stays_finite() {
        let (net, model) = random_instance(12, 9, 3, 0.5);
        for ridge in [1e-6, 1e-4, 1e-2] {
            let s = score_all_vopt(&model, &net, &VoptConfig { ridge, exclude_self_pair: false }).unwrap();
            assert!(s.scores.iter().all(|(_, v)| v.is_finite() && *v >= 0.0));
        }
    }
}
