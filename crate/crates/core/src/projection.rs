//! KL projection clustering.
//!
//! For one posterior draw, finds labels `z` and `K` shared-effect values
//! `d_1..d_K` minimizing `Σ_i ½ (d_{z_i} − b_iA)ᵀ Q_i⁻¹ (d_{z_i} − b_iA)`.
//! The minimizer alternates precision-weighted centroid updates with
//! nearest-centroid assignment under each subject's own metric. At a fixed
//! point of that alternation, single-subject transfers that strictly lower
//! the objective are applied before alternating again.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::replicate::{kl_term, ProjectionInputs};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionOptions {
    pub max_iter: usize,
    /// Random initializations per call, in addition to any supplied labels.
    pub n_restarts: usize,
    pub seed: u64,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            n_restarts: 10,
            seed: 1,
        }
    }
}

impl ProjectionOptions {
    /// Options for the draw with the given index, with its own seed.
    pub fn for_draw(&self, index: usize) -> Self {
        let mut rng = substream(self.seed, "projection-draw", &[index as u64]);
        Self {
            seed: rng.random(),
            ..self.clone()
        }
    }
}

/// A clustering of the subjects of one draw. Labels are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub labels: Vec<usize>,
    pub centroids: Vec<DVector<f64>>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl Partition {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

fn check_inputs(inputs: &ProjectionInputs) -> Result<()> {
    if inputs.b_a.len() != inputs.qinv.len() {
        return Err(Error::validation("need one metric per shared effect"));
    }
    let dim = inputs.b_a.first().map_or(0, |b| b.len());
    for (b, q) in inputs.b_a.iter().zip(&inputs.qinv) {
        if b.len() != dim || q.nrows() != dim || q.ncols() != dim {
            return Err(Error::validation("inconsistent shared-effect dimensions"));
        }
    }
    Ok(())
}

/// Cluster means `(Σ Q_i⁻¹)⁻¹ Σ Q_i⁻¹ b_iA`; clusters without members keep
/// their entry from `previous` (or fail when `previous` is `None`).
fn update_centroids(
    labels: &[usize],
    k: usize,
    b_a: &[DVector<f64>],
    qinv: &[DMatrix<f64>],
    previous: Option<&[DVector<f64>]>,
) -> Result<Vec<DVector<f64>>> {
    let dim = b_a.first().map_or(0, |b| b.len());
    let mut prec = vec![DMatrix::zeros(dim, dim); k];
    let mut rhs = vec![DVector::zeros(dim); k];
    let mut count = vec![0usize; k];
    for (i, &z) in labels.iter().enumerate() {
        if z >= k {
            return Err(Error::validation(format!("label {z} out of range for K = {k}")));
        }
        prec[z] += &qinv[i];
        rhs[z] += &qinv[i] * &b_a[i];
        count[z] += 1;
    }
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        if count[j] == 0 {
            match previous {
                Some(prev) => out.push(prev[j].clone()),
                None => return Err(Error::validation(format!("cluster {j} has no members"))),
            }
            continue;
        }
        if count[j] == 1 {
            // exact for a single member, even with a singular metric
            let i = labels.iter().position(|&z| z == j).unwrap_or(0);
            out.push(b_a[i].clone());
            continue;
        }
        let chol = linalg::cholesky(&prec[j], "summed cluster precision")?;
        out.push(chol.solve(&rhs[j]));
    }
    Ok(out)
}

/// Precision-weighted generalized means of the clusters in `labels`.
/// Every cluster `0..k` must have at least one member.
pub fn centroid_update(labels: &[usize], k: usize, b_a: &[DVector<f64>], qinv: &[DMatrix<f64>]) -> Result<Vec<DVector<f64>>> {
    if labels.len() != b_a.len() || b_a.len() != qinv.len() {
        return Err(Error::validation("labels, effects and metrics differ in length"));
    }
    update_centroids(labels, k, b_a, qinv, None)
}

fn distance(b: &DVector<f64>, d: &DVector<f64>, q: &DMatrix<f64>) -> f64 {
    linalg::quad_form(q, &(d - b))
}

/// Nearest centroid for every subject under its own metric; ties go to the
/// lowest cluster index.
pub fn assign(b_a: &[DVector<f64>], qinv: &[DMatrix<f64>], centroids: &[DVector<f64>]) -> Vec<usize> {
    b_a.iter()
        .zip(qinv)
        .map(|(b, q)| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.iter().enumerate() {
                let d = distance(b, c, q);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `Σ_i kl_term(b_iA, d_{z_i}, Q_i⁻¹)`.
pub fn objective_kl(b_a: &[DVector<f64>], qinv: &[DMatrix<f64>], labels: &[usize], centroids: &[DVector<f64>]) -> Result<f64> {
    contributions(b_a, qinv, labels, centroids).map(|c| c.iter().sum())
}

fn contributions(b_a: &[DVector<f64>], qinv: &[DMatrix<f64>], labels: &[usize], centroids: &[DVector<f64>]) -> Result<Vec<f64>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let c = centroids
                .get(z)
                .ok_or_else(|| Error::validation(format!("label {z} has no centroid")))?;
            kl_term(&b_a[i], c, &qinv[i])
        })
        .collect()
}

fn cluster_sizes(labels: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k];
    for &z in labels {
        sizes[z] += 1;
    }
    sizes
}

/// Gives every empty cluster one member taken from the largest cluster.
fn fill_empty_initial(labels: &mut [usize], k: usize) {
    let mut sizes = cluster_sizes(labels, k);
    for j in 0..k {
        if sizes[j] > 0 {
            continue;
        }
        let donor = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap_or(0);
        if sizes[donor] < 2 {
            return;
        }
        if let Some(i) = labels.iter().rposition(|&z| z == donor) {
            labels[i] = j;
            sizes[donor] -= 1;
            sizes[j] += 1;
        }
    }
}

/// Reseats each empty cluster at the subject with the largest KL contribution
/// among clusters that can spare a member. Clusters stay empty when every
/// contribution is zero.
fn repair_empty(labels: &mut [usize], k: usize, contrib: &mut [f64]) {
    let mut sizes = cluster_sizes(labels, k);
    for j in 0..k {
        if sizes[j] > 0 {
            continue;
        }
        let mut pick = None;
        let mut best = 0.0;
        for (i, &c) in contrib.iter().enumerate() {
            if c > best && sizes[labels[i]] >= 2 {
                best = c;
                pick = Some(i);
            }
        }
        if let Some(i) = pick {
            sizes[labels[i]] -= 1;
            labels[i] = j;
            sizes[j] += 1;
            contrib[i] = 0.0;
        }
    }
}

/// Sufficient statistics of one cluster: `P = Σ Q_i`, `h = Σ Q_i b_i`,
/// `s = Σ b_iᵀ Q_i b_i`.
#[derive(Clone)]
struct ClusterStats {
    prec: DMatrix<f64>,
    rhs: DVector<f64>,
    ss: f64,
    count: usize,
}

impl ClusterStats {
    fn empty(dim: usize) -> Self {
        Self {
            prec: DMatrix::zeros(dim, dim),
            rhs: DVector::zeros(dim),
            ss: 0.0,
            count: 0,
        }
    }

    fn add(&mut self, b: &DVector<f64>, q: &DMatrix<f64>, sign: f64) {
        let qb = q * b;
        self.prec += q * sign;
        self.rhs += &qb * sign;
        self.ss += sign * b.dot(&qb);
        if sign > 0.0 {
            self.count += 1;
        } else {
            self.count -= 1;
        }
    }

    fn with(&self, b: &DVector<f64>, q: &DMatrix<f64>, sign: f64) -> Self {
        let mut next = self.clone();
        next.add(b, q, sign);
        next
    }

    /// Optimal objective `½ (s − hᵀ P⁻¹ h)`; `None` when `P` is singular.
    fn cost(&self) -> Option<f64> {
        if self.count <= 1 {
            return Some(0.0);
        }
        let chol = self.prec.clone().cholesky()?;
        let v = 0.5 * (self.ss - self.rhs.dot(&chol.solve(&self.rhs)));
        Some(v.max(0.0))
    }
}

/// One sweep of single-subject transfers in subject order, each applied only
/// when it lowers the objective by more than a relative `1e-12`. Returns
/// whether any subject moved.
fn transfer_pass(b_a: &[DVector<f64>], qinv: &[DMatrix<f64>], labels: &mut [usize], k: usize, objective: f64) -> bool {
    let dim = b_a.first().map_or(0, |b| b.len());
    let mut stats = vec![ClusterStats::empty(dim); k];
    for (i, &z) in labels.iter().enumerate() {
        stats[z].add(&b_a[i], &qinv[i], 1.0);
    }
    let mut costs: Vec<Option<f64>> = stats.iter().map(ClusterStats::cost).collect();
    let tol = 1e-12 * objective.max(1.0);
    let mut moved = false;
    for i in 0..labels.len() {
        let j = labels[i];
        if stats[j].count < 2 {
            continue;
        }
        let Some(cost_j) = costs[j] else { continue };
        let removed = stats[j].with(&b_a[i], &qinv[i], -1.0);
        let Some(cost_removed) = removed.cost() else { continue };
        let mut best: Option<(usize, f64, ClusterStats, f64)> = None;
        for l in (0..k).filter(|&l| l != j) {
            let (Some(cost_l), added) = (costs[l], stats[l].with(&b_a[i], &qinv[i], 1.0)) else { continue };
            let Some(cost_added) = added.cost() else { continue };
            let delta = cost_removed - cost_j + cost_added - cost_l;
            if best.as_ref().is_none_or(|b| delta < b.1) {
                best = Some((l, delta, added, cost_added));
            }
        }
        if let Some((l, delta, added, cost_added)) = best {
            if delta < -tol {
                labels[i] = l;
                stats[j] = removed;
                costs[j] = Some(cost_removed);
                stats[l] = added;
                costs[l] = Some(cost_added);
                moved = true;
            }
        }
    }
    moved
}

/// One greedy descent from `init`. Returns the partition together with the
/// objective after every centroid update.
pub fn descend(inputs: &ProjectionInputs, k: usize, init: &[usize], max_iter: usize) -> Result<(Partition, Vec<f64>)> {
    check_inputs(inputs)?;
    let (b_a, qinv) = (&inputs.b_a[..], &inputs.qinv[..]);
    if init.len() != b_a.len() {
        return Err(Error::validation("initial labels have the wrong length"));
    }
    let mut labels = init.to_vec();
    fill_empty_initial(&mut labels, k);
    let first_prev: Vec<DVector<f64>> = {
        // seeds for clusters that could not be filled (only when n < K, which
        // callers reject, or with explicit init labels)
        let dim = b_a.first().map_or(0, |b| b.len());
        vec![DVector::zeros(dim); k]
    };
    let mut centroids = update_centroids(&labels, k, b_a, qinv, Some(&first_prev))?;
    let mut objective = objective_kl(b_a, qinv, &labels, &centroids)?;
    let mut history = vec![objective];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut next = assign(b_a, qinv, &centroids);
        let mut contrib = contributions(b_a, qinv, &next, &centroids)?;
        repair_empty(&mut next, k, &mut contrib);
        if next == labels && !transfer_pass(b_a, qinv, &mut next, k, objective) {
            converged = true;
            break;
        }
        labels = next;
        centroids = update_centroids(&labels, k, b_a, qinv, Some(&centroids))?;
        objective = objective_kl(b_a, qinv, &labels, &centroids)?;
        history.push(objective);
    }
    Ok((
        Partition {
            labels,
            centroids,
            objective,
            iterations,
            converged,
        },
        history,
    ))
}

fn random_labels<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Best-of-restarts projection clustering with `K` clusters.
///
/// Runs [`descend`] from `init` (when given) and from `opts.n_restarts`
/// uniformly random labelings, returning the lowest objective (earliest on
/// ties).
pub fn project_cluster(inputs: &ProjectionInputs, k: usize, init: Option<&[usize]>, opts: &ProjectionOptions) -> Result<Partition> {
    check_inputs(inputs)?;
    let n = inputs.n();
    if k == 0 || k > n {
        return Err(Error::validation(format!("K = {k} must lie in 1..={n}")));
    }
    if init.is_none() && opts.n_restarts == 0 {
        return Err(Error::validation("need initial labels or at least one restart"));
    }
    let mut best: Option<Partition> = None;
    let mut consider = |p: Partition| {
        if best.as_ref().is_none_or(|b| p.objective < b.objective) {
            best = Some(p);
        }
    };
    if let Some(init) = init {
        consider(descend(inputs, k, init, opts.max_iter)?.0);
    }
    for r in 0..opts.n_restarts {
        let mut rng = substream(opts.seed, "projection-restart", &[k as u64, r as u64]);
        let labels = random_labels(n, k, &mut rng);
        consider(descend(inputs, k, &labels, opts.max_iter)?.0);
    }
    Ok(best.expect("at least one run"))
}

/// Solutions for `K = 1..=k_max`, each seeded additionally with the `K − 1`
/// solution plus a new cluster holding its worst-fitting subject, so the
/// optimized objective never increases with `K`.
pub fn project_cluster_nested(inputs: &ProjectionInputs, k_max: usize, opts: &ProjectionOptions) -> Result<Vec<Partition>> {
    check_inputs(inputs)?;
    let n = inputs.n();
    if k_max == 0 || k_max > n {
        return Err(Error::validation(format!("K_max = {k_max} must lie in 1..={n}")));
    }
    let mut out: Vec<Partition> = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let warm = out.last().map(|prev| -> Result<Vec<usize>> {
            let contrib = contributions(&inputs.b_a, &inputs.qinv, &prev.labels, &prev.centroids)?;
            let mut labels = prev.labels.clone();
            let sizes = cluster_sizes(&labels, k - 1);
            let mut pick = None;
            let mut best = 0.0;
            for (i, &c) in contrib.iter().enumerate() {
                if c > best && sizes[labels[i]] >= 2 {
                    best = c;
                    pick = Some(i);
                }
            }
            if let Some(i) = pick {
                labels[i] = k - 1;
            }
            Ok(labels)
        });
        let warm = warm.transpose()?;
        let p = project_cluster(inputs, k, warm.as_deref(), opts)?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_inputs(b: &[f64], w: &[f64]) -> ProjectionInputs {
        ProjectionInputs {
            b_a: b.iter().map(|&v| DVector::from_vec(vec![v])).collect(),
            qinv: w.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect(),
        }
    }

    fn random_inputs(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> ProjectionInputs {
        ProjectionInputs {
            b_a: (0..n).map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-3.0..3.0))).collect(),
            qinv: (0..n)
                .map(|_| {
                    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
                    &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1
                })
                .collect(),
        }
    }

    #[test]
    fn identity_weights_give_arithmetic_means() {
        let inp = scalar_inputs(&[1.0, 3.0, 10.0], &[1.0, 1.0, 1.0]);
        let c = centroid_update(&[0, 0, 1], 2, &inp.b_a, &inp.qinv).unwrap();
        assert!((c[0][0] - 2.0).abs() < 1e-15);
        assert_eq!(c[1][0], 10.0);
    }

    #[test]
    fn weighted_mean_by_hand() {
        let inp = scalar_inputs(&[0.0, 3.0], &[2.0, 1.0]);
        let c = centroid_update(&[0, 0], 1, &inp.b_a, &inp.qinv).unwrap();
        assert!((c[0][0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_cluster_is_an_error_for_centroid_update() {
        let inp = scalar_inputs(&[0.0, 3.0], &[1.0, 1.0]);
        assert!(centroid_update(&[0, 0], 2, &inp.b_a, &inp.qinv).is_err());
    }

    #[test]
    fn assign_rules() {
        let inp = scalar_inputs(&[0.0, 1.0, 2.0], &[1.0, 1.0, 1.0]);
        let cents: Vec<_> = inp.b_a.clone();
        assert_eq!(assign(&inp.b_a, &inp.qinv, &cents), vec![0, 1, 2]);
        assert_eq!(assign(&inp.b_a, &inp.qinv, &cents[..1]), vec![0, 0, 0]);
        // equidistant: subject at 1.0 between centroids 0.0 and 2.0
        let two = vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![2.0])];
        assert_eq!(assign(&inp.b_a[1..2], &inp.qinv[1..2], &two), vec![0]);
    }

    #[test]
    fn k_equal_n_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inp = random_inputs(7, 2, &mut rng);
        let p = project_cluster(&inp, 7, None, &ProjectionOptions::default()).unwrap();
        assert_eq!(p.objective, 0.0);
        let mut sorted = p.labels.clone();
        sorted.sort();
        assert_eq!(sorted, (0..7).collect::<Vec<_>>());
    }

    fn enumerated_two_cluster_optimum(b: &[f64], w: &[f64]) -> f64 {
        let n = b.len();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) - 1 {
            let mut obj = 0.0;
            for side in [0, 1] {
                let m: Vec<usize> = (0..n).filter(|i| (mask >> i & 1) == side).collect();
                let c = m.iter().map(|&i| w[i] * b[i]).sum::<f64>() / m.iter().map(|&i| w[i]).sum::<f64>();
                obj += m.iter().map(|&i| 0.5 * w[i] * (b[i] - c).powi(2)).sum::<f64>();
            }
            best = best.min(obj);
        }
        best
    }

    #[test]
    fn transfers_escape_a_fixed_point_of_the_alternation() {
        let b = [1.670388067855904, -0.9934133142090282, 0.3918058853312585, 0.29784935407512514, -2.8499196923489, -0.47932818410161193];
        let w = [1.3495121539911594, 1.4762504527575877, 5.912403167827935, 2.307000366875094, 3.197381564314698, 3.0794694383414054];
        let inp = scalar_inputs(&b, &w);
        // {b1, b4} against the rest is stable under assignment alone
        let (p, history) = descend(&inp, 2, &[0, 1, 0, 0, 1, 0], 100).unwrap();
        let best = enumerated_two_cluster_optimum(&b, &w);
        assert!((p.objective - best).abs() < 1e-12, "{} vs {best}", p.objective);
        assert!(history.windows(2).all(|h| h[1] <= h[0]));
        assert!(p.converged);
    }

    #[test]
    fn identical_effects_collapse_to_one_cluster() {
        let inp = scalar_inputs(&[0.7; 6], &[1.0, 2.0, 3.0, 1.0, 1.0, 5.0]);
        for k in 1..=4 {
            let p = project_cluster(&inp, k, None, &ProjectionOptions::default()).unwrap();
            assert!(p.objective.abs() < 1e-24);
            assert_eq!(p.k(), k);
            assert!(p.centroids.iter().all(|c| c.iter().all(|v| v.is_finite())));
        }
    }

    #[test]
    fn k_out_of_range() {
        let inp = scalar_inputs(&[0.0, 1.0], &[1.0, 1.0]);
        assert!(project_cluster(&inp, 3, None, &ProjectionOptions::default()).is_err());
        assert!(project_cluster(&inp, 0, None, &ProjectionOptions::default()).is_err());
    }

    #[test]
    fn objective_is_recomputable_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inp = random_inputs(20, 3, &mut rng);
        let opts = ProjectionOptions {
            seed: 42,
            ..ProjectionOptions::default()
        };
        let p = project_cluster(&inp, 4, None, &opts).unwrap();
        let again = objective_kl(&inp.b_a, &inp.qinv, &p.labels, &p.centroids).unwrap();
        assert!((p.objective - again).abs() < 1e-10);
        assert_eq!(p, project_cluster(&inp, 4, None, &opts).unwrap());
        assert!(p.labels.iter().all(|&z| z < 4));
    }

    #[test]
    fn one_cluster_objective_is_the_largest() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inp = random_inputs(12, 2, &mut rng);
        let path = project_cluster_nested(&inp, 12, &ProjectionOptions::default()).unwrap();
        let one = centroid_update(&[0; 12], 1, &inp.b_a, &inp.qinv).unwrap();
        let kl1 = objective_kl(&inp.b_a, &inp.qinv, &[0; 12], &one).unwrap();
        assert!((path[0].objective - kl1).abs() < 1e-12);
        for w in path.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-10);
        }
        assert_eq!(path[11].objective, 0.0);
    }

    proptest! {
        #[test]
        fn descent_is_monotone(seed in 0u64..5000, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inp = random_inputs(15, 2, &mut rng);
            let init = random_labels(15, k, &mut rng);
            let (p, hist) = descend(&inp, k, &init, 100).unwrap();
            for w in hist.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-10);
            }
            prop_assert!(p.centroids.iter().all(|c| c.iter().all(|v| v.is_finite())));
        }

        #[test]
        fn assign_commutes_with_relabeling(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inp = random_inputs(10, 2, &mut rng);
            let cents: Vec<DVector<f64>> = (0..4).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0))).collect();
            let perm = [2usize, 0, 3, 1];
            let permuted: Vec<DVector<f64>> = (0..4).map(|j| cents[perm[j]].clone()).collect();
            let a = assign(&inp.b_a, &inp.qinv, &cents);
            let b = assign(&inp.b_a, &inp.qinv, &permuted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(*x, perm[*y]);
            }
        }
    }
}
