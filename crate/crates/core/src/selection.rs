//! Choosing the number of clusters.
//!
//! Two rules are provided. The KL-ratio rule picks the smallest `K` whose
//! mean optimized projection objective falls below a fraction `ε` of the
//! one-cluster value. The bootstrap rule clusters fitted replicate means of
//! two independent bootstrap resamples with Euclidean K-means, measures how
//! often pairs of original subjects are grouped inconsistently, and picks the
//! smallest `K ≥ 2` whose instability reaches half of the maximum.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ModelSpec;
use crate::error::{Error, Result};
use crate::projection::{project_cluster_nested, ProjectionOptions};
use crate::replicate::ProjectionInputs;
use crate::rng::substream;
use crate::sampler::{fitted_mean_replicate, PosteriorDraw};

/// Default cutoff of the KL-ratio rule.
pub const DEFAULT_EPSILON: f64 = 0.1;
/// Default number of bootstrap pairs.
pub const DEFAULT_BOOTSTRAP_REPS: usize = 100;
/// Default largest `K` considered by the bootstrap rule.
pub const DEFAULT_K_MAX: usize = 30;
/// Upper bound on the number of draws averaged into fitted means.
pub const MAX_FITTED_DRAWS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlCurve {
    pub ks: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstabilityCurve {
    pub ks: Vec<usize>,
    pub values: Vec<f64>,
}

/// `S` indices spread evenly over `0..n_draws`.
pub fn spread_indices(n_draws: usize, s: usize) -> Result<Vec<usize>> {
    if s == 0 || s > n_draws {
        return Err(Error::validation(format!("cannot pick {s} of {n_draws} draws")));
    }
    Ok((0..s).map(|j| j * n_draws / s).collect())
}

/// Mean optimized projection objective over draws for `K = 1..=k_max`, with
/// nested warm starts within each draw.
pub fn kl_curve(inputs: &[ProjectionInputs], k_max: usize, opts: &ProjectionOptions) -> Result<KlCurve> {
    if inputs.is_empty() {
        return Err(Error::validation("kl_curve needs at least one draw"));
    }
    let paths: Vec<Vec<f64>> = inputs
        .par_iter()
        .enumerate()
        .map(|(s, inp)| {
            let path = project_cluster_nested(inp, k_max, &opts.for_draw(s))?;
            Ok(path.into_iter().map(|p| p.objective).collect())
        })
        .collect::<Result<_>>()?;
    let s = paths.len() as f64;
    let values = (0..k_max).map(|k| paths.iter().map(|p| p[k]).sum::<f64>() / s).collect();
    Ok(KlCurve {
        ks: (1..=k_max).collect(),
        values,
    })
}

/// Smallest `K` with `KL_K / KL_1 < epsilon`.
pub fn choose_k_kl(curve: &KlCurve, epsilon: f64) -> Result<usize> {
    let pos = curve
        .ks
        .iter()
        .position(|&k| k == 1)
        .ok_or_else(|| Error::validation("KL curve has no K = 1 entry"))?;
    let kl1 = curve.values[pos];
    if !(kl1 > 0.0) {
        return Err(Error::validation("degenerate data: one-cluster KL objective is zero"));
    }
    if let Some(k) = curve
        .ks
        .iter()
        .zip(&curve.values)
        .filter(|(_, &v)| v / kl1 < epsilon)
        .map(|(&k, _)| k)
        .min()
    {
        return Ok(k);
    }
    let k_max = curve.ks.iter().copied().max().unwrap_or(1);
    log::warn!("no K up to {k_max} reaches KL ratio {epsilon}; returning K = {k_max}");
    Ok(k_max)
}

fn squared_distance(data: &DMatrix<f64>, row: usize, c: &DVector<f64>) -> f64 {
    (0..data.ncols()).map(|j| (data[(row, j)] - c[j]).powi(2)).sum()
}

fn nearest(data: &DMatrix<f64>, row: usize, centroids: &[DVector<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(data, row, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's K-means on the rows of `data` with k-means++ seeding, best of
/// `n_restarts` by within-cluster sum of squares.
pub fn kmeans<R: Rng>(data: &DMatrix<f64>, k: usize, n_restarts: usize, max_iter: usize, rng: &mut R) -> Result<Vec<DVector<f64>>> {
    let n = data.nrows();
    if k == 0 || k > n {
        return Err(Error::validation(format!("K = {k} must lie in 1..={n}")));
    }
    let row = |i: usize| DVector::from_iterator(data.ncols(), data.row(i).iter().copied());
    let mut best: Option<(f64, Vec<DVector<f64>>)> = None;
    for _ in 0..n_restarts.max(1) {
        // k-means++ seeding
        let mut centroids = vec![row(rng.random_range(0..n))];
        let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(data, i, &centroids[0])).collect();
        while centroids.len() < k {
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, &w) in d2.iter().enumerate() {
                    if u < w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            centroids.push(row(pick));
            for (i, d) in d2.iter_mut().enumerate() {
                *d = d.min(squared_distance(data, i, centroids.last().unwrap()));
            }
        }

        let mut labels = vec![usize::MAX; n];
        for _ in 0..max_iter {
            let mut changed = false;
            for i in 0..n {
                let (j, _) = nearest(data, i, &centroids);
                if labels[i] != j {
                    labels[i] = j;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut sums = vec![DVector::zeros(data.ncols()); k];
            let mut counts = vec![0usize; k];
            for i in 0..n {
                sums[labels[i]] += row(i);
                counts[labels[i]] += 1;
            }
            for j in 0..k {
                if counts[j] > 0 {
                    centroids[j] = &sums[j] / counts[j] as f64;
                } else {
                    // reseat at the point farthest from its centroid
                    let far = (0..n)
                        .map(|i| (i, squared_distance(data, i, &centroids[labels[i]])))
                        .max_by(|a, b| a.1.total_cmp(&b.1))
                        .map_or(0, |(i, _)| i);
                    centroids[j] = row(far);
                }
            }
        }
        let wss: f64 = (0..n).map(|i| nearest(data, i, &centroids).1).sum();
        if best.as_ref().is_none_or(|(b, _)| wss < *b) {
            best = Some((wss, centroids));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// Fraction of unordered pairs grouped together by one labeling and apart by
/// the other.
pub fn pair_disagreement(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let mut bad = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[i] == a[j]) != (b[i] == b[j]) {
                bad += 1;
            }
        }
    }
    bad as f64 / (n * (n - 1) / 2) as f64
}

const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 100;

/// Rows of `fitted` in lexicographic order, so results do not depend on the
/// order in which subjects are supplied.
fn canonical_rows(fitted: &DMatrix<f64>) -> DMatrix<f64> {
    let mut order: Vec<usize> = (0..fitted.nrows()).collect();
    order.sort_by(|&a, &b| {
        fitted
            .row(a)
            .iter()
            .zip(fitted.row(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    DMatrix::from_fn(fitted.nrows(), fitted.ncols(), |i, j| fitted[(order[i], j)])
}

fn bootstrap_replicate(data: &DMatrix<f64>, k: usize, seed: u64, rep: usize) -> Result<f64> {
    let n = data.nrows();
    let mut rng = substream(seed, "instability", &[k as u64, rep as u64]);
    let mut labels = Vec::with_capacity(2);
    for _ in 0..2 {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let sample = DMatrix::from_fn(n, data.ncols(), |i, j| data[(idx[i], j)]);
        let centroids = kmeans(&sample, k, KMEANS_RESTARTS, KMEANS_MAX_ITER, &mut rng)?;
        labels.push((0..n).map(|i| nearest(data, i, &centroids).0).collect::<Vec<_>>());
    }
    Ok(pair_disagreement(&labels[0], &labels[1]))
}

/// Bootstrap clustering instability `I_K` of the rows of `fitted`
/// (subjects × time grid).
pub fn instability(fitted: &DMatrix<f64>, k: usize, reps: usize, seed: u64) -> Result<f64> {
    let n = fitted.nrows();
    if k == 0 || k > n {
        return Err(Error::validation(format!("K = {k} must lie in 1..={n}")));
    }
    if reps == 0 {
        return Err(Error::validation("need at least one bootstrap replicate"));
    }
    let data = canonical_rows(fitted);
    let per_rep: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|b| bootstrap_replicate(&data, k, seed, b))
        .collect::<Result<_>>()?;
    Ok(per_rep.iter().sum::<f64>() / reps as f64)
}

/// `I_K` for `K = 2..=k_max` (capped at the number of subjects).
pub fn instability_curve(fitted: &DMatrix<f64>, k_max: usize, reps: usize, seed: u64) -> Result<InstabilityCurve> {
    let k_max = k_max.min(fitted.nrows());
    if k_max < 2 {
        return Err(Error::validation("instability curve needs K_max >= 2 and at least two subjects"));
    }
    let ks: Vec<usize> = (2..=k_max).collect();
    let values = ks
        .iter()
        .map(|&k| instability(fitted, k, reps, seed))
        .collect::<Result<_>>()?;
    Ok(InstabilityCurve { ks, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapChoice {
    pub k: usize,
    /// The curve was identically zero; `k` defaults to 2.
    pub degenerate: bool,
}

/// `min { k : I_k ≥ ½ max_l I_l }` over the curve; `K = 1` is never returned.
pub fn choose_k_bootstrap(curve: &InstabilityCurve) -> Result<BootstrapChoice> {
    if curve.ks.is_empty() || curve.ks.len() != curve.values.len() {
        return Err(Error::validation("instability curve is empty or malformed"));
    }
    if curve.ks.contains(&1) {
        return Err(Error::validation("instability curve must start at K = 2"));
    }
    let max = curve.values.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        log::warn!("instability is zero for every K; defaulting to K = 2");
        return Ok(BootstrapChoice { k: 2, degenerate: true });
    }
    let k = curve
        .ks
        .iter()
        .zip(&curve.values)
        .filter(|(_, &v)| v >= 0.5 * max)
        .map(|(&k, _)| k)
        .min()
        .expect("the maximum itself qualifies");
    Ok(BootstrapChoice { k, degenerate: false })
}

/// Replicate fitted means on a common time grid, averaged over `draws`.
/// Row `i` belongs to subject `i`.
pub fn fitted_mean_matrix(draws: &[&PosteriorDraw], spec: &ModelSpec, times: &[f64]) -> Result<DMatrix<f64>> {
    let first = draws.first().ok_or_else(|| Error::validation("need at least one draw"))?;
    let n = first.b.len();
    let rows: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = DVector::zeros(times.len());
            for d in draws {
                acc += fitted_mean_replicate(d, spec, i, times)?;
            }
            Ok(acc / draws.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(n, times.len(), |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_clouds(n_each: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(2 * n_each, 3, |i, _| {
            let centre = if i < n_each { -5.0 } else { 5.0 };
            centre + rng.random_range(-0.5..0.5)
        })
    }

    #[test]
    fn kl_rule_arithmetic() {
        let geometric = KlCurve {
            ks: (1..=8).collect(),
            values: (1..=8).map(|k| 3.0 * 2f64.powi(1 - k)).collect(),
        };
        assert_eq!(choose_k_kl(&geometric, 0.1).unwrap(), 5);
        assert_eq!(choose_k_kl(&geometric, 1.01).unwrap(), 1);
        let zero = KlCurve {
            ks: vec![1, 2],
            values: vec![0.0, 0.0],
        };
        assert!(choose_k_kl(&zero, 0.1).is_err());
    }

    #[test]
    fn kl_rule_is_monotone_in_epsilon() {
        let curve = KlCurve {
            ks: (1..=6).collect(),
            values: vec![10.0, 6.0, 6.5, 2.0, 0.4, 0.0],
        };
        let mut last = usize::MAX;
        for eps in [0.01, 0.05, 0.1, 0.3, 0.65, 0.7, 1.0, 2.0] {
            let k = choose_k_kl(&curve, eps).unwrap();
            assert!(k <= last);
            last = k;
        }
    }

    #[test]
    fn bootstrap_rule_arithmetic() {
        let curve = InstabilityCurve {
            ks: vec![2, 3, 4, 5],
            values: vec![0.1, 0.4, 0.2, 0.3],
        };
        assert_eq!(choose_k_bootstrap(&curve).unwrap(), BootstrapChoice { k: 3, degenerate: false });
        let rising = InstabilityCurve {
            ks: (2..=10).collect(),
            values: (2..=10).map(|k| k as f64 / 100.0).collect(),
        };
        // half of 0.10 is 0.05, first reached at K = 5
        assert_eq!(choose_k_bootstrap(&rising).unwrap().k, 5);
        let flat = InstabilityCurve {
            ks: vec![2, 3],
            values: vec![0.0, 0.0],
        };
        assert_eq!(choose_k_bootstrap(&flat).unwrap(), BootstrapChoice { k: 2, degenerate: true });
    }

    #[test]
    fn separated_clouds_are_stable() {
        let data = two_clouds(15, 1);
        let i2 = instability(&data, 2, 100, 3).unwrap();
        assert!(i2 < 0.05, "I_2 = {i2}");
    }

    #[test]
    fn duplicated_points_have_zero_instability() {
        let mut data = DMatrix::zeros(10, 2);
        for i in 5..10 {
            data[(i, 0)] = 1.0;
            data[(i, 1)] = 1.0;
        }
        // with only two distinct rows every bootstrap K = 2 clustering that
        // sees both rows splits them identically
        let i2 = instability(&data, 2, 20, 1).unwrap();
        assert!(i2 < 0.05);
        let i1 = instability(&data, 1, 5, 1).unwrap();
        assert_eq!(i1, 0.0);
    }

    #[test]
    fn instability_is_bounded_and_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = DMatrix::from_fn(20, 4, |_, _| rng.random_range(-1.0..1.0));
        let mut rev = data.clone();
        for i in 0..20 {
            rev.set_row(i, &data.row(19 - i));
        }
        for k in [2, 3, 5] {
            let a = instability(&data, k, 10, 2).unwrap();
            assert!((0.0..=1.0).contains(&a));
            assert_eq!(a, instability(&rev, k, 10, 2).unwrap());
        }
        assert!(instability(&data, 21, 10, 2).is_err());
    }

    #[test]
    fn pair_disagreement_counts() {
        assert_eq!(pair_disagreement(&[0, 0, 1], &[5, 5, 7]), 0.0);
        // pairs: (0,1) together/apart, (0,2) apart/apart, (1,2) apart/together
        assert!((pair_disagreement(&[0, 0, 1], &[0, 1, 1]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn spread_indices_cover_range() {
        assert_eq!(spread_indices(10, 5).unwrap(), vec![0, 2, 4, 6, 8]);
        assert_eq!(spread_indices(3, 3).unwrap(), vec![0, 1, 2]);
        assert!(spread_indices(3, 4).is_err());
    }
}
