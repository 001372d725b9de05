//! Posterior cluster uncertainty and external validation indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pairwise probabilities that two subjects share a cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl CoincidenceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n)
    }

    /// Pairs `i < j` whose probability lies in `(0.5, 0.8]` and above `0.8`.
    pub fn threshold_summary(&self) -> ThresholdSummary {
        let mut weak = 0;
        let mut solid = 0;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let p = self.get(i, j);
                if p > 0.8 {
                    solid += 1;
                } else if p > 0.5 {
                    weak += 1;
                }
            }
        }
        ThresholdSummary {
            n_pairs: self.n * self.n.saturating_sub(1) / 2,
            weak_pairs: weak,
            solid_pairs: solid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub n_pairs: usize,
    /// Pairs with probability in `(0.5, 0.8]`.
    pub weak_pairs: usize,
    /// Pairs with probability above `0.8`.
    pub solid_pairs: usize,
}

/// Empirical co-clustering frequencies over a set of labelings.
pub fn coincidence<L: AsRef<[usize]>>(partitions: &[L]) -> Result<CoincidenceMatrix> {
    let first = partitions
        .first()
        .ok_or_else(|| Error::validation("coincidence needs at least one partition"))?;
    let n = first.as_ref().len();
    let mut counts = vec![0u64; n * n];
    for p in partitions {
        let labels = p.as_ref();
        if labels.len() != n {
            return Err(Error::validation(format!(
                "partition over {} subjects, expected {n}",
                labels.len()
            )));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if labels[i] == labels[j] {
                    counts[i * n + j] += 1;
                }
            }
        }
    }
    let s = partitions.len() as f64;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let p = counts[i * n + j] as f64 / s;
            values[i * n + j] = p;
            values[j * n + i] = p;
        }
    }
    Ok(CoincidenceMatrix { n, values })
}

fn check_pair(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::validation(format!("label lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::validation("need at least two labels"));
    }
    Ok(())
}

/// Proportion of unordered pairs on which two labelings agree.
pub fn rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len();
    let mut agree = 0u64;
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / (n * (n - 1) / 2) as f64)
}

fn choose2(x: u64) -> f64 {
    (x * x.saturating_sub(1) / 2) as f64
}

fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// Hubert–Arabie adjusted Rand index from the contingency table.
///
/// When the index is undefined (both labelings trivial in the same way) it is
/// 1 for identical partitions and 0 otherwise.
pub fn adjusted_rand(a: &[usize], b: &[usize]) -> Result<f64> {
    check_pair(a, b)?;
    let (ca, ka) = compact(a);
    let (cb, kb) = compact(b);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in ca.iter().zip(&cb) {
        table[x * kb + y] += 1;
    }
    let sum_cells: f64 = table.iter().map(|&c| choose2(c)).sum();
    let rows: f64 = (0..ka).map(|r| choose2(table[r * kb..(r + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|c| choose2((0..ka).map(|r| table[r * kb + c]).sum())).sum();
    let total = choose2(a.len() as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        let same = ca == cb;
        log::warn!("adjusted Rand index undefined for these labelings; using {}", u8::from(same));
        return Ok(if same { 1.0 } else { 0.0 });
    }
    Ok((sum_cells - expected) / (max - expected))
}

/// Mean and sample standard deviation of Rand and adjusted Rand indices of
/// many labelings against one reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexReport {
    pub n_partitions: usize,
    pub rand_mean: f64,
    pub rand_sd: f64,
    pub ari_mean: f64,
    pub ari_sd: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn index_report<L: AsRef<[usize]>>(partitions: &[L], truth: &[usize]) -> Result<IndexReport> {
    if partitions.is_empty() {
        return Err(Error::validation("no partitions to evaluate"));
    }
    let rand: Vec<f64> = partitions.iter().map(|p| rand_index(p.as_ref(), truth)).collect::<Result<_>>()?;
    let ari: Vec<f64> = partitions.iter().map(|p| adjusted_rand(p.as_ref(), truth)).collect::<Result<_>>()?;
    let (rand_mean, rand_sd) = mean_sd(&rand);
    let (ari_mean, ari_sd) = mean_sd(&ari);
    Ok(IndexReport {
        n_partitions: partitions.len(),
        rand_mean,
        rand_sd,
        ari_mean,
        ari_sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn coincidence_by_hand() {
        let m = coincidence(&[vec![0, 0, 1], vec![0, 1, 1]]).unwrap();
        assert_eq!(m.get(0, 1), 0.5);
        assert_eq!(m.get(1, 2), 0.5);
        assert_eq!(m.get(0, 2), 0.0);
        assert_eq!(m.get(2, 0), 0.0);
        assert!((0..3).all(|i| m.get(i, i) == 1.0));
        assert!(coincidence(&[vec![0, 0], vec![0, 0, 1]]).is_err());
        let empty: Vec<Vec<usize>> = vec![];
        assert!(coincidence(&empty).is_err());
    }

    #[test]
    fn single_partition_is_indicator() {
        let m = coincidence(&[vec![2, 1, 2, 1]]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let same = [2, 1, 2, 1][i] == [2, 1, 2, 1][j];
                assert_eq!(m.get(i, j), if same { 1.0 } else { 0.0 });
            }
        }
        let s = m.threshold_summary();
        assert_eq!(s, ThresholdSummary { n_pairs: 6, weak_pairs: 0, solid_pairs: 2 });
    }

    #[test]
    fn rand_by_hand() {
        let a = [1, 1, 2, 2];
        let b = [1, 2, 1, 2];
        assert!((rand_index(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((adjusted_rand(&a, &b).unwrap() + 0.5).abs() < 1e-15);
        assert_eq!(rand_index(&a, &a).unwrap(), 1.0);
        assert_eq!(adjusted_rand(&a, &a).unwrap(), 1.0);
        assert_eq!(rand_index(&[0, 0, 0, 0], &[0, 1, 2, 3]).unwrap(), 0.0);
        assert!(rand_index(&a, &b[..3]).is_err());
        assert!(rand_index(&[1], &[1]).is_err());
    }

    #[test]
    fn degenerate_ari() {
        assert_eq!(adjusted_rand(&[0, 0, 0], &[5, 5, 5]).unwrap(), 1.0);
        assert_eq!(adjusted_rand(&[0, 1, 2], &[2, 1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn report_of_perfect_partitions() {
        let truth = [0, 0, 1, 1, 2];
        let r = index_report(&[truth.to_vec(), vec![4, 4, 3, 3, 9]], &truth).unwrap();
        assert_eq!(r.rand_mean, 1.0);
        assert_eq!(r.ari_mean, 1.0);
        assert_eq!(r.rand_sd, 0.0);
    }

    fn relabel(v: &[usize], perm: &[usize]) -> Vec<usize> {
        v.iter().map(|&x| perm[x]).collect()
    }

    proptest! {
        #[test]
        fn indices_are_label_invariant_and_symmetric(
            a in proptest::collection::vec(0usize..4, 12),
            b in proptest::collection::vec(0usize..4, 12),
        ) {
            let perm = [3usize, 0, 2, 1];
            let ri = rand_index(&a, &b).unwrap();
            let ari = adjusted_rand(&a, &b).unwrap();
            prop_assert_eq!(ri, rand_index(&relabel(&a, &perm), &b).unwrap());
            prop_assert_eq!(ri, rand_index(&b, &a).unwrap());
            prop_assert!((ari - adjusted_rand(&a, &relabel(&b, &perm)).unwrap()).abs() < 1e-12);
            prop_assert!((ari - adjusted_rand(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ri));
            prop_assert!(ari <= 1.0 + 1e-12);
            let m1 = coincidence(&[a.clone(), b.clone()]).unwrap();
            let m2 = coincidence(&[relabel(&a, &perm), b.clone()]).unwrap();
            prop_assert_eq!(m1, m2);
        }
    }
}
