//! Per-class Dirichlet label-skew partitioning.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardSet {
    /// Sorted indices into the parent dataset, one list per client.
    pub shards: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

impl ShardSet {
    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    /// Class histogram of every shard.
    pub fn histogram(&self, labels: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
        self.shards
            .iter()
            .map(|s| {
                let mut h = vec![0; n_classes];
                for &i in s {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Mean over shards of the fraction taken by each shard's most common class.
    pub fn mean_majority_fraction(&self, labels: &[usize], n_classes: usize) -> f64 {
        let hist = self.histogram(labels, n_classes);
        let fracs: Vec<f64> = hist
            .iter()
            .filter(|h| h.iter().sum::<usize>() > 0)
            .map(|h| *h.iter().max().unwrap() as f64 / h.iter().sum::<usize>() as f64)
            .collect();
        fracs.iter().sum::<f64>() / fracs.len() as f64
    }
}

/// Partition every sample of `dataset` across `n_clients`.
pub fn dirichlet_partition(dataset: &Dataset, n_clients: usize, alpha: f64, seed: u64) -> Result<ShardSet> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    partition_indices(&dataset.labels, dataset.n_classes, &all, n_clients, alpha, seed)
}

/// Partition the samples listed in `subset`.
///
/// For each class, client proportions are drawn from `Dirichlet(alpha * 1)`;
/// the class's shuffled indices are split by largest-remainder rounding of
/// those proportions. Clients already holding at least `len / n_clients`
/// samples get no share of later classes (unless every client is that full).
/// Any shard left empty then takes one sample from the current largest shard.
pub fn partition_indices(
    labels: &[usize],
    n_classes: usize,
    subset: &[usize],
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<ShardSet> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Input(format!("alpha must be positive, got {alpha}")));
    }
    if n_clients == 0 {
        return Err(Error::Input("need at least one client".into()));
    }
    if n_clients > subset.len() {
        return Err(Error::Input(format!(
            "{n_clients} clients but only {} samples",
            subset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = vec![Vec::new(); n_classes];
    for &i in subset {
        by_class[labels[i]].push(i);
    }

    let mut shards = vec![Vec::new(); n_clients];
    for mut members in by_class {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let open: Vec<bool> = shards.iter().map(|s| s.len() * n_clients < subset.len()).collect();
        let open = if open.iter().any(|&o| o) { open } else { vec![true; n_clients] };
        let props = sample_dirichlet(&mut rng, alpha, &open);
        let counts = largest_remainder(&props, members.len());
        let mut start = 0;
        for (shard, c) in shards.iter_mut().zip(counts) {
            shard.extend_from_slice(&members[start..start + c]);
            start += c;
        }
    }

    repair_empty(&mut shards);
    shards.iter_mut().for_each(|s| s.sort_unstable());
    Ok(ShardSet { shards, alpha, seed })
}

/// Draw from a symmetric Dirichlet in log space so that tiny `alpha` does not
/// underflow every component to zero.
///
/// Uses `Gamma(a) = Gamma(a + 1) * U^(1/a)`. Every component is drawn; the
/// closed ones are then zeroed and the rest renormalized.
fn sample_dirichlet(rng: &mut ChaCha8Rng, alpha: f64, open: &[bool]) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).unwrap();
    let logs: Vec<f64> = open
        .iter()
        .map(|&o| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>();
            if o {
                g.ln() + u.ln() / alpha
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Integer counts summing to `total`, proportional to `props`. Leftover units
/// go to the largest fractional parts, ties to the lower index.
pub(crate) fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn repair_empty(shards: &mut [Vec<usize>]) {
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..shards.len())
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .unwrap();
        let moved = shards[largest].pop().unwrap();
        shards[empty].push(moved);
    }
}

/// Seeded split of `0..n` into a holdout of `round(fraction * n)` indices and
/// the rest. Both lists are sorted.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Input(format!("holdout fraction {fraction} not in [0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = (fraction * n as f64).round() as usize;
    let mut hold = idx[..k].to_vec();
    let mut rest = idx[k..].to_vec();
    hold.sort_unstable();
    rest.sort_unstable();
    Ok((hold, rest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(per_class: usize, k: usize) -> Vec<usize> {
        (0..per_class * k).map(|i| i % k).collect()
    }

    #[test]
    fn single_client_gets_everything() {
        let y = labels(5, 3);
        let all: Vec<usize> = (0..y.len()).collect();
        let s = partition_indices(&y, 3, &all, 1, 0.5, 1).unwrap();
        assert_eq!(s.shards, vec![all]);
    }

    #[test]
    fn largest_remainder_conserves() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.2, 0.3, 0.5], 10), vec![2, 3, 5]);
        let c = largest_remainder(&[0.333, 0.333, 0.334], 7);
        assert_eq!(c.iter().sum::<usize>(), 7);
    }

    #[test]
    fn tiny_alpha_does_not_produce_nan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = sample_dirichlet(&mut rng, 0.005, &[true; 8]);
            assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_clients_get_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let open = [true, false, true, false];
        for _ in 0..50 {
            let p = sample_dirichlet(&mut rng, 0.01, &open);
            assert_eq!((p[1], p[3]), (0.0, 0.0));
            assert!((p[0] + p[2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_clients_stop_receiving_classes() {
        // four equal classes, tiny alpha: each client ends up with one class
        let y = labels(25, 4);
        let all: Vec<usize> = (0..y.len()).collect();
        let s = partition_indices(&y, 4, &all, 4, 1e-4, 3).unwrap();
        let full_single = s
            .histogram(&y, 4)
            .iter()
            .filter(|h| h.iter().filter(|&&c| c > 0).count() == 1)
            .count();
        assert!(full_single >= 2, "{:?}", s.histogram(&y, 4));
    }

    #[test]
    fn errors() {
        let y = labels(1, 2);
        assert!(partition_indices(&y, 2, &[0, 1], 3, 1.0, 0).is_err());
        assert!(partition_indices(&y, 2, &[0, 1], 2, 0.0, 0).is_err());
        assert!(partition_indices(&y, 2, &[0, 1], 0, 1.0, 0).is_err());
    }

    #[test]
    fn empty_shards_are_repaired() {
        // one class, eight clients, tiny alpha: nearly everything lands on one shard
        let y = vec![0; 40];
        let all: Vec<usize> = (0..40).collect();
        let s = partition_indices(&y, 1, &all, 8, 0.005, 11).unwrap();
        assert!(s.shards.iter().all(|sh| !sh.is_empty()));
        assert_eq!(s.sizes().iter().sum::<usize>(), 40);
    }

    #[test]
    fn holdout_is_disjoint() {
        let (h, r) = holdout_split(50, 0.1, 4).unwrap();
        assert_eq!(h.len(), 5);
        assert_eq!(r.len(), 45);
        assert!(h.iter().all(|i| !r.contains(i)));
    }
}
