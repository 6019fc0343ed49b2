//! Client partitioners: IID, label-skewed K-class, and Dirichlet.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    /// Each client holds at most `k` classes, with equal per-class counts.
    KClass { k: usize },
    /// Per-client class proportions drawn from `Dir(alpha * 1)`.
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub mode: PartitionMode,
    pub num_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn iid(num_clients: usize, seed: u64) -> Self {
        PartitionSpec {
            mode: PartitionMode::Iid,
            num_clients,
            seed,
        }
    }

    pub fn k_class(k: usize, num_clients: usize, seed: u64) -> Self {
        PartitionSpec {
            mode: PartitionMode::KClass { k },
            num_clients,
            seed,
        }
    }

    pub fn dirichlet(alpha: f64, num_clients: usize, seed: u64) -> Self {
        PartitionSpec {
            mode: PartitionMode::Dirichlet { alpha },
            num_clients,
            seed,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), DataError> {
        if self.num_clients == 0 {
            return Err(DataError::Config("num_clients must be >= 1".into()));
        }
        match self.mode {
            PartitionMode::KClass { k } if k == 0 || k > num_classes => Err(DataError::Config(
                format!("k_class k={k} must lie in 1..={num_classes}"),
            )),
            PartitionMode::Dirichlet { alpha } if !(alpha > 0.0 && alpha.is_finite()) => Err(
                DataError::Config(format!("dirichlet alpha must be > 0, got {alpha}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Splits `indices` into `spec.num_clients` disjoint groups covering all of them.
/// `labels` is indexed by the values in `indices`.
pub fn partition(
    indices: &[usize],
    labels: &[usize],
    num_classes: usize,
    spec: &PartitionSpec,
) -> Result<Vec<Vec<usize>>, DataError> {
    spec.validate(num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut groups = match spec.mode {
        PartitionMode::Iid => iid(indices, spec.num_clients, &mut rng),
        PartitionMode::KClass { k } => {
            k_class(indices, labels, num_classes, k, spec.num_clients, &mut rng)?
        }
        PartitionMode::Dirichlet { alpha } => dirichlet(
            indices,
            labels,
            num_classes,
            alpha,
            spec.num_clients,
            &mut rng,
        ),
    };
    for g in &mut groups {
        g.sort_unstable();
    }
    Ok(groups)
}

/// Sizes `n / m`, with the first `n % m` groups one larger.
fn balanced_sizes(n: usize, m: usize) -> Vec<usize> {
    (0..m).map(|i| n / m + usize::from(i < n % m)).collect()
}

fn iid(indices: &[usize], m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let mut rest = order.as_slice();
    balanced_sizes(indices.len(), m)
        .into_iter()
        .map(|s| {
            let (head, tail) = rest.split_at(s);
            rest = tail;
            head.to_vec()
        })
        .collect()
}

fn class_pools(
    indices: &[usize],
    labels: &[usize],
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); num_classes];
    for &i in indices {
        pools[labels[i]].push(i);
    }
    for p in &mut pools {
        p.shuffle(rng);
    }
    pools
}

/// Client `m` takes classes `order[(m*k + j) mod C]` for `j < k`, so every
/// class is assigned equally often (within one). Each class pool is then split
/// evenly over its clients in client-id order, extras going to the lowest ids.
fn k_class(
    indices: &[usize],
    labels: &[usize],
    num_classes: usize,
    k: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>, DataError> {
    let pools = class_pools(indices, labels, num_classes, rng);
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(rng);
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for client in 0..m {
        for j in 0..k {
            holders[order[(client * k + j) % num_classes]].push(client);
        }
    }
    let mut groups = vec![Vec::new(); m];
    for (class, pool) in pools.iter().enumerate() {
        let owners = &holders[class];
        if owners.is_empty() {
            if pool.is_empty() {
                continue;
            }
            return Err(DataError::Partition(format!(
                "class {class} is assigned to no client ({m} clients x {k} classes < {num_classes} classes)"
            )));
        }
        if pool.len() < owners.len() {
            return Err(DataError::Partition(format!(
                "class {class} has {} samples for {} clients",
                pool.len(),
                owners.len()
            )));
        }
        let mut rest = pool.as_slice();
        for (&client, size) in owners.iter().zip(balanced_sizes(pool.len(), owners.len())) {
            let (head, tail) = rest.split_at(size);
            groups[client].extend_from_slice(head);
            rest = tail;
        }
    }
    Ok(groups)
}

/// Proportions from normalized Gamma(alpha) draws; if every draw underflows,
/// all mass goes to one uniformly chosen class.
fn dirichlet_draw(alpha: f64, classes: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut p: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 && total.is_finite() {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        p.iter_mut().for_each(|v| *v = 0.0);
        p[rng.random_range(0..classes)] = 1.0;
    }
    p
}

/// Integer counts summing to `total`, by largest remainder of `p * total`.
fn apportion(p: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|v| v * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut by_remainder: Vec<usize> = (0..p.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let (ra, rb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &c in by_remainder.iter().take(total.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}

/// Balanced client sizes; each client draws its class mix from `Dir(alpha)`
/// and takes samples without replacement, spilling to the largest remaining
/// class pool when a class runs out.
fn dirichlet(
    indices: &[usize],
    labels: &[usize],
    num_classes: usize,
    alpha: f64,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut pools = class_pools(indices, labels, num_classes, rng);
    balanced_sizes(indices.len(), m)
        .into_iter()
        .map(|size| {
            let p = dirichlet_draw(alpha, num_classes, rng);
            let want = apportion(&p, size);
            let mut group = Vec::with_capacity(size);
            for (class, &w) in want.iter().enumerate() {
                let take = w.min(pools[class].len());
                let keep = pools[class].len() - take;
                group.extend(pools[class].drain(keep..));
            }
            while group.len() < size {
                let (largest, _) = pools
                    .iter()
                    .enumerate()
                    .max_by(|(a, x), (b, y)| x.len().cmp(&y.len()).then(b.cmp(a)))
                    .expect("at least one class");
                group.push(pools[largest].pop().expect("sizes sum to the pool total"));
            }
            group
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced_labels(n: usize, c: usize) -> Vec<usize> {
        (0..n).map(|i| i % c).collect()
    }

    #[test]
    fn iid_sizes_for_100_over_7() {
        let idx: Vec<usize> = (0..100).collect();
        let groups = partition(&idx, &balanced_labels(100, 10), 10, &PartitionSpec::iid(7, 1)).unwrap();
        let mut sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![14, 14, 14, 14, 14, 15, 15]);
    }

    #[test]
    fn k_class_limits_labels() {
        let labels = balanced_labels(1000, 10);
        let idx: Vec<usize> = (0..1000).collect();
        let groups = partition(&idx, &labels, 10, &PartitionSpec::k_class(2, 20, 3)).unwrap();
        for g in &groups {
            let mut counts = [0usize; 10];
            g.iter().for_each(|&i| counts[labels[i]] += 1);
            let present: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
            assert!(present.len() <= 2);
            assert!(present.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn k_class_uncovered_class_is_error() {
        let labels = balanced_labels(100, 10);
        let idx: Vec<usize> = (0..100).collect();
        let err = partition(&idx, &labels, 10, &PartitionSpec::k_class(2, 3, 0)).unwrap_err();
        assert!(err.to_string().contains("class"), "{err}");
    }

    #[test]
    fn k_class_starved_class_is_error() {
        // class 0 has a single sample but is held by several clients
        let mut labels = balanced_labels(200, 2);
        labels.iter_mut().skip(1).for_each(|l| *l = 1);
        let idx: Vec<usize> = (0..200).collect();
        let err = partition(&idx, &labels, 2, &PartitionSpec::k_class(1, 4, 0)).unwrap_err();
        assert!(err.to_string().contains("class 0"), "{err}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let idx: Vec<usize> = (0..10).collect();
        let labels = balanced_labels(10, 2);
        assert!(partition(&idx, &labels, 2, &PartitionSpec::k_class(3, 2, 0)).is_err());
        assert!(partition(&idx, &labels, 2, &PartitionSpec::dirichlet(0.0, 2, 0)).is_err());
        assert!(partition(&idx, &labels, 2, &PartitionSpec::iid(0, 0)).is_err());
    }

    #[test]
    fn apportion_sums_exactly() {
        assert_eq!(apportion(&[0.5, 0.25, 0.25], 7).iter().sum::<usize>(), 7);
        assert_eq!(apportion(&[1.0, 0.0], 5), vec![5, 0]);
    }
}
