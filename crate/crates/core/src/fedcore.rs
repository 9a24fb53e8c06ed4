//! Federated learning on synthetic Gaussian-blob tasks with a multinomial
//! logistic-regression model.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{TaskConfig, Tier};
use crate::error::{Error, Result};
use crate::quantizer::{dequantize, QuantizedVec};
use crate::rng::{rng_stream, Rng};

/// Labelled samples stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub classes: usize,
    pub feature_dim: usize,
    pub tier: Tier,
    pub train: Dataset,
    pub test: Dataset,
}

fn sample_blobs(means: &[f64], classes: usize, dim: usize, count: usize, rng: &mut Rng) -> Dataset {
    let mut features = Vec::with_capacity(count * dim);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let c = rng.random_range(0..classes);
        labels.push(c);
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(rng);
            features.push(means[c * dim + j] + z);
        }
    }
    Dataset { features, labels, dim }
}

impl SyntheticTask {
    /// Unit-variance Gaussian clusters around class means drawn with standard
    /// deviation `separation`. Train and test come from separate streams.
    pub fn generate(cfg: &TaskConfig, seed: u64, label: &str) -> Self {
        let mut mrng = rng_stream(seed, &format!("{label}/means"));
        let means: Vec<f64> = (0..cfg.classes * cfg.feature_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut mrng);
                cfg.separation * z
            })
            .collect();
        let train = sample_blobs(
            &means,
            cfg.classes,
            cfg.feature_dim,
            cfg.train_size,
            &mut rng_stream(seed, &format!("{label}/train")),
        );
        let test = sample_blobs(
            &means,
            cfg.classes,
            cfg.feature_dim,
            cfg.test_size,
            &mut rng_stream(seed, &format!("{label}/test")),
        );
        SyntheticTask { classes: cfg.classes, feature_dim: cfg.feature_dim, tier: cfg.tier, train, test }
    }

    /// Parameter count `classes * (feature_dim + 1)`.
    pub fn model_dim(&self) -> usize {
        self.classes * (self.feature_dim + 1)
    }
}

/// Indices of one client's training samples and its aggregation weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client: usize,
    pub samples: Vec<usize>,
    pub classes: Vec<usize>,
    pub weight: f64,
}

/// Number of classes each client holds.
pub fn classes_per_client(rho: f64, classes: usize) -> usize {
    ((rho * classes as f64).round() as usize).clamp(1, classes)
}

/// Label-skewed split: client `i` holds `k` consecutive classes starting at
/// a random offset plus `i * k`, and each class is dealt evenly among its
/// holders.
pub fn partition(train: &Dataset, classes: usize, clients: usize, rho: f64, rng: &mut Rng) -> Result<Vec<ClientShard>> {
    if clients == 0 {
        return Err(Error::InvalidPartition("no clients".into()));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidPartition(format!("non-IID degree {rho} outside (0, 1]")));
    }
    let k = classes_per_client(rho, classes);
    let offset = rng.random_range(0..classes);
    let held: Vec<Vec<usize>> = (0..clients)
        .map(|i| {
            let mut v: Vec<usize> = (0..k).map(|j| (offset + i * k + j) % classes).collect();
            v.sort_unstable();
            v
        })
        .collect();
    let mut samples = vec![Vec::new(); clients];
    for c in 0..classes {
        let holders: Vec<usize> = (0..clients).filter(|&i| held[i].contains(&c)).collect();
        if holders.is_empty() {
            continue;
        }
        let mut idx: Vec<usize> = (0..train.len()).filter(|&s| train.labels[s] == c).collect();
        idx.shuffle(rng);
        for (pos, s) in idx.into_iter().enumerate() {
            samples[holders[pos % holders.len()]].push(s);
        }
    }
    let total: usize = samples.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::InvalidPartition("no samples assigned".into()));
    }
    Ok(samples
        .into_iter()
        .zip(held)
        .enumerate()
        .map(|(client, (mut s, classes))| {
            s.sort_unstable();
            let weight = s.len() as f64 / total as f64;
            ClientShard { client, samples: s, classes, weight }
        })
        .collect())
}

/// Rescales weights to sum to one.
pub fn renormalize(weights: &[f64]) -> Result<Vec<f64>> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        return Err(Error::ZeroWeight);
    }
    Ok(weights.iter().map(|w| w / sum).collect())
}

/// Logits `W x + b` with parameters laid out as `W` (classes x dim) then `b`.
fn logits(params: &[f64], classes: usize, x: &[f64], out: &mut [f64]) {
    let dim = x.len();
    let (w, b) = params.split_at(classes * dim);
    for c in 0..classes {
        let row = &w[c * dim..(c + 1) * dim];
        out[c] = b[c] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Softmax in place; returns the log-sum-exp.
fn softmax(z: &mut [f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    for v in z.iter_mut() {
        *v = (*v - m).exp() / s;
    }
    m + s.ln()
}

/// Mean cross-entropy gradient over `rows`.
pub fn cross_entropy_grad(params: &[f64], classes: usize, data: &Dataset, rows: &[usize]) -> Vec<f64> {
    let dim = data.dim;
    let mut grad = vec![0.0; params.len()];
    let mut p = vec![0.0; classes];
    let scale = 1.0 / rows.len() as f64;
    for &i in rows {
        let x = data.row(i);
        logits(params, classes, x, &mut p);
        softmax(&mut p);
        p[data.labels[i]] -= 1.0;
        let (gw, gb) = grad.split_at_mut(classes * dim);
        for c in 0..classes {
            let d = p[c] * scale;
            gb[c] += d;
            for (g, xv) in gw[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                *g += d * xv;
            }
        }
    }
    grad
}

/// Runs `steps` mini-batch SGD steps. Batches are drawn without replacement;
/// a batch at least as large as the shard uses the whole shard.
pub fn local_update(
    params: &[f64],
    classes: usize,
    data: &Dataset,
    shard: &ClientShard,
    lr: f64,
    steps: usize,
    batch: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if shard.samples.is_empty() {
        return Err(Error::EmptyShard(shard.client));
    }
    let mut w = params.to_vec();
    for _ in 0..steps {
        let rows: Vec<usize> = if batch >= shard.samples.len() {
            shard.samples.clone()
        } else {
            shard.samples.choose_multiple(rng, batch).copied().collect()
        };
        let g = cross_entropy_grad(&w, classes, data, &rows);
        for (p, gi) in w.iter_mut().zip(&g) {
            *p -= lr * gi;
        }
    }
    Ok(w)
}

/// Weighted sum of dequantized client models; weights are renormalized.
pub fn aggregate(updates: &[(QuantizedVec, f64)]) -> Result<Vec<f64>> {
    let first = updates.first().ok_or(Error::NothingToAggregate)?;
    let weights = renormalize(&updates.iter().map(|u| u.1).collect::<Vec<_>>())?;
    let dim = first.0.dim();
    let mut out = vec![0.0; dim];
    for ((qv, _), w) in updates.iter().zip(weights) {
        if qv.dim() != dim {
            return Err(Error::ShapeMismatch { expected: dim, got: qv.dim() });
        }
        for (o, v) in out.iter_mut().zip(dequantize(qv)) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Top-1 accuracy and mean cross-entropy.
pub fn evaluate(params: &[f64], classes: usize, test: &Dataset) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut z = vec![0.0; classes];
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..test.len() {
        logits(params, classes, test.row(i), &mut z);
        let mut best = 0;
        for c in 1..classes {
            if z[c] > z[best] {
                best = c;
            }
        }
        correct += usize::from(best == test.labels[i]);
        let lse = {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        };
        loss += lse - z[test.labels[i]];
    }
    let n = test.len() as f64;
    Ok((correct as f64 / n, (loss / n).max(0.0)))
}

/// Indices of the `n` clients with the largest shards, ties to lower index.
pub fn select_clients(shards: &[ClientShard], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..shards.len()).collect();
    order.sort_by(|&a, &b| shards[b].samples.len().cmp(&shards[a].samples.len()).then(a.cmp(&b)));
    order.truncate(n.min(shards.len()));
    order.sort_unstable();
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::quantize;
    use proptest::prelude::*;

    fn tiny() -> Dataset {
        Dataset {
            features: vec![1.0, 0.0, 0.5, 0.2, -1.0, 0.3, -0.2, -0.8],
            labels: vec![0, 0, 1, 1],
            dim: 2,
        }
    }

    fn shard_all(n: usize) -> ClientShard {
        ClientShard { client: 0, samples: (0..n).collect(), classes: vec![], weight: 1.0 }
    }

    fn task(tier: Tier) -> SyntheticTask {
        SyntheticTask::generate(&TaskConfig::for_tier(tier), 11, "t")
    }

    #[test]
    fn labels_in_range_and_dims() {
        let t = task(Tier::Hard);
        assert!(t.train.labels.iter().all(|&l| l < t.classes));
        assert_eq!(t.train.features.len(), t.train.len() * t.feature_dim);
        assert_eq!(t.model_dim(), 10 * (t.feature_dim + 1));
        assert_ne!(t.train.features[..10], t.test.features[..10]);
    }

    #[test]
    fn class_coverage() {
        let t = task(Tier::Easy);
        for (rho, k) in [(1.0, 10), (0.5, 5), (0.01, 1)] {
            let shards = partition(&t.train, 10, 5, rho, &mut rng_stream(1, "p")).unwrap();
            for s in &shards {
                let mut seen: Vec<usize> = s.samples.iter().map(|&i| t.train.labels[i]).collect();
                seen.sort_unstable();
                seen.dedup();
                assert_eq!(seen.len(), k, "rho {rho}");
                assert_eq!(seen, s.classes);
            }
            let total: f64 = shards.iter().map(|s| s.weight).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!(partition(&t.train, 10, 0, 1.0, &mut rng_stream(1, "p")).is_err());
    }

    #[test]
    fn zero_rate_leaves_params() {
        let p = vec![0.3; 6];
        let out = local_update(&p, 2, &tiny(), &shard_all(4), 0.0, 3, 4, &mut rng_stream(0, "l")).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn one_full_batch_step_matches_oracle() {
        // Independent oracle: per-sample softmax gradient written out longhand.
        let d = tiny();
        let p = vec![0.1, -0.2, 0.3, 0.05, 0.01, -0.02];
        let lr = 0.7;
        let mut g = [0.0; 6];
        for i in 0..4 {
            let x = [d.features[2 * i], d.features[2 * i + 1]];
            let z0 = p[0] * x[0] + p[1] * x[1] + p[4];
            let z1 = p[2] * x[0] + p[3] * x[1] + p[5];
            let p0 = 1.0 / (1.0 + (z1 - z0).exp());
            let p1 = 1.0 - p0;
            let y = d.labels[i];
            let e0 = p0 - if y == 0 { 1.0 } else { 0.0 };
            let e1 = p1 - if y == 1 { 1.0 } else { 0.0 };
            g[0] += e0 * x[0] / 4.0;
            g[1] += e0 * x[1] / 4.0;
            g[2] += e1 * x[0] / 4.0;
            g[3] += e1 * x[1] / 4.0;
            g[4] += e0 / 4.0;
            g[5] += e1 / 4.0;
        }
        let out = local_update(&p, 2, &d, &shard_all(4), lr, 1, 4, &mut rng_stream(0, "l")).unwrap();
        for i in 0..6 {
            assert!((out[i] - (p[i] - lr * g[i])).abs() < 1e-10);
        }
        let empty = ClientShard { client: 3, samples: vec![], classes: vec![], weight: 0.0 };
        assert!(matches!(
            local_update(&p, 2, &d, &empty, lr, 1, 4, &mut rng_stream(0, "l")),
            Err(Error::EmptyShard(3))
        ));
    }

    #[test]
    fn local_update_deterministic() {
        let t = task(Tier::Medium);
        let shard = shard_all(500);
        let p = vec![0.0; t.model_dim()];
        let a = local_update(&p, 10, &t.train, &shard, 0.1, 3, 32, &mut rng_stream(5, "s")).unwrap();
        let b = local_update(&p, 10, &t.train, &shard, 0.1, 3, 32, &mut rng_stream(5, "s")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aggregation_cases() {
        let exact = |v: Vec<f64>| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            QuantizedVec {
                norm,
                signs: v.iter().map(|x| x.signum() as i8 * i8::from(*x != 0.0)).collect(),
                levels: v.iter().map(|x| (x.abs() / norm * 4.0).round() as u32).collect(),
                q: 4,
            }
        };
        let single = exact(vec![3.0, 4.0]);
        assert_eq!(aggregate(&[(single.clone(), 1.0)]).unwrap(), dequantize(&single));
        let zero = QuantizedVec { norm: 0.0, signs: vec![0], levels: vec![0], q: 4 };
        let four = QuantizedVec { norm: 4.0, signs: vec![1], levels: vec![4], q: 4 };
        assert_eq!(aggregate(&[(zero, 0.25), (four.clone(), 0.75)]).unwrap(), vec![3.0]);
        assert_eq!(aggregate(&[(four.clone(), 1.0), (four.clone(), 3.0)]).unwrap(), vec![4.0]);
        assert!(matches!(aggregate(&[]), Err(Error::NothingToAggregate)));
        assert!(matches!(aggregate(&[(four, 0.0)]), Err(Error::ZeroWeight)));
    }

    #[test]
    fn uniform_predictor_loss_is_log_classes() {
        let t = task(Tier::Medium);
        let (_, loss) = evaluate(&vec![0.0; t.model_dim()], 10, &t.test).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-9);
        assert!(evaluate(&[0.0; 6], 2, &Dataset { features: vec![], labels: vec![], dim: 2 }).is_err());
    }

    #[test]
    fn untrained_binary_accuracy_near_half() {
        let mut rng = rng_stream(9, "bin");
        let n = 4000;
        let data = Dataset {
            features: (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect(),
            labels: (0..n).map(|_| rng.random_range(0..2)).collect(),
            dim: 2,
        };
        let (acc, _) = evaluate(&[0.0; 6], 2, &data).unwrap();
        assert!((acc - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
    }

    #[test]
    fn memorized_single_sample() {
        let data = Dataset { features: vec![1.0, 0.0], labels: vec![1], dim: 2 };
        let (acc, loss) = evaluate(&[0.0, 0.0, 5.0, 0.0, 0.0, 0.0], 2, &data).unwrap();
        assert_eq!(acc, 1.0);
        assert!(loss >= 0.0);
    }

    #[test]
    fn quantized_fedavg_learns_easy_task() {
        let t = task(Tier::Easy);
        let shards = partition(&t.train, 10, 5, 1.0, &mut rng_stream(2, "p")).unwrap();
        let mut w = vec![0.0; t.model_dim()];
        let mut rng = rng_stream(2, "train");
        for _ in 0..30 {
            let ups: Vec<(QuantizedVec, f64)> = shards
                .iter()
                .map(|s| {
                    let local = local_update(&w, 10, &t.train, s, 0.1, 3, 64, &mut rng).unwrap();
                    (quantize(&local, 32, &mut rng).unwrap(), s.weight)
                })
                .collect();
            w = aggregate(&ups).unwrap();
        }
        let (acc, _) = evaluate(&w, 10, &t.test).unwrap();
        assert!(acc > 0.9, "{acc}");
    }

    #[test]
    fn selection_prefers_large_shards() {
        let mk = |client, n| ClientShard { client, samples: (0..n).collect(), classes: vec![], weight: 0.0 };
        let shards = vec![mk(0, 5), mk(1, 9), mk(2, 9), mk(3, 1)];
        assert_eq!(select_clients(&shards, 2), vec![1, 2]);
        assert_eq!(select_clients(&shards, 3), vec![0, 1, 2]);
        assert_eq!(select_clients(&shards, 10).len(), 4);
    }

    proptest! {
        #[test]
        fn renormalized_subset_sums_to_one(w in prop::collection::vec(1e-6f64..10.0, 1..10)) {
            let r = renormalize(&w).unwrap();
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn aggregation_permutation_invariant(seed in any::<u64>(), perm_seed in any::<u64>()) {
            let mut rng = rng_stream(seed, "agg");
            let ups: Vec<(QuantizedVec, f64)> = (0..4)
                .map(|_| {
                    let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                    (quantize(&v, 8, &mut rng).unwrap(), rng.random_range(0.1..1.0))
                })
                .collect();
            let mut shuffled = ups.clone();
            shuffled.shuffle(&mut rng_stream(perm_seed, "perm"));
            let a = aggregate(&ups).unwrap();
            let b = aggregate(&shuffled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
