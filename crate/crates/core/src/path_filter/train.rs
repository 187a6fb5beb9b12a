use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::pair_accuracy;
use super::pairs::{build_pairs, build_pairs_unbounded, pair_loss, Pair, ScoredPath};
use super::{FilterError, PathFilter, CHUNK};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_pairs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    /// Per bucket, per epoch. `None` uses every same-bucket pair.
    pub max_pairs_per_bucket: Option<usize>,
    /// `false` pairs across buckets (ablation).
    pub bucket_bounded_pairs: bool,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_pairs: 256,
            patience: 20,
            val_fraction: 0.2,
            max_pairs_per_bucket: None,
            bucket_bounded_pairs: true,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub stopped_early: bool,
}

/// Bucket-stratified split; returns (train, val) dataset indices, both sorted.
pub fn stratified_split(data: &[ScoredPath], val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in data.iter().enumerate() {
        groups.entry(d.bucket).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for members in groups.values_mut() {
        members.shuffle(rng);
        let k = ((members.len() as f64) * val_fraction).round() as usize;
        let k = k.min(members.len().saturating_sub(2));
        val.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Mean pair loss over `pairs` and its gradient for every parameter tensor.
///
/// Scores are computed chunk-wise without gradient, dL/dscore is formed
/// analytically, then each chunk is replayed on a fresh tape with the
/// surrogate `Σ c_i · score_i`, so peak memory is bounded by one chunk.
pub fn pair_gradients(
    filter: &PathFilter,
    seqs: &[TokenSequence],
    pairs: &[Pair],
) -> Result<(f64, Vec<Tensor>), FilterError> {
    if pairs.is_empty() {
        return Err(FilterError::NoPairs);
    }
    let mut used: Vec<usize> = pairs.iter().flat_map(|p| [p.a, p.b]).collect();
    used.sort_unstable();
    used.dedup();
    let slot: HashMap<usize, usize> = used.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let local: Vec<TokenSequence> = used.iter().map(|&i| seqs[i].clone()).collect();
    let scores = filter.score_sequences(&local)?;

    let inv = 1.0 / pairs.len() as f64;
    let mut coef = vec![0.0; used.len()];
    let mut loss = 0.0;
    for p in pairs {
        let (a, b) = (slot[&p.a], slot[&p.b]);
        let s = p.s as f64;
        let m = (1.0 - s * (scores[a] - scores[b])).max(0.0);
        loss += m * m;
        coef[a] -= 2.0 * m * s * inv;
        coef[b] += 2.0 * m * s * inv;
    }
    loss *= inv;

    let mut grads: Vec<Tensor> = filter.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for (chunk, c) in local.chunks(CHUNK).zip(coef.chunks(CHUNK)) {
        if c.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mut tape = Tape::new();
        let vars = filter.param_leaves(&mut tape);
        let y = filter.forward(&mut tape, &vars, chunk)?;
        let cv = tape.leaf(Tensor::matrix(c.len(), 1, c.to_vec())?);
        let weighted = tape.mul(y, cv)?;
        let mean = tape.mean(weighted);
        let total = tape.scale(mean, c.len() as f64);
        let g = tape.backward(total)?;
        for (acc, &v) in grads.iter_mut().zip(&vars) {
            if let Some(t) = g.get(v) {
                acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok((loss, grads))
}

/// Mean pair loss straight from scores; no gradient.
pub fn mean_pair_loss(scores: &[f64], pairs: &[Pair]) -> f64 {
    if pairs.is_empty() {
        return f64::NAN;
    }
    pairs.iter().map(|p| pair_loss(scores[p.a], scores[p.b], p.s as f64)).sum::<f64>() / pairs.len() as f64
}

/// Fit `filter` on `data`; leaves the best-validation snapshot in place.
///
/// Can be called repeatedly on the same filter (pretrain, then fine-tune).
pub fn train(filter: &mut PathFilter, data: &[ScoredPath], cfg: &TrainConfig) -> Result<TrainReport, FilterError> {
    if cfg.batch_pairs == 0 || !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(FilterError::Config("batch_pairs must be positive and val_fraction in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seqs = data
        .iter()
        .map(|d| filter.tokenize(&d.path, d.bucket))
        .collect::<Result<Vec<_>, _>>()?;
    let (train_idx, val_idx) = stratified_split(data, cfg.val_fraction, &mut rng);
    let subset = |idx: &[usize]| -> Vec<ScoredPath> { idx.iter().map(|&i| data[i].clone()).collect() };
    let train_data = subset(&train_idx);
    let val_data = subset(&val_idx);
    let train_seqs: Vec<TokenSequence> = train_idx.iter().map(|&i| seqs[i].clone()).collect();
    let val_seqs: Vec<TokenSequence> = val_idx.iter().map(|&i| seqs[i].clone()).collect();

    let make_pairs = |d: &[ScoredPath], cap: Option<usize>, rng: &mut ChaCha8Rng| {
        if cfg.bucket_bounded_pairs {
            build_pairs(d, cap, rng)
        } else {
            build_pairs_unbounded(d, cap, rng)
        }
    };
    let val_pairs = make_pairs(&val_data, None, &mut rng).pairs;
    if make_pairs(&train_data, Some(1), &mut rng.clone()).is_empty() {
        return Err(FilterError::NoPairs);
    }
    if val_pairs.is_empty() {
        log::warn!("validation split has no pairs; selecting on training loss");
    }

    let mut adam = AdamState::new(cfg.adam.clone(), filter.params());
    let mut best = (f64::INFINITY, 0usize, filter.params().to_vec());
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let mut pairs = make_pairs(&train_data, cfg.max_pairs_per_bucket, &mut rng).pairs;
        pairs.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in pairs.chunks(cfg.batch_pairs) {
            let (loss, grads) = pair_gradients(filter, &train_seqs, batch)?;
            sum += loss * batch.len() as f64;
            adam.update(filter.params_mut(), &grads)?;
        }
        let train_loss = sum / pairs.len() as f64;
        let (val_loss, val_accuracy) = if val_pairs.is_empty() {
            (train_loss, f64::NAN)
        } else {
            let scores = filter.score_sequences(&val_seqs)?;
            (mean_pair_loss(&scores, &val_pairs), pair_accuracy(&scores, &val_data))
        };
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} acc {val_accuracy:.4}");
        history.push(EpochStats { epoch, train_loss, val_loss, val_accuracy });
        if val_loss < best.0 {
            best = (val_loss, epoch, filter.params().to_vec());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, snapshot) = best;
    if !history.is_empty() {
        filter.params_mut().clone_from_slice(&snapshot);
    }
    Ok(TrainReport { history, best_epoch, best_val_loss, train_indices: train_idx, val_indices: val_idx, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch_space::SpaceView;
    use crate::cost_model::total_flops;
    use crate::path_filter::tests::small_setup;

    fn dataset(filter: &PathFilter, n: usize, seed: u64) -> Vec<ScoredPath> {
        let view = SpaceView::full(filter.space()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let path = view.sample(&mut rng);
                let flops = total_flops(filter.space(), &path);
                let bucket = filter.buckets().bucket_of(flops).unwrap();
                ScoredPath { bucket, flops, path, target_loss: (i as f64 * 0.618).fract() }
            })
            .collect()
    }

    #[test]
    fn chunked_gradient_matches_single_tape() {
        let (space, buckets, cfg) = small_setup();
        let f = PathFilter::new(&space, &buckets, cfg).unwrap();
        let data = dataset(&f, 150, 2);
        let seqs: Vec<TokenSequence> = data.iter().map(|d| f.tokenize(&d.path, d.bucket).unwrap()).collect();
        let pairs = build_pairs_unbounded(&data, Some(120), &mut ChaCha8Rng::seed_from_u64(0)).pairs;
        let (loss, grads) = pair_gradients(&f, &seqs, &pairs).unwrap();

        // reference: every path on one tape, loss assembled from tape ops
        let mut tape = Tape::new();
        let vars = f.param_leaves(&mut tape);
        let y = f.forward(&mut tape, &vars, &seqs).unwrap();
        let ya = tape.embedding(y, &pairs.iter().map(|p| p.a).collect::<Vec<_>>()).unwrap();
        let yb = tape.embedding(y, &pairs.iter().map(|p| p.b).collect::<Vec<_>>()).unwrap();
        let diff = tape.sub(ya, yb).unwrap();
        let s = tape.leaf(Tensor::matrix(pairs.len(), 1, pairs.iter().map(|p| -(p.s as f64)).collect()).unwrap());
        let m = tape.mul(diff, s).unwrap();
        let m = tape.add_scalar(m, 1.0);
        let m = tape.relu(m);
        let sq = tape.mul(m, m).unwrap();
        let l = tape.mean(sq);
        assert!((tape.value(l).item() - loss).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        for (k, v) in vars.iter().enumerate() {
            let r = g.get_or_zeros(&tape, *v);
            for (a, b) in r.data().iter().zip(grads[k].data()) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{}: {a} vs {b}", f.param_names()[k]);
            }
        }
    }

    #[test]
    fn training_reduces_validation_loss_and_restores_best() {
        let (space, buckets, cfg) = small_setup();
        let mut f = PathFilter::new(&space, &buckets, cfg).unwrap();
        let mut data = dataset(&f, 120, 3);
        for d in &mut data {
            d.target_loss = -(d.flops.ln()) + d.path.blocks[0].width;
        }
        let tc = TrainConfig { epochs: 15, batch_pairs: 64, adam: AdamConfig { lr: 3e-3, ..Default::default() }, ..Default::default() };
        let report = train(&mut f, &data, &tc).unwrap();
        assert!(report.history.len() <= 15);
        assert!(report.best_val_loss <= report.history[0].val_loss);
        let val: Vec<ScoredPath> = report.val_indices.iter().map(|&i| data[i].clone()).collect();
        let pairs = build_pairs(&val, None, &mut ChaCha8Rng::seed_from_u64(0)).pairs;
        let scores = f.score_paths(&val.iter().map(|d| d.path.clone()).collect::<Vec<_>>()).unwrap();
        assert!((mean_pair_loss(&scores, &pairs) - report.best_val_loss).abs() < 1e-12);
    }

    #[test]
    fn single_path_dataset_errors() {
        let (space, buckets, cfg) = small_setup();
        let mut f = PathFilter::new(&space, &buckets, cfg).unwrap();
        let data = dataset(&f, 1, 0);
        assert!(matches!(train(&mut f, &data, &TrainConfig::default()), Err(FilterError::NoPairs)));
    }

    #[test]
    fn split_is_stratified() {
        let (space, buckets, cfg) = small_setup();
        let f = PathFilter::new(&space, &buckets, cfg).unwrap();
        let data = dataset(&f, 200, 5);
        let (tr, va) = stratified_split(&data, 0.2, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(tr.len() + va.len(), 200);
        for b in 0..3 {
            let n = data.iter().filter(|d| d.bucket == b).count();
            let v = va.iter().filter(|&&i| data[i].bucket == b).count();
            if n >= 10 {
                assert_eq!(v, ((n as f64) * 0.2).round() as usize);
            }
        }
    }
}
