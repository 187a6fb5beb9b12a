use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::pairs::ScoredPath;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
}

fn by_bucket(data: &[ScoredPath]) -> BTreeMap<usize, Vec<usize>> {
    let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in data.iter().enumerate() {
        g.entry(d.bucket).or_default().push(i);
    }
    g
}

/// Fraction of same-bucket, non-tied pairs ordered correctly by `scores`
/// (higher score ↔ lower loss). Equal scores count half. NaN if no pairs.
pub fn pair_accuracy(scores: &[f64], data: &[ScoredPath]) -> f64 {
    assert_eq!(scores.len(), data.len());
    let (mut hit, mut n) = (0.0, 0usize);
    for members in by_bucket(data).values() {
        for (x, &i) in members.iter().enumerate() {
            for &j in &members[x + 1..] {
                let dl = data[i].target_loss - data[j].target_loss;
                if dl == 0.0 {
                    continue;
                }
                n += 1;
                let ds = scores[i] - scores[j];
                if ds == 0.0 {
                    hit += 0.5;
                } else if (ds > 0.0) == (dl < 0.0) {
                    hit += 1.0;
                }
            }
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        hit / n as f64
    }
}

/// Per bucket, the `round(r·n)` highest-loss paths are truly weak and the
/// `round(r·n)` lowest-score paths are predicted weak; counts pooled over buckets.
pub fn weak_detection_metrics(scores: &[f64], data: &[ScoredPath], ratio: f64) -> WeakMetrics {
    assert_eq!(scores.len(), data.len());
    let mut truth = vec![false; data.len()];
    let mut pred = vec![false; data.len()];
    for members in by_bucket(data).values() {
        let k = ((members.len() as f64) * ratio).round() as usize;
        let mut by_loss = members.clone();
        by_loss.sort_by(|&a, &b| data[b].target_loss.total_cmp(&data[a].target_loss).then(a.cmp(&b)));
        by_loss[..k].iter().for_each(|&i| truth[i] = true);
        let mut by_score = members.clone();
        by_score.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        by_score[..k].iter().for_each(|&i| pred[i] = true);
    }
    let mut c = [0usize; 4];
    for (t, p) in truth.iter().zip(&pred) {
        c[(*t as usize) * 2 + *p as usize] += 1;
    }
    let [tn, fp, fn_, tp] = c;
    let ratio_or_zero = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    WeakMetrics {
        accuracy: ratio_or_zero(tp + tn, data.len()),
        precision: ratio_or_zero(tp, tp + fp),
        recall: ratio_or_zero(tp, tp + fn_),
        true_pos: tp,
        false_pos: fp,
        false_neg: fn_,
        true_neg: tn,
    }
}
