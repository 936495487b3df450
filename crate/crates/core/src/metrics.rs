//! Ranking metrics and expert diagnostics.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::experts::ExpertOutputs;
use crate::linalg::{axpy, cosine_unchecked};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return shape_err(format!("{} scores vs {} labels", scores.len(), labels.len()));
        }
        Ok(Self { scores, labels })
    }

    pub fn push(&mut self, score: f64, label: bool) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn extend(&mut self, scores: &[f64], labels: &[bool]) {
        self.scores.extend_from_slice(scores);
        self.labels.extend_from_slice(labels);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (pos, self.labels.len() - pos)
    }
}

/// Mann–Whitney AUROC with midranks, so tied pairs count one half.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let (pos, neg) = set.counts();
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| set.labels[k]).count();
        rank_sum += mid * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Step-wise average precision: mean of precision at each positive's rank,
/// descending by score, ties kept in input order.
pub fn average_precision(set: &ScoredSet) -> Result<f64> {
    let (pos, _) = set.counts();
    if pos == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if set.labels[k] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

/// Pixel metrics per image, averaged over images where they are defined.
/// Returns `(auroc, ap, images_used)`.
pub fn per_image_pixel_metrics(maps: &[Vec<f64>], masks: &[Vec<bool>]) -> Result<(f64, f64, usize)> {
    if maps.len() != masks.len() {
        return shape_err("map and mask counts differ");
    }
    let (mut roc, mut ap, mut used) = (0.0, 0.0, 0usize);
    for (m, y) in maps.iter().zip(masks) {
        let set = ScoredSet::new(m.clone(), y.clone())?;
        if let (Ok(r), Ok(a)) = (auroc(&set), average_precision(&set)) {
            roc += r;
            ap += a;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("no image has both pixel classes".into()));
    }
    Ok((roc / used as f64, ap / used as f64, used))
}

/// Accumulates mean pairwise cosine between per-image expert features.
///
/// For each image, expert `n`'s feature is the mean of its outputs over the
/// patches whose Top-k set contains `n`. Pairs where either expert was never
/// selected in the image are skipped and counted.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityAccumulator {
    experts: usize,
    sums: Vec<f64>,
    counts: Vec<usize>,
    skipped: Vec<usize>,
}

impl SimilarityAccumulator {
    pub fn new(experts: usize) -> Self {
        Self {
            experts,
            sums: vec![0.0; experts * experts],
            counts: vec![0; experts * experts],
            skipped: vec![0; experts * experts],
        }
    }

    pub fn add_image(&mut self, outputs: &ExpertOutputs, topk: &[Vec<usize>]) -> Result<()> {
        let k = self.experts;
        if outputs.experts() != k || outputs.patches() != topk.len() {
            return shape_err("expert outputs and routing table disagree");
        }
        let d = outputs.dim();
        let mut feats = vec![vec![0.0; d]; k];
        let mut hits = vec![0usize; k];
        for (i, sel) in topk.iter().enumerate() {
            for &n in sel {
                axpy(1.0, outputs.get(i, n), &mut feats[n]);
                hits[n] += 1;
            }
        }
        for (f, &h) in feats.iter_mut().zip(&hits) {
            if h > 0 {
                f.iter_mut().for_each(|v| *v /= h as f64);
            }
        }
        for n in 0..k {
            for m in 0..k {
                if n == m {
                    continue;
                }
                if hits[n] == 0 || hits[m] == 0 {
                    self.skipped[n * k + m] += 1;
                } else {
                    self.sums[n * k + m] += cosine_unchecked(&feats[n], &feats[m], 1e-12);
                    self.counts[n * k + m] += 1;
                }
            }
        }
        Ok(())
    }

    /// `K×K` row-major matrix, unit diagonal; pairs with no data are NaN.
    pub fn matrix(&self) -> Vec<f64> {
        let k = self.experts;
        (0..k * k)
            .map(|idx| {
                if idx / k == idx % k {
                    1.0
                } else if self.counts[idx] == 0 {
                    f64::NAN
                } else {
                    self.sums[idx] / self.counts[idx] as f64
                }
            })
            .collect()
    }

    /// Per-pair count of images excluded because an expert was unused.
    pub fn skipped(&self) -> &[usize] {
        &self.skipped
    }

    /// Mean over defined off-diagonal entries.
    pub fn mean_off_diagonal(&self) -> f64 {
        let k = self.experts;
        let vals: Vec<f64> = self
            .matrix()
            .into_iter()
            .enumerate()
            .filter(|(idx, v)| idx / k != idx % k && v.is_finite())
            .map(|(_, v)| v)
            .collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

/// Top-k selection shares per expert, overall and per class. Every patch
/// contributes `k` selections, so each share vector sums to `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationAccumulator {
    experts: usize,
    counts: Vec<u64>,
    patches: u64,
    per_class: BTreeMap<usize, (Vec<u64>, u64)>,
}

impl UtilizationAccumulator {
    pub fn new(experts: usize) -> Self {
        Self {
            experts,
            counts: vec![0; experts],
            patches: 0,
            per_class: BTreeMap::new(),
        }
    }

    pub fn add_image(&mut self, class_id: usize, topk: &[Vec<usize>]) {
        let entry = self
            .per_class
            .entry(class_id)
            .or_insert_with(|| (vec![0; self.experts], 0));
        for sel in topk {
            for &n in sel {
                self.counts[n] += 1;
                entry.0[n] += 1;
            }
        }
        self.patches += topk.len() as u64;
        entry.1 += topk.len() as u64;
    }

    pub fn shares(&self) -> Vec<f64> {
        shares_of(&self.counts, self.patches)
    }

    pub fn class_shares(&self) -> Vec<(usize, Vec<f64>)> {
        self.per_class
            .iter()
            .map(|(&c, (counts, patches))| (c, shares_of(counts, *patches)))
            .collect()
    }
}

fn shares_of(counts: &[u64], patches: u64) -> Vec<f64> {
    if patches == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / patches as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SeededRng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn set(scores: &[f64], labels: &[u8]) -> ScoredSet {
        ScoredSet::new(scores.to_vec(), labels.iter().map(|&l| l == 1).collect()).unwrap()
    }

    fn brute_auroc(s: &ScoredSet) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s.labels[i] && !s.labels[j] {
                    den += 1.0;
                    if s.scores[i] > s.scores[j] {
                        num += 1.0;
                    } else if s.scores[i] == s.scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    fn brute_ap(s: &ScoredSet) -> f64 {
        // insertion sort keeps equal scores in input order
        let mut ranked: Vec<usize> = Vec::new();
        for i in 0..s.len() {
            let pos = ranked.iter().position(|&r| s.scores[r] < s.scores[i]).unwrap_or(ranked.len());
            ranked.insert(pos, i);
        }
        let positives = s.labels.iter().filter(|&&l| l).count() as f64;
        let mut sum = 0.0;
        for (r, &i) in ranked.iter().enumerate() {
            if s.labels[i] {
                let tp = ranked[..=r].iter().filter(|&&j| s.labels[j]).count() as f64;
                sum += tp / (r + 1) as f64;
            }
        }
        sum / positives
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&set(&[0.9, 0.8, 0.1], &[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(auroc(&set(&[0.2, 0.8], &[1, 0])).unwrap(), 0.0);
        assert_eq!(auroc(&set(&[0.4; 5], &[1, 0, 1, 0, 0])).unwrap(), 0.5);
        assert!(matches!(auroc(&set(&[0.1, 0.2], &[1, 1])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&set(&[0.9, 0.5, 0.1], &[1, 1, 0])).unwrap(), 1.0);
        assert_abs_diff_eq!(average_precision(&set(&[0.9, 0.8, 0.7], &[1, 0, 1])).unwrap(), 5.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(average_precision(&set(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1])).unwrap(), 0.25, epsilon = 1e-15);
        assert!(average_precision(&set(&[0.1], &[0])).is_err());
        // equal scores: the earlier input is ranked first
        assert_eq!(average_precision(&set(&[0.5, 0.5], &[1, 0])).unwrap(), 1.0);
        assert_eq!(average_precision(&set(&[0.5, 0.5], &[0, 1])).unwrap(), 0.5);
    }

    #[test]
    fn oracle_agreement_with_ties() {
        let mut rng = SeededRng::new(17);
        for _ in 0..1000 {
            let n = 2 + rng.below(49);
            let levels = 1 + rng.below(6);
            let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let s = ScoredSet::new(scores, labels).unwrap();
            assert!((auroc(&s).unwrap() - brute_auroc(&s)).abs() <= 1e-12);
            assert!((average_precision(&s).unwrap() - brute_ap(&s)).abs() <= 1e-12);
        }
    }

    #[test]
    fn per_image_pixel_metrics_skip_single_class_images() {
        let maps = vec![vec![0.9, 0.1], vec![0.3, 0.3]];
        let masks = vec![vec![true, false], vec![false, false]];
        let (roc, ap, used) = per_image_pixel_metrics(&maps, &masks).unwrap();
        assert_eq!((roc, ap, used), (1.0, 1.0, 1));
    }

    fn outputs_from(vectors: &[Vec<f64>]) -> ExpertOutputs {
        let d = vectors[0].len();
        ExpertOutputs::from_vec(1, vectors.len(), d, vectors.concat()).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let mut acc = SimilarityAccumulator::new(3);
        acc.add_image(&outputs_from(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]), &[vec![0, 1, 2]]).unwrap();
        let m = acc.matrix();
        assert!(m.iter().all(|v| (v - 1.0).abs() < 1e-12));

        let mut anti = SimilarityAccumulator::new(2);
        anti.add_image(&outputs_from(&[vec![0.3, -1.0], vec![-0.3, 1.0]]), &[vec![0, 1]]).unwrap();
        assert_abs_diff_eq!(anti.matrix()[1], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(anti.mean_off_diagonal(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn similarity_skips_unused_experts() {
        let mut acc = SimilarityAccumulator::new(3);
        acc.add_image(&outputs_from(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]), &[vec![0, 1]]).unwrap();
        assert_eq!(acc.skipped()[2], 1);
        assert_eq!(acc.skipped()[1], 0);
        assert!(acc.matrix()[2].is_nan());
        assert_abs_diff_eq!(acc.matrix()[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn utilization_examples() {
        let mut u = UtilizationAccumulator::new(4);
        // every pair once: uniform use
        let pairs: Vec<Vec<usize>> = vec![vec![0, 1], vec![2, 3], vec![0, 2], vec![1, 3], vec![0, 3], vec![1, 2]];
        u.add_image(7, &pairs);
        for s in u.shares() {
            assert_abs_diff_eq!(s, 0.5, epsilon = 1e-15);
        }
        // collapsed: expert 0 always first
        let mut c = UtilizationAccumulator::new(4);
        c.add_image(1, &[vec![0, 1], vec![0, 2], vec![0, 3], vec![0, 1]]);
        let shares = c.shares();
        assert_abs_diff_eq!(shares[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(shares.iter().sum::<f64>(), 2.0, epsilon = 1e-12);
        assert_eq!(c.class_shares().len(), 1);
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_monotone_map(scores in prop::collection::vec(-5.0f64..5.0, 4..40), seed in 0u64..100) {
            let mut rng = SeededRng::new(seed);
            let mut labels: Vec<bool> = scores.iter().map(|_| rng.bernoulli(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let s = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
            let t = ScoredSet::new(scores.iter().map(|v| v.exp() * 3.0 + 1.0).collect(), labels).unwrap();
            prop_assert!((auroc(&s).unwrap() - auroc(&t).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn utilization_sums_to_k(rows in prop::collection::vec(prop::sample::subsequence(vec![0usize, 1, 2, 3], 2), 1..30)) {
            let mut u = UtilizationAccumulator::new(4);
            u.add_image(0, &rows);
            prop_assert!((u.shares().iter().sum::<f64>() - 2.0).abs() < 1e-12);
        }
    }
}
