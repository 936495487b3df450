//! Per-class image/pixel metrics and expert diagnostics over a dataset.

use std::collections::BTreeMap;

use crate::error::{shape_err, Result};
use crate::metrics::{auroc, average_precision, per_image_pixel_metrics, ScoredSet, SimilarityAccumulator, UtilizationAccumulator};
use crate::model::Model;
use crate::router::{cv_squared, expert_loads};
use crate::training::Prepared;

/// Scores for one image: per-pixel anomaly probability and image score.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrediction {
    pub pixel_scores: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    /// `None` for the across-class mean row.
    pub class_id: Option<usize>,
    pub image_auroc: f64,
    pub image_ap: f64,
    pub pixel_auroc: f64,
    pub pixel_ap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ClassMetrics>,
    pub mean: ClassMetrics,
}

/// Metrics from precomputed predictions. Pixel metrics pool every pixel of
/// a class unless `per_image_pixel` is set.
pub fn score_predictions(preds: &[ImagePrediction], data: &[Prepared], per_image_pixel: bool) -> Result<EvalReport> {
    if preds.len() != data.len() {
        return shape_err("prediction and sample counts differ");
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        by_class.entry(s.class_id).or_default().push(i);
    }
    let mut rows = Vec::with_capacity(by_class.len());
    for (&class_id, idx) in &by_class {
        let mut image = ScoredSet::default();
        for &i in idx {
            image.push(preds[i].score, data[i].label);
        }
        let (pixel_auroc, pixel_ap) = if per_image_pixel {
            let maps: Vec<Vec<f64>> = idx.iter().map(|&i| preds[i].pixel_scores.clone()).collect();
            let masks: Vec<Vec<bool>> = idx.iter().map(|&i| data[i].mask.clone()).collect();
            let (r, a, _) = per_image_pixel_metrics(&maps, &masks)?;
            (r, a)
        } else {
            let mut pixels = ScoredSet::default();
            for &i in idx {
                pixels.extend(&preds[i].pixel_scores, &data[i].mask);
            }
            (auroc(&pixels)?, average_precision(&pixels)?)
        };
        rows.push(ClassMetrics {
            class_id: Some(class_id),
            image_auroc: auroc(&image)?,
            image_ap: average_precision(&image)?,
            pixel_auroc,
            pixel_ap,
        });
    }
    let n = rows.len() as f64;
    let mean = ClassMetrics {
        class_id: None,
        image_auroc: rows.iter().map(|r| r.image_auroc).sum::<f64>() / n,
        image_ap: rows.iter().map(|r| r.image_ap).sum::<f64>() / n,
        pixel_auroc: rows.iter().map(|r| r.pixel_auroc).sum::<f64>() / n,
        pixel_ap: rows.iter().map(|r| r.pixel_ap).sum::<f64>() / n,
    };
    Ok(EvalReport { rows, mean })
}

pub fn predict_all(model: &Model, data: &[Prepared]) -> Result<Vec<ImagePrediction>> {
    data.iter()
        .map(|s| {
            let fwd = model.predict(&s.features)?;
            Ok(ImagePrediction {
                pixel_scores: fwd.pixel_scores(),
                score: fwd.score.anomaly,
            })
        })
        .collect()
}

pub fn evaluate(model: &Model, data: &[Prepared], per_image_pixel: bool) -> Result<EvalReport> {
    score_predictions(&predict_all(model, data)?, data, per_image_pixel)
}

/// Expert similarity and utilization per level, plus the mean per-image
/// expert-load CV² summed over levels (the balance statistic).
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub similarity: Vec<SimilarityAccumulator>,
    pub utilization: Vec<UtilizationAccumulator>,
    pub load_cv2: f64,
}

impl Diagnostics {
    /// Mean off-diagonal similarity averaged over levels.
    pub fn mean_similarity(&self) -> f64 {
        self.similarity.iter().map(|s| s.mean_off_diagonal()).sum::<f64>() / self.similarity.len() as f64
    }
}

pub fn diagnostics(model: &Model, data: &[Prepared]) -> Result<Diagnostics> {
    let k = model.arch.experts;
    let mut similarity = vec![SimilarityAccumulator::new(k); model.levels.len()];
    let mut utilization = vec![UtilizationAccumulator::new(k); model.levels.len()];
    let mut cv_total = 0.0;
    for s in data {
        let fwd = model.predict(&s.features)?;
        for (l, lvl) in fwd.levels.iter().enumerate() {
            similarity[l].add_image(&lvl.adapt.expert_outputs, &lvl.adapt.routing.topk_indices)?;
            utilization[l].add_image(s.class_id, &lvl.adapt.routing.topk_indices);
            cv_total += cv_squared(&expert_loads(&lvl.adapt.routing.probs), model.arch.eps);
        }
    }
    Ok(Diagnostics {
        similarity,
        utilization,
        load_cv2: cv_total / data.len().max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn sample(class_id: usize, mask: Vec<bool>) -> Prepared {
        Prepared {
            features: vec![Matrix::zeros(1, 1)],
            label: mask.iter().any(|&m| m),
            mask,
            class_id,
        }
    }

    #[test]
    fn oracle_predictions_score_one() {
        let data = vec![
            sample(3, vec![true, false, false, false]),
            sample(3, vec![false; 4]),
            sample(4, vec![false, true, true, false]),
            sample(4, vec![false; 4]),
        ];
        let preds: Vec<ImagePrediction> = data
            .iter()
            .map(|s| ImagePrediction {
                pixel_scores: s.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
                score: if s.label { 1.0 } else { 0.0 },
            })
            .collect();
        for per_image in [false, true] {
            let r = score_predictions(&preds, &data, per_image).unwrap();
            assert_eq!(r.rows.len(), 2);
            for row in r.rows.iter().chain([&r.mean]) {
                assert_eq!(
                    (row.image_auroc, row.image_ap, row.pixel_auroc, row.pixel_ap),
                    (1.0, 1.0, 1.0, 1.0)
                );
            }
        }
    }
}
