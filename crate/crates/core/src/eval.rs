//! Segmentation metrics, PR curves, patient-level cross-validation, and
//! the fusion-strategy ablation harness.
//!
//! Scalar metrics are macro-averaged (per sample, then per fold); PR curves
//! pool confusion counts across a test set before dividing. The documented
//! binarization rule is `prob >= threshold → foreground`.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{normalize_ct, normalize_pet, Dataset, Image, Mask, Sample};
use crate::error::{Error, Result};
use crate::model::{build_variant, Model, ModelConfig, Variant};
use crate::seeding::mix_seed;
use crate::train::{train, AdamState, TrainConfig};

// ── Confusion counts and scalar metrics ──────────────────────────────────

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }

    /// Empty-denominator convention shared by all four metrics: when the
    /// denominator is zero the condition is vacuously satisfied, so return 1.
    fn ratio(num: u64, den: u64) -> f64 {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn dsc(&self) -> f64 {
        Self::ratio(
            2 * self.true_pos,
            2 * self.true_pos + self.false_pos + self.false_neg,
        )
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.true_pos, self.true_pos + self.false_pos)
    }

    pub fn sensitivity(&self) -> f64 {
        Self::ratio(self.true_pos, self.true_pos + self.false_neg)
    }

    pub fn specificity(&self) -> f64 {
        Self::ratio(self.true_neg, self.true_neg + self.false_pos)
    }
}

/// Per-pixel confusion counting of a predicted mask against ground truth.
pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(Error::arg(format!(
            "mask shapes disagree: {}x{} vs {}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        match (p, g) {
            (1, 1) => c.true_pos += 1,
            (1, 0) => c.false_pos += 1,
            (0, 1) => c.false_neg += 1,
            (0, 0) => c.true_neg += 1,
            _ => return Err(Error::arg("masks must be binary".to_string())),
        }
    }
    Ok(c)
}

/// Binarize a probability map: `prob >= threshold` is foreground.
pub fn binarize(prob: &Image, threshold: f64) -> Mask {
    Mask {
        h: prob.h,
        w: prob.w,
        data: prob
            .data
            .iter()
            .map(|&v| u8::from(v as f64 >= threshold))
            .collect(),
    }
}

// ── PR curves ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// 0.00, 0.01, …, 1.00.
pub fn default_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

fn check_probabilities(prob: &Image) -> Result<()> {
    if prob.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::arg("probabilities must lie in [0, 1]".to_string()));
    }
    Ok(())
}

/// PR curve of a single probability map.
pub fn pr_curve(prob: &Image, gt: &Mask, thresholds: &[f64]) -> Result<Vec<PrPoint>> {
    pr_curve_pooled(
        std::slice::from_ref(&(prob.clone(), gt.clone())),
        thresholds,
    )
}

/// Micro-averaged PR curve: confusion counts are pooled over all pairs at
/// each threshold before precision/recall are formed.
pub fn pr_curve_pooled(pairs: &[(Image, Mask)], thresholds: &[f64]) -> Result<Vec<PrPoint>> {
    for (prob, gt) in pairs {
        check_probabilities(prob)?;
        if (prob.h, prob.w) != (gt.h, gt.w) {
            return Err(Error::arg(format!(
                "probability map {}x{} vs mask {}x{}",
                prob.h, prob.w, gt.h, gt.w
            )));
        }
    }
    let mut points = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        let mut pooled = ConfusionCounts::default();
        for (prob, gt) in pairs {
            pooled.merge(&confusion(&binarize(prob, tau), gt)?);
        }
        points.push(PrPoint {
            threshold: tau,
            precision: pooled.precision(),
            recall: pooled.sensitivity(),
        });
    }
    Ok(points)
}

// ── Patient-level k-fold ─────────────────────────────────────────────────

/// Partition patients into k folds: every patient lands entirely in one
/// fold, fold sizes differ by at most one, deterministic under the seed.
/// Returns (train_ids, test_ids) per fold, each sorted.
pub fn kfold_split(patient_ids: &[u32], k: usize, seed: u64) -> Result<Vec<(Vec<u32>, Vec<u32>)>> {
    let mut patients: Vec<u32> = patient_ids.to_vec();
    patients.sort_unstable();
    patients.dedup();
    if k == 0 || k > patients.len() {
        return Err(Error::arg(format!(
            "cannot split {} patients into {} folds",
            patients.len(),
            k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xF01D));
    patients.shuffle(&mut rng);
    let n = patients.len();
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut offset = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut test: Vec<u32> = patients[offset..offset + size].to_vec();
        offset += size;
        let mut train: Vec<u32> = patients[..offset - size]
            .iter()
            .chain(patients[offset..].iter())
            .copied()
            .collect();
        test.sort_unstable();
        train.sort_unstable();
        folds.push((train, test));
    }
    Ok(folds)
}

// ── Model evaluation ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct FoldMetrics {
    pub dsc: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub n_samples: usize,
}

impl FoldMetrics {
    fn mean_of(items: &[FoldMetrics]) -> FoldMetrics {
        let n = items.len().max(1) as f64;
        FoldMetrics {
            dsc: items.iter().map(|m| m.dsc).sum::<f64>() / n,
            precision: items.iter().map(|m| m.precision).sum::<f64>() / n,
            sensitivity: items.iter().map(|m| m.sensitivity).sum::<f64>() / n,
            specificity: items.iter().map(|m| m.specificity).sum::<f64>() / n,
            n_samples: items.iter().map(|m| m.n_samples).sum(),
        }
    }
}

pub struct EvalReport {
    pub metrics: FoldMetrics,
    pub pr: Vec<PrPoint>,
}

/// Metric core over precomputed foreground-probability maps: per-sample
/// scalar metrics macro-averaged, PR micro-averaged over the pool.
pub fn evaluate_prob_maps(probs: &[Image], gts: &[Mask], threshold: f64) -> Result<EvalReport> {
    if probs.is_empty() || probs.len() != gts.len() {
        return Err(Error::arg(format!(
            "evaluation wants matched non-empty maps, got {} and {}",
            probs.len(),
            gts.len()
        )));
    }
    let mut per_sample = Vec::with_capacity(probs.len());
    for (prob, gt) in probs.iter().zip(gts.iter()) {
        check_probabilities(prob)?;
        let c = confusion(&binarize(prob, threshold), gt)?;
        per_sample.push(FoldMetrics {
            dsc: c.dsc(),
            precision: c.precision(),
            sensitivity: c.sensitivity(),
            specificity: c.specificity(),
            n_samples: 1,
        });
    }
    let pairs: Vec<(Image, Mask)> = probs.iter().cloned().zip(gts.iter().cloned()).collect();
    Ok(EvalReport {
        metrics: FoldMetrics::mean_of(&per_sample),
        pr: pr_curve_pooled(&pairs, &default_thresholds())?,
    })
}

/// Foreground-probability map (channel 1) of one preprocessed sample.
pub fn foreground_prob(model: &Model<f32>, sample: &Sample) -> Result<Image> {
    let pet = normalize_pet(&sample.pet)?;
    let ct = normalize_ct(&sample.ct)?;
    let probs = model.forward_probs(&pet, &ct)?;
    let s = probs.shape().to_vec();
    let hw = s[2] * s[3];
    Image::from_vec(s[2], s[3], probs.data()[hw..2 * hw].to_vec())
}

/// Forward every sample, binarize at `threshold` for scalar metrics, sweep
/// thresholds for the pooled PR curve.
pub fn evaluate(model: &Model<f32>, samples: &[Sample], threshold: f64) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::arg("evaluation set is empty".to_string()));
    }
    let mut probs = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for sample in samples {
        probs.push(foreground_prob(model, sample)?);
        gts.push(sample.mask.clone());
    }
    evaluate_prob_maps(&probs, &gts, threshold)
}

// ── Ablation harness ─────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub metrics: FoldMetrics,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub variant: String,
    pub folds: Vec<FoldResult>,
    pub mean: FoldMetrics,
    pub param_count: usize,
    #[serde(skip)]
    pub pr: Vec<PrPoint>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationResult {
    pub variants: Vec<VariantResult>,
    /// Whether mean DSC ordered HCT > EF-TN > LF-TN on this run (present
    /// only when all three were evaluated).
    pub hf_ef_lf_ordering_observed: Option<bool>,
}

/// Train and evaluate each variant under patient-level k-fold
/// cross-validation. Every (variant, fold) gets its own derived init seed;
/// the whole run is deterministic under (configs, seed).
pub fn ablation_run(
    dataset: &Dataset,
    variants: &[Variant],
    base_config: &ModelConfig,
    train_config: &TrainConfig,
    k: usize,
    threshold: f64,
) -> Result<AblationResult> {
    if variants.is_empty() {
        return Err(Error::arg(
            "ablation wants at least one variant".to_string(),
        ));
    }
    let folds = kfold_split(&dataset.meta.patient_ids, k, train_config.seed)?;
    let mut results = Vec::with_capacity(variants.len());
    for (vi, &variant) in variants.iter().enumerate() {
        let mut fold_results = Vec::with_capacity(k);
        let mut pooled_pairs: Vec<(Image, Mask)> = Vec::new();
        let mut param_count = 0;
        for (fi, (train_ids, test_ids)) in folds.iter().enumerate() {
            let train_samples: Vec<Sample> = dataset
                .samples
                .iter()
                .filter(|s| train_ids.contains(&s.patient_id))
                .cloned()
                .collect();
            let test_samples: Vec<Sample> = dataset
                .samples
                .iter()
                .filter(|s| test_ids.contains(&s.patient_id))
                .cloned()
                .collect();
            let config = ModelConfig {
                variant,
                ..base_config.clone()
            };
            let init_seed = mix_seed(train_config.seed, (vi as u64) << 32 | fi as u64);
            let mut model = build_variant::<f32>(&config, init_seed)?;
            param_count = model.param_count();
            let mut opt = AdamState::new(&model.store);
            let fold_train_cfg = TrainConfig {
                seed: mix_seed(train_config.seed, 0xAB1A + ((vi * k + fi) as u64)),
                ..train_config.clone()
            };
            train(
                &mut model,
                &mut opt,
                &train_samples,
                &fold_train_cfg,
                0,
                None,
            )?;
            let report = evaluate(&model, &test_samples, threshold)?;
            for sample in &test_samples {
                pooled_pairs.push((foreground_prob(&model, sample)?, sample.mask.clone()));
            }
            fold_results.push(FoldResult {
                fold: fi,
                metrics: report.metrics,
            });
        }
        let mean =
            FoldMetrics::mean_of(&fold_results.iter().map(|f| f.metrics).collect::<Vec<_>>());
        results.push(VariantResult {
            variant: variant.to_string(),
            folds: fold_results,
            mean,
            param_count,
            pr: pr_curve_pooled(&pooled_pairs, &default_thresholds())?,
        });
    }
    let find = |v: Variant| {
        results
            .iter()
            .find(|r| r.variant == v.to_string())
            .map(|r| r.mean.dsc)
    };
    let ordering = match (find(Variant::Hct), find(Variant::EfTn), find(Variant::LfTn)) {
        (Some(hf), Some(ef), Some(lf)) => Some(hf > ef && ef > lf),
        _ => None,
    };
    Ok(AblationResult {
        variants: results,
        hf_ef_lf_ordering_observed: ordering,
    })
}

// ── Report files ─────────────────────────────────────────────────────────

/// `variant,fold,dsc,precision,sensitivity,specificity` — values in percent.
pub fn metrics_csv(results: &[VariantResult]) -> String {
    let mut out = String::from("variant,fold,dsc,precision,sensitivity,specificity\n");
    for r in results {
        for f in &r.folds {
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.4},{:.4},{:.4}",
                r.variant,
                f.fold,
                f.metrics.dsc * 100.0,
                f.metrics.precision * 100.0,
                f.metrics.sensitivity * 100.0,
                f.metrics.specificity * 100.0
            );
        }
    }
    out
}

/// `threshold,precision,recall`.
pub fn pr_csv(pr: &[PrPoint]) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in pr {
        let _ = writeln!(out, "{:.2},{:.6},{:.6}", p.threshold, p.precision, p.recall);
    }
    out
}

pub fn write_ablation_files(result: &AblationResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics_path = dir.join("metrics.csv");
    std::fs::write(&metrics_path, metrics_csv(&result.variants))
        .map_err(|e| Error::io(&metrics_path, e))?;
    for r in &result.variants {
        let path = dir.join(format!("pr_{}.csv", r.variant));
        std::fs::write(&path, pr_csv(&r.pr)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
