use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{variant_dir, variant_tag, ExperimentConfig, ORIGINAL_TAG};
use super::dataset::{ensure_dataset, load_phantom, load_split, DatasetManifest, Split};
use crate::container;
use crate::degrade::Mode;
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_seeds, auroc_of_logits, cohens_kappa, rows_from_csv, rows_to_csv, sensitivity_specificity,
    threshold_predictions, MetricRow, DECISION_THRESHOLD,
};
use crate::phantom::Ellipse;
use crate::triage::cam::{compute_cam, feature_to_input};
use crate::triage::train::hash_json;
use crate::triage::net::sigmoid;
use crate::triage::{read_model, train, write_model, Dataset, TrainConfig, TrainedModel};

pub const REPORT_FORMAT: &str = "ctsim-report/1";

pub fn version_string() -> String {
    format!("ctsim-v{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    Robustness,
    Retrain,
}

impl ReportKind {
    pub fn stem(self) -> &'static str {
        match self {
            ReportKind::Robustness => "robustness",
            ReportKind::Retrain => "retrain",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub dataset_tag: String,
    pub n_seeds: usize,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub kappa_mean: f64,
    pub kappa_std: f64,
    pub sensitivity_mean: f64,
    pub sensitivity_std: f64,
    pub specificity_mean: f64,
    pub specificity_std: f64,
}

impl VariantSummary {
    pub fn from_rows(tag: &str, rows: &[&MetricRow]) -> Result<Self> {
        let col = |f: fn(&MetricRow) -> f64| aggregate_seeds(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (auroc_mean, auroc_std) = col(|r| r.auroc)?;
        let (kappa_mean, kappa_std) = col(|r| r.kappa_vs_original)?;
        let (sensitivity_mean, sensitivity_std) = col(|r| r.sensitivity)?;
        let (specificity_mean, specificity_std) = col(|r| r.specificity)?;
        Ok(VariantSummary {
            dataset_tag: tag.to_string(),
            n_seeds: rows.len(),
            auroc_mean,
            auroc_std,
            kappa_mean,
            kappa_std,
            sensitivity_mean,
            sensitivity_std,
            specificity_mean,
            specificity_std,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub format_version: String,
    pub kind: ReportKind,
    pub config_hash: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<MetricRow>,
    pub summaries: Vec<VariantSummary>,
    /// Baseline model on the original test set; set for retraining reports.
    pub baseline: Option<VariantSummary>,
}

/// Per-tag summaries in order of first appearance.
pub fn summarize(rows: &[MetricRow]) -> Result<Vec<VariantSummary>> {
    let mut tags: Vec<&str> = Vec::new();
    for r in rows {
        if !tags.contains(&r.dataset_tag.as_str()) {
            tags.push(&r.dataset_tag);
        }
    }
    tags.iter()
        .map(|tag| {
            let group: Vec<&MetricRow> = rows.iter().filter(|r| r.dataset_tag == *tag).collect();
            VariantSummary::from_rows(tag, &group)
        })
        .collect()
}

impl RobustnessReport {
    pub fn new(
        kind: ReportKind,
        cfg: &ExperimentConfig,
        rows: Vec<MetricRow>,
        baseline: Option<VariantSummary>,
    ) -> Result<Self> {
        for r in &rows {
            r.validate()?;
        }
        Ok(RobustnessReport {
            format_version: REPORT_FORMAT.into(),
            kind,
            config_hash: cfg.config_hash(),
            version: version_string(),
            seeds: cfg.seeds.clone(),
            summaries: summarize(&rows)?,
            rows,
            baseline,
        })
    }

    pub fn summary(&self, tag: &str) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.dataset_tag == tag)
    }

    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.rows)
    }

    /// Stored summaries agree with those recomputed from the rows.
    pub fn check_consistency(&self, tolerance: f64) -> Result<()> {
        let fresh = summarize(&self.rows)?;
        if fresh.len() != self.summaries.len() {
            return Err(Error::Integrity("summary count differs from row tags".into()));
        }
        for (a, b) in fresh.iter().zip(&self.summaries) {
            let pairs = [
                (a.auroc_mean, b.auroc_mean),
                (a.auroc_std, b.auroc_std),
                (a.kappa_mean, b.kappa_mean),
                (a.kappa_std, b.kappa_std),
                (a.sensitivity_mean, b.sensitivity_mean),
                (a.sensitivity_std, b.sensitivity_std),
                (a.specificity_mean, b.specificity_mean),
                (a.specificity_std, b.specificity_std),
            ];
            if a.dataset_tag != b.dataset_tag
                || a.n_seeds != b.n_seeds
                || pairs.iter().any(|(x, y)| (x - y).abs() > tolerance)
            {
                return Err(Error::Integrity(format!(
                    "summary for `{}` disagrees with its rows",
                    b.dataset_tag
                )));
            }
        }
        Ok(())
    }

    pub fn csv_path(dir: &Path, kind: ReportKind) -> PathBuf {
        dir.join(format!("{}.csv", kind.stem()))
    }

    pub fn json_path(dir: &Path, kind: ReportKind) -> PathBuf {
        dir.join(format!("{}.json", kind.stem()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        container::write_bytes(&Self::csv_path(dir, self.kind), self.to_csv()?.as_bytes())?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        container::write_bytes(&Self::json_path(dir, self.kind), json.as_bytes())
    }

    /// Reads the JSON report and checks it against its CSV table.
    pub fn read(dir: &Path, kind: ReportKind) -> Result<Self> {
        let path = Self::json_path(dir, kind);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let report: RobustnessReport = serde_json::from_str(&text)
            .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
        if report.format_version != REPORT_FORMAT {
            return Err(Error::Integrity(format!(
                "unsupported report format `{}`",
                report.format_version
            )));
        }
        let csv_path = Self::csv_path(dir, kind);
        let csv = std::fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        if rows_from_csv(&csv)? != report.rows {
            return Err(Error::Integrity(format!(
                "{} does not match {}",
                csv_path.display(),
                path.display()
            )));
        }
        report.check_consistency(1e-12)?;
        Ok(report)
    }
}

pub fn model_path(cfg: &ExperimentConfig, tag: &str, seed: u64) -> PathBuf {
    cfg.output_dir
        .join("models")
        .join(format!("{}_seed{seed}.ctmodl", variant_dir(tag)))
}

/// Identifies the training run behind a model: training settings, dataset
/// and training variant.
fn run_hash(cfg: &ExperimentConfig, tag: &str) -> String {
    hash_json(&(cfg.training.config_hash(), cfg.dataset_hash(), cfg.classifier_input_hash(), tag))
}

/// Trains (or reloads, when an identical run is on disk) one model per seed
/// on the train/validation splits of variant `tag`.
pub fn train_models(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    tag: &str,
    seeds: &[u64],
) -> Result<Vec<TrainedModel>> {
    let hash = run_hash(cfg, tag);
    let cached: Vec<Option<TrainedModel>> = seeds
        .iter()
        .map(|&s| {
            read_model(&model_path(cfg, tag, s))
                .ok()
                .filter(|m| m.config_hash == hash && m.seed == s)
        })
        .collect();
    if cached.iter().all(Option::is_some) {
        return Ok(cached.into_iter().flatten().collect());
    }
    let (_, train_set) = load_split(manifest, cfg, tag, Split::Train)?;
    let (_, val_set) = load_split(manifest, cfg, tag, Split::Validation)?;
    seeds
        .par_iter()
        .zip(cached)
        .map(|(&seed, cached)| {
            if let Some(m) = cached {
                return Ok(m);
            }
            let tc = TrainConfig {
                seed,
                ..cfg.training.clone()
            };
            let mut model = train(&train_set, &val_set, &tc)?;
            model.config_hash = hash.clone();
            let path = model_path(cfg, tag, seed);
            write_model(&path, &model)?;
            container::write_bytes(&path.with_extension("curve.csv"), model.curve_csv().as_bytes())?;
            Ok(model)
        })
        .collect()
}

/// Logits of one model on a test set.
pub fn evaluate(model: &TrainedModel, test: &Dataset) -> Result<Vec<f64>> {
    test.images.par_iter().map(|img| model.logit(img)).collect()
}

/// Binary predictions at the decision threshold on the probability scale.
pub fn decisions(logits: &[f64]) -> Vec<u8> {
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    threshold_predictions(&probs, DECISION_THRESHOLD)
}

/// Metrics for one model on one test set. AUROC is ranked on the logits.
pub fn metric_row(
    tag: &str,
    seed: u64,
    logits: &[f64],
    labels: &[u8],
    reference_predictions: &[u8],
) -> Result<MetricRow> {
    let pred = decisions(logits);
    let (sensitivity, specificity) = sensitivity_specificity(&pred, labels)?;
    Ok(MetricRow {
        dataset_tag: tag.to_string(),
        seed,
        auroc: auroc_of_logits(logits, labels)?,
        kappa_vs_original: cohens_kappa(&pred, reference_predictions)?,
        sensitivity,
        specificity,
    })
}

/// Baseline models trained on the original data, evaluated on the original
/// test set and every degraded test set.
pub fn run_robustness_experiment(cfg: &ExperimentConfig) -> Result<RobustnessReport> {
    cfg.validate()?;
    let manifest = ensure_dataset(cfg)?;
    let models = train_models(cfg, &manifest, ORIGINAL_TAG, &cfg.seeds)?;

    let mut tags = vec![ORIGINAL_TAG.to_string()];
    tags.extend(cfg.grid.iter().map(|e| e.tag()));
    let tests: Vec<Dataset> = tags
        .iter()
        .map(|t| load_split(&manifest, cfg, t, Split::Test).map(|(_, d)| d))
        .collect::<Result<_>>()?;

    let references: Vec<Vec<u8>> = models
        .iter()
        .map(|m| Ok(decisions(&evaluate(m, &tests[0])?)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(tags.len() * models.len());
    for (tag, test) in tags.iter().zip(&tests) {
        for ((model, &seed), reference) in models.iter().zip(&cfg.seeds).zip(&references) {
            let scores = evaluate(model, test)?;
            rows.push(metric_row(tag, seed, &scores, &test.labels, reference)?);
        }
    }
    let report = RobustnessReport::new(ReportKind::Robustness, cfg, rows, None)?;
    report.write(&cfg.output_dir)?;
    Ok(report)
}

/// Fresh models per limited-angle factor, trained and tested on that
/// variant. Kappa compares against the same-seed baseline model's
/// predictions on the original test set.
pub fn run_retrain_experiment(cfg: &ExperimentConfig) -> Result<RobustnessReport> {
    cfg.validate()?;
    let manifest = ensure_dataset(cfg)?;
    let factors = cfg.angle_factors();
    if factors.is_empty() {
        return Err(Error::config("grid", "no limited-angle entries to retrain on"));
    }
    let train_ids = manifest.ids(Split::Train);
    let val_ids = manifest.ids(Split::Validation);
    let test_ids = manifest.ids(Split::Test);
    if test_ids
        .iter()
        .any(|id| train_ids.contains(id) || val_ids.contains(id))
    {
        return Err(Error::Integrity("test split overlaps training data".into()));
    }

    let baseline_models = train_models(cfg, &manifest, ORIGINAL_TAG, &cfg.seeds)?;
    let (_, original_test) = load_split(&manifest, cfg, ORIGINAL_TAG, Split::Test)?;
    let mut baseline_rows = Vec::new();
    let mut references = Vec::new();
    for (model, &seed) in baseline_models.iter().zip(&cfg.seeds) {
        let scores = evaluate(model, &original_test)?;
        let reference = decisions(&scores);
        baseline_rows.push(metric_row(ORIGINAL_TAG, seed, &scores, &original_test.labels, &reference)?);
        references.push(reference);
    }
    let baseline = VariantSummary::from_rows(ORIGINAL_TAG, &baseline_rows.iter().collect::<Vec<_>>())?;

    let mut rows = Vec::new();
    for &k in &factors {
        let tag = variant_tag(Mode::Angle, k);
        let models = train_models(cfg, &manifest, &tag, &cfg.seeds)?;
        let (_, test) = load_split(&manifest, cfg, &tag, Split::Test)?;
        for ((model, &seed), reference) in models.iter().zip(&cfg.seeds).zip(&references) {
            let scores = evaluate(model, &test)?;
            rows.push(metric_row(&tag, seed, &scores, &test.labels, reference)?);
        }
    }
    let report = RobustnessReport::new(ReportKind::Retrain, cfg, rows, Some(baseline))?;
    report.write(&cfg.output_dir)?;
    Ok(report)
}

/// Outcome of checking where the class activation map peaks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamLocalization {
    pub seed: u64,
    /// Correctly classified abnormal test images.
    pub evaluated: usize,
    /// Of those, images whose CAM argmax lies in the dilated lesion.
    pub hits: usize,
    pub hit_fraction: f64,
    /// Largest relative deviation of `mean(raw CAM)` from `logit - bias`.
    pub max_identity_error: f64,
}

/// Euclidean distance from `(x, y)` to the ellipse region (0 inside).
pub fn distance_to_ellipse(e: &Ellipse, x: f64, y: f64) -> f64 {
    if e.contains(x, y) {
        return 0.0;
    }
    const SAMPLES: usize = 2048;
    (0..SAMPLES)
        .map(|i| {
            let (bx, by) = e.boundary_point(std::f64::consts::TAU * i as f64 / SAMPLES as f64);
            (bx - x).hypot(by - y)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Fraction of correctly classified abnormal test images (original variant)
/// whose raw-CAM argmax falls inside the lesion dilated by
/// `dilation_pixels` classifier pixels.
pub fn cam_localization(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    model: &TrainedModel,
    dilation_pixels: f64,
) -> Result<CamLocalization> {
    let (ids, test) = load_split(manifest, cfg, ORIGINAL_TAG, Split::Test)?;
    let side = cfg.reconstruction.classifier_side;
    let fov = cfg.reconstruction.classifier_field_of_view;
    let h = fov / side as f64;
    let results: Vec<Option<(bool, f64)>> = ids
        .par_iter()
        .zip(test.images.par_iter())
        .map(|(&id, image)| -> Result<Option<(bool, f64)>> {
            if test_label(manifest, id) != 1 {
                return Ok(None);
            }
            let cam = compute_cam(model, image)?;
            let target = cam.logit - cam.head_bias;
            let identity = (cam.raw_mean() - target).abs() / target.abs().max(f64::MIN_POSITIVE);
            if cam.logit < 0.0 {
                return Ok(None);
            }
            let q = cam.feature_side;
            let best = (0..q * q)
                .fold(0, |b, i| if cam.raw[i] > cam.raw[b] { i } else { b });
            let row = feature_to_input((best / q) as f64);
            let col = feature_to_input((best % q) as f64);
            let x = (col + 0.5) * h - 0.5 * fov;
            let y = 0.5 * fov - (row + 0.5) * h;
            let phantom = load_phantom(manifest, &cfg.output_dir, id)?;
            let lesion = phantom
                .lesion()
                .ok_or_else(|| Error::Integrity(format!("image {id} is abnormal without a lesion")))?;
            Ok(Some((distance_to_ellipse(lesion, x, y) <= dilation_pixels * h, identity)))
        })
        .collect::<Result<_>>()?;
    let evaluated: Vec<(bool, f64)> = results.into_iter().flatten().collect();
    let hits = evaluated.iter().filter(|(hit, _)| *hit).count();
    Ok(CamLocalization {
        seed: model.seed,
        evaluated: evaluated.len(),
        hits,
        hit_fraction: if evaluated.is_empty() { 0.0 } else { hits as f64 / evaluated.len() as f64 },
        max_identity_error: evaluated.iter().map(|(_, e)| *e).fold(0.0, f64::max),
    })
}

fn test_label(manifest: &DatasetManifest, id: usize) -> u8 {
    manifest.records[id].label.as_u8()
}
