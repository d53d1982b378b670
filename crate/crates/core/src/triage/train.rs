use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{self, MODEL_MAGIC};
use crate::error::{Error, Result};
use crate::grid::bilinear;

use super::net::{self, init_params, layout, sigmoid, LayoutEntry, ModelParams, N_PARAMS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    pub horizontal_flip: bool,
    pub max_rotation_deg: f64,
    pub zoom_min: f64,
    pub zoom_max: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            horizontal_flip: true,
            max_rotation_deg: 10.0,
            zoom_min: 0.9,
            zoom_max: 1.1,
        }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Augmentation {
            horizontal_flip: false,
            max_rotation_deg: 0.0,
            zoom_min: 1.0,
            zoom_max: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub plateau_decay_factor: f64,
    pub plateau_patience: usize,
    /// Minimum absolute validation-loss improvement that resets patience.
    pub plateau_threshold: f64,
    pub grad_accumulation_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub augmentation: Augmentation,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            weight_decay: 1e-6,
            plateau_decay_factor: 0.1,
            plateau_patience: 10,
            plateau_threshold: 1e-4,
            grad_accumulation_steps: 16,
            epochs: 50,
            batch_size: 1,
            augmentation: Augmentation::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.plateau_patience < 1 {
            return Err(Error::config("plateau_patience", "must be at least 1"));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.grad_accumulation_steps < 1 {
            return Err(Error::config("grad_accumulation_steps", "must be at least 1"));
        }
        if self.batch_size != 1 {
            return Err(Error::config("batch_size", "only batch size 1 is supported"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        let a = &self.augmentation;
        if !(a.zoom_min > 0.0 && a.zoom_min <= a.zoom_max) {
            return Err(Error::config("augmentation.zoom_min", "need 0 < zoom_min <= zoom_max"));
        }
        if !(a.max_rotation_deg >= 0.0) {
            return Err(Error::config("augmentation.max_rotation_deg", "must be >= 0"));
        }
        Ok(())
    }

    /// Stable hash of every field except the seed.
    pub fn config_hash(&self) -> String {
        let mut unseeded = self.clone();
        unseeded.seed = 0;
        hash_json(&unseeded)
    }
}

pub(crate) fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Square single-channel images (raw attenuation values) with binary labels.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub side: usize,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(side: usize) -> Self {
        Dataset {
            side,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, image: Vec<f32>, label: u8) -> Result<()> {
        if image.len() != self.side * self.side {
            return Err(Error::Domain(format!(
                "image has {} values, dataset side is {}",
                image.len(),
                self.side
            )));
        }
        if label > 1 {
            return Err(Error::Domain(format!("label must be 0 or 1, got {label}")));
        }
        self.images.push(image);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams<f32>,
    pub input_side: usize,
    pub input_mean: f64,
    pub input_std: f64,
    pub config_hash: String,
    pub seed: u64,
    pub training_curve: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainedModel {
    /// Wraps raw parameters with an identity input normalization.
    pub fn from_params(params: ModelParams<f32>, input_side: usize) -> Self {
        TrainedModel {
            params,
            input_side,
            input_mean: 0.0,
            input_std: 1.0,
            config_hash: String::new(),
            seed: 0,
            training_curve: Vec::new(),
            best_epoch: 0,
        }
    }

    pub fn normalize(&self, image: &[f32]) -> Vec<f32> {
        let mean = self.input_mean as f32;
        let inv = (1.0 / self.input_std) as f32;
        image.iter().map(|&v| (v - mean) * inv).collect()
    }

    pub fn logit(&self, image: &[f32]) -> Result<f64> {
        let (z, _) = net::forward(&self.params, &self.normalize(image), self.input_side)?;
        Ok(z as f64)
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.training_curve {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
        }
        out
    }
}

/// Probability of the abnormal class.
/// Probability of the abnormal class, kept inside the open interval (0, 1)
/// where the sigmoid would round to an endpoint.
pub fn predict(model: &TrainedModel, image: &[f32]) -> Result<f64> {
    Ok(sigmoid(model.logit(image)?).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

pub fn predict_all(model: &TrainedModel, images: &[Vec<f32>]) -> Result<Vec<f64>> {
    images.par_iter().map(|img| predict(model, img)).collect()
}

/// Random flip, rotation and zoom about the image center, resampled
/// bilinearly with zero (air) fill. `(flip, angle_rad, zoom)`.
pub fn augment(image: &[f32], side: usize, flip: bool, angle: f64, zoom: f64) -> Vec<f32> {
    let c = 0.5 * (side as f64 - 1.0);
    let (s, co) = angle.sin_cos();
    let mut out = vec![0.0f32; side * side];
    for r in 0..side {
        for col in 0..side {
            // Output pixel in centered coordinates (x right, y down).
            let mut x = col as f64 - c;
            let y = r as f64 - c;
            if flip {
                x = -x;
            }
            // Inverse map: un-zoom then un-rotate.
            let xs = (co * x + s * y) / zoom;
            let ys = (-s * x + co * y) / zoom;
            out[r * side + col] = bilinear(image, side, ys + c, xs + c, 0.0f32);
        }
    }
    out
}

fn sample_augmentation(a: &Augmentation, rng: &mut ChaCha8Rng) -> (bool, f64, f64) {
    let flip = a.horizontal_flip && rng.random_bool(0.5);
    let max = a.max_rotation_deg.to_radians();
    let angle = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
    let zoom = if a.zoom_max > a.zoom_min {
        rng.random_range(a.zoom_min..=a.zoom_max)
    } else {
        a.zoom_min
    };
    (flip, angle, zoom)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new() -> Self {
        Adam {
            m: vec![0.0; N_PARAMS],
            v: vec![0.0; N_PARAMS],
            t: 0,
        }
    }

    /// One Adam update; weight decay enters as an L2 term on the gradient.
    fn step(&mut self, params: &mut ModelParams<f32>, grad: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..N_PARAMS {
            let p = params.values[i] as f64;
            let g = grad[i] + cfg.weight_decay * p;
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let update = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.adam_epsilon);
            params.values[i] = (p - update) as f32;
        }
    }
}

fn mean_loss(params: &ModelParams<f32>, set: &[Vec<f32>], labels: &[u8], side: usize) -> Result<f64> {
    let losses: Vec<f64> = set
        .par_iter()
        .zip(labels.par_iter())
        .map(|(img, &label)| {
            let (z, _) = net::forward(params, img, side)?;
            Ok(net::bce_with_logit(z as f64, label))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn input_statistics(set: &Dataset) -> (f64, f64) {
    let n = (set.len() * set.side * set.side) as f64;
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for img in &set.images {
        for &v in img {
            sum += v as f64;
            sum2 += (v as f64) * (v as f64);
        }
    }
    let mean = sum / n;
    let std = (sum2 / n - mean * mean).max(0.0).sqrt();
    (mean, if std > 0.0 { std } else { 1.0 })
}

/// Adam with gradient accumulation, plateau learning-rate decay and
/// best-validation-epoch selection. Deterministic in `(data, config)`.
pub fn train(train_set: &Dataset, val_set: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::config("dataset", "training and validation sets must be nonempty"));
    }
    if train_set.side != val_set.side {
        return Err(Error::config("dataset", "training and validation image sizes differ"));
    }
    let positives = train_set.labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == train_set.len() {
        return Err(Error::config("dataset", "training set contains a single class"));
    }
    let side = train_set.side;
    net::Shapes::for_input(side)?;

    let (mean, std) = input_statistics(train_set);
    let mut model = TrainedModel {
        params: init_params(config.seed),
        input_side: side,
        input_mean: mean,
        input_std: std,
        config_hash: config.config_hash(),
        seed: config.seed,
        training_curve: Vec::with_capacity(config.epochs),
        best_epoch: 0,
    };
    let val_images: Vec<Vec<f32>> = val_set.images.iter().map(|i| model.normalize(i)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new();
    let mut params = model.params.clone();
    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut plateau_best = f64::INFINITY;
    let mut stale_epochs = 0usize;
    let mut lr = config.learning_rate;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut accum = vec![0.0f64; N_PARAMS];

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut pending = 0usize;
        let mut loss_sum = 0.0;
        for &idx in &order {
            let (flip, angle, zoom) = sample_augmentation(&config.augmentation, &mut rng);
            let raw = &train_set.images[idx];
            let view = if flip || angle != 0.0 || zoom != 1.0 {
                augment(raw, side, flip, angle, zoom)
            } else {
                raw.clone()
            };
            let input = model.normalize(&view);
            let (loss, grad) = net::loss_and_grad(&params, &input, side, train_set.labels[idx])?;
            loss_sum += loss;
            for (a, g) in accum.iter_mut().zip(&grad) {
                *a += *g as f64;
            }
            pending += 1;
            if pending == config.grad_accumulation_steps {
                accum.iter_mut().for_each(|a| *a /= pending as f64);
                adam.step(&mut params, &accum, lr, config);
                accum.iter_mut().for_each(|a| *a = 0.0);
                pending = 0;
            }
        }
        if pending > 0 {
            accum.iter_mut().for_each(|a| *a /= pending as f64);
            adam.step(&mut params, &accum, lr, config);
            accum.iter_mut().for_each(|a| *a = 0.0);
        }

        let val_loss = mean_loss(&params, &val_images, &val_set.labels, side)?;
        if !val_loss.is_finite() {
            return Err(Error::Domain(format!("validation loss diverged at epoch {epoch}")));
        }
        model.training_curve.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            lr,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            model.best_epoch = epoch;
        }
        if val_loss < plateau_best - config.plateau_threshold {
            plateau_best = val_loss;
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= config.plateau_patience {
                lr *= config.plateau_decay_factor;
                stale_epochs = 0;
            }
        }
    }
    model.params = best_params;
    Ok(model)
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format_version: String,
    layout: Vec<LayoutEntry>,
    config_hash: String,
    seed: u64,
    best_epoch: usize,
    input_side: usize,
    input_mean: f64,
    input_std: f64,
}

pub fn encode_model(model: &TrainedModel) -> Result<Vec<u8>> {
    let header = ModelHeader {
        format_version: container::CONTAINER_VERSION.into(),
        layout: layout(),
        config_hash: model.config_hash.clone(),
        seed: model.seed,
        best_epoch: model.best_epoch,
        input_side: model.input_side,
        input_mean: model.input_mean,
        input_std: model.input_std,
    };
    container::encode(MODEL_MAGIC, &header, model.params.values.iter().copied())
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<TrainedModel> {
    let (h, values): (ModelHeader, Vec<f32>) = container::decode(MODEL_MAGIC, bytes, path)?;
    if h.layout != layout() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "parameter layout does not match this build".into(),
        });
    }
    Ok(TrainedModel {
        params: ModelParams::from_values(values)?,
        input_side: h.input_side,
        input_mean: h.input_mean,
        input_std: h.input_std,
        config_hash: h.config_hash,
        seed: h.seed,
        training_curve: Vec::new(),
        best_epoch: h.best_epoch,
    })
}

pub fn write_model(path: &Path, model: &TrainedModel) -> Result<()> {
    container::write_bytes(path, &encode_model(model)?)
}

pub fn read_model(path: &Path) -> Result<TrainedModel> {
    decode_model(&container::read_bytes(path)?, path)
}

/// Largest radius (in pixels from the image center) that stays inside the
/// square after the strongest zoom of `a`.
pub fn safe_radius(a: &Augmentation, side: usize) -> f64 {
    0.5 * (side as f64 - 1.0) / a.zoom_max.max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_dataset(n_images: usize, side: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = Dataset::new(side);
        for i in 0..n_images {
            let label = (i % 2) as u8;
            let mut img = vec![0.2f32; side * side];
            if label == 1 {
                let cy = rng.random_range(5..side - 5) as f64;
                let cx = rng.random_range(5..side - 5) as f64;
                for r in 0..side {
                    for c in 0..side {
                        if (r as f64 - cy).hypot(c as f64 - cx) < 3.0 {
                            img[r * side + c] += 0.5;
                        }
                    }
                }
            }
            for v in img.iter_mut() {
                *v += rng.random_range(-0.01..0.01);
            }
            set.push(img, label).unwrap();
        }
        set
    }

    fn quick_config(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 4,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let tr = blob_dataset(40, 16, 1);
        let va = blob_dataset(10, 16, 2);
        let a = train(&tr, &va, &quick_config(5)).unwrap();
        let b = train(&tr, &va, &quick_config(5)).unwrap();
        assert_eq!(a, b);
        let c = train(&tr, &va, &quick_config(6)).unwrap();
        assert_ne!(a.params, c.params);
        assert!(a.best_epoch >= 1 && a.best_epoch <= 4);
        assert_eq!(a.training_curve.len(), 4);
    }

    #[test]
    fn single_class_is_rejected() {
        let mut tr = blob_dataset(10, 16, 1);
        tr.labels.iter_mut().for_each(|l| *l = 1);
        let va = blob_dataset(4, 16, 2);
        assert!(matches!(
            train(&tr, &va, &quick_config(0)),
            Err(Error::Config { .. })
        ));
        assert!(train(&Dataset::new(16), &va, &quick_config(0)).is_err());
    }

    #[test]
    fn weight_decay_shrinks_params_without_data_gradient() {
        let cfg = TrainConfig {
            weight_decay: 1e-2,
            ..TrainConfig::default()
        };
        let mut params = init_params(1);
        let mut adam = Adam::new();
        let zero = vec![0.0; N_PARAMS];
        let mut prev = params.norm();
        for _ in 0..20 {
            adam.step(&mut params, &zero, 1e-3, &cfg);
            let now = params.norm();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn plateau_decay_kicks_in() {
        // A constant validation loss never improves, so lr decays every
        // `patience` epochs.
        let tr = blob_dataset(8, 16, 3);
        let va = blob_dataset(4, 16, 4);
        let cfg = TrainConfig {
            epochs: 6,
            plateau_patience: 2,
            learning_rate: 1e-12,
            ..TrainConfig::default()
        };
        let m = train(&tr, &va, &cfg).unwrap();
        let lrs: Vec<f64> = m.training_curve.iter().map(|r| r.lr).collect();
        assert_eq!(lrs[0], 1e-12);
        assert!(lrs[5] < lrs[0]);
    }

    #[test]
    fn augmentation_identity_and_flip() {
        let side = 16;
        let img: Vec<f32> = (0..side * side).map(|i| i as f32).collect();
        assert_eq!(augment(&img, side, false, 0.0, 1.0), img);
        let flipped = augment(&img, side, true, 0.0, 1.0);
        for r in 0..side {
            for c in 0..side {
                assert_eq!(flipped[r * side + c], img[r * side + side - 1 - c]);
            }
        }
    }

    #[test]
    fn model_file_round_trip() {
        let tr = blob_dataset(20, 16, 1);
        let va = blob_dataset(6, 16, 2);
        let m = train(&tr, &va, &quick_config(2)).unwrap();
        let bytes = encode_model(&m).unwrap();
        assert_eq!(&bytes[..8], b"CTMODL01");
        let back = decode_model(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.best_epoch, m.best_epoch);
        assert_eq!(back.input_mean, m.input_mean);
    }

    #[test]
    fn predict_is_a_probability() {
        let m = TrainedModel::from_params(init_params(0), 16);
        let p = predict(&m, &vec![0.3; 256]).unwrap();
        assert!(p > 0.0 && p < 1.0);
        let mut zero = m.clone();
        zero.params = ModelParams::zeros();
        assert_eq!(predict(&zero, &vec![0.3; 256]).unwrap(), 0.5);
        for bias in [-800.0, 60.0, 800.0] {
            *zero.params.head_bias_mut() = bias;
            let p = predict(&zero, &vec![0.3; 256]).unwrap();
            assert!(p > 0.0 && p < 1.0, "bias {bias}: {p}");
        }
    }
}
