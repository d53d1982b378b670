//! Two-layer convolutional classifier with a global-average-pooling head.
//!
//! conv3x3(1->8) -> ReLU -> maxpool2 -> conv3x3(8->16) -> ReLU -> maxpool2
//! -> global average pool -> linear(16->1). Convolutions are "valid" and
//! pooling floors odd sizes. Gradients are computed by hand-written reverse
//! mode over a cached forward pass.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Scalar: Float + Sum + AddAssign + MulAssign + Debug + Default + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

pub const KERNEL: usize = 3;
pub const CONV1_CHANNELS: usize = 8;
pub const CONV2_CHANNELS: usize = 16;

const CONV1_W: usize = 0;
const CONV1_B: usize = CONV1_W + CONV1_CHANNELS * KERNEL * KERNEL;
const CONV2_W: usize = CONV1_B + CONV1_CHANNELS;
const CONV2_B: usize = CONV2_W + CONV2_CHANNELS * CONV1_CHANNELS * KERNEL * KERNEL;
const HEAD_W: usize = CONV2_B + CONV2_CHANNELS;
const HEAD_B: usize = HEAD_W + CONV2_CHANNELS;
pub const N_PARAMS: usize = HEAD_B + 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Names, shapes and offsets of every tensor in the flat parameter vector.
pub fn layout() -> Vec<LayoutEntry> {
    let entry = |name: &str, shape: &[usize], offset: usize| LayoutEntry {
        name: name.to_string(),
        shape: shape.to_vec(),
        offset,
    };
    vec![
        entry("conv1.weight", &[CONV1_CHANNELS, 1, KERNEL, KERNEL], CONV1_W),
        entry("conv1.bias", &[CONV1_CHANNELS], CONV1_B),
        entry(
            "conv2.weight",
            &[CONV2_CHANNELS, CONV1_CHANNELS, KERNEL, KERNEL],
            CONV2_W,
        ),
        entry("conv2.bias", &[CONV2_CHANNELS], CONV2_B),
        entry("head.weight", &[1, CONV2_CHANNELS], HEAD_W),
        entry("head.bias", &[1], HEAD_B),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros() -> Self {
        ModelParams {
            values: vec![T::zero(); N_PARAMS],
        }
    }

    pub fn from_values(values: Vec<T>) -> Result<Self> {
        if values.len() != N_PARAMS {
            return Err(Error::Integrity(format!(
                "parameter vector has {} values, layout needs {N_PARAMS}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrity("non-finite model parameter".into()));
        }
        Ok(ModelParams { values })
    }

    pub fn conv1_weight(&self) -> &[T] {
        &self.values[CONV1_W..CONV1_B]
    }
    pub fn conv1_bias(&self) -> &[T] {
        &self.values[CONV1_B..CONV2_W]
    }
    pub fn conv2_weight(&self) -> &[T] {
        &self.values[CONV2_W..CONV2_B]
    }
    pub fn conv2_bias(&self) -> &[T] {
        &self.values[CONV2_B..HEAD_W]
    }
    pub fn head_weight(&self) -> &[T] {
        &self.values[HEAD_W..HEAD_B]
    }
    pub fn head_bias(&self) -> T {
        self.values[HEAD_B]
    }
    pub fn head_weight_mut(&mut self) -> &mut [T] {
        &mut self.values[HEAD_W..HEAD_B]
    }
    pub fn head_bias_mut(&mut self) -> &mut T {
        &mut self.values[HEAD_B]
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// He (fan-in) Gaussian initialization with zero biases.
pub fn init_params(seed: u64) -> ModelParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::<f32>::zeros();
    let mut fill = |range: std::ops::Range<usize>, fan_in: usize, values: &mut [f32]| {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for v in &mut values[range] {
            *v = normal.sample(&mut rng) as f32;
        }
    };
    fill(CONV1_W..CONV1_B, KERNEL * KERNEL, &mut p.values);
    fill(CONV2_W..CONV2_B, CONV1_CHANNELS * KERNEL * KERNEL, &mut p.values);
    fill(HEAD_W..HEAD_B, CONV2_CHANNELS, &mut p.values);
    p
}

/// Spatial sizes after each stage for an `n x n` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shapes {
    pub input: usize,
    pub conv1: usize,
    pub pool1: usize,
    pub conv2: usize,
    pub pool2: usize,
}

impl Shapes {
    pub fn for_input(n: usize) -> Result<Self> {
        if n < 16 || n % 2 != 0 {
            return Err(Error::Domain(format!(
                "classifier input must be even and >= 16, got {n}"
            )));
        }
        let conv1 = n - (KERNEL - 1);
        let pool1 = conv1 / 2;
        let conv2 = pool1 - (KERNEL - 1);
        let pool2 = conv2 / 2;
        Ok(Shapes {
            input: n,
            conv1,
            pool1,
            conv2,
            pool2,
        })
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Activations<T> {
    pub shapes: Shapes,
    pub input: Vec<T>,
    pub conv1: Vec<T>,
    pub pool1: Vec<T>,
    pub pool1_arg: Vec<u32>,
    pub conv2: Vec<T>,
    /// Final `16 x pool2 x pool2` feature stack (post ReLU and pooling).
    pub features: Vec<T>,
    pub features_arg: Vec<u32>,
    pub pooled: Vec<T>,
    pub logit: T,
}

impl<T: Scalar> Activations<T> {
    /// True when both passes took the same ReLU branches and pooling winners.
    pub fn same_pattern(&self, other: &Self) -> bool {
        let signs = |a: &[T], b: &[T]| {
            a.iter()
                .zip(b)
                .all(|(x, y)| (*x > T::zero()) == (*y > T::zero()))
        };
        self.pool1_arg == other.pool1_arg
            && self.features_arg == other.features_arg
            && signs(&self.conv1, &other.conv1)
            && signs(&self.conv2, &other.conv2)
    }

    pub fn feature_map(&self, channel: usize) -> &[T] {
        let s = self.shapes.pool2 * self.shapes.pool2;
        &self.features[channel * s..(channel + 1) * s]
    }
}

/// Valid 3x3 convolution of `c_in` maps of side `n` into `c_out` maps.
fn conv_forward<T: Scalar>(input: &[T], c_in: usize, n: usize, weight: &[T], bias: &[T], out: &mut [T]) {
    let m = n - (KERNEL - 1);
    let c_out = bias.len();
    for o in 0..c_out {
        let dst = &mut out[o * m * m..(o + 1) * m * m];
        dst.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..c_in {
            let src = &input[c * n * n..(c + 1) * n * n];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let w = weight[((o * c_in + c) * KERNEL + ky) * KERNEL + kx];
                    for y in 0..m {
                        let s = &src[(y + ky) * n + kx..(y + ky) * n + kx + m];
                        let d = &mut dst[y * m..(y + 1) * m];
                        for (dv, &sv) in d.iter_mut().zip(s) {
                            *dv += w * sv;
                        }
                    }
                }
            }
        }
    }
}

/// ReLU followed by 2x2 max pooling (floor), recording the winning index.
fn relu_maxpool<T: Scalar>(input: &[T], channels: usize, m: usize, out: &mut [T], arg: &mut [u32]) {
    let q = m / 2;
    for c in 0..channels {
        let base = c * m * m;
        for py in 0..q {
            for px in 0..q {
                let mut best = T::zero();
                let mut best_idx = base + (2 * py) * m + 2 * px;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = base + (2 * py + dy) * m + 2 * px + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[c * q * q + py * q + px] = best;
                arg[c * q * q + py * q + px] = best_idx as u32;
            }
        }
    }
}

pub fn forward_cached<T: Scalar>(params: &ModelParams<T>, image: &[T], n: usize) -> Result<Activations<T>> {
    let shapes = Shapes::for_input(n)?;
    if image.len() != n * n {
        return Err(Error::Domain(format!(
            "image has {} values, expected {}",
            image.len(),
            n * n
        )));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("classifier input contains non-finite values".into()));
    }
    let Shapes {
        conv1: m1,
        pool1: q1,
        conv2: m2,
        pool2: q2,
        ..
    } = shapes;

    let mut conv1 = vec![T::zero(); CONV1_CHANNELS * m1 * m1];
    conv_forward(image, 1, n, params.conv1_weight(), params.conv1_bias(), &mut conv1);
    let mut pool1 = vec![T::zero(); CONV1_CHANNELS * q1 * q1];
    let mut pool1_arg = vec![0u32; pool1.len()];
    relu_maxpool(&conv1, CONV1_CHANNELS, m1, &mut pool1, &mut pool1_arg);

    let mut conv2 = vec![T::zero(); CONV2_CHANNELS * m2 * m2];
    conv_forward(&pool1, CONV1_CHANNELS, q1, params.conv2_weight(), params.conv2_bias(), &mut conv2);
    let mut features = vec![T::zero(); CONV2_CHANNELS * q2 * q2];
    let mut features_arg = vec![0u32; features.len()];
    relu_maxpool(&conv2, CONV2_CHANNELS, m2, &mut features, &mut features_arg);

    let area = T::of((q2 * q2) as f64);
    let pooled: Vec<T> = features
        .chunks_exact(q2 * q2)
        .map(|f| f.iter().copied().sum::<T>() / area)
        .collect();
    let logit = params.head_bias()
        + params
            .head_weight()
            .iter()
            .zip(&pooled)
            .map(|(&w, &g)| w * g)
            .sum::<T>();

    Ok(Activations {
        shapes,
        input: image.to_vec(),
        conv1,
        pool1,
        pool1_arg,
        conv2,
        features,
        features_arg,
        pooled,
        logit,
    })
}

/// Logit and the final pre-global-pool feature stack.
pub fn forward<T: Scalar>(params: &ModelParams<T>, image: &[T], n: usize) -> Result<(T, Vec<T>)> {
    let acts = forward_cached(params, image, n)?;
    Ok((acts.logit, acts.features))
}

/// `log(1 + exp(-y * z))` with `y = 2 * label - 1`, evaluated stably.
pub fn bce_with_logit(logit: f64, label: u8) -> f64 {
    let z = if label == 1 { -logit } else { logit };
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Eight independent partial sums let the compiler vectorize.
    let mut lanes = [T::zero(); 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let tail: T = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for k in 0..8 {
            lanes[k] += ca[k] * cb[k];
        }
    }
    lanes.iter().copied().sum::<T>() + tail
}

/// Accumulates weight/bias gradients of a valid 3x3 convolution and, when
/// `d_input` is given, the gradient with respect to its input.
fn conv_backward<T: Scalar>(
    input: &[T],
    c_in: usize,
    n: usize,
    weight: &[T],
    d_out: &[T],
    c_out: usize,
    d_weight: &mut [T],
    d_bias: &mut [T],
    mut d_input: Option<&mut [T]>,
) {
    let m = n - (KERNEL - 1);
    for o in 0..c_out {
        let g = &d_out[o * m * m..(o + 1) * m * m];
        d_bias[o] += g.iter().copied().sum::<T>();
        for c in 0..c_in {
            let src = &input[c * n * n..(c + 1) * n * n];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let widx = ((o * c_in + c) * KERNEL + ky) * KERNEL + kx;
                    let mut acc = T::zero();
                    for y in 0..m {
                        let s = &src[(y + ky) * n + kx..(y + ky) * n + kx + m];
                        acc += dot(&g[y * m..(y + 1) * m], s);
                    }
                    d_weight[widx] += acc;
                    if let Some(d_in) = d_input.as_deref_mut() {
                        let w = weight[widx];
                        let dst = &mut d_in[c * n * n..(c + 1) * n * n];
                        for y in 0..m {
                            let d = &mut dst[(y + ky) * n + kx..(y + ky) * n + kx + m];
                            for (dv, &gv) in d.iter_mut().zip(&g[y * m..(y + 1) * m]) {
                                *dv += w * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Routes pooled gradients back to the pooling winners, masked by ReLU.
fn relu_maxpool_backward<T: Scalar>(pre_act: &[T], arg: &[u32], d_pooled: &[T], d_pre: &mut [T]) {
    for (&idx, &g) in arg.iter().zip(d_pooled) {
        let idx = idx as usize;
        if pre_act[idx] > T::zero() {
            d_pre[idx] += g;
        }
    }
}

/// Gradient of the loss with respect to every parameter, given
/// `d_logit = dL/dz`, accumulated into `grad`.
pub fn backward<T: Scalar>(params: &ModelParams<T>, acts: &Activations<T>, d_logit: T, grad: &mut [T]) {
    let Shapes {
        input: n,
        conv1: m1,
        pool1: q1,
        conv2: m2,
        pool2: q2,
    } = acts.shapes;

    grad[HEAD_B] += d_logit;
    let area = T::of((q2 * q2) as f64);
    let mut d_features = vec![T::zero(); acts.features.len()];
    for k in 0..CONV2_CHANNELS {
        grad[HEAD_W + k] += d_logit * acts.pooled[k];
        let g = d_logit * params.head_weight()[k] / area;
        d_features[k * q2 * q2..(k + 1) * q2 * q2]
            .iter_mut()
            .for_each(|v| *v = g);
    }

    let mut d_conv2 = vec![T::zero(); acts.conv2.len()];
    relu_maxpool_backward(&acts.conv2, &acts.features_arg, &d_features, &mut d_conv2);

    let mut d_pool1 = vec![T::zero(); CONV1_CHANNELS * q1 * q1];
    {
        let (head, tail) = grad.split_at_mut(CONV2_B);
        conv_backward(
            &acts.pool1,
            CONV1_CHANNELS,
            q1,
            params.conv2_weight(),
            &d_conv2,
            CONV2_CHANNELS,
            &mut head[CONV2_W..CONV2_B],
            &mut tail[..CONV2_CHANNELS],
            Some(&mut d_pool1),
        );
    }
    debug_assert_eq!(d_conv2.len(), CONV2_CHANNELS * m2 * m2);

    let mut d_conv1 = vec![T::zero(); CONV1_CHANNELS * m1 * m1];
    relu_maxpool_backward(&acts.conv1, &acts.pool1_arg, &d_pool1, &mut d_conv1);
    let (head, tail) = grad.split_at_mut(CONV1_B);
    conv_backward(
        &acts.input,
        1,
        n,
        params.conv1_weight(),
        &d_conv1,
        CONV1_CHANNELS,
        &mut head[CONV1_W..CONV1_B],
        &mut tail[..CONV1_CHANNELS],
        None,
    );
}

/// Binary cross-entropy loss and its gradient for one example.
pub fn loss_and_grad<T: Scalar>(params: &ModelParams<T>, image: &[T], n: usize, label: u8) -> Result<(f64, Vec<T>)> {
    if label > 1 {
        return Err(Error::Domain(format!("label must be 0 or 1, got {label}")));
    }
    let acts = forward_cached(params, image, n)?;
    let z = acts.logit.as_f64();
    let loss = bce_with_logit(z, label);
    let d_logit = T::of(sigmoid(z) - label as f64);
    let mut grad = vec![T::zero(); N_PARAMS];
    backward(params, &acts, d_logit, &mut grad);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn layout_is_contiguous() {
        let l = layout();
        let mut offset = 0;
        for e in &l {
            assert_eq!(e.offset, offset);
            offset += e.shape.iter().product::<usize>();
        }
        assert_eq!(offset, N_PARAMS);
        assert_eq!(N_PARAMS, 8 * 9 + 8 + 16 * 72 + 16 + 16 + 1);
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = init_params(7);
        assert_eq!(a, init_params(7));
        assert_ne!(a, init_params(8));
        assert!(a.conv1_bias().iter().all(|&b| b == 0.0));
        assert!(a.conv2_bias().iter().all(|&b| b == 0.0));
        assert_eq!(a.head_bias(), 0.0);
    }

    #[test]
    fn he_std_of_first_layer() {
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let mut count = 0.0;
        for seed in 0..10_000 {
            for &w in init_params(seed).conv1_weight() {
                sum += w as f64;
                sum2 += (w as f64).powi(2);
                count += 1.0;
            }
        }
        let mean = sum / count;
        let std = (sum2 / count - mean * mean).sqrt();
        let expected = (2.0f64 / 9.0).sqrt();
        assert!((std - expected).abs() / expected < 0.05, "{std}");
    }

    #[test]
    fn shapes_for_64() {
        let s = Shapes::for_input(64).unwrap();
        assert_eq!((s.conv1, s.pool1, s.conv2, s.pool2), (62, 31, 29, 14));
        assert!(Shapes::for_input(15).is_err());
        assert!(Shapes::for_input(18).is_ok());
        assert!(Shapes::for_input(17).is_err());
        let p = init_params(0).cast::<f64>();
        let (_, features) = forward(&p, &vec![0.1; 64 * 64], 64).unwrap();
        assert_eq!(features.len(), 16 * 14 * 14);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_logit() {
        let p = init_params(3);
        let (z, _) = forward(&p, &vec![0.0f32; 32 * 32], 32).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn head_is_linear_in_its_weights() {
        let p = init_params(4).cast::<f64>();
        let img = random_image(32, 1);
        let (z, _) = forward(&p, &img, 32).unwrap();
        let mut q = p.clone();
        q.head_weight_mut().iter_mut().for_each(|w| *w *= 2.0);
        let (z2, _) = forward(&q, &img, 32).unwrap();
        assert!((z2 - 2.0 * z).abs() < 1e-12 * z.abs().max(1.0));
    }

    #[test]
    fn rejects_non_finite_input() {
        let p = init_params(0);
        let mut img = vec![0.0f32; 16 * 16];
        img[5] = f32::NAN;
        assert!(forward(&p, &img, 16).is_err());
    }

    #[test]
    fn loss_values() {
        assert!((bce_with_logit(0.0, 0) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_with_logit(0.0, 1) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_with_logit(20.0, 1) < 1e-8);
        assert!(bce_with_logit(-800.0, 0).abs() < 1e-300);
        assert!((bce_with_logit(-800.0, 1) - 800.0).abs() < 1e-9);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut checked = 0usize;
        for trial in 0..3u64 {
            let mut p = init_params(trial).cast::<f64>();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            for v in p.values.iter_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
            let img = random_image(16, trial);
            let label = (trial % 2) as u8;
            let (_, grad) = loss_and_grad(&p, &img, 16, label).unwrap();
            let base = forward_cached(&p, &img, 16).unwrap();
            let h = 1e-5;
            for i in 0..N_PARAMS {
                let mut plus = p.clone();
                plus.values[i] += h;
                let mut minus = p.clone();
                minus.values[i] -= h;
                let ap = forward_cached(&plus, &img, 16).unwrap();
                let am = forward_cached(&minus, &img, 16).unwrap();
                if !(base.same_pattern(&ap) && base.same_pattern(&am)) {
                    continue;
                }
                let fd = (bce_with_logit(ap.logit, label) - bce_with_logit(am.logit, label)) / (2.0 * h);
                let denom = grad[i].abs().max(fd.abs()).max(1e-6);
                assert!((grad[i] - fd).abs() / denom < 1e-4, "param {i}: {} vs {fd}", grad[i]);
                checked += 1;
            }
        }
        assert!(checked > 3 * N_PARAMS * 9 / 10);
    }
}
