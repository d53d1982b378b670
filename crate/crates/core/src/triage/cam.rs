//! Class activation maps for the global-average-pooling head.

use crate::error::Result;

use super::net::{self, Shapes, CONV2_CHANNELS};
use super::train::TrainedModel;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassActivationMap {
    /// Side of the final feature maps.
    pub feature_side: usize,
    /// `sum_k w_k * feature_k` on the feature grid, unnormalized.
    pub raw: Vec<f64>,
    /// Side of the classifier input.
    pub input_side: usize,
    /// `raw` bilinearly resampled onto the input grid.
    pub upsampled: Vec<f64>,
    pub logit: f64,
    pub head_bias: f64,
}

impl ClassActivationMap {
    pub fn raw_mean(&self) -> f64 {
        self.raw.iter().sum::<f64>() / self.raw.len() as f64
    }

    /// Min-max scaled copy of the upsampled map, for rendering.
    pub fn normalized(&self) -> Vec<f64> {
        let lo = self.upsampled.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.upsampled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            self.upsampled.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; self.upsampled.len()]
        }
    }

    /// `(row, col)` of the largest upsampled value; first wins on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.upsampled.iter().enumerate() {
            if v > self.upsampled[best] {
                best = i;
            }
        }
        (best / self.input_side, best % self.input_side)
    }
}

/// Input-pixel coordinate of feature cell `i`'s receptive-field center:
/// two valid 3x3 convolutions and two 2x2 pools put it at `4 i + 4.5`.
pub fn feature_to_input(i: f64) -> f64 {
    4.0 * i + 4.5
}

fn upsample(raw: &[f64], q: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    let coord = |p: usize| ((p as f64 - 4.5) / 4.0).clamp(0.0, (q - 1) as f64);
    for r in 0..n {
        let fy = coord(r);
        let y0 = (fy.floor() as usize).min(q.saturating_sub(2));
        let ty = fy - y0 as f64;
        for c in 0..n {
            let fx = coord(c);
            let x0 = (fx.floor() as usize).min(q.saturating_sub(2));
            let tx = fx - x0 as f64;
            let at = |y: usize, x: usize| raw[y.min(q - 1) * q + x.min(q - 1)];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[r * n + c] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// Weighted sum of the final feature maps by the head weights of the
/// abnormal logit.
pub fn compute_cam(model: &TrainedModel, image: &[f32]) -> Result<ClassActivationMap> {
    let n = model.input_side;
    let shapes = Shapes::for_input(n)?;
    let params = model.params.cast::<f64>();
    let input: Vec<f64> = model.normalize(image).into_iter().map(f64::from).collect();
    let acts = net::forward_cached(&params, &input, n)?;
    let q = shapes.pool2;
    let mut raw = vec![0.0; q * q];
    for k in 0..CONV2_CHANNELS {
        let w = params.head_weight()[k];
        for (r, &f) in raw.iter_mut().zip(acts.feature_map(k)) {
            *r += w * f;
        }
    }
    Ok(ClassActivationMap {
        feature_side: q,
        upsampled: upsample(&raw, q, n),
        raw,
        input_side: n,
        logit: acts.logit,
        head_bias: params.head_bias(),
    })
}
