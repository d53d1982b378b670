//! Filtered back projection for parallel-beam sinograms.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::projector::Sinogram;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Ramp,
    RampHann,
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::Ramp => "ramp",
            Kernel::RampHann => "ramp_hann",
        }
    }
}

impl std::str::FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ramp" => Ok(Kernel::Ramp),
            "ramp_hann" => Ok(Kernel::RampHann),
            other => Err(Error::config("kernel", format!("unknown kernel `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kernel: Kernel,
    pub zero_pad_length: usize,
}

impl FilterSpec {
    /// Smallest valid padding for `n_detectors`.
    pub fn for_detectors(kernel: Kernel, n_detectors: usize) -> Self {
        FilterSpec {
            kernel,
            zero_pad_length: (2 * n_detectors).next_power_of_two(),
        }
    }

    pub fn validate(&self, n_detectors: usize) -> Result<()> {
        let l = self.zero_pad_length;
        if !l.is_power_of_two() || l < 2 * n_detectors {
            return Err(Error::config(
                "zero_pad_length",
                format!("must be a power of two >= {}, got {l}", 2 * n_detectors),
            ));
        }
        Ok(())
    }
}

/// Spatial taps of the band-limited ramp kernel at integer lag `n`.
pub fn ramp_tap(n: i64, spacing: f64) -> f64 {
    if n == 0 {
        1.0 / (4.0 * spacing * spacing)
    } else if n % 2 == 0 {
        0.0
    } else {
        -1.0 / ((n * n) as f64 * PI * PI * spacing * spacing)
    }
}

/// Frequency response of the (spacing-scaled) kernel on a cyclic grid of
/// length `len`, apodized when requested.
fn kernel_response(spec: &FilterSpec, spacing: f64) -> Vec<f64> {
    let len = spec.zero_pad_length;
    let mut taps: Vec<Complex64> = (0..len)
        .map(|i| {
            let lag = if i <= len / 2 { i as i64 } else { i as i64 - len as i64 };
            Complex64::new(spacing * ramp_tap(lag, spacing), 0.0)
        })
        .collect();
    FftPlanner::<f64>::new().plan_fft_forward(len).process(&mut taps);
    taps.iter()
        .enumerate()
        .map(|(k, c)| {
            let window = match spec.kernel {
                Kernel::Ramp => 1.0,
                Kernel::RampHann => 0.5 * (1.0 + (2.0 * PI * k as f64 / len as f64).cos()),
            };
            c.re * window
        })
        .collect()
}

/// Convolves every row with the ramp kernel (times the detector spacing, so
/// that the discrete sum approximates the continuous convolution).
pub fn ramp_filter_rows(sino: &Sinogram, filter: &FilterSpec) -> Result<Sinogram> {
    let g = &sino.geometry;
    if g.n_detectors < 2 {
        return Err(Error::config("n_detectors", "must be at least 2"));
    }
    filter.validate(g.n_detectors)?;
    let len = filter.zero_pad_length;
    let response = kernel_response(filter, g.detector_spacing);
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(len);
    let inverse = planner.plan_fft_inverse(len);
    let n_det = g.n_detectors;
    let scale = 1.0 / len as f64;

    // Two real rows share one complex transform (real and imaginary parts);
    // the response is real and even, so the halves do not mix.
    let mut out = sino.clone();
    out.data.par_chunks_mut(2 * n_det).for_each(|pair| {
        let mut buf = vec![Complex64::new(0.0, 0.0); len];
        let (first, second) = pair.split_at_mut(n_det.min(pair.len()));
        for (b, &v) in buf.iter_mut().zip(first.iter()) {
            b.re = v;
        }
        for (b, &v) in buf.iter_mut().zip(second.iter()) {
            b.im = v;
        }
        forward.process(&mut buf);
        for (b, &h) in buf.iter_mut().zip(&response) {
            *b *= h;
        }
        inverse.process(&mut buf);
        for (r, b) in first.iter_mut().zip(&buf) {
            *r = b.re * scale;
        }
        for (r, b) in second.iter_mut().zip(&buf) {
            *r = b.im * scale;
        }
    });
    out.provenance.push(format!(
        "ramp-filter(kernel={}, pad={})",
        filter.kernel.name(),
        len
    ));
    Ok(out)
}

/// Smears each filtered view back along its rays and scales by the view
/// spacing. Each pixel accumulates views in index order.
pub fn backproject(filtered: &Sinogram, n_pixels: usize, field_of_view: f64) -> Result<ImageGrid> {
    let g = &filtered.geometry;
    if g.n_views < 1 {
        return Err(Error::Domain("backprojection needs at least one view".into()));
    }
    let mut img = ImageGrid::zeros(n_pixels, field_of_view)?;
    let h = img.pixel_size();
    let half_fov = 0.5 * field_of_view;
    let trig: Vec<(f64, f64)> = (0..g.n_views).map(|v| g.view_angle(v).sin_cos()).collect();
    let n_det = g.n_detectors;
    let last = (n_det - 1) as f64;
    let center = 0.5 * last;
    let inv_ds = 1.0 / g.detector_spacing;
    let x0 = 0.5 * h - half_fov;
    let dtheta = g.view_spacing();

    // Rows padded with one zero so interpolation at the last detector needs
    // no bounds branch.
    let padded: Vec<f64> = filtered
        .rows()
        .flat_map(|r| r.iter().copied().chain(std::iter::once(0.0)))
        .collect();
    img.data
        .par_chunks_mut(n_pixels)
        .enumerate()
        .for_each(|(row, out)| {
            let y = half_fov - (row as f64 + 0.5) * h;
            for (view, &(sin_t, cos_t)) in trig.iter().enumerate() {
                let line = &padded[view * (n_det + 1)..(view + 1) * (n_det + 1)];
                let u0 = (x0 * cos_t + y * sin_t) * inv_ds + center;
                let du = h * cos_t * inv_ds;
                let (lo, hi) = column_span(u0, du, last, n_pixels);
                // Signed conversions and a float column counter keep the
                // inner loop free of unsigned int/float conversions.
                let mut col = lo as f64;
                for px in &mut out[lo..hi] {
                    let u = u0 + col * du;
                    let i = u as i32;
                    let f = u - f64::from(i);
                    let i = i as usize;
                    *px += line[i] * (1.0 - f) + line[i + 1] * f;
                    col += 1.0;
                }
            }
            for px in out.iter_mut() {
                *px *= dtheta;
            }
        });
    img.provenance = filtered.provenance.clone();
    img.provenance
        .push(format!("backproject(n={n_pixels}, fov={field_of_view})"));
    Ok(img)
}

/// Exact column range `[lo, hi)` whose detector coordinate
/// `u = u0 + col * du` lies in `[0, last]`.
fn column_span(u0: f64, du: f64, last: f64, n: usize) -> (usize, usize) {
    let inside = |col: usize| {
        let u = u0 + col as f64 * du;
        (0.0..=last).contains(&u)
    };
    if du == 0.0 {
        return if inside(0) { (0, n) } else { (0, 0) };
    }
    let (a, b) = ((0.0 - u0) / du, (last - u0) / du);
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    let mut lo = a.ceil().clamp(0.0, n as f64) as usize;
    let mut hi = (b.floor() + 1.0).clamp(0.0, n as f64) as usize;
    if lo >= hi {
        // The estimate may be off by one column either way.
        return match (lo.saturating_sub(1)..(hi + 1).min(n)).find(|&c| inside(c)) {
            Some(c) => {
                let end = (c..n).find(|&d| !inside(d)).unwrap_or(n);
                (c, end)
            }
            None => (0, 0),
        };
    }
    while lo < hi && !inside(lo) {
        lo += 1;
    }
    while lo > 0 && inside(lo - 1) {
        lo -= 1;
    }
    while hi > lo && !inside(hi - 1) {
        hi -= 1;
    }
    while hi < n && inside(hi) {
        hi += 1;
    }
    (lo, hi)
}

pub fn fbp(sino: &Sinogram, n_pixels: usize, field_of_view: f64, filter: &FilterSpec) -> Result<ImageGrid> {
    let filtered = ramp_filter_rows(sino, filter)?;
    backproject(&filtered, n_pixels, field_of_view)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::ScanGeometry;

    fn sino_with(rows: usize, n_det: usize, f: impl Fn(usize, usize) -> f64) -> Sinogram {
        let g = ScanGeometry::new(rows, PI, 0.0, n_det, 0.1).unwrap();
        let data = (0..rows * n_det).map(|i| f(i / n_det, i % n_det)).collect();
        Sinogram::from_data(g, data, vec![]).unwrap()
    }

    #[test]
    fn center_tap() {
        assert!((ramp_tap(0, 0.1) - 25.0).abs() < 1e-12);
        assert_eq!(ramp_tap(2, 0.1), 0.0);
    }

    #[test]
    fn taps_match_truncated_abs_frequency() {
        // h(x) = integral over |w| <= W of |w| exp(2 pi i w x) dw, W = 1/(2 ds).
        let ds = 0.1;
        let w_max = 0.5 / ds;
        let m = 200_000;
        for n in 0..6i64 {
            let x = n as f64 * ds;
            let dw = 2.0 * w_max / m as f64;
            let integral: f64 = (0..m)
                .map(|k| {
                    let w = -w_max + (k as f64 + 0.5) * dw;
                    w.abs() * (2.0 * PI * w * x).cos() * dw
                })
                .sum();
            let tap = ramp_tap(n, ds);
            assert!((integral - tap).abs() < 1e-4 * 25.0, "lag {n}: {integral} vs {tap}");
        }
    }

    #[test]
    fn filter_matches_direct_convolution() {
        let s = sino_with(3, 37, |v, d| ((v * 7 + d * 3) % 11) as f64 * 0.1);
        let spec = FilterSpec::for_detectors(Kernel::Ramp, 37);
        let f = ramp_filter_rows(&s, &spec).unwrap();
        let ds = s.geometry.detector_spacing;
        for v in 0..3 {
            for m in 0..37 {
                let direct: f64 = (0..37)
                    .map(|k| ds * ramp_tap(m as i64 - k as i64, ds) * s.row(v)[k])
                    .sum();
                assert!((direct - f.row(v)[m]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn filter_zero_and_linear() {
        let spec = FilterSpec::for_detectors(Kernel::RampHann, 40);
        let zero = sino_with(4, 40, |_, _| 0.0);
        assert!(ramp_filter_rows(&zero, &spec).unwrap().data.iter().all(|&v| v == 0.0));

        let x = sino_with(4, 40, |v, d| (v as f64 + 1.0) * (d as f64 * 0.3).sin());
        let y = sino_with(4, 40, |v, d| (d as f64 - v as f64 * 2.0).cos());
        let (a, b) = (1.7, -0.6);
        let combo = sino_with(4, 40, |v, d| a * x.row(v)[d] + b * y.row(v)[d]);
        let fx = ramp_filter_rows(&x, &spec).unwrap();
        let fy = ramp_filter_rows(&y, &spec).unwrap();
        let fc = ramp_filter_rows(&combo, &spec).unwrap();
        let norm: f64 = fc.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err: f64 = fc
            .data
            .iter()
            .zip(fx.data.iter().zip(&fy.data))
            .map(|(c, (p, q))| (c - a * p - b * q).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err / norm < 1e-12);
    }

    #[test]
    fn filter_rejects_short_padding() {
        let s = sino_with(1, 40, |_, _| 1.0);
        let spec = FilterSpec {
            kernel: Kernel::Ramp,
            zero_pad_length: 64,
        };
        assert!(ramp_filter_rows(&s, &spec).is_err());
        let spec = FilterSpec {
            kernel: Kernel::Ramp,
            zero_pad_length: 96,
        };
        assert!(ramp_filter_rows(&s, &spec).is_err());
    }

    #[test]
    fn zero_backprojection() {
        let s = sino_with(10, 16, |_, _| 0.0);
        let img = backproject(&s, 16, 1.6).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_view_smears_along_rays() {
        // theta = 0: rays run along y, so every column is constant.
        let g = ScanGeometry::new(1, PI, 0.0, 32, 0.1).unwrap();
        let data = (0..32).map(|d| (d as f64 * 0.4).sin()).collect();
        let s = Sinogram::from_data(g, data, vec![]).unwrap();
        let img = backproject(&s, 20, 2.0).unwrap();
        for col in 0..20 {
            let first = img.get(0, col);
            for row in 1..20 {
                assert!((img.get(row, col) - first).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn doubling_views_keeps_constant_backprojection() {
        let a = sino_with(30, 64, |_, _| 1.5);
        let b = sino_with(60, 64, |_, _| 1.5);
        let ia = backproject(&a, 24, 4.0).unwrap();
        let ib = backproject(&b, 24, 4.0).unwrap();
        for (x, y) in ia.data.iter().zip(&ib.data) {
            assert!((x - y).abs() / x.abs().max(1e-300) < 1e-10);
        }
        assert!((ia.get(12, 12) - 1.5 * PI).abs() < 1e-10);
    }
}
