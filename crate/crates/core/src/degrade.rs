//! Projection-space acquisition degradations: reduced tube current,
//! strided view subsampling and limited-angle truncation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::Sinogram;

pub const ALLOWED_FACTORS: [u32; 4] = [1, 4, 8, 16];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoseModel {
    /// Expected unattenuated photon count per detector element at nominal current.
    pub n0: f64,
    /// Tube-current reduction factor; 1 is nominal.
    pub dose_factor: f64,
    pub counts_floor: f64,
}

impl Default for DoseModel {
    fn default() -> Self {
        DoseModel {
            n0: 1e5,
            dose_factor: 1.0,
            counts_floor: 1.0,
        }
    }
}

impl DoseModel {
    pub fn with_factor(self, dose_factor: f64) -> Self {
        DoseModel {
            dose_factor,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n0 > 0.0 && self.n0.is_finite()) {
            return Err(Error::config("n0", "must be positive"));
        }
        if !(self.dose_factor >= 1.0 && self.dose_factor.is_finite()) {
            return Err(Error::config("dose_factor", "must be >= 1"));
        }
        if !(self.counts_floor > 0.0 && self.counts_floor.is_finite()) {
            return Err(Error::config("counts_floor", "must be positive"));
        }
        Ok(())
    }

    /// Post-log noise variance of a ray with line integral `p`.
    #[inline]
    pub fn variance(&self, p: f64) -> f64 {
        let counts = self.n0 * (-p).exp() / self.dose_factor;
        1.0 / counts.max(self.counts_floor)
    }
}

/// Adds zero-mean Gaussian quantum noise with variance
/// `alpha * exp(p) / n0`, capped at `1 / counts_floor`.
///
/// Draws for view `v` come from an independent ChaCha stream keyed by
/// `(seed, v)`, consumed in detector order, so the result does not depend on
/// how views are scheduled.
pub fn add_quantum_noise(sino: &Sinogram, dose: &DoseModel, seed: u64) -> Result<Sinogram> {
    dose.validate()?;
    if let Some((i, v)) = sino
        .data
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0)
    {
        return Err(Error::Domain(format!(
            "sinogram entry {i} is {v}; line integrals must be finite and nonnegative"
        )));
    }
    let n_det = sino.geometry.n_detectors;
    let mut out = sino.clone();
    out.data
        .par_chunks_mut(n_det)
        .enumerate()
        .for_each(|(view, row)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(view as u64);
            for p in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p += z * dose.variance(*p).sqrt();
            }
        });
    out.provenance.push(format!(
        "quantum-noise(alpha={}, n0={}, floor={}, seed={})",
        dose.dose_factor, dose.n0, dose.counts_floor, seed
    ));
    Ok(out)
}

/// Keeps every `k`-th view starting from the first.
pub fn reduce_projections(sino: &Sinogram, k: usize) -> Result<Sinogram> {
    if k < 1 {
        return Err(Error::Domain("projection reduction factor must be >= 1".into()));
    }
    let g = &sino.geometry;
    let kept: Vec<usize> = (0..g.n_views).step_by(k).collect();
    let mut data = Vec::with_capacity(kept.len() * g.n_detectors);
    for &v in &kept {
        data.extend_from_slice(sino.row(v));
    }
    let mut geometry = g.clone();
    geometry.n_views = kept.len();
    geometry.view_stride *= k;
    let mut provenance = sino.provenance.clone();
    provenance.push(format!("reduce-projections(k={k})"));
    Ok(Sinogram {
        geometry,
        data,
        provenance,
    })
}

/// Keeps the first `floor(n_views / k)` views.
pub fn limit_angle(sino: &Sinogram, k: usize) -> Result<Sinogram> {
    if k < 1 {
        return Err(Error::Domain("angle reduction factor must be >= 1".into()));
    }
    let g = &sino.geometry;
    let kept = g.n_views / k;
    if kept == 0 {
        return Err(Error::Domain(format!(
            "limiting {} views by {k} leaves no views",
            g.n_views
        )));
    }
    let mut geometry = g.clone();
    geometry.n_views = kept;
    geometry.angular_range = g.angular_range / k as f64;
    let mut provenance = sino.provenance.clone();
    provenance.push(format!("limit-angle(k={k})"));
    Ok(Sinogram {
        geometry,
        data: sino.data[..kept * g.n_detectors].to_vec(),
        provenance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Current,
    Projections,
    Angle,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Current, Mode::Projections, Mode::Angle];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Current => "current",
            Mode::Projections => "projections",
            Mode::Angle => "angle",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "current" => Ok(Mode::Current),
            "projections" => Ok(Mode::Projections),
            "angle" => Ok(Mode::Angle),
            other => Err(Error::config("mode", format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    pub mode: Mode,
    pub factor: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts_floor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DegradeSpec {
    pub fn current(factor: u32, dose: &DoseModel, seed: u64) -> Self {
        DegradeSpec {
            mode: Mode::Current,
            factor,
            n0: Some(dose.n0),
            counts_floor: Some(dose.counts_floor),
            seed: Some(seed),
        }
    }

    pub fn selection(mode: Mode, factor: u32) -> Self {
        DegradeSpec {
            mode,
            factor,
            n0: None,
            counts_floor: None,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_FACTORS.contains(&self.factor) {
            return Err(Error::config(
                "factor",
                format!("must be one of {ALLOWED_FACTORS:?}, got {}", self.factor),
            ));
        }
        match self.mode {
            Mode::Current => {
                if self.n0.is_none() {
                    return Err(Error::config("n0", "required for current mode"));
                }
                if self.seed.is_none() {
                    return Err(Error::config("seed", "required for current mode"));
                }
            }
            Mode::Projections | Mode::Angle => {
                if self.n0.is_some() || self.counts_floor.is_some() {
                    return Err(Error::config("n0", "only valid for current mode"));
                }
                if self.seed.is_some() {
                    return Err(Error::config("seed", "only valid for current mode"));
                }
            }
        }
        Ok(())
    }

    pub fn dose(&self) -> Option<DoseModel> {
        Some(DoseModel {
            n0: self.n0?,
            dose_factor: self.factor as f64,
            counts_floor: self.counts_floor.unwrap_or(1.0),
        })
    }
}

pub fn apply(spec: &DegradeSpec, sino: &Sinogram) -> Result<Sinogram> {
    spec.validate()?;
    let k = spec.factor as usize;
    match spec.mode {
        Mode::Current => add_quantum_noise(sino, &spec.dose().unwrap(), spec.seed.unwrap()),
        Mode::Projections => reduce_projections(sino, k),
        Mode::Angle => limit_angle(sino, k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::ScanGeometry;
    use std::f64::consts::PI;

    fn ramp_sino(n_views: usize, n_det: usize) -> Sinogram {
        let g = ScanGeometry::new(n_views, PI, 0.0, n_det, 0.1).unwrap();
        let data = (0..n_views * n_det).map(|i| (i % 97) as f64 * 0.01).collect();
        Sinogram::from_data(g, data, vec![]).unwrap()
    }

    fn constant_sino(n_views: usize, n_det: usize, p: f64) -> Sinogram {
        let g = ScanGeometry::new(n_views, PI, 0.0, n_det, 0.1).unwrap();
        Sinogram::from_data(g, vec![p; n_views * n_det], vec![]).unwrap()
    }

    fn mean_var(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn nominal_variance_at_zero() {
        let s = constant_sino(1000, 1000, 0.0);
        let noisy = add_quantum_noise(&s, &DoseModel::default(), 11).unwrap();
        let (_, v) = mean_var(&noisy.data);
        assert!((v - 1e-5).abs() / 1e-5 < 0.03, "{v}");
    }

    #[test]
    fn huge_flux_is_nearly_noiseless() {
        let s = ramp_sino(50, 64);
        let dose = DoseModel {
            n0: 1e12,
            ..DoseModel::default()
        };
        let noisy = add_quantum_noise(&s, &dose, 3).unwrap();
        let max = s
            .data
            .iter()
            .zip(&noisy.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-4);
    }

    #[test]
    fn noise_is_deterministic_and_does_not_mutate() {
        let s = ramp_sino(20, 16);
        let before = s.clone();
        let dose = DoseModel::default().with_factor(8.0);
        let a = add_quantum_noise(&s, &dose, 99).unwrap();
        let b = add_quantum_noise(&s, &dose, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(s, before);
        assert_ne!(a.data, add_quantum_noise(&s, &dose, 100).unwrap().data);
        assert!(a.provenance.last().unwrap().starts_with("quantum-noise(alpha=8"));
    }

    #[test]
    fn floor_caps_variance() {
        let dose = DoseModel::default().with_factor(4.0);
        let p = (dose.n0 * dose.dose_factor / dose.counts_floor).ln();
        assert_eq!(dose.variance(p + 2.0), 1.0);
        assert!((dose.variance(p) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noise_rejects_bad_entries() {
        let mut s = ramp_sino(2, 4);
        s.data[3] = -0.5;
        assert!(matches!(
            add_quantum_noise(&s, &DoseModel::default(), 0),
            Err(Error::Domain(_))
        ));
        s.data[3] = f64::INFINITY;
        assert!(add_quantum_noise(&s, &DoseModel::default(), 0).is_err());
    }

    #[test]
    fn noise_entries_are_uncorrelated() {
        let s = constant_sino(1, 2, 1.0);
        let dose = DoseModel::default();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for seed in 0..10_000 {
            let n = add_quantum_noise(&s, &dose, seed).unwrap();
            a.push(n.data[0] - 1.0);
            b.push(n.data[1] - 1.0);
        }
        let (ma, va) = mean_var(&a);
        let (mb, vb) = mean_var(&b);
        let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / 9999.0;
        assert!((cov / (va * vb).sqrt()).abs() < 0.05);
    }

    #[test]
    fn projection_counts() {
        let s = ramp_sino(984, 4);
        assert_eq!(reduce_projections(&s, 4).unwrap().geometry.n_views, 246);
        assert_eq!(reduce_projections(&s, 16).unwrap().geometry.n_views, 62);
        assert_eq!(limit_angle(&s, 8).unwrap().geometry.n_views, 123);
        assert_eq!(limit_angle(&s, 16).unwrap().geometry.n_views, 61);
        assert!(reduce_projections(&s, 0).is_err());
        assert!(limit_angle(&s, 0).is_err());
        assert!(limit_angle(&ramp_sino(3, 4), 4).is_err());
    }

    #[test]
    fn identity_factor_keeps_rows() {
        let s = ramp_sino(10, 8);
        let r = reduce_projections(&s, 1).unwrap();
        let l = limit_angle(&s, 1).unwrap();
        assert_eq!(r.data, s.data);
        assert_eq!(l.data, s.data);
        assert_eq!(r.provenance.len(), 1);
    }

    #[test]
    fn kept_angles_are_preserved() {
        let s = ramp_sino(984, 4);
        let r = reduce_projections(&s, 4).unwrap();
        for j in 0..r.geometry.n_views {
            assert_eq!(r.geometry.view_angle(j), s.geometry.view_angle(4 * j));
        }
        let l = limit_angle(&s, 4).unwrap();
        assert_eq!(l.geometry.angular_range, PI / 4.0);
        assert_eq!(l.geometry.view_angle(245), s.geometry.view_angle(245));
    }

    #[test]
    fn selections_commute_when_divisible() {
        for m in [24usize, 48, 96] {
            for k in [1usize, 2, 3, 4] {
                for j in [1usize, 2, 3, 4] {
                    if m % (k * j) != 0 {
                        continue;
                    }
                    let s = ramp_sino(m, 3);
                    let a = reduce_projections(&limit_angle(&s, k).unwrap(), j).unwrap();
                    let b = limit_angle(&reduce_projections(&s, j).unwrap(), k).unwrap();
                    assert_eq!(a.data, b.data);
                    assert_eq!(a.geometry, b.geometry);
                }
            }
        }
    }

    #[test]
    fn spec_validation_and_dispatch() {
        let s = ramp_sino(984, 4);
        let spec = DegradeSpec::selection(Mode::Angle, 4);
        assert_eq!(apply(&spec, &s).unwrap().geometry.n_views, 246);
        assert_eq!(
            apply(&DegradeSpec::selection(Mode::Projections, 1), &s).unwrap().data,
            s.data
        );
        assert!(DegradeSpec::selection(Mode::Angle, 3).validate().is_err());
        let mut bad = DegradeSpec::selection(Mode::Projections, 4);
        bad.seed = Some(1);
        assert!(bad.validate().is_err());
        let cur = DegradeSpec::current(4, &DoseModel::default(), 5);
        assert_eq!(apply(&cur, &s).unwrap(), apply(&cur, &s).unwrap());

        let json = r#"{"mode": "current", "factor": 8, "n0": 100000.0, "seed": 3}"#;
        let parsed: DegradeSpec = serde_json::from_str(json).unwrap();
        assert_eq!(parsed.mode, Mode::Current);
        assert_eq!(parsed.dose().unwrap().dose_factor, 8.0);
    }
}
