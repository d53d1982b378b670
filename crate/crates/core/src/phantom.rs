//! Randomized head-like phantoms built from additive attenuation ellipses.
//!
//! A phantom is an ordered list of ellipses whose attenuation contributions
//! add pointwise: a bone-valued skull ellipse, a brain ellipse that brings
//! the interior back down to water, and optionally one lesion ellipse of
//! signed contrast inside the brain.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

pub const PHANTOM_FORMAT: &str = "ctsim-phantom/1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center_x: f64,
    pub center_y: f64,
    pub semi_axis_a: f64,
    pub semi_axis_b: f64,
    /// Counter-clockwise rotation of the `a` axis from `+x`, in `[0, pi)`.
    pub rotation: f64,
    pub attenuation_delta: f64,
}

impl Ellipse {
    pub fn new(
        center: (f64, f64),
        semi_axes: (f64, f64),
        rotation: f64,
        attenuation_delta: f64,
    ) -> Result<Self> {
        let (a, b) = semi_axes;
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::Domain(format!(
                "ellipse semi-axes must be positive, got ({a}, {b})"
            )));
        }
        if !(center.0.is_finite() && center.1.is_finite() && attenuation_delta.is_finite()) {
            return Err(Error::Domain("ellipse parameters must be finite".into()));
        }
        Ok(Ellipse {
            center_x: center.0,
            center_y: center.1,
            semi_axis_a: a,
            semi_axis_b: b,
            rotation: normalize_rotation(rotation),
            attenuation_delta,
        })
    }

    /// A disk centered at the origin.
    pub fn disk(radius: f64, attenuation_delta: f64) -> Result<Self> {
        Self::new((0.0, 0.0), (radius, radius), 0.0, attenuation_delta)
    }

    /// Value of the normalized quadratic form; `<= 1` inside.
    #[inline]
    pub fn quadratic_form(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.rotation.sin_cos();
        let dx = x - self.center_x;
        let dy = y - self.center_y;
        let u = (dx * c + dy * s) / self.semi_axis_a;
        let v = (-dx * s + dy * c) / self.semi_axis_b;
        u * u + v * v
    }

    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.quadratic_form(x, y) <= 1.0
    }

    /// Point on the boundary at parameter `t` (radians).
    pub fn boundary_point(&self, t: f64) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        let u = self.semi_axis_a * t.cos();
        let v = self.semi_axis_b * t.sin();
        (self.center_x + u * c - v * s, self.center_y + u * s + v * c)
    }

    pub fn area(&self) -> f64 {
        PI * self.semi_axis_a * self.semi_axis_b
    }

    /// Same ellipse rotated counter-clockwise about the origin by `phi`.
    pub fn rotated_about_origin(&self, phi: f64) -> Ellipse {
        let (s, c) = phi.sin_cos();
        Ellipse {
            center_x: self.center_x * c - self.center_y * s,
            center_y: self.center_x * s + self.center_y * c,
            rotation: normalize_rotation(self.rotation + phi),
            ..*self
        }
    }
}

fn normalize_rotation(r: f64) -> f64 {
    let r = r.rem_euclid(PI);
    if r >= PI {
        0.0
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Abnormal => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub format_version: String,
    pub ellipses: Vec<Ellipse>,
    pub label: Label,
    pub lesion_index: Option<usize>,
    pub seed: u64,
}

impl Phantom {
    pub fn from_ellipses(ellipses: Vec<Ellipse>) -> Self {
        Phantom {
            format_version: PHANTOM_FORMAT.to_string(),
            ellipses,
            label: Label::Normal,
            lesion_index: None,
            seed: 0,
        }
    }

    pub fn lesion(&self) -> Option<&Ellipse> {
        self.lesion_index.map(|i| &self.ellipses[i])
    }

    /// Index of the brain-interior ellipse for phantoms built by
    /// [`sample_phantom`] and [`reference_head`].
    pub const BRAIN_INDEX: usize = 1;

    pub fn brain(&self) -> Option<&Ellipse> {
        self.ellipses.get(Self::BRAIN_INDEX)
    }

    pub fn attenuation_at(&self, x: f64, y: f64) -> f64 {
        self.ellipses
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.attenuation_delta)
            .sum()
    }

    /// Integral of attenuation over the plane.
    pub fn total_mass(&self) -> f64 {
        self.ellipses
            .iter()
            .map(|e| e.area() * e.attenuation_delta)
            .sum()
    }

    pub fn rotated_about_origin(&self, phi: f64) -> Phantom {
        Phantom {
            ellipses: self
                .ellipses
                .iter()
                .map(|e| e.rotated_about_origin(phi))
                .collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.label == Label::Abnormal && self.lesion_index.is_none()
            || self.label == Label::Normal && self.lesion_index.is_some()
        {
            return Err(Error::Integrity(
                "phantom label and lesion presence disagree".into(),
            ));
        }
        if let Some(i) = self.lesion_index {
            if i >= self.ellipses.len() {
                return Err(Error::Integrity(format!("lesion index {i} out of range")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Phantom = serde_json::from_str(text)?;
        if p.format_version != PHANTOM_FORMAT {
            return Err(Error::Integrity(format!(
                "unsupported phantom format `{}`",
                p.format_version
            )));
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub min: f64,
    pub max: f64,
}

impl Span {
    pub const fn new(min: f64, max: f64) -> Self {
        Span { min, max }
    }

    fn check(&self, field: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.min > self.max {
            return Err(Error::config(
                field,
                format!("range [{}, {}] is empty or non-finite", self.min, self.max),
            ));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub field_of_view: f64,
    pub mu_water: f64,
    pub mu_bone: f64,
    /// Outer head semi-axis along the (unrotated) x direction.
    pub head_semi_major: Span,
    pub head_semi_minor: Span,
    pub skull_thickness: Span,
    /// Applied independently to the x and y head offsets.
    pub center_jitter: Span,
    pub rotation_jitter: Span,
    pub lesion_probability: f64,
    /// Contrast magnitude; the sign is drawn uniformly.
    pub lesion_contrast: Span,
    pub lesion_radius: Span,
    /// Minimum clearance between the lesion and the inner skull surface.
    pub lesion_margin: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            field_of_view: 25.0,
            mu_water: 0.19,
            mu_bone: 0.38,
            head_semi_major: Span::new(8.0, 9.0),
            head_semi_minor: Span::new(6.5, 7.5),
            skull_thickness: Span::new(0.4, 0.8),
            center_jitter: Span::new(-0.4, 0.4),
            rotation_jitter: Span::new(-0.2, 0.2),
            lesion_probability: 0.5522,
            lesion_contrast: Span::new(0.01, 0.05),
            lesion_radius: Span::new(1.0, 2.2),
            lesion_margin: 0.3,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, field: &str| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        };
        positive(self.field_of_view, "field_of_view")?;
        positive(self.mu_water, "mu_water")?;
        positive(self.mu_bone, "mu_bone")?;
        if !(0.0..=1.0).contains(&self.lesion_probability) {
            return Err(Error::config(
                "lesion_probability",
                format!("must lie in [0, 1], got {}", self.lesion_probability),
            ));
        }
        self.head_semi_major.check("head_semi_major")?;
        self.head_semi_minor.check("head_semi_minor")?;
        self.skull_thickness.check("skull_thickness")?;
        self.center_jitter.check("center_jitter")?;
        self.rotation_jitter.check("rotation_jitter")?;
        self.lesion_contrast.check("lesion_contrast")?;
        self.lesion_radius.check("lesion_radius")?;
        positive(self.head_semi_minor.min, "head_semi_minor")?;
        positive(self.skull_thickness.min, "skull_thickness")?;
        positive(self.lesion_radius.min, "lesion_radius")?;
        if self.lesion_contrast.min < 0.0 {
            return Err(Error::config("lesion_contrast", "magnitudes must be >= 0"));
        }
        if self.lesion_contrast.max > self.mu_water {
            return Err(Error::config(
                "lesion_contrast",
                "hypodense lesions would produce negative attenuation",
            ));
        }
        if !(self.lesion_margin >= 0.0) {
            return Err(Error::config("lesion_margin", "must be >= 0"));
        }
        if self.mu_bone < self.mu_water {
            return Err(Error::config("mu_bone", "must be >= mu_water"));
        }
        // The largest lesion must fit inside the smallest brain.
        let smallest_brain = self.head_semi_minor.min - self.skull_thickness.max;
        if smallest_brain <= 2.0 * (self.lesion_radius.max + self.lesion_margin) {
            return Err(Error::config(
                "lesion_radius",
                "largest lesion does not fit inside the smallest brain",
            ));
        }
        let reach = self.head_semi_major.max.max(self.head_semi_minor.max)
            + self.center_jitter.min.abs().max(self.center_jitter.max.abs()) * 2f64.sqrt();
        if reach > 0.5 * self.field_of_view {
            return Err(Error::config(
                "head_semi_major",
                "head can extend beyond the field of view",
            ));
        }
        Ok(())
    }
}

fn head_ellipses(
    spec: &PhantomSpec,
    center: (f64, f64),
    axes: (f64, f64),
    thickness: f64,
    rotation: f64,
) -> Result<[Ellipse; 2]> {
    let skull = Ellipse::new(center, axes, rotation, spec.mu_bone)?;
    let brain = Ellipse::new(
        center,
        (axes.0 - thickness, axes.1 - thickness),
        rotation,
        spec.mu_water - spec.mu_bone,
    )?;
    Ok([skull, brain])
}

/// The unjittered, lesion-free head at the midpoint of every spec range.
pub fn reference_head(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mid = |s: Span| 0.5 * (s.min + s.max);
    let ellipses = head_ellipses(
        spec,
        (0.0, 0.0),
        (mid(spec.head_semi_major), mid(spec.head_semi_minor)),
        mid(spec.skull_thickness),
        0.0,
    )?;
    Ok(Phantom::from_ellipses(ellipses.to_vec()))
}

/// Deterministically samples one phantom from `spec` using `seed`.
pub fn sample_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let a = spec.head_semi_major.draw(&mut rng);
    let b = spec.head_semi_minor.draw(&mut rng);
    let thickness = spec.skull_thickness.draw(&mut rng);
    let cx = spec.center_jitter.draw(&mut rng);
    let cy = spec.center_jitter.draw(&mut rng);
    let rotation = spec.rotation_jitter.draw(&mut rng);
    let [skull, brain] = head_ellipses(spec, (cx, cy), (a, b), thickness, rotation)?;

    let abnormal = rng.random_bool(spec.lesion_probability);
    let mut ellipses = vec![skull, brain];
    let mut lesion_index = None;
    if abnormal {
        let lesion = sample_lesion(spec, &brain, &mut rng)?;
        lesion_index = Some(ellipses.len());
        ellipses.push(lesion);
    }

    Ok(Phantom {
        format_version: PHANTOM_FORMAT.to_string(),
        ellipses,
        label: if abnormal {
            Label::Abnormal
        } else {
            Label::Normal
        },
        lesion_index,
        seed,
    })
}

const CONTAINMENT_SAMPLES: usize = 64;

fn sample_lesion(spec: &PhantomSpec, brain: &Ellipse, rng: &mut ChaCha8Rng) -> Result<Ellipse> {
    let ra = spec.lesion_radius.draw(rng);
    let rb = spec.lesion_radius.draw(rng);
    let orientation = rng.random_range(0.0..PI);
    let magnitude = spec.lesion_contrast.draw(rng);
    let contrast = if rng.random_bool(0.5) {
        magnitude
    } else {
        -magnitude
    };

    // Inner ellipse the lesion boundary must stay within.
    let clearance = Ellipse {
        semi_axis_a: brain.semi_axis_a - spec.lesion_margin,
        semi_axis_b: brain.semi_axis_b - spec.lesion_margin,
        ..*brain
    };
    let reach = ra.max(rb);
    let (s, c) = brain.rotation.sin_cos();
    loop {
        // Uniform point in the brain frame, shrunk by the lesion reach.
        let u = rng.random_range(-1.0..1.0);
        let v = rng.random_range(-1.0..1.0);
        if u * u + v * v > 1.0 {
            continue;
        }
        let du = u * (clearance.semi_axis_a - reach);
        let dv = v * (clearance.semi_axis_b - reach);
        let center = (
            brain.center_x + du * c - dv * s,
            brain.center_y + du * s + dv * c,
        );
        let lesion = Ellipse::new(center, (ra, rb), orientation, contrast)?;
        let inside = (0..CONTAINMENT_SAMPLES).all(|k| {
            let t = 2.0 * PI * k as f64 / CONTAINMENT_SAMPLES as f64;
            let (x, y) = lesion.boundary_point(t);
            clearance.contains(x, y)
        });
        if inside {
            return Ok(lesion);
        }
    }
}

/// Point-samples the phantom at pixel centers.
pub fn rasterize(phantom: &Phantom, n_pixels: usize, field_of_view: f64) -> Result<ImageGrid> {
    if n_pixels < 8 {
        return Err(Error::config("n_pixels", "must be at least 8"));
    }
    let mut grid = ImageGrid::zeros(n_pixels, field_of_view)?;
    for row in 0..n_pixels {
        let y = grid.y_of_row(row);
        for col in 0..n_pixels {
            let x = grid.x_of_col(col);
            grid.data[row * n_pixels + col] = phantom.attenuation_at(x, y);
        }
    }
    grid.provenance.push(format!("rasterize(n={n_pixels})"));
    Ok(grid)
}

pub fn attenuation_to_hu(mu: f64, mu_water: f64) -> Result<f64> {
    if !(mu_water > 0.0) {
        return Err(Error::Domain(format!("mu_water must be positive, got {mu_water}")));
    }
    Ok(1000.0 * (mu - mu_water) / mu_water)
}

pub fn hu_to_attenuation(hu: f64, mu_water: f64) -> Result<f64> {
    if !(mu_water > 0.0) {
        return Err(Error::Domain(format!("mu_water must be positive, got {mu_water}")));
    }
    Ok(mu_water * (1.0 + hu / 1000.0))
}
