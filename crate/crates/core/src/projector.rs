//! Parallel-beam forward projection.
//!
//! Row `i` of a sinogram holds the line integrals at view angle
//! `theta_i`; detector `j` sits at signed offset `s_j` along the unit
//! vector `(cos theta, sin theta)`, and each ray runs along
//! `(-sin theta, cos theta)`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::phantom::{Ellipse, Phantom};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub n_views: usize,
    pub angular_range: f64,
    pub start_angle: f64,
    pub n_detectors: usize,
    pub detector_spacing: f64,
    /// Angular increment between consecutive views of the original scan.
    pub angle_step: f64,
    /// Row `i` was acquired at original view index `i * view_stride`.
    pub view_stride: usize,
}

impl Default for ScanGeometry {
    fn default() -> Self {
        ScanGeometry::new(984, PI, 0.0, 256, 25.0 / 256.0).expect("default geometry is valid")
    }
}

impl ScanGeometry {
    pub fn new(
        n_views: usize,
        angular_range: f64,
        start_angle: f64,
        n_detectors: usize,
        detector_spacing: f64,
    ) -> Result<Self> {
        let g = ScanGeometry {
            n_views,
            angular_range,
            start_angle,
            n_detectors,
            detector_spacing,
            angle_step: angular_range / n_views.max(1) as f64,
            view_stride: 1,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views < 1 {
            return Err(Error::config("n_views", "must be at least 1"));
        }
        if self.n_detectors < 2 {
            return Err(Error::config("n_detectors", "must be at least 2"));
        }
        if !(self.detector_spacing > 0.0 && self.detector_spacing.is_finite()) {
            return Err(Error::config("detector_spacing", "must be positive"));
        }
        if !(self.angular_range > 0.0 && self.angular_range <= PI) {
            return Err(Error::config("angular_range", "must lie in (0, pi]"));
        }
        if !self.start_angle.is_finite() {
            return Err(Error::config("start_angle", "must be finite"));
        }
        if !(self.angle_step > 0.0 && self.angle_step.is_finite()) {
            return Err(Error::config("angle_step", "must be positive"));
        }
        if self.view_stride < 1 {
            return Err(Error::config("view_stride", "must be at least 1"));
        }
        Ok(())
    }

    #[inline]
    pub fn view_angle(&self, view: usize) -> f64 {
        self.start_angle + (view * self.view_stride) as f64 * self.angle_step
    }

    /// Angular spacing between consecutive rows.
    #[inline]
    pub fn view_spacing(&self) -> f64 {
        self.view_stride as f64 * self.angle_step
    }

    #[inline]
    pub fn detector_offset(&self, det: usize) -> f64 {
        (det as f64 - 0.5 * (self.n_detectors as f64 - 1.0)) * self.detector_spacing
    }

    /// Half the physical width of the detector array.
    pub fn half_width(&self) -> f64 {
        0.5 * self.n_detectors as f64 * self.detector_spacing
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub geometry: ScanGeometry,
    /// View-major `n_views x n_detectors` line integrals.
    pub data: Vec<f64>,
    pub provenance: Vec<String>,
}

impl Sinogram {
    pub fn zeros(geometry: ScanGeometry) -> Self {
        let len = geometry.n_views * geometry.n_detectors;
        Sinogram {
            geometry,
            data: vec![0.0; len],
            provenance: Vec::new(),
        }
    }

    pub fn from_data(geometry: ScanGeometry, data: Vec<f64>, provenance: Vec<String>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.n_views * geometry.n_detectors {
            return Err(Error::Domain(format!(
                "sinogram payload has {} values, geometry expects {}",
                data.len(),
                geometry.n_views * geometry.n_detectors
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("sinogram contains non-finite values".into()));
        }
        Ok(Sinogram {
            geometry,
            data,
            provenance,
        })
    }

    #[inline]
    pub fn row(&self, view: usize) -> &[f64] {
        let n = self.geometry.n_detectors;
        &self.data[view * n..(view + 1) * n]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.geometry.n_detectors)
    }

    pub fn tagged(mut self, tag: impl Into<String>) -> Self {
        self.provenance.push(tag.into());
        self
    }
}

/// Closed-form line integral of one ellipse along the ray at `angle`,
/// signed detector offset `offset`.
pub fn radon_ellipse(e: &Ellipse, angle: f64, offset: f64) -> f64 {
    EllipseView::new(e, angle).integral(offset)
}

/// Angle-dependent terms of an ellipse's projection at one view.
struct EllipseView {
    center: f64,
    w2: f64,
    scale: f64,
}

impl EllipseView {
    fn new(e: &Ellipse, angle: f64) -> Self {
        let (sin_t, cos_t) = angle.sin_cos();
        let (sl, cl) = (angle - e.rotation).sin_cos();
        let a2 = e.semi_axis_a * e.semi_axis_a;
        let b2 = e.semi_axis_b * e.semi_axis_b;
        let w2 = a2 * cl * cl + b2 * sl * sl;
        EllipseView {
            center: e.center_x * cos_t + e.center_y * sin_t,
            w2,
            scale: 2.0 * e.attenuation_delta * e.semi_axis_a * e.semi_axis_b / w2,
        }
    }

    #[inline]
    fn integral(&self, offset: f64) -> f64 {
        let shifted = offset - self.center;
        let gap = self.w2 - shifted * shifted;
        if gap <= 0.0 {
            0.0
        } else {
            self.scale * gap.sqrt()
        }
    }
}

/// Support half-width of `e` projected on the detector axis at `angle`,
/// measured from the origin.
fn projected_reach(e: &Ellipse, angle: f64) -> f64 {
    let (sin_t, cos_t) = angle.sin_cos();
    let local = angle - e.rotation;
    let (sl, cl) = local.sin_cos();
    let w = (e.semi_axis_a.powi(2) * cl * cl + e.semi_axis_b.powi(2) * sl * sl).sqrt();
    (e.center_x * cos_t + e.center_y * sin_t).abs() + w
}

fn check_phantom_fits(phantom: &Phantom, geom: &ScanGeometry) -> Result<()> {
    let limit = geom.half_width();
    for (k, e) in phantom.ellipses.iter().enumerate() {
        for view in 0..geom.n_views {
            let reach = projected_reach(e, geom.view_angle(view));
            if reach > limit {
                return Err(Error::Truncation(format!(
                    "ellipse {k} reaches {reach:.4} cm at view {view}, detector half-width is {limit:.4} cm"
                )));
            }
        }
    }
    Ok(())
}

pub fn forward_project_analytic(phantom: &Phantom, geom: &ScanGeometry) -> Result<Sinogram> {
    geom.validate()?;
    check_phantom_fits(phantom, geom)?;
    let mut sino = Sinogram::zeros(geom.clone());
    sino.data
        .par_chunks_mut(geom.n_detectors)
        .enumerate()
        .for_each(|(view, row)| {
            let angle = geom.view_angle(view);
            let views: Vec<EllipseView> =
                phantom.ellipses.iter().map(|e| EllipseView::new(e, angle)).collect();
            for (det, out) in row.iter_mut().enumerate() {
                let s = geom.detector_offset(det);
                *out = views.iter().map(|v| v.integral(s)).sum();
            }
        });
    Ok(sino.tagged("analytic-projection"))
}

/// Joseph-style projection: march along the grid axis most aligned with the
/// ray, interpolating linearly between the two nearest pixel centers.
pub fn forward_project_grid(image: &ImageGrid, geom: &ScanGeometry) -> Result<Sinogram> {
    geom.validate()?;
    let n = image.n_pixels;
    let h = image.pixel_size();
    let limit = geom.half_width();
    for row in 0..n {
        for col in 0..n {
            if image.get(row, col) != 0.0 {
                let r = image.x_of_col(col).hypot(image.y_of_row(row));
                if r > limit {
                    return Err(Error::Truncation(format!(
                        "pixel ({row}, {col}) at radius {r:.4} cm lies outside the detector half-width {limit:.4} cm"
                    )));
                }
            }
        }
    }

    let half_fov = 0.5 * image.field_of_view;
    let data = &image.data;
    let mut sino = Sinogram::zeros(geom.clone());
    sino.data
        .par_chunks_mut(geom.n_detectors)
        .enumerate()
        .for_each(|(view, out_row)| {
            let (sin_t, cos_t) = geom.view_angle(view).sin_cos();
            let march_rows = cos_t.abs() >= sin_t.abs();
            for (det, out) in out_row.iter_mut().enumerate() {
                let s = geom.detector_offset(det);
                let mut acc = 0.0;
                if march_rows {
                    // y fixed per image row; x = (s - y sin) / cos.
                    let weight = h / cos_t.abs();
                    for r in 0..n {
                        let y = half_fov - (r as f64 + 0.5) * h;
                        let x = (s - y * sin_t) / cos_t;
                        let u = (x + half_fov) / h - 0.5;
                        acc += weight * lerp_line(&data[r * n..(r + 1) * n], u);
                    }
                } else {
                    // x fixed per image column; y = (s - x cos) / sin.
                    let weight = h / sin_t.abs();
                    for c in 0..n {
                        let x = (c as f64 + 0.5) * h - half_fov;
                        let y = (s - x * cos_t) / sin_t;
                        let v = (half_fov - y) / h - 0.5;
                        acc += weight * lerp_column(data, n, c, v);
                    }
                }
                *out = acc;
            }
        });
    Ok(sino.tagged("grid-projection"))
}

#[inline]
fn lerp_line(line: &[f64], u: f64) -> f64 {
    let n = line.len() as isize;
    let i0 = u.floor();
    let f = u - i0;
    let i0 = i0 as isize;
    let at = |i: isize| if i < 0 || i >= n { 0.0 } else { line[i as usize] };
    at(i0) * (1.0 - f) + at(i0 + 1) * f
}

#[inline]
fn lerp_column(data: &[f64], n: usize, col: usize, v: f64) -> f64 {
    let i0 = v.floor();
    let f = v - i0;
    let i0 = i0 as isize;
    let at = |i: isize| {
        if i < 0 || i >= n as isize {
            0.0
        } else {
            data[i as usize * n + col]
        }
    };
    at(i0) * (1.0 - f) + at(i0 + 1) * f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{rasterize, reference_head, PhantomSpec};

    fn small_geom(n_views: usize, n_det: usize, fov: f64) -> ScanGeometry {
        ScanGeometry::new(n_views, PI, 0.0, n_det, fov / n_det as f64).unwrap()
    }

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn geometry_rejects_bad_fields() {
        assert!(ScanGeometry::new(0, PI, 0.0, 16, 0.1).is_err());
        assert!(ScanGeometry::new(8, PI, 0.0, 1, 0.1).is_err());
        assert!(ScanGeometry::new(8, PI, 0.0, 16, 0.0).is_err());
        assert!(ScanGeometry::new(8, 4.0, 0.0, 16, 0.1).is_err());
    }

    #[test]
    fn view_angles_follow_step() {
        let g = ScanGeometry::default();
        assert_eq!(g.view_angle(0), 0.0);
        assert!((g.view_angle(492) - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn disk_chord() {
        let e = Ellipse::disk(2.0, 0.5).unwrap();
        for &theta in &[0.0, 0.4, 1.3, 2.9] {
            let v = radon_ellipse(&e, theta, 1.0);
            assert!((v - 2.0 * 0.5 * 3f64.sqrt()).abs() < 1e-14);
            assert_eq!(radon_ellipse(&e, theta, 2.0), 0.0);
            assert_eq!(radon_ellipse(&e, theta, -2.5), 0.0);
        }
    }

    #[test]
    fn ellipse_formula_value() {
        let e = Ellipse::new((0.0, 0.0), (2.0, 1.0), 0.0, 1.0).unwrap();
        assert!((radon_ellipse(&e, 0.0, 0.0) - 2.0).abs() < 1e-15);
        // At theta = 0 the ray runs along +y (chord 2b); at pi/2 along x (chord 2a).
        assert!((radon_ellipse(&e, PI / 2.0, 0.0) - 4.0).abs() < 1e-14);
        assert_eq!(radon_ellipse(&e, 0.0, 2.0), 0.0);
    }

    #[test]
    fn rotated_offcenter_ellipse_matches_ray_march() {
        let e = Ellipse::new((1.3, -0.7), (2.1, 0.9), 0.6, 0.8).unwrap();
        let fov = 10.0;
        let step = fov / 1000.0;
        for &(theta, s) in &[(0.3, 0.5), (1.9, -1.0), (2.7, -1.0), (0.0, 1.2)] {
            let exact = radon_ellipse(&e, theta, s);
            assert!(exact > 0.0);
            let (sin_t, cos_t) = f64::sin_cos(theta);
            // Midpoint rule on the indicator, refined near the chord ends is
            // unnecessary at this step.
            let mut acc = 0.0;
            let n = (2.0 * fov / step) as usize;
            for k in 0..n {
                let t = -fov + (k as f64 + 0.5) * step;
                let x = s * cos_t - t * sin_t;
                let y = s * sin_t + t * cos_t;
                if e.contains(x, y) {
                    acc += e.attenuation_delta * step;
                }
            }
            assert!((acc - exact).abs() / exact < 1e-3, "theta {theta}: {acc} vs {exact}");
        }
    }

    #[test]
    fn analytic_refuses_truncation() {
        let p = Phantom::from_ellipses(vec![Ellipse::disk(5.0, 1.0).unwrap()]);
        let g = small_geom(16, 32, 8.0);
        assert!(matches!(
            forward_project_analytic(&p, &g),
            Err(Error::Truncation(_))
        ));
    }

    #[test]
    fn grid_projector_zero_and_scaling() {
        let g = small_geom(30, 64, 12.0);
        let zero = ImageGrid::zeros(32, 8.0).unwrap();
        let s = forward_project_grid(&zero, &g).unwrap();
        assert!(s.data.iter().all(|&v| v == 0.0));

        let p = reference_head(&PhantomSpec::default()).unwrap();
        let img = rasterize(&p, 32, 24.0).unwrap();
        let g = small_geom(30, 64, 25.0);
        let s1 = forward_project_grid(&img, &g).unwrap();
        let s2 = forward_project_grid(&img.scaled(2.0), &g).unwrap();
        for (a, b) in s1.data.iter().zip(&s2.data) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn grid_matches_analytic_disk() {
        let fov = 20.0;
        let p = Phantom::from_ellipses(vec![Ellipse::disk(6.0, 0.2).unwrap()]);
        let g = small_geom(90, 256, fov);
        let analytic = forward_project_analytic(&p, &g).unwrap();
        let grid = forward_project_grid(&rasterize(&p, 256, fov).unwrap(), &g).unwrap();
        assert!(rel_l2(&grid.data, &analytic.data) < 0.01);
    }

    #[test]
    fn mass_is_conserved_per_view() {
        let p = reference_head(&PhantomSpec::default()).unwrap();
        let g = ScanGeometry::new(64, PI, 0.0, 256, 25.0 / 256.0).unwrap();
        let sino = forward_project_analytic(&p, &g).unwrap();
        let mass = p.total_mass();
        for row in sino.rows() {
            let m: f64 = row.iter().sum::<f64>() * g.detector_spacing;
            assert!((m - mass).abs() / mass < 1e-3);
        }
    }

    #[test]
    fn rotation_shifts_start_angle() {
        let spec = PhantomSpec {
            lesion_probability: 1.0,
            ..PhantomSpec::default()
        };
        let p = crate::phantom::sample_phantom(&spec, 5).unwrap();
        let phi = 0.37;
        let g = small_geom(60, 128, 25.0);
        let mut shifted = g.clone();
        shifted.start_angle -= phi;
        let rotated = forward_project_analytic(&p.rotated_about_origin(phi), &g).unwrap();
        let reference = forward_project_analytic(&p, &shifted).unwrap();
        assert!(rel_l2(&rotated.data, &reference.data) < 1e-10);
    }

    #[test]
    fn grid_error_shrinks_with_resolution() {
        let p = reference_head(&PhantomSpec::default()).unwrap();
        let g = small_geom(45, 256, 25.0);
        let analytic = forward_project_analytic(&p, &g).unwrap();
        let errs: Vec<f64> = [64, 128, 256]
            .iter()
            .map(|&n| {
                let img = rasterize(&p, n, 25.0).unwrap();
                rel_l2(&forward_project_grid(&img, &g).unwrap().data, &analytic.data)
            })
            .collect();
        assert!(errs[0] >= errs[1] && errs[1] >= errs[2], "{errs:?}");
    }
}
