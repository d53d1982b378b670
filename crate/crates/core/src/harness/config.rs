use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::{DoseModel, Mode, ALLOWED_FACTORS};
use crate::error::{Error, Result};
use crate::phantom::PhantomSpec;
use crate::projector::ScanGeometry;
use crate::recon::{FilterSpec, Kernel};
use crate::triage::TrainConfig;

pub const CONFIG_FORMAT: &str = "ctsim-experiment/1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    /// `(train, validation, test)` counts for `n` images. Train and
    /// validation are rounded; test takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let n_train = (n as f64 * self.train).round() as usize;
        let n_val = ((n as f64 * self.validation).round() as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n);
        (n_train, n_val, n - n_train - n_val)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_images: usize,
    pub phantom: PhantomSpec,
    pub split: SplitFractions,
    pub master_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_images: 2500,
            phantom: PhantomSpec::default(),
            split: SplitFractions::default(),
            master_seed: 2019,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridEntry {
    pub mode: Mode,
    pub factor: u32,
}

impl GridEntry {
    pub fn tag(&self) -> String {
        variant_tag(self.mode, self.factor)
    }
}

pub const ORIGINAL_TAG: &str = "original";

pub fn variant_tag(mode: Mode, factor: u32) -> String {
    format!("{}×{}", mode.name(), factor)
}

/// File-system friendly form of a variant tag.
pub fn variant_dir(tag: &str) -> String {
    tag.replace('×', "_x")
}

pub fn default_grid() -> Vec<GridEntry> {
    Mode::ALL
        .iter()
        .flat_map(|&mode| [4, 8, 16].map(|factor| GridEntry { mode, factor }))
        .collect()
}

/// Contrast mapping from reconstructed attenuation to classifier input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Contrast {
    /// Attenuation values as reconstructed.
    Raw,
    /// Fixed HU display window `[low_hu, high_hu]`, clipped and rescaled to `[-1, 1]`.
    Window { low_hu: f64, high_hu: f64 },
    /// HU deviation from the local mean over a `kernel x kernel` box,
    /// clipped to `±half_width_hu` and divided by it.
    LocalWindow { kernel: usize, half_width_hu: f64 },
}

impl Contrast {
    pub fn validate(&self) -> Result<()> {
        let field = "reconstruction.classifier_contrast";
        match *self {
            Contrast::Raw => Ok(()),
            Contrast::Window { low_hu, high_hu } => {
                if low_hu.is_finite() && high_hu.is_finite() && low_hu < high_hu {
                    Ok(())
                } else {
                    Err(Error::config(field, "need low_hu < high_hu"))
                }
            }
            Contrast::LocalWindow { kernel, half_width_hu } => {
                if kernel % 2 == 1 && half_width_hu > 0.0 && half_width_hu.is_finite() {
                    Ok(())
                } else {
                    Err(Error::config(field, "need an odd kernel and a positive half width"))
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconConfig {
    pub filter: FilterSpec,
    pub n_pixels: usize,
    pub field_of_view: f64,
    /// Side of the classifier input, resampled from the reconstruction.
    pub classifier_side: usize,
    /// Centered field of view of the classifier input, cm.
    pub classifier_field_of_view: f64,
    pub classifier_contrast: Contrast,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            filter: FilterSpec::for_detectors(Kernel::RampHann, 256),
            n_pixels: 128,
            field_of_view: 25.0,
            classifier_side: 64,
            classifier_field_of_view: 20.0,
            classifier_contrast: Contrast::LocalWindow {
                kernel: 7,
                half_width_hu: 100.0,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub format_version: String,
    pub dataset: DatasetConfig,
    pub geometry: ScanGeometry,
    pub dose: DoseModel,
    pub grid: Vec<GridEntry>,
    pub training: TrainConfig,
    pub seeds: Vec<u64>,
    pub reconstruction: ReconConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            format_version: CONFIG_FORMAT.into(),
            dataset: DatasetConfig::default(),
            geometry: ScanGeometry::default(),
            dose: DoseModel::default(),
            grid: default_grid(),
            training: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            reconstruction: ReconConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT {
            return Err(Error::config(
                "format_version",
                format!("expected `{CONFIG_FORMAT}`, got `{}`", self.format_version),
            ));
        }
        let d = &self.dataset;
        if d.n_images < 30 {
            return Err(Error::config("dataset.n_images", "must be at least 30"));
        }
        let s = d.split;
        if [s.train, s.validation, s.test].iter().any(|f| !(0.0..=1.0).contains(f))
            || (s.train + s.validation + s.test - 1.0).abs() > 1e-9
        {
            return Err(Error::config("dataset.split", "fractions must lie in [0, 1] and sum to 1"));
        }
        let (n_train, n_val, n_test) = s.sizes(d.n_images);
        if n_train == 0 || n_val == 0 || n_test == 0 {
            return Err(Error::config("dataset.split", "every split must receive at least one image"));
        }
        d.phantom.validate()?;
        self.geometry.validate()?;
        if self.geometry.view_stride != 1 {
            return Err(Error::config("geometry.view_stride", "the acquired scan must have stride 1"));
        }
        self.dose.validate()?;
        if self.dose.dose_factor != 1.0 {
            return Err(Error::config("dose.dose_factor", "nominal dose factor must be 1"));
        }
        for (i, e) in self.grid.iter().enumerate() {
            if !ALLOWED_FACTORS.contains(&e.factor) {
                return Err(Error::config(
                    format!("grid[{i}].factor"),
                    format!("must be one of {ALLOWED_FACTORS:?}"),
                ));
            }
            if self.grid[..i].contains(e) {
                return Err(Error::config(format!("grid[{i}]"), "duplicate entry"));
            }
            if e.mode == Mode::Angle && self.geometry.n_views / e.factor as usize == 0 {
                return Err(Error::config(format!("grid[{i}].factor"), "keeps no views"));
            }
        }
        self.training.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        let r = &self.reconstruction;
        r.filter.validate(self.geometry.n_detectors)?;
        if r.n_pixels < 8 || !(r.field_of_view > 0.0) {
            return Err(Error::config("reconstruction.n_pixels", "need n_pixels >= 8 and a positive field of view"));
        }
        if r.classifier_side < 16 || r.classifier_side % 2 != 0 {
            return Err(Error::config("reconstruction.classifier_side", "must be even and >= 16"));
        }
        if !(r.classifier_field_of_view > 0.0 && r.classifier_field_of_view <= r.field_of_view) {
            return Err(Error::config(
                "reconstruction.classifier_field_of_view",
                "must be positive and within the reconstruction field of view",
            ));
        }
        r.classifier_contrast.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hash of everything that affects results (the output directory does not).
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        crate::triage::train::hash_json(&c)
    }

    /// Hash of the settings that determine the generated dataset. The
    /// classifier input settings are applied at load time and excluded.
    pub fn dataset_hash(&self) -> String {
        let r = &self.reconstruction;
        crate::triage::train::hash_json(&(
            &self.dataset,
            &self.geometry,
            &self.dose,
            (&r.filter, r.n_pixels, r.field_of_view),
        ))
    }

    /// Hash of the settings that turn stored reconstructions into classifier inputs.
    pub fn classifier_input_hash(&self) -> String {
        let r = &self.reconstruction;
        crate::triage::train::hash_json(&(r.classifier_side, r.classifier_field_of_view, r.classifier_contrast))
    }

    pub fn angle_factors(&self) -> Vec<u32> {
        self.grid
            .iter()
            .filter(|e| e.mode == Mode::Angle)
            .map(|e| e.factor)
            .collect()
    }
}

/// Child seed for the stream identified by `path` under `master`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(b"ctsim-seed");
    h.update(master.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed-stream domains under the master seed.
pub mod stream {
    pub const PHANTOM: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const SPLIT: u64 = 3;
}
