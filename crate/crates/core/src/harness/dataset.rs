use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, stream, variant_dir, Contrast, ExperimentConfig, ORIGINAL_TAG};
use crate::container;
use crate::degrade::{self, DegradeSpec, Mode};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::phantom::{sample_phantom, Label, Phantom};
use crate::projector::{forward_project_analytic, Sinogram};
use crate::recon::fbp;
use crate::triage::Dataset;

pub const MANIFEST_FORMAT: &str = "ctsim-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: usize,
    pub seed: u64,
    pub label: Label,
    pub split: Split,
    pub phantom: String,
    /// Noiseless analytic sinogram.
    pub clean_sinogram: String,
    /// Nominal-dose sinogram behind the "original" reconstruction.
    pub original_sinogram: String,
    /// Reconstruction path per variant tag.
    pub images: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub dataset_hash: String,
    pub master_seed: u64,
    pub n_images: usize,
    pub abnormal_count: usize,
    pub prevalence: f64,
    pub split_sizes: BTreeMap<String, usize>,
    pub variant_tags: Vec<String>,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn path(root: &Path) -> PathBuf {
        root.join(MANIFEST_FILE)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = Self::path(root);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
        if m.format_version != MANIFEST_FORMAT {
            return Err(Error::Integrity(format!(
                "unsupported manifest format `{}`",
                m.format_version
            )));
        }
        m.check_splits()?;
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = Self::path(root);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        container::write_bytes(&path, text.as_bytes())
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.id)
            .collect()
    }

    pub fn has_variant(&self, tag: &str) -> bool {
        self.variant_tags.iter().any(|t| t == tag)
    }

    /// Ids are unique and each belongs to exactly one split; every listed
    /// variant exists for every id.
    pub fn check_splits(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.id != i {
                return Err(Error::Integrity(format!("record {i} carries id {}", r.id)));
            }
            for tag in &self.variant_tags {
                if !r.images.contains_key(tag) {
                    return Err(Error::Integrity(format!("image {} lacks variant `{tag}`", r.id)));
                }
            }
        }
        Ok(())
    }
}

fn image_path(tag: &str, id: usize) -> String {
    format!("images/{}/{id:05}.ctimg", variant_dir(tag))
}

/// Rounds every entry to binary32 so in-memory and stored sinograms agree.
fn quantized(mut sino: Sinogram) -> Sinogram {
    sino.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    sino
}

fn reconstruct(sino: &Sinogram, cfg: &ExperimentConfig) -> Result<ImageGrid> {
    let r = &cfg.reconstruction;
    fbp(sino, r.n_pixels, r.field_of_view, &r.filter)
}

/// Seed of the quantum-noise stream at dose factor `factor` for image `id`;
/// factor 1 is the nominal scan.
pub fn noise_seed(master: u64, id: usize, factor: u32) -> u64 {
    derive_seed(master, &[stream::NOISE, id as u64, factor as u64])
}

pub fn phantom_seed(master: u64, id: usize) -> u64 {
    derive_seed(master, &[stream::PHANTOM, id as u64])
}

/// Split of every id: a seeded shuffle, then train, validation and test
/// in that order.
pub fn assign_splits(cfg: &ExperimentConfig) -> Vec<Split> {
    let n = cfg.dataset.n_images;
    let (n_train, n_val, _) = cfg.dataset.split.sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.dataset.master_seed, &[stream::SPLIT]));
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Test; n];
    for (rank, &id) in order.iter().enumerate() {
        splits[id] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    splits
}

/// Samples, projects and reconstructs the nominal-dose "original" variant
/// of every image, writing files and the manifest under the output directory.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let root = &cfg.output_dir;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let master = cfg.dataset.master_seed;
    let splits = assign_splits(cfg);

    let records: Vec<ImageRecord> = (0..cfg.dataset.n_images)
        .into_par_iter()
        .map(|id| -> Result<ImageRecord> {
            let seed = phantom_seed(master, id);
            let phantom = sample_phantom(&cfg.dataset.phantom, seed)?;
            let clean = quantized(forward_project_analytic(&phantom, &cfg.geometry)?);
            let original = quantized(degrade::add_quantum_noise(
                &clean,
                &cfg.dose,
                noise_seed(master, id, 1),
            )?);
            let image = reconstruct(&original, cfg)?;

            let record = ImageRecord {
                id,
                seed,
                label: phantom.label,
                split: splits[id],
                phantom: format!("phantoms/{id:05}.json"),
                clean_sinogram: format!("sinograms/{id:05}_clean.ctsino"),
                original_sinogram: format!("sinograms/{id:05}_original.ctsino"),
                images: BTreeMap::from([(ORIGINAL_TAG.to_string(), image_path(ORIGINAL_TAG, id))]),
            };
            container::write_bytes(&root.join(&record.phantom), phantom.to_json()?.as_bytes())?;
            container::write_sinogram(&root.join(&record.clean_sinogram), &clean)?;
            container::write_sinogram(&root.join(&record.original_sinogram), &original)?;
            container::write_image(&root.join(&record.images[ORIGINAL_TAG]), &image)?;
            Ok(record)
        })
        .collect::<Result<_>>()?;

    let abnormal_count = records.iter().filter(|r| r.label == Label::Abnormal).count();
    let (n_train, n_val, n_test) = cfg.dataset.split.sizes(cfg.dataset.n_images);
    let manifest = DatasetManifest {
        format_version: MANIFEST_FORMAT.into(),
        dataset_hash: cfg.dataset_hash(),
        master_seed: master,
        n_images: cfg.dataset.n_images,
        abnormal_count,
        prevalence: abnormal_count as f64 / cfg.dataset.n_images as f64,
        split_sizes: BTreeMap::from([
            ("train".to_string(), n_train),
            ("validation".to_string(), n_val),
            ("test".to_string(), n_test),
        ]),
        variant_tags: vec![ORIGINAL_TAG.into()],
        records,
    };
    manifest.save(root)?;
    Ok(manifest)
}

/// Degradation applied to image `id` for a grid entry. Reduced current is
/// simulated at absolute dose from the noiseless sinogram; view selections
/// act on the nominal-dose scan.
pub fn variant_spec(cfg: &ExperimentConfig, id: usize, mode: Mode, factor: u32) -> DegradeSpec {
    match mode {
        Mode::Current => DegradeSpec::current(
            factor,
            &cfg.dose,
            noise_seed(cfg.dataset.master_seed, id, factor),
        ),
        Mode::Projections | Mode::Angle => DegradeSpec::selection(mode, factor),
    }
}

fn read_record_sinogram(root: &Path, id: usize, rel: &str) -> Result<Sinogram> {
    let path = root.join(rel);
    if !path.is_file() {
        return Err(Error::Integrity(format!(
            "image {id}: sinogram {} is missing",
            path.display()
        )));
    }
    container::read_sinogram(&path)
}

/// Reconstructs every grid variant of every image from its stored sinograms.
pub fn build_degraded_variants(
    manifest: &DatasetManifest,
    cfg: &ExperimentConfig,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    if manifest.dataset_hash != cfg.dataset_hash() {
        return Err(Error::Integrity(
            "manifest was generated with different dataset settings".into(),
        ));
    }
    let root = &cfg.output_dir;
    let records: Vec<ImageRecord> = manifest
        .records
        .par_iter()
        .map(|rec| -> Result<ImageRecord> {
            let clean = read_record_sinogram(root, rec.id, &rec.clean_sinogram)?;
            let original = read_record_sinogram(root, rec.id, &rec.original_sinogram)?;
            let mut rec = rec.clone();
            for entry in &cfg.grid {
                let spec = variant_spec(cfg, rec.id, entry.mode, entry.factor);
                let source = if entry.mode == Mode::Current { &clean } else { &original };
                let degraded = degrade::apply(&spec, source)?;
                let image = reconstruct(&degraded, cfg)?;
                let tag = entry.tag();
                let rel = image_path(&tag, rec.id);
                container::write_image(&root.join(&rel), &image)?;
                rec.images.insert(tag, rel);
            }
            Ok(rec)
        })
        .collect::<Result<_>>()?;

    let mut out = manifest.clone();
    out.records = records;
    for entry in &cfg.grid {
        let tag = entry.tag();
        if !out.has_variant(&tag) {
            out.variant_tags.push(tag);
        }
    }
    out.check_splits()?;
    out.save(root)?;
    Ok(out)
}

/// Classifier input for a reconstruction: centered crop resampled to the
/// classifier grid, then mapped through the configured contrast.
pub fn classifier_input(image: &ImageGrid, cfg: &ExperimentConfig) -> Result<Vec<f32>> {
    let r = &cfg.reconstruction;
    let g = image.resample(r.classifier_side, r.classifier_field_of_view)?;
    let hu_per_mu = 1000.0 / cfg.dataset.phantom.mu_water;
    Ok(match r.classifier_contrast {
        Contrast::Raw => g.data.iter().map(|&v| v as f32).collect(),
        Contrast::Window { low_hu, high_hu } => g
            .data
            .iter()
            .map(|&mu| {
                let hu = (mu - cfg.dataset.phantom.mu_water) * hu_per_mu;
                ((hu.clamp(low_hu, high_hu) - low_hu) / (high_hu - low_hu) * 2.0 - 1.0) as f32
            })
            .collect(),
        Contrast::LocalWindow { kernel, half_width_hu } => g
            .data
            .iter()
            .zip(g.box_mean(kernel))
            .map(|(&mu, mean)| {
                let hu = (mu - mean) * hu_per_mu;
                (hu.clamp(-half_width_hu, half_width_hu) / half_width_hu) as f32
            })
            .collect(),
    })
}

/// Loads one variant of one split as classifier inputs, in id order.
pub fn load_split(
    manifest: &DatasetManifest,
    cfg: &ExperimentConfig,
    tag: &str,
    split: Split,
) -> Result<(Vec<usize>, Dataset)> {
    if !manifest.has_variant(tag) {
        return Err(Error::Integrity(format!("variant `{tag}` has not been built")));
    }
    let root = &cfg.output_dir;
    let ids = manifest.ids(split);
    let images: Vec<Vec<f32>> = ids
        .par_iter()
        .map(|&id| {
            let rec = &manifest.records[id];
            let path = root.join(&rec.images[tag]);
            if !path.is_file() {
                return Err(Error::Integrity(format!(
                    "image {id}: variant `{tag}` file {} is missing",
                    path.display()
                )));
            }
            classifier_input(&container::read_image(&path)?, cfg)
        })
        .collect::<Result<_>>()?;
    let mut set = Dataset::new(cfg.reconstruction.classifier_side);
    for (&id, img) in ids.iter().zip(images) {
        set.push(img, manifest.records[id].label.as_u8())?;
    }
    Ok((ids, set))
}

pub fn load_phantom(manifest: &DatasetManifest, root: &Path, id: usize) -> Result<Phantom> {
    let path = root.join(&manifest.records[id].phantom);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Phantom::from_json(&text)
}

/// Loads the manifest when it matches the configuration, otherwise
/// regenerates the dataset; then builds any missing grid variants.
pub fn ensure_dataset(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    let root = &cfg.output_dir;
    let existing = match DatasetManifest::load(root) {
        Ok(m) if m.dataset_hash == cfg.dataset_hash() => Some(m),
        _ => None,
    };
    let manifest = match existing {
        Some(m) => m,
        None => generate_dataset(cfg)?,
    };
    if cfg.grid.iter().all(|e| manifest.has_variant(&e.tag())) {
        Ok(manifest)
    } else {
        build_degraded_variants(&manifest, cfg)
    }
}
