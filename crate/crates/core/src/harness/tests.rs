use std::f64::consts::PI;
use std::path::Path;

use super::config::{variant_dir, ExperimentConfig, ORIGINAL_TAG};
use super::dataset::*;
use super::experiment::*;
use super::report::*;
use crate::container;
use crate::error::Error;
use crate::projector::ScanGeometry;
use crate::recon::{FilterSpec, Kernel};

fn small_config(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.dataset.n_images = 40;
    c.geometry = ScanGeometry::new(96, PI, 0.0, 64, 25.0 / 64.0).unwrap();
    c.reconstruction.filter = FilterSpec::for_detectors(Kernel::RampHann, 64);
    c.reconstruction.n_pixels = 48;
    c.reconstruction.classifier_side = 32;
    c.training.epochs = 2;
    c.training.grad_accumulation_steps = 4;
    c.seeds = vec![0, 1];
    c.output_dir = dir.to_path_buf();
    c
}

fn bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn generation_is_deterministic_with_exact_splits() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_dataset(&small_config(a.path())).unwrap();
    let mb = generate_dataset(&small_config(b.path())).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(bytes(&a.path().join(MANIFEST_FILE)), bytes(&b.path().join(MANIFEST_FILE)));
    for r in &ma.records {
        for rel in [&r.phantom, &r.original_sinogram, &r.images[ORIGINAL_TAG]] {
            assert_eq!(bytes(&a.path().join(rel)), bytes(&b.path().join(rel)));
        }
    }
    assert_eq!(ma.ids(Split::Train).len(), 32);
    assert_eq!(ma.ids(Split::Validation).len(), 4);
    assert_eq!(ma.ids(Split::Test).len(), 4);
    assert_eq!(
        ma.abnormal_count,
        ma.records.iter().filter(|r| r.label.as_u8() == 1).count()
    );
}

#[test]
fn hundred_images_split_eighty_ten_ten() {
    let mut c = ExperimentConfig::default();
    c.dataset.n_images = 100;
    let splits = assign_splits(&c);
    let count = |s| splits.iter().filter(|&&x| x == s).count();
    assert_eq!((count(Split::Train), count(Split::Validation), count(Split::Test)), (80, 10, 10));
}

#[test]
fn variants_follow_projection_space_discipline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let m = generate_dataset(&cfg).unwrap();
    let m = build_degraded_variants(&m, &cfg).unwrap();
    assert_eq!(m.variant_tags.len(), 10);
    for rec in &m.records {
        assert_eq!(rec.images.len(), 10);
        for (tag, rel) in &rec.images {
            let img = container::read_image(&dir.path().join(rel)).unwrap();
            let prov = &img.provenance;
            let recon_at = prov.iter().position(|t| t.starts_with("ramp-filter")).unwrap();
            let degrade_at = prov.iter().rposition(|t| {
                t.starts_with("quantum-noise") || t.starts_with("reduce-projections") || t.starts_with("limit-angle")
            });
            assert!(degrade_at.is_some_and(|d| d < recon_at), "{tag}: {prov:?}");
            assert!(prov[recon_at..].iter().all(|t| !t.starts_with("limit-angle")));
            if tag == "angle×4" {
                assert!(prov.contains(&"limit-angle(k=4)".to_string()));
            }
        }
    }
    // Re-running reproduces identical noisy reconstructions.
    let first = bytes(&dir.path().join(&m.records[3].images["current×16"]));
    build_degraded_variants(&m, &cfg).unwrap();
    assert_eq!(first, bytes(&dir.path().join(&m.records[3].images["current×16"])));
}

#[test]
fn angle_variant_keeps_first_quarter_of_views() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let m = generate_dataset(&cfg).unwrap();
    let original = container::read_sinogram(&dir.path().join(&m.records[0].original_sinogram)).unwrap();
    let spec = variant_spec(&cfg, 0, crate::degrade::Mode::Angle, 4);
    let cut = crate::degrade::apply(&spec, &original).unwrap();
    assert_eq!(cut.geometry.n_views, 24);
    assert_eq!(cut.data[..], original.data[..24 * 64]);
}

#[test]
fn missing_sinogram_names_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let m = generate_dataset(&cfg).unwrap();
    std::fs::remove_file(dir.path().join(&m.records[7].clean_sinogram)).unwrap();
    match build_degraded_variants(&m, &cfg) {
        Err(Error::Integrity(msg)) => assert!(msg.contains("image 7"), "{msg}"),
        other => panic!("expected integrity error, got {other:?}"),
    }
}

#[test]
fn robustness_and_retrain_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let report = run_robustness_experiment(&cfg).unwrap();
    assert_eq!(report.rows.len(), 10 * 2);
    for r in report.rows.iter().filter(|r| r.dataset_tag == ORIGINAL_TAG) {
        assert_eq!(r.kappa_vs_original, 1.0);
    }
    report.check_consistency(1e-12).unwrap();
    let back = RobustnessReport::read(dir.path(), ReportKind::Robustness).unwrap();
    assert_eq!(back, report);

    let retrain = run_retrain_experiment(&cfg).unwrap();
    assert_eq!(retrain.rows.len(), 3 * 2);
    assert!(retrain.baseline.is_some());
    assert_eq!(
        retrain.baseline.as_ref().unwrap().auroc_mean,
        report.summary(ORIGINAL_TAG).unwrap().auroc_mean
    );
    for tag in ["angle×4", "angle×8", "angle×16"] {
        assert!(dir.path().join("models").join(format!("{}_seed1.ctmodl", variant_dir(tag))).is_file());
    }

    let svg = render_report(&report, Some(&retrain)).unwrap();
    assert_eq!(svg.matches(r#"<g class="panel""#).count(), 4);
    let table = summary_csv(&report, Some(&retrain)).unwrap();
    assert_eq!(table.lines().count(), 1 + 10 + 3);
}

fn fake_report(seeds: &[u64]) -> RobustnessReport {
    let cfg = ExperimentConfig {
        seeds: seeds.to_vec(),
        ..ExperimentConfig::default()
    };
    let mut rows = Vec::new();
    for tag in ["original", "current×4", "angle×8"] {
        for &s in seeds {
            rows.push(crate::metrics::MetricRow {
                dataset_tag: tag.into(),
                seed: s,
                auroc: 0.8 + 0.01 * s as f64,
                kappa_vs_original: 0.9,
                sensitivity: 0.7,
                specificity: 0.6,
            });
        }
    }
    RobustnessReport::new(ReportKind::Robustness, &cfg, rows, None).unwrap()
}

#[test]
fn single_seed_has_zero_length_error_bars() {
    let svg = render_report(&fake_report(&[3]), None).unwrap();
    let bars: Vec<&str> = svg.lines().filter(|l| l.contains(r#"class="errorbar""#)).collect();
    assert_eq!(bars.len(), 6);
    for line in bars {
        let attr = |name: &str| {
            let start = line.find(&format!("{name}=\"")).unwrap() + name.len() + 2;
            line[start..].split('"').next().unwrap().to_string()
        };
        assert_eq!(attr("y1"), attr("y2"));
    }
}

#[test]
fn report_csv_round_trips_and_stays_consistent() {
    let r = fake_report(&[0, 1, 2]);
    let rows = crate::metrics::rows_from_csv(&r.to_csv().unwrap()).unwrap();
    assert_eq!(rows, r.rows);
    let s = r.summary("current×4").unwrap();
    assert!((s.auroc_mean - 0.81).abs() < 1e-12);
    assert!((s.auroc_std - 0.01).abs() < 1e-12);
    let mut broken = r.clone();
    broken.summaries[0].auroc_mean += 1e-9;
    assert!(broken.check_consistency(1e-12).is_err());
    assert!(render_report(&fake_report(&[]), None).is_err());
}

#[test]
fn lesion_distance() {
    let e = crate::phantom::Ellipse::new((1.0, 0.0), (2.0, 1.0), 0.0, 0.02).unwrap();
    assert_eq!(distance_to_ellipse(&e, 1.5, 0.2), 0.0);
    assert!((distance_to_ellipse(&e, 5.0, 0.0) - 2.0).abs() < 1e-9);
    assert!((distance_to_ellipse(&e, 1.0, 3.0) - 2.0).abs() < 1e-6);
}

#[test]
fn contrast_mappings() {
    let mut cfg = ExperimentConfig::default();
    cfg.reconstruction.classifier_side = 16;
    cfg.reconstruction.classifier_field_of_view = 16.0;
    let mu = cfg.dataset.phantom.mu_water;
    let mut img = crate::ImageGrid::from_data(32, 16.0, vec![1.05 * mu; 32 * 32]).unwrap();
    cfg.reconstruction.classifier_contrast = super::Contrast::Window { low_hu: -100.0, high_hu: 100.0 };
    assert!(classifier_input(&img, &cfg).unwrap().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    cfg.reconstruction.classifier_contrast = super::Contrast::LocalWindow { kernel: 5, half_width_hu: 100.0 };
    assert!(classifier_input(&img, &cfg).unwrap().iter().all(|&v| v.abs() < 1e-6));
    // A bright pixel saturates; a constant offset does not matter.
    img.data.iter_mut().for_each(|v| *v += 0.3);
    img.set(10, 10, img.get(10, 10) + mu);
    let x = classifier_input(&img, &cfg).unwrap();
    assert_eq!(x[5 * 16 + 5], 1.0);
    assert!(x[0].abs() < 1e-6);
}
