//! Projection-domain CT acquisition simulator and triage-classifier
//! robustness harness.
//!
//! The pipeline samples synthetic head phantoms, projects them into
//! parallel-beam sinograms, applies acquisition degradations in projection
//! space (reduced tube current, fewer views, limited angle), reconstructs by
//! filtered back projection, and measures how a small convolutional triage
//! classifier behaves on the degraded images.

pub mod container;
pub mod degrade;
pub mod error;
pub mod grid;
pub mod harness;
pub mod metrics;
pub mod phantom;
pub mod projector;
pub mod recon;
pub mod triage;

pub use error::{Error, Result};
pub use grid::ImageGrid;
pub use phantom::{Ellipse, Label, Phantom, PhantomSpec};
pub use projector::{ScanGeometry, Sinogram};
