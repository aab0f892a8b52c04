//! On-disk formats: PGM images, PFM depth maps, BlendedMVS-style camera
//! text files, the `CLFW` weights container, the metrics CSV, and the
//! scene/pair dataset layout.

mod camera;
mod dataset;
mod image;
mod metrics;
pub mod synthetic;
mod weights;

use std::path::Path;

pub use camera::{load_camera, save_camera};
pub use dataset::{find_pair, load_pair, scan_dataset, PairDescriptor, ScenePair};
pub use image::{load_depth, load_image, save_depth, save_image};
pub use metrics::{append_metrics, read_metrics, MetricsRow, METRICS_HEADER};
pub(crate) use metrics::init_metrics;
pub use synthetic::{generate_synthetic_dataset, SynthConfig};
pub use weights::{load_weights, save_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use crate::error::{Error, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
