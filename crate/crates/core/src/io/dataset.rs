//! Dataset manifest and loader.
//!
//! A dataset is a JSON manifest next to its frame files:
//!
//! ```json
//! {
//!   "version": 1,
//!   "camera": { "fx": 128, "fy": 128, "cx": 64, "cy": 64, "width": 128, "height": 128,
//!               "extrinsics": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]] },
//!   "depth_scale": 0.0001,
//!   "frames": [ { "image": "images/000.png", "depth": "depth/000.png", "mask": "masks/000.png" } ],
//!   "holdout": [4, 12]
//! }
//! ```
//!
//! Paths are relative to the manifest directory. Frame `i` of `T + 1` gets
//! time `i / T`. Frames listed in `holdout` are excluded from training and
//! initialization.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{read_depth16, read_mask, read_rgb};
use crate::error::{Error, Result};
use crate::scene::{Camera, FrameRecord};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub image: PathBuf,
    pub depth: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub camera: Camera,
    /// World units per raw 16-bit depth step.
    pub depth_scale: f64,
    pub frames: Vec<FrameEntry>,
    #[serde(default)]
    pub holdout: Vec<usize>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        m.check()?;
        Ok(m)
    }

    pub fn check(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.frames.is_empty() {
            return Err(Error::Config("manifest lists no frames".into()));
        }
        if !(self.depth_scale > 0.0) {
            return Err(Error::Config("depth_scale must be positive".into()));
        }
        if let Some(&h) = self.holdout.iter().find(|&&h| h >= self.frames.len()) {
            return Err(Error::Config(format!("held-out frame {h} does not exist")));
        }
        if self.holdout.len() >= self.frames.len() {
            return Err(Error::Config("every frame is held out".into()));
        }
        self.camera.check()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Default held-out split: every 8th frame, offset to stay inside the sequence.
pub fn default_holdout(frame_count: usize) -> Vec<usize> {
    (0..frame_count).filter(|i| i % 8 == 4).collect()
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub camera: Camera,
    pub frames: Vec<FrameRecord<f32>>,
}

impl Dataset {
    pub fn is_heldout(&self, index: usize) -> bool {
        self.manifest.holdout.contains(&index)
    }

    pub fn training_frames(&self) -> Vec<FrameRecord<f32>> {
        self.frames.iter().filter(|f| !self.is_heldout(f.index)).cloned().collect()
    }

    pub fn heldout_frames(&self) -> Vec<FrameRecord<f32>> {
        self.frames.iter().filter(|f| self.is_heldout(f.index)).cloned().collect()
    }
}

fn load_frame(
    root: &Path,
    entry: &FrameEntry,
    index: usize,
    count: usize,
    m: &DatasetManifest,
) -> Result<FrameRecord<f32>> {
    let named = |e: Error| Error::Frame { index, message: e.to_string() };
    let image = read_rgb(&root.join(&entry.image)).map_err(named)?;
    let depth = read_depth16(&root.join(&entry.depth), m.depth_scale).map_err(named)?;
    let mask = read_mask(&root.join(&entry.mask)).map_err(named)?;
    let frame = FrameRecord { index, time: FrameRecord::<f32>::normalized_time(index, count), image, depth, mask };
    frame.check_shapes()?;
    if frame.image.width != m.camera.width || frame.image.height != m.camera.height {
        return Err(Error::Frame {
            index,
            message: format!(
                "resolution {}x{} differs from camera {}x{}",
                frame.image.width, frame.image.height, m.camera.width, m.camera.height
            ),
        });
    }
    Ok(frame)
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let count = manifest.frames.len();
    let frames = manifest
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, e)| load_frame(&root, e, i, count, &manifest))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { root, camera: manifest.camera.clone(), manifest, frames })
}
