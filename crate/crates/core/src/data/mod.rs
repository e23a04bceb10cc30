//! Annotations, frame storage, sampling and the synthetic scene generator.
//!
//! On-disk dataset layout:
//!
//! ```text
//! <root>/annotations.jsonl
//! <root>/frames/<clip_id>/<frame:04>.ppm
//! ```

pub mod annotation;
pub mod image;
pub mod sampling;
pub mod synth;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use annotation::{
    load_annotations, save_annotations, BBox, ClipAnnotation, ClipTargets, GroupAnnotation, GtGroup, Track,
    DEFAULT_MAX_GROUPS, SCHEMA_VERSION,
};
pub use image::Image;
pub use sampling::{segment_sample, SampleMode};
pub use synth::{generate_synthetic, SyntheticConfig};

pub const ANNOTATION_FILE: &str = "annotations.jsonl";
pub const FRAME_DIR: &str = "frames";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line} (clip {clip}) field `{path}`: {message}")]
    Malformed {
        line: usize,
        clip: String,
        path: String,
        message: String,
    },
    #[error("invalid clip {clip} at `{path}`: {message}")]
    Invariant {
        clip: String,
        path: String,
        message: String,
    },
    #[error("cannot sample {t} frames from a clip of {frame_count}")]
    Sampling { frame_count: usize, t: usize },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("infeasible synthetic scene: {0}")]
    Infeasible(String),
    #[error("invalid data configuration: {0}")]
    Config(String),
    #[error("unknown clip id {0}")]
    UnknownClip(String),
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Clips with their decoded frames (`frames[c][f]` is frame `f` of clip `c`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clips: Vec<ClipAnnotation>,
    pub frames: Vec<Vec<Image>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn index_of(&self, clip_id: &str) -> Result<usize, DataError> {
        self.clips
            .iter()
            .position(|c| c.clip_id == clip_id)
            .ok_or_else(|| DataError::UnknownClip(clip_id.to_string()))
    }

    pub fn frame_path(root: &Path, clip_id: &str, frame: usize) -> PathBuf {
        root.join(FRAME_DIR).join(clip_id).join(format!("{frame:04}.ppm"))
    }

    pub fn save(&self, root: &Path) -> Result<(), DataError> {
        save_annotations(&root.join(ANNOTATION_FILE), &self.clips)?;
        self.clips
            .par_iter()
            .zip(&self.frames)
            .try_for_each(|(clip, frames)| {
                frames
                    .iter()
                    .enumerate()
                    .try_for_each(|(f, img)| img.save_pnm(&Self::frame_path(root, &clip.clip_id, f)))
            })
    }

    pub fn load(root: &Path, max_groups: usize) -> Result<Self, DataError> {
        let clips = load_annotations(&root.join(ANNOTATION_FILE), max_groups)?;
        let frames = clips
            .par_iter()
            .map(|c| {
                (0..c.frame_count)
                    .map(|f| Image::load_pnm(&Self::frame_path(root, &c.clip_id, f)))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { clips, frames })
    }

    /// Indices of the clips in `split`, in dataset order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.clips.len())
            .filter(|&i| split.contains(&self.clips[i].clip_id))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    All,
}

impl Split {
    pub fn contains(self, clip_id: &str) -> bool {
        match self {
            Split::All => true,
            Split::Train => is_train_clip(clip_id),
            Split::Val => !is_train_clip(clip_id),
        }
    }
}

/// Deterministic 80/20 train/validation assignment from a hash of the clip id.
pub fn is_train_clip(clip_id: &str) -> bool {
    let digest = Sha256::digest(clip_id.as_bytes());
    let v = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    v % 100 < 80
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent stream seed from a base seed and an index.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_roughly_80_20_and_stable() {
        let train = (0..1000).filter(|i| is_train_clip(&format!("clip_{i:04}"))).count();
        assert!((740..=860).contains(&train), "{train}");
        assert_eq!(is_train_clip("clip_0003"), is_train_clip("clip_0003"));
    }

    #[test]
    fn mixed_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..100).map(|i| mix_seed(0, i)).collect();
        assert_eq!(s.len(), 100);
        assert_ne!(mix_seed(0, 1), mix_seed(1, 0));
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = SyntheticConfig {
            clips: 3,
            frame_count: 4,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path(), DEFAULT_MAX_GROUPS).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn missing_dataset_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Dataset::load(dir.path(), 7),
            Err(DataError::MissingFile(_))
        ));
    }
}
