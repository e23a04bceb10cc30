//! Checkpoint directory: one tensor file per parameter, optimizer moments,
//! a JSON manifest and the run configuration.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/config.toml
//! <dir>/params/<name>.bin
//! <dir>/adam/<name>.m.bin, <name>.v.bin   (trainable parameters only)
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, CONFIG_FILE};
use crate::model::Model;
use crate::optim::AdamW;
use crate::param::ParamStore;
use crate::tensor_io::{load_tensor, save_tensor};
use crate::Error;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Completed training epochs.
    pub epoch: usize,
    pub optimizer_step: u64,
    pub params: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    pub fn load(dir: &Path) -> Result<Self, Error> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint {
                path,
                message: format!("unsupported format version {}", m.format_version),
            });
        }
        Ok(m)
    }
}

/// File-name-safe form of a parameter name.
fn file_stem(name: &str) -> String {
    name.replace(['/', '\\'], "_")
}

fn param_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("params").join(format!("{}.bin", file_stem(name)))
}

fn moment_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    let stem = file_stem(name);
    let adam = dir.join("adam");
    (adam.join(format!("{stem}.m.bin")), adam.join(format!("{stem}.v.bin")))
}

pub fn save_checkpoint(dir: &Path, cfg: &RunConfig, store: &ParamStore, opt: &AdamW, epoch: usize) -> Result<(), Error> {
    for sub in ["params", "adam"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut params = Vec::with_capacity(store.len());
    for (id, name, p) in store.iter() {
        let path = param_path(dir, name);
        save_tensor(&path, &p.value).map_err(|e| Error::io(&path, e))?;
        if let Some(Some((m, v))) = opt.moments.get(id.index()) {
            let (mp, vp) = moment_paths(dir, name);
            save_tensor(&mp, m).map_err(|e| Error::io(&mp, e))?;
            save_tensor(&vp, v).map_err(|e| Error::io(&vp, e))?;
        }
        params.push(ManifestEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        epoch,
        optimizer_step: opt.step,
        params,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    cfg.echo(dir)
}

/// Everything needed to evaluate or resume from a checkpoint.
pub struct Loaded {
    pub cfg: RunConfig,
    pub manifest: Manifest,
    pub model: Model,
    pub store: ParamStore,
    pub opt: AdamW,
}

/// Rebuilds the model from the stored configuration and overwrites every
/// parameter. Any disagreement between manifest and model is an error.
pub fn load_checkpoint(dir: &Path) -> Result<Loaded, Error> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let manifest = Manifest::load(dir)?;
    let (model, mut store) = Model::new(&cfg.model, cfg.seed)?;
    let mismatch = |message: String| Error::Checkpoint {
        path: dir.to_path_buf(),
        message,
    };
    if manifest.params.len() != store.len() {
        return Err(mismatch(format!(
            "manifest lists {} parameters, the configured model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    let mut opt = AdamW::new(cfg.optimizer, &store);
    opt.step = manifest.optimizer_step;
    let ids: Vec<_> = store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&manifest.params) {
        let p = store.get(id);
        let name = store.name(id);
        if name != entry.name || p.value.shape() != entry.shape.as_slice() || p.trainable != entry.trainable {
            return Err(mismatch(format!(
                "parameter {} {:?} trainable={} does not match manifest entry {} {:?} trainable={}",
                name,
                p.value.shape(),
                p.trainable,
                entry.name,
                entry.shape,
                entry.trainable
            )));
        }
        let path = param_path(dir, &entry.name);
        let value = load_tensor(&path).map_err(|e| Error::io(&path, e))?;
        if value.shape() != entry.shape.as_slice() {
            return Err(mismatch(format!("{} has shape {:?}", path.display(), value.shape())));
        }
        if entry.trainable && manifest.optimizer_step > 0 {
            let (mp, vp) = moment_paths(dir, &entry.name);
            let m = load_tensor(&mp).map_err(|e| Error::io(&mp, e))?;
            let v = load_tensor(&vp).map_err(|e| Error::io(&vp, e))?;
            opt.moments[id.index()] = Some((m, v));
        }
        store.get_mut(id).value = value;
    }
    Ok(Loaded {
        cfg,
        manifest,
        model,
        store,
        opt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn small_cfg() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.backbone = BackboneConfig {
            layers: 1,
            ..Default::default()
        };
        c
    }

    #[test]
    fn round_trip_restores_values_and_moments() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let (_, mut store) = Model::new(&cfg.model, 3).unwrap();
        let mut opt = AdamW::new(cfg.optimizer, &store);
        for id in store.trainable_ids() {
            store.get_mut(id).grad.data_mut().fill(0.5);
        }
        opt.step(&mut store);
        let mut cfg3 = cfg.clone();
        cfg3.seed = 3;
        save_checkpoint(dir.path(), &cfg3, &store, &opt, 1).unwrap();
        let l = load_checkpoint(dir.path()).unwrap();
        assert_eq!(l.manifest.epoch, 1);
        assert_eq!(l.opt.step, 1);
        for (id, name, p) in store.iter() {
            assert_eq!(l.store.value(id), &p.value, "{name}");
            assert_eq!(l.opt.moments[id.index()].is_some(), p.trainable);
        }
        assert_eq!(l.manifest.trainable_count(), store.trainable_count());
    }

    #[test]
    fn config_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let (_, store) = Model::new(&cfg.model, 0).unwrap();
        let opt = AdamW::new(cfg.optimizer, &store);
        save_checkpoint(dir.path(), &cfg, &store, &opt, 0).unwrap();
        let mut other = cfg.clone();
        other.model.backbone.layers = 2;
        other.echo(dir.path()).unwrap();
        let e = load_checkpoint(dir.path()).err().unwrap();
        assert!(matches!(e, Error::Checkpoint { .. }), "{e}");
        assert_eq!(e.exit_code(), 2);
    }
}
