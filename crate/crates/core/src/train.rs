//! Mini-batch training, evaluation and prediction over a dataset.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureDir;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{mix_seed, Dataset, SampleMode, Split};
use crate::graph::Graph;
use crate::losses::LossParts;
use crate::metrics::{evaluate, EvalRecord, MetricReport};
use crate::model::{sample_frames, ClipInput, ClipPrediction, Model};
use crate::optim::AdamW;
use crate::param::{Gradients, ParamStore};
use crate::Error;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

/// Salt separating the shuffle stream from the frame-sampling streams.
const SHUFFLE_SALT: u64 = 0x5348_5546;

/// Dataset plus an optional directory of precomputed patch grids.
pub struct DataSource<'a> {
    pub dataset: &'a Dataset,
    pub features: Option<FeatureDir>,
}

impl<'a> DataSource<'a> {
    pub fn new(dataset: &'a Dataset, features: Option<&Path>) -> Self {
        Self {
            dataset,
            features: features.map(FeatureDir::new),
        }
    }

    pub fn input(&self, clip: usize, frames: usize, mode: SampleMode, seed: u64) -> Result<ClipInput, Error> {
        let idx = sample_frames(self.dataset, clip, frames, mode, seed)?;
        ClipInput::gather(self.dataset, clip, &idx, self.features.as_ref())
    }
}

/// Per-clip mean loss terms of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_ind: f64,
    /// One entry per supervised layer.
    pub l_group: Vec<f64>,
    pub l_mem: Vec<f64>,
    pub l_con: f64,
    pub total: f64,
    pub steps: usize,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub opt: AdamW,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self, Error> {
        cfg.validate()?;
        let (model, store) = Model::new(&cfg.model, cfg.seed)?;
        let opt = AdamW::new(cfg.optimizer, &store);
        Ok(Self {
            cfg,
            model,
            store,
            opt,
            epoch: 0,
        })
    }

    pub fn resume(dir: &Path) -> Result<Self, Error> {
        let l = load_checkpoint(dir)?;
        Ok(Self {
            cfg: l.cfg,
            model: l.model,
            store: l.store,
            opt: l.opt,
            epoch: l.manifest.epoch,
        })
    }

    fn epoch_seed(&self, epoch: usize) -> u64 {
        mix_seed(self.cfg.seed, epoch as u64)
    }

    /// Loss and gradient of one clip.
    fn clip_gradients(&self, data: &DataSource, clip: usize, seed: u64) -> Result<(Gradients, LossParts), Error> {
        let input = data.input(clip, self.cfg.model.frames, SampleMode::Train, seed)?;
        let targets = data.dataset.clips[clip].targets();
        let mut g = Graph::new(&self.store);
        let fwd = self.model.forward(&mut g, &input, self.cfg.loss.aux_layers)?;
        let loss = self
            .model
            .loss(&mut g, &fwd, &targets, &self.cfg.loss)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("clip {}: {m}", input.clip_id)),
                other => other,
            })?;
        let grads = g.backward(loss.total)?;
        Ok((grads, loss.parts))
    }

    /// One pass over the training clips. Clips of a batch run in parallel;
    /// their gradients are averaged in batch order.
    pub fn train_epoch(&mut self, data: &DataSource, clips: &[usize]) -> Result<EpochLog, Error> {
        if clips.is_empty() {
            return Err(Error::Data(crate::data::DataError::Config("no training clips".into())));
        }
        let seed = self.epoch_seed(self.epoch);
        let mut order = clips.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT));
        let mut sum = LossParts::default();
        let mut steps = 0;
        for batch in order.chunks(self.cfg.batch_size) {
            let results: Vec<Result<(Gradients, LossParts), Error>> = batch
                .par_iter()
                .map(|&c| self.clip_gradients(data, c, mix_seed(seed, c as u64)))
                .collect();
            let mut grads = Gradients::new(self.store.len());
            let w = 1.0 / batch.len() as f64;
            for r in results {
                let (g, parts) = r?;
                grads.add_scaled(&g, w);
                accumulate(&mut sum, &parts);
            }
            if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {}",
                    self.store.name(id)
                )));
            }
            self.store.load_grads(&grads);
            self.opt.step(&mut self.store);
            steps += 1;
        }
        self.epoch += 1;
        let n = clips.len() as f64;
        let mean = |v: f64| v / n;
        let log = EpochLog {
            epoch: self.epoch,
            l_ind: mean(sum.ind),
            l_group: sum.group.iter().map(|&v| mean(v)).collect(),
            l_mem: sum.mem.iter().map(|&v| mean(v)).collect(),
            l_con: mean(sum.con),
            total: 0.0,
            steps,
        };
        let parts = LossParts {
            ind: log.l_ind,
            group: log.l_group.clone(),
            mem: log.l_mem.clone(),
            con: log.l_con,
        };
        let total = crate::losses::total_loss(&parts, &self.cfg.loss)?;
        Ok(EpochLog { total, ..log })
    }

    pub fn save(&self, dir: &Path) -> Result<(), Error> {
        save_checkpoint(dir, &self.cfg, &self.store, &self.opt, self.epoch)
    }
}

fn accumulate(sum: &mut LossParts, p: &LossParts) {
    sum.ind += p.ind;
    sum.con += p.con;
    if sum.group.len() < p.group.len() {
        sum.group.resize(p.group.len(), 0.0);
        sum.mem.resize(p.mem.len(), 0.0);
    }
    for (a, b) in sum.group.iter_mut().zip(&p.group) {
        *a += b;
    }
    for (a, b) in sum.mem.iter_mut().zip(&p.mem) {
        *a += b;
    }
}

/// Eval-mode predictions for the given clips, in the given order.
pub fn predict_clips(model: &Model, store: &ParamStore, data: &DataSource, clips: &[usize]) -> Result<Vec<ClipPrediction>, Error> {
    clips
        .par_iter()
        .map(|&c| {
            let input = data.input(c, model.cfg.frames, SampleMode::Eval, 0)?;
            model.predict(store, &input)
        })
        .collect()
}

pub fn eval_records(ds: &Dataset, clips: &[usize], preds: &[ClipPrediction]) -> Vec<EvalRecord> {
    clips
        .iter()
        .zip(preds)
        .map(|(&c, p)| EvalRecord {
            clip_id: p.clip_id.clone(),
            predictions: p.groups.clone(),
            actions: p.actions.clone(),
            gt: ds.clips[c].targets(),
        })
        .collect()
}

/// Predictions and metrics for one split.
pub struct Evaluation {
    pub predictions: Vec<ClipPrediction>,
    pub report: MetricReport,
}

pub fn evaluate_split(
    model: &Model,
    store: &ParamStore,
    data: &DataSource,
    split: Split,
    thresholds: &[f64],
) -> Result<Evaluation, Error> {
    let clips = data.dataset.split_indices(split);
    let predictions = predict_clips(model, store, data, &clips)?;
    let records = eval_records(data.dataset, &clips, &predictions);
    let report = evaluate(&records, thresholds, model.cfg.activities)?;
    Ok(Evaluation { predictions, report })
}

pub fn write_predictions(path: &Path, preds: &[ClipPrediction]) -> Result<(), Error> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Full training run writing the effective config, one JSON log line per
/// epoch and a checkpoint after every epoch into `cfg.paths.out`. With
/// `resume`, training continues from that checkpoint's state.
pub fn run_training(cfg: RunConfig, resume: Option<&Path>, mut progress: impl Write) -> Result<Trainer, Error> {
    let mut trainer = match resume {
        Some(dir) => {
            let mut t = Trainer::resume(dir)?;
            // run-level settings may change on resume; the model may not
            if t.cfg.model != cfg.model {
                return Err(Error::Checkpoint {
                    path: dir.to_path_buf(),
                    message: "model configuration differs from the checkpoint".into(),
                });
            }
            t.cfg = cfg;
            t
        }
        None => Trainer::new(cfg)?,
    };
    let cfg = trainer.cfg.clone();
    let out = cfg.paths.out.clone();
    cfg.echo(&out)?;
    let ds = Dataset::load(&cfg.paths.dataset, cfg.model.group_tokens)?;
    let data = DataSource::new(&ds, cfg.paths.features.as_deref());
    let clips = ds.split_indices(Split::Train);
    let log_path = out.join(LOG_FILE);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    while trainer.epoch < cfg.epochs {
        let entry = trainer.train_epoch(&data, &clips)?;
        let line = serde_json::to_string(&entry).expect("log serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        let _ = writeln!(progress, "{line}");
        trainer.save(&out.join(CHECKPOINT_DIR))?;
    }
    Ok(trainer)
}

pub fn read_predictions(path: &Path) -> Result<Vec<ClipPrediction>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::Data(crate::data::DataError::Malformed {
                    line: i + 1,
                    clip: "?".into(),
                    path: path.display().to_string(),
                    message: e.to_string(),
                })
            })
        })
        .collect()
}

/// Scores externally produced predictions against the clips of `split`.
/// Every clip of the split needs exactly one prediction.
pub fn evaluate_predictions(
    ds: &Dataset,
    split: Split,
    preds: &[ClipPrediction],
    thresholds: &[f64],
    classes: usize,
) -> Result<MetricReport, Error> {
    let clips = ds.split_indices(split);
    let ordered = clips
        .iter()
        .map(|&c| {
            let id = &ds.clips[c].clip_id;
            let mut it = preds.iter().filter(|p| &p.clip_id == id);
            match (it.next(), it.next()) {
                (Some(p), None) => Ok(p.clone()),
                (None, _) => Err(Error::Config(format!("no prediction for clip {id}"))),
                _ => Err(Error::Config(format!("several predictions for clip {id}"))),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let records = eval_records(ds, &clips, &ordered);
    Ok(evaluate(&records, thresholds, classes)?)
}
