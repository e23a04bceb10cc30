//! Full detector: backbone (or external features) → actor pooling → GCT →
//! heads, with the per-clip training objective and inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{pool_actors, Backbone, BackboneConfig, FeatureDir, PatchGrid};
use crate::data::{segment_sample, BBox, ClipTargets, Dataset, Image, SampleMode};
use crate::gct::{AttentionRecords, Gct, GctOutput};
use crate::graph::{Graph, Var};
use crate::heads::{build_group_predictions, temporal_pool, GroupPrediction, HeadOutputs, Heads, OutlierMode};
use crate::losses::{
    contrastive, group_targets, match_groups, membership_targets, positives, row_softmax, total_loss, LossConfig,
    LossParts,
};
use crate::nn::AttentionConfig;
use crate::param::ParamStore;
use crate::tensor::TensorError;
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Group tokens `K`.
    pub group_tokens: usize,
    /// Sampled frames per clip `T`.
    pub frames: usize,
    pub activities: usize,
    pub actions: usize,
    pub gct_heads: usize,
    pub gct_ffn_hidden: usize,
    pub outlier_mode: OutlierMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            group_tokens: 7,
            frames: 5,
            activities: 6,
            actions: 3,
            gct_heads: 4,
            gct_ffn_hidden: 128,
            outlier_mode: OutlierMode::Token,
        }
    }
}

impl ModelConfig {
    pub fn gct_attention(&self) -> Result<AttentionConfig, TensorError> {
        AttentionConfig::new(self.backbone.model_dim, self.gct_heads, self.gct_ffn_hidden)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.backbone.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.gct_attention().map_err(|e| Error::Config(e.to_string()))?;
        if self.group_tokens == 0 || self.frames == 0 || self.activities == 0 || self.actions == 0 {
            return Err(Error::Config(
                "group_tokens, frames, activities and actions must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub gct: Gct,
    pub heads: Heads,
}

/// A sampled frame: raw pixels for the built-in encoder, or a precomputed grid.
#[derive(Clone, Debug)]
pub enum FrameInput {
    Pixels(Image),
    Features(PatchGrid),
}

/// Model input for one clip: `T` frames and the actors' boxes in each.
#[derive(Clone, Debug)]
pub struct ClipInput {
    pub clip_id: String,
    pub frames: Vec<FrameInput>,
    /// `boxes[t][i]`
    pub boxes: Vec<Vec<BBox>>,
}

impl ClipInput {
    /// Gathers the sampled frames of `clip` from the dataset (or from
    /// feature files when `features` is set).
    pub fn gather(ds: &Dataset, clip: usize, indices: &[usize], features: Option<&FeatureDir>) -> Result<Self, Error> {
        let c = &ds.clips[clip];
        let frames = indices
            .iter()
            .map(|&f| match features {
                Some(fd) => fd
                    .load(&c.clip_id, f)
                    .map(FrameInput::Features)
                    .map_err(Error::from),
                None => Ok(FrameInput::Pixels(ds.frames[clip][f].clone())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let boxes = indices
            .iter()
            .map(|&f| c.tracks.iter().map(|t| t.boxes[f]).collect())
            .collect();
        Ok(Self {
            clip_id: c.clip_id.clone(),
            frames,
            boxes,
        })
    }
}

/// Frame indices for a clip: segment middles in eval mode, seeded picks in train mode.
pub fn sample_frames(ds: &Dataset, clip: usize, t: usize, mode: SampleMode, seed: u64) -> Result<Vec<usize>, Error> {
    Ok(segment_sample(ds.clips[clip].frame_count, t, mode, seed)?)
}

/// Nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Patch grid per frame (`N×D`).
    pub grids: Vec<Var>,
    /// Actor tokens per frame (`M×D`).
    pub actors: Vec<Var>,
    pub gct: GctOutput,
    /// Head outputs per supervised layer; the last entry is the final layer.
    pub layers: Vec<HeadOutputs>,
}

impl ForwardPass {
    pub fn last(&self) -> &HeadOutputs {
        self.layers.last().expect("at least one layer")
    }
}

/// Loss graph for one clip.
#[derive(Clone, Debug)]
pub struct ClipLoss {
    pub total: Var,
    pub parts: LossParts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipPrediction {
    pub clip_id: String,
    /// Group token per actor, `null` for predicted outliers.
    pub assignment: Vec<Option<usize>>,
    pub actions: Vec<usize>,
    pub groups: Vec<GroupPrediction>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore), Error> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &cfg.backbone, &mut rng)?;
        let gct = Gct::new(
            &mut store,
            &cfg.gct_attention()?,
            cfg.group_tokens,
            cfg.frames,
            &mut rng,
        )?;
        let heads = Heads::new(
            &mut store,
            cfg.backbone.model_dim,
            cfg.activities,
            cfg.actions,
            cfg.outlier_mode,
            &mut rng,
        )?;
        Ok((
            Self {
                cfg: cfg.clone(),
                backbone,
                gct,
                heads,
            },
            store,
        ))
    }

    /// Builds the forward graph. With `aux`, heads are also applied to the
    /// grouping layer's output (actor tokens before context, `G_grp`).
    pub fn forward(&self, g: &mut Graph, input: &ClipInput, aux: bool) -> Result<ForwardPass, Error> {
        if input.frames.len() != self.cfg.frames || input.boxes.len() != self.cfg.frames {
            return Err(Error::Data(crate::data::DataError::Config(format!(
                "clip {} provides {} frames, the model expects {}",
                input.clip_id,
                input.frames.len(),
                self.cfg.frames
            ))));
        }
        let mut grids = Vec::with_capacity(input.frames.len());
        let mut actors = Vec::with_capacity(input.frames.len());
        for (frame, boxes) in input.frames.iter().zip(&input.boxes) {
            let (grid, h, w) = match frame {
                FrameInput::Pixels(img) => {
                    let side = self.cfg.backbone.grid_side();
                    (self.backbone.forward(g, img)?, side, side)
                }
                FrameInput::Features(pg) => {
                    if pg.tokens.cols() != self.cfg.backbone.model_dim {
                        return Err(Error::Tensor(TensorError::ShapeMismatch {
                            op: "features",
                            expected: vec![pg.tokens.rows(), self.cfg.backbone.model_dim],
                            got: pg.tokens.shape().to_vec(),
                        }));
                    }
                    (g.input(pg.tokens.clone()), pg.height, pg.width)
                }
            };
            actors.push(pool_actors(g, grid, boxes, h, w)?);
            grids.push(grid);
        }
        let out = self.gct.forward(g, &actors, &grids)?;
        let mut layers = Vec::with_capacity(2);
        if aux {
            let a = temporal_pool(g, &actors);
            let gg = temporal_pool(g, &out.g_grp);
            layers.push(self.heads.forward(g, a, gg));
        }
        let a = temporal_pool(g, &out.a_ctx);
        let gg = temporal_pool(g, &out.g_ctx);
        layers.push(self.heads.forward(g, a, gg));
        Ok(ForwardPass {
            grids,
            actors,
            gct: out,
            layers,
        })
    }

    /// Adds the training objective for one clip to the graph.
    pub fn loss(&self, g: &mut Graph, fwd: &ForwardPass, targets: &ClipTargets, cfg: &LossConfig) -> Result<ClipLoss, Error> {
        let mut terms: Vec<(Var, f64)> = Vec::new();
        let mut parts = LossParts::default();
        for layer in &fwd.layers {
            let logits = g.value(layer.group_logits).clone();
            let affinity = g.value(layer.affinity).clone();
            let matching = match_groups(&row_softmax(&logits), &row_softmax(&affinity), &targets.groups)?;
            let gt = group_targets(&matching, &targets.groups, self.cfg.activities);
            let lg = g.cross_entropy(layer.group_logits, &gt);
            let mt = membership_targets(&matching, targets, &affinity, self.heads.mode())?;
            let lm = g.cross_entropy(layer.affinity, &mt);
            parts.group.push(g.scalar(lg));
            parts.mem.push(g.scalar(lm));
            terms.push((lg, 1.0));
            terms.push((lm, cfg.lambda_m));
        }
        let last = fwd.last();
        let actions: Vec<Option<usize>> = targets.actions.iter().map(|&a| Some(a)).collect();
        let li = g.cross_entropy(last.action_logits, &actions);
        parts.ind = g.scalar(li);
        terms.push((li, 1.0));
        // a lone actor has no contrastive pairs; the term is dropped
        if targets.actor_count() >= 2 {
            let lc = contrastive(g, last.actor_embedding, &positives(targets), cfg.tau);
            parts.con = g.scalar(lc);
            terms.push((lc, cfg.lambda_c));
        }
        total_loss(&parts, cfg)?;
        if let Some(op) = g.first_nonfinite() {
            return Err(Error::Numeric(format!("non-finite value produced by {op}")));
        }
        let total = g.weighted_sum(&terms);
        Ok(ClipLoss { total, parts })
    }

    pub fn predict(&self, store: &ParamStore, input: &ClipInput) -> Result<ClipPrediction, Error> {
        let mut g = Graph::new(store);
        let fwd = self.forward(&mut g, input, false)?;
        if let Some(op) = g.first_nonfinite() {
            return Err(Error::Numeric(format!("non-finite value produced by {op}")));
        }
        Ok(self.decode(&g, &fwd, &input.clip_id)?)
    }

    fn decode(&self, g: &Graph, fwd: &ForwardPass, clip_id: &str) -> Result<ClipPrediction, TensorError> {
        let last = fwd.last();
        let (assignment, groups) = build_group_predictions(g.value(last.affinity), g.value(last.group_logits))?;
        let logits = g.value(last.action_logits);
        let actions = (0..logits.rows())
            .map(|i| crate::heads::argmax(logits.row(i)))
            .collect();
        Ok(ClipPrediction {
            clip_id: clip_id.to_string(),
            assignment,
            actions,
            groups,
        })
    }

    /// Prediction plus the retained GCT attention weights.
    pub fn predict_with_attention(
        &self,
        store: &ParamStore,
        input: &ClipInput,
    ) -> Result<(ClipPrediction, AttentionRecords), Error> {
        let mut g = Graph::new(store);
        let fwd = self.forward(&mut g, input, false)?;
        let pred = self.decode(&g, &fwd, &input.clip_id)?;
        Ok((pred, fwd.gct.records(&g)))
    }

    /// Element counts of the trainable parts: prompts, group tokens, GCT, heads.
    pub fn parameter_breakdown(store: &ParamStore) -> ParameterCounts {
        let count = |prefix: &str| store.count_elements(|n, _| n.starts_with(prefix));
        ParameterCounts {
            backbone: count("backbone."),
            prompts: count("prompts."),
            group_tokens: count("gct.g_init"),
            gct: count("gct.") - count("gct.g_init"),
            heads: count("heads."),
            trainable: store.trainable_count(),
            total: store.total_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub backbone: usize,
    pub prompts: usize,
    pub group_tokens: usize,
    pub gct: usize,
    pub heads: usize,
    pub trainable: usize,
    pub total: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn small() -> (Dataset, ModelConfig) {
        let ds = generate_synthetic(&SyntheticConfig {
            clips: 2,
            frame_count: 10,
            ..Default::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                layers: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        (ds, cfg)
    }

    #[test]
    fn forward_loss_and_predict() {
        let (ds, cfg) = small();
        let (model, store) = Model::new(&cfg, 0).unwrap();
        let idx = sample_frames(&ds, 0, 5, SampleMode::Eval, 0).unwrap();
        let input = ClipInput::gather(&ds, 0, &idx, None).unwrap();
        let mut g = Graph::new(&store);
        let fwd = model.forward(&mut g, &input, true).unwrap();
        assert_eq!(fwd.layers.len(), 2);
        let loss = model.loss(&mut g, &fwd, &ds.clips[0].targets(), &LossConfig::default()).unwrap();
        let expect = total_loss(&loss.parts, &LossConfig::default()).unwrap();
        assert!((g.scalar(loss.total) - expect).abs() <= 1e-12);
        let grads = g.backward(loss.total).unwrap();
        assert!(grads.iter().all(|(id, _)| store.get(id).trainable));
        let pred = model.predict(&store, &input).unwrap();
        assert_eq!(pred.assignment.len(), ds.clips[0].actor_count());
    }

    #[test]
    fn frozen_parameter_accounting() {
        let cfg = ModelConfig::default();
        let (_, store) = Model::new(&cfg, 0).unwrap();
        let c = Model::parameter_breakdown(&store);
        assert_eq!(c.trainable, c.prompts + c.group_tokens + c.gct + c.heads);
        assert!(c.trainable < c.backbone);
        assert_eq!(c.total, c.trainable + c.backbone);
    }

    #[test]
    fn frame_count_mismatch_is_an_error() {
        let (ds, cfg) = small();
        let (model, store) = Model::new(&cfg, 0).unwrap();
        let input = ClipInput::gather(&ds, 0, &[1, 2], None).unwrap();
        assert!(model.predict(&store, &input).is_err());
    }
}
