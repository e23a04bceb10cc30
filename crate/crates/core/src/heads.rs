//! Prediction heads over temporally pooled tokens: group activity (with a
//! background class), individual action, and actor-group membership
//! affinities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::nn::{token_init, Linear};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{softmax, Tensor, TensorError};

/// How actors that belong to no group are represented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierMode {
    /// A learnable outlier token adds column `K` to the affinity matrix.
    #[default]
    Token,
    /// No extra column; actors assigned to background-classified group
    /// tokens are outliers.
    Background,
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub group: Linear,
    pub action: Linear,
    pub proj_actor: Linear,
    pub proj_group: Linear,
    pub outlier: Option<ParamId>,
    pub activities: usize,
    pub actions: usize,
    pub embed_dim: usize,
}

/// Head outputs for one clip (one GCT layer).
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `K×(C_g+1)`; the last class is background.
    pub group_logits: Var,
    /// `M×C_a`
    pub action_logits: Var,
    /// `M×(K+1)` in token mode, `M×K` in background mode.
    pub affinity: Var,
    /// Projected actor embeddings `M×D_e`.
    pub actor_embedding: Var,
}

/// Mean over frames of per-frame `X×D` nodes.
pub fn temporal_pool(g: &mut Graph, frames: &[Var]) -> Var {
    g.mean(frames)
}

/// Plain-value frame mean of `[frame]` matrices.
pub fn temporal_pool_values(frames: &[Tensor]) -> Tensor {
    let mut out = frames[0].clone();
    for f in &frames[1..] {
        out.add_assign(f);
    }
    out.scale_assign(1.0 / frames.len() as f64);
    out
}

impl Heads {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        model_dim: usize,
        activities: usize,
        actions: usize,
        mode: OutlierMode,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        if activities == 0 || actions == 0 {
            return Err(TensorError::Invalid("class counts must be positive".into()));
        }
        let d = model_dim;
        Ok(Self {
            group: Linear::new(store, "heads.group", d, activities + 1, true, rng),
            action: Linear::new(store, "heads.action", d, actions, true, rng),
            proj_actor: Linear::new(store, "heads.proj_actor", d, d, true, rng),
            proj_group: Linear::new(store, "heads.proj_group", d, d, true, rng),
            outlier: match mode {
                OutlierMode::Token => Some(store.add("heads.outlier", token_init(rng, &[1, d]), true)),
                OutlierMode::Background => None,
            },
            activities,
            actions,
            embed_dim: d,
        })
    }

    pub fn mode(&self) -> OutlierMode {
        if self.outlier.is_some() {
            OutlierMode::Token
        } else {
            OutlierMode::Background
        }
    }

    /// `actors`: pooled `M×D`; `groups`: pooled `K×D`.
    pub fn forward(&self, g: &mut Graph, actors: Var, groups: Var) -> HeadOutputs {
        let group_logits = self.group.forward(g, groups);
        let action_logits = self.action.forward(g, actors);
        let ea = self.proj_actor.forward(g, actors);
        let eg = self.proj_group.forward(g, groups);
        let columns = match self.outlier {
            Some(id) => {
                let o = g.param(id);
                let eo = self.proj_group.forward(g, o);
                g.concat_rows(&[eg, eo])
            }
            None => eg,
        };
        let dots = g.matmul_t(ea, columns);
        let affinity = g.scale(dots, 1.0 / (self.embed_dim as f64).sqrt());
        HeadOutputs {
            group_logits,
            action_logits,
            affinity,
            actor_embedding: ea,
        }
    }
}

/// A predicted group: member actor indices (sorted), activity and confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPrediction {
    pub members: Vec<usize>,
    pub activity: usize,
    pub confidence: f64,
}

/// Index of the first maximum (ties go to the lowest index).
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Tokens whose most probable class is the background class.
pub fn background_tokens(group_logits: &Tensor) -> Vec<bool> {
    let bg = group_logits.cols() - 1;
    (0..group_logits.rows())
        .map(|k| argmax(group_logits.row(k)) == bg)
        .collect()
}

/// Per-actor group token, `None` for predicted outliers. The affinity has
/// `K` or `K+1` columns; column `K`, when present, is the outlier column.
/// Actors whose best token is background are outliers as well.
pub fn assign_actors(affinity: &Tensor, background: &[bool]) -> Vec<Option<usize>> {
    let k = background.len();
    (0..affinity.rows())
        .map(|i| {
            let best = argmax(affinity.row(i));
            if best >= k || background[best] {
                None
            } else {
                Some(best)
            }
        })
        .collect()
}

/// One prediction per non-background token with at least one assigned
/// actor, in token order. Activity is the best non-background class and
/// confidence its softmax probability.
pub fn build_group_predictions(
    affinity: &Tensor,
    group_logits: &Tensor,
) -> Result<(Vec<Option<usize>>, Vec<GroupPrediction>), TensorError> {
    let background = background_tokens(group_logits);
    let assignment = assign_actors(affinity, &background);
    let c = group_logits.cols() - 1;
    let mut preds = Vec::new();
    for k in 0..group_logits.rows() {
        if background[k] {
            continue;
        }
        let members: Vec<usize> = (0..assignment.len()).filter(|&i| assignment[i] == Some(k)).collect();
        if members.is_empty() {
            continue;
        }
        let probs = softmax(group_logits.row(k))?;
        let activity = argmax(&probs[..c]);
        preds.push(GroupPrediction {
            members,
            activity,
            confidence: probs[activity],
        });
    }
    Ok((assignment, preds))
}
