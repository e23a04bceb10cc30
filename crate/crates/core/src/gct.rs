//! Two-layer group-context transformer.
//!
//! Grouping layer: group tokens query the actor tokens of the same frame,
//! `G_grp = LN(G_init + FFN(Attn(G_init, A, A)))`.
//! Contextual layer: actors and groups jointly query the patch grid,
//! `[A_ctx | G_ctx] = LN(Z + FFN(Attn(Z, I, I)))` with `Z = [A | G_grp]`.
//!
//! Attention is computed independently per frame, so every per-frame
//! quantity is a separate `rows×D` graph node.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::nn::{token_init, AttentionConfig, FeedForward, LayerNorm, MultiHeadAttention};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct GctLayer {
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub ln: LayerNorm,
}

impl GctLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg, true, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg, true, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), cfg.model_dim, true),
        }
    }

    /// `LN(q + FFN(Attn(q, kv, kv)))`; returns the output and the attention node.
    pub fn forward(&self, g: &mut Graph, q: Var, kv: Var) -> (Var, Var) {
        let att = self.attn.forward(g, q, kv, kv);
        let f = self.ffn.forward(g, att.output);
        let r = g.add(q, f);
        (self.ln.forward(g, r), att.weights)
    }
}

#[derive(Clone, Debug)]
pub struct Gct {
    pub cfg: AttentionConfig,
    pub groups: usize,
    pub frames: usize,
    /// `K×T×D` learnable group tokens.
    pub g_init: ParamId,
    pub grouping: GctLayer,
    pub contextual: GctLayer,
}

/// Per-frame outputs of one forward pass (`[t]` indexes frames).
#[derive(Clone, Debug)]
pub struct GctOutput {
    pub g_grp: Vec<Var>,
    pub a_ctx: Vec<Var>,
    pub g_ctx: Vec<Var>,
    /// Grouping attention node per frame (`K×M` weights per head).
    pub grouping_attn: Vec<Var>,
    /// Contextual attention node per frame (`(M+K)×N` weights per head).
    pub contextual_attn: Vec<Var>,
}

/// Attention weights retained for inspection: `[frame][head]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecords {
    pub grouping: Vec<Vec<Tensor>>,
    pub contextual: Vec<Vec<Tensor>>,
}

impl Gct {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &AttentionConfig,
        groups: usize,
        frames: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        if groups == 0 || frames == 0 {
            return Err(TensorError::Invalid(format!(
                "group-token count ({groups}) and frame count ({frames}) must be positive"
            )));
        }
        let g_init = store.add("gct.g_init", token_init(rng, &[groups, frames, cfg.model_dim]), true);
        Ok(Self {
            cfg: *cfg,
            groups,
            frames,
            g_init,
            grouping: GctLayer::new(store, "gct.grouping", cfg, rng),
            contextual: GctLayer::new(store, "gct.contextual", cfg, rng),
        })
    }

    fn check(&self, g: &Graph, actors: &[Var], grids: &[Var]) -> Result<(), TensorError> {
        if actors.len() != self.frames || grids.len() != self.frames {
            return Err(TensorError::ShapeMismatch {
                op: "gct_forward",
                expected: vec![self.frames, self.frames],
                got: vec![actors.len(), grids.len()],
            });
        }
        let m = g.shape(actors[0]).0;
        for &a in actors {
            if g.shape(a).0 == 0 || g.shape(a).0 != m {
                return Err(TensorError::Invalid("every frame needs the same non-zero actor count".into()));
            }
        }
        Ok(())
    }

    /// Per-frame `K×D` slices of `G_init`.
    pub fn initial_tokens(&self, g: &mut Graph) -> Vec<Var> {
        let flat = g.param_flat3(self.g_init);
        let d = self.cfg.model_dim;
        (0..self.frames).map(|t| g.slice_cols(flat, t * d, d)).collect()
    }

    pub fn grouping_layer(&self, g: &mut Graph, g_init: &[Var], actors: &[Var]) -> (Vec<Var>, Vec<Var>) {
        g_init
            .iter()
            .zip(actors)
            .map(|(&q, &a)| self.grouping.forward(g, q, a))
            .unzip()
    }

    /// Returns `(A_ctx, G_ctx, attention nodes)` per frame.
    pub fn contextual_layer(
        &self,
        g: &mut Graph,
        actors: &[Var],
        g_grp: &[Var],
        grids: &[Var],
    ) -> (Vec<Var>, Vec<Var>, Vec<Var>) {
        let mut a_ctx = Vec::with_capacity(actors.len());
        let mut g_ctx = Vec::with_capacity(actors.len());
        let mut attn = Vec::with_capacity(actors.len());
        for ((&a, &gg), &grid) in actors.iter().zip(g_grp).zip(grids) {
            let m = g.shape(a).0;
            let k = g.shape(gg).0;
            let z = g.concat_rows(&[a, gg]);
            let (out, w) = self.contextual.forward(g, z, grid);
            a_ctx.push(g.slice_rows(out, 0, m));
            g_ctx.push(g.slice_rows(out, m, k));
            attn.push(w);
        }
        (a_ctx, g_ctx, attn)
    }

    pub fn forward(&self, g: &mut Graph, actors: &[Var], grids: &[Var]) -> Result<GctOutput, TensorError> {
        self.check(g, actors, grids)?;
        let init = self.initial_tokens(g);
        let (g_grp, grouping_attn) = self.grouping_layer(g, &init, actors);
        let (a_ctx, g_ctx, contextual_attn) = self.contextual_layer(g, actors, &g_grp, grids);
        Ok(GctOutput {
            g_grp,
            a_ctx,
            g_ctx,
            grouping_attn,
            contextual_attn,
        })
    }
}

impl GctOutput {
    pub fn records(&self, g: &Graph) -> AttentionRecords {
        let take = |nodes: &[Var]| {
            nodes
                .iter()
                .map(|&v| g.attention_weights(v).expect("attention node").to_vec())
                .collect()
        };
        AttentionRecords {
            grouping: take(&self.grouping_attn),
            contextual: take(&self.contextual_attn),
        }
    }
}

/// Plain-value result of [`gct_forward`]: per-frame matrices.
#[derive(Clone, Debug)]
pub struct GctValues {
    pub g_grp: Vec<Tensor>,
    pub a_ctx: Vec<Tensor>,
    pub g_ctx: Vec<Tensor>,
    pub records: AttentionRecords,
}

/// Runs both layers on plain per-frame actor tokens (`M×D`) and grids (`N×D`).
pub fn gct_forward(
    store: &ParamStore,
    gct: &Gct,
    actors: &[Tensor],
    grids: &[Tensor],
) -> Result<GctValues, TensorError> {
    let mut g = Graph::new(store);
    let a: Vec<Var> = actors.iter().map(|t| g.input(t.clone())).collect();
    let i: Vec<Var> = grids.iter().map(|t| g.input(t.clone())).collect();
    let out = gct.forward(&mut g, &a, &i)?;
    let vals = |vs: &[Var]| vs.iter().map(|&v| g.value(v).clone()).collect();
    Ok(GctValues {
        g_grp: vals(&out.g_grp),
        a_ctx: vals(&out.a_ctx),
        g_ctx: vals(&out.g_ctx),
        records: out.records(&g),
    })
}
