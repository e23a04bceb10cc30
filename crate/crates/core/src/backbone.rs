//! Miniature ViT encoder with optional prompt tokens, and 1×1 RoI pooling of
//! actor boxes on its patch grid.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, Image};
use crate::graph::{Graph, Var};
use crate::nn::{token_init, AttentionConfig, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};
use crate::tensor_io;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    None,
    Shallow,
    #[default]
    Deep,
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PromptMode::None => "none",
            PromptMode::Shallow => "shallow",
            PromptMode::Deep => "deep",
        })
    }
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(PromptMode::None),
            "shallow" => Ok(PromptMode::Shallow),
            "deep" => Ok(PromptMode::Deep),
            other => Err(format!("unknown prompt mode `{other}` (expected none, shallow or deep)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub prompt_mode: PromptMode,
    pub prompt_count: usize,
    pub frozen: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            layers: 4,
            model_dim: 32,
            heads: 4,
            ffn_hidden: 128,
            prompt_mode: PromptMode::Deep,
            prompt_count: 7,
            frozen: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(TensorError::Invalid(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.layers == 0 || self.channels == 0 {
            return Err(TensorError::Invalid("layers and channels must be positive".into()));
        }
        self.attention()?;
        Ok(())
    }

    pub fn attention(&self) -> Result<AttentionConfig, TensorError> {
        AttentionConfig::new(self.model_dim, self.heads, self.ffn_hidden)
    }

    /// Patches per side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens `N`.
    pub fn patch_count(&self) -> usize {
        self.grid_side().pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Prompts actually used: zero in mode `none`.
    pub fn effective_prompts(&self) -> usize {
        match self.prompt_mode {
            PromptMode::None => 0,
            _ => self.prompt_count,
        }
    }
}

/// Learnable prompt tokens: one `K×D` matrix per layer in deep mode, a
/// single input-layer matrix in shallow mode, none otherwise. Always trainable.
#[derive(Clone, Debug)]
pub struct PromptSet {
    pub mode: PromptMode,
    pub count: usize,
    pub tokens: Vec<ParamId>,
}

impl PromptSet {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let count = cfg.effective_prompts();
        let matrices = match (cfg.prompt_mode, count) {
            (_, 0) | (PromptMode::None, _) => 0,
            (PromptMode::Shallow, _) => 1,
            (PromptMode::Deep, _) => cfg.layers,
        };
        let tokens = (0..matrices)
            .map(|l| store.add(format!("prompts.{l}"), token_init(rng, &[count, cfg.model_dim]), true))
            .collect();
        Self {
            mode: cfg.prompt_mode,
            count,
            tokens,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl Block {
    /// Pre-norm transformer block: `x += MHA(LN x)`, `x += FFN(LN x)`.
    fn forward(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let h = self.ln1.forward(g, x);
        let att = self.attn.forward(g, h, h, h);
        let x = g.add(x, att.output);
        let h = self.ln2.forward(g, x);
        let f = self.ffn.forward(g, h);
        (g.add(x, f), att.weights)
    }
}

/// Per-frame patch tokens `N×D` and grid extents.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub tokens: Tensor,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch_embed: Linear,
    pub position: ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    pub prompts: PromptSet,
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut R) -> Result<Self, TensorError> {
        cfg.validate()?;
        let attn = cfg.attention()?;
        let train = !cfg.frozen;
        let patch_embed = Linear::new(store, "backbone.patch", cfg.patch_dim(), cfg.model_dim, train, rng);
        let position = store.add(
            "backbone.position",
            token_init(rng, &[cfg.patch_count(), cfg.model_dim]),
            train,
        );
        let blocks = (0..cfg.layers)
            .map(|l| {
                let n = format!("backbone.block{l}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), cfg.model_dim, train),
                    attn: MultiHeadAttention::new(store, &format!("{n}.attn"), &attn, train, rng),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), cfg.model_dim, train),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), &attn, train, rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(store, "backbone.final_ln", cfg.model_dim, train);
        let prompts = PromptSet::new(store, cfg, rng);
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            position,
            blocks,
            final_ln,
            prompts,
        })
    }

    /// Embeds a frame: `N` patch rows projected to `D` plus positional embedding.
    pub fn embed(&self, g: &mut Graph, frame: &Image) -> Result<Var, TensorError> {
        let patches = patchify(frame, &self.cfg)?;
        let x = g.input(patches);
        let x = self.patch_embed.forward(g, x);
        let pos = g.param(self.position);
        Ok(g.add(x, pos))
    }

    /// Runs the encoder over embedded tokens and returns the `N×D` patch
    /// grid (prompt positions removed) plus each layer's attention node.
    pub fn encode(&self, g: &mut Graph, tokens: Var) -> Result<(Var, Vec<Var>), TensorError> {
        if self.prompts.mode != self.cfg.prompt_mode {
            return Err(TensorError::Invalid(format!(
                "prompt set built for mode {} used with mode {}",
                self.prompts.mode, self.cfg.prompt_mode
            )));
        }
        let n = g.shape(tokens).0;
        let k = self.prompts.count;
        let mut weights = Vec::with_capacity(self.blocks.len());
        let mut x = tokens;
        match (self.prompts.mode, k) {
            (PromptMode::None, _) | (_, 0) => {
                for b in &self.blocks {
                    let (y, w) = b.forward(g, x);
                    x = y;
                    weights.push(w);
                }
            }
            (PromptMode::Shallow, _) => {
                let p = g.param(self.prompts.tokens[0]);
                x = g.concat_rows(&[p, x]);
                for b in &self.blocks {
                    let (y, w) = b.forward(g, x);
                    x = y;
                    weights.push(w);
                }
                x = g.slice_rows(x, k, n);
            }
            (PromptMode::Deep, _) => {
                for (b, &pid) in self.blocks.iter().zip(&self.prompts.tokens) {
                    let p = g.param(pid);
                    let joint = g.concat_rows(&[p, x]);
                    let (y, w) = b.forward(g, joint);
                    x = g.slice_rows(y, k, n);
                    weights.push(w);
                }
            }
        }
        Ok((self.final_ln.forward(g, x), weights))
    }

    pub fn forward(&self, g: &mut Graph, frame: &Image) -> Result<Var, TensorError> {
        let tokens = self.embed(g, frame)?;
        Ok(self.encode(g, tokens)?.0)
    }

    /// Plain-value encoder output for one frame.
    pub fn vit_forward(&self, store: &ParamStore, frame: &Image) -> Result<PatchGrid, TensorError> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, frame)?;
        let side = self.cfg.grid_side();
        Ok(PatchGrid {
            height: side,
            width: side,
            tokens: g.value(out).clone(),
        })
    }

    /// Names of the parameters that belong to the encoder proper (prompts excluded).
    pub fn is_backbone_param(name: &str) -> bool {
        name.starts_with("backbone.")
    }
}

/// Splits a frame into `N` flattened patches (`patch²·channels` values each,
/// row-major within the patch, channels innermost).
pub fn patchify(frame: &Image, cfg: &BackboneConfig) -> Result<Tensor, TensorError> {
    if frame.height != cfg.image_size || frame.width != cfg.image_size || frame.channels != cfg.channels {
        return Err(TensorError::ShapeMismatch {
            op: "patchify",
            expected: vec![cfg.image_size, cfg.image_size, cfg.channels],
            got: vec![frame.height, frame.width, frame.channels],
        });
    }
    let p = cfg.patch_size;
    let side = cfg.grid_side();
    let mut out = Tensor::zeros(&[side * side, cfg.patch_dim()]);
    for py in 0..side {
        for px in 0..side {
            let row = out.row_mut(py * side + px);
            let mut j = 0;
            for y in 0..p {
                for x in 0..p {
                    for &v in frame.pixel(py * p + y, px * p + x) {
                        row[j] = v;
                        j += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Sparse bilinear weights over grid cells for a 1×1 RoI-align of `bbox`:
/// the mean of four bilinear samples at the box's quarter points. Cell
/// `(r, c)` has its centre at `(c + 0.5, r + 0.5)` in grid units; samples
/// are clamped to the outermost centres.
pub fn roi_weights(bbox: &BBox, height: usize, width: usize) -> Result<Vec<(usize, f64)>, TensorError> {
    if !bbox.is_valid() {
        return Err(TensorError::Invalid(format!(
            "degenerate or out-of-range box [{}, {}, {}, {}]",
            bbox.x0, bbox.y0, bbox.x1, bbox.y1
        )));
    }
    let (w, h) = (bbox.x1 - bbox.x0, bbox.y1 - bbox.y0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(16);
    for fy in [0.25, 0.75] {
        for fx in [0.25, 0.75] {
            let sx = (bbox.x0 + fx * w) * width as f64;
            let sy = (bbox.y0 + fy * h) * height as f64;
            for (cell, wt) in bilinear(sx, sy, height, width) {
                let wt = wt * 0.25;
                match out.iter_mut().find(|(c, _)| *c == cell) {
                    Some(e) => e.1 += wt,
                    None => out.push((cell, wt)),
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear interpolation weights at grid-unit point `(x, y)`.
fn bilinear(x: f64, y: f64, height: usize, width: usize) -> [(usize, f64); 4] {
    let u = (x - 0.5).clamp(0.0, (width - 1) as f64);
    let v = (y - 0.5).clamp(0.0, (height - 1) as f64);
    let (c0, r0) = (u.floor() as usize, v.floor() as usize);
    let (c1, r1) = ((c0 + 1).min(width - 1), (r0 + 1).min(height - 1));
    let (lx, ly) = (u - c0 as f64, v - r0 as f64);
    [
        (r0 * width + c0, (1.0 - ly) * (1.0 - lx)),
        (r0 * width + c1, (1.0 - ly) * lx),
        (r1 * width + c0, ly * (1.0 - lx)),
        (r1 * width + c1, ly * lx),
    ]
}

pub fn roi_pool_1x1(grid: &PatchGrid, bbox: &BBox) -> Result<Vec<f64>, TensorError> {
    let d = grid.tokens.cols();
    let mut out = vec![0.0; d];
    for (cell, w) in roi_weights(bbox, grid.height, grid.width)? {
        for (o, v) in out.iter_mut().zip(grid.tokens.row(cell)) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Pooling matrix `M×N` whose product with the `N×D` grid gives the actor tokens.
pub fn roi_matrix(boxes: &[BBox], height: usize, width: usize) -> Result<Tensor, TensorError> {
    let mut m = Tensor::zeros(&[boxes.len().max(1), height * width]);
    for (i, b) in boxes.iter().enumerate() {
        for (cell, w) in roi_weights(b, height, width)? {
            m.row_mut(i)[cell] += w;
        }
    }
    Ok(m)
}

/// Actor tokens for one frame as a graph node: `M×D`.
pub fn pool_actors(g: &mut Graph, grid: Var, boxes: &[BBox], height: usize, width: usize) -> Result<Var, TensorError> {
    if boxes.is_empty() {
        return Err(TensorError::Empty { op: "pool_actors" });
    }
    let m = g.input(roi_matrix(boxes, height, width)?);
    Ok(g.matmul(m, grid))
}

/// `boxes[t][i]` is actor `i`'s box in frame `t`. Returns one `M×D` matrix per frame.
pub fn extract_actor_tokens(grids: &[PatchGrid], boxes: &[Vec<BBox>]) -> Result<Vec<Tensor>, TensorError> {
    if grids.len() != boxes.len() {
        return Err(TensorError::Invalid(format!(
            "{} grids but boxes for {} frames",
            grids.len(),
            boxes.len()
        )));
    }
    grids
        .iter()
        .zip(boxes)
        .map(|(grid, frame_boxes)| {
            if frame_boxes.is_empty() {
                return Err(TensorError::Empty { op: "extract_actor_tokens" });
            }
            roi_matrix(frame_boxes, grid.height, grid.width)?.matmul(&grid.tokens)
        })
        .collect()
}

/// Externally computed per-frame grids stored as `[H_f, W_f, D]` tensor
/// files at `<dir>/<clip_id>/<frame:04>.bin`.
#[derive(Clone, Debug)]
pub struct FeatureDir {
    pub root: PathBuf,
}

impl FeatureDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, clip_id: &str, frame: usize) -> PathBuf {
        self.root.join(clip_id).join(format!("{frame:04}.bin"))
    }

    pub fn load(&self, clip_id: &str, frame: usize) -> Result<PatchGrid, FeatureError> {
        let path = self.path(clip_id, frame);
        let t = tensor_io::load_tensor(&path).map_err(|e| FeatureError::Io(path.clone(), e))?;
        grid_from_tensor(t).map_err(|e| FeatureError::Shape(path, e))
    }

    pub fn save(&self, clip_id: &str, frame: usize, grid: &PatchGrid) -> std::io::Result<()> {
        let t = grid
            .tokens
            .clone()
            .reshape(&[grid.height, grid.width, grid.tokens.cols()])
            .expect("grid extents");
        tensor_io::save_tensor(&self.path(clip_id, frame), &t)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("feature file {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("feature file {0}: {1}")]
    Shape(PathBuf, TensorError),
}

fn grid_from_tensor(t: Tensor) -> Result<PatchGrid, TensorError> {
    let s = t.shape().to_vec();
    if s.len() != 3 {
        return Err(TensorError::Invalid(format!("expected [H_f, W_f, D], got {s:?}")));
    }
    Ok(PatchGrid {
        height: s[0],
        width: s[1],
        tokens: t.reshape(&[s[0] * s[1], s[2]])?,
    })
}
