//! Transformer building blocks expressed over [`Graph`] nodes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::param::{normal_tensor, xavier, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

pub const LN_EPS: f64 = 1e-5;

/// Shared shape of attention + FFN blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, heads: usize, ffn_hidden: usize) -> Result<Self, TensorError> {
        if model_dim == 0 || heads == 0 || ffn_hidden == 0 {
            return Err(TensorError::Invalid(
                "attention extents must be positive".into(),
            ));
        }
        if !model_dim.is_multiple_of(heads) {
            return Err(TensorError::Invalid(format!(
                "model_dim {model_dim} is not divisible by heads {heads}"
            )));
        }
        Ok(Self {
            model_dim,
            heads,
            ffn_hidden,
        })
    }

    /// `h = 4`, `ffn_hidden = 4·D`.
    pub fn with_defaults(model_dim: usize) -> Result<Self, TensorError> {
        Self::new(model_dim, 4, 4 * model_dim)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out), trainable);
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::zeros(&[1, fan_out]),
            trainable,
        );
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[1, dim], 1.0), trainable);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim]), trainable);
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), cfg.model_dim, cfg.ffn_hidden, trainable, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.ffn_hidden, cfg.model_dim, trainable, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head cross attention with learnable query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

/// Output of one attention call: the projected result and the node that
/// holds the per-head attention weights.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let d = cfg.model_dim;
        Self {
            query: Linear::new(store, &format!("{name}.q"), d, d, trainable, rng),
            key: Linear::new(store, &format!("{name}.k"), d, d, trainable, rng),
            value: Linear::new(store, &format!("{name}.v"), d, d, trainable, rng),
            output: Linear::new(store, &format!("{name}.o"), d, d, trainable, rng),
            heads: cfg.heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, q: Var, k: Var, v: Var) -> Attended {
        let q = self.query.forward(g, q);
        let k = self.key.forward(g, k);
        let v = self.value.forward(g, v);
        let weights = g.attention(q, k, v, self.heads);
        let output = self.output.forward(g, weights);
        Attended { output, weights }
    }
}

/// Plain-value multi-head attention: `Q` (`n_q×D`) attends to `K`, `V`
/// (`n_k×D`). Returns the output and the per-head weight matrices.
pub fn multi_head_attention(
    store: &ParamStore,
    attn: &MultiHeadAttention,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> Result<(Tensor, Vec<Tensor>), TensorError> {
    if k.rows() == 0 || k.is_empty() {
        return Err(TensorError::Empty {
            op: "multi_head_attention",
        });
    }
    if k.rows() != v.rows() || q.cols() != k.cols() || k.cols() != v.cols() {
        return Err(TensorError::ShapeMismatch {
            op: "multi_head_attention",
            expected: vec![k.rows(), q.cols()],
            got: vec![v.rows(), v.cols()],
        });
    }
    let mut g = Graph::new(store);
    let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let out = attn.forward(&mut g, qv, kv, vv);
    let weights = g
        .attention_weights(out.weights)
        .expect("attention node")
        .to_vec();
    Ok((g.value(out.output).clone(), weights))
}

/// Small normal initialisation used for learned tokens (std 0.02).
pub fn token_init<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    normal_tensor(rng, shape, 0.02)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        normal_tensor(rng, &[r, c], 1.0)
    }

    #[test]
    fn config_requires_divisible_heads() {
        assert!(AttentionConfig::new(32, 5, 128).is_err());
        let cfg = AttentionConfig::with_defaults(32).unwrap();
        assert_eq!((cfg.heads, cfg.ffn_hidden), (4, 128));
    }

    /// Straight-line single-head attention, written without the graph.
    fn dense_oracle(store: &ParamStore, a: &MultiHeadAttention, q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let lin = |l: &Linear, x: &Tensor| {
            let w = store.value(l.weight);
            let b = store.value(l.bias);
            let mut out = vec![vec![0.0; w.cols()]; x.rows()];
            for i in 0..x.rows() {
                for j in 0..w.cols() {
                    let mut s = b.data()[j];
                    for t in 0..x.cols() {
                        s += x.at(i, t) * w.at(t, j);
                    }
                    out[i][j] = s;
                }
            }
            out
        };
        let (qp, kp, vp) = (lin(&a.query, q), lin(&a.key, k), lin(&a.value, v));
        let d = qp[0].len() as f64;
        let mut mixed = vec![vec![0.0; qp[0].len()]; qp.len()];
        for i in 0..qp.len() {
            let logits: Vec<f64> = kp
                .iter()
                .map(|kj| qp[i].iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() / d.sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = ex.iter().sum();
            for (j, e) in ex.iter().enumerate() {
                for c in 0..mixed[i].len() {
                    mixed[i][c] += e / z * vp[j][c];
                }
            }
        }
        let mixed = Tensor::from_rows(&mixed).unwrap();
        Tensor::from_rows(&lin(&a.output, &mixed)).unwrap()
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = AttentionConfig::new(4, 1, 16).unwrap();
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "a", &cfg, true, &mut rng);
        let q = random(&mut rng, 2, 4);
        let k = random(&mut rng, 3, 4);
        let v = random(&mut rng, 3, 4);
        let (out, w) = multi_head_attention(&store, &attn, &q, &k, &v).unwrap();
        let oracle = dense_oracle(&store, &attn, &q, &k, &v);
        assert!(out.max_abs_diff(&oracle) <= 1e-12);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].shape(), &[2, 3]);
    }

    #[test]
    fn single_key_and_identical_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AttentionConfig::new(8, 2, 16).unwrap();
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "a", &cfg, true, &mut rng);
        let q = random(&mut rng, 3, 8);
        let k = random(&mut rng, 1, 8);
        let v = random(&mut rng, 1, 8);

        let mut g = Graph::new(&store);
        let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let out = attn.forward(&mut g, qv, kv, vv);
        let vp = attn.value.forward(&mut g, vv);
        let mixed = g.value(out.weights).clone();
        for h in g.attention_weights(out.weights).unwrap() {
            assert!(h.data().iter().all(|&w| w == 1.0));
        }
        for i in 0..3 {
            for (a, b) in mixed.row(i).iter().zip(g.value(vp).row(0)) {
                assert!((a - b).abs() < 1e-14);
            }
        }

        let row = random(&mut rng, 1, 8);
        let keys = Tensor::from_rows(&vec![row.data().to_vec(); 4]).unwrap();
        let (_, w) = multi_head_attention(&store, &attn, &q, &keys, &random(&mut rng, 4, 8)).unwrap();
        for h in &w {
            assert!(h.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn permuting_keys_and_values_jointly_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AttentionConfig::new(8, 4, 32).unwrap();
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "a", &cfg, true, &mut rng);
        let q = random(&mut rng, 3, 8);
        let k = random(&mut rng, 5, 8);
        let v = random(&mut rng, 5, 8);
        let perm = [3, 0, 4, 1, 2];
        let (a, _) = multi_head_attention(&store, &attn, &q, &k, &v).unwrap();
        let (b, _) =
            multi_head_attention(&store, &attn, &q, &k.gather_rows(&perm), &v.gather_rows(&perm)).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn rows_are_convex_combinations_and_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = AttentionConfig::new(8, 2, 16).unwrap();
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "a", &cfg, true, &mut rng);
        let q = random(&mut rng, 4, 8);
        let k = random(&mut rng, 6, 8);
        let v = random(&mut rng, 6, 8);
        let (full, w) = multi_head_attention(&store, &attn, &q, &k, &v).unwrap();
        for h in &w {
            for i in 0..4 {
                assert!((h.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(h.row(i).iter().all(|&x| x > 0.0));
            }
        }
        let (part, _) = multi_head_attention(&store, &attn, &q.slice_rows(2, 1), &k, &v).unwrap();
        for (a, b) in full.row(2).iter().zip(part.row(0)) {
            assert!((a - b).abs() <= 1e-12);
        }
        let empty_err = multi_head_attention(&store, &attn, &q, &Tensor::zeros(&[1, 4]), &v);
        assert!(empty_err.is_err());
    }
}
