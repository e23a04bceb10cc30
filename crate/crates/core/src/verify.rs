//! Self-verification suites: finite-difference gradient checks, an injected
//! backward fault, exhaustive assignment and metric oracles, and permutation
//! properties of the group/context transformer.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assignment::hungarian;
use crate::backbone::{Backbone, BackboneConfig, PromptMode};
use crate::data::{generate_synthetic, ClipTargets, GtGroup, Image, SampleMode, SyntheticConfig};
use crate::gct::{gct_forward, Gct};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::heads::{GroupPrediction, Heads, OutlierMode};
use crate::losses::{contrastive, group_targets, match_groups, membership_targets, positives, row_softmax, LossConfig};
use crate::metrics::{group_map, membership_accuracy, outlier_miou, social_accuracy, EvalRecord};
use crate::model::{sample_frames, ClipInput, Model, ModelConfig};
use crate::nn::AttentionConfig;
use crate::param::{normal_tensor, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::Error;

pub const GRAD_EPS: f64 = 1e-5;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const MODULE_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-9;
pub const EQUIVARIANCE_TOLERANCE: f64 = 1e-12;
pub const GRAD_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub note: String,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} max error {:.3e} (tolerance {:.0e}, {} cases)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance,
            self.cases
        )?;
        if !self.note.is_empty() {
            write!(f, " {}", self.note)?;
        }
        Ok(())
    }
}

fn failed(name: &str, tolerance: f64, e: impl fmt::Display) -> SuiteResult {
    SuiteResult {
        name: name.to_string(),
        passed: false,
        max_error: f64::INFINITY,
        tolerance,
        cases: 0,
        note: format!("error: {e}"),
    }
}

// ---------------------------------------------------------------- gradients

type Fault = Option<&'static str>;

/// Random bilinear read-out `r·x·c` of a matrix node, fixed by `seed`.
fn readout(g: &mut Graph, x: Var, seed: u64) -> Var {
    let (n, c) = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7265_6164);
    let r = g.input(normal_tensor(&mut rng, &[1, n], 1.0));
    let col = g.input(normal_tensor(&mut rng, &[c, 1], 1.0));
    let y = g.matmul(r, x);
    g.matmul(y, col)
}

fn readout_all(g: &mut Graph, xs: &[Var], seed: u64) -> Var {
    let terms: Vec<(Var, f64)> = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| (readout(g, x, seed.wrapping_add(i as u64 * 7919)), 1.0))
        .collect();
    g.weighted_sum(&terms)
}

fn run_check(
    store: &mut ParamStore,
    ids: &[ParamId],
    cap: Option<usize>,
    fault: Fault,
    build: impl Fn(&mut Graph) -> Result<Var, Error>,
) -> Result<GradCheckReport, Error> {
    grad_check(store, ids, GRAD_EPS, cap, |s| {
        let mut g = Graph::new(s);
        if let Some(op) = fault {
            g.inject_sign_error(op);
        }
        let out = build(&mut g)?;
        let grads = g.backward(out)?;
        Ok::<_, Error>((g.scalar(out), grads))
    })
    .map_err(|e| Error::Numeric(e.to_string()))
}

fn rand_param(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize], std: f64) -> ParamId {
    store.add(name, normal_tensor(rng, shape, std), true)
}

/// A finite-difference check of one operation or module.
pub struct GradTarget {
    pub name: &'static str,
    pub tolerance: f64,
    pub check: fn(u64, Fault) -> Result<GradCheckReport, Error>,
}

macro_rules! primitive {
    ($name:literal, |$g:ident, $p:ident, $seed:ident| $body:expr, [$(($pn:literal, $shape:expr, $std:expr)),*]) => {
        GradTarget {
            name: $name,
            tolerance: PRIMITIVE_TOLERANCE,
            check: |seed, fault| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut store = ParamStore::new();
                let ids: Vec<ParamId> = vec![$(rand_param(&mut store, &mut rng, $pn, &$shape, $std)),*];
                let all = ids.clone();
                run_check(&mut store, &all, None, fault, |$g| {
                    let $p: Vec<Var> = ids.iter().map(|&id| $g.param(id)).collect();
                    let $seed = seed;
                    Ok($body)
                })
            },
        }
    };
}

pub fn primitive_targets() -> Vec<GradTarget> {
    vec![
        primitive!("matmul", |g, p, s| { let y = g.matmul(p[0], p[1]); readout(g, y, s) }, [("a", [3, 4], 1.0), ("b", [4, 2], 1.0)]),
        primitive!("matmul_t", |g, p, s| { let y = g.matmul_t(p[0], p[1]); readout(g, y, s) }, [("a", [3, 4], 1.0), ("b", [2, 4], 1.0)]),
        primitive!("add", |g, p, s| { let y = g.add(p[0], p[1]); readout(g, y, s) }, [("a", [3, 4], 1.0), ("b", [3, 4], 1.0)]),
        primitive!("add_row", |g, p, s| { let y = g.add_row(p[0], p[1]); readout(g, y, s) }, [("a", [3, 4], 1.0), ("r", [1, 4], 1.0)]),
        primitive!("scale", |g, p, s| { let y = g.scale(p[0], -0.7); readout(g, y, s) }, [("a", [3, 4], 1.0)]),
        primitive!("gelu", |g, p, s| { let y = g.gelu(p[0]); readout(g, y, s) }, [("a", [4, 5], 1.5)]),
        primitive!("layer_norm", |g, p, s| { let y = g.layer_norm(p[0], p[1], p[2], 1e-5); readout(g, y, s) }, [("x", [3, 5], 1.0), ("gamma", [1, 5], 1.0), ("beta", [1, 5], 1.0)]),
        primitive!("attention", |g, p, s| { let y = g.attention(p[0], p[1], p[2], 2); readout(g, y, s) }, [("q", [3, 4], 1.0), ("k", [5, 4], 1.0), ("v", [5, 4], 1.0)]),
        primitive!("concat_rows", |g, p, s| { let y = g.concat_rows(&[p[0], p[1]]); readout(g, y, s) }, [("a", [2, 3], 1.0), ("b", [3, 3], 1.0)]),
        primitive!("slice_rows", |g, p, s| { let y = g.slice_rows(p[0], 1, 2); readout(g, y, s) }, [("a", [4, 3], 1.0)]),
        primitive!("slice_cols", |g, p, s| { let y = g.slice_cols(p[0], 2, 3); readout(g, y, s) }, [("a", [3, 6], 1.0)]),
        primitive!("mean", |g, p, s| { let y = g.mean(&[p[0], p[1], p[2]]); readout(g, y, s) }, [("a", [2, 3], 1.0), ("b", [2, 3], 1.0), ("c", [2, 3], 1.0)]),
        primitive!("cross_entropy", |g, p, _s| g.cross_entropy(p[0], &[Some(1), None, Some(4), Some(0)]), [("logits", [4, 5], 1.5)]),
        primitive!("l2_normalize_rows", |g, p, s| { let y = g.l2_normalize_rows(p[0]); readout(g, y, s) }, [("x", [3, 4], 1.0)]),
        primitive!("supcon", |g, p, _s| g.supcon(p[0], &[vec![1, 2], vec![0], vec![0], vec![]], 0.2), [("sim", [4, 4], 0.5)]),
        primitive!("weighted_sum", |g, p, s| { let a = readout(g, p[0], s); let b = readout(g, p[1], s + 1); g.weighted_sum(&[(a, 2.0), (b, -0.5)]) }, [("a", [2, 3], 1.0), ("b", [3, 2], 1.0)]),
        primitive!("param_flat3", |g, _p, s| { let id = g.params().lookup("t").expect("t"); let y = g.param_flat3(id); readout(g, y, s) }, [("t", [2, 3, 4], 1.0)]),
    ]
}

fn small_backbone(mode: PromptMode) -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        layers: 2,
        model_dim: 8,
        heads: 2,
        ffn_hidden: 16,
        prompt_mode: mode,
        prompt_count: 3,
        frozen: false,
    }
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let mut img = Image::new(size, size, 3);
    img.data.iter_mut().for_each(|v| *v = rng.random::<f64>());
    img
}

fn backbone_check(mode: PromptMode, seed: u64, fault: Fault) -> Result<GradCheckReport, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_backbone(mode);
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, &cfg, &mut rng)?;
    let img = random_image(&mut rng, cfg.image_size);
    let ids = store.trainable_ids();
    run_check(&mut store, &ids, Some(6), fault, |g| {
        let out = bb.forward(g, &img)?;
        Ok(readout(g, out, seed))
    })
}

const GCT_DIM: usize = 8;

struct GctFixture {
    store: ParamStore,
    gct: Gct,
    actors: Vec<ParamId>,
    grids: Vec<ParamId>,
}

fn gct_fixture(seed: u64) -> Result<GctFixture, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(GCT_DIM, 2, 16)?;
    let (k, m, t, n) = (3, 4, 2, 5);
    let gct = Gct::new(&mut store, &cfg, k, t, &mut rng)?;
    let actors = (0..t)
        .map(|i| rand_param(&mut store, &mut rng, &format!("actors.{i}"), &[m, GCT_DIM], 1.0))
        .collect();
    let grids = (0..t)
        .map(|i| rand_param(&mut store, &mut rng, &format!("grid.{i}"), &[n, GCT_DIM], 1.0))
        .collect();
    Ok(GctFixture {
        store,
        gct,
        actors,
        grids,
    })
}

fn gct_check(seed: u64, fault: Fault, contextual: bool) -> Result<GradCheckReport, Error> {
    let mut f = gct_fixture(seed)?;
    let ids: Vec<ParamId> = f
        .store
        .iter()
        .filter(|(_, name, _)| contextual || !name.starts_with("gct.contextual"))
        .filter(|(_, name, _)| contextual || !name.starts_with("grid."))
        .map(|(id, _, _)| id)
        .collect();
    let (gct, actors, grids) = (&f.gct, f.actors.clone(), f.grids.clone());
    run_check(&mut f.store, &ids, Some(6), fault, |g| {
        let a: Vec<Var> = actors.iter().map(|&id| g.param(id)).collect();
        let i: Vec<Var> = grids.iter().map(|&id| g.param(id)).collect();
        let out = gct.forward(g, &a, &i)?;
        let read: Vec<Var> = if contextual {
            out.a_ctx.iter().chain(&out.g_ctx).copied().collect()
        } else {
            out.g_grp.clone()
        };
        Ok(readout_all(g, &read, seed))
    })
}

struct HeadFixture {
    store: ParamStore,
    heads: Heads,
    actors: ParamId,
    groups: ParamId,
    targets: ClipTargets,
}

fn head_fixture(seed: u64, mode: OutlierMode) -> Result<HeadFixture, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let heads = Heads::new(&mut store, GCT_DIM, 3, 2, mode, &mut rng)?;
    let actors = rand_param(&mut store, &mut rng, "actors", &[5, GCT_DIM], 1.0);
    let groups = rand_param(&mut store, &mut rng, "groups", &[3, GCT_DIM], 1.0);
    let targets = ClipTargets {
        actions: vec![0, 1, 1, 0, 1],
        groups: vec![
            GtGroup {
                members: vec![0, 2],
                activity: 1,
            },
            GtGroup {
                members: vec![1, 3],
                activity: 2,
            },
        ],
        singletons: vec![4],
    };
    Ok(HeadFixture {
        store,
        heads,
        actors,
        groups,
        targets,
    })
}

#[derive(Clone, Copy)]
enum HeadObjective {
    Outputs,
    Group,
    Membership,
    Individual,
    Contrastive,
}

fn head_check(seed: u64, fault: Fault, mode: OutlierMode, objective: HeadObjective) -> Result<GradCheckReport, Error> {
    let mut f = head_fixture(seed, mode)?;
    let ids = f.store.trainable_ids();
    let (heads, targets, a_id, g_id) = (&f.heads, f.targets.clone(), f.actors, f.groups);
    let tau = LossConfig::default().tau;
    run_check(&mut f.store, &ids, Some(8), fault, |g| {
        let a = g.param(a_id);
        let gr = g.param(g_id);
        let out = heads.forward(g, a, gr);
        let matching = || {
            match_groups(
                &row_softmax(g.value(out.group_logits)),
                &row_softmax(g.value(out.affinity)),
                &targets.groups,
            )
        };
        Ok(match objective {
            HeadObjective::Outputs => readout_all(
                g,
                &[out.group_logits, out.action_logits, out.affinity, out.actor_embedding],
                seed,
            ),
            HeadObjective::Group => {
                let t = group_targets(&matching()?, &targets.groups, heads.activities);
                g.cross_entropy(out.group_logits, &t)
            }
            HeadObjective::Membership => {
                let t = membership_targets(&matching()?, &targets, g.value(out.affinity), heads.mode())?;
                g.cross_entropy(out.affinity, &t)
            }
            HeadObjective::Individual => {
                let t: Vec<Option<usize>> = targets.actions.iter().map(|&a| Some(a)).collect();
                g.cross_entropy(out.action_logits, &t)
            }
            HeadObjective::Contrastive => contrastive(g, out.actor_embedding, &positives(&targets), tau),
        })
    })
}

fn composite_check(seed: u64, fault: Fault) -> Result<GradCheckReport, Error> {
    let data = SyntheticConfig {
        clips: 1,
        actors: [4, 5],
        groups: [1, 2],
        singletons: [0, 1],
        frame_count: 4,
        seed,
        ..Default::default()
    };
    let ds = generate_synthetic(&data)?;
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            layers: 1,
            model_dim: GCT_DIM,
            heads: 2,
            ffn_hidden: 16,
            prompt_mode: PromptMode::Deep,
            prompt_count: 2,
            frozen: false,
        },
        group_tokens: 3,
        frames: 2,
        gct_heads: 2,
        gct_ffn_hidden: 16,
        ..Default::default()
    };
    let (model, mut store) = Model::new(&cfg, seed)?;
    let frames = sample_frames(&ds, 0, cfg.frames, SampleMode::Eval, 0)?;
    let input = ClipInput::gather(&ds, 0, &frames, None)?;
    let targets = ds.clips[0].targets();
    let loss_cfg = LossConfig::default();
    let ids = store.trainable_ids();
    run_check(&mut store, &ids, Some(4), fault, |g| {
        let fwd = model.forward(g, &input, true)?;
        Ok(model.loss(g, &fwd, &targets, &loss_cfg)?.total)
    })
}

pub fn module_targets() -> Vec<GradTarget> {
    vec![
        GradTarget {
            name: "backbone (deep prompts)",
            tolerance: MODULE_TOLERANCE,
            check: |s, f| backbone_check(PromptMode::Deep, s, f),
        },
        GradTarget {
            name: "backbone (shallow prompts)",
            tolerance: MODULE_TOLERANCE,
            check: |s, f| backbone_check(PromptMode::Shallow, s, f),
        },
        GradTarget {
            name: "backbone (no prompts)",
            tolerance: MODULE_TOLERANCE,
            check: |s, f| backbone_check(PromptMode::None, s, f),
        },
        GradTarget {
            name: "gct grouping layer",
            tolerance: MODULE_TOLERANCE,
            check: |s, f| gct_check(s, f, false),
        },
        GradTarget {
            name: "gct contextual layer",
            tolerance: MODULE_TOLERANCE,
            check: |s, f| gct_check(s, f, true),
        },
        GradTarget {
            name: "heads (outlier token)",
            tolerance: MODULE_TOLERANCE,
            check: |s, f| head_check(s, f, OutlierMode::Token, HeadObjective::Outputs),
        },
        GradTarget {
            name: "heads (background)",
            tolerance: MODULE_TOLERANCE,
            check: |s, f| head_check(s, f, OutlierMode::Background, HeadObjective::Outputs),
        },
        GradTarget {
            name: "loss l_group",
            tolerance: MODULE_TOLERANCE,
            check: |s, f| head_check(s, f, OutlierMode::Token, HeadObjective::Group),
        },
        GradTarget {
            name: "loss l_mem",
            tolerance: MODULE_TOLERANCE,
            check: |s, f| head_check(s, f, OutlierMode::Token, HeadObjective::Membership),
        },
        GradTarget {
            name: "loss l_mem (background)",
            tolerance: MODULE_TOLERANCE,
            check: |s, f| head_check(s, f, OutlierMode::Background, HeadObjective::Membership),
        },
        GradTarget {
            name: "loss l_ind",
            tolerance: MODULE_TOLERANCE,
            check: |s, f| head_check(s, f, OutlierMode::Token, HeadObjective::Individual),
        },
        GradTarget {
            name: "loss l_con",
            tolerance: MODULE_TOLERANCE,
            check: |s, f| head_check(s, f, OutlierMode::Token, HeadObjective::Contrastive),
        },
        GradTarget {
            name: "full composite loss",
            tolerance: MODULE_TOLERANCE,
            check: composite_check,
        },
    ]
}

pub fn run_grad_target(t: &GradTarget, seeds: &[u64]) -> SuiteResult {
    let mut max_error: f64 = 0.0;
    let mut cases = 0;
    let mut worst = String::new();
    for &seed in seeds {
        match (t.check)(seed, None) {
            Ok(r) => {
                cases += r.checked;
                if r.max_rel_error >= max_error {
                    max_error = r.max_rel_error;
                    if let Some((name, i)) = r.worst {
                        worst = format!("worst {name}[{i}] seed {seed}");
                    }
                }
            }
            Err(e) => return failed(t.name, t.tolerance, e),
        }
    }
    SuiteResult {
        name: t.name.to_string(),
        passed: max_error <= t.tolerance,
        max_error,
        tolerance: t.tolerance,
        cases,
        note: worst,
    }
}

/// Gradient checks of every primitive and module over `seeds`.
pub fn gradient_suite(seeds: &[u64]) -> Vec<SuiteResult> {
    primitive_targets()
        .iter()
        .chain(&module_targets())
        .map(|t| run_grad_target(t, seeds))
        .collect()
}

/// Negates the backward pass of selected operations and requires the
/// gradient check to notice. Passes when every fault is detected.
pub fn mutation_suite() -> SuiteResult {
    let faults: [(&'static str, GradTarget); 4] = [
        ("attention", primitive_targets().swap_remove(7)),
        ("layer_norm", primitive_targets().swap_remove(6)),
        ("gelu", primitive_targets().swap_remove(5)),
        ("matmul", module_targets().swap_remove(12)),
    ];
    let mut min_error = f64::INFINITY;
    let mut missed = Vec::new();
    for (op, target) in &faults {
        match (target.check)(0, Some(op)) {
            Ok(r) => {
                min_error = min_error.min(r.max_rel_error);
                if r.max_rel_error <= target.tolerance {
                    missed.push(*op);
                }
            }
            Err(e) => return failed("injected sign errors", MODULE_TOLERANCE, e),
        }
    }
    SuiteResult {
        name: "injected sign errors".into(),
        passed: missed.is_empty(),
        max_error: min_error,
        tolerance: MODULE_TOLERANCE,
        cases: faults.len(),
        note: if missed.is_empty() {
            "every fault detected (smallest error shown)".into()
        } else {
            format!("undetected: {missed:?}")
        },
    }
}

// --------------------------------------------------------------- assignment

/// Minimum over all permutations of `Σ_i c[i][π(i)]` (square matrices).
pub fn permutation_minimum(c: &[Vec<f64>]) -> f64 {
    fn rec(c: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == c.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..c.len() {
            if !used[j] {
                used[j] = true;
                rec(c, row + 1, used, acc + c[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(c, 0, &mut vec![false; c.len()], 0.0, &mut best);
    best
}

/// Random matrices for `n = 2..=7` against exhaustive enumeration, plus
/// the all-equal tie case.
pub fn hungarian_suite(per_size: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_error: f64 = 0.0;
    let mut cases = 0;
    let mut problems = Vec::new();
    for n in 2..=7 {
        for trial in 0..per_size {
            // every other matrix has small integer costs, so ties are common
            let c: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..n)
                        .map(|_| {
                            if trial % 2 == 0 {
                                rng.random_range(-10.0..10.0)
                            } else {
                                rng.random_range(0..4) as f64
                            }
                        })
                        .collect()
                })
                .collect();
            let a = match hungarian(&c) {
                Ok(a) => a,
                Err(e) => return failed("hungarian oracle", 0.0, e),
            };
            let cost: f64 = a.pairs.iter().map(|&(r, col)| c[r][col]).sum();
            let best = permutation_minimum(&c);
            let err = (cost - best).abs();
            max_error = max_error.max(err);
            if err != 0.0 && problems.len() < 3 {
                problems.push(format!("n={n} trial {trial}: {cost} vs {best}"));
            }
            cases += 1;
        }
        let tie = hungarian(&vec![vec![1.5; n]; n]).map(|a| a.pairs);
        if tie != Ok((0..n).map(|i| (i, i)).collect()) {
            problems.push(format!("all-equal n={n}: {tie:?}"));
        }
        cases += 1;
    }
    SuiteResult {
        name: "hungarian oracle".into(),
        passed: problems.is_empty(),
        max_error,
        tolerance: 0.0,
        cases,
        note: problems.join("; "),
    }
}

// ------------------------------------------------------------------ metrics

/// Random evaluation set: `1..=5` clips, each with at most 10 actors, at most
/// `max_groups` ground-truth groups and random disjoint predictions.
pub fn toy_eval_set(rng: &mut impl Rng, max_groups: usize, classes: usize) -> Vec<EvalRecord> {
    let clips = rng.random_range(1..=5);
    (0..clips)
        .map(|c| {
            let m = rng.random_range(1..=10);
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(rng);
            let groups = rng.random_range(0..=max_groups.min(m / 2));
            let mut gt = Vec::new();
            let mut pos = 0;
            for _ in 0..groups {
                let size = rng.random_range(2..=4).min(m - pos);
                if size < 2 {
                    break;
                }
                let mut members = order[pos..pos + size].to_vec();
                members.sort_unstable();
                gt.push(GtGroup {
                    members,
                    activity: rng.random_range(0..classes),
                });
                pos += size;
            }
            let mut singletons = order[pos..].to_vec();
            singletons.sort_unstable();
            // predictions: GT groups kept, split or dropped, plus random extras
            let mut free: Vec<usize> = (0..m).collect();
            free.shuffle(rng);
            let mut taken = vec![false; m];
            let mut preds = Vec::new();
            let conf = |rng: &mut dyn rand::RngCore| f64::from(rng.random_range(1..=5u32)) / 5.0;
            for g in &gt {
                let members: Vec<usize> = match rng.random_range(0..4) {
                    0 => continue,
                    1 => g.members[..g.members.len() - 1].to_vec(),
                    _ => g.members.clone(),
                };
                let activity = if rng.random_bool(0.8) { g.activity } else { rng.random_range(0..classes) };
                members.iter().for_each(|&a| taken[a] = true);
                preds.push(GroupPrediction {
                    members,
                    activity,
                    confidence: conf(rng),
                });
            }
            let rest: Vec<usize> = free.into_iter().filter(|&a| !taken[a]).collect();
            let mut i = 0;
            while i < rest.len() && rng.random_bool(0.4) {
                let size = rng.random_range(1..=3).min(rest.len() - i);
                let mut members = rest[i..i + size].to_vec();
                members.sort_unstable();
                preds.push(GroupPrediction {
                    members,
                    activity: rng.random_range(0..classes),
                    confidence: conf(rng),
                });
                i += size;
            }
            EvalRecord {
                clip_id: format!("toy_{c:02}"),
                predictions: preds,
                actions: (0..m).map(|_| rng.random_range(0..2)).collect(),
                gt: ClipTargets {
                    actions: (0..m).map(|_| rng.random_range(0..2)).collect(),
                    groups: gt,
                    singletons,
                },
            }
        })
        .collect()
}

fn set_iou(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

/// Size of the largest matching in a bipartite graph given as adjacency lists.
fn max_matching(adj: &[Vec<usize>], right: usize) -> usize {
    fn rec(adj: &[Vec<usize>], i: usize, used: &mut [bool]) -> usize {
        if i == adj.len() {
            return 0;
        }
        let mut best = rec(adj, i + 1, used);
        for &j in &adj[i] {
            if !used[j] {
                used[j] = true;
                best = best.max(1 + rec(adj, i + 1, used));
                used[j] = false;
            }
        }
        best
    }
    rec(adj, 0, &mut vec![false; right])
}

/// Group mAP with true positives counted as the maximum matching of every
/// ranked prefix, enumerated exhaustively.
pub fn oracle_group_map(records: &[EvalRecord], threshold: f64, classes: usize) -> f64 {
    let mut aps = Vec::new();
    for c in 0..classes {
        let gts: Vec<(usize, &GtGroup)> = records
            .iter()
            .enumerate()
            .flat_map(|(r, rec)| rec.gt.groups.iter().filter(|g| g.activity == c).map(move |g| (r, g)))
            .collect();
        if gts.is_empty() {
            continue;
        }
        let mut preds: Vec<(usize, &GroupPrediction)> = records
            .iter()
            .enumerate()
            .flat_map(|(r, rec)| rec.predictions.iter().filter(|p| p.activity == c).map(move |p| (r, p)))
            .collect();
        preds.sort_by(|(ra, a), (rb, b)| {
            b.confidence
                .partial_cmp(&a.confidence)
                .expect("finite confidence")
                .then(records[*ra].clip_id.cmp(&records[*rb].clip_id))
                .then(a.members.cmp(&b.members))
        });
        let mut precision = Vec::new();
        let mut recall = Vec::new();
        for k in 1..=preds.len() {
            let adj: Vec<Vec<usize>> = preds[..k]
                .iter()
                .map(|(r, p)| {
                    (0..gts.len())
                        .filter(|&j| gts[j].0 == *r && set_iou(&p.members, &gts[j].1.members) >= threshold)
                        .collect()
                })
                .collect();
            let tp = max_matching(&adj, gts.len()) as f64;
            precision.push(tp / k as f64);
            recall.push(tp / gts.len() as f64);
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for k in 0..precision.len() {
            let envelope = precision[k..].iter().copied().fold(0.0, f64::max);
            ap += (recall[k] - prev) * envelope;
            prev = recall[k];
        }
        aps.push(ap);
    }
    if aps.is_empty() {
        return if records.iter().all(|r| r.predictions.is_empty()) { 1.0 } else { 0.0 };
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

pub fn oracle_outlier_miou(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return 1.0;
    }
    let total: f64 = records
        .iter()
        .map(|r| {
            let grouped: BTreeSet<usize> = r.predictions.iter().flat_map(|p| p.members.iter().copied()).collect();
            let outliers: Vec<usize> = (0..r.gt.actions.len()).filter(|a| !grouped.contains(a)).collect();
            set_iou(&outliers, &r.gt.singletons)
        })
        .sum();
    total / records.len() as f64
}

/// All ways to pair `min(n, p)` GT groups with distinct predictions, in
/// lexicographic order; keeps the first with maximal total IoU.
fn oracle_matching(r: &EvalRecord) -> Vec<Option<usize>> {
    let (n, p) = (r.gt.groups.len(), r.predictions.len());
    let need = n.min(p);
    let iou: Vec<Vec<f64>> = r
        .gt
        .groups
        .iter()
        .map(|g| r.predictions.iter().map(|q| set_iou(&q.members, &g.members)).collect())
        .collect();
    let mut all = Vec::new();
    fn rec(n: usize, p: usize, need: usize, cur: &mut Vec<Option<usize>>, used: &mut [bool], out: &mut Vec<Vec<Option<usize>>>) {
        let assigned = cur.iter().flatten().count();
        if cur.len() == n {
            if assigned == need {
                out.push(cur.clone());
            }
            return;
        }
        for j in 0..p {
            if !used[j] {
                used[j] = true;
                cur.push(Some(j));
                rec(n, p, need, cur, used, out);
                cur.pop();
                used[j] = false;
            }
        }
        cur.push(None);
        rec(n, p, need, cur, used, out);
        cur.pop();
    }
    rec(n, p, need, &mut Vec::new(), &mut vec![false; p], &mut all);
    let score = |s: &[Option<usize>]| -> f64 { s.iter().enumerate().filter_map(|(g, q)| q.map(|q| -iou[g][q])).sum() };
    let best = all.iter().map(|s| score(s)).fold(f64::INFINITY, f64::min);
    let slack = 1e-9 * best.abs().max(1.0);
    all.into_iter().find(|s| score(s) <= best + slack).unwrap_or_default()
}

pub fn oracle_social_accuracy(records: &[EvalRecord]) -> f64 {
    let total: usize = records.iter().map(|r| r.gt.groups.len()).sum();
    if total == 0 {
        return if records.iter().all(|r| r.predictions.is_empty()) { 1.0 } else { 0.0 };
    }
    let mut hit = 0;
    for r in records {
        for (g, m) in oracle_matching(r).into_iter().enumerate() {
            if let Some(q) = m {
                let (pred, gt) = (&r.predictions[q], &r.gt.groups[g]);
                if set_iou(&pred.members, &gt.members) >= 0.5 && pred.activity == gt.activity {
                    hit += 1;
                }
            }
        }
    }
    hit as f64 / total as f64
}

pub fn oracle_membership_accuracy(records: &[EvalRecord]) -> f64 {
    let total: usize = records.iter().map(|r| r.gt.actions.len()).sum();
    if total == 0 {
        return 1.0;
    }
    let mut hit = 0;
    for r in records {
        let matching = oracle_matching(r);
        for a in 0..r.gt.actions.len() {
            let pred = r.predictions.iter().position(|p| p.members.contains(&a));
            let gt = r.gt.groups.iter().position(|g| g.members.contains(&a));
            let ok = match gt {
                Some(g) => matching.get(g).copied().flatten().is_some_and(|q| Some(q) == pred),
                None => pred.is_none(),
            };
            hit += usize::from(ok);
        }
    }
    hit as f64 / total as f64
}

/// Library metrics against the brute-force evaluators on `sets` random
/// evaluation sets, plus mAP monotonicity in the threshold.
pub fn metric_suite(sets: usize, seed: u64) -> SuiteResult {
    let classes = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_error: f64 = 0.0;
    let mut problems = Vec::new();
    for s in 0..sets {
        let recs = toy_eval_set(&mut rng, 4, classes);
        let pairs = [
            ("map@0.5", group_map(&recs, 0.5, classes), oracle_group_map(&recs, 0.5, classes)),
            ("map@1.0", group_map(&recs, 1.0, classes), oracle_group_map(&recs, 1.0, classes)),
            ("outlier_miou", Ok(outlier_miou(&recs)), oracle_outlier_miou(&recs)),
            ("social_accuracy", Ok(social_accuracy(&recs)), oracle_social_accuracy(&recs)),
            ("membership_accuracy", Ok(membership_accuracy(&recs)), oracle_membership_accuracy(&recs)),
        ];
        for (name, lib, oracle) in pairs {
            let lib = match lib {
                Ok(v) => v,
                Err(e) => return failed("metric oracle", ORACLE_TOLERANCE, e),
            };
            let err = (lib - oracle).abs();
            max_error = max_error.max(err);
            if err > ORACLE_TOLERANCE && problems.len() < 3 {
                problems.push(format!("set {s} {name}: {lib} vs {oracle}"));
            }
        }
        let (lo, hi) = (pairs_value(&recs, 0.5, classes), pairs_value(&recs, 1.0, classes));
        if lo < hi {
            problems.push(format!("set {s}: map@0.5 {lo} < map@1.0 {hi}"));
        }
    }
    SuiteResult {
        name: "metric oracle".into(),
        passed: problems.is_empty(),
        max_error,
        tolerance: ORACLE_TOLERANCE,
        cases: sets,
        note: problems.join("; "),
    }
}

fn pairs_value(recs: &[EvalRecord], t: f64, classes: usize) -> f64 {
    group_map(recs, t, classes).unwrap_or(f64::NAN)
}

// ------------------------------------------------------------- equivariance

fn max_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

/// Actor and group-token permutations through the group/context transformer,
/// and the backbone's output token count under every prompt mode.
pub fn equivariance_suite(seeds: &[u64]) -> SuiteResult {
    let mut max_error: f64 = 0.0;
    let mut problems = Vec::new();
    for &seed in seeds {
        let r = (|| -> Result<(), Error> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (k, m, t, n, d) = (4, rng.random_range(2..=7), 3, 9, 16);
            let cfg = AttentionConfig::new(d, 4, 32)?;
            let mut store = ParamStore::new();
            let gct = Gct::new(&mut store, &cfg, k, t, &mut rng)?;
            let actors: Vec<Tensor> = (0..t).map(|_| normal_tensor(&mut rng, &[m, d], 1.0)).collect();
            let grids: Vec<Tensor> = (0..t).map(|_| normal_tensor(&mut rng, &[n, d], 1.0)).collect();
            let base = gct_forward(&store, &gct, &actors, &grids)?;

            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(&mut rng);
            let permuted: Vec<Tensor> = actors.iter().map(|a| a.gather_rows(&perm)).collect();
            let out = gct_forward(&store, &gct, &permuted, &grids)?;
            let expect_a: Vec<Tensor> = base.a_ctx.iter().map(|a| a.gather_rows(&perm)).collect();
            let e = max_diff(&out.g_grp, &base.g_grp)
                .max(max_diff(&out.g_ctx, &base.g_ctx))
                .max(max_diff(&out.a_ctx, &expect_a));
            max_error = max_error.max(e);

            let mut q: Vec<usize> = (0..k).collect();
            q.shuffle(&mut rng);
            let mut swapped = store.clone();
            let block = t * d;
            let orig = store.value(gct.g_init).data().to_vec();
            let dst = swapped.get_mut(gct.g_init).value.data_mut();
            for (i, &src) in q.iter().enumerate() {
                dst[i * block..(i + 1) * block].copy_from_slice(&orig[src * block..(src + 1) * block]);
            }
            let out = gct_forward(&swapped, &gct, &actors, &grids)?;
            let expect_grp: Vec<Tensor> = base.g_grp.iter().map(|g| g.gather_rows(&q)).collect();
            let expect_ctx: Vec<Tensor> = base.g_ctx.iter().map(|g| g.gather_rows(&q)).collect();
            let e = max_diff(&out.g_grp, &expect_grp)
                .max(max_diff(&out.g_ctx, &expect_ctx))
                .max(max_diff(&out.a_ctx, &base.a_ctx));
            max_error = max_error.max(e);

            for mode in [PromptMode::None, PromptMode::Shallow, PromptMode::Deep] {
                let cfg = small_backbone(mode);
                let mut store = ParamStore::new();
                let bb = Backbone::new(&mut store, &cfg, &mut rng)?;
                let grid = bb.vit_forward(&store, &random_image(&mut rng, cfg.image_size))?;
                if grid.tokens.rows() != cfg.patch_count() {
                    return Err(Error::Config(format!(
                        "{mode} prompts: {} output tokens, expected {}",
                        grid.tokens.rows(),
                        cfg.patch_count()
                    )));
                }
            }
            Ok(())
        })();
        if let Err(e) = r {
            problems.push(format!("seed {seed}: {e}"));
        }
    }
    SuiteResult {
        name: "permutation equivariance".into(),
        passed: problems.is_empty() && max_error <= EQUIVARIANCE_TOLERANCE,
        max_error,
        tolerance: EQUIVARIANCE_TOLERANCE,
        cases: seeds.len(),
        note: problems.join("; "),
    }
}

// ----------------------------------------------------------------- selftest

/// Every suite with its default size, in report order.
pub fn selftest() -> Vec<SuiteResult> {
    let start = Instant::now();
    let mut out = gradient_suite(&GRAD_SEEDS);
    out.push(mutation_suite());
    out.push(hungarian_suite(200, 0));
    out.push(metric_suite(100, 0));
    out.push(equivariance_suite(&(0..20).collect::<Vec<_>>()));
    let elapsed = start.elapsed().as_secs_f64();
    if let Some(last) = out.last_mut() {
        last.note = format!("{} (selftest total {elapsed:.1}s)", last.note).trim().to_string();
    }
    out
}
