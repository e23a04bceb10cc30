//! Multi-task training objective:
//! `L = L_ind + Σ_layers L_group + λ_m Σ_layers L_mem + λ_c L_con`.
//!
//! Group tokens are matched to ground-truth groups per layer by minimum-cost
//! assignment; the matching is a constant for differentiation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::hungarian;
use crate::data::{ClipTargets, GtGroup};
use crate::graph::{Graph, Var};
use crate::heads::{argmax, OutlierMode};
use crate::param::ParamStore;
use crate::tensor::{softmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_m: f64,
    pub lambda_c: f64,
    pub tau: f64,
    /// Supervise both GCT layers (group and membership terms) instead of only the last.
    pub aux_layers: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_m: 5.0,
            lambda_c: 2.0,
            tau: 0.2,
            aux_layers: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_m >= 0.0 && self.lambda_c >= 0.0) {
            return Err(LossError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("{gt} ground-truth groups exceed the {tokens} group tokens")]
    TooManyGroups { gt: usize, tokens: usize },
    #[error("actor {0} is in no ground-truth group and not a singleton")]
    Unassigned(usize),
    #[error("contrastive loss needs at least 2 actors, got {0}")]
    TooFewActors(usize),
    #[error("loss term {term} is not finite ({value})")]
    NonFinite { term: String, value: f64 },
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

/// Ground-truth group → token; tokens without a group are background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupMatching {
    pub gt_to_token: Vec<usize>,
    pub token_to_gt: Vec<Option<usize>>,
}

/// Row-wise softmax.
pub fn row_softmax(t: &Tensor) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t.rows())
        .map(|i| softmax(t.row(i)).expect("finite logits"))
        .collect();
    Tensor::from_rows(&rows).expect("non-empty")
}

/// `cost(g, k) = −p_k(class_g) − mean_{i∈g} σ_i[k]`, one row per GT group.
pub fn matching_cost(group_probs: &Tensor, membership: &Tensor, gt: &[GtGroup]) -> Vec<Vec<f64>> {
    let k = group_probs.rows();
    gt.iter()
        .map(|grp| {
            (0..k)
                .map(|tok| {
                    let mean: f64 =
                        grp.members.iter().map(|&i| membership.at(i, tok)).sum::<f64>() / grp.members.len() as f64;
                    -group_probs.at(tok, grp.activity) - mean
                })
                .collect()
        })
        .collect()
}

/// `group_probs`: `K×(C_g+1)` class probabilities; `membership`: row-softmax
/// of the affinity matrix.
pub fn match_groups(group_probs: &Tensor, membership: &Tensor, gt: &[GtGroup]) -> Result<GroupMatching, LossError> {
    let k = group_probs.rows();
    if gt.len() > k {
        return Err(LossError::TooManyGroups {
            gt: gt.len(),
            tokens: k,
        });
    }
    let mut token_to_gt = vec![None; k];
    if gt.is_empty() {
        return Ok(GroupMatching {
            gt_to_token: vec![],
            token_to_gt,
        });
    }
    let cost = matching_cost(group_probs, membership, gt);
    let a = hungarian(&cost).expect("finite non-empty cost");
    let mut gt_to_token = vec![0; gt.len()];
    for (g, tok) in a.pairs {
        gt_to_token[g] = tok;
        token_to_gt[tok] = Some(g);
    }
    Ok(GroupMatching {
        gt_to_token,
        token_to_gt,
    })
}

/// Class target per token: matched GT activity, or background (`C_g`).
pub fn group_targets(matching: &GroupMatching, gt: &[GtGroup], activities: usize) -> Vec<Option<usize>> {
    matching
        .token_to_gt
        .iter()
        .map(|m| Some(m.map_or(activities, |g| gt[g].activity)))
        .collect()
}

/// Affinity column target per actor. Grouped actors target their group's
/// matched token. Singletons target the outlier column in token mode; in
/// background mode they target the unmatched token with the highest
/// affinity, or are unsupervised when every token is matched.
pub fn membership_targets(
    matching: &GroupMatching,
    targets: &ClipTargets,
    affinity: &Tensor,
    mode: OutlierMode,
) -> Result<Vec<Option<usize>>, LossError> {
    let k = matching.token_to_gt.len();
    let owner = targets.group_of_actor();
    let mut is_single = vec![false; owner.len()];
    for &s in &targets.singletons {
        is_single[s] = true;
    }
    (0..owner.len())
        .map(|i| match owner[i] {
            Some(g) => Ok(Some(matching.gt_to_token[g])),
            None if is_single[i] => Ok(match mode {
                OutlierMode::Token => Some(k),
                OutlierMode::Background => {
                    let free: Vec<usize> = (0..k).filter(|&t| matching.token_to_gt[t].is_none()).collect();
                    if free.is_empty() {
                        None
                    } else {
                        let vals: Vec<f64> = free.iter().map(|&t| affinity.at(i, t)).collect();
                        Some(free[argmax(&vals)])
                    }
                }
            }),
            None => Err(LossError::Unassigned(i)),
        })
        .collect()
}

/// Same-group peers of every actor; singletons have none.
pub fn positives(targets: &ClipTargets) -> Vec<Vec<usize>> {
    let owner = targets.group_of_actor();
    (0..owner.len())
        .map(|i| match owner[i] {
            Some(g) => targets.groups[g].members.iter().copied().filter(|&j| j != i).collect(),
            None => vec![],
        })
        .collect()
}

/// Graph form of the contrastive term on actor embeddings (`M×D_e`).
pub fn contrastive(g: &mut Graph, embeddings: Var, positives: &[Vec<usize>], tau: f64) -> Var {
    let z = g.l2_normalize_rows(embeddings);
    let sim = g.matmul_t(z, z);
    g.supcon(sim, positives, tau)
}

/// Scalar loss parts of one clip. `group` and `mem` hold one value per supervised layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ind: f64,
    pub group: Vec<f64>,
    pub mem: Vec<f64>,
    pub con: f64,
}

/// Weighted sum; fails naming the first non-finite part.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> Result<f64, LossError> {
    let named = std::iter::once(("l_ind".to_string(), parts.ind))
        .chain(parts.group.iter().enumerate().map(|(i, &v)| (format!("l_group[{i}]"), v)))
        .chain(parts.mem.iter().enumerate().map(|(i, &v)| (format!("l_mem[{i}]"), v)))
        .chain(std::iter::once(("l_con".to_string(), parts.con)));
    for (term, value) in named {
        if !value.is_finite() {
            return Err(LossError::NonFinite { term, value });
        }
    }
    Ok(parts.ind
        + parts.group.iter().sum::<f64>()
        + cfg.lambda_m * parts.mem.iter().sum::<f64>()
        + cfg.lambda_c * parts.con)
}

fn scalar_of(logits: &Tensor, build: impl FnOnce(&mut Graph, Var) -> Var) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.input(logits.clone());
    let out = build(&mut g, x);
    g.scalar(out)
}

/// Mean over tokens of the class cross-entropy against matched/background targets.
pub fn l_group(group_logits: &Tensor, matching: &GroupMatching, gt: &[GtGroup]) -> f64 {
    let targets = group_targets(matching, gt, group_logits.cols() - 1);
    scalar_of(group_logits, |g, x| g.cross_entropy(x, &targets))
}

/// Mean action cross-entropy over actors.
pub fn l_ind(action_logits: &Tensor, actions: &[usize]) -> f64 {
    let targets: Vec<Option<usize>> = actions.iter().map(|&a| Some(a)).collect();
    scalar_of(action_logits, |g, x| g.cross_entropy(x, &targets))
}

/// Mean membership cross-entropy over supervised actors.
pub fn l_mem(
    affinity: &Tensor,
    matching: &GroupMatching,
    targets: &ClipTargets,
    mode: OutlierMode,
) -> Result<f64, LossError> {
    let t = membership_targets(matching, targets, affinity, mode)?;
    Ok(scalar_of(affinity, |g, x| g.cross_entropy(x, &t)))
}

/// Supervised contrastive loss with cosine similarity; zero when no actor
/// has a same-group peer.
pub fn l_con(embeddings: &Tensor, targets: &ClipTargets, tau: f64) -> Result<f64, LossError> {
    if embeddings.rows() < 2 {
        return Err(LossError::TooFewActors(embeddings.rows()));
    }
    let pos = positives(targets);
    Ok(scalar_of(embeddings, |g, x| contrastive(g, x, &pos, tau)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::brute_force_assignment;
    use crate::param::normal_tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(groups: Vec<(Vec<usize>, usize)>, singletons: Vec<usize>, actions: Vec<usize>) -> ClipTargets {
        ClipTargets {
            actions,
            groups: groups
                .into_iter()
                .map(|(members, activity)| GtGroup { members, activity })
                .collect(),
            singletons,
        }
    }

    #[test]
    fn single_perfect_match_costs_minus_two() {
        let mut probs = Tensor::zeros(&[2, 3]);
        probs.row_mut(0)[1] = 1.0;
        probs.row_mut(1)[2] = 1.0;
        let mut sigma = Tensor::zeros(&[2, 3]);
        sigma.row_mut(0)[0] = 1.0;
        sigma.row_mut(1)[0] = 1.0;
        let gt = clip(vec![(vec![0, 1], 1)], vec![], vec![0, 0]);
        let cost = matching_cost(&probs, &sigma, &gt.groups);
        assert_eq!(cost[0][0], -2.0);
        let m = match_groups(&probs, &sigma, &gt.groups).unwrap();
        assert_eq!(m.gt_to_token, vec![0]);
        assert_eq!(m.token_to_gt, vec![Some(0), None]);
    }

    #[test]
    fn uniform_costs_match_in_order_and_overflow_errors() {
        let probs = Tensor::filled(&[4, 3], 1.0 / 3.0);
        let sigma = Tensor::filled(&[5, 5], 0.2);
        let gt = clip(vec![(vec![0], 0), (vec![1, 2], 1), (vec![3], 0)], vec![4], vec![0; 5]);
        let m = match_groups(&probs, &sigma, &gt.groups).unwrap();
        assert_eq!(m.gt_to_token, vec![0, 1, 2]);
        let small = Tensor::filled(&[2, 3], 0.5);
        assert_eq!(
            match_groups(&small, &sigma, &gt.groups),
            Err(LossError::TooManyGroups { gt: 3, tokens: 2 })
        );
    }

    #[test]
    fn matching_equals_exhaustive_injective_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let logits = normal_tensor(&mut rng, &[7, 7], 1.0);
            let aff = normal_tensor(&mut rng, &[9, 8], 1.0);
            let (probs, sigma) = (row_softmax(&logits), row_softmax(&aff));
            let gt = clip(
                vec![(vec![0, 3], rng.random_range(0..6)), (vec![1, 2, 5], rng.random_range(0..6)), (vec![6, 7], 2)],
                vec![4, 8],
                vec![0; 9],
            );
            let m = match_groups(&probs, &sigma, &gt.groups).unwrap();
            let cost = matching_cost(&probs, &sigma, &gt.groups);
            let b = brute_force_assignment(&cost).unwrap();
            let expect: Vec<usize> = b.pairs.iter().map(|p| p.1).collect();
            assert_eq!(m.gt_to_token, expect);
        }
    }

    #[test]
    fn group_loss_examples() {
        let gt = clip(vec![(vec![0, 1], 2)], vec![], vec![0, 0]);
        let m = GroupMatching {
            gt_to_token: vec![1],
            token_to_gt: vec![None, Some(0), None],
        };
        assert!((l_group(&Tensor::zeros(&[3, 7]), &m, &gt.groups) - 7f64.ln()).abs() < 1e-12);
        let mut perfect = Tensor::zeros(&[3, 7]);
        perfect.row_mut(0)[6] = 60.0;
        perfect.row_mut(1)[2] = 60.0;
        perfect.row_mut(2)[6] = 60.0;
        assert!(l_group(&perfect, &m, &gt.groups) < 1e-20);

        // hand-composed oracle
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = normal_tensor(&mut rng, &[3, 7], 1.0);
        let ce = |row: &[f64], t: usize| -> f64 {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[t].exp() / z).ln()
        };
        let expect = (ce(logits.row(0), 6) + ce(logits.row(1), 2) + ce(logits.row(2), 6)) / 3.0;
        assert!((l_group(&logits, &m, &gt.groups) - expect).abs() <= 1e-12);
    }

    #[test]
    fn individual_and_membership_examples() {
        assert!((l_ind(&Tensor::zeros(&[4, 3]), &[0, 1, 2, 0]) - 3f64.ln()).abs() < 1e-12);
        let gt = clip(vec![(vec![0, 2], 1)], vec![1], vec![0, 0, 0]);
        let m = GroupMatching {
            gt_to_token: vec![3],
            token_to_gt: vec![None, None, None, Some(0), None, None, None],
        };
        let uniform = Tensor::zeros(&[3, 8]);
        let v = l_mem(&uniform, &m, &gt, OutlierMode::Token).unwrap();
        assert!((v - 8f64.ln()).abs() < 1e-12);
        let t = membership_targets(&m, &gt, &uniform, OutlierMode::Token).unwrap();
        assert_eq!(t, vec![Some(3), Some(7), Some(3)]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let aff = normal_tensor(&mut rng, &[3, 8], 1.0);
        let ce = |row: &[f64], t: usize| -> f64 {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[t].exp() / z).ln()
        };
        let expect = (ce(aff.row(0), 3) + ce(aff.row(1), 7) + ce(aff.row(2), 3)) / 3.0;
        assert!((l_mem(&aff, &m, &gt, OutlierMode::Token).unwrap() - expect).abs() <= 1e-12);

        let broken = clip(vec![(vec![0, 2], 1)], vec![], vec![0, 0, 0]);
        assert_eq!(
            l_mem(&uniform, &m, &broken, OutlierMode::Token),
            Err(LossError::Unassigned(1))
        );
    }

    #[test]
    fn background_mode_targets_best_free_token() {
        let gt = clip(vec![(vec![0], 0)], vec![1], vec![0, 0]);
        let m = GroupMatching {
            gt_to_token: vec![1],
            token_to_gt: vec![None, Some(0), None],
        };
        let aff = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.2, 5.0, 0.7]]).unwrap();
        let t = membership_targets(&m, &gt, &aff, OutlierMode::Background).unwrap();
        assert_eq!(t, vec![Some(1), Some(2)]);
        let full = GroupMatching {
            gt_to_token: vec![0],
            token_to_gt: vec![Some(0)],
        };
        let t = membership_targets(&full, &gt, &aff.slice_rows(0, 2), OutlierMode::Background).unwrap();
        assert_eq!(t[1], None);
    }

    #[test]
    fn contrastive_examples() {
        let gt = clip(vec![(vec![0, 1, 2], 0)], vec![], vec![0; 3]);
        let same = Tensor::filled(&[3, 4], 1.0);
        assert!((l_con(&same, &gt, 0.2).unwrap() - 2f64.ln()).abs() < 1e-12);

        let gt = clip(vec![(vec![0, 1], 0)], vec![2], vec![0; 3]);
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert!(l_con(&e, &gt, 0.01).unwrap() < 1e-60);
        assert_eq!(
            l_con(&Tensor::zeros(&[1, 2]), &gt, 0.2),
            Err(LossError::TooFewActors(1))
        );
        let none = clip(vec![], vec![0, 1], vec![0; 2]);
        assert_eq!(l_con(&Tensor::filled(&[2, 2], 1.0), &none, 0.2).unwrap(), 0.0);
    }

    /// Straight-line oracle for the contrastive term.
    fn supcon_oracle(e: &Tensor, groups: &[Vec<usize>], tau: f64) -> f64 {
        let m = e.rows();
        let norm = |i: usize| e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = |i: usize, j: usize| e.row(i).iter().zip(e.row(j)).map(|(a, b)| a * b).sum::<f64>() / (norm(i) * norm(j));
        let group_of = |i: usize| groups.iter().position(|g| g.contains(&i));
        let mut total = 0.0;
        let mut anchors = 0;
        for i in 0..m {
            let Some(gi) = group_of(i) else { continue };
            let pos: Vec<usize> = groups[gi].iter().copied().filter(|&j| j != i).collect();
            if pos.is_empty() {
                continue;
            }
            let denom: f64 = (0..m).filter(|&a| a != i).map(|a| (s(i, a) / tau).exp()).sum();
            let term: f64 = pos.iter().map(|&p| -((s(i, p) / tau).exp() / denom).ln()).sum::<f64>() / pos.len() as f64;
            total += term;
            anchors += 1;
        }
        total / anchors as f64
    }

    #[test]
    fn contrastive_matches_oracle_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let e = normal_tensor(&mut rng, &[5, 6], 1.0);
        let gt = clip(vec![(vec![0, 2], 1), (vec![1, 3, 4], 0)], vec![], vec![0; 5]);
        let v = l_con(&e, &gt, 0.2).unwrap();
        let o = supcon_oracle(&e, &[vec![0, 2], vec![1, 3, 4]], 0.2);
        assert!((v - o).abs() <= 1e-12);
        let scaled = l_con(&e.map(|x| 7.5 * x), &gt, 0.2).unwrap();
        assert!((v - scaled).abs() <= 1e-12);
    }

    #[test]
    fn total_loss_arithmetic_and_errors() {
        let cfg = LossConfig::default();
        let ones = LossParts {
            ind: 1.0,
            group: vec![1.0, 1.0],
            mem: vec![1.0, 1.0],
            con: 1.0,
        };
        assert_eq!(total_loss(&ones, &cfg).unwrap(), 15.0);
        let zero_w = LossConfig {
            lambda_m: 0.0,
            lambda_c: 0.0,
            ..cfg.clone()
        };
        let single = LossParts {
            ind: 0.7,
            group: vec![0.4],
            mem: vec![3.0],
            con: 9.0,
        };
        assert_eq!(total_loss(&single, &zero_w).unwrap(), 0.7 + 0.4);
        let bad = LossParts {
            mem: vec![1.0, f64::NAN],
            ..ones
        };
        match total_loss(&bad, &cfg) {
            Err(LossError::NonFinite { term, .. }) => assert_eq!(term, "l_mem[1]"),
            other => panic!("{other:?}"),
        }
        assert!(LossConfig { tau: 0.0, ..cfg }.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn total_is_monotone_in_weights(a in 0.0f64..3.0, b in 0.0f64..3.0, d in 0.0f64..2.0) {
            let parts = LossParts { ind: 0.3, group: vec![0.2, 0.1], mem: vec![0.5, 0.6], con: 0.9 };
            let base = LossConfig { lambda_m: a, lambda_c: b, ..LossConfig::default() };
            let t0 = total_loss(&parts, &base).unwrap();
            let t1 = total_loss(&parts, &LossConfig { lambda_m: a + d, ..base.clone() }).unwrap();
            let t2 = total_loss(&parts, &LossConfig { lambda_c: b + d, ..base }).unwrap();
            proptest::prop_assert!(t1 >= t0 && t2 >= t0 && t0 >= 0.0);
        }
    }
}
