//! Minimum-cost bipartite assignment with deterministic tie-breaking.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AssignmentError {
    #[error("cost matrix is empty")]
    Empty,
    #[error("cost matrix rows have unequal lengths")]
    Ragged,
    #[error("cost matrix contains a non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
}

/// `min(n, m)` row→column pairs, sorted by row.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

impl Assignment {
    /// Column of every row (`None` when the row is left unassigned).
    pub fn row_to_col(&self, rows: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; rows];
        for &(r, c) in &self.pairs {
            out[r] = Some(c);
        }
        out
    }
}

/// Absolute slack used when comparing assignment costs for ties.
pub fn tie_tolerance(optimum: f64) -> f64 {
    1e-9 * optimum.abs().max(1.0)
}

fn validate(cost: &[Vec<f64>]) -> Result<(usize, usize), AssignmentError> {
    let n = cost.len();
    if n == 0 || cost[0].is_empty() {
        return Err(AssignmentError::Empty);
    }
    let m = cost[0].len();
    for (i, row) in cost.iter().enumerate() {
        if row.len() != m {
            return Err(AssignmentError::Ragged);
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(AssignmentError::NonFinite(i, j));
        }
    }
    Ok((n, m))
}

/// Optimal cost of assigning `min(|rows|, |cols|)` pairs within the given
/// sub-matrix (shortest augmenting paths with potentials).
fn optimum(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let transpose = rows.len() > cols.len();
    let (n, m) = if transpose {
        (cols.len(), rows.len())
    } else {
        (rows.len(), cols.len())
    };
    let a = |i: usize, j: usize| {
        if transpose {
            cost[rows[j]][cols[i]]
        } else {
            cost[rows[i]][cols[j]]
        }
    };
    // 1-based arrays; p[j] = row matched to column j, 0 = none
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|&j| p[j] != 0).map(|j| a(p[j] - 1, j - 1)).sum()
}

/// Minimum-cost assignment of `min(n, m)` pairs. Among optimal assignments
/// (costs within [`tie_tolerance`] of the optimum) the lexicographically
/// smallest row→column sequence is returned, where for each row any column
/// precedes "unassigned" and smaller columns precede larger ones.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment, AssignmentError> {
    let (n, m) = validate(cost)?;
    let best = optimum(cost, &(0..n).collect::<Vec<_>>(), &(0..m).collect::<Vec<_>>());
    let limit = best + tie_tolerance(best);
    let needed = n.min(m);
    let mut free_cols: Vec<usize> = (0..m).collect();
    let mut pairs = Vec::with_capacity(needed);
    let mut fixed = 0.0;
    for r in 0..n {
        let rest: Vec<usize> = (r + 1..n).collect();
        let still = needed - pairs.len();
        let mut chosen = None;
        for (idx, &c) in free_cols.iter().enumerate() {
            if still == 0 {
                break;
            }
            let mut cols = free_cols.clone();
            cols.remove(idx);
            if rest.len().min(cols.len()) != still - 1 {
                continue;
            }
            if fixed + cost[r][c] + optimum(cost, &rest, &cols) <= limit {
                chosen = Some(idx);
                break;
            }
        }
        // no column keeps the optimum: the row stays unassigned
        if let Some(idx) = chosen {
            let c = free_cols.remove(idx);
            fixed += cost[r][c];
            pairs.push((r, c));
        }
    }
    debug_assert_eq!(pairs.len(), needed);
    let total = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    Ok(Assignment { pairs, cost: total })
}

/// Exhaustive reference: enumerates every injective assignment of
/// `min(n, m)` pairs in lexicographic order and keeps the first whose cost is
/// within tolerance of the minimum. Exponential; for verification only.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> Result<Assignment, AssignmentError> {
    let (n, m) = validate(cost)?;
    let needed = n.min(m);
    let mut all: Vec<Vec<Option<usize>>> = Vec::new();
    let mut current = Vec::with_capacity(n);
    let mut used = vec![false; m];
    enumerate(n, m, needed, &mut current, &mut used, &mut all);
    let total = |seq: &[Option<usize>]| -> f64 {
        seq.iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| cost[r][c]))
            .sum()
    };
    let best = all.iter().map(|s| total(s)).fold(f64::INFINITY, f64::min);
    let limit = best + tie_tolerance(best);
    let seq = all.iter().find(|s| total(s) <= limit).expect("at least one assignment");
    let pairs: Vec<(usize, usize)> = seq.iter().enumerate().filter_map(|(r, c)| c.map(|c| (r, c))).collect();
    Ok(Assignment {
        cost: total(seq),
        pairs,
    })
}

fn enumerate(
    n: usize,
    m: usize,
    needed: usize,
    current: &mut Vec<Option<usize>>,
    used: &mut [bool],
    out: &mut Vec<Vec<Option<usize>>>,
) {
    let r = current.len();
    let assigned = current.iter().filter(|c| c.is_some()).count();
    if r == n {
        if assigned == needed {
            out.push(current.clone());
        }
        return;
    }
    for c in 0..m {
        if !used[c] {
            used[c] = true;
            current.push(Some(c));
            enumerate(n, m, needed, current, used, out);
            current.pop();
            used[c] = false;
        }
    }
    // rows left after this one must still be able to fill the quota
    if n - r > needed - assigned {
        current.push(None);
        enumerate(n, m, needed, current, used, out);
        current.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_examples() {
        let a = hungarian(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.cost, 2.0);
        let b = hungarian(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(b.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(b.cost, 3.0);
    }

    #[test]
    fn ties_resolve_to_lexicographically_smallest() {
        for n in 1..=6 {
            let a = hungarian(&vec![vec![0.5; n]; n]).unwrap();
            assert_eq!(a.pairs, (0..n).map(|i| (i, i)).collect::<Vec<_>>());
        }
        // more rows than columns: leading rows take the columns
        let a = hungarian(&vec![vec![1.0; 2]; 4]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        let a = hungarian(&vec![vec![1.0; 5]; 2]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn rectangular_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let n = rng.random_range(1..6);
            let m = rng.random_range(1..6);
            let c: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.random_range(0..4) as f64).collect())
                .collect();
            assert_eq!(hungarian(&c).unwrap(), brute_force_assignment(&c).unwrap(), "{c:?}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(hungarian(&[]), Err(AssignmentError::Empty));
        assert_eq!(hungarian(&[vec![]]), Err(AssignmentError::Empty));
        assert_eq!(hungarian(&[vec![1.0], vec![1.0, 2.0]]), Err(AssignmentError::Ragged));
        assert_eq!(hungarian(&[vec![f64::NAN]]), Err(AssignmentError::NonFinite(0, 0)));
    }

    proptest! {
        #[test]
        fn never_worse_than_any_permutation(seed in any::<u64>(), n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
            let a = hungarian(&c).unwrap();
            let b = brute_force_assignment(&c).unwrap();
            prop_assert!(a.cost <= b.cost + 1e-12);
            prop_assert_eq!(a.pairs.len(), n);
        }
    }
}
