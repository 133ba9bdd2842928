//! Optimal prediction-to-groundtruth assignment.
//!
//! Costs are minimised with the Hungarian algorithm. Among equally cheap
//! assignments the lexicographically least list of `(n, k)` pairs is
//! returned: pairs are fixed greedily in `(n, k)` order whenever the
//! remaining subproblem can still reach the optimum.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::float::Float;
use crate::mask::Mask;
use crate::objectives::dice_loss;
use crate::tensor::Tensor;

/// Relative slack when comparing totals against the optimum.
const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(prediction n, groundtruth k)`, sorted by `n`.
    pub pairs: Vec<(usize, usize)>,
    /// Predictions assigned to "no object", ascending.
    pub unmatched: Vec<usize>,
}

impl Assignment {
    /// The groundtruth index matched to prediction `n`.
    pub fn target_of(&self, n: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == n).map(|p| p.1)
    }

    /// Sum of `cost[n][k]` over the pairs.
    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(n, k)| cost[n][k]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub w_cls: f64,
    pub w_dice: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            w_cls: 1.0,
            w_dice: 1.0,
        }
    }
}

/// `cost[n][k] = w_cls (1 - p_n(c_k)) + w_dice dice(M_n, M_k)` for `[N, H, W]`
/// mask probabilities and `[N, C+1]` class probabilities.
pub fn cost_matrix<T: Float>(
    mask_probs: &Tensor<T>,
    class_probs: &Tensor<T>,
    masks: &[Mask],
    labels: &[u32],
    weights: MatchWeights,
    dice_eps: f64,
) -> Result<Vec<Vec<f64>>> {
    let ms = mask_probs.shape();
    let cs = class_probs.shape();
    ensure!(
        ms.len() == 3 && cs.len() == 2 && ms[0] == cs[0],
        "prediction shapes {:?} / {:?} disagree",
        ms,
        cs
    );
    ensure!(
        masks.len() == labels.len(),
        "{} masks but {} labels",
        masks.len(),
        labels.len()
    );
    let (n, hw) = (ms[0], ms[1] * ms[2]);
    let mut cost = vec![vec![0.0; masks.len()]; n];
    for (k, (m, &c)) in masks.iter().zip(labels).enumerate() {
        ensure!(
            m.dims() == (ms[1], ms[2]),
            "mask {k} has shape {:?}, predictions {:?}",
            m.dims(),
            &ms[1..]
        );
        ensure!((c as usize) < cs[1] && c >= 1, "label {c} out of range");
        for (i, row) in cost.iter_mut().enumerate() {
            let probs = &mask_probs.data()[i * hw..(i + 1) * hw];
            let (d, _) = dice_loss(probs, m.data(), dice_eps)?;
            let p = class_probs.data()[i * cs[1] + c as usize];
            row[k] = weights.w_cls * (1.0 - p.as_f64()) + weights.w_dice * d.as_f64();
        }
    }
    Ok(cost)
}

/// Assignment minimising the cost matrix `cost[n][k]` (`N` rows, `K`
/// columns, `K <= N`).
pub fn solve_assignment(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    let k = cost.first().map_or(0, Vec::len);
    ensure!(cost.iter().all(|r| r.len() == k), "ragged cost matrix");
    ensure!(
        cost.iter().flatten().all(|c| c.is_finite()),
        "non-finite matching cost"
    );
    if k > n {
        return Err(Error::Capacity { gt: k, slots: n });
    }
    if k == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            unmatched: (0..n).collect(),
        });
    }
    let rows: Vec<usize> = (0..k).collect();
    let cols: Vec<usize> = (0..n).collect();
    let (best, _) = hungarian(cost, &rows, &cols);
    let scale = cost.iter().flatten().fold(0.0f64, |m, c| m.max(c.abs())) * k as f64;
    let tol = TIE_TOL * scale.max(f64::MIN_POSITIVE);

    let mut free_gt: Vec<usize> = (0..k).collect();
    let mut fixed_cost = 0.0;
    let mut pairs = Vec::new();
    for pn in 0..n {
        if free_gt.is_empty() {
            break;
        }
        let later: Vec<usize> = (pn + 1..n).collect();
        for (idx, &gk) in free_gt.iter().enumerate() {
            let rest: Vec<usize> = free_gt.iter().copied().filter(|&x| x != gk).collect();
            if rest.len() > later.len() {
                continue;
            }
            let (sub, _) = hungarian(cost, &rest, &later);
            if fixed_cost + cost[pn][gk] + sub <= best + tol {
                fixed_cost += cost[pn][gk];
                pairs.push((pn, gk));
                free_gt.remove(idx);
                break;
            }
        }
        // a prediction left unmatched only if no pair keeps optimality;
        // the remaining groundtruth must then still fit in later slots
    }
    debug_assert!(free_gt.is_empty());
    let matched: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    Ok(Assignment {
        unmatched: (0..n).filter(|i| !matched.contains(i)).collect(),
        pairs,
    })
}

/// Match predictions to the groundtruth of one scene.
pub fn match_predictions<T: Float>(
    mask_probs: &Tensor<T>,
    class_probs: &Tensor<T>,
    masks: &[Mask],
    labels: &[u32],
    weights: MatchWeights,
    dice_eps: f64,
) -> Result<Assignment> {
    let n = mask_probs.shape().first().copied().unwrap_or(0);
    if masks.len() > n {
        return Err(Error::Capacity {
            gt: masks.len(),
            slots: n,
        });
    }
    let cost = cost_matrix(mask_probs, class_probs, masks, labels, weights, dice_eps)?;
    if masks.is_empty() {
        return Ok(Assignment {
            pairs: Vec::new(),
            unmatched: (0..n).collect(),
        });
    }
    solve_assignment(&cost)
}

/// Minimum-cost matching of every `row` (a groundtruth index) to a distinct
/// `col` (a prediction index) of `cost[col][row]`. Shortest augmenting paths
/// with potentials, `O(rows^2 cols)`.
fn hungarian(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let (r, c) = (rows.len(), cols.len());
    if r == 0 {
        return (0.0, Vec::new());
    }
    let a = |i: usize, j: usize| cost[cols[j - 1]][rows[i - 1]];
    let mut u = vec![0.0; r + 1];
    let mut v = vec![0.0; c + 1];
    let mut p = vec![0usize; c + 1];
    let mut way = vec![0usize; c + 1];
    for i in 1..=r {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; c + 1];
        let mut used = vec![false; c + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=c {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
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
            for j in 0..=c {
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
    let mut col_of_row = vec![0usize; r];
    for j in 1..=c {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = cols[j - 1];
        }
    }
    let total = (0..r).map(|i| cost[col_of_row[i]][rows[i]]).sum();
    (total, col_of_row)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair() {
        let a = solve_assignment(&[vec![0.3]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert!(a.unmatched.is_empty());
    }

    #[test]
    fn no_groundtruth() {
        let a = solve_assignment(&[vec![], vec![]]).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched, vec![0, 1]);
    }

    #[test]
    fn capacity_error() {
        let e = solve_assignment(&[vec![0.0, 1.0]]).unwrap_err();
        assert!(matches!(e, Error::Capacity { gt: 2, slots: 1 }));
    }

    #[test]
    fn picks_the_cheaper_diagonal() {
        let a = solve_assignment(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.unmatched, vec![2]);
    }

    #[test]
    fn all_equal_costs_give_the_least_assignment() {
        let a = solve_assignment(&vec![vec![0.7; 3]; 5]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }
}
