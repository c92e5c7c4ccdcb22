//! Bipartite assignment between query predictions and ground-truth spans.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Tensor};

/// Weights of the three pair-cost terms, also applied to the matching loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchCostWeights {
    #[serde(default = "defaults::cls")]
    pub lambda_cls: f64,
    #[serde(default = "defaults::l1")]
    pub lambda_l1: f64,
    #[serde(default = "defaults::iou")]
    pub lambda_iou: f64,
}

mod defaults {
    pub fn cls() -> f64 {
        2.0
    }
    pub fn l1() -> f64 {
        5.0
    }
    pub fn iou() -> f64 {
        2.0
    }
}

impl Default for MatchCostWeights {
    fn default() -> Self {
        Self { lambda_cls: defaults::cls(), lambda_l1: defaults::l1(), lambda_iou: defaults::iou() }
    }
}

impl MatchCostWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("match.lambda_cls", self.lambda_cls),
            ("match.lambda_l1", self.lambda_l1),
            ("match.lambda_iou", self.lambda_iou),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(field, format!("must be a non-negative finite number, got {v}")));
            }
        }
        if self.lambda_cls == 0.0 && self.lambda_l1 == 0.0 && self.lambda_iou == 0.0 {
            return Err(Error::config("match", "at least one cost weight must be positive"));
        }
        Ok(())
    }
}

/// Ground-truth span in window-local feature steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(query, target)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Temporal IoU of two `[start, end]` intervals; 0 when the union is empty.
pub fn span_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// `λ_cls·(1 − σ(logit_c)) + λ_L1·(|Δstart| + |Δend|)/T' + λ_iou·(1 − tIoU)`
/// for a predicted span and the logit of the target's class.
pub fn pair_cost(span: (f64, f64), class_logit: f64, target: &Target, t_len: f64, w: &MatchCostWeights) -> f64 {
    let cls = 1.0 - sigmoid(class_logit);
    let l1 = ((span.0 - target.start).abs() + (span.1 - target.end).abs()) / t_len;
    let iou = span_iou(span, (target.start, target.end));
    w.lambda_cls * cls + w.lambda_l1 * l1 + w.lambda_iou * (1.0 - iou)
}

/// `N_q × N_g` cost matrix from per-query spans and `N_q × K` logits.
pub fn cost_matrix(
    spans: &[(f64, f64)],
    logits: &Tensor,
    targets: &[Target],
    t_len: f64,
    w: &MatchCostWeights,
) -> Tensor {
    let mut c = Tensor::zeros(&[spans.len(), targets.len()]);
    for (i, &span) in spans.iter().enumerate() {
        for (j, t) in targets.iter().enumerate() {
            c.data_mut()[i * targets.len() + j] = pair_cost(span, logits.at(i, t.class_id), t, t_len, w);
        }
    }
    c
}

/// Minimum-cost assignment of `rows ≤ cols` by shortest augmenting paths
/// with potentials; returns the column assigned to each row.
fn assign_rows(cost: &[f64], n: usize, m: usize) -> Vec<usize> {
    let at = |i: usize, j: usize| cost[(i - 1) * m + (j - 1)];
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
                    let cur = at(i0, j) - u[i0] - v[j];
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
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Minimum-total-cost one-to-one assignment covering `min(N_q, N_g)` pairs.
pub fn hungarian_match(cost: &Tensor) -> Result<MatchResult> {
    if cost.shape().len() != 2 {
        return Err(Error::ShapeMismatch { op: "hungarian_match", left: cost.shape().to_vec(), right: vec![] });
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("match cost matrix".into()));
    }
    let (nq, ng) = (cost.rows(), cost.cols());
    if nq == 0 || ng == 0 {
        return Ok(MatchResult { pairs: Vec::new(), total_cost: 0.0 });
    }
    let mut pairs: Vec<(usize, usize)> = if nq <= ng {
        assign_rows(cost.data(), nq, ng).into_iter().enumerate().collect()
    } else {
        let t = cost.transpose();
        assign_rows(t.data(), ng, nq).into_iter().enumerate().map(|(g, q)| (q, g)).collect()
    };
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(q, g)| cost.at(q, g)).sum();
    Ok(MatchResult { pairs, total_cost })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    /// Exhaustive minimum over every injective map from the smaller side.
    pub(crate) fn brute_force(cost: &Tensor) -> f64 {
        let (nq, ng) = (cost.rows(), cost.cols());
        let (small, large, get): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if nq <= ng {
            (nq, ng, Box::new(|a, b| cost.at(a, b)))
        } else {
            (ng, nq, Box::new(|a, b| cost.at(b, a)))
        };
        fn go(k: usize, small: usize, large: usize, used: &mut Vec<bool>, acc: f64, get: &dyn Fn(usize, usize) -> f64) -> f64 {
            if k == small {
                return acc;
            }
            let mut best = f64::INFINITY;
            for j in 0..large {
                if !used[j] {
                    used[j] = true;
                    best = best.min(go(k + 1, small, large, used, acc + get(k, j), get));
                    used[j] = false;
                }
            }
            best
        }
        if small == 0 {
            return 0.0;
        }
        go(0, small, large, &mut vec![false; large], 0.0, &*get)
    }

    #[test]
    fn empty_and_single() {
        let r = hungarian_match(&Tensor::zeros(&[5, 0])).unwrap();
        assert!(r.pairs.is_empty());
        assert_eq!(r.total_cost, 0.0);
        let r = hungarian_match(&Tensor::full(&[1, 1], 3.5)).unwrap();
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.total_cost, 3.5);
    }

    #[test]
    fn rectangular_both_ways() {
        let c = Tensor::matrix(3, 2, vec![4.0, 1.0, 2.0, 0.0, 3.0, 5.0]).unwrap();
        let r = hungarian_match(&c).unwrap();
        assert_eq!(r.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(r.total_cost, 3.0);
        let r = hungarian_match(&c.transpose()).unwrap();
        assert_eq!(r.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = stream(11, 0);
        for _ in 0..300 {
            let nq = rng.random_range(1..=7);
            let ng = rng.random_range(1..=7);
            if nq.min(ng) > 6 {
                continue;
            }
            let data = (0..nq * ng).map(|_| rng.random_range(0.0..10.0)).collect();
            let c = Tensor::matrix(nq, ng, data).unwrap();
            let r = hungarian_match(&c).unwrap();
            assert_eq!(r.pairs.len(), nq.min(ng));
            assert!((r.total_cost - brute_force(&c)).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let c = Tensor::matrix(1, 2, vec![0.0, f64::NAN]).unwrap();
        assert!(hungarian_match(&c).is_err());
    }

    #[test]
    fn pair_cost_cases() {
        let w = MatchCostWeights::default();
        let t = Target { start: 4.0, end: 12.0, class_id: 1 };
        assert!(pair_cost((4.0, 12.0), 800.0, &t, 32.0, &w).abs() < 1e-15);
        // disjoint span, score 0
        let c = pair_cost((20.0, 24.0), -800.0, &t, 32.0, &w);
        assert!((c - (2.0 + 5.0 * (16.0 + 12.0) / 32.0 + 2.0)).abs() < 1e-12);
        let double = MatchCostWeights { lambda_cls: 4.0, lambda_l1: 10.0, lambda_iou: 4.0 };
        assert!((pair_cost((5.0, 9.0), 0.3, &t, 32.0, &double) - 2.0 * pair_cost((5.0, 9.0), 0.3, &t, 32.0, &w)).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(MatchCostWeights::default().validate().is_ok());
        let zero = MatchCostWeights { lambda_cls: 0.0, lambda_l1: 0.0, lambda_iou: 0.0 };
        assert!(zero.validate().is_err());
        let neg = MatchCostWeights { lambda_l1: -1.0, ..Default::default() };
        assert!(neg.validate().unwrap_err().to_string().contains("lambda_l1"));
    }
}
