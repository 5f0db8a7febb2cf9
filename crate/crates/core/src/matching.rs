//! Hungarian assignment between prediction queries and ground-truth instances.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;
use crate::{CoreError, Result};

/// One-to-one assignment covering every ground truth; queries left out are
/// background.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    /// (query index, ground-truth index) pairs.
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    pub fn total_cost(&self, cost: &Tensor) -> f64 {
        self.pairs.iter().map(|&(q, t)| cost.get(q, t)).sum()
    }
}

/// Minimum-total-cost assignment of all `K` ground truths (columns) to
/// distinct queries (rows) of an `N×K` cost matrix, `K ≤ N`.
///
/// O(K·N²) shortest-augmenting-path with potentials.
pub fn hungarian_match(cost: &Tensor) -> Result<MatchResult> {
    let n_queries = cost.rows();
    let n_gts = cost.cols();
    if n_gts > n_queries {
        return Err(CoreError::QueryBudgetExceeded {
            gts: n_gts,
            queries: n_queries,
        });
    }
    if !cost.is_finite() {
        return Err(CoreError::InvalidConfig("non-finite matching cost".into()));
    }
    if n_gts == 0 {
        return Ok(MatchResult::default());
    }

    // Treat ground truths as the scarce side: assign each gt a distinct query.
    // 1-indexed arrays with a virtual column 0, following the classic scheme.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n_gts + 1];
    let mut v = vec![0.0; n_queries + 1];
    let mut assigned_gt = vec![0usize; n_queries + 1]; // query column -> gt (1-based, 0 = free)
    let mut way = vec![0usize; n_queries + 1];

    for gt in 1..=n_gts {
        assigned_gt[0] = gt;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n_queries + 1];
        let mut used = vec![false; n_queries + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_gt[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n_queries {
                if used[j] {
                    continue;
                }
                let cur = cost.get(j - 1, i0 - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n_queries {
                if used[j] {
                    u[assigned_gt[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_gt[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_gt[j0] = assigned_gt[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=n_queries)
        .filter(|&j| assigned_gt[j] != 0)
        .map(|j| (j - 1, assigned_gt[j] - 1))
        .collect();
    pairs.sort_unstable_by_key(|&(_, t)| t);
    Ok(MatchResult { pairs })
}

/// Exhaustive minimum over all injective gt→query assignments. Exponential;
/// only for cross-checking small problems.
pub fn brute_force_match(cost: &Tensor) -> Result<MatchResult> {
    let n_queries = cost.rows();
    let n_gts = cost.cols();
    if n_gts > n_queries {
        return Err(CoreError::QueryBudgetExceeded {
            gts: n_gts,
            queries: n_queries,
        });
    }
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    let mut chosen = vec![usize::MAX; n_gts];
    let mut used = vec![false; n_queries];
    fn recurse(
        gt: usize,
        cost: &Tensor,
        chosen: &mut [usize],
        used: &mut [bool],
        acc: f64,
        best: &mut Option<(f64, Vec<(usize, usize)>)>,
    ) {
        if gt == chosen.len() {
            if best.as_ref().map_or(true, |(c, _)| acc < *c) {
                let pairs = chosen.iter().enumerate().map(|(t, &q)| (q, t)).collect();
                *best = Some((acc, pairs));
            }
            return;
        }
        for q in 0..used.len() {
            if used[q] {
                continue;
            }
            used[q] = true;
            chosen[gt] = q;
            recurse(gt + 1, cost, chosen, used, acc + cost.get(q, gt), best);
            used[q] = false;
        }
    }
    recurse(0, cost, &mut chosen, &mut used, 0.0, &mut best);
    Ok(MatchResult {
        pairs: best.map(|(_, p)| p).unwrap_or_default(),
    })
}
