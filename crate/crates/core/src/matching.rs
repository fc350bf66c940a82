//! One-to-one assignment of queries to ground truths and the reference
//! (scalar) training loss.
//!
//! The matching cost is
//! `l_cls * BCE(p, 1) + l_l1 * |b - g|_1 + l_iou * (1 - CIoU) + l_ctr * d_center`;
//! the loss is the weighted sum of heatmap focal, query focal, L1 and
//! `1 - CIoU` terms. The tensor implementation used for training lives in
//! the model crate; this module is the `f64` reference it is checked against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{center_distance, ciou, l1_distance, BoxN};
use crate::heatmap::{heatmap_focal_loss, softplus, FocalParams, HeatmapGrid};

/// Probability clamp used inside the matching BCE.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
    pub ctr: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            cls: 3.0,
            l1: 5.0,
            iou: 4.0,
            ctr: 4.0,
        }
    }
}

/// A decoded prediction for one valid query slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryPrediction {
    /// Slot index within the (padded) query set.
    pub index: usize,
    pub logit: f64,
    pub bbox: BoxN,
}

/// Unweighted cost terms of a single entry.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostTerms {
    pub bce: f64,
    pub l1: f64,
    pub iou: f64,
    pub ctr: f64,
}

/// Queries x ground truths matching cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    /// Slot index of each row.
    pub query_indices: Vec<usize>,
    pub n_gt: usize,
    /// Row-major weighted totals.
    pub values: Vec<f64>,
    pub terms: Vec<CostTerms>,
    pub weights: CostWeights,
}

impl CostMatrix {
    pub fn rows(&self) -> usize {
        self.query_indices.len()
    }

    pub fn cols(&self) -> usize {
        self.n_gt
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_gt + col]
    }
}

pub fn build_cost(preds: &[QueryPrediction], gts: &[BoxN], weights: &CostWeights) -> CostMatrix {
    let mut values = Vec::with_capacity(preds.len() * gts.len());
    let mut terms = Vec::with_capacity(preds.len() * gts.len());
    for p in preds {
        let prob = crate::heatmap::sigmoid(p.logit).clamp(PROB_EPS, 1.0 - PROB_EPS);
        let bce = -prob.ln();
        for g in gts {
            let t = CostTerms {
                bce,
                l1: l1_distance(&p.bbox, g),
                iou: 1.0 - ciou(&p.bbox, g),
                ctr: center_distance(&p.bbox, g),
            };
            values.push(
                weights.cls * t.bce + weights.l1 * t.l1 + weights.iou * t.iou + weights.ctr * t.ctr,
            );
            terms.push(t);
        }
    }
    CostMatrix {
        query_indices: preds.iter().map(|p| p.index).collect(),
        n_gt: gts.len(),
        values,
        terms,
        weights: *weights,
    }
}

/// Result of one-to-one matching, in query-slot indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchAssignment {
    /// `(query slot, gt index)` sorted by query slot.
    pub pairs: Vec<(usize, usize)>,
    /// Valid query slots left as background.
    pub unmatched_queries: Vec<usize>,
}

pub fn hungarian_assign(cost: &CostMatrix) -> Result<MatchAssignment> {
    let rc = min_cost_assignment(&cost.values, cost.rows(), cost.cols())?;
    let mut matched = vec![false; cost.rows()];
    let pairs: Vec<_> = rc
        .into_iter()
        .map(|(r, c)| {
            matched[r] = true;
            (cost.query_indices[r], c)
        })
        .collect();
    let unmatched_queries = cost
        .query_indices
        .iter()
        .zip(&matched)
        .filter(|(_, &m)| !m)
        .map(|(&q, _)| q)
        .collect();
    Ok(MatchAssignment {
        pairs,
        unmatched_queries,
    })
}

/// Minimum-cost one-to-one assignment on a row-major `rows x cols` matrix.
///
/// Returns `min(rows, cols)` `(row, col)` pairs sorted by row. Among all
/// optimal assignments the lexicographically smallest pair list is chosen.
pub fn min_cost_assignment(values: &[f64], rows: usize, cols: usize) -> Result<Vec<(usize, usize)>> {
    if values.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{} costs for a {rows}x{cols} matrix",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCost {
            row: i / cols,
            col: i % cols,
        });
    }
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }

    // Square padding with zero-cost dummies; dummy columns mean "unassigned".
    let n = rows.max(cols);
    let a = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            values[i * cols + j]
        } else {
            0.0
        }
    };
    let (mut row_of_col, u, v) = shortest_augmenting_path(n, &a);

    let scale = values.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-10 * scale * n as f64;
    let tight = |i: usize, j: usize| a(i, j) - u[i] - v[j] <= tol;
    lexicographic_refine(n, rows, cols, &tight, &mut row_of_col);

    let mut col_of_row = vec![usize::MAX; n];
    for (j, &i) in row_of_col.iter().enumerate() {
        col_of_row[i] = j;
    }
    Ok((0..rows)
        .filter_map(|i| {
            let j = col_of_row[i];
            (j < cols).then_some((i, j))
        })
        .collect())
}

/// O(n^3) Hungarian algorithm with potentials on a square matrix.
/// Returns the row assigned to each column plus row and column potentials
/// with `a(i,j) - u[i] - v[j] >= 0` everywhere and `= 0` on the matching.
fn shortest_augmenting_path(
    n: usize,
    a: &dyn Fn(usize, usize) -> f64,
) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based internals; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
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
            for j in 0..=n {
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
    let row_of_col = (1..=n).map(|j| p[j] - 1).collect();
    (row_of_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Walk rows in order and give each the smallest column that still admits a
/// perfect matching on tight edges, given the choices already fixed.
/// Every perfect matching on tight edges is optimal (complementary
/// slackness), so this selects the lexicographically smallest optimum.
fn lexicographic_refine(
    n: usize,
    rows: usize,
    cols: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    row_of_col: &mut [usize],
) {
    let mut col_of_row = vec![0usize; n];
    for (j, &i) in row_of_col.iter().enumerate() {
        col_of_row[i] = j;
    }
    let mut col_fixed = vec![false; n];
    for i in 0..rows {
        let current = col_of_row[i];
        for j in 0..n {
            // dummy columns are interchangeable, so stop once row i is unassigned
            if j == current || (j >= cols && current >= cols) {
                break;
            }
            if col_fixed[j] || !tight(i, j) {
                continue;
            }
            let holder = row_of_col[j];
            let path = reroute(n, i, holder, j, current, tight, &col_fixed, row_of_col);
            if let Some(path) = path {
                for (r, c) in path {
                    row_of_col[c] = r;
                    col_of_row[r] = c;
                }
                row_of_col[j] = i;
                col_of_row[i] = j;
                break;
            }
        }
        col_fixed[col_of_row[i]] = true;
    }
}

/// Breadth-first search for an alternating path of tight edges that lets
/// `holder` give up column `taken` while `target` (freed by row `skip_row`)
/// gets absorbed. Returns the `(row, new column)` reassignments.
#[allow(clippy::too_many_arguments)]
fn reroute(
    n: usize,
    skip_row: usize,
    holder: usize,
    taken: usize,
    target: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    col_fixed: &[bool],
    row_of_col: &[usize],
) -> Option<Vec<(usize, usize)>> {
    let mut parent_row: Vec<Option<usize>> = vec![None; n];
    let mut queue = std::collections::VecDeque::from([holder]);
    let mut row_seen = vec![false; n];
    row_seen[holder] = true;
    row_seen[skip_row] = true;
    while let Some(r) = queue.pop_front() {
        for c in 0..n {
            if parent_row[c].is_some() || col_fixed[c] || c == taken || !tight(r, c) {
                continue;
            }
            parent_row[c] = Some(r);
            if c == target {
                let mut path = Vec::new();
                let mut c = c;
                loop {
                    let r = parent_row[c].expect("visited column has a parent");
                    path.push((r, c));
                    if r == holder {
                        return Some(path);
                    }
                    // r reached through its currently matched column
                    c = (0..n)
                        .find(|&cc| row_of_col[cc] == r)
                        .expect("row is matched");
                }
            }
            let next = row_of_col[c];
            if !row_seen[next] {
                row_seen[next] = true;
                queue.push_back(next);
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub heatmap: f64,
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            heatmap: 2.0,
            cls: 1.0,
            l1: 6.0,
            iou: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub heatmap: f64,
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(heatmap: f64, cls: f64, l1: f64, iou: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            heatmap,
            cls,
            l1,
            iou,
            total: w.heatmap * heatmap + w.cls * cls + w.l1 * l1 + w.iou * iou,
        }
    }
}

/// Sigmoid focal classification over valid queries, normalized by their count.
pub fn query_focal_loss(logits: &[f64], positive: &[bool], params: &FocalParams) -> f64 {
    let mut total = 0.0;
    for (&x, &pos) in logits.iter().zip(positive) {
        let log_p = -softplus(-x);
        let log_1mp = -softplus(x);
        total += if pos {
            params.alpha_pos * (params.gamma * log_1mp).exp() * -log_p
        } else {
            params.alpha_neg * (params.gamma * log_p).exp() * -log_1mp
        };
    }
    total / logits.len().max(1) as f64
}

/// Reference per-image loss.
///
/// `preds` are the valid query slots only; the box terms are averaged over
/// matched pairs and are zero for images without ground truth.
pub fn total_loss(
    preds: &[QueryPrediction],
    gts: &[BoxN],
    assignment: &MatchAssignment,
    heatmap_logits: &HeatmapGrid,
    heatmap_target: &HeatmapGrid,
    focal: &FocalParams,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let hm = heatmap_focal_loss(heatmap_logits, heatmap_target, focal)?;
    let logits: Vec<f64> = preds.iter().map(|p| p.logit).collect();
    let positive: Vec<bool> = preds
        .iter()
        .map(|p| assignment.pairs.iter().any(|&(q, _)| q == p.index))
        .collect();
    let cls = query_focal_loss(&logits, &positive, focal);

    let mut l1 = 0.0;
    let mut iou = 0.0;
    for &(q, g) in &assignment.pairs {
        let p = preds
            .iter()
            .find(|p| p.index == q)
            .ok_or_else(|| Error::Shape(format!("matched query slot {q} has no prediction")))?;
        let gt = gts
            .get(g)
            .ok_or_else(|| Error::Shape(format!("matched gt index {g} out of range")))?;
        l1 += l1_distance(&p.bbox, gt);
        iou += 1.0 - ciou(&p.bbox, gt);
    }
    let n = assignment.pairs.len();
    if n > 0 {
        l1 /= n as f64;
        iou /= n as f64;
    }
    Ok(LossBreakdown::combine(hm, cls, l1, iou, weights))
}
