//! Scoring replications: normalized MSE, exact and fast dynamic time warping, and the
//! hyperparameter grid search with its selection rule.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffeo::{self, FitParams, WidthPolicy};
use crate::error::{Error, Result};

/// Sequences at most this long (in the shorter one) are aligned exactly.
pub const EXACT_DTW_LENGTH: usize = 64;
pub const DEFAULT_DTW_RADIUS: usize = 1;

/// Largest pairwise Euclidean distance between rows.
pub fn diameter(points: &DMatrix<f64>) -> f64 {
    let rows = crate::demo::matrix_rows(points);
    diameter_of(&rows)
}

fn diameter_of(rows: &[Vec<f64>]) -> f64 {
    let mut best = 0.0_f64;
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            best = best.max(sq_dist(&rows[i], &rows[j]));
        }
    }
    best.sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Mean squared row distance divided by the squared diameter of `reference`.
pub fn normalized_mse(a: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != reference.shape() {
        return Err(Error::ShapeMismatch {
            expected: reference.shape(),
            found: a.shape(),
        });
    }
    let d = diameter(reference);
    if d == 0.0 {
        return Err(Error::ZeroDiameter);
    }
    let total: f64 = (0..a.nrows())
        .map(|i| (a.row(i) - reference.row(i)).norm_squared())
        .sum();
    Ok(total / (a.nrows() as f64 * d * d))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtwScore {
    pub raw: f64,
    /// `raw / (path_length * diameter)` with the diameter of both sequences together.
    pub normalized: f64,
    pub path_length: usize,
    pub radius: usize,
}

/// Allowed columns `[lo, hi]` per row of the cost matrix.
type Window = Vec<(usize, usize)>;

fn full_window(rows: usize, cols: usize) -> Window {
    vec![(0, cols - 1); rows]
}

/// DTW restricted to `window`; returns the cost and the warping path.
fn windowed_dtw(a: &[Vec<f64>], b: &[Vec<f64>], window: &Window) -> (f64, Vec<(usize, usize)>) {
    let rows = a.len();
    let mut cost: Vec<Vec<f64>> = Vec::with_capacity(rows);
    let at = |cost: &Vec<Vec<f64>>, i: usize, j: usize| -> f64 {
        let (lo, hi) = window[i];
        if j < lo || j > hi {
            f64::INFINITY
        } else {
            cost[i][j - lo]
        }
    };
    for i in 0..rows {
        let (lo, hi) = window[i];
        let mut row = vec![f64::INFINITY; hi - lo + 1];
        for j in lo..=hi {
            let d = euclidean(&a[i], &b[j]);
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let up = if i > 0 { at(&cost, i - 1, j) } else { f64::INFINITY };
                let diag = if i > 0 && j > 0 {
                    at(&cost, i - 1, j - 1)
                } else {
                    f64::INFINITY
                };
                let left = if j > lo { row[j - 1 - lo] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            row[j - lo] = d + prev;
        }
        cost.push(row);
    }
    let mut i = rows - 1;
    let mut j = b.len() - 1;
    let total = at(&cost, i, j);
    let mut path = vec![(i, j)];
    while i > 0 || j > 0 {
        let (ni, nj) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = at(&cost, i - 1, j - 1);
            let up = at(&cost, i - 1, j);
            let left = at(&cost, i, j - 1);
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        i = ni;
        j = nj;
        path.push((i, j));
    }
    path.reverse();
    (total, path)
}

/// Full `O(|a| |b|)` dynamic time warping with Euclidean point cost.
pub fn exact_dtw(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(f64, Vec<(usize, usize)>)> {
    check_sequences(a, b)?;
    Ok(windowed_dtw(a, b, &full_window(a.len(), b.len())))
}

fn check_sequences(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParameter("DTW needs nonempty sequences".into()));
    }
    let dim = a[0].len();
    for p in a.iter().chain(b) {
        if p.len() != dim {
            return Err(Error::DimensionMismatch {
                left: dim,
                right: p.len(),
            });
        }
    }
    Ok(())
}

/// Averages consecutive pairs; an odd trailing point is kept as is.
fn coarsen(seq: &[Vec<f64>]) -> Vec<Vec<f64>> {
    seq.chunks(2)
        .map(|c| {
            if c.len() == 2 {
                c[0].iter().zip(&c[1]).map(|(x, y)| 0.5 * (x + y)).collect()
            } else {
                c[0].clone()
            }
        })
        .collect()
}

/// Projects a coarse path to the finer resolution and widens it by `radius`.
fn expand_window(path: &[(usize, usize)], rows: usize, cols: usize, radius: usize) -> Window {
    let mut window: Window = vec![(usize::MAX, 0); rows];
    let r = radius as isize;
    for &(ci, cj) in path {
        for di in -r..=r {
            for dj in -r..=r {
                let (i, j) = (ci as isize + di, cj as isize + dj);
                if i < 0 || j < 0 {
                    continue;
                }
                for fi in [2 * i as usize, 2 * i as usize + 1] {
                    if fi >= rows {
                        continue;
                    }
                    let lo = (2 * j as usize).min(cols - 1);
                    let hi = (2 * j as usize + 1).min(cols - 1);
                    let w = &mut window[fi];
                    w.0 = w.0.min(lo);
                    w.1 = w.1.max(hi);
                }
            }
        }
    }
    // keep row ranges monotone so that every cell stays reachable
    window[0].0 = 0;
    window[rows - 1].1 = cols - 1;
    for i in 1..rows {
        if window[i].0 == usize::MAX {
            window[i] = window[i - 1];
        }
        if window[i].0 > window[i - 1].1 {
            window[i].0 = window[i - 1].1;
        }
    }
    for i in (0..rows - 1).rev() {
        if window[i].1 < window[i + 1].0 {
            window[i].1 = window[i + 1].0;
        }
    }
    window
}

fn fast_dtw_path(a: &[Vec<f64>], b: &[Vec<f64>], radius: usize) -> (f64, Vec<(usize, usize)>) {
    if a.len().min(b.len()) <= EXACT_DTW_LENGTH.max(radius + 2) {
        return windowed_dtw(a, b, &full_window(a.len(), b.len()));
    }
    let (_, coarse_path) = fast_dtw_path(&coarsen(a), &coarsen(b), radius);
    let window = expand_window(&coarse_path, a.len(), b.len(), radius);
    windowed_dtw(a, b, &window)
}

/// FastDTW: recursive coarsening with refinement inside a band of `radius` around the
/// projected coarse path.
///
/// The band depends on which sequence indexes the rows, so both orientations are run
/// and the cheaper warping kept. This makes the score symmetric, and since each run
/// is an upper bound on exact DTW it never moves the result away from it.
pub fn fast_dtw(a: &[Vec<f64>], b: &[Vec<f64>], radius: usize) -> Result<DtwScore> {
    check_sequences(a, b)?;
    let (raw_ab, path_ab) = fast_dtw_path(a, b, radius);
    if a.len().min(b.len()) <= EXACT_DTW_LENGTH.max(radius + 2) {
        return Ok(score(a, b, raw_ab, path_ab.len(), radius));
    }
    let (raw_ba, path_ba) = fast_dtw_path(b, a, radius);
    let (raw, len) = if (raw_ba, path_ba.len()) < (raw_ab, path_ab.len()) {
        (raw_ba, path_ba.len())
    } else {
        (raw_ab, path_ab.len())
    };
    Ok(score(a, b, raw, len, radius))
}

fn score(a: &[Vec<f64>], b: &[Vec<f64>], raw: f64, path_length: usize, radius: usize) -> DtwScore {
    let normalized = if raw == 0.0 {
        0.0
    } else {
        let all: Vec<Vec<f64>> = a.iter().chain(b).cloned().collect();
        raw / (path_length as f64 * diameter_of(&all))
    };
    DtwScore {
        raw,
        normalized,
        path_length,
        radius,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Fewest layers under the threshold, lowest beta among those.
    MinLayersLowestBeta,
    /// A slightly larger budget cut the error at least tenfold.
    SignificantMseReduction,
    /// Nothing met the threshold; lowest error overall.
    LowestMseFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub mu: f64,
    pub beta: f64,
    /// Layer budget `M`.
    pub layers: usize,
    pub layers_used: usize,
    pub mse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub grid: Vec<GridCell>,
    pub selected: usize,
    pub selection_rule: SelectionRule,
    /// Lowest-error cell among those with the selected layer budget.
    pub lowest_mse_at_selected_layers: usize,
    pub threshold: f64,
}

/// Larger budgets are accepted when they cut the error this much...
pub const SIGNIFICANT_REDUCTION: f64 = 10.0;
/// ...and stay within this factor of the smallest passing budget.
pub const SLIGHTLY_MORE_LAYERS: f64 = 1.5;

fn by_beta_then_mse(grid: &[GridCell], a: usize, b: usize) -> std::cmp::Ordering {
    let (x, y) = (&grid[a], &grid[b]);
    x.beta
        .total_cmp(&y.beta)
        .then(
            x.mse
                .unwrap_or(f64::INFINITY)
                .total_cmp(&y.mse.unwrap_or(f64::INFINITY)),
        )
        .then(x.mu.total_cmp(&y.mu))
        .then(a.cmp(&b))
}

fn by_mse(grid: &[GridCell], a: usize, b: usize) -> std::cmp::Ordering {
    let (x, y) = (&grid[a], &grid[b]);
    x.mse
        .unwrap_or(f64::INFINITY)
        .total_cmp(&y.mse.unwrap_or(f64::INFINITY))
        .then(x.beta.total_cmp(&y.beta))
        .then(x.mu.total_cmp(&y.mu))
        .then(a.cmp(&b))
}

/// Applies the selection rule to a finished grid. Pure in the cells' `(M, beta, mse)`.
pub fn select(grid: &[GridCell], threshold: f64) -> Result<(usize, SelectionRule, usize)> {
    let valid: Vec<usize> = (0..grid.len()).filter(|&i| grid[i].mse.is_some()).collect();
    if valid.is_empty() {
        return Err(Error::InvalidParameter("no grid cell produced a fit".into()));
    }
    let passing: Vec<usize> = valid
        .iter()
        .copied()
        .filter(|&i| grid[i].mse.unwrap() < threshold)
        .collect();
    let lowest_at = |m: usize| -> usize {
        valid
            .iter()
            .copied()
            .filter(|&i| grid[i].layers == m)
            .min_by(|&a, &b| by_mse(grid, a, b))
            .unwrap()
    };
    if passing.is_empty() {
        let best = valid.iter().copied().min_by(|&a, &b| by_mse(grid, a, b)).unwrap();
        return Ok((best, SelectionRule::LowestMseFallback, lowest_at(grid[best].layers)));
    }
    let min_layers = passing.iter().map(|&i| grid[i].layers).min().unwrap();
    let chosen = passing
        .iter()
        .copied()
        .filter(|&i| grid[i].layers == min_layers)
        .min_by(|&a, &b| by_beta_then_mse(grid, a, b))
        .unwrap();
    let chosen_mse = grid[chosen].mse.unwrap();
    let limit = SLIGHTLY_MORE_LAYERS * min_layers as f64;
    let better = passing
        .iter()
        .copied()
        .filter(|&i| {
            let c = &grid[i];
            c.layers > min_layers && c.layers as f64 <= limit && c.mse.unwrap() * SIGNIFICANT_REDUCTION <= chosen_mse
        })
        .min_by(|&a, &b| grid[a].layers.cmp(&grid[b].layers).then(by_beta_then_mse(grid, a, b)));
    Ok(match better {
        Some(i) => (i, SelectionRule::SignificantMseReduction, lowest_at(grid[i].layers)),
        None => (chosen, SelectionRule::MinLayersLowestBeta, lowest_at(min_layers)),
    })
}

#[derive(Debug, Clone)]
pub struct GridSpec {
    pub mus: Vec<f64>,
    pub betas: Vec<f64>,
    pub layer_budgets: Vec<usize>,
    pub threshold: f64,
    pub width: WidthPolicy,
}

/// Fits every `(mu, beta, M)` combination of `aligned -> demo`.
///
/// The fit is greedy and deterministic, so the model with budget `M` is a prefix of
/// the model with any larger budget. Each `(mu, beta)` pair is therefore fitted once
/// with the largest budget and the smaller budgets are read off its error history.
pub fn grid_search(demo: &DMatrix<f64>, aligned: &DMatrix<f64>, spec: &GridSpec) -> Result<TuningReport> {
    if spec.mus.is_empty() || spec.betas.is_empty() || spec.layer_budgets.is_empty() {
        return Err(Error::InvalidParameter("grid axes must be nonempty".into()));
    }
    let mut budgets = spec.layer_budgets.clone();
    budgets.sort_unstable();
    budgets.dedup();
    let max_budget = *budgets.last().unwrap();
    let mut pairs = Vec::new();
    for &mu in &spec.mus {
        for &beta in &spec.betas {
            pairs.push((mu, beta));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pairs.dedup();

    let fits: Vec<Result<Vec<f64>>> = pairs
        .par_iter()
        .map(|&(mu, beta)| {
            let params = FitParams {
                mu,
                beta,
                max_layers: max_budget,
                mse_stop: 0.0,
                width: spec.width,
            };
            diffeo::fit(aligned, demo, &params).map(|m| m.layer_mse)
        })
        .collect();

    let mut grid = Vec::with_capacity(pairs.len() * budgets.len());
    for (&(mu, beta), fit) in pairs.iter().zip(&fits) {
        for &m in &budgets {
            let cell = match fit {
                Ok(history) => {
                    let used = m.min(history.len() - 1);
                    GridCell {
                        mu,
                        beta,
                        layers: m,
                        layers_used: used,
                        mse: Some(history[used]),
                        error: None,
                    }
                }
                Err(e) => GridCell {
                    mu,
                    beta,
                    layers: m,
                    layers_used: 0,
                    mse: None,
                    error: Some(e.to_string()),
                },
            };
            grid.push(cell);
        }
    }
    let (selected, selection_rule, lowest) = select(&grid, spec.threshold)?;
    Ok(TuningReport {
        grid,
        selected,
        selection_rule,
        lowest_mse_at_selected_layers: lowest,
        threshold: spec.threshold,
    })
}

impl TuningReport {
    pub fn selected_cell(&self) -> &GridCell {
        &self.grid[self.selected]
    }

    /// One table per layer budget: rows are `mu`, columns `beta`, cells the error.
    pub fn heat_maps(&self) -> BTreeMap<usize, String> {
        let mut mus: Vec<f64> = self.grid.iter().map(|c| c.mu).collect();
        let mut betas: Vec<f64> = self.grid.iter().map(|c| c.beta).collect();
        mus.sort_by(f64::total_cmp);
        mus.dedup();
        betas.sort_by(f64::total_cmp);
        betas.dedup();
        let mut out = BTreeMap::new();
        for m in self.grid.iter().map(|c| c.layers) {
            if out.contains_key(&m) {
                continue;
            }
            let mut text = Vec::new();
            let header: Vec<String> = betas.iter().map(|b| format!("beta={b:?}")).collect();
            let _ = writeln!(text, "mu\\beta,{}", header.join(","));
            for &mu in &mus {
                let cells: Vec<String> = betas
                    .iter()
                    .map(|&beta| {
                        self.grid
                            .iter()
                            .find(|c| c.layers == m && c.mu == mu && c.beta == beta)
                            .and_then(|c| c.mse)
                            .map(|v| format!("{v:?}"))
                            .unwrap_or_else(|| "NA".into())
                    })
                    .collect();
                let _ = writeln!(text, "{mu:?},{}", cells.join(","));
            }
            out.insert(m, String::from_utf8(text).unwrap());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(mu: f64, beta: f64, layers: usize, mse: f64) -> GridCell {
        GridCell {
            mu,
            beta,
            layers,
            layers_used: layers,
            mse: Some(mse),
            error: None,
        }
    }

    #[test]
    fn mse_basics() {
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(normalized_mse(&b, &b).unwrap(), 0.0);
        let a = b.map(|v| v) + DMatrix::from_row_slice(2, 2, &[0.0, 0.1, 0.0, 0.1]);
        assert!((normalized_mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        let flat = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(normalized_mse(&a, &flat), Err(Error::ZeroDiameter)));
        assert!(normalized_mse(&DMatrix::zeros(3, 2), &b).is_err());
    }

    #[test]
    fn mse_is_scale_invariant() {
        let b = DMatrix::from_fn(10, 3, |i, j| ((i * 3 + j) as f64).sin());
        let a = DMatrix::from_fn(10, 3, |i, j| ((i * 3 + j) as f64).cos() * 0.2);
        let base = normalized_mse(&a, &b).unwrap();
        for s in [0.5, 2.0, 10.0] {
            let v = normalized_mse(&(&a * s), &(&b * s)).unwrap();
            assert!((v - base).abs() <= 1e-12 * base);
        }
    }

    #[test]
    fn dtw_trivial_cases() {
        let a = vec![vec![0.0, 0.0]];
        let b = vec![vec![3.0, 4.0]];
        let s = fast_dtw(&a, &b, 1).unwrap();
        assert_eq!(s.raw, 5.0);
        assert_eq!(s.path_length, 1);
        let seq: Vec<Vec<f64>> = (0..300).map(|i| vec![(i as f64 * 0.1).sin(), i as f64]).collect();
        let s = fast_dtw(&seq, &seq, 1).unwrap();
        assert_eq!(s.raw, 0.0);
        assert_eq!(s.normalized, 0.0);
        assert_eq!(s.path_length, 300);
        assert!(fast_dtw(&a, &[vec![1.0]], 1).is_err());
        assert!(fast_dtw(&[], &a, 1).is_err());
    }

    #[test]
    fn window_covers_corners_and_is_monotone() {
        let path: Vec<(usize, usize)> = (0..10).map(|i| (i, i)).collect();
        let w = expand_window(&path, 19, 21, 1);
        assert_eq!(w[0].0, 0);
        assert_eq!(w[18].1, 20);
        for i in 1..19 {
            assert!(w[i].0 <= w[i].1);
            assert!(w[i].0 <= w[i - 1].1 + 1);
        }
    }

    #[test]
    fn single_cell_is_selected() {
        let grid = vec![cell(0.9, 0.5, 10, 1.0)];
        assert_eq!(select(&grid, 1e-5).unwrap(), (0, SelectionRule::LowestMseFallback, 0));
    }

    #[test]
    fn only_passing_cell_wins() {
        let grid = vec![
            cell(0.9, 0.5, 10, 2e-5),
            cell(0.5, 0.9, 50, 9e-6),
            cell(0.3, 0.1, 5, 3e-5),
        ];
        let (idx, rule, _) = select(&grid, 1e-5).unwrap();
        assert_eq!(idx, 1);
        assert_eq!(rule, SelectionRule::MinLayersLowestBeta);
    }

    #[test]
    fn lowest_beta_among_min_layers() {
        let grid = vec![
            cell(0.9, 0.9, 50, 1e-7),
            cell(0.9, 0.3, 50, 5e-6),
            cell(0.6, 0.3, 75, 1e-9),
            cell(0.9, 0.1, 100, 1e-8),
        ];
        let (idx, rule, lowest) = select(&grid, 1e-5).unwrap();
        // 75 <= 1.5 * 50 and 1e-9 <= 5e-6 / 10
        assert_eq!((idx, rule), (2, SelectionRule::SignificantMseReduction));
        assert_eq!(lowest, 2);
        let grid = vec![
            cell(0.9, 0.9, 50, 1e-7),
            cell(0.9, 0.3, 50, 5e-6),
            cell(0.6, 0.3, 100, 1e-9),
        ];
        let (idx, rule, lowest) = select(&grid, 1e-5).unwrap();
        assert_eq!((idx, rule, lowest), (1, SelectionRule::MinLayersLowestBeta, 0));
    }

    #[test]
    fn failed_cells_are_skipped() {
        let mut bad = cell(0.9, 0.1, 1, 0.0);
        bad.mse = None;
        bad.error = Some("boom".into());
        let grid = vec![bad, cell(0.9, 0.5, 10, 1e-3)];
        assert_eq!(select(&grid, 1e-5).unwrap().0, 1);
        let mut only_bad = cell(0.9, 0.1, 1, 0.0);
        only_bad.mse = None;
        assert!(select(&[only_bad], 1e-5).is_err());
    }
}
