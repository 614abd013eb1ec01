//! Latent embedding from the spectrum of a multi-copy path graph.
//!
//! The graph joins `K` copies of an `N`-node path by a cycle through their
//! last nodes. Its Laplacian is `L = 2I - J` with `J` block circulant, so the
//! spectrum splits into `K` symmetric tridiagonal branches
//!
//! ```text
//! T_j = tridiag(-1; 1, 2, ..., 2, 3 - alpha_j; -1),   alpha_j = 2 cos(2 pi j / K)
//! ```
//!
//! Branches `j` and `K - j` coincide, which is where the repeated eigenvalues
//! come from. Only the smallest eigenvalue of each branch is ever needed and it
//! is found by Sturm-sequence bisection in `O(N)` per step.
//!
//! The first `N` components of the corresponding eigenvector have the closed
//! form `u_i = T_i(1 - l/2) - (l/2) V_{i-1}(1 - l/2)` in Chebyshev polynomials,
//! which is what [`chebyshev_coordinate`] evaluates.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demo::Demonstration;
use crate::error::{Error, Result};

/// Largest `N * K` the dense oracle will assemble.
pub const DENSE_ORACLE_LIMIT: usize = 2000;

/// Relative displacement below which an alignment dimension counts as degenerate.
pub const DEGENERATE_DISPLACEMENT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub n_points: usize,
    pub n_dims: usize,
    pub n_copies: usize,
}

impl GraphSpec {
    pub fn new(n_points: usize, n_dims: usize, n_copies: usize) -> Result<Self> {
        if n_points < 3 {
            return Err(Error::InvalidGraph(format!("need at least 3 points, got {n_points}")));
        }
        if n_dims < 2 {
            return Err(Error::InvalidGraph(format!("need at least 2 dimensions, got {n_dims}")));
        }
        if n_copies < 3 {
            return Err(Error::InvalidGraph(format!("need at least 3 copies, got {n_copies}")));
        }
        Ok(Self {
            n_points,
            n_dims,
            n_copies,
        })
    }

    /// Graph with the default `K = n + 1` copies.
    pub fn with_default_copies(n_points: usize, n_dims: usize) -> Result<Self> {
        Self::new(n_points, n_dims, n_dims + 1)
    }

    /// Upper bound `2 (1 - cos(pi / N))` on the smallest repeating eigenvalues.
    pub fn eigenvalue_bound(&self) -> f64 {
        eigenvalue_bound(self.n_points)
    }

    /// Number of distinct eigenvalues of multiplicity two coming from paired branches.
    pub fn paired_branch_count(&self) -> usize {
        paired_branch_count(self.n_copies)
    }
}

/// `2 (1 - cos(pi / N))`, evaluated as `4 sin^2(pi / 2N)` to keep relative accuracy.
pub fn eigenvalue_bound(n_points: usize) -> f64 {
    let s = (PI / (2.0 * n_points as f64)).sin();
    4.0 * s * s
}

/// Count of paired branches `j`, `K - j`: `K/2 - 1` for even `K`, `(K-1)/2` for odd `K`.
pub fn paired_branch_count(n_copies: usize) -> usize {
    if n_copies.is_multiple_of(2) {
        n_copies / 2 - 1
    } else {
        (n_copies - 1) / 2
    }
}

/// Coupling `alpha_j = rho_j + rho_j^{-1} = 2 cos(2 pi j / K)` of branch `j`.
pub fn branch_coupling(branch: usize, n_copies: usize) -> f64 {
    2.0 * (2.0 * PI * branch as f64 / n_copies as f64).cos()
}

/// The selected eigenvalues, ascending, with repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSelection {
    pub eigenvalues: Vec<f64>,
    /// Algebraic multiplicity in `L(G)` of each distinct selected value, in ascending order.
    pub multiplicities: Vec<usize>,
    pub bound: f64,
    pub n_copies: usize,
}

impl SpectralSelection {
    pub fn distinct(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for &l in &self.eigenvalues {
            if out.last() != Some(&l) {
                out.push(l);
            }
        }
        out
    }
}

/// Diagonal of the tridiagonal branch `2I - H_j` (off-diagonal entries are all `-1`).
fn branch_diagonal(n_points: usize, alpha: f64) -> Vec<f64> {
    let mut d = vec![2.0; n_points];
    d[0] = 1.0;
    d[n_points - 1] = 3.0 - alpha;
    d
}

/// Number of eigenvalues of the branch strictly below `x` (Sturm count via LDL^T pivots).
fn sturm_count(diag: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut pivot = 1.0;
    for (i, &d) in diag.iter().enumerate() {
        pivot = if i == 0 { d - x } else { d - x - 1.0 / pivot };
        if pivot == 0.0 {
            pivot = -f64::EPSILON * (d.abs() + x.abs() + 1.0);
        }
        if pivot < 0.0 {
            count += 1;
        }
    }
    count
}

/// `k`-th smallest eigenvalue (0-based) of the branch, bisected to full precision.
fn branch_eigenvalue(diag: &[f64], k: usize) -> f64 {
    // Branches are positive semidefinite and Gershgorin bounds them by max(d) + 2.
    let mut lo = 0.0_f64;
    let mut hi = diag.iter().cloned().fold(0.0, f64::max) + 2.0;
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return hi;
        }
        if sturm_count(diag, mid) > k {
            hi = mid;
        } else {
            lo = mid;
        }
    }
}

/// Smallest eigenvalue of branch `2I - (B_1 + alpha B_2)`.
pub fn branch_smallest_eigenvalue(n_points: usize, alpha: f64) -> f64 {
    branch_eigenvalue(&branch_diagonal(n_points, alpha), 0)
}

/// All `N` eigenvalues of branch `2I - (B_1 + alpha B_2)`, ascending.
pub fn branch_spectrum(n_points: usize, alpha: f64) -> Vec<f64> {
    let diag = branch_diagonal(n_points, alpha);
    (0..n_points).map(|k| branch_eigenvalue(&diag, k)).collect()
}

/// The `n` smallest repeating eigenvalues of `L(G)`, counted with multiplicity.
///
/// Paired branches contribute each value twice. If they leave slots unfilled and
/// `K` is even, the smallest eigenvalue of the unpaired branch `j = K/2` fills one
/// more slot when it lies under the bound.
pub fn repeating_eigenvalues(spec: &GraphSpec) -> Result<SpectralSelection> {
    let n = spec.n_points;
    let k = spec.n_copies;
    let bound = spec.eigenvalue_bound();

    let paired: Vec<f64> = (1..=paired_branch_count(k))
        .into_par_iter()
        .map(|j| branch_smallest_eigenvalue(n, branch_coupling(j, k)))
        .collect();
    let mut paired: Vec<f64> = paired.into_iter().filter(|&l| l > 0.0 && l < bound).collect();
    paired.sort_by(f64::total_cmp);

    let mut eigenvalues = Vec::with_capacity(spec.n_dims);
    let mut multiplicities = Vec::new();
    for &l in &paired {
        if eigenvalues.len() == spec.n_dims {
            break;
        }
        let take = (spec.n_dims - eigenvalues.len()).min(2);
        eigenvalues.extend(std::iter::repeat_n(l, take));
        multiplicities.push(2);
    }
    if eigenvalues.len() < spec.n_dims && k.is_multiple_of(2) {
        let l = branch_smallest_eigenvalue(n, -2.0);
        if l > 0.0 && l < bound {
            eigenvalues.push(l);
            multiplicities.push(1);
        }
    }
    if eigenvalues.len() < spec.n_dims {
        return Err(Error::InsufficientEigenvalues {
            needed: spec.n_dims,
            found: eigenvalues.len(),
            n_copies: k,
        });
    }
    Ok(SpectralSelection {
        eigenvalues,
        multiplicities,
        bound,
        n_copies: k,
    })
}

/// Like [`repeating_eigenvalues`] but adds copies one at a time (up to `max_extra`)
/// until `n` eigenvalues under the bound exist.
pub fn repeating_eigenvalues_growing(spec: &GraphSpec, max_extra: usize) -> Result<SpectralSelection> {
    let mut current = *spec;
    loop {
        match repeating_eigenvalues(&current) {
            Err(Error::InsufficientEigenvalues { .. }) if current.n_copies < spec.n_copies + max_extra => {
                current.n_copies += 1;
            }
            other => return other,
        }
    }
}

/// `T_i(1 - l/2) - (l/2) V_{i-1}(1 - l/2)` for `i >= 1` and `l` in `(0, 4)`.
///
/// Uses the trigonometric forms of `T` and `V`. The angle is computed as
/// `2 asin(sqrt(l)/2)`, which equals `arccos(1 - l/2)` but does not lose the
/// low-order bits of tiny eigenvalues.
pub fn chebyshev_coordinate(i: usize, lambda: f64) -> Result<f64> {
    if i == 0 {
        return Err(Error::InvalidParameter("coordinate index starts at 1".into()));
    }
    if !(lambda > 0.0 && lambda < 4.0) {
        return Err(Error::InvalidParameter(format!("eigenvalue {lambda} outside (0, 4)")));
    }
    Ok(ChebyshevConstants::new(lambda).coordinate(i))
}

/// Per-eigenvalue constants `a = arccos(1 - l/2)`, `b = l / (2 sin a)`, `gamma = arcsin(1/sqrt(b^2+1))`.
#[derive(Debug, Clone, Copy)]
struct ChebyshevConstants {
    lambda: f64,
    a: f64,
    b: f64,
}

impl ChebyshevConstants {
    fn new(lambda: f64) -> Self {
        let a = 2.0 * (0.5 * lambda.sqrt()).asin();
        // sin a = sqrt(l (4 - l)) / 2, so b = sqrt(l / (4 - l))
        let b = (lambda / (4.0 - lambda)).sqrt();
        Self { lambda, a, b }
    }

    fn gamma(&self) -> f64 {
        (1.0 / (self.b * self.b + 1.0).sqrt()).asin()
    }

    fn coordinate(&self, i: usize) -> f64 {
        if i == 1 {
            return 1.0 - self.lambda;
        }
        let ia = i as f64 * self.a;
        ia.cos() - self.b * ia.sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentEmbedding {
    /// `N x n`; row 0 is the start, row `N-1` the attractor.
    pub points: DMatrix<f64>,
    pub selection: SpectralSelection,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub gamma: Vec<f64>,
    pub start: Vec<f64>,
    pub attractor: Vec<f64>,
}

/// Builds the latent coordinates, reversed so that row 0 is `x^N` and the last row is `x^1 = 1 - l`.
pub fn build_embedding(spec: &GraphSpec) -> Result<LatentEmbedding> {
    let selection = repeating_eigenvalues(spec)?;
    Ok(embedding_from_selection(spec.n_points, selection))
}

/// Builds the embedding from an already computed selection.
pub fn embedding_from_selection(n_points: usize, selection: SpectralSelection) -> LatentEmbedding {
    let n_dims = selection.eigenvalues.len();
    let consts: Vec<ChebyshevConstants> = selection
        .eigenvalues
        .iter()
        .map(|&l| ChebyshevConstants::new(l))
        .collect();
    let points = DMatrix::from_fn(n_points, n_dims, |row, col| consts[col].coordinate(n_points - row));
    let start = points.row(0).iter().copied().collect();
    let attractor = points.row(n_points - 1).iter().copied().collect();
    LatentEmbedding {
        a: consts.iter().map(|c| c.a).collect(),
        b: consts.iter().map(|c| c.b).collect(),
        gamma: consts.iter().map(ChebyshevConstants::gamma).collect(),
        points,
        selection,
        start,
        attractor,
    }
}

impl LatentEmbedding {
    pub fn n_points(&self) -> usize {
        self.points.nrows()
    }

    pub fn n_dims(&self) -> usize {
        self.points.ncols()
    }

    /// Maps each column affinely so that the start lands on the first demo point and
    /// the attractor on the last one.
    ///
    /// A demo dimension whose net displacement is below `1e-9` times the demo diameter
    /// is mapped to the constant attractor value.
    pub fn align_to_demo(&self, demo: &Demonstration) -> Result<DMatrix<f64>> {
        self.align_to_points(&demo.points)
    }

    pub fn align_to_points(&self, target: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if target.shape() != self.points.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.points.shape(),
                found: target.shape(),
            });
        }
        let n = self.n_points();
        let diameter = crate::eval::diameter(target);
        let mut out = DMatrix::zeros(n, self.n_dims());
        for col in 0..self.n_dims() {
            let first = target[(0, col)];
            let last = target[(n - 1, col)];
            let x0 = self.start[col];
            let x1 = self.attractor[col];
            if (last - first).abs() <= DEGENERATE_DISPLACEMENT * diameter {
                out.column_mut(col).fill(last);
                continue;
            }
            let scale = (last - first) / (x1 - x0);
            for row in 0..n {
                out[(row, col)] = first + (self.points[(row, col)] - x0) * scale;
            }
            out[(0, col)] = first;
            out[(n - 1, col)] = last;
        }
        Ok(out)
    }

    /// Largest Euclidean distance between two embedding columns.
    pub fn max_column_distance(&self) -> f64 {
        let mut best = 0.0_f64;
        for l in 0..self.n_dims() {
            for m in (l + 1)..self.n_dims() {
                best = best.max((self.points.column(l) - self.points.column(m)).norm());
            }
        }
        best
    }
}

/// Explicit `L(G) = 2I - bcirc(B_1, B_2, 0, ..., 0, B_2)` for small graphs.
pub fn dense_laplacian(spec: &GraphSpec) -> Result<DMatrix<f64>> {
    let n = spec.n_points;
    let k = spec.n_copies;
    let size = n * k;
    if size > DENSE_ORACLE_LIMIT {
        return Err(Error::OracleTooLarge {
            size,
            limit: DENSE_ORACLE_LIMIT,
        });
    }
    let mut lap = DMatrix::zeros(size, size);
    for copy in 0..k {
        let base = copy * n;
        for i in 0..n {
            let degree = if i == 0 { 1.0 } else { 2.0 };
            lap[(base + i, base + i)] = degree;
            if i + 1 < n {
                lap[(base + i, base + i + 1)] = -1.0;
                lap[(base + i + 1, base + i)] = -1.0;
            }
        }
        // last node: one path neighbour plus two cycle neighbours
        lap[(base + n - 1, base + n - 1)] = 3.0;
        for next in [(copy + 1) % k, (copy + k - 1) % k] {
            lap[(base + n - 1, next * n + n - 1)] -= 1.0;
        }
    }
    Ok(lap)
}

/// Row-major CSV dump of a matrix at full precision.
pub fn write_matrix_csv<W: Write>(matrix: &DMatrix<f64>, mut out: W) -> Result<()> {
    for row in matrix.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_spec_rejects_small_values() {
        assert!(GraphSpec::new(2, 3, 4).is_err());
        assert!(GraphSpec::new(10, 1, 4).is_err());
        assert!(GraphSpec::new(10, 2, 2).is_err());
        assert_eq!(GraphSpec::with_default_copies(10, 3).unwrap().n_copies, 4);
    }

    #[test]
    fn lambda_count_matches_parity_rule() {
        assert_eq!(paired_branch_count(6), 2);
        assert_eq!(paired_branch_count(5), 2);
        assert_eq!(paired_branch_count(4), 1);
        assert_eq!(paired_branch_count(3), 1);
    }

    #[test]
    fn path_branch_matches_known_spectrum() {
        // alpha = 2 gives the plain path Laplacian: 2 (1 - cos(pi k / N))
        let n = 9;
        let spec = branch_spectrum(n, 2.0);
        for (k, l) in spec.iter().enumerate() {
            let expected = 2.0 * (1.0 - (PI * k as f64 / n as f64).cos());
            assert!((l - expected).abs() < 1e-13, "{k}: {l} vs {expected}");
        }
    }

    #[test]
    fn first_coordinate_is_one_minus_lambda() {
        for &l in &[1e-6, 3.9e-5, 0.2, 1.5] {
            assert_eq!(chebyshev_coordinate(1, l).unwrap(), 1.0 - l);
        }
    }

    #[test]
    fn vanishing_lambda_gives_unit_coordinates() {
        for i in [1, 2, 17, 400] {
            let v = chebyshev_coordinate(i, 1e-300).unwrap();
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coordinate_rejects_bad_inputs() {
        assert!(chebyshev_coordinate(0, 0.1).is_err());
        assert!(chebyshev_coordinate(1, 0.0).is_err());
        assert!(chebyshev_coordinate(1, 4.0).is_err());
        assert!(chebyshev_coordinate(1, f64::NAN).is_err());
    }

    #[test]
    fn odd_dims_even_copies_uses_unpaired_branch() {
        let spec = GraphSpec::new(50, 3, 4).unwrap();
        let sel = repeating_eigenvalues(&spec).unwrap();
        assert_eq!(sel.eigenvalues.len(), 3);
        assert_eq!(sel.multiplicities, vec![2, 1]);
        assert_eq!(sel.eigenvalues[0], sel.eigenvalues[1]);
        assert!(sel.eigenvalues[2] > sel.eigenvalues[1]);
    }

    #[test]
    fn too_few_copies_is_reported() {
        let spec = GraphSpec::new(50, 3, 3).unwrap();
        match repeating_eigenvalues(&spec) {
            Err(Error::InsufficientEigenvalues {
                needed: 3,
                found: 2,
                n_copies: 3,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let grown = repeating_eigenvalues_growing(&spec, 2).unwrap();
        assert_eq!(grown.n_copies, 4);
    }

    #[test]
    fn dense_laplacian_is_symmetric_with_degree_diagonal() {
        let spec = GraphSpec::new(3, 2, 3).unwrap();
        let lap = dense_laplacian(&spec).unwrap();
        assert_eq!(lap, lap.transpose());
        for i in 0..9 {
            let off: f64 = (0..9).filter(|&j| j != i).map(|j| -lap[(i, j)]).sum();
            assert_eq!(lap[(i, i)], off);
        }
        assert_eq!(lap[(0, 0)], 1.0);
        assert_eq!(lap[(1, 1)], 2.0);
        assert_eq!(lap[(2, 2)], 3.0);
    }

    #[test]
    fn dense_oracle_guard() {
        let spec = GraphSpec::new(1000, 2, 3).unwrap();
        assert!(matches!(dense_laplacian(&spec), Err(Error::OracleTooLarge { .. })));
    }

    #[test]
    fn embedding_endpoints() {
        let spec = GraphSpec::with_default_copies(200, 3).unwrap();
        let emb = build_embedding(&spec).unwrap();
        let n = spec.n_points;
        for j in 0..3 {
            let l = emb.selection.eigenvalues[j];
            assert_eq!(emb.points[(n - 1, j)], 1.0 - l);
            assert_eq!(emb.attractor[j], 1.0 - l);
            let closed = (emb.b[j] * emb.b[j] + 1.0).sqrt() * (emb.gamma[j] - n as f64 * emb.a[j]).sin();
            assert!((emb.points[(0, j)] - closed).abs() < 1e-9);
            assert!((emb.a[j] - (1.0 - l / 2.0).acos()).abs() < 1e-7);
        }
    }

    #[test]
    fn matrix_csv_is_full_precision() {
        let m = DMatrix::from_row_slice(2, 2, &[0.1, 1.0 / 3.0, -2.0, 1e-300]);
        let mut buf = Vec::new();
        write_matrix_csv(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let parsed: Vec<f64> = text
            .split([',', '\n'])
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(parsed, vec![0.1, 1.0 / 3.0, -2.0, 1e-300]);
    }
}
