//! Fast diffeomorphic matching: a greedy composition of Gaussian kernel translations.
//!
//! Each layer is `psi_j(x) = x + v_j exp(-|x - c_j|^2 / (2 sigma_j^2))`. The kernel's
//! steepest slope is `e^{-1/2} / sigma_j`, so a layer is a diffeomorphism whenever
//! `|v_j| e^{-1/2} / sigma_j < 1`. Fitting keeps that product at most `mu`.
//!
//! The fit pushes the source points forward layer by layer. A new layer is centred
//! on the current position of the point with the largest residual and translates by
//! `beta` times that residual; its width comes from a line search on the training
//! error (the [`WidthPolicy::LineSearch`] default) or from a fixed multiple of the
//! residual norm.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval;

pub const MODEL_VERSION: u32 = 1;

/// `e^{-1/2}`: slope of the unit-width Gaussian at its steepest point.
pub const KERNEL_MAX_SLOPE: f64 = 0.606_530_659_712_633_4;

pub const DEFAULT_INVERSE_TOL: f64 = 1e-10;
pub const DEFAULT_INVERSE_MAX_ITER: usize = 200;
pub const DEFAULT_MSE_STOP: f64 = 1e-5;

const WIDTH_GRID: usize = 32;
const WIDTH_REFINE_STEPS: usize = 40;
const MAX_STEP_HALVINGS: usize = 12;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffeoLayer {
    pub center: Vec<f64>,
    pub translation: Vec<f64>,
    pub width: f64,
}

/// Outcome of the fixed-point inversion of one layer.
#[derive(Debug, Clone)]
pub struct LayerInversion {
    pub point: Vec<f64>,
    /// `|psi(x_k) - y|` before each update, starting from `x_0 = y`.
    pub residuals: Vec<f64>,
    pub converged: bool,
}

impl DiffeoLayer {
    pub fn new(center: Vec<f64>, translation: Vec<f64>, width: f64) -> Result<Self> {
        if center.len() != translation.len() {
            return Err(Error::DimensionMismatch {
                left: center.len(),
                right: translation.len(),
            });
        }
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "layer width must be positive, got {width}"
            )));
        }
        if center.iter().chain(&translation).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(Self {
            center,
            translation,
            width,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn kernel(&self, x: &[f64]) -> f64 {
        (-dist2(x, &self.center) / (2.0 * self.width * self.width)).exp()
    }

    /// Lipschitz constant of the displacement `x -> v k(x)`.
    pub fn lipschitz(&self) -> f64 {
        norm(&self.translation) * KERNEL_MAX_SLOPE / self.width
    }

    pub fn apply_in_place(&self, x: &mut [f64]) {
        let k = self.kernel(x);
        for (xi, vi) in x.iter_mut().zip(&self.translation) {
            *xi += k * vi;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        self.apply_in_place(&mut out);
        out
    }

    /// `I + v grad(k)^T` with `grad(k) = -k (x - c) / sigma^2`.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let k = self.kernel(x);
        let s2 = self.width * self.width;
        DMatrix::from_fn(n, n, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            id - self.translation[i] * k * (x[j] - self.center[j]) / s2
        })
    }

    /// Solves `x + v k(x) = y` by the fixed-point iteration `x <- y - v k(x)`.
    ///
    /// Every iterate has the form `y - s v`, so the iteration runs on the scalar `s`.
    /// The map is a contraction with modulus at most [`DiffeoLayer::lipschitz`]. A
    /// Newton step on the scalar equation is taken instead whenever it shrinks the
    /// residual by at least that modulus, so the contraction bound still holds per
    /// iteration while convergence near `mu = 1` stays fast.
    pub fn invert_traced(&self, y: &[f64], tol: f64, max_iter: usize) -> LayerInversion {
        let vnorm = norm(&self.translation);
        let modulus = self.lipschitz().min(1.0);
        let s2 = self.width * self.width;
        let point_at = |s: f64| -> Vec<f64> { y.iter().zip(&self.translation).map(|(yi, vi)| yi - s * vi).collect() };
        let mut s = 0.0;
        let mut x = y.to_vec();
        let mut ks = self.kernel(&x);
        let mut residual = (ks - s).abs() * vnorm;
        let mut residuals = vec![residual];
        for _ in 0..max_iter {
            if residual <= tol {
                break;
            }
            // d k(y - s v) / ds = k (x - c) . v / sigma^2
            let slope: f64 = ks
                * x.iter()
                    .zip(&self.center)
                    .zip(&self.translation)
                    .map(|((xi, ci), vi)| (xi - ci) * vi)
                    .sum::<f64>()
                / s2;
            let newton = s + (ks - s) / (1.0 - slope);
            let mut accepted = false;
            if newton.is_finite() {
                let xn = point_at(newton);
                let kn = self.kernel(&xn);
                let rn = (kn - newton).abs() * vnorm;
                if rn <= modulus * residual {
                    s = newton;
                    x = xn;
                    ks = kn;
                    residual = rn;
                    accepted = true;
                }
            }
            if !accepted {
                s = ks;
                x = point_at(s);
                ks = self.kernel(&x);
                residual = (ks - s).abs() * vnorm;
            }
            residuals.push(residual);
        }
        LayerInversion {
            point: x,
            converged: residual <= tol,
            residuals,
        }
    }
}

/// How the kernel width of each new layer is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WidthPolicy {
    /// Minimise the training error over the width, subject to the invertibility bound.
    LineSearch,
    /// `sigma = factor * |residual|`, translation clipped to the invertibility bound.
    ResidualProportional { factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitParams {
    pub mu: f64,
    pub beta: f64,
    pub max_layers: usize,
    pub mse_stop: f64,
    pub width: WidthPolicy,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            mu: 0.9,
            beta: 0.5,
            max_layers: 175,
            mse_stop: DEFAULT_MSE_STOP,
            width: WidthPolicy::LineSearch,
        }
    }
}

impl FitParams {
    pub fn new(mu: f64, beta: f64, max_layers: usize) -> Self {
        Self {
            mu,
            beta,
            max_layers,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "mu must lie in (0, 1), got {}",
                self.mu
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "beta must lie in (0, 1], got {}",
                self.beta
            )));
        }
        if self.mse_stop.is_nan() || self.mse_stop < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "mse_stop must be nonnegative, got {}",
                self.mse_stop
            )));
        }
        if let WidthPolicy::ResidualProportional { factor } = self.width {
            if !(factor > 0.0 && factor.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "width factor must be positive, got {factor}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMeta {
    pub n_points: usize,
    pub n_dims: usize,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub source: SetMeta,
    pub target: SetMeta,
    /// First and last source points; the latter is the latent attractor.
    pub latent_start: Vec<f64>,
    pub latent_attractor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffeoModel {
    pub version: u32,
    pub mu: f64,
    pub beta: f64,
    pub layers: Vec<DiffeoLayer>,
    pub normalized_mse: f64,
    /// Normalized MSE after `k` layers, `k = 0..=layers.len()`.
    pub layer_mse: Vec<f64>,
    pub meta: ModelMeta,
}

impl DiffeoModel {
    pub fn identity(n_dims: usize) -> Self {
        let empty = SetMeta {
            n_points: 0,
            n_dims,
            provenance: String::new(),
        };
        Self {
            version: MODEL_VERSION,
            mu: 0.5,
            beta: 0.5,
            layers: Vec::new(),
            normalized_mse: 0.0,
            layer_mse: vec![0.0],
            meta: ModelMeta {
                source: empty.clone(),
                target: empty,
                latent_start: vec![0.0; n_dims],
                latent_attractor: vec![0.0; n_dims],
            },
        }
    }

    pub fn n_dims(&self) -> usize {
        self.meta.source.n_dims
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        for layer in &self.layers {
            layer.apply_in_place(&mut out);
        }
        out
    }

    /// Applies [`DiffeoModel::forward`] to every row; parallel, same result as sequential.
    pub fn forward_rows(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = (0..points.nrows())
            .into_par_iter()
            .map(|i| {
                let row: Vec<f64> = points.row(i).iter().copied().collect();
                self.forward(&row)
            })
            .collect();
        DMatrix::from_fn(points.nrows(), points.ncols(), |i, j| rows[i][j])
    }

    /// Inverts the layers in reverse order. Each layer is solved to `tol / (M + 1)`
    /// (floored near machine precision) so the composed residual stays below `tol`.
    pub fn inverse(&self, y: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("inverse input".into()));
        }
        let scale = norm(y) + 1.0;
        let layer_tol = (tol / (self.layers.len() + 1) as f64).max(8.0 * f64::EPSILON * scale);
        let mut x = y.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let inv = layer.invert_traced(&x, layer_tol, max_iter);
            if !inv.converged {
                return Err(Error::InversionFailed {
                    layer: idx,
                    residual: *inv.residuals.last().unwrap_or(&f64::NAN),
                    iterations: max_iter,
                });
            }
            x = inv.point;
        }
        Ok(x)
    }

    pub fn inverse_default(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.inverse(y, DEFAULT_INVERSE_TOL, DEFAULT_INVERSE_MAX_ITER)
    }

    /// Chain-rule product of the layer Jacobians along the forward composition.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let mut jac = DMatrix::identity(n, n);
        let mut point = x.to_vec();
        for layer in &self.layers {
            // (I + v g^T) J = J + v (g^T J)
            let k = layer.kernel(&point);
            let s2 = layer.width * layer.width;
            let grad: Vec<f64> = point
                .iter()
                .zip(&layer.center)
                .map(|(p, c)| -k * (p - c) / s2)
                .collect();
            let gj: Vec<f64> = (0..n)
                .map(|col| (0..n).map(|r| grad[r] * jac[(r, col)]).sum())
                .collect();
            for r in 0..n {
                for col in 0..n {
                    jac[(r, col)] += layer.translation[r] * gj[col];
                }
            }
            for (p, v) in point.iter_mut().zip(&layer.translation) {
                *p += k * v;
            }
        }
        jac
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        if model.version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion {
                found: model.version,
                expected: MODEL_VERSION,
            });
        }
        let n = model.n_dims();
        for layer in &model.layers {
            if layer.dim() != n || layer.translation.len() != n {
                return Err(Error::DimensionMismatch {
                    left: n,
                    right: layer.dim(),
                });
            }
            if layer.width.is_nan() || layer.width <= 0.0 {
                return Err(Error::InvalidParameter("layer width must be positive".into()));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Row-major copy of a point matrix.
fn flatten_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let (rows, cols) = m.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        out.extend(m.row(i).iter());
    }
    out
}

/// Squared training error after a candidate layer, from per-point precomputed terms.
struct LayerObjective<'a> {
    center_dist2: &'a [f64],
    resid2: &'a [f64],
    resid_dot_v: &'a [f64],
    vv: f64,
}

impl LayerObjective<'_> {
    fn error(&self, width: f64) -> f64 {
        let inv = 1.0 / (2.0 * width * width);
        let mut total = 0.0;
        for i in 0..self.resid2.len() {
            let k = (-self.center_dist2[i] * inv).exp();
            total += self.resid2[i] - 2.0 * k * self.resid_dot_v[i] + k * k * self.vv;
        }
        total
    }

    /// Log-grid scan over `[lo, hi]` followed by golden-section refinement.
    fn minimize(&self, lo: f64, hi: f64) -> (f64, f64) {
        if hi <= lo {
            return (lo, self.error(lo));
        }
        let (llo, lhi) = (lo.ln(), hi.ln());
        let grid: Vec<f64> = (0..WIDTH_GRID)
            .map(|i| llo + (lhi - llo) * i as f64 / (WIDTH_GRID - 1) as f64)
            .collect();
        let values: Vec<f64> = grid.iter().map(|&g| self.error(g.exp())).collect();
        let best = (0..WIDTH_GRID)
            .min_by(|&a, &b| values[a].total_cmp(&values[b]))
            .unwrap_or(0);
        let mut best_w = grid[best].exp();
        let mut best_e = values[best];
        let mut a = grid[best.saturating_sub(1)];
        let mut b = grid[(best + 1).min(WIDTH_GRID - 1)];
        let ratio = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - ratio * (b - a);
        let mut d = a + ratio * (b - a);
        let mut fc = self.error(c.exp());
        let mut fd = self.error(d.exp());
        for _ in 0..WIDTH_REFINE_STEPS {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - ratio * (b - a);
                fc = self.error(c.exp());
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + ratio * (b - a);
                fd = self.error(d.exp());
            }
        }
        for (g, e) in [(c, fc), (d, fd)] {
            if e < best_e {
                best_e = e;
                best_w = g.exp();
            }
        }
        (best_w, best_e)
    }
}

/// Greedy fit of `psi` with `psi(source_i) ~= target_i`.
pub fn fit(source: &DMatrix<f64>, target: &DMatrix<f64>, params: &FitParams) -> Result<DiffeoModel> {
    fit_labeled(source, target, params, "source", "target")
}

pub fn fit_labeled(
    source: &DMatrix<f64>,
    target: &DMatrix<f64>,
    params: &FitParams,
    source_label: &str,
    target_label: &str,
) -> Result<DiffeoModel> {
    params.validate()?;
    if source.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            expected: target.shape(),
            found: source.shape(),
        });
    }
    if source.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fit source".into()));
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fit target".into()));
    }
    let (n_points, n_dims) = source.shape();
    if n_points == 0 {
        return Err(Error::InvalidParameter("empty point sets".into()));
    }
    let diameter = eval::diameter(target);
    if diameter == 0.0 {
        return Err(Error::ZeroDiameter);
    }
    let normalizer = n_points as f64 * diameter * diameter;

    let goal = flatten_rows(target);
    let mut current = flatten_rows(source);
    let mut resid: Vec<f64> = goal.iter().zip(&current).map(|(g, c)| g - c).collect();
    let mut resid2: Vec<f64> = resid.chunks(n_dims).map(|r| r.iter().map(|x| x * x).sum()).collect();
    let mut error: f64 = resid2.iter().sum();

    let mut layers = Vec::new();
    let mut layer_mse = vec![error / normalizer];
    let sigma_cap = 2.0 * diameter;

    let mut center_dist2 = vec![0.0; n_points];
    let mut resid_dot_v = vec![0.0; n_points];

    while layers.len() < params.max_layers && error / normalizer > params.mse_stop {
        // lowest index wins ties
        let mut worst = 0;
        for i in 1..n_points {
            if resid2[i] > resid2[worst] {
                worst = i;
            }
        }
        if resid2[worst] == 0.0 {
            break;
        }
        let center: Vec<f64> = current[worst * n_dims..(worst + 1) * n_dims].to_vec();
        let residual: Vec<f64> = resid[worst * n_dims..(worst + 1) * n_dims].to_vec();
        let rnorm = resid2[worst].sqrt();
        for i in 0..n_points {
            center_dist2[i] = dist2(&current[i * n_dims..(i + 1) * n_dims], &center);
        }

        let mut step = params.beta;
        let mut accepted = None;
        for _ in 0..=MAX_STEP_HALVINGS {
            let mut translation: Vec<f64> = residual.iter().map(|r| step * r).collect();
            let width = match params.width {
                WidthPolicy::ResidualProportional { factor } => {
                    let width = factor * rnorm;
                    let limit = params.mu * width / KERNEL_MAX_SLOPE;
                    let tnorm = norm(&translation);
                    if tnorm > limit {
                        translation.iter_mut().for_each(|t| *t *= limit / tnorm);
                    }
                    width
                }
                WidthPolicy::LineSearch => {
                    let tnorm = norm(&translation);
                    // nudged up so the Lipschitz bound holds after rounding
                    let lo = tnorm * KERNEL_MAX_SLOPE / params.mu * (1.0 + 1e-12);
                    for i in 0..n_points {
                        resid_dot_v[i] = resid[i * n_dims..(i + 1) * n_dims]
                            .iter()
                            .zip(&translation)
                            .map(|(r, t)| r * t)
                            .sum();
                    }
                    let objective = LayerObjective {
                        center_dist2: &center_dist2,
                        resid2: &resid2,
                        resid_dot_v: &resid_dot_v,
                        vv: tnorm * tnorm,
                    };
                    objective.minimize(lo, sigma_cap.max(lo)).0
                }
            };
            let layer = DiffeoLayer::new(center.clone(), translation, width)
                .map_err(|_| Error::FitDiverged { layer: layers.len() })?;
            let mut moved = current.clone();
            let mut new_resid = resid.clone();
            let mut new_resid2 = vec![0.0; n_points];
            for i in 0..n_points {
                let p = &mut moved[i * n_dims..(i + 1) * n_dims];
                layer.apply_in_place(p);
                let r = &mut new_resid[i * n_dims..(i + 1) * n_dims];
                for j in 0..n_dims {
                    r[j] = goal[i * n_dims + j] - p[j];
                }
                new_resid2[i] = r.iter().map(|x| x * x).sum();
            }
            let new_error: f64 = new_resid2.iter().sum();
            if !new_error.is_finite() {
                return Err(Error::FitDiverged { layer: layers.len() });
            }
            if new_error < error {
                accepted = Some((layer, moved, new_resid, new_resid2, new_error));
                break;
            }
            step *= 0.5;
        }
        let Some((layer, moved, new_resid, new_resid2, new_error)) = accepted else {
            break;
        };
        layers.push(layer);
        current = moved;
        resid = new_resid;
        resid2 = new_resid2;
        error = new_error;
        layer_mse.push(error / normalizer);
    }

    let row = |m: &DMatrix<f64>, i: usize| -> Vec<f64> { m.row(i).iter().copied().collect() };
    Ok(DiffeoModel {
        version: MODEL_VERSION,
        mu: params.mu,
        beta: params.beta,
        normalized_mse: error / normalizer,
        layers,
        layer_mse,
        meta: ModelMeta {
            source: SetMeta {
                n_points,
                n_dims,
                provenance: source_label.to_string(),
            },
            target: SetMeta {
                n_points,
                n_dims,
                provenance: target_label.to_string(),
            },
            latent_start: row(source, 0),
            latent_attractor: row(source, n_points - 1),
        },
    })
}
