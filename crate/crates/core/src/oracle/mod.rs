//! Brute-force 64-bit references for the tangent machinery: central
//! differences, explicit Jacobians and Taylor residuals. Everything here
//! runs on the naive-loop network in [`reference`] and never calls
//! [`crate::ops`] or [`crate::tangent`] internals.

mod checks;
pub mod reference;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::netdef::{NetworkDef, ParamSet};
use crate::tangent::TangentParams;
use crate::tensor::Tensor;

pub use checks::{adjoint_check, explicit_check, jvp_check, taylor_check};
pub use reference::{Array, Array64, Dual, Pattern};

use reference::{lift_dual, lift_shifted, matmul64, reference_features};

/// Largest theta2 the explicit Jacobian will materialize.
pub const JACOBIAN_LIMIT: usize = 10_000;

/// Pre-activations closer to zero than this count as sitting on a kink.
pub const KINK_THRESHOLD: f64 = 1e-6;

pub const DEFAULT_EPS: f64 = 1e-4;

/// Outcome of one central difference.
#[derive(Debug, Clone)]
pub struct Stencil {
    pub jvp: Array64,
    /// The three evaluation points do not share ReLU signs / max-pool
    /// winners, or a theta2 pre-activation is within [`KINK_THRESHOLD`].
    pub kink: bool,
    pub min_abs_preact: f64,
}

/// `(f(theta2 + eps w2) - f(theta2 - eps w2)) / (2 eps)`, `[N, d]`, in 64-bit.
pub fn finite_diff_jvp(
    def: &NetworkDef,
    params: &ParamSet,
    w2: &TangentParams,
    x: &Tensor,
    eps: f64,
) -> Result<Array64> {
    Ok(finite_diff_stencil(def, params, w2, x, eps)?.jvp)
}

pub fn finite_diff_stencil(
    def: &NetworkDef,
    params: &ParamSet,
    w2: &TangentParams,
    x: &Tensor,
    eps: f64,
) -> Result<Stencil> {
    if !(eps > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be positive, got {eps}")));
    }
    w2.check(def, params)?;
    let (fp, pp) = reference_features(def, &lift_shifted(params, Some(w2), eps)?, x)?;
    let (fm, pm) = reference_features(def, &lift_shifted(params, Some(w2), -eps)?, x)?;
    let (_, p0) = reference_features(def, &lift_shifted(params, None, 0.0)?, x)?;
    let jvp = Array {
        shape: fp.shape.clone(),
        data: fp
            .data
            .iter()
            .zip(&fm.data)
            .map(|(a, b)| (a - b) / (2.0 * eps))
            .collect(),
    };
    let kink = !p0.same_branches(&pp) || !p0.same_branches(&pm) || p0.min_abs_preact < KINK_THRESHOLD;
    Ok(Stencil {
        jvp,
        kink,
        min_abs_preact: p0.min_abs_preact,
    })
}

/// Exact `J_theta2(x) w2` by dual-number evaluation of the reference net.
pub fn dual_jvp(
    def: &NetworkDef,
    params: &ParamSet,
    w2: &TangentParams,
    x: &Tensor,
) -> Result<(Array64, Array64)> {
    w2.check(def, params)?;
    let (f, _) = reference_features(def, &lift_dual(params, w2)?, x)?;
    let primal = Array {
        shape: f.shape.clone(),
        data: f.data.iter().map(|v| v.v).collect(),
    };
    let tangent = Array {
        shape: f.shape,
        data: f.data.iter().map(|v| v.d).collect(),
    };
    Ok((primal, tangent))
}

/// Materialized per-sample Jacobians.
#[derive(Debug, Clone)]
pub struct Jacobian {
    /// `[N, d, P]` with `P = |theta2|`, columns ordered as
    /// [`TangentParams::to_vec`].
    pub values: Array64,
    /// Columns whose stencil crossed a kink.
    pub kinked_columns: usize,
}

impl Jacobian {
    fn dims(&self) -> (usize, usize, usize) {
        (self.values.shape[0], self.values.shape[1], self.values.shape[2])
    }

    /// `J w` per sample, `[N, d]`.
    pub fn apply(&self, w: &[f64]) -> Result<Array64> {
        let (n, d, p) = self.dims();
        if w.len() != p {
            return dim_err(format!("vector of length {} for {p} Jacobian columns", w.len()));
        }
        let mut out = Array64::zeros(&[n, d]);
        for (row, o) in self.values.data.chunks(p).zip(out.data.iter_mut()) {
            *o = row.iter().zip(w).map(|(a, b)| a * b).sum();
        }
        Ok(out)
    }

    /// `sum_n J_n^T u_n`, length `P`.
    pub fn apply_transpose(&self, u: &Array64) -> Result<Vec<f64>> {
        let (n, d, p) = self.dims();
        if u.shape != [n, d] {
            return dim_err(format!("cotangent {:?} for Jacobian [{n}, {d}, {p}]", u.shape));
        }
        let mut out = vec![0.0; p];
        for (row, &ui) in self.values.data.chunks(p).zip(&u.data) {
            for (o, &j) in out.iter_mut().zip(row) {
                *o += j * ui;
            }
        }
        Ok(out)
    }
}

/// Column `j` is the central difference of `f` along the `j`-th theta2
/// coordinate.
pub fn explicit_jacobian(
    def: &NetworkDef,
    params: &ParamSet,
    x: &Tensor,
    eps: f64,
) -> Result<Jacobian> {
    let template = TangentParams::zeros(def, params)?;
    let p = template.numel();
    if p > JACOBIAN_LIMIT {
        return Err(Error::Limit(format!(
            "explicit Jacobian needs |theta2| <= {JACOBIAN_LIMIT}, got {p}"
        )));
    }
    let d = def.feature_dim()?;
    let n = x.dim(0);
    let mut values = Array64::zeros(&[n, d, p]);
    let mut kinked_columns = 0;
    let mut onehot = vec![0.0f32; p];
    for j in 0..p {
        onehot[j] = 1.0;
        let dir = template.with_values(&onehot)?;
        onehot[j] = 0.0;
        let st = finite_diff_stencil(def, params, &dir, x, eps)?;
        if st.kink {
            kinked_columns += 1;
        }
        for (row, &v) in st.jvp.data.iter().enumerate() {
            values.data[row * p + j] = v;
        }
    }
    Ok(Jacobian {
        values,
        kinked_columns,
    })
}

/// One point of a Taylor-residual measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaylorPoint {
    /// `||Delta|| / ||theta2||`.
    pub relative_step: f64,
    /// `||F(theta2 + Delta, omega + Omega) - g(omega + Omega, Delta)||`.
    pub residual: f64,
    /// `||g(omega + Omega, Delta) - F(theta2, omega)||`.
    pub linear: f64,
    /// Branch pattern at `theta2 + Delta` equals the one at `theta2`.
    pub kink_free: bool,
}

fn logits64(f: &Array64, w: &Array64) -> Result<Array64> {
    matmul64(f, w)
}

fn add64(a: &Array64, b: &Array64) -> Array64 {
    Array {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

/// Residual of the first-order model around `(theta2, omega)`:
/// `F = (omega + Omega)^T f(theta2 + Delta)` against
/// `g = (omega + Omega)^T f(theta2) + omega^T J Delta`.
pub fn taylor_residual(
    def: &NetworkDef,
    params: &ParamSet,
    omega: &Tensor,
    delta: &TangentParams,
    big_omega: &Tensor,
    x: &Tensor,
) -> Result<(f64, f64)> {
    let p = taylor_point(def, params, omega, delta, big_omega, x)?;
    Ok((p.residual, p.linear))
}

pub fn taylor_point(
    def: &NetworkDef,
    params: &ParamSet,
    omega: &Tensor,
    delta: &TangentParams,
    big_omega: &Tensor,
    x: &Tensor,
) -> Result<TaylorPoint> {
    delta.check(def, params)?;
    if omega.shape() != big_omega.shape() {
        return dim_err(format!(
            "Omega {:?} must be shaped like omega {:?}",
            big_omega.shape(),
            omega.shape()
        ));
    }
    let om = Array64::from_tensor(omega);
    let om_shift = add64(&om, &Array64::from_tensor(big_omega));
    let (f0, p0) = reference_features(def, &lift_shifted(params, None, 0.0)?, x)?;
    let (fd, pd) = reference_features(def, &lift_shifted(params, Some(delta), 1.0)?, x)?;
    let (_, jd) = dual_jvp(def, params, delta, x)?;
    let full = logits64(&fd, &om_shift)?;
    let base = logits64(&f0, &om)?;
    let approx = add64(&logits64(&f0, &om_shift)?, &logits64(&jd, &om)?);
    let theta2_norm = theta2_norm(def, params)?;
    Ok(TaylorPoint {
        relative_step: if theta2_norm > 0.0 { delta.norm() / theta2_norm } else { 0.0 },
        residual: full.sub(&approx).norm(),
        linear: approx.sub(&base).norm(),
        kink_free: p0.same_branches(&pd),
    })
}

/// `||theta2||` over weights and biases.
pub fn theta2_norm(def: &NetworkDef, params: &ParamSet) -> Result<f64> {
    let mut s = 0.0;
    for name in def.theta2_names() {
        let p = params.get(name)?;
        s += p.weight.norm().powi(2);
        if let Some(b) = &p.bias {
            s += b.norm().powi(2);
        }
    }
    Ok(s.sqrt())
}

/// Evaluates [`taylor_point`] at `Delta = s ||theta2|| dir / ||dir||` and
/// `Omega = s ||omega|| omega_dir / ||omega_dir||` for each `s`.
pub fn taylor_sweep(
    def: &NetworkDef,
    params: &ParamSet,
    omega: &Tensor,
    dir: &TangentParams,
    omega_dir: &Tensor,
    x: &Tensor,
    steps: &[f64],
) -> Result<Vec<TaylorPoint>> {
    let dn = dir.norm();
    let on = omega_dir.norm();
    if dn == 0.0 {
        return Err(Error::Input("sweep direction must be nonzero".into()));
    }
    let t2 = theta2_norm(def, params)?;
    let o2 = omega.norm();
    steps
        .iter()
        .map(|&s| {
            let delta = dir.scale((s * t2 / dn) as f32);
            let big = if on > 0.0 {
                omega_dir.scale((s * o2 / on) as f32)
            } else {
                Tensor::zeros(omega.shape())
            };
            taylor_point(def, params, omega, &delta, &big, x)
        })
        .collect()
}

/// Mean softmax cross-entropy of `f(x) W + b` in 64-bit.
pub fn reference_loss(
    def: &NetworkDef,
    params: &ParamSet,
    shift: Option<(&TangentParams, f64)>,
    head_w: &Array64,
    head_b: &[f64],
    x: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let net = match shift {
        Some((dir, t)) => lift_shifted(params, Some(dir), t)?,
        None => lift_shifted(params, None, 0.0)?,
    };
    let (f, _) = reference_features(def, &net, x)?;
    let logits = matmul64(&f, head_w)?;
    let c = head_w.shape[1];
    if head_b.len() != c || labels.len() != logits.shape[0] {
        return dim_err("reference loss shape mismatch");
    }
    let mut total = 0.0;
    for (row, &y) in logits.data.chunks(c).zip(labels) {
        if y >= c {
            return Err(Error::Input(format!("label {y} out of range for {c} classes")));
        }
        let z: Vec<f64> = row.iter().zip(head_b).map(|(a, b)| a + b).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y];
    }
    Ok(total / labels.len() as f64)
}

/// Central-difference gradient of [`reference_loss`] with respect to
/// theta2 (ordered as [`TangentParams::to_vec`]), the head weight and the
/// head bias.
#[allow(clippy::type_complexity)]
pub fn fd_loss_gradient(
    def: &NetworkDef,
    params: &ParamSet,
    head_w: &Array64,
    head_b: &[f64],
    x: &Tensor,
    labels: &[usize],
    eps: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let template = TangentParams::zeros(def, params)?;
    let p = template.numel();
    if p > JACOBIAN_LIMIT {
        return Err(Error::Limit(format!(
            "finite-difference gradient needs |theta2| <= {JACOBIAN_LIMIT}, got {p}"
        )));
    }
    let mut g_theta = Vec::with_capacity(p);
    let mut onehot = vec![0.0f32; p];
    for j in 0..p {
        onehot[j] = 1.0;
        let dir = template.with_values(&onehot)?;
        onehot[j] = 0.0;
        let lp = reference_loss(def, params, Some((&dir, eps)), head_w, head_b, x, labels)?;
        let lm = reference_loss(def, params, Some((&dir, -eps)), head_w, head_b, x, labels)?;
        g_theta.push((lp - lm) / (2.0 * eps));
    }
    let mut g_w = Vec::with_capacity(head_w.data.len());
    for j in 0..head_w.data.len() {
        let mut wp = head_w.clone();
        wp.data[j] += eps;
        let mut wm = head_w.clone();
        wm.data[j] -= eps;
        let lp = reference_loss(def, params, None, &wp, head_b, x, labels)?;
        let lm = reference_loss(def, params, None, &wm, head_b, x, labels)?;
        g_w.push((lp - lm) / (2.0 * eps));
    }
    let mut g_b = Vec::with_capacity(head_b.len());
    for j in 0..head_b.len() {
        let mut bp = head_b.to_vec();
        bp[j] += eps;
        let mut bm = head_b.to_vec();
        bm[j] -= eps;
        let lp = reference_loss(def, params, None, head_w, &bp, x, labels)?;
        let lm = reference_loss(def, params, None, head_w, &bm, x, labels)?;
        g_b.push((lp - lm) / (2.0 * eps));
    }
    Ok((g_theta, g_w, g_b))
}

/// Summary of a batch of oracle trials.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub trials: usize,
    pub excluded: usize,
    pub exclusion_reasons: Vec<String>,
    pub max_error: f64,
    pub mean_error: f64,
    pub tolerance: f64,
    /// `"relative"` or `"absolute"`.
    pub error_kind: String,
    pub pass: bool,
}

impl OracleReport {
    pub fn from_errors(
        name: &str,
        error_kind: &str,
        tolerance: f64,
        errors: &[f64],
        exclusion_reasons: Vec<String>,
    ) -> Self {
        let max_error = errors.iter().cloned().fold(0.0, f64::max);
        let mean_error = if errors.is_empty() {
            0.0
        } else {
            errors.iter().sum::<f64>() / errors.len() as f64
        };
        let finite = errors.iter().all(|e| e.is_finite());
        Self {
            name: name.to_string(),
            trials: errors.len() + exclusion_reasons.len(),
            excluded: exclusion_reasons.len(),
            exclusion_reasons,
            max_error,
            mean_error,
            tolerance,
            error_kind: error_kind.to_string(),
            pass: finite && !errors.is_empty() && max_error < tolerance,
        }
    }
}
