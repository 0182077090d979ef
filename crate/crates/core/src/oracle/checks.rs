use crate::error::Result;
use crate::netdef::{forward_to_boundary, NetworkDef, ParamSet};
use crate::oracle::{
    explicit_jacobian, finite_diff_stencil, taylor_sweep, Array64, OracleReport,
};
use crate::rng;
use crate::tangent::{head_jvp, jvp_forward, vjp_theta2, TangentParams};
use crate::tensor::Tensor;

fn sample(inputs: &Tensor, i: usize) -> Result<Tensor> {
    let k = i % inputs.dim(0);
    inputs.slice_rows(k, k + 1)
}

/// `trials` single-sample comparisons of [`jvp_forward`] against the 64-bit
/// central difference. Samples cycle through the rows of `inputs`; the
/// directions `w2` are standard normal. Error is `||jvp - fd|| / ||fd||`.
pub fn jvp_check(
    def: &NetworkDef,
    params: &ParamSet,
    inputs: &Tensor,
    trials: usize,
    eps: f64,
    seed: u64,
) -> Result<OracleReport> {
    let mut r = rng::stream(seed, "jvp_check");
    let mut errors = Vec::new();
    let mut excluded = Vec::new();
    for t in 0..trials {
        let x = sample(inputs, t)?;
        let w2 = TangentParams::randn(def, params, 1.0, &mut r)?;
        let st = finite_diff_stencil(def, params, &w2, &x, eps)?;
        if st.kink {
            excluded.push(format!(
                "trial {t}: ReLU/max-pool branch changes within the stencil (min |pre-activation| {:.3e})",
                st.min_abs_preact
            ));
            continue;
        }
        let z0 = forward_to_boundary(def, params, &x)?;
        let (_, jf) = jvp_forward(def, params, &w2, &z0)?;
        let diff: f64 = st
            .jvp
            .data
            .iter()
            .zip(jf.data())
            .map(|(a, &b)| (a - b as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let denom = st.jvp.norm();
        errors.push(if denom > 0.0 { diff / denom } else { diff });
    }
    Ok(OracleReport::from_errors(
        "jvp_vs_central_difference",
        "relative",
        1e-3,
        &errors,
        excluded,
    ))
}

/// Compares `omega^T J w2` and `J^T u` built from the materialized Jacobian
/// with [`head_jvp`] and [`vjp_theta2`] on the batch `x`. Absolute errors.
pub fn explicit_check(
    def: &NetworkDef,
    params: &ParamSet,
    omega: &Tensor,
    x: &Tensor,
    seed: u64,
) -> Result<Vec<OracleReport>> {
    let mut r = rng::stream(seed, "explicit_check");
    let jac = explicit_jacobian(def, params, x, super::DEFAULT_EPS)?;
    let reasons = |what: &str| -> Vec<String> {
        if jac.kinked_columns > 0 {
            vec![format!(
                "{what}: {} Jacobian columns crossed a kink",
                jac.kinked_columns
            )]
        } else {
            Vec::new()
        }
    };
    let z0 = forward_to_boundary(def, params, x)?;

    let w2 = TangentParams::randn(def, params, 1.0, &mut r)?;
    let wv: Vec<f64> = w2.to_vec().iter().map(|&v| v as f64).collect();
    let jw = jac.apply(&wv)?;
    let head_ref = super::reference::matmul64(&jw, &Array64::from_tensor(omega))?;
    let (_, jf) = jvp_forward(def, params, &w2, &z0)?;
    let head = head_jvp(omega, &jf)?;
    let e_head = head_ref.max_abs_diff(&head)?;
    let e_jvp = jw.max_abs_diff(&jf)?;

    let u = Tensor::randn(&[x.dim(0), def.feature_dim()?], &mut r);
    let jtu = jac.apply_transpose(&Array64::from_tensor(&u))?;
    let vjp = vjp_theta2(def, params, &z0, &u)?.to_vec();
    let e_vjp = jtu
        .iter()
        .zip(&vjp)
        .map(|(a, &b)| (a - b as f64).abs())
        .fold(0.0, f64::max);

    let clean = jac.kinked_columns == 0;
    let pick = |e: f64| if clean { vec![e] } else { Vec::new() };
    Ok(vec![
        OracleReport::from_errors("explicit_jw_vs_jvp", "absolute", 1e-5, &pick(e_jvp), reasons("J w2")),
        OracleReport::from_errors(
            "explicit_head_vs_head_jvp",
            "absolute",
            1e-5,
            &pick(e_head),
            reasons("omega^T J w2"),
        ),
        OracleReport::from_errors("explicit_jtu_vs_vjp", "absolute", 1e-5, &pick(e_vjp), reasons("J^T u")),
    ])
}

/// `<u, J w2>` against `<J^T u, w2>` over random single samples.
pub fn adjoint_check(
    def: &NetworkDef,
    params: &ParamSet,
    inputs: &Tensor,
    trials: usize,
    seed: u64,
) -> Result<OracleReport> {
    let mut r = rng::stream(seed, "adjoint_check");
    let d = def.feature_dim()?;
    let mut errors = Vec::with_capacity(trials);
    for t in 0..trials {
        let x = sample(inputs, t)?;
        let z0 = forward_to_boundary(def, params, &x)?;
        let w2 = TangentParams::randn(def, params, 1.0, &mut r)?;
        let u = Tensor::randn(&[1, d], &mut r);
        let (_, jf) = jvp_forward(def, params, &w2, &z0)?;
        let lhs = u.dot(&jf)?;
        let rhs = vjp_theta2(def, params, &z0, &u)?.dot(&w2)?;
        errors.push((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE));
    }
    Ok(OracleReport::from_errors("jvp_vjp_adjoint", "relative", 1e-4, &errors, Vec::new()))
}

/// Outcome of a Taylor scaling study.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TaylorStudy {
    pub report: OracleReport,
    /// `residual(s_i) / residual(s_{i+1})` per kink-free sample.
    pub ratios: Vec<Vec<f64>>,
    /// Mean residual per step across kink-free samples.
    pub mean_residuals: Vec<f64>,
    pub samples_tried: usize,
}

/// Sweeps `steps` (each the previous one halved) for random directions at
/// rows of `inputs`, keeping the first `wanted` samples whose branch pattern
/// is unchanged along the whole sweep. Passes when every successive
/// residual ratio lies in `[3, 5]`.
pub fn taylor_check(
    def: &NetworkDef,
    params: &ParamSet,
    omega: &Tensor,
    inputs: &Tensor,
    steps: &[f64],
    wanted: usize,
    seed: u64,
) -> Result<TaylorStudy> {
    let mut r = rng::stream(seed, "taylor_check");
    let mut ratios = Vec::new();
    let mut excluded = Vec::new();
    let mut sums = vec![0.0; steps.len()];
    let mut errors = Vec::new();
    let mut tried = 0;
    for i in 0..inputs.dim(0) {
        if ratios.len() == wanted {
            break;
        }
        tried += 1;
        let x = sample(inputs, i)?;
        let dir = TangentParams::randn(def, params, 1.0, &mut r)?;
        let odir = Tensor::randn(omega.shape(), &mut r);
        let pts = taylor_sweep(def, params, omega, &dir, &odir, &x, steps)?;
        if pts.iter().any(|p| !p.kink_free) {
            excluded.push(format!("sample {i}: branch pattern changes along the sweep"));
            continue;
        }
        let rs: Vec<f64> = pts.windows(2).map(|w| w[0].residual / w[1].residual).collect();
        errors.extend(rs.iter().map(|q| (q - 4.0).abs()));
        for (s, p) in sums.iter_mut().zip(&pts) {
            *s += p.residual;
        }
        ratios.push(rs);
    }
    let kept = ratios.len().max(1) as f64;
    let mut report = OracleReport::from_errors("taylor_residual_scaling", "absolute", 1.0, &errors, excluded);
    report.pass = report.pass || (errors.iter().all(|e| *e <= 1.0) && !errors.is_empty());
    report.pass &= ratios.len() == wanted;
    Ok(TaylorStudy {
        report,
        ratios,
        mean_residuals: sums.iter().map(|s| s / kept).collect(),
        samples_tried: tried,
    })
}
