//! Control laws: centralized fixed-time flows, the distributed estimator,
//! the consensus input and the analytic settling-time bounds.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathkit::{fxts_settling_bound, norm, sign_mu_factor, FxtsExponentPair};
use crate::objective::LocalObjective;

/// Condition number above which the Newton system is regularized.
pub const ILL_CONDITIONED: f64 = 1e12;
/// Tikhonov shift applied to an ill-conditioned Newton system.
pub const TIKHONOV_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mode {
    /// Newton-like law using estimated gradient and Hessian sums.
    SecondOrderStrict,
    /// Gradient-only law for a team objective with strong convexity modulus `k`.
    FirstOrderStrong { k: f64 },
    /// Gradient-only law for a team objective with PL constant `mu`.
    FirstOrderPl { mu: f64 },
}

impl Mode {
    pub fn is_second_order(&self) -> bool {
        matches!(self, Mode::SecondOrderStrict)
    }

    /// Length of the estimator vector for decision dimension `d`.
    pub fn estimator_dim(&self, d: usize) -> usize {
        if self.is_second_order() {
            d * d + d
        } else {
            d
        }
    }
}

/// Radius below which the unit-direction term of the consensus laws is
/// switched off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Deadzone {
    Fixed(f64),
    /// `gain * dt * (max_degree + 1)`, the largest displacement one Euler
    /// step of the unit-direction term can produce.
    StepScaled,
}

impl Default for Deadzone {
    fn default() -> Self {
        Deadzone::Fixed(crate::mathkit::DEFAULT_SIGN0_DEADZONE)
    }
}

/// How the simulator obtains the rate of change of the local `zeta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZetaRate {
    /// Exact tangent `(d zeta/dx) xdot` from the derivative oracles.
    Analytic,
    /// `(zeta(t_k) - zeta(t_{k-1})) / dt`.
    BackwardDifference,
    /// `(zeta(x + dt xdot) - zeta(x)) / dt`, the increment the Euler step
    /// actually realizes.
    #[default]
    Secant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolParams {
    pub mode: Mode,
    pub p: f64,
    pub q: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub l1: f64,
    pub l2: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub nu1: f64,
    pub nu2: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub deadzone: Deadzone,
    #[serde(default)]
    pub zeta_rate: ZetaRate,
}

impl ProtocolParams {
    /// Every gain equal to `gain` and every exponent pair equal to
    /// `(high, low)`.
    pub fn uniform(mode: Mode, gain: f64, high: f64, low: f64) -> Self {
        Self {
            mode,
            p: gain,
            q: gain,
            alpha: gain,
            beta: gain,
            gamma: gain,
            delta: gain,
            l1: high,
            l2: low,
            mu1: high,
            mu2: low,
            nu1: high,
            nu2: low,
            rho: 0.0,
            deadzone: Deadzone::default(),
            zeta_rate: ZetaRate::default(),
        }
    }

    /// All violated parameter constraints, each prefixed with its class.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [("l1", self.l1), ("mu1", self.mu1), ("nu1", self.nu1)] {
            if !(v > 1.0) || !v.is_finite() {
                out.push(format!("exponent range: {name} = {v} must exceed 1"));
            }
        }
        for (name, v) in [("l2", self.l2), ("mu2", self.mu2), ("nu2", self.nu2)] {
            if !(v > 0.0 && v < 1.0) {
                out.push(format!("exponent range: {name} = {v} must lie in (0, 1)"));
            }
        }
        let gains = [
            ("p", self.p),
            ("q", self.q),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ];
        for (name, v) in gains {
            if !(v > 0.0) || !v.is_finite() {
                out.push(format!("gain: {name} = {v} must be positive"));
            }
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            out.push(format!("gain: rho = {} must be non-negative", self.rho));
        }
        match self.mode {
            Mode::FirstOrderStrong { k } if !(k > 0.0) || !k.is_finite() => {
                out.push(format!("mode: strong convexity modulus k = {k} must be positive"))
            }
            Mode::FirstOrderPl { mu } if !(mu > 0.0) || !mu.is_finite() => {
                out.push(format!("mode: PL constant mu = {mu} must be positive"))
            }
            _ => {}
        }
        match self.deadzone {
            Deadzone::Fixed(r) if !(r >= 0.0) || !r.is_finite() => {
                out.push(format!("deadzone: radius {r} must be non-negative"))
            }
            _ => {}
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(v))
        }
    }

    /// Resolved deadzone radius for a consensus law with gain `gain`.
    pub fn deadzone_radius(&self, gain: f64, dt: f64, max_degree: usize) -> f64 {
        match self.deadzone {
            Deadzone::Fixed(r) => r,
            Deadzone::StepScaled => gain * dt * (max_degree as f64 + 1.0),
        }
    }
}

/// Outcome of one Newton-system solve.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveInfo {
    pub condition: f64,
    pub regularized: bool,
}

fn newton_rhs(grad_sum: &[f64], l1: f64, l2: f64) -> Vec<f64> {
    let n = norm(grad_sum);
    let f = 1.0 + sign_mu_factor(n, l1) + sign_mu_factor(n, l2);
    grad_sum.iter().map(|g| g * f).collect()
}

fn condition_number(h: &DMatrix<f64>) -> f64 {
    if h.nrows() == 1 {
        return if h[(0, 0)] == 0.0 { f64::INFINITY } else { 1.0 };
    }
    let sv = h.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

fn is_symmetric(h: &DMatrix<f64>) -> bool {
    let scale = h.amax().max(1e-300);
    (h - h.transpose()).amax() <= 1e-10 * scale
}

/// Solves `h y = rhs`: Cholesky when symmetric positive definite, else LU,
/// else SVD least squares. Ill-conditioned systems get a Tikhonov shift.
pub fn solve_newton_system(h: &DMatrix<f64>, rhs: &[f64]) -> Result<(Vec<f64>, SolveInfo)> {
    let d = rhs.len();
    if h.nrows() != d || h.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, found: h.nrows() });
    }
    if h.iter().any(|v| !v.is_finite()) || rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("newton system"));
    }
    let condition = condition_number(h);
    let regularized = condition > ILL_CONDITIONED;
    if regularized {
        log::debug!("newton system condition {condition:e} exceeds {ILL_CONDITIONED:e}; shifting by {TIKHONOV_EPS:e}");
    }
    if d == 1 {
        let a = if regularized { h[(0, 0)] + TIKHONOV_EPS } else { h[(0, 0)] };
        return Ok((vec![rhs[0] / a], SolveInfo { condition, regularized }));
    }
    let m = if regularized { h + DMatrix::identity(d, d) * TIKHONOV_EPS } else { h.clone() };
    let b = DVector::from_column_slice(rhs);
    let y = if is_symmetric(&m) {
        m.clone().cholesky().map(|c| c.solve(&b))
    } else {
        None
    };
    let y = match y {
        Some(y) => y,
        None => match m.clone().lu().solve(&b) {
            Some(y) => y,
            None => m
                .svd(true, true)
                .solve(&b, 1e-15)
                .map_err(|e| Error::Domain(e.to_string()))?,
        },
    };
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("newton step"));
    }
    Ok((y.as_slice().to_vec(), SolveInfo { condition, regularized }))
}

/// `-H^{-1} (G + sign^{l1}(G) + sign^{l2}(G))`.
pub fn g_star_strict(grad_sum: &[f64], hess_sum: &DMatrix<f64>, l1: f64, l2: f64) -> Result<(Vec<f64>, SolveInfo)> {
    let rhs = newton_rhs(grad_sum, l1, l2);
    if rhs.iter().all(|v| *v == 0.0) {
        return Ok((vec![0.0; rhs.len()], SolveInfo { condition: condition_number(hess_sum), regularized: false }));
    }
    let (y, info) = solve_newton_system(hess_sum, &rhs)?;
    Ok((y.into_iter().map(|v| -v).collect(), info))
}

/// `-(G + sign^{l1}(G) + sign^{l2}(G))`.
pub fn g_bar_strong(grad_sum: &[f64], l1: f64, l2: f64) -> Vec<f64> {
    newton_rhs(grad_sum, l1, l2).into_iter().map(|v| -v).collect()
}

/// Agent-local estimate of the centralized law from its estimator state.
///
/// In second-order mode `theta = [t0; t1; ..; td]` and the matrix passed to
/// the solve has `t_l` as its l-th row. Both parts are scaled by `n_agents`.
pub fn g_i_from_theta(theta: &[f64], d: usize, n_agents: usize, params: &ProtocolParams) -> Result<(Vec<f64>, SolveInfo)> {
    let mut out = vec![0.0; d];
    let info = g_i_into(theta, d, n_agents, params, &mut out)?;
    Ok((out, info))
}

/// [`g_i_from_theta`] writing into `out`; scalar and first-order cases do
/// not allocate.
pub fn g_i_into(theta: &[f64], d: usize, n_agents: usize, params: &ProtocolParams, out: &mut [f64]) -> Result<SolveInfo> {
    let want = params.mode.estimator_dim(d);
    if theta.len() != want {
        return Err(Error::DimensionMismatch { expected: want, found: theta.len() });
    }
    if out.len() != d {
        return Err(Error::DimensionMismatch { expected: d, found: out.len() });
    }
    let n = n_agents as f64;
    let gn = n * norm(&theta[..d]);
    let f = -n * (1.0 + sign_mu_factor(gn, params.l1) + sign_mu_factor(gn, params.l2));
    if !params.mode.is_second_order() {
        for (o, t) in out.iter_mut().zip(&theta[..d]) {
            *o = f * t;
        }
        return Ok(SolveInfo::default());
    }
    if d == 1 {
        let h = n * theta[1];
        let condition = if h == 0.0 { f64::INFINITY } else { 1.0 };
        let regularized = condition > ILL_CONDITIONED;
        if gn == 0.0 {
            out[0] = 0.0;
            return Ok(SolveInfo { condition, regularized: false });
        }
        let h = if regularized { h + TIKHONOV_EPS } else { h };
        out[0] = f * theta[0] / h;
        if !out[0].is_finite() {
            return Err(Error::NonFinite("newton step"));
        }
        return Ok(SolveInfo { condition, regularized });
    }
    let grad: Vec<f64> = theta[..d].iter().map(|v| v * n).collect();
    let h = DMatrix::from_fn(d, d, |r, c| n * theta[d * (r + 1) + c]);
    let (g, info) = g_star_strict(&grad, &h, params.l1, params.l2)?;
    out.copy_from_slice(&g);
    Ok(info)
}

/// Adds `gain * sum_j [sign0 + k1 sign^{e1} + k2 sign^{e2}](s_j - s_i)` to `out`.
#[allow(clippy::too_many_arguments)]
pub fn consensus_accumulate<'a>(
    out: &mut [f64],
    own: &[f64],
    neighbors: impl IntoIterator<Item = &'a [f64]>,
    gain: f64,
    k1: f64,
    e1: f64,
    k2: f64,
    e2: f64,
    deadzone: f64,
) {
    for other in neighbors {
        let n = own.iter().zip(other).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
        if n == 0.0 {
            continue;
        }
        let unit = if n >= deadzone { 1.0 / n } else { 0.0 };
        let f = gain * (unit + k1 * sign_mu_factor(n, e1) + k2 * sign_mu_factor(n, e2));
        for ((o, a), b) in out.iter_mut().zip(own).zip(other) {
            *o += f * (b - a);
        }
    }
}

/// Estimator consensus input.
pub fn omega(theta_self: &[f64], theta_neighbors: &[&[f64]], params: &ProtocolParams, deadzone: f64) -> Vec<f64> {
    let mut out = vec![0.0; theta_self.len()];
    consensus_accumulate(
        &mut out,
        theta_self,
        theta_neighbors.iter().copied(),
        params.p,
        params.gamma,
        params.nu1,
        params.delta,
        params.nu2,
        deadzone,
    );
    out
}

/// Decision-variable consensus input.
pub fn u_tilde(x_self: &[f64], x_neighbors: &[&[f64]], params: &ProtocolParams, deadzone: f64) -> Vec<f64> {
    let mut out = vec![0.0; x_self.len()];
    consensus_accumulate(
        &mut out,
        x_self,
        x_neighbors.iter().copied(),
        params.q,
        params.alpha,
        params.mu1,
        params.beta,
        params.mu2,
        deadzone,
    );
    out
}

/// `u_i = u_tilde_i + g_i`.
pub fn control(
    x_self: &[f64],
    x_neighbors: &[&[f64]],
    theta_self: &[f64],
    n_agents: usize,
    params: &ProtocolParams,
    deadzone: f64,
) -> Result<(Vec<f64>, SolveInfo)> {
    let mut u = u_tilde(x_self, x_neighbors, params, deadzone);
    let (g, info) = g_i_from_theta(theta_self, x_self.len(), n_agents, params)?;
    for (ui, gi) in u.iter_mut().zip(&g) {
        *ui += gi;
    }
    Ok((u, info))
}

/// Quantity the estimator averages: `zeta` in second-order mode, the
/// gradient otherwise.
pub fn local_zeta(f: &LocalObjective, x: &[f64], mode: Mode) -> Result<Vec<f64>> {
    if mode.is_second_order() {
        Ok(f.zeta(x)?.into_inner())
    } else {
        Ok(f.gradient(x)?.into_inner())
    }
}

pub fn local_zeta_into(f: &LocalObjective, x: &[f64], mode: Mode, out: &mut [f64]) -> Result<()> {
    if mode.is_second_order() {
        f.zeta_into(x, out)
    } else {
        f.gradient_into(x, out)
    }
}

/// Time derivative of the local estimator target along `xdot`.
///
/// Uses the analytic oracle when the objective exposes it, otherwise the
/// backward difference against `prev = (zeta(t_{k-1}), dt)`. Without either
/// the result is zero.
pub fn h_i(f: &LocalObjective, x: &[f64], xdot: &[f64], mode: Mode, prev: Option<(&[f64], f64)>) -> Result<Vec<f64>> {
    let caps = f.capabilities();
    if mode.is_second_order() {
        if caps.has_zeta_jacobian {
            return Ok(f.zeta_jacobian_action(x, xdot)?.into_inner());
        }
    } else if caps.has_hessian {
        let hv = f.hessian(x)? * DVector::from_column_slice(xdot);
        return Ok(hv.as_slice().to_vec());
    }
    match prev {
        Some((z_prev, dt)) => {
            let z = local_zeta(f, x, mode)?;
            if z_prev.len() != z.len() {
                return Err(Error::DimensionMismatch { expected: z.len(), found: z_prev.len() });
            }
            Ok(z.iter().zip(z_prev).map(|(a, b)| (a - b) / dt).collect())
        }
        None => {
            log::info!("no zeta history for the backward difference; using h = 0");
            Ok(vec![0.0; mode.estimator_dim(x.len())])
        }
    }
}

/// `(zeta(x + dt xdot) - zeta(x)) / dt` together with `zeta(x + dt xdot)`.
pub fn h_i_secant(f: &LocalObjective, x: &[f64], xdot: &[f64], dt: f64, mode: Mode) -> Result<(Vec<f64>, Vec<f64>)> {
    let z0 = local_zeta(f, x, mode)?;
    let xn: Vec<f64> = x.iter().zip(xdot).map(|(a, b)| a + dt * b).collect();
    let z1 = local_zeta(f, &xn, mode)?;
    let h = z1.iter().zip(&z0).map(|(a, b)| (a - b) / dt).collect();
    Ok((h, z1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SettlingBounds {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub total: f64,
}

fn consensus_time(gain: f64, k_hi: f64, k_lo: f64, e_hi: f64, e_lo: f64, n: f64, c: f64) -> f64 {
    let kappa1 = (1.0 + e_hi) / 2.0;
    let kappa2 = (1.0 + e_lo) / 2.0;
    2.0 / (gain * k_hi * n.powf(2.0 * (1.0 - kappa1)) * c.powf(kappa1) * (kappa1 - 1.0))
        + 2.0 / (gain * k_lo * c.powf(kappa2) * (1.0 - kappa2))
}

/// Estimation time `T1`, consensus time `T2` and optimization time `T3`.
pub fn settling_bounds(params: &ProtocolParams, n_agents: usize, lambda2_star: f64) -> Result<SettlingBounds> {
    if !(lambda2_star > 0.0) || !lambda2_star.is_finite() {
        return Err(Error::Parameter(format!("lambda2* must be positive, got {lambda2_star}")));
    }
    params.validate()?;
    let n = n_agents as f64;
    let c = 4.0 * lambda2_star;
    let t1 = consensus_time(params.p, params.gamma, params.delta, params.nu1, params.nu2, n, c);
    let t2 = consensus_time(params.q, params.alpha, params.beta, params.mu1, params.mu2, n, c);
    let e_lo = (1.0 + params.l2) / 2.0;
    let e_hi = (1.0 + params.l1) / 2.0;
    let (a, b) = match params.mode {
        Mode::SecondOrderStrict => (2f64.powf(e_lo), 2f64.powf(e_hi)),
        Mode::FirstOrderStrong { k } => (2f64.powf(e_lo) * k, 2f64.powf(e_hi) * k),
        Mode::FirstOrderPl { mu } => ((2.0 * mu).powf(e_lo) * 2f64.powf(e_lo), (2.0 * mu).powf(e_hi) * 2f64.powf(e_hi)),
    };
    let t3 = fxts_settling_bound(&FxtsExponentPair::new(e_lo, e_hi, a, b)?)?;
    let total = t1 + t2 + t3;
    if !total.is_finite() {
        return Err(Error::NonFinite("settling bounds"));
    }
    Ok(SettlingBounds { t1, t2, t3, total })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum GainCheck {
    Ok,
    /// `p` must strictly exceed `required_p`.
    Warning { required_p: f64 },
}

/// Advisory check of the estimator gain against the bound on `|h_i - h_j|`.
pub fn gain_check(params: &ProtocolParams, n_agents: usize) -> GainCheck {
    let required_p = (n_agents as f64 - 1.0) * params.rho / 2.0;
    if params.p > required_p {
        GainCheck::Ok
    } else {
        GainCheck::Warning { required_p }
    }
}

/// One Euler step of the centralized flow `x' = g*(x)` on a team objective.
pub fn centralized_step(objs: &[LocalObjective], x: &[f64], params: &ProtocolParams, dt: f64) -> Result<Vec<f64>> {
    let g = crate::objective::team_gradient(objs, x)?;
    let dx = if params.mode.is_second_order() {
        let h = crate::objective::team_hessian(objs, x)?;
        g_star_strict(&g, &h, params.l1, params.l2)?.0
    } else {
        g_bar_strong(&g, params.l1, params.l2)
    };
    Ok(x.iter().zip(&dx).map(|(a, b)| a + dt * b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Topology;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn example1_params() -> ProtocolParams {
        let mut p = ProtocolParams::uniform(Mode::SecondOrderStrict, 10.0, 1.2, 0.8);
        p.p = 1010.0;
        p.rho = 20.0;
        p
    }

    #[test]
    fn g_star_examples() {
        let h = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(g_star_strict(&[0.0], &h, 1.2, 0.8).unwrap().0, vec![0.0]);
        assert_relative_eq!(g_star_strict(&[1.0], &h, 1.7, 0.3).unwrap().0[0], -3.0);
        let h = DMatrix::from_element(1, 1, 2.0);
        let y = g_star_strict(&[4.0], &h, 1.2, 0.8).unwrap().0[0];
        let want = -(4.0 + 4f64.powf(1.2) + 4f64.powf(0.8)) / 2.0;
        assert_relative_eq!(y, want, max_relative = 1e-14);
        assert!((y + 6.155).abs() < 1e-3);
    }

    #[test]
    fn g_bar_examples() {
        assert_eq!(g_bar_strong(&[0.0, 0.0], 1.2, 0.8), vec![0.0, 0.0]);
        assert_relative_eq!(g_bar_strong(&[1.0], 1.2, 0.8)[0], -3.0);
        let y = g_bar_strong(&[3.0, 4.0], 1.2, 0.8);
        let m = 1.0 + 5f64.powf(0.2) + 5f64.powf(-0.2);
        assert_relative_eq!(y[0], -3.0 * m, max_relative = 1e-14);
        assert_relative_eq!(y[1], -4.0 * m, max_relative = 1e-14);
        assert!((5f64.powf(0.2) - 1.3797).abs() < 1e-4);
        assert!((5f64.powf(-0.2) - 0.7248).abs() < 1e-4);
    }

    #[test]
    fn g_i_examples() {
        let mut params = ProtocolParams::uniform(Mode::SecondOrderStrict, 1.0, 1.2, 0.8);
        let (g, _) = g_i_from_theta(&[2.0, 3.0], 1, 2, &params).unwrap();
        let want = -(4.0 + 4f64.powf(1.2) + 4f64.powf(0.8)) / 6.0;
        assert_relative_eq!(g[0], want, max_relative = 1e-14);
        params.mode = Mode::FirstOrderStrong { k: 1.0 };
        assert_eq!(g_i_from_theta(&[0.0, 0.0], 2, 5, &params).unwrap().0, vec![0.0, 0.0]);
        assert!(g_i_from_theta(&[0.0; 6], 2, 5, &params).is_err());
    }

    #[test]
    fn g_i_with_exact_averages_equals_g_star() {
        let objs: Vec<_> = (0..4)
            .map(|i| LocalObjective::shifted_quartic(vec![i as f64, -(i as f64)]).unwrap())
            .collect();
        let x = [0.7, 0.2];
        let n = objs.len();
        let mut avg = vec![0.0; 6];
        for f in &objs {
            for (a, z) in avg.iter_mut().zip(f.zeta(&x).unwrap().as_slice()) {
                *a += z / n as f64;
            }
        }
        let params = ProtocolParams::uniform(Mode::SecondOrderStrict, 1.0, 1.3, 0.6);
        let gi = g_i_from_theta(&avg, 2, n, &params).unwrap().0;
        let g = crate::objective::team_gradient(&objs, &x).unwrap();
        let h = crate::objective::team_hessian(&objs, &x).unwrap();
        let gs = g_star_strict(&g, &h, 1.3, 0.6).unwrap().0;
        for (a, b) in gi.iter().zip(&gs) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn ill_conditioned_solve_is_regularized() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        let (y, info) = solve_newton_system(&h, &[1.0, 1.0]).unwrap();
        assert!(info.regularized);
        assert!(info.condition > ILL_CONDITIONED);
        assert_relative_eq!(y[1], 1.0 / (1e-14 + TIKHONOV_EPS), max_relative = 1e-9);
        let (_, info) = solve_newton_system(&DMatrix::identity(2, 2), &[1.0, 1.0]).unwrap();
        assert!(!info.regularized);
        let (y, info) = solve_newton_system(&DMatrix::zeros(1, 1), &[2.0]).unwrap();
        assert!(info.regularized);
        assert_relative_eq!(y[0], 2.0 / TIKHONOV_EPS);
    }

    #[test]
    fn nonsymmetric_system_uses_lu() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 3.0]);
        let (y, info) = solve_newton_system(&h, &[3.0, 3.0]).unwrap();
        assert!(!info.regularized);
        assert_relative_eq!(y[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(y[1], 1.0, max_relative = 1e-14);
    }

    #[test]
    fn omega_examples() {
        let params = ProtocolParams::uniform(Mode::SecondOrderStrict, 1.0, 1.2, 0.8);
        let same = [1.5, 2.0];
        assert_eq!(omega(&same, &[&same, &same], &params, 1e-12), vec![0.0, 0.0]);
        assert_relative_eq!(omega(&[0.0], &[&[1.0]], &params, 1e-12)[0], 3.0);
        assert_relative_eq!(u_tilde(&[0.0], &[&[1.0]], &params, 1e-12)[0], 3.0);
        assert_eq!(u_tilde(&same, &[&same], &params, 1e-12), vec![0.0, 0.0]);
    }

    #[test]
    fn deadzone_switches_off_unit_term() {
        let params = ProtocolParams::uniform(Mode::SecondOrderStrict, 1.0, 2.0, 0.5);
        // |diff| = 0.01: unit term 1, k1 term 0.01, k2 term 0.1
        let inside = omega(&[0.0], &[&[0.01]], &params, 0.1)[0];
        let outside = omega(&[0.0], &[&[0.01]], &params, 0.001)[0];
        assert_relative_eq!(inside, 0.0001 + 0.1, max_relative = 1e-12);
        assert_relative_eq!(outside, 1.0 + 0.0001 + 0.1, max_relative = 1e-12);
        let mut p = params.clone();
        p.deadzone = Deadzone::StepScaled;
        assert_relative_eq!(p.deadzone_radius(50.0, 1e-4, 4), 0.025);
        assert_eq!(params.deadzone_radius(50.0, 1e-4, 4), 1e-12);
    }

    #[test]
    fn control_examples() {
        let params = ProtocolParams::uniform(Mode::FirstOrderStrong { k: 1.0 }, 1.0, 1.2, 0.8);
        let u = control(&[0.0], &[&[0.0]], &[0.0], 2, &params, 1e-12).unwrap().0;
        assert_eq!(u, vec![0.0]);
        let u = control(&[0.0], &[&[1.0]], &[0.0], 2, &params, 1e-12).unwrap().0;
        assert_eq!(u, u_tilde(&[0.0], &[&[1.0]], &params, 1e-12));
        let theta = [0.5];
        let u = control(&[1.0], &[&[1.0]], &theta, 2, &params, 1e-12).unwrap().0;
        assert_eq!(u, g_bar_strong(&[1.0], 1.2, 0.8));
    }

    #[test]
    fn h_i_examples() {
        let q = LocalObjective::shifted_quartic(vec![0.0]).unwrap();
        let h = h_i(&q, &[2.0], &[1.0], Mode::SecondOrderStrict, None).unwrap();
        assert_eq!(h, vec![12.0, 12.0]);
        assert_eq!(h_i(&q, &[2.0], &[0.0], Mode::SecondOrderStrict, None).unwrap(), vec![0.0, 0.0]);
        let h = h_i(&q, &[2.0], &[1.0], Mode::FirstOrderStrong { k: 1.0 }, None).unwrap();
        assert_eq!(h, vec![12.0]);
        let quad = LocalObjective::quadratic(DMatrix::identity(2, 2) * 3.0, DVector::zeros(2), 0.0).unwrap();
        let h = h_i(&quad, &[1.0, 2.0], &[0.5, -1.0], Mode::SecondOrderStrict, None).unwrap();
        assert_eq!(&h[..2], &[1.5, -3.0]);
        assert!(h[2..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn h_i_fallbacks() {
        use crate::objective::Capabilities;
        let q = LocalObjective::shifted_quartic(vec![0.0])
            .unwrap()
            .with_capabilities(Capabilities { has_hessian: true, has_zeta_jacobian: false });
        let m = Mode::SecondOrderStrict;
        assert_eq!(h_i(&q, &[2.0], &[1.0], m, None).unwrap(), vec![0.0, 0.0]);
        let prev = local_zeta(&q, &[2.0 - 1e-6], m).unwrap();
        let h = h_i(&q, &[2.0], &[1.0], m, Some((&prev, 1e-6))).unwrap();
        assert!((h[0] - 12.0).abs() < 1e-4 && (h[1] - 12.0).abs() < 1e-4);
        let (h, z1) = h_i_secant(&q, &[2.0], &[1.0], 1e-6, m).unwrap();
        assert!((h[0] - 12.0).abs() < 1e-4 && (h[1] - 12.0).abs() < 1e-4);
        assert_eq!(z1, local_zeta(&q, &[2.0 + 1e-6], m).unwrap());
    }

    #[test]
    fn example1_bounds() {
        let n = 101;
        let l2 = 2.0 * (1.0 - (PI / n as f64).cos());
        let b = settling_bounds(&example1_params(), n, l2).unwrap();
        assert!((b.t3 - 10.02).abs() < 0.01, "{b:?}");
        assert!((b.t1 - 2.53).abs() < 0.05, "{b:?}");
        assert!((b.t2 - 256.3).abs() < 2.0, "{b:?}");
        assert!((b.total - 268.85).abs() < 2.1, "{b:?}");
        assert_relative_eq!(b.total, b.t1 + b.t2 + b.t3);
    }

    #[test]
    fn t3_strict_from_exponents() {
        let p = ProtocolParams::uniform(Mode::SecondOrderStrict, 3.0, 1.2, 0.8);
        let b = settling_bounds(&p, 5, 0.5).unwrap();
        let want = 1.0 / (2f64.powf(0.9) * 0.1) + 1.0 / (2f64.powf(1.1) * 0.1);
        assert_relative_eq!(b.t3, want, max_relative = 1e-14);
        assert!((b.t3 - 10.02).abs() < 0.005);
    }

    #[test]
    fn symmetric_gains_give_equal_phases() {
        let p = ProtocolParams::uniform(Mode::SecondOrderStrict, 7.0, 1.3, 0.6);
        let b = settling_bounds(&p, 9, 0.3).unwrap();
        assert_eq!(b.t1, b.t2);
    }

    #[test]
    fn strong_and_pl_t3() {
        let mut p = ProtocolParams::uniform(Mode::FirstOrderStrong { k: 2.0 }, 1.0, 1.2, 0.8);
        let strict = 1.0 / (2f64.powf(0.9) * 0.1) + 1.0 / (2f64.powf(1.1) * 0.1);
        assert_relative_eq!(settling_bounds(&p, 3, 1.0).unwrap().t3, strict / 2.0, max_relative = 1e-14);
        p.mode = Mode::FirstOrderPl { mu: 0.5 };
        // (2 mu) = 1, so the PL gains coincide with the strict ones
        assert_relative_eq!(settling_bounds(&p, 3, 1.0).unwrap().t3, strict, max_relative = 1e-14);
        assert!(settling_bounds(&p, 3, 0.0).is_err());
    }

    #[test]
    fn gain_check_examples() {
        assert_eq!(gain_check(&example1_params(), 101), GainCheck::Ok);
        let mut p = ProtocolParams::uniform(Mode::SecondOrderStrict, 1.0, 1.2, 0.8);
        assert_eq!(gain_check(&p, 1000), GainCheck::Ok);
        p.rho = 1.0;
        assert_eq!(gain_check(&p, 5), GainCheck::Warning { required_p: 2.0 });
    }

    #[test]
    fn violations_name_exponent_range() {
        let mut p = ProtocolParams::uniform(Mode::SecondOrderStrict, 1.0, 1.2, 0.8);
        assert!(p.violations().is_empty());
        p.l2 = 1.0;
        p.gamma = 0.0;
        let v = p.violations();
        assert_eq!(v.len(), 2);
        assert!(v[0].starts_with("exponent range"));
        assert!(v[1].starts_with("gain"));
    }

    #[test]
    fn params_json_round_trip() {
        let mut p = example1_params();
        p.deadzone = Deadzone::StepScaled;
        let s = serde_json::to_string(&p).unwrap();
        let back: ProtocolParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        let bad = s.replace("\"rho\"", "\"rhoo\"");
        assert!(serde_json::from_str::<ProtocolParams>(&bad).is_err());
    }

    /// Centralized run on the quartic team: the discrete Lyapunov rate stays
    /// under the continuous-time decay law up to an O(dt) slack.
    #[test]
    fn centralized_lyapunov_decrease() {
        let objs: Vec<_> = (1..=11).map(|i| LocalObjective::shifted_quartic(vec![i as f64]).unwrap()).collect();
        let params = ProtocolParams::uniform(Mode::SecondOrderStrict, 1.0, 1.2, 0.8);
        let dt = 1e-4;
        let v_of = |x: &[f64]| 0.5 * norm(&crate::objective::team_gradient(&objs, x).unwrap()).powi(2);
        for x0 in [-3.0, 0.0, 2.5, 9.0, 15.0] {
            let mut x = vec![x0];
            for _ in 0..20_000 {
                let v = v_of(&x);
                if v < 1e-20 {
                    break;
                }
                let xn = centralized_step(&objs, &x, &params, dt).unwrap();
                let vn = v_of(&xn);
                let e1 = (1.0 + params.l1) / 2.0;
                let e2 = (1.0 + params.l2) / 2.0;
                let rhs = -2f64.powf(e1) * v.powf(e1) - 2f64.powf(e2) * v.powf(e2);
                assert!((vn - v) / dt <= rhs + 10.0 * dt * (1.0 + v), "x0 = {x0}, x = {x:?}");
                x = xn;
            }
        }
    }

    fn random_graph(n: usize, mask: u64) -> Topology {
        let mut edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        let mut bit = 0;
        for i in 0..n {
            for j in i + 2..n {
                if mask >> (bit % 64) & 1 == 1 {
                    edges.push((i, j));
                }
                bit += 1;
            }
        }
        Topology::from_edges(n, &edges).unwrap()
    }

    proptest! {
        #[test]
        fn network_sums_vanish(
            n in 3usize..9,
            mask in any::<u64>(),
            vals in proptest::collection::vec(-10.0f64..10.0, 27),
            dz in prop_oneof![Just(1e-12), Just(0.5)],
        ) {
            let g = random_graph(n, mask);
            let params = ProtocolParams::uniform(Mode::SecondOrderStrict, 2.0, 1.4, 0.7);
            let states: Vec<&[f64]> = (0..n).map(|i| &vals[3 * i..3 * i + 3]).collect();
            let mut total_w = [0.0; 3];
            let mut total_u = [0.0; 3];
            let mut scale = 0.0f64;
            for i in 0..n {
                let nb: Vec<&[f64]> = g.neighbors(i).iter().map(|&j| states[j]).collect();
                let w = omega(states[i], &nb, &params, dz);
                let u = u_tilde(states[i], &nb, &params, dz);
                for k in 0..3 {
                    total_w[k] += w[k];
                    total_u[k] += u[k];
                    scale = scale.max(w[k].abs());
                }
            }
            prop_assert!(norm(&total_w) <= 1e-10 * scale.max(1.0));
            prop_assert!(norm(&total_u) <= 1e-10 * scale.max(1.0));
        }

        #[test]
        fn strong_law_is_preconditioned_strict_law(
            g in proptest::collection::vec(-5.0f64..5.0, 2),
            a in proptest::collection::vec(-1.0f64..1.0, 4),
            l1 in 1.01f64..2.0,
            l2 in 0.05f64..0.99,
        ) {
            let m = DMatrix::from_row_slice(2, 2, &a);
            let h = m.transpose() * &m + DMatrix::identity(2, 2);
            let gs = g_star_strict(&g, &h, l1, l2).unwrap().0;
            let lhs = g_bar_strong(&g, l1, l2);
            let rhs = &h * DVector::from_vec(gs);
            for k in 0..2 {
                prop_assert!((lhs[k] - rhs[k]).abs() <= 1e-9 * (1.0 + lhs[k].abs()));
            }
        }

        #[test]
        fn bounds_decrease_with_gain(scale in 1.0f64..10.0) {
            let lo = ProtocolParams::uniform(Mode::SecondOrderStrict, 1.0, 1.3, 0.7);
            let hi = ProtocolParams::uniform(Mode::SecondOrderStrict, scale + 0.5, 1.3, 0.7);
            let a = settling_bounds(&lo, 6, 0.4).unwrap();
            let b = settling_bounds(&hi, 6, 0.4).unwrap();
            prop_assert!(b.t1 < a.t1 && b.t2 < a.t2);
        }
    }
}
