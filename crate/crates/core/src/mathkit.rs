//! Scalar and vector primitives: the `sign^mu` family, fixed-time settling
//! arithmetic and power-sum inequalities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deadzone applied to the unit-direction term (`mu = 0`) when no other
/// radius is configured.
pub const DEFAULT_SIGN0_DEADZONE: f64 = 1e-12;

const DEGENERATE_TOL: f64 = 1e-12;

/// A finite real vector of dimension at least one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RealVec(Vec<f64>);

impl RealVec {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Parameter("vector dimension must be at least 1".into()));
        }
        if components.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Self(components))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl TryFrom<Vec<f64>> for RealVec {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RealVec> for Vec<f64> {
    fn from(v: RealVec) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for RealVec {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Exponents and gains of a fixed-time Lyapunov inequality
/// `dV/dt <= -a V^p - b V^q` with `0 < p < 1 < q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FxtsExponentPair {
    pub p_exp: f64,
    pub q_exp: f64,
    pub a_gain: f64,
    pub b_gain: f64,
}

impl FxtsExponentPair {
    pub fn new(p_exp: f64, q_exp: f64, a_gain: f64, b_gain: f64) -> Result<Self> {
        let all = [p_exp, q_exp, a_gain, b_gain];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("fixed-time exponent pair"));
        }
        if !(p_exp > 0.0 && p_exp < 1.0 && q_exp > 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < p < 1 < q, got p = {p_exp}, q = {q_exp}"
            )));
        }
        if a_gain <= 0.0 || b_gain <= 0.0 {
            return Err(Error::Parameter(format!(
                "gains must be positive, got a = {a_gain}, b = {b_gain}"
            )));
        }
        Ok(Self { p_exp, q_exp, a_gain, b_gain })
    }
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Multiplier `m` such that `sign^mu(x) = m * x` given `n = |x|`.
#[inline]
pub fn sign_mu_factor(n: f64, mu: f64) -> f64 {
    if n == 0.0 {
        0.0
    } else {
        n.powf(mu - 1.0)
    }
}

/// `x * |x|^(mu - 1)`, with the zero vector mapped to zero.
pub fn sign_mu(x: &RealVec, mu: f64) -> Result<RealVec> {
    if !(mu >= 0.0) {
        return Err(Error::Parameter(format!("sign exponent must be >= 0, got {mu}")));
    }
    let f = sign_mu_factor(x.norm(), mu);
    let out: Vec<f64> = x.as_slice().iter().map(|v| v * f).collect();
    RealVec::new(out)
}

/// Unit direction `x / |x|`, zero inside the deadzone `|x| < deadzone`.
pub fn sign0(x: &RealVec, deadzone: f64) -> RealVec {
    let n = x.norm();
    if n < deadzone || n == 0.0 {
        return RealVec::zeros(x.dim());
    }
    RealVec(x.as_slice().iter().map(|v| v / n).collect())
}

/// Upper bound on the settling time of a fixed-time stable system:
/// `1/(a(1-p)) + 1/(b(q-1))`.
pub fn fxts_settling_bound(e: &FxtsExponentPair) -> Result<f64> {
    if (1.0 - e.p_exp).abs() < DEGENERATE_TOL || (e.q_exp - 1.0).abs() < DEGENERATE_TOL {
        return Err(Error::DegenerateExponent(format!(
            "p = {}, q = {} too close to 1",
            e.p_exp, e.q_exp
        )));
    }
    let t = 1.0 / (e.a_gain * (1.0 - e.p_exp)) + 1.0 / (e.b_gain * (e.q_exp - 1.0));
    if !t.is_finite() {
        return Err(Error::NonFinite("settling bound"));
    }
    Ok(t)
}

/// Returns `(sum z_i^p, bound)` where the bound is `(sum z_i)^p` for
/// `p <= 1` and `N^(1-p) (sum z_i)^p` for `p > 1`; `lhs >= bound` always.
pub fn power_sum_lower_bound(z: &[f64], p: f64) -> Result<(f64, f64)> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::Parameter(format!("power must be positive, got {p}")));
    }
    if z.is_empty() {
        return Err(Error::Domain("empty sequence".into()));
    }
    if let Some(bad) = z.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("entries must be non-negative, got {bad}")));
    }
    let lhs: f64 = z.iter().map(|v| v.powf(p)).sum();
    let total: f64 = z.iter().sum();
    let rhs = if p <= 1.0 {
        total.powf(p)
    } else {
        (z.len() as f64).powf(1.0 - p) * total.powf(p)
    };
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rv(v: &[f64]) -> RealVec {
        RealVec::new(v.to_vec()).unwrap()
    }

    #[test]
    fn sign_mu_examples() {
        assert_eq!(sign_mu(&rv(&[0.0, 0.0]), 0.8).unwrap().as_slice(), &[0.0, 0.0]);
        assert_eq!(sign_mu(&rv(&[3.0, -4.0]), 1.0).unwrap().as_slice(), &[3.0, -4.0]);
        let s = sign_mu(&rv(&[3.0, 4.0]), 2.0).unwrap();
        assert_relative_eq!(s.as_slice()[0], 15.0, max_relative = 1e-14);
        assert_relative_eq!(s.as_slice()[1], 20.0, max_relative = 1e-14);
    }

    #[test]
    fn sign_mu_rejects_negative_exponent() {
        assert!(matches!(sign_mu(&rv(&[1.0]), -0.1), Err(Error::Parameter(_))));
    }

    #[test]
    fn realvec_rejects_non_finite() {
        assert!(RealVec::new(vec![1.0, f64::NAN]).is_err());
        assert!(RealVec::new(vec![f64::INFINITY]).is_err());
        assert!(RealVec::new(vec![]).is_err());
    }

    #[test]
    fn sign0_deadzone() {
        assert_eq!(sign0(&rv(&[1e-13, 0.0]), 1e-12).as_slice(), &[0.0, 0.0]);
        assert_eq!(sign0(&rv(&[0.0, -2.0]), 1e-12).as_slice(), &[0.0, -1.0]);
    }

    #[test]
    fn settling_bound_examples() {
        let e = FxtsExponentPair::new(0.5, 2.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(fxts_settling_bound(&e).unwrap(), 3.0, max_relative = 1e-14);

        let e = FxtsExponentPair::new(0.9, 1.1, 2f64.powf(0.9), 2f64.powf(1.1)).unwrap();
        let t = fxts_settling_bound(&e).unwrap();
        assert!((t - 10.02).abs() <= 0.01, "got {t}");

        // 1/(10 * 0.1) + 1/(10 * 0.1)
        let e = FxtsExponentPair::new(0.9, 1.1, 10.0, 10.0).unwrap();
        assert_relative_eq!(fxts_settling_bound(&e).unwrap(), 2.0, max_relative = 1e-12);
    }

    #[test]
    fn settling_bound_degenerate() {
        let e = FxtsExponentPair { p_exp: 1.0 - 1e-14, q_exp: 2.0, a_gain: 1.0, b_gain: 1.0 };
        assert!(matches!(fxts_settling_bound(&e), Err(Error::DegenerateExponent(_))));
        assert!(FxtsExponentPair::new(1.2, 2.0, 1.0, 1.0).is_err());
        assert!(FxtsExponentPair::new(0.5, 2.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn power_sum_examples() {
        let (l, r) = power_sum_lower_bound(&[1.0, 1.0], 0.5).unwrap();
        assert_relative_eq!(l, 2.0);
        assert_relative_eq!(r, 2f64.sqrt(), max_relative = 1e-14);
        let (l, r) = power_sum_lower_bound(&[4.0], 2.0).unwrap();
        assert_relative_eq!(l, 16.0);
        assert_relative_eq!(r, 16.0);
        let (l, r) = power_sum_lower_bound(&[1.0, 2.0, 3.0], 2.0).unwrap();
        assert_relative_eq!(l, 14.0);
        assert_relative_eq!(r, 12.0, max_relative = 1e-14);
        assert!(matches!(power_sum_lower_bound(&[1.0, -1.0], 2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn power_sum_inequality_random_samples() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for &p in &[0.3, 0.8, 1.5, 3.0] {
            for _ in 0..1000 {
                let n = rng.random_range(1..20);
                let z: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
                let (l, r) = power_sum_lower_bound(&z, p).unwrap();
                assert!(l >= r - 1e-12 * r.max(1.0), "p={p} lhs={l} rhs={r}");
            }
        }
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1e3f64..1e3, 1..6)
    }

    proptest! {
        #[test]
        fn sign_mu_is_odd(x in vec_strategy(), mu in 0.0f64..3.0) {
            let pos = sign_mu(&rv(&x), mu).unwrap();
            let neg_in: Vec<f64> = x.iter().map(|v| -v).collect();
            let neg = sign_mu(&rv(&neg_in), mu).unwrap();
            for (a, b) in pos.as_slice().iter().zip(neg.as_slice()) {
                prop_assert_eq!(*a, -*b);
            }
        }

        #[test]
        fn sign_mu_norm_law(x in vec_strategy(), mu in 0.0f64..3.0) {
            let x = rv(&x);
            prop_assume!(x.norm() > 1e-6);
            let got = sign_mu(&x, mu).unwrap().norm();
            let want = x.norm().powf(mu);
            prop_assert!((got - want).abs() <= 1e-12 * want.max(1e-300));
        }

        #[test]
        fn settling_bound_decreases_in_gains(
            p in 0.05f64..0.95, q in 1.05f64..3.0,
            a in 0.1f64..10.0, b in 0.1f64..10.0, s in 1.01f64..5.0,
        ) {
            let base = fxts_settling_bound(&FxtsExponentPair::new(p, q, a, b).unwrap()).unwrap();
            let more_a = fxts_settling_bound(&FxtsExponentPair::new(p, q, a * s, b).unwrap()).unwrap();
            let more_b = fxts_settling_bound(&FxtsExponentPair::new(p, q, a, b * s).unwrap()).unwrap();
            prop_assert!(more_a < base);
            prop_assert!(more_b < base);
        }
    }
}
