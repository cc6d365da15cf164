//! Local objective functions with exact first, second and third
//! derivative oracles, plus the synthetic SVM dataset.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathkit::RealVec;

pub const DEFAULT_SMOOTHING: f64 = 100.0;
const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub has_hessian: bool,
    pub has_zeta_jacobian: bool,
}

impl Capabilities {
    pub const FULL: Capabilities = Capabilities { has_hessian: true, has_zeta_jacobian: true };
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveKind {
    /// `1/4 * sum_k (x_k - s_k)^4`
    ShiftedQuartic { shift: Vec<f64> },
    /// `1/2 x'Qx + b'x + c`
    Quadratic { q: DMatrix<f64>, b: DVector<f64>, c: f64 },
    /// `reg/2 |x|^2 + sum_j g(1 - l_j x'z_j)` with `g` the softplus of
    /// sharpness `mu_s`. Rows of `z` are the data points.
    SmoothedHingeSvm { z: DMatrix<f64>, labels: Vec<f64>, reg: f64, mu_s: f64 },
    /// `|Ax - b|^2`
    LeastSquares { a: DMatrix<f64>, b: DVector<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalObjective {
    dim: usize,
    kind: ObjectiveKind,
    caps: Capabilities,
}

/// Gradient block followed by the `d` Hessian columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ZetaVec {
    d: usize,
    data: Vec<f64>,
}

impl ZetaVec {
    pub fn from_vec(d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != d * d + d {
            return Err(Error::DimensionMismatch { expected: d * d + d, found: data.len() });
        }
        Ok(Self { d, data })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.data
    }

    pub fn gradient(&self) -> &[f64] {
        &self.data[..self.d]
    }

    pub fn hessian_column(&self, l: usize) -> &[f64] {
        let d = self.d;
        &self.data[d * (l + 1)..d * (l + 2)]
    }

    pub fn hessian_block(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.d, self.d, &self.data[self.d..])
    }
}

/// `softplus(mu a) / mu`, overflow safe.
pub fn smoothed_hinge(a: f64, mu_s: f64) -> f64 {
    let z = mu_s * a;
    (z.max(0.0) + (-z.abs()).exp().ln_1p()) / mu_s
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_finite_matrix(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

impl LocalObjective {
    pub fn shifted_quartic(shift: Vec<f64>) -> Result<Self> {
        if shift.is_empty() {
            return Err(Error::Parameter("quartic needs a non-empty shift".into()));
        }
        if shift.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("quartic shift"));
        }
        Ok(Self { dim: shift.len(), kind: ObjectiveKind::ShiftedQuartic { shift }, caps: Capabilities::FULL })
    }

    pub fn quadratic(q: DMatrix<f64>, b: DVector<f64>, c: f64) -> Result<Self> {
        let d = q.nrows();
        if d == 0 || q.ncols() != d {
            return Err(Error::Parameter(format!("Q must be square, got {}x{}", q.nrows(), q.ncols())));
        }
        if b.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: b.len() });
        }
        check_finite_matrix(&q, "quadratic Q")?;
        if b.iter().any(|v| !v.is_finite()) || !c.is_finite() {
            return Err(Error::NonFinite("quadratic b or c"));
        }
        let scale = q.amax().max(1.0);
        if (&q - q.transpose()).amax() > SYMMETRY_TOL * scale {
            return Err(Error::Domain("Q is not symmetric".into()));
        }
        let min_ev = SymmetricEigen::new(q.clone()).eigenvalues.min();
        if min_ev < -1e-10 * scale {
            return Err(Error::Domain(format!("Q is not positive semidefinite (min eigenvalue {min_ev:e})")));
        }
        Ok(Self { dim: d, kind: ObjectiveKind::Quadratic { q, b, c }, caps: Capabilities::FULL })
    }

    pub fn smoothed_hinge_svm(z: DMatrix<f64>, labels: Vec<f64>, reg: f64, mu_s: f64) -> Result<Self> {
        let d = z.ncols();
        if d == 0 || z.nrows() == 0 {
            return Err(Error::Parameter("svm needs at least one point of positive dimension".into()));
        }
        if labels.len() != z.nrows() {
            return Err(Error::DimensionMismatch { expected: z.nrows(), found: labels.len() });
        }
        if let Some(l) = labels.iter().find(|l| **l != 1.0 && **l != -1.0) {
            return Err(Error::Domain(format!("labels must be +1 or -1, got {l}")));
        }
        check_finite_matrix(&z, "svm points")?;
        if !(reg >= 0.0) || !reg.is_finite() {
            return Err(Error::Parameter(format!("regularizer must be >= 0, got {reg}")));
        }
        if !(mu_s > 0.0) || !mu_s.is_finite() {
            return Err(Error::Parameter(format!("smoothing must be > 0, got {mu_s}")));
        }
        Ok(Self {
            dim: d,
            kind: ObjectiveKind::SmoothedHingeSvm { z, labels, reg, mu_s },
            caps: Capabilities::FULL,
        })
    }

    pub fn least_squares(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let d = a.ncols();
        if d == 0 || a.nrows() == 0 {
            return Err(Error::Parameter("A must be non-empty".into()));
        }
        if b.len() != a.nrows() {
            return Err(Error::DimensionMismatch { expected: a.nrows(), found: b.len() });
        }
        check_finite_matrix(&a, "least squares A")?;
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("least squares b"));
        }
        Ok(Self { dim: d, kind: ObjectiveKind::LeastSquares { a, b }, caps: Capabilities::FULL })
    }

    /// Hides derivative oracles, e.g. to exercise the numerical fallbacks.
    pub fn with_capabilities(mut self, caps: Capabilities) -> Self {
        self.caps = Capabilities {
            has_hessian: caps.has_hessian,
            has_zeta_jacobian: caps.has_zeta_jacobian && caps.has_hessian,
        };
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &ObjectiveKind {
        &self.kind
    }

    pub fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: x.len() });
        }
        Ok(())
    }

    fn require_hessian(&self) -> Result<()> {
        if self.caps.has_hessian {
            Ok(())
        } else {
            Err(Error::Unsupported("hessian"))
        }
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let v = match &self.kind {
            ObjectiveKind::ShiftedQuartic { shift } => {
                x.iter().zip(shift).map(|(xi, s)| 0.25 * (xi - s).powi(4)).sum()
            }
            ObjectiveKind::Quadratic { q, b, c } => {
                let xv = DVector::from_column_slice(x);
                0.5 * xv.dot(&(q * &xv)) + b.dot(&xv) + c
            }
            ObjectiveKind::SmoothedHingeSvm { z, labels, reg, mu_s } => {
                let xv = DVector::from_column_slice(x);
                let margins = z * &xv;
                let loss: f64 = margins
                    .iter()
                    .zip(labels)
                    .map(|(m, l)| smoothed_hinge(1.0 - l * m, *mu_s))
                    .sum();
                0.5 * reg * xv.norm_squared() + loss
            }
            ObjectiveKind::LeastSquares { a, b } => {
                let r = a * DVector::from_column_slice(x) - b;
                r.norm_squared()
            }
        };
        if !v.is_finite() {
            return Err(Error::NonFinite("objective value"));
        }
        Ok(v)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<RealVec> {
        let mut out = vec![0.0; self.dim];
        self.gradient_into(x, &mut out)?;
        RealVec::new(out)
    }

    /// Allocation-light gradient for the simulation hot path.
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_dim(x)?;
        if out.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: out.len() });
        }
        match &self.kind {
            ObjectiveKind::ShiftedQuartic { shift } => {
                for ((o, xi), s) in out.iter_mut().zip(x).zip(shift) {
                    *o = (xi - s).powi(3);
                }
            }
            ObjectiveKind::Quadratic { q, b, .. } => {
                let g = q * DVector::from_column_slice(x) + b;
                out.copy_from_slice(g.as_slice());
            }
            ObjectiveKind::SmoothedHingeSvm { z, labels, reg, mu_s } => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = reg * xi;
                }
                for (j, l) in labels.iter().enumerate() {
                    let row = z.row(j);
                    let m: f64 = row.iter().zip(x).map(|(zk, xk)| zk * xk).sum();
                    let s = logistic(mu_s * (1.0 - l * m));
                    for (o, zk) in out.iter_mut().zip(row.iter()) {
                        *o -= s * l * zk;
                    }
                }
            }
            ObjectiveKind::LeastSquares { a, b } => {
                let r = a * DVector::from_column_slice(x) - b;
                let g = a.tr_mul(&r) * 2.0;
                out.copy_from_slice(g.as_slice());
            }
        }
        Ok(())
    }

    pub fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        self.require_hessian()?;
        let d = self.dim;
        let h = match &self.kind {
            ObjectiveKind::ShiftedQuartic { shift } => {
                DMatrix::from_diagonal(&DVector::from_iterator(
                    d,
                    x.iter().zip(shift).map(|(xi, s)| 3.0 * (xi - s).powi(2)),
                ))
            }
            ObjectiveKind::Quadratic { q, .. } => q.clone(),
            ObjectiveKind::SmoothedHingeSvm { z, labels, reg, mu_s } => {
                let mut h = DMatrix::identity(d, d) * *reg;
                for (j, l) in labels.iter().enumerate() {
                    let row = z.row(j);
                    let m: f64 = row.iter().zip(x).map(|(zk, xk)| zk * xk).sum();
                    let s = logistic(mu_s * (1.0 - l * m));
                    let w = mu_s * s * (1.0 - s);
                    if w == 0.0 {
                        continue;
                    }
                    for r in 0..d {
                        for c in 0..d {
                            h[(r, c)] += w * row[r] * row[c];
                        }
                    }
                }
                h
            }
            ObjectiveKind::LeastSquares { a, .. } => a.tr_mul(a) * 2.0,
        };
        check_finite_matrix(&h, "hessian")?;
        Ok(h)
    }

    /// Directional derivative of the Hessian, `sum_k d^3 f / dx_k * v_k`.
    fn hessian_derivative(&self, x: &[f64], v: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        match &self.kind {
            ObjectiveKind::ShiftedQuartic { shift } => DMatrix::from_diagonal(&DVector::from_iterator(
                d,
                x.iter().zip(shift).zip(v).map(|((xi, s), vi)| 6.0 * (xi - s) * vi),
            )),
            ObjectiveKind::Quadratic { .. } | ObjectiveKind::LeastSquares { .. } => DMatrix::zeros(d, d),
            ObjectiveKind::SmoothedHingeSvm { z, labels, mu_s, .. } => {
                let mut t = DMatrix::zeros(d, d);
                for (j, l) in labels.iter().enumerate() {
                    let row = z.row(j);
                    let m: f64 = row.iter().zip(x).map(|(zk, xk)| zk * xk).sum();
                    let zv: f64 = row.iter().zip(v).map(|(zk, vk)| zk * vk).sum();
                    let s = logistic(mu_s * (1.0 - l * m));
                    // d/dx [mu s(1-s)] = -mu^2 s(1-s)(1-2s) l z
                    let w = -mu_s * mu_s * s * (1.0 - s) * (1.0 - 2.0 * s) * l * zv;
                    if w == 0.0 {
                        continue;
                    }
                    for r in 0..d {
                        for c in 0..d {
                            t[(r, c)] += w * row[r] * row[c];
                        }
                    }
                }
                t
            }
        }
    }

    pub fn zeta(&self, x: &[f64]) -> Result<ZetaVec> {
        let mut out = vec![0.0; self.dim * self.dim + self.dim];
        self.zeta_into(x, &mut out)?;
        ZetaVec::from_vec(self.dim, out)
    }

    pub fn zeta_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim;
        if out.len() != d * d + d {
            return Err(Error::DimensionMismatch { expected: d * d + d, found: out.len() });
        }
        if let (ObjectiveKind::ShiftedQuartic { shift }, true) = (&self.kind, self.caps.has_hessian) {
            self.check_dim(x)?;
            out.fill(0.0);
            for k in 0..d {
                let r = x[k] - shift[k];
                out[k] = r * r * r;
                out[d * (k + 1) + k] = 3.0 * r * r;
            }
            return Ok(());
        }
        self.gradient_into(x, &mut out[..d])?;
        let h = self.hessian(x)?;
        out[d..].copy_from_slice(h.as_slice());
        Ok(())
    }

    /// `(d zeta / dx) v`: Hessian times `v`, then the Hessian's directional
    /// derivative laid out column by column.
    pub fn zeta_jacobian_action(&self, x: &[f64], v: &[f64]) -> Result<ZetaVec> {
        self.check_dim(x)?;
        self.check_dim(v)?;
        if !self.caps.has_zeta_jacobian {
            return Err(Error::Unsupported("zeta jacobian action"));
        }
        let d = self.dim;
        let h = self.hessian(x)?;
        let hv = &h * DVector::from_column_slice(v);
        let dh = self.hessian_derivative(x, v);
        let mut out = Vec::with_capacity(d * d + d);
        out.extend_from_slice(hv.as_slice());
        out.extend_from_slice(dh.as_slice());
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("zeta jacobian action"));
        }
        ZetaVec::from_vec(d, out)
    }
}

/// Sum of the gradients of all objectives at a common point.
pub fn team_gradient(objs: &[LocalObjective], x: &[f64]) -> Result<Vec<f64>> {
    let mut total = vec![0.0; x.len()];
    let mut g = vec![0.0; x.len()];
    for f in objs {
        f.gradient_into(x, &mut g)?;
        for (t, gi) in total.iter_mut().zip(&g) {
            *t += gi;
        }
    }
    Ok(total)
}

pub fn team_value(objs: &[LocalObjective], x: &[f64]) -> Result<f64> {
    objs.iter().map(|f| f.value(x)).sum()
}

pub fn team_hessian(objs: &[LocalObjective], x: &[f64]) -> Result<DMatrix<f64>> {
    let d = x.len();
    let mut h = DMatrix::zeros(d, d);
    for f in objs {
        h += f.hessian(x)?;
    }
    Ok(h)
}

/// Minimizer of the team objective by damped Newton steps. Steps come from
/// an SVD least-squares solve, so a singular Hessian yields the minimum-norm
/// step (on a rank-deficient least-squares team started at zero this lands
/// on the minimum-norm minimizer).
pub fn team_minimize(objs: &[LocalObjective], x0: &[f64], grad_tol: f64, max_iter: usize) -> Result<RealVec> {
    let Some(first) = objs.first() else {
        return Err(Error::Parameter("no objectives".into()));
    };
    if x0.len() != first.dim() {
        return Err(Error::DimensionMismatch { expected: first.dim(), found: x0.len() });
    }
    let mut x = DVector::from_column_slice(x0);
    let mut fx = team_value(objs, x.as_slice())?;
    for _ in 0..max_iter {
        let g = DVector::from_vec(team_gradient(objs, x.as_slice())?);
        if g.norm() <= grad_tol {
            return RealVec::new(x.as_slice().to_vec());
        }
        let h = team_hessian(objs, x.as_slice())?;
        let eps = 1e-12 * h.amax().max(1e-300);
        let step = h
            .svd(true, true)
            .solve(&(-&g), eps)
            .map_err(|e| Error::Domain(e.to_string()))?;
        let slope = g.dot(&step);
        let step = if slope < 0.0 { step } else { -&g };
        let slope = g.dot(&step);
        let mut t = 1.0;
        loop {
            let cand = &x + &step * t;
            let fc = team_value(objs, cand.as_slice())?;
            if fc <= fx + 1e-4 * t * slope || t < 1e-12 {
                x = cand;
                fx = fc;
                break;
            }
            t *= 0.5;
        }
    }
    let g = team_gradient(objs, x.as_slice())?;
    let gn = crate::mathkit::norm(&g);
    if gn <= grad_tol * 1e3 {
        log::warn!("team_minimize stopped at |grad| = {gn:e}, above the requested {grad_tol:e}");
        return RealVec::new(x.as_slice().to_vec());
    }
    Err(Error::Domain(format!("team minimization did not converge (|grad| = {gn:e})")))
}

/// Labelled points split evenly across agents.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmDataset {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub agent: Vec<usize>,
    pub n_agents: usize,
    pub m: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SvmRow {
    z1: f64,
    z2: f64,
    label: i8,
    agent: usize,
}

impl SvmDataset {
    /// Points `(t, t) + label * s * (1, -1)/sqrt(2)` with `t ~ U(-5, 5)` and
    /// `s ~ U(0.5, 3)`, so the classes sit on either side of `x = y` with a
    /// margin.
    pub fn generate(n_agents: usize, m: usize, seed: u64) -> Result<Self> {
        if n_agents == 0 || m == 0 {
            return Err(Error::Parameter("need at least one agent and one point".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let mut points = Vec::with_capacity(n_agents * m);
        let mut labels = Vec::with_capacity(n_agents * m);
        let mut agent = Vec::with_capacity(n_agents * m);
        for i in 0..n_agents {
            for _ in 0..m {
                let l: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let t: f64 = rng.random_range(-5.0..5.0);
                let s: f64 = rng.random_range(0.5..3.0);
                points.push(vec![t + l * s * r, t - l * s * r]);
                labels.push(l);
                agent.push(i);
            }
        }
        Ok(Self { points, labels, agent, n_agents, m })
    }

    fn validate(&self) -> Result<()> {
        let total = self.points.len();
        if self.labels.len() != total || self.agent.len() != total {
            return Err(Error::Domain("points, labels and agents differ in length".into()));
        }
        if let Some(l) = self.labels.iter().find(|l| **l != 1.0 && **l != -1.0) {
            return Err(Error::Domain(format!("label {l} is not +1 or -1")));
        }
        for i in 0..self.n_agents {
            let count = self.agent.iter().filter(|a| **a == i).count();
            if count != self.m {
                return Err(Error::Domain(format!("agent {i} holds {count} points, expected {}", self.m)));
            }
        }
        if self.agent.iter().any(|a| *a >= self.n_agents) {
            return Err(Error::Domain("agent index out of range".into()));
        }
        Ok(())
    }

    /// Points and labels of agent `i` as a row matrix.
    pub fn agent_data(&self, i: usize) -> (DMatrix<f64>, Vec<f64>) {
        let idx: Vec<usize> = (0..self.points.len()).filter(|&k| self.agent[k] == i).collect();
        let d = self.points.first().map_or(0, Vec::len);
        let z = DMatrix::from_fn(idx.len(), d, |r, c| self.points[idx[r]][c]);
        let labels = idx.iter().map(|&k| self.labels[k]).collect();
        (z, labels)
    }

    pub fn objectives(&self, reg: f64, mu_s: f64) -> Result<Vec<LocalObjective>> {
        (0..self.n_agents)
            .map(|i| {
                let (z, l) = self.agent_data(i);
                LocalObjective::smoothed_hinge_svm(z, l, reg, mu_s)
            })
            .collect()
    }

    /// CSV with header `z1,z2,label,agent`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for k in 0..self.points.len() {
            let p = &self.points[k];
            if p.len() != 2 {
                return Err(Error::Unsupported("csv export is two-dimensional"));
            }
            wr.serialize(SvmRow { z1: p[0], z2: p[1], label: self.labels[k] as i8, agent: self.agent[k] })?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut agent = Vec::new();
        for row in rd.deserialize::<SvmRow>() {
            let row = row?;
            if !row.z1.is_finite() || !row.z2.is_finite() {
                return Err(Error::NonFinite("svm csv point"));
            }
            points.push(vec![row.z1, row.z2]);
            labels.push(f64::from(row.label));
            agent.push(row.agent);
        }
        if points.is_empty() {
            return Err(Error::Domain("empty dataset".into()));
        }
        let n_agents = agent.iter().max().map_or(0, |a| a + 1);
        let m = points.len() / n_agents;
        let ds = Self { points, labels, agent, n_agents, m };
        ds.validate()?;
        Ok(ds)
    }
}
