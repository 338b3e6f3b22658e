//! Dense convex QP for per-tick safety filters.
//!
//! ```text
//! minimize    ½ zᵀ P z + qᵀ z
//! subject to  A z ≤ ub,   lo ≤ z ≤ hi
//! ```
//!
//! `P` only has to be positive *semi*definite: the controller's slack and
//! rate variables enter the objective linearly. The solver is a primal
//! active-set method:
//!
//! * inequality rows are scaled to unit norm, box bounds become `±e_i` rows;
//! * a phase-1 LP (`min t` s.t. `A z − t ≤ ub`) finds a feasible start or
//!   proves infeasibility, with the row multipliers as certificate;
//! * each iteration minimises over the null space of the working set. Zero
//!   curvature directions with a descent slope are followed as rays to the
//!   nearest blocking constraint;
//! * ties in the ratio test go to the lowest constraint index, and after a
//!   run of degenerate steps the dropped constraint is the lowest-index one
//!   with a negative multiplier (Bland);
//! * at termination the KKT system of the final working set is re-solved
//!   once to polish `z` and the multipliers.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub ub: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl QpProblem {
    /// Checks dimensions, symmetry, `P ⪰ 0` (eigenvalues ≥ −1e-10) and
    /// `lo ≤ hi`.
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        a: DMatrix<f64>,
        ub: DVector<f64>,
        lo: DVector<f64>,
        hi: DVector<f64>,
    ) -> Result<Self> {
        let prob = Self { p, q, a, ub, lo, hi };
        prob.validate()?;
        Ok(prob)
    }

    /// Unconstrained-box problem with only inequality rows.
    pub fn with_rows(p: DMatrix<f64>, q: DVector<f64>, a: DMatrix<f64>, ub: DVector<f64>) -> Result<Self> {
        let k = q.len();
        Self::new(
            p,
            q,
            a,
            ub,
            DVector::from_element(k, f64::NEG_INFINITY),
            DVector::from_element(k, f64::INFINITY),
        )
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn n_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.q.len();
        check_dim("qp P rows", k, self.p.nrows())?;
        check_dim("qp P cols", k, self.p.ncols())?;
        check_dim("qp A cols", k, if self.a.nrows() == 0 { k } else { self.a.ncols() })?;
        check_dim("qp ub", self.a.nrows(), self.ub.len())?;
        check_dim("qp lo", k, self.lo.len())?;
        check_dim("qp hi", k, self.hi.len())?;
        let finite = self
            .p
            .iter()
            .chain(self.q.iter())
            .chain(self.a.iter())
            .all(|v| v.is_finite());
        if !finite || self.ub.iter().any(|v| v.is_nan()) {
            return Err(Error::config("qp data must be finite"));
        }
        if linalg::asymmetry(&self.p) > 1e-10 * self.p.amax().max(1.0) {
            return Err(Error::config("qp objective matrix P must be symmetric"));
        }
        if k > 0 && linalg::min_eigenvalue(&self.p) < -1e-10 {
            return Err(Error::config("qp objective matrix P must be positive semidefinite"));
        }
        for i in 0..k {
            if self.lo[i].is_nan() || self.hi[i].is_nan() || self.lo[i] > self.hi[i] {
                return Err(Error::config("qp box bounds need lo <= hi"));
            }
        }
        Ok(())
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.p * z)) + self.q.dot(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
    Unbounded,
}

/// Identifies one inequality of the problem.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConstraintId {
    Row(usize),
    Upper(usize),
    Lower(usize),
}

/// Multipliers in the original (unscaled) problem.
///
/// Stationarity reads `P z + q + Aᵀ·rows + upper − lower = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Duals {
    pub rows: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Duals {
    pub fn zeros(rows: usize, k: usize) -> Self {
        Self {
            rows: DVector::zeros(rows),
            lower: DVector::zeros(k),
            upper: DVector::zeros(k),
        }
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
    /// Magnitude of the most negative multiplier.
    pub dual: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.complementarity)
            .max(self.dual)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub status: QpStatus,
    pub objective: f64,
    pub duals: Duals,
    pub kkt: KktReport,
    pub iterations: usize,
    pub active: Vec<ConstraintId>,
    /// For infeasible problems: smallest achievable max row violation
    /// (unit-norm rows) and the phase-1 row multipliers.
    pub certificate: Option<InfeasibilityCertificate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfeasibilityCertificate {
    pub min_violation: f64,
    pub ray: DVector<f64>,
}

impl InfeasibilityCertificate {
    pub fn ray_norm(&self) -> f64 {
        self.ray.norm()
    }
}

/// Previous solution for the next, nearby problem.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub z: DVector<f64>,
    pub active: Vec<ConstraintId>,
}

impl From<&QpSolution> for WarmStart {
    fn from(s: &QpSolution) -> Self {
        Self {
            z: s.z.clone(),
            active: s.active.clone(),
        }
    }
}

/// Residuals of a primal/dual pair; see [`Duals`] for the sign convention.
pub fn kkt_residual(p: &QpProblem, z: &DVector<f64>, duals: &Duals) -> KktReport {
    let mut grad = &p.p * z + &p.q + &duals.upper - &duals.lower;
    if p.n_rows() > 0 {
        grad += p.a.transpose() * &duals.rows;
    }
    let stationarity = linalg::inf_norm(&grad);

    let mut primal = 0.0_f64;
    let mut comp = 0.0_f64;
    let mut dual = 0.0_f64;
    if p.n_rows() > 0 {
        let az = &p.a * z;
        for i in 0..p.n_rows() {
            let r = az[i] - p.ub[i];
            primal = primal.max(r);
            if duals.rows[i] != 0.0 {
                comp = comp.max((duals.rows[i] * r).abs());
            }
            dual = dual.max(-duals.rows[i]);
        }
    }
    for i in 0..p.dim() {
        if p.lo[i].is_finite() {
            let r = p.lo[i] - z[i];
            primal = primal.max(r);
            comp = comp.max((duals.lower[i] * r).abs());
        } else {
            comp = comp.max(duals.lower[i].abs());
        }
        if p.hi[i].is_finite() {
            let r = z[i] - p.hi[i];
            primal = primal.max(r);
            comp = comp.max((duals.upper[i] * r).abs());
        } else {
            comp = comp.max(duals.upper[i].abs());
        }
        dual = dual.max(-duals.lower[i]).max(-duals.upper[i]);
    }
    KktReport {
        stationarity,
        primal: primal.max(0.0),
        complementarity: comp,
        dual: dual.max(0.0),
    }
}

pub fn qp_solve(p: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    Solver::new(p, settings)?.solve(None)
}

/// Like [`qp_solve`], starting from a previous solution when it is still
/// feasible.
pub fn qp_solve_warm(p: &QpProblem, settings: &QpSettings, warm: &WarmStart) -> Result<QpSolution> {
    Solver::new(p, settings)?.solve(Some(warm))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Constraint {
    normal: DVector<f64>,
    rhs: f64,
    /// Original row norm; multipliers are divided by it on output.
    scale: f64,
    id: ConstraintId,
}

enum Outcome {
    Optimal,
    MaxIter,
    Unbounded,
}

struct ActiveSetResult {
    z: DVector<f64>,
    working: Vec<usize>,
    lambda: DVector<f64>,
    outcome: Outcome,
    iterations: usize,
}

struct Solver<'a> {
    prob: &'a QpProblem,
    settings: QpSettings,
    cons: Vec<Constraint>,
    /// A zero row with a negative bound makes the problem trivially infeasible.
    trivially_infeasible: Option<usize>,
}

impl<'a> Solver<'a> {
    fn new(prob: &'a QpProblem, settings: &QpSettings) -> Result<Self> {
        prob.validate()?;
        let k = prob.dim();
        let mut cons = Vec::with_capacity(prob.n_rows() + 2 * k);
        let mut trivially_infeasible = None;
        for i in 0..prob.n_rows() {
            let row = prob.a.row(i).transpose();
            let norm = row.norm();
            if norm <= 1e-14 {
                if prob.ub[i] < -settings.tol && trivially_infeasible.is_none() {
                    trivially_infeasible = Some(i);
                }
                continue;
            }
            if prob.ub[i] == f64::INFINITY {
                continue;
            }
            cons.push(Constraint {
                normal: row / norm,
                rhs: prob.ub[i] / norm,
                scale: norm,
                id: ConstraintId::Row(i),
            });
        }
        for i in 0..k {
            if prob.hi[i].is_finite() {
                let mut e = DVector::zeros(k);
                e[i] = 1.0;
                cons.push(Constraint {
                    normal: e,
                    rhs: prob.hi[i],
                    scale: 1.0,
                    id: ConstraintId::Upper(i),
                });
            }
        }
        for i in 0..k {
            if prob.lo[i].is_finite() {
                let mut e = DVector::zeros(k);
                e[i] = -1.0;
                cons.push(Constraint {
                    normal: e,
                    rhs: -prob.lo[i],
                    scale: 1.0,
                    id: ConstraintId::Lower(i),
                });
            }
        }
        Ok(Self {
            prob,
            settings: *settings,
            cons,
            trivially_infeasible,
        })
    }

    fn box_clip(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut out = z.clone();
        for i in 0..out.len() {
            out[i] = out[i].clamp(self.prob.lo[i], self.prob.hi[i]);
        }
        out
    }

    fn max_violation(&self, z: &DVector<f64>) -> f64 {
        self.cons
            .iter()
            .map(|c| c.normal.dot(z) - c.rhs)
            .fold(0.0_f64, f64::max)
    }

    fn feas_tol(&self) -> f64 {
        self.settings.tol * 1e-2
    }

    fn solve(&self, warm: Option<&WarmStart>) -> Result<QpSolution> {
        let k = self.prob.dim();
        if let Some(row) = self.trivially_infeasible {
            let mut ray = DVector::zeros(self.prob.n_rows());
            ray[row] = 1.0;
            return Ok(self.infeasible(DVector::zeros(k), -self.prob.ub[row], ray, 0));
        }

        let mut start: Option<(DVector<f64>, Vec<usize>)> = None;
        if let Some(w) = warm {
            if w.z.len() == k && self.max_violation(&w.z) <= self.feas_tol() {
                start = Some((w.z.clone(), self.warm_working_set(&w.z, &w.active)));
            }
        }
        let mut phase1_iters = 0;
        let (z0, w0) = match start {
            Some(s) => s,
            None => match self.phase_one()? {
                PhaseOne::Feasible(z, iters) => {
                    phase1_iters = iters;
                    (z, Vec::new())
                }
                PhaseOne::Infeasible {
                    z,
                    violation,
                    ray,
                    iters,
                } => {
                    return Ok(self.infeasible(z, violation, ray, iters));
                }
            },
        };

        let normals: Vec<&DVector<f64>> = self.cons.iter().map(|c| &c.normal).collect();
        let rhs: Vec<f64> = self.cons.iter().map(|c| c.rhs).collect();
        let res = active_set(&self.prob.p, &self.prob.q, &normals, &rhs, z0, w0, &self.settings);
        let iterations = res.iterations + phase1_iters;
        let status = match res.outcome {
            Outcome::Optimal => QpStatus::Optimal,
            Outcome::MaxIter => QpStatus::MaxIter,
            Outcome::Unbounded => QpStatus::Unbounded,
        };

        let (z, working, lambda) = if matches!(status, QpStatus::Optimal) {
            self.polish(res.z, res.working, res.lambda)
        } else {
            (res.z, res.working, res.lambda)
        };
        let duals = self.unscale_duals(&working, &lambda);
        let kkt = kkt_residual(self.prob, &z, &duals);
        let scale = self.prob.q.amax().max(self.prob.p.amax()).max(1.0);
        let status = match status {
            QpStatus::Optimal
                if kkt.primal > self.settings.tol
                    || kkt.stationarity > self.settings.tol * scale
                    || kkt.complementarity > self.settings.tol * scale
                    || kkt.dual > self.settings.tol * scale =>
            {
                QpStatus::MaxIter
            }
            s => s,
        };
        let mut active: Vec<ConstraintId> = working.iter().map(|&i| self.cons[i].id).collect();
        active.sort();
        Ok(QpSolution {
            objective: self.prob.objective(&z),
            z,
            status,
            duals,
            kkt,
            iterations,
            active,
            certificate: None,
        })
    }

    fn infeasible(&self, z: DVector<f64>, violation: f64, ray: DVector<f64>, iterations: usize) -> QpSolution {
        let duals = Duals::zeros(self.prob.n_rows(), self.prob.dim());
        let kkt = kkt_residual(self.prob, &z, &duals);
        QpSolution {
            objective: self.prob.objective(&z),
            z,
            status: QpStatus::Infeasible,
            duals,
            kkt,
            iterations,
            active: Vec::new(),
            certificate: Some(InfeasibilityCertificate {
                min_violation: violation,
                ray,
            }),
        }
    }

    fn warm_working_set(&self, z: &DVector<f64>, ids: &[ConstraintId]) -> Vec<usize> {
        let k = self.prob.dim();
        let mut working: Vec<usize> = Vec::new();
        let mut sorted: Vec<ConstraintId> = ids.to_vec();
        sorted.sort();
        for id in sorted {
            let Some(idx) = self.cons.iter().position(|c| c.id == id) else {
                continue;
            };
            let c = &self.cons[idx];
            if (c.normal.dot(z) - c.rhs).abs() > self.settings.tol || working.len() >= k {
                continue;
            }
            let mut trial = working.clone();
            trial.push(idx);
            let rows = stack_rows(&trial.iter().map(|&i| &self.cons[i].normal).collect::<Vec<_>>(), k);
            if linalg::rank(&rows, 1e-10) == trial.len() {
                working = trial;
            }
        }
        working
    }

    fn phase_one(&self) -> Result<PhaseOne> {
        let k = self.prob.dim();
        let z0 = self.box_clip(&DVector::zeros(k));
        let v0 = self.max_violation(&z0);
        if v0 <= self.feas_tol() {
            return Ok(PhaseOne::Feasible(z0, 0));
        }
        // Variables (z, t). Rows: n·z − t ≤ r for inequality rows; bounds
        // stay bounds; −t ≤ 0.
        let mut normals: Vec<DVector<f64>> = Vec::with_capacity(self.cons.len() + 1);
        let mut rhs = Vec::with_capacity(self.cons.len() + 1);
        for c in &self.cons {
            let mut n = DVector::zeros(k + 1);
            n.rows_mut(0, k).copy_from(&c.normal);
            if matches!(c.id, ConstraintId::Row(_)) {
                n[k] = -1.0;
            }
            normals.push(n);
            rhs.push(c.rhs);
        }
        let mut t_floor = DVector::zeros(k + 1);
        t_floor[k] = -1.0;
        normals.push(t_floor);
        rhs.push(0.0);

        let mut q = DVector::zeros(k + 1);
        q[k] = 1.0;
        let p = DMatrix::zeros(k + 1, k + 1);
        let mut start = DVector::zeros(k + 1);
        start.rows_mut(0, k).copy_from(&z0);
        start[k] = v0;
        let refs: Vec<&DVector<f64>> = normals.iter().collect();
        let settings = QpSettings {
            tol: self.settings.tol,
            max_iter: self.settings.max_iter.max(4 * (k + self.cons.len() + 1)),
        };
        let res = active_set(&p, &q, &refs, &rhs, start, Vec::new(), &settings);
        let z = res.z.rows(0, k).into_owned();
        let t = res.z[k];
        let violation = self.max_violation(&z);
        if violation <= self.feas_tol() {
            return Ok(PhaseOne::Feasible(z, res.iterations));
        }
        if matches!(res.outcome, Outcome::MaxIter) && t > self.feas_tol() && violation < v0 {
            // Not proven; fall through as infeasible with the best point.
        }
        let mut ray = DVector::zeros(self.prob.n_rows());
        for (pos, &ci) in res.working.iter().enumerate() {
            if let Some(c) = self.cons.get(ci) {
                if let ConstraintId::Row(r) = c.id {
                    ray[r] = res.lambda[pos] / c.scale;
                }
            }
        }
        Ok(PhaseOne::Infeasible {
            z,
            violation: t.max(violation),
            ray,
            iters: res.iterations,
        })
    }

    /// Polishes the final working set in three stages: least-norm projection
    /// onto the active constraints, a reduced Newton step in their null
    /// space, then least-squares multipliers. Staging avoids the saddle-point
    /// system, whose conditioning degrades with the slack penalty's scale.
    /// The result is kept only if it is still primal and dual feasible and
    /// does not raise the objective.
    fn polish(
        &self,
        z: DVector<f64>,
        working: Vec<usize>,
        lambda: DVector<f64>,
    ) -> (DVector<f64>, Vec<usize>, DVector<f64>) {
        let k = self.prob.dim();
        let gw = stack_rows(&working.iter().map(|&i| &self.cons[i].normal).collect::<Vec<_>>(), k);
        let mut z_new = z.clone();
        if !working.is_empty() {
            let h = DVector::from_iterator(working.len(), working.iter().map(|&i| self.cons[i].rhs));
            let resid = &h - &gw * &z_new;
            let Ok(d) = gw.clone().svd(true, true).solve(&resid, 1e-12) else {
                return (z, working, lambda);
            };
            z_new += d;
        }
        let basis = linalg::null_space(&gw, k, 1e-12);
        if basis.ncols() > 0 {
            let g = &self.prob.p * &z_new + &self.prob.q;
            let hr = linalg::symmetrize(&(basis.transpose() * &self.prob.p * &basis));
            let gr = basis.transpose() * g;
            let eig = hr.symmetric_eigen();
            let curv_tol = 1e-11 * self.prob.p.amax().max(1.0);
            let mut w = DVector::zeros(gr.len());
            for j in 0..eig.eigenvalues.len() {
                if eig.eigenvalues[j] > curv_tol {
                    let v = eig.eigenvectors.column(j);
                    w -= v * (v.dot(&gr) / eig.eigenvalues[j]);
                }
            }
            z_new += &basis * w;
        }
        for &ci in &working {
            match self.cons[ci].id {
                ConstraintId::Upper(i) => z_new[i] = self.prob.hi[i],
                ConstraintId::Lower(i) => z_new[i] = self.prob.lo[i],
                ConstraintId::Row(_) => {}
            }
        }
        let lambda_new = if working.is_empty() {
            DVector::zeros(0)
        } else {
            working_multipliers(&gw, &(&self.prob.p * &z_new + &self.prob.q))
        };

        let gscale = self.prob.q.amax().max(1.0);
        let f_old = self.prob.objective(&z);
        let ok_finite = z_new.iter().chain(lambda_new.iter()).all(|v| v.is_finite());
        let ok_primal = self.max_violation(&z_new) <= self.feas_tol().max(self.max_violation(&z));
        let ok_dual = lambda_new.iter().all(|&l| l >= -1e-9 * gscale);
        let ok_obj = self.prob.objective(&z_new) <= f_old + 1e-10 * f_old.abs().max(1.0);
        if ok_finite && ok_primal && ok_dual && ok_obj {
            let lambda_new = lambda_new.map(|l| l.max(0.0));
            (z_new, working, lambda_new)
        } else {
            (z, working, lambda)
        }
    }

    fn unscale_duals(&self, working: &[usize], lambda: &DVector<f64>) -> Duals {
        let mut d = Duals::zeros(self.prob.n_rows(), self.prob.dim());
        for (pos, &ci) in working.iter().enumerate() {
            let c = &self.cons[ci];
            let l = lambda[pos];
            match c.id {
                ConstraintId::Row(r) => d.rows[r] = l / c.scale,
                ConstraintId::Upper(i) => d.upper[i] = l,
                ConstraintId::Lower(i) => d.lower[i] = l,
            }
        }
        d
    }
}

enum PhaseOne {
    Feasible(DVector<f64>, usize),
    Infeasible {
        z: DVector<f64>,
        violation: f64,
        ray: DVector<f64>,
        iters: usize,
    },
}

fn stack_rows(rows: &[&DVector<f64>], k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows.len(), k);
    for (i, r) in rows.iter().enumerate() {
        m.set_row(i, &r.transpose());
    }
    m
}

/// Multipliers `λ` minimising `‖G_Wᵀ λ + g‖`.
fn working_multipliers(gw: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let gram = gw * gw.transpose();
    let rhs = -(gw * g);
    match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(gw.nrows())),
    }
}

/// Primal active-set iterations from a feasible `z` with working set `w`.
fn active_set(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    normals: &[&DVector<f64>],
    rhs: &[f64],
    mut z: DVector<f64>,
    mut working: Vec<usize>,
    settings: &QpSettings,
) -> ActiveSetResult {
    let k = q.len();
    let p_scale = p.amax().max(1.0);
    let mut degenerate_streak = 0usize;
    let mut in_working = alloc::vec![false; normals.len()];
    for &i in &working {
        in_working[i] = true;
    }

    for iter in 0..settings.max_iter {
        let g = p * &z + q;
        let g_scale = linalg::inf_norm(&g).max(1.0);
        let gw = stack_rows(&working.iter().map(|&i| normals[i]).collect::<Vec<_>>(), k);
        let basis = linalg::null_space(&gw, k, 1e-12);

        let mut step = DVector::zeros(k);
        let mut ray = false;
        if basis.ncols() > 0 {
            let hr = basis.transpose() * p * &basis;
            let gr = basis.transpose() * &g;
            let eig = linalg::symmetrize(&hr).symmetric_eigen();
            let curv_tol = 1e-11 * p_scale;
            let mut flat = DVector::zeros(gr.len());
            let mut newton = DVector::zeros(gr.len());
            for j in 0..eig.eigenvalues.len() {
                let v = eig.eigenvectors.column(j);
                let coef = v.dot(&gr);
                if eig.eigenvalues[j] <= curv_tol {
                    flat += v * coef;
                } else {
                    newton += v * (coef / eig.eigenvalues[j]);
                }
            }
            if linalg::inf_norm(&flat) > 1e-10 * g_scale {
                step = -(&basis * flat);
                ray = true;
            } else {
                step = -(&basis * newton);
            }
        }

        let z_scale = linalg::inf_norm(&z).max(1.0);
        if linalg::inf_norm(&step) <= 1e-13 * z_scale {
            if working.is_empty() {
                return ActiveSetResult {
                    z,
                    working,
                    lambda: DVector::zeros(0),
                    outcome: Outcome::Optimal,
                    iterations: iter,
                };
            }
            let lambda = working_multipliers(&gw, &g);
            let dual_tol = 1e-10 * g_scale;
            let mut drop: Option<usize> = None;
            if degenerate_streak >= 3 {
                // Bland: lowest constraint index with a negative multiplier.
                let mut best_idx = usize::MAX;
                for (pos, &ci) in working.iter().enumerate() {
                    if lambda[pos] < -dual_tol && ci < best_idx {
                        best_idx = ci;
                        drop = Some(pos);
                    }
                }
            } else {
                let mut most = -dual_tol;
                for (pos, &ci) in working.iter().enumerate() {
                    let better =
                        lambda[pos] < most || (drop.is_some() && lambda[pos] == most && ci < working[drop.unwrap()]);
                    if better {
                        most = lambda[pos];
                        drop = Some(pos);
                    }
                }
            }
            match drop {
                None => {
                    return ActiveSetResult {
                        z,
                        working,
                        lambda,
                        outcome: Outcome::Optimal,
                        iterations: iter,
                    }
                }
                Some(pos) => {
                    let ci = working.remove(pos);
                    in_working[ci] = false;
                    continue;
                }
            }
        }

        // Ratio test.
        let step_norm = step.norm();
        let mut alpha = if ray { f64::INFINITY } else { 1.0 };
        let mut blocking: Option<usize> = None;
        for (i, n) in normals.iter().enumerate() {
            if in_working[i] {
                continue;
            }
            let d = n.dot(&step);
            if d <= 1e-12 * step_norm {
                continue;
            }
            let slack = (rhs[i] - n.dot(&z)).max(0.0);
            let a = slack / d;
            if a < alpha {
                alpha = a;
                blocking = Some(i);
            }
        }
        if alpha.is_infinite() {
            return ActiveSetResult {
                z,
                working,
                lambda: DVector::zeros(0),
                outcome: Outcome::Unbounded,
                iterations: iter,
            };
        }
        z += &step * alpha;
        if let Some(b) = blocking {
            working.push(b);
            in_working[b] = true;
        }
        if alpha * step_norm <= 1e-14 * z_scale {
            degenerate_streak += 1;
        } else {
            degenerate_streak = 0;
        }
    }
    let g = p * &z + q;
    let gw = stack_rows(&working.iter().map(|&i| normals[i]).collect::<Vec<_>>(), k);
    let lambda = if working.is_empty() {
        DVector::zeros(0)
    } else {
        working_multipliers(&gw, &g)
    };
    ActiveSetResult {
        z,
        working,
        lambda,
        outcome: Outcome::MaxIter,
        iterations: settings.max_iter,
    }
}
