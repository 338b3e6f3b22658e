//! Continuous-time extended Kalman filter and the estimation-error bound.
//!
//! The filter integrates
//!
//! ```text
//! dx̂ = F(x̂,u) dt + K (dy − C x̂ dt)
//! dP = (A P + P Aᵀ + Q − P Cᵀ R⁻¹ C P) dt,    K = P Cᵀ R⁻¹,  A = ∂F/∂x (x̂,u)
//! ```
//!
//! with explicit Euler on the caller's step `dt`. When `dt·‖P Cᵀ R⁻¹ C‖`
//! is large (right after a diffuse initialisation) the step is split into
//! equal sub-steps so a single Euler update cannot overshoot the Riccati
//! flow; in steady state one sub-step is used and the update is the plain
//! Euler step.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{drift_eval, ControlAffine, MeasurementModel};
use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// Filter mean and covariance at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub t: f64,
}

impl EstimatorState {
    /// `ζᵀ P⁻¹ ζ` with `ζ = x − x̂`.
    pub fn normalized_error(&self, x: &DVector<f64>) -> Option<f64> {
        let zeta = x - &self.x_hat;
        let chol = self.p.clone().cholesky()?;
        Some(zeta.dot(&chol.solve(&zeta)))
    }

    pub fn error_norm(&self, x: &DVector<f64>) -> f64 {
        (x - &self.x_hat).norm()
    }
}

/// `x̂(0) = mean`, `P(0) = cov`.
pub fn ekf_init(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<EstimatorState> {
    check_dim("ekf_init covariance rows", mean.len(), cov.nrows())?;
    check_dim("ekf_init covariance cols", mean.len(), cov.ncols())?;
    if linalg::asymmetry(&cov) > 1e-12 * cov.amax().max(1.0) {
        return Err(Error::config("initial covariance must be symmetric"));
    }
    if !linalg::is_positive_definite(&cov) {
        return Err(Error::config("initial covariance must be positive definite"));
    }
    Ok(EstimatorState {
        x_hat: mean,
        p: cov,
        t: 0.0,
    })
}

/// `K = P Cᵀ R⁻¹`.
pub fn kalman_gain(p: &DMatrix<f64>, c: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("kalman_gain C cols", p.nrows(), c.ncols())?;
    check_dim("kalman_gain R size", c.nrows(), r.nrows())?;
    let chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::config("measurement covariance R is singular"))?;
    // K Rᵀ = P Cᵀ  ⇔  R Kᵀ = C P  (R symmetric)
    let kt = chol.solve(&(c * p));
    Ok(kt.transpose())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfConfig {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    c: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    /// `Cᵀ R⁻¹ C`
    info: DMatrix<f64>,
    info_norm: f64,
    /// Upper limit on `h·trace(P)·‖Cᵀ R⁻¹ C‖` per Euler sub-step.
    pub max_gain_step: f64,
    pub max_substeps: usize,
}

impl EkfConfig {
    /// `q` must be symmetric PSD, `r` symmetric PD.
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = c.ncols();
        check_dim("EkfConfig Q rows", n, q.nrows())?;
        check_dim("EkfConfig Q cols", n, q.ncols())?;
        check_dim("EkfConfig R size", c.nrows(), r.nrows())?;
        if linalg::asymmetry(&q) > 1e-12 * q.amax().max(1.0) || linalg::min_eigenvalue(&q) < -1e-12 {
            return Err(Error::config("process noise Q must be symmetric positive semidefinite"));
        }
        let chol = r
            .clone()
            .cholesky()
            .ok_or_else(|| Error::config("measurement noise R must be positive definite"))?;
        let r_inv = chol.inverse();
        let info = c.transpose() * &r_inv * &c;
        let info_norm = linalg::max_eigenvalue(&info).max(0.0);
        Ok(Self {
            q,
            r,
            c,
            r_inv,
            info,
            info_norm,
            max_gain_step: 0.25,
            max_substeps: 1000,
        })
    }

    /// `Q = G Gᵀ` from the model's diffusion at `t = 0`, `R = D Dᵀ`.
    pub fn from_models<M: ControlAffine + ?Sized>(model: &M, meas: &MeasurementModel) -> Result<Self> {
        let g = model.diffusion(0.0);
        let q = if g.ncols() == 0 {
            DMatrix::zeros(model.state_dim(), model.state_dim())
        } else {
            &g * g.transpose()
        };
        Self::new(q, meas.r().clone(), meas.c().clone())
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// Largest `q` with `Q ⪰ q·I`.
    pub fn q_floor(&self) -> f64 {
        linalg::min_eigenvalue(&self.q)
    }

    /// Largest `r` with `R ⪰ r·I`.
    pub fn r_floor(&self) -> f64 {
        linalg::min_eigenvalue(&self.r)
    }

    pub fn gain(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        p * self.c.transpose() * &self.r_inv
    }

    fn substeps(&self, p: &DMatrix<f64>, dt: f64) -> usize {
        let stiffness = dt * p.trace().max(0.0) * self.info_norm;
        if !(self.max_gain_step > 0.0) || !stiffness.is_finite() {
            return 1;
        }
        let n = libm::ceil(stiffness / self.max_gain_step) as usize;
        n.clamp(1, self.max_substeps.max(1))
    }
}

/// Advances the filter over `[t, t+dt]` with the rate-form observation `z`.
///
/// Fails with [`Error::FilterDivergence`] when `P` stops being positive
/// definite; the caller decides on a fallback.
pub fn ekf_step<M: ControlAffine + ?Sized>(
    st: &EstimatorState,
    cfg: &EkfConfig,
    model: &M,
    u: &DVector<f64>,
    z: &DVector<f64>,
    dt: f64,
) -> Result<EstimatorState> {
    if !(dt > 0.0) {
        return Err(Error::config("ekf_step requires dt > 0"));
    }
    check_dim("ekf_step observation", cfg.c.nrows(), z.len())?;
    check_dim("ekf_step state", cfg.c.ncols(), st.x_hat.len())?;

    let n_sub = cfg.substeps(&st.p, dt);
    let h = dt / n_sub as f64;
    let mut x_hat = st.x_hat.clone();
    let mut p = st.p.clone();
    for _ in 0..n_sub {
        let a = model.drift_jacobian(&x_hat, u);
        let k = cfg.gain(&p);
        let innovation = z - &cfg.c * &x_hat;
        let rate = drift_eval(model, &x_hat, u)?;
        x_hat += (rate + &k * innovation) * h;

        let ap = &a * &p;
        let dp = &ap + ap.transpose() + &cfg.q - &p * &cfg.info * &p;
        p = linalg::symmetrize(&(p + dp * h));
    }

    let t = st.t + dt;
    if !x_hat.iter().all(|v| v.is_finite()) || !linalg::is_positive_definite(&p) {
        return Err(Error::FilterDivergence { t });
    }
    Ok(EstimatorState { x_hat, p, t })
}

/// An EKF instance that resets its covariance when the Riccati step fails.
#[derive(Debug, Clone, PartialEq)]
pub struct ResettingEkf {
    pub cfg: EkfConfig,
    initial_cov: DMatrix<f64>,
    pub state: EstimatorState,
    pub resets: usize,
}

impl ResettingEkf {
    pub fn new(cfg: EkfConfig, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let state = ekf_init(mean, cov.clone())?;
        check_dim("ResettingEkf state", cfg.c.ncols(), state.x_hat.len())?;
        Ok(Self {
            cfg,
            initial_cov: cov,
            state,
            resets: 0,
        })
    }

    /// One filter step; returns `true` if the covariance had to be reset.
    ///
    /// On divergence the mean is propagated open loop and `P` goes back to
    /// its initial value.
    pub fn step<M: ControlAffine + ?Sized>(
        &mut self,
        model: &M,
        u: &DVector<f64>,
        z: &DVector<f64>,
        dt: f64,
    ) -> Result<bool> {
        match ekf_step(&self.state, &self.cfg, model, u, z, dt) {
            Ok(next) => {
                self.state = next;
                Ok(false)
            }
            Err(Error::FilterDivergence { .. }) => {
                let rate = drift_eval(model, &self.state.x_hat, u)?;
                self.state.x_hat += rate * dt;
                self.state.p = self.initial_cov.clone();
                self.state.t += dt;
                self.resets += 1;
                Ok(true)
            }
            Err(e) => Err(e),
        }
    }
}

/// How an [`ErrorBoundSpec`] was obtained.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundSource {
    Analytic,
    Calibrated,
}

/// `Pr{sup_t ‖x − x̂‖ ≤ epsilon} ≥ 1 − p_e`.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBoundSpec {
    pub epsilon: f64,
    pub p_e: f64,
    pub source: BoundSource,
}

impl ErrorBoundSpec {
    pub fn new(epsilon: f64, p_e: f64, source: BoundSource) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::config("error bound epsilon must be positive"));
        }
        if !(p_e > 0.0 && p_e < 1.0) {
            return Err(Error::config("tail probability p_e must lie in (0, 1)"));
        }
        Ok(Self { epsilon, p_e, source })
    }
}

/// `ε = (ρ̄·ε₀² / (ρ̲·p_e))^{1/2}`.
///
/// `rho_upper`, `rho_lower` bound the Riccati solution (`ρ̲ I ⪯ P ⪯ ρ̄ I`)
/// and `eps0` bounds the initial estimation error.
pub fn error_bound_epsilon(rho_upper: f64, rho_lower: f64, eps0: f64, p_e: f64) -> Result<f64> {
    if !(rho_upper > 0.0 && rho_lower > 0.0 && eps0 > 0.0 && p_e > 0.0 && p_e <= 1.0) {
        return Err(Error::config(
            "error_bound_epsilon needs positive rho bounds and eps0, and p_e in (0, 1]",
        ));
    }
    Ok(libm::sqrt(rho_upper * eps0 * eps0 / (rho_lower * p_e)))
}

/// Eigenvalue envelope `(ρ̲, ρ̄)` of a covariance trajectory.
pub fn covariance_envelope<'a, I>(ps: I) -> (f64, f64)
where
    I: IntoIterator<Item = &'a DMatrix<f64>>,
{
    ps.into_iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let eig = linalg::symmetrize(p).symmetric_eigen().eigenvalues;
        (lo.min(eig.min()), hi.max(eig.max()))
    })
}
