//! Control-affine SDEs `dx = (f(x) + g(x)u)dt + G(t)dw` with linear noisy
//! measurements `dy = Cx dt + D dv`, plus the highway models.

use alloc::boxed::Box;
use core::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// A control-affine stochastic system.
pub trait ControlAffine {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    /// `f(x)`.
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;

    /// `g(x)`, `state_dim × input_dim`.
    fn input_map(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// `G(t)`, `state_dim × noise_dim`.
    fn diffusion(&self, t: f64) -> DMatrix<f64>;

    /// `∂F/∂x` at `(x, u)` where `F = f + g·u`.
    ///
    /// The default uses central differences; models with a closed form
    /// override it.
    fn drift_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let h = 1e-6 * x[j].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fp = self.drift(&xp) + self.input_map(&xp) * u;
            let fm = self.drift(&xm) + self.input_map(&xm) * u;
            jac.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        jac
    }
}

/// `F(x, u) = f(x) + g(x)·u`.
pub fn drift_eval<M: ControlAffine + ?Sized>(model: &M, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("drift_eval state", model.state_dim(), x.len())?;
    check_dim("drift_eval input", model.input_dim(), u.len())?;
    let f = model.drift(x);
    check_dim("drift output", model.state_dim(), f.len())?;
    if model.input_dim() == 0 {
        return Ok(f);
    }
    let g = model.input_map(x);
    check_dim("input_map rows", model.state_dim(), g.nrows())?;
    check_dim("input_map cols", model.input_dim(), g.ncols())?;
    Ok(f + g * u)
}

/// One Euler-Maruyama step: `x + F(x,u)·dt + G(t)·dw`.
///
/// `dw` must be a Wiener increment over `dt`, i.e. drawn with covariance
/// `dt·I` by the caller's noise stream.
pub fn euler_maruyama_step<M: ControlAffine + ?Sized>(
    model: &M,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    dw: &DVector<f64>,
) -> Result<DVector<f64>> {
    if !(dt > 0.0) {
        return Err(Error::config("euler_maruyama_step requires dt > 0"));
    }
    check_dim("noise increment", model.noise_dim(), dw.len())?;
    let rate = drift_eval(model, x, u)?;
    let mut next = x + rate * dt;
    if model.noise_dim() > 0 {
        next += model.diffusion(t) * dw;
    }
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::IntegrationBlowup {
            t: t + dt,
            state: next.iter().copied().collect(),
        })
    }
}

type VecFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatFn = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type TimeMatFn = Box<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// Closure-backed control-affine model.
pub struct DynamicsModel {
    state_dim: usize,
    input_dim: usize,
    noise_dim: usize,
    drift: VecFn,
    input_map: MatFn,
    diffusion: TimeMatFn,
}

impl fmt::Debug for DynamicsModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicsModel")
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("noise_dim", &self.noise_dim)
            .finish_non_exhaustive()
    }
}

impl DynamicsModel {
    pub fn new(
        state_dim: usize,
        input_dim: usize,
        noise_dim: usize,
        drift: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        input_map: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        diffusion: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if state_dim == 0 {
            return Err(Error::config("state_dim must be positive"));
        }
        Ok(Self {
            state_dim,
            input_dim,
            noise_dim,
            drift: Box::new(drift),
            input_map: Box::new(input_map),
            diffusion: Box::new(diffusion),
        })
    }

    /// Linear time-invariant model `dx = (A x + B u) dt + G dw`.
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || b.nrows() != n || g.nrows() != n {
            return Err(Error::config("linear model: A must be square and B, G share its rows"));
        }
        let (m, w) = (b.ncols(), g.ncols());
        Self::new(n, m, w, move |x| &a * x, move |_| b.clone(), move |_| g.clone())
    }
}

impl ControlAffine for DynamicsModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }
    fn input_map(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.input_map)(x)
    }
    fn diffusion(&self, t: f64) -> DMatrix<f64> {
        (self.diffusion)(t)
    }
}

/// Linear measurement `dy = C x dt + D dv` with `R = D·Dᵀ ≻ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl MeasurementModel {
    pub fn new(c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        if d.nrows() != c.nrows() {
            return Err(Error::Dimension {
                context: "measurement D rows",
                expected: c.nrows(),
                actual: d.nrows(),
            });
        }
        let r = &d * d.transpose();
        if !linalg::is_positive_definite(&r) {
            return Err(Error::config("measurement R = D·Dᵀ must be positive definite"));
        }
        Ok(Self { c, d, r })
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.c.ncols()
    }

    pub fn noise_dim(&self) -> usize {
        self.d.ncols()
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    /// `R = D·Dᵀ`.
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// Rate-form observation over `[t, t+dt]`: `z = C·x + D·dv/dt`.
    ///
    /// With `dv ~ N(0, dt·I)` the noise part has covariance `D·Dᵀ/dt`.
    pub fn sample(&self, x: &DVector<f64>, dt: f64, dv: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("measurement state", self.state_dim(), x.len())?;
        check_dim("measurement noise", self.noise_dim(), dv.len())?;
        Ok(&self.c * x + &self.d * dv / dt)
    }
}

/// See [`MeasurementModel::sample`].
pub fn measurement_sample(
    meas: &MeasurementModel,
    x: &DVector<f64>,
    dt: f64,
    dv: &DVector<f64>,
) -> Result<DVector<f64>> {
    meas.sample(x, dt, dv)
}

// ---------------------------------------------------------------------------
// Unicycle ego vehicle.

/// `[u1·cosθ, u1·sinθ, u2]` for `x_r = [p_x, p_y, θ]`, `u = [u1, u2]`.
pub fn unicycle_rhs(x_r: &[f64; 3], u: &[f64; 2]) -> [f64; 3] {
    let (s, c) = (libm::sin(x_r[2]), libm::cos(x_r[2]));
    [u[0] * c, u[0] * s, u[1]]
}

/// Noise-free unicycle as a [`ControlAffine`] model.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Unicycle;

impl ControlAffine for Unicycle {
    fn state_dim(&self) -> usize {
        3
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn noise_dim(&self) -> usize {
        0
    }
    fn drift(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(3)
    }
    fn input_map(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (s, c) = (libm::sin(x[2]), libm::cos(x[2]));
        DMatrix::from_row_slice(3, 2, &[c, 0.0, s, 0.0, 0.0, 1.0])
    }
    fn diffusion(&self, _t: f64) -> DMatrix<f64> {
        DMatrix::zeros(3, 0)
    }
    fn drift_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let (s, c) = (libm::sin(x[2]), libm::cos(x[2]));
        DMatrix::from_row_slice(3, 3, &[0.0, 0.0, -u[0] * s, 0.0, 0.0, u[0] * c, 0.0, 0.0, 0.0])
    }
}

// ---------------------------------------------------------------------------
// Near-identity diffeomorphism.

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearIdentityTransform {
    l: f64,
}

/// Ego state after the near-identity shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformedEgo {
    /// `[p̄_x, p̄_y, θ]`.
    pub state: [f64; 3],
    /// 3×2 input matrix of the shifted dynamics, row-major.
    pub input_matrix: [[f64; 2]; 3],
}

impl TransformedEgo {
    pub fn position(&self) -> [f64; 2] {
        [self.state[0], self.state[1]]
    }

    /// Upper 2×2 block acting on the shifted position.
    pub fn planar_block(&self) -> [[f64; 2]; 2] {
        [self.input_matrix[0], self.input_matrix[1]]
    }

    pub fn input_matrix_dm(&self) -> DMatrix<f64> {
        let m = &self.input_matrix;
        DMatrix::from_row_slice(3, 2, &[m[0][0], m[0][1], m[1][0], m[1][1], m[2][0], m[2][1]])
    }
}

impl NearIdentityTransform {
    pub fn new(l: f64) -> Result<Self> {
        if l > 0.0 && l.is_finite() {
            Ok(Self { l })
        } else {
            Err(Error::config("near-identity offset l must be strictly positive"))
        }
    }

    pub fn offset(&self) -> f64 {
        self.l
    }

    /// `p̄_r = p_r + l·(cosθ, sinθ)` together with the shifted input matrix
    /// `[[cosθ, -l sinθ], [sinθ, l cosθ], [0, 1]]`.
    pub fn forward(&self, x_r: &[f64; 3]) -> TransformedEgo {
        let (s, c) = (libm::sin(x_r[2]), libm::cos(x_r[2]));
        let l = self.l;
        TransformedEgo {
            state: [x_r[0] + l * c, x_r[1] + l * s, x_r[2]],
            input_matrix: [[c, -l * s], [s, l * c], [0.0, 1.0]],
        }
    }
}

/// See [`NearIdentityTransform::forward`].
pub fn near_identity_forward(x_r: &[f64; 3], t: &NearIdentityTransform) -> TransformedEgo {
    t.forward(x_r)
}

// ---------------------------------------------------------------------------
// Highway traffic agents.

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficParams {
    /// Desired highway velocity (m/s).
    pub v_d: f64,
    pub c1: f64,
    /// Decay of the ego interaction with squared distance; must be positive.
    pub c2: f64,
    /// Diffusion is `g_scale · I₃`.
    pub g_scale: f64,
}

impl Default for TrafficParams {
    fn default() -> Self {
        Self {
            v_d: 1.0,
            c1: 1.0,
            c2: 1.0,
            g_scale: 0.1,
        }
    }
}

impl TrafficParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c2 > 0.0) || !(self.c1 >= 0.0) {
            return Err(Error::config("traffic constants need c1 >= 0 and c2 > 0"));
        }
        if !(self.g_scale >= 0.0) || !self.v_d.is_finite() {
            return Err(Error::config("traffic g_scale must be >= 0 and v_d finite"));
        }
        Ok(())
    }

    /// Bound on `|dx · exp(c1 - c2‖d‖²)|` over all relative positions.
    pub fn max_interaction(&self) -> f64 {
        libm::exp(self.c1) / libm::sqrt(2.0 * core::f64::consts::E * self.c2)
    }
}

/// Drift of agent `x_o = [p_x, p_y, v]` reacting to the ego at `p_r`.
///
/// `p_r = None` removes the ego (the interaction term vanishes).
pub fn traffic_drift(x_o: &[f64; 3], p_r: Option<&[f64; 2]>, params: &TrafficParams) -> [f64; 3] {
    let interaction = match p_r {
        Some(p) => {
            let dx = x_o[0] - p[0];
            let dy = x_o[1] - p[1];
            dx * libm::exp(params.c1 - params.c2 * (dx * dx + dy * dy))
        }
        None => 0.0,
    };
    [x_o[2], 0.0, params.v_d + interaction - x_o[2]]
}

/// `∂(traffic_drift)/∂x_o`, row-major 3×3.
pub fn traffic_jacobian(x_o: &[f64; 3], p_r: Option<&[f64; 2]>, params: &TrafficParams) -> [[f64; 3]; 3] {
    let (dvx, dvy) = match p_r {
        Some(p) => {
            let dx = x_o[0] - p[0];
            let dy = x_o[1] - p[1];
            let e = libm::exp(params.c1 - params.c2 * (dx * dx + dy * dy));
            (e * (1.0 - 2.0 * params.c2 * dx * dx), -2.0 * params.c2 * dx * dy * e)
        }
        None => (0.0, 0.0),
    };
    [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [dvx, dvy, -1.0]]
}

/// In-place Euler-Maruyama step of one agent; `dw` is the Wiener increment.
#[inline]
pub fn traffic_em_step(x_o: &mut [f64; 3], p_r: Option<&[f64; 2]>, params: &TrafficParams, dt: f64, dw: &[f64; 3]) {
    let f = traffic_drift(x_o, p_r, params);
    for i in 0..3 {
        x_o[i] += f[i] * dt + params.g_scale * dw[i];
    }
}

/// A traffic agent as a [`ControlAffine`] model with no control input.
///
/// The ego position enters as a known parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficAgent {
    pub params: TrafficParams,
    pub ego: Option<[f64; 2]>,
}

impl TrafficAgent {
    pub fn new(params: TrafficParams, ego: Option<[f64; 2]>) -> Self {
        Self { params, ego }
    }
}

fn arr3(x: &DVector<f64>) -> [f64; 3] {
    [x[0], x[1], x[2]]
}

impl ControlAffine for TrafficAgent {
    fn state_dim(&self) -> usize {
        3
    }
    fn input_dim(&self) -> usize {
        0
    }
    fn noise_dim(&self) -> usize {
        3
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let f = traffic_drift(&arr3(x), self.ego.as_ref(), &self.params);
        DVector::from_row_slice(&f)
    }
    fn input_map(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(3, 0)
    }
    fn diffusion(&self, _t: f64) -> DMatrix<f64> {
        DMatrix::identity(3, 3) * self.params.g_scale
    }
    fn drift_jacobian(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        let j = traffic_jacobian(&arr3(x), self.ego.as_ref(), &self.params);
        DMatrix::from_fn(3, 3, |r, c| j[r][c])
    }
}

/// Position-only measurement of a traffic agent.
pub fn position_selector() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
}

/// Collects a slice into a `DVector`.
pub fn dvec(values: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(values)
}
