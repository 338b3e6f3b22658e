//! Exponential barrier functions over inflated unsafe sets, the generator
//! inequality they induce on the input, and the `(a, b)` risk budgets.
//!
//! With `h̄ = h − h_ε` the barrier is `B = exp(−α h̄)`. Along the filter's
//! estimate SDE `dx̂ = (F + K C ζ) dt + K D dv`, the generator of `B` is
//! bounded by
//!
//! ```text
//! ∂B·F + ε ‖∂B_o K C‖ + ½ tr(Dᵀ Kᵀ ∂²B_o K D)  ≤  −a B + b
//! ```
//!
//! where the `_o` blocks only involve the estimated agent coordinates; the
//! ego enters through its deterministic transformed dynamics.

use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// Stand-in bound for rows whose formula is undefined (`B0 ≥ 1` under
/// family B, empty `a`-interval under family C).
pub const DEGENERATE_BOUND: f64 = 1e3;

/// Default ceiling for `B` when `h̄` is very negative.
pub const DEFAULT_CEILING: f64 = 1e12;

/// `h(x) = ‖S x‖² − r²`: the distance between selected coordinates is at
/// most `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormBall {
    pub selector: DMatrix<f64>,
    pub radius: f64,
    /// State coordinates that carry estimation error. `None` means all.
    pub uncertain: Option<Vec<usize>>,
}

impl NormBall {
    pub fn new(selector: DMatrix<f64>, radius: f64, uncertain: Option<Vec<usize>>) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::config("norm-ball radius must be positive"));
        }
        if let Some(cols) = &uncertain {
            if cols.iter().any(|&c| c >= selector.ncols()) {
                return Err(Error::config("uncertain coordinate out of range"));
            }
        }
        Ok(Self {
            selector,
            radius,
            uncertain,
        })
    }

    /// Ego/agent pair on the joint state `[p̄x, p̄y, θ, pox, poy, vo]`; the
    /// agent block is the uncertain one.
    pub fn ego_agent(radius: f64) -> Result<Self> {
        let s = DMatrix::from_row_slice(2, 6, &[1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0]);
        Self::new(s, radius, Some(alloc::vec![3, 4, 5]))
    }

    /// Spectral norm of the selector restricted to the uncertain columns:
    /// how far `S x` moves per unit of estimation error.
    pub fn error_gain(&self) -> f64 {
        match &self.uncertain {
            None => linalg::spectral_norm(&self.selector),
            Some(cols) => {
                let sub = DMatrix::from_fn(self.selector.nrows(), cols.len(), |i, j| self.selector[(i, cols[j])]);
                linalg::spectral_norm(&sub)
            }
        }
    }
}

type ScalarFn = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;
type VectorFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type MatrixFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// Arbitrary `h` with user-supplied derivatives and a search box for the
/// grid margin.
#[derive(Clone)]
pub struct GenericSet {
    dim: usize,
    h: Arc<ScalarFn>,
    grad: Arc<VectorFn>,
    hess: Arc<MatrixFn>,
    pub domain_lo: DVector<f64>,
    pub domain_hi: DVector<f64>,
}

impl fmt::Debug for GenericSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GenericSet")
            .field("dim", &self.dim)
            .field("domain_lo", &self.domain_lo)
            .field("domain_hi", &self.domain_hi)
            .finish_non_exhaustive()
    }
}

impl GenericSet {
    pub fn new(
        dim: usize,
        h: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        hess: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        domain_lo: DVector<f64>,
        domain_hi: DVector<f64>,
    ) -> Result<Self> {
        check_dim("generic set domain_lo", dim, domain_lo.len())?;
        check_dim("generic set domain_hi", dim, domain_hi.len())?;
        if domain_lo.iter().zip(domain_hi.iter()).any(|(l, h)| !(l < h)) {
            return Err(Error::config("generic set domain needs lo < hi"));
        }
        Ok(Self {
            dim,
            h: Arc::new(h),
            grad: Arc::new(grad),
            hess: Arc::new(hess),
            domain_lo,
            domain_hi,
        })
    }
}

#[derive(Debug, Clone)]
pub enum UnsafeSetSpec {
    NormBall(NormBall),
    Generic(GenericSet),
}

impl UnsafeSetSpec {
    pub fn dim(&self) -> usize {
        match self {
            Self::NormBall(b) => b.selector.ncols(),
            Self::Generic(g) => g.dim,
        }
    }

    pub fn h(&self, x: &DVector<f64>) -> f64 {
        match self {
            Self::NormBall(b) => (&b.selector * x).norm_squared() - b.radius * b.radius,
            Self::Generic(g) => (g.h)(x),
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::NormBall(b) => b.selector.transpose() * (&b.selector * x) * 2.0,
            Self::Generic(g) => (g.grad)(x),
        }
    }

    pub fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            Self::NormBall(b) => b.selector.transpose() * &b.selector * 2.0,
            Self::Generic(g) => (g.hess)(x),
        }
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.h(x) <= 0.0
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "mode"))]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum MarginMode {
    /// Closed form for norm balls.
    #[default]
    Analytic,
    /// Search over the ε-neighbourhood of a gridded unsafe set.
    Grid { cells: usize, directions: usize },
    /// `h_ε = ε²`.
    EpsilonSquared,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margin {
    pub h_eps: f64,
    /// Bound on how much the grid search may have missed; 0 for closed forms.
    pub resolution: f64,
    /// Set when the resolution is large relative to the margin itself.
    pub coarse: bool,
}

/// `h_ε = sup { h(x) : ‖x − x′‖ ≤ ε, h(x′) ≤ 0 }`, or `ε²` in compat mode.
pub fn safety_margin(unsafe_set: &UnsafeSetSpec, eps: f64, mode: MarginMode) -> Result<Margin> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::config("epsilon must be nonnegative"));
    }
    let exact = |h_eps| Margin {
        h_eps,
        resolution: 0.0,
        coarse: false,
    };
    match mode {
        MarginMode::EpsilonSquared => Ok(exact(eps * eps)),
        MarginMode::Analytic => match unsafe_set {
            UnsafeSetSpec::NormBall(b) => {
                let r = b.radius;
                let reach = r + b.error_gain() * eps;
                Ok(exact(reach * reach - r * r))
            }
            UnsafeSetSpec::Generic(_) => Err(Error::config("analytic margin needs a norm-ball unsafe set")),
        },
        MarginMode::Grid { cells, directions } => grid_margin(unsafe_set, eps, cells, directions),
    }
}

/// Box domain used by the grid search for a norm ball: the selected
/// coordinates are searched over `[−(r+ε), r+ε]` with the others fixed at 0.
fn grid_domain(unsafe_set: &UnsafeSetSpec, eps: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    match unsafe_set {
        UnsafeSetSpec::Generic(g) => Ok((g.domain_lo.clone(), g.domain_hi.clone())),
        UnsafeSetSpec::NormBall(b) => {
            let n = b.selector.ncols();
            let span = 1.5 * (b.radius + eps);
            Ok((DVector::from_element(n, -span), DVector::from_element(n, span)))
        }
    }
}

/// For every grid point of the unsafe set that sits on its boundary, probe
/// `h` on rays of length up to ε in a set of directions. The result is
/// padded by the local gradient norm times the sampling gap.
fn grid_margin(unsafe_set: &UnsafeSetSpec, eps: f64, cells: usize, directions: usize) -> Result<Margin> {
    if cells < 2 || directions < 1 {
        return Err(Error::config("grid margin needs cells >= 2 and directions >= 1"));
    }
    let (lo, hi) = grid_domain(unsafe_set, eps)?;
    let n = lo.len();
    if n == 0 || n > 4 {
        return Err(Error::config("grid margin supports 1 to 4 dimensions"));
    }
    let step = DVector::from_fn(n, |i, _| (hi[i] - lo[i]) / cells as f64);
    let points_per_dim = cells + 1;
    let total = points_per_dim.pow(n as u32);

    let point = |mut idx: usize| {
        let mut x = DVector::zeros(n);
        for d in 0..n {
            x[d] = lo[d] + step[d] * (idx % points_per_dim) as f64;
            idx /= points_per_dim;
        }
        x
    };
    let inside: Vec<bool> = (0..total).map(|i| unsafe_set.h(&point(i)) <= 0.0).collect();

    // Unit directions: normalised points on the surface of [−1, 1]^n.
    let mut dirs: Vec<DVector<f64>> = Vec::new();
    let per = directions.max(1) + 1;
    let count = per.pow(n as u32);
    for mut idx in 0..count {
        let mut v = DVector::zeros(n);
        let mut on_face = false;
        for d in 0..n {
            let k = idx % per;
            idx /= per;
            v[d] = -1.0 + 2.0 * k as f64 / (per - 1) as f64;
            on_face |= k == 0 || k == per - 1;
        }
        if on_face {
            dirs.push(v.normalize());
        }
    }
    let ray_steps = directions.max(2);
    let angle_gap = core::f64::consts::PI / directions as f64;
    let cell_gap = step.norm() * 0.5;

    let mut best = 0.0_f64;
    let mut pad = 0.0_f64;
    let mut any_inside = false;
    for idx in 0..total {
        if !inside[idx] {
            continue;
        }
        any_inside = true;
        // Boundary test: any axis neighbour outside (or off the grid).
        let mut boundary = false;
        let mut stride = 1;
        for _ in 0..n {
            let coord = (idx / stride) % points_per_dim;
            if coord == 0 || coord == points_per_dim - 1 || !inside[idx - stride] || !inside[idx + stride] {
                boundary = true;
            }
            stride *= points_per_dim;
        }
        if !boundary {
            continue;
        }
        let base = point(idx);
        for dir in &dirs {
            for k in 1..=ray_steps {
                let x = &base + dir * (eps * k as f64 / ray_steps as f64);
                let hx = unsafe_set.h(&x);
                if hx > best {
                    best = hx;
                    let g = unsafe_set.gradient(&x).norm();
                    pad = pad.max(g * (cell_gap + eps * angle_gap + eps / ray_steps as f64));
                }
            }
        }
    }
    if !any_inside {
        return Err(Error::config("grid margin found no unsafe grid point in the domain"));
    }
    let h_eps = best + pad;
    Ok(Margin {
        h_eps,
        resolution: pad,
        coarse: pad > 0.1 * h_eps.max(f64::MIN_POSITIVE),
    })
}

/// `p_new = (p̄ − p_e)/(1 − p_e)`: the share of the risk budget left to the
/// barrier once the estimator's tail probability is set aside.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskBudget {
    p_bar: f64,
    p_e: f64,
}

impl RiskBudget {
    pub fn new(p_bar: f64, p_e: f64) -> Result<Self> {
        if !(p_bar > 0.0 && p_bar < 1.0) {
            return Err(Error::config("p_bar must lie in (0, 1)"));
        }
        if !(p_e >= 0.0 && p_e < p_bar) {
            return Err(Error::config("p_e must lie in [0, p_bar)"));
        }
        Ok(Self { p_bar, p_e })
    }

    pub fn p_bar(&self) -> f64 {
        self.p_bar
    }

    pub fn p_e(&self) -> f64 {
        self.p_e
    }

    pub fn p_new(&self) -> f64 {
        (self.p_bar - self.p_e) / (1.0 - self.p_e)
    }
}

#[derive(Debug, Clone)]
pub struct BarrierSpec {
    pub alpha: f64,
    pub h_eps: f64,
    pub unsafe_set: UnsafeSetSpec,
    pub horizon: f64,
    pub budget: RiskBudget,
    pub ceiling: f64,
}

impl BarrierSpec {
    pub fn new(alpha: f64, h_eps: f64, unsafe_set: UnsafeSetSpec, horizon: f64, budget: RiskBudget) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::config("barrier alpha must be positive"));
        }
        if !(h_eps >= 0.0) || !h_eps.is_finite() {
            return Err(Error::config("h_eps must be nonnegative"));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::config("risk horizon T must be positive"));
        }
        Ok(Self {
            alpha,
            h_eps,
            unsafe_set,
            horizon,
            budget,
            ceiling: DEFAULT_CEILING,
        })
    }

    /// `h̄ = h − h_ε`.
    pub fn h_bar(&self, x: &DVector<f64>) -> f64 {
        self.unsafe_set.h(x) - self.h_eps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierValue {
    pub b: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    /// `B` hit the ceiling; derivatives are scaled with the clamped value.
    pub clamped: bool,
}

pub fn barrier_eval(spec: &BarrierSpec, x: &DVector<f64>) -> Result<BarrierValue> {
    check_dim("barrier state", spec.unsafe_set.dim(), x.len())?;
    let alpha = spec.alpha;
    let h_bar = spec.h_bar(x);
    let exponent = -alpha * h_bar;
    let (b, clamped) = if exponent > libm::log(spec.ceiling) {
        (spec.ceiling, true)
    } else {
        (libm::exp(exponent), false)
    };
    let grad_h = spec.unsafe_set.gradient(x);
    let hess_h = spec.unsafe_set.hessian(x);
    let gradient = &grad_h * (-alpha * b);
    let hessian = (&grad_h * grad_h.transpose() * (alpha * alpha) - hess_h * alpha) * b;
    Ok(BarrierValue {
        b,
        gradient,
        hessian,
        clamped,
    })
}

/// Deterministic part of the joint state: `ẋ_e = f_e + g_e u`.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoTerms {
    pub drift: DVector<f64>,
    pub input: DMatrix<f64>,
}

/// Filter quantities of one agent at its current estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTerms {
    pub id: usize,
    /// `F(x̂_o)`.
    pub drift: DVector<f64>,
    pub gain: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowMeta {
    pub b0: f64,
    pub agent: usize,
    pub clamped: bool,
}

/// `u_coeffs·u + b_coeff·b ≤ rhs`, with `b_coeff = −1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub u_coeffs: DVector<f64>,
    pub b_coeff: f64,
    pub rhs: f64,
    pub meta: RowMeta,
}

impl ConstraintRow {
    /// Left side minus right side; ≤ 0 when satisfied.
    pub fn residual(&self, u: &DVector<f64>, b: f64) -> f64 {
        self.u_coeffs.dot(u) + self.b_coeff * b - self.rhs
    }
}

/// The generator inequality for one agent on the joint state
/// `[ego (n_e), agent (n_o)]`:
///
/// ```text
/// u_coeffs = ∂B/∂x_e · g_e
/// rhs      = −a B0 − ∂B/∂x_e·f_e − ∂B/∂x̂_o·F − ε ‖∂B/∂x̂_o K C‖ − ½ tr(Dᵀ Kᵀ ∂²B/∂x̂_o² K D)
/// ```
pub fn generator_constraint_row(
    spec: &BarrierSpec,
    x_joint: &DVector<f64>,
    ego: &EgoTerms,
    agent: &AgentTerms,
    eps: f64,
    a: f64,
) -> Result<ConstraintRow> {
    let n_e = ego.drift.len();
    let n_o = agent.drift.len();
    check_dim("joint state", n_e + n_o, x_joint.len())?;
    check_dim("ego input map rows", n_e, ego.input.nrows())?;
    check_dim("agent gain rows", n_o, agent.gain.nrows())?;
    check_dim("agent gain cols", agent.c.nrows(), agent.gain.ncols())?;
    check_dim("agent C cols", n_o, agent.c.ncols())?;
    check_dim("agent D rows", agent.c.nrows(), agent.d.nrows())?;
    if !(eps >= 0.0) || !(a >= 0.0) {
        return Err(Error::config("epsilon and a must be nonnegative"));
    }

    let val = barrier_eval(spec, x_joint)?;
    let grad_e = val.gradient.rows(0, n_e);
    let grad_o = val.gradient.rows(n_e, n_o);
    let hess_oo = val.hessian.view((n_e, n_e), (n_o, n_o));

    let u_coeffs = ego.input.transpose() * grad_e;
    let ego_drift = grad_e.dot(&ego.drift);
    let agent_drift = grad_o.dot(&agent.drift);
    let correction = (grad_o.transpose() * &agent.gain * &agent.c).norm();
    let kd = &agent.gain * &agent.d;
    let ito = 0.5 * (kd.transpose() * hess_oo * &kd).trace();

    Ok(ConstraintRow {
        u_coeffs,
        b_coeff: -1.0,
        rhs: -a * val.b - ego_drift - agent_drift - eps * correction - ito,
        meta: RowMeta {
            b0: val.b,
            agent: agent.id,
            clamped: val.clamped,
        },
    })
}

/// Which `(a, b)` budget enforces the horizon bound.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "variant"))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConditionFamily {
    /// `a = 0`, `b ≤ (p_new − B0)/T`.
    A,
    /// `a` fixed, `b ≤ min(a, −ln((1 − p_new)/(1 − B0))/T)`.
    B { a: f64 },
    /// `b` fixed, `b(e^{bT} − 1)/(p_new e^{bT} − B0) ≤ a ≤ b`.
    C { b: f64 },
}

impl Default for ConditionFamily {
    fn default() -> Self {
        Self::B { a: 1.0 }
    }
}

impl ConditionFamily {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::A => Ok(()),
            Self::B { a } if a > 0.0 && a.is_finite() => Ok(()),
            Self::C { b } if b > 0.0 && b.is_finite() => Ok(()),
            _ => Err(Error::config("condition family parameter must be positive")),
        }
    }

    /// The `a` folded into the generator row; family C keeps `a` as a
    /// decision variable and returns 0.
    pub fn fixed_a(&self) -> f64 {
        match *self {
            Self::B { a } => a,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConditionBound {
    /// Families A and B: `b ≤ b_max`.
    RateMax {
        b_max: f64,
        feasible: bool,
        degenerate: bool,
    },
    /// Family C: `lo ≤ a ≤ hi`.
    AInterval {
        lo: f64,
        hi: f64,
        feasible: bool,
        degenerate: bool,
    },
}

impl ConditionBound {
    pub fn feasible(&self) -> bool {
        match *self {
            Self::RateMax { feasible, .. } | Self::AInterval { feasible, .. } => feasible,
        }
    }

    pub fn degenerate(&self) -> bool {
        match *self {
            Self::RateMax { degenerate, .. } | Self::AInterval { degenerate, .. } => degenerate,
        }
    }
}

pub fn condition_bounds(family: ConditionFamily, b0: f64, budget: &RiskBudget, horizon: f64) -> ConditionBound {
    let p_new = budget.p_new();
    match family {
        ConditionFamily::A => {
            let b_max = (p_new - b0) / horizon;
            ConditionBound::RateMax {
                b_max,
                feasible: b_max >= 0.0,
                degenerate: false,
            }
        }
        ConditionFamily::B { a } => {
            if b0 >= 1.0 {
                return ConditionBound::RateMax {
                    b_max: -DEGENERATE_BOUND,
                    feasible: false,
                    degenerate: true,
                };
            }
            let log_bound = -libm::log((1.0 - p_new) / (1.0 - b0)) / horizon;
            let b_max = a.min(log_bound);
            ConditionBound::RateMax {
                b_max,
                feasible: b_max >= 0.0,
                degenerate: false,
            }
        }
        ConditionFamily::C { b } => {
            let growth = libm::exp(b * horizon);
            let denom = p_new * growth - b0;
            if denom <= 0.0 {
                return ConditionBound::AInterval {
                    lo: DEGENERATE_BOUND,
                    hi: b,
                    feasible: false,
                    degenerate: true,
                };
            }
            let lo = b * (growth - 1.0) / denom;
            // Near the pole the finite value can exceed the sentinel; cap it so
            // the bound stays monotone in B0.
            let degenerate = lo >= DEGENERATE_BOUND;
            ConditionBound::AInterval {
                lo: lo.min(DEGENERATE_BOUND),
                hi: b,
                feasible: lo <= b,
                degenerate,
            }
        }
    }
}

/// `rate_coeff·r − s ≤ rhs`, with `r` the family's free parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlackRow {
    pub rate_coeff: f64,
    pub slack_coeff: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlackCondition {
    pub rows: Vec<SlackRow>,
    pub bound: ConditionBound,
}

impl SlackCondition {
    /// Smallest `s ≥ 0` that makes every row hold at rate `r`.
    pub fn minimal_slack(&self, rate: f64) -> f64 {
        self.rows
            .iter()
            .map(|row| (row.rate_coeff * rate - row.rhs) / -row.slack_coeff)
            .fold(0.0, f64::max)
    }

    pub fn holds(&self, rate: f64, s: f64, tol: f64) -> bool {
        self.rows
            .iter()
            .all(|row| row.rate_coeff * rate + row.slack_coeff * s <= row.rhs + tol)
    }
}

/// Slack-relaxed conditions. Families A and B add `s` to the right side of
/// `b ≤ b_max`; family C widens both ends of the `a`-interval by `s`. A
/// degenerate family-B bound (`B0 ≥ 1`) becomes `b − s ≤ 0` and keeps the
/// degenerate flag so the tick is never reported as slack-free.
pub fn slack_condition_bounds(family: ConditionFamily, b0: f64, budget: &RiskBudget, horizon: f64) -> SlackCondition {
    let bound = condition_bounds(family, b0, budget, horizon);
    let rows = match bound {
        ConditionBound::RateMax { b_max, degenerate, .. } => alloc::vec![SlackRow {
            rate_coeff: 1.0,
            slack_coeff: -1.0,
            rhs: if degenerate { 0.0 } else { b_max },
        }],
        ConditionBound::AInterval { lo, hi, .. } => alloc::vec![
            SlackRow {
                rate_coeff: -1.0,
                slack_coeff: -1.0,
                rhs: -lo,
            },
            SlackRow {
                rate_coeff: 1.0,
                slack_coeff: -1.0,
                rhs: hi,
            },
        ],
    };
    SlackCondition { rows, bound }
}

/// `p̄_u = p_e + (1 − p_e)(1 − (1 − B0) e^{−bT})` with `B0` clamped to
/// `[0, 1]` and `b` to `[0, ∞)`.
pub fn risk_upper_bound(b0: f64, b: f64, horizon: f64, p_e: f64) -> f64 {
    let b0 = b0.clamp(0.0, 1.0);
    let b = b.max(0.0);
    let p_b = 1.0 - (1.0 - b0) * libm::exp(-b * horizon);
    p_e + (1.0 - p_e) * p_b
}

/// Barrier-crossing probability bound implied by each family at the chosen
/// parameters. `rate` is `b` for families A and B and `a` for C.
pub fn implied_crossing_bound(family: ConditionFamily, b0: f64, rate: f64, horizon: f64) -> f64 {
    let b0 = b0.max(0.0);
    let bound = match family {
        ConditionFamily::A => b0 + rate.max(0.0) * horizon,
        ConditionFamily::B { .. } => 1.0 - (1.0 - b0.min(1.0)) * libm::exp(-rate.max(0.0) * horizon),
        ConditionFamily::C { b } => {
            if rate <= 0.0 {
                1.0
            } else {
                let decay = libm::exp(-b * horizon);
                b0 * decay + (b / rate) * (1.0 - decay)
            }
        }
    };
    bound.clamp(0.0, 1.0)
}

/// `p_e + (1 − p_e)·` [`implied_crossing_bound`].
pub fn implied_risk_bound(family: ConditionFamily, b0: f64, rate: f64, horizon: f64, p_e: f64) -> f64 {
    p_e + (1.0 - p_e) * implied_crossing_bound(family, b0, rate, horizon)
}
