//! Stochastic operator calculus: Lie derivatives, the second-order
//! derivative along two vector fields, the stochastic Lie derivative and
//! its gated iteration, the control operator, the Stratonovich drift
//! correction, the stochastic-relative-degree analyzer and the
//! controllability matrix.
//!
//! Everything here returns *fields* built by composing closures through the
//! autodiff tower: an iterated derivative is itself differentiable, which is
//! what allows the next iteration to take its gradient and Hessian exactly.
//!
//! "For all x in a neighbourhood" conditions are decided numerically on a
//! sampled ∞-ball ([`Neighbourhood`]). This surrogate can produce false
//! positives for fields that vanish on the sample set but not identically;
//! the sample count and tolerance are configurable.

use nalgebra::DMatrix;
use num_traits::Float;

use crate::autodiff::{
    gradient, gradient_ad, hessian_ad, jacobian_ad, Ad, ScalarField, VectorField,
};
use crate::error::{Error, Result};
use crate::models::SystemDef;
use crate::{lit, sampling, Real};

fn dot_ad<T: Real>(a: &[Ad<T>], b: &[Ad<T>]) -> Ad<T> {
    let mut acc = Ad::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

fn matvec_ad<T: Real>(m: &[Vec<Ad<T>>], v: &[Ad<T>]) -> Vec<Ad<T>> {
    m.iter().map(|row| dot_ad(row, v)).collect()
}

fn check_same_dim(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected: a, got: b })
    }
}

fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Sampled surrogate for "all x in a neighbourhood of the centre":
/// `samples` quasi-random points of the ∞-ball plus the centre itself.
#[derive(Clone, Debug)]
pub struct Neighbourhood<T> {
    pub center: Vec<T>,
    pub radius: T,
    pub samples: usize,
    /// Magnitudes below this count as "identically zero on the ball".
    pub tol: f64,
}

impl<T: Real> Neighbourhood<T> {
    pub fn new(center: Vec<T>, radius: T) -> Self {
        Neighbourhood { center, radius, samples: 200, tol: 1e-9 }
    }

    pub fn with_samples(mut self, samples: usize) -> Self {
        self.samples = samples;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn points(&self) -> Vec<Vec<T>> {
        let mut pts = sampling::box_points(&self.center, self.radius, self.samples);
        pts.push(self.center.clone());
        pts
    }

    /// max |φ| over the sample set.
    pub fn max_abs(&self, phi: &ScalarField<T>) -> Result<f64> {
        let mut worst = 0.0_f64;
        for p in self.points() {
            let v = to_f64(Float::abs(phi.eval(&p)?));
            if !(v <= worst) {
                worst = v;
            }
        }
        Ok(worst)
    }
}

/// Lie derivative: x ↦ ∂φ/∂x · F(x), itself a differentiable field.
pub fn lie<T: Real>(phi: &ScalarField<T>, field: &VectorField<T>) -> Result<ScalarField<T>> {
    check_same_dim(phi.dim(), field.dim())?;
    let (phi, field) = (phi.clone(), field.clone());
    Ok(ScalarField::new(phi.dim(), move |x| {
        let grad = gradient_ad(&phi, x);
        let fv = field.eval_ad(x);
        dot_ad(&grad, &fv)
    }))
}

/// Second derivative of φ along two vector fields:
/// x ↦ G(x)ᵀ · ∂²φ/∂x² · F(x).
pub fn lie2<T: Real>(
    phi: &ScalarField<T>,
    f: &VectorField<T>,
    g: &VectorField<T>,
) -> Result<ScalarField<T>> {
    check_same_dim(phi.dim(), f.dim())?;
    check_same_dim(phi.dim(), g.dim())?;
    let (phi, f, g) = (phi.clone(), f.clone(), g.clone());
    Ok(ScalarField::new(phi.dim(), move |x| {
        let hess = hessian_ad(&phi, x);
        let fv = f.eval_ad(x);
        let gv = g.eval_ad(x);
        dot_ad(&gv, &matvec_ad(&hess, &fv))
    }))
}

/// A derivative of the output along the dynamics, split into its
/// deterministic part and the coefficient of the white noise: the order-k
/// derivative of y reads `deterministic(x) + noise_coeff(x) ξ`.
#[derive(Clone)]
pub struct StochasticDerivative<T> {
    pub deterministic: ScalarField<T>,
    pub noise_coeff: ScalarField<T>,
    /// k for iterated output derivatives, 1 for a single application.
    pub order: usize,
}

/// One application of the stochastic Lie derivative:
/// deterministic = L_f φ + ½ L²_{l,l} φ, noise coefficient = L_l φ.
pub fn stochastic_lie<T: Real>(
    phi: &ScalarField<T>,
    sys: &SystemDef<T>,
) -> Result<StochasticDerivative<T>> {
    check_same_dim(phi.dim(), sys.dim())?;
    let drift = lie(phi, &sys.f)?;
    let ito = lie2(phi, &sys.l, &sys.l)?.scale(lit(0.5));
    Ok(StochasticDerivative {
        deterministic: drift.add_field(&ito),
        noise_coeff: lie(phi, &sys.l)?,
        order: 1,
    })
}

/// The control operator: deterministic = L_g φ + L²_{l,m} φ, noise
/// coefficient = L_m φ. With m = 0 it reduces to the Lie derivative
/// along g.
pub fn a_operator<T: Real>(
    phi: &ScalarField<T>,
    sys: &SystemDef<T>,
) -> Result<StochasticDerivative<T>> {
    check_same_dim(phi.dim(), sys.dim())?;
    let (det, noise) = match &sys.m {
        None => (lie(phi, &sys.g)?, ScalarField::constant(phi.dim(), T::zero())),
        Some(m) => (lie(phi, &sys.g)?.add_field(&lie2(phi, m, &sys.l)?), lie(phi, m)?),
    };
    Ok(StochasticDerivative { deterministic: det, noise_coeff: noise, order: 1 })
}

/// The order-k derivative of the output, iterating the stochastic Lie
/// derivative. Iteration past order j is only defined when the order-j
/// noise coefficient vanishes on the neighbourhood; a violation is an
/// error naming the offending order.
pub fn iterate_stochastic_lie<T: Real>(
    sys: &SystemDef<T>,
    k: usize,
    nbhd: &Neighbourhood<T>,
) -> Result<StochasticDerivative<T>> {
    let n = sys.dim();
    let mut det = sys.h.clone();
    let mut noise = ScalarField::constant(n, T::zero());
    for j in 1..=k {
        if j >= 2 {
            let worst = nbhd.max_abs(&noise)?;
            if worst > nbhd.tol {
                return Err(Error::NoiseDecoupling { order: j - 1, max_violation: worst });
            }
        }
        let s = stochastic_lie(&det, sys)?;
        noise = s.noise_coeff;
        det = s.deterministic;
    }
    Ok(StochasticDerivative { deterministic: det, noise_coeff: noise, order: k })
}

/// Stratonovich-corrected drift f_S(x) = f(x) - ½ (∂l/∂x) l(x).
pub fn stratonovich_drift<T: Real>(sys: &SystemDef<T>) -> VectorField<T> {
    let n = sys.dim();
    let f = sys.f.clone();
    let l = sys.l.clone();
    let half = lit::<T>(0.5);
    VectorField::new(n, move |x| {
        let fv = f.eval_ad(x);
        let jl = jacobian_ad(&l, x);
        let lv = l.eval_ad(x);
        let corr = matvec_ad(&jl, &lv);
        fv.into_iter()
            .zip(corr)
            .map(|(a, c)| a - &Ad::constant(half) * &c)
            .collect()
    })
}

/// Per-order residuals gathered while searching for the relative degree.
#[derive(Clone, Debug)]
pub struct OrderDiagnostics {
    pub order: usize,
    /// max |L_l S^k h| over the sample set.
    pub max_noise: f64,
    /// max |L_g S^k h| over the sample set.
    pub max_control: f64,
}

/// Outcome of the relative-degree search at a point.
#[derive(Clone, Debug)]
pub struct RelativeDegreeReport<T> {
    /// Smallest order at which the control appears, if consistent.
    pub r: Option<usize>,
    pub point: Vec<T>,
    pub radius: T,
    pub per_order: Vec<OrderDiagnostics>,
    /// L_g S^(r-1) h at the point.
    pub rd_value: Option<T>,
    /// Whether the noise coefficient is nonzero at order r (it may be:
    /// decoupling is only required strictly below r).
    pub noise_at_order_r: Option<bool>,
    /// Rank of the stacked gradients of h, S h, ..., S^(r-1) h at the point.
    pub gradient_rank: Option<usize>,
    pub gradient_singular_values: Vec<f64>,
    pub undefined_reason: Option<String>,
}

impl<T: Real> RelativeDegreeReport<T> {
    /// The gradients of the first r output derivatives are independent
    /// (which also forces r <= n).
    pub fn gradients_independent(&self) -> bool {
        matches!((self.r, self.gradient_rank), (Some(r), Some(rank)) if rank == r)
    }
}

/// Searches for the stochastic relative degree of `sys` at `x_bar`:
/// the smallest r such that the noise and control coefficients of the output
/// derivatives vanish on the neighbourhood for all orders up to r-2 while
/// |L_g S^(r-1) h(x_bar)| > 1e-9. Requires m = 0.
pub fn relative_degree<T: Real>(
    sys: &SystemDef<T>,
    x_bar: &[T],
    nbhd: &Neighbourhood<T>,
    max_order: usize,
) -> Result<RelativeDegreeReport<T>> {
    sys.require_m_zero()?;
    check_same_dim(sys.dim(), x_bar.len())?;
    let rd_tol = 1e-9;

    let mut report = RelativeDegreeReport {
        r: None,
        point: x_bar.to_vec(),
        radius: nbhd.radius,
        per_order: Vec::new(),
        rd_value: None,
        noise_at_order_r: None,
        gradient_rank: None,
        gradient_singular_values: Vec::new(),
        undefined_reason: None,
    };

    let mut dets: Vec<ScalarField<T>> = vec![sys.h.clone()];
    let mut det = sys.h.clone();
    for k in 0..max_order {
        let noise_k = lie(&det, &sys.l)?;
        let ctrl_k = lie(&det, &sys.g)?;
        let max_noise = nbhd.max_abs(&noise_k)?;
        let max_control = nbhd.max_abs(&ctrl_k)?;
        report.per_order.push(OrderDiagnostics { order: k, max_noise, max_control });

        let rd_at_point = ctrl_k.eval(x_bar)?;
        if to_f64(Float::abs(rd_at_point)) > rd_tol {
            report.r = Some(k + 1);
            report.rd_value = Some(rd_at_point);
            report.noise_at_order_r = Some(max_noise > nbhd.tol);
            break;
        }
        if max_control > nbhd.tol {
            report.undefined_reason = Some(format!(
                "control coefficient of order {k} vanishes at the point but reaches \
                 {max_control:.3e} on the neighbourhood"
            ));
            return Ok(report);
        }
        if max_noise > nbhd.tol {
            report.undefined_reason = Some(format!(
                "noise coefficient of order {k} reaches {max_noise:.3e} on the neighbourhood \
                 before any control coefficient becomes nonzero"
            ));
            return Ok(report);
        }
        det = stochastic_lie(&det, sys)?.deterministic;
        dets.push(det.clone());
    }

    if let Some(r) = report.r {
        // Independence of the stacked gradients of h, S h, ..., S^(r-1) h.
        let n = sys.dim();
        let mut rows: Vec<f64> = Vec::with_capacity(r * n);
        for d in dets.iter().take(r) {
            for v in gradient(d, x_bar)? {
                rows.push(to_f64(v));
            }
        }
        let mat = DMatrix::from_row_slice(r, n, &rows);
        let svals = mat.singular_values();
        let largest = svals.max();
        report.gradient_singular_values = svals.iter().copied().collect();
        report.gradient_rank = Some(svals.iter().filter(|s| **s > 1e-9 * largest).count());
    } else if report.undefined_reason.is_none() {
        report.undefined_reason =
            Some(format!("control does not appear in the first {max_order} output derivatives"));
    }
    Ok(report)
}

/// ad-operator: (∂w/∂x) f - (∂f/∂x) w, as a differentiable field.
pub fn ad_field<T: Real>(f: &VectorField<T>, w: &VectorField<T>) -> Result<VectorField<T>> {
    check_same_dim(f.dim(), w.dim())?;
    let (f, w) = (f.clone(), w.clone());
    Ok(VectorField::new(f.dim(), move |x| {
        let jw = jacobian_ad(&w, x);
        let jf = jacobian_ad(&f, x);
        let fv = f.eval_ad(x);
        let wv = w.eval_ad(x);
        matvec_ad(&jw, &fv)
            .into_iter()
            .zip(matvec_ad(&jf, &wv))
            .map(|(a, b)| a - b)
            .collect()
    }))
}

/// Controllability test data at a point.
#[derive(Clone, Debug)]
pub struct ControllabilityReport<T> {
    /// Columns g, ad_{f_S} g, ..., ad_{f_S}^{n-1} g evaluated at the point.
    pub matrix: Vec<Vec<T>>,
    /// Smallest over largest singular value.
    pub sv_ratio: f64,
    pub invertible: bool,
}

/// Builds the matrix [g, ad_{f_S} g, ..., ad_{f_S}^{n-1} g] at `x_bar`
/// (ad iterated through the autodiff tower, with the Stratonovich-corrected
/// drift) and reports its invertibility: smallest singular value above
/// 1e-9 times the largest.
pub fn controllability_matrix<T: Real>(
    sys: &SystemDef<T>,
    x_bar: &[T],
) -> Result<ControllabilityReport<T>> {
    check_same_dim(sys.dim(), x_bar.len())?;
    let n = sys.dim();
    let f_s = stratonovich_drift(sys);
    let mut columns: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut w = sys.g.clone();
    columns.push(w.eval(x_bar)?);
    for _ in 1..n {
        w = ad_field(&f_s, &w)?;
        columns.push(w.eval(x_bar)?);
    }
    let mut matrix = vec![vec![T::zero(); n]; n];
    let mut flat = Vec::with_capacity(n * n);
    for i in 0..n {
        for (j, col) in columns.iter().enumerate() {
            matrix[i][j] = col[i];
            flat.push(to_f64(col[i]));
        }
    }
    let svals = DMatrix::from_row_slice(n, n, &flat).singular_values();
    let largest = svals.max();
    let smallest = svals.min();
    let sv_ratio = if largest > 0.0 { smallest / largest } else { 0.0 };
    Ok(ControllabilityReport { matrix, sv_ratio, invertible: sv_ratio > 1e-9 })
}
