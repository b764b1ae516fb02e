//! System definitions: the general SDE container, the built-in example,
//! normal-form data and reference signals.

use std::sync::{Arc, Mutex};

use num_traits::Float;

use crate::autodiff::{Ad, ScalarField, VectorField};
use crate::error::{Error, Result};
use crate::transform::CoordinateChange;
use crate::{lit, sampling, Real};

/// Diagnostic guard: returns a message when the state has left the region
/// where the model is meaningful (integration aborts on it).
pub type Guard<T> = Arc<dyn Fn(&[T]) -> Option<String> + Send + Sync>;

/// A single-input single-output nonlinear stochastic system
///
/// ```text
/// dx = (f(x) + g(x) u) dt + (l(x) + m(x) u) dW,     y = h(x),
/// ```
///
/// with all fields sharing the state dimension `n`. The control-diffusion
/// field `m` defaults to zero and must stay zero for every analysis and
/// control routine in this crate; [`SystemDef::require_m_zero`] enforces
/// that on a sampled neighbourhood.
#[derive(Clone)]
pub struct SystemDef<T> {
    n: usize,
    pub f: VectorField<T>,
    pub g: VectorField<T>,
    pub l: VectorField<T>,
    pub m: Option<VectorField<T>>,
    pub h: ScalarField<T>,
    working_radius: T,
    guard: Option<Guard<T>>,
}

impl<T: Real> SystemDef<T> {
    pub fn new(f: VectorField<T>, g: VectorField<T>, l: VectorField<T>, h: ScalarField<T>) -> Self {
        let n = f.dim();
        assert_eq!(g.dim(), n, "g dimension");
        assert_eq!(l.dim(), n, "l dimension");
        assert_eq!(h.dim(), n, "h dimension");
        SystemDef { n, f, g, l, m: None, h, working_radius: lit(0.5), guard: None }
    }

    pub fn with_m(mut self, m: VectorField<T>) -> Self {
        assert_eq!(m.dim(), self.n, "m dimension");
        self.m = Some(m);
        self
    }

    pub fn with_working_radius(mut self, radius: T) -> Self {
        self.working_radius = radius;
        self
    }

    pub fn with_guard(mut self, guard: Guard<T>) -> Self {
        self.guard = Some(guard);
        self
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn working_radius(&self) -> T {
        self.working_radius
    }

    pub fn guard(&self) -> Option<&Guard<T>> {
        self.guard.as_ref()
    }

    /// Largest |m| component over `samples` points of the working
    /// neighbourhood around the origin (zero when `m` is absent).
    pub fn max_m_on_neighbourhood(&self, samples: usize) -> f64 {
        let Some(m) = &self.m else { return 0.0 };
        let center = vec![T::zero(); self.n];
        let mut worst = 0.0_f64;
        for p in sampling::box_points(&center, self.working_radius, samples) {
            if let Ok(v) = m.eval(&p) {
                for c in v {
                    let a = num_traits::ToPrimitive::to_f64(&Float::abs(c)).unwrap_or(f64::NAN);
                    if !(a <= worst) {
                        worst = a;
                    }
                }
            }
        }
        worst
    }

    /// Enforces the standing assumption m = 0 (tolerance 1e-12 over 100
    /// sampled points of the working neighbourhood).
    pub fn require_m_zero(&self) -> Result<()> {
        let worst = self.max_m_on_neighbourhood(100);
        if worst > 1e-12 {
            Err(Error::ControlInDiffusion { max_magnitude: worst })
        } else {
            Ok(())
        }
    }
}

/// Coefficient data of a normal form
///
/// ```text
/// ż_i = z_{i+1}                      i = 1..r-1
/// ż_r = c_d(z) + c_s(z) ξ + b(z) u
/// ż_j = p_d,j(z) + p_s,j(z) ξ        j = r+1..n
/// ```
///
/// The coefficients are stored as fields over the *original* coordinates
/// together with the chart `z = Φ(x)`; evaluating them at a z-point resolves
/// `x = Φ⁻¹(z)` numerically. [`NormalFormDef::c_d`] and friends return the
/// composed z-space views (evaluation-only: derivative seeds cannot pass
/// through the Newton inverse), while the `*_at_x` accessors are the fast
/// path used by the integrator, which tracks x alongside z.
#[derive(Clone)]
pub struct NormalFormDef<T> {
    r: usize,
    n: usize,
    c_d_x: ScalarField<T>,
    c_s_x: ScalarField<T>,
    b_x: ScalarField<T>,
    p_d_x: Vec<ScalarField<T>>,
    p_s_x: Vec<ScalarField<T>>,
    chart: Arc<CoordinateChange<T>>,
}

impl<T: Real> NormalFormDef<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        r: usize,
        c_d_x: ScalarField<T>,
        c_s_x: ScalarField<T>,
        b_x: ScalarField<T>,
        p_d_x: Vec<ScalarField<T>>,
        p_s_x: Vec<ScalarField<T>>,
        chart: Arc<CoordinateChange<T>>,
    ) -> Self {
        let n = chart.dim();
        assert!(r >= 1 && r <= n);
        assert_eq!(p_d_x.len(), n - r);
        assert_eq!(p_s_x.len(), n - r);
        NormalFormDef { r, n, c_d_x, c_s_x, b_x, p_d_x, p_s_x, chart }
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn chart(&self) -> &Arc<CoordinateChange<T>> {
        &self.chart
    }

    /// (c_d, c_s, b) evaluated at a point given in original coordinates.
    pub fn coeffs_at_x(&self, x: &[T]) -> Result<Coefficients<T>> {
        Ok(Coefficients {
            c_d: self.c_d_x.eval(x)?,
            c_s: self.c_s_x.eval(x)?,
            b: self.b_x.eval(x)?,
        })
    }

    /// Internal-dynamics coefficients (p_d, p_s) at an x-point.
    pub fn internal_at_x(&self, x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let pd = self.p_d_x.iter().map(|f| f.eval(x)).collect::<Result<Vec<_>>>()?;
        let ps = self.p_s_x.iter().map(|f| f.eval(x)).collect::<Result<Vec<_>>>()?;
        Ok((pd, ps))
    }

    pub fn c_d(&self) -> ScalarField<T> {
        compose_through_inverse(self.c_d_x.clone(), self.chart.clone())
    }

    pub fn c_s(&self) -> ScalarField<T> {
        compose_through_inverse(self.c_s_x.clone(), self.chart.clone())
    }

    pub fn b(&self) -> ScalarField<T> {
        compose_through_inverse(self.b_x.clone(), self.chart.clone())
    }

    /// Coefficient fields in original coordinates (differentiable).
    pub fn coeff_fields_x(&self) -> (&ScalarField<T>, &ScalarField<T>, &ScalarField<T>) {
        (&self.c_d_x, &self.c_s_x, &self.b_x)
    }

    pub fn internal_fields_x(&self) -> (&[ScalarField<T>], &[ScalarField<T>]) {
        (&self.p_d_x, &self.p_s_x)
    }

    /// Sampled check that the control coefficient stays away from zero on
    /// a neighbourhood of the origin (|b| > threshold at every sample).
    pub fn check_b_nonzero(&self, radius: T, samples: usize, threshold: f64) -> Result<()> {
        let center = vec![T::zero(); self.n];
        for p in sampling::box_points(&center, radius, samples) {
            let b = self.b_x.eval(&p)?;
            let a = num_traits::ToPrimitive::to_f64(&Float::abs(b)).unwrap_or(0.0);
            if a <= threshold {
                return Err(Error::SingularControl { b: a });
            }
        }
        Ok(())
    }

    /// The normal form seen as a plain SDE over z (drift, control and
    /// diffusion fields). Evaluation-only: each call resolves x = Φ⁻¹(z),
    /// with the last resolve memoized so that evaluating f, g and l at the
    /// same point costs one Newton solve.
    pub fn as_system(&self) -> SystemDef<T> {
        let n = self.n;
        let r = self.r;
        let memo: Arc<Mutex<Option<(Vec<T>, Vec<T>)>>> = Arc::new(Mutex::new(None));
        let this = self.clone();
        let m = memo.clone();
        let f = VectorField::new(n, move |z: &[Ad<T>]| {
            let (zv, x) = resolve_values(this.chart(), z, &m);
            let mut out: Vec<Ad<T>> = Vec::with_capacity(n);
            for i in 0..r - 1 {
                out.push(Ad::constant(zv[i + 1]));
            }
            out.push(Ad::constant(this.c_d_x.eval(&x).expect("c_d eval")));
            for j in 0..n - r {
                out.push(Ad::constant(this.p_d_x[j].eval(&x).expect("p_d eval")));
            }
            out
        });
        let this = self.clone();
        let m = memo.clone();
        let g = VectorField::new(n, move |z: &[Ad<T>]| {
            let (_, x) = resolve_values(this.chart(), z, &m);
            let mut out = vec![Ad::zero(); n];
            out[r - 1] = Ad::constant(this.b_x.eval(&x).expect("b eval"));
            out
        });
        let this = self.clone();
        let m = memo;
        let l = VectorField::new(n, move |z: &[Ad<T>]| {
            let (_, x) = resolve_values(this.chart(), z, &m);
            let mut out = vec![Ad::zero(); n];
            out[r - 1] = Ad::constant(this.c_s_x.eval(&x).expect("c_s eval"));
            for j in 0..n - r {
                out[r + j] = Ad::constant(this.p_s_x[j].eval(&x).expect("p_s eval"));
            }
            out
        });
        let h = ScalarField::coordinate(n, 0);
        SystemDef::new(f, g, l, h)
    }
}

type ResolveMemo<T> = Mutex<Option<(Vec<T>, Vec<T>)>>;

fn resolve_values<T: Real>(
    chart: &CoordinateChange<T>,
    z: &[Ad<T>],
    memo: &ResolveMemo<T>,
) -> (Vec<T>, Vec<T>) {
    assert!(
        z.iter().all(|v| v.depth() == 0),
        "fields composed through the numerical coordinate inverse are evaluation-only; \
         derivative seeds cannot be propagated through the Newton solve"
    );
    let zv: Vec<T> = z.iter().map(Ad::value).collect();
    let mut cache = memo.lock().unwrap();
    if let Some((cz, cx)) = cache.as_ref() {
        if cz == &zv {
            return (zv, cx.clone());
        }
    }
    // cold start keeps the fields pure functions of their argument
    let x = chart.invert(&zv, None).expect("coordinate inverse failed");
    *cache = Some((zv.clone(), x.clone()));
    (zv, x)
}

fn compose_through_inverse<T: Real>(
    inner: ScalarField<T>,
    chart: Arc<CoordinateChange<T>>,
) -> ScalarField<T> {
    let memo: Arc<ResolveMemo<T>> = Arc::new(Mutex::new(None));
    ScalarField::new(chart.dim(), move |z| {
        let (_, x) = resolve_values(&chart, z, &memo);
        Ad::constant(inner.eval(&x).expect("field eval"))
    })
}

/// Coefficient triple at one point.
#[derive(Clone, Copy, Debug)]
pub struct Coefficients<T> {
    pub c_d: T,
    pub c_s: T,
    pub b: T,
}

/// A small autonomous SDE over the internal variable η (zero dynamics).
#[derive(Clone)]
pub struct InternalSde<T> {
    pub drift: VectorField<T>,
    pub diffusion: VectorField<T>,
    domain: Option<Arc<dyn Fn(&[T]) -> bool + Send + Sync>>,
}

impl<T: Real> InternalSde<T> {
    pub fn new(drift: VectorField<T>, diffusion: VectorField<T>) -> Self {
        assert_eq!(drift.dim(), diffusion.dim());
        InternalSde { drift, diffusion, domain: None }
    }

    pub fn with_domain(mut self, domain: impl Fn(&[T]) -> bool + Send + Sync + 'static) -> Self {
        self.domain = Some(Arc::new(domain));
        self
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    fn check_domain(&self, eta: &[T]) -> Result<()> {
        if let Some(d) = &self.domain {
            if !d(eta) {
                return Err(Error::NonFinite {
                    context: format!("η outside the SDE domain: {eta:?}"),
                });
            }
        }
        Ok(())
    }

    pub fn drift_at(&self, eta: &[T]) -> Result<Vec<T>> {
        self.check_domain(eta)?;
        self.drift.eval(eta)
    }

    pub fn diffusion_at(&self, eta: &[T]) -> Result<Vec<T>> {
        self.check_domain(eta)?;
        self.diffusion.eval(eta)
    }

    /// Slopes (A, F) of drift and diffusion at the origin for scalar
    /// internal dynamics, by central differences (the composed fields behind
    /// a transform-built zero dynamics are not seed-differentiable).
    pub fn linearise_at_origin(&self) -> Result<(T, T)> {
        if self.dim() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: self.dim() });
        }
        let h = lit::<T>(1e-6);
        let two_h = h + h;
        let a = (self.drift_at(&[h])?[0] - self.drift_at(&[-h])?[0]) / two_h;
        let f = (self.diffusion_at(&[h])?[0] - self.diffusion_at(&[-h])?[0]) / two_h;
        Ok((a, f))
    }
}

/// A reference trajectory with its first `order` time derivatives.
#[derive(Clone)]
pub struct ReferenceSignal<T> {
    order: usize,
    f: Arc<dyn Fn(T) -> Vec<T> + Send + Sync>,
}

impl<T: Real> ReferenceSignal<T> {
    /// `f(t)` must return `(y_R, y_R', ..., y_R^(order))`, `order + 1` values.
    pub fn new(order: usize, f: impl Fn(T) -> Vec<T> + Send + Sync + 'static) -> Self {
        ReferenceSignal { order, f: Arc::new(f) }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Derivatives `(y_R, ..., y_R^(order))` at `t`.
    pub fn eval(&self, t: T) -> Vec<T> {
        let out = (self.f)(t);
        debug_assert_eq!(out.len(), self.order + 1);
        out
    }

    /// Cross-checks each stored derivative against a central difference of
    /// the previous one at the given sample times.
    pub fn validate_derivatives(&self, times: &[T], rel_tol: f64) -> Result<()> {
        let h = lit::<T>(1e-5);
        for &t in times {
            let at = self.eval(t);
            let plus = self.eval(t + h);
            let minus = self.eval(t - h);
            for k in 1..=self.order {
                let fd = (plus[k - 1] - minus[k - 1]) / (h + h);
                let err = num_traits::ToPrimitive::to_f64(&Float::abs(fd - at[k])).unwrap();
                let scale =
                    num_traits::ToPrimitive::to_f64(&Float::abs(at[k])).unwrap().max(1.0);
                if err > rel_tol * scale {
                    return Err(Error::Assertion(format!(
                        "reference derivative {k} disagrees with finite differences at t = {t}: \
                         |{fd} - {}| > {rel_tol} relative",
                        at[k]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reference y_R(t) = β + α cos(ω t) with analytic derivatives
/// y_R^(k)(t) = α ω^k cos(ω t + k π/2).
pub fn cosine_reference<T: Real>(beta: T, alpha: T, omega: T, order: usize) -> ReferenceSignal<T> {
    assert!(order >= 1);
    ReferenceSignal::new(order, move |t| {
        let half_pi = lit::<T>(std::f64::consts::FRAC_PI_2);
        (0..=order)
            .map(|k| {
                let phase = omega * t + half_pi * lit::<T>(k as f64);
                let v = alpha * Float::powi(omega, k as i32) * Float::cos(phase);
                if k == 0 {
                    beta + v
                } else {
                    v
                }
            })
            .collect()
    })
}

/// The built-in example system
///
/// ```text
/// f = ( sin x2 (1 + x1),  -2 tan x2,  2 x3 + x1 sin x2 - 2 sin x2 x1² / cos² x2 )
/// g = ( e^{x3},  0,  e^{x3} )
/// l = ( x1,  -2 x1 / cos x2,  -x1 )
/// h = x1 + sin x2 - x3
/// ```
///
/// The diffusion direction is annihilated by the gradients of h and of its
/// first derivative along the dynamics, so the output and that derivative
/// are noise-free and noise and control both enter at the second
/// derivative: stochastic relative degree 2 at the origin. The guard aborts
/// integration when |x2| approaches the tan singularity at π/2.
pub fn example_system<T: Real>() -> SystemDef<T> {
    let f = VectorField::new(3, |x: &[Ad<T>]| {
        let s2 = x[1].sin();
        let c2 = x[1].cos();
        let two = Ad::from_f64(2.0);
        let f1 = &s2 * &(&Ad::one() + &x[0]);
        let f2 = -&(&two * &x[1].tan());
        let f3 = &(&(&two * &x[2]) + &(&x[0] * &s2))
            - &(&(&two * &(&s2 * &x[0].powi(2))) / &c2.powi(2));
        vec![f1, f2, f3]
    });
    let g = VectorField::new(3, |x: &[Ad<T>]| {
        let e3 = x[2].exp();
        vec![e3.clone(), Ad::zero(), e3]
    });
    let l = VectorField::new(3, |x: &[Ad<T>]| {
        let c2 = x[1].cos();
        vec![x[0].clone(), &(&Ad::from_f64(-2.0) * &x[0]) / &c2, -&x[0]]
    });
    let h = ScalarField::new(3, |x: &[Ad<T>]| &(&x[0] + &x[1].sin()) - &x[2]);
    SystemDef::new(f, g, l, h).with_guard(Arc::new(|x: &[T]| {
        if Float::abs(x[1]) > lit::<T>(1.4) {
            Some(format!("|x2| = {} exceeds 1.4 (tan singularity at π/2)", x[1]))
        } else {
            None
        }
    }))
}

/// Coordinate change of the example:
/// Φ(x) = (x1 + sin x2 - x3, -sin x2 - 2 x3, x1 - x3),
/// relative degree 2, numerical (Newton) inverse.
pub fn example_phi<T: Real>() -> CoordinateChange<T> {
    let phi1 = ScalarField::new(3, |x: &[Ad<T>]| &(&x[0] + &x[1].sin()) - &x[2]);
    let phi2 =
        ScalarField::new(3, |x: &[Ad<T>]| -&(&x[1].sin() + &(&Ad::from_f64(2.0) * &x[2])));
    let phi3 = ScalarField::new(3, |x: &[Ad<T>]| &x[0] - &x[2]);
    CoordinateChange::from_fields(vec![phi1, phi2, phi3], 2)
}

/// Closed-form normal form of the example (relative degree 2):
///
/// ```text
/// c_d = 2 s2 - 4 x3 - 2 x1 s2 + 6 x1² s2 / c2²
/// c_s = 4 x1
/// b   = -2 e^{x3}
/// p_d = s2 - 2 x3 + 2 x1² s2 / c2²
/// p_s = 2 x1
/// ```
///
/// (fields over x, composed with Φ⁻¹ when evaluated at z-points).
pub fn example_normal_form<T: Real>() -> NormalFormDef<T> {
    let c_d = ScalarField::new(3, |x: &[Ad<T>]| {
        let s2 = x[1].sin();
        let c2 = x[1].cos();
        let t1 = &Ad::from_f64(2.0) * &s2;
        let t2 = &Ad::from_f64(4.0) * &x[2];
        let t3 = &Ad::from_f64(2.0) * &(&x[0] * &s2);
        let t4 = &(&Ad::from_f64(6.0) * &(&x[0].powi(2) * &s2)) / &c2.powi(2);
        &(&(&t1 - &t2) - &t3) + &t4
    });
    let c_s = ScalarField::new(3, |x: &[Ad<T>]| &Ad::from_f64(4.0) * &x[0]);
    let b = ScalarField::new(3, |x: &[Ad<T>]| &Ad::from_f64(-2.0) * &x[2].exp());
    let p_d = ScalarField::new(3, |x: &[Ad<T>]| {
        let s2 = x[1].sin();
        let c2 = x[1].cos();
        let t1 = &s2 - &(&Ad::from_f64(2.0) * &x[2]);
        let t2 = &(&Ad::from_f64(2.0) * &(&x[0].powi(2) * &s2)) / &c2.powi(2);
        &t1 + &t2
    });
    let p_s = ScalarField::new(3, |x: &[Ad<T>]| &Ad::from_f64(2.0) * &x[0]);
    NormalFormDef::from_parts(2, c_d, c_s, b, vec![p_d], vec![p_s], Arc::new(example_phi()))
}

/// Zero dynamics of the example:
/// dη = (-2η + 9η³ / (2(η² - 1))) dt + 3η dW, valid for |η| < 1.
pub fn example_zero_dynamics<T: Real>() -> InternalSde<T> {
    let drift = VectorField::new(1, |e: &[Ad<T>]| {
        let eta = &e[0];
        let cube = &(&Ad::from_f64(9.0) * &eta.powi(3))
            / &(&Ad::from_f64(2.0) * &(&eta.powi(2) - &Ad::one()));
        vec![&(&Ad::from_f64(-2.0) * eta) + &cube]
    });
    let diffusion = VectorField::new(1, |e: &[Ad<T>]| vec![&Ad::from_f64(3.0) * &e[0]]);
    InternalSde::new(drift, diffusion).with_domain(|eta: &[T]| Float::abs(eta[0]) < T::one())
}

/// The state on the zero-dynamics manifold of the example for a given η:
/// x1 = (3/2)η, sin x2 = -η, x3 = η/2.
pub fn example_zero_dynamics_point<T: Real>(eta: T) -> Vec<T> {
    vec![lit::<T>(1.5) * eta, Float::asin(-eta), eta / lit::<T>(2.0)]
}


#[cfg(test)]
mod reference_properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        // Harmonic identity y_R'' = -ω² (y_R - β).
        #[test]
        fn cosine_reference_satisfies_the_harmonic_identity(
            beta in -1.0_f64..1.0,
            alpha in 0.0_f64..0.5,
            omega in 0.1_f64..10.0,
            t in 0.0_f64..20.0,
        ) {
            let r = cosine_reference(beta, alpha, omega, 2);
            let v = r.eval(t);
            let lhs = v[2];
            let rhs = -omega * omega * (v[0] - beta);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs().max(rhs.abs())));
        }
    }
}
