//! Controller implementations: idealistic linearising/tracking control,
//! zero-noise control, hybrid compensating control, pole placement and the
//! binding of a controller specification to an integrator-ready feedback
//! law.
//!
//! Family capabilities are separated at the interface: the idealistic
//! family declares per-step noise access (only a simulator can grant it),
//! the hybrid family sees nothing but sampled states and works through the
//! increment estimator, and the zero-noise family is plain state feedback.

use std::sync::Arc;

use num_complex::Complex;
use num_traits::Float;

use crate::error::{Error, Result};
use crate::estimator::{estimate_increment, IncrementEstimate};
use crate::models::{Coefficients, NormalFormDef, ReferenceSignal, SystemDef};
use crate::simulate::{Controller, JumpDecision, NoiseAccess, StepInput, WindowInput};
use crate::{lit, sampling, Real};

/// Control coefficients below this magnitude are rejected rather than
/// regularised.
pub const SINGULAR_B_THRESHOLD: f64 = 1e-9;

fn guard_b<T: Real>(b: T) -> Result<T> {
    if Float::abs(b).to_f64().unwrap_or(0.0) <= SINGULAR_B_THRESHOLD {
        Err(Error::SingularControl { b: b.to_f64().unwrap_or(f64::NAN) })
    } else {
        Ok(b)
    }
}

/// Monic characteristic polynomial data: s^r + d_{r-1} s^{r-1} + ... + d_0,
/// stored with its roots.
#[derive(Clone, Debug)]
pub struct PolePlacement<T> {
    /// d_0, ..., d_{r-1}.
    pub coefficients: Vec<T>,
    pub roots: Vec<Complex<f64>>,
}

impl<T: Real> PolePlacement<T> {
    pub fn order(&self) -> usize {
        self.coefficients.len()
    }

    /// |s^r + d_{r-1} s^{r-1} + ... + d_0| at a complex point.
    pub fn eval_poly(&self, s: Complex<f64>) -> Complex<f64> {
        let mut acc = Complex::new(1.0, 0.0);
        for d in self.coefficients.iter().rev() {
            acc = acc * s + Complex::new(d.to_f64().unwrap_or(f64::NAN), 0.0);
        }
        acc
    }
}

/// Expands ∏(s - ρ_i) into monic real coefficients. All roots must have
/// negative real part and complex roots must come in conjugate pairs.
pub fn place_poles<T: Real>(roots: &[Complex<f64>]) -> Result<PolePlacement<T>> {
    if roots.is_empty() {
        return Err(Error::Poles("at least one root is required".into()));
    }
    for r in roots {
        if !(r.re < 0.0) {
            return Err(Error::Poles(format!("root {r} does not have negative real part")));
        }
    }
    // conjugate pairing: every root with nonzero imaginary part must have a
    // distinct partner
    let mut used = vec![false; roots.len()];
    for (i, r) in roots.iter().enumerate() {
        if used[i] || r.im == 0.0 {
            continue;
        }
        let partner = roots.iter().enumerate().position(|(j, q)| {
            !used[j] && j != i && (q.re - r.re).abs() < 1e-12 && (q.im + r.im).abs() < 1e-12
        });
        match partner {
            Some(j) => {
                used[i] = true;
                used[j] = true;
            }
            None => {
                return Err(Error::Poles(format!("complex root {r} lacks its conjugate")));
            }
        }
    }

    // expand the product; coeffs[k] multiplies s^k, monic of degree len
    let mut coeffs: Vec<Complex<f64>> = vec![Complex::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex::new(0.0, 0.0); coeffs.len() + 1];
        for (k, c) in coeffs.iter().enumerate() {
            next[k + 1] += *c;
            next[k] -= *c * *r;
        }
        coeffs = next;
    }
    debug_assert!((coeffs.last().unwrap().re - 1.0).abs() < 1e-12);
    let mut real_coeffs = Vec::with_capacity(roots.len());
    for c in coeffs.iter().take(roots.len()) {
        if c.im.abs() > 1e-12 {
            return Err(Error::Poles(format!("non-real coefficient {c} after expansion")));
        }
        real_coeffs.push(lit::<T>(c.re));
    }
    let placement = PolePlacement { coefficients: real_coeffs, roots: roots.to_vec() };
    // reconstruction check: the stored polynomial vanishes on every root
    for r in roots {
        let v = placement.eval_poly(*r).norm();
        if v > 1e-9 * (1.0 + r.norm().powi(roots.len() as i32)) {
            return Err(Error::Poles(format!("reconstruction residual {v:.3e} at root {r}")));
        }
    }
    Ok(placement)
}

/// Convenience wrapper for purely real pole sets.
pub fn place_poles_real<T: Real>(roots: &[f64]) -> Result<PolePlacement<T>> {
    let complex: Vec<Complex<f64>> = roots.iter().map(|r| Complex::new(*r, 0.0)).collect();
    place_poles(&complex)
}

/// Synthetic input v(ζ, y_R) = y_R^(r) - Σ d_{i-1} (ζ_i - y_R^(i-1)):
/// drives the tracking error through the placed characteristic polynomial.
pub fn tracking_v<T: Real>(zeta: &[T], ref_derivs: &[T], poles: &PolePlacement<T>) -> Result<T> {
    let r = poles.order();
    if zeta.len() != r {
        return Err(Error::DimensionMismatch { expected: r, got: zeta.len() });
    }
    if ref_derivs.len() < r + 1 {
        return Err(Error::DimensionMismatch { expected: r + 1, got: ref_derivs.len() });
    }
    let mut v = ref_derivs[r];
    for i in 0..r {
        v = v - poles.coefficients[i] * (zeta[i] - ref_derivs[i]);
    }
    Ok(v)
}

/// Idealistic linearising control u = (-c_d - c_s ξ + v) / b: consumes the
/// realised white noise and cancels the stochastic term exactly.
pub fn idealistic_control<T: Real>(coeffs: &Coefficients<T>, xi: T, v: T) -> Result<T> {
    let b = guard_b(coeffs.b)?;
    let w = coeffs.c_d + coeffs.c_s * xi;
    Ok((v - w) / b)
}

/// Zero-noise control u = (-c_d + v) / b: the noise replaced by its mean.
pub fn zero_noise_control<T: Real>(coeffs: &Coefficients<T>, v: T) -> Result<T> {
    let b = guard_b(coeffs.b)?;
    Ok((v - coeffs.c_d) / b)
}

/// Impulse amplitude at a window boundary:
/// u*(k) = -c_s(z_start) ΔŴ(k) / b(z_end), producing the jump
/// z_r ← z_r + b(z_end) u*(k).
pub fn hybrid_jump<T: Real>(
    coeffs_start: &Coefficients<T>,
    coeffs_end: &Coefficients<T>,
    estimate: &IncrementEstimate<T>,
) -> Result<(T, T)> {
    let b_end = guard_b(coeffs_end.b)?;
    let u_star = -(coeffs_start.c_s * estimate.delta_w) / b_end;
    let delta_zr = b_end * u_star;
    Ok((u_star, delta_zr))
}

/// Controller family: how the law treats the stochastic term.
#[derive(Clone, Debug)]
pub enum Family<T> {
    /// Exact cancellation using the realised noise (simulator-only).
    Idealistic,
    /// Noise replaced by its zero mean.
    ZeroNoise,
    /// Zero-noise flow plus impulsive compensation every ε from estimated
    /// increments.
    Hybrid { epsilon: T, delta_threshold: T },
}

/// Control task: hold a constant synthetic input or track a reference.
#[derive(Clone, Debug)]
pub enum Task<T> {
    Linearise { v: T },
    Track,
}

/// A complete controller description, bound to a normal form by [`bind`].
#[derive(Clone, Debug)]
pub struct ControllerSpec<T> {
    pub family: Family<T>,
    pub task: Task<T>,
    pub poles: PolePlacement<T>,
}

impl<T: Real> ControllerSpec<T> {
    pub fn epsilon(&self) -> Option<T> {
        match &self.family {
            Family::Hybrid { epsilon, .. } => Some(*epsilon),
            _ => None,
        }
    }
}

/// Stabilisation is tracking of the zero reference.
pub fn zero_reference<T: Real>(order: usize) -> ReferenceSignal<T> {
    ReferenceSignal::new(order, move |_| vec![T::zero(); order + 1])
}

/// Binds a specification to a normal form, a reference and a plant model
/// (the system seen in simulation coordinates; the hybrid estimator
/// reconstructs drift and diffusion from it). Fails when a tracking task
/// has no reference of sufficient smoothness or the pole order does not
/// match the relative degree.
pub fn bind<T: Real>(
    spec: &ControllerSpec<T>,
    nf: Arc<NormalFormDef<T>>,
    reference: Option<ReferenceSignal<T>>,
    plant_model: Arc<SystemDef<T>>,
) -> Result<Box<dyn Controller<T>>> {
    let r = nf.r();
    if spec.poles.order() != r {
        return Err(Error::Scenario(format!(
            "pole set of order {} does not match relative degree {r}",
            spec.poles.order()
        )));
    }
    let reference = match &spec.task {
        Task::Track => {
            let rf = reference
                .ok_or_else(|| Error::Scenario("tracking task requires a reference".into()))?;
            if rf.order() < r {
                return Err(Error::Scenario(format!(
                    "reference must carry at least {r} derivatives, has {}",
                    rf.order()
                )));
            }
            Some(rf)
        }
        Task::Linearise { .. } => None,
    };
    Ok(Box::new(BoundController {
        spec: spec.clone(),
        reference,
        plant_model,
        _nf: nf,
        compensation: Vec::new(),
    }))
}

struct BoundController<T> {
    spec: ControllerSpec<T>,
    reference: Option<ReferenceSignal<T>>,
    plant_model: Arc<SystemDef<T>>,
    _nf: Arc<NormalFormDef<T>>,
    compensation: Vec<T>,
}

impl<T: Real> BoundController<T> {
    fn v_at(&self, t: T, zeta: &[T]) -> Result<T> {
        match &self.spec.task {
            Task::Linearise { v } => Ok(*v),
            Task::Track => {
                let derivs = self.reference.as_ref().unwrap().eval(t);
                tracking_v(zeta, &derivs, &self.spec.poles)
            }
        }
    }
}

impl<T: Real> Controller<T> for BoundController<T> {
    fn noise_access(&self) -> NoiseAccess {
        match self.spec.family {
            Family::Idealistic => NoiseAccess::PerStep,
            _ => NoiseAccess::None,
        }
    }

    fn epsilon(&self) -> Option<T> {
        self.spec.epsilon()
    }

    fn control(&mut self, input: &StepInput<T>) -> Result<T> {
        let v = self.v_at(input.t, input.zeta)?;
        match self.spec.family {
            Family::Idealistic => {
                let xi = input.xi.ok_or_else(|| {
                    Error::Scenario(
                        "idealistic control requires per-step noise access from the simulator"
                            .into(),
                    )
                })?;
                idealistic_control(&input.coeffs, xi, v)
            }
            Family::ZeroNoise | Family::Hybrid { .. } => zero_noise_control(&input.coeffs, v),
        }
    }

    fn window_jump(&mut self, input: &WindowInput<T>) -> Result<Option<JumpDecision<T>>> {
        let Family::Hybrid { epsilon, delta_threshold } = self.spec.family else {
            return Ok(None);
        };
        let estimate = estimate_increment(
            input.state_start,
            input.state_end,
            input.u_start,
            &self.plant_model,
            epsilon,
            delta_threshold,
        )?;
        if estimate.skipped {
            return Ok(Some(JumpDecision { u_star: T::zero(), delta_zr: T::zero(), skipped: true }));
        }
        let (u_star, delta_zr) =
            hybrid_jump(&input.coeffs_start, &input.coeffs_end, &estimate)?;
        Ok(Some(JumpDecision { u_star, delta_zr, skipped: false }))
    }

    fn note_applied(&mut self, applied: &[T]) {
        if self.compensation.len() != applied.len() {
            self.compensation = vec![T::zero(); applied.len()];
        }
        for (acc, a) in self.compensation.iter_mut().zip(applied) {
            *acc = *acc + *a;
        }
    }

    fn compensation_total(&self) -> Vec<T> {
        self.compensation.clone()
    }
}

/// Hypothesis checks for zero-noise stabilisation: the noise coefficient of
/// the top chain component must vanish on the zero-output manifold and its
/// ζ-gradient must vanish at the origin. Reported, never assumed.
#[derive(Clone, Debug)]
pub struct StabilisationHypotheses {
    /// max |c_s(0, η)| over sampled η.
    pub max_cs_on_zero_manifold: f64,
    /// |∂c_s/∂ζ| at the origin (finite differences through the chart).
    pub cs_zeta_gradient_norm: f64,
    pub satisfied: bool,
}

pub fn stabilisation_hypotheses<T: Real>(
    nf: &NormalFormDef<T>,
    radius: T,
    samples: usize,
) -> Result<StabilisationHypotheses> {
    let n = nf.dim();
    let r = nf.r();
    let c_s = nf.c_s();
    let mut worst = 0.0_f64;
    if r < n {
        let center = vec![T::zero(); n - r];
        for eta in sampling::box_points(&center, radius, samples) {
            let mut z = vec![T::zero(); n];
            z[r..].copy_from_slice(&eta);
            let v = c_s.eval(&z)?.to_f64().unwrap_or(f64::NAN).abs();
            if !(v <= worst) {
                worst = v;
            }
        }
    }
    let h = lit::<T>(1e-6);
    let mut grad_sq = 0.0_f64;
    for i in 0..r {
        let mut zp = vec![T::zero(); n];
        let mut zm = vec![T::zero(); n];
        zp[i] = h;
        zm[i] = -h;
        let d = (c_s.eval(&zp)? - c_s.eval(&zm)?) / (h + h);
        grad_sq += d.to_f64().unwrap_or(f64::NAN).powi(2);
    }
    let grad = grad_sq.sqrt();
    Ok(StabilisationHypotheses {
        max_cs_on_zero_manifold: worst,
        cs_zeta_gradient_norm: grad,
        satisfied: worst < 1e-9 && grad < 1e-6,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{cosine_reference, example_normal_form};
    use approx::assert_relative_eq;

    #[test]
    fn pole_expansion_examples() {
        let p = place_poles_real::<f64>(&[-3.0, -4.0]).unwrap();
        assert_eq!(p.coefficients, vec![12.0, 7.0]);
        let p1 = place_poles_real::<f64>(&[-1.0]).unwrap();
        assert_eq!(p1.coefficients, vec![1.0]);
        let pc = place_poles::<f64>(&[Complex::new(-1.0, 1.0), Complex::new(-1.0, -1.0)]).unwrap();
        assert_relative_eq!(pc.coefficients[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(pc.coefficients[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn pole_validation() {
        assert!(place_poles_real::<f64>(&[1.0]).is_err());
        assert!(place_poles_real::<f64>(&[0.0]).is_err());
        assert!(place_poles::<f64>(&[Complex::new(-1.0, 1.0)]).is_err());
        assert!(place_poles::<f64>(&[]).is_err());
    }

    #[test]
    fn tracking_v_examples() {
        let poles = place_poles_real::<f64>(&[-3.0, -4.0]).unwrap();
        // on the reference the error terms vanish and v = y_R''
        let refsig = cosine_reference(0.1, 0.01, 5.0, 2);
        let d = refsig.eval(0.7);
        let v = tracking_v(&[d[0], d[1]], &d, &poles).unwrap();
        assert_relative_eq!(v, d[2], epsilon = 1e-12);
        // zeta = 0 at t = 0: v = y_R'' - d0 (0 - 0.11) - d1 (0 - 0) = 1.32 - 0.25
        let d0 = refsig.eval(0.0);
        let v0 = tracking_v(&[0.0, 0.0], &d0, &poles).unwrap();
        assert_relative_eq!(v0, 1.07, epsilon = 1e-12);
        // all-zero coefficients: pure feedforward
        let ff = PolePlacement::<f64> { coefficients: vec![0.0, 0.0], roots: vec![] };
        assert_relative_eq!(tracking_v(&[5.0, -3.0], &d0, &ff).unwrap(), d0[2]);
    }

    #[test]
    fn control_law_values() {
        let nf = example_normal_form::<f64>();
        let at0 = nf.coeffs_at_x(&[0.0; 3]).unwrap();
        // at the origin with v = 0 the idealistic control vanishes
        assert_eq!(idealistic_control(&at0, 3.7, 0.0).unwrap(), 0.0);
        // zero-noise with v = 1: u = 1 / b = -0.5
        assert_relative_eq!(zero_noise_control(&at0, 1.0).unwrap(), -0.5);
        // with c_s = 0 the two laws agree for any realised noise
        for xi in [-2.0, 0.0, 5.0] {
            assert_eq!(
                idealistic_control(&at0, xi, 0.3).unwrap(),
                zero_noise_control(&at0, 0.3).unwrap()
            );
        }
        // c_d = v makes the zero-noise law idle
        let c = Coefficients { c_d: 0.4, c_s: 0.0, b: 2.0 };
        assert_eq!(zero_noise_control(&c, 0.4).unwrap(), 0.0);
        // singular b is rejected
        let sing = Coefficients { c_d: 0.0, c_s: 0.0, b: 1e-12 };
        assert!(matches!(zero_noise_control(&sing, 1.0), Err(Error::SingularControl { .. })));
    }

    #[test]
    fn hybrid_jump_formula() {
        let start = Coefficients { c_d: 0.0, c_s: 1.0, b: 1.0 };
        let end = Coefficients { c_d: 0.0, c_s: 0.7, b: 1.0 };
        let est = IncrementEstimate {
            k: 1,
            delta_w: 0.02,
            skipped: false,
            excitation: 1.0,
            residual: 0.0,
        };
        let (u_star, delta) = hybrid_jump(&start, &end, &est).unwrap();
        assert_relative_eq!(u_star, -0.02);
        assert_relative_eq!(delta, -0.02);
        // zero increment or zero c_s at the window start: no jump
        let est0 = IncrementEstimate { delta_w: 0.0, ..est.clone() };
        assert_eq!(hybrid_jump(&start, &end, &est0).unwrap().0, 0.0);
        let start0 = Coefficients { c_s: 0.0, ..start };
        assert_eq!(hybrid_jump(&start0, &end, &est).unwrap().0, 0.0);
    }

    #[test]
    fn bind_validates_the_specification() {
        let nf = Arc::new(example_normal_form::<f64>());
        let plant = Arc::new(crate::models::example_system::<f64>());
        let poles = place_poles_real::<f64>(&[-3.0, -4.0]).unwrap();
        // tracking without a reference
        let spec = ControllerSpec {
            family: Family::<f64>::ZeroNoise,
            task: Task::Track,
            poles: poles.clone(),
        };
        assert!(bind(&spec, nf.clone(), None, plant.clone()).is_err());
        // wrong pole order
        let bad = ControllerSpec {
            family: Family::<f64>::ZeroNoise,
            task: Task::Linearise { v: 0.0 },
            poles: place_poles_real::<f64>(&[-1.0]).unwrap(),
        };
        assert!(bind(&bad, nf.clone(), None, plant.clone()).is_err());
        // reference with too few derivatives
        let shallow = cosine_reference(0.1, 0.01, 5.0, 1);
        let spec = ControllerSpec { family: Family::<f64>::ZeroNoise, task: Task::Track, poles };
        assert!(bind(&spec, nf, Some(shallow), plant).is_err());
    }

    #[test]
    fn stabilisation_hypotheses_fail_for_the_example() {
        // c_s = 4 x1 = 6η on the zero-output manifold: the zero-noise
        // stabilisation hypotheses do not hold for this system.
        let nf = example_normal_form::<f64>();
        let hyp = stabilisation_hypotheses(&nf, 0.2, 40).unwrap();
        assert!(hyp.max_cs_on_zero_manifold > 0.1);
        assert!(!hyp.satisfied);
    }
}

#[cfg(test)]
mod pole_properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        // the expanded polynomial vanishes on each input root
        #[test]
        fn expansion_reconstructs_its_roots(
            roots in proptest::collection::vec(-5.0_f64..-0.1, 1..6)
        ) {
            let p = place_poles_real::<f64>(&roots).unwrap();
            for r in &roots {
                let v = p.eval_poly(Complex::new(*r, 0.0)).norm();
                prop_assert!(v < 1e-9 * (1.0 + r.abs().powi(roots.len() as i32)));
            }
        }
    }
}
