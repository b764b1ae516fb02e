//! Seeded Brownian paths and hybrid Euler-Maruyama integration:
//! continuous flow plus state jumps at the compensation instants, with full
//! trajectory recording.
//!
//! The white noise a controller may consume is realised per step as
//! ξ_i = ΔW_i / Δt for the step about to be taken; multiplied back by Δt in
//! the state update this reproduces the Euler-Maruyama increment exactly,
//! so a control term -c_s ξ / b cancels the c_s ΔW contribution to within
//! one rounding of the division. The integrator is fixed-step only: the
//! compensation period must be an integer multiple of Δt and jumps land
//! exactly on grid points.

use std::sync::Arc;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::control::ControllerSpec;
use crate::error::{Error, Result};
use crate::models::{Coefficients, NormalFormDef, ReferenceSignal, SystemDef};
use crate::{lit, Real};

/// Name of the generator and normal transform behind [`generate_path`],
/// recorded in output metadata for reproducibility.
pub const RNG_DESCRIPTION: &str = "chacha8 / rand_distr StandardNormal (ziggurat)";

/// A seeded, fixed-resolution realization of Brownian increments:
/// ΔW_i ~ Normal(0, Δt), i = 0..N-1, with W(0) = 0.
#[derive(Clone, Debug)]
pub struct BrownianPath<T> {
    seed: u64,
    dt: T,
    increments: Vec<T>,
}

/// Draws `n` increments at resolution `dt` from the named generator;
/// bit-for-bit reproducible in the seed.
pub fn generate_path<T: Real>(seed: u64, dt: T, n: usize) -> BrownianPath<T>
where
    StandardNormal: Distribution<T>,
{
    assert!(dt > T::zero() && n >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sqrt_dt = Float::sqrt(dt);
    let increments =
        (0..n).map(|_| sqrt_dt * StandardNormal.sample(&mut rng)).collect();
    BrownianPath { seed, dt, increments }
}

impl<T: Real> BrownianPath<T> {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    pub fn increment(&self, i: usize) -> T {
        self.increments[i]
    }

    pub fn increments(&self) -> &[T] {
        &self.increments
    }

    /// W(t_i) = sum of the first i increments (W(0) = 0 included).
    pub fn cumulative(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.len() + 1);
        let mut acc = T::zero();
        out.push(acc);
        for dw in &self.increments {
            acc = acc + *dw;
            out.push(acc);
        }
        out
    }

    /// The same realization at resolution `factor`·Δt: increments are block
    /// sums of the fine ones, so comparative runs at different resolutions
    /// share the underlying noise exactly.
    pub fn aggregate(&self, factor: usize) -> Result<BrownianPath<T>> {
        if factor == 0 || self.len() % factor != 0 {
            return Err(Error::GridMismatch(format!(
                "cannot aggregate {} increments in blocks of {factor}",
                self.len()
            )));
        }
        let increments = self
            .increments
            .chunks(factor)
            .map(|c| c.iter().fold(T::zero(), |a, v| a + *v))
            .collect();
        Ok(BrownianPath { seed: self.seed, dt: self.dt * lit(factor as f64), increments })
    }
}

/// Which coordinates the integrator advances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordinateMode {
    /// The plant state x with fields f, g, l.
    Original,
    /// The transformed state z of a normal form; each step resolves
    /// x = Φ⁻¹(z) (warm-started Newton) to evaluate the coefficients.
    NormalForm,
}

/// Noise visibility a controller may request. Only the simulator can grant
/// per-step access; estimator-based controllers never see the true path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseAccess {
    None,
    PerStep,
}

/// Everything a controller sees at one flow step.
pub struct StepInput<'a, T> {
    pub step: usize,
    pub t: T,
    /// State in simulation coordinates.
    pub state: &'a [T],
    /// First r transformed coordinates (the output chain).
    pub zeta: &'a [T],
    /// Normal-form coefficients at the current state.
    pub coeffs: Coefficients<T>,
    /// Realised white noise ΔW/Δt for the step about to be taken; only
    /// granted to controllers declaring [`NoiseAccess::PerStep`].
    pub xi: Option<T>,
}

/// Endpoint data of one compensation window (period ε).
pub struct WindowInput<'a, T> {
    pub k: usize,
    pub t_end: T,
    pub epsilon: T,
    /// Post-jump state at the window start.
    pub state_start: &'a [T],
    /// Pre-jump state at the window end.
    pub state_end: &'a [T],
    /// Control applied on the first step of the window (zero-order hold for
    /// the drift reconstruction).
    pub u_start: T,
    pub coeffs_start: Coefficients<T>,
    pub coeffs_end: Coefficients<T>,
}

/// A controller's verdict at a window boundary.
#[derive(Clone, Debug)]
pub struct JumpDecision<T> {
    pub u_star: T,
    /// Increment applied to z_r: b(z_end) · u*.
    pub delta_zr: T,
    /// Excitation guard tripped: the window is counted but no jump happens.
    pub skipped: bool,
}

/// Run-level controller bookkeeping.
#[derive(Clone, Debug)]
pub struct ControllerStats<T> {
    pub windows: usize,
    pub skipped_windows: usize,
    pub jumps: usize,
    /// Componentwise sum of (state_post - state_pre) over all jumps, as
    /// acknowledged back to the controller.
    pub compensation_total: Vec<T>,
}

impl<T: Real> ControllerStats<T> {
    pub fn new(n: usize) -> Self {
        ControllerStats {
            windows: 0,
            skipped_windows: 0,
            jumps: 0,
            compensation_total: vec![T::zero(); n],
        }
    }
}

/// Feedback law driven by the integrator: a per-step control and an
/// optional jump hook at the compensation instants.
pub trait Controller<T: Real>: Send {
    fn noise_access(&self) -> NoiseAccess {
        NoiseAccess::None
    }

    /// Compensation period; `None` disables the window machinery.
    fn epsilon(&self) -> Option<T> {
        None
    }

    fn control(&mut self, input: &StepInput<T>) -> Result<T>;

    fn window_jump(&mut self, _input: &WindowInput<T>) -> Result<Option<JumpDecision<T>>> {
        Ok(None)
    }

    /// Acknowledges the state difference a jump actually produced.
    fn note_applied(&mut self, _applied: &[T]) {}

    /// Total compensation acknowledged so far (componentwise).
    fn compensation_total(&self) -> Vec<T> {
        Vec::new()
    }
}

/// A full experiment description. `initial_state` is given in simulation
/// coordinates (x for [`CoordinateMode::Original`], z for
/// [`CoordinateMode::NormalForm`]).
#[derive(Clone)]
pub struct Scenario<T> {
    pub system: Arc<SystemDef<T>>,
    pub normal_form: Option<Arc<NormalFormDef<T>>>,
    pub mode: CoordinateMode,
    pub controller: Option<ControllerSpec<T>>,
    pub reference: Option<ReferenceSignal<T>>,
    pub dt: T,
    pub t_final: T,
    pub seed: u64,
    pub initial_state: Vec<T>,
    /// Keep every `record_stride`-th step in the trajectory (jumps are
    /// always kept).
    pub record_stride: usize,
}

impl<T: Real> Scenario<T> {
    pub fn open_loop(system: Arc<SystemDef<T>>, dt: T, t_final: T, seed: u64, x0: Vec<T>) -> Self {
        Scenario {
            system,
            normal_form: None,
            mode: CoordinateMode::Original,
            controller: None,
            reference: None,
            dt,
            t_final,
            seed,
            initial_state: x0,
            record_stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride.max(1);
        self
    }

    fn steps(&self) -> Result<usize> {
        grid_ratio(self.t_final, self.dt, "t_final")
    }
}

/// t/dt as an exact positive integer (tolerating only rounding slack).
fn grid_ratio<T: Real>(t: T, dt: T, what: &str) -> Result<usize> {
    if !(dt > T::zero()) {
        return Err(Error::Scenario("dt must be positive".into()));
    }
    let ratio = (t / dt).to_f64().unwrap_or(f64::NAN);
    let rounded = ratio.round();
    if !ratio.is_finite() || rounded < 1.0 || (ratio - rounded).abs() > 1e-6 {
        return Err(Error::GridMismatch(format!(
            "{what} = {t} is not a positive integer multiple of dt = {dt}"
        )));
    }
    Ok(rounded as usize)
}


/// One recorded trajectory row (post-jump at compensation instants).
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub step: usize,
    pub t: T,
    pub state: Vec<T>,
    pub u: T,
    pub y: T,
    pub y_ref: T,
    pub w: T,
}

/// A jump record at a compensation instant; `skipped` windows keep
/// state_post = state_pre and u* = 0.
#[derive(Clone, Debug)]
pub struct JumpRecord<T> {
    pub k: usize,
    pub step: usize,
    pub t: T,
    pub state_pre: Vec<T>,
    pub state_post: Vec<T>,
    pub u_star: T,
    pub skipped: bool,
}

/// Time-stamped states, controls and outputs plus jump records.
#[derive(Clone, Debug)]
pub struct HybridTrajectory<T> {
    pub mode: CoordinateMode,
    pub dt: T,
    pub seed: u64,
    pub record_stride: usize,
    pub samples: Vec<Sample<T>>,
    pub jumps: Vec<JumpRecord<T>>,
    pub stats: ControllerStats<T>,
}

impl<T: Real> HybridTrajectory<T> {
    /// The recorded sample at an exact step index, if kept.
    pub fn sample_at_step(&self, step: usize) -> Option<&Sample<T>> {
        self.samples.binary_search_by_key(&step, |s| s.step).ok().map(|i| &self.samples[i])
    }

    pub fn last_state(&self) -> &[T] {
        &self.samples.last().expect("non-empty trajectory").state
    }
}

/// Every `stride`-th recorded sample; jump records are preserved.
pub fn resample<T: Real>(traj: &HybridTrajectory<T>, stride: usize) -> HybridTrajectory<T> {
    assert!(stride >= 1);
    let mut samples: Vec<Sample<T>> =
        traj.samples.iter().step_by(stride).cloned().collect();
    if let (Some(last), Some(orig_last)) = (samples.last(), traj.samples.last()) {
        if last.step != orig_last.step {
            samples.push(orig_last.clone());
        }
    }
    HybridTrajectory {
        mode: traj.mode,
        dt: traj.dt,
        seed: traj.seed,
        record_stride: traj.record_stride * stride,
        samples,
        jumps: traj.jumps.clone(),
        stats: traj.stats.clone(),
    }
}

enum Plant<T: Real> {
    Original,
    /// Warm-started resolve of x = Φ⁻¹(z) in normal-form mode.
    NormalForm(crate::transform::ChartResolver<T>),
}

impl<T: Real> Plant<T> {
    fn resolve<'a>(&mut self, state: &'a [T]) -> Result<std::borrow::Cow<'a, [T]>> {
        match self {
            Plant::Original => Ok(std::borrow::Cow::Borrowed(state)),
            Plant::NormalForm(resolver) => {
                Ok(std::borrow::Cow::Owned(resolver.resolve(state)?))
            }
        }
    }
}

/// Integrates the scenario over one Brownian path.
///
/// Flow: Euler-Maruyama, x_{i+1} = x_i + (f + g u) Δt + l ΔW in the original
/// coordinates, or the normal-form equations in z. Jumps: at every t_k = kε
/// the controller may emit u*(k); the state moves by b(z_end) u* on the r-th
/// transformed coordinate (mapped back through Φ⁻¹ in original coordinates).
///
/// Aborts with a diagnostic when the state becomes non-finite or leaves the
/// working region of the system guard.
pub fn integrate<T: Real>(scn: &Scenario<T>, path: &BrownianPath<T>) -> Result<HybridTrajectory<T>> {
    let n_steps = scn.steps()?;
    if path.len() < n_steps {
        return Err(Error::GridMismatch(format!(
            "path holds {} increments, scenario needs {n_steps}",
            path.len()
        )));
    }
    let path_dt = path.dt().to_f64().unwrap_or(f64::NAN);
    let scn_dt = scn.dt.to_f64().unwrap_or(f64::NAN);
    if !(path_dt.is_finite() && (path_dt - scn_dt).abs() <= 1e-12 * scn_dt.abs()) {
        return Err(Error::GridMismatch(format!(
            "path resolution {path_dt} does not match scenario dt {scn_dt}"
        )));
    }
    let n = scn.system.dim();
    if scn.initial_state.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: scn.initial_state.len() });
    }

    let mut controller: Option<Box<dyn Controller<T>>> = match &scn.controller {
        Some(spec) => Some(crate::control::bind(
            spec,
            scn.normal_form
                .clone()
                .ok_or_else(|| Error::Scenario("controller requires a normal form".into()))?,
            scn.reference.clone(),
            match scn.mode {
                CoordinateMode::Original => scn.system.clone(),
                CoordinateMode::NormalForm => {
                    Arc::new(scn.normal_form.as_ref().unwrap().as_system())
                }
            },
        )?),
        None => None,
    };

    let window_steps: Option<usize> = match controller.as_ref().and_then(|c| c.epsilon()) {
        Some(eps) => {
            let ws = grid_ratio(eps, scn.dt, "epsilon")?;
            Some(ws)
        }
        None => None,
    };

    let r = scn.normal_form.as_ref().map(|nf| nf.r()).unwrap_or(0);
    let mut plant = match scn.mode {
        CoordinateMode::Original => Plant::Original,
        CoordinateMode::NormalForm => Plant::NormalForm(crate::transform::ChartResolver::new(
            scn.normal_form
                .as_ref()
                .ok_or_else(|| Error::Scenario("normal-form mode requires a normal form".into()))?
                .chart()
                .clone(),
        )),
    };

    let mut state = scn.initial_state.clone();
    let mut w = T::zero();
    let stride = scn.record_stride.max(1);
    let mut samples: Vec<Sample<T>> = Vec::with_capacity(n_steps / stride + 2);
    let mut jumps: Vec<JumpRecord<T>> = Vec::new();
    let mut stats = ControllerStats::new(n);

    // window bookkeeping
    let mut window_start_state = state.clone();
    let mut window_coeffs_start: Option<Coefficients<T>> = None;
    let mut window_u_start = T::zero();

    let mut last_u = T::zero();
    for i in 0..n_steps {
        let t = scn.dt * lit(i as f64);
        let dw = path.increment(i);
        let xi = dw / scn.dt;

        // one chart resolve per step: guard, coefficients and the internal
        // dynamics all read the same original-coordinates point
        let x = plant.resolve(&state).map_err(|e| chart_abort(e, i, t))?;
        if let Some(g) = scn.system.guard() {
            if let Some(msg) = g(&x) {
                return Err(Error::GuardTripped {
                    step: i,
                    t: t.to_f64().unwrap_or(f64::NAN),
                    detail: msg,
                });
            }
        }
        let (coeffs, zeta): (Coefficients<T>, Vec<T>) = match (&scn.normal_form, scn.mode) {
            (Some(nf), CoordinateMode::NormalForm) => (nf.coeffs_at_x(&x)?, state[..r].to_vec()),
            (Some(nf), CoordinateMode::Original) => {
                let zeta = nf
                    .chart()
                    .fields()
                    .iter()
                    .take(r)
                    .map(|f| f.eval(&x))
                    .collect::<Result<Vec<_>>>()?;
                (nf.coeffs_at_x(&x)?, zeta)
            }
            (None, _) => {
                (Coefficients { c_d: T::zero(), c_s: T::zero(), b: T::zero() }, Vec::new())
            }
        };

        let u = match controller.as_mut() {
            Some(c) => {
                let granted =
                    if c.noise_access() == NoiseAccess::PerStep { Some(xi) } else { None };
                c.control(&StepInput { step: i, t, state: &state, zeta: &zeta, coeffs, xi: granted })?
            }
            None => T::zero(),
        };
        last_u = u;
        if let Some(ws) = window_steps {
            if i % ws == 0 {
                window_u_start = u;
                window_coeffs_start = Some(coeffs);
            }
        }

        if i % stride == 0 {
            samples.push(record(scn, i, t, &state, u, w)?);
        }

        // Euler-Maruyama flow step, noise realised as ξ = ΔW/Δt. The drift
        // below mirrors the controller's c_d + c_s ξ expression so that an
        // idealistic control cancels the noise term to rounding.
        match scn.mode {
            CoordinateMode::Original => {
                let fv = scn.system.f.eval(&state)?;
                let gv = scn.system.g.eval(&state)?;
                let lv = scn.system.l.eval(&state)?;
                for j in 0..n {
                    let rate = fv[j] + gv[j] * u + lv[j] * xi;
                    state[j] = state[j] + rate * scn.dt;
                }
            }
            CoordinateMode::NormalForm => {
                let nf = scn.normal_form.as_ref().unwrap();
                let (pd, ps) = nf.internal_at_x(&x)?;
                let mut rate = vec![T::zero(); n];
                for j in 0..r - 1 {
                    rate[j] = state[j + 1];
                }
                rate[r - 1] = coeffs.c_d + coeffs.c_s * xi + coeffs.b * u;
                for j in 0..n - r {
                    rate[r + j] = pd[j] + ps[j] * xi;
                }
                for j in 0..n {
                    state[j] = state[j] + rate[j] * scn.dt;
                }
            }
        }
        w = w + dw;
        if !state.iter().all(|v| Float::is_finite(*v)) {
            return Err(Error::NonFiniteState {
                step: i + 1,
                t: (t + scn.dt).to_f64().unwrap_or(f64::NAN),
            });
        }

        // window boundary: consult the jump hook
        if let (Some(ws), Some(ctrl)) = (window_steps, controller.as_mut()) {
            if (i + 1) % ws == 0 {
                let k = (i + 1) / ws;
                let t_end = scn.dt * lit((i + 1) as f64);
                let coeffs_end = {
                    let x = plant.resolve(&state).map_err(|e| chart_abort(e, i + 1, t_end))?;
                    scn.normal_form.as_ref().unwrap().coeffs_at_x(&x)?
                };
                let decision = ctrl.window_jump(&WindowInput {
                    k,
                    t_end,
                    epsilon: ctrl.epsilon().unwrap(),
                    state_start: &window_start_state,
                    state_end: &state,
                    u_start: window_u_start,
                    coeffs_start: window_coeffs_start.unwrap_or(coeffs),
                    coeffs_end,
                })?;
                if let Some(d) = decision {
                    stats.windows += 1;
                    let state_pre = state.clone();
                    if d.skipped {
                        stats.skipped_windows += 1;
                        jumps.push(JumpRecord {
                            k,
                            step: i + 1,
                            t: t_end,
                            state_pre: state_pre.clone(),
                            state_post: state_pre,
                            u_star: T::zero(),
                            skipped: true,
                        });
                    } else {
                        match scn.mode {
                            CoordinateMode::NormalForm => {
                                state[r - 1] = state[r - 1] + d.delta_zr;
                            }
                            CoordinateMode::Original => {
                                let nf = scn.normal_form.as_ref().unwrap();
                                let mut z = nf.chart().forward(&state)?;
                                z[r - 1] = z[r - 1] + d.delta_zr;
                                state = nf.chart().invert(&z, Some(&state))?;
                            }
                        }
                        let applied: Vec<T> = state
                            .iter()
                            .zip(&state_pre)
                            .map(|(post, pre)| *post - *pre)
                            .collect();
                        ctrl.note_applied(&applied);
                        stats.jumps += 1;
                        jumps.push(JumpRecord {
                            k,
                            step: i + 1,
                            t: t_end,
                            state_pre,
                            state_post: state.clone(),
                            u_star: d.u_star,
                            skipped: false,
                        });
                    }
                }
                window_start_state.clone_from(&state);
                window_coeffs_start = None;
            }
        }
    }

    // final row (post-jump when a jump landed on the last step)
    let t_end = scn.dt * lit(n_steps as f64);
    samples.push(record(scn, n_steps, t_end, &state, last_u, w)?);

    if let Some(c) = controller.as_ref() {
        stats.compensation_total = c.compensation_total();
        if stats.compensation_total.is_empty() {
            stats.compensation_total = vec![T::zero(); n];
        }
    }

    Ok(HybridTrajectory {
        mode: scn.mode,
        dt: scn.dt,
        seed: scn.seed,
        record_stride: stride,
        samples,
        jumps,
        stats,
    })
}

/// A chart-inverse failure mid-run means the state left the region where
/// the coordinate change is a diffeomorphism; report it like a guard trip.
fn chart_abort<T: Real>(e: Error, step: usize, t: T) -> Error {
    match e {
        Error::NewtonNoConvergence { .. } | Error::SingularJacobian { .. } => Error::GuardTripped {
            step,
            t: t.to_f64().unwrap_or(f64::NAN),
            detail: format!("coordinate chart inverse failed ({e})"),
        },
        other => other,
    }
}

fn record<T: Real>(
    scn: &Scenario<T>,
    step: usize,
    t: T,
    state: &[T],
    u: T,
    w: T,
) -> Result<Sample<T>> {
    let y = match scn.mode {
        CoordinateMode::Original => scn.system.h.eval(state)?,
        CoordinateMode::NormalForm => state[0],
    };
    let y_ref = match &scn.reference {
        Some(r) => r.eval(t)[0],
        None => T::nan(),
    };
    Ok(Sample { step, t, state: state.to_vec(), u, y, y_ref, w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Ad, ScalarField, VectorField};
    use crate::models::example_zero_dynamics;
    use approx::assert_relative_eq;

    #[test]
    fn same_seed_reproduces_the_path() {
        let a = generate_path::<f64>(42, 1e-3, 1000);
        let b = generate_path::<f64>(42, 1e-3, 1000);
        assert_eq!(a.increments(), b.increments());
        let c = generate_path::<f64>(43, 1e-3, 1000);
        assert_ne!(a.increments(), c.increments());
    }

    #[test]
    fn increment_moments_match_the_brownian_law() {
        let dt = 1e-6;
        let n = 1_000_000;
        let p = generate_path::<f64>(7, dt, n);
        let mean: f64 = p.increments().iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 * (dt / n as f64).sqrt(), "mean {mean}");
        let var: f64 = p.increments().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (n - 1) as f64;
        assert!((var - dt).abs() < 0.1 * dt, "variance {var} vs {dt}");
    }

    #[test]
    fn aggregation_is_exact_block_summation() {
        let p = generate_path::<f64>(11, 1e-4, 1000);
        let q = p.aggregate(10).unwrap();
        assert_eq!(q.len(), 100);
        for k in 0..100 {
            let s: f64 = (0..10).map(|j| p.increment(10 * k + j)).sum();
            assert_eq!(q.increment(k), s);
        }
        // cumulative endpoints agree to rounding (different association)
        assert_relative_eq!(p.cumulative()[1000], q.cumulative()[100], epsilon = 1e-12);
        assert!(p.aggregate(7).is_err());
    }

    #[test]
    fn cumulative_starts_at_zero_and_sums() {
        let p = generate_path::<f64>(3, 0.5, 4);
        let w = p.cumulative();
        assert_eq!(w[0], 0.0);
        assert_eq!(w.len(), 5);
        assert_relative_eq!(w[4], p.increments().iter().sum::<f64>());
    }

    fn scalar_system(
        drift: impl Fn(&Ad<f64>) -> Ad<f64> + Send + Sync + 'static,
        diff: impl Fn(&Ad<f64>) -> Ad<f64> + Send + Sync + 'static,
    ) -> Arc<SystemDef<f64>> {
        Arc::new(SystemDef::new(
            VectorField::new(1, move |x: &[Ad<f64>]| vec![drift(&x[0])]),
            VectorField::zero(1),
            VectorField::new(1, move |x: &[Ad<f64>]| vec![diff(&x[0])]),
            ScalarField::coordinate(1, 0),
        ))
    }

    #[test]
    fn zero_dynamics_equilibrium_stays_at_zero() {
        let zd = example_zero_dynamics::<f64>();
        let sys = Arc::new(SystemDef::new(
            zd.drift.clone(),
            VectorField::zero(1),
            zd.diffusion.clone(),
            ScalarField::coordinate(1, 0),
        ));
        let path = generate_path::<f64>(5, 1e-4, 10_000);
        let scn = Scenario::open_loop(sys, 1e-4, 1.0, 5, vec![0.0]);
        let traj = integrate(&scn, &path).unwrap();
        for s in &traj.samples {
            assert_eq!(s.state[0], 0.0);
        }
    }

    #[test]
    fn deterministic_linear_system_matches_the_exponential() {
        // dx = A x dt with A = [[0, 1], [-2, -3]]: eigenvalues -1, -2.
        // Closed form from the eigenbasis, evaluated independently.
        let f = VectorField::new(2, |x: &[Ad<f64>]| {
            vec![
                x[1].clone(),
                -&(&(&Ad::from_f64(2.0) * &x[0]) + &(&Ad::from_f64(3.0) * &x[1])),
            ]
        });
        let sys = Arc::new(SystemDef::new(
            f,
            VectorField::zero(2),
            VectorField::zero(2),
            ScalarField::coordinate(2, 0),
        ));
        let x0 = vec![1.0, 0.0];
        // x(t) = c1 e^{-t} (1, -1) + c2 e^{-2t} (1, -2); x(0) = (1, 0) gives
        // c1 = 2, c2 = -1.
        let exact = |t: f64| {
            let (e1, e2) = ((-t).exp(), (-2.0 * t).exp());
            [2.0 * e1 - e2, -2.0 * e1 + 2.0 * e2]
        };
        let dt = 1e-5;
        let path = generate_path::<f64>(1, dt, 100_000);
        let scn = Scenario::open_loop(sys, dt, 1.0, 1, x0).with_stride(1000);
        let traj = integrate(&scn, &path).unwrap();
        for s in traj.samples.iter().skip(1) {
            let want = exact(s.t);
            for j in 0..2 {
                let err = (s.state[j] - want[j]).abs();
                assert!(
                    err <= 1e-4 * want[j].abs().max(1e-3),
                    "t = {}: {} vs {}",
                    s.t,
                    s.state[j],
                    want[j]
                );
            }
        }
    }

    #[test]
    fn strong_self_convergence_of_the_zero_dynamics() {
        // Euler-Maruyama endpoint differences across a 4x resolution ladder
        // on the same realization: median ratio consistent with strong
        // order >= 1/2 (ratio 2 for halved-twice step).
        let zd = example_zero_dynamics::<f64>();
        let sys = Arc::new(SystemDef::new(
            zd.drift.clone(),
            VectorField::zero(1),
            zd.diffusion.clone(),
            ScalarField::coordinate(1, 0),
        ));
        let dt_fine = 1.0 / 65536.0;
        let mut ratios = Vec::new();
        for seed in 0..20 {
            let fine = generate_path::<f64>(seed, dt_fine, 65536);
            let mid = fine.aggregate(4).unwrap();
            let coarse = fine.aggregate(16).unwrap();
            let run = |path: &BrownianPath<f64>, dt: f64| {
                let scn =
                    Scenario::open_loop(sys.clone(), dt, 1.0, seed, vec![0.1]).with_stride(1 << 20);
                integrate(&scn, path).unwrap().last_state()[0]
            };
            let e_fine = run(&fine, dt_fine);
            let e_mid = run(&mid, dt_fine * 4.0);
            let e_coarse = run(&coarse, dt_fine * 16.0);
            let d1 = (e_coarse - e_mid).abs();
            let d2 = (e_mid - e_fine).abs();
            if d2 > 1e-14 {
                ratios.push(d1 / d2);
            }
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ratios[ratios.len() / 2];
        assert!(median >= 1.8, "median self-convergence ratio {median}");
    }

    #[test]
    fn abort_on_divergence_reports_the_step() {
        // dx = x^2 dt from x0 = 1 blows up in finite time
        let sys = scalar_system(|x| x.powi(2), |_| Ad::zero());
        let path = generate_path::<f64>(2, 1e-3, 2000);
        let scn = Scenario::open_loop(sys, 1e-3, 2.0, 2, vec![1.0]);
        match integrate(&scn, &path) {
            Err(Error::NonFiniteState { step, .. }) => assert!(step > 0),
            other => panic!("expected non-finite abort, got {:?}", other.map(|t| t.samples.len())),
        }
    }

    #[test]
    fn guard_abort_carries_the_diagnostic() {
        let sys = crate::models::example_system::<f64>();
        // drive x2 out of the working region with a large initial value
        let scn = Scenario::open_loop(Arc::new(sys), 1e-3, 0.5, 3, vec![0.0, 1.40001, 0.0]);
        let path = generate_path::<f64>(3, 1e-3, 500);
        match integrate(&scn, &path) {
            Err(Error::GuardTripped { detail, .. }) => assert!(detail.contains("x2")),
            other => panic!("expected guard abort, got {:?}", other.map(|t| t.samples.len())),
        }
    }

    #[test]
    fn grid_validation() {
        let sys = scalar_system(|_| Ad::zero(), |_| Ad::one());
        let path = generate_path::<f64>(2, 1e-3, 100);
        // t_final not a multiple of dt
        let scn = Scenario::open_loop(sys.clone(), 1e-3, 0.0505, 2, vec![0.0]);
        assert!(matches!(integrate(&scn, &path), Err(Error::GridMismatch(_))));
        // path too short
        let scn = Scenario::open_loop(sys, 1e-3, 1.0, 2, vec![0.0]);
        assert!(matches!(integrate(&scn, &path), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn recording_stride_and_resample() {
        let sys = scalar_system(|x| -&(&Ad::from_f64(1.0) * x), |_| Ad::one());
        let path = generate_path::<f64>(9, 1e-3, 1000);
        let scn = Scenario::open_loop(sys, 1e-3, 1.0, 9, vec![0.3]).with_stride(10);
        let traj = integrate(&scn, &path).unwrap();
        // 1000/10 + final row
        assert_eq!(traj.samples.len(), 101);
        let thin = resample(&traj, 10);
        assert_eq!(thin.samples.len(), 11);
        assert_eq!(thin.samples.last().unwrap().step, 1000);
        let id = resample(&traj, 1);
        assert_eq!(id.samples.len(), traj.samples.len());
        // replayability: state at recorded steps reproduces the recursion
        let s0 = &traj.samples[0];
        let mut x = s0.state[0];
        for i in 0..10 {
            x += -x * 1e-3 + path.increment(i);
        }
        assert_relative_eq!(traj.samples[1].state[0], x, max_relative = 1e-12);
    }

    #[test]
    fn additive_noise_integrates_the_path_exactly() {
        // dx = dW: state equals W at every step
        let sys = scalar_system(|_| Ad::zero(), |_| Ad::one());
        let path = generate_path::<f64>(21, 1e-3, 1000);
        let scn = Scenario::open_loop(sys, 1e-3, 1.0, 21, vec![0.0]);
        let traj = integrate(&scn, &path).unwrap();
        let w = path.cumulative();
        for s in &traj.samples {
            assert_relative_eq!(s.state[0], w[s.step], epsilon = 1e-12);
            assert_relative_eq!(s.w, w[s.step], epsilon = 0.0);
        }
    }
}
