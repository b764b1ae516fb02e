//! Causal estimation of Brownian increments from state samples.
//!
//! Over a window of length ε the state moves by
//! Δx = F ε + L ΔW + (one-step truncation error), with F = f + g u and
//! L = l frozen at the window start (zero-order hold). When the diffusion
//! direction is excited (|L| above a threshold) the increment is recovered
//! through the Moore-Penrose left pseudo-inverse of the column L:
//!
//! ```text
//! ΔŴ(k) = (LᵀL)⁻¹ Lᵀ [ Δx(k) - F ε ]
//! ```
//!
//! Windows failing the excitation guard are skipped (ΔŴ treated as zero
//! downstream), not failed: a small |L| means the noise contribution is
//! negligible over that window anyway.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::models::SystemDef;
use crate::simulate::HybridTrajectory;
use crate::{lit, Real};

/// One windowed increment estimate.
#[derive(Clone, Debug)]
pub struct IncrementEstimate<T> {
    /// Window index (1-based: window k covers (t_{k-1}, t_k]).
    pub k: usize,
    /// Estimated increment; zero when skipped.
    pub delta_w: T,
    /// Excitation guard tripped: no estimate, no compensation.
    pub skipped: bool,
    /// |L| at the window start.
    pub excitation: T,
    /// Least-squares residual |Δx - F ε - L ΔŴ| after the fit.
    pub residual: T,
}

/// Default excitation threshold.
pub fn default_delta_threshold<T: Real>() -> T {
    lit(1e-6)
}

/// Estimates the Brownian increment over one window from its two endpoint
/// states, the window-start control and the system fields.
pub fn estimate_increment<T: Real>(
    x_prev: &[T],
    x_curr: &[T],
    u_prev: T,
    sys: &SystemDef<T>,
    epsilon: T,
    delta_threshold: T,
) -> Result<IncrementEstimate<T>> {
    if !(epsilon > T::zero()) {
        return Err(Error::Scenario("estimation window must be positive".into()));
    }
    let finite =
        |v: &[T]| v.iter().all(|x| Float::is_finite(*x)) && Float::is_finite(u_prev);
    if !finite(x_prev) || !finite(x_curr) {
        return Err(Error::NonFinite { context: "increment estimation states".into() });
    }
    let n = sys.dim();
    if x_prev.len() != n || x_curr.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x_prev.len().min(x_curr.len()) });
    }

    let fv = sys.f.eval(x_prev)?;
    let gv = sys.g.eval(x_prev)?;
    let lv = sys.l.eval(x_prev)?;
    let excitation = Float::sqrt(lv.iter().fold(T::zero(), |a, v| a + *v * *v));

    if excitation <= delta_threshold {
        return Ok(IncrementEstimate {
            k: 0,
            delta_w: T::zero(),
            skipped: true,
            excitation,
            residual: T::zero(),
        });
    }

    let mut num = T::zero();
    let mut den = T::zero();
    let mut resid = vec![T::zero(); n];
    for i in 0..n {
        let drift = fv[i] + gv[i] * u_prev;
        resid[i] = x_curr[i] - x_prev[i] - drift * epsilon;
        num = num + lv[i] * resid[i];
        den = den + lv[i] * lv[i];
    }
    let delta_w = num / den;
    let mut rem = T::zero();
    for i in 0..n {
        let e = resid[i] - lv[i] * delta_w;
        rem = rem + e * e;
    }
    Ok(IncrementEstimate {
        k: 0,
        delta_w,
        skipped: false,
        excitation,
        residual: Float::sqrt(rem),
    })
}

/// Windowed estimates along a recorded trajectory sampled at resolution
/// dividing ε. Pre-jump states are used at window ends and post-jump states
/// at window starts (recorded samples are post-jump; pre-jump states come
/// from the jump records).
pub fn estimate_sequence<T: Real>(
    traj: &HybridTrajectory<T>,
    sys: &SystemDef<T>,
    epsilon: T,
    delta_threshold: T,
) -> Result<Vec<IncrementEstimate<T>>> {
    let dt = traj.dt.to_f64().unwrap_or(f64::NAN);
    let eps = epsilon.to_f64().unwrap_or(f64::NAN);
    let ratio = eps / dt;
    if !ratio.is_finite() || (ratio - ratio.round()).abs() > 1e-6 || ratio < 1.0 {
        return Err(Error::GridMismatch(format!(
            "epsilon = {eps} is not a positive integer multiple of the trajectory dt = {dt}"
        )));
    }
    let window_steps = ratio.round() as usize;
    if window_steps % traj.record_stride != 0 {
        return Err(Error::GridMismatch(format!(
            "window of {window_steps} steps is not aligned with the record stride {}",
            traj.record_stride
        )));
    }
    let last_step = match traj.samples.last() {
        Some(s) => s.step,
        None => return Ok(Vec::new()),
    };
    let windows = last_step / window_steps;

    let pre_jump_state = |step: usize| -> Option<Vec<T>> {
        traj.jumps.iter().find(|j| j.step == step).map(|j| j.state_pre.clone())
    };

    let mut out = Vec::with_capacity(windows);
    for k in 1..=windows {
        let s_start = traj
            .sample_at_step((k - 1) * window_steps)
            .ok_or_else(|| Error::GridMismatch(format!("missing sample at window {k} start")))?;
        let end_step = k * window_steps;
        let end_state = match pre_jump_state(end_step) {
            Some(st) => st,
            None => {
                traj.sample_at_step(end_step)
                    .ok_or_else(|| {
                        Error::GridMismatch(format!("missing sample at window {k} end"))
                    })?
                    .state
                    .clone()
            }
        };
        let mut est = estimate_increment(
            &s_start.state,
            &end_state,
            s_start.u,
            sys,
            epsilon,
            delta_threshold,
        )?;
        est.k = k;
        out.push(est);
    }
    Ok(out)
}
