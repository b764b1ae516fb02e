//! Coordinate-change machinery: build z = Φ(x) from the operator calculus
//! plus completion functions, verify the diffeomorphism condition, extract
//! the normal form and the zero dynamics.

use nalgebra::{DMatrix, DVector};
use num_traits::Float;

use std::sync::Arc;

use crate::autodiff::{gradient, Ad, ScalarField, VectorField};
use crate::error::{Error, Result};
use crate::models::{InternalSde, NormalFormDef, SystemDef};
use crate::operators::{
    a_operator, iterate_stochastic_lie, lie, relative_degree, stochastic_lie, Neighbourhood,
};
use crate::{lit, Real};

/// How the last n-r coordinate functions were obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompletionKind {
    UserSupplied,
    /// Automatic orthogonal completion: guarantees an invertible Jacobian
    /// but generally not input-independent internal dynamics.
    GramSchmidt,
}

/// A coordinate change z = Φ(x): n scalar fields with a damped-Newton
/// numerical inverse (residual tolerance 1e-12, at most 50 iterations).
#[derive(Clone)]
pub struct CoordinateChange<T> {
    fields: Vec<ScalarField<T>>,
    r: usize,
    newton_tol: T,
    newton_max_iter: usize,
    completion: CompletionKind,
    input_dependent_internal: bool,
    max_lg_completion: f64,
}

impl<T: Real> CoordinateChange<T> {
    /// Wraps explicit coordinate fields (φ_1, ..., φ_n) with the first r of
    /// them understood as the output chain.
    pub fn from_fields(fields: Vec<ScalarField<T>>, r: usize) -> Self {
        let n = fields.len();
        assert!(n > 0 && r >= 1 && r <= n);
        for f in &fields {
            assert_eq!(f.dim(), n);
        }
        CoordinateChange {
            fields,
            r,
            newton_tol: lit(1e-12),
            newton_max_iter: 50,
            completion: CompletionKind::UserSupplied,
            input_dependent_internal: false,
            max_lg_completion: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.fields.len()
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn fields(&self) -> &[ScalarField<T>] {
        &self.fields
    }

    pub fn component(&self, i: usize) -> &ScalarField<T> {
        &self.fields[i]
    }

    pub fn completion_kind(&self) -> CompletionKind {
        self.completion
    }

    /// True when some completion function has L_g φ_j != 0 on the sampled
    /// neighbourhood: the internal dynamics then depends on the input and
    /// the normal-form extraction refuses to run.
    pub fn has_input_dependent_internal(&self) -> bool {
        self.input_dependent_internal
    }

    pub fn max_lg_completion(&self) -> f64 {
        self.max_lg_completion
    }

    /// Forward map z = Φ(x).
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.fields.iter().map(|f| f.eval(x)).collect()
    }

    pub fn forward_ad(&self, x: &[Ad<T>]) -> Vec<Ad<T>> {
        self.fields.iter().map(|f| f.eval_ad(x)).collect()
    }

    /// Jacobian ∂Φ/∂x at `x` (rows are gradients of the components).
    pub fn jacobian_at(&self, x: &[T]) -> Result<DMatrix<T>> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (i, f) in self.fields.iter().enumerate() {
            for (j, v) in gradient(f, x)?.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    /// Convergence threshold for a target z: the residual tolerance scaled
    /// by the target magnitude (pure rounding limits the achievable
    /// absolute residual away from the origin).
    fn tol_for(&self, z: &[T]) -> T {
        let mut m = T::one();
        for v in z {
            let a = Float::abs(*v);
            if a > m {
                m = a;
            }
        }
        self.newton_tol * m
    }

    /// Solves Φ(x) = z by damped Newton iteration, starting from `guess`
    /// (origin when absent). Reports the last residual on failure.
    pub fn invert(&self, z: &[T], guess: Option<&[T]>) -> Result<Vec<T>> {
        let n = self.dim();
        if z.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: z.len() });
        }
        let tol = self.tol_for(z);
        let mut x: Vec<T> = match guess {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); n],
        };
        let residual = |x: &[T]| -> Result<(DVector<T>, T)> {
            let fx = self.forward(x)?;
            let mut v = DVector::zeros(n);
            let mut norm = T::zero();
            for i in 0..n {
                v[i] = z[i] - fx[i];
                let a = Float::abs(v[i]);
                if a > norm {
                    norm = a;
                }
            }
            Ok((v, norm))
        };
        let (mut res, mut res_norm) = residual(&x)?;
        for _ in 0..self.newton_max_iter {
            if res_norm <= tol {
                return Ok(x);
            }
            let jac = self.jacobian_at(&x)?;
            let lu = jac.lu();
            let Some(step) = lu.solve(&res) else {
                return Err(Error::SingularJacobian { ratio: 0.0 });
            };
            let mut damping = T::one();
            let mut accepted = false;
            for _ in 0..25 {
                let cand: Vec<T> =
                    x.iter().zip(step.iter()).map(|(xi, si)| *xi + damping * *si).collect();
                match residual(&cand) {
                    Ok((cres, cnorm)) if cnorm < res_norm => {
                        x = cand;
                        res = cres;
                        res_norm = cnorm;
                        accepted = true;
                        break;
                    }
                    _ => damping = damping * lit(0.5),
                }
            }
            if !accepted {
                break;
            }
        }
        if res_norm <= tol {
            Ok(x)
        } else {
            Err(Error::NewtonNoConvergence {
                iterations: self.newton_max_iter,
                residual: res_norm.to_f64().unwrap_or(f64::NAN),
            })
        }
    }
}

/// Warm-started chart inversion for step-by-step use: reuses the previous
/// solution as the initial guess and the previous Jacobian factorisation as
/// long as the iteration keeps contracting, refreshing it otherwise. Same
/// residual tolerance as [`CoordinateChange::invert`].
pub struct ChartResolver<T: Real> {
    chart: Arc<CoordinateChange<T>>,
    last_x: Vec<T>,
    lu: Option<nalgebra::LU<T, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl<T: Real> ChartResolver<T> {
    pub fn new(chart: Arc<CoordinateChange<T>>) -> Self {
        let n = chart.dim();
        ChartResolver { chart, last_x: vec![T::zero(); n], lu: None }
    }

    pub fn chart(&self) -> &Arc<CoordinateChange<T>> {
        &self.chart
    }

    /// Seeds the warm start (e.g. with the scenario's initial state).
    pub fn prime(&mut self, x: &[T]) {
        self.last_x.clone_from(&x.to_vec());
        self.lu = None;
    }

    pub fn resolve(&mut self, z: &[T]) -> Result<Vec<T>> {
        let n = self.chart.dim();
        let tol = self.chart.tol_for(z);
        let mut x = self.last_x.clone();
        let residual = |x: &[T]| -> Result<(DVector<T>, T)> {
            let fx = self.chart.forward(x)?;
            let mut v = DVector::zeros(n);
            let mut norm = T::zero();
            for i in 0..n {
                v[i] = z[i] - fx[i];
                let a = Float::abs(v[i]);
                if a > norm {
                    norm = a;
                }
            }
            Ok((v, norm))
        };
        let (mut res, mut norm) = residual(&x)?;
        let mut refreshed = false;
        for _ in 0..60 {
            if norm <= tol {
                self.last_x.clone_from(&x);
                return Ok(x);
            }
            if self.lu.is_none() {
                self.lu = Some(self.chart.jacobian_at(&x)?.lu());
                refreshed = true;
            }
            let step = match self.lu.as_ref().unwrap().solve(&res) {
                Some(s) => s,
                None => return Err(Error::SingularJacobian { ratio: 0.0 }),
            };
            let cand: Vec<T> = x.iter().zip(step.iter()).map(|(a, s)| *a + *s).collect();
            let (cres, cnorm) = residual(&cand)?;
            if cnorm < norm {
                x = cand;
                res = cres;
                norm = cnorm;
            } else if !refreshed {
                // stale factorisation stopped contracting: rebuild once
                self.lu = None;
            } else {
                // fresh Jacobian and still no progress: fall back to the
                // fully damped solver
                let out = self.chart.invert(z, Some(&x))?;
                self.last_x.clone_from(&out);
                self.lu = None;
                return Ok(out);
            }
        }
        Err(Error::NewtonNoConvergence {
            iterations: 60,
            residual: norm.to_f64().unwrap_or(f64::NAN),
        })
    }
}


fn sv_ratio<T: Real>(m: &DMatrix<T>) -> f64 {
    let flat: Vec<f64> = m.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let fm = DMatrix::from_column_slice(m.nrows(), m.ncols(), &flat);
    let sv = fm.singular_values();
    let largest = sv.max();
    if largest > 0.0 {
        sv.min() / largest
    } else {
        0.0
    }
}

/// Builds the coordinate change (h, S h, ..., S^(r-1) h, completions) at
/// `x_bar`, checking that the Jacobian is invertible there and whether the
/// completions keep the internal dynamics input-free (L_g φ_j = 0 on the
/// sampled neighbourhood).
pub fn build_transform<T: Real>(
    sys: &SystemDef<T>,
    x_bar: &[T],
    completions: Vec<ScalarField<T>>,
    nbhd: &Neighbourhood<T>,
) -> Result<CoordinateChange<T>> {
    let n = sys.dim();
    let report = relative_degree(sys, x_bar, nbhd, n)?;
    let r = report.r.ok_or_else(|| {
        Error::Scenario(format!(
            "relative degree undefined at {x_bar:?}: {}",
            report.undefined_reason.unwrap_or_default()
        ))
    })?;
    if completions.len() != n - r {
        return Err(Error::WrongCompletionCount { expected: n - r, got: completions.len() });
    }

    let mut fields = Vec::with_capacity(n);
    for k in 0..r {
        fields.push(iterate_stochastic_lie(sys, k, nbhd)?.deterministic);
    }
    let mut max_lg = 0.0_f64;
    for c in &completions {
        let lg = lie(c, &sys.g)?;
        let worst = nbhd.max_abs(&lg)?;
        if worst > max_lg {
            max_lg = worst;
        }
        fields.push(c.clone());
    }

    let mut ct = CoordinateChange::from_fields(fields, r);
    ct.input_dependent_internal = max_lg > nbhd.tol;
    ct.max_lg_completion = max_lg;

    let ratio = sv_ratio(&ct.jacobian_at(x_bar)?);
    if ratio <= 1e-9 {
        return Err(Error::SingularJacobian { ratio });
    }
    Ok(ct)
}

/// Automatic completion: linear functionals spanning the orthogonal
/// complement of the first r gradients at `x_bar`. The resulting chart has
/// an invertible Jacobian but generally input-dependent internal dynamics;
/// it is labelled [`CompletionKind::GramSchmidt`].
pub fn gram_schmidt_completions<T: Real>(
    sys: &SystemDef<T>,
    x_bar: &[T],
    r: usize,
    nbhd: &Neighbourhood<T>,
) -> Result<Vec<ScalarField<T>>> {
    let n = sys.dim();
    let mut basis: Vec<Vec<T>> = Vec::with_capacity(r);
    for k in 0..r {
        let det = iterate_stochastic_lie(sys, k, nbhd)?.deterministic;
        basis.push(gradient(&det, x_bar)?);
    }
    orthonormalise(&mut basis);
    let mut out = Vec::with_capacity(n - r);
    for i in 0..n {
        if out.len() == n - r {
            break;
        }
        let mut cand = vec![T::zero(); n];
        cand[i] = T::one();
        project_out(&mut cand, &basis);
        let norm = Float::sqrt(cand.iter().fold(T::zero(), |a, v| a + *v * *v));
        if norm.to_f64().unwrap_or(0.0) > 1e-6 {
            for v in &mut cand {
                *v = *v / norm;
            }
            basis.push(cand.clone());
            out.push(ScalarField::linear(cand));
        }
    }
    if out.len() != n - r {
        return Err(Error::SingularJacobian { ratio: 0.0 });
    }
    Ok(out)
}

fn orthonormalise<T: Real>(vs: &mut [Vec<T>]) {
    for i in 0..vs.len() {
        let (left, rest) = vs.split_at_mut(i);
        project_out(&mut rest[0], left);
        let norm = Float::sqrt(rest[0].iter().fold(T::zero(), |a, v| a + *v * *v));
        for v in &mut rest[0] {
            *v = *v / norm;
        }
    }
}

fn project_out<T: Real>(v: &mut [T], basis: &[Vec<T>]) {
    for b in basis {
        let dot = v.iter().zip(b).fold(T::zero(), |a, (x, y)| a + *x * *y);
        for (vi, bi) in v.iter_mut().zip(b) {
            *vi = *vi - dot * *bi;
        }
    }
}

/// Extracts the normal-form coefficients through the operator calculus:
/// c_d + c_s ξ from the order-r derivative of the output, b from the
/// control operator applied to the order-(r-1) derivative, and the
/// internal-dynamics pair from one stochastic Lie derivative of each
/// completion. Fails when the chart has input-dependent internal dynamics.
pub fn normal_form<T: Real>(
    ct: &CoordinateChange<T>,
    sys: &SystemDef<T>,
    nbhd: &Neighbourhood<T>,
) -> Result<NormalFormDef<T>> {
    if ct.has_input_dependent_internal() {
        return Err(Error::InputDependentInternalDynamics { max_lg: ct.max_lg_completion() });
    }
    let n = ct.dim();
    let r = ct.r();
    let top = iterate_stochastic_lie(sys, r, nbhd)?;
    let prev = iterate_stochastic_lie(sys, r - 1, nbhd)?;
    let b = a_operator(&prev.deterministic, sys)?.deterministic;
    let mut p_d = Vec::with_capacity(n - r);
    let mut p_s = Vec::with_capacity(n - r);
    for j in r..n {
        let s = stochastic_lie(ct.component(j), sys)?;
        p_d.push(s.deterministic);
        p_s.push(s.noise_coeff);
    }
    Ok(NormalFormDef::from_parts(
        r,
        top.deterministic,
        top.noise_coeff,
        b,
        p_d,
        p_s,
        Arc::new(ct.clone()),
    ))
}

/// Zero dynamics: the internal SDE obtained by pinning the output chain to
/// zero, η ↦ (p_d((0, η)), p_s((0, η))). Evaluation resolves x = Φ⁻¹((0, η))
/// numerically, so the returned fields are evaluation-only.
pub fn zero_dynamics<T: Real>(nf: &NormalFormDef<T>) -> Result<InternalSde<T>> {
    let n = nf.dim();
    let r = nf.r();
    if r == n {
        return Err(Error::NoInternalDynamics);
    }
    let dim = n - r;
    let drift = {
        let nf = nf.clone();
        VectorField::new(dim, move |eta: &[Ad<T>]| {
            let x = resolve_internal(&nf, eta);
            nf.internal_at_x(&x).expect("p_d eval").0.into_iter().map(Ad::constant).collect()
        })
    };
    let diffusion = {
        let nf = nf.clone();
        VectorField::new(dim, move |eta: &[Ad<T>]| {
            let x = resolve_internal(&nf, eta);
            nf.internal_at_x(&x).expect("p_s eval").1.into_iter().map(Ad::constant).collect()
        })
    };
    Ok(InternalSde::new(drift, diffusion))
}

fn resolve_internal<T: Real>(nf: &NormalFormDef<T>, eta: &[Ad<T>]) -> Vec<T> {
    assert!(
        eta.iter().all(|v| v.depth() == 0),
        "zero-dynamics fields are evaluation-only (numerical coordinate inverse)"
    );
    let mut z = vec![T::zero(); nf.dim()];
    for (j, e) in eta.iter().enumerate() {
        z[nf.r() + j] = e.value();
    }
    nf.chart().invert(&z, None).expect("coordinate inverse failed")
}

/// Almost-sure asymptotic stability criterion for a scalar linear SDE
/// dη = A η dt + F η dW: stable iff A - F²/2 < 0.
pub fn almost_sure_stable_scalar<T: Real>(a: T, f: T) -> bool {
    a - f * f / lit(2.0) < T::zero()
}
