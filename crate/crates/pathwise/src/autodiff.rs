//! Nested forward-mode automatic differentiation.
//!
//! The scalar type [`Ad`] is a dual-number tower of *dynamic* depth: a plain
//! value, or a pair (value, derivative) whose two sides are towers
//! themselves. Differentiation wraps every input in one more layer and reads
//! the derivative side of the result, so fields that are *defined through
//! derivatives of other fields* (the iterated stochastic Lie derivatives)
//! can be differentiated again — the depth grows as far as the composition
//! requires.
//!
//! Mixed-depth arithmetic is resolved by depth: the shallower operand is a
//! constant with respect to every seed it does not carry. Seeding always
//! wraps the deepest operand, so the outermost layer of the deeper tree is
//! the most recent seed and the alignment is unambiguous.
//!
//! Non-finite values are carried through untouched; nothing is clamped.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::{lit, Real};

/// Forward-mode scalar: a dual-number tower of dynamic depth.
#[derive(Clone, PartialEq)]
pub enum Ad<T> {
    /// Plain value, constant with respect to every seed.
    Re(T),
    /// One derivative layer: (value, derivative w.r.t. the outermost seed).
    Dual(Box<Ad<T>>, Box<Ad<T>>),
}

impl<T: fmt::Debug> fmt::Debug for Ad<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ad::Re(v) => write!(f, "{v:?}"),
            Ad::Dual(re, eps) => write!(f, "({re:?} + {eps:?}ε)"),
        }
    }
}

impl<T: Real> Ad<T> {
    pub fn constant(v: T) -> Self {
        Ad::Re(v)
    }

    pub fn from_f64(v: f64) -> Self {
        Ad::Re(lit(v))
    }

    pub fn zero() -> Self {
        Ad::Re(T::zero())
    }

    pub fn one() -> Self {
        Ad::Re(T::one())
    }

    pub fn dual(re: Ad<T>, eps: Ad<T>) -> Self {
        Ad::Dual(Box::new(re), Box::new(eps))
    }

    /// Number of derivative layers, measured along the value spine.
    pub fn depth(&self) -> usize {
        let mut d = 0;
        let mut cur = self;
        while let Ad::Dual(re, _) = cur {
            d += 1;
            cur = re;
        }
        d
    }

    /// The underlying plain value.
    pub fn value(&self) -> T {
        let mut cur = self;
        while let Ad::Dual(re, _) = cur {
            cur = re;
        }
        match cur {
            Ad::Re(v) => *v,
            Ad::Dual(..) => unreachable!(),
        }
    }

    /// Derivative with respect to the seed at layer `at_depth`.
    ///
    /// Values shallower than `at_depth` never saw that seed and are
    /// constants for it.
    pub(crate) fn extract_eps(&self, at_depth: usize) -> Ad<T> {
        debug_assert!(self.depth() <= at_depth);
        match self {
            Ad::Dual(_, eps) if self.depth() == at_depth => (**eps).clone(),
            _ => Ad::zero(),
        }
    }

    /// True when every node of the tower is finite.
    pub fn is_finite(&self) -> bool {
        match self {
            Ad::Re(v) => Float::is_finite(*v),
            Ad::Dual(re, eps) => re.is_finite() && eps.is_finite(),
        }
    }

    fn split(&self) -> (&Ad<T>, &Ad<T>) {
        match self {
            Ad::Dual(re, eps) => (re, eps),
            Ad::Re(_) => unreachable!("split called on a plain value"),
        }
    }

    pub fn sin(&self) -> Ad<T> {
        match self {
            Ad::Re(v) => Ad::Re(Float::sin(*v)),
            Ad::Dual(re, eps) => Ad::dual(re.sin(), &re.cos() * &**eps),
        }
    }

    pub fn cos(&self) -> Ad<T> {
        match self {
            Ad::Re(v) => Ad::Re(Float::cos(*v)),
            Ad::Dual(re, eps) => Ad::dual(re.cos(), -&(&re.sin() * &**eps)),
        }
    }

    pub fn tan(&self) -> Ad<T> {
        match self {
            Ad::Re(v) => Ad::Re(Float::tan(*v)),
            Ad::Dual(re, eps) => {
                let c = re.cos();
                Ad::dual(re.tan(), &**eps / &(&c * &c))
            }
        }
    }

    pub fn exp(&self) -> Ad<T> {
        match self {
            Ad::Re(v) => Ad::Re(Float::exp(*v)),
            Ad::Dual(re, eps) => {
                let e = re.exp();
                let d = &e * &**eps;
                Ad::dual(e, d)
            }
        }
    }

    pub fn ln(&self) -> Ad<T> {
        match self {
            Ad::Re(v) => Ad::Re(Float::ln(*v)),
            Ad::Dual(re, eps) => Ad::dual(re.ln(), &**eps / &**re),
        }
    }

    pub fn sqrt(&self) -> Ad<T> {
        match self {
            Ad::Re(v) => Ad::Re(Float::sqrt(*v)),
            Ad::Dual(re, eps) => {
                let s = re.sqrt();
                let d = &**eps / &(&Ad::from_f64(2.0) * &s);
                Ad::dual(s, d)
            }
        }
    }

    pub fn recip(&self) -> Ad<T> {
        &Ad::one() / self
    }

    /// Integer power, valid for negative exponents away from zero.
    pub fn powi(&self, n: i32) -> Ad<T> {
        match self {
            Ad::Re(v) => Ad::Re(Float::powi(*v, n)),
            Ad::Dual(re, eps) => {
                if n == 0 {
                    return Ad::one();
                }
                let d = &(&Ad::from_f64(f64::from(n)) * &re.powi(n - 1)) * &**eps;
                Ad::dual(re.powi(n), d)
            }
        }
    }

    /// General power through `exp(p ln self)`; requires a positive base when
    /// either side carries a derivative.
    pub fn powf(&self, p: &Ad<T>) -> Ad<T> {
        match (self, p) {
            (Ad::Re(v), Ad::Re(q)) => Ad::Re(Float::powf(*v, *q)),
            _ => (&self.ln() * p).exp(),
        }
    }
}

fn add_impl<T: Real>(a: &Ad<T>, b: &Ad<T>) -> Ad<T> {
    match (a, b) {
        (Ad::Re(x), Ad::Re(y)) => Ad::Re(*x + *y),
        _ => {
            let (da, db) = (a.depth(), b.depth());
            if da == db {
                let (ar, ae) = a.split();
                let (br, be) = b.split();
                Ad::dual(add_impl(ar, br), add_impl(ae, be))
            } else if da > db {
                let (ar, ae) = a.split();
                Ad::dual(add_impl(ar, b), ae.clone())
            } else {
                let (br, be) = b.split();
                Ad::dual(add_impl(a, br), be.clone())
            }
        }
    }
}

fn sub_impl<T: Real>(a: &Ad<T>, b: &Ad<T>) -> Ad<T> {
    match (a, b) {
        (Ad::Re(x), Ad::Re(y)) => Ad::Re(*x - *y),
        _ => {
            let (da, db) = (a.depth(), b.depth());
            if da == db {
                let (ar, ae) = a.split();
                let (br, be) = b.split();
                Ad::dual(sub_impl(ar, br), sub_impl(ae, be))
            } else if da > db {
                let (ar, ae) = a.split();
                Ad::dual(sub_impl(ar, b), ae.clone())
            } else {
                let (br, be) = b.split();
                Ad::dual(sub_impl(a, br), neg_impl(be))
            }
        }
    }
}

fn mul_impl<T: Real>(a: &Ad<T>, b: &Ad<T>) -> Ad<T> {
    match (a, b) {
        (Ad::Re(x), Ad::Re(y)) => Ad::Re(*x * *y),
        _ => {
            let (da, db) = (a.depth(), b.depth());
            if da == db {
                let (ar, ae) = a.split();
                let (br, be) = b.split();
                let d = add_impl(&mul_impl(ar, be), &mul_impl(ae, br));
                Ad::dual(mul_impl(ar, br), d)
            } else if da > db {
                let (ar, ae) = a.split();
                Ad::dual(mul_impl(ar, b), mul_impl(ae, b))
            } else {
                let (br, be) = b.split();
                Ad::dual(mul_impl(a, br), mul_impl(a, be))
            }
        }
    }
}

fn div_impl<T: Real>(a: &Ad<T>, b: &Ad<T>) -> Ad<T> {
    match (a, b) {
        (Ad::Re(x), Ad::Re(y)) => Ad::Re(*x / *y),
        _ => {
            let (da, db) = (a.depth(), b.depth());
            if da == db {
                let (ar, ae) = a.split();
                let (br, be) = b.split();
                let num = sub_impl(&mul_impl(ae, br), &mul_impl(ar, be));
                let d = div_impl(&num, &mul_impl(br, br));
                Ad::dual(div_impl(ar, br), d)
            } else if da > db {
                let (ar, ae) = a.split();
                Ad::dual(div_impl(ar, b), div_impl(ae, b))
            } else {
                let (br, be) = b.split();
                let d = div_impl(&neg_impl(&mul_impl(a, be)), &mul_impl(br, br));
                Ad::dual(div_impl(a, br), d)
            }
        }
    }
}

fn neg_impl<T: Real>(a: &Ad<T>) -> Ad<T> {
    match a {
        Ad::Re(x) => Ad::Re(-*x),
        Ad::Dual(re, eps) => Ad::dual(neg_impl(re), neg_impl(eps)),
    }
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $impl_fn:ident) => {
        impl<T: Real> $trait for Ad<T> {
            type Output = Ad<T>;
            fn $method(self, rhs: Ad<T>) -> Ad<T> {
                $impl_fn(&self, &rhs)
            }
        }
        impl<'a, T: Real> $trait<&'a Ad<T>> for Ad<T> {
            type Output = Ad<T>;
            fn $method(self, rhs: &'a Ad<T>) -> Ad<T> {
                $impl_fn(&self, rhs)
            }
        }
        impl<'a, T: Real> $trait<Ad<T>> for &'a Ad<T> {
            type Output = Ad<T>;
            fn $method(self, rhs: Ad<T>) -> Ad<T> {
                $impl_fn(self, &rhs)
            }
        }
        impl<'a, 'b, T: Real> $trait<&'b Ad<T>> for &'a Ad<T> {
            type Output = Ad<T>;
            fn $method(self, rhs: &'b Ad<T>) -> Ad<T> {
                $impl_fn(self, rhs)
            }
        }
    };
}

impl_binop!(Add, add, add_impl);
impl_binop!(Sub, sub, sub_impl);
impl_binop!(Mul, mul, mul_impl);
impl_binop!(Div, div, div_impl);

impl<T: Real> Neg for Ad<T> {
    type Output = Ad<T>;
    fn neg(self) -> Ad<T> {
        neg_impl(&self)
    }
}

impl<T: Real> Neg for &Ad<T> {
    type Output = Ad<T>;
    fn neg(self) -> Ad<T> {
        neg_impl(self)
    }
}

type ScalarFn<T> = dyn Fn(&[Ad<T>]) -> Ad<T> + Send + Sync;
type VectorFn<T> = dyn Fn(&[Ad<T>]) -> Vec<Ad<T>> + Send + Sync;

/// A smooth scalar field ℝⁿ → ℝ, evaluable at any tower depth.
///
/// Immutable after construction; evaluation is re-entrant.
#[derive(Clone)]
pub struct ScalarField<T> {
    dim: usize,
    f: Arc<ScalarFn<T>>,
}

impl<T: Real> ScalarField<T> {
    pub fn new(dim: usize, f: impl Fn(&[Ad<T>]) -> Ad<T> + Send + Sync + 'static) -> Self {
        ScalarField { dim, f: Arc::new(f) }
    }

    pub fn constant(dim: usize, value: T) -> Self {
        ScalarField::new(dim, move |_| Ad::constant(value))
    }

    /// The coordinate projection x ↦ xᵢ.
    pub fn coordinate(dim: usize, i: usize) -> Self {
        assert!(i < dim);
        ScalarField::new(dim, move |x| x[i].clone())
    }

    /// A linear functional x ↦ wᵀx.
    pub fn linear(weights: Vec<T>) -> Self {
        ScalarField::new(weights.len(), move |x| {
            let mut acc = Ad::zero();
            for (w, xi) in weights.iter().zip(x) {
                acc = acc + &Ad::constant(*w) * xi;
            }
            acc
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval_ad(&self, x: &[Ad<T>]) -> Ad<T> {
        debug_assert_eq!(x.len(), self.dim);
        (self.f)(x)
    }

    pub fn eval(&self, x: &[T]) -> Result<T> {
        check_dim(self.dim, x.len())?;
        let lifted: Vec<Ad<T>> = x.iter().map(|v| Ad::constant(*v)).collect();
        Ok(self.eval_ad(&lifted).value())
    }

    /// Pointwise sum with another field of the same dimension.
    pub fn add_field(&self, other: &ScalarField<T>) -> ScalarField<T> {
        assert_eq!(self.dim, other.dim);
        let (a, b) = (self.clone(), other.clone());
        ScalarField::new(self.dim, move |x| a.eval_ad(x) + b.eval_ad(x))
    }

    pub fn scale(&self, k: T) -> ScalarField<T> {
        let a = self.clone();
        ScalarField::new(self.dim, move |x| &Ad::constant(k) * &a.eval_ad(x))
    }
}

/// A smooth vector field ℝⁿ → ℝⁿ (componentwise [`ScalarField`] semantics).
#[derive(Clone)]
pub struct VectorField<T> {
    dim: usize,
    f: Arc<VectorFn<T>>,
}

impl<T: Real> VectorField<T> {
    pub fn new(dim: usize, f: impl Fn(&[Ad<T>]) -> Vec<Ad<T>> + Send + Sync + 'static) -> Self {
        VectorField { dim, f: Arc::new(f) }
    }

    pub fn zero(dim: usize) -> Self {
        VectorField::new(dim, move |_| vec![Ad::zero(); dim])
    }

    pub fn from_components(components: Vec<ScalarField<T>>) -> Self {
        let dim = components.len();
        for c in &components {
            assert_eq!(c.dim(), dim);
        }
        VectorField::new(dim, move |x| components.iter().map(|c| c.eval_ad(x)).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval_ad(&self, x: &[Ad<T>]) -> Vec<Ad<T>> {
        debug_assert_eq!(x.len(), self.dim);
        let out = (self.f)(x);
        debug_assert_eq!(out.len(), self.dim);
        out
    }

    pub fn eval(&self, x: &[T]) -> Result<Vec<T>> {
        check_dim(self.dim, x.len())?;
        let lifted: Vec<Ad<T>> = x.iter().map(|v| Ad::constant(*v)).collect();
        Ok(self.eval_ad(&lifted).iter().map(Ad::value).collect())
    }

    pub fn component(&self, i: usize) -> ScalarField<T> {
        assert!(i < self.dim);
        let f = self.clone();
        ScalarField::new(self.dim, move |x| f.eval_ad(x)[i].clone())
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

fn check_finite<T: Real>(x: &[T], context: &str) -> Result<()> {
    if x.iter().all(|v| Float::is_finite(*v)) {
        Ok(())
    } else {
        Err(Error::NonFinite { context: context.to_string() })
    }
}

/// Gradient at tower level: inputs may already carry derivative seeds.
pub fn gradient_ad<T: Real>(phi: &ScalarField<T>, x: &[Ad<T>]) -> Vec<Ad<T>> {
    let depth = x.iter().map(Ad::depth).max().unwrap_or(0);
    (0..x.len())
        .map(|i| {
            let lifted: Vec<Ad<T>> = x
                .iter()
                .enumerate()
                .map(|(j, xj)| {
                    let seed = if i == j { Ad::one() } else { Ad::zero() };
                    Ad::dual(xj.clone(), seed)
                })
                .collect();
            phi.eval_ad(&lifted).extract_eps(depth + 1)
        })
        .collect()
}

/// Hessian at tower level (two nested seed layers per entry).
pub fn hessian_ad<T: Real>(phi: &ScalarField<T>, x: &[Ad<T>]) -> Vec<Vec<Ad<T>>> {
    let n = x.len();
    let depth = x.iter().map(Ad::depth).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            let lifted: Vec<Ad<T>> = x
                .iter()
                .enumerate()
                .map(|(k, xk)| {
                    let inner_seed = if k == j { Ad::one() } else { Ad::zero() };
                    let outer_seed = if k == i { Ad::one() } else { Ad::zero() };
                    Ad::dual(Ad::dual(xk.clone(), inner_seed), outer_seed)
                })
                .collect();
            let out = phi.eval_ad(&lifted);
            row.push(out.extract_eps(depth + 2).extract_eps(depth + 1));
        }
        rows.push(row);
    }
    rows
}

/// Jacobian at tower level: entry (i, j) is ∂Fᵢ/∂xⱼ.
pub fn jacobian_ad<T: Real>(field: &VectorField<T>, x: &[Ad<T>]) -> Vec<Vec<Ad<T>>> {
    let n = x.len();
    let depth = x.iter().map(Ad::depth).max().unwrap_or(0);
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let lifted: Vec<Ad<T>> = x
            .iter()
            .enumerate()
            .map(|(k, xk)| {
                let seed = if k == j { Ad::one() } else { Ad::zero() };
                Ad::dual(xk.clone(), seed)
            })
            .collect();
        let out = field.eval_ad(&lifted);
        cols.push(out.iter().map(|c| c.extract_eps(depth + 1)).collect::<Vec<_>>());
    }
    (0..n)
        .map(|i| (0..n).map(|j| cols[j][i].clone()).collect())
        .collect()
}

/// Row vector ∂φ/∂x at `x`, exact for composed elementary functions.
///
/// Non-finite intermediates propagate into the result; callers decide
/// whether to abort.
pub fn gradient<T: Real>(phi: &ScalarField<T>, x: &[T]) -> Result<Vec<T>> {
    check_dim(phi.dim(), x.len())?;
    check_finite(x, "gradient point")?;
    let lifted: Vec<Ad<T>> = x.iter().map(|v| Ad::constant(*v)).collect();
    Ok(gradient_ad(phi, &lifted).iter().map(Ad::value).collect())
}

/// Matrix ∂²φ/∂x² at `x`. Entries above and below the diagonal are computed
/// independently; agreement is a correctness check, not an assumption.
pub fn hessian<T: Real>(phi: &ScalarField<T>, x: &[T]) -> Result<Vec<Vec<T>>> {
    check_dim(phi.dim(), x.len())?;
    check_finite(x, "hessian point")?;
    let lifted: Vec<Ad<T>> = x.iter().map(|v| Ad::constant(*v)).collect();
    Ok(hessian_ad(phi, &lifted)
        .iter()
        .map(|row| row.iter().map(Ad::value).collect())
        .collect())
}

/// Matrix ∂F/∂x at `x`.
pub fn jacobian<T: Real>(field: &VectorField<T>, x: &[T]) -> Result<Vec<Vec<T>>> {
    check_dim(field.dim(), x.len())?;
    check_finite(x, "jacobian point")?;
    let lifted: Vec<Ad<T>> = x.iter().map(|v| Ad::constant(*v)).collect();
    Ok(jacobian_ad(field, &lifted)
        .iter()
        .map(|row| row.iter().map(Ad::value).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences, the independent oracle for every
    /// derivative computed by this module.
    mod fd {
        use super::super::*;

        pub fn gradient(phi: &ScalarField<f64>, x: &[f64], h: f64) -> Vec<f64> {
            (0..x.len())
                .map(|i| {
                    let mut xp = x.to_vec();
                    let mut xm = x.to_vec();
                    xp[i] += h;
                    xm[i] -= h;
                    (phi.eval(&xp).unwrap() - phi.eval(&xm).unwrap()) / (2.0 * h)
                })
                .collect()
        }

        pub fn hessian(phi: &ScalarField<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
            let n = x.len();
            (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            let mut f = |si: f64, sj: f64| {
                                let mut p = x.to_vec();
                                p[i] += si * h;
                                p[j] += sj * h;
                                phi.eval(&p).unwrap()
                            };
                            (f(1.0, 1.0) - f(1.0, -1.0) - f(-1.0, 1.0) + f(-1.0, -1.0))
                                / (4.0 * h * h)
                        })
                        .collect()
                })
                .collect()
        }

        pub fn jacobian(field: &VectorField<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
            let n = x.len();
            let mut out = vec![vec![0.0; n]; n];
            for j in 0..n {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[j] += h;
                xm[j] -= h;
                let fp = field.eval(&xp).unwrap();
                let fm = field.eval(&xm).unwrap();
                for i in 0..n {
                    out[i][j] = (fp[i] - fm[i]) / (2.0 * h);
                }
            }
            out
        }
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    /// Example output h(x) = x1 + sin x2 - x3.
    fn output_field() -> ScalarField<f64> {
        ScalarField::new(3, |x| &(&x[0] + &x[1].sin()) - &x[2])
    }

    #[test]
    fn gradient_of_coordinate() {
        let phi = ScalarField::coordinate(2, 0);
        assert_eq!(gradient(&phi, &[3.0, 1.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let phi = ScalarField::constant(3, 4.2);
        assert_eq!(gradient(&phi, &[0.1, -0.2, 0.3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn gradient_of_output_at_origin() {
        // Hand differentiation: (1, cos x2, -1) at 0 -> (1, 1, -1);
        // cross-checked against central differences.
        let phi = output_field();
        let g = gradient(&phi, &[0.0; 3]).unwrap();
        assert_eq!(g, vec![1.0, 1.0, -1.0]);
        let g_fd = fd::gradient(&phi, &[0.0; 3], 1e-6);
        for (a, b) in g.iter().zip(&g_fd) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hessian_of_linear_is_zero() {
        let phi = ScalarField::linear(vec![2.0, -1.0, 0.5]);
        let h = hessian(&phi, &[0.3, 0.1, -0.2]).unwrap();
        for row in &h {
            for v in row {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn hessian_of_sine_component() {
        let phi = ScalarField::new(3, |x| x[1].sin());
        let h0 = hessian(&phi, &[0.0; 3]).unwrap();
        assert_eq!(h0[1][1], 0.0);
        let hp = hessian(&phi, &[0.0, std::f64::consts::FRAC_PI_2, 0.0]).unwrap();
        assert!((hp[1][1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn hessian_of_square() {
        let phi = ScalarField::new(3, |x| x[0].powi(2));
        let h = hessian(&phi, &[0.7, -0.1, 0.4]).unwrap();
        assert!((h[0][0] - 2.0).abs() < 1e-15);
        for (i, row) in h.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if (i, j) != (0, 0) {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn jacobian_of_identity() {
        let f = VectorField::new(3, |x| x.to_vec());
        let j = jacobian(&f, &[0.2, -0.4, 0.1]).unwrap();
        for (r, row) in j.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert_eq!(*v, if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn jacobian_of_constant_is_zero() {
        let f = VectorField::new(2, |_| vec![Ad::from_f64(1.0), Ad::from_f64(-2.0)]);
        let j = jacobian(&f, &[0.5, 0.5]).unwrap();
        assert_eq!(j, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn jacobian_of_diffusion_like_field_at_origin() {
        // Hand differentiation of (x1, -2 x1 / cos x2, x1^2) at 0: the only
        // nonzero entries are d(row 1)/dx1 = 1 and d(row 2)/dx1 = -2.
        let f = VectorField::new(3, |x| {
            vec![
                x[0].clone(),
                &(&Ad::from_f64(-2.0) * &x[0]) / &x[1].cos(),
                x[0].powi(2),
            ]
        });
        let j = jacobian(&f, &[0.0; 3]).unwrap();
        assert_eq!(j[0][0], 1.0);
        assert_eq!(j[1][0], -2.0);
        for (i, row) in j.iter().enumerate() {
            for (jc, v) in row.iter().enumerate() {
                if (i, jc) != (0, 0) && (i, jc) != (1, 0) {
                    assert_eq!(*v, 0.0);
                }
            }
        }
        let j_fd = fd::jacobian(&f, &[0.1, -0.2, 0.3], 1e-6);
        let j_ad = jacobian(&f, &[0.1, -0.2, 0.3]).unwrap();
        for i in 0..3 {
            for c in 0..3 {
                assert!(close(j_ad[i][c], j_fd[i][c], 1e-6));
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_a_hard_error() {
        let phi = output_field();
        assert!(matches!(
            gradient(&phi, &[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn non_finite_input_is_rejected_and_nan_propagates() {
        let phi = output_field();
        assert!(gradient(&phi, &[f64::NAN, 0.0, 0.0]).is_err());
        // 1/x at 0: the NaN/Inf shows up in the output, unclamped.
        let inv = ScalarField::new(1, |x| x[0].recip());
        let g = gradient(&inv, &[0.0]).unwrap();
        assert!(!g[0].is_finite());
    }

    #[test]
    fn plain_arithmetic_matches_f64_bit_for_bit() {
        let xs = [0.3_f64, -1.7, 2.25];
        for &a in &xs {
            for &b in &xs {
                let (aa, bb) = (Ad::<f64>::constant(a), Ad::<f64>::constant(b));
                assert_eq!((&aa + &bb).value(), a + b);
                assert_eq!((&aa - &bb).value(), a - b);
                assert_eq!((&aa * &bb).value(), a * b);
                assert_eq!((&aa / &bb).value(), a / b);
                assert_eq!(aa.sin().value(), a.sin());
                assert_eq!(aa.exp().value(), a.exp());
                assert_eq!(aa.tan().value(), a.tan());
            }
        }
    }

    /// A mildly nasty composite touching every supported elementary function.
    fn composite() -> ScalarField<f64> {
        ScalarField::new(3, |x| {
            let a = &x[0].sin() * &x[1].exp();
            let b = &x[2].tan() / &(&x[0].powi(2) + &Ad::from_f64(1.5));
            let c = (&(&x[1] * &x[1]) + &Ad::from_f64(0.7)).sqrt();
            &(&a + &b) * &c
        })
    }

    #[test]
    fn derivatives_match_finite_differences_on_random_points() {
        // 1000 quasi-random points in a box where tan stays tame.
        let phi = composite();
        let mut point = [0.11, 0.23, 0.37];
        for _ in 0..1000 {
            for (k, p) in point.iter_mut().enumerate() {
                *p = ((*p + 0.541 + 0.137 * (k as f64)) % 1.2) - 0.6;
            }
            let g = gradient(&phi, &point).unwrap();
            let g_fd = fd::gradient(&phi, &point, 1e-5);
            for (a, b) in g.iter().zip(&g_fd) {
                assert!(close(*a, *b, 1e-5), "grad {a} vs fd {b} at {point:?}");
            }
            let h = hessian(&phi, &point).unwrap();
            let h_fd = fd::hessian(&phi, &point, 1e-4);
            for i in 0..3 {
                for j in 0..3 {
                    assert!(
                        close(h[i][j], h_fd[i][j], 1e-4),
                        "hess ({i},{j}) {} vs fd {} at {point:?}",
                        h[i][j],
                        h_fd[i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn hessian_asymmetry_stays_at_rounding_level() {
        let phi = composite();
        let mut point = [0.2, -0.3, 0.15];
        for step in 0..200 {
            for (k, p) in point.iter_mut().enumerate() {
                *p = (((*p) + 0.31 + 0.07 * ((step + k) as f64)) % 1.0) - 0.5;
            }
            let h = hessian(&phi, &point).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!(
                        (h[i][j] - h[j][i]).abs() < 1e-12,
                        "asymmetry {} at {point:?}",
                        (h[i][j] - h[j][i]).abs()
                    );
                }
            }
        }
    }

    #[test]
    fn nesting_gradient_of_a_derived_field() {
        // The load-bearing property: a field defined through gradient_ad of
        // another field must itself differentiate correctly.
        let base = composite();
        let derived = {
            let base = base.clone();
            // psi(x) = dphi/dx0 * x1
            ScalarField::new(3, move |x| {
                let g = gradient_ad(&base, x);
                &g[0] * &x[1]
            })
        };
        let points = [[0.1, 0.2, 0.3], [-0.2, 0.4, -0.1], [0.33, -0.21, 0.05]];
        for p in &points {
            let g = gradient(&derived, p).unwrap();
            let g_fd = fd::gradient(&derived, p, 1e-5);
            for (a, b) in g.iter().zip(&g_fd) {
                assert!(close(*a, *b, 1e-5), "nested grad {a} vs fd {b} at {p:?}");
            }
            // One level deeper: Hessian of the derived field (third-order
            // derivatives of the base) against finite differences.
            let h = hessian(&derived, p).unwrap();
            let h_fd = fd::hessian(&derived, p, 1e-4);
            for i in 0..3 {
                for j in 0..3 {
                    assert!(
                        close(h[i][j], h_fd[i][j], 2e-4),
                        "nested hess {} vs fd {}",
                        h[i][j],
                        h_fd[i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn works_in_single_precision() {
        let phi = ScalarField::<f32>::new(2, |x| &x[0].sin() * &x[1]);
        let g = gradient(&phi, &[0.5f32, 2.0]).unwrap();
        assert!((g[0] - 2.0 * 0.5f32.cos()).abs() < 1e-5);
        assert!((g[1] - 0.5f32.sin()).abs() < 1e-6);
    }
}
