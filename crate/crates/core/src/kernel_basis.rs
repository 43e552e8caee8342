//! Compactly supported orthonormal basis of the Laplace-kernel RKHS.
//!
//! For `K(x, y) = exp(-θ|x - y|)` on `[0, 1]` and the dyadic inducing set of
//! level `L`, the functions
//!
//! ```text
//! ψ01(x) = (e^{-θx} + e^{-θ(1-x)}) / sqrt(2(1 + e^{-θ}))
//! ψ02(x) = (e^{-θx} - e^{-θ(1-x)}) / sqrt(2(1 - e^{-θ}))
//! ψ_lm(x) = sqrt(2 / sinh(2^{1-l}θ)) · sinh(θ · dist(x, support edge))
//! ```
//!
//! form an orthonormal basis of `span{K(·, u) : u ∈ U}`. Each interior `ψ_lm`
//! is a tent supported on `[(m-1)2^{-l}, (m+1)2^{-l}]`.
//!
//! The module also carries the general construction for any Gauss-Markov
//! covariance `K(x, y) = p(x∧y) q(x∨y)`: the unique unit-norm element of
//! `span{K(·,a), K(·,b), K(·,c)}` vanishing outside `[a, c]`. That route solves
//! a 3×3 system and never touches the closed forms, so it is used as an
//! independent oracle for them.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::Array2;

use crate::dyadic_grid::{DyadicGrid, MAX_LEVEL};
use crate::error::{param_err, Result, SikaError};
use crate::scalar::Scalar;

/// Largest accepted `θ`. Keeps `sinh`/`exp` comfortably inside double range.
pub const THETA_MAX: f64 = 100.0;

/// Condition-number bound above which a 3×3 template system is rejected.
pub const TEMPLATE_CONDITION_LIMIT: f64 = 1e12;

/// Laplace (Ornstein-Uhlenbeck) correlation `exp(-θ|x - y|)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaplaceKernel<T> {
    theta: T,
}

impl<T: Scalar> LaplaceKernel<T> {
    pub fn new(theta: T) -> Result<Self> {
        check_theta(theta)?;
        Ok(Self { theta })
    }

    #[inline]
    pub fn theta(&self) -> T {
        self.theta
    }

    #[inline]
    pub fn eval(&self, x: T, y: T) -> T {
        (-self.theta * (x - y).abs()).exp()
    }
}

pub(crate) fn check_theta<T: Scalar>(theta: T) -> Result<()> {
    if !theta.is_finite() || theta <= T::zero() || theta.as_f64() > THETA_MAX {
        return param_err(format!("theta must lie in (0, {THETA_MAX}], got {theta}"));
    }
    Ok(())
}

fn check_unit<T: Scalar>(what: &'static str, x: T) -> Result<()> {
    if !(x >= T::zero() && x <= T::one()) {
        return Err(SikaError::Domain { what, value: x.as_f64() });
    }
    Ok(())
}

/// `exp(-θ|x - y|)` with parameter validation.
pub fn laplace_kernel<T: Scalar>(x: T, y: T, theta: T) -> Result<T> {
    Ok(LaplaceKernel::new(theta)?.eval(x, y))
}

/// A covariance of the form `K(x, y) = p(min(x, y)) · q(max(x, y))`.
pub trait GaussMarkov<T: Scalar> {
    fn p(&self, t: T) -> T;
    fn q(&self, t: T) -> T;

    #[inline]
    fn cov(&self, x: T, y: T) -> T {
        if x <= y {
            self.p(x) * self.q(y)
        } else {
            self.p(y) * self.q(x)
        }
    }
}

impl<T: Scalar> GaussMarkov<T> for LaplaceKernel<T> {
    fn p(&self, t: T) -> T {
        (self.theta * t).exp()
    }

    fn q(&self, t: T) -> T {
        (-self.theta * t).exp()
    }
}

/// Gauss-Markov covariance given by an arbitrary `(p, q)` pair of closures.
#[derive(Clone, Copy)]
pub struct FnFactorization<P, Q> {
    pub p: P,
    pub q: Q,
}

impl<T, P, Q> GaussMarkov<T> for FnFactorization<P, Q>
where
    T: Scalar,
    P: Fn(T) -> T,
    Q: Fn(T) -> T,
{
    fn p(&self, t: T) -> T {
        (self.p)(t)
    }

    fn q(&self, t: T) -> T {
        (self.q)(t)
    }
}

/// Closed-form basis evaluator with per-level normalisers precomputed.
///
/// Every hot path (sparse and dense features, derivatives) goes through the
/// same methods, so two paths that evaluate the same `(l, m, x)` produce
/// bitwise-identical values.
#[derive(Clone, Debug)]
pub struct LaplaceBasis<T> {
    theta: T,
    norm_even: T,
    norm_odd: T,
    /// `sqrt(2 / sinh(2^{1-l} θ))` at index `l - 1`.
    scales: Vec<T>,
    /// `2^{-l}` at index `l - 1`.
    widths: Vec<T>,
}

impl<T: Scalar> LaplaceBasis<T> {
    pub fn new(theta: T, max_level: u32) -> Result<Self> {
        check_theta(theta)?;
        if max_level > MAX_LEVEL {
            return param_err(format!("level {max_level} exceeds {MAX_LEVEL}"));
        }
        let e = (-theta).exp();
        let two = T::lit(2.0);
        let norm_even = (two * (T::one() + e)).sqrt();
        let norm_odd = (two * -(-theta).exp_m1()).sqrt();
        let widths: Vec<T> = (1..=max_level).map(|l| T::lit((-(l as f64)).exp2())).collect();
        let scales = widths
            .iter()
            .map(|&h| (two / (two * h * theta).sinh()).sqrt())
            .collect();
        Ok(Self { theta, norm_even, norm_odd, scales, widths })
    }

    #[inline]
    pub fn theta(&self) -> T {
        self.theta
    }

    pub fn max_level(&self) -> u32 {
        self.scales.len() as u32
    }

    /// `(ψ01(x), ψ02(x))`.
    #[inline]
    pub fn boundary(&self, x: T) -> (T, T) {
        let a = (-self.theta * x).exp();
        let b = (-self.theta * (T::one() - x)).exp();
        ((a + b) / self.norm_even, (a - b) / self.norm_odd)
    }

    /// `(ψ01'(x), ψ02'(x))`.
    #[inline]
    pub fn boundary_derivative(&self, x: T) -> (T, T) {
        let a = (-self.theta * x).exp();
        let b = (-self.theta * (T::one() - x)).exp();
        (
            self.theta * (b - a) / self.norm_even,
            -self.theta * (a + b) / self.norm_odd,
        )
    }

    /// `ψ_{l,m}(x)`; the caller guarantees `1 ≤ l ≤ max_level` and odd `m < 2^l`.
    #[inline]
    pub fn interior(&self, l: u32, m: u64, x: T) -> T {
        let i = (l - 1) as usize;
        let h = self.widths[i];
        let lo = T::from_u64(m - 1).unwrap() * h;
        let peak = lo + h;
        let hi = peak + h;
        if x < lo || x > hi {
            T::zero()
        } else if x <= peak {
            self.scales[i] * (self.theta * (x - lo)).sinh()
        } else {
            self.scales[i] * (self.theta * (hi - x)).sinh()
        }
    }

    /// Right-hand derivative of `ψ_{l,m}` at `x` (zero outside `[lo, hi)`).
    #[inline]
    pub fn interior_derivative(&self, l: u32, m: u64, x: T) -> T {
        let i = (l - 1) as usize;
        let h = self.widths[i];
        let lo = T::from_u64(m - 1).unwrap() * h;
        let peak = lo + h;
        let hi = peak + h;
        let c = self.scales[i] * self.theta;
        if x < lo || x >= hi {
            T::zero()
        } else if x < peak {
            c * (self.theta * (x - lo)).cosh()
        } else {
            -c * (self.theta * (hi - x)).cosh()
        }
    }
}

fn check_interior_index(l: u32, m: u64) -> Result<()> {
    if l == 0 || l > MAX_LEVEL {
        return param_err(format!("level {l} outside 1..={MAX_LEVEL}"));
    }
    if m % 2 == 0 || m >= (1u64 << l) {
        return param_err(format!("m = {m} must be odd and below 2^{l}"));
    }
    Ok(())
}

/// The two global boundary functions `(ψ01(x), ψ02(x))`.
pub fn eval_boundary_basis<T: Scalar>(x: T, theta: T) -> Result<(T, T)> {
    check_unit("x", x)?;
    Ok(LaplaceBasis::new(theta, 0)?.boundary(x))
}

/// Interior tent `ψ_{l,m}(x)`.
pub fn eval_interior_basis<T: Scalar>(l: u32, m: u64, x: T, theta: T) -> Result<T> {
    check_interior_index(l, m)?;
    check_unit("x", x)?;
    Ok(LaplaceBasis::new(theta, l)?.interior(l, m, x))
}

/// Right-hand derivative of `ψ_{l,m}` with respect to `x`.
pub fn basis_derivative<T: Scalar>(l: u32, m: u64, x: T, theta: T) -> Result<T> {
    check_interior_index(l, m)?;
    check_unit("x", x)?;
    Ok(LaplaceBasis::new(theta, l)?.interior_derivative(l, m, x))
}

/// Coefficients of `φ_{a,b,c} = A·K(·,a) + B·K(·,b) + C·K(·,c)`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[allow(non_snake_case)]
pub struct TemplateCoefficients<T> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub A: T,
    pub B: T,
    pub C: T,
}

/// Solves for the unique unit-norm template function vanishing outside `[a, c]`.
///
/// With `K3` the kernel matrix on `{a, b, c}`, the coefficients satisfy
/// `K3 · (AB, B², BC)ᵀ = e₂`, so `B = sqrt(e₂ᵀ K3⁻¹ e₂)` and `A`, `C` follow
/// from the other two entries of the middle column of `K3⁻¹`. The inverse
/// column is taken from the adjugate.
#[allow(non_snake_case)]
pub fn template_coefficients<T: Scalar, K: GaussMarkov<T>>(
    a: T,
    b: T,
    c: T,
    kernel: &K,
) -> Result<TemplateCoefficients<T>> {
    if !(T::zero() <= a && a < b && b < c && c <= T::one()) {
        return param_err(format!("template anchors must satisfy 0 <= a < b < c <= 1, got ({a}, {b}, {c})"));
    }
    let k11 = kernel.cov(a, a);
    let k12 = kernel.cov(a, b);
    let k13 = kernel.cov(a, c);
    let k22 = kernel.cov(b, b);
    let k23 = kernel.cov(b, c);
    let k33 = kernel.cov(c, c);

    let (lo, hi) = sym3_eigen_extremes([k11, k22, k33], [k12, k13, k23]);
    if !(lo > T::zero()) || (hi / lo).as_f64() > TEMPLATE_CONDITION_LIMIT {
        return Err(SikaError::Numerical(format!(
            "template kernel matrix on ({a}, {b}, {c}) is ill-conditioned (eigenvalues {lo}, {hi})"
        )));
    }

    let cof12 = -(k12 * k33 - k23 * k13);
    let cof22 = k11 * k33 - k13 * k13;
    let cof32 = -(k11 * k23 - k13 * k12);
    let det = k11 * (k22 * k33 - k23 * k23) - k12 * (k12 * k33 - k23 * k13)
        + k13 * (k12 * k23 - k22 * k13);

    let bb = cof22 / det;
    if !(bb > T::zero()) || !bb.is_finite() {
        return Err(SikaError::Numerical(format!("e2' K^-1 e2 = {bb} is not positive")));
    }
    let B = bb.sqrt();
    Ok(TemplateCoefficients { a, b, c, A: cof12 / det / B, B, C: cof32 / det / B })
}

/// `A·K(x,a) + B·K(x,b) + C·K(x,c)`.
pub fn eval_template_basis<T: Scalar, K: GaussMarkov<T>>(
    coeffs: &TemplateCoefficients<T>,
    x: T,
    kernel: &K,
) -> T {
    coeffs.A * kernel.cov(x, coeffs.a) + coeffs.B * kernel.cov(x, coeffs.b) + coeffs.C * kernel.cov(x, coeffs.c)
}

/// Smallest and largest eigenvalue of a symmetric 3×3 matrix given by its
/// diagonal and the upper off-diagonal `(a12, a13, a23)`. Trigonometric
/// closed form.
fn sym3_eigen_extremes<T: Scalar>(d: [T; 3], off: [T; 3]) -> (T, T) {
    let [a11, a22, a33] = d;
    let [a12, a13, a23] = off;
    let p1 = a12 * a12 + a13 * a13 + a23 * a23;
    if p1 == T::zero() {
        let lo = a11.min(a22).min(a33);
        let hi = a11.max(a22).max(a33);
        return (lo, hi);
    }
    let three = T::lit(3.0);
    let q = (a11 + a22 + a33) / three;
    let p2 = (a11 - q).powi(2) + (a22 - q).powi(2) + (a33 - q).powi(2) + T::lit(2.0) * p1;
    let p = (p2 / T::lit(6.0)).sqrt();
    let (b11, b22, b33) = ((a11 - q) / p, (a22 - q) / p, (a33 - q) / p);
    let (b12, b13, b23) = (a12 / p, a13 / p, a23 / p);
    let det_b = b11 * (b22 * b33 - b23 * b23) - b12 * (b12 * b33 - b23 * b13) + b13 * (b12 * b23 - b22 * b13);
    let r = (det_b / T::lit(2.0)).max(-T::one()).min(T::one());
    let phi = r.acos() / three;
    let two_pi_3 = T::lit(2.0 * std::f64::consts::PI / 3.0);
    let hi = q + T::lit(2.0) * p * phi.cos();
    let lo = q + T::lit(2.0) * p * (phi + two_pi_3).cos();
    (lo, hi)
}

/// An RKHS element `Σ_i coeffs[i] · K(·, anchors[i])`.
#[derive(Clone, Debug, PartialEq)]
pub struct RkhsElement<T> {
    pub anchors: Vec<T>,
    pub coeffs: Vec<T>,
}

impl<T: Scalar> RkhsElement<T> {
    pub fn eval<K: GaussMarkov<T>>(&self, x: T, kernel: &K) -> T {
        self.anchors
            .iter()
            .zip(&self.coeffs)
            .map(|(&u, &c)| c * kernel.cov(x, u))
            .sum()
    }
}

impl<T: Scalar> From<&TemplateCoefficients<T>> for RkhsElement<T> {
    fn from(t: &TemplateCoefficients<T>) -> Self {
        Self { anchors: vec![t.a, t.b, t.c], coeffs: vec![t.A, t.B, t.C] }
    }
}

/// The boundary pair `(K(·,0) ± K(·,1)) / ‖K(·,0) ± K(·,1)‖`, valid for any kernel.
pub fn boundary_elements<T: Scalar, K: GaussMarkov<T>>(kernel: &K) -> [RkhsElement<T>; 2] {
    let (z, o) = (T::zero(), T::one());
    let k00 = kernel.cov(z, z);
    let k01 = kernel.cov(z, o);
    let k11 = kernel.cov(o, o);
    let n_even = (k00 + k11 + T::lit(2.0) * k01).sqrt();
    let n_odd = (k00 + k11 - T::lit(2.0) * k01).sqrt();
    [
        RkhsElement { anchors: vec![z, o], coeffs: vec![o / n_even, o / n_even] },
        RkhsElement { anchors: vec![z, o], coeffs: vec![o / n_odd, -o / n_odd] },
    ]
}

/// Kernel-span coefficients of the closed-form interior tent `ψ_{l,m}` for the
/// Laplace kernel: `B = sqrt(coth(θh))`, `A = C = -B / (2 cosh(θh))`, `h = 2^{-l}`.
pub fn closed_form_element<T: Scalar>(l: u32, m: u64, theta: T) -> RkhsElement<T> {
    let h = T::lit((-(l as f64)).exp2());
    let b = T::from_u64(m).unwrap() * h;
    let th = theta * h;
    let big_b = (th.cosh() / th.sinh()).sqrt();
    let side = -big_b / (T::lit(2.0) * th.cosh());
    RkhsElement { anchors: vec![b - h, b, b + h], coeffs: vec![side, big_b, side] }
}

/// The full level-`L` basis in dyadic order, from the closed-form coefficients.
pub fn closed_form_basis<T: Scalar>(level: u32, theta: T) -> Result<Vec<RkhsElement<T>>> {
    let kernel = LaplaceKernel::new(theta)?;
    let grid = DyadicGrid::new(level)?;
    let [even, odd] = boundary_elements(&kernel);
    let mut out = vec![even, odd];
    for pos in 2..grid.size() {
        if let crate::dyadic_grid::BasisIndex::Interior { level: l, m } = grid.basis_at(pos)? {
            out.push(closed_form_element(l, m, theta));
        }
    }
    Ok(out)
}

/// The full level-`L` basis in dyadic order, built by template construction
/// for an arbitrary Gauss-Markov kernel.
pub fn template_basis<T: Scalar, K: GaussMarkov<T>>(level: u32, kernel: &K) -> Result<Vec<RkhsElement<T>>> {
    let grid = DyadicGrid::new(level)?;
    let [even, odd] = boundary_elements(kernel);
    let mut out = vec![even, odd];
    for pos in 2..grid.size() {
        if let crate::dyadic_grid::BasisIndex::Interior { level: l, m } = grid.basis_at(pos)? {
            let h = T::lit((-(l as f64)).exp2());
            let b = T::from_u64(m).unwrap() * h;
            out.push(RkhsElement::from(&template_coefficients(b - h, b, b + h, kernel)?));
        }
    }
    Ok(out)
}

/// RKHS Gram matrix `⟨φ_i, φ_j⟩`, evaluated as the quadratic form of the
/// coefficient vectors against the kernel matrix on the union of anchors.
pub fn rkhs_gram<T: Scalar, K: GaussMarkov<T>>(elements: &[RkhsElement<T>], kernel: &K) -> Result<Array2<T>> {
    let mut anchors: Vec<T> = elements.iter().flat_map(|e| e.anchors.iter().copied()).collect();
    anchors.sort_by(|a, b| a.partial_cmp(b).expect("finite anchors"));
    anchors.dedup();
    let n = anchors.len();
    let slot = |u: T| anchors.binary_search_by(|v| v.partial_cmp(&u).unwrap()).unwrap();

    let kmat = Array2::from_shape_fn((n, n), |(i, j)| kernel.cov(anchors[i], anchors[j]));
    let mut coef = Array2::<T>::zeros((elements.len(), n));
    for (i, e) in elements.iter().enumerate() {
        for (&u, &c) in e.anchors.iter().zip(&e.coeffs) {
            coef[[i, slot(u)]] += c;
        }
    }
    let gram = coef.dot(&kmat).dot(&coef.t());
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(SikaError::Numerical("non-finite entry in RKHS Gram matrix".into()));
    }
    Ok(gram)
}

/// Dense Nyström oracle `K(x, U) K(U, U)^{-1} K(U, y)` with `K(U, U)`
/// factorised once.
pub struct NystromOracle {
    points: Vec<f64>,
    kernel: LaplaceKernel<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl NystromOracle {
    pub fn new(grid: &DyadicGrid, theta: f64) -> Result<Self> {
        let kernel = LaplaceKernel::new(theta)?;
        let points = grid.points().to_vec();
        let n = points.len();
        let kuu = DMatrix::from_fn(n, n, |i, j| kernel.eval(points[i], points[j]));
        let chol = kuu
            .cholesky()
            .ok_or_else(|| SikaError::Numerical("K(U, U) is not positive definite".into()))?;
        Ok(Self { points, kernel, chol })
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let ky = DVector::from_iterator(self.points.len(), self.points.iter().map(|&u| self.kernel.eval(u, y)));
        let z = self.chol.solve(&ky);
        self.points
            .iter()
            .zip(z.iter())
            .map(|(&u, &zi)| self.kernel.eval(x, u) * zi)
            .sum()
    }
}

/// One-shot [`NystromOracle`] evaluation.
pub fn nystrom_kernel(x: f64, y: f64, grid: &DyadicGrid, theta: f64) -> Result<f64> {
    Ok(NystromOracle::new(grid, theta)?.eval(x, y))
}
