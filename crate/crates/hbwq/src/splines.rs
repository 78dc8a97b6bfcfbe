//! Univariate and tensor-product B-spline primitives.
//!
//! Open uniform knot vectors of maximum regularity (simple interior knots),
//! Cox-de Boor evaluation, two-scale refinement coefficients obtained by
//! iterated knot insertion, exact mass integrals and Gauss-Legendre rules.
//!
//! Breakpoints are dyadic rationals `j / n_elements` computed by a single
//! correctly-rounded division, so coordinates shared between nested levels
//! are bit-identical.

use thiserror::Error;

#[derive(Error, Debug, PartialEq)]
pub enum SplineError {
    #[error("number of elements must be at least 1, got {0}")]
    EmptyMesh(usize),
    #[error("evaluation point {0} lies outside [0, 1]")]
    PointOutOfDomain(f64),
    #[error("Gauss-Legendre order {0} not supported (valid range 1..=16)")]
    InvalidGaussOrder(usize),
    #[error("knot vectors are not nested (coarse {coarse} elements, fine {fine})")]
    NotNested { coarse: usize, fine: usize },
    #[error("basis index {index} out of range for {count} functions")]
    IndexOutOfRange { index: usize, count: usize },
}

/// Open uniform knot vector on [0, 1] of degree `p` with simple interior knots.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    degree: usize,
    breakpoints: Vec<f64>,
    knots: Vec<f64>,
}

impl KnotVector {
    /// Builds the open uniform knot vector with `n_elements` spans.
    ///
    /// The basis has `n_elements + p` functions.
    pub fn open_uniform(degree: usize, n_elements: usize) -> Result<Self, SplineError> {
        if n_elements < 1 {
            return Err(SplineError::EmptyMesh(n_elements));
        }
        let breakpoints: Vec<f64> = (0..=n_elements)
            .map(|j| j as f64 / n_elements as f64)
            .collect();
        Ok(Self::from_breakpoints(degree, breakpoints))
    }

    fn from_breakpoints(degree: usize, breakpoints: Vec<f64>) -> Self {
        let mut knots = Vec::with_capacity(breakpoints.len() + 2 * degree);
        knots.extend(std::iter::repeat(breakpoints[0]).take(degree));
        knots.extend_from_slice(&breakpoints);
        knots.extend(std::iter::repeat(*breakpoints.last().unwrap()).take(degree));
        Self { degree, breakpoints, knots }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_elements(&self) -> usize {
        self.breakpoints.len() - 1
    }

    /// Number of basis functions, `n_elements + p`.
    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Bisects every span. The refined space contains this one.
    pub fn dyadic_refine(&self) -> Self {
        let n = self.num_elements();
        let breakpoints: Vec<f64> = (0..=2 * n)
            .map(|j| j as f64 / (2 * n) as f64)
            .collect();
        Self::from_breakpoints(self.degree, breakpoints)
    }

    /// Element-index support of basis function `i` (0-based), inclusive.
    pub fn support(&self, i: usize) -> (usize, usize) {
        let lo = i.saturating_sub(self.degree);
        let hi = i.min(self.num_elements() - 1);
        (lo, hi)
    }

    /// Parametric support interval of basis function `i`.
    pub fn support_interval(&self, i: usize) -> (f64, f64) {
        let (lo, hi) = self.support(i);
        (self.breakpoints[lo], self.breakpoints[hi + 1])
    }

    /// Index of the span containing `x`; `x = 1` maps to the last span.
    pub fn span_of(&self, x: f64) -> usize {
        let n = self.num_elements();
        let pos = self.breakpoints.partition_point(|&b| b <= x);
        pos.saturating_sub(1).min(n - 1)
    }

    /// Evaluates the `p + 1` basis functions that can be nonzero at `x`.
    ///
    /// Returns the index of the first of them together with their values
    /// (Cox-de Boor triangular scheme). Functions `first..=first + p` are
    /// exactly those whose support contains the span of `x`.
    pub fn eval_basis(&self, x: f64) -> Result<(usize, Vec<f64>), SplineError> {
        let mut values = vec![0.0; self.degree + 1];
        let first = self.eval_basis_into(x, &mut values)?;
        Ok((first, values))
    }

    /// Allocation-free variant of [`eval_basis`](Self::eval_basis);
    /// `values` must have length `p + 1`.
    pub fn eval_basis_into(&self, x: f64, values: &mut [f64]) -> Result<usize, SplineError> {
        if !(0.0..=1.0).contains(&x) {
            return Err(SplineError::PointOutOfDomain(x));
        }
        let p = self.degree;
        debug_assert_eq!(values.len(), p + 1);
        let span = self.span_of(x);
        // Index into the full knot array of the knot at the left end of the span.
        let mu = span + p;
        values[0] = 1.0;
        let mut left = [0.0f64; 17];
        let mut right = [0.0f64; 17];
        for j in 1..=p {
            left[j] = x - self.knots[mu + 1 - j];
            right[j] = self.knots[mu + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let tmp = if denom != 0.0 { values[r] / denom } else { 0.0 };
                values[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            values[j] = saved;
        }
        Ok(span)
    }

    /// Integral of basis function `i` over [0, 1], exact per-span Gauss.
    pub fn integral(&self, i: usize) -> f64 {
        let (lo, hi) = self.support(i);
        let (nodes, weights) = gauss_legendre(self.degree + 1).expect("degree capped");
        let mut vals = vec![0.0; self.degree + 1];
        let mut acc = 0.0;
        for e in lo..=hi {
            let (a, b) = (self.breakpoints[e], self.breakpoints[e + 1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (t, w) in nodes.iter().zip(&weights) {
                let x = mid + half * t;
                let first = self.eval_basis_into(x, &mut vals).expect("x in domain");
                if (first..=first + self.degree).contains(&i) {
                    acc += half * w * vals[i - first];
                }
            }
        }
        acc
    }
}

/// Expansion of a coarse basis function in a nested finer basis.
///
/// Coefficients are strictly positive exactly for the fine functions whose
/// support is contained in the coarse one; `first_fine` is the index of the
/// first such function.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoScaleRow {
    pub coarse_index: usize,
    pub first_fine: usize,
    pub coefficients: Vec<f64>,
}

impl TwoScaleRow {
    /// Iterates over `(fine_index, coefficient)` pairs.
    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.coefficients
            .iter()
            .enumerate()
            .map(|(o, &a)| (self.first_fine + o, a))
    }

    pub fn fine_range(&self) -> (usize, usize) {
        (self.first_fine, self.first_fine + self.coefficients.len() - 1)
    }
}

/// Two-scale coefficients of coarse function `i` in the `fine` basis.
///
/// `fine` must be reachable from `coarse` by repeated dyadic refinement.
/// Computed by iterated single-knot (Boehm) insertion, one midpoint at a
/// time, which works for any step count and degree.
pub fn refinement_coefficients(
    coarse: &KnotVector,
    fine: &KnotVector,
    i: usize,
) -> Result<TwoScaleRow, SplineError> {
    let nc = coarse.num_elements();
    let nf = fine.num_elements();
    if coarse.degree() != fine.degree() || nf % nc != 0 || !(nf / nc).is_power_of_two() {
        return Err(SplineError::NotNested { coarse: nc, fine: nf });
    }
    if i >= coarse.num_basis() {
        return Err(SplineError::IndexOutOfRange { index: i, count: coarse.num_basis() });
    }
    let p = coarse.degree();
    let mut coeffs = vec![0.0f64; coarse.num_basis()];
    coeffs[i] = 1.0;
    let mut kv = coarse.clone();
    while kv.num_elements() < nf {
        let n = kv.num_elements();
        // Insert all midpoints of the current spans, left to right. After the
        // loop the knot vector is the dyadic refinement of `kv`.
        let mut knots = kv.knots.clone();
        for e in 0..n {
            let u = 0.5 * (kv.breakpoints[e] + kv.breakpoints[e + 1]);
            let mu = knots.partition_point(|&t| t <= u) - 1;
            let mut next = vec![0.0f64; coeffs.len() + 1];
            for j in 0..next.len() {
                if j <= mu - p {
                    next[j] = coeffs[j];
                } else if j > mu {
                    next[j] = coeffs[j - 1];
                } else {
                    let denom = knots[j + p] - knots[j];
                    let a = if denom != 0.0 { (u - knots[j]) / denom } else { 0.0 };
                    let prev = if j > 0 { coeffs[j - 1] } else { 0.0 };
                    next[j] = (1.0 - a) * prev + a * coeffs[j];
                }
            }
            knots.insert(mu + 1, u);
            coeffs = next;
        }
        kv = kv.dyadic_refine();
        debug_assert_eq!(knots, kv.knots);
    }
    let first = coeffs.iter().position(|&a| a != 0.0).unwrap();
    let last = coeffs.iter().rposition(|&a| a != 0.0).unwrap();
    Ok(TwoScaleRow {
        coarse_index: i,
        first_fine: first,
        coefficients: coeffs[first..=last].to_vec(),
    })
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on [-1, 1].
///
/// Exact for polynomials up to degree `2n - 1`; weights sum to 2.
pub fn gauss_legendre(n: usize) -> Result<(Vec<f64>, Vec<f64>), SplineError> {
    if n < 1 || n > 16 {
        return Err(SplineError::InvalidGaussOrder(n));
    }
    let mut nodes = vec![0.0f64; n];
    let mut weights = vec![0.0f64; n];
    for k in 0..(n + 1) / 2 {
        // Newton iteration on P_n starting from the Chebyshev-like guess.
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0f64, x);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[k] = -x.abs();
        nodes[n - 1 - k] = x.abs();
        weights[k] = w;
        weights[n - 1 - k] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok((nodes, weights))
}

/// Exact L2 product of basis functions `i` and `j`: per-span `(p + 1)`-point
/// Gauss, exact because the integrand has degree `2p`.
pub fn exact_mass_1d(kv: &KnotVector, i: usize, j: usize) -> f64 {
    let (ilo, ihi) = kv.support(i);
    let (jlo, jhi) = kv.support(j);
    let lo = ilo.max(jlo);
    let hi = ihi.min(jhi);
    if lo > hi {
        return 0.0;
    }
    let p = kv.degree();
    let (nodes, weights) = gauss_legendre(p + 1).expect("degree capped");
    let mut vals = vec![0.0; p + 1];
    let mut acc = 0.0;
    for e in lo..=hi {
        let (a, b) = (kv.breakpoints[e], kv.breakpoints[e + 1]);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (t, w) in nodes.iter().zip(&weights) {
            let x = mid + half * t;
            let first = kv.eval_basis_into(x, &mut vals).expect("x in domain");
            let bi = if (first..=first + p).contains(&i) { vals[i - first] } else { 0.0 };
            let bj = if (first..=first + p).contains(&j) { vals[j - first] } else { 0.0 };
            acc += half * w * bi * bj;
        }
    }
    acc
}

/// Tensor-product spline space: one knot vector per direction, all of the
/// same degree and refinement level.
#[derive(Debug, Clone)]
pub struct TensorSpace {
    level: usize,
    directions: Vec<KnotVector>,
}

impl TensorSpace {
    pub fn new(level: usize, directions: Vec<KnotVector>) -> Self {
        Self { level, directions }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.directions.len()
    }

    pub fn direction(&self, k: usize) -> &KnotVector {
        &self.directions[k]
    }

    pub fn directions(&self) -> &[KnotVector] {
        &self.directions
    }

    /// Per-direction basis counts.
    pub fn dims(&self) -> Vec<usize> {
        self.directions.iter().map(|kv| kv.num_basis()).collect()
    }

    /// Total dimension, the product of the per-direction counts.
    pub fn num_basis(&self) -> u64 {
        self.directions.iter().map(|kv| kv.num_basis() as u64).product()
    }

    pub fn refined(&self) -> Self {
        Self {
            level: self.level + 1,
            directions: self.directions.iter().map(|kv| kv.dyadic_refine()).collect(),
        }
    }
}
