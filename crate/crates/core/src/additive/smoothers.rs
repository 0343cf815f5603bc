//! Univariate linear smoothers built on a basis plus an optional roughness penalty.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg;

/// Maximum number of interior knots for penalized splines.
pub const MAX_INTERIOR_KNOTS: usize = 20;

/// Accepted gap between achieved and target spline degrees of freedom.
pub const DOF_TOL: f64 = 0.01;

/// A rule for smoothing a partial residual against one feature.
pub trait Smoother: fmt::Debug + Send + Sync {
    fn label(&self) -> String;

    /// Effective degrees of freedom charged to the term (constant excluded).
    fn dof(&self) -> f64;

    /// Fix the basis and penalty for training points `x` with weights `w`.
    fn prepare(&self, x: &[f64], w: &[f64]) -> Result<PreparedSmoother>;
}

/// `f(x) = c0 + c1 (x - center)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Linear;

/// Piecewise-constant fit with `bins` quantile bins.
#[derive(Debug, Clone, Copy)]
pub struct RunningMeanBins(pub usize);

/// Penalized cubic regression spline with effective dof matched to a target.
#[derive(Debug, Clone, Copy)]
pub struct CubicSplinePenalized(pub f64);

impl Default for CubicSplinePenalized {
    fn default() -> Self {
        Self(4.0)
    }
}

/// Evaluation rule for a fitted term.
#[derive(Debug, Clone, PartialEq)]
pub enum Basis {
    Linear { center: f64 },
    /// Bin `j` covers `[edges[j], edges[j + 1])`; values outside clamp to the end bins.
    Bins { edges: Vec<f64> },
    Spline(SplineBasis),
}

impl Basis {
    pub fn len(&self) -> usize {
        match self {
            Basis::Linear { .. } => 2,
            Basis::Bins { edges } => edges.len(),
            Basis::Spline(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn row(&self, x: f64) -> Vec<f64> {
        match self {
            Basis::Linear { center } => vec![1.0, x - center],
            Basis::Bins { edges } => {
                let j = edges.partition_point(|e| *e <= x).saturating_sub(1);
                let mut row = vec![0.0; edges.len()];
                row[j] = 1.0;
                row
            }
            Basis::Spline(s) => s.values(x),
        }
    }

    /// Uncentered function value `sum c_j B_j(x)`, extrapolating splines linearly.
    fn eval(&self, coef: &DVector<f64>, x: f64) -> f64 {
        match self {
            Basis::Spline(s) if x < s.lo || x > s.hi => {
                let b = if x < s.lo { s.lo } else { s.hi };
                let at = dot(&s.values(b), coef);
                let slope = dot(&s.derivatives(b, 1), coef);
                at + slope * (x - b)
            }
            _ => dot(&self.row(x), coef),
        }
    }
}

fn dot(row: &[f64], coef: &DVector<f64>) -> f64 {
    row.iter().zip(coef.iter()).map(|(a, b)| a * b).sum()
}

/// A fitted, centered smooth function of one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothFunction {
    pub basis: Basis,
    pub coefficients: DVector<f64>,
    /// Weighted training mean subtracted so the term is centered.
    pub offset: f64,
}

impl SmoothFunction {
    pub fn eval(&self, x: f64) -> f64 {
        self.basis.eval(&self.coefficients, x) - self.offset
    }
}

/// A smoother with its basis evaluated at the training points and the
/// penalized normal matrix factorized.
#[derive(Debug, Clone)]
pub struct PreparedSmoother {
    basis: Basis,
    design: DMatrix<f64>,
    weights: DVector<f64>,
    normal: Cholesky<f64, Dyn>,
    penalty: DMatrix<f64>,
    lambda: f64,
}

impl PreparedSmoother {
    fn new(basis: Basis, x: &[f64], w: &[f64], penalty: DMatrix<f64>, lambda: f64) -> Result<Self> {
        let design = design_matrix(&basis, x);
        let weights = DVector::from_column_slice(w);
        let gram = weighted_gram(&design, &weights);
        let normal = linalg::checked_cholesky(&(&gram + &penalty * lambda)).ok_or(Error::Singular {
            what: "smoother normal matrix",
            condition: linalg::condition_estimate(&gram),
        })?;
        Ok(Self {
            basis,
            design,
            weights,
            normal,
            penalty,
            lambda,
        })
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Smooth `r`, returning the centered function and its fitted values.
    pub fn smooth(&self, r: &[f64]) -> (SmoothFunction, DVector<f64>) {
        let wr = DVector::from_iterator(r.len(), r.iter().zip(self.weights.iter()).map(|(a, w)| a * w));
        let coefficients = self.normal.solve(&(self.design.transpose() * wr));
        let raw = &self.design * &coefficients;
        let offset = raw.dot(&self.weights) / self.weights.sum();
        let fitted = raw.add_scalar(-offset);
        let f = SmoothFunction {
            basis: self.basis.clone(),
            coefficients,
            offset,
        };
        (f, fitted)
    }

    /// `lambda c' Omega c`, the roughness charge for coefficients `c`.
    pub fn penalty_value(&self, coef: &DVector<f64>) -> f64 {
        if self.lambda == 0.0 {
            0.0
        } else {
            self.lambda * coef.dot(&(&self.penalty * coef))
        }
    }

    /// Trace of the (uncentered) smoother matrix.
    pub fn trace(&self) -> f64 {
        let gram = weighted_gram(&self.design, &self.weights);
        self.normal.solve(&gram).trace()
    }
}

fn design_matrix(basis: &Basis, x: &[f64]) -> DMatrix<f64> {
    let m = basis.len();
    let mut design = DMatrix::zeros(x.len(), m);
    for (i, xi) in x.iter().enumerate() {
        for (j, v) in basis.row(*xi).into_iter().enumerate() {
            design[(i, j)] = v;
        }
    }
    design
}

fn weighted_gram(design: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = design.clone();
    for (mut row, wi) in scaled.row_iter_mut().zip(w.iter()) {
        row *= wi.sqrt();
    }
    scaled.transpose() * &scaled
}

fn check_inputs(x: &[f64], w: &[f64]) -> Result<()> {
    if x.is_empty() || x.len() != w.len() {
        return Err(Error::invalid("smoother needs matching, nonempty x and weights"));
    }
    if x.iter().chain(w).any(|v| !v.is_finite()) || w.iter().any(|v| *v <= 0.0) {
        return Err(Error::invalid("smoother inputs must be finite with positive weights"));
    }
    Ok(())
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Order statistic at probability `p` (inverse empirical CDF).
fn order_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

impl Smoother for Linear {
    fn label(&self) -> String {
        "linear".into()
    }

    fn dof(&self) -> f64 {
        1.0
    }

    fn prepare(&self, x: &[f64], w: &[f64]) -> Result<PreparedSmoother> {
        check_inputs(x, w)?;
        let total: f64 = w.iter().sum();
        let center = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total;
        PreparedSmoother::new(Basis::Linear { center }, x, w, DMatrix::zeros(2, 2), 0.0)
    }
}

impl RunningMeanBins {
    fn edges(&self, x: &[f64]) -> Vec<f64> {
        let s = sorted(x);
        let (lo, hi) = (s[0], s[s.len() - 1]);
        let mut edges = vec![lo];
        for j in 1..self.0 {
            let k = ((j as f64 / self.0 as f64) * s.len() as f64).floor() as usize;
            let e = s[k.min(s.len() - 1)];
            if e > *edges.last().unwrap() && e < hi {
                edges.push(e);
            }
        }
        edges
    }
}

impl Smoother for RunningMeanBins {
    fn label(&self) -> String {
        format!("bins({})", self.0)
    }

    fn dof(&self) -> f64 {
        self.0 as f64 - 1.0
    }

    fn prepare(&self, x: &[f64], w: &[f64]) -> Result<PreparedSmoother> {
        check_inputs(x, w)?;
        if self.0 < 2 {
            return Err(Error::invalid("running-mean smoother needs at least two bins"));
        }
        let edges = self.edges(x);
        let m = edges.len();
        PreparedSmoother::new(Basis::Bins { edges }, x, w, DMatrix::zeros(m, m), 0.0)
    }
}

/// Cubic B-spline basis on `[lo, hi]` with clamped boundary knots.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    pub knots: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

const ORDER: usize = 4;

impl SplineBasis {
    /// Interior knots at evenly spaced quantiles of the distinct values of `x`.
    pub fn from_data(x: &[f64]) -> Result<Self> {
        let mut distinct = sorted(x);
        distinct.dedup();
        if distinct.len() < 4 {
            return Err(Error::invalid("spline smoother needs at least four distinct x values"));
        }
        let (lo, hi) = (distinct[0], distinct[distinct.len() - 1]);
        let interior = MAX_INTERIOR_KNOTS.min(distinct.len() - 2);
        let mut knots = vec![lo; ORDER];
        for j in 1..=interior {
            let k = order_quantile(&distinct, j as f64 / (interior + 1) as f64);
            if k > *knots.last().unwrap() && k < hi {
                knots.push(k);
            }
        }
        knots.extend(std::iter::repeat_n(hi, ORDER));
        Ok(Self { knots, lo, hi })
    }

    pub fn len(&self) -> usize {
        self.knots.len() - ORDER
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Basis functions of order `k` at `x` (Cox-de Boor); the right boundary
    /// belongs to the last nonempty interval.
    fn order_values(&self, x: f64, k: usize) -> Vec<f64> {
        let t = &self.knots;
        let x = x.clamp(self.lo, self.hi);
        let last = t.len() - ORDER - 1; // last knot index whose interval is nonempty
        let mut b: Vec<f64> = (0..t.len() - 1)
            .map(|i| {
                let inside = t[i] <= x && x < t[i + 1];
                let at_end = x == self.hi && i == last.max(ORDER - 1) && t[i] < t[i + 1];
                if inside || at_end {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        for order in 2..=k {
            b = (0..t.len() - order)
                .map(|i| {
                    let left = ratio(x - t[i], t[i + order - 1] - t[i]) * b[i];
                    let right = ratio(t[i + order] - x, t[i + order] - t[i + 1]) * b[i + 1];
                    left + right
                })
                .collect();
        }
        b
    }

    pub fn values(&self, x: f64) -> Vec<f64> {
        self.order_values(x, ORDER)
    }

    /// Derivative of order `deriv` of every cubic basis function at `x`.
    pub fn derivatives(&self, x: f64, deriv: usize) -> Vec<f64> {
        let t = &self.knots;
        let mut d = self.order_values(x, ORDER - deriv);
        for order in (ORDER - deriv + 1)..=ORDER {
            let scale = (order - 1) as f64;
            d = (0..t.len() - order)
                .map(|i| {
                    let left = ratio(d[i], t[i + order - 1] - t[i]);
                    let right = ratio(d[i + 1], t[i + order] - t[i + 1]);
                    scale * (left - right)
                })
                .collect();
        }
        d
    }

    /// `Omega_ij = int B_i'' B_j''` over `[lo, hi]`; second derivatives are
    /// linear between knots, so two-point Gauss-Legendre is exact.
    pub fn roughness_penalty(&self) -> DMatrix<f64> {
        let m = self.len();
        let mut omega = DMatrix::zeros(m, m);
        let nodes = [-1.0 / 3f64.sqrt(), 1.0 / 3f64.sqrt()];
        for pair in self.knots.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            for z in nodes {
                let d2 = DVector::from_vec(self.derivatives(a + half * (z + 1.0), 2));
                omega.ger(half, &d2, &d2, 1.0);
            }
        }
        omega
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl Smoother for CubicSplinePenalized {
    fn label(&self) -> String {
        format!("spline(dof={})", self.0)
    }

    fn dof(&self) -> f64 {
        self.0
    }

    /// Bisection on `log lambda` until `trace(S) - 1` is within [`DOF_TOL`] of the target.
    fn prepare(&self, x: &[f64], w: &[f64]) -> Result<PreparedSmoother> {
        check_inputs(x, w)?;
        let basis = SplineBasis::from_data(x)?;
        let m = basis.len();
        let target = self.0 + 1.0;
        if !(self.0 > 1.0 && target < m as f64) {
            return Err(Error::invalid(format!(
                "spline dof {} must lie in (1, {}) for this basis",
                self.0,
                m - 1
            )));
        }
        let omega = basis.roughness_penalty();
        let basis = Basis::Spline(basis);
        let gram = weighted_gram(&design_matrix(&basis, x), &DVector::from_column_slice(w));
        let scale = gram.trace() / omega.trace();
        let build = |log_lambda: f64| {
            PreparedSmoother::new(basis.clone(), x, w, omega.clone(), scale * log_lambda.exp())
        };
        // trace falls from m towards 2 as lambda grows
        let (mut lo, mut hi) = (-30.0_f64, 30.0_f64);
        let mut best = build(0.0)?;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let cand = build(mid)?;
            let tr = cand.trace();
            best = cand;
            if (tr - target).abs() <= DOF_TOL * 1e-3 {
                break;
            }
            if tr > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let tr = best.trace();
        if (tr - target).abs() > DOF_TOL {
            return Err(Error::invalid(format!(
                "could not reach spline dof {} (closest {:.4})",
                self.0,
                tr - 1.0
            )));
        }
        Ok(best)
    }
}
