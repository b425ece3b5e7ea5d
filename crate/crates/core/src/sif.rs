//! Fixed-point machinery for standard interference functions (SIFs).
//!
//! A SIF `f: R₊ᵏ → R₊₊ᵏ` is monotone (`x ≤ y ⇒ f(x) ≤ f(y)`) and scalable
//! (`α f(x) > f(αx)` for `α > 1`). Two iterations are provided: the plain
//! Yates iteration `x ← f(x)` and the normalized iteration
//! `x ← θ f(x) / g(f(x))` that solves the conditional eigenproblem
//! `x = ρ f(x), g(x) = θ` for a monotone norm-like `g`.

use nalgebra::DVector;
use serde::Serialize;

pub trait SifMap {
    fn dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// Wraps a closure as a [`SifMap`].
pub struct FnSif<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&DVector<f64>) -> DVector<f64>> FnSif<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&DVector<f64>) -> DVector<f64>> SifMap for FnSif<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x)
    }
}

/// A monotone functional `g: R₊₊ᵏ → R₊₊`, normally homogeneous of degree 1.
pub trait MonotoneHomogeneous {
    fn dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> f64;
    fn is_homogeneous(&self) -> bool {
        true
    }
}

pub struct MaxNorm(pub usize);

impl MonotoneHomogeneous for MaxNorm {
    fn dim(&self) -> usize {
        self.0
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        x.amax()
    }
}

pub struct FnNorm<G> {
    dim: usize,
    g: G,
}

impl<G: Fn(&DVector<f64>) -> f64> FnNorm<G> {
    pub fn new(dim: usize, g: G) -> Self {
        Self { dim, g }
    }
}

impl<G: Fn(&DVector<f64>) -> f64> MonotoneHomogeneous for FnNorm<G> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        (self.g)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub residual: f64,
    pub g_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointResult {
    pub x_star: DVector<f64>,
    /// `ρ` with `x* = ρ f(x*)`; only set by the normalized iteration.
    pub eigenvalue: Option<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Set when the residual kept growing for a whole divergence window.
    pub likely_infeasible: bool,
    pub trace: Vec<TracePoint>,
}

impl FixedPointResult {
    pub fn into_result(self, what: &'static str) -> crate::Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(crate::Error::NotConverged {
                what,
                iterations: self.iterations,
                residual: self.residual,
            })
        }
    }

    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iteration,residual,g_value\n");
        for t in &self.trace {
            s.push_str(&format!(
                "{},{:e},{:e}\n",
                t.iteration, t.residual, t.g_value
            ));
        }
        s
    }
}

pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITER: usize = 10_000;
pub const DIVERGENCE_WINDOW: usize = 50;

fn inf_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Normalized iteration `x ← θ f(x) / g(f(x))`.
pub fn normalized_fixed_point(
    f: &dyn SifMap,
    g: &dyn MonotoneHomogeneous,
    theta: f64,
    x0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> FixedPointResult {
    normalized_fixed_point_observed(f, g, theta, x0, tol, max_iter, &mut |_, _, _| {})
}

/// As [`normalized_fixed_point`], calling `observe(t, x_t, f(x_t))` for the
/// starting point (`t = 0`) and after every update.
#[allow(clippy::too_many_arguments)]
pub fn normalized_fixed_point_observed(
    f: &dyn SifMap,
    g: &dyn MonotoneHomogeneous,
    theta: f64,
    x0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    observe: &mut dyn FnMut(usize, &DVector<f64>, &DVector<f64>),
) -> FixedPointResult {
    assert!(theta > 0.0, "theta must be positive");
    assert_eq!(x0.len(), f.dim(), "x0 has the wrong dimension");
    debug_assert_eq!(f.dim(), g.dim());
    let mut x = x0.clone();
    let mut fx = f.eval(&x);
    observe(0, &x, &fx);
    let mut trace = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let next = &fx * (theta / g.eval(&fx));
        iterations += 1;
        residual = inf_dist(&next, &x);
        x = next;
        fx = f.eval(&x);
        trace.push(TracePoint {
            iteration: iterations,
            residual,
            g_value: g.eval(&x),
        });
        observe(iterations, &x, &fx);
        if !residual.is_finite() {
            break;
        }
        if residual < tol {
            converged = true;
            break;
        }
    }
    FixedPointResult {
        eigenvalue: Some(theta / g.eval(&fx)),
        x_star: x,
        iterations,
        residual,
        converged,
        likely_infeasible: false,
        trace,
    }
}

/// Yates iteration `x ← f(x)`.
///
/// Stops early and flags the result as likely infeasible when the residual
/// grows for [`DIVERGENCE_WINDOW`] consecutive iterations.
pub fn yates_iteration(
    f: &dyn SifMap,
    x0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> FixedPointResult {
    assert_eq!(x0.len(), f.dim(), "x0 has the wrong dimension");
    let from_zero = x0.iter().all(|&v| v == 0.0);
    let mut x = x0.clone();
    let mut trace = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut growing = 0;
    let mut likely_infeasible = false;
    while iterations < max_iter {
        let next = f.eval(&x);
        if from_zero {
            debug_assert!(
                next.iter()
                    .zip(x.iter())
                    .all(|(a, b)| *a >= *b * (1.0 - 1e-9)),
                "Yates iterates from zero must be nondecreasing"
            );
        }
        iterations += 1;
        let r = inf_dist(&next, &x);
        growing = if r > residual { growing + 1 } else { 0 };
        residual = r;
        x = next;
        trace.push(TracePoint {
            iteration: iterations,
            residual,
            g_value: x.amax(),
        });
        if residual < tol {
            converged = true;
            break;
        }
        if !residual.is_finite() || growing >= DIVERGENCE_WINDOW {
            likely_infeasible = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "Yates iteration stopped after {iterations} iterations (residual {residual:e}){}",
            if likely_infeasible {
                ", likely infeasible"
            } else {
                ""
            }
        );
    }
    FixedPointResult {
        x_star: x,
        eigenvalue: None,
        iterations,
        residual,
        converged,
        likely_infeasible,
        trace,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityViolation {
    pub sample: usize,
    pub component: usize,
    pub fx: f64,
    pub fy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalabilityViolation {
    pub sample: usize,
    pub alpha: f64,
    pub component: usize,
    pub alpha_fx: f64,
    pub f_alpha_x: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AxiomReport {
    /// Pairs that were ordered (`x ≤ y`) and therefore tested for monotonicity.
    pub ordered_pairs: usize,
    pub scalability_checks: usize,
    pub monotonicity: Vec<MonotonicityViolation>,
    pub scalability: Vec<ScalabilityViolation>,
}

impl AxiomReport {
    pub fn passed(&self) -> bool {
        self.monotonicity.is_empty() && self.scalability.is_empty()
    }
}

/// Relative slack used when comparing SIF outputs.
pub const AXIOM_SLACK: f64 = 1e-12;

/// Tests monotonicity on every ordered pair and scalability on every `x` of
/// every pair against every `α`. Unordered pairs are skipped for the
/// monotonicity test.
pub fn check_sif_axioms(
    f: &dyn SifMap,
    samples: &[(DVector<f64>, DVector<f64>)],
    alphas: &[f64],
) -> AxiomReport {
    let mut report = AxiomReport::default();
    for (s, (x, y)) in samples.iter().enumerate() {
        let fx = f.eval(x);
        if x.iter().zip(y.iter()).all(|(a, b)| a <= b) {
            report.ordered_pairs += 1;
            let fy = f.eval(y);
            for i in 0..fx.len() {
                if fx[i] > fy[i] + AXIOM_SLACK * fy[i].abs() {
                    report.monotonicity.push(MonotonicityViolation {
                        sample: s,
                        component: i,
                        fx: fx[i],
                        fy: fy[i],
                    });
                }
            }
        }
        for &alpha in alphas {
            assert!(alpha > 1.0, "scalability needs alpha > 1");
            report.scalability_checks += 1;
            let f_ax = f.eval(&(x * alpha));
            for i in 0..fx.len() {
                let afx = alpha * fx[i];
                if afx - f_ax[i] <= -AXIOM_SLACK * afx.abs() {
                    report.scalability.push(ScalabilityViolation {
                        sample: s,
                        alpha,
                        component: i,
                        alpha_fx: afx,
                        f_alpha_x: f_ax[i],
                    });
                }
            }
        }
    }
    report
}
