//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerOptions {
    /// Number of curvature pairs kept.
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop once `‖∇f‖ ≤ grad_tolerance`.
    pub grad_tolerance: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Function evaluations allowed per line search.
    pub max_line_search: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            memory: 10,
            max_iterations: 1000,
            grad_tolerance: 1e-8,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::config(format!(
                "line search constants must satisfy 0 < c1 < c2 < 1 (c1 = {}, c2 = {})",
                self.c1, self.c2
            )));
        }
        if self.memory == 0 {
            return Err(Error::config("L-BFGS memory must be at least 1"));
        }
        if self.max_line_search == 0 {
            return Err(Error::config("line search needs at least one evaluation"));
        }
        if self.grad_tolerance.is_nan() || self.grad_tolerance < 0.0 {
            return Err(Error::config("gradient tolerance must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Termination {
    Converged,
    #[default]
    Budget,
    LineSearchFailure,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::Converged => "converged",
            Termination::Budget => "budget",
            Termination::LineSearchFailure => "line-search-failure",
        })
    }
}

/// One accepted step, with what is needed to re-check the Wolfe conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    pub step: f64,
    pub loss_before: f64,
    /// Directional derivative `∇f(x)·d` at the start of the step.
    pub slope_before: f64,
    pub loss_after: f64,
    /// Directional derivative `∇f(x + αd)·d` at the accepted point.
    pub slope_after: f64,
}

impl StepRecord {
    pub fn satisfies_strong_wolfe(&self, c1: f64, c2: f64) -> bool {
        self.loss_after <= self.loss_before + c1 * self.step * self.slope_before
            && self.slope_after.abs() <= c2 * self.slope_before.abs()
    }
}

/// One call of the objective. `iteration` is 0 for the starting point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub iteration: usize,
    pub loss: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerReport {
    pub iterations: usize,
    /// Loss at the start point and after every accepted step.
    pub losses: Vec<f64>,
    pub final_grad_norm: f64,
    pub termination: Termination,
    pub steps: Vec<StepRecord>,
    pub evaluations: Vec<EvalRecord>,
    pub rejected_pairs: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A pair is kept only if it keeps the implicit Hessian approximation
/// positive definite.
pub fn curvature_ok(s: &[f64], y: &[f64]) -> bool {
    dot(s, y) > 1e-10 * norm(s) * norm(y)
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// `-H·g` by the two-loop recursion, with `H₀ = γI`, `γ = sᵀy / yᵀy` of the
/// newest pair.
fn two_loop(history: &VecDeque<Pair>, g: &[f64]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alpha = vec![0.0; history.len()];
    for (i, p) in history.iter().enumerate().rev() {
        alpha[i] = p.rho * dot(&p.s, &q);
        q.iter_mut().zip(&p.y).for_each(|(q, y)| *q -= alpha[i] * y);
    }
    if let Some(p) = history.back() {
        let gamma = dot(&p.s, &p.y) / dot(&p.y, &p.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (i, p) in history.iter().enumerate() {
        let beta = p.rho * dot(&p.y, &q);
        q.iter_mut().zip(&p.s).for_each(|(q, s)| *q += (alpha[i] - beta) * s);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Minimizer of the cubic matching values and slopes at two points, clamped
/// to `bounds`. Falls back to the midpoint when the cubic has no minimizer.
fn cubic_interpolate(
    (x1, f1, g1): (f64, f64, f64),
    (x2, f2, g2): (f64, f64, f64),
    bounds: (f64, f64),
) -> f64 {
    let (lo, hi) = if bounds.0 <= bounds.1 { bounds } else { (bounds.1, bounds.0) };
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let t = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if t.is_finite() {
            return t.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

struct Probe {
    step: f64,
    x: Vec<f64>,
    loss: f64,
    grad: Vec<f64>,
    slope: f64,
    eval_index: usize,
}

struct Objective<'a, F> {
    f: &'a mut F,
    evaluations: Vec<EvalRecord>,
    iteration: usize,
}

impl<F> Objective<'_, F>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    fn eval(&mut self, x: &[f64]) -> std::result::Result<(f64, Vec<f64>, usize), String> {
        let (loss, grad) = (self.f)(x);
        self.evaluations.push(EvalRecord {
            iteration: self.iteration,
            loss,
            accepted: false,
        });
        if grad.len() != x.len() {
            return Err(format!(
                "gradient has {} entries for a {}-dimensional point",
                grad.len(),
                x.len()
            ));
        }
        if !loss.is_finite() {
            return Err(format!("objective returned a non-finite loss ({loss})"));
        }
        if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
            return Err(format!("objective returned a non-finite gradient at index {i}"));
        }
        Ok((loss, grad, self.evaluations.len() - 1))
    }

    fn probe(&mut self, x: &[f64], d: &[f64], step: f64) -> std::result::Result<Probe, String> {
        let xs: Vec<f64> = x.iter().zip(d).map(|(x, d)| x + step * d).collect();
        let (loss, grad, eval_index) = self.eval(&xs)?;
        let slope = dot(&grad, d);
        Ok(Probe {
            step,
            x: xs,
            loss,
            grad,
            slope,
            eval_index,
        })
    }
}

enum Search {
    Found(Probe),
    Failed,
}

/// Strong-Wolfe line search: bracketing followed by a cubic-interpolation
/// zoom.
fn line_search<F>(
    obj: &mut Objective<'_, F>,
    x: &[f64],
    loss: f64,
    d: &[f64],
    slope0: f64,
    first_step: f64,
    opts: &OptimizerOptions,
) -> std::result::Result<Search, String>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (c1, c2) = (opts.c1, opts.c2);
    let mut budget = opts.max_line_search;
    let armijo = |p: &Probe| p.loss <= loss + c1 * p.step * slope0;
    let curvature = |p: &Probe| p.slope.abs() <= -c2 * slope0;

    let mut prev = (0.0, loss, slope0);
    let mut step = first_step;
    let (mut lo, mut hi);
    let mut first = true;
    loop {
        if budget == 0 {
            return Ok(Search::Failed);
        }
        budget -= 1;
        let p = obj.probe(x, d, step)?;
        if !armijo(&p) || (!first && p.loss >= prev.1) {
            lo = prev;
            hi = (p.step, p.loss, p.slope);
            break;
        }
        if curvature(&p) {
            return Ok(Search::Found(p));
        }
        if p.slope >= 0.0 {
            lo = (p.step, p.loss, p.slope);
            hi = prev;
            break;
        }
        let next = cubic_interpolate(
            prev,
            (p.step, p.loss, p.slope),
            (p.step + 0.01 * (p.step - prev.0), p.step * 10.0),
        );
        prev = (p.step, p.loss, p.slope);
        step = next;
        first = false;
    }

    let dnorm = norm(d);
    while budget > 0 {
        budget -= 1;
        let width = (hi.0 - lo.0).abs();
        if width * dnorm < 1e-16 * (1.0 + norm(x)) {
            break;
        }
        let (a, b) = (lo.0.min(hi.0), lo.0.max(hi.0));
        let mut t = cubic_interpolate(lo, hi, (a, b));
        // keep trial points away from the bracket ends
        let margin = 0.1 * width;
        if t - a < margin || b - t < margin {
            t = 0.5 * (a + b);
        }
        let p = obj.probe(x, d, t)?;
        if !armijo(&p) || p.loss >= lo.1 {
            hi = (p.step, p.loss, p.slope);
        } else {
            if curvature(&p) {
                return Ok(Search::Found(p));
            }
            if p.slope * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (p.step, p.loss, p.slope);
        }
    }
    Ok(Search::Failed)
}

/// Minimizes `f` from `x0`. `f` returns the loss and gradient at a point.
pub fn minimize<F>(f: F, x0: Vec<f64>, opts: &OptimizerOptions) -> Result<(Vec<f64>, OptimizerReport)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    minimize_with_observer(f, x0, opts, |_, _, _| {})
}

/// As [`minimize`], calling `observer(iteration, x, loss)` after every
/// accepted step.
pub fn minimize_with_observer<F, O>(
    mut f: F,
    x0: Vec<f64>,
    opts: &OptimizerOptions,
    mut observer: O,
) -> Result<(Vec<f64>, OptimizerReport)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
    O: FnMut(usize, &[f64], f64),
{
    opts.validate()?;
    let mut obj = Objective {
        f: &mut f,
        evaluations: Vec::new(),
        iteration: 0,
    };
    let mut report = OptimizerReport::default();
    let abort = |reason: String, mut report: OptimizerReport, evals: Vec<EvalRecord>| {
        report.evaluations = evals;
        Error::Optimizer {
            reason,
            report: Box::new(report),
        }
    };

    let (mut loss, mut grad, idx) = match obj.eval(&x0) {
        Ok(v) => v,
        Err(e) => return Err(abort(e, report, obj.evaluations)),
    };
    obj.evaluations[idx].accepted = true;
    let mut x = x0;
    report.losses.push(loss);
    let mut gnorm = norm(&grad);
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(opts.memory);

    report.termination = Termination::Budget;
    if gnorm <= opts.grad_tolerance {
        report.termination = Termination::Converged;
    } else {
        for iteration in 1..=opts.max_iterations {
            obj.iteration = iteration;
            let mut restarted = history.is_empty();
            let found = loop {
                let (d, first_step) = if history.is_empty() {
                    (grad.iter().map(|g| -g).collect::<Vec<_>>(), 1.0 / gnorm)
                } else {
                    (two_loop(&history, &grad), 1.0)
                };
                let slope = dot(&grad, &d);
                if slope < 0.0 {
                    match line_search(&mut obj, &x, loss, &d, slope, first_step, opts) {
                        Ok(Search::Found(p)) if p.loss < loss => break Some((p, slope)),
                        Ok(_) => {}
                        Err(e) => return Err(abort(e, report, obj.evaluations)),
                    }
                }
                // Not a descent direction, or the search failed: retry once
                // from steepest descent before giving up.
                if restarted {
                    break None;
                }
                history.clear();
                restarted = true;
            };
            let Some((p, slope_before)) = found else {
                report.termination = Termination::LineSearchFailure;
                break;
            };

            obj.evaluations[p.eval_index].accepted = true;
            let s: Vec<f64> = p.x.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = p.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
            if curvature_ok(&s, &y) {
                if history.len() == opts.memory {
                    history.pop_front();
                }
                let rho = 1.0 / dot(&s, &y);
                history.push_back(Pair { s, y, rho });
            } else {
                report.rejected_pairs += 1;
            }
            report.steps.push(StepRecord {
                iteration,
                step: p.step,
                loss_before: loss,
                slope_before,
                loss_after: p.loss,
                slope_after: p.slope,
            });
            x = p.x;
            loss = p.loss;
            grad = p.grad;
            gnorm = norm(&grad);
            report.losses.push(loss);
            report.iterations = iteration;
            observer(iteration, &x, loss);
            if gnorm <= opts.grad_tolerance {
                report.termination = Termination::Converged;
                break;
            }
        }
    }
    report.final_grad_norm = gnorm;
    report.evaluations = obj.evaluations;
    Ok((x, report))
}
