//! Projected limited-memory BFGS with box constraints, and a finite-difference gradient check.

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Objective value and gradient at one point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
}

impl Evaluation {
    pub fn new(value: f64, gradient: DVector<f64>) -> Self {
        Self { value, gradient }
    }

    fn is_finite(&self) -> bool {
        self.value.is_finite() && self.gradient.iter().all(|g| g.is_finite())
    }
}

/// Per-parameter box `[lower, upper]`.
#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn uniform(n: usize, lower: f64, upper: f64) -> Self {
        Self {
            lower: vec![lower; n],
            upper: vec![upper; n],
        }
    }

    fn project(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeOptions {
    pub max_iter: usize,
    /// Stop when the projected gradient's max norm or the relative value change falls below this.
    pub tol: f64,
    pub history: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub max_rejections: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            tol: 1e-9,
            history: 10,
            armijo: 1e-4,
            max_rejections: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    GradientTolerance,
    ValueTolerance,
    MaxIterations,
    /// No step along the current direction decreased the objective.
    LineSearchFailed,
}

impl Status {
    pub fn converged(self) -> bool {
        matches!(self, Status::GradientTolerance | Status::ValueTolerance)
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: Status,
    /// Objective value at every accepted iterate, starting with `x0`.
    pub trace: Vec<f64>,
}

fn projected_gradient(x: &DVector<f64>, g: &DVector<f64>, bounds: Option<&Bounds>) -> DVector<f64> {
    match bounds {
        None => g.clone(),
        Some(b) => {
            let mut pg = g.clone();
            for i in 0..x.len() {
                let stepped = (x[i] - g[i]).clamp(b.lower[i], b.upper[i]);
                pg[i] = x[i] - stepped;
            }
            pg
        }
    }
}

/// Variables held at a bound with the gradient pushing further out.
fn active_set(x: &DVector<f64>, g: &DVector<f64>, bounds: Option<&Bounds>) -> Vec<bool> {
    match bounds {
        None => vec![false; x.len()],
        Some(b) => (0..x.len())
            .map(|i| (x[i] <= b.lower[i] && g[i] > 0.0) || (x[i] >= b.upper[i] && g[i] < 0.0))
            .collect(),
    }
}

fn two_loop(
    g: &DVector<f64>,
    history: &VecDeque<(DVector<f64>, DVector<f64>, f64)>,
) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

/// Minimizes `objective` from `x0` by projected L-BFGS. Bound feasibility is kept by
/// projecting every trial point onto the box.
pub fn minimize<F>(
    mut objective: F,
    x0: DVector<f64>,
    bounds: Option<&Bounds>,
    opts: &MinimizeOptions,
) -> Result<Minimum>
where
    F: FnMut(&DVector<f64>) -> Evaluation,
{
    let n = x0.len();
    if let Some(b) = bounds {
        if b.lower.len() != n || b.upper.len() != n {
            return Err(Error::InvalidArgument(format!(
                "bounds have {} / {} entries for {n} parameters",
                b.lower.len(),
                b.upper.len()
            )));
        }
        if b.lower.iter().zip(&b.upper).any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::InvalidArgument("lower bound exceeds upper bound".into()));
        }
    }
    let mut x = x0;
    if let Some(b) = bounds {
        b.project(&mut x);
    }
    let mut cur = objective(&x);
    let mut evaluations = 1;
    if cur.gradient.len() != n {
        return Err(Error::InvalidArgument(format!(
            "gradient has {} entries for {n} parameters",
            cur.gradient.len()
        )));
    }
    if !cur.is_finite() {
        return Err(Error::NonFinite("objective at the starting point".into()));
    }
    let mut trace = vec![cur.value];
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let status = loop {
        if projected_gradient(&x, &cur.gradient, bounds).amax() < opts.tol {
            break Status::GradientTolerance;
        }
        if iterations >= opts.max_iter {
            break Status::MaxIterations;
        }
        let active = active_set(&x, &cur.gradient, bounds);
        let mut g_free = cur.gradient.clone();
        for i in 0..n {
            if active[i] {
                g_free[i] = 0.0;
            }
        }
        let mut d = two_loop(&g_free, &history);
        for i in 0..n {
            if active[i] {
                d[i] = 0.0;
            }
        }
        let mut gd = d.dot(&cur.gradient);
        if !(gd < 0.0) {
            history.clear();
            d = -g_free;
            gd = d.dot(&cur.gradient);
        }
        let mut alpha = if history.is_empty() {
            (1.0 / d.amax()).min(1.0)
        } else {
            1.0
        };

        let mut rejections = 0;
        let mut non_finite = false;
        let accepted = loop {
            let mut xt = &x + &d * alpha;
            if let Some(b) = bounds {
                b.project(&mut xt);
            }
            let unprojected = bounds.is_none() || (&xt - (&x + &d * alpha)).amax() == 0.0;
            let et = objective(&xt);
            evaluations += 1;
            if !et.is_finite() {
                non_finite = true;
            } else {
                let dec = cur.gradient.dot(&(&xt - &x));
                if et.value <= cur.value && et.value <= cur.value + opts.armijo * dec {
                    let mut best = (xt, et);
                    // one quadratic-interpolation refinement; exact along the ray for quadratics
                    let curv = best.1.value - cur.value - alpha * gd;
                    if unprojected && curv > 0.0 {
                        let aq = -gd * alpha * alpha / (2.0 * curv);
                        if (aq / alpha - 1.0).abs() > 1e-3 && aq.is_finite() {
                            let xq = &x + &d * aq;
                            let inside = bounds.map_or(true, |b| {
                                (0..n).all(|i| xq[i] >= b.lower[i] && xq[i] <= b.upper[i])
                            });
                            if inside {
                                let eq = objective(&xq);
                                evaluations += 1;
                                if eq.is_finite() && eq.value < best.1.value {
                                    best = (xq, eq);
                                }
                            }
                        }
                    }
                    break Some(best);
                }
            }
            rejections += 1;
            if rejections >= opts.max_rejections {
                break None;
            }
            alpha *= 0.5;
        };
        let Some((xn, en)) = accepted else {
            if non_finite {
                return Err(Error::NonFinite(format!(
                    "objective during line search after {rejections} rejected steps"
                )));
            }
            break Status::LineSearchFailed;
        };
        iterations += 1;
        let s = &xn - &x;
        let y = &en.gradient - &cur.gradient;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if history.len() == opts.history {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let change = (cur.value - en.value).abs();
        let scale = cur.value.abs().max(en.value.abs());
        x = xn;
        cur = en;
        trace.push(cur.value);
        if change <= opts.tol * scale {
            break Status::ValueTolerance;
        }
    };
    Ok(Minimum {
        x,
        value: cur.value,
        iterations,
        evaluations,
        status,
        trace,
    })
}

/// Largest component-wise `|g_analytic - g_fd| / max(|g_fd|, 1)` with central differences.
pub fn check_gradient<F>(mut objective: F, x: &DVector<f64>, h: f64) -> f64
where
    F: FnMut(&DVector<f64>) -> Evaluation,
{
    let analytic = objective(x).gradient;
    let mut worst: f64 = 0.0;
    let mut xp = x.clone();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = objective(&xp).value;
        xp[i] = x[i] - h;
        let fm = objective(&xp).value;
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1.0));
    }
    worst
}
