//! Minimization driver shared by both estimation stages: L-BFGS (argmin) or
//! Adam, with optional validation-based early stopping and a per-iteration trace.

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use argmin::core::{
    CostFunction, Error as ArgminError, Executor, Gradient, IterState, Problem, Solver, State, TerminationReason,
    TerminationStatus, KV,
};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SctError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Algorithm {
    #[default]
    #[serde(rename = "quasi-newton")]
    QuasiNewton,
    #[serde(rename = "first-order-adaptive")]
    FirstOrderAdaptive,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::QuasiNewton => "quasi-newton",
            Algorithm::FirstOrderAdaptive => "first-order-adaptive",
        })
    }
}

impl FromStr for Algorithm {
    type Err = SctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quasi-newton" | "lbfgs" => Ok(Algorithm::QuasiNewton),
            "first-order-adaptive" | "adam" => Ok(Algorithm::FirstOrderAdaptive),
            other => Err(SctError::validation(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSettings {
    pub algorithm: Algorithm,
    pub max_iter: u64,
    pub grad_tol: f64,
    /// Iterations without validation improvement before stopping.
    pub patience: u64,
    pub lbfgs_memory: usize,
    pub learning_rate: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            algorithm: Algorithm::QuasiNewton,
            max_iter: 500,
            grad_tol: 1e-6,
            patience: 25,
            lbfgs_memory: 10,
            learning_rate: 0.02,
        }
    }
}

/// A differentiable function to be minimized.
pub trait Objective: Sync {
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync,
{
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(x)
    }
}

/// One line of optimizer progress.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub stage: String,
    pub iter: u64,
    pub objective: f64,
    pub grad_norm: f64,
    pub validation: Option<f64>,
    pub seconds: f64,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage={} iter={} objective={:.10e} grad_norm={:.4e}",
            self.stage, self.iter, self.objective, self.grad_norm
        )?;
        if let Some(v) = self.validation {
            write!(f, " validation={v:.10e}")?;
        }
        write!(f, " seconds={:.4}", self.seconds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIterations,
    EarlyStopped,
    /// The line search could not make progress; the last accepted point is returned.
    Stalled,
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub iterations: u64,
    pub reason: StopReason,
}

type Validation<'a> = &'a (dyn Fn(&[f64]) -> Result<f64> + Sync);

/// Minimizes `objective` from `x0`.
///
/// With `validation`, the returned point is the iterate with the lowest
/// validation value, and the run stops after `patience` iterations without improvement.
pub fn minimize(
    objective: &dyn Objective,
    x0: Vec<f64>,
    settings: &OptimizerSettings,
    validation: Option<Validation<'_>>,
    stage: &str,
    trace: &mut Vec<TraceRecord>,
) -> Result<Minimum> {
    let (f0, g0) = objective.value_grad(&x0)?;
    if !f0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return Err(SctError::numerical(format!("{stage}: objective or gradient not finite at the initial point")));
    }
    let start = Instant::now();
    let mut monitor = Monitor::new(stage, validation, settings.patience, start, trace);
    monitor.observe(0, &x0, f0, norm(&g0))?;
    let reason = match settings.algorithm {
        Algorithm::QuasiNewton => run_lbfgs(objective, x0, settings, &mut monitor)?,
        Algorithm::FirstOrderAdaptive => run_adam(objective, x0, g0, settings, &mut monitor)?,
    };
    let (x, value, iterations) = monitor.result();
    Ok(Minimum { x, value, initial_value: f0, iterations, reason })
}

fn norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

struct Monitor<'a, 't> {
    stage: String,
    validation: Option<Validation<'a>>,
    patience: u64,
    start: Instant,
    trace: &'t mut Vec<TraceRecord>,
    best_x: Vec<f64>,
    best_value: f64,
    best_score: f64,
    since_best: u64,
    last_iter: u64,
    stop: Option<StopReason>,
    error: Option<SctError>,
}

impl<'a, 't> Monitor<'a, 't> {
    fn new(
        stage: &str,
        validation: Option<Validation<'a>>,
        patience: u64,
        start: Instant,
        trace: &'t mut Vec<TraceRecord>,
    ) -> Self {
        Monitor {
            stage: stage.to_string(),
            validation,
            patience,
            start,
            trace,
            best_x: Vec::new(),
            best_value: f64::INFINITY,
            best_score: f64::INFINITY,
            since_best: 0,
            last_iter: 0,
            stop: None,
            error: None,
        }
    }

    /// Records an accepted iterate; returns true when early stopping triggers.
    fn observe(&mut self, iter: u64, x: &[f64], value: f64, grad_norm: f64) -> Result<bool> {
        let validation = match self.validation {
            Some(v) => Some(v(x)?),
            None => None,
        };
        self.trace.push(TraceRecord {
            stage: self.stage.clone(),
            iter,
            objective: value,
            grad_norm,
            validation,
            seconds: self.start.elapsed().as_secs_f64(),
        });
        self.last_iter = iter;
        let score = validation.unwrap_or(value);
        if score < self.best_score || self.best_x.is_empty() {
            self.best_score = score;
            self.best_value = value;
            self.best_x = x.to_vec();
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        Ok(self.validation.is_some() && self.since_best >= self.patience)
    }

    fn result(self) -> (Vec<f64>, f64, u64) {
        (self.best_x, self.best_value, self.last_iter)
    }
}

/// Adapts [`Objective`] to argmin, caching the last evaluation so that the
/// cost and gradient requests at one point share a single computation.
struct Operator<'o> {
    objective: &'o dyn Objective,
    cache: Mutex<Option<(Vec<f64>, f64, Vec<f64>)>>,
}

impl Operator<'_> {
    fn eval(&self, x: &[f64]) -> std::result::Result<(f64, Vec<f64>), ArgminError> {
        let mut cache = self.cache.lock().expect("cache lock");
        if let Some((cx, f, g)) = cache.as_ref() {
            if cx.as_slice() == x {
                return Ok((*f, g.clone()));
            }
        }
        let (f, g) = self.objective.value_grad(x).map_err(|e| ArgminError::msg(e.to_string()))?;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(ArgminError::msg("non-finite objective"));
        }
        *cache = Some((x.to_vec(), f, g.clone()));
        Ok((f, g))
    }
}

impl CostFunction for Operator<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> std::result::Result<f64, ArgminError> {
        Ok(self.eval(x)?.0)
    }
}

impl Gradient for Operator<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, x: &Vec<f64>) -> std::result::Result<Vec<f64>, ArgminError> {
        Ok(self.eval(x)?.1)
    }
}

type LbfgsState = IterState<Vec<f64>, Vec<f64>, (), (), (), f64>;

/// Wraps a solver with the monitor: records every iterate, stops early, and
/// turns line-search failures into a clean stop.
struct Monitored<'m, 'a, 't, S> {
    inner: S,
    monitor: &'m mut Monitor<'a, 't>,
}

impl<O, S> Solver<O, LbfgsState> for Monitored<'_, '_, '_, S>
where
    S: Solver<O, LbfgsState>,
{
    fn name(&self) -> &str {
        "monitored"
    }

    fn init(&mut self, problem: &mut Problem<O>, state: LbfgsState) -> std::result::Result<(LbfgsState, Option<KV>), ArgminError> {
        self.inner.init(problem, state)
    }

    fn next_iter(
        &mut self,
        problem: &mut Problem<O>,
        state: LbfgsState,
    ) -> std::result::Result<(LbfgsState, Option<KV>), ArgminError> {
        let backup = state.clone();
        match self.inner.next_iter(problem, state) {
            Ok((next, kv)) => {
                let x = next.get_param().cloned().unwrap_or_default();
                let g = next.get_gradient().map(|g| norm(g)).unwrap_or(f64::NAN);
                match self.monitor.observe(next.get_iter() + 1, &x, next.get_cost(), g) {
                    Ok(true) => self.monitor.stop = Some(StopReason::EarlyStopped),
                    Ok(false) => {}
                    Err(e) => {
                        self.monitor.error = Some(e);
                        self.monitor.stop = Some(StopReason::Stalled);
                    }
                }
                Ok((next, kv))
            }
            Err(_) => {
                self.monitor.stop = Some(StopReason::Stalled);
                Ok((backup, None))
            }
        }
    }

    fn terminate(&mut self, state: &LbfgsState) -> TerminationStatus {
        if self.monitor.stop.is_some() {
            return TerminationStatus::Terminated(TerminationReason::SolverExit("monitor".into()));
        }
        self.inner.terminate(state)
    }
}

fn run_lbfgs(
    objective: &dyn Objective,
    x0: Vec<f64>,
    settings: &OptimizerSettings,
    monitor: &mut Monitor<'_, '_>,
) -> Result<StopReason> {
    let op = Operator { objective, cache: Mutex::new(None) };
    let linesearch = MoreThuenteLineSearch::new();
    let lbfgs = LBFGS::new(linesearch, settings.lbfgs_memory.max(1))
        .with_tolerance_grad(settings.grad_tol)
        .and_then(|s| s.with_tolerance_cost(0.0))
        .map_err(|e| SctError::validation(e.to_string()))?;
    let wrapped = Monitored { inner: lbfgs, monitor: &mut *monitor };
    let result = Executor::new(op, wrapped)
        .configure(|s| s.param(x0).max_iters(settings.max_iter))
        .run()
        .map(|r| r.state.termination_status);
    if let Some(e) = monitor.error.take() {
        return Err(e);
    }
    let status = result.map_err(|e| SctError::numerical(format!("optimizer failed: {e}")))?;
    Ok(match (monitor.stop, status) {
        (Some(reason), _) => reason,
        (None, TerminationStatus::Terminated(TerminationReason::MaxItersReached)) => StopReason::MaxIterations,
        _ => StopReason::Converged,
    })
}

fn run_adam(
    objective: &dyn Objective,
    mut x: Vec<f64>,
    g0: Vec<f64>,
    settings: &OptimizerSettings,
    monitor: &mut Monitor<'_, '_>,
) -> Result<StopReason> {
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let n = x.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut g = g0;
    for it in 1..=settings.max_iter {
        if norm(&g) < settings.grad_tol {
            return Ok(StopReason::Converged);
        }
        let c1 = 1.0 - b1.powi(it as i32);
        let c2 = 1.0 - b2.powi(it as i32);
        for k in 0..n {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            x[k] -= settings.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
        }
        let f = match objective.value_grad(&x) {
            Ok((nf, ng)) if nf.is_finite() && ng.iter().all(|v| v.is_finite()) => {
                g = ng;
                nf
            }
            _ => return Ok(StopReason::Stalled),
        };
        if monitor.observe(it, &x, f, norm(&g))? {
            return Ok(StopReason::EarlyStopped);
        }
    }
    Ok(StopReason::MaxIterations)
}
