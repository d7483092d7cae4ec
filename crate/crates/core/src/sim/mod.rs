//! Path generation with absorption and explosion barriers.
//!
//! Trajectories of the (possibly drift-adjusted) system are generated by
//! Euler–Maruyama stepping with correlated increments. `M` components step
//! in log space by default, which preserves positivity (each is a stochastic
//! exponential); `v` steps directly. Hitting the upper barrier stands in for
//! explosion, hitting the lower one for absorption at zero: once a component
//! hits a barrier its value is frozen there.
//!
//! A component hitting the upper barrier means the vector process has left
//! every bounded set, which is where the drift-adjusted dynamics stop being
//! defined; the remaining components are therefore frozen at their current
//! values with their own events still `Survived`.
//!
//! Determinism: a path is a pure function of `(seed, path_index)` via
//! counter-based streams, so batches are bit-identical for any thread count.

pub mod rng;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::EffectiveSde;
use crate::model::Factor;

use self::rng::PathStream;

/// Stepping scheme for the `M` components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `d log M = (drift/M - sigma^2/2) dt + sigma dB`; positivity-preserving.
    #[default]
    EulerLog,
    /// Direct Euler on `M`; kept for cross-checks. A step that lands at or
    /// below zero is treated as absorption at the lower barrier.
    EulerDirect,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    /// Base time step.
    pub dt_base: f64,
    /// Explosion proxy: hitting this level counts as explosion.
    pub barrier_up: f64,
    /// Absorption proxy for 0.
    pub barrier_down: f64,
    /// Adaptive step-size control (see `local_activity`).
    pub adaptive: bool,
    /// Hard cap on steps per path; exceeding it discards the path.
    pub max_steps: u64,
    pub scheme: Scheme,
    /// Antithetic pairing: paths (2k, 2k+1) share a stream with negated
    /// increments for the odd member.
    pub antithetic: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt_base: 1e-4,
            barrier_up: 1e8,
            barrier_down: 1e-8,
            adaptive: true,
            max_steps: 20_000_000,
            scheme: Scheme::EulerLog,
            antithetic: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, eff: &EffectiveSde) -> Result<(), SimError> {
        let sys = eff.system();
        if !(self.dt_base > 0.0) || self.dt_base > sys.horizon() {
            return Err(SimError::Config(format!(
                "dt_base must be in (0, T]; got {} with T = {}",
                self.dt_base,
                sys.horizon()
            )));
        }
        if !(self.barrier_down > 0.0) || self.barrier_down >= self.barrier_up {
            return Err(SimError::Config(format!(
                "need 0 < barrier_down < barrier_up; got {} and {}",
                self.barrier_down, self.barrier_up
            )));
        }
        let min_m = sys.initial_state()[..sys.d()]
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b));
        if min_m <= self.barrier_down || min_m >= self.barrier_up {
            return Err(SimError::Config(format!(
                "initial M components must lie strictly between the barriers; min is {min_m}"
            )));
        }
        if self.max_steps == 0 {
            return Err(SimError::Config("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-component barrier record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ComponentEvent {
    /// Reached the upper barrier at this time (explosion proxy).
    HitUp(f64),
    /// Reached the lower barrier at this time (absorption at 0).
    HitDown(f64),
    Survived,
}

impl ComponentEvent {
    pub fn hit_up(&self) -> bool {
        matches!(self, ComponentEvent::HitUp(_))
    }

    pub fn hit_down(&self) -> bool {
        matches!(self, ComponentEvent::HitDown(_))
    }
}

/// One simulated trajectory's endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathOutcome {
    /// Values at `min(T, first freeze time)`, barrier-clamped where frozen.
    pub terminal_state: Vec<f64>,
    /// One record per state component (`v` last).
    pub events: Vec<ComponentEvent>,
    pub steps_used: u64,
    /// The derived per-path stream key.
    pub seed_used: u64,
    /// Running maximum of each component over the grid, used for
    /// barrier-robustness checks without re-simulation.
    pub sup_state: Vec<f64>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PathError {
    #[error("max_steps exhausted before reaching T or a barrier")]
    MaxStepsExhausted,
    #[error("coefficient evaluation failed at t = {time}: {message}")]
    Domain { time: f64, message: String },
    #[error("state became non-finite at t = {time}")]
    NonFinite { time: f64 },
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation config: {0}")]
    Config(String),
    #[error("{0}")]
    Model(#[from] crate::model::ModelError),
    #[error(
        "{discarded} of {total} paths discarded ({first_message}); more than 1% — results unusable"
    )]
    TooManyDiscarded {
        discarded: usize,
        total: usize,
        first_message: String,
    },
}

/// Result of a batch run. Discarded paths (max_steps exhaustion or domain
/// errors) are counted and excluded from `outcomes`.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub outcomes: Vec<PathOutcome>,
    pub n_requested: usize,
    pub discarded: usize,
    /// First few (path_index, error) pairs for diagnostics.
    pub discard_samples: Vec<(u64, String)>,
}

impl BatchResult {
    pub fn n_effective(&self) -> usize {
        self.outcomes.len()
    }
}

/// Divisor applied to the drift part of the local activity rate. Larger
/// values take longer drift substeps through run-away regions (cheaper but
/// coarser); the predictor-corrector drift stage keeps hitting times
/// accurate at this setting.
const DRIFT_ACTIVITY_DIVISOR: f64 = 64.0;
/// Floor factor for the adaptive step.
const DT_FLOOR_FACTOR: f64 = 1e-6;

struct Engine<'a> {
    eff: &'a EffectiveSde,
    cfg: &'a SimConfig,
    factor: Factor,
    d: usize,
    dim: usize,
    drift_zero: bool,
    v_absorbing: bool,
}

impl<'a> Engine<'a> {
    fn new(eff: &'a EffectiveSde, cfg: &'a SimConfig) -> Result<Self, SimError> {
        cfg.validate(eff)?;
        let sys = eff.system();
        let factor = sys.correlation().factor()?;
        Ok(Engine {
            eff,
            cfg,
            factor,
            d: sys.d(),
            dim: sys.dim(),
            drift_zero: eff.drift_is_identically_zero(),
            v_absorbing: sys.v_absorbing(),
        })
    }

    fn run(
        &self,
        seed: u64,
        path_index: u64,
        mut trace: Option<&mut Vec<(f64, Vec<f64>)>>,
    ) -> Result<PathOutcome, PathError> {
        use crate::expr::EvalCtx;

        let sys = self.eff.system();
        let d = self.d;
        let dim = self.dim;
        let horizon = sys.horizon();
        let log_scheme = self.cfg.scheme == Scheme::EulerLog;

        let (stream_path, negate) = if self.cfg.antithetic {
            (path_index / 2, path_index % 2 == 1)
        } else {
            (path_index, false)
        };
        let mut stream = PathStream::new(seed, stream_path);
        let seed_used = stream.key();

        let mut state: Vec<f64> = sys.initial_state().to_vec();
        let mut logm: Vec<f64> = state[..d].iter().map(|m| m.ln()).collect();
        let mut alive = vec![true; dim];
        let mut events = vec![ComponentEvent::Survived; dim];
        let mut sup_state = state.clone();
        let mut exploded = false;

        // Scratch buffers reused across steps.
        let mut sigmas = vec![0.0; d];
        let mut scales = vec![0.0; dim];
        let mut drift = vec![0.0; dim];
        let mut coef_a = vec![0.0; dim]; // dt-coefficient per component
        let mut z = vec![0.0; dim];
        let mut dw = vec![0.0; dim];
        let mut pred_state = vec![0.0; dim];
        let mut pred_sigmas = vec![0.0; d];
        let mut pred_drift = vec![0.0; dim];

        let mut t = 0.0f64;
        let mut steps: u64 = 0;

        if let Some(tr) = trace.as_deref_mut() {
            tr.push((t, state.clone()));
        }

        while t < horizon && alive.iter().any(|&a| a) && !exploded {
            if steps >= self.cfg.max_steps {
                return Err(PathError::MaxStepsExhausted);
            }

            let ctx = EvalCtx::new(&state, t);
            let fail = |e: crate::expr::EvalError| PathError::Domain {
                time: t,
                message: e.to_string(),
            };

            // Coefficients, evaluated once per step.
            for i in 0..d {
                sigmas[i] = sys.sigma_diag()[i].evaluate_ctx(&ctx).map_err(fail)?;
                scales[i] = if alive[i] { state[i] * sigmas[i] } else { 0.0 };
            }
            scales[d] = if alive[d] {
                sys.sigma_bar().evaluate_ctx(&ctx).map_err(fail)?
            } else {
                0.0
            };
            if self.drift_zero {
                drift.iter_mut().for_each(|v| *v = 0.0);
            } else {
                self.eff
                    .drift_with_sigmas(&ctx, &sigmas, Some(&alive), &mut drift)
                    .map_err(fail)?;
            }

            // Step size: local activity rate built from the diffusion
            // quadratic form (log-variance rate of the dominant component)
            // plus a drift term, so that strongly drifting or strongly
            // diffusing regions are refined and quiet ones are not.
            let dt = if self.cfg.adaptive {
                let n2 = 1.0 + ctx.norm * ctx.norm;
                let qf = sys.quadratic_form_from_scales(&state, &scales);
                let mut drift_abs = 0.0;
                if !self.drift_zero {
                    for i in 0..dim {
                        drift_abs += (state[i] * drift[i]).abs();
                    }
                }
                let q = qf / (n2 * n2) + drift_abs / (DRIFT_ACTIVITY_DIVISOR * n2);
                (self.cfg.dt_base / (1.0 + q)).max(self.cfg.dt_base * DT_FLOOR_FACTOR)
            } else {
                self.cfg.dt_base
            };
            let dt = dt.min(horizon - t);
            let sqrt_dt = dt.sqrt();

            for zi in z.iter_mut() {
                *zi = stream.normal();
            }
            if negate {
                for zi in z.iter_mut() {
                    *zi = -*zi;
                }
            }
            self.factor.apply(&z, &mut dw);

            // dt-coefficient A per component: log drift for M under EulerLog,
            // the plain drift otherwise. The predictor-corrector stage
            // averages A with its value at the Euler predictor; the diffusion
            // term stays left-point.
            for i in 0..d {
                coef_a[i] = if !alive[i] {
                    0.0
                } else if log_scheme {
                    drift[i] / state[i] - 0.5 * sigmas[i] * sigmas[i]
                } else {
                    drift[i]
                };
            }
            coef_a[d] = if alive[d] { drift[d] } else { 0.0 };

            if !self.drift_zero {
                // Predictor in the stepping space.
                let mut ok = true;
                for i in 0..d {
                    pred_state[i] = if alive[i] {
                        if log_scheme {
                            let lp = logm[i] + coef_a[i] * dt + sigmas[i] * dw[i] * sqrt_dt;
                            lp.exp()
                        } else {
                            state[i]
                                + drift[i] * dt
                                + state[i] * sigmas[i] * dw[i] * sqrt_dt
                        }
                    } else {
                        state[i]
                    };
                    if !(pred_state[i].is_finite() && pred_state[i] > 0.0) {
                        ok = false;
                    }
                }
                pred_state[d] = if alive[d] {
                    state[d] + coef_a[d] * dt + scales[d] * dw[d] * sqrt_dt
                } else {
                    state[d]
                };
                if !pred_state[d].is_finite() {
                    ok = false;
                }
                if ok {
                    let pred_ctx = EvalCtx::new(&pred_state, t + dt);
                    let corrected = (|| -> Result<(), crate::expr::EvalError> {
                        for i in 0..d {
                            pred_sigmas[i] = if alive[i] {
                                sys.sigma_diag()[i].evaluate_ctx(&pred_ctx)?
                            } else {
                                0.0
                            };
                        }
                        self.eff.drift_with_sigmas(
                            &pred_ctx,
                            &pred_sigmas,
                            Some(&alive),
                            &mut pred_drift,
                        )?;
                        Ok(())
                    })();
                    // On predictor failure (overshoot outside the coefficient
                    // domain) this step falls back to the left-point drift.
                    if corrected.is_ok() {
                        for i in 0..d {
                            if alive[i] {
                                let a2 = if log_scheme {
                                    pred_drift[i] / pred_state[i]
                                        - 0.5 * pred_sigmas[i] * pred_sigmas[i]
                                } else {
                                    pred_drift[i]
                                };
                                if a2.is_finite() {
                                    coef_a[i] = 0.5 * (coef_a[i] + a2);
                                }
                            }
                        }
                        if alive[d] && pred_drift[d].is_finite() {
                            coef_a[d] = 0.5 * (coef_a[d] + pred_drift[d]);
                        }
                    }
                }
            }

            t += dt;
            steps += 1;

            // Apply the step and check barriers.
            for i in 0..d {
                if !alive[i] {
                    continue;
                }
                let new_val = if log_scheme {
                    logm[i] += coef_a[i] * dt + sigmas[i] * dw[i] * sqrt_dt;
                    logm[i].exp()
                } else {
                    state[i] + coef_a[i] * dt + state[i] * sigmas[i] * dw[i] * sqrt_dt
                };
                if new_val.is_nan() {
                    return Err(PathError::NonFinite { time: t });
                }
                if new_val >= self.cfg.barrier_up {
                    events[i] = ComponentEvent::HitUp(t);
                    state[i] = self.cfg.barrier_up;
                    sup_state[i] = sup_state[i].max(self.cfg.barrier_up);
                    alive[i] = false;
                    exploded = true;
                } else if new_val <= self.cfg.barrier_down {
                    events[i] = ComponentEvent::HitDown(t);
                    state[i] = self.cfg.barrier_down;
                    alive[i] = false;
                } else {
                    state[i] = new_val;
                    sup_state[i] = sup_state[i].max(new_val);
                }
            }
            if alive[d] {
                let new_v = state[d] + coef_a[d] * dt + scales[d] * dw[d] * sqrt_dt;
                if new_v.is_nan() {
                    return Err(PathError::NonFinite { time: t });
                }
                if new_v.abs() >= self.cfg.barrier_up {
                    // The vector process has left every bounded set.
                    events[d] = ComponentEvent::HitUp(t);
                    state[d] = new_v.signum() * self.cfg.barrier_up;
                    sup_state[d] = sup_state[d].max(state[d]);
                    alive[d] = false;
                    exploded = true;
                } else if self.v_absorbing && new_v <= self.cfg.barrier_down {
                    events[d] = ComponentEvent::HitDown(t);
                    state[d] = self.cfg.barrier_down;
                    alive[d] = false;
                } else {
                    state[d] = new_v;
                    sup_state[d] = sup_state[d].max(new_v);
                }
            }

            if let Some(tr) = trace.as_deref_mut() {
                tr.push((t, state.clone()));
            }
        }

        Ok(PathOutcome {
            terminal_state: state,
            events,
            steps_used: steps,
            seed_used,
            sup_state,
        })
    }
}

/// Simulate one path. Pure function of `(seed, path_index)`.
pub fn simulate_path(
    eff: &EffectiveSde,
    cfg: &SimConfig,
    seed: u64,
    path_index: u64,
) -> Result<Result<PathOutcome, PathError>, SimError> {
    let engine = Engine::new(eff, cfg)?;
    Ok(engine.run(seed, path_index, None))
}

/// Simulate one path and record every grid point `(t, state)`.
pub fn simulate_path_traced(
    eff: &EffectiveSde,
    cfg: &SimConfig,
    seed: u64,
    path_index: u64,
) -> Result<Result<(PathOutcome, Vec<(f64, Vec<f64>)>), PathError>, SimError> {
    let engine = Engine::new(eff, cfg)?;
    let mut trace = Vec::new();
    Ok(engine
        .run(seed, path_index, Some(&mut trace))
        .map(|o| (o, trace)))
}

/// Simulate `n_paths` paths (indices `0..n_paths`), in parallel, with
/// bit-identical results for any thread count. Fails if more than 1% of
/// paths were discarded.
pub fn simulate_batch(
    eff: &EffectiveSde,
    cfg: &SimConfig,
    seed: u64,
    n_paths: usize,
) -> Result<BatchResult, SimError> {
    assert!(n_paths >= 1, "n_paths must be at least 1");
    let engine = Engine::new(eff, cfg)?;
    let results: Vec<Result<PathOutcome, PathError>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| engine.run(seed, i, None))
        .collect();
    let mut outcomes = Vec::with_capacity(n_paths);
    let mut discard_samples = Vec::new();
    let mut discarded = 0usize;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                discarded += 1;
                if discard_samples.len() < 8 {
                    discard_samples.push((i as u64, e.to_string()));
                }
            }
        }
    }
    if (discarded as f64) > 0.01 * (n_paths as f64) {
        return Err(SimError::TooManyDiscarded {
            discarded,
            total: n_paths,
            first_message: discard_samples
                .first()
                .map(|(_, m)| m.clone())
                .unwrap_or_default(),
        });
    }
    Ok(BatchResult {
        outcomes,
        n_requested: n_paths,
        discarded,
        discard_samples,
    })
}

/// Re-simulate selected path indices (used by barrier-robustness checks:
/// only paths whose running maximum crossed the lower barrier candidate can
/// change outcome).
pub fn resimulate_paths(
    eff: &EffectiveSde,
    cfg: &SimConfig,
    seed: u64,
    indices: &[u64],
) -> Result<Vec<(u64, Result<PathOutcome, PathError>)>, SimError> {
    let engine = Engine::new(eff, cfg)?;
    Ok(indices
        .par_iter()
        .map(|&i| (i, engine.run(seed, i, None)))
        .collect())
}
