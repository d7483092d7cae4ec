//! Deterministic explosion and non-explosion criteria.
//!
//! Two families of tests, both applied to the system carrying the drift of
//! the measure under inspection:
//!
//! * Lyapunov generator inequalities: a nonnegative function `V` with
//!   `LV <= lambda V` and radial growth certifies non-explosion; a bounded
//!   `V` with `LV >= lambda V` plus a start/end gap certifies explosion with
//!   positive probability.
//! * Radial comparison functions: scalar envelopes `(A, B)` bounding the
//!   diffusion quadratic form and the trace/drift combination on spheres,
//!   combined with an improper-integral convergence test on
//!   `I = int C(u)^-1 (int C(s)/A(s) ds) du`, `C = exp(int B)`.
//!
//! All grid checks are sampled evidence: a verdict of
//! `SufficientNonExplosion` or `SufficientExplosion` means every sampled
//! inequality held with the stated margin, never a proof over the whole
//! space. The Monte Carlo estimators in [`crate::mc`] provide the
//! independent statistical check.

use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::expr::{DiffVar, EvalError, ExpressionAst};
use crate::measure::{effective_sde, EffectiveSde, MeasureTag};
use crate::model::SdeSystem;
use crate::sim::rng::inverse_normal_cdf;

/// Relative slack for the sampled inequalities; ties count as holding.
pub const INEQ_REL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CriterionError {
    #[error("test function `{name}`: {source}")]
    TestFunction {
        name: String,
        #[source]
        source: EvalError,
    },
    #[error("{0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Test function pair and the integral test
// ---------------------------------------------------------------------------

/// Candidate comparison functions `A`, `B` of one scalar variable `x1`,
/// defined on `[r, infinity)`.
#[derive(Debug, Clone)]
pub struct TestFunctionPair {
    pub a: ExpressionAst,
    pub b: ExpressionAst,
    /// Lower endpoint of the domain; defaults to 3/2.
    pub r: f64,
}

impl TestFunctionPair {
    pub fn new(a: ExpressionAst, b: ExpressionAst) -> Self {
        TestFunctionPair { a, b, r: 1.5 }
    }

    /// Sample positivity/continuity of `A` and `B` on `[r, 1e6]`; returns
    /// human-readable violations (empty list means no violation found).
    pub fn validate(&self) -> Vec<String> {
        let mut notes = Vec::new();
        let mut u = self.r.max(1e-6);
        while u <= 1e6 {
            for (name, e) in [("A", &self.a), ("B", &self.b)] {
                match e.evaluate(&[u], 0.0) {
                    Ok(v) if v > 0.0 => {}
                    Ok(v) => notes.push(format!("{name}({u:.4e}) = {v:.4e} is not positive")),
                    Err(err) => notes.push(format!("{name}({u:.4e}): {err}")),
                }
            }
            if notes.len() > 8 {
                notes.push("... further violations suppressed".into());
                return notes;
            }
            u *= 1.9;
        }
        notes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntegralClass {
    Divergent,
    Convergent,
    Undetermined,
}

/// Ladder values and the fitted tail exponent behind an integral verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegralDiagnostics {
    /// `(R, I(R))` at decade marks.
    pub ladder: Vec<(f64, f64)>,
    /// Fitted exponent `alpha` of the outer integrand (`I' ~ u^alpha`).
    pub tail_exponent: Option<f64>,
    /// Fraction of the total mass added over the last two rungs.
    pub last_rung_fraction: Option<f64>,
    pub note: Option<String>,
}

const DECADE_MARKS: [f64; 7] = [1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8];
const NODES_PER_DECADE: usize = 256;

/// Classify `int_r^inf C(u)^-1 (int_{1/2}^u C(s)/A(s) ds) du` as divergent
/// (non-explosion side), convergent (explosion side) or undetermined.
///
/// `C` is accumulated in log space (`log C = int B`) so growing `B` cannot
/// overflow. `I(R)` is evaluated on a geometric ladder; the verdict comes
/// from the fitted tail exponent of the decade increments: below -1.05 the
/// tail is summable (convergent), above -0.95 it is not (divergent), the
/// band between is reported as undetermined. Exhausted increments (last two
/// rungs below 1e-6 of the total) also count as convergent, covering tails
/// that decay too fast to fit.
pub fn integral_test(pair: &TestFunctionPair) -> (IntegralClass, IntegralDiagnostics) {
    let undetermined = |note: String| {
        (
            IntegralClass::Undetermined,
            IntegralDiagnostics {
                ladder: Vec::new(),
                tail_exponent: None,
                last_rung_fraction: None,
                note: Some(note),
            },
        )
    };
    if !(pair.r >= 0.5) {
        return undetermined(format!("lower endpoint r = {} must be >= 1/2", pair.r));
    }

    let u_start: f64 = 0.5;
    let u_end: f64 = 1.0001e8;
    let step = 10f64.powf(1.0 / NODES_PER_DECADE as f64);
    let n_nodes = ((u_end / u_start).log10() * NODES_PER_DECADE as f64).ceil() as usize + 1;

    let eval = |e: &ExpressionAst, u: f64| -> Result<f64, String> {
        e.evaluate(&[u], 0.0).map_err(|err| format!("at u = {u:.4e}: {err}"))
    };

    let mut ladder: Vec<(f64, f64)> = Vec::with_capacity(DECADE_MARKS.len());
    let mut mark_iter = DECADE_MARKS.iter().copied().peekable();

    let mut u = u_start;
    let mut log_c = 0.0f64; // log C(u_start) = 0
    let mut b_prev = match eval(&pair.b, u) {
        Ok(v) if v >= 0.0 && v.is_finite() => v,
        Ok(v) => return undetermined(format!("B({u:.3e}) = {v:.3e} is negative")),
        Err(m) => return undetermined(format!("B {m}")),
    };
    let a0 = match eval(&pair.a, u) {
        Ok(v) if v > 0.0 => v,
        Ok(v) => return undetermined(format!("A({u:.3e}) = {v:.3e} is not positive")),
        Err(m) => return undetermined(format!("A {m}")),
    };
    // log of the inner integrand C/A, and log of the inner integral J.
    let mut log_f_prev = log_c - a0.ln();
    let mut log_j = f64::NEG_INFINITY;
    let mut i_total = 0.0f64;
    let mut g_prev: Option<f64> = None; // outer integrand at previous node, once u >= r

    for _ in 0..n_nodes {
        let u_next = u * step;
        let du = u_next - u;
        let b_next = match eval(&pair.b, u_next) {
            Ok(v) if v >= 0.0 && v.is_finite() => v,
            Ok(v) => return undetermined(format!("B({u_next:.3e}) = {v:.3e} is negative")),
            Err(m) => return undetermined(format!("B {m}")),
        };
        log_c += 0.5 * (b_prev + b_next) * du;
        let a_next = match eval(&pair.a, u_next) {
            Ok(v) if v > 0.0 => v,
            Ok(v) => return undetermined(format!("A({u_next:.3e}) = {v:.3e} is not positive")),
            Err(m) => return undetermined(format!("A {m}")),
        };
        let log_f_next = log_c - a_next.ln();
        // J += (f_prev + f_next)/2 * du, in log space.
        let log_df = log_add_exp(log_f_prev, log_f_next) + (0.5 * du).ln();
        log_j = log_add_exp(log_j, log_df);

        // Outer integrand g = J / C.
        let g_next = (log_j - log_c).exp();
        if !g_next.is_finite() {
            return undetermined(format!("outer integrand non-finite at u = {u_next:.3e}"));
        }
        if u_next >= pair.r {
            if let Some(gp) = g_prev {
                i_total += 0.5 * (gp + g_next) * du;
            }
            g_prev = Some(g_next);
        }

        while let Some(&mark) = mark_iter.peek() {
            if u_next >= mark {
                ladder.push((mark, i_total));
                mark_iter.next();
            } else {
                break;
            }
        }

        u = u_next;
        b_prev = b_next;
        log_f_prev = log_f_next;
    }

    if ladder.len() < DECADE_MARKS.len() {
        ladder.push((u, i_total));
    }
    if !i_total.is_finite() {
        return undetermined("accumulated integral is non-finite".into());
    }

    // Decade increments and the fitted tail exponent alpha from
    // log10(dI_{k+1}/dI_k) = alpha + 1, averaged over the last ratios.
    let deltas: Vec<f64> = ladder.windows(2).map(|w| w[1].1 - w[0].1).collect();
    let mut ratios = Vec::new();
    for w in deltas.windows(2) {
        if w[0] > 0.0 && w[1] > 0.0 {
            ratios.push((w[1] / w[0]).log10());
        }
    }
    let tail_exponent = if ratios.len() >= 2 {
        let k = ratios.len().min(3);
        let avg = ratios[ratios.len() - k..].iter().sum::<f64>() / k as f64;
        Some(avg - 1.0)
    } else {
        None
    };
    let last_rung_fraction = if i_total > 0.0 && deltas.len() >= 2 {
        Some((deltas[deltas.len() - 1] + deltas[deltas.len() - 2]) / i_total)
    } else {
        None
    };

    let diag = IntegralDiagnostics {
        ladder,
        tail_exponent,
        last_rung_fraction,
        note: None,
    };
    let class = match tail_exponent {
        Some(alpha) if alpha < -1.05 => IntegralClass::Convergent,
        Some(alpha) if alpha > -0.95 => IntegralClass::Divergent,
        Some(_) => IntegralClass::Undetermined,
        // Increments exhausted before a fit was possible: the mass test
        // decides.
        None => match last_rung_fraction {
            Some(f) if f < 1e-6 => IntegralClass::Convergent,
            _ => IntegralClass::Undetermined,
        },
    };
    (class, diag)
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

// ---------------------------------------------------------------------------
// Shell sampling
// ---------------------------------------------------------------------------

/// Deterministic quasi-random sampling plan on spheres `|x| = rho`
/// intersected with `{x : x_i >= min_coordinate}`.
#[derive(Debug, Clone)]
pub struct ShellSampling {
    pub radii: Vec<f64>,
    pub points_per_shell: usize,
    pub min_coordinate: f64,
    pub time_samples: Vec<f64>,
}

impl ShellSampling {
    /// Default plan for the comparison-function bounds: shells log-spaced
    /// from `sqrt(2 r)` to 1e3, 256 points each, restricted to the region
    /// with every coordinate at least 1.
    pub fn for_bounds(r: f64) -> Self {
        ShellSampling {
            radii: log_spaced((2.0 * r).sqrt(), 1e3, 12),
            points_per_shell: 256,
            min_coordinate: 1.0,
            time_samples: vec![0.0],
        }
    }

    /// Default plan for Lyapunov checks: shells from 0.5 to `r_max`, full
    /// positive-orthant directions without the coordinate floor.
    pub fn for_lyapunov(r_max: f64, horizon: f64) -> Self {
        let mut radii = log_spaced(0.5, r_max, 14);
        radii.push(10.0);
        radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ShellSampling {
            radii,
            points_per_shell: 64,
            min_coordinate: 0.0,
            time_samples: vec![0.0, 0.5 * horizon, horizon],
        }
    }

    /// Points on the shell of radius `rho`; may be fewer than requested (or
    /// empty) when the admissible cap of the sphere is small.
    pub fn points(&self, dim: usize, rho: f64) -> Vec<Vec<f64>> {
        let mut pts = Vec::with_capacity(self.points_per_shell);
        if self.min_coordinate > 0.0 && rho < self.min_coordinate * (dim as f64).sqrt() {
            return pts; // the constraint set is empty on this shell
        }
        let bases = [2u64, 3, 5, 7, 11, 13, 17, 19];
        let mut attempts = 0usize;
        let max_attempts = self.points_per_shell * 64 + 256;
        let mut k = 1u64;
        while pts.len() < self.points_per_shell && attempts < max_attempts {
            attempts += 1;
            let mut dir = vec![0.0; dim];
            let mut norm2 = 0.0;
            for (i, d) in dir.iter_mut().enumerate() {
                let u = halton(k, bases[i % bases.len()]);
                // Positive-orthant direction via folded gaussians.
                let z = inverse_normal_cdf(u).abs().max(1e-9);
                *d = z;
                norm2 += z * z;
            }
            k += 1;
            let norm = norm2.sqrt();
            let mut ok = true;
            for d in dir.iter_mut() {
                *d = *d / norm * rho;
                if *d < self.min_coordinate {
                    ok = false;
                }
            }
            if ok {
                pts.push(dir);
            }
        }
        if pts.is_empty() && rho >= self.min_coordinate * (dim as f64).sqrt() {
            // Keep at least the balanced corner direction.
            let c = rho / (dim as f64).sqrt();
            if c >= self.min_coordinate {
                pts.push(vec![c; dim]);
            }
        }
        pts
    }
}

fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let ratio = (hi / lo).powf(1.0 / (n - 1) as f64);
    (0..n).map(|k| lo * ratio.powi(k as i32)).collect()
}

/// Halton low-discrepancy sequence member `index` in base `base`, in (0,1).
fn halton(mut index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r.clamp(f64::MIN_POSITIVE, 1.0 - 1e-12)
}

// ---------------------------------------------------------------------------
// Comparison-function bound checks
// ---------------------------------------------------------------------------

/// Which direction of the envelope inequalities to verify.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Non-explosion: `A(rho^2/2) >= <x, a x>` and
    /// `<x, a x> B(rho^2/2) >= Trace(a) + 2<x, b_total>`.
    NonExplosion,
    /// Explosion: both inequalities reversed, plus a nondegeneracy
    /// requirement on `a`.
    Explosion,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShellMargins {
    pub rho: f64,
    pub points: usize,
    pub skipped: usize,
    /// Worst signed slack of the `A` bound on this shell (>= 0 means holds).
    pub a_margin: f64,
    /// Worst signed slack of the trace bound on this shell.
    pub trace_margin: f64,
    /// Smallest sampled directional ellipticity `<theta, a theta>`.
    pub min_ellipticity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub side: Side,
    pub shells: Vec<ShellMargins>,
    pub worst_a_margin: f64,
    pub worst_trace_margin: f64,
    /// Example violating points (state, which bound, margin), capped.
    pub violations: Vec<(Vec<f64>, String, f64)>,
    pub samples_checked: usize,
    pub samples_skipped: usize,
    /// Both inequalities held at every sampled point.
    pub holds: bool,
    /// Explosion side only: sampled ellipticity stayed positive and drift
    /// stayed bounded on every shell.
    pub nondegenerate: Option<bool>,
}

/// Check the envelope inequalities of `side` for `pair` against the
/// system-with-drift on the sampled shells. The drift side of the trace
/// inequality uses the full effective drift, so under a component measure it
/// contains the measure-change terms.
pub fn ab_bound_check(
    eff: &EffectiveSde,
    pair: &TestFunctionPair,
    side: Side,
    sampling: &ShellSampling,
) -> Result<BoundReport, CriterionError> {
    let sys = eff.system();
    let dim = sys.dim();
    let mut shells = Vec::new();
    let mut violations: Vec<(Vec<f64>, String, f64)> = Vec::new();
    let mut checked = 0usize;
    let mut skipped_total = 0usize;
    let mut worst_a = f64::INFINITY;
    let mut worst_trace = f64::INFINITY;
    let mut holds = true;
    let mut nondegenerate = true;

    for &rho in &sampling.radii {
        let arg = 0.5 * rho * rho;
        if arg < pair.r {
            continue;
        }
        let a_env = pair
            .a
            .evaluate(&[arg], 0.0)
            .map_err(|source| CriterionError::TestFunction {
                name: format!("A at {arg:.4e}"),
                source,
            })?;
        let b_env = pair
            .b
            .evaluate(&[arg], 0.0)
            .map_err(|source| CriterionError::TestFunction {
                name: format!("B at {arg:.4e}"),
                source,
            })?;
        let pts = sampling.points(dim, rho);
        let mut skipped = 0usize;
        let mut a_margin = f64::INFINITY;
        let mut trace_margin = f64::INFINITY;
        let mut min_ellipticity = f64::INFINITY;
        let mut n_ok = 0usize;
        for x in &pts {
            let time = sampling.time_samples.first().copied().unwrap_or(0.0);
            let (quad, trace, drift_term, ellipticity) =
                match shell_quantities(eff, x, time, dim) {
                    Ok(v) => v,
                    Err(_) => {
                        skipped += 1;
                        continue;
                    }
                };
            n_ok += 1;
            min_ellipticity = min_ellipticity.min(ellipticity);
            let lhs_trace = trace + drift_term;
            let (am, tm) = match side {
                Side::NonExplosion => (
                    a_env - quad,
                    quad * b_env - lhs_trace,
                ),
                Side::Explosion => (
                    quad - a_env,
                    lhs_trace - quad * b_env,
                ),
            };
            let a_tol = INEQ_REL_TOL * (1.0 + a_env.abs().max(quad));
            let t_tol = INEQ_REL_TOL * (1.0 + lhs_trace.abs().max(quad * b_env));
            if am < -a_tol {
                holds = false;
                if violations.len() < 16 {
                    violations.push((x.clone(), "A-bound".into(), am));
                }
            }
            if tm < -t_tol {
                holds = false;
                if violations.len() < 16 {
                    violations.push((x.clone(), "trace-bound".into(), tm));
                }
            }
            a_margin = a_margin.min(am);
            trace_margin = trace_margin.min(tm);
        }
        checked += n_ok;
        skipped_total += skipped;
        if n_ok > 0 {
            worst_a = worst_a.min(a_margin);
            worst_trace = worst_trace.min(trace_margin);
            if min_ellipticity <= 1e-12 {
                nondegenerate = false;
            }
            shells.push(ShellMargins {
                rho,
                points: n_ok,
                skipped,
                a_margin,
                trace_margin,
                min_ellipticity,
            });
        }
    }
    if checked == 0 {
        holds = false;
    }
    Ok(BoundReport {
        side,
        shells,
        worst_a_margin: worst_a,
        worst_trace_margin: worst_trace,
        violations,
        samples_checked: checked,
        samples_skipped: skipped_total,
        holds,
        nondegenerate: match side {
            Side::Explosion => Some(nondegenerate),
            Side::NonExplosion => None,
        },
    })
}

/// Quadratic form, trace, radial drift term and a directional ellipticity
/// sample at one point.
fn shell_quantities(
    eff: &EffectiveSde,
    x: &[f64],
    time: f64,
    dim: usize,
) -> Result<(f64, f64, f64, f64), EvalError> {
    let sys = eff.system();
    let a = sys.diffusion_matrix(x, time)?;
    let drift = eff.drift(x, time)?;
    let mut quad = 0.0;
    let mut trace = 0.0;
    let mut drift_term = 0.0;
    for i in 0..dim {
        trace += a[(i, i)];
        drift_term += 2.0 * x[i] * drift[i];
        for j in 0..dim {
            quad += x[i] * a[(i, j)] * x[j];
        }
    }
    // Directional ellipticity along a fixed probe direction that is not
    // axis-aligned (rank deficiencies show up along mixtures).
    let mut theta = vec![0.0; dim];
    let mut n2 = 0.0;
    for (i, th) in theta.iter_mut().enumerate() {
        *th = if i % 2 == 0 { 1.0 } else { -1.0 } + 0.1 * (i as f64 + 1.0);
        n2 += *th * *th;
    }
    let n = n2.sqrt();
    let mut ell = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            ell += theta[i] / n * a[(i, j)] * theta[j] / n;
        }
    }
    // Also probe the axes; the minimum over probes is reported.
    for i in 0..dim {
        ell = ell.min(a[(i, i)]);
    }
    Ok((quad.max(0.0), trace, drift_term, ell))
}

// ---------------------------------------------------------------------------
// Generator and Lyapunov checks
// ---------------------------------------------------------------------------

/// Apply the extended generator to `V(t, x)` at one point:
/// `LV = dV/dt + 1/2 sum a_ij d2V/dx_i dx_j + sum b_i dV/dx_i`,
/// with derivatives by finite differences and `b` the effective drift.
pub fn apply_generator(
    eff: &EffectiveSde,
    v: &ExpressionAst,
    state: &[f64],
    time: f64,
) -> Result<f64, EvalError> {
    let dim = eff.system().dim();
    let a = eff.system().diffusion_matrix(state, time)?;
    let drift = eff.drift(state, time)?;
    let mut lv = v.partial(state, time, DiffVar::Time, 1)?;
    for i in 0..dim {
        if drift[i] != 0.0 {
            lv += drift[i] * v.partial(state, time, DiffVar::State(i), 1)?;
        }
        if a[(i, i)] != 0.0 {
            lv += 0.5 * a[(i, i)] * v.partial(state, time, DiffVar::State(i), 2)?;
        }
        for j in (i + 1)..dim {
            if a[(i, j)] != 0.0 {
                lv += a[(i, j)] * v.mixed_partial(state, time, i, j)?;
            }
        }
    }
    Ok(lv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    SufficientNonExplosion,
    SufficientExplosion,
    Inconclusive,
}

/// Outcome of one criterion run. A sufficient verdict means every sampled
/// inequality held; `Inconclusive` carries the worst margin found.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriterionVerdict {
    pub verdict: Verdict,
    pub which_theorem: String,
    /// Worst signed slack across all sampled inequalities (>= 0 held).
    pub inequality_margin: f64,
    pub integral_classification: Option<IntegralClass>,
    pub samples_checked: usize,
    pub notes: Vec<String>,
}

/// Non-explosion via a Lyapunov function: `V >= 0`, `LV - lambda V <= 0`
/// on the sampled grid, and radial growth of the shell minima.
pub fn lyapunov_nonexplosion_check(
    eff: &EffectiveSde,
    v: &ExpressionAst,
    lambda: f64,
    sampling: &ShellSampling,
) -> Result<CriterionVerdict, CriterionError> {
    if !(lambda > 0.0) {
        return Err(CriterionError::Invalid("lambda must be positive".into()));
    }
    let dim = eff.system().dim();
    let mut worst = f64::INFINITY;
    let mut checked = 0usize;
    let mut notes = Vec::new();
    let mut shell_minima: Vec<(f64, f64)> = Vec::new();
    let mut ineq_ok = true;

    for &rho in &sampling.radii {
        let pts = sampling.points(dim, rho);
        let mut v_min = f64::INFINITY;
        let mut any = false;
        for x in &pts {
            for &t in &sampling.time_samples {
                let vx = match v.evaluate(x, t) {
                    Ok(val) => val,
                    Err(_) => continue,
                };
                if vx < 0.0 {
                    notes.push(format!("V < 0 at |x| = {rho:.3e}"));
                    ineq_ok = false;
                }
                v_min = v_min.min(vx);
                let lv = match apply_generator(eff, v, x, t) {
                    Ok(val) => val,
                    Err(_) => continue,
                };
                any = true;
                checked += 1;
                let slack = lambda * vx - lv;
                let tol = 1e-9 * (1.0 + lv.abs());
                if slack < -tol {
                    ineq_ok = false;
                }
                worst = worst.min(slack);
            }
        }
        if any {
            shell_minima.push((rho, v_min));
        }
    }

    // Growth: shell minima nondecreasing and the last at least 10x the
    // minimum near radius 10.
    let mut growth_ok = shell_minima.len() >= 3;
    for w in shell_minima.windows(2) {
        if w[1].1 < w[0].1 * (1.0 - 1e-9) {
            growth_ok = false;
            notes.push(format!(
                "shell minimum decreases from |x| = {:.3e} to {:.3e}",
                w[0].0, w[1].0
            ));
            break;
        }
    }
    if growth_ok {
        let near_ten = shell_minima
            .iter()
            .min_by(|a, b| {
                (a.0 - 10.0)
                    .abs()
                    .partial_cmp(&(b.0 - 10.0).abs())
                    .unwrap()
            })
            .map(|&(_, m)| m)
            .unwrap_or(f64::INFINITY);
        let last = shell_minima.last().map(|&(_, m)| m).unwrap_or(0.0);
        if !(last >= 10.0 * near_ten) {
            growth_ok = false;
            notes.push(format!(
                "growth condition not met: min V = {last:.3e} at the outer shell vs \
                 {near_ten:.3e} near radius 10"
            ));
        }
    }

    let verdict = if ineq_ok && growth_ok && checked > 0 {
        Verdict::SufficientNonExplosion
    } else {
        Verdict::Inconclusive
    };
    Ok(CriterionVerdict {
        verdict,
        which_theorem: "lyapunov-nonexplosion (sampled evidence)".into(),
        inequality_margin: worst,
        integral_classification: None,
        samples_checked: checked,
        notes,
    })
}

/// Explosion via a bounded Lyapunov function: `LV >= lambda V` on the grid
/// and `V(0, x0) > e^{-lambda T} sup_x V(T, x)`.
pub fn lyapunov_explosion_check(
    eff: &EffectiveSde,
    v: &ExpressionAst,
    lambda: f64,
    sampling: &ShellSampling,
) -> Result<CriterionVerdict, CriterionError> {
    if !(lambda > 0.0) {
        return Err(CriterionError::Invalid("lambda must be positive".into()));
    }
    let sys = eff.system();
    let dim = sys.dim();
    let horizon = sys.horizon();
    let mut worst = f64::INFINITY;
    let mut checked = 0usize;
    let mut notes = Vec::new();
    let mut ineq_ok = true;
    let mut sup_v_total = f64::NEG_INFINITY;
    let mut sup_v_terminal = f64::NEG_INFINITY;

    for &rho in &sampling.radii {
        for x in sampling.points(dim, rho) {
            for &t in &sampling.time_samples {
                let vx = match v.evaluate(&x, t) {
                    Ok(val) => val,
                    Err(_) => continue,
                };
                sup_v_total = sup_v_total.max(vx);
                let lv = match apply_generator(eff, v, &x, t) {
                    Ok(val) => val,
                    Err(_) => continue,
                };
                checked += 1;
                let slack = lv - lambda * vx;
                let tol = 1e-9 * (1.0 + lv.abs());
                if slack < -tol {
                    ineq_ok = false;
                }
                worst = worst.min(slack);
            }
            if let Ok(vt) = v.evaluate(&x, horizon) {
                sup_v_terminal = sup_v_terminal.max(vt);
            }
        }
    }
    if !sup_v_total.is_finite() {
        notes.push("V unbounded or unevaluable on the grid".into());
        ineq_ok = false;
    } else {
        notes.push(format!("sampled sup V = {sup_v_total:.6e}"));
    }
    let v0 = v
        .evaluate(sys.initial_state(), 0.0)
        .map_err(|source| CriterionError::TestFunction {
            name: "V at the initial state".into(),
            source,
        })?;
    let gate = v0 > (-lambda * horizon).exp() * sup_v_terminal;
    if !gate {
        notes.push(format!(
            "gate failed: V(0, x0) = {v0:.6e} vs e^(-lambda T) sup V(T, .) = {:.6e}",
            (-lambda * horizon).exp() * sup_v_terminal
        ));
    }
    let verdict = if ineq_ok && gate && checked > 0 {
        Verdict::SufficientExplosion
    } else {
        Verdict::Inconclusive
    };
    Ok(CriterionVerdict {
        verdict,
        which_theorem: "lyapunov-explosion (sampled evidence)".into(),
        inequality_margin: worst,
        integral_classification: None,
        samples_checked: checked,
        notes,
    })
}

// ---------------------------------------------------------------------------
// Per-component classification
// ---------------------------------------------------------------------------

/// What the deterministic checks say about one component's martingale
/// property (through the explosion question under its own measure).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnalyticEvidence {
    Martingale,
    StrictLocal,
    Inconclusive,
}

/// Candidate criterion for one component.
#[derive(Debug, Clone)]
pub struct ComponentCriterion {
    pub pair: TestFunctionPair,
    pub side: Side,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentAnalysis {
    /// 1-based component index.
    pub component: usize,
    pub side: Side,
    pub verdict: CriterionVerdict,
    pub evidence: AnalyticEvidence,
    pub bounds: BoundReport,
    pub integral: IntegralDiagnostics,
}

/// Run the envelope + integral criteria for each component `j` against its
/// own measure `P^j` and map the outcomes to per-component evidence:
/// bounds holding with a divergent integral certify non-explosion
/// (martingale evidence); bounds holding with a convergent integral and a
/// nondegenerate diffusion certify explosion (strict-local evidence);
/// anything else is inconclusive.
pub fn theorem_main_classify(
    system: &Arc<SdeSystem>,
    criteria: &[ComponentCriterion],
) -> Result<Vec<ComponentAnalysis>, CriterionError> {
    if criteria.len() != system.d() {
        return Err(CriterionError::Invalid(format!(
            "need one criterion per component: d = {}, got {}",
            system.d(),
            criteria.len()
        )));
    }
    let mut out = Vec::with_capacity(criteria.len());
    for (idx, crit) in criteria.iter().enumerate() {
        let j = idx + 1;
        let eff = effective_sde(Arc::clone(system), MeasureTag::FoellmerP(j));
        let sampling = ShellSampling::for_bounds(crit.pair.r);
        let bounds = ab_bound_check(&eff, &crit.pair, crit.side, &sampling)?;
        let (iclass, idiag) = integral_test(&crit.pair);
        let mut notes = crit.pair.validate();
        let (verdict, evidence) = match crit.side {
            Side::NonExplosion => {
                if bounds.holds && iclass == IntegralClass::Divergent {
                    (Verdict::SufficientNonExplosion, AnalyticEvidence::Martingale)
                } else {
                    (Verdict::Inconclusive, AnalyticEvidence::Inconclusive)
                }
            }
            Side::Explosion => {
                let nondeg = bounds.nondegenerate.unwrap_or(false);
                if !nondeg {
                    notes.push(
                        "nondegeneracy failed: sampled directional ellipticity reaches zero"
                            .into(),
                    );
                }
                if bounds.holds && nondeg && iclass == IntegralClass::Convergent {
                    (Verdict::SufficientExplosion, AnalyticEvidence::StrictLocal)
                } else {
                    (Verdict::Inconclusive, AnalyticEvidence::Inconclusive)
                }
            }
        };
        let worst = bounds.worst_a_margin.min(bounds.worst_trace_margin);
        out.push(ComponentAnalysis {
            component: j,
            side: crit.side,
            verdict: CriterionVerdict {
                verdict,
                which_theorem: match crit.side {
                    Side::NonExplosion => {
                        "radial-comparison non-explosion under the component measure (sampled)"
                            .into()
                    }
                    Side::Explosion => {
                        "radial-comparison explosion under the component measure (sampled)".into()
                    }
                },
                inequality_margin: worst,
                integral_classification: Some(iclass),
                samples_checked: bounds.samples_checked,
                notes,
            },
            evidence,
            bounds,
            integral: idiag,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
