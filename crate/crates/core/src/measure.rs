//! Measure changes: the drift adjustments under which the original dynamics
//! hold under the component measures `P^j`.
//!
//! Under `P^j` the `M` components pick up the extra drift
//! `beta^j_i(x) = Sigma_{i,j} sigma_ii(x) sigma_jj(x) x_i` and the volatility
//! component picks up `Sigma_{j,d+1} sigma_jj(x) sigma_bar(x)`. The density
//! process itself is never materialized; the measure change is realized
//! purely as a drift modification of the same diffusion.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::expr::{EvalCtx, EvalError, ExpressionAst};
use crate::model::{BetaConvention, SdeSystem};

/// Which measure the system is being simulated or analyzed under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasureTag {
    /// The original measure; `M` components are driftless.
    OriginalP,
    /// The measure generated by component `j` (1-based, `1..=d`).
    FoellmerP(usize),
}

impl MeasureTag {
    pub fn label(&self) -> String {
        match self {
            MeasureTag::OriginalP => "P".to_string(),
            MeasureTag::FoellmerP(j) => format!("P{j}"),
        }
    }
}

/// The extra drift vector added to the `P`-dynamics under `P^j`, evaluated
/// at one point. Components `1..=d` get `Sigma_{i,j} sigma_ii sigma_jj x_i`
/// (or `x_j` under the literal convention); component `d+1` gets
/// `Sigma_{j,d+1} sigma_jj sigma_bar`.
pub fn girsanov_drift(
    system: &SdeSystem,
    j: usize,
    state: &[f64],
    time: f64,
) -> Result<Vec<f64>, EvalError> {
    assert!(j >= 1 && j <= system.d(), "component index out of range");
    let ctx = EvalCtx::new(state, time);
    let d = system.d();
    let mut out = vec![0.0; d + 1];
    let sigma_jj = system.sigma_diag()[j - 1].evaluate_ctx(&ctx)?;
    for i in 1..=d {
        let rho = system.correlation().get(i - 1, j - 1);
        if rho == 0.0 {
            continue;
        }
        let sigma_ii = if i == j {
            sigma_jj
        } else {
            system.sigma_diag()[i - 1].evaluate_ctx(&ctx)?
        };
        let carrier = match system.beta_convention() {
            BetaConvention::Covariation => state[i - 1],
            BetaConvention::LiteralMj => state[j - 1],
        };
        out[i - 1] = rho * sigma_ii * sigma_jj * carrier;
    }
    let rho_v = system.correlation().get(j - 1, d);
    if rho_v != 0.0 {
        let sigma_bar = system.sigma_bar().evaluate_ctx(&ctx)?;
        out[d] = rho_v * sigma_jj * sigma_bar;
    }
    Ok(out)
}

/// A system together with the drift it carries under a chosen measure.
/// The diffusion part is the base system's, unchanged.
#[derive(Debug, Clone)]
pub struct EffectiveSde {
    system: Arc<SdeSystem>,
    measure: MeasureTag,
    /// Test-only override: replaces the whole drift vector by explicit
    /// expressions (used to drive deterministic blow-up systems through the
    /// simulator and the Lyapunov checks).
    custom_drift: Option<Arc<Vec<ExpressionAst>>>,
}

/// Build the system-with-drift for `measure`: zero drift on `M` components
/// and `b` on `v` under the original measure, the Girsanov adjustments added
/// under `FoellmerP(j)`.
pub fn effective_sde(system: Arc<SdeSystem>, measure: MeasureTag) -> EffectiveSde {
    if let MeasureTag::FoellmerP(j) = measure {
        assert!(
            j >= 1 && j <= system.d(),
            "component index {j} out of range 1..={}",
            system.d()
        );
    }
    EffectiveSde {
        system,
        measure,
        custom_drift: None,
    }
}

impl EffectiveSde {
    /// Replace the drift vector by explicit expressions (length `d + 1`),
    /// leaving the diffusion untouched.
    pub fn with_custom_drift(system: Arc<SdeSystem>, drift: Vec<ExpressionAst>) -> EffectiveSde {
        assert_eq!(drift.len(), system.dim(), "need one drift expression per state component");
        EffectiveSde {
            system,
            measure: MeasureTag::OriginalP,
            custom_drift: Some(Arc::new(drift)),
        }
    }

    pub fn system(&self) -> &SdeSystem {
        &self.system
    }

    pub fn system_arc(&self) -> Arc<SdeSystem> {
        Arc::clone(&self.system)
    }

    pub fn measure(&self) -> MeasureTag {
        self.measure
    }

    /// True when the total drift vector is identically zero by construction
    /// (original measure, `b == 0`, no override). The simulator uses this to
    /// skip its predictor-corrector drift stage.
    pub fn drift_is_identically_zero(&self) -> bool {
        self.custom_drift.is_none()
            && self.measure == MeasureTag::OriginalP
            && self.system.drift_b().is_literal_zero()
    }

    /// Total drift at `ctx` written into `out` (length `d + 1`).
    ///
    /// `sigmas` must hold the evaluated `sigma_11..sigma_dd` for this same
    /// `ctx` when the measure is `FoellmerP`; pass the values already
    /// computed for the diffusion so each coefficient is evaluated once per
    /// step. `alive`, when given, masks absorbed components: their drift
    /// entries are left at zero and their coefficient expressions are not
    /// evaluated (an absorbed `v` sits clamped at a barrier where `b` may be
    /// astronomically large; it must not leak into step-size control).
    #[inline]
    pub fn drift_with_sigmas(
        &self,
        ctx: &EvalCtx<'_>,
        sigmas: &[f64],
        alive: Option<&[bool]>,
        out: &mut [f64],
    ) -> Result<(), EvalError> {
        let d = self.system.d();
        debug_assert_eq!(out.len(), d + 1);
        let is_alive = |i: usize| alive.map_or(true, |a| a[i]);
        if let Some(custom) = &self.custom_drift {
            for (i, (o, e)) in out.iter_mut().zip(custom.iter()).enumerate() {
                *o = if is_alive(i) && !e.is_literal_zero() {
                    e.evaluate_ctx(ctx)?
                } else {
                    0.0
                };
            }
            return Ok(());
        }
        for o in out[..d].iter_mut() {
            *o = 0.0;
        }
        out[d] = if is_alive(d) && !self.system.drift_b().is_literal_zero() {
            self.system.drift_b().evaluate_ctx(ctx)?
        } else {
            0.0
        };
        if let MeasureTag::FoellmerP(j) = self.measure {
            let sigma_jj = sigmas[j - 1];
            for i in 1..=d {
                if !is_alive(i - 1) {
                    continue;
                }
                let rho = self.system.correlation().get(i - 1, j - 1);
                if rho == 0.0 {
                    continue;
                }
                let carrier = match self.system.beta_convention() {
                    BetaConvention::Covariation => ctx.state[i - 1],
                    BetaConvention::LiteralMj => ctx.state[j - 1],
                };
                out[i - 1] = rho * sigmas[i - 1] * sigma_jj * carrier;
            }
            let rho_v = self.system.correlation().get(j - 1, d);
            if rho_v != 0.0 && is_alive(d) {
                let sigma_bar = self.system.sigma_bar().evaluate_ctx(ctx)?;
                out[d] += rho_v * sigma_jj * sigma_bar;
            }
        }
        Ok(())
    }

    /// Total drift at a point, evaluating coefficients as needed.
    pub fn drift(&self, state: &[f64], time: f64) -> Result<Vec<f64>, EvalError> {
        let ctx = EvalCtx::new(state, time);
        let d = self.system.d();
        let mut sigmas = vec![0.0; d];
        if matches!(self.measure, MeasureTag::FoellmerP(_)) {
            for (s, e) in sigmas.iter_mut().zip(self.system.sigma_diag()) {
                *s = e.evaluate_ctx(&ctx)?;
            }
        }
        let mut out = vec![0.0; d + 1];
        self.drift_with_sigmas(&ctx, &sigmas, None, &mut out)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use approx::assert_relative_eq;

    use super::*;
    use crate::expr;
    use crate::model::{CorrelationMatrix, SystemSpec};

    fn example1_martingale() -> SdeSystem {
        SystemSpec::load(
            r#"{
                "d": 1,
                "T": 1.0,
                "correlation": [1.0, -1.0, -1.0, 1.0],
                "sigma_diag": ["(1/(2*x1^2)) * (|x|/2)^(1+eps)"],
                "sigma_bar": "(1/(2*x2)) * (|x|/2)^(1+eps)",
                "b": "-(1/(2*x2^2) + 1/(x1*x2)) * (|x|^2/2)^(1+eps)",
                "constants": {"eps": 0.5}
            }"#,
        )
        .unwrap()
    }

    fn example2_projected() -> SdeSystem {
        SystemSpec::load(
            r#"{
                "d": 2,
                "T": 1.0,
                "correlation": [1.0, 1.0, -1.0, 1.0, 1.0, 1.0, -1.0, 1.0, 1.0],
                "correlation_repair": "project",
                "sigma_diag": [
                    "(1/sqrt(3)) * (1/x1^2) * (|x|/2)^(1+eps)",
                    "(1/sqrt(3)) * (1/x2^2) * (|x|/2)^(1+eps)"
                ],
                "sigma_bar": "(1/sqrt(3)) * (1/x3) * (|x|/2)^(1+eps)",
                "b": "(|x|/2)^(2*eps) - (|x|/2)^(2+2*eps) * (5/x1^2 + 1/(3*x2^2) + 1/(3*x3^2))",
                "constants": {"eps": 0.5}
            }"#,
        )
        .unwrap()
    }

    /// Under P^1 the first component's drift is S f^2 and the volatility
    /// picks up rho sigma_bar f.
    #[test]
    fn stochastic_vol_drift_under_p1() {
        let sys = Arc::new(example1_martingale());
        let state = [1.3, 0.8];
        let f = sys.sigma_diag()[0].evaluate(&state, 0.0).unwrap();
        let sb = sys.sigma_bar().evaluate(&state, 0.0).unwrap();
        let b = sys.drift_b().evaluate(&state, 0.0).unwrap();
        let eff = effective_sde(Arc::clone(&sys), MeasureTag::FoellmerP(1));
        let drift = eff.drift(&state, 0.0).unwrap();
        assert_relative_eq!(drift[0], state[0] * f * f, max_relative = 1e-12);
        assert_relative_eq!(drift[1], b + (-1.0) * sb * f, max_relative = 1e-12);
    }

    #[test]
    fn original_measure_is_driftless_on_m() {
        let sys = Arc::new(example1_martingale());
        let eff = effective_sde(Arc::clone(&sys), MeasureTag::OriginalP);
        let drift = eff.drift(&[1.0, 1.0], 0.0).unwrap();
        assert_eq!(drift[0], 0.0);
        let b = sys.drift_b().evaluate(&[1.0, 1.0], 0.0).unwrap();
        assert_relative_eq!(drift[1], b);
    }

    /// Three-component system under P^2: with the projected correlation the
    /// cross couplings scale by the projected entries, while the own-component
    /// drift keeps the exact form N g^2.
    #[test]
    fn three_driver_drift_under_p2() {
        let sys = Arc::new(example2_projected());
        let state = [1.2, 0.9, 1.1];
        let f = sys.sigma_diag()[0].evaluate(&state, 0.0).unwrap();
        let g = sys.sigma_diag()[1].evaluate(&state, 0.0).unwrap();
        let sb = sys.sigma_bar().evaluate(&state, 0.0).unwrap();
        let b = sys.drift_b().evaluate(&state, 0.0).unwrap();
        let rho_sn = sys.correlation().get(0, 1);
        let rho_nv = sys.correlation().get(1, 2);
        let eff = effective_sde(Arc::clone(&sys), MeasureTag::FoellmerP(2));
        let drift = eff.drift(&state, 0.0).unwrap();
        assert_relative_eq!(drift[0], rho_sn * state[0] * g * f, max_relative = 1e-12);
        assert_relative_eq!(drift[1], state[1] * g * g, max_relative = 1e-12);
        assert_relative_eq!(drift[2], b + rho_nv * g * sb, max_relative = 1e-12);
    }

    #[test]
    fn uncorrelated_cross_component_drift_is_zero() {
        let dim = 3;
        let mk = |s: &str| expr::parse(s, dim, &BTreeMap::new()).unwrap();
        let sys = SdeSystem::new(
            2,
            vec![mk("1"), mk("1")],
            mk("0"),
            mk("0"),
            CorrelationMatrix::identity(3),
            vec![1.0, 2.0, 0.5],
            1.0,
        )
        .unwrap();
        let drift = girsanov_drift(&sys, 1, &[1.0, 2.0, 0.5], 0.0).unwrap();
        assert_eq!(drift[1], 0.0); // i = 2 != j with identity correlation
        assert_eq!(drift[2], 0.0);
        assert_relative_eq!(drift[0], 1.0); // i = j: x_j sigma_jj^2
    }

    /// For i = j both conventions coincide: extra drift is x_j sigma_jj^2.
    #[test]
    fn own_component_drift_both_conventions() {
        let mut rng: u64 = 0x9e3779b97f4a7c15;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            0.2 + 3.0 * ((rng >> 11) as f64 / (1u64 << 53) as f64)
        };
        let base = example1_martingale();
        for convention in [BetaConvention::Covariation, BetaConvention::LiteralMj] {
            let mut sys = base.clone();
            sys.set_beta_convention(convention);
            for _ in 0..1000 {
                let state = [next(), next()];
                let f = sys.sigma_diag()[0].evaluate(&state, 0.0).unwrap();
                let drift = girsanov_drift(&sys, 1, &state, 0.0).unwrap();
                assert_relative_eq!(drift[0], state[0] * f * f, max_relative = 1e-12);
            }
        }
    }

    /// Scaling the correlation entry scales the cross drift linearly.
    #[test]
    fn drift_linear_in_correlation_entry() {
        let dim = 3;
        let mk = |s: &str| expr::parse(s, dim, &BTreeMap::new()).unwrap();
        let built = |rho: f64| {
            SdeSystem::new(
                2,
                vec![mk("1"), mk("x2")],
                mk("0"),
                mk("0"),
                CorrelationMatrix::new(
                    3,
                    vec![1.0, rho, 0.0, rho, 1.0, 0.0, 0.0, 0.0, 1.0],
                )
                .unwrap(),
                vec![1.0, 2.0, 0.5],
                1.0,
            )
            .unwrap()
        };
        let state = [1.5, 2.5, 0.7];
        let d1 = girsanov_drift(&built(0.2), 2, &state, 0.0).unwrap();
        let d2 = girsanov_drift(&built(0.4), 2, &state, 0.0).unwrap();
        assert_relative_eq!(d2[0], 2.0 * d1[0], max_relative = 1e-12);
    }
}
