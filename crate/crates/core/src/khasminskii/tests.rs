use std::collections::BTreeMap;
use std::sync::Arc;

use approx::assert_relative_eq;

use crate::expr;
use crate::measure::{effective_sde, EffectiveSde, MeasureTag};
use crate::model::tests::simple_system;
use crate::model::{CorrelationMatrix, SdeSystem};

use super::*;

fn mk1(src: &str) -> expr::ExpressionAst {
    expr::parse(src, 1, &BTreeMap::new()).unwrap()
}

fn mk(src: &str, dim: usize) -> expr::ExpressionAst {
    expr::parse(src, dim, &BTreeMap::new()).unwrap()
}

fn pair(p: f64, q: f64) -> TestFunctionPair {
    let a = mk1(&format!("x1^{p}"));
    let b = if q == 0.0 {
        mk1("0")
    } else {
        mk1(&format!("{q}/x1"))
    };
    TestFunctionPair::new(a, b)
}

/// Closed-form oracle for the power family A = u^p, B = q/u: with
/// C(u) ~ u^q the inner integral behaves like u^(q-p+1) (const below the
/// crossover), so the outer integrand decays like u^(1-p) when q-p+1 >= 0
/// and like u^(-q) otherwise; the integral converges iff that exponent is
/// below -1. (Independent of the adaptive ladder implementation.)
fn oracle(p: f64, q: f64) -> IntegralClass {
    let alpha = if q - p + 1.0 >= 0.0 { 1.0 - p } else { -q };
    if alpha < -1.0 {
        IntegralClass::Convergent
    } else {
        IntegralClass::Divergent
    }
}

/// The 20-case power-family suite; exponents chosen away from the exact
/// alpha = -1 boundary (the one genuinely logarithmic family member is
/// exercised separately below).
pub(crate) const POWER_SUITE: [(f64, f64); 20] = [
    (0.5, 0.0),
    (1.0, 0.0),
    (3.0, 0.0),
    (3.5, 0.0),
    (0.5, 0.3),
    (1.5, 0.3),
    (2.0, 0.3),
    (0.5, 1.0),
    (1.5, 1.0),
    (1.5, 2.0),
    (2.5, 2.0),
    (3.5, 2.0),
    (4.5, 2.0),
    (1.8, 3.0),
    (2.5, 3.0),
    (4.0, 3.0),
    (5.0, 3.0),
    (2.5, 4.0),
    (6.0, 4.0),
    (7.0, 4.0),
];

#[test]
fn integral_matches_power_family_oracle() {
    for (p, q) in POWER_SUITE {
        let (got, diag) = integral_test(&pair(p, q));
        let want = oracle(p, q);
        assert_eq!(
            got, want,
            "A = u^{p}, B = {q}/u: got {got:?}, oracle {want:?}, tail {:?}",
            diag.tail_exponent
        );
    }
}

#[test]
fn integral_spec_examples() {
    // Non-explosion choice of the two-dimensional worked system.
    let (c, _) = integral_test(&pair(1.5, 1.0));
    assert_eq!(c, IntegralClass::Divergent);
    // Larger envelope pair: convergent in closed form.
    let (c, _) = integral_test(&pair(2.5, 2.0));
    assert_eq!(c, IntegralClass::Convergent);
    // B identically zero: C = 1 and the outer integrand tends to a constant.
    let (c, _) = integral_test(&TestFunctionPair::new(mk1("x1^2"), mk1("0")));
    assert_eq!(c, IntegralClass::Divergent);
}

/// A = u^(2+eps) with B = 1/u sits exactly on the logarithmic boundary
/// (outer integrand ~ 1/u): the ladder must refuse to call it.
#[test]
fn integral_boundary_case_is_undetermined() {
    let (c, diag) = integral_test(&pair(2.5, 1.0));
    assert_eq!(c, IntegralClass::Undetermined);
    let alpha = diag.tail_exponent.unwrap();
    assert!((alpha + 1.0).abs() < 0.05, "tail exponent {alpha}");
}

#[test]
fn integral_domain_error_is_undetermined() {
    let p = TestFunctionPair::new(mk1("log(x1 - 10)"), mk1("1/x1"));
    let (c, diag) = integral_test(&p);
    assert_eq!(c, IntegralClass::Undetermined);
    assert!(diag.note.is_some());
}

#[test]
fn pair_validation_reports_nonpositive() {
    let p = TestFunctionPair::new(mk1("x1 - 100"), mk1("1/x1"));
    let notes = p.validate();
    assert!(!notes.is_empty());
    assert!(notes[0].contains("not positive"));
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// Unit-diffusion system: sigma = 1/x1 makes D = I, so a = Sigma.
fn unit_diffusion() -> EffectiveSde {
    let sys = simple_system(&["1/x1"], "1", "0", CorrelationMatrix::identity(2));
    effective_sde(Arc::new(sys), MeasureTag::OriginalP)
}

#[test]
fn generator_laplacian_of_square_norm() {
    let eff = unit_diffusion();
    let v = mk("1 + x1^2 + x2^2", 2);
    let lv = apply_generator(&eff, &v, &[1.0, 1.0], 0.0).unwrap();
    assert_relative_eq!(lv, 2.0, epsilon = 1e-4);
}

#[test]
fn generator_pure_time_derivative() {
    let eff = unit_diffusion();
    let v = mk("t", 2);
    let lv = apply_generator(&eff, &v, &[2.0, -1.0], 0.3).unwrap();
    assert_relative_eq!(lv, 1.0, epsilon = 1e-7);
}

/// V = x1 under the first component's measure with sigma_11 = 1: the
/// generator reduces to the measure-change drift x1.
#[test]
fn generator_picks_up_measure_drift() {
    let sys = simple_system(&["1"], "0", "0", CorrelationMatrix::identity(2));
    let eff = effective_sde(Arc::new(sys), MeasureTag::FoellmerP(1));
    let v = mk("x1", 2);
    for x in [0.5, 1.0, 3.0] {
        let lv = apply_generator(&eff, &v, &[x, 1.0], 0.0).unwrap();
        assert_relative_eq!(lv, x, epsilon = 1e-6);
    }
}

/// On quadratic V = |x|^2 the generator closed form is
/// trace(a) + 2 <x, b>; finite differences must reproduce it to 1e-4
/// relative at random states.
#[test]
fn generator_quadratic_closed_form() {
    let sys = Arc::new(
        crate::model::SystemSpec::load(
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
        .unwrap(),
    );
    let eff = effective_sde(Arc::clone(&sys), MeasureTag::FoellmerP(1));
    let v = mk("x1^2 + x2^2", 2);
    let mut rng: u64 = 99;
    let mut next = move || {
        rng ^= rng << 13;
        rng ^= rng >> 7;
        rng ^= rng << 17;
        0.3 + 4.0 * ((rng >> 11) as f64 / (1u64 << 53) as f64)
    };
    for _ in 0..100 {
        let state = [next(), next()];
        let a = sys.diffusion_matrix(&state, 0.0).unwrap();
        let b = eff.drift(&state, 0.0).unwrap();
        let expect =
            a[(0, 0)] + a[(1, 1)] + 2.0 * (state[0] * b[0] + state[1] * b[1]);
        let lv = apply_generator(&eff, &v, &state, 0.0).unwrap();
        let scale = expect.abs().max(1.0);
        assert!(
            (lv - expect).abs() / scale < 1e-4,
            "state {state:?}: lv {lv} vs {expect}"
        );
    }
}

// ---------------------------------------------------------------------------
// Lyapunov checks
// ---------------------------------------------------------------------------

fn ode_blowup_system(horizon: f64) -> EffectiveSde {
    let sys = SdeSystem::new(
        1,
        vec![mk("0", 2)],
        mk("0", 2),
        mk("0", 2),
        CorrelationMatrix::identity(2),
        vec![1.0, 1.0],
        horizon,
    )
    .unwrap();
    EffectiveSde::with_custom_drift(Arc::new(sys), vec![mk("x1^2", 2), mk("0", 2)])
}

#[test]
fn lyapunov_accepts_brownian_system() {
    let eff = unit_diffusion();
    let v = mk("1 + |x|^2", 2);
    let sampling = ShellSampling::for_lyapunov(1e3, 1.0);
    let verdict = lyapunov_nonexplosion_check(&eff, &v, 2.0, &sampling).unwrap();
    assert_eq!(verdict.verdict, Verdict::SufficientNonExplosion, "{verdict:?}");
    assert!(verdict.inequality_margin >= -1e-9);
}

#[test]
fn lyapunov_rejects_bounded_v() {
    let eff = unit_diffusion();
    let v = mk("1", 2);
    let sampling = ShellSampling::for_lyapunov(1e3, 1.0);
    let verdict = lyapunov_nonexplosion_check(&eff, &v, 2.0, &sampling).unwrap();
    assert_eq!(verdict.verdict, Verdict::Inconclusive);
}

#[test]
fn lyapunov_refuses_blowup_system() {
    let eff = ode_blowup_system(1.0);
    let v = mk("1 + |x|^2", 2);
    let sampling = ShellSampling::for_lyapunov(1e3, 1.0);
    let verdict = lyapunov_nonexplosion_check(&eff, &v, 2.0, &sampling).unwrap();
    assert_eq!(verdict.verdict, Verdict::Inconclusive);
    assert!(verdict.inequality_margin < 0.0);
}

#[test]
fn explosion_check_constant_v_inconclusive() {
    let eff = unit_diffusion();
    let v = mk("1", 2);
    let sampling = ShellSampling::for_lyapunov(1e2, 1.0);
    let verdict = lyapunov_explosion_check(&eff, &v, 1.0, &sampling).unwrap();
    assert_eq!(verdict.verdict, Verdict::Inconclusive);
}

/// Gate violated by construction: V = e^t has LV = lambda V exactly at
/// lambda = 1 but V(0, x0) equals e^{-T} sup V(T, .), so the strict gate
/// fails regardless of the generator inequality.
#[test]
fn explosion_check_gate_condition() {
    let eff = unit_diffusion();
    let v = mk("exp(t)", 2);
    let sampling = ShellSampling::for_lyapunov(1e2, 1.0);
    let verdict = lyapunov_explosion_check(&eff, &v, 1.0, &sampling).unwrap();
    assert_eq!(verdict.verdict, Verdict::Inconclusive);
    assert!(verdict.inequality_margin >= -1e-9, "{verdict:?}");
}

/// The deterministic blow-up system with a bounded V that certifies
/// explosion: V = 2 - 1/x1, LV = 1 >= lambda V on the grid, and the
/// start/end gate holds for T = 2.
#[test]
fn explosion_check_accepts_blowup_system() {
    let eff = ode_blowup_system(2.0);
    let v = mk("2 - 1/x1", 2);
    let sampling = ShellSampling {
        radii: log_spaced(1.0, 1e3, 10),
        points_per_shell: 64,
        min_coordinate: 0.01,
        time_samples: vec![0.0, 1.0, 2.0],
    };
    let verdict = lyapunov_explosion_check(&eff, &v, 0.4, &sampling).unwrap();
    assert_eq!(verdict.verdict, Verdict::SufficientExplosion, "{verdict:?}");
}

// ---------------------------------------------------------------------------
// Bound checks and per-component classification
// ---------------------------------------------------------------------------

/// Exact-equality case: a = I on the constrained shells, A(u) = 2u.
#[test]
fn bounds_equality_case_holds() {
    let eff = unit_diffusion();
    let pair = TestFunctionPair::new(mk1("2*x1"), mk1("4/x1"));
    let sampling = ShellSampling::for_bounds(pair.r);
    let report = ab_bound_check(&eff, &pair, Side::NonExplosion, &sampling).unwrap();
    assert!(report.holds, "worst margins: {} / {}", report.worst_a_margin, report.worst_trace_margin);
    assert!(report.worst_a_margin.abs() < 1e-6);
}

/// Degenerate diffusion fails the lower envelope at every point.
#[test]
fn bounds_zero_diffusion_fails_lower() {
    let sys = simple_system(&["0"], "0", "0", CorrelationMatrix::identity(2));
    let eff = effective_sde(Arc::new(sys), MeasureTag::OriginalP);
    let pair = TestFunctionPair::new(mk1("x1"), mk1("1/x1"));
    let sampling = ShellSampling::for_bounds(pair.r);
    let report = ab_bound_check(&eff, &pair, Side::Explosion, &sampling).unwrap();
    assert!(!report.holds);
    assert!(!report.violations.is_empty());
    assert_eq!(report.nondegenerate, Some(false));
}

/// Stochastic-volatility worked system: the run must produce a
/// per-shell margin report (internal consistency, not a pass).
#[test]
fn bounds_report_on_worked_system() {
    let sys = Arc::new(
        crate::model::SystemSpec::load(
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
        .unwrap(),
    );
    let eff = effective_sde(sys, MeasureTag::FoellmerP(1));
    let pair = TestFunctionPair::new(mk1("x1^1.5"), mk1("1/x1"));
    let sampling = ShellSampling {
        radii: vec![2.0, 5.0, 10.0, 50.0],
        points_per_shell: 256,
        min_coordinate: 1.0,
        time_samples: vec![0.0],
    };
    let report = ab_bound_check(&eff, &pair, Side::NonExplosion, &sampling).unwrap();
    assert_eq!(report.shells.len(), 4);
    for s in &report.shells {
        assert!(s.points > 0);
        assert!(s.a_margin.is_finite());
        assert!(s.trace_margin.is_finite());
    }
    // rho = -1 cancels the radial diffusion exactly.
    assert!(report.shells[0].a_margin >= 0.0);
}

/// Driftless unit-diffusion components are martingales; the checker must
/// certify them from (A, B) = (2u, 2/u) under their own measure.
#[test]
fn classify_certifies_unit_diffusion_martingale() {
    let sys = Arc::new(simple_system(
        &["1/x1"],
        "1",
        "0",
        CorrelationMatrix::identity(2),
    ));
    let crit = ComponentCriterion {
        pair: TestFunctionPair::new(mk1("2*x1"), mk1("2/x1")),
        side: Side::NonExplosion,
    };
    let out = theorem_main_classify(&sys, &[crit]).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].evidence, AnalyticEvidence::Martingale, "{:?}", out[0].verdict);
    assert_eq!(
        out[0].verdict.integral_classification,
        Some(IntegralClass::Divergent)
    );
}

/// Relabeling components (permuting sigma entries and correlation rows)
/// permutes the analytic evidence identically.
#[test]
fn classification_invariant_under_relabeling() {
    let dim = 3;
    let build = |sigmas: [&str; 2], rho: [f64; 3]| {
        // rho = [r12, r13, r23]
        Arc::new(
            SdeSystem::new(
                2,
                vec![mk(sigmas[0], dim), mk(sigmas[1], dim)],
                mk("1", dim),
                mk("0", dim),
                CorrelationMatrix::new(
                    3,
                    vec![
                        1.0, rho[0], rho[1], rho[0], 1.0, rho[2], rho[1], rho[2], 1.0,
                    ],
                )
                .unwrap(),
                vec![1.0, 1.0, 1.0],
                1.0,
            )
            .unwrap(),
        )
    };
    let crit_a = || ComponentCriterion {
        pair: TestFunctionPair::new(mk1("3*x1"), mk1("4/x1")),
        side: Side::NonExplosion,
    };
    let crit_b = || ComponentCriterion {
        pair: TestFunctionPair::new(mk1("x1^2"), mk1("1/x1")),
        side: Side::Explosion,
    };
    let base = build(["1/x1", "2/x2"], [0.3, 0.1, -0.2]);
    let swapped = build(["2/x1", "1/x2"], [0.3, -0.2, 0.1]);
    let out1 = theorem_main_classify(&base, &[crit_a(), crit_b()]).unwrap();
    let out2 = theorem_main_classify(&swapped, &[crit_b(), crit_a()]).unwrap();
    assert_eq!(out1[0].evidence, out2[1].evidence);
    assert_eq!(out1[1].evidence, out2[0].evidence);
    assert_eq!(
        out1[0].verdict.integral_classification,
        out2[1].verdict.integral_classification
    );
    assert_eq!(out1[0].verdict.verdict, out2[1].verdict.verdict);
    assert_eq!(out1[1].verdict.verdict, out2[0].verdict.verdict);
    // Margins are sampled on quasi-random shells whose points are not
    // permutation images of each other, so only the signs must agree.
    assert_eq!(
        out1[0].verdict.inequality_margin >= 0.0,
        out2[1].verdict.inequality_margin >= 0.0
    );
}
