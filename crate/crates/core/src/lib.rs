//! Classification of components of stochastic-volatility SDE systems as true
//! martingales or strict local martingales.
//!
//! The library has two independent engines that attack the same question:
//!
//! * [`khasminskii`] — deterministic criteria: Lyapunov generator inequalities
//!   and radial comparison-function tests (an upper/lower envelope pair `(A, B)`
//!   plus an improper-integral convergence test) evaluated on sampled shells,
//!   applied to the system after the measure change that turns the martingale
//!   question into an explosion question.
//! * [`mc`] — Monte Carlo estimators: the terminal-mean defect `1 - E[M_T]`
//!   under the original measure and the explosion frequency under each
//!   component's Föllmer measure, tied together by the duality
//!   `E_P[M^j_T] = P^j(no explosion by T)`.
//!
//! Supporting modules: [`expr`] (coefficient expressions), [`model`] (the SDE
//! system and its diffusion matrix), [`measure`] (Girsanov drift adjustments),
//! [`sim`] (path generation with absorption/explosion barriers).

pub mod expr;
pub mod khasminskii;
pub mod mc;
pub mod measure;
pub mod model;
pub mod sim;
