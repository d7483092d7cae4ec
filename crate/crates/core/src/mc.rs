//! Monte Carlo estimators (to come).
