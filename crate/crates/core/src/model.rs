//! The SDE system: `d` driftless components `M^1..M^d` with diagonal
//! diffusion coefficients `sigma_11..sigma_dd`, one volatility component `v`
//! with coefficient `sigma_bar` and drift `b`, driven by a `(d+1)`-dimensional
//! correlated Brownian motion. State layout: `x1..xd` are the `M` components,
//! `x_{d+1}` is `v`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, EvalCtx, EvalError, ExpressionAst, ParseError};

/// Tolerance below which a correlation eigenvalue counts as "not PSD".
pub const PSD_EIGEN_TOL: f64 = 1e-10;
/// Eigenvalues below this are clipped to zero when factoring a singular matrix.
pub const FACTOR_CLIP_TOL: f64 = 1e-12;
/// Required reconstruction accuracy of the factor: max|LL^T - Sigma|.
pub const FACTOR_MAX_ERR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("correlation matrix: {0}")]
    Correlation(String),
    #[error("field `{field}`: {source}")]
    Expression {
        field: String,
        #[source]
        source: ParseError,
    },
    #[error("{0}")]
    Validation(String),
    #[error("config parse error at line {line}, column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },
}

/// Which form of the measure-change drift `beta^j_i` to use. The covariation
/// form carries the component's own value `M^i`; the literal form carries
/// `M^j`. The two coincide for `i = j`. The covariation form is the default:
/// it is the one consistent with the quadratic covariation `d[M^i, M^j]/M^j`
/// and with the worked two- and three-dimensional systems shipped with the
/// CLI, while the literal form is kept for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaConvention {
    #[default]
    Covariation,
    LiteralMj,
}

// ---------------------------------------------------------------------------
// Correlation matrix
// ---------------------------------------------------------------------------

/// Symmetric matrix with unit diagonal, entries in [-1, 1], positive
/// semidefinite up to `PSD_EIGEN_TOL`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    dim: usize,
    /// Row-major entries.
    entries: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        CorrelationMatrix { dim, entries }
    }

    /// Validate and construct from row-major entries.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self, ModelError> {
        if entries.len() != dim * dim {
            return Err(ModelError::Correlation(format!(
                "expected {}x{} = {} entries, got {}",
                dim,
                dim,
                dim * dim,
                entries.len()
            )));
        }
        for i in 0..dim {
            let di = entries[i * dim + i];
            if di != 1.0 {
                return Err(ModelError::Correlation(format!(
                    "diagonal entry ({i},{i}) must be exactly 1, got {di}"
                )));
            }
            for j in 0..dim {
                let e = entries[i * dim + j];
                if !e.is_finite() || !(-1.0..=1.0).contains(&e) {
                    return Err(ModelError::Correlation(format!(
                        "entry ({i},{j}) = {e} outside [-1, 1]"
                    )));
                }
                let et = entries[j * dim + i];
                if e != et {
                    return Err(ModelError::Correlation(format!(
                        "not symmetric: ({i},{j}) = {e} but ({j},{i}) = {et}"
                    )));
                }
            }
        }
        let m = CorrelationMatrix { dim, entries };
        let min_eig = m.min_eigenvalue();
        if min_eig < -PSD_EIGEN_TOL {
            return Err(ModelError::Correlation(format!(
                "not positive semidefinite: smallest eigenvalue {min_eig:.6e}"
            )));
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn as_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.entries)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.as_dmatrix()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b))
    }

    /// Factor L with `L L^T = Sigma`. Strictly positive definite matrices get
    /// the Cholesky factor; singular ones (the worked examples use
    /// correlations of exactly +-1) fall back to an eigendecomposition with
    /// eigenvalues below `FACTOR_CLIP_TOL` clipped to zero. Columns are
    /// ordered by descending eigenvalue and sign-normalized so the factor is
    /// deterministic.
    pub fn factor(&self) -> Result<Factor, ModelError> {
        let sigma = self.as_dmatrix();
        let min_eig = self.min_eigenvalue();
        if min_eig < -PSD_EIGEN_TOL {
            return Err(ModelError::Correlation(format!(
                "not positive semidefinite: smallest eigenvalue {min_eig:.6e}"
            )));
        }
        let l = match sigma.clone().cholesky() {
            Some(chol) => chol.l(),
            None => {
                let eig = sigma.clone().symmetric_eigen();
                let mut order: Vec<usize> = (0..self.dim).collect();
                order.sort_by(|&a, &b| {
                    eig.eigenvalues[b]
                        .partial_cmp(&eig.eigenvalues[a])
                        .unwrap()
                });
                let mut l = DMatrix::zeros(self.dim, self.dim);
                for (col, &k) in order.iter().enumerate() {
                    let lambda = eig.eigenvalues[k].max(0.0);
                    if lambda < FACTOR_CLIP_TOL {
                        continue;
                    }
                    let mut v: DVector<f64> = eig.eigenvectors.column(k).into();
                    // Sign convention: first entry of nontrivial magnitude positive.
                    if let Some(first) = v.iter().find(|e| e.abs() > 1e-12) {
                        if *first < 0.0 {
                            v = -v;
                        }
                    }
                    let scaled = v * lambda.sqrt();
                    l.set_column(col, &scaled);
                }
                l
            }
        };
        let recon = &l * l.transpose();
        let err = (&recon - &sigma).abs().max();
        if err > FACTOR_MAX_ERR {
            return Err(ModelError::Correlation(format!(
                "factorization residual {err:.3e} exceeds {FACTOR_MAX_ERR:.0e}"
            )));
        }
        let mut rows = vec![0.0; self.dim * self.dim];
        for i in 0..self.dim {
            for j in 0..self.dim {
                rows[i * self.dim + j] = l[(i, j)];
            }
        }
        Ok(Factor {
            dim: self.dim,
            rows,
        })
    }

    /// Nearest valid correlation matrix by alternating projections
    /// (eigenvalue clipping / unit-diagonal reset). Returns the projected
    /// matrix and the smallest eigenvalue of the input.
    pub fn project_nearest(
        dim: usize,
        entries: &[f64],
    ) -> Result<(CorrelationMatrix, f64), ModelError> {
        if entries.len() != dim * dim {
            return Err(ModelError::Correlation(format!(
                "expected {} entries, got {}",
                dim * dim,
                entries.len()
            )));
        }
        let mut y = DMatrix::from_row_slice(dim, dim, entries);
        y = (y.clone() + y.transpose()) * 0.5;
        let input_min_eig = y
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b));
        for _ in 0..200 {
            let mut eig = y.clone().symmetric_eigen();
            for v in eig.eigenvalues.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            y = eig.recompose();
            let mut max_diag_err = 0.0f64;
            for i in 0..dim {
                max_diag_err = max_diag_err.max((y[(i, i)] - 1.0).abs());
                y[(i, i)] = 1.0;
            }
            let min_eig = y
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .fold(f64::INFINITY, |a, &b| a.min(b));
            if min_eig >= -1e-12 && max_diag_err < 1e-12 {
                break;
            }
        }
        let mut out = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                let e = 0.5 * (y[(i, j)] + y[(j, i)]);
                out[i * dim + j] = e.clamp(-1.0, 1.0);
            }
        }
        for i in 0..dim {
            out[i * dim + i] = 1.0;
            for j in (i + 1)..dim {
                out[j * dim + i] = out[i * dim + j];
            }
        }
        let projected = CorrelationMatrix::new(dim, out)?;
        Ok((projected, input_min_eig))
    }
}

/// Flat row-major factor of a correlation matrix, used to color iid normal
/// increments in the simulator.
#[derive(Debug, Clone)]
pub struct Factor {
    dim: usize,
    rows: Vec<f64>,
}

impl Factor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i * self.dim + j]
    }

    /// `out = L z`.
    #[inline]
    pub fn apply(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        for i in 0..self.dim {
            let row = &self.rows[i * self.dim..(i + 1) * self.dim];
            let mut acc = 0.0;
            for (l, zj) in row.iter().zip(z.iter()) {
                acc += l * zj;
            }
            out[i] = acc;
        }
    }
}

// ---------------------------------------------------------------------------
// The system
// ---------------------------------------------------------------------------

/// Immutable description of the system; all operations are pure and the
/// value can be shared freely across threads.
#[derive(Debug, Clone)]
pub struct SdeSystem {
    d: usize,
    sigma_diag: Vec<ExpressionAst>,
    sigma_bar: ExpressionAst,
    b: ExpressionAst,
    correlation: CorrelationMatrix,
    initial_state: Vec<f64>,
    horizon: f64,
    v_absorbing: bool,
    beta_convention: BetaConvention,
    /// Notes accumulated while loading (e.g. a correlation repair).
    diagnostics: Vec<String>,
}

impl SdeSystem {
    pub fn new(
        d: usize,
        sigma_diag: Vec<ExpressionAst>,
        sigma_bar: ExpressionAst,
        b: ExpressionAst,
        correlation: CorrelationMatrix,
        initial_state: Vec<f64>,
        horizon: f64,
    ) -> Result<Self, ModelError> {
        if d == 0 {
            return Err(ModelError::Validation("d must be at least 1".into()));
        }
        if sigma_diag.len() != d {
            return Err(ModelError::Validation(format!(
                "sigma_diag must have {} entries, got {}",
                d,
                sigma_diag.len()
            )));
        }
        let dim = d + 1;
        for (k, e) in sigma_diag.iter().enumerate() {
            if e.state_size() != dim {
                return Err(ModelError::Validation(format!(
                    "sigma_diag[{k}] parsed for state size {}, system needs {dim}",
                    e.state_size()
                )));
            }
        }
        for (name, e) in [("sigma_bar", &sigma_bar), ("b", &b)] {
            if e.state_size() != dim {
                return Err(ModelError::Validation(format!(
                    "{name} parsed for state size {}, system needs {dim}",
                    e.state_size()
                )));
            }
        }
        if correlation.dim() != dim {
            return Err(ModelError::Validation(format!(
                "correlation must be {dim}x{dim}, got {}x{}",
                correlation.dim(),
                correlation.dim()
            )));
        }
        if initial_state.len() != dim {
            return Err(ModelError::Validation(format!(
                "initial_state must have {dim} entries, got {}",
                initial_state.len()
            )));
        }
        for (i, &v) in initial_state.iter().take(d).enumerate() {
            if !(v > 0.0) {
                return Err(ModelError::Validation(format!(
                    "initial_state[{i}] = {v}: M components must start strictly positive"
                )));
            }
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(ModelError::Validation(format!(
                "T must be a positive real, got {horizon}"
            )));
        }
        Ok(SdeSystem {
            d,
            sigma_diag,
            sigma_bar,
            b,
            correlation,
            initial_state,
            horizon,
            v_absorbing: false,
            beta_convention: BetaConvention::default(),
            diagnostics: Vec::new(),
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Full state size `d + 1`.
    pub fn dim(&self) -> usize {
        self.d + 1
    }

    pub fn sigma_diag(&self) -> &[ExpressionAst] {
        &self.sigma_diag
    }

    pub fn sigma_bar(&self) -> &ExpressionAst {
        &self.sigma_bar
    }

    pub fn drift_b(&self) -> &ExpressionAst {
        &self.b
    }

    pub fn correlation(&self) -> &CorrelationMatrix {
        &self.correlation
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.initial_state
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn v_absorbing(&self) -> bool {
        self.v_absorbing
    }

    pub fn set_v_absorbing(&mut self, on: bool) {
        self.v_absorbing = on;
    }

    pub fn beta_convention(&self) -> BetaConvention {
        self.beta_convention
    }

    pub fn set_beta_convention(&mut self, c: BetaConvention) {
        self.beta_convention = c;
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    pub fn push_diagnostic(&mut self, note: String) {
        self.diagnostics.push(note);
    }

    /// Diagonal of `D(x) = diag(x1 sigma_11, .., xd sigma_dd, sigma_bar)`.
    pub fn diffusion_scales(&self, ctx: &EvalCtx<'_>, out: &mut [f64]) -> Result<(), EvalError> {
        debug_assert_eq!(out.len(), self.dim());
        for i in 0..self.d {
            out[i] = ctx.state[i] * self.sigma_diag[i].evaluate_ctx(ctx)?;
        }
        out[self.d] = self.sigma_bar.evaluate_ctx(ctx)?;
        Ok(())
    }

    /// Diffusion matrix `a(x) = D(x) Sigma D(x)^T`; symmetric PSD by
    /// construction.
    pub fn diffusion_matrix(&self, state: &[f64], time: f64) -> Result<DMatrix<f64>, EvalError> {
        let ctx = EvalCtx::new(state, time);
        let n = self.dim();
        let mut scales = vec![0.0; n];
        self.diffusion_scales(&ctx, &mut scales)?;
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = scales[i] * self.correlation.get(i, j) * scales[j];
            }
        }
        Ok(a)
    }

    /// `<x, a(x) x> = w^T Sigma w` with `w_i = x_i D_i(x)`; always >= 0.
    pub fn quadratic_form(&self, state: &[f64], time: f64) -> Result<f64, EvalError> {
        let ctx = EvalCtx::new(state, time);
        let n = self.dim();
        let mut scales = vec![0.0; n];
        self.diffusion_scales(&ctx, &mut scales)?;
        Ok(self.quadratic_form_from_scales(state, &scales))
    }

    /// Quadratic form given precomputed diffusion scales (hot-loop variant).
    #[inline]
    pub fn quadratic_form_from_scales(&self, state: &[f64], scales: &[f64]) -> f64 {
        let n = self.dim();
        let mut q = 0.0;
        for i in 0..n {
            let wi = state[i] * scales[i];
            if wi == 0.0 {
                continue;
            }
            for j in 0..n {
                q += wi * self.correlation.get(i, j) * state[j] * scales[j];
            }
        }
        q.max(0.0)
    }
}

// ---------------------------------------------------------------------------
// System definition file
// ---------------------------------------------------------------------------

fn default_repair() -> String {
    "error".to_string()
}

/// JSON-facing schema of a system definition file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Defaults to all ones.
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
    /// Row-major (d+1) x (d+1) entries.
    pub correlation: Vec<f64>,
    pub sigma_diag: Vec<String>,
    pub sigma_bar: String,
    pub b: String,
    #[serde(default)]
    pub constants: BTreeMap<String, f64>,
    /// Absorb v at `barrier_down` (the volatility path space treats 0 as an
    /// absorbing boundary). Off by default.
    #[serde(default)]
    pub v_absorbing: bool,
    /// `"error"` (default) rejects a correlation matrix that is not PSD;
    /// `"project"` replaces it by the nearest valid correlation matrix and
    /// records a diagnostic.
    #[serde(default = "default_repair")]
    pub correlation_repair: String,
    #[serde(default)]
    pub beta_convention: Option<BetaConvention>,
    /// Free-form documentation carried by bundled configs.
    #[serde(default)]
    pub notes: Option<String>,
}

impl SystemSpec {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Json {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn build(&self) -> Result<SdeSystem, ModelError> {
        if self.d == 0 {
            return Err(ModelError::Validation(
                "field `d`: must be at least 1".into(),
            ));
        }
        if !["error", "project"].contains(&self.correlation_repair.as_str()) {
            return Err(ModelError::Validation(format!(
                "field `correlation_repair`: expected \"error\" or \"project\", got {:?}",
                self.correlation_repair
            )));
        }
        let dim = self.d + 1;
        let mut diagnostics = Vec::new();
        let correlation = match CorrelationMatrix::new(dim, self.correlation.clone()) {
            Ok(c) => c,
            Err(err) => {
                let projectable = matches!(
                    &err,
                    ModelError::Correlation(msg) if msg.contains("positive semidefinite")
                );
                if self.correlation_repair == "project" && projectable {
                    let (projected, min_eig) =
                        CorrelationMatrix::project_nearest(dim, &self.correlation)?;
                    diagnostics.push(format!(
                        "correlation matrix is not positive semidefinite (smallest eigenvalue \
                         {min_eig:.4}); the supplied driver correlations are mutually \
                         inconsistent and were projected to the nearest valid correlation \
                         matrix: {:?}",
                        projected.entries()
                    ));
                    projected
                } else {
                    return Err(err);
                }
            }
        };
        let parse_field = |name: &str, src: &str| -> Result<ExpressionAst, ModelError> {
            expr::parse(src, dim, &self.constants).map_err(|source| ModelError::Expression {
                field: name.to_string(),
                source,
            })
        };
        if self.sigma_diag.len() != self.d {
            return Err(ModelError::Validation(format!(
                "field `sigma_diag`: expected {} expressions, got {}",
                self.d,
                self.sigma_diag.len()
            )));
        }
        let mut sigma_diag = Vec::with_capacity(self.d);
        for (k, src) in self.sigma_diag.iter().enumerate() {
            sigma_diag.push(parse_field(&format!("sigma_diag[{k}]"), src)?);
        }
        let sigma_bar = parse_field("sigma_bar", &self.sigma_bar)?;
        let b = parse_field("b", &self.b)?;
        let initial_state = self
            .initial_state
            .clone()
            .unwrap_or_else(|| vec![1.0; dim]);
        let mut system = SdeSystem::new(
            self.d,
            sigma_diag,
            sigma_bar,
            b,
            correlation,
            initial_state,
            self.horizon,
        )?;
        system.v_absorbing = self.v_absorbing;
        if let Some(c) = self.beta_convention {
            system.beta_convention = c;
        }
        system.diagnostics = diagnostics;
        Ok(system)
    }

    pub fn load(text: &str) -> Result<SdeSystem, ModelError> {
        Self::from_json(text)?.build()
    }
}

impl fmt::Display for CorrelationMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.dim {
            for j in 0..self.dim {
                if j > 0 {
                    write!(f, " ")?;
                }
                write!(f, "{:+.4}", self.get(i, j))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
