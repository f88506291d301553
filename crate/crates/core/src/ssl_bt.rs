//! The Barlow Twins objective.
//!
//! `C = (1/B)·std(Z_A)ᵀ·std(Z_B)` where `std` centers each embedding column over
//! the batch and divides it by its population standard deviation plus `eps`.
//! The loss is `Σ_i (1 − C_ii)² + μ·Σ_i Σ_{j≠i} C_ij²`.

use crate::augment::{make_view_pair_with_ids, AugmentConfig, ViewPair};
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{self, EncoderConfig};
use crate::numerics::{self, ParamVars, ParameterVector, Tape, Tensor, Var, DEFAULT_STD_EPS};

/// Slack allowed on the `[-1, 1]` bound of cross-correlation entries.
pub const CORRELATION_BOUND_TOL: f64 = 1e-4;

/// Default off-diagonal weight.
pub const DEFAULT_MU: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BtLossConfig {
    pub mu: f64,
    pub eps: f64,
}

impl Default for BtLossConfig {
    fn default() -> Self {
        Self {
            mu: DEFAULT_MU,
            eps: DEFAULT_STD_EPS,
        }
    }
}

impl BtLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || !(self.eps > 0.0) {
            return config_err(format!("mu and eps must be positive, got {self:?}"));
        }
        Ok(())
    }
}

/// `D×D` cross-correlation between two embedding batches.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossCorrelation {
    pub matrix: Tensor,
    pub batch_size: usize,
}

impl CrossCorrelation {
    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    /// True when every entry lies in `[-1 - tol, 1 + tol]`.
    pub fn within_bounds(&self, tol: f64) -> bool {
        self.matrix.data().iter().all(|v| v.abs() <= 1.0 + tol)
    }
}

/// Loss value split into its two terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BtTerms {
    pub total: f64,
    pub invariance: f64,
    pub redundancy: f64,
}

fn check_pair(za: &Tensor, zb: &Tensor) -> Result<usize> {
    let (b, _) = za.dims2()?;
    za.expect_same_shape(zb)?;
    if b < 2 {
        return shape_err(format!("cross-correlation needs a batch of at least 2, got {b}"));
    }
    Ok(b)
}

pub fn cross_correlation(za: &Tensor, zb: &Tensor, eps: f64) -> Result<CrossCorrelation> {
    let b = check_pair(za, zb)?;
    let sa = numerics::standardize_columns(za, eps)?;
    let sb = numerics::standardize_columns(zb, eps)?;
    let c = numerics::matmul(&numerics::transpose(&sa)?, &sb)?.map(|v| v / b as f64);
    c.check_finite("cross_correlation")?;
    Ok(CrossCorrelation {
        matrix: c,
        batch_size: b,
    })
}

pub fn bt_loss(c: &CrossCorrelation, cfg: &BtLossConfig) -> Result<BtTerms> {
    let (d, d2) = c.matrix.dims2()?;
    if d != d2 {
        return shape_err(format!("cross-correlation must be square, got {d}x{d2}"));
    }
    let mut invariance = 0.0;
    let mut redundancy = 0.0;
    for i in 0..d {
        for j in 0..d {
            let v = c.matrix.at2(i, j);
            if i == j {
                invariance += (1.0 - v) * (1.0 - v);
            } else {
                redundancy += v * v;
            }
        }
    }
    Ok(BtTerms {
        total: invariance + cfg.mu * redundancy,
        invariance,
        redundancy,
    })
}

/// Tape handles for the loss and its two terms.
#[derive(Clone, Copy, Debug)]
pub struct BtVars {
    pub total: Var,
    pub invariance: Var,
    pub redundancy: Var,
    pub correlation: Var,
}

/// Records the cross-correlation and loss of two `B×D` embeddings.
pub fn bt_loss_graph(tape: &mut Tape, za: Var, zb: Var, cfg: &BtLossConfig) -> Result<BtVars> {
    let b = check_pair(tape.value(za), tape.value(zb))?;
    let d = tape.value(za).shape()[1];
    let sa = tape.standardize_columns(za, cfg.eps)?;
    let sb = tape.standardize_columns(zb, cfg.eps)?;
    let sat = tape.transpose(sa)?;
    let prod = tape.matmul(sat, sb)?;
    let c = tape.scale(prod, 1.0 / b as f64)?;

    let eye = tape.constant(Tensor::eye(d));
    let off_mask = tape.constant(Tensor::eye(d).map(|v| 1.0 - v));
    let diff = tape.sub(c, eye)?;
    let diag = tape.mul(diff, eye)?;
    let diag_sq = tape.square(diag)?;
    let invariance = tape.sum(diag_sq)?;
    let off = tape.mul(c, off_mask)?;
    let off_sq = tape.square(off)?;
    let redundancy = tape.sum(off_sq)?;
    let weighted = tape.scale(redundancy, cfg.mu)?;
    let total = tape.add(invariance, weighted)?;
    Ok(BtVars {
        total,
        invariance,
        redundancy,
        correlation: c,
    })
}

/// Records encoder + projector on both views followed by the loss.
pub fn bt_graph_on_views(
    tape: &mut Tape,
    vars: &ParamVars,
    model_cfg: &EncoderConfig,
    views: &ViewPair,
    bt_cfg: &BtLossConfig,
) -> Result<BtVars> {
    let ya = tape.constant(views.view_a.clone());
    let yb = tape.constant(views.view_b.clone());
    let za = model::forward(tape, vars, model_cfg, ya)?.embedding;
    let zb = model::forward(tape, vars, model_cfg, yb)?.embedding;
    bt_loss_graph(tape, za, zb, bt_cfg)
}

/// Barlow Twins loss of one image batch: two augmented views, both embedded
/// with the same parameters.
pub fn bt_loss_on_batch(
    params: &ParameterVector,
    model_cfg: &EncoderConfig,
    x: &Tensor,
    ids: &[u64],
    aug_cfg: &AugmentConfig,
    bt_cfg: &BtLossConfig,
    draw_index: u64,
) -> Result<BtTerms> {
    let views = make_view_pair_with_ids(x, ids, aug_cfg, draw_index)?;
    let mut tape = Tape::new();
    let vars = ParamVars::frozen(&mut tape, params);
    let v = bt_graph_on_views(&mut tape, &vars, model_cfg, &views, bt_cfg)?;
    terms_of(&tape, &v)
}

pub(crate) fn terms_of(tape: &Tape, v: &BtVars) -> Result<BtTerms> {
    let get = |var: Var| tape.value(var).item();
    let terms = BtTerms {
        total: get(v.total)?,
        invariance: get(v.invariance)?,
        redundancy: get(v.redundancy)?,
    };
    if !terms.total.is_finite() {
        return Err(Error::NonFinite("bt_loss".into()));
    }
    Ok(terms)
}
