//! Linear guidance of latent vectors along attribute axes.

use crate::axes::{AxisBank, AxisSource};
use crate::linalg::Vector;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EditError {
    #[error("unknown axis '{0}'")]
    UnknownAxis(String),
    #[error("latent dim {got} does not match bank dim {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("traversal needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("edit intensity must be finite, got {0}")]
    NonFiniteAlpha(f64),
}

/// A sequence of (axis, intensity) steps applied in order.
#[derive(Debug, Clone, PartialEq)]
pub struct EditPlan {
    pub steps: Vec<(String, f64)>,
}

impl EditPlan {
    pub fn new(steps: Vec<(String, f64)>) -> Self {
        Self { steps }
    }
}

/// `z + alpha * d`, where `d` is the decoupled unit direction for `axis`.
pub fn apply_edit(z: &Vector, bank: &AxisBank, axis: &str, alpha: f64) -> Result<Vector, EditError> {
    apply_edit_from(z, bank, axis, alpha, AxisSource::Decoupled)
}

/// Same as [`apply_edit`] with an explicit choice between decoupled and raw
/// fitted directions.
pub fn apply_edit_from(
    z: &Vector,
    bank: &AxisBank,
    axis: &str,
    alpha: f64,
    source: AxisSource,
) -> Result<Vector, EditError> {
    if !alpha.is_finite() {
        return Err(EditError::NonFiniteAlpha(alpha));
    }
    if z.dim() != bank.dim() {
        return Err(EditError::DimMismatch {
            got: z.dim(),
            want: bank.dim(),
        });
    }
    let d = bank
        .direction(axis, source)
        .ok_or_else(|| EditError::UnknownAxis(axis.to_string()))?;
    // alpha = 0 must return z bit-identically (adding 0.0 would flip -0.0).
    if alpha == 0.0 {
        return Ok(z.clone());
    }
    Ok(z.axpy(alpha, d))
}

/// Evenly spaced edits from `alpha_start` to `alpha_end` inclusive; element
/// `i` equals `apply_edit` at the i-th alpha, and the endpoints match single
/// edits bit-exactly.
pub fn traverse(
    z: &Vector,
    bank: &AxisBank,
    axis: &str,
    alpha_start: f64,
    alpha_end: f64,
    steps: usize,
) -> Result<Vec<Vector>, EditError> {
    if steps < 2 {
        return Err(EditError::TooFewSteps(steps));
    }
    if !alpha_start.is_finite() || !alpha_end.is_finite() {
        return Err(EditError::NonFiniteAlpha(if alpha_start.is_finite() {
            alpha_end
        } else {
            alpha_start
        }));
    }
    let h = (alpha_end - alpha_start) / (steps - 1) as f64;
    (0..steps)
        .map(|i| {
            let alpha = if i == steps - 1 {
                alpha_end
            } else {
                alpha_start + i as f64 * h
            };
            apply_edit(z, bank, axis, alpha)
        })
        .collect()
}

/// Applies a plan's steps sequentially.
pub fn apply_plan(z: &Vector, bank: &AxisBank, plan: &EditPlan) -> Result<Vector, EditError> {
    let mut out = z.clone();
    for (axis, alpha) in &plan.steps {
        out = apply_edit(&out, bank, axis, *alpha)?;
    }
    Ok(out)
}
