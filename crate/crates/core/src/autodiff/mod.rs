//! Reverse-mode differentiation over dense 2-D tensors.
//!
//! The [`Tape`] records every operation applied to a [`Var`]. Backward rules
//! are themselves written with tape operations, so gradients can be taken of
//! gradients (needed for input-space Laplacians of a network). Finite-element
//! kernels enter through [`Tape::external_linear`], whose backward rule is
//! the kernel's adjoint.

mod tape;
mod tensor;

pub use tape::{Reduce, Segments, SharedOperator, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar((usize, usize)),
    #[error("variable belongs to a different tape")]
    ForeignVariable,
}

/// Per-row sum of second derivatives of `out` with respect to the listed
/// columns of the leaf `x`.
///
/// Computed by double backward through `sum(out)`: first `d = d(sum out)/dx`
/// with the graph recorded, then for each column `c` the derivative of
/// `sum(d[:, c])` with respect to `x[:, c]`. When every output row depends on
/// its own input row only this is the exact Laplacian of the network at each
/// row; for graph models it also collects cross-row terms. The result is an
/// `N x 1` differentiable variable.
pub fn input_laplacian<'t>(
    x: Var<'t>,
    out: Var<'t>,
    columns: &[usize],
) -> Result<Var<'t>, TapeError> {
    let tape = x.tape();
    let (rows, cols) = x.shape();
    if let Some(&bad) = columns.iter().find(|&&c| c >= cols) {
        return Err(TapeError::InvalidArgument(format!(
            "coordinate column {bad} out of range for {cols} feature columns"
        )));
    }
    let first = tape.backward(out.sum(), &[x], true)?[0];
    let mut laplacian: Option<Var<'t>> = None;
    for &c in columns {
        let mut mask = Tensor::zeros(rows, cols);
        for r in 0..rows {
            mask.set(r, c, 1.0);
        }
        let mask = tape.constant(mask);
        let column_sum = first.mul(mask)?.sum();
        let second = tape.backward(column_sum, &[x], true)?[0].mul(mask)?;
        laplacian = Some(match laplacian {
            Some(acc) => acc.add(second)?,
            None => second,
        });
    }
    let laplacian = match laplacian {
        Some(l) => l,
        None => tape.constant(Tensor::zeros(rows, cols)),
    };
    laplacian.matmul(tape.constant(Tensor::full(cols, 1, 1.0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_tape - g_fd| / max(1, |g_fd|)` over checked components.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Components whose perturbation crossed a relu/abs/max kink.
    pub skipped: usize,
}

/// Central-difference check of the tape gradient of a scalar loss with
/// respect to one leaf tensor.
///
/// `loss` rebuilds the loss on a fresh tape from the supplied leaf. Only the
/// listed `components` are probed (all of them when `None`). A component is
/// skipped when either perturbed evaluation takes a different non-smooth
/// branch than the base point; this includes points sitting exactly on a
/// kink.
pub fn grad_check<F, E>(
    loss: F,
    value: &Tensor,
    epsilon: f64,
    components: Option<&[usize]>,
) -> Result<GradCheckReport, E>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, E>,
    E: From<TapeError>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(value.clone());
    let l = loss(&tape, leaf)?;
    let grad = tape.backward(l, &[leaf], false)?[0].value();
    let base_pattern = tape.kink_pattern();

    let eval = |k: usize, delta: f64| -> Result<(f64, Vec<u8>), E> {
        let mut v = value.clone();
        v.data_mut()[k] += delta;
        let tape = Tape::new();
        let leaf = tape.leaf(v);
        let l = loss(&tape, leaf)?.item();
        Ok((l, tape.kink_pattern()))
    };

    let all: Vec<usize>;
    let components = match components {
        Some(c) => c,
        None => {
            all = (0..value.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for &k in components {
        let (plus, p_plus) = eval(k, epsilon)?;
        let (minus, p_minus) = eval(k, -epsilon)?;
        if p_plus != base_pattern || p_minus != base_pattern {
            report.skipped += 1;
            continue;
        }
        let fd = (plus - minus) / (2.0 * epsilon);
        let err = (grad.data()[k] - fd).abs() / fd.abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}
