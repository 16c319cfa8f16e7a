//! Cross-entropy, temperature-scaled JS-divergence distillation and the
//! combined two-branch objective.
//!
//! The distillation term treats the MIL head as the teacher: its logits are
//! detached inside the term, so the teacher is never trained by the student's
//! imitation loss (it still learns through its own cross-entropy term).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, ValueId};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Epsilon added inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Scalars of one step's objective, as logged per training step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_mil: f64,
    pub ce_graph: f64,
    pub kd: f64,
    pub total: f64,
    pub w: f64,
    pub t_hat: f64,
}

/// Combined objective: the `1 x 1` total to call backward on, plus the
/// detached scalar breakdown.
pub struct TotalLoss {
    pub total: ValueId,
    pub breakdown: LossBreakdown,
}

fn check_rows_are_distributions<T: Scalar>(probs: &Matrix<T>, what: &str) -> Result<()> {
    for r in 0..probs.rows() {
        let mut s = T::zero();
        for &p in probs.row(r) {
            s += p;
        }
        if (s - T::one()).abs() > T::c(1e-6) {
            return Err(Error::NonDistributionInput(format!(
                "{what}: row {r} sums to {s}"
            )));
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of the labelled entries:
/// `-(1/B) * sum_i log(probs[i, y_i] + eps)`.
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    probs: ValueId,
    labels: &[usize],
) -> Result<ValueId> {
    let (rows, cols) = tape.data(probs).shape();
    if rows == 0 {
        return Err(Error::EmptyInput("cross_entropy of zero rows".into()));
    }
    if labels.len() != rows {
        return Err(Error::DimensionMismatch(format!(
            "cross_entropy: {rows} rows vs {} labels",
            labels.len()
        )));
    }
    for &y in labels {
        if y >= cols {
            return Err(Error::LabelOutOfRange { label: y, classes: cols });
        }
    }
    check_rows_are_distributions(tape.data(probs), "cross_entropy")?;

    let mut onehot = Matrix::zeros(rows, cols);
    for (i, &y) in labels.iter().enumerate() {
        onehot[(i, y)] = T::one();
    }
    let mask = tape.constant(onehot);
    let eps = tape.constant(Matrix::filled(rows, cols, T::c(LOG_EPS)));
    let shifted = tape.add(probs, eps)?;
    let logs = tape.log(shifted)?;
    let picked = tape.hadamard(mask, logs)?;
    let sum = tape.sum_all(picked)?;
    Ok(tape.scale(sum, T::c(-1.0 / rows as f64)))
}

/// Temperature-scaled JS-divergence distillation between the graph branch
/// (student, gradient-carrying) and the MIL branch (teacher, detached):
/// softens both logit sets at `t_hat`, averages the per-row JS divergence and
/// rescales by `t_hat^2`.
pub fn js_kd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits_g: ValueId,
    logits_mil: ValueId,
    t_hat: T,
) -> Result<ValueId> {
    if t_hat <= T::zero() {
        return Err(Error::NonPositiveTemperature(t_hat.as_f64()));
    }
    let shape_g = tape.data(logits_g).shape();
    let shape_m = tape.data(logits_mil).shape();
    if shape_g != shape_m {
        return Err(Error::DimensionMismatch(format!(
            "js_kd_loss: {shape_g:?} vs {shape_m:?}"
        )));
    }
    let (rows, cols) = shape_g;
    if rows == 0 {
        return Err(Error::EmptyInput("js_kd_loss of zero rows".into()));
    }

    let inv_t = T::one() / t_hat;
    let scaled_g = tape.scale(logits_g, inv_t);
    let teacher = tape.detach(logits_mil);
    let scaled_m = tape.scale(teacher, inv_t);
    let p = tape.softmax_rows(scaled_g)?;
    let q = tape.softmax_rows(scaled_m)?;
    let sum_pq = tape.add(p, q)?;
    let m = tape.scale(sum_pq, T::c(0.5));

    let eps = tape.constant(Matrix::filled(rows, cols, T::c(LOG_EPS)));
    let log_of = |t: &mut Tape<T>, x: ValueId| -> Result<ValueId> {
        let shifted = t.add(x, eps)?;
        t.log(shifted)
    };
    let log_p = log_of(tape, p)?;
    let log_q = log_of(tape, q)?;
    let log_m = log_of(tape, m)?;

    let diff_p = tape.sub(log_p, log_m)?;
    let kl_p_terms = tape.hadamard(p, diff_p)?;
    let kl_p = tape.sum_all(kl_p_terms)?;
    let diff_q = tape.sub(log_q, log_m)?;
    let kl_q_terms = tape.hadamard(q, diff_q)?;
    let kl_q = tape.sum_all(kl_q_terms)?;

    let js_sum = tape.add(kl_p, kl_q)?;
    let factor = t_hat * t_hat * T::c(0.5 / rows as f64);
    Ok(tape.scale(js_sum, factor))
}

/// `total = ce_mil + ce_graph + w * kd`; backward is invoked on the returned
/// total node.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs_mil: ValueId,
    logits_mil: ValueId,
    probs_g: ValueId,
    logits_g: ValueId,
    labels: &[usize],
    w: T,
    t_hat: T,
) -> Result<TotalLoss> {
    let ce_mil = cross_entropy(tape, probs_mil, labels)?;
    let ce_graph = cross_entropy(tape, probs_g, labels)?;
    let kd = js_kd_loss(tape, logits_g, logits_mil, t_hat)?;
    let weighted_kd = tape.scale(kd, w);
    let ce_sum = tape.add(ce_mil, ce_graph)?;
    let total = tape.add(ce_sum, weighted_kd)?;
    Ok(TotalLoss {
        total,
        breakdown: LossBreakdown {
            ce_mil: tape.scalar(ce_mil),
            ce_graph: tape.scalar(ce_graph),
            kd: tape.scalar(kd),
            total: tape.scalar(total),
            w: w.as_f64(),
            t_hat: t_hat.as_f64(),
        },
    })
}
