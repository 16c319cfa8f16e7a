//! The graph branch: two stacked hypergraph convolution layers, hop
//! concatenation, channel attention with zero-mean centering, and the MLP
//! classifier head over the mini-batch rows.
//!
//! The attention weights `w0`, `w1` are sized for the buffer capacity `L`;
//! when the graph has `n < L` nodes the leading `n x n` principal submatrices
//! are used. Centering subtracts the mean attention score so scores can go
//! negative; an alternative matrix-product reading of the reweighting step
//! exists but is intentionally not implemented.

use serde::{Deserialize, Serialize};

use crate::autodiff::{affine, broadcast_scalar, Tape, ValueId};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// How attention scores are centered before reweighting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenteringMode {
    /// Subtract the scalar mean over all scores.
    Global,
    /// Subtract each channel's own mean score.
    PerChannel,
}

/// Graph-branch weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams<T: Scalar> {
    pub theta1: Matrix<T>,
    pub theta2: Matrix<T>,
    pub w0: Matrix<T>,
    pub w1: Matrix<T>,
    pub mlp1: Matrix<T>,
    pub mlp_b1: Matrix<T>,
    pub mlp2: Matrix<T>,
    pub mlp_b2: Matrix<T>,
}

impl<T: Scalar> GcnParams<T> {
    pub fn init(d_s: usize, capacity: usize, d_m: usize, classes: usize, rng: &mut Rng) -> Self {
        GcnParams {
            theta1: rng.glorot_matrix(d_s, d_s),
            theta2: rng.glorot_matrix(d_s, d_s),
            w0: rng.glorot_matrix(capacity, capacity),
            w1: rng.glorot_matrix(capacity, capacity),
            mlp1: rng.glorot_matrix(3 * d_s, d_m),
            mlp_b1: Matrix::zeros(1, d_m),
            mlp2: rng.glorot_matrix(d_m, classes),
            mlp_b2: Matrix::zeros(1, classes),
        }
    }

    /// Attention capacity `L` the weights were sized for.
    pub fn capacity(&self) -> usize {
        self.w0.rows()
    }

    pub fn named(&self) -> Vec<(&'static str, &Matrix<T>)> {
        vec![
            ("gcn.theta1", &self.theta1),
            ("gcn.theta2", &self.theta2),
            ("gcn.w0", &self.w0),
            ("gcn.w1", &self.w1),
            ("gcn.mlp1", &self.mlp1),
            ("gcn.mlp_b1", &self.mlp_b1),
            ("gcn.mlp2", &self.mlp2),
            ("gcn.mlp_b2", &self.mlp_b2),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Matrix<T>)> {
        vec![
            ("gcn.theta1", &mut self.theta1),
            ("gcn.theta2", &mut self.theta2),
            ("gcn.w0", &mut self.w0),
            ("gcn.w1", &mut self.w1),
            ("gcn.mlp1", &mut self.mlp1),
            ("gcn.mlp_b1", &mut self.mlp_b1),
            ("gcn.mlp2", &mut self.mlp2),
            ("gcn.mlp_b2", &mut self.mlp_b2),
        ]
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> GcnBinding {
        let mut leaf = |m: &Matrix<T>| {
            if trainable {
                tape.variable(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        GcnBinding {
            capacity: self.capacity(),
            theta1: leaf(&self.theta1),
            theta2: leaf(&self.theta2),
            w0: leaf(&self.w0),
            w1: leaf(&self.w1),
            mlp1: leaf(&self.mlp1),
            mlp_b1: leaf(&self.mlp_b1),
            mlp2: leaf(&self.mlp2),
            mlp_b2: leaf(&self.mlp_b2),
        }
    }
}

/// Graph-branch parameters bound to one tape.
#[derive(Clone, Copy, Debug)]
pub struct GcnBinding {
    pub capacity: usize,
    pub theta1: ValueId,
    pub theta2: ValueId,
    pub w0: ValueId,
    pub w1: ValueId,
    pub mlp1: ValueId,
    pub mlp_b1: ValueId,
    pub mlp2: ValueId,
    pub mlp_b2: ValueId,
}

impl GcnBinding {
    /// Bound ids in the same order as [`GcnParams::named`].
    pub fn named(&self) -> Vec<(&'static str, ValueId)> {
        vec![
            ("gcn.theta1", self.theta1),
            ("gcn.theta2", self.theta2),
            ("gcn.w0", self.w0),
            ("gcn.w1", self.w1),
            ("gcn.mlp1", self.mlp1),
            ("gcn.mlp_b1", self.mlp_b1),
            ("gcn.mlp2", self.mlp2),
            ("gcn.mlp_b2", self.mlp_b2),
        ]
    }
}

/// One propagation layer: `leaky_relu(P * x * theta)`.
pub fn hgc_layer<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValueId,
    p: ValueId,
    theta: ValueId,
    slope: T,
) -> Result<ValueId> {
    let px = tape.matmul(p, x)?;
    let pxt = tape.matmul(px, theta)?;
    Ok(tape.leaky_relu(pxt, slope))
}

/// Node features after zero, one and two propagation hops, plus their
/// column-wise concatenation.
#[derive(Clone, Copy, Debug)]
pub struct HopStack {
    pub x0: ValueId,
    pub x1: ValueId,
    pub x2: ValueId,
    pub h: ValueId,
}

pub fn run_hops<T: Scalar>(
    tape: &mut Tape<T>,
    x0: ValueId,
    p: ValueId,
    bind: &GcnBinding,
    slope: T,
) -> Result<HopStack> {
    let x1 = hgc_layer(tape, x0, p, bind.theta1, slope)?;
    let x2 = hgc_layer(tape, x1, p, bind.theta2, slope)?;
    let h = tape.concat_cols(&[x0, x1, x2])?;
    Ok(HopStack { x0, x1, x2, h })
}

/// Channel attention output: the reweighted features plus the centered score
/// matrix (kept for diagnostics; its mean is zero by construction).
#[derive(Clone, Copy, Debug)]
pub struct CenteredAttention {
    pub hprime: ValueId,
    pub centered_scores: ValueId,
}

/// `A = sigmoid(relu(h^T w0[:n,:n]) w1[:n,:n])`, centered to zero mean, then
/// applied channel-wise: `H' = h ⊙ centered(A)^T`.
pub fn centering_attention<T: Scalar>(
    tape: &mut Tape<T>,
    h: ValueId,
    bind: &GcnBinding,
    mode: CenteringMode,
) -> Result<CenteredAttention> {
    let (n, width) = tape.data(h).shape();
    if n > bind.capacity {
        return Err(Error::BufferOverCapacity { n, capacity: bind.capacity });
    }
    let w0n = tape.slice(bind.w0, 0..n, 0..n)?;
    let w1n = tape.slice(bind.w1, 0..n, 0..n)?;
    let ht = tape.transpose(h);
    let s0 = tape.matmul(ht, w0n)?;
    let s0r = tape.relu(s0);
    let s1 = tape.matmul(s0r, w1n)?;
    let scores = tape.sigmoid(s1);

    let centered_scores = match mode {
        CenteringMode::Global => {
            let mean = tape.mean_all(scores)?;
            let shift = broadcast_scalar(tape, mean, width, n)?;
            tape.sub(scores, shift)?
        }
        CenteringMode::PerChannel => {
            let st = tape.transpose(scores);
            let channel_means = tape.mean_rows(st)?;
            let means_col = tape.transpose(channel_means);
            let ones_row = tape.constant(Matrix::filled(1, n, T::one()));
            let shift = tape.matmul(means_col, ones_row)?;
            tape.sub(scores, shift)?
        }
    };
    let reweight = tape.transpose(centered_scores);
    let hprime = tape.hadamard(h, reweight)?;
    Ok(CenteredAttention { hprime, centered_scores })
}

/// MLP head over the live batch rows. Returns `(probs, logits)`; the raw
/// logits feed the distillation term.
pub fn cls_graph<T: Scalar>(
    tape: &mut Tape<T>,
    hprime: ValueId,
    bind: &GcnBinding,
    batch_rows: std::ops::Range<usize>,
) -> Result<(ValueId, ValueId)> {
    let (n, width) = tape.data(hprime).shape();
    if batch_rows.end > n || batch_rows.start >= batch_rows.end {
        return Err(Error::IndexOutOfRange(format!(
            "batch rows {batch_rows:?} of {n} nodes"
        )));
    }
    let batch = tape.slice(hprime, batch_rows, 0..width)?;
    let z = affine(tape, batch, bind.mlp1, bind.mlp_b1)?;
    let zr = tape.relu(z);
    let logits = affine(tape, zr, bind.mlp2, bind.mlp_b2)?;
    let probs = tape.softmax_rows(logits)?;
    Ok((probs, logits))
}

/// Full branch output.
#[derive(Clone, Copy, Debug)]
pub struct GraphOutput {
    pub hops: HopStack,
    pub attention: CenteredAttention,
    pub probs: ValueId,
    pub logits: ValueId,
}

/// Runs the whole branch over a node matrix and a prebuilt propagation
/// operator.
pub fn graph_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x0: ValueId,
    propagation: &Matrix<T>,
    bind: &GcnBinding,
    batch_rows: std::ops::Range<usize>,
    slope: T,
    mode: CenteringMode,
) -> Result<GraphOutput> {
    let p = tape.constant(propagation.clone());
    let hops = run_hops(tape, x0, p, bind, slope)?;
    let attention = centering_attention(tape, hops.h, bind, mode)?;
    let (probs, logits) = cls_graph(tape, attention.hprime, bind, batch_rows)?;
    Ok(GraphOutput { hops, attention, probs, logits })
}
