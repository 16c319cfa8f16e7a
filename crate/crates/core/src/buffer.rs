//! Fixed-capacity FIFO buffer of gradient-isolated slide embeddings.
//!
//! The buffer rehearses embeddings from recent steps so the slide graph can
//! span far more nodes than one mini-batch. Pushed rows are plain data —
//! they re-enter later tapes as constants and never carry gradient. The head
//! holds the most recent batch in batch order; eviction removes the slots
//! with the lowest insertion step.

use std::collections::VecDeque;

use crate::autodiff::{Tape, ValueId};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct BufferSlot<T> {
    pub embedding: Vec<T>,
    pub slide_id: String,
    pub label: i32,
    pub insertion_step: u64,
}

#[derive(Clone, Debug)]
pub struct NodeBuffer<T> {
    capacity: usize,
    dim: usize,
    slots: VecDeque<BufferSlot<T>>,
    next_step: u64,
}

/// The assembled `n x D_S` node matrix: live batch rows at the head,
/// gradient-isolated buffer rows below.
#[derive(Clone, Copy, Debug)]
pub struct AssembledNodes {
    pub nodes: ValueId,
    pub live: ValueId,
    /// Constant leaf holding rows `B..n`; absent when the buffer held only
    /// the batch itself.
    pub buffer_rows: Option<ValueId>,
    pub n: usize,
}

impl<T: Scalar> NodeBuffer<T> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity >= 1 && dim >= 1);
        NodeBuffer { capacity, dim, slots: VecDeque::new(), next_step: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Slots from newest (head) to oldest.
    pub fn slots(&self) -> impl Iterator<Item = &BufferSlot<T>> {
        self.slots.iter()
    }

    pub fn slot(&self, i: usize) -> &BufferSlot<T> {
        &self.slots[i]
    }

    /// Restores a buffer from checkpointed slots (ordered newest first).
    pub fn from_slots(capacity: usize, dim: usize, slots: Vec<BufferSlot<T>>) -> Result<Self> {
        if slots.len() > capacity {
            return Err(Error::CapacityExceeded { batch: slots.len(), capacity });
        }
        for s in &slots {
            if s.embedding.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "slot {} has width {}, buffer expects {dim}",
                    s.slide_id,
                    s.embedding.len()
                )));
            }
        }
        let next_step = slots.iter().map(|s| s.insertion_step + 1).max().unwrap_or(0);
        Ok(NodeBuffer { capacity, dim, slots: slots.into(), next_step })
    }

    /// Pushes a batch of embeddings as gradient-isolated copies. The batch
    /// lands at the head in batch order; if the buffer overflows, the slots
    /// with the oldest insertion steps are evicted.
    pub fn push_batch(
        &mut self,
        embeddings: &Matrix<T>,
        ids: &[String],
        labels: &[usize],
    ) -> Result<()> {
        let batch = embeddings.rows();
        if batch > self.capacity {
            return Err(Error::CapacityExceeded { batch, capacity: self.capacity });
        }
        if embeddings.cols() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "push_batch: embedding width {} vs buffer dim {}",
                embeddings.cols(),
                self.dim
            )));
        }
        if ids.len() != batch || labels.len() != batch {
            return Err(Error::DimensionMismatch(format!(
                "push_batch: {batch} rows vs {} ids / {} labels",
                ids.len(),
                labels.len()
            )));
        }
        // Row 0 becomes the newest slot; within the batch, steps decrease
        // from head to tail so tail eviction is exact FIFO even when batch
        // sizes vary.
        let base = self.next_step;
        self.next_step += batch as u64;
        for i in (0..batch).rev() {
            self.slots.push_front(BufferSlot {
                embedding: embeddings.row(i).to_vec(),
                slide_id: ids[i].clone(),
                label: labels[i] as i32,
                insertion_step: base + (batch - 1 - i) as u64,
            });
        }
        while self.slots.len() > self.capacity {
            self.slots.pop_back();
        }
        Ok(())
    }

    /// Rows `skip..skip+take` of the buffer as a plain matrix.
    pub fn rows_matrix(&self, skip: usize, take: usize) -> Matrix<T> {
        let mut m = Matrix::zeros(take, self.dim);
        for (r, slot) in self.slots.iter().skip(skip).take(take).enumerate() {
            m.row_mut(r).copy_from_slice(&slot.embedding);
        }
        m
    }

    /// Stacks the live batch over the buffered remainder: rows `0..B` are the
    /// gradient-carrying batch, rows `B..n` are constants from the buffer.
    /// The head `B` slots must hold exactly the live ids (i.e. `push_batch`
    /// ran with this batch first).
    pub fn assemble_node_matrix(
        &self,
        tape: &mut Tape<T>,
        live: ValueId,
        live_ids: &[String],
    ) -> Result<AssembledNodes> {
        let batch = tape.data(live).rows();
        if tape.data(live).cols() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "assemble: live width {} vs buffer dim {}",
                tape.data(live).cols(),
                self.dim
            )));
        }
        if live_ids.len() != batch || batch > self.slots.len() {
            return Err(Error::HeadMismatch(format!(
                "live batch of {batch} rows vs {} head slots",
                self.slots.len()
            )));
        }
        for (i, id) in live_ids.iter().enumerate() {
            if &self.slots[i].slide_id != id {
                return Err(Error::HeadMismatch(format!(
                    "head slot {i} holds `{}`, live batch has `{id}`",
                    self.slots[i].slide_id
                )));
            }
        }
        let n = self.slots.len();
        if n == batch {
            return Ok(AssembledNodes { nodes: live, live, buffer_rows: None, n });
        }
        let tail = self.rows_matrix(batch, n - batch);
        let buffer_rows = tape.constant(tail);
        let nodes = tape.concat_rows(&[live, buffer_rows])?;
        Ok(AssembledNodes { nodes, live, buffer_rows: Some(buffer_rows), n })
    }
}
