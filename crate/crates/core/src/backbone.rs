//! MIL backbone: turns a bag of instance features into one slide embedding,
//! plus the MIL classification head.
//!
//! Two interchangeable pooling variants sit behind the same interface:
//! `MeanPool` projects every instance, averages and squashes with `tanh`;
//! `AttentionPool` scores projected instances with a small gated network and
//! returns their softmax-weighted convex combination.

use serde::{Deserialize, Serialize};

use crate::autodiff::{affine, Tape, ValueId};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// One slide: an `instances x features` matrix with a class label.
#[derive(Clone, Debug)]
pub struct SlideBag<T: Scalar> {
    pub id: String,
    pub instances: Matrix<T>,
    pub label: usize,
}

impl<T: Scalar> SlideBag<T> {
    pub fn new(id: impl Into<String>, instances: Matrix<T>, label: usize) -> Result<Self> {
        if instances.rows() == 0 {
            return Err(Error::EmptyInput("a bag needs at least one instance".into()));
        }
        if !instances.all_finite() {
            return Err(Error::NonFiniteInput("bag instances".into()));
        }
        Ok(SlideBag { id: id.into(), instances, label })
    }

    pub fn num_instances(&self) -> usize {
        self.instances.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.instances.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    MeanPool,
    AttentionPool,
}

/// Backbone weights: instance projection, attention scorer and the MIL head.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T: Scalar> {
    pub variant: BackboneVariant,
    pub proj_w: Matrix<T>,
    pub proj_b: Matrix<T>,
    pub attn_v: Matrix<T>,
    pub attn_u: Matrix<T>,
    pub cls_w: Matrix<T>,
    pub cls_b: Matrix<T>,
}

impl<T: Scalar> BackboneParams<T> {
    pub fn init(
        variant: BackboneVariant,
        d_p: usize,
        d_s: usize,
        d_a: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Self {
        BackboneParams {
            variant,
            proj_w: rng.glorot_matrix(d_p, d_s),
            proj_b: Matrix::zeros(1, d_s),
            attn_v: rng.glorot_matrix(d_s, d_a),
            attn_u: rng.glorot_matrix(d_a, 1),
            cls_w: rng.glorot_matrix(d_s, classes),
            cls_b: Matrix::zeros(1, classes),
        }
    }

    /// Parameters in canonical order. Attention weights only count as
    /// trainable under the attention variant.
    pub fn named(&self) -> Vec<(&'static str, &Matrix<T>)> {
        let mut v = vec![
            ("backbone.proj_w", &self.proj_w),
            ("backbone.proj_b", &self.proj_b),
        ];
        if self.variant == BackboneVariant::AttentionPool {
            v.push(("backbone.attn_v", &self.attn_v));
            v.push(("backbone.attn_u", &self.attn_u));
        }
        v.push(("backbone.cls_w", &self.cls_w));
        v.push(("backbone.cls_b", &self.cls_b));
        v
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Matrix<T>)> {
        let mut v = vec![
            ("backbone.proj_w", &mut self.proj_w),
            ("backbone.proj_b", &mut self.proj_b),
        ];
        if self.variant == BackboneVariant::AttentionPool {
            v.push(("backbone.attn_v", &mut self.attn_v));
            v.push(("backbone.attn_u", &mut self.attn_u));
        }
        v.push(("backbone.cls_w", &mut self.cls_w));
        v.push(("backbone.cls_b", &mut self.cls_b));
        v
    }

    /// Binds the parameters onto a tape, as variables when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BackboneBinding {
        let mut leaf = |m: &Matrix<T>| {
            if trainable {
                tape.variable(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        BackboneBinding {
            variant: self.variant,
            proj_w: leaf(&self.proj_w),
            proj_b: leaf(&self.proj_b),
            attn_v: leaf(&self.attn_v),
            attn_u: leaf(&self.attn_u),
            cls_w: leaf(&self.cls_w),
            cls_b: leaf(&self.cls_b),
        }
    }
}

/// Backbone parameters bound to one tape.
#[derive(Clone, Copy, Debug)]
pub struct BackboneBinding {
    pub variant: BackboneVariant,
    pub proj_w: ValueId,
    pub proj_b: ValueId,
    pub attn_v: ValueId,
    pub attn_u: ValueId,
    pub cls_w: ValueId,
    pub cls_b: ValueId,
}

impl BackboneBinding {
    /// Bound ids in the same order as [`BackboneParams::named`].
    pub fn named(&self) -> Vec<(&'static str, ValueId)> {
        let mut v = vec![
            ("backbone.proj_w", self.proj_w),
            ("backbone.proj_b", self.proj_b),
        ];
        if self.variant == BackboneVariant::AttentionPool {
            v.push(("backbone.attn_v", self.attn_v));
            v.push(("backbone.attn_u", self.attn_u));
        }
        v.push(("backbone.cls_w", self.cls_w));
        v.push(("backbone.cls_b", self.cls_b));
        v
    }
}

/// Embedding of one slide plus, for the attention variant, the `1 x M`
/// attention row (softmax over instances).
#[derive(Clone, Copy, Debug)]
pub struct SlideEmbedding {
    pub value: ValueId,
    pub attention: Option<ValueId>,
}

/// Embeds one bag into a `1 x D_S` row, differentiable w.r.t. the backbone.
pub fn embed_slide<T: Scalar>(
    tape: &mut Tape<T>,
    bag: &SlideBag<T>,
    bb: &BackboneBinding,
) -> Result<SlideEmbedding> {
    let d_p = tape.data(bb.proj_w).rows();
    if bag.feature_dim() != d_p {
        return Err(Error::DimensionMismatch(format!(
            "bag {} has feature width {}, backbone expects {}",
            bag.id,
            bag.feature_dim(),
            d_p
        )));
    }
    let instances = tape.constant(bag.instances.clone());
    let projected = affine(tape, instances, bb.proj_w, bb.proj_b)?;
    match bb.variant {
        BackboneVariant::MeanPool => {
            let mean = tape.mean_rows(projected)?;
            let value = tape.tanh(mean);
            Ok(SlideEmbedding { value, attention: None })
        }
        BackboneVariant::AttentionPool => {
            let gate = tape.matmul(projected, bb.attn_v)?;
            let gated = tape.tanh(gate);
            let scores = tape.matmul(gated, bb.attn_u)?;
            let scores_row = tape.transpose(scores);
            let attention = tape.softmax_rows(scores_row)?;
            let value = tape.matmul(attention, projected)?;
            Ok(SlideEmbedding { value, attention: Some(attention) })
        }
    }
}

/// Embeds a batch of bags and stacks the rows into a `B x D_S` matrix.
pub fn embed_batch<T: Scalar>(
    tape: &mut Tape<T>,
    bags: &[&SlideBag<T>],
    bb: &BackboneBinding,
) -> Result<ValueId> {
    if bags.is_empty() {
        return Err(Error::EmptyInput("embed_batch of zero bags".into()));
    }
    let rows: Vec<ValueId> = bags
        .iter()
        .map(|bag| embed_slide(tape, bag, bb).map(|e| e.value))
        .collect::<Result<_>>()?;
    tape.concat_rows(&rows)
}

/// MIL head: affine map from embeddings to class logits.
pub fn cls_mil<T: Scalar>(
    tape: &mut Tape<T>,
    embedding: ValueId,
    bb: &BackboneBinding,
) -> Result<ValueId> {
    let d_s = tape.data(bb.cls_w).rows();
    if tape.data(embedding).cols() != d_s {
        return Err(Error::DimensionMismatch(format!(
            "cls_mil: embedding width {} vs weight rows {}",
            tape.data(embedding).cols(),
            d_s
        )));
    }
    affine(tape, embedding, bb.cls_w, bb.cls_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use crate::losses::cross_entropy;

    fn bag(rows: &[Vec<f64>]) -> SlideBag<f64> {
        SlideBag::new("test", Matrix::from_rows(rows), 0).unwrap()
    }

    fn identity_params(d: usize, c: usize) -> BackboneParams<f64> {
        BackboneParams {
            variant: BackboneVariant::MeanPool,
            proj_w: Matrix::identity(d),
            proj_b: Matrix::zeros(1, d),
            attn_v: Matrix::zeros(d, 1),
            attn_u: Matrix::zeros(1, 1),
            cls_w: Matrix::zeros(d, c),
            cls_b: Matrix::zeros(1, c),
        }
    }

    #[test]
    fn mean_pool_identity_projection_hand_value() {
        let params = identity_params(2, 2);
        let b = bag(&[vec![1.0, 3.0], vec![3.0, 1.0]]);
        let mut tape = Tape::new();
        let bb = params.bind(&mut tape, false);
        let e = embed_slide(&mut tape, &b, &bb).unwrap();
        let d = tape.data(e.value);
        assert!((d[(0, 0)] - 2f64.tanh()).abs() < 1e-15);
        assert!((d[(0, 1)] - 2f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn attention_pool_identical_instances_ignores_attention() {
        let mut rng = Rng::new(9);
        let params = BackboneParams::<f64>::init(BackboneVariant::AttentionPool, 3, 4, 2, 2, &mut rng);
        let row = vec![0.5, -1.0, 2.0];
        let b = bag(&[row.clone(), row.clone(), row.clone()]);
        let mut tape = Tape::new();
        let bb = params.bind(&mut tape, false);
        let e = embed_slide(&mut tape, &b, &bb).unwrap();

        // With equal scores the softmax is uniform; the embedding must equal
        // the projection of any single instance.
        let single = bag(&[row]);
        let mut tape2 = Tape::new();
        let bb2 = params.bind(&mut tape2, false);
        let instances = tape2.constant(single.instances.clone());
        let projected = affine(&mut tape2, instances, bb2.proj_w, bb2.proj_b).unwrap();
        for (a, b) in tape.data(e.value).data().iter().zip(tape2.data(projected).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let attn = tape.data(e.attention.unwrap());
        assert!(attn.data().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn attention_weights_sum_to_one_for_random_bags() {
        let mut rng = Rng::new(21);
        let params = BackboneParams::<f64>::init(BackboneVariant::AttentionPool, 5, 6, 3, 2, &mut rng);
        for _ in 0..10 {
            let m = 2 + rng.below(7);
            let b = SlideBag::new("r", rng.normal_matrix(m, 5, 0.0, 1.0), 0).unwrap();
            let mut tape = Tape::new();
            let bb = params.bind(&mut tape, false);
            let e = embed_slide(&mut tape, &b, &bb).unwrap();
            let attn = tape.data(e.attention.unwrap());
            let s: f64 = attn.data().iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn embedding_is_permutation_invariant() {
        let mut rng = Rng::new(33);
        for variant in [BackboneVariant::MeanPool, BackboneVariant::AttentionPool] {
            let params = BackboneParams::<f64>::init(variant, 4, 5, 3, 2, &mut rng);
            let inst = rng.normal_matrix(6, 4, 0.0, 1.0);
            let mut shuffled_rows: Vec<Vec<f64>> = (0..6).map(|i| inst.row(i).to_vec()).collect();
            let mut order: Vec<usize> = (0..6).collect();
            rng.shuffle(&mut order);
            shuffled_rows = order.iter().map(|&i| shuffled_rows[i].clone()).collect();

            let b1 = SlideBag::new("a", inst, 0).unwrap();
            let b2 = SlideBag::new("b", Matrix::from_rows(&shuffled_rows), 0).unwrap();

            let mut t1 = Tape::new();
            let bb1 = params.bind(&mut t1, false);
            let e1 = embed_slide(&mut t1, &b1, &bb1).unwrap();
            let mut t2 = Tape::new();
            let bb2 = params.bind(&mut t2, false);
            let e2 = embed_slide(&mut t2, &b2, &bb2).unwrap();

            for (a, b) in t1.data(e1.value).data().iter().zip(t2.data(e2.value).data()) {
                assert!((a - b).abs() < 1e-9, "{variant:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn mean_pool_embedding_is_bounded_by_tanh() {
        let mut rng = Rng::new(4);
        let params = BackboneParams::<f64>::init(BackboneVariant::MeanPool, 4, 5, 3, 2, &mut rng);
        let b = SlideBag::new("r", rng.normal_matrix(8, 4, 0.0, 10.0), 0).unwrap();
        let mut tape = Tape::new();
        let bb = params.bind(&mut tape, false);
        let e = embed_slide(&mut tape, &b, &bb).unwrap();
        assert!(tape.data(e.value).data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn attention_pool_embedding_in_box_hull_of_projected_instances() {
        let mut rng = Rng::new(77);
        let params = BackboneParams::<f64>::init(BackboneVariant::AttentionPool, 4, 5, 3, 2, &mut rng);
        let b = SlideBag::new("r", rng.normal_matrix(7, 4, 0.0, 1.0), 0).unwrap();

        let mut tape = Tape::new();
        let bb = params.bind(&mut tape, false);
        let instances = tape.constant(b.instances.clone());
        let projected = affine(&mut tape, instances, bb.proj_w, bb.proj_b).unwrap();
        let e = embed_slide(&mut tape, &b, &bb).unwrap();

        let p = tape.data(projected);
        let emb = tape.data(e.value);
        for d in 0..emb.cols() {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for r in 0..p.rows() {
                lo = lo.min(p[(r, d)]);
                hi = hi.max(p[(r, d)]);
            }
            assert!(emb[(0, d)] >= lo - 1e-12 && emb[(0, d)] <= hi + 1e-12);
        }
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let mut rng = Rng::new(1);
        let params = BackboneParams::<f64>::init(BackboneVariant::MeanPool, 4, 5, 3, 2, &mut rng);
        let b = bag(&[vec![1.0, 2.0]]);
        let mut tape = Tape::new();
        let bb = params.bind(&mut tape, false);
        assert!(matches!(embed_slide(&mut tape, &b, &bb), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn cls_mil_zero_weights_give_uniform_prediction() {
        let params = identity_params(3, 4);
        let mut tape = Tape::new();
        let bb = params.bind(&mut tape, false);
        let emb = tape.constant(Matrix::from_rows(&[vec![0.3, -0.2, 0.9]]));
        let logits = cls_mil(&mut tape, emb, &bb).unwrap();
        assert!(tape.data(logits).data().iter().all(|&v| v == 0.0));
        let probs = tape.softmax_rows(logits).unwrap();
        assert!(tape.data(probs).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn cls_mil_identity_weights_shift_by_bias() {
        let mut params = identity_params(3, 3);
        params.cls_w = Matrix::identity(3);
        params.cls_b = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let mut tape = Tape::new();
        let bb = params.bind(&mut tape, false);
        let emb = tape.constant(Matrix::from_rows(&[vec![0.5, -0.5, 0.25]]));
        let logits = cls_mil(&mut tape, emb, &bb).unwrap();
        assert_eq!(tape.data(logits).data(), &[1.5, 1.5, 3.25]);
    }

    #[test]
    fn cls_gradient_matches_finite_differences() {
        let mut rng = Rng::new(55);
        let cls_w: Matrix<f64> = rng.glorot_matrix(5, 3);
        let cls_b: Matrix<f64> = rng.normal_matrix(1, 3, 0.0, 0.1);
        let emb: Matrix<f64> = rng.normal_matrix(4, 5, 0.0, 1.0);
        let labels = vec![0usize, 2, 1, 0];

        let report = grad_check(
            |t, ids| {
                let e = t.constant(emb.clone());
                let logits = affine(t, e, ids[0], ids[1])?;
                let probs = t.softmax_rows(logits)?;
                cross_entropy(t, probs, &labels)
            },
            &[("cls_w", cls_w), ("cls_b", cls_b)],
            GradCheckOptions { eps: 1e-6, tol: 1e-5 },
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
