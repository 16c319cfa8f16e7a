//! Finite-difference verification suites: per-layer checks plus the full
//! two-branch pipeline objective on a small seeded instance, with every
//! trainable parameter group checked against central differences.

use crate::autodiff::{Tape, ValueId};
use crate::backbone::{cls_mil, embed_batch, BackboneBinding, BackboneParams, BackboneVariant, SlideBag};
use crate::config::TrainConfig;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::graph::{agg_project, build_propagation_operator, knn_hyperedges, AggParams};
use crate::hgcn::{centering_attention, cls_graph, graph_forward, hgc_layer, CenteringMode, GcnBinding, GcnParams};
use crate::losses::js_kd_loss;
use crate::matrix::Matrix;
use crate::rng::{mix_seed, Rng};

/// Toy dimensions for the pipeline check: a 16-node graph with a 4-slide
/// live batch over 4 classes.
fn toy_config() -> TrainConfig {
    TrainConfig {
        k: 3,
        buffer_capacity: 16,
        batch_size: 4,
        d_p: 8,
        d_s: 8,
        d_a: Some(4),
        d_m: Some(8),
        classes: 4,
        ..TrainConfig::default()
    }
}

fn toy_bags(cfg: &TrainConfig, rng: &mut Rng) -> Vec<SlideBag<f64>> {
    (0..cfg.batch_size)
        .map(|i| {
            let m = 3 + rng.below(4);
            SlideBag::new(
                format!("toy_{i}"),
                rng.normal_matrix(m, cfg.d_p, 0.0, 1.0),
                i % cfg.classes,
            )
            .expect("toy bag")
        })
        .collect()
}

fn backbone_binding_from_ids(ids: &[ValueId]) -> BackboneBinding {
    BackboneBinding {
        variant: BackboneVariant::AttentionPool,
        proj_w: ids[0],
        proj_b: ids[1],
        attn_v: ids[2],
        attn_u: ids[3],
        cls_w: ids[4],
        cls_b: ids[5],
    }
}

fn gcn_binding_from_ids(capacity: usize, ids: &[ValueId]) -> GcnBinding {
    GcnBinding {
        capacity,
        theta1: ids[0],
        theta2: ids[1],
        w0: ids[2],
        w1: ids[3],
        mlp1: ids[4],
        mlp_b1: ids[5],
        mlp2: ids[6],
        mlp_b2: ids[7],
    }
}

/// Checks every trainable parameter group of the full objective — backbone,
/// MIL head and graph branch under the combined CE + CE + distillation loss —
/// on a seeded 16-node toy instance.
///
/// The distillation teacher is frozen at the base parameters: the optimized
/// objective stops gradients at the teacher logits, so the finite-difference
/// oracle must differentiate the same function (otherwise it would report the
/// deliberately-dropped teacher path as an error).
pub fn full_pipeline_grad_check(seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let cfg = toy_config();
    let mut rng = Rng::new(mix_seed(seed, 0xd1a6));
    let bags = toy_bags(&cfg, &mut rng);
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let buffered: Matrix<f64> =
        rng.normal_matrix(cfg.buffer_capacity - cfg.batch_size, cfg.d_s, 0.0, 0.5);

    let mut init_rng = Rng::new(mix_seed(seed, 0x5eed));
    let backbone = BackboneParams::<f64>::init(
        BackboneVariant::AttentionPool,
        cfg.d_p,
        cfg.d_s,
        cfg.attn_dim(),
        cfg.classes,
        &mut init_rng,
    );
    let gcn = GcnParams::<f64>::init(
        cfg.d_s,
        cfg.buffer_capacity,
        cfg.mlp_hidden_dim(),
        cfg.classes,
        &mut init_rng,
    );
    let agg = AggParams::<f64>::init(cfg.d_s, cfg.agg_hidden_dim(), &mut init_rng);

    // Teacher logits at the base point.
    let teacher_logits = {
        let mut tape = Tape::new();
        let bind = backbone.bind(&mut tape, false);
        let refs: Vec<&SlideBag<f64>> = bags.iter().collect();
        let emb = embed_batch(&mut tape, &refs, &bind)?;
        let logits = cls_mil(&mut tape, emb, &bind)?;
        tape.data(logits).clone()
    };

    let mut params: Vec<(&str, Matrix<f64>)> = Vec::new();
    for (name, m) in [
        ("backbone.proj_w", &backbone.proj_w),
        ("backbone.proj_b", &backbone.proj_b),
        ("backbone.attn_v", &backbone.attn_v),
        ("backbone.attn_u", &backbone.attn_u),
        ("backbone.cls_w", &backbone.cls_w),
        ("backbone.cls_b", &backbone.cls_b),
    ] {
        params.push((name, m.clone()));
    }
    for (name, m) in gcn.named() {
        params.push((name, m.clone()));
    }

    let capacity = cfg.buffer_capacity;
    let batch = cfg.batch_size;
    grad_check(
        move |tape: &mut Tape<f64>, ids: &[ValueId]| {
            let bb = backbone_binding_from_ids(&ids[..6]);
            let gb = gcn_binding_from_ids(capacity, &ids[6..]);
            let refs: Vec<&SlideBag<f64>> = bags.iter().collect();
            let live = embed_batch(tape, &refs, &bb)?;
            let context = tape.constant(buffered.clone());
            let x0 = tape.concat_rows(&[live, context])?;
            let projected = agg_project(tape.data(x0), &agg)?;
            let hypergraph = knn_hyperedges(&projected, cfg.k, 0..batch)?;
            let propagation = build_propagation_operator(&hypergraph)?;
            let graph_out = graph_forward(
                tape,
                x0,
                &propagation,
                &gb,
                0..batch,
                cfg.leaky_slope,
                CenteringMode::Global,
            )?;
            let logits_mil = cls_mil(tape, live, &bb)?;
            let probs_mil = tape.softmax_rows(logits_mil)?;
            let ce_mil = crate::losses::cross_entropy(tape, probs_mil, &labels)?;
            let ce_graph = crate::losses::cross_entropy(tape, graph_out.probs, &labels)?;
            let teacher = tape.constant(teacher_logits.clone());
            let kd = js_kd_loss(tape, graph_out.logits, teacher, cfg.t_hat)?;
            let weighted = tape.scale(kd, cfg.kd_weight);
            let ce_sum = tape.add(ce_mil, ce_graph)?;
            tape.add(ce_sum, weighted)
        },
        &params,
        GradCheckOptions { eps, tol },
    )
}

/// Per-layer finite-difference suite, as printed by the CLI: one report per
/// layer plus the full pipeline at the end.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out: Vec<(String, GradCheckReport)> = Vec::new();
    let mut rng = Rng::new(mix_seed(seed, 0x5017e));

    // Backbone embedding + MIL head under CE.
    {
        let cfg = toy_config();
        let bags = toy_bags(&cfg, &mut rng);
        let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
        let mut init_rng = Rng::new(mix_seed(seed, 1));
        let backbone = BackboneParams::<f64>::init(
            BackboneVariant::AttentionPool,
            cfg.d_p,
            cfg.d_s,
            cfg.attn_dim(),
            cfg.classes,
            &mut init_rng,
        );
        let params: Vec<(&str, Matrix<f64>)> = vec![
            ("backbone.proj_w", backbone.proj_w.clone()),
            ("backbone.proj_b", backbone.proj_b.clone()),
            ("backbone.attn_v", backbone.attn_v.clone()),
            ("backbone.attn_u", backbone.attn_u.clone()),
            ("backbone.cls_w", backbone.cls_w.clone()),
            ("backbone.cls_b", backbone.cls_b.clone()),
        ];
        let report = grad_check(
            move |tape, ids| {
                let bb = backbone_binding_from_ids(ids);
                let refs: Vec<&SlideBag<f64>> = bags.iter().collect();
                let emb = embed_batch(tape, &refs, &bb)?;
                let logits = cls_mil(tape, emb, &bb)?;
                let probs = tape.softmax_rows(logits)?;
                crate::losses::cross_entropy(tape, probs, &labels)
            },
            &params,
            GradCheckOptions { eps: 1e-6, tol: 1e-5 },
        )?;
        out.push(("backbone + mil head".into(), report));
    }

    // One propagation layer.
    {
        let n = 6;
        let x: Matrix<f64> = rng.normal_matrix(n, 4, 0.0, 1.0);
        let projected = x.clone();
        let hg = knn_hyperedges(&projected, 2, 0..n)?;
        let p = build_propagation_operator(&hg)?;
        let theta: Matrix<f64> = Rng::new(mix_seed(seed, 2)).glorot_matrix(4, 4);
        let report = grad_check(
            move |tape, ids| {
                let xi = tape.constant(x.clone());
                let pi = tape.constant(p.clone());
                let y = hgc_layer(tape, xi, pi, ids[0], 0.01)?;
                let sq = tape.hadamard(y, y)?;
                tape.sum_all(sq)
            },
            &[("gcn.theta", theta)],
            GradCheckOptions { eps: 1e-6, tol: 1e-5 },
        )?;
        out.push(("propagation layer".into(), report));
    }

    // Centering attention.
    {
        let n = 6;
        let mut init_rng = Rng::new(mix_seed(seed, 3));
        let gcn = GcnParams::<f64>::init(2, n, 3, 2, &mut init_rng);
        let h: Matrix<f64> = rng.normal_matrix(n, 6, 0.0, 1.0);
        let statics = gcn.clone();
        let report = grad_check(
            move |tape, ids| {
                let gb = GcnBinding {
                    capacity: n,
                    theta1: tape.constant(statics.theta1.clone()),
                    theta2: tape.constant(statics.theta2.clone()),
                    w0: ids[0],
                    w1: ids[1],
                    mlp1: tape.constant(statics.mlp1.clone()),
                    mlp_b1: tape.constant(statics.mlp_b1.clone()),
                    mlp2: tape.constant(statics.mlp2.clone()),
                    mlp_b2: tape.constant(statics.mlp_b2.clone()),
                };
                let hi = tape.constant(h.clone());
                let att = centering_attention(tape, hi, &gb, CenteringMode::Global)?;
                let sq = tape.hadamard(att.hprime, att.hprime)?;
                tape.sum_all(sq)
            },
            &[("gcn.w0", gcn.w0.clone()), ("gcn.w1", gcn.w1.clone())],
            GradCheckOptions { eps: 1e-5, tol: 1e-4 },
        )?;
        out.push(("centering attention".into(), report));
    }

    // Graph classifier head.
    {
        let n = 5;
        let mut init_rng = Rng::new(mix_seed(seed, 4));
        let gcn = GcnParams::<f64>::init(2, n, 3, 3, &mut init_rng);
        let hprime: Matrix<f64> = rng.normal_matrix(n, 6, 0.0, 1.0);
        let labels = vec![0usize, 2];
        let statics = gcn.clone();
        let report = grad_check(
            move |tape, ids| {
                let gb = GcnBinding {
                    capacity: n,
                    theta1: tape.constant(statics.theta1.clone()),
                    theta2: tape.constant(statics.theta2.clone()),
                    w0: tape.constant(statics.w0.clone()),
                    w1: tape.constant(statics.w1.clone()),
                    mlp1: ids[0],
                    mlp_b1: ids[1],
                    mlp2: ids[2],
                    mlp_b2: ids[3],
                };
                let hi = tape.constant(hprime.clone());
                let (probs, _) = cls_graph(tape, hi, &gb, 0..2)?;
                crate::losses::cross_entropy(tape, probs, &labels)
            },
            &[
                ("gcn.mlp1", gcn.mlp1.clone()),
                ("gcn.mlp_b1", gcn.mlp_b1.clone()),
                ("gcn.mlp2", gcn.mlp2.clone()),
                ("gcn.mlp_b2", gcn.mlp_b2.clone()),
            ],
            GradCheckOptions { eps: 1e-6, tol: 1e-5 },
        )?;
        out.push(("graph classifier".into(), report));
    }

    // Distillation term (student side).
    {
        let g0: Matrix<f64> = rng.normal_matrix(3, 4, 0.0, 1.0);
        let mil0: Matrix<f64> = rng.normal_matrix(3, 4, 0.0, 1.0);
        let report = grad_check(
            move |tape, ids| {
                let mil = tape.constant(mil0.clone());
                js_kd_loss(tape, ids[0], mil, 1.5)
            },
            &[("logits_g", g0)],
            GradCheckOptions { eps: 1e-6, tol: 1e-6 },
        )?;
        out.push(("distillation".into(), report));
    }

    out.push(("full pipeline".into(), full_pipeline_grad_check(seed, 1e-5, 1e-4)?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipeline_check_passes_on_fresh_seed() {
        let report = full_pipeline_grad_check(0, 1e-5, 1e-4).unwrap();
        assert!(report.pass, "\n{}", report.table());
        assert_eq!(report.per_param.len(), 14);
    }

    #[test]
    fn suite_passes_end_to_end() {
        for (name, report) in gradcheck_suite(7).unwrap() {
            assert!(report.pass, "{name} failed:\n{}", report.table());
        }
    }
}
