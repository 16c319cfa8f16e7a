//! Training orchestration: backbone warmup, collaborative steps with buffer
//! updates and graph construction, frozen-buffer inference, and stratified
//! cross-validation over two arms (MIL-only baseline vs. the full pipeline).
//!
//! Everything is driven by one seeded generator per run, so identical seeds
//! give bit-identical parameter trajectories, logs and reports in
//! single-threaded mode.

use serde::Serialize;

use crate::backbone::{cls_mil, embed_batch, BackboneParams, SlideBag};
use crate::buffer::NodeBuffer;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::{agg_project, build_propagation_operator, knn_hyperedges, AggMode, AggParams};
use crate::hgcn::{graph_forward, GcnParams};
use crate::losses::{cross_entropy, total_loss, LossBreakdown};
use crate::matrix::Matrix;
use crate::metrics::{evaluate_metrics, Metrics, MetricsReport};
use crate::optim::Adam;
use crate::rng::{mix_seed, Rng};
use crate::Tape;

pub const ARM_BASELINE: &str = "mil_only_baseline";
pub const ARM_SLIDEGCD: &str = "slidegcd";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Formal,
}

/// One training step, as surfaced to observers. `to_log_json` renders the
/// JSON-lines record written to the training log.
#[derive(Clone, Debug)]
pub struct StepEvent {
    pub arm: &'static str,
    pub fold: Option<usize>,
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub breakdown: LossBreakdown,
    /// Max-abs gradient over buffered node rows (collaborative steps only).
    pub buffer_grad_linf: Option<f64>,
    pub n_nodes: Option<usize>,
}

#[derive(Serialize)]
struct LogRecord<'a> {
    arm: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    fold: Option<usize>,
    phase: Phase,
    epoch: usize,
    step: usize,
    ce_mil: f64,
    ce_graph: f64,
    kd: f64,
    total: f64,
}

impl StepEvent {
    pub fn to_log_json(&self) -> String {
        serde_json::to_string(&LogRecord {
            arm: self.arm,
            fold: self.fold,
            phase: self.phase,
            epoch: self.epoch,
            step: self.step,
            ce_mil: self.breakdown.ce_mil,
            ce_graph: self.breakdown.ce_graph,
            kd: self.breakdown.kd,
            total: self.breakdown.total,
        })
        .expect("log record serializes")
    }
}

/// Observer for per-step events.
pub type OnStep<'a> = &'a mut dyn FnMut(&StepEvent);

/// Trained pipeline state; what a checkpoint holds.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub backbone: BackboneParams<f64>,
    pub agg: AggParams<f64>,
    pub gcn: GcnParams<f64>,
    pub buffer: NodeBuffer<f64>,
}

/// Initializes all parameter groups from one seed. Both arms call this with
/// the same seed, so their backbones start bit-identically.
pub fn init_params(
    cfg: &TrainConfig,
    seed: u64,
) -> (BackboneParams<f64>, GcnParams<f64>, AggParams<f64>) {
    let mut rng = Rng::new(seed);
    let backbone = BackboneParams::init(
        cfg.backbone_variant,
        cfg.d_p,
        cfg.d_s,
        cfg.attn_dim(),
        cfg.classes,
        &mut rng,
    );
    let gcn = GcnParams::init(
        cfg.d_s,
        cfg.buffer_capacity,
        cfg.mlp_hidden_dim(),
        cfg.classes,
        &mut rng,
    );
    let agg = AggParams::init(cfg.d_s, cfg.agg_hidden_dim(), &mut rng);
    (backbone, gcn, agg)
}

fn validate_bags(bags: &[&SlideBag<f64>], cfg: &TrainConfig) -> Result<()> {
    if bags.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    for bag in bags {
        if bag.label >= cfg.classes {
            return Err(Error::LabelOutOfRange { label: bag.label, classes: cfg.classes });
        }
    }
    Ok(())
}

fn apply_updates(
    adam: &mut Adam<f64>,
    named_mut: Vec<(&'static str, &mut Matrix<f64>)>,
    grads: Vec<(&'static str, Matrix<f64>)>,
) {
    debug_assert_eq!(named_mut.len(), grads.len());
    let updates = named_mut
        .into_iter()
        .zip(grads.iter())
        .map(|((name, param), (gname, grad))| {
            debug_assert_eq!(name, *gname);
            (name, param, grad)
        })
        .collect();
    adam.step(updates);
}

/// One CE-only step on the backbone and MIL head.
fn mil_step(
    batch: &[&SlideBag<f64>],
    backbone: &mut BackboneParams<f64>,
    adam: &mut Adam<f64>,
) -> Result<LossBreakdown> {
    let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();
    let mut tape = Tape::new();
    let bind = backbone.bind(&mut tape, true);
    let emb = embed_batch(&mut tape, batch, &bind)?;
    let logits = cls_mil(&mut tape, emb, &bind)?;
    let probs = tape.softmax_rows(logits)?;
    let ce = cross_entropy(&mut tape, probs, &labels)?;
    tape.backward(ce)?;
    let grads: Vec<(&'static str, Matrix<f64>)> = bind
        .named()
        .into_iter()
        .map(|(name, id)| (name, tape.grad(id).clone()))
        .collect();
    let ce_value = tape.scalar(ce);
    apply_updates(adam, backbone.named_mut(), grads);
    Ok(LossBreakdown { ce_mil: ce_value, ce_graph: 0.0, kd: 0.0, total: ce_value, w: 0.0, t_hat: 0.0 })
}

/// One warmup pass over the training set: only the backbone and MIL head are
/// optimized. Returns the mean CE over the epoch's steps.
pub fn warmup_epoch(
    bags: &[&SlideBag<f64>],
    order: &[usize],
    backbone: &mut BackboneParams<f64>,
    adam: &mut Adam<f64>,
    cfg: &TrainConfig,
    mut emit: impl FnMut(usize, LossBreakdown),
) -> Result<f64> {
    let mut total = 0.0;
    let mut steps = 0usize;
    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&SlideBag<f64>> = chunk.iter().map(|&i| bags[i]).collect();
        let breakdown = mil_step(&batch, backbone, adam)?;
        total += breakdown.ce_mil;
        steps += 1;
        emit(step, breakdown);
    }
    Ok(total / steps as f64)
}

/// Outcome of one collaborative step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub buffer_grad_linf: f64,
    pub n_nodes: usize,
}

fn knn_space(x0: &Matrix<f64>, agg: &AggParams<f64>, mode: AggMode) -> Result<Matrix<f64>> {
    match mode {
        AggMode::FixedRandom => agg_project(x0, agg),
        AggMode::Tied => Ok(x0.clone()),
    }
}

/// One collaborative training step: embed the batch, push gradient-isolated
/// copies into the buffer, assemble the node matrix (live batch at the head),
/// build the kNN hypergraph and its propagation operator, run both branches,
/// apply the combined objective and update all trainable parameters.
pub fn collaborative_step(
    batch: &[&SlideBag<f64>],
    backbone: &mut BackboneParams<f64>,
    gcn: &mut GcnParams<f64>,
    agg: &AggParams<f64>,
    buffer: &mut NodeBuffer<f64>,
    adam: &mut Adam<f64>,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();
    let ids: Vec<String> = batch.iter().map(|b| b.id.clone()).collect();

    let mut tape = Tape::new();
    let bb = backbone.bind(&mut tape, true);
    let gb = gcn.bind(&mut tape, true);

    let live = embed_batch(&mut tape, batch, &bb)?;
    buffer.push_batch(tape.data(live), &ids, &labels)?;
    let assembled = buffer.assemble_node_matrix(&mut tape, live, &ids)?;

    let projected = knn_space(tape.data(assembled.nodes), agg, cfg.agg_mode)?;
    let hypergraph = knn_hyperedges(&projected, cfg.k, 0..batch.len())?;
    let propagation = build_propagation_operator(&hypergraph)?;

    let graph_out = graph_forward(
        &mut tape,
        assembled.nodes,
        &propagation,
        &gb,
        0..batch.len(),
        cfg.leaky_slope,
        cfg.centering,
    )?;
    let logits_mil = cls_mil(&mut tape, live, &bb)?;
    let probs_mil = tape.softmax_rows(logits_mil)?;
    let loss = total_loss(
        &mut tape,
        probs_mil,
        logits_mil,
        graph_out.probs,
        graph_out.logits,
        &labels,
        cfg.kd_weight,
        cfg.t_hat,
    )?;
    tape.backward(loss.total)?;

    let buffer_grad_linf = assembled
        .buffer_rows
        .map(|id| tape.grad(id).max_abs())
        .unwrap_or(0.0);

    let mut grads: Vec<(&'static str, Matrix<f64>)> = Vec::new();
    for (name, id) in bb.named().into_iter().chain(gb.named()) {
        grads.push((name, tape.grad(id).clone()));
    }
    let mut named_mut = backbone.named_mut();
    named_mut.extend(gcn.named_mut());
    apply_updates(adam, named_mut, grads);

    Ok(StepOutcome { breakdown: loss.breakdown, buffer_grad_linf, n_nodes: assembled.n })
}

/// Gradient-free embeddings of `bags`, as plain rows.
fn embed_plain(bags: &[&SlideBag<f64>], backbone: &BackboneParams<f64>) -> Result<Matrix<f64>> {
    let mut tape = Tape::new();
    let bind = backbone.bind(&mut tape, false);
    let emb = embed_batch(&mut tape, bags, &bind)?;
    Ok(tape.data(emb).clone())
}

/// Softmax scores of the MIL head alone (the baseline arm's predictions).
pub fn predict_mil(bags: &[&SlideBag<f64>], backbone: &BackboneParams<f64>) -> Result<Matrix<f64>> {
    let mut tape = Tape::new();
    let bind = backbone.bind(&mut tape, false);
    let emb = embed_batch(&mut tape, bags, &bind)?;
    let logits = cls_mil(&mut tape, emb, &bind)?;
    let probs = tape.softmax_rows(logits)?;
    Ok(tape.data(probs).clone())
}

/// Trains the baseline arm: the identical backbone and MIL head, CE only,
/// with the same warmup/formal learning-rate schedule.
pub fn train_baseline(
    bags: &[&SlideBag<f64>],
    cfg: &TrainConfig,
    seed: u64,
    fold: Option<usize>,
    on_step: OnStep,
) -> Result<BackboneParams<f64>> {
    validate_bags(bags, cfg)?;
    let (mut backbone, _gcn, _agg) = init_params(cfg, seed);
    let mut rng = Rng::new(mix_seed(seed, 0x0bde7));
    let mut order: Vec<usize> = (0..bags.len()).collect();

    let mut warmup_adam = Adam::new(cfg.warmup_lr);
    for epoch in 0..cfg.warmup_epochs {
        rng.shuffle(&mut order);
        warmup_epoch(bags, &order, &mut backbone, &mut warmup_adam, cfg, |step, breakdown| {
            on_step(&StepEvent {
                arm: ARM_BASELINE,
                fold,
                phase: Phase::Warmup,
                epoch,
                step,
                breakdown,
                buffer_grad_linf: None,
                n_nodes: None,
            });
        })?;
    }
    let mut formal_adam = Adam::new(cfg.formal_lr);
    for e in 0..cfg.epochs {
        let epoch = cfg.warmup_epochs + e;
        rng.shuffle(&mut order);
        warmup_epoch(bags, &order, &mut backbone, &mut formal_adam, cfg, |step, breakdown| {
            on_step(&StepEvent {
                arm: ARM_BASELINE,
                fold,
                phase: Phase::Formal,
                epoch,
                step,
                breakdown,
                buffer_grad_linf: None,
                n_nodes: None,
            });
        })?;
    }
    Ok(backbone)
}

/// Trains the full pipeline: backbone warmup, then collaborative steps that
/// update the buffer and both branches.
pub fn train_collaborative(
    bags: &[&SlideBag<f64>],
    cfg: &TrainConfig,
    seed: u64,
    fold: Option<usize>,
    on_step: OnStep,
) -> Result<TrainedModel> {
    validate_bags(bags, cfg)?;
    let (mut backbone, mut gcn, agg) = init_params(cfg, seed);
    let mut rng = Rng::new(mix_seed(seed, 0x0bde7));
    let mut order: Vec<usize> = (0..bags.len()).collect();

    let mut warmup_adam = Adam::new(cfg.warmup_lr);
    for epoch in 0..cfg.warmup_epochs {
        rng.shuffle(&mut order);
        warmup_epoch(bags, &order, &mut backbone, &mut warmup_adam, cfg, |step, breakdown| {
            on_step(&StepEvent {
                arm: ARM_SLIDEGCD,
                fold,
                phase: Phase::Warmup,
                epoch,
                step,
                breakdown,
                buffer_grad_linf: None,
                n_nodes: None,
            });
        })?;
    }

    let mut buffer = NodeBuffer::new(cfg.buffer_capacity, cfg.d_s);
    if cfg.seed_buffer_from_warmup {
        for chunk in (0..bags.len()).collect::<Vec<_>>().chunks(cfg.batch_size) {
            let batch: Vec<&SlideBag<f64>> = chunk.iter().map(|&i| bags[i]).collect();
            let emb = embed_plain(&batch, &backbone)?;
            let ids: Vec<String> = batch.iter().map(|b| b.id.clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();
            buffer.push_batch(&emb, &ids, &labels)?;
        }
    }

    let mut formal_adam = Adam::new(cfg.formal_lr);
    for e in 0..cfg.epochs {
        let epoch = cfg.warmup_epochs + e;
        rng.shuffle(&mut order);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SlideBag<f64>> = chunk.iter().map(|&i| bags[i]).collect();
            let outcome = collaborative_step(
                &batch,
                &mut backbone,
                &mut gcn,
                &agg,
                &mut buffer,
                &mut formal_adam,
                cfg,
            )?;
            on_step(&StepEvent {
                arm: ARM_SLIDEGCD,
                fold,
                phase: Phase::Formal,
                epoch,
                step,
                breakdown: outcome.breakdown,
                buffer_grad_linf: Some(outcome.buffer_grad_linf),
                n_nodes: Some(outcome.n_nodes),
            });
        }
    }

    Ok(TrainedModel { config: cfg.clone(), backbone, agg, gcn, buffer })
}

/// Frozen-state inference for a batch of query slides: each query is
/// embedded, attached to its k nearest buffer nodes by one hyperedge, and
/// classified by the graph branch. The buffer itself is never modified.
/// Queries are processed in groups of at most the training batch size so the
/// node layout each graph presents to the position-sized attention weights
/// matches the layout they were trained on.
pub fn infer_batch(bags: &[&SlideBag<f64>], model: &TrainedModel) -> Result<Matrix<f64>> {
    if bags.is_empty() {
        return Err(Error::EmptyInput("infer_batch of zero bags".into()));
    }
    let chunk_size = model.config.batch_size;
    let mut scores = Matrix::zeros(bags.len(), model.config.classes);
    let mut row = 0usize;
    for chunk in bags.chunks(chunk_size) {
        let probs = infer_chunk(chunk, model)?;
        for r in 0..probs.rows() {
            scores.row_mut(row).copy_from_slice(probs.row(r));
            row += 1;
        }
    }
    Ok(scores)
}

fn infer_chunk(bags: &[&SlideBag<f64>], model: &TrainedModel) -> Result<Matrix<f64>> {
    if model.buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let t = bags.len();
    let capacity = model.config.buffer_capacity;
    if t >= capacity {
        return Err(Error::BufferOverCapacity { n: t, capacity });
    }
    let take = model.buffer.len().min(capacity - t);

    let mut tape = Tape::new();
    let bb = model.backbone.bind(&mut tape, false);
    let gb = model.gcn.bind(&mut tape, false);
    let queries = embed_batch(&mut tape, bags, &bb)?;
    let x0 = if take > 0 {
        let context = tape.constant(model.buffer.rows_matrix(0, take));
        tape.concat_rows(&[queries, context])?
    } else {
        queries
    };
    let projected = knn_space(tape.data(x0), &model.agg, model.config.agg_mode)?;
    let hypergraph = knn_hyperedges(&projected, model.config.k, 0..t)?;
    let propagation = build_propagation_operator(&hypergraph)?;
    let out = graph_forward(
        &mut tape,
        x0,
        &propagation,
        &gb,
        0..t,
        model.config.leaky_slope,
        model.config.centering,
    )?;
    Ok(tape.data(out.probs).clone())
}

/// Single-slide inference: predicted class plus the class-probability row.
pub fn infer_slide(bag: &SlideBag<f64>, model: &TrainedModel) -> Result<(usize, Vec<f64>)> {
    let probs = infer_batch(&[bag], model)?;
    Ok((probs.argmax_row(0), probs.row(0).to_vec()))
}

/// Stratified fold assignment: per class, samples are shuffled and dealt
/// round-robin, so per-fold class proportions stay within one sample of the
/// global proportions and every sample lands in exactly one fold.
pub fn stratified_folds(labels: &[usize], classes: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::invalid("folds", "must be at least 2"));
    }
    let mut rng = Rng::new(mix_seed(seed, 0xf01d5));
    let mut assignment = vec![0usize; labels.len()];
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < folds {
            return Err(Error::InsufficientClassSamples { class, count: members.len(), folds });
        }
        rng.shuffle(&mut members);
        for (pos, &i) in members.iter().enumerate() {
            assignment[i] = (pos + class) % folds;
        }
    }
    Ok(assignment)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArmSelect {
    MilOnly,
    SlideGcd,
    Both,
}

#[derive(Clone, Debug, Serialize)]
pub struct ImprovementDelta {
    pub acc: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

/// Cross-validation result, one [`MetricsReport`] per trained arm.
#[derive(Clone, Debug, Serialize)]
pub struct CvReport {
    pub folds: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mil_only_baseline: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slidegcd: Option<MetricsReport>,
    /// `slidegcd - baseline` on the mean metrics, when both arms ran.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub improvement: Option<ImprovementDelta>,
}

/// Stratified k-fold cross-validation. Both arms of each fold train on the
/// identical split with the identical fold seed; the baseline arm predicts
/// with the MIL head, the graph arm with per-slide frozen-buffer inference.
pub fn run_cv(
    bags: &[SlideBag<f64>],
    cfg: &TrainConfig,
    arms: ArmSelect,
    on_step: OnStep,
) -> Result<CvReport> {
    cfg.validate()?;
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    for bag in bags {
        if bag.label >= cfg.classes {
            return Err(Error::LabelOutOfRange { label: bag.label, classes: cfg.classes });
        }
    }
    let assignment = stratified_folds(&labels, cfg.classes, cfg.folds, cfg.seed)?;

    let mut baseline_folds: Vec<Metrics> = Vec::new();
    let mut graph_folds: Vec<Metrics> = Vec::new();

    for fold in 0..cfg.folds {
        let train_refs: Vec<&SlideBag<f64>> = bags
            .iter()
            .enumerate()
            .filter(|(i, _)| assignment[*i] != fold)
            .map(|(_, b)| b)
            .collect();
        let test_refs: Vec<&SlideBag<f64>> = bags
            .iter()
            .enumerate()
            .filter(|(i, _)| assignment[*i] == fold)
            .map(|(_, b)| b)
            .collect();
        let test_labels: Vec<usize> = test_refs.iter().map(|b| b.label).collect();
        let fold_seed = mix_seed(cfg.seed, fold as u64);

        if matches!(arms, ArmSelect::MilOnly | ArmSelect::Both) {
            let backbone = train_baseline(&train_refs, cfg, fold_seed, Some(fold), on_step)?;
            let scores = predict_mil(&test_refs, &backbone)?;
            baseline_folds.push(evaluate_metrics(&scores, &test_labels, cfg.classes)?);
        }
        if matches!(arms, ArmSelect::SlideGcd | ArmSelect::Both) {
            let model = train_collaborative(&train_refs, cfg, fold_seed, Some(fold), on_step)?;
            let mut scores = Matrix::zeros(test_refs.len(), cfg.classes);
            for (r, bag) in test_refs.iter().enumerate() {
                let (_, probs) = infer_slide(bag, &model)?;
                scores.row_mut(r).copy_from_slice(&probs);
            }
            graph_folds.push(evaluate_metrics(&scores, &test_labels, cfg.classes)?);
        }
    }

    let mil_only_baseline =
        (!baseline_folds.is_empty()).then(|| MetricsReport::aggregate(baseline_folds));
    let slidegcd = (!graph_folds.is_empty()).then(|| MetricsReport::aggregate(graph_folds));
    let improvement = match (&mil_only_baseline, &slidegcd) {
        (Some(base), Some(graph)) => Some(ImprovementDelta {
            acc: graph.mean_acc - base.mean_acc,
            f1: graph.mean_f1 - base.mean_f1,
            auc: match (graph.mean_auc, base.mean_auc) {
                (Some(g), Some(b)) => Some(g - b),
                _ => None,
            },
        }),
        _ => None,
    };

    Ok(CvReport { folds: cfg.folds, seed: cfg.seed, mil_only_baseline, slidegcd, improvement })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_bags, SyntheticSpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            buffer_capacity: 24,
            batch_size: 4,
            warmup_epochs: 2,
            epochs: 2,
            d_p: 6,
            d_s: 8,
            classes: 2,
            k: 3,
            folds: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_bags(cfg: &TrainConfig, n: usize, seed: u64) -> Vec<SlideBag<f64>> {
        let spec = SyntheticSpec {
            num_slides: n,
            classes: cfg.classes,
            instances_min: 3,
            instances_max: 6,
            feature_dim: cfg.d_p,
            witness_rate: 0.5,
            prototype_separation: 6.0,
            noise_sigma: 0.5,
            seed,
        };
        generate_bags(&spec).unwrap().0
    }

    #[test]
    fn warmup_leaves_graph_parameters_untouched() {
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
        let bags = tiny_bags(&cfg, 12, 1);
        let refs: Vec<&SlideBag<f64>> = bags.iter().collect();
        let model = train_collaborative(&refs, &cfg, 7, None, &mut |_| {}).unwrap();
        let (fresh_backbone, fresh_gcn, fresh_agg) = init_params(&cfg, 7);
        assert_eq!(model.gcn, fresh_gcn, "graph branch must be untouched by warmup");
        assert_eq!(model.agg, fresh_agg, "projection must be untouched by warmup");
        assert_ne!(model.backbone, fresh_backbone, "backbone must have trained");
    }

    #[test]
    fn zero_warmup_skips_straight_to_formal() {
        let cfg = TrainConfig { warmup_epochs: 0, epochs: 1, ..tiny_cfg() };
        let bags = tiny_bags(&cfg, 8, 2);
        let refs: Vec<&SlideBag<f64>> = bags.iter().collect();
        let mut first_epoch = None;
        let mut phases = Vec::new();
        train_collaborative(&refs, &cfg, 3, None, &mut |e| {
            first_epoch.get_or_insert(e.epoch);
            phases.push(e.phase);
        })
        .unwrap();
        assert_eq!(first_epoch, Some(0));
        assert!(phases.iter().all(|&p| p == Phase::Formal));
    }

    #[test]
    fn warmup_ce_decreases_on_separable_toy_data() {
        let cfg = TrainConfig {
            warmup_epochs: 5,
            epochs: 0,
            warmup_lr: 5e-3,
            ..tiny_cfg()
        };
        let bags = tiny_bags(&cfg, 16, 4);
        let refs: Vec<&SlideBag<f64>> = bags.iter().collect();
        let (mut backbone, _, _) = init_params(&cfg, 11);
        let mut adam = Adam::new(cfg.warmup_lr);
        let order: Vec<usize> = (0..refs.len()).collect();
        let mut losses = Vec::new();
        for _ in 0..cfg.warmup_epochs {
            let loss =
                warmup_epoch(&refs, &order, &mut backbone, &mut adam, &cfg, |_, _| {}).unwrap();
            losses.push(loss);
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "warmup CE must decrease monotonically: {losses:?}");
        }
    }

    #[test]
    fn collaborative_step_grows_buffer_by_batch() {
        let cfg = tiny_cfg();
        let bags = tiny_bags(&cfg, 12, 5);
        let refs: Vec<&SlideBag<f64>> = bags.iter().collect();
        let (mut backbone, mut gcn, agg) = init_params(&cfg, 13);
        let mut buffer = NodeBuffer::new(cfg.buffer_capacity, cfg.d_s);
        let mut adam = Adam::new(cfg.formal_lr);
        let mut expected = 0usize;
        for chunk in (0..refs.len()).collect::<Vec<_>>().chunks(cfg.batch_size) {
            let batch: Vec<&SlideBag<f64>> = chunk.iter().map(|&i| refs[i]).collect();
            let out = collaborative_step(
                &batch, &mut backbone, &mut gcn, &agg, &mut buffer, &mut adam, &cfg,
            )
            .unwrap();
            expected = (expected + batch.len()).min(cfg.buffer_capacity);
            assert_eq!(buffer.len(), expected);
            assert_eq!(out.n_nodes, expected);
            assert_eq!(out.buffer_grad_linf, 0.0);
        }
    }

    #[test]
    fn identical_seeds_give_identical_loss_streams() {
        let cfg = tiny_cfg();
        let bags = tiny_bags(&cfg, 12, 6);
        let refs: Vec<&SlideBag<f64>> = bags.iter().collect();
        let run = || {
            let mut stream = Vec::new();
            train_collaborative(&refs, &cfg, 21, None, &mut |e| {
                stream.push(e.to_log_json());
            })
            .unwrap();
            stream
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn inference_is_pure_and_repeatable() {
        let cfg = tiny_cfg();
        let bags = tiny_bags(&cfg, 12, 7);
        let refs: Vec<&SlideBag<f64>> = bags.iter().collect();
        let model = train_collaborative(&refs, &cfg, 31, None, &mut |_| {}).unwrap();
        let buffer_before: Vec<String> =
            model.buffer.slots().map(|s| s.slide_id.clone()).collect();
        let (class1, probs1) = infer_slide(refs[0], &model).unwrap();
        let (class2, probs2) = infer_slide(refs[0], &model).unwrap();
        assert_eq!(class1, class2);
        assert_eq!(probs1, probs2);
        let buffer_after: Vec<String> = model.buffer.slots().map(|s| s.slide_id.clone()).collect();
        assert_eq!(buffer_before, buffer_after);
        let s: f64 = probs1.iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn inference_with_empty_buffer_fails() {
        let cfg = TrainConfig { warmup_epochs: 1, epochs: 0, ..tiny_cfg() };
        let bags = tiny_bags(&cfg, 8, 8);
        let refs: Vec<&SlideBag<f64>> = bags.iter().collect();
        let model = train_collaborative(&refs, &cfg, 41, None, &mut |_| {}).unwrap();
        assert!(matches!(infer_slide(refs[0], &model), Err(Error::EmptyBuffer)));
    }

    #[test]
    fn minimal_graph_inference_works() {
        // Buffer of one node, k = 1: the query attaches to that single node.
        let cfg = TrainConfig { k: 1, warmup_epochs: 0, epochs: 0, ..tiny_cfg() };
        let bags = tiny_bags(&cfg, 4, 9);
        let refs: Vec<&SlideBag<f64>> = bags.iter().collect();
        let mut model = train_collaborative(&refs, &cfg, 51, None, &mut |_| {}).unwrap();
        let emb = embed_plain(&refs[..1], &model.backbone).unwrap();
        model
            .buffer
            .push_batch(&emb, &[refs[0].id.clone()], &[refs[0].label])
            .unwrap();
        let (_, probs) = infer_slide(refs[1], &model).unwrap();
        let s: f64 = probs.iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn seeded_buffer_flag_prefills_before_formal_phase() {
        let cfg = TrainConfig { seed_buffer_from_warmup: true, epochs: 0, ..tiny_cfg() };
        let bags = tiny_bags(&cfg, 12, 10);
        let refs: Vec<&SlideBag<f64>> = bags.iter().collect();
        let model = train_collaborative(&refs, &cfg, 61, None, &mut |_| {}).unwrap();
        assert_eq!(model.buffer.len(), 12.min(cfg.buffer_capacity));
    }

    #[test]
    fn fold_assignment_is_a_stratified_partition() {
        let labels: Vec<usize> = (0..23).map(|i| i % 3).collect();
        let assignment = stratified_folds(&labels, 3, 5, 0).unwrap();
        assert_eq!(assignment.len(), labels.len());
        // Partition: every sample in exactly one fold (by construction) and
        // every fold non-empty.
        for fold in 0..5 {
            assert!(assignment.iter().any(|&f| f == fold));
        }
        // Stratification: per-fold class counts within 1 of each other.
        for class in 0..3 {
            let per_fold: Vec<usize> = (0..5)
                .map(|f| {
                    labels
                        .iter()
                        .zip(&assignment)
                        .filter(|&(&y, &a)| y == class && a == f)
                        .count()
                })
                .collect();
            let (lo, hi) = (per_fold.iter().min().unwrap(), per_fold.iter().max().unwrap());
            assert!(hi - lo <= 1, "class {class}: {per_fold:?}");
        }
    }

    #[test]
    fn insufficient_class_samples_are_rejected() {
        let labels = vec![0, 0, 0, 1];
        assert!(matches!(
            stratified_folds(&labels, 2, 3, 0),
            Err(Error::InsufficientClassSamples { class: 1, .. })
        ));
    }
}
