//! End-to-end adaptation pipeline: source training, pseudo-label generation,
//! the meta-iteration loop (prototype computation, EMA, similarity
//! reweighting, detector updates), per-meta-iteration evaluation, and the
//! ablation harness.
//!
//! Adaptation is source-free: after `train_source` returns, only the trained
//! head and a label-stripped target view enter `adapt`. Metrics are produced
//! through an injected evaluator so ground truth stays on the caller's side
//! of the fence.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::benchmark::{MetricsReport, ProtoView, UnlabeledFeatures};
use crate::detector::{
    adam_step, backward, bce_loss_per_roi, forward, threshold_labels, AdamState, FlatAdamState,
    MlpParams, PseudoLabelKind, PseudoLabelSet,
};
use crate::error::{Error, Result};
use crate::gradcheck::finite_diff_grad;
use crate::matrix::Matrix;
use crate::prototype::{
    attentive_prototype, ema_update, entropy_weights, similarity_weights, EntropyMode,
    EntropyWeights, PrototypeState, SimilarityMode, SimilarityWeights,
};
use crate::rng::{derive_seed, RngState};
use crate::transformer::{
    flatten_params, init_self_attention, init_transformer, self_attention_forward,
    transformer_forward, unflatten_params, SelfAttentionParams, TokenBatch, TransformerConfig,
    TransformerParams,
};

const STREAM_DETECTOR_INIT: u64 = 0x11;
const STREAM_ATTENTIVE_INIT: u64 = 0x22;
const STREAM_SOURCE_BATCHES: u64 = 0x33;
const STREAM_ADAPT_BATCHES: u64 = 0x44;

pub const MAX_SOURCE_STEPS: usize = 2000;
pub const SOURCE_LOSS_TARGET: f64 = 0.05;
const FD_STEP: f64 = 1e-5;

/// How attentive region features are produced before prototype computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeMode {
    /// Raw features pass through untouched; the prototype is a plain mean.
    Average,
    /// One multi-head self-attention block over raw features, no embedding
    /// or feed-forward.
    SelfAttention,
    /// Full embedding + encoder stack, uniform aggregation weights.
    Transformer,
    /// Full stack with predictive-entropy aggregation weights.
    TransformerEntropy,
}

impl PrototypeMode {
    pub const ALL: [PrototypeMode; 4] = [
        PrototypeMode::Average,
        PrototypeMode::SelfAttention,
        PrototypeMode::Transformer,
        PrototypeMode::TransformerEntropy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PrototypeMode::Average => "average",
            PrototypeMode::SelfAttention => "self-attention",
            PrototypeMode::Transformer => "transformer",
            PrototypeMode::TransformerEntropy => "transformer-entropy",
        }
    }

    fn uses_transformer(self) -> bool {
        matches!(
            self,
            PrototypeMode::Transformer | PrototypeMode::TransformerEntropy
        )
    }
}

/// Loss-weighting rule applied to positive pseudo-ROIs. `PinnedOne` disables
/// similarity weighting entirely and reduces the pipeline to plain
/// pseudo-label self-training (the ST baseline).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityWeighting {
    RawClamped,
    Softmax,
    PinnedOne,
}

impl SimilarityWeighting {
    fn as_similarity_mode(self) -> Option<SimilarityMode> {
        match self {
            SimilarityWeighting::RawClamped => Some(SimilarityMode::RawClamped),
            SimilarityWeighting::Softmax => Some(SimilarityMode::Softmax),
            SimilarityWeighting::PinnedOne => None,
        }
    }
}

/// Every tunable of the pipeline. Serialized as the run configuration file;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub seed: u64,
    pub prototype_mode: PrototypeMode,
    pub entropy_mode: EntropyMode,
    pub similarity_mode: SimilarityWeighting,
    /// EMA keep ratio. 0.99 suits desk-scale iteration counts; 0.9999 is the
    /// long-schedule setting.
    pub alpha: f64,
    pub tau_pos: f64,
    pub tau_neg: f64,
    pub n_meta: usize,
    pub iterations_per_meta: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub n_layers: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    pub init_scale: f64,
    pub hidden_dim: usize,
    /// Experimental: update transformer weights by numerical gradient of the
    /// weighted loss. Off by default; the transformer is otherwise frozen
    /// after seeded initialization.
    pub train_transformer: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            seed: 42,
            prototype_mode: PrototypeMode::TransformerEntropy,
            entropy_mode: EntropyMode::OneMinusRaw,
            similarity_mode: SimilarityWeighting::RawClamped,
            alpha: 0.99,
            tau_pos: 0.7,
            tau_neg: 0.3,
            n_meta: 4,
            iterations_per_meta: 150,
            batch_size: 64,
            lr: 1e-3,
            n_layers: 2,
            model_dim: 32,
            ff_dim: 64,
            n_heads: 4,
            init_scale: 0.5,
            hidden_dim: 16,
            train_transformer: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_meta < 1 {
            return Err(Error::invalid("n_meta must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.tau_pos)
            || !(0.0..=1.0).contains(&self.tau_neg)
            || self.tau_neg >= self.tau_pos
        {
            return Err(Error::invalid(
                "thresholds must satisfy 0 <= tau_neg < tau_pos <= 1",
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::invalid("lr must be positive"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::invalid("hidden_dim must be at least 1"));
        }
        if self.prototype_mode.uses_transformer()
            && (self.n_heads == 0 || self.model_dim % self.n_heads != 0)
        {
            return Err(Error::invalid(format!(
                "model_dim {} must be divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }

    fn transformer_config(&self, input_dim: usize) -> TransformerConfig {
        TransformerConfig {
            input_dim,
            model_dim: self.model_dim,
            ff_dim: self.ff_dim,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            init_scale: self.init_scale,
        }
    }
}

/// Wall-clock bookkeeping. Never serialized: run records must be
/// byte-identical across repeated runs of the same configuration.
#[derive(Clone, Debug, Default)]
pub struct WallClock {
    pub total: Duration,
    pub per_meta: Vec<Duration>,
}

/// Result record of one adaptation run. Index 0 of `metrics` is the direct
/// transfer evaluation of the unadapted source model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: AdaptConfig,
    pub metrics: Vec<MetricsReport>,
    /// Per trained meta-iteration: batches that contained no positive
    /// pseudo-labels and therefore trained on negatives only.
    pub empty_positive_batches: Vec<u32>,
    pub checkpoint: String,
    #[serde(skip)]
    pub wall_clock: WallClock,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Everything `adapt` produces beyond the record itself.
#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub record: RunRecord,
    pub model: MlpParams,
    pub adam: AdamState,
    pub prototype: PrototypeState,
    pub transformer: Option<TransformerParams>,
    pub self_attention: Option<SelfAttentionParams>,
    pub pseudo: PseudoLabelSet,
}

/// On-disk checkpoint of an adapted pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineCheckpoint {
    pub meta_iteration: usize,
    pub mlp: MlpParams,
    pub adam: AdamState,
    pub prototype: Option<Vec<f64>>,
    pub transformer: Option<TransformerParams>,
    pub self_attention: Option<SelfAttentionParams>,
}

impl AdaptOutcome {
    pub fn checkpoint(&self) -> PipelineCheckpoint {
        PipelineCheckpoint {
            meta_iteration: self.record.metrics.len().saturating_sub(1),
            mlp: self.model.clone(),
            adam: self.adam.clone(),
            prototype: self.prototype.prototype().map(|p| p.to_vec()),
            transformer: self.transformer.clone(),
            self_attention: self.self_attention.clone(),
        }
    }
}

/// Evaluation callback. Ground-truth labels live behind this closure; the
/// adaptation loop itself never sees them.
pub type DynEvaluator<'a> =
    dyn Fn(&MlpParams, &PseudoLabelSet, Option<ProtoView<'_>>) -> Result<MetricsReport> + 'a;

/// Model snapshot handed to step observers (used by trajectory tests).
pub struct StepSnapshot<'a> {
    pub meta_iter: usize,
    pub step_in_meta: usize,
    pub model: &'a MlpParams,
}

fn schedule_from_seed(
    seed: u64,
    labeled: &[usize],
    batch_size: usize,
    iterations: usize,
) -> Vec<Vec<usize>> {
    let mut rng = RngState::new(seed);
    let mut order: Vec<usize> = labeled.to_vec();
    let bs = batch_size.min(order.len());
    let mut pos = order.len(); // forces a shuffle before the first batch
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        if pos + bs > order.len() {
            rng.shuffle(&mut order);
            pos = 0;
        }
        out.push(order[pos..pos + bs].to_vec());
        pos += bs;
    }
    out
}

/// Batch index schedule for one meta-iteration: epoch-wise shuffles of the
/// labeled indices, chunked to `batch_size`, for `iterations` batches.
///
/// Public so that baseline trajectories can replay the exact batching.
pub fn batch_schedule(
    config_seed: u64,
    meta_iter: usize,
    labeled: &[usize],
    batch_size: usize,
    iterations: usize,
) -> Vec<Vec<usize>> {
    schedule_from_seed(
        derive_seed(config_seed, STREAM_ADAPT_BATCHES + meta_iter as u64),
        labeled,
        batch_size,
        iterations,
    )
}

/// Trains the detector head on labeled source data until the full-set loss
/// drops below [`SOURCE_LOSS_TARGET`] or [`MAX_SOURCE_STEPS`] is reached.
pub fn train_source(
    config: &AdaptConfig,
    source: &crate::benchmark::Dataset,
) -> Result<(MlpParams, AdamState)> {
    config.validate()?;
    let feats = source.features();
    if feats.rows() == 0 {
        return Err(Error::invalid("empty source dataset"));
    }
    let labels: Vec<f64> = source
        .true_labels()
        .iter()
        .map(|l| if l.is_positive() { 1.0 } else { 0.0 })
        .collect();

    let mut rng = RngState::new(derive_seed(config.seed, STREAM_DETECTOR_INIT));
    let mut model = MlpParams::init(&mut rng, feats.cols(), config.hidden_dim);
    let mut adam = AdamState::new(&model, config.lr);

    let all: Vec<usize> = (0..feats.rows()).collect();
    let schedule = schedule_from_seed(
        derive_seed(config.seed, STREAM_SOURCE_BATCHES),
        &all,
        config.batch_size,
        MAX_SOURCE_STEPS,
    );
    let full_weights = vec![1.0; feats.rows()];

    for (step, batch) in schedule.iter().enumerate() {
        let bf = feats.select_rows(batch)?;
        let bl: Vec<f64> = batch.iter().map(|&i| labels[i]).collect();
        let ones = vec![1.0; batch.len()];
        let grads = backward(&model, &bf, &bl, &ones)?;
        adam_step(&mut model, &grads, &mut adam);
        if !model.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "non-finite parameters at source step {step}"
            )));
        }
        if (step + 1) % 10 == 0 {
            let loss = crate::detector::batch_loss(&model, feats, &labels, &full_weights)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "non-finite source loss at step {step}"
                )));
            }
            if loss < SOURCE_LOSS_TARGET {
                break;
            }
        }
    }
    Ok((model, adam))
}

fn apply_attentive(
    mode: PrototypeMode,
    transformer: Option<&TransformerParams>,
    self_attention: Option<&SelfAttentionParams>,
    feats: &Matrix,
) -> Result<Matrix> {
    match mode {
        PrototypeMode::Average => Ok(feats.clone()),
        PrototypeMode::SelfAttention => {
            let sa = self_attention.expect("self-attention params initialized for mode");
            self_attention_forward(sa, feats)
        }
        PrototypeMode::Transformer | PrototypeMode::TransformerEntropy => {
            let t = transformer.expect("transformer params initialized for mode");
            transformer_forward(t, &TokenBatch::new(feats.clone())?)
        }
    }
}

/// One numerical-gradient update of the transformer under the weighted loss,
/// holding the detector outputs and the pre-batch EMA state fixed.
#[allow(clippy::too_many_arguments)]
fn transformer_fd_step(
    template: &TransformerParams,
    flat: &mut [f64],
    adam: &mut FlatAdamState,
    state_before: &PrototypeState,
    w_ent: &EntropyWeights,
    pos_feats: &Matrix,
    pos_losses: &[f64],
    neg_losses: &[f64],
    sim_mode: SimilarityMode,
) -> Result<TransformerParams> {
    let loss_fn = |theta: &[f64]| -> f64 {
        let cand = unflatten_params(template, theta).expect("template shapes fixed");
        let att = transformer_forward(
            &cand,
            &TokenBatch::new(pos_feats.clone()).expect("non-empty positives"),
        )
        .expect("shapes validated upstream");
        let f_att = attentive_prototype(&att, w_ent).expect("weight length matches");
        let mut st = state_before.clone();
        ema_update(&mut st, &f_att).expect("finite prototype");
        let d = similarity_weights(st.prototype().expect("just updated"), &att, sim_mode)
            .expect("non-degenerate prototype");
        crate::prototype::weighted_cls_loss(pos_losses, neg_losses, &d)
            .expect("lengths validated upstream")
    };
    let grads = finite_diff_grad(loss_fn, flat, FD_STEP);
    adam.step(flat, &grads);
    unflatten_params(template, flat)
}

/// Runs the full adaptation loop; see [`adapt_with_observer`] for the
/// instrumented variant.
pub fn adapt(
    config: &AdaptConfig,
    source_model: &MlpParams,
    target: UnlabeledFeatures<'_>,
    evaluator: &DynEvaluator<'_>,
) -> Result<AdaptOutcome> {
    adapt_with_observer(config, source_model, target, evaluator, |_| {})
}

/// Algorithm: per meta-iteration, regenerate pseudo-labels with the current
/// model, reset the prototype state, then for each batch compute attentive
/// features of positive pseudo-ROIs, fold them into the EMA prototype,
/// derive similarity weights, and train the detector under the weighted
/// loss. Negatives always carry weight one. Batches without positives train
/// on negatives only and skip the prototype update.
pub fn adapt_with_observer<F>(
    config: &AdaptConfig,
    source_model: &MlpParams,
    target: UnlabeledFeatures<'_>,
    evaluator: &DynEvaluator<'_>,
    mut observer: F,
) -> Result<AdaptOutcome>
where
    F: FnMut(&StepSnapshot<'_>),
{
    config.validate()?;
    let started = Instant::now();
    let feats = target.features();
    if feats.rows() == 0 {
        return Err(Error::invalid("empty target dataset"));
    }

    let mode = config.prototype_mode;
    let mut att_rng = RngState::new(derive_seed(config.seed, STREAM_ATTENTIVE_INIT));
    let mut transformer = if mode.uses_transformer() {
        Some(init_transformer(
            &mut att_rng,
            &config.transformer_config(feats.cols()),
        )?)
    } else {
        None
    };
    let self_attention = if mode == PrototypeMode::SelfAttention {
        Some(init_self_attention(
            &mut att_rng,
            feats.cols(),
            config.n_heads,
            config.init_scale,
        )?)
    } else {
        None
    };

    let mut model = source_model.clone();
    let probs = forward(&model, feats)?;
    let mut pseudo = threshold_labels(&probs, config.tau_pos, config.tau_neg, 0)?;

    let eval_with = |model: &MlpParams,
                     pseudo: &PseudoLabelSet,
                     proto: Option<&[f64]>,
                     transformer: Option<&TransformerParams>,
                     self_attention: Option<&SelfAttentionParams>|
     -> Result<MetricsReport> {
        let att_fn =
            move |m: &Matrix| -> Result<Matrix> { apply_attentive(mode, transformer, self_attention, m) };
        match proto {
            Some(p) => evaluator(
                model,
                pseudo,
                Some(ProtoView {
                    prototype: p,
                    attentive: &att_fn,
                }),
            ),
            None => evaluator(model, pseudo, None),
        }
    };

    let mut metrics = Vec::with_capacity(config.n_meta + 1);
    metrics.push(eval_with(
        &model,
        &pseudo,
        None,
        transformer.as_ref(),
        self_attention.as_ref(),
    )?);

    let mut empty_positive_batches = Vec::with_capacity(config.n_meta);
    let mut per_meta_clock = Vec::with_capacity(config.n_meta);
    let mut last_proto = PrototypeState::new(config.alpha)?;
    let mut last_adam = AdamState::new(&model, config.lr);

    // Transformer FD training state, only materialized when requested.
    let mut t_flat: Option<Vec<f64>> = None;
    let mut t_adam: Option<FlatAdamState> = None;
    if config.train_transformer {
        if let Some(t) = &transformer {
            let flat = flatten_params(t);
            t_adam = Some(FlatAdamState::new(flat.len(), config.lr));
            t_flat = Some(flat);
        }
    }

    for meta in 1..=config.n_meta {
        let meta_started = Instant::now();
        let labeled = pseudo.labeled_indices();
        if labeled.is_empty() {
            return Err(Error::AllRoisIgnored { meta_iter: meta });
        }

        let mut proto_state = PrototypeState::new(config.alpha)?;
        let mut adam = AdamState::new(&model, config.lr);
        let schedule = batch_schedule(
            config.seed,
            meta,
            &labeled,
            config.batch_size,
            config.iterations_per_meta,
        );
        let mut empty_batches = 0u32;

        for (step, batch) in schedule.iter().enumerate() {
            let bf = feats.select_rows(batch)?;
            let batch_probs = forward(&model, &bf)?;
            let labels_b: Vec<f64> = batch
                .iter()
                .map(|&roi| match pseudo.kind(roi) {
                    PseudoLabelKind::Positive => 1.0,
                    _ => 0.0,
                })
                .collect();
            let mut weights_b = vec![1.0; batch.len()];
            let pos_positions: Vec<usize> = batch
                .iter()
                .enumerate()
                .filter(|(_, &roi)| pseudo.kind(roi) == PseudoLabelKind::Positive)
                .map(|(k, _)| k)
                .collect();

            if pos_positions.is_empty() {
                empty_batches += 1;
                log::debug!(
                    "meta {meta} step {step}: no positive pseudo-labels in batch, training on negatives only"
                );
            } else {
                let pos_feats = bf.select_rows(&pos_positions)?;
                let att = apply_attentive(
                    mode,
                    transformer.as_ref(),
                    self_attention.as_ref(),
                    &pos_feats,
                )?;
                let w_ent = if mode == PrototypeMode::TransformerEntropy {
                    let pos_probs: Vec<f64> =
                        pos_positions.iter().map(|&k| batch_probs[k]).collect();
                    entropy_weights(&pos_probs, config.entropy_mode)?
                } else {
                    EntropyWeights::uniform(pos_positions.len())
                };
                let state_before = proto_state.clone();
                let f_att = attentive_prototype(&att, &w_ent)?;
                ema_update(&mut proto_state, &f_att)?;

                let d = match config.similarity_mode.as_similarity_mode() {
                    None => SimilarityWeights::pinned_one(pos_positions.len()),
                    Some(sim_mode) => similarity_weights(
                        proto_state.prototype().expect("updated above"),
                        &att,
                        sim_mode,
                    )?,
                };
                for (j, &k) in pos_positions.iter().enumerate() {
                    weights_b[k] = d.values()[j];
                }

                if let (Some(flat), Some(fd_adam), Some(sim_mode)) = (
                    t_flat.as_mut(),
                    t_adam.as_mut(),
                    config.similarity_mode.as_similarity_mode(),
                ) {
                    let pos_losses: Vec<f64> = pos_positions
                        .iter()
                        .map(|&k| bce_loss_per_roi(batch_probs[k], 1.0))
                        .collect();
                    let neg_losses: Vec<f64> = (0..batch.len())
                        .filter(|k| !pos_positions.contains(k))
                        .map(|k| bce_loss_per_roi(batch_probs[k], 0.0))
                        .collect();
                    let template = transformer.as_ref().expect("fd training implies transformer");
                    let updated = transformer_fd_step(
                        template,
                        flat,
                        fd_adam,
                        &state_before,
                        &w_ent,
                        &pos_feats,
                        &pos_losses,
                        &neg_losses,
                        sim_mode,
                    )?;
                    transformer = Some(updated);
                }
            }

            let grads = backward(&model, &bf, &labels_b, &weights_b)?;
            adam_step(&mut model, &grads, &mut adam);
            if !model.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "non-finite parameters at meta {meta} step {step}"
                )));
            }
            observer(&StepSnapshot {
                meta_iter: meta,
                step_in_meta: step,
                model: &model,
            });
        }

        // Regenerate pseudo-labels with the adapted model; they are both the
        // evaluation subject for this meta-iteration and the training labels
        // for the next one.
        let probs = forward(&model, feats)?;
        pseudo = threshold_labels(&probs, config.tau_pos, config.tau_neg, meta)?;
        metrics.push(eval_with(
            &model,
            &pseudo,
            proto_state.prototype(),
            transformer.as_ref(),
            self_attention.as_ref(),
        )?);
        empty_positive_batches.push(empty_batches);
        per_meta_clock.push(meta_started.elapsed());
        last_proto = proto_state;
        last_adam = adam;
    }

    Ok(AdaptOutcome {
        record: RunRecord {
            config: config.clone(),
            metrics,
            empty_positive_batches,
            checkpoint: "checkpoint.json".to_string(),
            wall_clock: WallClock {
                total: started.elapsed(),
                per_meta: per_meta_clock,
            },
        },
        model,
        adam: last_adam,
        prototype: last_proto,
        transformer,
        self_attention,
        pseudo,
    })
}

/// One row of the prototype-computation comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub prototype_mode: String,
    pub direct_transfer_f1: f64,
    pub final_target_f1: f64,
    pub final_pseudo_precision: Option<f64>,
    pub final_pseudo_recall: Option<f64>,
    pub final_proto_purity: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "prototype_mode,direct_transfer_f1,final_target_f1,final_pseudo_precision,final_pseudo_recall,final_proto_purity\n",
        );
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.prototype_mode,
                r.direct_transfer_f1,
                r.final_target_f1,
                opt(r.final_pseudo_precision),
                opt(r.final_pseudo_recall),
                opt(r.final_proto_purity),
            ));
        }
        out
    }
}

/// Runs `adapt` under each prototype computation mode with a shared seed and
/// collects the comparison. Orderings are reported, never asserted.
pub fn run_ablation(
    base_config: &AdaptConfig,
    source_model: &MlpParams,
    target: UnlabeledFeatures<'_>,
    evaluator: &DynEvaluator<'_>,
) -> Result<(AblationTable, Vec<RunRecord>)> {
    let mut rows = Vec::with_capacity(PrototypeMode::ALL.len());
    let mut records = Vec::with_capacity(PrototypeMode::ALL.len());
    for mode in PrototypeMode::ALL {
        let mut config = base_config.clone();
        config.prototype_mode = mode;
        let outcome = adapt(&config, source_model, target, evaluator)?;
        let dt = &outcome.record.metrics[0];
        let last = outcome
            .record
            .metrics
            .last()
            .expect("metrics never empty");
        rows.push(AblationRow {
            prototype_mode: mode.as_str().to_string(),
            direct_transfer_f1: dt.target_f1,
            final_target_f1: last.target_f1,
            final_pseudo_precision: last.pseudo_precision,
            final_pseudo_recall: last.pseudo_recall,
            final_proto_purity: last.proto_purity,
        });
        records.push(outcome.record);
    }
    Ok((AblationTable { rows }, records))
}
