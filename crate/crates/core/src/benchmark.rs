//! Synthetic domain-shift benchmark: axis-aligned Gaussian mixtures with a
//! positive class, a far background class, and a confounder class sitting
//! close to the positives. The target domain shifts every component mean by a
//! common drift vector and widens every scale, which is enough to produce the
//! three failure modes adaptation has to survive: mean drift, scale drift,
//! and confusable over-confident false positives.
//!
//! True labels exist for generation and evaluation only; adaptation code
//! receives a label-stripped view.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{forward, MlpParams, PseudoLabelKind, PseudoLabelSet};
use crate::error::{Error, Result};
use crate::matrix::{cosine_similarity, Matrix};
use crate::rng::{derive_seed, RngState};

pub const CONFIDENCE_HIST_BINS: usize = 20;

/// Ground-truth class of a generated sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrueLabel {
    Positive,
    Negative,
    ConfounderNegative,
}

impl TrueLabel {
    pub fn is_positive(self) -> bool {
        self == TrueLabel::Positive
    }

    fn as_str(self) -> &'static str {
        match self {
            TrueLabel::Positive => "positive",
            TrueLabel::Negative => "negative",
            TrueLabel::ConfounderNegative => "confounder-negative",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(TrueLabel::Positive),
            "negative" => Ok(TrueLabel::Negative),
            "confounder-negative" => Ok(TrueLabel::ConfounderNegative),
            other => Err(Error::Parse(format!("unknown true_label '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        })
    }
}

/// One mixture component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassComponent {
    pub mean: Vec<f64>,
    pub scales: Vec<f64>,
    pub weight: f64,
    pub label: TrueLabel,
}

/// Full mixture description for one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub feature_dim: usize,
    pub components: Vec<ClassComponent>,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::invalid("domain spec needs at least one component"));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "mixing weights must sum to 1, got {total}"
            )));
        }
        for (i, c) in self.components.iter().enumerate() {
            if c.weight < 0.0 {
                return Err(Error::invalid(format!("component {i} has negative weight")));
            }
            if c.mean.len() != self.feature_dim || c.scales.len() != self.feature_dim {
                return Err(Error::invalid(format!(
                    "component {i} mean/scales length does not match feature_dim {}",
                    self.feature_dim
                )));
            }
            if c.scales.iter().any(|&s| s < 0.0 || !s.is_finite()) {
                return Err(Error::invalid(format!(
                    "component {i} scales must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Applies the domain shift: every mean moved by `drift`, every scale
    /// multiplied by `scale_factor`.
    pub fn shifted(&self, drift: &[f64], scale_factor: f64, seed: u64) -> Result<DomainSpec> {
        if drift.len() != self.feature_dim {
            return Err(Error::invalid("drift length does not match feature_dim"));
        }
        let components = self
            .components
            .iter()
            .map(|c| ClassComponent {
                mean: c.mean.iter().zip(drift).map(|(m, d)| m + d).collect(),
                scales: c.scales.iter().map(|s| s * scale_factor).collect(),
                weight: c.weight,
                label: c.label,
            })
            .collect();
        Ok(DomainSpec {
            feature_dim: self.feature_dim,
            components,
            seed,
        })
    }
}

/// Generated samples plus ground truth. True labels are only reachable from
/// metric operations; adaptation gets [`Dataset::unlabeled`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    true_labels: Vec<TrueLabel>,
    domain: DomainTag,
}

impl Dataset {
    pub fn new(features: Matrix, true_labels: Vec<TrueLabel>, domain: DomainTag) -> Result<Self> {
        if features.rows() != true_labels.len() {
            return Err(Error::invalid(format!(
                "feature rows {} do not match label count {}",
                features.rows(),
                true_labels.len()
            )));
        }
        Ok(Dataset {
            features,
            true_labels,
            domain,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn true_labels(&self) -> &[TrueLabel] {
        &self.true_labels
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Label-stripped view handed to adaptation code.
    pub fn unlabeled(&self) -> UnlabeledFeatures<'_> {
        UnlabeledFeatures {
            features: &self.features,
        }
    }

    pub fn true_positive_indices(&self) -> Vec<usize> {
        self.true_labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_positive())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Features without labels. The only accessor is `features`; adaptation code
/// cannot reach ground truth through this type.
#[derive(Clone, Copy, Debug)]
pub struct UnlabeledFeatures<'a> {
    features: &'a Matrix,
}

impl<'a> UnlabeledFeatures<'a> {
    pub fn features(&self) -> &'a Matrix {
        self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples `n` rows from the mixture, deterministically in `spec.seed`.
pub fn gen_domain(spec: &DomainSpec, n: usize, domain: DomainTag) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("gen_domain requires n >= 1"));
    }
    let mut rng = RngState::new(spec.seed);
    let mut data = Vec::with_capacity(n * spec.feature_dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.next_f64();
        let mut acc = 0.0;
        let mut chosen = spec.components.len() - 1;
        for (i, c) in spec.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let c = &spec.components[chosen];
        for d in 0..spec.feature_dim {
            data.push(c.mean[d] + c.scales[d] * rng.next_normal());
        }
        labels.push(c.label);
    }
    Dataset::new(Matrix::new(n, spec.feature_dim, data)?, labels, domain)
}

/// Everything needed to regenerate a benchmark instance, including the frozen
/// drift; this is the record serialized next to generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub n_source: usize,
    pub n_target: usize,
    pub drift: Vec<f64>,
    pub scale_factor: f64,
    pub source: DomainSpec,
    pub target: DomainSpec,
}

#[derive(Clone, Debug)]
pub struct ShiftBenchmark {
    pub source: Dataset,
    pub target: Dataset,
    pub spec: BenchmarkSpec,
}

pub const FEATURE_DIM: usize = 16;
pub const DEFAULT_N_SOURCE: usize = 2000;
pub const DEFAULT_N_TARGET: usize = 2000;
pub const TARGET_SCALE_FACTOR: f64 = 1.3;

// Geometry of the default benchmark. The positive cluster sits at +3 e0, the
// background at -3 e0, and the confounder hugs the positives at an offset
// that separates them by angle (for cosine filtering) while keeping them
// close in distance (for classifier confusion). The confounder is elongated
// along e1 so it straddles any nearby decision boundary.
const POSITIVE_MEAN_E0: f64 = 3.0;
const BACKGROUND_MEAN_E0: f64 = -3.0;
const CONFOUNDER_MEAN: [f64; 2] = [2.2, 2.2];
const BASE_SCALE: f64 = 0.3;
const CONFOUNDER_E1_SCALE: f64 = 0.8;

// Drift direction pushes the confounder cluster back across the source
// decision boundary while leaving positives and background on their own
// sides. The magnitude below is the frozen calibration result; see
// benchmark_manifest.json at the repository root.
const DRIFT_BASE: [f64; 2] = [0.4, -1.1];
pub const DEFAULT_DRIFT_SCALE: f64 = 1.0;

fn axis_vec(dim: usize, values: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[..values.len()].copy_from_slice(values);
    v
}

/// Source-domain mixture for the default benchmark.
pub fn default_source_spec(seed: u64) -> DomainSpec {
    DomainSpec {
        feature_dim: FEATURE_DIM,
        components: vec![
            ClassComponent {
                mean: axis_vec(FEATURE_DIM, &[POSITIVE_MEAN_E0]),
                scales: vec![BASE_SCALE; FEATURE_DIM],
                weight: 0.3,
                label: TrueLabel::Positive,
            },
            ClassComponent {
                mean: axis_vec(FEATURE_DIM, &[BACKGROUND_MEAN_E0]),
                scales: vec![BASE_SCALE; FEATURE_DIM],
                weight: 0.5,
                label: TrueLabel::Negative,
            },
            ClassComponent {
                mean: axis_vec(FEATURE_DIM, &CONFOUNDER_MEAN),
                scales: {
                    let mut s = vec![BASE_SCALE; FEATURE_DIM];
                    s[1] = CONFOUNDER_E1_SCALE;
                    s
                },
                weight: 0.2,
                label: TrueLabel::ConfounderNegative,
            },
        ],
        seed,
    }
}

/// Default benchmark with an explicit drift multiplier (used by calibration
/// sweeps; everything else should go through [`default_shift_benchmark`]).
pub fn shift_benchmark_with_drift(seed: u64, drift_scale: f64) -> Result<ShiftBenchmark> {
    let drift = axis_vec(
        FEATURE_DIM,
        &[DRIFT_BASE[0] * drift_scale, DRIFT_BASE[1] * drift_scale],
    );
    let source_spec = default_source_spec(derive_seed(seed, 0));
    let target_spec = source_spec.shifted(&drift, TARGET_SCALE_FACTOR, derive_seed(seed, 1))?;
    let source = gen_domain(&source_spec, DEFAULT_N_SOURCE, DomainTag::Source)?;
    let target = gen_domain(&target_spec, DEFAULT_N_TARGET, DomainTag::Target)?;
    Ok(ShiftBenchmark {
        source,
        target,
        spec: BenchmarkSpec {
            seed,
            n_source: DEFAULT_N_SOURCE,
            n_target: DEFAULT_N_TARGET,
            drift,
            scale_factor: TARGET_SCALE_FACTOR,
            source: source_spec,
            target: target_spec,
        },
    })
}

/// The calibrated default: drift large enough that direct transfer lands in
/// the 55-85% F1 window, small enough that adaptation has something to
/// recover.
pub fn default_shift_benchmark(seed: u64) -> Result<ShiftBenchmark> {
    shift_benchmark_with_drift(seed, DEFAULT_DRIFT_SCALE)
}

/// Noise-free variant: two well-separated clusters, no confounder, mild
/// drift. Pseudo-labels on this set are essentially all correct, which is
/// what the non-suppression checks need.
pub fn clean_benchmark(seed: u64) -> Result<ShiftBenchmark> {
    let source_spec = DomainSpec {
        feature_dim: FEATURE_DIM,
        components: vec![
            ClassComponent {
                mean: axis_vec(FEATURE_DIM, &[4.0]),
                scales: vec![0.15; FEATURE_DIM],
                weight: 0.5,
                label: TrueLabel::Positive,
            },
            ClassComponent {
                mean: axis_vec(FEATURE_DIM, &[-4.0]),
                scales: vec![0.15; FEATURE_DIM],
                weight: 0.5,
                label: TrueLabel::Negative,
            },
        ],
        seed: derive_seed(seed, 0),
    };
    let drift = axis_vec(FEATURE_DIM, &[0.0, 0.3]);
    let target_spec = source_spec.shifted(&drift, 1.1, derive_seed(seed, 1))?;
    let source = gen_domain(&source_spec, DEFAULT_N_SOURCE, DomainTag::Source)?;
    let target = gen_domain(&target_spec, DEFAULT_N_TARGET, DomainTag::Target)?;
    Ok(ShiftBenchmark {
        source,
        target,
        spec: BenchmarkSpec {
            seed,
            n_source: DEFAULT_N_SOURCE,
            n_target: DEFAULT_N_TARGET,
            drift,
            scale_factor: 1.1,
            source: source_spec,
            target: target_spec,
        },
    })
}

/// One pseudo-positive label for the confidence/correctness export.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub confidence: f64,
    pub correct: bool,
}

/// Evaluation snapshot: pseudo-label quality, classifier quality on the
/// labeled dataset, the confidence/correctness breakdown, and prototype
/// purity when a prototype exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pseudo_precision: Option<f64>,
    pub pseudo_recall: Option<f64>,
    pub pseudo_f1: Option<f64>,
    pub target_accuracy: f64,
    pub target_f1: f64,
    pub proto_purity: Option<f64>,
    pub n_pseudo_positive: usize,
    pub n_pseudo_negative: usize,
    pub n_pseudo_ignored: usize,
    pub mean_confidence_correct: Option<f64>,
    pub mean_confidence_incorrect: Option<f64>,
    pub confidence_hist_correct: Vec<u32>,
    pub confidence_hist_incorrect: Vec<u32>,
    pub scatter: Vec<ScatterPoint>,
}

/// Prototype context for purity computation: the prototype itself and the
/// feature map that produced it (identity for the plain-average mode).
pub struct ProtoView<'a> {
    pub prototype: &'a [f64],
    pub attentive: &'a dyn Fn(&Matrix) -> Result<Matrix>,
}

fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn mean_of(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Computes the full metrics report. `pseudo`, when present, must cover the
/// same ROIs as `data`.
pub fn evaluate(
    head: &MlpParams,
    data: &Dataset,
    pseudo: Option<&PseudoLabelSet>,
    proto: Option<ProtoView<'_>>,
) -> Result<MetricsReport> {
    let probs = forward(head, data.features())?;
    let truth: Vec<bool> = data.true_labels().iter().map(|l| l.is_positive()).collect();

    // Classifier quality at the 0.5 operating point.
    let preds: Vec<bool> = probs.iter().map(|&p| p >= 0.5).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fne = 0usize;
    let mut correct = 0usize;
    for (&pred, &is_pos) in preds.iter().zip(&truth) {
        match (pred, is_pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
        if pred == is_pos {
            correct += 1;
        }
    }
    let target_accuracy = correct as f64 / truth.len().max(1) as f64;
    let cls_precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let cls_recall = if tp + fne == 0 {
        0.0
    } else {
        tp as f64 / (tp + fne) as f64
    };
    let target_f1 = f1_from(cls_precision, cls_recall);

    // Pseudo-label quality.
    let mut pseudo_precision = None;
    let mut pseudo_recall = None;
    let mut pseudo_f1 = None;
    let mut n_pseudo_positive = 0;
    let mut n_pseudo_negative = 0;
    let mut n_pseudo_ignored = 0;
    let mut scatter = Vec::new();
    let mut hist_correct = vec![0u32; CONFIDENCE_HIST_BINS];
    let mut hist_incorrect = vec![0u32; CONFIDENCE_HIST_BINS];
    let mut conf_correct = Vec::new();
    let mut conf_incorrect = Vec::new();

    if let Some(pseudo) = pseudo {
        if pseudo.len() != data.len() {
            return Err(Error::invalid(format!(
                "pseudo-label count {} does not match dataset size {}",
                pseudo.len(),
                data.len()
            )));
        }
        n_pseudo_positive = pseudo.count(PseudoLabelKind::Positive);
        n_pseudo_negative = pseudo.count(PseudoLabelKind::Negative);
        n_pseudo_ignored = pseudo.count(PseudoLabelKind::Ignored);

        let mut ptp = 0usize;
        for l in pseudo.labels() {
            if l.label == PseudoLabelKind::Positive {
                let is_correct = truth[l.roi_index];
                if is_correct {
                    ptp += 1;
                    conf_correct.push(l.confidence);
                } else {
                    conf_incorrect.push(l.confidence);
                }
                let bin = ((l.confidence * CONFIDENCE_HIST_BINS as f64) as usize)
                    .min(CONFIDENCE_HIST_BINS - 1);
                if is_correct {
                    hist_correct[bin] += 1;
                } else {
                    hist_incorrect[bin] += 1;
                }
                scatter.push(ScatterPoint {
                    confidence: l.confidence,
                    correct: is_correct,
                });
            }
        }

        // All-ignored label sets leave quality undefined; report sentinels.
        if n_pseudo_positive + n_pseudo_negative > 0 {
            let n_true_pos = truth.iter().filter(|&&b| b).count();
            pseudo_precision = if n_pseudo_positive > 0 {
                Some(ptp as f64 / n_pseudo_positive as f64)
            } else {
                None
            };
            pseudo_recall = if n_true_pos > 0 {
                Some(ptp as f64 / n_true_pos as f64)
            } else {
                None
            };
            pseudo_f1 = match (pseudo_precision, pseudo_recall) {
                (Some(p), Some(r)) => Some(f1_from(p, r)),
                _ => None,
            };
        }
    }

    // Prototype purity: cosine to the true-positive centroid in the same
    // feature space the prototype lives in.
    let proto_purity = match proto {
        Some(view) => {
            let pos_idx = data.true_positive_indices();
            if pos_idx.is_empty() {
                None
            } else {
                let pos_feats = data.features().select_rows(&pos_idx)?;
                let att = (view.attentive)(&pos_feats)?;
                let centroid = att.mean_row();
                Some(cosine_similarity(view.prototype, &centroid)?)
            }
        }
        None => None,
    };

    Ok(MetricsReport {
        pseudo_precision,
        pseudo_recall,
        pseudo_f1,
        target_accuracy,
        target_f1,
        proto_purity,
        n_pseudo_positive,
        n_pseudo_negative,
        n_pseudo_ignored,
        mean_confidence_correct: mean_of(&conf_correct),
        mean_confidence_incorrect: mean_of(&conf_incorrect),
        confidence_hist_correct: hist_correct,
        confidence_hist_incorrect: hist_incorrect,
        scatter,
    })
}

/// Standard evaluator over a labeled dataset, shaped for handing to the
/// adaptation loop. Ground truth never crosses this closure boundary.
pub fn dataset_evaluator(
    data: &Dataset,
) -> impl Fn(&MlpParams, &PseudoLabelSet, Option<ProtoView<'_>>) -> Result<MetricsReport> + '_ {
    move |model, pseudo, proto| evaluate(model, data, Some(pseudo), proto)
}

fn format_f64(v: f64) -> String {
    // Shortest round-trip representation.
    format!("{v}")
}

/// Writes `f0..f{d-1},true_label,domain` rows.
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let dim = data.features().cols();
    let header: Vec<String> = (0..dim)
        .map(|i| format!("f{i}"))
        .chain(["true_label".to_string(), "domain".to_string()])
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (row, label) in data.features().iter_rows().zip(data.true_labels()) {
        let mut fields: Vec<String> = row.iter().map(|&v| format_f64(v)).collect();
        fields.push(label.as_str().to_string());
        fields.push(data.domain().to_string());
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))??;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 3
        || columns[columns.len() - 2] != "true_label"
        || columns[columns.len() - 1] != "domain"
    {
        return Err(Error::Parse(format!(
            "{}: expected header f0..fN,true_label,domain",
            path.display()
        )));
    }
    let dim = columns.len() - 2;
    for (i, c) in columns[..dim].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(Error::Parse(format!(
                "{}: unexpected feature column '{c}'",
                path.display()
            )));
        }
    }

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut domain: Option<DomainTag> = None;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(Error::Parse(format!(
                "{}:{}: expected {} fields, got {}",
                path.display(),
                lineno + 2,
                dim + 2,
                fields.len()
            )));
        }
        let mut row = Vec::with_capacity(dim);
        for f in &fields[..dim] {
            row.push(f.parse::<f64>().map_err(|e| {
                Error::Parse(format!("{}:{}: bad float: {e}", path.display(), lineno + 2))
            })?);
        }
        rows.push(row);
        labels.push(TrueLabel::parse(fields[dim])?);
        let tag = match fields[dim + 1] {
            "source" => DomainTag::Source,
            "target" => DomainTag::Target,
            other => {
                return Err(Error::Parse(format!(
                    "{}:{}: unknown domain '{other}'",
                    path.display(),
                    lineno + 2
                )))
            }
        };
        match domain {
            None => domain = Some(tag),
            Some(existing) if existing != tag => {
                return Err(Error::Parse(format!(
                    "{}: mixed domain tags in one file",
                    path.display()
                )))
            }
            _ => {}
        }
    }
    let domain =
        domain.ok_or_else(|| Error::Parse(format!("{}: no data rows", path.display())))?;
    Dataset::new(Matrix::from_rows(&rows)?, labels, domain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::threshold_labels;
    use crate::rng::RngState;

    fn two_blob_spec(seed: u64) -> DomainSpec {
        DomainSpec {
            feature_dim: 3,
            components: vec![
                ClassComponent {
                    mean: vec![1.0, 0.0, 0.0],
                    scales: vec![0.1; 3],
                    weight: 0.6,
                    label: TrueLabel::Positive,
                },
                ClassComponent {
                    mean: vec![-1.0, 0.0, 0.0],
                    scales: vec![0.1; 3],
                    weight: 0.4,
                    label: TrueLabel::Negative,
                },
            ],
            seed,
        }
    }

    #[test]
    fn gen_rejects_empty_and_accepts_single() {
        let spec = two_blob_spec(1);
        assert!(gen_domain(&spec, 0, DomainTag::Source).is_err());
        let d = gen_domain(&spec, 1, DomainTag::Source).unwrap();
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn zero_scales_put_samples_on_means() {
        let mut spec = two_blob_spec(2);
        for c in spec.components.iter_mut() {
            c.scales = vec![0.0; 3];
        }
        let d = gen_domain(&spec, 50, DomainTag::Source).unwrap();
        for (row, label) in d.features().iter_rows().zip(d.true_labels()) {
            let expected = match label {
                TrueLabel::Positive => &spec.components[0].mean,
                _ => &spec.components[1].mean,
            };
            assert_eq!(row, expected.as_slice());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = two_blob_spec(3);
        let a = gen_domain(&spec, 100, DomainTag::Target).unwrap();
        let b = gen_domain(&spec, 100, DomainTag::Target).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixing_proportions_match_weights() {
        let spec = two_blob_spec(4);
        let d = gen_domain(&spec, 10_000, DomainTag::Source).unwrap();
        let pos = d.true_labels().iter().filter(|l| l.is_positive()).count() as f64 / 10_000.0;
        assert!((pos - 0.6).abs() < 0.02, "positive fraction {pos}");
    }

    #[test]
    fn zero_drift_keeps_spec_parameters() {
        let spec = two_blob_spec(5);
        let shifted = spec.shifted(&[0.0; 3], 1.0, spec.seed).unwrap();
        assert_eq!(spec.components, shifted.components);
    }

    #[test]
    fn default_benchmark_reproducible_and_shaped() {
        let a = default_shift_benchmark(7).unwrap();
        let b = default_shift_benchmark(7).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
        assert_eq!(a.source.len(), DEFAULT_N_SOURCE);
        assert_eq!(a.target.len(), DEFAULT_N_TARGET);
        assert_eq!(a.source.features().cols(), FEATURE_DIM);
        assert_eq!(a.source.domain(), DomainTag::Source);
        assert_eq!(a.target.domain(), DomainTag::Target);
        // target scales are the widened source scales
        for (cs, ct) in a
            .spec
            .source
            .components
            .iter()
            .zip(&a.spec.target.components)
        {
            for (s, t) in cs.scales.iter().zip(&ct.scales) {
                assert!((t - s * TARGET_SCALE_FACTOR).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unlabeled_view_exposes_only_features() {
        // Interface audit: the stripped view yields the feature matrix and
        // nothing else; there is no label accessor on the type.
        let d = gen_domain(&two_blob_spec(8), 10, DomainTag::Target).unwrap();
        let view = d.unlabeled();
        assert_eq!(view.features(), d.features());
        assert_eq!(view.len(), d.len());
    }

    #[test]
    fn evaluate_perfect_predictions() {
        let d = gen_domain(&two_blob_spec(9), 200, DomainTag::Target).unwrap();
        // A hand-built head along e0: positives reach logit ~ +50, negatives
        // (GELU kills their hidden units) land at the -50 output bias.
        let head = MlpParams {
            w1: Matrix::from_rows(&[
                vec![10.0, 10.0],
                vec![0.0, 0.0],
                vec![0.0, 0.0],
            ])
            .unwrap(),
            b1: vec![0.0, 0.0],
            w2: Matrix::from_rows(&[vec![5.0], vec![5.0]]).unwrap(),
            b2: vec![-50.0],
        };
        let probs = forward(&head, d.features()).unwrap();
        let pseudo = threshold_labels(&probs, 0.7, 0.3, 0).unwrap();
        let m = evaluate(&head, &d, Some(&pseudo), None).unwrap();
        assert_eq!(m.pseudo_precision, Some(1.0));
        assert_eq!(m.pseudo_recall, Some(1.0));
        assert_eq!(m.target_f1, 1.0);
        assert_eq!(m.target_accuracy, 1.0);
        assert!(m.mean_confidence_incorrect.is_none());
    }

    #[test]
    fn evaluate_all_ignored_reports_sentinels() {
        let d = gen_domain(&two_blob_spec(10), 20, DomainTag::Target).unwrap();
        let head = MlpParams {
            w1: Matrix::zeros(3, 2),
            b1: vec![0.0; 2],
            w2: Matrix::zeros(2, 1),
            b2: vec![0.0],
        };
        // Every probability is exactly 0.5 -> everything ignored.
        let probs = forward(&head, d.features()).unwrap();
        let pseudo = threshold_labels(&probs, 0.7, 0.3, 0).unwrap();
        let m = evaluate(&head, &d, Some(&pseudo), None).unwrap();
        assert_eq!(m.n_pseudo_ignored, 20);
        assert!(m.pseudo_precision.is_none());
        assert!(m.pseudo_recall.is_none());
        assert!(m.pseudo_f1.is_none());
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"pseudo_precision\":null"));
        assert!(!json.contains("NaN"));
    }

    #[test]
    fn evaluate_known_confusion_counts() {
        // TP=8, FP=2, FN=4 -> precision 0.8, recall 2/3.
        let mut labels = Vec::new();
        labels.extend(std::iter::repeat(TrueLabel::Positive).take(12));
        labels.extend(std::iter::repeat(TrueLabel::Negative).take(8));
        let feats = RngState::new(11).randn(20, 3);
        let d = Dataset::new(feats, labels, DomainTag::Target).unwrap();

        // Hand-build pseudo-labels: first 8 true positives labeled positive,
        // next 4 true positives ignored, 2 negatives labeled positive.
        let mut probs = vec![0.5; 20];
        for p in probs.iter_mut().take(8) {
            *p = 0.9;
        }
        probs[12] = 0.95;
        probs[13] = 0.85;
        let head = MlpParams {
            w1: Matrix::zeros(3, 2),
            b1: vec![0.0; 2],
            w2: Matrix::zeros(2, 1),
            b2: vec![0.0],
        };
        let pseudo = threshold_labels(&probs, 0.7, 0.3, 1).unwrap();
        let m = evaluate(&head, &d, Some(&pseudo), None).unwrap();
        assert!((m.pseudo_precision.unwrap() - 0.8).abs() < 1e-12);
        assert!((m.pseudo_recall.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.scatter.len(), 10);
        let hist_total: u32 = m
            .confidence_hist_correct
            .iter()
            .chain(&m.confidence_hist_incorrect)
            .sum();
        assert_eq!(hist_total, 10);
    }

    #[test]
    fn csv_round_trip() {
        let d = gen_domain(&two_blob_spec(12), 40, DomainTag::Source).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        write_dataset_csv(&path, &d).unwrap();
        let back = read_dataset_csv(&path).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn csv_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b,c\n1,2,3\n").unwrap();
        assert!(read_dataset_csv(&path).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = two_blob_spec(13);
        spec.components[0].weight = 0.9; // sums to 1.3
        assert!(spec.validate().is_err());

        let mut spec2 = two_blob_spec(14);
        spec2.components[1].scales[0] = -0.1;
        assert!(spec2.validate().is_err());
    }
}
