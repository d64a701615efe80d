//! Toy detector head: a two-layer GELU MLP binary classifier over ROI
//! features with hand-derived backprop, Adam updates, and confidence
//! thresholding into pseudo-labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{gelu, gelu_prime, Matrix};
use crate::rng::RngState;

const BCE_CLAMP: f64 = 1e-7;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Classifier parameters: `sigmoid(gelu(X W1 + b1) W2 + b2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl MlpParams {
    pub fn init(rng: &mut RngState, input_dim: usize, hidden_dim: usize) -> Self {
        let s1 = 1.0 / (input_dim as f64).sqrt();
        let s2 = 1.0 / (hidden_dim as f64).sqrt();
        MlpParams {
            w1: rng.randn(input_dim, hidden_dim).map(|v| v * s1),
            b1: vec![0.0; hidden_dim],
            w2: rng.randn(hidden_dim, 1).map(|v| v * s2),
            b2: vec![0.0],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().all(|v| v.is_finite())
            && self.b2.iter().all(|v| v.is_finite())
    }

    /// Deterministic flattening, used by finite-difference checks.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn from_flat(template: &MlpParams, flat: &[f64]) -> Result<Self> {
        let expected = template.to_flat().len();
        if flat.len() != expected {
            return Err(Error::invalid(format!(
                "flat parameter length {} does not match expected {}",
                flat.len(),
                expected
            )));
        }
        let mut p = template.clone();
        let mut pos = 0;
        let n1 = p.w1.rows() * p.w1.cols();
        p.w1.data_mut().copy_from_slice(&flat[pos..pos + n1]);
        pos += n1;
        let b1_len = p.b1.len();
        p.b1.copy_from_slice(&flat[pos..pos + b1_len]);
        pos += b1_len;
        let n2 = p.w2.rows() * p.w2.cols();
        p.w2.data_mut().copy_from_slice(&flat[pos..pos + n2]);
        pos += n2;
        p.b2.copy_from_slice(&flat[pos..pos + 1]);
        Ok(p)
    }
}

/// Gradients mirroring [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl MlpGrads {
    fn zeros_like(p: &MlpParams) -> Self {
        MlpGrads {
            w1: Matrix::zeros(p.w1.rows(), p.w1.cols()),
            b1: vec![0.0; p.b1.len()],
            w2: Matrix::zeros(p.w2.rows(), p.w2.cols()),
            b2: vec![0.0; p.b2.len()],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out
    }
}

/// Per-row probabilities in (0, 1).
pub fn forward(params: &MlpParams, feats: &Matrix) -> Result<Vec<f64>> {
    if feats.cols() != params.input_dim() {
        return Err(Error::invalid(format!(
            "feature dim {} does not match classifier input dim {}",
            feats.cols(),
            params.input_dim()
        )));
    }
    let hidden = feats
        .matmul(&params.w1)?
        .add_row_bias(&params.b1)?
        .map(gelu);
    let logits = hidden.matmul(&params.w2)?.add_row_bias(&params.b2)?;
    Ok(logits.data().iter().map(|&z| sigmoid(z)).collect())
}

/// Binary cross-entropy for one region; `p` is clamped away from 0 and 1
/// before the logs.
pub fn bce_loss_per_roi(p: f64, y: f64) -> f64 {
    debug_assert!(y == 0.0 || y == 1.0);
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Weighted mean BCE over a batch: `L = (1/N) sum_i w_i bce(p_i, y_i)`.
pub fn batch_loss(params: &MlpParams, feats: &Matrix, labels: &[f64], weights: &[f64]) -> Result<f64> {
    let probs = forward(params, feats)?;
    if labels.len() != probs.len() || weights.len() != probs.len() {
        return Err(Error::invalid("batch_loss length mismatch"));
    }
    let n = probs.len() as f64;
    Ok(probs
        .iter()
        .zip(labels.iter().zip(weights))
        .map(|(&p, (&y, &w))| w * bce_loss_per_roi(p, y))
        .sum::<f64>()
        / n)
}

/// Analytic gradient of [`batch_loss`]. Weights are treated as constants: no
/// gradient flows through the similarity weights.
pub fn backward(
    params: &MlpParams,
    feats: &Matrix,
    labels: &[f64],
    weights: &[f64],
) -> Result<MlpGrads> {
    let n_rows = feats.rows();
    if labels.len() != n_rows || weights.len() != n_rows {
        return Err(Error::invalid(format!(
            "backward length mismatch: {} rows, {} labels, {} weights",
            n_rows,
            labels.len(),
            weights.len()
        )));
    }
    if feats.cols() != params.input_dim() {
        return Err(Error::invalid(format!(
            "feature dim {} does not match classifier input dim {}",
            feats.cols(),
            params.input_dim()
        )));
    }

    let z1 = feats.matmul(&params.w1)?.add_row_bias(&params.b1)?;
    let hidden = z1.map(gelu);
    let z2 = hidden.matmul(&params.w2)?.add_row_bias(&params.b2)?;

    let n = n_rows as f64;
    let h = params.hidden_dim();
    let mut grads = MlpGrads::zeros_like(params);

    // dL/dz2_i = w_i (p_i - y_i) / N; rows with weight zero contribute exact zeros.
    let mut dz2 = vec![0.0; n_rows];
    for i in 0..n_rows {
        let p = sigmoid(z2.get(i, 0));
        dz2[i] = weights[i] * (p - labels[i]) / n;
    }

    for i in 0..n_rows {
        let d = dz2[i];
        if d == 0.0 {
            continue;
        }
        grads.b2[0] += d;
        for j in 0..h {
            grads.w2.set(j, 0, grads.w2.get(j, 0) + hidden.get(i, j) * d);
        }
        // back through the hidden layer
        for j in 0..h {
            let dz1 = d * params.w2.get(j, 0) * gelu_prime(z1.get(i, j));
            if dz1 == 0.0 {
                continue;
            }
            grads.b1[j] += dz1;
            for k in 0..feats.cols() {
                grads.w1.set(k, j, grads.w1.get(k, j) + feats.get(i, k) * dz1);
            }
        }
    }
    Ok(grads)
}

/// Adam accumulator state; moment shapes mirror the parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m_w1: Matrix,
    pub m_b1: Vec<f64>,
    pub m_w2: Matrix,
    pub m_b2: Vec<f64>,
    pub v_w1: Matrix,
    pub v_b1: Vec<f64>,
    pub v_w2: Matrix,
    pub v_b2: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams, lr: f64) -> Self {
        AdamState {
            m_w1: Matrix::zeros(params.w1.rows(), params.w1.cols()),
            m_b1: vec![0.0; params.b1.len()],
            m_w2: Matrix::zeros(params.w2.rows(), params.w2.cols()),
            m_b2: vec![0.0; params.b2.len()],
            v_w1: Matrix::zeros(params.w1.rows(), params.w1.cols()),
            v_b1: vec![0.0; params.b1.len()],
            v_w2: Matrix::zeros(params.w2.rows(), params.w2.cols()),
            v_b2: vec![0.0; params.b2.len()],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr,
        }
    }
}

fn adam_apply(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    b1: f64,
    b2: f64,
    eps: f64,
    lr: f64,
) {
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One Adam update with bias correction; increments the step count.
pub fn adam_step(params: &mut MlpParams, grads: &MlpGrads, state: &mut AdamState) {
    state.step += 1;
    let (t, b1, b2, eps, lr) = (
        state.step,
        state.beta1,
        state.beta2,
        state.epsilon,
        state.lr,
    );
    adam_apply(
        params.w1.data_mut(),
        grads.w1.data(),
        state.m_w1.data_mut(),
        state.v_w1.data_mut(),
        t,
        b1,
        b2,
        eps,
        lr,
    );
    adam_apply(
        &mut params.b1, &grads.b1, &mut state.m_b1, &mut state.v_b1, t, b1, b2, eps, lr,
    );
    adam_apply(
        params.w2.data_mut(),
        grads.w2.data(),
        state.m_w2.data_mut(),
        state.v_w2.data_mut(),
        t,
        b1,
        b2,
        eps,
        lr,
    );
    adam_apply(
        &mut params.b2, &grads.b2, &mut state.m_b2, &mut state.v_b2, t, b1, b2, eps, lr,
    );
}

/// Flat-vector Adam used where parameters only exist in flattened form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatAdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr: f64,
}

impl FlatAdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        FlatAdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        adam_apply(
            params,
            grads,
            &mut self.m,
            &mut self.v,
            self.step,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.lr,
        );
    }
}

/// Pseudo-label assignment for one ROI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoLabelKind {
    Positive,
    Negative,
    Ignored,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub roi_index: usize,
    pub label: PseudoLabelKind,
    pub confidence: f64,
    pub origin_meta_iter: usize,
}

/// Pseudo-labels for a whole dataset snapshot, one entry per ROI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    labels: Vec<PseudoLabel>,
    origin_meta_iter: usize,
}

impl PseudoLabelSet {
    pub fn labels(&self) -> &[PseudoLabel] {
        &self.labels
    }

    pub fn origin_meta_iter(&self) -> usize {
        self.origin_meta_iter
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn kind(&self, roi_index: usize) -> PseudoLabelKind {
        self.labels[roi_index].label
    }

    /// ROI indices carrying a positive or negative label, in index order.
    pub fn labeled_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .filter(|l| l.label != PseudoLabelKind::Ignored)
            .map(|l| l.roi_index)
            .collect()
    }

    pub fn count(&self, kind: PseudoLabelKind) -> usize {
        self.labels.iter().filter(|l| l.label == kind).count()
    }
}

/// Thresholds probabilities into positives (`p >= tau_pos`, boundary
/// inclusive), negatives (`p <= tau_neg`) and ignored regions.
pub fn threshold_labels(
    probs: &[f64],
    tau_pos: f64,
    tau_neg: f64,
    origin_meta_iter: usize,
) -> Result<PseudoLabelSet> {
    if !(0.0..=1.0).contains(&tau_pos) || !(0.0..=1.0).contains(&tau_neg) || tau_neg >= tau_pos {
        return Err(Error::invalid(format!(
            "thresholds must satisfy 0 <= tau_neg < tau_pos <= 1, got tau_neg={tau_neg}, tau_pos={tau_pos}"
        )));
    }
    let labels = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let label = if p >= tau_pos {
                PseudoLabelKind::Positive
            } else if p <= tau_neg {
                PseudoLabelKind::Negative
            } else {
                PseudoLabelKind::Ignored
            };
            PseudoLabel {
                roi_index: i,
                label,
                confidence: p,
                origin_meta_iter,
            }
        })
        .collect();
    Ok(PseudoLabelSet {
        labels,
        origin_meta_iter,
    })
}
