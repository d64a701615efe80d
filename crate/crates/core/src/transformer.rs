//! Transformer over ROI feature tokens: a linear embedding followed by a
//! stack of pre-norm encoder blocks (multi-head self-attention + GELU
//! feed-forward, residual connections around both).
//!
//! Tokens form a set; there is no positional encoding, so the whole stack is
//! permutation-equivariant over rows. In the default pipeline configuration
//! the parameters are frozen after seeded random initialization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{layer_norm, gelu, Matrix};
use crate::rng::RngState;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture constants for one transformer stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub init_scale: f64,
}

impl TransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::invalid("transformer needs at least one encoder"));
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {} must be divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.init_scale < 0.0 {
            return Err(Error::invalid("init_scale must be non-negative"));
        }
        Ok(())
    }

    /// Total parameter count implied by the shapes.
    pub fn param_count(&self) -> usize {
        let d = self.model_dim;
        let dh = self.head_dim();
        let per_encoder = 3 * self.n_heads * d * dh   // per-head q/k/v projections
            + d * d                                   // output projection
            + d * self.ff_dim + self.ff_dim           // ff in + bias
            + self.ff_dim * d + d                     // ff out + bias
            + 4 * d; // two layer-norm gain/bias pairs
        self.n_layers * per_encoder + self.input_dim * d + d
    }
}

/// Query/key/value projections for a single attention head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

/// One pre-norm encoder block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub heads: Vec<HeadParams>,
    pub w_o: Matrix,
    pub ff_w1: Matrix,
    pub ff_b1: Vec<f64>,
    pub ff_w2: Matrix,
    pub ff_b2: Vec<f64>,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerWeights {
    pub embed_w: Matrix,
    pub embed_b: Vec<f64>,
    pub encoders: Vec<EncoderParams>,
}

/// Full parameter set; serializes as `{config, weights}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerParams {
    pub config: TransformerConfig,
    pub weights: TransformerWeights,
}

/// Batch of ROI feature tokens, one row per positive region.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    tokens: Matrix,
}

impl TokenBatch {
    pub fn new(tokens: Matrix) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::invalid("token batch needs at least one token"));
        }
        Ok(TokenBatch { tokens })
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }
}

fn init_weight(rng: &mut RngState, rows: usize, cols: usize, init_scale: f64) -> Matrix {
    // Normal(0, init_scale^2 / fan_in), fan_in = rows of the right-multiplied matrix.
    let std = init_scale / (rows as f64).sqrt();
    rng.randn(rows, cols).map(|v| v * std)
}

/// Seeds a fresh parameter set. Weights are Normal(0, init_scale^2/fan_in),
/// biases zero, layer-norm gains one.
pub fn init_transformer(rng: &mut RngState, config: &TransformerConfig) -> Result<TransformerParams> {
    config.validate()?;
    let d = self_dim(config);
    let dh = config.head_dim();

    let embed_w = init_weight(rng, config.input_dim, d, config.init_scale);
    let embed_b = vec![0.0; d];

    let mut encoders = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let heads = (0..config.n_heads)
            .map(|_| HeadParams {
                w_q: init_weight(rng, d, dh, config.init_scale),
                w_k: init_weight(rng, d, dh, config.init_scale),
                w_v: init_weight(rng, d, dh, config.init_scale),
            })
            .collect();
        encoders.push(EncoderParams {
            heads,
            w_o: init_weight(rng, d, d, config.init_scale),
            ff_w1: init_weight(rng, d, config.ff_dim, config.init_scale),
            ff_b1: vec![0.0; config.ff_dim],
            ff_w2: init_weight(rng, config.ff_dim, d, config.init_scale),
            ff_b2: vec![0.0; d],
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
        });
    }

    Ok(TransformerParams {
        config: config.clone(),
        weights: TransformerWeights {
            embed_w,
            embed_b,
            encoders,
        },
    })
}

fn self_dim(config: &TransformerConfig) -> usize {
    config.model_dim
}

/// Row-stochastic attention matrix `softmax(Q K^T / sqrt(d_h))`.
pub fn attention_weights(embeds: &Matrix, w_q: &Matrix, w_k: &Matrix) -> Result<Matrix> {
    let q = embeds.matmul(w_q)?;
    let k = embeds.matmul(w_k)?;
    let scale = 1.0 / (w_q.cols() as f64).sqrt();
    let scores = q.matmul(&k.transpose())?.map(|v| v * scale);
    Ok(scores.softmax_rows())
}

/// Single-head scaled dot-product attention: returns `A V`, shape N x d_h.
pub fn attention_head(embeds: &Matrix, w_q: &Matrix, w_k: &Matrix, w_v: &Matrix) -> Result<Matrix> {
    let a = attention_weights(embeds, w_q, w_k)?;
    let v = embeds.matmul(w_v)?;
    a.matmul(&v)
}

fn multi_head(embeds: &Matrix, heads: &[HeadParams], w_o: &Matrix) -> Result<Matrix> {
    let mut outputs = Vec::with_capacity(heads.len());
    for h in heads {
        outputs.push(attention_head(embeds, &h.w_q, &h.w_k, &h.w_v)?);
    }
    let refs: Vec<&Matrix> = outputs.iter().collect();
    Matrix::hstack(&refs)?.matmul(w_o)
}

fn layer_norm_rows(x: &Matrix, gain: &[f64], bias: &[f64]) -> Result<Matrix> {
    let mut rows = Vec::with_capacity(x.rows());
    for row in x.iter_rows() {
        rows.push(layer_norm(row, gain, bias, LAYER_NORM_EPS)?);
    }
    Matrix::from_rows(&rows)
}

/// Pre-norm encoder block:
/// `y = x + MSA(LN1(x))` then `out = y + FF(LN2(y))`.
pub fn encoder_forward(params: &EncoderParams, x: &Matrix) -> Result<Matrix> {
    let normed = layer_norm_rows(x, &params.ln1_gain, &params.ln1_bias)?;
    let attended = multi_head(&normed, &params.heads, &params.w_o)?;
    let y = x.add(&attended)?;

    let normed2 = layer_norm_rows(&y, &params.ln2_gain, &params.ln2_bias)?;
    let hidden = normed2
        .matmul(&params.ff_w1)?
        .add_row_bias(&params.ff_b1)?
        .map(gelu);
    let ff = hidden.matmul(&params.ff_w2)?.add_row_bias(&params.ff_b2)?;
    y.add(&ff)
}

/// Embeds each token and runs the encoder stack; row i of the output is the
/// attentive feature of input token i.
pub fn transformer_forward(params: &TransformerParams, batch: &TokenBatch) -> Result<Matrix> {
    if batch.tokens().cols() != params.config.input_dim {
        return Err(Error::invalid(format!(
            "token dim {} does not match embedding input dim {}",
            batch.tokens().cols(),
            params.config.input_dim
        )));
    }
    let mut x = batch
        .tokens()
        .matmul(&params.weights.embed_w)?
        .add_row_bias(&params.weights.embed_b)?;
    for encoder in &params.weights.encoders {
        x = encoder_forward(encoder, &x)?;
    }
    Ok(x)
}

/// Bare multi-head self-attention block operating directly on raw features
/// (no embedding, no feed-forward). Used by the `self-attention` prototype
/// computation mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfAttentionParams {
    pub dim: usize,
    pub heads: Vec<HeadParams>,
    pub w_o: Matrix,
}

pub fn init_self_attention(
    rng: &mut RngState,
    dim: usize,
    n_heads: usize,
    init_scale: f64,
) -> Result<SelfAttentionParams> {
    if n_heads == 0 || dim % n_heads != 0 {
        return Err(Error::invalid(format!(
            "feature dim {dim} must be divisible by n_heads {n_heads}"
        )));
    }
    let dh = dim / n_heads;
    let heads = (0..n_heads)
        .map(|_| HeadParams {
            w_q: init_weight(rng, dim, dh, init_scale),
            w_k: init_weight(rng, dim, dh, init_scale),
            w_v: init_weight(rng, dim, dh, init_scale),
        })
        .collect();
    Ok(SelfAttentionParams {
        dim,
        heads,
        w_o: init_weight(rng, dim, dim, init_scale),
    })
}

pub fn self_attention_forward(params: &SelfAttentionParams, feats: &Matrix) -> Result<Matrix> {
    if feats.cols() != params.dim {
        return Err(Error::invalid(format!(
            "feature dim {} does not match attention dim {}",
            feats.cols(),
            params.dim
        )));
    }
    multi_head(feats, &params.heads, &params.w_o)
}

/// Flattens every weight into a single parameter vector (deterministic order).
pub fn flatten_params(params: &TransformerParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.config.param_count());
    out.extend_from_slice(params.weights.embed_w.data());
    out.extend_from_slice(&params.weights.embed_b);
    for enc in &params.weights.encoders {
        for h in &enc.heads {
            out.extend_from_slice(h.w_q.data());
            out.extend_from_slice(h.w_k.data());
            out.extend_from_slice(h.w_v.data());
        }
        out.extend_from_slice(enc.w_o.data());
        out.extend_from_slice(enc.ff_w1.data());
        out.extend_from_slice(&enc.ff_b1);
        out.extend_from_slice(enc.ff_w2.data());
        out.extend_from_slice(&enc.ff_b2);
        out.extend_from_slice(&enc.ln1_gain);
        out.extend_from_slice(&enc.ln1_bias);
        out.extend_from_slice(&enc.ln2_gain);
        out.extend_from_slice(&enc.ln2_bias);
    }
    out
}

/// Inverse of [`flatten_params`].
pub fn unflatten_params(template: &TransformerParams, flat: &[f64]) -> Result<TransformerParams> {
    if flat.len() != template.config.param_count() {
        return Err(Error::invalid(format!(
            "flat parameter length {} does not match expected {}",
            flat.len(),
            template.config.param_count()
        )));
    }
    let mut params = template.clone();
    let mut pos = 0;
    let take_matrix = |m: &mut Matrix, pos: &mut usize| {
        let n = m.rows() * m.cols();
        m.data_mut().copy_from_slice(&flat[*pos..*pos + n]);
        *pos += n;
    };
    let take_vec = |v: &mut Vec<f64>, pos: &mut usize| {
        let n = v.len();
        v.copy_from_slice(&flat[*pos..*pos + n]);
        *pos += n;
    };
    take_matrix(&mut params.weights.embed_w, &mut pos);
    take_vec(&mut params.weights.embed_b, &mut pos);
    for enc in &mut params.weights.encoders {
        for h in &mut enc.heads {
            take_matrix(&mut h.w_q, &mut pos);
            take_matrix(&mut h.w_k, &mut pos);
            take_matrix(&mut h.w_v, &mut pos);
        }
        take_matrix(&mut enc.w_o, &mut pos);
        take_matrix(&mut enc.ff_w1, &mut pos);
        take_vec(&mut enc.ff_b1, &mut pos);
        take_matrix(&mut enc.ff_w2, &mut pos);
        take_vec(&mut enc.ff_b2, &mut pos);
        take_vec(&mut enc.ln1_gain, &mut pos);
        take_vec(&mut enc.ln1_bias, &mut pos);
        take_vec(&mut enc.ln2_gain, &mut pos);
        take_vec(&mut enc.ln2_bias, &mut pos);
    }
    debug_assert_eq!(pos, flat.len());
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_config() -> TransformerConfig {
        TransformerConfig {
            input_dim: 16,
            model_dim: 32,
            ff_dim: 64,
            n_heads: 4,
            n_layers: 2,
            init_scale: 1.0,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = default_config();
        let a = init_transformer(&mut RngState::new(11), &cfg).unwrap();
        let b = init_transformer(&mut RngState::new(11), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_scale_zero_gives_zero_weights_and_unit_gains() {
        let cfg = TransformerConfig {
            init_scale: 0.0,
            ..default_config()
        };
        let p = init_transformer(&mut RngState::new(1), &cfg).unwrap();
        assert!(p.weights.embed_w.data().iter().all(|&v| v == 0.0));
        for enc in &p.weights.encoders {
            assert!(enc.w_o.data().iter().all(|&v| v == 0.0));
            assert!(enc.ln1_gain.iter().all(|&v| v == 1.0));
            assert!(enc.ln2_gain.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn param_count_matches_shape_audit() {
        let cfg = default_config();
        // Shape audit oracle: walk the actual parameter structures.
        let p = init_transformer(&mut RngState::new(2), &cfg).unwrap();
        let mut counted = p.weights.embed_w.rows() * p.weights.embed_w.cols()
            + p.weights.embed_b.len();
        for enc in &p.weights.encoders {
            for h in &enc.heads {
                counted += h.w_q.rows() * h.w_q.cols()
                    + h.w_k.rows() * h.w_k.cols()
                    + h.w_v.rows() * h.w_v.cols();
            }
            counted += enc.w_o.rows() * enc.w_o.cols();
            counted += enc.ff_w1.rows() * enc.ff_w1.cols() + enc.ff_b1.len();
            counted += enc.ff_w2.rows() * enc.ff_w2.cols() + enc.ff_b2.len();
            counted += enc.ln1_gain.len() + enc.ln1_bias.len();
            counted += enc.ln2_gain.len() + enc.ln2_bias.len();
        }
        assert_eq!(cfg.param_count(), counted);
        // Hand expansion for the default shape.
        let expected = 2 * (3 * 4 * 32 * 8 + 32 * 32 + 32 * 64 + 64 + 64 * 32 + 32 + 4 * 32)
            + 16 * 32
            + 32;
        assert_eq!(cfg.param_count(), expected);
        assert_eq!(flatten_params(&p).len(), expected);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = TransformerConfig {
            n_heads: 5,
            ..default_config()
        };
        assert!(init_transformer(&mut RngState::new(0), &cfg).is_err());
    }

    #[test]
    fn single_token_attention_is_identity_weight() {
        let mut rng = RngState::new(3);
        let embeds = rng.randn(1, 8);
        let w_q = rng.randn(8, 4);
        let w_k = rng.randn(8, 4);
        let w_v = rng.randn(8, 4);
        let a = attention_weights(&embeds, &w_q, &w_k).unwrap();
        assert_eq!(a.shape(), (1, 1));
        assert!((a.get(0, 0) - 1.0).abs() < 1e-15);
        let out = attention_head(&embeds, &w_q, &w_k, &w_v).unwrap();
        let v = embeds.matmul(&w_v).unwrap();
        for c in 0..4 {
            assert!((out.get(0, c) - v.get(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_produce_identical_rows() {
        let mut rng = RngState::new(4);
        let token = rng.normal_vec(8);
        let embeds = Matrix::from_rows(&[token.clone(), token]).unwrap();
        let w_q = rng.randn(8, 4);
        let w_k = rng.randn(8, 4);
        let w_v = rng.randn(8, 4);
        let out = attention_head(&embeds, &w_q, &w_k, &w_v).unwrap();
        for c in 0..4 {
            assert!((out.get(0, c) - out.get(1, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_head_matches_step_by_step_oracle() {
        // N=2 tokens, d_h=2, hand-fixed weights; recompute Q, K, V, A manually.
        let embeds = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let w_q = Matrix::from_rows(&[vec![0.3, -0.1], vec![0.2, 0.4]]).unwrap();
        let w_k = Matrix::from_rows(&[vec![-0.2, 0.5], vec![0.1, 0.1]]).unwrap();
        let w_v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();

        let q = embeds.matmul(&w_q).unwrap();
        let k = embeds.matmul(&w_k).unwrap();
        let v = embeds.matmul(&w_v).unwrap();
        let scale = 1.0 / 2.0_f64.sqrt();
        let mut expected = [[0.0; 2]; 2];
        for i in 0..2 {
            let s0 = (q.get(i, 0) * k.get(0, 0) + q.get(i, 1) * k.get(0, 1)) * scale;
            let s1 = (q.get(i, 0) * k.get(1, 0) + q.get(i, 1) * k.get(1, 1)) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            let (a0, a1) = (e0 / z, e1 / z);
            for c in 0..2 {
                expected[i][c] = a0 * v.get(0, c) + a1 * v.get(1, c);
            }
        }

        let out = attention_head(&embeds, &w_q, &w_k, &w_v).unwrap();
        for i in 0..2 {
            for c in 0..2 {
                assert!((out.get(i, c) - expected[i][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weight_encoder_is_residual_pass_through() {
        let cfg = TransformerConfig {
            init_scale: 0.0,
            n_layers: 1,
            ..default_config()
        };
        let p = init_transformer(&mut RngState::new(5), &cfg).unwrap();
        let x = RngState::new(6).randn(3, 32);
        let out = encoder_forward(&p.weights.encoders[0], &x).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_weight_stack_maps_tokens_to_zero() {
        // Zero embedding collapses tokens to zero and the residual path keeps them there.
        let cfg = TransformerConfig {
            init_scale: 0.0,
            n_layers: 1,
            ..default_config()
        };
        let p = init_transformer(&mut RngState::new(7), &cfg).unwrap();
        let batch = TokenBatch::new(RngState::new(8).randn(4, 16)).unwrap();
        let out = transformer_forward(&p, &batch).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let cfg = default_config();
        let p = init_transformer(&mut RngState::new(9), &cfg).unwrap();
        let x = RngState::new(10).randn(5, 32);
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = x.select_rows(&perm).unwrap();
        let out = encoder_forward(&p.weights.encoders[0], &x).unwrap();
        let out_perm = encoder_forward(&p.weights.encoders[0], &permuted).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for c in 0..32 {
                assert!((out_perm.get(i, c) - out.get(src, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn encoder_matches_composition_of_sub_operations() {
        let cfg = default_config();
        let p = init_transformer(&mut RngState::new(12), &cfg).unwrap();
        let enc = &p.weights.encoders[0];
        let x = RngState::new(13).randn(3, 32);

        // Recompose from the public sub-operations.
        let mut normed_rows = Vec::new();
        for row in x.iter_rows() {
            normed_rows.push(layer_norm(row, &enc.ln1_gain, &enc.ln1_bias, LAYER_NORM_EPS).unwrap());
        }
        let normed = Matrix::from_rows(&normed_rows).unwrap();
        let mut head_outs = Vec::new();
        for h in &enc.heads {
            head_outs.push(attention_head(&normed, &h.w_q, &h.w_k, &h.w_v).unwrap());
        }
        let refs: Vec<&Matrix> = head_outs.iter().collect();
        let attended = Matrix::hstack(&refs).unwrap().matmul(&enc.w_o).unwrap();
        let y = x.add(&attended).unwrap();
        let mut normed2_rows = Vec::new();
        for row in y.iter_rows() {
            normed2_rows
                .push(layer_norm(row, &enc.ln2_gain, &enc.ln2_bias, LAYER_NORM_EPS).unwrap());
        }
        let normed2 = Matrix::from_rows(&normed2_rows).unwrap();
        let expected = y
            .add(
                &normed2
                    .matmul(&enc.ff_w1)
                    .unwrap()
                    .add_row_bias(&enc.ff_b1)
                    .unwrap()
                    .map(gelu)
                    .matmul(&enc.ff_w2)
                    .unwrap()
                    .add_row_bias(&enc.ff_b2)
                    .unwrap(),
            )
            .unwrap();

        let actual = encoder_forward(enc, &x).unwrap();
        for (a, e) in actual.data().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_token_width() {
        let cfg = default_config();
        let p = init_transformer(&mut RngState::new(14), &cfg).unwrap();
        let batch = TokenBatch::new(RngState::new(15).randn(2, 8)).unwrap();
        assert!(transformer_forward(&p, &batch).is_err());
    }

    #[test]
    fn forward_is_finite_and_reproducible() {
        let cfg = default_config();
        let p = init_transformer(&mut RngState::new(16), &cfg).unwrap();
        let batch = TokenBatch::new(RngState::new(17).randn(6, 16)).unwrap();
        let out1 = transformer_forward(&p, &batch).unwrap();
        let out2 = transformer_forward(&p, &batch).unwrap();
        assert!(out1.is_finite());
        assert_eq!(out1, out2);
        let norm_sq: f64 = out1.data().iter().map(|v| v * v).sum();
        assert!(norm_sq.sqrt() < 1e4, "unexpectedly large output norm");
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = default_config();
        let p = init_transformer(&mut RngState::new(18), &cfg).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: TransformerParams = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn flatten_round_trip() {
        let cfg = default_config();
        let p = init_transformer(&mut RngState::new(19), &cfg).unwrap();
        let flat = flatten_params(&p);
        let back = unflatten_params(&p, &flat).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn self_attention_block_shape_and_determinism() {
        let sa = init_self_attention(&mut RngState::new(20), 16, 4, 0.5).unwrap();
        let x = RngState::new(21).randn(5, 16);
        let out = self_attention_forward(&sa, &x).unwrap();
        assert_eq!(out.shape(), (5, 16));
        let out2 = self_attention_forward(&sa, &x).unwrap();
        assert_eq!(out, out2);
    }
}
