//! Attentive class prototype machinery: predictive-entropy weights over ROI
//! features, the weighted prototype average, its EMA accumulation across
//! batches, and the cosine-similarity weights that down-weight classification
//! losses of regions far from the prototype.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{cosine_similarity, norm, Matrix};

/// How per-sample entropies turn into aggregation weights.
///
/// `NormalizedSum` divides each entropy by the batch entropy total before the
/// `1 - x` flip, which couples a sample's weight to batch composition.
/// `OneMinusRaw` normalizes by the binary-entropy maximum (ln 2) instead, so
/// weights land in `[0, 1]` independent of the batch. The latter is the
/// default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyMode {
    NormalizedSum,
    OneMinusRaw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyWeights {
    weights: Vec<f64>,
    mode: EntropyMode,
}

impl EntropyWeights {
    /// Uniform weights, used by prototype modes that skip entropy weighting.
    pub fn uniform(n: usize) -> Self {
        EntropyWeights {
            weights: vec![1.0; n],
            mode: EntropyMode::OneMinusRaw,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mode(&self) -> EntropyMode {
        self.mode
    }
}

/// How cosine similarities turn into per-ROI loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMode {
    /// `max(0, cos)`: clamping keeps loss weights non-negative when a feature
    /// points away from the prototype.
    RawClamped,
    /// Softmax over the cosine vector; weights sum to one across the batch.
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityWeights {
    d: Vec<f64>,
    mode: SimilarityMode,
    degenerate_rows: usize,
}

impl SimilarityWeights {
    /// All-ones weights (the unweighted self-training baseline).
    pub fn pinned_one(n: usize) -> Self {
        SimilarityWeights {
            d: vec![1.0; n],
            mode: SimilarityMode::RawClamped,
            degenerate_rows: 0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.d
    }

    pub fn mode(&self) -> SimilarityMode {
        self.mode
    }

    /// Number of zero-norm rows whose weight was forced to zero.
    pub fn degenerate_rows(&self) -> usize {
        self.degenerate_rows
    }
}

/// Running prototype with EMA bookkeeping. Reset at each meta-iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeState {
    f_final: Option<Vec<f64>>,
    alpha: f64,
    iteration: usize,
}

impl PrototypeState {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!(
                "EMA keep ratio must be in (0, 1), got {alpha}"
            )));
        }
        Ok(PrototypeState {
            f_final: None,
            alpha,
            iteration: 0,
        })
    }

    pub fn prototype(&self) -> Option<&[f64]> {
        self.f_final.as_deref()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_set(&self) -> bool {
        self.f_final.is_some()
    }
}

/// Binary entropy in nats with the `0 ln 0 = 0` convention.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "probability out of range [0, 1]: {p}"
        )));
    }
    let term = |x: f64| if x == 0.0 { 0.0 } else { -x * x.ln() };
    Ok(term(p) + term(1.0 - p))
}

/// Aggregation weights from predictive entropies of per-ROI probabilities.
pub fn entropy_weights(probs: &[f64], mode: EntropyMode) -> Result<EntropyWeights> {
    if probs.is_empty() {
        return Err(Error::invalid("entropy_weights on empty probability list"));
    }
    let entropies = probs
        .iter()
        .map(|&p| binary_entropy(p))
        .collect::<Result<Vec<f64>>>()?;
    let weights = match mode {
        EntropyMode::NormalizedSum => {
            let total: f64 = entropies.iter().sum();
            if total == 0.0 {
                vec![1.0; entropies.len()]
            } else {
                entropies.iter().map(|h| 1.0 - h / total).collect()
            }
        }
        EntropyMode::OneMinusRaw => entropies
            .iter()
            .map(|h| 1.0 - h / std::f64::consts::LN_2)
            .collect(),
    };
    Ok(EntropyWeights { weights, mode })
}

/// Weighted average of attentive ROI features:
/// `F = (1/N) * sum_i w_i f_i`.
///
/// The 1/N factor is kept even though weights need not sum to N; downstream
/// cosine similarity is scale-invariant, so only the EMA blend sees the
/// absolute magnitude.
pub fn attentive_prototype(att_feats: &Matrix, w: &EntropyWeights) -> Result<Vec<f64>> {
    if att_feats.rows() != w.weights().len() {
        return Err(Error::invalid(format!(
            "feature rows {} do not match weight count {}",
            att_feats.rows(),
            w.weights().len()
        )));
    }
    if att_feats.rows() == 0 {
        return Err(Error::invalid("attentive_prototype on empty feature set"));
    }
    let n = att_feats.rows() as f64;
    let mut proto = vec![0.0; att_feats.cols()];
    for (row, &wi) in att_feats.iter_rows().zip(w.weights()) {
        for (p, &x) in proto.iter_mut().zip(row) {
            *p += wi * x;
        }
    }
    for p in proto.iter_mut() {
        *p /= n;
    }
    Ok(proto)
}

/// Blends a fresh batch prototype into the running state.
///
/// First update of a reset state adopts the batch prototype directly; after
/// that `f <- alpha * f + (1 - alpha) * f_att`.
pub fn ema_update(state: &mut PrototypeState, f_att: &[f64]) -> Result<()> {
    if f_att.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("EMA update with non-finite prototype"));
    }
    match &mut state.f_final {
        None => state.f_final = Some(f_att.to_vec()),
        Some(f) => {
            if f.len() != f_att.len() {
                return Err(Error::invalid(format!(
                    "prototype length changed: {} vs {}",
                    f.len(),
                    f_att.len()
                )));
            }
            let a = state.alpha;
            for (fi, &xi) in f.iter_mut().zip(f_att) {
                *fi = a * *fi + (1.0 - a) * xi;
            }
        }
    }
    state.iteration += 1;
    Ok(())
}

/// Per-ROI similarity weights against the prototype.
///
/// Zero-norm feature rows get weight zero and are counted as degenerate; a
/// zero-norm prototype is an error because no comparison is meaningful.
pub fn similarity_weights(
    proto: &[f64],
    roi_feats: &Matrix,
    mode: SimilarityMode,
) -> Result<SimilarityWeights> {
    if norm(proto) == 0.0 {
        return Err(Error::DegenerateState(
            "similarity against zero-norm prototype".into(),
        ));
    }
    if roi_feats.cols() != proto.len() {
        return Err(Error::invalid(format!(
            "feature dim {} does not match prototype length {}",
            roi_feats.cols(),
            proto.len()
        )));
    }
    let mut cos = Vec::with_capacity(roi_feats.rows());
    let mut valid = Vec::with_capacity(roi_feats.rows());
    for row in roi_feats.iter_rows() {
        if norm(row) == 0.0 {
            cos.push(0.0);
            valid.push(false);
        } else {
            cos.push(cosine_similarity(proto, row)?);
            valid.push(true);
        }
    }
    let degenerate_rows = valid.iter().filter(|v| !**v).count();

    let d = match mode {
        SimilarityMode::RawClamped => cos
            .iter()
            .zip(&valid)
            .map(|(&c, &ok)| if ok { c.max(0.0) } else { 0.0 })
            .collect(),
        SimilarityMode::Softmax => {
            let max = cos
                .iter()
                .zip(&valid)
                .filter(|(_, &ok)| ok)
                .map(|(&c, _)| c)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut exps: Vec<f64> = cos
                .iter()
                .zip(&valid)
                .map(|(&c, &ok)| if ok { (c - max).exp() } else { 0.0 })
                .collect();
            let total: f64 = exps.iter().sum();
            if total > 0.0 {
                for e in exps.iter_mut() {
                    *e /= total;
                }
            }
            exps
        }
    };
    Ok(SimilarityWeights {
        d,
        mode,
        degenerate_rows,
    })
}

/// Classification loss with similarity-weighted positive regions:
/// `(sum_i d_i l_i + sum_j l_j) / (n_pos + n_neg)`.
pub fn weighted_cls_loss(
    pos_losses: &[f64],
    neg_losses: &[f64],
    d: &SimilarityWeights,
) -> Result<f64> {
    if d.values().len() != pos_losses.len() {
        return Err(Error::invalid(format!(
            "similarity weight count {} does not match positive loss count {}",
            d.values().len(),
            pos_losses.len()
        )));
    }
    let n = pos_losses.len() + neg_losses.len();
    if n == 0 {
        return Err(Error::invalid("weighted_cls_loss over zero regions"));
    }
    let mut total = 0.0;
    for (&l, &w) in pos_losses.iter().zip(d.values()) {
        total += w * l;
    }
    for &l in neg_losses {
        total += l;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use proptest::prelude::*;

    #[test]
    fn entropy_reference_points() {
        assert!((binary_entropy(0.5).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        // independent evaluation: -0.9 ln 0.9 - 0.1 ln 0.1
        assert!((binary_entropy(0.9).unwrap() - 0.3250829733914482).abs() < 1e-12);
        assert!(binary_entropy(-0.1).is_err());
        assert!(binary_entropy(1.1).is_err());
    }

    #[test]
    fn zero_entropy_probs_give_unit_weights_in_both_modes() {
        for mode in [EntropyMode::NormalizedSum, EntropyMode::OneMinusRaw] {
            let w = entropy_weights(&[0.0, 1.0, 1.0, 0.0], mode).unwrap();
            assert!(w.weights().iter().all(|&x| x == 1.0), "{mode:?}");
        }
    }

    #[test]
    fn normalized_sum_splits_equal_entropies_evenly() {
        let w = entropy_weights(&[0.3, 0.7], EntropyMode::NormalizedSum).unwrap();
        assert!((w.weights()[0] - 0.5).abs() < 1e-12);
        assert!((w.weights()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn one_minus_raw_reference_values() {
        let w = entropy_weights(&[0.5, 0.99], EntropyMode::OneMinusRaw).unwrap();
        assert!(w.weights()[0].abs() < 1e-12);
        let expected = 1.0 - binary_entropy(0.99).unwrap() / std::f64::consts::LN_2;
        assert!((w.weights()[1] - expected).abs() < 1e-15);
        assert!((w.weights()[1] - 0.9192146) < 1e-6);
        assert!(w.weights().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn prototype_with_unit_weights_is_row_mean() {
        let feats = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        let proto = attentive_prototype(&feats, &EntropyWeights::uniform(2)).unwrap();
        assert_eq!(proto, vec![2.0, 4.0]);
    }

    #[test]
    fn prototype_keeps_the_one_over_n_factor() {
        // one weight 1, rest 0, N=4 -> that row divided by 4
        let feats = Matrix::from_rows(&[
            vec![8.0, 4.0],
            vec![1.0, 1.0],
            vec![2.0, 2.0],
            vec![3.0, 3.0],
        ])
        .unwrap();
        let w = EntropyWeights {
            weights: vec![1.0, 0.0, 0.0, 0.0],
            mode: EntropyMode::OneMinusRaw,
        };
        let proto = attentive_prototype(&feats, &w).unwrap();
        assert_eq!(proto, vec![2.0, 1.0]);
    }

    #[test]
    fn prototype_direct_evaluation() {
        let feats = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let w = EntropyWeights {
            weights: vec![0.5, 0.5],
            mode: EntropyMode::OneMinusRaw,
        };
        assert_eq!(
            attentive_prototype(&feats, &w).unwrap(),
            vec![0.25, 0.25]
        );
    }

    #[test]
    fn ema_initialization_and_fixed_point() {
        let mut state = PrototypeState::new(0.9).unwrap();
        assert!(!state.is_set());
        ema_update(&mut state, &[1.0, 2.0]).unwrap();
        assert_eq!(state.prototype().unwrap(), &[1.0, 2.0]);
        assert_eq!(state.iteration(), 1);

        ema_update(&mut state, &[1.0, 2.0]).unwrap();
        assert_eq!(state.prototype().unwrap(), &[1.0, 2.0]);
        assert_eq!(state.iteration(), 2);
    }

    #[test]
    fn ema_geometric_decay() {
        let alpha = 0.9;
        let target = vec![2.0, -1.0, 0.5];
        let start = vec![5.0, 5.0, 5.0];
        let mut state = PrototypeState::new(alpha).unwrap();
        ema_update(&mut state, &start).unwrap();
        let initial_err: f64 = norm(&start
            .iter()
            .zip(&target)
            .map(|(a, b)| a - b)
            .collect::<Vec<f64>>());
        for j in 1..=10 {
            ema_update(&mut state, &target).unwrap();
            let err: f64 = norm(&state
                .prototype()
                .unwrap()
                .iter()
                .zip(&target)
                .map(|(a, b)| a - b)
                .collect::<Vec<f64>>());
            assert!(
                (err - alpha.powi(j) * initial_err).abs() < 1e-9,
                "step {j}: err={err}"
            );
        }
    }

    #[test]
    fn invalid_alpha_rejected() {
        assert!(PrototypeState::new(0.0).is_err());
        assert!(PrototypeState::new(1.0).is_err());
        assert!(PrototypeState::new(0.5).is_ok());
    }

    #[test]
    fn similarity_reference_cases() {
        let proto = vec![1.0, 1.0];
        let feats = Matrix::from_rows(&[
            vec![1.0, 1.0],   // aligned
            vec![-1.0, -1.0], // opposite
            vec![0.0, 0.0],   // degenerate
        ])
        .unwrap();
        let w = similarity_weights(&proto, &feats, SimilarityMode::RawClamped).unwrap();
        assert!((w.values()[0] - 1.0).abs() < 1e-12);
        assert_eq!(w.values()[1], 0.0);
        assert_eq!(w.values()[2], 0.0);
        assert_eq!(w.degenerate_rows(), 1);
    }

    #[test]
    fn similarity_softmax_of_equal_cosines() {
        let proto = vec![1.0, 0.0];
        let feats = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 2.0]]).unwrap();
        let w = similarity_weights(&proto, &feats, SimilarityMode::Softmax).unwrap();
        assert!((w.values()[0] - 0.5).abs() < 1e-12);
        assert!((w.values()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_prototype_is_degenerate_state() {
        let feats = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let err = similarity_weights(&[0.0, 0.0], &feats, SimilarityMode::RawClamped);
        assert!(matches!(err, Err(Error::DegenerateState(_))));
    }

    #[test]
    fn similarity_invariant_under_prototype_scaling() {
        let mut rng = RngState::new(42);
        let feats = rng.randn(6, 8);
        let proto = rng.normal_vec(8);
        for mode in [SimilarityMode::RawClamped, SimilarityMode::Softmax] {
            let base = similarity_weights(&proto, &feats, mode).unwrap();
            for c in [0.001, 0.5, 3.0, 1e6] {
                let scaled: Vec<f64> = proto.iter().map(|v| v * c).collect();
                let w = similarity_weights(&scaled, &feats, mode).unwrap();
                for (a, b) in w.values().iter().zip(base.values()) {
                    assert!((a - b).abs() < 1e-12, "mode {mode:?}, c={c}");
                }
            }
        }
    }

    #[test]
    fn weighted_loss_direct_case() {
        let d = SimilarityWeights {
            d: vec![0.5],
            mode: SimilarityMode::RawClamped,
            degenerate_rows: 0,
        };
        let loss = weighted_cls_loss(&[1.0], &[2.0], &d).unwrap();
        assert!((loss - 1.25).abs() < 1e-15);
    }

    #[test]
    fn weighted_loss_reduces_to_plain_mean_when_d_is_one() {
        let pos = [0.3, 1.7, 0.01];
        let neg = [2.0, 0.4];
        let d = SimilarityWeights::pinned_one(3);
        let loss = weighted_cls_loss(&pos, &neg, &d).unwrap();
        let mean = (pos.iter().sum::<f64>() + neg.iter().sum::<f64>()) / 5.0;
        assert_eq!(loss, mean);
    }

    #[test]
    fn weighted_loss_full_suppression() {
        let d = SimilarityWeights {
            d: vec![0.0, 0.0],
            mode: SimilarityMode::RawClamped,
            degenerate_rows: 0,
        };
        assert_eq!(weighted_cls_loss(&[1.0, 5.0], &[], &d).unwrap(), 0.0);
    }

    #[test]
    fn weighted_loss_length_mismatch() {
        let d = SimilarityWeights::pinned_one(2);
        assert!(weighted_cls_loss(&[1.0], &[], &d).is_err());
    }

    proptest! {
        #[test]
        fn entropy_weights_symmetric_under_label_flip(
            probs in proptest::collection::vec(0.0f64..=1.0, 1..12),
            mode_sel in 0u8..2,
        ) {
            let mode = if mode_sel == 0 { EntropyMode::NormalizedSum } else { EntropyMode::OneMinusRaw };
            let flipped: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
            let a = entropy_weights(&probs, mode).unwrap();
            let b = entropy_weights(&flipped, mode).unwrap();
            for (x, y) in a.weights().iter().zip(b.weights()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn entropy_weights_permutation_equivariant(
            probs in proptest::collection::vec(0.0f64..=1.0, 2..10),
        ) {
            let mut reversed = probs.clone();
            reversed.reverse();
            let a = entropy_weights(&probs, EntropyMode::NormalizedSum).unwrap();
            let b = entropy_weights(&reversed, EntropyMode::NormalizedSum).unwrap();
            for (x, y) in a.weights().iter().zip(b.weights().iter().rev()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn loss_monotone_in_similarity_weights(
            pos in proptest::collection::vec(0.0f64..5.0, 1..6),
            neg in proptest::collection::vec(0.0f64..5.0, 0..6),
            idx_frac in 0.0f64..1.0,
            bump in 0.0f64..0.5,
        ) {
            let n = pos.len();
            let idx = ((idx_frac * n as f64) as usize).min(n - 1);
            let mut low = vec![0.4; n];
            let mut high = low.clone();
            high[idx] += bump;
            let dl = SimilarityWeights { d: std::mem::take(&mut low), mode: SimilarityMode::RawClamped, degenerate_rows: 0 };
            let dh = SimilarityWeights { d: std::mem::take(&mut high), mode: SimilarityMode::RawClamped, degenerate_rows: 0 };
            let ll = weighted_cls_loss(&pos, &neg, &dl).unwrap();
            let lh = weighted_cls_loss(&pos, &neg, &dh).unwrap();
            prop_assert!(lh >= ll);
        }
    }
}
