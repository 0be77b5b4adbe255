//! Learnable negative-label features.
//!
//! A subset of the negative labels' text features is optimized against the
//! synthetic OOD image embeddings so those labels move toward the images
//! they were assigned to. Image embeddings come from the raw frozen encoder
//! deliberately bypassing the trained projection, and the remaining
//! negative rows plus all in-distribution rows stay frozen. Every update is
//! followed by renormalization, keeping the bank on the unit sphere the
//! detector assumes.
//!
//! The denominator of the contrastive term runs over the batch images as
//! printed; the labels-denominator reading is available behind the config
//! flag.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;

use crate::clip::ImageEncoder;
use crate::config::{NegDenominator, RunConfig};
use crate::embedding::LabelSpace;
use crate::error::{Error, Result};
use crate::scoring::LabelBank;
use crate::seeding::module_rng;

/// Negative-label feature matrix with its trainable-row mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnableNegFeatures {
    /// Full `M x d` bank; only masked rows ever move.
    pub features: Array2<f64>,
    pub learnable_mask: Vec<bool>,
}

impl LearnableNegFeatures {
    pub fn new(features: Array2<f64>, learnable_mask: Vec<bool>) -> Result<Self> {
        if features.nrows() != learnable_mask.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![features.nrows()],
                got: vec![learnable_mask.len()],
                context: "learnable mask length",
            });
        }
        Ok(LearnableNegFeatures {
            features,
            learnable_mask,
        })
    }

    /// Stable fingerprint of the frozen rows.
    pub fn frozen_checksum(&self) -> u64 {
        frozen_rows_checksum(&self.features, &self.learnable_mask)
    }
}

pub fn frozen_rows_checksum(features: &Array2<f64>, mask: &[bool]) -> u64 {
    let mut h = crate::seeding::stable_hash("frozen-neg-rows");
    for (i, row) in features.rows().into_iter().enumerate() {
        if !mask[i] {
            for v in row.iter() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

/// One sample's loss and the gradients it contributes, as
/// `(row index, d loss / d row)` pairs.
fn sample_term(
    embeds: &Array2<f64>,
    assigned: &[usize],
    i: usize,
    features: &Array2<f64>,
    learnable: &[bool],
    tau: f64,
    mode: NegDenominator,
) -> (f64, Vec<(usize, Array1<f64>)>) {
    let image = embeds.row(i);
    let row = assigned[i];
    let own = features.row(row).dot(&image);
    match mode {
        NegDenominator::Images => {
            // -log exp(s(I_i,T_a)/tau) / sum_j exp(s(T_a,I_j)/tau)
            let sims: Vec<f64> = (0..embeds.nrows())
                .map(|j| features.row(row).dot(&embeds.row(j)) / tau)
                .collect();
            let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            let loss = -(own / tau - (max + denom.ln()));
            let mut grad = Array1::zeros(features.ncols());
            for (j, e) in exps.iter().enumerate() {
                let p = e / denom;
                grad = grad + &(&embeds.row(j) * (p / tau));
            }
            grad = grad - &(&image / tau);
            (loss, vec![(row, grad)])
        }
        NegDenominator::Labels => {
            // -log exp(s(I_i,T_a)/tau) / sum_{c learnable} exp(s(I_i,T_c)/tau)
            let rows: Vec<usize> = learnable
                .iter()
                .enumerate()
                .filter_map(|(c, &b)| b.then_some(c))
                .collect();
            let sims: Vec<f64> = rows
                .iter()
                .map(|&c| features.row(c).dot(&image) / tau)
                .collect();
            let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            let loss = -(own / tau - (max + denom.ln()));
            let grads = rows
                .iter()
                .zip(exps.iter())
                .map(|(&c, e)| {
                    let p = e / denom;
                    let delta = if c == row { p - 1.0 } else { p };
                    (c, image.mapv(|v| v * delta / tau))
                })
                .collect();
            (loss, grads)
        }
    }
}

/// Mean contrastive loss of the current features over all samples.
pub fn neg_features_loss(
    embeds: &Array2<f64>,
    assigned: &[usize],
    features: &Array2<f64>,
    learnable: &[bool],
    tau: f64,
    mode: NegDenominator,
) -> f64 {
    let total: f64 = (0..embeds.nrows())
        .map(|i| sample_term(embeds, assigned, i, features, learnable, tau, mode).0)
        .sum();
    total / embeds.nrows() as f64
}

/// Full-batch gradient with respect to the feature matrix; frozen rows get
/// zero rows.
pub fn neg_features_grad(
    embeds: &Array2<f64>,
    assigned: &[usize],
    features: &Array2<f64>,
    learnable: &[bool],
    tau: f64,
    mode: NegDenominator,
) -> Array2<f64> {
    let mut grad = Array2::zeros(features.dim());
    for i in 0..embeds.nrows() {
        let (_, contributions) = sample_term(embeds, assigned, i, features, learnable, tau, mode);
        for (row, g) in contributions {
            if learnable[row] {
                let mut target = grad.row_mut(row);
                target += &g;
            }
        }
    }
    grad / embeds.nrows() as f64
}

fn renormalize_row(features: &mut Array2<f64>, row: usize) {
    let norm = features.row(row).dot(&features.row(row)).sqrt();
    if norm > 0.0 {
        features.row_mut(row).mapv_inplace(|v| v / norm);
    }
}

/// Optimize the learnable rows with per-sample SGD on the unit sphere.
/// Returns the features and the per-epoch mean loss.
pub fn train_neg_features(
    syn: &[(Array3<f64>, String)],
    image_encoder: &dyn ImageEncoder,
    labels: &LabelSpace,
    init: &Array2<f64>,
    config: &RunConfig,
) -> Result<(LearnableNegFeatures, Vec<f64>)> {
    if syn.is_empty() {
        return Err(Error::EmptyTrainingSet("negative features"));
    }
    if init.nrows() != labels.num_neg() {
        return Err(Error::ShapeMismatch {
            expected: vec![labels.num_neg()],
            got: vec![init.nrows()],
            context: "negative feature rows",
        });
    }
    let mask = labels.learnable_mask.clone();
    let mut assigned = Vec::with_capacity(syn.len());
    for (_, label) in syn {
        let idx = labels
            .neg_index(label)
            .ok_or_else(|| Error::UnknownNegativeLabel(label.clone()))?;
        if !mask[idx] {
            return Err(Error::LabelNotLearnable(label.clone()));
        }
        assigned.push(idx);
    }

    // Raw frozen image features; the projection is deliberately not applied.
    let dim = image_encoder.dim();
    let mut embeds = Array2::zeros((syn.len(), dim));
    for (i, (image, _)) in syn.iter().enumerate() {
        embeds
            .row_mut(i)
            .assign(image_encoder.embed_image(image)?.values());
    }

    let mut features = init.clone();
    let mut rng = module_rng(config.seed, "neg-feature-shuffle");
    let mut order: Vec<usize> = (0..syn.len()).collect();
    let tau = config.score_tau;
    let mut curve = Vec::with_capacity(config.label_epochs);
    for _ in 0..config.label_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (_, contributions) =
                sample_term(&embeds, &assigned, i, &features, &mask, tau, config.neg_denominator);
            for (row, grad) in contributions {
                if mask[row] {
                    let update = grad.mapv(|g| g * config.label_lr);
                    let mut target = features.row_mut(row);
                    target -= &update;
                    renormalize_row(&mut features, row);
                }
            }
        }
        curve.push(neg_features_loss(
            &embeds,
            &assigned,
            &features,
            &mask,
            tau,
            config.neg_denominator,
        ));
    }
    for (row, &trainable) in mask.iter().enumerate() {
        if trainable {
            features.row_mut(row).mapv_inplace(|v| v as f32 as f64);
        }
    }
    Ok((LearnableNegFeatures::new(features, mask)?, curve))
}

/// Assemble the scoring bank `[Y | Y-]` with learned rows substituted in.
/// The frozen rows must match the pre-training bank bit for bit.
pub fn compose_label_bank(
    ind_rows: &Array2<f64>,
    original_neg: &Array2<f64>,
    learned: &LearnableNegFeatures,
) -> Result<LabelBank> {
    if learned.features.dim() != original_neg.dim() {
        return Err(Error::ShapeMismatch {
            expected: original_neg.shape().to_vec(),
            got: learned.features.shape().to_vec(),
            context: "composed negative rows",
        });
    }
    for (i, &trainable) in learned.learnable_mask.iter().enumerate() {
        if !trainable && learned.features.row(i) != original_neg.row(i) {
            return Err(Error::ShapeMismatch {
                expected: vec![i],
                got: vec![i],
                context: "frozen negative row drifted",
            });
        }
    }
    Ok(LabelBank {
        ind: ind_rows.clone(),
        neg: learned.features.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbeddingSource, EmbeddingVector};
    use ndarray::array;

    struct RowEncoder;

    impl ImageEncoder for RowEncoder {
        fn embed_image(&self, image: &Array3<f64>) -> Result<EmbeddingVector> {
            let v = array![image[[0, 0, 0]], image[[0, 0, 1]]];
            Ok(EmbeddingVector::normalized(v, EmbeddingSource::ImageEncoder))
        }
        fn dim(&self) -> usize {
            2
        }
        fn checksum(&self) -> u64 {
            0
        }
    }

    fn image2(a: f64, b: f64) -> Array3<f64> {
        let mut img = Array3::zeros((1, 1, 2));
        img[[0, 0, 0]] = a;
        img[[0, 0, 1]] = b;
        img
    }

    fn config(epochs: usize, lr: f64, mode: NegDenominator) -> RunConfig {
        let mut c = RunConfig::default();
        c.label_epochs = epochs;
        c.label_lr = lr;
        c.score_tau = 1.0;
        c.neg_denominator = mode;
        c
    }

    fn labels_two() -> LabelSpace {
        let mut l = LabelSpace::new(vec!["ind".into()], vec!["n0".into(), "n1".into()]).unwrap();
        l.learnable_mask = vec![true, true];
        l
    }

    #[test]
    fn aligned_single_sample_is_a_fixed_point() {
        let mut l = LabelSpace::new(vec!["ind".into()], vec!["n0".into()]).unwrap();
        l.learnable_mask = vec![true];
        let init = array![[1.0, 0.0]];
        let syn = vec![(image2(1.0, 0.0), "n0".to_string())];
        let (out, curve) = train_neg_features(
            &syn,
            &RowEncoder,
            &l,
            &init,
            &config(3, 0.1, NegDenominator::Images),
        )
        .unwrap();
        assert_eq!(out.features, init);
        assert!(curve.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn hand_computed_loss_and_step() {
        // I_0 = [1,0] assigned n0, I_1 = [0,1] assigned n1; features start
        // swapped. tau = 1, image denominator.
        let syn = vec![
            (image2(1.0, 0.0), "n0".to_string()),
            (image2(0.0, 1.0), "n1".to_string()),
        ];
        let init = array![[0.0, 1.0], [1.0, 0.0]];
        let embeds = array![[1.0, 0.0], [0.0, 1.0]];
        let assigned = [0usize, 1];
        let mask = [true, true];

        let loss = neg_features_loss(
            &embeds,
            &assigned,
            &init,
            &mask,
            1.0,
            NegDenominator::Images,
        );
        // Per sample: -[0 - ln(e^0 + e^1)] = ln(1 + e).
        let expected = (1.0 + 1.0f64.exp()).ln();
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");

        // One epoch at small lr; rows are disjoint so order cannot matter.
        let lr = 0.01;
        let (out, _) = train_neg_features(
            &syn,
            &RowEncoder,
            &labels_two(),
            &init,
            &config(1, lr, NegDenominator::Images),
        )
        .unwrap();
        // Hand gradient for row 0 at T0=[0,1]: p = softmax([s(T0,I0), s(T0,I1)])
        // = softmax([0,1]); grad = -I0 + p0*I0 + p1*I1.
        let p1 = 1.0f64.exp() / (1.0 + 1.0f64.exp());
        let p0 = 1.0 - p1;
        let grad0 = array![p0 - 1.0, p1];
        let raw0 = array![0.0, 1.0] - grad0.mapv(|g| g * lr);
        let n0 = raw0.dot(&raw0).sqrt();
        let expected0 = raw0.mapv(|v| (v / n0) as f32 as f64);
        for (a, b) in out.features.row(0).iter().zip(expected0.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_both_modes() {
        let mut rng = crate::seeding::module_rng(5, "labelft-test");
        let embeds = crate::nn::randn2((2, 2), 1.0, &mut rng);
        let assigned = [0usize, 1];
        let mask = [true, true];
        for mode in [NegDenominator::Images, NegDenominator::Labels] {
            let features = crate::nn::randn2((2, 2), 1.0, &mut rng);
            let grad = neg_features_grad(&embeds, &assigned, &features, &mask, 0.7, mode);
            let h = 1e-5;
            let mut max_rel: f64 = 0.0;
            for r in 0..2 {
                for c in 0..2 {
                    let mut plus = features.clone();
                    plus[[r, c]] += h;
                    let mut minus = features.clone();
                    minus[[r, c]] -= h;
                    let lp = neg_features_loss(&embeds, &assigned, &plus, &mask, 0.7, mode);
                    let lm = neg_features_loss(&embeds, &assigned, &minus, &mask, 0.7, mode);
                    let fd = (lp - lm) / (2.0 * h);
                    max_rel = max_rel.max((fd - grad[[r, c]]).abs() / fd.abs().max(1.0));
                }
            }
            assert!(max_rel < 1e-3, "{mode:?}: max relative error {max_rel}");
        }
    }

    #[test]
    fn rows_stay_unit_norm_and_frozen_rows_stay_put() {
        let mut rng = crate::seeding::module_rng(6, "labelft-test");
        let mut l = LabelSpace::new(
            vec!["ind".into()],
            vec!["n0".into(), "n1".into(), "n2".into()],
        )
        .unwrap();
        l.learnable_mask = vec![true, false, true];
        let mut init = crate::nn::randn2((3, 2), 1.0, &mut rng);
        for r in 0..3 {
            renormalize_row(&mut init, r);
        }
        let before = frozen_rows_checksum(&init, &l.learnable_mask);
        let syn = vec![
            (image2(1.0, 0.2), "n0".to_string()),
            (image2(-0.3, 1.0), "n2".to_string()),
        ];
        let (out, _) = train_neg_features(
            &syn,
            &RowEncoder,
            &l,
            &init,
            &config(4, 0.05, NegDenominator::Images),
        )
        .unwrap();
        for row in out.features.rows() {
            let norm = row.dot(&row).sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        assert_eq!(out.frozen_checksum(), before);
        assert_eq!(out.features.row(1), init.row(1));
    }

    #[test]
    fn training_pulls_features_toward_assigned_images() {
        let syn = vec![
            (image2(1.0, 0.1), "n0".to_string()),
            (image2(0.9, -0.1), "n0".to_string()),
            (image2(-0.2, 1.0), "n1".to_string()),
            (image2(0.1, 0.9), "n1".to_string()),
        ];
        let init = array![[0.70710678, -0.70710678], [-0.70710678, 0.70710678]];
        let encoder = RowEncoder;
        let cfg = config(5, 0.2, NegDenominator::Images);
        let mean_cos = |features: &Array2<f64>| {
            let mut total = 0.0;
            for (img, label) in &syn {
                let e = encoder.embed_image(img).unwrap();
                let row = if label == "n0" { 0 } else { 1 };
                total += features.row(row).dot(e.values());
            }
            total / syn.len() as f64
        };
        let before = mean_cos(&init);
        let (out, _) =
            train_neg_features(&syn, &encoder, &labels_two(), &init, &cfg).unwrap();
        let after = mean_cos(&out.features);
        assert!(after > before, "{before} -> {after}");
    }

    #[test]
    fn mislabeled_samples_are_rejected() {
        let mut l = LabelSpace::new(vec!["ind".into()], vec!["n0".into(), "n1".into()]).unwrap();
        l.learnable_mask = vec![true, false];
        let init = array![[1.0, 0.0], [0.0, 1.0]];
        let outside = vec![(image2(1.0, 0.0), "zebra".to_string())];
        assert!(matches!(
            train_neg_features(&outside, &RowEncoder, &l, &init, &config(1, 0.1, NegDenominator::Images)),
            Err(Error::UnknownNegativeLabel(_))
        ));
        let frozen = vec![(image2(1.0, 0.0), "n1".to_string())];
        assert!(matches!(
            train_neg_features(&frozen, &RowEncoder, &l, &init, &config(1, 0.1, NegDenominator::Images)),
            Err(Error::LabelNotLearnable(_))
        ));
        let empty: Vec<(Array3<f64>, String)> = vec![];
        assert!(matches!(
            train_neg_features(&empty, &RowEncoder, &l, &init, &config(1, 0.1, NegDenominator::Images)),
            Err(Error::EmptyTrainingSet(_))
        ));
    }

    #[test]
    fn compose_without_training_is_identity() {
        let ind = array![[1.0, 0.0]];
        let neg = array![[0.0, 1.0], [1.0, 0.0]];
        let learned =
            LearnableNegFeatures::new(neg.clone(), vec![true, false]).unwrap();
        let bank = compose_label_bank(&ind, &neg, &learned).unwrap();
        assert_eq!(bank.ind, ind);
        assert_eq!(bank.neg, neg);
    }

    #[test]
    fn compose_substitutes_learned_rows_and_guards_frozen() {
        let ind = array![[1.0, 0.0]];
        let original = array![[0.0, 1.0], [1.0, 0.0]];
        let mut learned_features = original.clone();
        learned_features.row_mut(0).assign(&array![0.6, 0.8]);
        let learned =
            LearnableNegFeatures::new(learned_features, vec![true, false]).unwrap();
        let bank = compose_label_bank(&ind, &original, &learned).unwrap();
        assert_eq!(bank.neg.row(0), learned.features.row(0));
        assert_eq!(bank.neg.row(1), original.row(1));

        // A frozen row that drifted must be rejected.
        let mut drifted = original.clone();
        drifted.row_mut(1).assign(&array![0.0, 1.0]);
        let bad = LearnableNegFeatures::new(drifted, vec![true, false]).unwrap();
        assert!(compose_label_bank(&ind, &original, &bad).is_err());
    }

    #[test]
    fn scoring_with_composed_bank_matches_manual_assembly() {
        let ind = array![[1.0, 0.0]];
        let original = array![[0.0, 1.0], [0.6, 0.8]];
        let mut learned_rows = original.clone();
        learned_rows.row_mut(0).assign(&array![0.8, 0.6]);
        let learned = LearnableNegFeatures::new(learned_rows.clone(), vec![true, false]).unwrap();
        let bank = compose_label_bank(&ind, &original, &learned).unwrap();

        let manual = LabelBank {
            ind: ind.clone(),
            neg: learned_rows,
        };
        let labels = {
            let mut l =
                LabelSpace::new(vec!["a".into()], vec!["x".into(), "y".into()]).unwrap();
            l.learnable_mask = vec![true, false];
            l
        };
        let x = EmbeddingVector::normalized(array![0.3, 0.95], EmbeddingSource::ImageEncoder);
        let a = crate::scoring::ood_score(&x, &labels, &bank, 0.07, crate::config::SimMode::Exponential)
            .unwrap();
        let b = crate::scoring::ood_score(&x, &labels, &manual, 0.07, crate::config::SimMode::Exponential)
            .unwrap();
        assert_eq!(a, b);
    }
}
