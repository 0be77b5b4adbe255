//! Image-side projection fine-tuning.
//!
//! The image encoder stays frozen; a single affine map over its output is
//! trained contrastively against the paired text features. Pairs come from
//! the union of complexity-selected in-distribution images (labeled with
//! their class) and synthetic near-boundary images (labeled with their
//! assigned negative label). Each pair is pushed toward its own text
//! feature against a denominator of the batch's in-distribution labels plus
//! every learn-eligible negative label.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::archive::{read_archive, write_archive, Archive, TensorData};
use crate::clip::{ImageEncoder, TextEncoder};
use crate::config::RunConfig;
use crate::embedding::{EmbeddingSource, EmbeddingVector, LabelSpace};
use crate::error::{Error, Result};
use crate::eval::DatasetManifest;
use crate::nn;
use crate::seeding::module_rng;

/// Manifest row of the projection training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub image_ref: String,
    pub label: String,
    pub is_synthetic: bool,
}

/// A training pair with its pixels loaded.
#[derive(Debug, Clone)]
pub struct ResolvedPair {
    pub image: Array3<f64>,
    pub label: String,
    pub is_synthetic: bool,
}

/// The only trainable image-side parameters: one affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ProjectionParams {
    pub fn identity(dim: usize) -> Self {
        ProjectionParams {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    /// Identity plus small seeded noise; training's starting point.
    pub fn identity_jittered(dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = module_rng(seed, "projection-init");
        let mut params = Self::identity(dim);
        params.weight = params.weight + nn::randn2((dim, dim), scale, &mut rng);
        params.bias = params.bias + nn::randn1(dim, scale, &mut rng);
        params
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    /// Round to f32 so saved and in-memory parameters agree bit-for-bit.
    pub fn quantize(&mut self) {
        self.weight.mapv_inplace(|v| v as f32 as f64);
        self.bias.mapv_inplace(|v| v as f32 as f64);
    }

    pub fn to_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut archive = Archive::new();
        archive.push("weight", TensorData::from_f64(&self.weight.clone().into_dyn()))?;
        archive.push("bias", TensorData::from_f64(&self.bias.clone().into_dyn()))?;
        write_archive(path, &archive)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let archive = read_archive(path)?;
        let weight = archive
            .require_f64("weight")?
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::MalformedHeader("weight must be 2-D".into()))?;
        let bias = archive
            .require_f64("bias")?
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|_| Error::MalformedHeader("bias must be 1-D".into()))?;
        if weight.nrows() != weight.ncols() || weight.nrows() != bias.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![bias.len(), bias.len()],
                got: vec![weight.nrows(), weight.ncols()],
                context: "projection parameters",
            });
        }
        Ok(ProjectionParams { weight, bias })
    }
}

/// Apply the projection: affine map, then back to the unit sphere.
pub fn project(embedding: &EmbeddingVector, params: &ProjectionParams) -> Result<EmbeddingVector> {
    if embedding.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: embedding.dim(),
            context: "projection input",
        });
    }
    let z = params.weight.dot(embedding.values()) + &params.bias;
    Ok(EmbeddingVector::normalized(z, embedding.source()))
}

/// Rank in-distribution images by JPEG complexity (bytes per pixel) within
/// each category and pick the densest ones, round-robin across categories,
/// truncated to `m` ids.
pub fn select_ind_subset(manifest: &DatasetManifest, m: usize) -> Result<Vec<String>> {
    let mut by_category: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
    for record in &manifest.records {
        let label = record.ind_label.as_deref().ok_or(Error::EmptyCategory(
            "manifest record without label".to_string(),
        ))?;
        let ratio = record.jpeg_byte_size as f64 / record.pixel_count as f64;
        by_category
            .entry(label)
            .or_default()
            .push((&record.image_id, ratio));
    }
    if by_category.is_empty() {
        return Err(Error::EmptyCategory("<empty manifest>".into()));
    }
    for entries in by_category.values_mut() {
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    }
    let quota = m.div_ceil(by_category.len());
    let mut picked = Vec::with_capacity(m);
    for rank in 0..quota {
        for entries in by_category.values() {
            if picked.len() == m {
                break;
            }
            if let Some((id, _)) = entries.get(rank) {
                picked.push(id.to_string());
            }
        }
    }
    Ok(picked)
}

/// Per-pair candidate text set: the batch's InD labels plus all
/// learn-eligible negatives, deduplicated, batch labels first.
fn candidate_labels(batch: &[&ResolvedPair], labels: &LabelSpace) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for pair in batch {
        if seen.insert(pair.label.clone()) {
            out.push(pair.label.clone());
        }
    }
    for idx in labels.learnable_indices() {
        let name = &labels.neg_labels[idx];
        if seen.insert(name.clone()) {
            out.push(name.clone());
        }
    }
    out
}

struct TextBank {
    names: Vec<String>,
    rows: Array2<f64>,
}

fn embed_candidates(
    names: Vec<String>,
    text_encoder: &dyn TextEncoder,
    cache: &mut BTreeMap<String, Array1<f64>>,
) -> Result<TextBank> {
    let dim = text_encoder.dim();
    let mut rows = Array2::zeros((names.len(), dim));
    for (i, name) in names.iter().enumerate() {
        if !cache.contains_key(name) {
            cache.insert(name.clone(), text_encoder.embed_label(name)?.values().clone());
        }
        rows.row_mut(i).assign(&cache[name]);
    }
    Ok(TextBank { names, rows })
}

/// Loss and parameter gradients of one batch.
fn batch_loss_and_grads(
    batch: &[&ResolvedPair],
    embeds: &[Array1<f64>],
    bank: &TextBank,
    params: &ProjectionParams,
    tau: f64,
) -> Result<(f64, Array2<f64>, Array1<f64>)> {
    let dim = params.dim();
    let mut d_weight = Array2::zeros((dim, dim));
    let mut d_bias = Array1::zeros(dim);
    let mut total_loss = 0.0;
    for (pair, f) in batch.iter().zip(embeds.iter()) {
        let target = bank
            .names
            .iter()
            .position(|n| *n == pair.label)
            .ok_or_else(|| Error::MissingLabelEmbedding(pair.label.clone()))?;
        let z = params.weight.dot(f) + &params.bias;
        let norm = z.dot(&z).sqrt().max(1e-12);
        let zh = &z / norm;
        let cosines = bank.rows.dot(&zh);
        let logits = cosines.mapv(|c| c / tau);
        let (loss, dlogits) = nn::cross_entropy(&logits, target);
        total_loss += loss;

        // d loss / d zh, then through the normalization.
        let mut d_zh = Array1::zeros(dim);
        for (c, &g) in dlogits.iter().enumerate() {
            d_zh = d_zh + &(&bank.rows.row(c) * (g / tau));
        }
        let radial = zh.dot(&d_zh);
        let d_z = (&d_zh - &(&zh * radial)) / norm;
        for r in 0..dim {
            let g = d_z[r];
            d_bias[r] += g;
            for c in 0..dim {
                d_weight[[r, c]] += g * f[c];
            }
        }
    }
    let n = batch.len() as f64;
    Ok((total_loss / n, d_weight / n, d_bias / n))
}

/// Full-batch contrastive loss under given parameters.
pub fn projection_loss(
    pairs: &[ResolvedPair],
    labels: &LabelSpace,
    image_encoder: &dyn ImageEncoder,
    text_encoder: &dyn TextEncoder,
    params: &ProjectionParams,
    tau: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyTrainingSet("projection"));
    }
    let refs: Vec<&ResolvedPair> = pairs.iter().collect();
    let mut cache = BTreeMap::new();
    let bank = embed_candidates(candidate_labels(&refs, labels), text_encoder, &mut cache)?;
    let embeds: Vec<Array1<f64>> = pairs
        .iter()
        .map(|p| Ok(image_encoder.embed_image(&p.image)?.values().clone()))
        .collect::<Result<_>>()?;
    let (loss, _, _) = batch_loss_and_grads(&refs, &embeds, &bank, params, tau)?;
    Ok(loss)
}

/// Train the projection with minibatch Adam. Only `init` moves; both
/// encoders are read-only. Returns the parameters and the per-epoch mean
/// batch loss.
pub fn train_projection(
    pairs: &[ResolvedPair],
    labels: &LabelSpace,
    image_encoder: &dyn ImageEncoder,
    text_encoder: &dyn TextEncoder,
    init: ProjectionParams,
    config: &RunConfig,
) -> Result<(ProjectionParams, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyTrainingSet("projection"));
    }
    let mut params = init;
    if image_encoder.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: image_encoder.dim(),
            context: "projection training",
        });
    }

    // Frozen encoder outputs are reused across epochs.
    let embeds: Vec<Array1<f64>> = pairs
        .iter()
        .map(|p| Ok(image_encoder.embed_image(&p.image)?.values().clone()))
        .collect::<Result<_>>()?;

    let mut text_cache = BTreeMap::new();
    let mut adam = nn::Adam::new(config.proj_lr, config.proj_weight_decay);
    let mut rng = module_rng(config.seed, "projection-shuffle");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::with_capacity(config.proj_epochs);

    for _ in 0..config.proj_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(config.proj_batch) {
            let batch: Vec<&ResolvedPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let batch_embeds: Vec<Array1<f64>> =
                chunk.iter().map(|&i| embeds[i].clone()).collect();
            let bank =
                embed_candidates(candidate_labels(&batch, labels), text_encoder, &mut text_cache)?;
            let (loss, dw, db) =
                batch_loss_and_grads(&batch, &batch_embeds, &bank, &params, config.score_tau)?;
            epoch_loss += loss;
            batches += 1.0;
            adam.step(
                &mut [
                    params.weight.as_slice_mut().unwrap(),
                    params.bias.as_slice_mut().unwrap(),
                ],
                &[dw.as_slice().unwrap(), db.as_slice().unwrap()],
            );
        }
        curve.push(epoch_loss / batches);
    }
    params.quantize();
    Ok((params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::FixedTextEncoder;
    use crate::eval::ManifestRecord;
    use ndarray::array;

    struct FixedImageEncoder {
        table: BTreeMap<String, Array1<f64>>,
    }

    impl ImageEncoder for FixedImageEncoder {
        fn embed_image(&self, image: &Array3<f64>) -> Result<EmbeddingVector> {
            // Key on the first pixel; tests construct images accordingly.
            let key = format!("{}", image[[0, 0, 0]]);
            let v = self
                .table
                .get(&key)
                .ok_or_else(|| Error::MissingLabelEmbedding(key))?;
            Ok(EmbeddingVector::normalized(
                v.clone(),
                EmbeddingSource::ImageEncoder,
            ))
        }
        fn dim(&self) -> usize {
            2
        }
        fn checksum(&self) -> u64 {
            7
        }
    }

    fn keyed_image(key: f64) -> Array3<f64> {
        let mut img = Array3::zeros((1, 1, 1));
        img[[0, 0, 0]] = key;
        img
    }

    #[test]
    fn identity_projection_preserves_input() {
        let e = EmbeddingVector::normalized(array![0.6, 0.8], EmbeddingSource::ImageEncoder);
        let out = project(&e, &ProjectionParams::identity(2)).unwrap();
        for (a, b) in out.values().iter().zip(e.values().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_projection_gives_normalized_bias() {
        let e = EmbeddingVector::normalized(array![1.0, 0.0], EmbeddingSource::ImageEncoder);
        let params = ProjectionParams {
            weight: Array2::zeros((2, 2)),
            bias: array![3.0, 4.0],
        };
        let out = project(&e, &params).unwrap();
        assert!((out.values()[0] - 0.6).abs() < 1e-12);
        assert!((out.values()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn projection_matches_matrix_multiply_oracle() {
        let mut rng = module_rng(1, "proj-test");
        let params = ProjectionParams {
            weight: nn::randn2((4, 4), 0.7, &mut rng),
            bias: nn::randn1(4, 0.3, &mut rng),
        };
        let e = EmbeddingVector::normalized(nn::randn1(4, 1.0, &mut rng), EmbeddingSource::ImageEncoder);
        let out = project(&e, &params).unwrap();
        let mut z = vec![0.0; 4];
        for r in 0..4 {
            z[r] = params.bias[r];
            for c in 0..4 {
                z[r] += params.weight[[r, c]] * e.values()[c];
            }
        }
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in out.values().iter().zip(z.iter()) {
            assert!((a - b / norm).abs() < 1e-12);
        }
        let n = out.values().dot(out.values()).sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    fn manifest(records: Vec<(&str, &str, u64)>) -> DatasetManifest {
        DatasetManifest {
            name: "test".into(),
            records: records
                .into_iter()
                .map(|(id, label, bytes)| ManifestRecord {
                    image_id: id.to_string(),
                    archive_path: format!("{id}.synd"),
                    ind_label: Some(label.to_string()),
                    jpeg_byte_size: bytes,
                    pixel_count: 100,
                })
                .collect(),
        }
    }

    #[test]
    fn subset_picks_denser_image() {
        let m = manifest(vec![("a", "cat", 90), ("b", "cat", 10)]);
        assert_eq!(select_ind_subset(&m, 1).unwrap(), vec!["a".to_string()]);
    }

    #[test]
    fn subset_breaks_ties_lexicographically() {
        let m = manifest(vec![("b", "cat", 50), ("a", "cat", 50)]);
        assert_eq!(select_ind_subset(&m, 1).unwrap(), vec!["a".to_string()]);
    }

    #[test]
    fn subset_matches_full_sort_oracle() {
        use rand::Rng;
        let mut rng = module_rng(2, "proj-test");
        let classes = ["c0", "c1", "c2", "c3", "c4"];
        let mut records = Vec::new();
        for class in classes {
            for i in 0..20 {
                records.push((
                    format!("{class}_{i:02}"),
                    class,
                    rng.random_range(10u64..5000),
                ));
            }
        }
        let m = DatasetManifest {
            name: "t".into(),
            records: records
                .iter()
                .map(|(id, label, bytes)| ManifestRecord {
                    image_id: id.clone(),
                    archive_path: String::new(),
                    ind_label: Some(label.to_string()),
                    jpeg_byte_size: *bytes,
                    pixel_count: 100,
                })
                .collect(),
        };
        let picked = select_ind_subset(&m, 25).unwrap();
        assert_eq!(picked.len(), 25);

        // Oracle: per-category descending sort, quota 5 per class.
        let mut per_class: BTreeMap<&str, Vec<(&String, u64)>> = BTreeMap::new();
        for (id, label, bytes) in &records {
            per_class.entry(label).or_default().push((id, *bytes));
        }
        for v in per_class.values_mut() {
            v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        }
        let expected: std::collections::BTreeSet<String> = per_class
            .values()
            .flat_map(|v| v[..5].iter().map(|(id, _)| (*id).clone()))
            .collect();
        let got: std::collections::BTreeSet<String> = picked.into_iter().collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn subset_is_idempotent() {
        let m = manifest(vec![("a", "cat", 90), ("b", "cat", 10), ("c", "dog", 50)]);
        let once = select_ind_subset(&m, 2).unwrap();
        let twice = select_ind_subset(&m, 2).unwrap();
        assert_eq!(once, twice);
    }

    fn two_pair_setup() -> (Vec<ResolvedPair>, LabelSpace, FixedImageEncoder, FixedTextEncoder) {
        let pairs = vec![
            ResolvedPair {
                image: keyed_image(1.0),
                label: "cat".into(),
                is_synthetic: false,
            },
            ResolvedPair {
                image: keyed_image(2.0),
                label: "nebula".into(),
                is_synthetic: true,
            },
        ];
        let mut labels = LabelSpace::new(vec!["cat".into()], vec!["nebula".into()]).unwrap();
        labels.learnable_mask = vec![true];
        let images = FixedImageEncoder {
            table: [
                ("1".to_string(), array![1.0, 0.0]),
                ("2".to_string(), array![0.0, 1.0]),
            ]
            .into_iter()
            .collect(),
        };
        let texts = FixedTextEncoder::new([
            ("cat".to_string(), array![1.0, 0.0]),
            ("nebula".to_string(), array![0.0, 1.0]),
        ]);
        (pairs, labels, images, texts)
    }

    #[test]
    fn aligned_single_pair_with_single_candidate_has_zero_loss() {
        let (pairs, _, images, texts) = two_pair_setup();
        let labels = LabelSpace::new(vec!["cat".into()], vec!["nebula".into()]).unwrap();
        // No learnable negatives: the only candidate is the pair's label.
        let loss = projection_loss(
            &pairs[..1],
            &labels,
            &images,
            &texts,
            &ProjectionParams::identity(2),
            0.07,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn two_pair_loss_matches_hand_computation() {
        let (pairs, labels, images, texts) = two_pair_setup();
        let tau = 0.5;
        let loss = projection_loss(
            &pairs,
            &labels,
            &images,
            &texts,
            &ProjectionParams::identity(2),
            tau,
        )
        .unwrap();
        // Each pair: cos to own label 1, to the other 0.
        let per = -(1.0f64 / tau).exp().ln()
            + ((1.0f64 / tau).exp() + (0.0f64 / tau).exp()).ln();
        assert!((loss - per).abs() < 1e-6, "{loss} vs {per}");
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let (pairs, labels, images, texts) = two_pair_setup();
        let tau = 0.4;
        let params = ProjectionParams {
            weight: array![[0.9, 0.2], [-0.1, 1.1]],
            bias: array![0.05, -0.03],
        };
        let refs: Vec<&ResolvedPair> = pairs.iter().collect();
        let embeds: Vec<Array1<f64>> = pairs
            .iter()
            .map(|p| images.embed_image(&p.image).unwrap().values().clone())
            .collect();
        let mut cache = BTreeMap::new();
        let bank =
            embed_candidates(candidate_labels(&refs, &labels), &texts, &mut cache).unwrap();
        let (_, dw, db) = batch_loss_and_grads(&refs, &embeds, &bank, &params, tau).unwrap();

        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for r in 0..2 {
            for c in 0..2 {
                let mut plus = params.clone();
                plus.weight[[r, c]] += h;
                let mut minus = params.clone();
                minus.weight[[r, c]] -= h;
                let lp = batch_loss_and_grads(&refs, &embeds, &bank, &plus, tau).unwrap().0;
                let lm = batch_loss_and_grads(&refs, &embeds, &bank, &minus, tau).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                max_rel = max_rel.max((fd - dw[[r, c]]).abs() / fd.abs().max(1.0));
            }
            let mut plus = params.clone();
            plus.bias[r] += h;
            let mut minus = params.clone();
            minus.bias[r] -= h;
            let lp = batch_loss_and_grads(&refs, &embeds, &bank, &plus, tau).unwrap().0;
            let lm = batch_loss_and_grads(&refs, &embeds, &bank, &minus, tau).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            max_rel = max_rel.max((fd - db[r]).abs() / fd.abs().max(1.0));
        }
        assert!(max_rel < 1e-3, "max relative error {max_rel}");
    }

    #[test]
    fn full_batch_loss_is_permutation_invariant() {
        let (mut pairs, labels, images, texts) = two_pair_setup();
        let params = ProjectionParams::identity_jittered(2, 0.1, 3);
        let a =
            projection_loss(&pairs, &labels, &images, &texts, &params, 0.07).unwrap();
        pairs.reverse();
        let b =
            projection_loss(&pairs, &labels, &images, &texts, &params, 0.07).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_loss_and_quantizes() {
        let (pairs, labels, images, texts) = two_pair_setup();
        let mut config = RunConfig::default();
        config.proj_epochs = 30;
        config.proj_batch = 2;
        config.proj_lr = 0.05;
        let init = ProjectionParams {
            // Start misaligned so there is something to learn.
            weight: array![[0.0, 1.0], [1.0, 0.0]],
            bias: array![0.0, 0.0],
        };
        let before =
            projection_loss(&pairs, &labels, &images, &texts, &init, config.score_tau).unwrap();
        let (trained, curve) =
            train_projection(&pairs, &labels, &images, &texts, init, &config).unwrap();
        let after =
            projection_loss(&pairs, &labels, &images, &texts, &trained, config.score_tau)
                .unwrap();
        assert!(after < before, "{before} -> {after}");
        assert!(!curve.is_empty());
        for v in trained.weight.iter() {
            assert_eq!(*v, *v as f32 as f64);
        }
    }

    #[test]
    fn params_round_trip_through_archive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.synd");
        let mut params = ProjectionParams::identity_jittered(3, 0.01, 9);
        params.quantize();
        params.to_path(&path).unwrap();
        let back = ProjectionParams::from_path(&path).unwrap();
        assert_eq!(back, params);
    }
}
