//! Dataset manifests, detection scoring, and the AUROC/FPR95 metrics.

use ndarray::{Array3, ArrayD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::archive::{read_archive, write_archive, Archive, TensorData};
use crate::cache::EmbeddingCache;
use crate::clip::ImageEncoder;
use crate::config::RunConfig;
use crate::embedding::LabelSpace;
use crate::error::{Error, Result};
use crate::proj::{project, ProjectionParams};
use crate::scoring::{ood_score, LabelBank, OODScoreRecord};

/// One image reference in a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    pub archive_path: String,
    /// Class label for in-distribution data; `null` for OOD data.
    pub ind_label: Option<String>,
    pub jpeg_byte_size: u64,
    pub pixel_count: u64,
}

/// A named list of image records, all InD or all OOD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// InD manifests label every record; OOD manifests label none.
    pub fn validate(&self) -> Result<()> {
        let labeled = self.records.iter().filter(|r| r.ind_label.is_some()).count();
        if labeled != 0 && labeled != self.records.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.records.len()],
                got: vec![labeled],
                context: "manifest mixes labeled and unlabeled records",
            });
        }
        Ok(())
    }

    pub fn is_ind(&self) -> bool {
        self.records.first().map_or(false, |r| r.ind_label.is_some())
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_path(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Read an image tensor stored under the `image` key of an archive.
pub fn load_image(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    read_archive(path)?
        .require_f64("image")?
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::MalformedHeader("image must be 3-D".into()))
}

/// Write an image tensor as a single-array archive.
pub fn store_image(path: impl AsRef<Path>, image: &Array3<f64>) -> Result<()> {
    let mut archive = Archive::new();
    archive.push("image", TensorData::from_f64(&image.clone().into_dyn()))?;
    write_archive(path, &archive)
}

/// Detection quality over one InD/OOD split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub auroc: f64,
    pub fpr95: f64,
    pub n_ind: usize,
    pub n_ood: usize,
}

/// Probability that a random InD score outranks a random OOD score, with
/// ties counted half: the Mann-Whitney statistic via average ranks.
pub fn auroc(ind_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if ind_scores.is_empty() {
        return Err(Error::EmptyScoreList("ind"));
    }
    if ood_scores.is_empty() {
        return Err(Error::EmptyScoreList("ood"));
    }
    let mut all: Vec<(f64, bool)> = ind_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Average ranks over tie groups (1-based).
    let mut rank_sum_ind = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = ((i + 1) + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_ind += avg_rank;
            }
        }
        i = j;
    }
    let n_i = ind_scores.len() as f64;
    let n_o = ood_scores.len() as f64;
    let u = rank_sum_ind - n_i * (n_i + 1.0) / 2.0;
    Ok(u / (n_i * n_o))
}

/// False-positive rate on OOD at the largest threshold keeping InD
/// true-positive rate at or above 95%. Thresholds use the exact order
/// statistic; an InD sample counts positive when `score >= eta`.
pub fn fpr95(ind_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if ind_scores.is_empty() {
        return Err(Error::EmptyScoreList("ind"));
    }
    if ood_scores.is_empty() {
        return Err(Error::EmptyScoreList("ood"));
    }
    let n = ind_scores.len();
    // Smallest k with k/n >= 0.95, in exact integer arithmetic.
    let k = (19 * n).div_ceil(20);
    let mut sorted = ind_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let eta = sorted[k - 1];
    let false_positives = ood_scores.iter().filter(|&&s| s >= eta).count();
    Ok(false_positives as f64 / ood_scores.len() as f64)
}

pub fn compute_metrics(ind_scores: &[f64], ood_scores: &[f64]) -> Result<DetectionMetrics> {
    Ok(DetectionMetrics {
        auroc: auroc(ind_scores, ood_scores)?,
        fpr95: fpr95(ind_scores, ood_scores)?,
        n_ind: ind_scores.len(),
        n_ood: ood_scores.len(),
    })
}

/// Scores over one or more datasets, with ground truth and dataset tags.
/// Persisted as a tensor archive (`scores`, `is_ind`, `dataset_tag`) plus a
/// JSON sidecar mapping tag indices to dataset names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreDump {
    pub scores: Vec<f64>,
    pub is_ind: Vec<i64>,
    pub dataset_tags: Vec<i64>,
    pub tag_names: Vec<String>,
}

impl ScoreDump {
    pub fn append(&mut self, other: ScoreDump) {
        let offset = self.tag_names.len() as i64;
        self.scores.extend(other.scores);
        self.is_ind.extend(other.is_ind);
        self.dataset_tags
            .extend(other.dataset_tags.iter().map(|t| t + offset));
        self.tag_names.extend(other.tag_names);
    }

    /// Ground-truth split into (InD scores, OOD scores).
    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut ind = Vec::new();
        let mut ood = Vec::new();
        for (&s, &g) in self.scores.iter().zip(self.is_ind.iter()) {
            if g == 1 {
                ind.push(s);
            } else {
                ood.push(s);
            }
        }
        (ind, ood)
    }

    /// Scores restricted to one dataset tag.
    pub fn scores_for(&self, tag_name: &str) -> Vec<f64> {
        let Some(tag) = self.tag_names.iter().position(|n| n == tag_name) else {
            return Vec::new();
        };
        self.scores
            .iter()
            .zip(self.dataset_tags.iter())
            .filter_map(|(&s, &t)| (t == tag as i64).then_some(s))
            .collect()
    }

    pub fn records(&self, eta: f64) -> Vec<OODScoreRecord> {
        self.scores
            .iter()
            .zip(self.dataset_tags.iter())
            .map(|(&s, &t)| {
                OODScoreRecord::at_threshold(s, eta, self.tag_names[t as usize].clone())
            })
            .collect()
    }

    fn sidecar_path(path: &Path) -> std::path::PathBuf {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".tags.json");
        path.with_file_name(name)
    }

    pub fn to_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut archive = Archive::new();
        let scores_f32: Vec<f32> = self.scores.iter().map(|&s| s as f32).collect();
        archive.push(
            "scores",
            TensorData::F32(
                ArrayD::from_shape_vec(vec![scores_f32.len()], scores_f32).expect("1-D"),
            ),
        )?;
        archive.push(
            "is_ind",
            TensorData::I64(
                ArrayD::from_shape_vec(vec![self.is_ind.len()], self.is_ind.clone())
                    .expect("1-D"),
            ),
        )?;
        archive.push(
            "dataset_tag",
            TensorData::I64(
                ArrayD::from_shape_vec(vec![self.dataset_tags.len()], self.dataset_tags.clone())
                    .expect("1-D"),
            ),
        )?;
        write_archive(path, &archive)?;
        std::fs::write(
            Self::sidecar_path(path),
            serde_json::to_string_pretty(&self.tag_names)?,
        )?;
        Ok(())
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let archive = read_archive(path)?;
        let scores = archive
            .require_f64("scores")?
            .into_raw_vec_and_offset()
            .0;
        let is_ind = archive.require("is_ind")?.as_i64()?.clone().into_raw_vec_and_offset().0;
        let dataset_tags = archive
            .require("dataset_tag")?
            .as_i64()?
            .clone()
            .into_raw_vec_and_offset()
            .0;
        let tag_names: Vec<String> =
            serde_json::from_str(&std::fs::read_to_string(Self::sidecar_path(path))?)?;
        Ok(ScoreDump {
            scores,
            is_ind,
            dataset_tags,
            tag_names,
        })
    }
}

/// Score every image in a manifest against the label bank. The projection
/// is applied to image embeddings when provided; ground truth comes from
/// the manifest kind. An empty manifest yields an empty dump.
pub fn score_dataset(
    manifest: &DatasetManifest,
    encoder: &dyn ImageEncoder,
    cache: &EmbeddingCache,
    projection: Option<&ProjectionParams>,
    labels: &LabelSpace,
    bank: &LabelBank,
    config: &RunConfig,
) -> Result<ScoreDump> {
    manifest.validate()?;
    let is_ind = i64::from(manifest.is_ind());
    let scores: Vec<f64> = manifest
        .records
        .par_iter()
        .map(|record| -> Result<f64> {
            let embed = cache.get_or_compute(&record.image_id, encoder, || {
                load_image(&record.archive_path)
            })?;
            let embed = match projection {
                Some(params) => project(&embed, params)?,
                None => embed,
            };
            ood_score(&embed, labels, bank, config.score_tau, config.sim_mode)
        })
        .collect::<Result<_>>()?;
    let n = scores.len();
    Ok(ScoreDump {
        scores,
        is_ind: vec![is_ind; n],
        dataset_tags: vec![0; n],
        tag_names: vec![manifest.name.clone()],
    })
}
