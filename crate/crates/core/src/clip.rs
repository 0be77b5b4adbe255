//! Frozen contrastive encoder pair for the desk-scale world.
//!
//! The image side pools pixels to a coarse grid, appends channel statistics,
//! and applies a fixed seeded projection. The text side gives renderable
//! vocabulary (shape classes, background motifs, accent colors) a prototype
//! embedding: the normalized mean image embedding over a seeded reference
//! set of renders. Everything else hashes to a fixed random direction.
//! Prototypes put image and text features in one space by construction,
//! standing in for a pretrained contrastive model.
//!
//! Both encoders are frozen: outputs are pure functions of the construction
//! seed, exposed checksums let callers verify nothing drifted, and every
//! embedding is quantized to f32 so cached and recomputed values are
//! bit-identical.

use ndarray::{Array1, Array2, Array3};
use std::collections::BTreeMap;

use crate::embedding::{EmbeddingSource, EmbeddingVector};
use crate::error::{Error, Result};
use crate::nn;
use crate::seeding::{child_seed, module_rng, stable_hash};
use crate::world;

/// Image-side encoder handle (F).
pub trait ImageEncoder: Send + Sync {
    fn embed_image(&self, image: &Array3<f64>) -> Result<EmbeddingVector>;
    fn dim(&self) -> usize;
    /// Stable fingerprint of the frozen parameters.
    fn checksum(&self) -> u64;
}

/// Text-side encoder handle (H).
pub trait TextEncoder: Send + Sync {
    fn embed_label(&self, label: &str) -> Result<EmbeddingVector>;
    fn dim(&self) -> usize;
    fn checksum(&self) -> u64;
}

const POOL_GRID: usize = 8;
const PROTOTYPE_RENDERS: usize = 12;

/// The frozen desk-scale encoder pair.
#[derive(Debug, Clone)]
pub struct ToyClip {
    dim: usize,
    image_size: usize,
    seed: u64,
    projection: Array2<f64>,
}

impl ToyClip {
    pub fn new(dim: usize, image_size: usize, seed: u64) -> Self {
        assert!(
            image_size % POOL_GRID == 0,
            "image size must be divisible by the pooling grid"
        );
        let feat_dim = 3 * POOL_GRID * POOL_GRID + 6;
        let mut rng = module_rng(seed, "clip-projection");
        let projection = nn::randn2((dim, feat_dim), (1.0 / feat_dim as f64).sqrt(), &mut rng);
        ToyClip {
            dim,
            image_size,
            seed,
            projection,
        }
    }

    fn features(&self, image: &Array3<f64>) -> Result<Array1<f64>> {
        let (c, h, w) = image.dim();
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::ShapeMismatch {
                expected: vec![3, self.image_size, self.image_size],
                got: vec![c, h, w],
                context: "image encoder input",
            });
        }
        let pooled = nn::avg_pool(image, self.image_size / POOL_GRID);
        let mut feat = Array1::zeros(3 * POOL_GRID * POOL_GRID + 6);
        for (i, v) in pooled.iter().enumerate() {
            feat[i] = *v;
        }
        let base = 3 * POOL_GRID * POOL_GRID;
        for ch in 0..3 {
            let plane = image.index_axis(ndarray::Axis(0), ch);
            let mean = plane.mean().unwrap();
            let var = plane.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            feat[base + ch] = mean;
            feat[base + 3 + ch] = var.sqrt();
        }
        Ok(feat)
    }

    fn quantized(values: Array1<f64>, source: EmbeddingSource) -> EmbeddingVector {
        let unit = EmbeddingVector::normalized(values, source);
        let quant = unit.values().mapv(|v| v as f32 as f64);
        EmbeddingVector::from_unit(quant, source)
            .unwrap_or_else(|_| EmbeddingVector::normalized(unit.values().clone(), source))
    }

    /// Prototype: mean image embedding over reference renders of a concept.
    fn prototype(
        &self,
        renders: impl Iterator<Item = Array3<f64>>,
    ) -> Result<EmbeddingVector> {
        let mut acc = Array1::zeros(self.dim);
        let mut count = 0usize;
        for image in renders {
            acc = acc + self.embed_image(&image)?.values();
            count += 1;
        }
        debug_assert!(count > 0);
        Ok(Self::quantized(acc, EmbeddingSource::TextEncoder))
    }

    fn label_kind(label: &str) -> LabelKind {
        if world::IND_CLASSES.contains(&label) || world::OOD_CLASSES.contains(&label) {
            LabelKind::Shape
        } else if world::BACKGROUNDS.contains(&label) {
            LabelKind::Motif
        } else if world::ACCENTS.iter().any(|(n, _)| *n == label) {
            LabelKind::Accent
        } else {
            LabelKind::Abstract
        }
    }
}

enum LabelKind {
    Shape,
    Motif,
    Accent,
    Abstract,
}

impl ImageEncoder for ToyClip {
    fn embed_image(&self, image: &Array3<f64>) -> Result<EmbeddingVector> {
        let feat = self.features(image)?;
        let raw = self.projection.dot(&feat);
        Ok(Self::quantized(raw, EmbeddingSource::ImageEncoder))
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn checksum(&self) -> u64 {
        let mut h = stable_hash("toy-clip-image");
        for v in self.projection.iter() {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

impl TextEncoder for ToyClip {
    fn embed_label(&self, label: &str) -> Result<EmbeddingVector> {
        let proto_seed = child_seed(self.seed, "clip-prototypes");
        match Self::label_kind(label) {
            LabelKind::Shape => self.prototype((0..PROTOTYPE_RENDERS).map(|i| {
                let background = world::BACKGROUNDS[i % world::BACKGROUNDS.len()];
                let accent = world::ACCENTS[(i / 2) % world::ACCENTS.len()].0;
                world::render(
                    label,
                    background,
                    accent,
                    &format!("proto-{label}-{i}"),
                    proto_seed,
                    self.image_size,
                )
            })),
            LabelKind::Motif => self.prototype((0..PROTOTYPE_RENDERS).map(|i| {
                let accent = world::ACCENTS[i % world::ACCENTS.len()].0;
                world::render_background(label, accent, i, proto_seed, self.image_size)
            })),
            LabelKind::Accent => self.prototype((0..PROTOTYPE_RENDERS).map(|i| {
                let motif = world::BACKGROUNDS[i % world::BACKGROUNDS.len()];
                world::render_background(motif, label, i, proto_seed, self.image_size)
            })),
            LabelKind::Abstract => {
                let mut rng = module_rng(proto_seed, &format!("clip-text-{label}"));
                let raw = nn::randn1(self.dim, 1.0, &mut rng);
                Ok(Self::quantized(raw, EmbeddingSource::TextEncoder))
            }
        }
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn checksum(&self) -> u64 {
        ImageEncoder::checksum(self).rotate_left(17)
    }
}

/// Text encoder with a fixed lookup table; used for geometric oracles.
#[derive(Debug, Clone, Default)]
pub struct FixedTextEncoder {
    table: BTreeMap<String, Array1<f64>>,
}

impl FixedTextEncoder {
    pub fn new(entries: impl IntoIterator<Item = (String, Array1<f64>)>) -> Self {
        FixedTextEncoder {
            table: entries.into_iter().collect(),
        }
    }
}

impl TextEncoder for FixedTextEncoder {
    fn embed_label(&self, label: &str) -> Result<EmbeddingVector> {
        let values = self
            .table
            .get(label)
            .ok_or_else(|| Error::MissingLabelEmbedding(label.into()))?;
        Ok(EmbeddingVector::normalized(
            values.clone(),
            EmbeddingSource::TextEncoder,
        ))
    }

    fn dim(&self) -> usize {
        self.table.values().next().map_or(0, |v| v.len())
    }

    fn checksum(&self) -> u64 {
        let mut h = stable_hash("fixed-text");
        for (k, v) in &self.table {
            h ^= stable_hash(k);
            for x in v.iter() {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Build the `[Y | Y-]` text-feature bank for a label space.
pub fn build_label_bank(
    labels: &crate::embedding::LabelSpace,
    encoder: &dyn TextEncoder,
) -> Result<crate::scoring::LabelBank> {
    let dim = encoder.dim();
    let embed_rows = |names: &[String]| -> Result<Array2<f64>> {
        let mut mat = Array2::zeros((names.len(), dim));
        for (i, name) in names.iter().enumerate() {
            let e = encoder.embed_label(name)?;
            if e.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: e.dim(),
                    context: "label bank row",
                });
            }
            mat.row_mut(i).assign(e.values());
        }
        Ok(mat)
    };
    Ok(crate::scoring::LabelBank {
        ind: embed_rows(&labels.ind_labels)?,
        neg: embed_rows(&labels.neg_labels)?,
    })
}
