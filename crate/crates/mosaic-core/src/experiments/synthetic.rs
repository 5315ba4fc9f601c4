//! Deterministic synthetic benchmark: identities with attribute annotations,
//! camera labels and token-sequence "images".
//!
//! Construction per image:
//!
//! ```text
//! template(id) = Σ_groups value_pattern(group, value(id, group)) · attribute_scale
//!              + id_pattern(id) · identity_noise
//! image        = template(id) + camera_pattern(cam) · camera_shift
//!              + fresh noise · image_noise
//! ```
//!
//! Row 0 of every token matrix is the CLS slot and stays zero; the encoder's
//! position embedding gives it its identity. Attribute values are drawn once
//! per identity, so annotations are identity-consistent by construction.
//! Train and test identity sets are disjoint; test images are split into
//! query (first image of each identity×camera pair) and gallery (the rest).

use crate::error::{Error, Result};
use crate::numerics::rng::{derive_seed, fnv1a};
use crate::numerics::{Matrix, SeededRng};
use crate::schema::{market_style_schema, Annotation, AttributeSchema};
use crate::training::TrainingImage;
use alloc::format;
use alloc::vec::Vec;

/// Generator settings.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticSpec {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub n_cameras: usize,
    /// Sequence length including the CLS slot.
    pub seq_len: usize,
    pub d_model: usize,
    /// Identities reserved for the training split; the rest form the test
    /// split with disjoint identities.
    pub n_train_identities: usize,
    /// Scale of the per-(group, value) patterns added to the template.
    pub attribute_scale: f64,
    /// Scale of the per-identity pattern (what distinguishes identities that
    /// share every attribute).
    pub identity_noise: f64,
    /// Scale of the per-camera shift shared by all images from one camera.
    pub camera_shift: f64,
    /// Scale of the per-image noise.
    pub image_noise: f64,
    pub schema: AttributeSchema,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_identities: 50,
            images_per_identity: 8,
            n_cameras: 3,
            seq_len: 9,
            d_model: 32,
            n_train_identities: 25,
            attribute_scale: 0.7,
            identity_noise: 0.6,
            camera_shift: 0.9,
            image_noise: 0.5,
            schema: market_style_schema(4, 4).expect("bundled schema is valid"),
            seed: 2024,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.images_per_identity == 0 || self.seq_len < 2 {
            return Err(Error::Config("counts must be positive (seq_len >= 2)".into()));
        }
        if self.n_cameras < 2 {
            return Err(Error::Config(
                "cross-camera evaluation needs at least two cameras".into(),
            ));
        }
        if self.images_per_identity < self.n_cameras {
            return Err(Error::Config(
                "need images_per_identity >= n_cameras so every identity covers \
                 at least two cameras"
                    .into(),
            ));
        }
        if self.n_train_identities == 0 || self.n_train_identities >= self.n_identities {
            return Err(Error::Config(format!(
                "split is infeasible: {} train identities out of {}",
                self.n_train_identities, self.n_identities
            )));
        }
        Ok(())
    }
}

/// One generated image.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticImage {
    pub tokens: Matrix,
    /// Global identity label.
    pub identity: usize,
    pub camera: usize,
    pub annotation: Annotation,
}

/// Generated dataset with a train / query / gallery split.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub train: Vec<SyntheticImage>,
    pub query: Vec<SyntheticImage>,
    pub gallery: Vec<SyntheticImage>,
}

impl SyntheticDataset {
    /// Training images with identities remapped to contiguous `0..n_train`.
    pub fn training_view(&self) -> Vec<TrainingImage> {
        self.train
            .iter()
            .map(|img| TrainingImage {
                tokens: img.tokens.clone(),
                identity: img.identity,
                annotation: img.annotation.clone(),
            })
            .collect()
    }

    pub fn n_train_identities(&self) -> usize {
        self.spec.n_train_identities
    }
}

fn pattern(seed: u64, tag: &str, rows: usize, cols: usize) -> Matrix {
    let mut rng = SeededRng::new(derive_seed(seed, fnv1a(tag.as_bytes())));
    // row 0 is the CLS slot and stays zero
    let mut m = Matrix::zeros(rows, cols);
    for r in 1..rows {
        for c in 0..cols {
            m.set(r, c, rng.normal(0.0, 1.0));
        }
    }
    m
}

/// Generate a dataset; byte-identical for identical specs.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let l = spec.seq_len;
    let d = spec.d_model;

    // per-identity annotations, identity-consistent
    let mut ann_rng = SeededRng::new(derive_seed(spec.seed, fnv1a(b"annotations")));
    let mut annotations = Vec::with_capacity(spec.n_identities);
    for _ in 0..spec.n_identities {
        let values = spec
            .schema
            .groups()
            .iter()
            .map(|g| ann_rng.below(g.ty.num_values() as u64) as usize)
            .collect();
        annotations.push(Annotation::new(values));
    }

    let camera_patterns: Vec<Matrix> = (0..spec.n_cameras)
        .map(|c| pattern(spec.seed, &format!("camera{c}"), l, d).scale(spec.camera_shift))
        .collect();

    let mut noise_rng = SeededRng::new(derive_seed(spec.seed, fnv1a(b"image-noise")));
    let mut train = Vec::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();

    for id in 0..spec.n_identities {
        // template = attribute patterns + identity pattern
        let mut template = Matrix::zeros(l, d);
        for (gi, &value) in annotations[id].values.iter().enumerate() {
            let vp = pattern(spec.seed, &format!("attr.g{gi}.v{value}"), l, d);
            template = template.add(&vp.scale(spec.attribute_scale))?;
        }
        let idp = pattern(spec.seed, &format!("identity{id}"), l, d);
        template = template.add(&idp.scale(spec.identity_noise))?;

        let mut seen_camera_first = alloc::vec![true; spec.n_cameras];
        for img_idx in 0..spec.images_per_identity {
            let camera = img_idx % spec.n_cameras;
            let mut tokens = template.add(&camera_patterns[camera])?;
            for r in 1..l {
                for c in 0..d {
                    let v = tokens.get(r, c) + noise_rng.normal(0.0, spec.image_noise);
                    tokens.set(r, c, v);
                }
            }
            let image = SyntheticImage {
                tokens,
                identity: id,
                camera,
                annotation: annotations[id].clone(),
            };
            if id < spec.n_train_identities {
                train.push(image);
            } else if seen_camera_first[camera] {
                seen_camera_first[camera] = false;
                query.push(image);
            } else {
                gallery.push(image);
            }
        }
    }

    Ok(SyntheticDataset { spec: spec.clone(), train, query, gallery })
}
