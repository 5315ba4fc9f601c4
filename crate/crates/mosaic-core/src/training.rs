//! The stage-2 objective and training loop with a frozen base, plus the
//! desk-scale stand-in for the prompt-learning first stage.
//!
//! Stage 1 learns one anchor vector per training identity against the frozen
//! encoder's embeddings (experts inactive), standing in for prompt-derived
//! text features. Its loss is a symmetric contrastive pair (image→anchor
//! cross-entropy and anchor→image multi-positive InfoNCE) plus a cosine
//! alignment term; with a single identity both contrastive terms vanish
//! identically and the attractor is exactly the mean embedding direction.
//!
//! Stage 2 freezes the anchors and optimizes only the expert matrices of the
//! groups enabled by the inclusion mask, together with a linear classifier
//! head, under the sum of three losses:
//!
//! * identity cross-entropy with label smoothing over head logits,
//! * batch-hard triplet loss on L2-normalized embeddings,
//! * image-to-anchor cross-entropy over cosine similarities at temperature τ.
//!
//! Batches are sampled P identities × Q instances from a seeded stream, so a
//! full training run is a pure function of its inputs.

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::mosaic::{route, ActiveSet};
use crate::numerics::rng::{derive_seed, fnv1a};
use crate::numerics::{adamw_step, AdamWState, Matrix, ParamStore, SeededRng, Tape, Var};
use crate::schema::Annotation;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Temperature matching a fixed CLIP-style logit scale of 100.
pub const DEFAULT_TAU: f64 = 0.21714724095162588; // 1 / ln(100)

/// Hyperparameters for both training stages.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Identities per batch.
    pub batch_p: usize,
    /// Instances per identity per batch.
    pub batch_q: usize,
    /// Label smoothing rate ε.
    pub label_smoothing: f64,
    /// Triplet margin m.
    pub margin: f64,
    /// Similarity temperature τ.
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs (1-based) at which the learning rate is multiplied by
    /// `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    /// Desk-scale defaults: the 120/90/110-epoch schedule shrinks
    /// proportionally to 30/22/27 with the 0.1 decay preserved.
    fn default() -> Self {
        TrainingConfig {
            epochs: 30,
            batch_p: 4,
            batch_q: 4,
            label_smoothing: 0.1,
            margin: 0.3,
            tau: DEFAULT_TAU,
            lr: 1e-3,
            weight_decay: 0.01,
            lr_milestones: vec![22, 27],
            lr_decay: 0.1,
            stage1_steps: 300,
            stage1_lr: 0.05,
            seed: 17,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must be in [0, 1)".into()));
        }
        if self.margin < 0.0 {
            return Err(Error::Config("margin must be non-negative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.batch_p < 2 || self.batch_q < 2 {
            return Err(Error::Config(
                "batch needs P >= 2 identities and Q >= 2 instances for triplets".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen per-identity anchor vectors (one row per training identity).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IdentityAnchors {
    pub vectors: Matrix,
}

impl IdentityAnchors {
    pub fn n_identities(&self) -> usize {
        self.vectors.rows()
    }
}

/// One labeled training image; identities are contiguous `0..n_identities`
/// within the training split.
#[derive(Debug, Clone)]
pub struct TrainingImage {
    pub tokens: Matrix,
    pub identity: usize,
    pub annotation: Annotation,
}

/// Smoothed target distribution `q_k = (1-ε)·1[k=y] + ε/N`.
pub fn smoothed_targets(n: usize, y: usize, eps: f64) -> Vec<f64> {
    let mut q = vec![eps / n as f64; n];
    q[y] += 1.0 - eps;
    q
}

/// Cross-entropy between softmax(logits) and the smoothed targets, built on
/// the tape as `logsumexp(logits) − q·logits`.
pub fn loss_id_on_tape(tape: &mut Tape, logits: Var, y: usize, eps: f64) -> Result<Var> {
    let n = tape.value(logits).cols();
    if y >= n {
        return Err(Error::Validation(format!("label {y} out of range for {n} classes")));
    }
    let lse = tape.log_sum_exp_row(logits)?;
    let dot = tape.dot_const(logits, &smoothed_targets(n, y, eps))?;
    tape.sub(lse, dot)
}

/// Identity classification loss with label smoothing over raw logits.
pub fn loss_id(logits: &[f64], y: usize, eps: f64) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::Validation("need at least two classes".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let mut tape = Tape::new();
    let l = tape.constant(Matrix::row_vector(logits.to_vec()));
    let loss = loss_id_on_tape(&mut tape, l, y, eps)?;
    Ok(tape.scalar_value(loss))
}

/// The hinge at the heart of the triplet loss.
pub fn triplet_hinge(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    let v = d_pos - d_neg + margin;
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Batch-hard triplet loss on the tape over already L2-normalized embedding
/// vars. For each anchor the hardest positive (max distance) and hardest
/// negative (min distance) feed the margin hinge; the result is the mean
/// over anchors.
pub fn loss_triplet_on_tape(
    tape: &mut Tape,
    normalized: &[Var],
    labels: &[usize],
    margin: f64,
) -> Result<Var> {
    let n = normalized.len();
    if n != labels.len() || n < 2 {
        return Err(Error::Validation("batch needs matching labels and >= 2 items".into()));
    }
    // pairwise distances, computed once
    let mut dist: Vec<Vec<Option<Var>>> = vec![vec![None; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = tape.sub(normalized[i], normalized[j])?;
            let d = tape.l2_norm_row(diff)?;
            dist[i][j] = Some(d);
            dist[j][i] = Some(d);
        }
    }
    let mut hinges = Vec::with_capacity(n);
    for i in 0..n {
        let mut hardest_pos: Option<Var> = None;
        let mut hardest_neg: Option<Var> = None;
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = dist[i][j].expect("filled above");
            if labels[j] == labels[i] {
                hardest_pos = Some(match hardest_pos {
                    None => d,
                    Some(cur) if tape.scalar_value(d) > tape.scalar_value(cur) => d,
                    Some(cur) => cur,
                });
            } else {
                hardest_neg = Some(match hardest_neg {
                    None => d,
                    Some(cur) if tape.scalar_value(d) < tape.scalar_value(cur) => d,
                    Some(cur) => cur,
                });
            }
        }
        let (dp, dn) = match (hardest_pos, hardest_neg) {
            (Some(p), Some(n)) => (p, n),
            _ => {
                return Err(Error::Validation(format!(
                    "anchor {i} (identity {}) lacks a positive or a negative in the batch",
                    labels[i]
                )))
            }
        };
        let gap = tape.sub(dp, dn)?;
        let shifted = tape.add_const(gap, margin);
        hinges.push(tape.relu(shifted));
    }
    let sum = tape.add_n(&hinges)?;
    Ok(tape.scale(sum, 1.0 / n as f64))
}

/// Batch-hard triplet loss over raw embeddings (1×d rows); normalization
/// happens inside.
pub fn loss_triplet(embeddings: &[Matrix], labels: &[usize], margin: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let mut normalized = Vec::with_capacity(embeddings.len());
    for e in embeddings {
        let v = tape.constant(e.clone());
        normalized.push(tape.l2_normalize_row(v)?);
    }
    let loss = loss_triplet_on_tape(&mut tape, &normalized, labels, margin)?;
    Ok(tape.scalar_value(loss))
}

/// Cosine-similarity logits of one normalized embedding against every
/// normalized anchor row, scaled by 1/τ.
pub fn anchor_logits_on_tape(
    tape: &mut Tape,
    normalized_embedding: Var,
    normalized_anchors: &[Var],
    tau: f64,
) -> Result<Var> {
    let mut sims = Vec::with_capacity(normalized_anchors.len());
    for &anchor in normalized_anchors {
        let s = tape.dot(normalized_embedding, anchor)?;
        sims.push(tape.scale(s, 1.0 / tau));
    }
    tape.concat_cols(&sims)
}

/// Image-to-anchor cross-entropy: smoothed CE over cosine similarities at
/// temperature τ.
pub fn loss_i2t(v: &Matrix, anchors: &Matrix, y: usize, eps: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    if y >= anchors.rows() {
        return Err(Error::Validation(format!(
            "identity {y} out of range for {} anchors",
            anchors.rows()
        )));
    }
    let mut tape = Tape::new();
    let vv = tape.constant(v.clone());
    let nv = tape.l2_normalize_row(vv)?;
    let a = tape.constant(anchors.clone());
    let mut rows = Vec::with_capacity(anchors.rows());
    for k in 0..anchors.rows() {
        let r = tape.row_slice(a, k)?;
        rows.push(tape.l2_normalize_row(r)?);
    }
    let logits = anchor_logits_on_tape(&mut tape, nv, &rows, tau)?;
    let loss = loss_id_on_tape(&mut tape, logits, y, eps)?;
    Ok(tape.scalar_value(loss))
}

/// Per-term values of one stage-2 batch loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub id: f64,
    pub triplet: f64,
    pub i2t: f64,
    pub total: f64,
}

/// Build the full stage-2 loss for one batch on the tape:
/// `L_ID + L_tri + L_i2t`, each term a batch mean.
///
/// `images` pairs each token matrix with its routing and its label; `head`
/// is the N×d classifier weight var; `anchors` the N×d frozen anchor var.
/// Returns the scalar loss var plus the evaluated parts.
#[allow(clippy::too_many_arguments)]
pub fn stage2_batch_loss_on_tape(
    tape: &mut Tape,
    encoder: &Encoder,
    vars: &alloc::collections::BTreeMap<String, Var>,
    images: &[(&Matrix, &ActiveSet, usize)],
    head: Var,
    anchors: Var,
    eps: f64,
    margin: f64,
    tau: f64,
) -> Result<(Var, LossParts)> {
    if images.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let n_ids = tape.value(head).rows();
    let head_t = tape.transpose(head);
    let mut anchor_rows = Vec::with_capacity(tape.value(anchors).rows());
    for k in 0..tape.value(anchors).rows() {
        let r = tape.row_slice(anchors, k)?;
        anchor_rows.push(tape.l2_normalize_row(r)?);
    }

    let mut id_terms = Vec::new();
    let mut i2t_terms = Vec::new();
    let mut normalized = Vec::new();
    let mut labels = Vec::new();
    for (tokens, active, label) in images {
        if *label >= n_ids {
            return Err(Error::Validation(format!("label {label} out of head range {n_ids}")));
        }
        let cls = encoder.forward_on_tape(tape, vars, tokens, active)?;
        let logits = tape.matmul(cls, head_t)?;
        id_terms.push(loss_id_on_tape(tape, logits, *label, eps)?);
        let ncls = tape.l2_normalize_row(cls)?;
        let anchor_logits = anchor_logits_on_tape(tape, ncls, &anchor_rows, tau)?;
        i2t_terms.push(loss_id_on_tape(tape, anchor_logits, *label, eps)?);
        normalized.push(ncls);
        labels.push(*label);
    }
    let id_sum = tape.add_n(&id_terms)?;
    let id_mean = tape.scale(id_sum, 1.0 / images.len() as f64);
    let i2t_sum = tape.add_n(&i2t_terms)?;
    let i2t_mean = tape.scale(i2t_sum, 1.0 / images.len() as f64);
    let triplet = loss_triplet_on_tape(tape, &normalized, &labels, margin)?;
    let partial = tape.add(id_mean, triplet)?;
    let total = tape.add(partial, i2t_mean)?;
    let parts = LossParts {
        id: tape.scalar_value(id_mean),
        triplet: tape.scalar_value(triplet),
        i2t: tape.scalar_value(i2t_mean),
        total: tape.scalar_value(total),
    };
    Ok((total, parts))
}

fn check_identity_coverage(
    images: &[TrainingImage],
    n_identities: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut by_identity: Vec<Vec<usize>> = vec![Vec::new(); n_identities];
    for (idx, img) in images.iter().enumerate() {
        if img.identity >= n_identities {
            return Err(Error::Dataset(format!(
                "identity {} out of declared range {n_identities}",
                img.identity
            )));
        }
        by_identity[img.identity].push(idx);
    }
    if let Some(empty) = by_identity.iter().position(|v| v.is_empty()) {
        return Err(Error::Dataset(format!("identity {empty} has zero samples")));
    }
    Ok(by_identity)
}

/// Stage 1: learn per-identity anchors against the frozen encoder.
///
/// Embeddings are computed once with every expert group excluded, then the
/// anchors are optimized full-batch. The returned anchors are frozen.
pub fn train_stage1(
    encoder: &Encoder,
    images: &[TrainingImage],
    n_identities: usize,
    config: &TrainingConfig,
) -> Result<IdentityAnchors> {
    config.validate()?;
    check_identity_coverage(images, n_identities)?;
    let d = encoder.config.d_model;
    let empty = ActiveSet::empty(encoder.schema.len());
    let mut embeddings = Vec::with_capacity(images.len());
    for img in images {
        embeddings.push(encoder.encode_routed(&img.tokens, &empty)?.0);
    }

    let mut rng = SeededRng::new(derive_seed(config.seed, fnv1a(b"stage1-init")));
    let init: Vec<f64> = (0..n_identities * d).map(|_| rng.normal(0.0, 0.02)).collect();
    let mut params = ParamStore::new();
    params.insert("anchors", Matrix::from_vec(n_identities, d, init)?, true)?;
    let mut state = AdamWState::new(config.stage1_lr, (0.9, 0.999), 1e-8, 0.0);

    for _ in 0..config.stage1_steps {
        let mut tape = Tape::new();
        let anchors = tape.param("anchors", params.get("anchors")?.clone(), true)?;
        let mut anchor_rows = Vec::with_capacity(n_identities);
        for k in 0..n_identities {
            let r = tape.row_slice(anchors, k)?;
            anchor_rows.push(tape.l2_normalize_row(r)?);
        }
        let mut image_rows = Vec::with_capacity(images.len());
        for emb in &embeddings {
            let c = tape.constant(emb.clone());
            image_rows.push(tape.l2_normalize_row(c)?);
        }
        // image→anchor cross-entropy + cosine alignment to the own anchor
        let mut i2t_terms = Vec::new();
        let mut align_terms = Vec::new();
        for (i, img) in images.iter().enumerate() {
            let logits =
                anchor_logits_on_tape(&mut tape, image_rows[i], &anchor_rows, config.tau)?;
            i2t_terms.push(loss_id_on_tape(&mut tape, logits, img.identity, 0.0)?);
            let cos = tape.dot(image_rows[i], anchor_rows[img.identity])?;
            let neg = tape.scale(cos, -1.0);
            align_terms.push(tape.add_const(neg, 1.0));
        }
        let i2t_sum = tape.add_n(&i2t_terms)?;
        let i2t = tape.scale(i2t_sum, 1.0 / images.len() as f64);
        let align_sum = tape.add_n(&align_terms)?;
        let align = tape.scale(align_sum, 1.0 / images.len() as f64);
        // anchor→image multi-positive InfoNCE: -log Σ_pos e^{s/τ} / Σ_all e^{s/τ}
        let mut t2i_terms = Vec::new();
        for k in 0..n_identities {
            let mut all = Vec::with_capacity(images.len());
            let mut pos = Vec::new();
            for (i, img) in images.iter().enumerate() {
                let s = tape.dot(anchor_rows[k], image_rows[i])?;
                let scaled = tape.scale(s, 1.0 / config.tau);
                all.push(scaled);
                if img.identity == k {
                    pos.push(scaled);
                }
            }
            let all_row = tape.concat_cols(&all)?;
            let pos_row = tape.concat_cols(&pos)?;
            let lse_all = tape.log_sum_exp_row(all_row)?;
            let lse_pos = tape.log_sum_exp_row(pos_row)?;
            t2i_terms.push(tape.sub(lse_all, lse_pos)?);
        }
        let t2i_sum = tape.add_n(&t2i_terms)?;
        let t2i = tape.scale(t2i_sum, 1.0 / n_identities as f64);
        let partial = tape.add(i2t, t2i)?;
        let loss = tape.add(partial, align)?;
        let grads = tape.backward(loss)?;
        adamw_step(&mut params, &grads, &mut state)?;
    }

    Ok(IdentityAnchors { vectors: params.get("anchors")?.clone() })
}

/// Outcome of a stage-2 run: the per-epoch mean loss trace and the trained
/// classifier head. Trained expert weights are written back into the
/// encoder's parameter store.
#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub epoch_losses: Vec<f64>,
    pub head: Matrix,
}

/// Stage 2: optimize the expert matrices of the included groups (and the
/// classifier head) under the three-part loss, with anchors and all base
/// parameters frozen. The learning rate decays by `lr_decay` at each
/// milestone epoch (1-based).
pub fn train_stage2(
    encoder: &mut Encoder,
    anchors: &IdentityAnchors,
    images: &[TrainingImage],
    inclusion: &[bool],
    config: &TrainingConfig,
) -> Result<Stage2Outcome> {
    config.validate()?;
    let n_identities = anchors.n_identities();
    let by_identity = check_identity_coverage(images, n_identities)?;
    if inclusion.len() != encoder.schema.len() {
        return Err(Error::Validation("inclusion mask does not match schema".into()));
    }
    let d = encoder.config.d_model;

    // routing is fixed for the whole run
    let mut active_sets = Vec::with_capacity(images.len());
    for img in images {
        active_sets.push(route(&img.annotation, inclusion, &encoder.schema)?);
    }

    // run-local parameter store: encoder params plus the classifier head,
    // with only the included groups' expert matrices trainable
    let mut run_params = encoder.params.clone();
    for path in run_params.trainable_paths() {
        run_params.set_trainable(&path, false)?;
    }
    for (gi, included) in inclusion.iter().enumerate() {
        if *included {
            for path in encoder.lora_paths_for_group(gi) {
                run_params.set_trainable(&path, true)?;
            }
        }
    }
    let mut rng = SeededRng::new(derive_seed(config.seed, fnv1a(b"stage2-head")));
    let head_std = libm::sqrt(2.0 / (n_identities + d) as f64);
    let head_init: Vec<f64> = (0..n_identities * d).map(|_| rng.normal(0.0, head_std)).collect();
    run_params.insert("head.weight", Matrix::from_vec(n_identities, d, head_init)?, true)?;
    let anchors_frozen = anchors.vectors.clone();

    let mut state = AdamWState::new(config.lr, (0.9, 0.999), 1e-8, config.weight_decay);
    let mut sampler = SeededRng::new(derive_seed(config.seed, fnv1a(b"stage2-sampler")));
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        if config.lr_milestones.contains(&epoch) {
            state.lr *= config.lr_decay;
        }
        let mut identity_order: Vec<usize> = (0..n_identities).collect();
        sampler.shuffle(&mut identity_order);
        let mut batch_losses = Vec::new();
        for chunk in identity_order.chunks(config.batch_p) {
            if chunk.len() < 2 {
                // a single-identity remainder cannot form triplets
                continue;
            }
            let mut batch: Vec<(usize, usize)> = Vec::new(); // (image idx, label)
            for &id in chunk {
                let mut order = by_identity[id].clone();
                sampler.shuffle(&mut order);
                for q in 0..config.batch_q {
                    batch.push((order[q % order.len()], id));
                }
            }
            let mut tape = Tape::new();
            let vars = tape.load_params(&run_params)?;
            let head = vars["head.weight"];
            let anchors_var = tape.constant(anchors_frozen.clone());
            let batch_refs: Vec<(&Matrix, &ActiveSet, usize)> = batch
                .iter()
                .map(|&(idx, label)| (&images[idx].tokens, &active_sets[idx], label))
                .collect();
            let (loss, parts) = stage2_batch_loss_on_tape(
                &mut tape,
                encoder,
                &vars,
                &batch_refs,
                head,
                anchors_var,
                config.label_smoothing,
                config.margin,
                config.tau,
            )?;
            let grads = tape.backward(loss)?;
            adamw_step(&mut run_params, &grads, &mut state)?;
            batch_losses.push(parts.total);
        }
        let mean = if batch_losses.is_empty() {
            0.0
        } else {
            batch_losses.iter().sum::<f64>() / batch_losses.len() as f64
        };
        epoch_losses.push(mean);
    }

    // write trained expert weights back; base stays untouched by construction
    let lora_paths: Vec<String> =
        encoder.params.paths().filter(|p| p.contains(".moe.")).cloned().collect();
    for path in lora_paths {
        let trained = run_params.get(&path)?.clone();
        *encoder.params.get_mut(&path)? = trained;
    }
    let head = run_params.get("head.weight")?.clone();
    Ok(Stage2Outcome { epoch_losses, head })
}
