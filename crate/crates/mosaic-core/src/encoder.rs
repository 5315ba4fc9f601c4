//! A small pre-norm transformer encoder over token sequences with a CLS
//! token at position 0. The feed-forward blocks of the last K layers carry
//! semantic expert groups; every base parameter is frozen at construction and
//! only the expert matrices (plus whatever the training stage adds) train.
//!
//! Inputs are token sequences directly — the synthetic generator emits
//! tokens, so no image plumbing gets between the tests and the expert
//! mechanism. Positional information enters through an additive position
//! embedding that is frozen after initialization.
//!
//! Every parameter is initialized from its own stream derived from
//! `(seed, fnv1a(path))`, so the base weights are bit-identical across
//! encoders that differ only in their expert configuration.

use crate::error::{Error, Result};
use crate::mosaic::{
    layer_forward_on_tape, route, ActiveSet, BaseFfnVars, ExpertVars, GroupVars, InjectMode,
    PoolingMode,
};
use crate::numerics::rng::{derive_seed, fnv1a};
use crate::numerics::{Matrix, ParamStore, SeededRng, Tape, Var};
use crate::schema::{Annotation, AttributeSchema};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// Layer-norm epsilon used everywhere in the encoder.
pub const LN_EPS: f64 = 1e-5;

/// Encoder hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Sequence length including the CLS slot at position 0.
    pub seq_len: usize,
    /// Number of trailing blocks whose FFN is wrapped with expert groups.
    pub mosaic_last_k: usize,
    pub lora_rank: usize,
    /// α/r factor of every expert delta.
    pub lora_scaling: f64,
    pub pooling: PoolingMode,
    pub inject: InjectMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depth: 4,
            d_model: 32,
            heads: 4,
            seq_len: 9,
            mosaic_last_k: 4,
            lora_rank: 4,
            lora_scaling: 1.0,
            pooling: PoolingMode::Mean,
            inject: InjectMode::All,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.mosaic_last_k == 0 || self.mosaic_last_k > self.depth {
            return Err(Error::Config(format!(
                "mosaic_last_k must satisfy 1 <= K <= depth, got {} with depth {}",
                self.mosaic_last_k, self.depth
            )));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be at least 1".into()));
        }
        if self.seq_len < 1 {
            return Err(Error::Config("seq_len must include the CLS slot".into()));
        }
        Ok(())
    }
}

/// The CLS vector after the final block (1×d row), compared in L2/cosine
/// space by the retrieval metrics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Embedding(pub Matrix);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        self.0.data()
    }

    /// The unit-norm copy used for ranking.
    pub fn normalized(&self) -> Result<Matrix> {
        let norm = libm::sqrt(self.0.data().iter().map(|v| v * v).sum());
        if norm == 0.0 {
            return Err(Error::Numeric("zero-norm embedding".into()));
        }
        Ok(self.0.scale(1.0 / norm))
    }

    pub fn cosine_similarity(&self, other: &Embedding) -> Result<f64> {
        let a = self.normalized()?;
        let b = other.normalized()?;
        Ok(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
    }
}

/// Transformer encoder with frozen base weights and trainable expert groups,
/// all held in one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub schema: AttributeSchema,
    pub params: ParamStore,
}

fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    libm::sqrt(2.0 / (fan_in + fan_out) as f64)
}

fn seeded_matrix(seed: u64, path: &str, rows: usize, cols: usize, std: f64) -> Matrix {
    let mut rng = SeededRng::new(derive_seed(seed, fnv1a(path.as_bytes())));
    let data = (0..rows * cols).map(|_| rng.normal(0.0, std)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

/// Build an encoder: `depth` pre-norm blocks of (attention, FFN), the last K
/// FFNs wrapped with one expert group per schema attribute. Base parameters
/// are frozen; LoRA `A`/`B` matrices are trainable.
pub fn build_encoder(
    config: &EncoderConfig,
    schema: &AttributeSchema,
    seed: u64,
) -> Result<Encoder> {
    config.validate()?;
    let d = config.d_model;
    let hidden = 4 * d;
    let mut params = ParamStore::new();
    let frozen = |params: &mut ParamStore, path: &str, m: Matrix| -> Result<()> {
        params.insert(path, m, false)
    };

    frozen(&mut params, "pos", seeded_matrix(seed, "pos", config.seq_len, d, 0.02))?;
    for b in 0..config.depth {
        let p = |name: &str| format!("block{b}.{name}");
        frozen(&mut params, &p("ln1.gain"), ones(1, d))?;
        frozen(&mut params, &p("ln1.bias"), Matrix::zeros(1, d))?;
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            let path = p(w);
            frozen(&mut params, &path, seeded_matrix(seed, &path, d, d, xavier_std(d, d)))?;
        }
        frozen(&mut params, &p("ln2.gain"), ones(1, d))?;
        frozen(&mut params, &p("ln2.bias"), Matrix::zeros(1, d))?;
        let w1 = p("ffn.w1");
        frozen(&mut params, &w1, seeded_matrix(seed, &w1, d, hidden, xavier_std(d, hidden)))?;
        let w2 = p("ffn.w2");
        frozen(&mut params, &w2, seeded_matrix(seed, &w2, hidden, d, xavier_std(hidden, d)))?;

        if block_is_wrapped(config, b) {
            for (gi, group) in schema.groups().iter().enumerate() {
                for ei in 0..group.ty.expert_count() {
                    let a_path = p(&format!("moe.g{gi}.e{ei}.a"));
                    params.insert(
                        &a_path,
                        seeded_matrix(seed, &a_path, config.lora_rank, d, 0.02),
                        true,
                    )?;
                    let b_path = p(&format!("moe.g{gi}.e{ei}.b"));
                    params.insert(&b_path, Matrix::zeros(d, config.lora_rank), true)?;
                }
            }
        }
    }
    frozen(&mut params, "final_ln.gain", ones(1, d))?;
    frozen(&mut params, "final_ln.bias", Matrix::zeros(1, d))?;

    Ok(Encoder { config: config.clone(), schema: schema.clone(), params })
}

fn ones(rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    m.data_mut().fill(1.0);
    m
}

/// Whether block `b` carries expert groups.
pub fn block_is_wrapped(config: &EncoderConfig, b: usize) -> bool {
    b >= config.depth - config.mosaic_last_k
}

impl Encoder {
    /// Paths of the LoRA matrices belonging to one schema group, across all
    /// wrapped blocks.
    pub fn lora_paths_for_group(&self, group_idx: usize) -> Vec<String> {
        let mut out = Vec::new();
        for b in 0..self.config.depth {
            if !block_is_wrapped(&self.config, b) {
                continue;
            }
            let experts = self.schema.group(group_idx).ty.expert_count();
            for ei in 0..experts {
                out.push(format!("block{b}.moe.g{group_idx}.e{ei}.a"));
                out.push(format!("block{b}.moe.g{group_idx}.e{ei}.b"));
            }
        }
        out
    }

    /// Multi-head self-attention on the tape.
    fn attention(
        &self,
        tape: &mut Tape,
        x: Var,
        vars: &BTreeMap<String, Var>,
        block: usize,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dk = d / heads;
        let p = |name: &str| format!("block{block}.attn.{name}");
        let q = tape.matmul(x, vars[&p("wq")])?;
        let k = tape.matmul(x, vars[&p("wk")])?;
        let v = tape.matmul(x, vars[&p("wv")])?;
        let mut contexts = Vec::with_capacity(heads);
        let scale = 1.0 / libm::sqrt(dk as f64);
        for h in 0..heads {
            let qh = tape.cols_slice(q, h * dk, dk)?;
            let kh = tape.cols_slice(k, h * dk, dk)?;
            let vh = tape.cols_slice(v, h * dk, dk)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scaled);
            contexts.push(tape.matmul(probs, vh)?);
        }
        let merged = tape.concat_cols(&contexts)?;
        tape.matmul(merged, vars[&p("wo")])
    }

    /// Record the full forward pass onto `tape`: position add, `depth`
    /// pre-norm blocks, final layer norm. Returns the CLS row (1×d).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        tokens: &Matrix,
        active: &ActiveSet,
    ) -> Result<Var> {
        let d = self.config.d_model;
        if tokens.shape() != (self.config.seq_len, d) {
            return Err(Error::Dimension(format!(
                "tokens {:?} do not match encoder sequence {}x{}",
                tokens.shape(),
                self.config.seq_len,
                d
            )));
        }
        let tokens_var = tape.constant(tokens.clone());
        let mut x = tape.add(tokens_var, vars["pos"])?;
        for b in 0..self.config.depth {
            let p = |name: &str| format!("block{b}.{name}");
            let ln1 =
                tape.layer_norm_rows(x, vars[&p("ln1.gain")], vars[&p("ln1.bias")], LN_EPS)?;
            let attn = self.attention(tape, ln1, vars, b)?;
            x = tape.add(x, attn)?;
            let ln2 =
                tape.layer_norm_rows(x, vars[&p("ln2.gain")], vars[&p("ln2.bias")], LN_EPS)?;
            let ffn = BaseFfnVars::Mlp { w1: vars[&p("ffn.w1")], w2: vars[&p("ffn.w2")] };
            let block_out = if block_is_wrapped(&self.config, b) {
                let groups = self.group_vars(vars, b);
                layer_forward_on_tape(
                    tape,
                    ln2,
                    &ffn,
                    &groups,
                    active,
                    self.config.pooling,
                    self.config.inject,
                )?
            } else {
                crate::mosaic::base_ffn(tape, ln2, &ffn)?
            };
            x = tape.add(x, block_out)?;
        }
        let final_ln =
            tape.layer_norm_rows(x, vars["final_ln.gain"], vars["final_ln.bias"], LN_EPS)?;
        tape.row_slice(final_ln, 0)
    }

    fn group_vars(&self, vars: &BTreeMap<String, Var>, block: usize) -> Vec<GroupVars> {
        self.schema
            .groups()
            .iter()
            .enumerate()
            .map(|(gi, g)| GroupVars {
                experts: (0..g.ty.expert_count())
                    .map(|ei| ExpertVars {
                        a: vars[&format!("block{block}.moe.g{gi}.e{ei}.a")],
                        b: vars[&format!("block{block}.moe.g{gi}.e{ei}.b")],
                        scaling: self.config.lora_scaling,
                    })
                    .collect(),
            })
            .collect()
    }

    /// Embed one token sequence. Routing is computed once per call from the
    /// annotation and the inclusion mask.
    pub fn encode(
        &self,
        tokens: &Matrix,
        annotation: &Annotation,
        inclusion: &[bool],
    ) -> Result<Embedding> {
        let active = route(annotation, inclusion, &self.schema)?;
        self.encode_routed(tokens, &active)
    }

    /// Embed with a precomputed active set (used by the training loop, which
    /// routes each image once per run).
    pub fn encode_routed(&self, tokens: &Matrix, active: &ActiveSet) -> Result<Embedding> {
        let mut tape = Tape::new();
        let vars = tape.load_params(&self.params)?;
        let cls = self.forward_on_tape(&mut tape, &vars, tokens, active)?;
        Ok(Embedding(tape.value(cls).clone()))
    }

    /// Number of trainable scalars; at construction this is exactly
    /// `wrapped blocks × total experts × 2·r·d`.
    pub fn trainable_parameter_count(&self) -> usize {
        self.params.trainable_len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::tiny_schema;
    use alloc::vec;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            depth: 4,
            d_model: 8,
            heads: 2,
            seq_len: 5,
            mosaic_last_k: 2,
            lora_rank: 2,
            ..EncoderConfig::default()
        }
    }

    fn random_tokens(seed: u64, l: usize, d: usize) -> Matrix {
        let mut rng = SeededRng::new(seed);
        Matrix::from_vec(l, d, (0..l * d).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn placement_rule_wraps_last_k_blocks() {
        let config = tiny_config(); // depth 4, K 2
        let enc = build_encoder(&config, &tiny_schema(), 7).unwrap();
        assert!(!block_is_wrapped(&config, 0));
        assert!(!block_is_wrapped(&config, 1));
        assert!(block_is_wrapped(&config, 2));
        assert!(block_is_wrapped(&config, 3));
        assert!(enc.params.get("block2.moe.g0.e0.a").is_ok());
        assert!(enc.params.get("block1.moe.g0.e0.a").is_err());

        let full = EncoderConfig { mosaic_last_k: 4, ..config };
        let enc = build_encoder(&full, &tiny_schema(), 7).unwrap();
        for b in 0..4 {
            assert!(enc.params.get(&format!("block{b}.moe.g0.e0.a")).is_ok());
        }
    }

    #[test]
    fn trainable_count_matches_formula() {
        let config = tiny_config();
        let schema = tiny_schema(); // experts: 1 + 2 + 3 + 1 = 7
        let enc = build_encoder(&config, &schema, 3).unwrap();
        let per_expert = 2 * config.lora_rank * config.d_model;
        let expected = 2 /* wrapped blocks */ * 7 * per_expert;
        assert_eq!(enc.trainable_parameter_count(), expected);
        // enumeration agrees with the formula
        let mut by_enumeration = 0;
        for path in enc.params.trainable_paths() {
            let m = enc.params.get(&path).unwrap();
            by_enumeration += m.data().len();
            assert!(path.contains(".moe."));
        }
        assert_eq!(by_enumeration, expected);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let schema = tiny_schema();
        let mut c = tiny_config();
        c.mosaic_last_k = 5;
        assert!(build_encoder(&c, &schema, 0).is_err());
        let mut c = tiny_config();
        c.heads = 3; // 8 % 3 != 0
        assert!(build_encoder(&c, &schema, 0).is_err());
        let mut c = tiny_config();
        c.mosaic_last_k = 0;
        assert!(build_encoder(&c, &schema, 0).is_err());
    }

    #[test]
    fn zero_init_encoder_equals_mosaic_free_baseline_bitwise() {
        let config = tiny_config();
        let schema = tiny_schema();
        let enc = build_encoder(&config, &schema, 42).unwrap();
        // the mosaic-free baseline: identical config and seed, empty schema
        let empty = AttributeSchema::new(vec![]).unwrap();
        let base = build_encoder(&config, &empty, 42).unwrap();
        let tokens = random_tokens(1, config.seq_len, config.d_model);
        let base_emb = base.encode(&tokens, &Annotation::new(vec![]), &[]).unwrap();
        // every routing pattern over the tiny schema
        for hat in 0..2 {
            for sleeves in 0..2 {
                for colour in 0..3 {
                    for bag in 0..2 {
                        let ann = Annotation::new(vec![hat, sleeves, colour, bag]);
                        let emb = enc.encode(&tokens, &ann, &[true; 4]).unwrap();
                        for (a, b) in emb.0.data().iter().zip(base_emb.0.data()) {
                            assert_eq!(a.to_bits(), b.to_bits());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let config = tiny_config();
        let enc = build_encoder(&config, &tiny_schema(), 5).unwrap();
        let tokens = random_tokens(2, config.seq_len, config.d_model);
        let ann = Annotation::new(vec![1, 0, 2, 1]);
        let e1 = enc.encode(&tokens, &ann, &[true; 4]).unwrap();
        let e2 = enc.encode(&tokens, &ann, &[true; 4]).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn excluded_attribute_changes_are_invisible() {
        // embeddings must be exactly invariant to annotation changes in
        // excluded groups, even with trained (nonzero) experts
        let config = tiny_config();
        let mut enc = build_encoder(&config, &tiny_schema(), 6).unwrap();
        // make the experts matter: fill every B with nonzero values
        let b_paths: Vec<String> = enc
            .params
            .paths()
            .filter(|p| p.ends_with(".b"))
            .cloned()
            .collect();
        let mut rng = SeededRng::new(99);
        for path in b_paths {
            let m = enc.params.get_mut(&path).unwrap();
            for v in m.data_mut() {
                *v = rng.normal(0.0, 0.1);
            }
        }
        let tokens = random_tokens(3, config.seq_len, config.d_model);
        let mask = vec![true, false, true, true]; // "sleeves" excluded
        let a1 = Annotation::new(vec![1, 0, 2, 1]);
        let a2 = Annotation::new(vec![1, 1, 2, 1]); // only sleeves differs
        let e1 = enc.encode(&tokens, &a1, &mask).unwrap();
        let e2 = enc.encode(&tokens, &a2, &mask).unwrap();
        assert_eq!(e1, e2);
        // and an included change is visible
        let a3 = Annotation::new(vec![0, 0, 2, 1]);
        let e3 = enc.encode(&tokens, &a3, &mask).unwrap();
        assert_ne!(e1, e3);
    }

    #[test]
    fn gradients_flow_through_the_whole_stack() {
        let config = EncoderConfig {
            depth: 2,
            d_model: 8,
            heads: 2,
            seq_len: 3,
            mosaic_last_k: 1,
            lora_rank: 2,
            ..EncoderConfig::default()
        };
        let schema = tiny_schema();
        let mut enc = build_encoder(&config, &schema, 8).unwrap();
        // check at a generic point: zero-init B kills half the paths
        let lora_paths: Vec<String> = enc
            .params
            .paths()
            .filter(|p| p.contains(".moe."))
            .cloned()
            .collect();
        let mut rng = SeededRng::new(100);
        for path in lora_paths {
            let m = enc.params.get_mut(&path).unwrap();
            for v in m.data_mut() {
                *v = rng.normal(0.0, 0.3);
            }
        }
        let tokens = random_tokens(4, config.seq_len, config.d_model);
        let ann = Annotation::new(vec![1, 1, 2, 1]);
        let active = route(&ann, &[true; 4], &schema).unwrap();
        // note: the loss must depend on the cls *direction*; the squared norm
        // of a layer-normed row is constant by construction
        let weights: Vec<f64> = (0..config.d_model).map(|c| 0.2 + 0.15 * c as f64).collect();
        let rel = crate::numerics::grad_check(
            |params| {
                let mut tape = Tape::new();
                let vars = tape.load_params(params)?;
                let shadow = Encoder {
                    config: config.clone(),
                    schema: schema.clone(),
                    params: params.clone(),
                };
                let cls = shadow.forward_on_tape(&mut tape, &vars, &tokens, &active)?;
                let normed = tape.l2_normalize_row(cls)?;
                let loss = tape.dot_const(normed, &weights)?;
                tape.loss_and_grads(loss)
            },
            &enc.params,
            1e-6,
        )
        .unwrap();
        assert!(rel <= 1e-5, "relative error {rel}");
    }
}
