//! Semantic LoRA expert groups, the deterministic oracle router, pooling
//! aggregation and the residual expert layer that wraps a feed-forward block.
//!
//! Each attribute group owns one expert per attribute state. The router never
//! learns anything: it reads the ground-truth annotation and the inclusion
//! mask and picks at most one expert per group. Active experts each emit one
//! summary token (a low-rank delta averaged over the sequence); the pooled
//! summary is added on top of the base FFN output through a residual path, so
//! with every expert delta at zero the layer is exactly the base FFN.
//!
//! Everything here records onto a [`Tape`], which keeps the inference path
//! and the training path bit-identical; the plain-matrix entry points build a
//! throwaway tape internally.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng, Tape, Var};
use crate::schema::{Annotation, AttributeSchema, AttributeType};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// How active expert tokens are aggregated into the summary token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum PoolingMode {
    Mean,
    Max,
}

/// Where the summary token is injected: added to every position, or to the
/// CLS position only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum InjectMode {
    All,
    Cls,
}

/// One low-rank expert: delta(x) = scaling · B·(A·x), with `B` zero at
/// initialization so a fresh expert contributes exactly nothing.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LoRAExpert {
    /// r×d down-projection, small-variance normal init.
    pub a: Matrix,
    /// d×r up-projection, zero init.
    pub b: Matrix,
    pub rank: usize,
    /// α/r factor applied to the delta.
    pub scaling: f64,
}

impl LoRAExpert {
    /// Standard deviation of the down-projection initialization.
    pub const A_INIT_STD: f64 = 0.02;

    pub fn init(rank: usize, d_model: usize, scaling: f64, rng: &mut SeededRng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        let data = (0..rank * d_model)
            .map(|_| rng.normal(0.0, Self::A_INIT_STD))
            .collect();
        Ok(LoRAExpert {
            a: Matrix::from_vec(rank, d_model, data)?,
            b: Matrix::zeros(d_model, rank),
            rank,
            scaling,
        })
    }

    pub fn from_parts(a: Matrix, b: Matrix, scaling: f64) -> Result<Self> {
        let rank = a.rows();
        if b.shape() != (a.cols(), rank) {
            return Err(Error::Dimension(format!(
                "expert A {}x{} does not pair with B {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        Ok(LoRAExpert { a, b, rank, scaling })
    }
}

/// All experts dedicated to one attribute; length is fixed by the type
/// (SS-B → 1, DS-B → 2, k-class → k).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SemanticGroup {
    pub name: String,
    pub ty: AttributeType,
    pub experts: Vec<LoRAExpert>,
}

impl SemanticGroup {
    pub fn init(
        name: &str,
        ty: AttributeType,
        rank: usize,
        d_model: usize,
        scaling: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let experts = (0..ty.expert_count())
            .map(|_| LoRAExpert::init(rank, d_model, scaling, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(SemanticGroup { name: name.into(), ty, experts })
    }
}

/// Routing outcome: for every schema group, either no active expert or the
/// index of exactly one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    pub active: Vec<Option<usize>>,
}

impl ActiveSet {
    /// An all-inactive set over `n` groups.
    pub fn empty(n: usize) -> Self {
        ActiveSet { active: alloc::vec![None; n] }
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|a| a.is_some()).count()
    }
}

/// Deterministic oracle routing.
///
/// Excluded groups activate nothing. An SS-B group activates its single
/// expert only when the attribute is present (value 1). DS-B and multiclass
/// groups activate the expert indexed by the annotated value.
pub fn route(
    annotation: &Annotation,
    inclusion: &[bool],
    schema: &AttributeSchema,
) -> Result<ActiveSet> {
    annotation.validate(schema)?;
    if inclusion.len() != schema.len() {
        return Err(Error::Validation(format!(
            "inclusion mask covers {} groups, schema has {}",
            inclusion.len(),
            schema.len()
        )));
    }
    let active = schema
        .groups()
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if !inclusion[i] {
                return None;
            }
            let value = annotation.values[i];
            match g.ty {
                AttributeType::SingleStateBinary => {
                    if value == 1 {
                        Some(0)
                    } else {
                        None
                    }
                }
                AttributeType::DualStateBinary | AttributeType::Multiclass(_) => Some(value),
            }
        })
        .collect();
    Ok(ActiveSet { active })
}

/// Tape handles for one expert's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub a: Var,
    pub b: Var,
    pub scaling: f64,
}

/// Tape handles for one semantic group.
#[derive(Debug, Clone)]
pub struct GroupVars {
    pub experts: Vec<ExpertVars>,
}

/// Expert output on the tape: the per-token low-rank delta
/// `scaling · tokens·Aᵀ·Bᵀ` reduced to a single 1×d token by averaging over
/// the sequence positions.
pub fn expert_token(tape: &mut Tape, tokens: Var, expert: &ExpertVars) -> Result<Var> {
    let a_t = tape.transpose(expert.a);
    let b_t = tape.transpose(expert.b);
    let down = tape.matmul(tokens, a_t)?;
    let up = tape.matmul(down, b_t)?;
    let scaled = tape.scale(up, expert.scaling);
    Ok(tape.mean_rows(scaled))
}

/// Pooled summary token over the active experts.
///
/// An empty active set yields an explicit zero vector, which keeps the layer
/// total and makes the no-expert case coincide exactly with the base output.
pub fn summary_token(
    tape: &mut Tape,
    tokens: Var,
    groups: &[GroupVars],
    active: &ActiveSet,
    pooling: PoolingMode,
    d_model: usize,
) -> Result<Var> {
    let mut expert_tokens = Vec::new();
    for (group, slot) in groups.iter().zip(&active.active) {
        if let Some(expert_idx) = slot {
            let expert = group.experts.get(*expert_idx).ok_or_else(|| {
                Error::Validation(format!("active expert {expert_idx} out of range"))
            })?;
            expert_tokens.push(expert_token(tape, tokens, expert)?);
        }
    }
    if expert_tokens.is_empty() {
        return Ok(tape.constant(Matrix::zeros(1, d_model)));
    }
    match pooling {
        PoolingMode::Mean => tape.pool_mean(&expert_tokens),
        PoolingMode::Max => tape.pool_max(&expert_tokens),
    }
}

/// The base feed-forward block wrapped by a mosaic layer. `Identity` exists
/// for layer-level tests; the encoder always uses the two-matrix MLP form.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum BaseFfn {
    /// tokens·w1 → GELU → ·w2
    Mlp { w1: Matrix, w2: Matrix },
    Identity,
}

/// Tape handles for the base FFN.
#[derive(Debug, Clone, Copy)]
pub enum BaseFfnVars {
    Mlp { w1: Var, w2: Var },
    Identity,
}

/// One feed-forward block wrapped with semantic expert groups.
#[derive(Debug, Clone)]
pub struct MoSAICLayer {
    pub base: BaseFfn,
    pub groups: Vec<SemanticGroup>,
    pub pooling: PoolingMode,
}

/// Base FFN evaluation on the tape.
pub fn base_ffn(tape: &mut Tape, tokens: Var, ffn: &BaseFfnVars) -> Result<Var> {
    match ffn {
        BaseFfnVars::Mlp { w1, w2 } => {
            let hidden = tape.matmul(tokens, *w1)?;
            let act = tape.gelu(hidden);
            tape.matmul(act, *w2)
        }
        BaseFfnVars::Identity => Ok(tokens),
    }
}

/// Full wrapped block on the tape: base FFN plus the broadcast summary token.
pub fn layer_forward_on_tape(
    tape: &mut Tape,
    tokens: Var,
    ffn: &BaseFfnVars,
    groups: &[GroupVars],
    active: &ActiveSet,
    pooling: PoolingMode,
    inject: InjectMode,
) -> Result<Var> {
    let d_model = tape.value(tokens).cols();
    let ffn_out = base_ffn(tape, tokens, ffn)?;
    let summary = summary_token(tape, tokens, groups, active, pooling, d_model)?;
    match inject {
        InjectMode::All => tape.add_broadcast_row(ffn_out, summary),
        InjectMode::Cls => tape.add_row_at(ffn_out, 0, summary),
    }
}

impl MoSAICLayer {
    fn load(&self, tape: &mut Tape) -> (BaseFfnVars, Vec<GroupVars>) {
        let ffn = match &self.base {
            BaseFfn::Mlp { w1, w2 } => BaseFfnVars::Mlp {
                w1: tape.constant(w1.clone()),
                w2: tape.constant(w2.clone()),
            },
            BaseFfn::Identity => BaseFfnVars::Identity,
        };
        let groups = self
            .groups
            .iter()
            .map(|g| GroupVars {
                experts: g
                    .experts
                    .iter()
                    .map(|e| ExpertVars {
                        a: tape.constant(e.a.clone()),
                        b: tape.constant(e.b.clone()),
                        scaling: e.scaling,
                    })
                    .collect(),
            })
            .collect();
        (ffn, groups)
    }

    /// Plain-matrix forward: `base(tokens) + broadcast(summary)`.
    pub fn forward(&self, tokens: &Matrix, active: &ActiveSet) -> Result<Matrix> {
        let mut tape = Tape::new();
        let tokens_var = tape.constant(tokens.clone());
        let (ffn, groups) = self.load(&mut tape);
        let out = layer_forward_on_tape(
            &mut tape,
            tokens_var,
            &ffn,
            &groups,
            active,
            self.pooling,
            InjectMode::All,
        )?;
        Ok(tape.value(out).clone())
    }

    /// The bare base output, with every expert ignored.
    pub fn forward_base_only(&self, tokens: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let tokens_var = tape.constant(tokens.clone());
        let (ffn, _) = self.load(&mut tape);
        let out = base_ffn(&mut tape, tokens_var, &ffn)?;
        Ok(tape.value(out).clone())
    }
}

/// Plain-matrix expert forward: the single summary token of one expert.
pub fn expert_forward(expert: &LoRAExpert, tokens: &Matrix) -> Result<Matrix> {
    if tokens.rows() == 0 {
        return Err(Error::Dimension("expert_forward on an empty sequence".into()));
    }
    if !tokens.is_finite() {
        return Err(Error::Numeric("expert_forward on non-finite tokens".into()));
    }
    let mut tape = Tape::new();
    let tokens_var = tape.constant(tokens.clone());
    let vars = ExpertVars {
        a: tape.constant(expert.a.clone()),
        b: tape.constant(expert.b.clone()),
        scaling: expert.scaling,
    };
    let token = expert_token(&mut tape, tokens_var, &vars)?;
    Ok(tape.value(token).clone())
}

/// Plain-matrix pooling over already-computed expert tokens. The empty list
/// pools to a zero vector.
pub fn pool(expert_tokens: &[Matrix], mode: PoolingMode, d_model: usize) -> Result<Matrix> {
    if expert_tokens.is_empty() {
        return Ok(Matrix::zeros(1, d_model));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = expert_tokens.iter().map(|t| tape.constant(t.clone())).collect();
    let pooled = match mode {
        PoolingMode::Mean => tape.pool_mean(&vars)?,
        PoolingMode::Max => tape.pool_max(&vars)?,
    };
    Ok(tape.value(pooled).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::tiny_schema;
    use alloc::vec;
    use proptest::prelude::*;

    fn unit_expert(a_rows: &[&[f64]], b_rows: &[&[f64]], scaling: f64) -> LoRAExpert {
        LoRAExpert::from_parts(
            Matrix::from_rows(a_rows).unwrap(),
            Matrix::from_rows(b_rows).unwrap(),
            scaling,
        )
        .unwrap()
    }

    #[test]
    fn route_follows_type_rules() {
        let schema = tiny_schema(); // hat SS-B, sleeves DS-B, colour M(3), bag SS-B
        let all = vec![true; 4];
        // hat absent -> no expert
        let ann = Annotation::new(vec![0, 1, 2, 1]);
        let active = route(&ann, &all, &schema).unwrap();
        assert_eq!(active.active, vec![None, Some(1), Some(2), Some(0)]);
        // hat present -> expert 0
        let ann = Annotation::new(vec![1, 0, 0, 0]);
        let active = route(&ann, &all, &schema).unwrap();
        assert_eq!(active.active, vec![Some(0), Some(0), Some(0), None]);
        // exclusion dominates annotation
        let mask = vec![false, true, false, true];
        let ann = Annotation::new(vec![1, 1, 2, 1]);
        let active = route(&ann, &mask, &schema).unwrap();
        assert_eq!(active.active, vec![None, Some(1), None, Some(0)]);
    }

    #[test]
    fn route_rejects_bad_inputs() {
        let schema = tiny_schema();
        let bad_ann = Annotation::new(vec![0, 1]);
        assert!(route(&bad_ann, &[true; 4], &schema).is_err());
        let ann = Annotation::new(vec![0, 0, 0, 0]);
        assert!(route(&ann, &[true; 3], &schema).is_err());
    }

    proptest! {
        // Determinism and activation cardinality over randomized annotations.
        #[test]
        fn route_is_deterministic_and_one_hot(
            hat in 0usize..2, sleeves in 0usize..2, colour in 0usize..3, bag in 0usize..2,
            mask in proptest::collection::vec(proptest::bool::ANY, 4)
        ) {
            let schema = tiny_schema();
            let ann = Annotation::new(vec![hat, sleeves, colour, bag]);
            let a1 = route(&ann, &mask, &schema).unwrap();
            let a2 = route(&ann, &mask, &schema).unwrap();
            prop_assert_eq!(&a1, &a2);
            for (i, slot) in a1.active.iter().enumerate() {
                if let Some(e) = slot {
                    prop_assert!(mask[i]);
                    prop_assert!(*e < schema.group(i).ty.expert_count());
                }
                // included DS-B/multiclass groups always activate exactly one
                if mask[i] && !matches!(schema.group(i).ty, AttributeType::SingleStateBinary) {
                    prop_assert!(slot.is_some());
                }
            }
        }

        // Excluding one group never changes which experts other groups pick.
        #[test]
        fn exclusion_is_isolated(
            hat in 0usize..2, sleeves in 0usize..2, colour in 0usize..3, bag in 0usize..2,
            drop_idx in 0usize..4
        ) {
            let schema = tiny_schema();
            let ann = Annotation::new(vec![hat, sleeves, colour, bag]);
            let full = route(&ann, &[true; 4], &schema).unwrap();
            let mut mask = vec![true; 4];
            mask[drop_idx] = false;
            let partial = route(&ann, &mask, &schema).unwrap();
            for i in 0..4 {
                if i == drop_idx {
                    prop_assert_eq!(partial.active[i], None);
                } else {
                    prop_assert_eq!(partial.active[i], full.active[i]);
                }
            }
        }
    }

    #[test]
    fn zero_init_expert_emits_zero_token() {
        let mut rng = SeededRng::new(1);
        let expert = LoRAExpert::init(2, 4, 1.0, &mut rng).unwrap();
        let tokens = Matrix::from_rows(&[&[1.0, -2.0, 0.5, 3.0], &[0.1, 0.2, 0.3, 0.4]]).unwrap();
        let token = expert_forward(&expert, &tokens).unwrap();
        assert_eq!(token, Matrix::zeros(1, 4));
    }

    #[test]
    fn expert_forward_hand_computed() {
        // r=1, d=2, A=[[1,0]], B=[[1],[0]], scaling 1
        // tokens [[2,5],[4,7]] -> deltas [[2,0],[4,0]] -> mean [3,0]
        let expert = unit_expert(&[&[1.0, 0.0]], &[&[1.0], &[0.0]], 1.0);
        let tokens = Matrix::from_rows(&[&[2.0, 5.0], &[4.0, 7.0]]).unwrap();
        let token = expert_forward(&expert, &tokens).unwrap();
        assert_eq!(token.data(), &[3.0, 0.0]);
    }

    #[test]
    fn scaling_is_linear() {
        let base = unit_expert(&[&[0.5, -1.0]], &[&[2.0], &[1.0]], 1.0);
        let doubled = unit_expert(&[&[0.5, -1.0]], &[&[2.0], &[1.0]], 2.0);
        let tokens = Matrix::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5]]).unwrap();
        let t1 = expert_forward(&base, &tokens).unwrap();
        let t2 = expert_forward(&doubled, &tokens).unwrap();
        assert_eq!(t1.scale(2.0), t2);
    }

    #[test]
    fn pool_examples() {
        let a = Matrix::row_vector(vec![1.0, 3.0]);
        let b = Matrix::row_vector(vec![5.0, 1.0]);
        // singleton passes through in either mode
        assert_eq!(pool(&[a.clone()], PoolingMode::Mean, 2).unwrap(), a);
        assert_eq!(pool(&[a.clone()], PoolingMode::Max, 2).unwrap(), a);
        // mean of [1,3] and [5,1] -> [3,2]
        let mean = pool(&[a.clone(), b.clone()], PoolingMode::Mean, 2).unwrap();
        assert_eq!(mean.data(), &[3.0, 2.0]);
        // element-wise max
        let max = pool(&[a, b], PoolingMode::Max, 2).unwrap();
        assert_eq!(max.data(), &[5.0, 3.0]);
        // empty active set pools to zero
        assert_eq!(pool(&[], PoolingMode::Mean, 2).unwrap(), Matrix::zeros(1, 2));
    }

    fn test_layer(scaling: f64) -> MoSAICLayer {
        let schema = tiny_schema();
        let mut rng = SeededRng::new(9);
        let groups = schema
            .groups()
            .iter()
            .map(|g| SemanticGroup::init(&g.name, g.ty.clone(), 2, 4, scaling, &mut rng).unwrap())
            .collect();
        let mut wrng = SeededRng::new(10);
        let w1 = Matrix::from_vec(4, 8, (0..32).map(|_| wrng.normal(0.0, 0.3)).collect()).unwrap();
        let w2 = Matrix::from_vec(8, 4, (0..32).map(|_| wrng.normal(0.0, 0.3)).collect()).unwrap();
        MoSAICLayer { base: BaseFfn::Mlp { w1, w2 }, groups, pooling: PoolingMode::Mean }
    }

    #[test]
    fn empty_active_set_is_bitwise_base() {
        let layer = test_layer(1.0);
        let mut rng = SeededRng::new(11);
        let tokens =
            Matrix::from_vec(3, 4, (0..12).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let out = layer.forward(&tokens, &ActiveSet::empty(4)).unwrap();
        let base = layer.forward_base_only(&tokens).unwrap();
        for (a, b) in out.data().iter().zip(base.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_init_experts_are_bitwise_transparent() {
        let layer = test_layer(1.0); // B = 0 everywhere after init
        let mut rng = SeededRng::new(12);
        let tokens =
            Matrix::from_vec(3, 4, (0..12).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let base = layer.forward_base_only(&tokens).unwrap();
        // every routing pattern, not just the empty one
        let schema = tiny_schema();
        for hat in 0..2 {
            for sleeves in 0..2 {
                for colour in 0..3 {
                    let ann = Annotation::new(vec![hat, sleeves, colour, 1]);
                    let active = route(&ann, &[true; 4], &schema).unwrap();
                    let out = layer.forward(&tokens, &active).unwrap();
                    for (a, b) in out.data().iter().zip(base.data()) {
                        assert_eq!(a.to_bits(), b.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn identity_ffn_adds_broadcast_expert_token() {
        // one active expert over an identity base: out = tokens + summary
        let expert = unit_expert(&[&[1.0, 0.0]], &[&[0.0], &[1.0]], 1.5);
        let group = SemanticGroup {
            name: "solo".into(),
            ty: AttributeType::SingleStateBinary,
            experts: vec![expert.clone()],
        };
        let layer = MoSAICLayer {
            base: BaseFfn::Identity,
            groups: vec![group],
            pooling: PoolingMode::Mean,
        };
        let tokens = Matrix::from_rows(&[&[2.0, 5.0], &[4.0, 7.0]]).unwrap();
        let active = ActiveSet { active: vec![Some(0)] };
        let out = layer.forward(&tokens, &active).unwrap();
        // hand-built oracle: expert token then broadcast add
        let summary = expert_forward(&expert, &tokens).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(out.get(r, c), tokens.get(r, c) + summary.get(0, c));
            }
        }
    }

    #[test]
    fn mean_pooling_is_additive_in_each_expert() {
        // with mean pooling the summary is linear in each expert's token
        let e1 = unit_expert(&[&[1.0, 0.0]], &[&[1.0], &[0.0]], 1.0);
        let e2 = unit_expert(&[&[0.0, 1.0]], &[&[0.0], &[1.0]], 1.0);
        let tokens = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let t1 = expert_forward(&e1, &tokens).unwrap();
        let t2 = expert_forward(&e2, &tokens).unwrap();
        let pooled = pool(&[t1.clone(), t2.clone()], PoolingMode::Mean, 2).unwrap();
        let expect = t1.add(&t2).unwrap().scale(0.5);
        assert_eq!(pooled, expect);
        // scaling expert 1 by c scales its contribution by c/2
        let e1_scaled = unit_expert(&[&[1.0, 0.0]], &[&[1.0], &[0.0]], 3.0);
        let t1s = expert_forward(&e1_scaled, &tokens).unwrap();
        let pooled_s = pool(&[t1s, t2], PoolingMode::Mean, 2).unwrap();
        let diff = pooled_s.sub(&pooled).unwrap();
        let expected_diff = t1.scale((3.0 - 1.0) / 2.0);
        for (a, b) in diff.data().iter().zip(expected_diff.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rank_zero_is_rejected() {
        let mut rng = SeededRng::new(0);
        assert!(LoRAExpert::init(0, 4, 1.0, &mut rng).is_err());
    }
}
