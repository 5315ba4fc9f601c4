//! Attribute taxonomy, per-image annotations and dataset prior statistics.
//!
//! Attributes come in three kinds:
//!
//! * single-state binary (SS-B): present/absent, one expert for "present";
//! * dual-state binary (DS-B): two exclusive states, one expert each;
//! * multiclass: `k >= 3` categories, one expert each.
//!
//! An SS-B "absent" is a real annotation value (index 0), not a missing
//! entry, so annotations are total functions over the schema; the routing
//! layer — not the schema — implements the "no expert when absent" rule.

use crate::error::{Error, Result};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

/// Attribute kind, which fixes both the annotation value range and the
/// number of experts in its semantic group.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum AttributeType {
    SingleStateBinary,
    DualStateBinary,
    Multiclass(usize),
}

impl AttributeType {
    /// Number of experts the semantic group for this attribute holds.
    pub fn expert_count(&self) -> usize {
        match self {
            AttributeType::SingleStateBinary => 1,
            AttributeType::DualStateBinary => 2,
            AttributeType::Multiclass(k) => *k,
        }
    }

    /// Number of admissible annotation values. SS-B has two (absent = 0,
    /// present = 1) even though it has a single expert.
    pub fn num_values(&self) -> usize {
        match self {
            AttributeType::SingleStateBinary => 2,
            AttributeType::DualStateBinary => 2,
            AttributeType::Multiclass(k) => *k,
        }
    }
}

/// Number of experts for an attribute type (SS-B → 1, DS-B → 2, k-class → k).
pub fn expert_count(ty: &AttributeType) -> usize {
    ty.expert_count()
}

/// Coarse grouping of attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Supercategory {
    Intrinsic,
    Accessories,
    UpperBody,
    LowerBody,
}

/// One attribute group: a name, a type, human-readable value names and a
/// supercategory. For SS-B groups `value_names` holds only the "present"
/// state name.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttributeGroup {
    pub name: String,
    pub ty: AttributeType,
    pub value_names: Vec<String>,
    pub supercategory: Supercategory,
}

/// Ordered attribute taxonomy.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttributeSchema {
    groups: Vec<AttributeGroup>,
}

impl AttributeSchema {
    /// Validates name uniqueness, value-name arity and multiclass cardinality.
    pub fn new(groups: Vec<AttributeGroup>) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for g in &groups {
            if seen.insert(g.name.clone(), ()).is_some() {
                return Err(Error::Validation(format!("duplicate group name {}", g.name)));
            }
            let expected = match &g.ty {
                AttributeType::SingleStateBinary => 1,
                AttributeType::DualStateBinary => 2,
                AttributeType::Multiclass(k) => {
                    if *k < 3 {
                        return Err(Error::Validation(format!(
                            "multiclass group {} must have cardinality >= 3",
                            g.name
                        )));
                    }
                    *k
                }
            };
            if g.value_names.len() != expected {
                return Err(Error::Validation(format!(
                    "group {} expects {} value names, got {}",
                    g.name,
                    expected,
                    g.value_names.len()
                )));
            }
        }
        Ok(AttributeSchema { groups })
    }

    pub fn groups(&self) -> &[AttributeGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group(&self, idx: usize) -> &AttributeGroup {
        &self.groups[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Total number of experts across all groups.
    pub fn total_experts(&self) -> usize {
        self.groups.iter().map(|g| g.ty.expert_count()).sum()
    }

    pub fn group_names(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.name.clone()).collect()
    }
}

/// Per-image attribute values: one value index per schema group.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Annotation {
    /// `values[i]` is the value index of schema group `i`.
    pub values: Vec<usize>,
}

impl Annotation {
    pub fn new(values: Vec<usize>) -> Self {
        Annotation { values }
    }

    /// Check the annotation against a schema.
    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        if self.values.len() != schema.len() {
            return Err(Error::Validation(format!(
                "annotation covers {} groups, schema has {}",
                self.values.len(),
                schema.len()
            )));
        }
        for (i, (&v, g)) in self.values.iter().zip(schema.groups()).enumerate() {
            if v >= g.ty.num_values() {
                return Err(Error::Validation(format!(
                    "value {v} out of range for group {} (index {i}, {} values)",
                    g.name,
                    g.ty.num_values()
                )));
            }
        }
        Ok(())
    }
}

/// Empirical value frequencies per group; each group's row sums to one.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PriorTable {
    /// `probs[i][v]` is the empirical probability of value `v` in group `i`.
    pub probs: Vec<Vec<f64>>,
}

/// Relative value frequencies over a non-empty set of annotations.
pub fn compute_priors(annotations: &[Annotation], schema: &AttributeSchema) -> Result<PriorTable> {
    if annotations.is_empty() {
        return Err(Error::Dataset("cannot compute priors of an empty dataset".into()));
    }
    let mut counts: Vec<Vec<u64>> = schema
        .groups()
        .iter()
        .map(|g| vec![0u64; g.ty.num_values()])
        .collect();
    for ann in annotations {
        ann.validate(schema)?;
        for (i, &v) in ann.values.iter().enumerate() {
            counts[i][v] += 1;
        }
    }
    let n = annotations.len() as f64;
    let probs = counts
        .into_iter()
        .map(|row| row.into_iter().map(|c| c as f64 / n).collect())
        .collect();
    Ok(PriorTable { probs })
}

/// A single annotation defect found by [`validate_annotations`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Violation {
    /// `image` has the wrong number of values (missing or extra groups).
    WrongArity { image: usize, got: usize, expected: usize },
    /// `image` carries an out-of-range value in `group`.
    OutOfRange { image: usize, group: String, value: usize, num_values: usize },
    /// Two annotations share an image id.
    DuplicateImage { image: usize },
}

/// Report every defect in a batch of `(image_id, annotation)` pairs.
/// An empty result means the batch is consistent.
pub fn validate_annotations(
    annotations: &[(usize, Annotation)],
    schema: &AttributeSchema,
) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen = BTreeMap::new();
    for (image, ann) in annotations {
        if seen.insert(*image, ()).is_some() {
            violations.push(Violation::DuplicateImage { image: *image });
        }
        if ann.values.len() != schema.len() {
            violations.push(Violation::WrongArity {
                image: *image,
                got: ann.values.len(),
                expected: schema.len(),
            });
            continue;
        }
        for (i, &v) in ann.values.iter().enumerate() {
            let g = schema.group(i);
            if v >= g.ty.num_values() {
                violations.push(Violation::OutOfRange {
                    image: *image,
                    group: g.name.clone(),
                    value: v,
                    num_values: g.ty.num_values(),
                });
            }
        }
    }
    violations
}

fn group(
    name: &str,
    ty: AttributeType,
    value_names: &[&str],
    supercategory: Supercategory,
) -> AttributeGroup {
    AttributeGroup {
        name: name.to_string(),
        ty,
        value_names: value_names.iter().map(|s| s.to_string()).collect(),
        supercategory: supercategory,
    }
}

fn color_names(k: usize) -> Vec<String> {
    const BASE: [&str; 12] = [
        "black", "white", "red", "purple", "yellow", "gray", "blue", "green", "brown", "pink",
        "orange", "mixed",
    ];
    (0..k).map(|i| BASE[i % BASE.len()].to_string()).collect()
}

/// Market-style 12-group taxonomy (gender, hair, age, hat, backpack, bag,
/// handbag, up, upcolour, down, downcolour, clothes). The color cardinalities
/// are parameterized because their exact counts vary between annotation sets.
pub fn market_style_schema(upcolour_k: usize, downcolour_k: usize) -> Result<AttributeSchema> {
    use AttributeType::*;
    use Supercategory::*;
    let up = AttributeGroup {
        name: "upcolour".to_string(),
        ty: Multiclass(upcolour_k),
        value_names: color_names(upcolour_k),
        supercategory: UpperBody,
    };
    let down = AttributeGroup {
        name: "downcolour".to_string(),
        ty: Multiclass(downcolour_k),
        value_names: color_names(downcolour_k),
        supercategory: LowerBody,
    };
    AttributeSchema::new(vec![
        group("gender", DualStateBinary, &["male", "female"], Intrinsic),
        group("hair", DualStateBinary, &["short", "long"], Intrinsic),
        group("age", Multiclass(4), &["young", "teenager", "adult", "old"], Intrinsic),
        group("hat", SingleStateBinary, &["wearing hat"], Accessories),
        group("backpack", SingleStateBinary, &["carrying backpack"], Accessories),
        group("bag", SingleStateBinary, &["carrying bag"], Accessories),
        group("handbag", SingleStateBinary, &["carrying handbag"], Accessories),
        group("up", DualStateBinary, &["short sleeves", "long sleeves"], UpperBody),
        up,
        group("down", DualStateBinary, &["short lower", "long lower"], LowerBody),
        down,
        group("clothes", DualStateBinary, &["dress", "pants"], LowerBody),
    ])
}

/// Duke-style 10-group taxonomy (backpack, bag, handbag, hat, boots,
/// shoecolour, top, gender, downcolour, upcolour).
pub fn duke_style_schema(upcolour_k: usize, downcolour_k: usize) -> Result<AttributeSchema> {
    use AttributeType::*;
    use Supercategory::*;
    let up = AttributeGroup {
        name: "upcolour".to_string(),
        ty: Multiclass(upcolour_k),
        value_names: color_names(upcolour_k),
        supercategory: UpperBody,
    };
    let down = AttributeGroup {
        name: "downcolour".to_string(),
        ty: Multiclass(downcolour_k),
        value_names: color_names(downcolour_k),
        supercategory: LowerBody,
    };
    AttributeSchema::new(vec![
        group("backpack", SingleStateBinary, &["carrying backpack"], Accessories),
        group("bag", SingleStateBinary, &["carrying bag"], Accessories),
        group("handbag", SingleStateBinary, &["carrying handbag"], Accessories),
        group("hat", SingleStateBinary, &["wearing hat"], Accessories),
        group("boots", SingleStateBinary, &["wearing boots"], LowerBody),
        group("shoecolour", DualStateBinary, &["dark shoes", "light shoes"], LowerBody),
        group("top", DualStateBinary, &["short upper", "long upper"], UpperBody),
        group("gender", DualStateBinary, &["male", "female"], Intrinsic),
        down,
        up,
    ])
}

/// Compact 4-group schema used by unit tests and the toy gradient check:
/// one of each type plus a second SS-B.
pub fn tiny_schema() -> AttributeSchema {
    use AttributeType::*;
    use Supercategory::*;
    AttributeSchema::new(vec![
        group("hat", SingleStateBinary, &["wearing hat"], Accessories),
        group("sleeves", DualStateBinary, &["short", "long"], UpperBody),
        group("colour", Multiclass(3), &["red", "green", "blue"], LowerBody),
        group("bag", SingleStateBinary, &["carrying bag"], Accessories),
    ])
    .expect("static schema is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expert_counts_follow_type() {
        assert_eq!(expert_count(&AttributeType::SingleStateBinary), 1);
        assert_eq!(expert_count(&AttributeType::DualStateBinary), 2);
        assert_eq!(expert_count(&AttributeType::Multiclass(8)), 8);
    }

    #[test]
    fn bundled_schemas_match_expected_layout() {
        let market = market_style_schema(8, 9).unwrap();
        assert_eq!(market.len(), 12);
        assert_eq!(
            market.group_names(),
            vec![
                "gender", "hair", "age", "hat", "backpack", "bag", "handbag", "up", "upcolour",
                "down", "downcolour", "clothes"
            ]
        );
        assert_eq!(market.group(8).ty, AttributeType::Multiclass(8));
        let duke = duke_style_schema(8, 8).unwrap();
        assert_eq!(duke.len(), 10);
        assert_eq!(duke.group(0).name, "backpack");
        assert_eq!(duke.group(7).name, "gender");
    }

    #[test]
    fn multiclass_below_three_rejected() {
        let g = group(
            "bad",
            AttributeType::Multiclass(2),
            &["a", "b"],
            Supercategory::Intrinsic,
        );
        assert!(AttributeSchema::new(vec![g]).is_err());
    }

    #[test]
    fn duplicate_group_names_rejected() {
        let a = group("x", AttributeType::SingleStateBinary, &["p"], Supercategory::Intrinsic);
        let b = group("x", AttributeType::SingleStateBinary, &["p"], Supercategory::Intrinsic);
        assert!(AttributeSchema::new(vec![a, b]).is_err());
    }

    #[test]
    fn priors_count_relative_frequencies() {
        let schema = tiny_schema();
        // DS-B group "sleeves" split 2/2 across four images
        let anns: Vec<Annotation> = [(0, 0), (0, 0), (1, 1), (1, 1)]
            .iter()
            .map(|&(s, c)| Annotation::new(vec![0, s, c, 0]))
            .collect();
        let priors = compute_priors(&anns, &schema).unwrap();
        assert_eq!(priors.probs[1], vec![0.5, 0.5]);
        // degenerate: all share colour value 2
        let anns: Vec<Annotation> =
            (0..3).map(|_| Annotation::new(vec![0, 0, 2, 0])).collect();
        let priors = compute_priors(&anns, &schema).unwrap();
        assert_eq!(priors.probs[2], vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn ssb_prior_counts_presence() {
        let schema = tiny_schema();
        let mut anns = Vec::new();
        for i in 0..10 {
            let hat = if i < 3 { 1 } else { 0 };
            anns.push(Annotation::new(vec![hat, 0, 0, 0]));
        }
        let priors = compute_priors(&anns, &schema).unwrap();
        // index 0 = absent, index 1 = present
        assert!((priors.probs[0][1] - 0.3).abs() < 1e-12);
        assert!((priors.probs[0][0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn priors_rows_sum_to_one() {
        let schema = market_style_schema(5, 6).unwrap();
        let mut anns = Vec::new();
        for i in 0..17usize {
            let values = schema
                .groups()
                .iter()
                .enumerate()
                .map(|(j, g)| (i * 7 + j) % g.ty.num_values())
                .collect();
            anns.push(Annotation::new(values));
        }
        let priors = compute_priors(&anns, &schema).unwrap();
        for row in &priors.probs {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_annotations_error() {
        assert!(matches!(
            compute_priors(&[], &tiny_schema()),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn violations_are_reported_not_thrown() {
        let schema = tiny_schema();
        let batch = vec![
            (0, Annotation::new(vec![0, 1, 2, 0])),             // fine
            (1, Annotation::new(vec![0, 1, 5, 0])),             // colour out of range
            (2, Annotation::new(vec![0, 1, 2])),                // missing group
            (0, Annotation::new(vec![1, 0, 0, 1])),             // duplicate id
        ];
        let violations = validate_annotations(&batch, &schema);
        assert_eq!(violations.len(), 3);
        assert!(violations.iter().any(|v| matches!(
            v,
            Violation::OutOfRange { image: 1, value: 5, .. }
        )));
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::WrongArity { image: 2, .. })));
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::DuplicateImage { image: 0 })));
    }

    #[test]
    fn consistent_batch_is_clean() {
        let schema = tiny_schema();
        let batch = vec![
            (0, Annotation::new(vec![1, 0, 1, 0])),
            (1, Annotation::new(vec![0, 1, 2, 1])),
        ];
        assert!(validate_annotations(&batch, &schema).is_empty());
    }
}
