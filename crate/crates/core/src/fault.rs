//! Single-bit flips in fp32, int8 and int32 parameters and reproducible
//! fault plans.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::campaign::required_sample_size;
use crate::error::{Error, Result};
use crate::model::{ModelGraph, ParamKind, PatchedSet};

/// Name of the generator recorded in plans and campaign metadata.
pub const RNG_IDENTITY: &str = "rand_chacha::ChaCha8Rng seed_from_u64(seed), set_stream(group)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    F32,
    I8,
    I32,
}

impl Domain {
    pub fn width(self) -> u32 {
        match self {
            Domain::F32 | Domain::I32 => 32,
            Domain::I8 => 8,
        }
    }

    /// Hex rendering of a raw bit pattern at this domain's width.
    pub fn hex(self, bits: u32) -> String {
        match self {
            Domain::I8 => format!("{:02x}", bits & 0xff),
            _ => format!("{bits:08x}"),
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::F32 => "f32",
            Domain::I8 => "i8",
            Domain::I32 => "i32",
        })
    }
}

pub fn flip_bit_f32(value: f32, bit: u32) -> Result<f32> {
    if bit > 31 {
        return Err(Error::BitOutOfRange { bit, width: 32 });
    }
    Ok(f32::from_bits(value.to_bits() ^ (1 << bit)))
}

/// Flips `bit` of `value` viewed as a two's-complement integer of `width`
/// bits (8 or 32).
pub fn flip_bit_int(value: i32, bit: u32, width: u32) -> Result<i32> {
    match width {
        8 => {
            if bit >= 8 {
                return Err(Error::BitOutOfRange { bit, width });
            }
            let v = i8::try_from(value).map_err(|_| Error::ValueOutOfRange {
                value: value as i64,
                width,
            })?;
            Ok((v ^ (1u8 << bit) as i8) as i32)
        }
        32 => {
            if bit >= 32 {
                return Err(Error::BitOutOfRange { bit, width });
            }
            Ok(value ^ (1u32 << bit) as i32)
        }
        _ => Err(Error::InvalidArgument(format!("integer width {width} is not 8 or 32"))),
    }
}

/// One planned bit flip.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultSpec {
    pub param_set: String,
    pub element: usize,
    pub bit: u32,
    pub domain: Domain,
}

/// Restores a faulted element to its original bit pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UndoToken {
    pub param_set: String,
    pub element: usize,
    pub domain: Domain,
    pub original_bits: u32,
    pub new_bits: u32,
}

/// Parameter storage that can take a fault in place.
pub trait FaultTarget {
    fn apply_fault(&mut self, spec: &FaultSpec) -> Result<UndoToken>;
    fn undo(&mut self, token: UndoToken) -> Result<()>;
}

fn check_element(set: &str, element: usize, len: usize) -> Result<()> {
    if element >= len {
        return Err(Error::IndexOutOfBounds {
            set: set.to_string(),
            index: element,
            len,
        });
    }
    Ok(())
}

fn flip_f32_slot(values: &mut [f32], spec: &FaultSpec) -> Result<UndoToken> {
    if spec.domain != Domain::F32 {
        return Err(Error::InvalidArgument(format!(
            "set `{}` holds f32 values, fault targets {}",
            spec.param_set, spec.domain
        )));
    }
    check_element(&spec.param_set, spec.element, values.len())?;
    let slot = &mut values[spec.element];
    let original_bits = slot.to_bits();
    *slot = flip_bit_f32(*slot, spec.bit)?;
    Ok(UndoToken {
        param_set: spec.param_set.clone(),
        element: spec.element,
        domain: Domain::F32,
        original_bits,
        new_bits: slot.to_bits(),
    })
}

fn restore_f32_slot(values: &mut [f32], token: &UndoToken) -> Result<()> {
    check_element(&token.param_set, token.element, values.len())?;
    values[token.element] = f32::from_bits(token.original_bits);
    Ok(())
}

impl FaultTarget for ModelGraph {
    fn apply_fault(&mut self, spec: &FaultSpec) -> Result<UndoToken> {
        let idx = self
            .param_index(&spec.param_set)
            .ok_or_else(|| Error::UnknownParamSet(spec.param_set.clone()))?;
        flip_f32_slot(&mut self.params_mut()[idx].values, spec)
    }

    fn undo(&mut self, token: UndoToken) -> Result<()> {
        let idx = self
            .param_index(&token.param_set)
            .ok_or_else(|| Error::UnknownParamSet(token.param_set.clone()))?;
        restore_f32_slot(&mut self.params_mut()[idx].values, &token)
    }
}

impl FaultTarget for PatchedSet<'_> {
    fn apply_fault(&mut self, spec: &FaultSpec) -> Result<UndoToken> {
        if spec.param_set != self.set_id() {
            return Err(Error::UnknownParamSet(spec.param_set.clone()));
        }
        flip_f32_slot(self.values_mut(), spec)
    }

    fn undo(&mut self, token: UndoToken) -> Result<()> {
        if token.param_set != self.set_id() {
            return Err(Error::UnknownParamSet(token.param_set.clone()));
        }
        restore_f32_slot(self.values_mut(), &token)
    }
}

/// A parameter set as seen by the planner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSet {
    pub id: String,
    pub layer: String,
    pub kind: ParamKind,
    pub len: usize,
    pub domain: Domain,
}

/// What one sample is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationUnit {
    /// Elements of one set at one bit position.
    #[default]
    SetBit,
    /// Elements times target bits of one set, drawn jointly.
    Set,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Sizing {
    /// Closed-form sample size for the population of each unit.
    Statistical {
        error_margin: f64,
        confidence: f64,
        failure_prob: f64,
    },
    /// A fixed count per unit, capped at the population.
    Fixed { n: u64 },
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    /// Bit positions to target. `None` targets every bit of each set's width;
    /// otherwise positions beyond a set's width are skipped for that set.
    pub bits: Option<Vec<u32>>,
    pub sizing: Sizing,
    #[serde(default)]
    pub unit: PopulationUnit,
    /// Restricts the plan to these set ids when present.
    #[serde(default)]
    pub sets: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultGroup {
    pub set_id: String,
    pub layer: String,
    pub kind: ParamKind,
    pub domain: Domain,
    pub bit: u32,
    /// Size of the population the group's elements were drawn from.
    pub population: u64,
    /// Sorted, distinct element indices.
    pub elements: Vec<usize>,
}

impl FaultGroup {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub seed: u64,
    pub rng: String,
    pub model_hash: String,
    pub config: PlanConfig,
    pub groups: Vec<FaultGroup>,
}

impl FaultPlan {
    pub fn len(&self) -> usize {
        self.groups.iter().map(FaultGroup::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Specs in plan order: groups in order, elements ascending.
    pub fn specs(&self) -> impl Iterator<Item = FaultSpec> + '_ {
        self.groups.iter().flat_map(|g| {
            g.elements.iter().map(move |&element| FaultSpec {
                param_set: g.set_id.clone(),
                element,
                bit: g.bit,
                domain: g.domain,
            })
        })
    }

    /// Group index of each spec, in plan order.
    pub fn group_of_spec(&self) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(g, grp)| std::iter::repeat_n(g, grp.len()))
            .collect()
    }
}

fn sample_count(sizing: &Sizing, population: u64) -> Result<u64> {
    Ok(match *sizing {
        Sizing::Statistical {
            error_margin,
            confidence,
            failure_prob,
        } => required_sample_size(Some(population), error_margin, confidence, failure_prob)?,
        Sizing::Fixed { n } => n,
        Sizing::Exhaustive => population,
    }
    .min(population))
}

fn draw(seed: u64, stream: u64, population: u64, n: u64) -> Vec<usize> {
    if n >= population {
        return (0..population as usize).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut picked = rand::seq::index::sample(&mut rng, population as usize, n as usize).into_vec();
    picked.sort_unstable();
    picked
}

/// Draws distinct element indices per unit uniformly without replacement.
/// Each unit uses its own ChaCha8 stream, so the plan depends only on the
/// target sets, the configuration and `seed`.
pub fn gen_fault_plan(
    sets: &[TargetSet],
    model_hash: &str,
    config: &PlanConfig,
    seed: u64,
) -> Result<FaultPlan> {
    if let Some(bits) = &config.bits {
        if bits.is_empty() {
            return Err(Error::Empty("bit list"));
        }
        let widest = sets.iter().map(|s| s.domain.width()).max().unwrap_or(32);
        if let Some(&bad) = bits.iter().find(|&&b| b >= widest) {
            return Err(Error::BitOutOfRange { bit: bad, width: widest });
        }
    }
    if let Some(wanted) = &config.sets {
        if let Some(missing) = wanted.iter().find(|w| !sets.iter().any(|s| &s.id == *w)) {
            return Err(Error::UnknownParamSet(missing.clone()));
        }
    }
    let mut groups = Vec::new();
    let mut stream = 0u64;
    for set in sets {
        if let Some(wanted) = &config.sets {
            if !wanted.contains(&set.id) {
                continue;
            }
        }
        let width = set.domain.width();
        let mut bits: Vec<u32> = match &config.bits {
            Some(b) => b.iter().copied().filter(|&b| b < width).collect(),
            None => (0..width).collect(),
        };
        bits.sort_unstable();
        bits.dedup();
        let group = |bit, population, elements| FaultGroup {
            set_id: set.id.clone(),
            layer: set.layer.clone(),
            kind: set.kind,
            domain: set.domain,
            bit,
            population,
            elements,
        };
        match config.unit {
            PopulationUnit::SetBit => {
                for &bit in &bits {
                    let population = set.len as u64;
                    let n = sample_count(&config.sizing, population)?;
                    groups.push(group(bit, population, draw(seed, stream, population, n)));
                    stream += 1;
                }
            }
            PopulationUnit::Set => {
                let population = set.len as u64 * bits.len() as u64;
                let n = sample_count(&config.sizing, population)?;
                let joint = draw(seed, stream, population, n);
                stream += 1;
                for (b, &bit) in bits.iter().enumerate() {
                    let elements: Vec<usize> = joint
                        .iter()
                        .filter(|&&k| k / set.len == b)
                        .map(|&k| k % set.len)
                        .collect();
                    groups.push(group(bit, population, elements));
                }
            }
        }
    }
    Ok(FaultPlan {
        seed,
        rng: RNG_IDENTITY.to_string(),
        model_hash: model_hash.to_string(),
        config: config.clone(),
        groups,
    })
}

/// Target sets of an fp32 model: every parameter set in enumeration order.
pub fn f32_target_sets(model: &ModelGraph) -> Vec<TargetSet> {
    model
        .params()
        .iter()
        .map(|p| TargetSet {
            id: p.id.clone(),
            layer: p.layer.clone(),
            kind: p.kind,
            len: p.len(),
            domain: Domain::F32,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_unet;
    use crate::tensor::ActivationKind;
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn f32_examples() {
        assert_eq!(flip_bit_f32(1.0, 30).unwrap(), f32::INFINITY);
        assert_eq!(flip_bit_f32(-1.0, 30).unwrap(), f32::NEG_INFINITY);
        assert!(flip_bit_f32(1.5, 30).unwrap().is_nan());
        assert_eq!(flip_bit_f32(1.0, 31).unwrap(), -1.0);
        assert!(matches!(flip_bit_f32(1.0, 32), Err(Error::BitOutOfRange { bit: 32, width: 32 })));
    }

    #[test]
    fn int_examples() {
        assert_eq!(flip_bit_int(1, 7, 8).unwrap(), -127);
        assert_eq!(flip_bit_int(0, 0, 8).unwrap(), 1);
        assert_eq!(flip_bit_int(-1, 31, 32).unwrap(), i32::MAX);
        assert_eq!(flip_bit_int(-128, 7, 8).unwrap(), 0);
        assert!(flip_bit_int(0, 8, 8).is_err());
        assert!(flip_bit_int(200, 0, 8).is_err());
        assert!(flip_bit_int(0, 0, 16).is_err());
    }

    proptest! {
        #[test]
        fn f32_flip_is_involution(bits in any::<u32>(), bit in 0u32..32) {
            let v = f32::from_bits(bits);
            let twice = flip_bit_f32(flip_bit_f32(v, bit).unwrap(), bit).unwrap();
            prop_assert_eq!(twice.to_bits(), bits);
        }

        #[test]
        fn int_flip_is_involution(v in any::<i8>(), w in any::<i32>(), b8 in 0u32..8, b32 in 0u32..32) {
            prop_assert_eq!(flip_bit_int(flip_bit_int(v as i32, b8, 8).unwrap(), b8, 8).unwrap(), v as i32);
            prop_assert_eq!(flip_bit_int(flip_bit_int(w, b32, 32).unwrap(), b32, 32).unwrap(), w);
        }

        #[test]
        fn exponent_msb_law(x in -2.0f32..2.0) {
            prop_assume!(x.abs() < 2.0);
            prop_assert_eq!(x.to_bits() >> 30 & 1, 0);
            let y = flip_bit_f32(x, 30).unwrap();
            if x != 0.0 {
                prop_assert!(!y.is_finite() || y.abs() > 2.0);
            }
            if x.abs() == 1.0 {
                prop_assert!(y.is_infinite() && y.signum() == x.signum());
            } else if x.abs() > 1.0 {
                prop_assert!(y.is_nan());
            }
        }
    }

    fn sets() -> Vec<TargetSet> {
        f32_target_sets(&build_unet(1, 1, [4, 4, 1], 2, ActivationKind::Relu).unwrap())
    }

    #[test]
    fn apply_undo_restores_bits_and_copies_are_isolated() {
        let base = build_unet(1, 1, [4, 4, 1], 2, ActivationKind::Relu).unwrap();
        let mut m = base.clone();
        let spec = FaultSpec {
            param_set: "enc0_bn1/gamma".into(),
            element: 0,
            bit: 30,
            domain: Domain::F32,
        };
        let tok = m.apply_fault(&spec).unwrap();
        assert_eq!(m.param("enc0_bn1/gamma").unwrap().values[0], f32::INFINITY);
        m.undo(tok).unwrap();
        assert_eq!(m, base);

        let t1 = m.apply_fault(&spec).unwrap();
        let t2 = m.apply_fault(&spec).unwrap();
        assert_eq!(t2.new_bits, t1.original_bits);

        let mut patch = PatchedSet::new(&base, "enc0_bn1/gamma").unwrap();
        patch.apply_fault(&spec).unwrap();
        assert_eq!(base.param("enc0_bn1/gamma").unwrap().values[0], 1.0);

        let oob = FaultSpec { element: 99, ..spec.clone() };
        assert!(matches!(base.clone().apply_fault(&oob), Err(Error::IndexOutOfBounds { .. })));
        let unknown = FaultSpec { param_set: "nope".into(), ..spec };
        assert!(matches!(base.clone().apply_fault(&unknown), Err(Error::UnknownParamSet(_))));
    }

    #[test]
    fn plan_is_seeded_and_distinct() {
        let cfg = PlanConfig {
            bits: Some(vec![30, 31, 0]),
            sizing: Sizing::Fixed { n: 3 },
            unit: PopulationUnit::SetBit,
            sets: None,
        };
        let a = gen_fault_plan(&sets(), "h", &cfg, 7).unwrap();
        let b = gen_fault_plan(&sets(), "h", &cfg, 7).unwrap();
        let c = gen_fault_plan(&sets(), "h", &cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for g in &a.groups {
            assert!(g.elements.windows(2).all(|w| w[0] < w[1]), "{}", g.set_id);
            assert_eq!(g.len() as u64, g.population.min(3));
        }
        let specs: Vec<_> = a.specs().collect();
        let mut uniq = specs.clone();
        uniq.sort_by(|x, y| (&x.param_set, x.element, x.bit).cmp(&(&y.param_set, y.element, y.bit)));
        uniq.dedup();
        assert_eq!(uniq.len(), specs.len());
        assert_eq!(a.len(), specs.len());
    }

    #[test]
    fn full_count_is_exhaustive() {
        let cfg = PlanConfig {
            bits: Some(vec![30]),
            sizing: Sizing::Fixed { n: 1_000_000 },
            unit: PopulationUnit::SetBit,
            sets: None,
        };
        let plan = gen_fault_plan(&sets(), "h", &cfg, 1).unwrap();
        let ex = gen_fault_plan(
            &sets(),
            "h",
            &PlanConfig {
                sizing: Sizing::Exhaustive,
                ..cfg
            },
            99,
        )
        .unwrap();
        assert_eq!(plan.groups, ex.groups);
        for (g, s) in plan.groups.iter().zip(sets()) {
            assert_eq!(g.elements, (0..s.len).collect::<Vec<_>>());
        }
    }

    #[test]
    fn joint_set_unit_splits_by_bit() {
        let cfg = PlanConfig {
            bits: Some(vec![1, 2]),
            sizing: Sizing::Fixed { n: 5 },
            unit: PopulationUnit::Set,
            sets: Some(vec!["enc0_conv1/kernel".into()]),
        };
        let plan = gen_fault_plan(&sets(), "h", &cfg, 3).unwrap();
        assert_eq!(plan.groups.len(), 2);
        assert_eq!(plan.len(), 5);
        assert!(plan.groups.iter().all(|g| g.population == 18));
    }

    #[test]
    fn plan_errors() {
        let mut cfg = PlanConfig {
            bits: Some(vec![]),
            sizing: Sizing::Exhaustive,
            unit: PopulationUnit::SetBit,
            sets: None,
        };
        assert!(matches!(gen_fault_plan(&sets(), "h", &cfg, 0), Err(Error::Empty(_))));
        cfg.bits = Some(vec![32]);
        assert!(matches!(gen_fault_plan(&sets(), "h", &cfg, 0), Err(Error::BitOutOfRange { .. })));
        cfg.bits = None;
        cfg.sets = Some(vec!["missing/kernel".into()]);
        assert!(matches!(gen_fault_plan(&sets(), "h", &cfg, 0), Err(Error::UnknownParamSet(_))));
    }

    #[test]
    fn sampled_indices_are_uniform() {
        // Draw 3 of 10 under 2000 seeds; each index should appear 600 times.
        let set = vec![TargetSet {
            id: "s/kernel".into(),
            layer: "s".into(),
            kind: ParamKind::ConvKernel,
            len: 10,
            domain: Domain::F32,
        }];
        let cfg = PlanConfig {
            bits: Some(vec![0]),
            sizing: Sizing::Fixed { n: 3 },
            unit: PopulationUnit::SetBit,
            sets: None,
        };
        let mut counts = [0u64; 10];
        let seeds = 2000u64;
        for seed in 0..seeds {
            for e in &gen_fault_plan(&set, "h", &cfg, seed).unwrap().groups[0].elements {
                counts[*e] += 1;
            }
        }
        let expected = (seeds * 3) as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(9.0).unwrap().cdf(chi2);
        assert!(p > 0.001, "chi2 {chi2} p {p} counts {counts:?}");
    }
}
