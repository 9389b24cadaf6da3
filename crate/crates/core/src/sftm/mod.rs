//! Sparse fine-tuning masks: two-phase learning, top-K support selection,
//! extraction, combination and additive composition.

mod io;

use serde::{Deserialize, Serialize};

use crate::adapters::{adapter_param_count, AdapterConfig};
use crate::encoder::params::is_score_param;
use crate::encoder::{EncoderConfig, ParamStore, ScoreHead};
use crate::error::{Error, Result};
use crate::training::{
    mask_eligible, train_mlm, train_ranking, MlmData, MlmEval, Modules, RankingData, Selector,
    TrainConfig, TrainReport, ValidationSet,
};

pub use io::MaskFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskRole {
    #[serde(rename = "LM")]
    Language,
    #[serde(rename = "RM")]
    Ranking,
}

/// Sparse delta over a flat parameter vector of length `dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseMask {
    pub dim: usize,
    /// Budget the mask was learned under.
    pub k: usize,
    pub role: MaskRole,
    /// Language code for LMs, `"rank"` for RMs.
    pub tag: String,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMask {
    pub fn empty(dim: usize, k: usize, role: MaskRole, tag: impl Into<String>) -> Self {
        Self {
            dim,
            k,
            role,
            tag: tag.into(),
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.len() != self.values.len() {
            return Err(Error::contract("mask indices and values differ in length"));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("mask indices must be strictly increasing"));
        }
        if self.indices.last().is_some_and(|&i| i >= self.dim) {
            return Err(Error::contract(format!(
                "mask index out of range {}",
                self.dim
            )));
        }
        if self.indices.len() > self.k {
            return Err(Error::contract(format!(
                "mask holds {} entries, budget is {}",
                self.indices.len(),
                self.k
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("mask values must be finite"));
        }
        Ok(())
    }

    /// Dense delta vector.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }
}

/// Per-coordinate mask eligibility for a parameter store.
pub fn eligibility(params: &ParamStore, eligible: impl Fn(&str) -> bool) -> Vec<bool> {
    params
        .layout()
        .into_iter()
        .flat_map(|(name, range)| std::iter::repeat_n(eligible(&name), range.len()))
        .collect()
}

/// The `k` eligible coordinates with the largest `|θ¹ − θ⁰|`, ties broken
/// by ascending index; returned in ascending order.
pub fn select_support(
    theta0: &[f64],
    theta1: &[f64],
    k: usize,
    eligible: Option<&[bool]>,
) -> Result<Vec<usize>> {
    if theta0.len() != theta1.len() {
        return Err(Error::contract(format!(
            "parameter vectors differ in dimension: {} vs {}",
            theta0.len(),
            theta1.len()
        )));
    }
    if eligible.is_some_and(|e| e.len() != theta0.len()) {
        return Err(Error::contract(
            "eligibility vector has the wrong dimension",
        ));
    }
    if k > theta0.len() {
        return Err(Error::contract(format!(
            "K = {k} exceeds dimension {}",
            theta0.len()
        )));
    }
    let mut candidates: Vec<(f64, usize)> = (0..theta0.len())
        .filter(|&i| eligible.is_none_or(|e| e[i]))
        .map(|i| ((theta1[i] - theta0[i]).abs(), i))
        .collect();
    if candidates.iter().any(|(d, _)| d.is_nan()) {
        return Err(Error::contract("parameter change is not a number"));
    }
    let take = k.min(candidates.len());
    let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if take < candidates.len() {
        candidates.select_nth_unstable_by(take, order);
        candidates.truncate(take);
    }
    let mut support: Vec<usize> = candidates.into_iter().map(|(_, i)| i).collect();
    support.sort_unstable();
    Ok(support)
}

/// A delta `d` with `base + d == target` exactly, found by nudging the
/// rounded difference one ulp at a time. `base + d` is monotone in `d`, so
/// the walk cannot cycle; it fails only when no such `d` exists, which the
/// trainer rules out by keeping parameters as `origin + delta`.
fn exact_delta(base: f64, target: f64) -> Result<f64> {
    let mut d = target - base;
    let mut dir = 0i8;
    for _ in 0..1024 {
        let s = base + d;
        if s == target {
            return Ok(d);
        }
        let step = if s < target { 1 } else { -1 };
        if dir != 0 && step != dir {
            break;
        }
        dir = step;
        d = if step > 0 { d.next_up() } else { d.next_down() };
    }
    Err(Error::contract(format!(
        "no exact delta from {base} to {target}"
    )))
}

/// `θ² − θ⁰` on `support`. Each stored delta satisfies `θ⁰ᵢ + δᵢ == θ²ᵢ`
/// exactly; zero deltas are pruned.
pub fn extract_mask(
    theta2: &[f64],
    theta0: &[f64],
    support: &[usize],
    k: usize,
    role: MaskRole,
    tag: &str,
) -> Result<SparseMask> {
    if theta0.len() != theta2.len() {
        return Err(Error::contract("parameter vectors differ in dimension"));
    }
    if support.len() > k {
        return Err(Error::contract(format!(
            "support of {} exceeds K = {k}",
            support.len()
        )));
    }
    let mut mask = SparseMask::empty(theta0.len(), k, role, tag);
    for &i in support {
        if i >= theta0.len() {
            return Err(Error::contract(format!("support index {i} out of range")));
        }
        if theta2[i] != theta0[i] {
            mask.indices.push(i);
            mask.values.push(exact_delta(theta0[i], theta2[i])?);
        }
    }
    mask.validate()?;
    Ok(mask)
}

/// Adds `mask` onto `theta` in place.
pub fn apply_mask(theta: &mut [f64], mask: &SparseMask) -> Result<()> {
    if mask.dim != theta.len() {
        return Err(Error::contract(format!(
            "mask dimension {} does not match parameters {}",
            mask.dim,
            theta.len()
        )));
    }
    mask.validate()?;
    for (&i, &v) in mask.indices.iter().zip(&mask.values) {
        theta[i] += v;
    }
    Ok(())
}

/// `θ⁰ + LM + RM`, adding the language mask first so that a ranking mask
/// extracted on top of `θ⁰ + LM` reproduces its training parameters exactly.
pub fn compose(theta0: &[f64], rm: &SparseMask, lm: &SparseMask) -> Result<Vec<f64>> {
    let mut theta = theta0.to_vec();
    apply_mask(&mut theta, lm)?;
    apply_mask(&mut theta, rm)?;
    Ok(theta)
}

/// Sparse sum over the union of supports.
pub fn combine_masks(a: &SparseMask, b: &SparseMask) -> Result<SparseMask> {
    if a.dim != b.dim {
        return Err(Error::contract("masks differ in dimension"));
    }
    if a.role != b.role {
        return Err(Error::contract(
            "cannot combine a language mask with a ranking mask",
        ));
    }
    let mut tags = [a.tag.as_str(), b.tag.as_str()];
    tags.sort_unstable();
    let tag = if tags[0] == tags[1] {
        tags[0].to_string()
    } else {
        format!("{}+{}", tags[0], tags[1])
    };
    let mut out = SparseMask::empty(a.dim, a.k + b.k, a.role, tag);
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let ai = a.indices.get(i).copied().unwrap_or(usize::MAX);
        let bj = b.indices.get(j).copied().unwrap_or(usize::MAX);
        let (idx, v) = match ai.cmp(&bj) {
            std::cmp::Ordering::Less => {
                i += 1;
                (ai, a.values[i - 1])
            }
            std::cmp::Ordering::Greater => {
                j += 1;
                (bj, b.values[j - 1])
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
                (ai, a.values[i - 1] + b.values[j - 1])
            }
        };
        out.indices.push(idx);
        out.values.push(v);
    }
    Ok(out)
}

/// Mask budget equal to the parameter count of adapters with reduction
/// factor `r` on an `L`-layer, width-`h` encoder.
pub fn k_from_reduction_factor(r: usize, num_layers: usize, hidden: usize) -> Result<usize> {
    let cfg = AdapterConfig::new(r, hidden)?;
    Ok(adapter_param_count(&cfg, num_layers, hidden))
}

/// Applies masks in order to a copy of `base`.
pub fn compose_params(base: &ParamStore, masks: &[&SparseMask]) -> Result<ParamStore> {
    let mut theta = base.flatten();
    for m in masks {
        apply_mask(&mut theta, m)?;
    }
    base.unflatten(&theta)
}

/// Which named parameters may enter a mask. Task heads never do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eligibility {
    /// Every encoder parameter, word embeddings included.
    #[default]
    Encoder,
    /// Encoder parameters except the word-embedding table.
    EncoderBody,
    /// The embedding layer only.
    Embeddings,
}

impl Eligibility {
    pub fn allows(self, name: &str) -> bool {
        match self {
            Eligibility::Encoder => mask_eligible(name),
            Eligibility::EncoderBody => mask_eligible(name) && name != "embeddings.word",
            Eligibility::Embeddings => mask_eligible(name) && name.starts_with("embeddings."),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub k: usize,
    pub phase1: TrainConfig,
    pub phase2: TrainConfig,
    #[serde(default)]
    pub eligibility: Eligibility,
}

#[derive(Debug, Clone)]
pub struct MaskOutcome {
    pub mask: SparseMask,
    /// Scoring head after phase 2 (ranking masks only).
    pub head: Option<ScoreHead>,
    pub phase1: TrainReport,
    pub phase2: TrainReport,
}

fn two_phase(
    base: &ParamStore,
    k: usize,
    policy: Eligibility,
    role: MaskRole,
    tag: &str,
    head_full: fn(&str) -> bool,
    run: impl Fn(ParamStore, &Selector, usize) -> Result<(Modules, TrainReport)>,
) -> Result<MaskOutcome> {
    let eligible = eligibility(base, |n| policy.allows(n));
    let eligible_count = eligible.iter().filter(|&&e| e).count();
    if k > eligible_count {
        return Err(Error::contract(format!(
            "K = {k} exceeds the {eligible_count} mask-eligible coordinates"
        )));
    }
    let theta0 = base.flatten();

    let phase1_sel = Selector::by_name(base, |n| policy.allows(n) || head_full(n));
    let (m1, phase1) = run(base.clone(), &phase1_sel, 1)?;
    let theta1 = m1.params.flatten();
    let support = select_support(&theta0, &theta1, k, Some(&eligible))?;
    log::info!(
        "selected {} of {} eligible coordinates",
        support.len(),
        eligible_count
    );

    let phase2_sel = Selector::support(base, &support, head_full)?;
    let (m2, phase2) = run(base.clone(), &phase2_sel, 2)?;
    let theta2 = m2.params.flatten();
    let mask = extract_mask(&theta2, &theta0, &support, k, role, tag)?;
    let head = if role == MaskRole::Ranking {
        Some(ScoreHead::from_params(&m2.params)?)
    } else {
        None
    };
    Ok(MaskOutcome {
        mask,
        head,
        phase1,
        phase2,
    })
}

fn no_head(_: &str) -> bool {
    false
}

/// Language mask from masked language modeling on `data`, relative to `base`.
pub fn learn_language_mask(
    config: &EncoderConfig,
    base: &ParamStore,
    data: &MlmData,
    sft: &SftConfig,
    eval: Option<&MlmEval>,
    tag: &str,
) -> Result<MaskOutcome> {
    two_phase(
        base,
        sft.k,
        sft.eligibility,
        MaskRole::Language,
        tag,
        no_head,
        |params, sel, phase| {
            let train = if phase == 1 { &sft.phase1 } else { &sft.phase2 };
            train_mlm(config, Modules::base(params), sel, data, train, eval)
        },
    )
}

/// Ranking mask relative to `base` (typically `θ⁰ + LM_src`). The scoring
/// head trains fully in both phases and is returned with the mask.
pub fn learn_ranking_mask(
    config: &EncoderConfig,
    base: &ParamStore,
    data: &RankingData,
    sft: &SftConfig,
    validation: Option<&ValidationSet>,
) -> Result<MaskOutcome> {
    two_phase(
        base,
        sft.k,
        sft.eligibility,
        MaskRole::Ranking,
        "rank",
        is_score_param,
        |params, sel, phase| {
            let train = if phase == 1 { &sft.phase1 } else { &sft.phase2 };
            train_ranking(config, Modules::base(params), sel, data, train, validation)
        },
    )
}
