//! Training loops: masked language modeling for language adapters and
//! masks, pointwise binary cross-entropy for ranking adapters, masks and
//! the fully fine-tuned baseline.

mod data;
mod optim;

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterParams, AdapterStack, Plugins};
use crate::encoder::params::{is_head_param, is_score_param};
use crate::encoder::{model, BoundParams, EncoderConfig, ParamStore, TokenSequence};
use crate::error::{Error, Result};
use crate::eval::average_precision;
use crate::tensor::{concat_rows, Tape, Tensor, Var};

pub use data::{
    mask_tokens, tokenize_corpus, MaskedExample, MlmData, MlmEval, RankingData, RankingExample,
    RankingQuery, ValidationQuery, ValidationSet, MASK_RATE,
};
pub use optim::{lr_at, Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup: usize,
    /// Validation interval in steps; 0 validates only after the last step.
    pub eval_every: usize,
    pub seed: u64,
    pub max_seq_len: usize,
    pub adam: AdamConfig,
}

impl TrainConfig {
    /// Language adapter / language mask schedule.
    pub fn desk_language() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            steps: 3000,
            warmup: 0,
            eval_every: 500,
            seed: 0,
            max_seq_len: 128,
            adam: AdamConfig::default(),
        }
    }

    /// Ranking adapter / ranking mask / full fine-tuning schedule.
    pub fn desk_ranking() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            steps: 2000,
            warmup: 200,
            eval_every: 200,
            seed: 0,
            max_seq_len: 128,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.warmup > self.steps {
            return Err(Error::Config(format!(
                "warmup ({}) exceeds total steps ({})",
                self.warmup, self.steps
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if self.max_seq_len < 3 {
            return Err(Error::Config("max_seq_len must be at least 3".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_at(self.lr, self.warmup, step)
    }
}

/// How one base tensor takes part in training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainable {
    Frozen,
    Full,
    /// Row-major offsets within the tensor, strictly increasing.
    Coords(Vec<usize>),
}

/// Which parameters an optimizer may touch: per base tensor, plus the
/// language and ranking adapters as wholes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selector {
    pub base: Vec<Trainable>,
    pub language: bool,
    pub ranking: bool,
}

impl Selector {
    pub fn frozen(params: &ParamStore) -> Self {
        Self::by_name(params, |_| false)
    }

    pub fn all(params: &ParamStore) -> Self {
        Self::by_name(params, |_| true)
    }

    pub fn by_name(params: &ParamStore, full: impl Fn(&str) -> bool) -> Self {
        Self {
            base: params
                .iter()
                .map(|(n, _)| {
                    if full(n) {
                        Trainable::Full
                    } else {
                        Trainable::Frozen
                    }
                })
                .collect(),
            language: false,
            ranking: false,
        }
    }

    /// The scoring head alone.
    pub fn score_head(params: &ParamStore) -> Self {
        Self::by_name(params, is_score_param)
    }

    /// Flat coordinates in `support` (sorted, unique), plus every tensor for
    /// which `full` holds.
    pub fn support(
        params: &ParamStore,
        support: &[usize],
        full: impl Fn(&str) -> bool,
    ) -> Result<Self> {
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract(
                "support indices must be strictly increasing",
            ));
        }
        let dim = params.num_coords();
        if let Some(&last) = support.last() {
            if last >= dim {
                return Err(Error::contract(format!(
                    "support index {last} out of range {dim}"
                )));
            }
        }
        let mut base = Vec::with_capacity(params.len());
        let mut cursor = 0;
        for (name, range) in params.layout() {
            let start = cursor;
            while cursor < support.len() && support[cursor] < range.end {
                cursor += 1;
            }
            base.push(if full(&name) {
                Trainable::Full
            } else if cursor == start {
                Trainable::Frozen
            } else {
                Trainable::Coords(
                    support[start..cursor]
                        .iter()
                        .map(|i| i - range.start)
                        .collect(),
                )
            });
        }
        Ok(Self {
            base,
            language: false,
            ranking: false,
        })
    }

    pub fn with_language(self, language: bool) -> Self {
        Self { language, ..self }
    }

    pub fn with_ranking(self, ranking: bool) -> Self {
        Self { ranking, ..self }
    }

    pub fn is_trainable(&self, tensor: usize) -> bool {
        !matches!(self.base[tensor], Trainable::Frozen)
    }
}

/// True for tensors that may enter a sparse mask: the encoder body,
/// embeddings included, but neither task head.
pub fn mask_eligible(name: &str) -> bool {
    !is_head_param(name)
}

/// The parameter sets a training run may update.
#[derive(Debug, Clone, PartialEq)]
pub struct Modules {
    pub params: ParamStore,
    pub language: Option<AdapterParams>,
    pub ranking: Option<AdapterParams>,
}

impl Modules {
    pub fn base(params: ParamStore) -> Self {
        Self {
            params,
            language: None,
            ranking: None,
        }
    }

    fn stack(&self) -> Option<AdapterStack<'_>> {
        match (&self.language, &self.ranking) {
            (Some(la), Some(ra)) => Some(AdapterStack::stacked(la, ra)),
            (Some(la), None) => Some(AdapterStack::language(la)),
            (None, Some(ra)) => Some(AdapterStack {
                language: crate::adapters::LanguageChoice::None,
                ranking: Some(ra),
                drop_first_n: 0,
                invertible: false,
            }),
            (None, None) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<LogRecord>,
    /// Step and metric of the returned checkpoint, when validation ran.
    pub best: Option<(usize, f64)>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }

    pub fn validations(&self) -> Vec<(usize, f64)> {
        self.log
            .iter()
            .filter_map(|r| r.val.map(|v| (r.step, v)))
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }

    /// Mean loss over the first and the last `fraction` of steps.
    pub fn head_tail_means(&self, fraction: f64) -> Option<(f64, f64)> {
        let losses = self.losses();
        let n = ((losses.len() as f64 * fraction).ceil() as usize).max(1);
        if losses.len() < 2 * n {
            return None;
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        Some((mean(&losses[..n]), mean(&losses[losses.len() - n..])))
    }
}

/// A differentiable training objective with its own batch sampler.
pub trait Objective {
    type Batch;

    fn sample(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Self::Batch>;

    fn loss<'t>(
        &self,
        p: &BoundParams<'t>,
        plugins: Option<&Plugins<'_, 't>>,
        batch: &Self::Batch,
    ) -> Result<Var<'t>>;
}

pub struct MlmObjective<'a> {
    pub config: &'a EncoderConfig,
    pub data: &'a MlmData,
    pub max_seq_len: usize,
}

impl Objective for MlmObjective<'_> {
    type Batch = Vec<MaskedExample>;

    fn sample(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Self::Batch> {
        use rand::Rng;
        (0..batch_size)
            .map(|_| {
                let s = &self.data.sequences[rng.gen_range(0..self.data.len())];
                mask_tokens(
                    &TokenSequence::single(s, self.max_seq_len),
                    self.config.vocab_size,
                    MASK_RATE,
                    rng,
                )
            })
            .collect()
    }

    fn loss<'t>(
        &self,
        p: &BoundParams<'t>,
        plugins: Option<&Plugins<'_, 't>>,
        batch: &Self::Batch,
    ) -> Result<Var<'t>> {
        mlm_batch_loss(self.config, p, plugins, batch)
    }
}

/// Cross-entropy averaged over every masked position in the batch.
fn mlm_batch_loss<'t>(
    config: &EncoderConfig,
    p: &BoundParams<'t>,
    plugins: Option<&Plugins<'_, 't>>,
    batch: &[MaskedExample],
) -> Result<Var<'t>> {
    let total: usize = batch.iter().map(|e| e.targets.len()).sum();
    if total == 0 {
        return Err(Error::contract("MLM batch has no masked positions"));
    }
    let mut acc: Option<Var<'t>> = None;
    for e in batch {
        let l = model::mlm_loss(config, p, &e.seq, &e.positions, &e.targets, plugins)?
            .scale(e.targets.len() as f64 / total as f64);
        acc = Some(match acc {
            Some(a) => a.add(&l)?,
            None => l,
        });
    }
    Ok(acc.expect("non-empty batch"))
}

pub struct RankingObjective<'a> {
    pub config: &'a EncoderConfig,
    pub data: &'a RankingData,
    pub max_seq_len: usize,
}

impl Objective for RankingObjective<'_> {
    type Batch = Vec<RankingExample>;

    fn sample(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Self::Batch> {
        Ok(self.data.sample(batch_size, rng))
    }

    fn loss<'t>(
        &self,
        p: &BoundParams<'t>,
        plugins: Option<&Plugins<'_, 't>>,
        batch: &Self::Batch,
    ) -> Result<Var<'t>> {
        let logits = batch
            .iter()
            .map(|ex| {
                let seq = TokenSequence::pair(
                    &self.data.queries[ex.query].tokens,
                    &self.data.docs[ex.doc],
                    self.max_seq_len,
                );
                model::ce_logit(self.config, p, &seq, plugins)
            })
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<f64> = batch.iter().map(|e| e.label).collect();
        Ok(concat_rows(&logits)?.bce(&labels)?)
    }
}

/// Higher is better.
pub type Validator<'v> = dyn FnMut(&Modules) -> Result<f64> + 'v;

/// Runs `train.steps` Adam updates of `objective` over the parameters that
/// `selector` marks trainable. Everything else is left bit-identical.
///
/// With a validator, the modules are scored every `eval_every` steps and
/// after the last one, and the earliest best-scoring snapshot is returned;
/// otherwise the final state is.
pub fn optimize<O: Objective>(
    mut modules: Modules,
    selector: &Selector,
    objective: &O,
    train: &TrainConfig,
    mut validator: Option<&mut Validator<'_>>,
) -> Result<(Modules, TrainReport)> {
    train.validate()?;
    if selector.base.len() != modules.params.len() {
        return Err(Error::contract(format!(
            "selector covers {} tensors, store has {}",
            selector.base.len(),
            modules.params.len()
        )));
    }
    if selector.language && modules.language.is_none() {
        return Err(Error::contract(
            "selector trains a language adapter that is not present",
        ));
    }
    if selector.ranking && modules.ranking.is_none() {
        return Err(Error::contract(
            "selector trains a ranking adapter that is not present",
        ));
    }

    let base_slots: Vec<usize> = (0..selector.base.len())
        .filter(|&i| selector.is_trainable(i))
        .collect();
    let tensors: Vec<&Tensor> = modules.params.iter().map(|(_, t)| t).collect();
    let mut origins: Vec<Vec<f64>> = base_slots
        .iter()
        .map(|&i| match &selector.base[i] {
            Trainable::Coords(c) => c.iter().map(|&j| tensors[i].data()[j]).collect(),
            _ => tensors[i].data().to_vec(),
        })
        .collect();
    for (adapter, on) in [
        (&modules.language, selector.language),
        (&modules.ranking, selector.ranking),
    ] {
        if let (Some(a), true) = (adapter, on) {
            origins.extend(a.tensors().iter().map(|t| t.data().to_vec()));
        }
    }
    let num_slots = origins.len();
    let mut adam = Adam::new(train.adam, origins);

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut report = TrainReport::default();
    let mut best: Option<(usize, f64, Modules)> = None;
    let trainable_names: HashSet<String> = modules
        .params
        .iter()
        .enumerate()
        .filter(|(i, _)| selector.is_trainable(*i))
        .map(|(_, (n, _))| n.to_string())
        .collect();

    for step in 1..=train.steps {
        let lr = train.lr_at(step);
        let batch = objective.sample(train.batch_size, &mut rng)?;
        let (loss, grads) = {
            let tape = Tape::new();
            let bound = modules
                .params
                .bind(&tape, |name| trainable_names.contains(name))?;
            let stack = modules
                .stack()
                .map(|s| s.bind_with(&tape, selector.language, selector.ranking));
            let plugins = stack.as_ref().map(|s| s.plugins());
            let loss_var = objective.loss(&bound, plugins.as_ref(), &batch)?;
            let loss = loss_var.value().item();
            if !loss.is_finite() {
                return Err(Error::contract(format!(
                    "non-finite training loss at step {step}"
                )));
            }
            let mut g = tape.backward(loss_var)?;
            let mut vars: Vec<Var<'_>> = base_slots.iter().map(|&i| bound.vars[i]).collect();
            if let Some(s) = &stack {
                if selector.language {
                    vars.extend(s.query.as_ref().map(|a| a.vars()).unwrap_or_default());
                }
                if selector.ranking {
                    vars.extend(s.ranking.as_ref().map(|a| a.vars()).unwrap_or_default());
                }
            }
            let grads: Vec<Tensor> = vars.into_iter().map(|v| g.take(v)).collect();
            (loss, grads)
        };
        if grads.len() != num_slots {
            return Err(Error::contract(
                "gradient slots do not match optimizer slots",
            ));
        }

        if lr > 0.0 {
            adam.begin_step();
            apply_updates(&mut modules, selector, &base_slots, &grads, &mut adam, lr);
        }

        let due = step == train.steps || (train.eval_every > 0 && step % train.eval_every == 0);
        let val = match (&mut validator, due) {
            (Some(v), true) => Some(v(&modules)?),
            _ => None,
        };
        if let Some(v) = val {
            log::info!("step {step}: loss {loss:.4}, validation {v:.4}");
            if best.as_ref().is_none_or(|(_, b, _)| v > *b) {
                best = Some((step, v, modules.clone()));
            }
        } else if step % 100 == 0 {
            log::debug!("step {step}: loss {loss:.4}");
        }
        report.log.push(LogRecord {
            step,
            loss,
            lr,
            val,
        });
    }

    match best {
        Some((step, v, m)) => {
            report.best = Some((step, v));
            Ok((m, report))
        }
        None => Ok((modules, report)),
    }
}

fn apply_updates(
    modules: &mut Modules,
    selector: &Selector,
    base_slots: &[usize],
    grads: &[Tensor],
    adam: &mut Adam,
    lr: f64,
) {
    let mut slot = 0;
    let mut tensors: Vec<&mut Tensor> = modules.params.iter_mut().map(|(_, t)| t).collect();
    for &i in base_slots {
        let coords = match &selector.base[i] {
            Trainable::Coords(c) => Some(c.as_slice()),
            _ => None,
        };
        adam.update(slot, tensors[i].data_mut(), grads[slot].data(), coords, lr);
        slot += 1;
    }
    for (adapter, on) in [
        (&mut modules.language, selector.language),
        (&mut modules.ranking, selector.ranking),
    ] {
        if let (Some(a), true) = (adapter, on) {
            for t in a.tensors_mut() {
                adam.update(slot, t.data_mut(), grads[slot].data(), None, lr);
                slot += 1;
            }
        }
    }
}

/// MLM loss and masked-token accuracy of `modules` on a fixed sample.
pub fn mlm_metrics(
    config: &EncoderConfig,
    modules: &Modules,
    eval: &MlmEval,
) -> Result<(f64, f64)> {
    let total = eval.num_targets() as f64;
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in eval.examples.chunks(crate::encoder::SCORE_CHUNK) {
        let tape = Tape::new();
        let bound = modules.params.bind(&tape, |_| false)?;
        let stack = modules.stack().map(|s| s.bind(&tape));
        let plugins = stack.as_ref().map(|s| s.plugins());
        for e in chunk {
            let hidden = model::encode(config, &bound, &e.seq, plugins.as_ref())?;
            let logits = model::mlm_head(&bound, &hidden, &e.positions, plugins.as_ref())?;
            loss += logits.cross_entropy(&e.targets)?.value().item() * e.targets.len() as f64;
            let values = logits.value();
            for (r, &t) in e.targets.iter().enumerate() {
                let row = values.row(r);
                let arg = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                correct += usize::from(arg == t);
            }
        }
    }
    Ok((loss / total, correct as f64 / total))
}

/// Mean BCE over every (query, positive) and (query, negative) pair.
pub fn ranking_loss(
    config: &EncoderConfig,
    modules: &Modules,
    data: &RankingData,
    max_seq_len: usize,
) -> Result<f64> {
    let examples: Vec<RankingExample> = data
        .queries
        .iter()
        .enumerate()
        .flat_map(|(qi, q)| {
            let pos = q.positives.iter().map(move |&d| RankingExample {
                query: qi,
                doc: d,
                label: 1.0,
            });
            let neg = q.negatives.iter().map(move |&d| RankingExample {
                query: qi,
                doc: d,
                label: 0.0,
            });
            pos.chain(neg)
        })
        .collect();
    if examples.is_empty() {
        return Err(Error::contract("ranking data has no examples"));
    }
    let objective = RankingObjective {
        config,
        data,
        max_seq_len,
    };
    let mut sum = 0.0;
    for chunk in examples.chunks(crate::encoder::SCORE_CHUNK) {
        let tape = Tape::new();
        let bound = modules.params.bind(&tape, |_| false)?;
        let stack = modules.stack().map(|s| s.bind(&tape));
        let plugins = stack.as_ref().map(|s| s.plugins());
        let chunk = chunk.to_vec();
        sum += objective
            .loss(&bound, plugins.as_ref(), &chunk)?
            .value()
            .item()
            * chunk.len() as f64;
    }
    Ok(sum / examples.len() as f64)
}

/// Reranks each validation query's candidates and returns their MAP.
/// Score ties keep candidate order.
pub fn validation_map(
    config: &EncoderConfig,
    modules: &Modules,
    set: &ValidationSet,
    max_seq_len: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    for q in &set.queries {
        let mut scores = Vec::with_capacity(q.candidates.len());
        for chunk in q.candidates.chunks(crate::encoder::SCORE_CHUNK) {
            let tape = Tape::new();
            let bound = modules.params.bind(&tape, |_| false)?;
            let stack = modules.stack().map(|s| s.bind(&tape));
            let plugins = stack.as_ref().map(|s| s.plugins());
            for &d in chunk {
                let seq = TokenSequence::pair(&q.tokens, &set.docs[d], max_seq_len);
                scores.push(
                    model::ce_logit(config, &bound, &seq, plugins.as_ref())?
                        .value()
                        .item(),
                );
            }
        }
        let mut order: Vec<usize> = (0..q.candidates.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let ranked: Vec<String> = order.iter().map(|&i| q.candidates[i].to_string()).collect();
        let relevant = q.relevant.iter().map(usize::to_string).collect();
        sum += average_precision(ranked.iter().map(String::as_str), &relevant, None)?;
    }
    Ok(sum / set.queries.len() as f64)
}

/// Masked language modeling over `data`. With an evaluation sample, the
/// checkpoint with the lowest held-out MLM loss is returned.
pub fn train_mlm(
    config: &EncoderConfig,
    modules: Modules,
    selector: &Selector,
    data: &MlmData,
    train: &TrainConfig,
    eval: Option<&MlmEval>,
) -> Result<(Modules, TrainReport)> {
    if data.is_empty() {
        return Err(Error::contract("MLM corpus is empty"));
    }
    let objective = MlmObjective {
        config,
        data,
        max_seq_len: train.max_seq_len.min(config.max_seq_len),
    };
    let mut validate =
        |m: &Modules| -> Result<f64> { Ok(-mlm_metrics(config, m, eval.expect("eval set"))?.0) };
    let validator: Option<&mut Validator<'_>> = match eval {
        Some(_) => Some(&mut validate),
        None => None,
    };
    optimize(modules, selector, &objective, train, validator)
}

/// Pointwise BCE ranking training. With a validation set, the checkpoint
/// with the best validation MAP is returned.
pub fn train_ranking(
    config: &EncoderConfig,
    modules: Modules,
    selector: &Selector,
    data: &RankingData,
    train: &TrainConfig,
    validation: Option<&ValidationSet>,
) -> Result<(Modules, TrainReport)> {
    data.check()?;
    let max_seq_len = train.max_seq_len.min(config.max_seq_len);
    let objective = RankingObjective {
        config,
        data,
        max_seq_len,
    };
    let mut validate = |m: &Modules| -> Result<f64> {
        validation_map(config, m, validation.expect("validation set"), max_seq_len)
    };
    let validator: Option<&mut Validator<'_>> = match validation {
        Some(_) => Some(&mut validate),
        None => None,
    };
    optimize(modules, selector, &objective, train, validator)
}

/// Fine-tunes every parameter with the ranking objective.
pub fn train_full(
    config: &EncoderConfig,
    params: ParamStore,
    data: &RankingData,
    train: &TrainConfig,
    validation: Option<&ValidationSet>,
) -> Result<(ParamStore, TrainReport)> {
    let selector = Selector::all(&params);
    let (m, report) = train_ranking(
        config,
        Modules::base(params),
        &selector,
        data,
        train,
        validation,
    )?;
    Ok((m.params, report))
}

#[cfg(test)]
mod tests;
