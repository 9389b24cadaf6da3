//! Bottleneck adapters: language adapters (LA), ranking adapters (RA)
//! stacked on top of them, invertible embedding adapters, split routing of
//! query and document tokens, and adapter dropping.
//!
//! A bottleneck maps a hidden state `x` to `U·ψ(D·x + b_D) + b_U` with
//! `D: h×d`, `U: d×h` and `ψ = ReLU`. Up-projections start at zero, so a
//! freshly initialized adapter is an exact residual passthrough.

mod invertible;
mod io;
mod stack;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::tokenizer::TokenSequence;
use crate::error::{Error, Result};
use crate::tensor::{concat_rows, Tape, Tensor, Var};

pub use invertible::{BoundInvertible, InvertibleAdapterParams};
pub use io::AdapterFile;
pub use stack::{AdapterStack, BoundStack, LanguageChoice};

const DOWN_INIT_STD: f64 = 0.01;

/// Adapter bottleneck nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub reduction_factor: usize,
    pub hidden: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl AdapterConfig {
    pub fn new(reduction_factor: usize, hidden: usize) -> Result<Self> {
        let cfg = Self {
            reduction_factor,
            hidden,
            activation: Activation::Relu,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn bottleneck(&self) -> usize {
        self.hidden / self.reduction_factor
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction_factor == 0 || !self.hidden.is_multiple_of(self.reduction_factor) {
            return Err(Error::Config(format!(
                "reduction factor {} must divide hidden size {}",
                self.reduction_factor, self.hidden
            )));
        }
        Ok(())
    }
}

/// Trainable parameters of one adapter role across all layers:
/// `L·(2·h·d + d + h)` for a bottleneck of width `d`.
pub fn adapter_param_count(cfg: &AdapterConfig, num_layers: usize, hidden: usize) -> usize {
    let d = hidden / cfg.reduction_factor;
    num_layers * (2 * hidden * d + d + hidden)
}

/// One down/up projection pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    pub down: Tensor,
    pub down_bias: Tensor,
    pub up: Tensor,
    pub up_bias: Tensor,
}

impl Bottleneck {
    pub fn init<R: Rng + ?Sized>(width: usize, bottleneck: usize, rng: &mut R) -> Self {
        Self {
            down: Tensor::randn(&[width, bottleneck], DOWN_INIT_STD, rng),
            down_bias: Tensor::zeros(&[bottleneck]),
            up: Tensor::zeros(&[bottleneck, width]),
            up_bias: Tensor::zeros(&[width]),
        }
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.down, &self.down_bias, &self.up, &self.up_bias]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.down,
            &mut self.down_bias,
            &mut self.up,
            &mut self.up_bias,
        ]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundBottleneck<'t> {
        let put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundBottleneck {
            down: put(&self.down),
            down_bias: put(&self.down_bias),
            up: put(&self.up),
            up_bias: put(&self.up_bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBottleneck<'t> {
    pub down: Var<'t>,
    pub down_bias: Var<'t>,
    pub up: Var<'t>,
    pub up_bias: Var<'t>,
}

impl<'t> BoundBottleneck<'t> {
    /// `U·ψ(D·x + b_D) + b_U` applied row-wise to `x[n×h]`.
    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let z = x.matmul(&self.down)?.add_row(&self.down_bias)?.relu()?;
        Ok(z.matmul(&self.up)?.add_row(&self.up_bias)?)
    }

    fn vars(&self) -> [Var<'t>; 4] {
        [self.down, self.down_bias, self.up, self.up_bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterRole {
    #[serde(rename = "LA")]
    Language,
    #[serde(rename = "RA")]
    Ranking,
}

/// Per-layer adapters for one role, plus optional invertible adapters
/// (language adapters only).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub config: AdapterConfig,
    pub role: AdapterRole,
    /// Language code for LAs, `"rank"` for RAs.
    pub tag: String,
    pub layers: Vec<Bottleneck>,
    pub invertible: Option<InvertibleAdapterParams>,
}

impl AdapterParams {
    pub fn init<R: Rng + ?Sized>(
        config: AdapterConfig,
        role: AdapterRole,
        tag: impl Into<String>,
        num_layers: usize,
        invertible: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.bottleneck();
        let layers = (0..num_layers)
            .map(|_| Bottleneck::init(config.hidden, d, rng))
            .collect();
        let invertible = if invertible {
            Some(InvertibleAdapterParams::init(config.hidden, rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            role,
            tag: tag.into(),
            layers,
            invertible,
        })
    }

    /// All tensors in storage order: per layer `down, down_bias, up, up_bias`,
    /// then the invertible adapter's `F` and `G` bottlenecks.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.layers.iter().flat_map(|b| b.tensors()).collect();
        if let Some(inv) = &self.invertible {
            out.extend(inv.f.tensors());
            out.extend(inv.g.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .layers
            .iter_mut()
            .flat_map(|b| b.tensors_mut())
            .collect();
        if let Some(inv) = &mut self.invertible {
            out.extend(inv.f.tensors_mut());
            out.extend(inv.g.tensors_mut());
        }
        out
    }

    /// Parameter count of the per-layer bottlenecks (invertible adapters excluded).
    pub fn num_layer_params(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|b| b.tensors())
            .map(Tensor::len)
            .sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundAdapter<'t> {
        BoundAdapter {
            layers: self
                .layers
                .iter()
                .map(|b| b.bind(tape, trainable))
                .collect(),
            invertible: self
                .invertible
                .as_ref()
                .map(|inv| inv.bind(tape, trainable)),
        }
    }
}

/// Adapter parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundAdapter<'t> {
    pub layers: Vec<BoundBottleneck<'t>>,
    pub invertible: Option<BoundInvertible<'t>>,
}

impl<'t> BoundAdapter<'t> {
    /// Vars in the same order as [`AdapterParams::tensors`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out: Vec<Var<'t>> = self.layers.iter().flat_map(|b| b.vars()).collect();
        if let Some(inv) = &self.invertible {
            out.extend(inv.f.vars());
            out.extend(inv.g.vars());
        }
        out
    }
}

/// Language adapter at layer `l`: `U_l ψ(D_l h_l) + r_l`.
pub fn la_forward<'t>(
    h: &Var<'t>,
    r: &Var<'t>,
    la: &BoundAdapter<'t>,
    layer: usize,
) -> Result<Var<'t>> {
    Ok(la.layers[layer].forward(h)?.add(r)?)
}

/// Ranking adapter stacked on a language adapter. Both read the same FFN
/// residual `r_l`; the RA's input is the LA output.
pub fn ra_forward<'t>(
    h: &Var<'t>,
    r: &Var<'t>,
    la: &BoundAdapter<'t>,
    ra: &BoundAdapter<'t>,
    layer: usize,
) -> Result<Var<'t>> {
    let la_out = la_forward(h, r, la, layer)?;
    Ok(ra.layers[layer].forward(&la_out)?.add(r)?)
}

/// Which language adapter a token is routed through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Document,
}

/// Split-adapter routing: tokens up to and including the first `[SEP]` go
/// through the query-language adapter, the rest through the document one.
pub fn split_route(seq: &TokenSequence) -> Result<Vec<Side>> {
    let sep = seq
        .first_sep()
        .ok_or_else(|| Error::contract("split adapters need a [SEP] token in the sequence"))?;
    Ok((0..seq.len())
        .map(|i| {
            if i <= sep {
                Side::Query
            } else {
                Side::Document
            }
        })
        .collect())
}

/// Language-adapter placement for one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum LanguageRouting<'a, 't> {
    None,
    Single(&'a BoundAdapter<'t>),
    Split {
        query: &'a BoundAdapter<'t>,
        document: &'a BoundAdapter<'t>,
    },
}

/// The adapter stack injected into an encoder forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Plugins<'a, 't> {
    pub language: LanguageRouting<'a, 't>,
    pub ranking: Option<&'a BoundAdapter<'t>>,
    /// Layers `0..drop_first_n` run without any adapter.
    pub drop_first_n: usize,
    /// Apply the language adapters' invertible embedding adapters.
    pub invertible: bool,
}

impl<'a, 't> Plugins<'a, 't> {
    pub fn language(la: &'a BoundAdapter<'t>) -> Self {
        Self {
            language: LanguageRouting::Single(la),
            ranking: None,
            drop_first_n: 0,
            invertible: la.invertible.is_some(),
        }
    }

    pub fn stacked(la: &'a BoundAdapter<'t>, ra: &'a BoundAdapter<'t>) -> Self {
        Self {
            ranking: Some(ra),
            ..Self::language(la)
        }
    }

    pub fn is_active(&self, layer: usize) -> bool {
        layer >= self.drop_first_n
            && (self.ranking.is_some() || !matches!(self.language, LanguageRouting::None))
    }

    /// Adapter output for one layer given the post-norm hidden state `h` and
    /// the FFN residual `r` (both `[n×h]`). The caller re-applies the
    /// layer's output norm.
    pub fn apply(
        &self,
        layer: usize,
        h: &Var<'t>,
        r: &Var<'t>,
        seq: &TokenSequence,
    ) -> Result<Var<'t>> {
        let la_out = match self.language {
            LanguageRouting::None => None,
            LanguageRouting::Single(la) => Some(la_forward(h, r, la, layer)?),
            LanguageRouting::Split { query, document } => {
                let split = split_point(seq)?;
                let n = seq.len();
                if split == n {
                    Some(la_forward(h, r, query, layer)?)
                } else {
                    let hq = h.slice_rows(0, split)?;
                    let rq = r.slice_rows(0, split)?;
                    let hd = h.slice_rows(split, n - split)?;
                    let rd = r.slice_rows(split, n - split)?;
                    let q = la_forward(&hq, &rq, query, layer)?;
                    let d = la_forward(&hd, &rd, document, layer)?;
                    Some(concat_rows(&[q, d])?)
                }
            }
        };
        match (self.ranking, la_out) {
            (Some(ra), Some(x)) => Ok(ra.layers[layer].forward(&x)?.add(r)?),
            (Some(ra), None) => Ok(ra.layers[layer].forward(h)?.add(r)?),
            (None, Some(x)) => Ok(x),
            (None, None) => Ok(*r),
        }
    }

    /// Invertible adapter on the embedding output, routed like the LAs.
    pub fn apply_invertible(&self, x: &Var<'t>, seq: &TokenSequence) -> Result<Var<'t>> {
        if !self.invertible {
            return Ok(*x);
        }
        match self.language {
            LanguageRouting::None => Ok(*x),
            LanguageRouting::Single(la) => match &la.invertible {
                Some(inv) => inv.apply(x),
                None => Ok(*x),
            },
            LanguageRouting::Split { query, document } => {
                let split = split_point(seq)?;
                let n = seq.len();
                let run = |a: &BoundAdapter<'t>, v: Var<'t>| match &a.invertible {
                    Some(inv) => inv.apply(&v),
                    None => Ok(v),
                };
                if split == n {
                    return run(query, *x);
                }
                let q = run(query, x.slice_rows(0, split)?)?;
                let d = run(document, x.slice_rows(split, n - split)?)?;
                Ok(concat_rows(&[q, d])?)
            }
        }
    }

    /// Inverse invertible adapter before the MLM output layer.
    pub fn invert_output(&self, x: &Var<'t>) -> Result<Var<'t>> {
        if !self.invertible {
            return Ok(*x);
        }
        match self.language {
            LanguageRouting::Single(la) => match &la.invertible {
                Some(inv) => inv.invert(x),
                None => Ok(*x),
            },
            // MLM runs with a single language adapter.
            _ => Ok(*x),
        }
    }
}

fn split_point(seq: &TokenSequence) -> Result<usize> {
    let route = split_route(seq)?;
    Ok(route.iter().take_while(|&&s| s == Side::Query).count())
}

/// How language adapters are combined for a query/document pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaMode {
    /// Query-language adapter for all tokens.
    Q,
    /// Document-language adapter for all tokens.
    D,
    /// Query tokens through the query LA, document tokens through the document LA.
    S,
}

/// Descriptor of an inference-time adapter composition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterComposition {
    pub la_mode: LaMode,
    pub query_la: Option<String>,
    pub document_la: Option<String>,
    pub ra: String,
    pub drop_first_n: usize,
    pub invertible: bool,
}

impl AdapterComposition {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.drop_first_n > num_layers {
            return Err(Error::contract(format!(
                "cannot drop adapters from {} layers of a {num_layers}-layer encoder",
                self.drop_first_n
            )));
        }
        let missing = match self.la_mode {
            LaMode::Q => self.query_la.is_none(),
            LaMode::D => self.document_la.is_none(),
            LaMode::S => self.query_la.is_none() || self.document_la.is_none(),
        };
        if missing {
            return Err(Error::contract(format!(
                "LA mode {:?} is missing a language adapter id",
                self.la_mode
            )));
        }
        Ok(())
    }
}

/// Removes adapters from the first `n` layers at inference time.
pub fn adapter_drop(
    comp: &AdapterComposition,
    n: usize,
    num_layers: usize,
) -> Result<AdapterComposition> {
    if n > num_layers {
        return Err(Error::contract(format!(
            "adapter drop {n} out of range 0..={num_layers}"
        )));
    }
    Ok(AdapterComposition {
        drop_first_n: n,
        ..comp.clone()
    })
}

#[cfg(test)]
mod tests;
