//! Named encoder parameters and their flat coordinate view.
//!
//! Tensors are kept in insertion order, which is also the coordinate order
//! of [`ParamStore::flatten`]:
//!
//! 1. `embeddings.word`, `embeddings.position`, `embeddings.segment`,
//!    `embeddings.ln.gain`, `embeddings.ln.bias`
//! 2. for each layer `l`: `layer.l.attn.{query,key,value,output}.{weight,bias}`,
//!    `layer.l.attn_ln.{gain,bias}`, `layer.l.ffn.{input,output}.{weight,bias}`,
//!    `layer.l.ffn_ln.{gain,bias}`
//! 3. `mlm.dense.{weight,bias}`, `mlm.ln.{gain,bias}`, `mlm.decoder.bias`
//!    (the decoder matrix is tied to `embeddings.word`)
//! 4. `score.weight`, `score.bias`
//!
//! Within a tensor, coordinates follow row-major order.

use std::ops::Range;

use indexmap::IndexMap;
use rand::Rng;

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

fn dense_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

pub fn layer_param(layer: usize, suffix: &str) -> String {
    format!("layer.{layer}.{suffix}")
}

/// Per-layer tensor suffixes in storage order.
pub const LAYER_SUFFIXES: [&str; 16] = [
    "attn.query.weight",
    "attn.query.bias",
    "attn.key.weight",
    "attn.key.bias",
    "attn.value.weight",
    "attn.value.bias",
    "attn.output.weight",
    "attn.output.bias",
    "attn_ln.gain",
    "attn_ln.bias",
    "ffn.input.weight",
    "ffn.input.bias",
    "ffn.output.weight",
    "ffn.output.bias",
    "ffn_ln.gain",
    "ffn_ln.bias",
];

/// True for the task heads (MLM head and scoring head), which sit outside
/// the encoder body.
pub fn is_head_param(name: &str) -> bool {
    name.starts_with("mlm.") || name.starts_with("score.")
}

pub fn is_score_param(name: &str) -> bool {
    name.starts_with("score.")
}

impl ParamStore {
    /// Random initialization: embeddings ~ N(0, 0.02²), dense weights
    /// ~ N(0, 1/fan_in), biases zero, layer-norm gains one.
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let mut tensors = IndexMap::new();
        let mut put = |name: String, t: Tensor| {
            tensors.insert(name, t);
        };
        put(
            "embeddings.word".into(),
            Tensor::randn(&[config.vocab_size, h], INIT_STD, rng),
        );
        put(
            "embeddings.position".into(),
            Tensor::randn(&[config.max_seq_len, h], INIT_STD, rng),
        );
        put(
            "embeddings.segment".into(),
            Tensor::randn(&[2, h], INIT_STD, rng),
        );
        put("embeddings.ln.gain".into(), Tensor::full(&[h], 1.0));
        put("embeddings.ln.bias".into(), Tensor::zeros(&[h]));
        for l in 0..config.num_layers {
            for proj in ["query", "key", "value", "output"] {
                put(
                    layer_param(l, &format!("attn.{proj}.weight")),
                    Tensor::randn(&[h, h], dense_std(h), rng),
                );
                put(
                    layer_param(l, &format!("attn.{proj}.bias")),
                    Tensor::zeros(&[h]),
                );
            }
            put(layer_param(l, "attn_ln.gain"), Tensor::full(&[h], 1.0));
            put(layer_param(l, "attn_ln.bias"), Tensor::zeros(&[h]));
            put(
                layer_param(l, "ffn.input.weight"),
                Tensor::randn(&[h, config.ffn_dim], dense_std(h), rng),
            );
            put(
                layer_param(l, "ffn.input.bias"),
                Tensor::zeros(&[config.ffn_dim]),
            );
            put(
                layer_param(l, "ffn.output.weight"),
                Tensor::randn(&[config.ffn_dim, h], dense_std(config.ffn_dim), rng),
            );
            put(layer_param(l, "ffn.output.bias"), Tensor::zeros(&[h]));
            put(layer_param(l, "ffn_ln.gain"), Tensor::full(&[h], 1.0));
            put(layer_param(l, "ffn_ln.bias"), Tensor::zeros(&[h]));
        }
        put(
            "mlm.dense.weight".into(),
            Tensor::randn(&[h, h], dense_std(h), rng),
        );
        put("mlm.dense.bias".into(), Tensor::zeros(&[h]));
        put("mlm.ln.gain".into(), Tensor::full(&[h], 1.0));
        put("mlm.ln.bias".into(), Tensor::zeros(&[h]));
        put(
            "mlm.decoder.bias".into(),
            Tensor::zeros(&[config.vocab_size]),
        );
        put(
            "score.weight".into(),
            Tensor::randn(&[h, 1], dense_std(h), rng),
        );
        put("score.bias".into(), Tensor::zeros(&[1]));
        Ok(Self { tensors })
    }

    pub fn from_tensors(tensors: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        Self {
            tensors: tensors.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::format("parameter store", format!("missing tensor {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn num_coords(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Coordinate range of every tensor in the flat vector.
    pub fn layout(&self) -> Vec<(String, Range<usize>)> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|(k, v)| {
                let r = offset..offset + v.len();
                offset += v.len();
                (k.clone(), r)
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_coords());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// A copy of this store with every coordinate replaced from `theta`.
    pub fn unflatten(&self, theta: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_flat(theta)?;
        Ok(out)
    }

    pub fn set_flat(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_coords() {
            return Err(Error::contract(format!(
                "flat vector has {} coordinates, store has {}",
                theta.len(),
                self.num_coords()
            )));
        }
        let mut offset = 0;
        for t in self.tensors.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&theta[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Checks that every tensor expected for `config` is present with the
    /// right shape.
    pub fn check_layout(&self, config: &EncoderConfig) -> Result<()> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let reference = Self::init(config, &mut rng)?;
        if reference.len() != self.len() {
            return Err(Error::format(
                "parameter store",
                format!("{} tensors, expected {}", self.len(), reference.len()),
            ));
        }
        for ((n1, t1), (n2, t2)) in reference.iter().zip(self.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::format(
                    "parameter store",
                    format!(
                        "expected {n1} {:?}, found {n2} {:?}",
                        t1.shape(),
                        t2.shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Puts every tensor on `tape`; tensors for which `trainable` returns
    /// true become differentiable leaves, the rest constants.
    pub fn bind<'t>(
        &self,
        tape: &'t Tape,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<BoundParams<'t>> {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                if trainable(name) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect::<Vec<_>>();
        let index = |name: &str| -> Result<Var<'t>> {
            self.tensors
                .get_index_of(name)
                .map(|i| vars[i])
                .ok_or_else(|| Error::format("parameter store", format!("missing tensor {name}")))
        };
        let num_layers = self
            .tensors
            .keys()
            .filter_map(|k| {
                k.strip_prefix("layer.")?
                    .split('.')
                    .next()?
                    .parse::<usize>()
                    .ok()
            })
            .max()
            .map_or(0, |m| m + 1);
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let p = |s: &str| index(&layer_param(l, s));
            layers.push(BoundLayer {
                query: (p("attn.query.weight")?, p("attn.query.bias")?),
                key: (p("attn.key.weight")?, p("attn.key.bias")?),
                value: (p("attn.value.weight")?, p("attn.value.bias")?),
                output: (p("attn.output.weight")?, p("attn.output.bias")?),
                attn_ln: (p("attn_ln.gain")?, p("attn_ln.bias")?),
                ffn_in: (p("ffn.input.weight")?, p("ffn.input.bias")?),
                ffn_out: (p("ffn.output.weight")?, p("ffn.output.bias")?),
                ffn_ln: (p("ffn_ln.gain")?, p("ffn_ln.bias")?),
            });
        }
        Ok(BoundParams {
            word: index("embeddings.word")?,
            position: index("embeddings.position")?,
            segment: index("embeddings.segment")?,
            emb_ln: (index("embeddings.ln.gain")?, index("embeddings.ln.bias")?),
            layers,
            mlm_dense: (index("mlm.dense.weight")?, index("mlm.dense.bias")?),
            mlm_ln: (index("mlm.ln.gain")?, index("mlm.ln.bias")?),
            mlm_decoder_bias: index("mlm.decoder.bias")?,
            score: (index("score.weight")?, index("score.bias")?),
            vars,
        })
    }
}

/// Weight and bias (or gain and bias) pair on a tape.
pub type Affine<'t> = (Var<'t>, Var<'t>);

#[derive(Debug, Clone)]
pub struct BoundLayer<'t> {
    pub query: Affine<'t>,
    pub key: Affine<'t>,
    pub value: Affine<'t>,
    pub output: Affine<'t>,
    pub attn_ln: Affine<'t>,
    pub ffn_in: Affine<'t>,
    pub ffn_out: Affine<'t>,
    pub ffn_ln: Affine<'t>,
}

/// A [`ParamStore`] placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams<'t> {
    pub word: Var<'t>,
    pub position: Var<'t>,
    pub segment: Var<'t>,
    pub emb_ln: Affine<'t>,
    pub layers: Vec<BoundLayer<'t>>,
    pub mlm_dense: Affine<'t>,
    pub mlm_ln: Affine<'t>,
    pub mlm_decoder_bias: Var<'t>,
    pub score: Affine<'t>,
    /// All tensors, in store order.
    pub vars: Vec<Var<'t>>,
}
