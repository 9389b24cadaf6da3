//! Additive-coupling invertible adapters on the embedding layer.
//!
//! The embedding `e` is split into halves `(e1, e2)`:
//! `o1 = e1 + F(e2)`, `o2 = e2 + G(o1)`. The inverse recovers
//! `e2 = o2 - G(o1)`, `e1 = o1 - F(e2)` exactly up to rounding.

use rand::Rng;

use super::{Bottleneck, BoundBottleneck};
use crate::error::{Error, Result};
use crate::tensor::{concat_cols, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct InvertibleAdapterParams {
    pub f: Bottleneck,
    pub g: Bottleneck,
}

impl InvertibleAdapterParams {
    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Result<Self> {
        if !hidden.is_multiple_of(2) || hidden == 0 {
            return Err(Error::Config(format!(
                "invertible adapters need an even hidden size, got {hidden}"
            )));
        }
        let half = hidden / 2;
        let width = (half / 2).max(1);
        Ok(Self {
            f: Bottleneck::init(half, width, rng),
            g: Bottleneck::init(half, width, rng),
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundInvertible<'t> {
        BoundInvertible {
            f: self.f.bind(tape, trainable),
            g: self.g.bind(tape, trainable),
        }
    }

    /// Forward coupling on a single embedding vector.
    pub fn apply(&self, e: &Tensor) -> Result<Tensor> {
        self.run(e, true)
    }

    /// Inverse coupling on a single output vector.
    pub fn invert(&self, o: &Tensor) -> Result<Tensor> {
        self.run(o, false)
    }

    fn run(&self, x: &Tensor, forward: bool) -> Result<Tensor> {
        let h = x.len();
        if !h.is_multiple_of(2) {
            return Err(Error::Config(format!("invertible adapter on odd size {h}")));
        }
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let v = tape.constant(x.clone().reshape(vec![1, h])?);
        let out = if forward {
            bound.apply(&v)?
        } else {
            bound.invert(&v)?
        };
        let t = out.value().clone();
        Ok(t.reshape(vec![h])?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundInvertible<'t> {
    pub f: BoundBottleneck<'t>,
    pub g: BoundBottleneck<'t>,
}

impl<'t> BoundInvertible<'t> {
    fn halves(x: &Var<'t>) -> Result<(Var<'t>, Var<'t>, usize)> {
        let h = x.value().last_dim();
        if !h.is_multiple_of(2) {
            return Err(Error::Config(format!("invertible adapter on odd size {h}")));
        }
        let half = h / 2;
        Ok((x.slice_cols(0, half)?, x.slice_cols(half, half)?, half))
    }

    pub fn apply(&self, e: &Var<'t>) -> Result<Var<'t>> {
        let (e1, e2, _) = Self::halves(e)?;
        let o1 = e1.add(&self.f.forward(&e2)?)?;
        let o2 = e2.add(&self.g.forward(&o1)?)?;
        Ok(concat_cols(&[o1, o2])?)
    }

    pub fn invert(&self, o: &Var<'t>) -> Result<Var<'t>> {
        let (o1, o2, _) = Self::halves(o)?;
        let e2 = o2.add(&self.g.forward(&o1)?.scale(-1.0))?;
        let e1 = o1.add(&self.f.forward(&e2)?.scale(-1.0))?;
        Ok(concat_cols(&[e1, e2])?)
    }
}
