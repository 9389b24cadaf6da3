//! Binding adapter parameter sets into a [`Plugins`] stack on a tape.

use super::{AdapterParams, BoundAdapter, LanguageRouting, Plugins};
use crate::tensor::Tape;

/// Which language adapters a stack uses.
#[derive(Debug, Clone, Copy)]
pub enum LanguageChoice<'a> {
    None,
    Single(&'a AdapterParams),
    Split {
        query: &'a AdapterParams,
        document: &'a AdapterParams,
    },
}

/// Borrowed adapter parameters forming one composition.
#[derive(Debug, Clone, Copy)]
pub struct AdapterStack<'a> {
    pub language: LanguageChoice<'a>,
    pub ranking: Option<&'a AdapterParams>,
    pub drop_first_n: usize,
    pub invertible: bool,
}

impl<'a> AdapterStack<'a> {
    pub fn language(la: &'a AdapterParams) -> Self {
        Self {
            language: LanguageChoice::Single(la),
            ranking: None,
            drop_first_n: 0,
            invertible: la.invertible.is_some(),
        }
    }

    pub fn stacked(la: &'a AdapterParams, ra: &'a AdapterParams) -> Self {
        Self {
            ranking: Some(ra),
            ..Self::language(la)
        }
    }

    pub fn split(
        query: &'a AdapterParams,
        document: &'a AdapterParams,
        ra: Option<&'a AdapterParams>,
    ) -> Self {
        Self {
            language: LanguageChoice::Split { query, document },
            ranking: ra,
            drop_first_n: 0,
            invertible: query.invertible.is_some() && document.invertible.is_some(),
        }
    }

    /// Runs the first `drop_first_n` layers without adapters. The invertible
    /// embedding adapter sits below layer 0 and is dropped with it.
    pub fn with_drop(self, drop_first_n: usize) -> Self {
        Self {
            drop_first_n,
            invertible: self.invertible && drop_first_n == 0,
            ..self
        }
    }

    /// Binds every adapter as a constant.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundStack<'t> {
        self.bind_with(tape, false, false)
    }

    /// Binds the language adapters and the ranking adapter with separate
    /// trainability.
    pub fn bind_with<'t>(
        &self,
        tape: &'t Tape,
        train_language: bool,
        train_ranking: bool,
    ) -> BoundStack<'t> {
        let (query, document) = match self.language {
            LanguageChoice::None => (None, None),
            LanguageChoice::Single(la) => (Some(la.bind(tape, train_language)), None),
            LanguageChoice::Split { query, document } => (
                Some(query.bind(tape, train_language)),
                Some(document.bind(tape, train_language)),
            ),
        };
        BoundStack {
            query,
            document,
            ranking: self.ranking.map(|ra| ra.bind(tape, train_ranking)),
            drop_first_n: self.drop_first_n,
            invertible: self.invertible,
        }
    }
}

/// Owned bound adapters; hands out [`Plugins`] borrowing from it.
#[derive(Debug, Clone)]
pub struct BoundStack<'t> {
    pub query: Option<BoundAdapter<'t>>,
    pub document: Option<BoundAdapter<'t>>,
    pub ranking: Option<BoundAdapter<'t>>,
    pub drop_first_n: usize,
    pub invertible: bool,
}

impl<'t> BoundStack<'t> {
    pub fn plugins(&self) -> Plugins<'_, 't> {
        let language = match (&self.query, &self.document) {
            (Some(q), Some(d)) => LanguageRouting::Split {
                query: q,
                document: d,
            },
            (Some(q), None) => LanguageRouting::Single(q),
            _ => LanguageRouting::None,
        };
        Plugins {
            language,
            ranking: self.ranking.as_ref(),
            drop_first_n: self.drop_first_n,
            invertible: self.invertible,
        }
    }
}
