//! Attribute/object vocabularies and the seen/unseen composite pair sets.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Composite concept `<attribute, object>` by vocabulary index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub attr: usize,
    pub obj: usize,
}

impl Pair {
    pub fn new(attr: usize, obj: usize) -> Self {
        Pair { attr, obj }
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}, {}>", self.attr, self.obj)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptKind {
    Attribute,
    Object,
}

impl ConceptKind {
    pub fn name(self) -> &'static str {
        match self {
            ConceptKind::Attribute => "attribute",
            ConceptKind::Object => "object",
        }
    }
}

/// Vocabularies plus the seen set K and unseen set U. Candidate pairs are
/// `K` followed by `U`; a pair's position in that list is its pair id.
#[derive(Clone, Debug)]
pub struct PairUniverse {
    attributes: Vec<String>,
    objects: Vec<String>,
    seen: Vec<Pair>,
    unseen: Vec<Pair>,
    seen_set: HashSet<Pair>,
    unseen_set: HashSet<Pair>,
}

impl PairUniverse {
    pub fn new(
        attributes: Vec<String>,
        objects: Vec<String>,
        seen: Vec<Pair>,
        unseen: Vec<Pair>,
    ) -> Result<Self> {
        if attributes.is_empty() || objects.is_empty() {
            return Err(Error::Universe("vocabularies must be non-empty".into()));
        }
        let check = |p: &Pair| -> Result<()> {
            if p.attr >= attributes.len() || p.obj >= objects.len() {
                return Err(Error::Universe(format!(
                    "pair {p} references an id outside {} attributes / {} objects",
                    attributes.len(),
                    objects.len()
                )));
            }
            Ok(())
        };
        let mut seen_set = HashSet::new();
        for p in &seen {
            check(p)?;
            if !seen_set.insert(*p) {
                return Err(Error::Universe(format!("seen pair {p} listed twice")));
            }
        }
        let mut unseen_set = HashSet::new();
        for p in &unseen {
            check(p)?;
            if seen_set.contains(p) {
                return Err(Error::Universe(format!("pair {p} is both seen and unseen")));
            }
            if !unseen_set.insert(*p) {
                return Err(Error::Universe(format!("unseen pair {p} listed twice")));
            }
        }
        Ok(PairUniverse {
            attributes,
            objects,
            seen,
            unseen,
            seen_set,
            unseen_set,
        })
    }

    /// Universe with generated names `a0..`, `o0..`.
    pub fn unnamed(
        n_attrs: usize,
        n_objs: usize,
        seen: Vec<Pair>,
        unseen: Vec<Pair>,
    ) -> Result<Self> {
        Self::new(
            (0..n_attrs).map(|i| format!("a{i}")).collect(),
            (0..n_objs).map(|i| format!("o{i}")).collect(),
            seen,
            unseen,
        )
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn n_attrs(&self) -> usize {
        self.attributes.len()
    }

    pub fn n_objs(&self) -> usize {
        self.objects.len()
    }

    /// Attributes first, then objects.
    pub fn n_concepts(&self) -> usize {
        self.attributes.len() + self.objects.len()
    }

    pub fn seen(&self) -> &[Pair] {
        &self.seen
    }

    pub fn unseen(&self) -> &[Pair] {
        &self.unseen
    }

    pub fn candidates(&self) -> Vec<Pair> {
        self.seen.iter().chain(&self.unseen).copied().collect()
    }

    pub fn n_candidates(&self) -> usize {
        self.seen.len() + self.unseen.len()
    }

    pub fn is_seen(&self, p: Pair) -> bool {
        self.seen_set.contains(&p)
    }

    pub fn is_unseen(&self, p: Pair) -> bool {
        self.unseen_set.contains(&p)
    }

    pub fn is_candidate(&self, p: Pair) -> bool {
        self.is_seen(p) || self.is_unseen(p)
    }

    /// Row index of a concept in the stacked key/query/value matrices.
    pub fn concept_index(&self, kind: ConceptKind, id: usize) -> Result<usize> {
        match kind {
            ConceptKind::Attribute if id < self.n_attrs() => Ok(id),
            ConceptKind::Object if id < self.n_objs() => Ok(self.n_attrs() + id),
            _ => Err(Error::UnknownConcept {
                kind: kind.name(),
                id,
                size: match kind {
                    ConceptKind::Attribute => self.n_attrs(),
                    ConceptKind::Object => self.n_objs(),
                },
            }),
        }
    }

    /// Edge-blocking mask for the attention of one member of `pair`.
    ///
    /// Entries follow concept order (attributes, then objects). Same-type
    /// entries are never blocked. For the attribute `p` of input `<p, q>`, the
    /// object entry `i` is blocked iff `<p, i>` is unseen or `i == q`; the
    /// object side is symmetric.
    pub fn blocked_mask(&self, kind: ConceptKind, pair: Pair) -> Result<Vec<bool>> {
        self.concept_index(ConceptKind::Attribute, pair.attr)?;
        self.concept_index(ConceptKind::Object, pair.obj)?;
        let na = self.n_attrs();
        let mut mask = vec![false; self.n_concepts()];
        match kind {
            ConceptKind::Attribute => {
                for obj in 0..self.n_objs() {
                    mask[na + obj] = obj == pair.obj || self.is_unseen(Pair::new(pair.attr, obj));
                }
            }
            ConceptKind::Object => {
                for (attr, m) in mask.iter_mut().enumerate().take(na) {
                    *m = attr == pair.attr || self.is_unseen(Pair::new(attr, pair.obj));
                }
            }
        }
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three attributes {1,2,3} and two objects {4,5} mapped to 0-based ids,
    /// with <1,5> and <3,4> unseen.
    fn mini_world() -> PairUniverse {
        let seen = vec![
            Pair::new(0, 0),
            Pair::new(1, 0),
            Pair::new(1, 1),
            Pair::new(2, 1),
        ];
        let unseen = vec![Pair::new(0, 1), Pair::new(2, 0)];
        PairUniverse::unnamed(3, 2, seen, unseen).unwrap()
    }

    #[test]
    fn attribute_mask_blocks_input_partner_and_unseen() {
        let u = mini_world();
        let mask = u
            .blocked_mask(ConceptKind::Attribute, Pair::new(0, 0))
            .unwrap();
        assert_eq!(mask, vec![false, false, false, true, true]);
    }

    #[test]
    fn object_mask_blocks_input_partner_and_unseen() {
        let u = mini_world();
        let mask = u
            .blocked_mask(ConceptKind::Object, Pair::new(0, 0))
            .unwrap();
        assert_eq!(mask, vec![true, false, true, false, false]);
    }

    #[test]
    fn overlapping_sets_are_rejected() {
        let err = PairUniverse::unnamed(2, 2, vec![Pair::new(0, 0)], vec![Pair::new(0, 0)]);
        assert!(matches!(err, Err(Error::Universe(_))));
        let err = PairUniverse::unnamed(2, 2, vec![Pair::new(0, 2)], vec![]);
        assert!(matches!(err, Err(Error::Universe(_))));
    }

    #[test]
    fn unknown_concept_is_an_error() {
        let u = mini_world();
        assert!(matches!(
            u.concept_index(ConceptKind::Object, 2),
            Err(Error::UnknownConcept {
                kind: "object",
                id: 2,
                size: 2
            })
        ));
    }
}
