//! Concept module: primitive concept features from key-query message passing
//! between all attributes and objects, in naive or edge-blocked form.
//!
//! For a querying concept `p` with transform `W` (`W_a` when `p` is an
//! attribute, `W_o` when it is an object) the logits over every concept `j`
//! are `tanh(W k_j) . tanh(q_p)`. Attribute and object logits are normalized
//! separately, blocked entries are removed before normalization, and the
//! feature is `LeakyReLU(sum_j beta_j (U_j v_j + b_j))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{next_leaf, normal_tensor, ParamGroup};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::universe::{ConceptKind, Pair, PairUniverse};

/// Message passing variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MpMode {
    Naive,
    Blocked,
}

/// Per-concept key/query/value bundles (rows in concept order: attributes,
/// then objects) and the two shared key transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptParams<T> {
    /// `[n, d]`
    pub keys: Tensor<T>,
    /// `[n, d]`
    pub queries: Tensor<T>,
    /// `[n, d]`
    pub values: Tensor<T>,
    /// `[n, d, d]`
    pub transforms: Tensor<T>,
    /// `[n, d]`
    pub biases: Tensor<T>,
    /// Key transform used when an attribute issues the query, `[d, d]`.
    pub w_attr: Tensor<T>,
    /// Key transform used when an object issues the query, `[d, d]`.
    pub w_obj: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConceptVars {
    pub keys: Var,
    pub queries: Var,
    pub values: Var,
    pub transforms: Var,
    pub biases: Var,
    pub w_attr: Var,
    pub w_obj: Var,
}

impl<T: Real> ConceptParams<T> {
    /// Keys, queries and values ~ N(0, 1/d); transforms are the identity plus
    /// N(0, 0.01) noise; biases zero. The key transforms use N(0, 1/d).
    pub fn init<R: Rng + ?Sized>(rng: &mut R, n_concepts: usize, dim: usize) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        let mut transforms: Tensor<T> = normal_tensor(rng, &[n_concepts, dim, dim], 0.1);
        for c in 0..n_concepts {
            for i in 0..dim {
                transforms.data_mut()[c * dim * dim + i * dim + i] += T::one();
            }
        }
        ConceptParams {
            keys: normal_tensor(rng, &[n_concepts, dim], std),
            queries: normal_tensor(rng, &[n_concepts, dim], std),
            values: normal_tensor(rng, &[n_concepts, dim], std),
            transforms,
            biases: Tensor::zeros(&[n_concepts, dim]),
            w_attr: normal_tensor(rng, &[dim, dim], std),
            w_obj: normal_tensor(rng, &[dim, dim], std),
        }
    }

    pub fn n_concepts(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.keys.shape()[1]
    }
}

impl<T: Real> ParamGroup<T> for ConceptParams<T> {
    type Vars = ConceptVars;

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}keys"), &self.keys));
        out.push((format!("{prefix}queries"), &self.queries));
        out.push((format!("{prefix}values"), &self.values));
        out.push((format!("{prefix}transforms"), &self.transforms));
        out.push((format!("{prefix}biases"), &self.biases));
        out.push((format!("{prefix}w_attr"), &self.w_attr));
        out.push((format!("{prefix}w_obj"), &self.w_obj));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.keys);
        out.push(&mut self.queries);
        out.push(&mut self.values);
        out.push(&mut self.transforms);
        out.push(&mut self.biases);
        out.push(&mut self.w_attr);
        out.push(&mut self.w_obj);
    }

    fn bind_from(&self, leaves: &mut std::slice::Iter<'_, Var>) -> ConceptVars {
        ConceptVars {
            keys: next_leaf(leaves),
            queries: next_leaf(leaves),
            values: next_leaf(leaves),
            transforms: next_leaf(leaves),
            biases: next_leaf(leaves),
            w_attr: next_leaf(leaves),
            w_obj: next_leaf(leaves),
        }
    }
}

/// One attention row to compute: a querying concept and its blocked entries.
#[derive(Clone, Debug)]
pub struct AttentionQuery {
    pub kind: ConceptKind,
    pub id: usize,
    pub blocked: Vec<bool>,
}

impl AttentionQuery {
    pub fn naive(universe: &PairUniverse, kind: ConceptKind, id: usize) -> Result<Self> {
        universe.concept_index(kind, id)?;
        Ok(AttentionQuery {
            kind,
            id,
            blocked: vec![false; universe.n_concepts()],
        })
    }

    /// Query for the `kind` member of `pair`.
    pub fn for_pair(
        universe: &PairUniverse,
        kind: ConceptKind,
        pair: Pair,
        mode: MpMode,
    ) -> Result<Self> {
        let id = match kind {
            ConceptKind::Attribute => pair.attr,
            ConceptKind::Object => pair.obj,
        };
        match mode {
            MpMode::Naive => Self::naive(universe, kind, id),
            MpMode::Blocked => Ok(AttentionQuery {
                kind,
                id,
                blocked: universe.blocked_mask(kind, pair)?,
            }),
        }
    }
}

/// Normalized attention of one concept over all concepts.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult<T> {
    /// Attribute half followed by object half.
    pub beta: Vec<T>,
    pub blocked: Vec<bool>,
}

impl ConceptVars {
    /// Un-normalized logits of every concept as a query, `[n, n]`. Row `i` uses
    /// `W_a` when concept `i` is an attribute and `W_o` otherwise.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, n_attrs: usize) -> Result<Var> {
        let n = g.value(self.keys).shape()[0];
        let q = g.tanh(self.queries)?;

        let wa_t = g.transpose(self.w_attr)?;
        let ka = g.matmul(self.keys, wa_t)?;
        let ka = g.tanh(ka)?;
        let ka_t = g.transpose(ka)?;
        let qa = g.gather_rows(q, (0..n_attrs).collect())?;
        let la = g.matmul(qa, ka_t)?;

        let wo_t = g.transpose(self.w_obj)?;
        let ko = g.matmul(self.keys, wo_t)?;
        let ko = g.tanh(ko)?;
        let ko_t = g.transpose(ko)?;
        let qo = g.gather_rows(q, (n_attrs..n).collect())?;
        let lo = g.matmul(qo, ko_t)?;

        Ok(g.concat(&[la, lo])?)
    }

    /// Transformed values `U_k v_k + b_k` of every concept, `[n, d]`.
    pub fn messages<T: Real>(&self, g: &mut Graph<T>) -> Result<Var> {
        let uv = g.batched_matvec(self.transforms, self.values)?;
        Ok(g.add(uv, self.biases)?)
    }

    /// Normalized attention rows `[queries.len(), n]`.
    pub fn attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        universe: &PairUniverse,
        queries: &[AttentionQuery],
    ) -> Result<Var> {
        let logits = self.logits(g, universe.n_attrs())?;
        self.attention_from_logits(g, logits, universe, queries)
    }

    fn attention_from_logits<T: Real>(
        &self,
        g: &mut Graph<T>,
        logits: Var,
        universe: &PairUniverse,
        queries: &[AttentionQuery],
    ) -> Result<Var> {
        let n = universe.n_concepts();
        let mut rows = Vec::with_capacity(queries.len());
        let mut blocked = Vec::with_capacity(queries.len() * n);
        for q in queries {
            rows.push(universe.concept_index(q.kind, q.id)?);
            if q.blocked.len() != n {
                return Err(Error::Universe(format!(
                    "mask of length {} for {n} concepts",
                    q.blocked.len()
                )));
            }
            blocked.extend_from_slice(&q.blocked);
        }
        let selected = g.gather_rows(logits, rows)?;
        Ok(g.masked_softmax(selected, vec![universe.n_attrs(), n], blocked)?)
    }

    /// `LeakyReLU(beta . messages)`, one feature row per attention row.
    pub fn gather<T: Real>(
        &self,
        g: &mut Graph<T>,
        beta: Var,
        messages: Var,
        slope: T,
    ) -> Result<Var> {
        let mixed = g.matmul(beta, messages)?;
        Ok(g.leaky_relu(mixed, slope)?)
    }

    /// Features for arbitrary queries, `[queries.len(), d]`.
    pub fn features<T: Real>(
        &self,
        g: &mut Graph<T>,
        universe: &PairUniverse,
        queries: &[AttentionQuery],
        slope: T,
    ) -> Result<Var> {
        let beta = self.attention(g, universe, queries)?;
        let messages = self.messages(g)?;
        self.gather(g, beta, messages, slope)
    }

    /// Attribute and object features for each pair, each `[pairs.len(), d]`.
    pub fn pair_features<T: Real>(
        &self,
        g: &mut Graph<T>,
        universe: &PairUniverse,
        pairs: &[Pair],
        mode: MpMode,
        slope: T,
    ) -> Result<(Var, Var)> {
        let mut queries = Vec::with_capacity(2 * pairs.len());
        for &p in pairs {
            queries.push(AttentionQuery::for_pair(
                universe,
                ConceptKind::Attribute,
                p,
                mode,
            )?);
        }
        for &p in pairs {
            queries.push(AttentionQuery::for_pair(
                universe,
                ConceptKind::Object,
                p,
                mode,
            )?);
        }
        let rows = self.features(g, universe, &queries, slope)?;
        let k = pairs.len();
        let attr = g.gather_rows(rows, (0..k).collect())?;
        let obj = g.gather_rows(rows, (k..2 * k).collect())?;
        Ok((attr, obj))
    }

    /// Naive features of every concept in concept order, `[n, d]`.
    pub fn naive_features<T: Real>(
        &self,
        g: &mut Graph<T>,
        universe: &PairUniverse,
        slope: T,
    ) -> Result<Var> {
        let queries = (0..universe.n_attrs())
            .map(|a| AttentionQuery::naive(universe, ConceptKind::Attribute, a))
            .chain(
                (0..universe.n_objs())
                    .map(|o| AttentionQuery::naive(universe, ConceptKind::Object, o)),
            )
            .collect::<Result<Vec<_>>>()?;
        self.features(g, universe, &queries, slope)
    }
}

fn check_vocab<T: Real>(params: &ConceptParams<T>, universe: &PairUniverse) -> Result<()> {
    if params.n_concepts() != universe.n_concepts() {
        return Err(Error::Universe(format!(
            "concept parameters cover {} concepts but the universe has {}",
            params.n_concepts(),
            universe.n_concepts()
        )));
    }
    Ok(())
}

fn attention_value<T: Real>(
    params: &ConceptParams<T>,
    universe: &PairUniverse,
    query: AttentionQuery,
) -> Result<AttentionResult<T>> {
    check_vocab(params, universe)?;
    let mut g = Graph::new();
    let (vars, _) = crate::nn::bind(params, &mut g);
    let blocked = query.blocked.clone();
    let beta = vars.attention(&mut g, universe, &[query])?;
    Ok(AttentionResult {
        beta: g.value(beta).data().to_vec(),
        blocked,
    })
}

/// Attention of a concept without any blocking.
pub fn attention_naive<T: Real>(
    params: &ConceptParams<T>,
    universe: &PairUniverse,
    kind: ConceptKind,
    id: usize,
) -> Result<AttentionResult<T>> {
    attention_value(params, universe, AttentionQuery::naive(universe, kind, id)?)
}

/// Edge-blocked attention of concept `id` when it appears in an input pair
/// together with `partner`.
pub fn attention_blocked<T: Real>(
    params: &ConceptParams<T>,
    universe: &PairUniverse,
    kind: ConceptKind,
    id: usize,
    partner: usize,
) -> Result<AttentionResult<T>> {
    let pair = match kind {
        ConceptKind::Attribute => Pair::new(id, partner),
        ConceptKind::Object => Pair::new(partner, id),
    };
    attention_value(
        params,
        universe,
        AttentionQuery::for_pair(universe, kind, pair, MpMode::Blocked)?,
    )
}

/// Feature produced by a given attention vector.
pub fn gather_feature<T: Real>(
    attention: &AttentionResult<T>,
    params: &ConceptParams<T>,
    slope: T,
) -> Result<Vec<T>> {
    let n = params.n_concepts();
    if attention.beta.len() != n {
        return Err(Error::Universe(format!(
            "attention of length {} for {n} concepts",
            attention.beta.len()
        )));
    }
    let mut g = Graph::new();
    let (vars, _) = crate::nn::bind(params, &mut g);
    let beta = g.constant(Tensor::new(vec![1, n], attention.beta.clone())?);
    let messages = vars.messages(&mut g)?;
    let x = vars.gather(&mut g, beta, messages, slope)?;
    Ok(g.value(x).data().to_vec())
}

/// Attribute and object concept features for a candidate pair.
pub fn pair_concept_features<T: Real>(
    pair: Pair,
    universe: &PairUniverse,
    params: &ConceptParams<T>,
    mode: MpMode,
    slope: T,
) -> Result<(Vec<T>, Vec<T>)> {
    if !universe.is_candidate(pair) {
        return Err(Error::NotCandidate(pair));
    }
    check_vocab(params, universe)?;
    let mut g = Graph::new();
    let (vars, _) = crate::nn::bind(params, &mut g);
    let (a, o) = vars.pair_features(&mut g, universe, &[pair], mode, slope)?;
    Ok((g.value(a).data().to_vec(), g.value(o).data().to_vec()))
}
