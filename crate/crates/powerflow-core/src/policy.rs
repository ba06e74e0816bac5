//! Autoregressive softmax policies over enumerable universes.
//!
//! Both policy families keep an explicit logit table keyed by
//! `(query, conditioning class)` and are small enough to materialize every
//! reachable class eagerly:
//!
//! * [`TabularPolicy`] — one logit vector per full prefix; can represent any
//!   distribution over the universe.
//! * [`BigramPolicy`] — one logit vector per last token (plus a start class);
//!   deliberately capacity-limited, useful as a contrast model.
//!
//! Gradients are exact: the score of one generation step is
//! `onehot(chosen) - softmax(logits)` at that step's class, so no autodiff is
//! involved anywhere.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand_core::RngCore;

use crate::math;
use crate::seqspace::{
    enumerate_prefixes, QueryId, SeqSpaceError, Termination, Trajectory, Vocab,
};

/// Conditioning class key: the full prefix for tabular policies, the
/// last-token class (empty = start) for bigram policies.
pub type ParamKey = (QueryId, Vec<usize>);

/// Which conditioning scheme a policy's keys use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    Prefix,
    LastToken,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyError {
    UnknownQuery { query: usize, num_queries: usize },
    UnknownKey { key: ParamKey },
    Frozen,
    BadTemperature(f64),
    BadLogits(&'static str),
    Trajectory(SeqSpaceError),
    Parse { line: usize, msg: String },
}

impl fmt::Display for PolicyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyError::UnknownQuery { query, num_queries } => {
                write!(f, "query {query} out of range (policy has {num_queries})")
            }
            PolicyError::UnknownKey { key } => {
                write!(f, "no logits for query {} prefix {:?}", key.0 .0, key.1)
            }
            PolicyError::Frozen => write!(f, "policy is frozen"),
            PolicyError::BadTemperature(t) => write!(f, "temperature must be positive and finite, got {t}"),
            PolicyError::BadLogits(msg) => write!(f, "bad logits: {msg}"),
            PolicyError::Trajectory(e) => write!(f, "{e}"),
            PolicyError::Parse { line, msg } => write!(f, "policy text line {line}: {msg}"),
        }
    }
}

impl core::error::Error for PolicyError {}

impl From<SeqSpaceError> for PolicyError {
    fn from(e: SeqSpaceError) -> Self {
        PolicyError::Trajectory(e)
    }
}

/// Sparse per-parameter gradient, keyed like the owning policy's logit table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGradient {
    entries: BTreeMap<ParamKey, Vec<f64>>,
}

impl ParamGradient {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `scale * block` into the entry for `key`, creating it as zeros first.
    pub fn accumulate_scaled(&mut self, key: ParamKey, block: &[f64], scale: f64) {
        let entry = self.entries.entry(key).or_insert_with(|| vec![0.0; block.len()]);
        debug_assert_eq!(entry.len(), block.len());
        for (e, b) in entry.iter_mut().zip(block) {
            *e += scale * b;
        }
    }

    pub fn accumulate(&mut self, key: ParamKey, block: &[f64]) {
        self.accumulate_scaled(key, block, 1.0);
    }

    /// `self += scale * other`, merging key sets.
    pub fn add_scaled(&mut self, other: &ParamGradient, scale: f64) {
        for (key, block) in &other.entries {
            self.accumulate_scaled(key.clone(), block, scale);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for block in self.entries.values_mut() {
            for v in block.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn get(&self, key: &ParamKey) -> Option<&[f64]> {
        self.entries.get(key).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &[f64])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest absolute coordinate; 0 for an empty gradient.
    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for block in self.entries.values() {
            for &v in block {
                let a = if v < 0.0 { -v } else { v };
                if a > m {
                    m = a;
                }
            }
        }
        m
    }

    /// Max absolute difference against another gradient over the union of keys.
    pub fn max_abs_diff(&self, other: &ParamGradient) -> f64 {
        let mut diff = self.clone();
        diff.add_scaled(other, -1.0);
        diff.max_abs()
    }
}

/// Shared behaviour of the enumerable softmax policy families.
///
/// `log_prob` and `sample` follow the termination rules of the universe: the
/// trailing EOS token is an ordinary generation step, while a force-stop at
/// `max_len` contributes no probability factor at all.
pub trait AutoregressivePolicy: Clone {
    fn vocab(&self) -> Vocab;
    fn max_len(&self) -> usize;
    fn num_queries(&self) -> usize;
    fn conditioning(&self) -> Conditioning;
    fn is_frozen(&self) -> bool;

    /// The conditioning class whose logits govern the next token after `prefix`.
    fn param_key(&self, query: QueryId, prefix: &[usize]) -> Result<ParamKey, PolicyError>;

    fn logits_by_key(&self, key: &ParamKey) -> Result<&[f64], PolicyError>;

    /// Mutable access for optimizers; fails on frozen policies.
    fn logits_by_key_mut(&mut self, key: &ParamKey) -> Result<&mut Vec<f64>, PolicyError>;

    /// All conditioning classes, in canonical (sorted) order.
    fn param_keys(&self) -> Vec<ParamKey>;

    /// Value-equal copy whose logits refuse mutation.
    fn clone_frozen(&self) -> Self;

    /// Value-equal copy with mutation re-enabled.
    fn trainable_clone(&self) -> Self;

    fn check_query(&self, query: QueryId) -> Result<(), PolicyError> {
        if query.0 >= self.num_queries() {
            return Err(PolicyError::UnknownQuery { query: query.0, num_queries: self.num_queries() });
        }
        Ok(())
    }

    fn logits(&self, query: QueryId, prefix: &[usize]) -> Result<&[f64], PolicyError> {
        let key = self.param_key(query, prefix)?;
        self.logits_by_key(&key)
    }

    /// softmax(logits / temperature) over the vocabulary.
    fn next_token_dist(&self, query: QueryId, prefix: &[usize], temperature: f64) -> Result<Vec<f64>, PolicyError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(PolicyError::BadTemperature(temperature));
        }
        Ok(math::softmax(self.logits(query, prefix)?, temperature))
    }

    /// Exact log-probability of a complete trajectory at temperature 1.
    fn log_prob(&self, query: QueryId, y: &Trajectory) -> Result<f64, PolicyError> {
        y.validate(&self.vocab(), self.max_len())?;
        let mut lp = 0.0;
        for t in 0..y.len() {
            let logits = self.logits(query, &y.tokens[..t])?;
            lp += math::log_softmax(logits)[y.tokens[t]];
        }
        Ok(lp)
    }

    /// Exact score vector: per visited class, `onehot(chosen) - softmax(logits)`,
    /// accumulated when a class repeats along the trajectory.
    fn grad_log_prob(&self, query: QueryId, y: &Trajectory) -> Result<ParamGradient, PolicyError> {
        y.validate(&self.vocab(), self.max_len())?;
        let mut grad = ParamGradient::new();
        for t in 0..y.len() {
            let key = self.param_key(query, &y.tokens[..t])?;
            let probs = math::softmax(self.logits_by_key(&key)?, 1.0);
            let mut block: Vec<f64> = probs.iter().map(|p| -p).collect();
            block[y.tokens[t]] += 1.0;
            grad.accumulate(key, &block);
        }
        Ok(grad)
    }

    /// Ancestral sampling at the given temperature; deterministic given the RNG.
    fn sample(&self, query: QueryId, temperature: f64, rng: &mut impl RngCore) -> Result<Trajectory, PolicyError> {
        self.check_query(query)?;
        let eos = self.vocab().eos_id;
        let mut tokens: Vec<usize> = Vec::new();
        loop {
            if tokens.len() == self.max_len() {
                return Ok(Trajectory { tokens, terminated_by: Termination::MaxLen });
            }
            let dist = self.next_token_dist(query, &tokens, temperature)?;
            let u = math::unit_f64(rng);
            let mut acc = 0.0;
            let mut chosen = dist.len() - 1; // guards against fp residue at u ~ 1
            for (i, p) in dist.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            tokens.push(chosen);
            if chosen == eos {
                return Ok(Trajectory { tokens, terminated_by: Termination::Eos });
            }
        }
    }
}

fn validate_block(vocab: &Vocab, block: &[f64]) -> Result<(), PolicyError> {
    if block.len() != vocab.size {
        return Err(PolicyError::BadLogits("logit vector length differs from vocab size"));
    }
    if block.iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::BadLogits("logits must be finite"));
    }
    Ok(())
}

/// Fully prefix-conditioned softmax policy; one logit vector per reachable
/// non-terminal prefix per query, all materialized at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab: Vocab,
    max_len: usize,
    num_queries: usize,
    table: BTreeMap<ParamKey, Vec<f64>>,
    frozen: bool,
}

impl TabularPolicy {
    /// Builds the full table by calling `fill` for every (query, prefix).
    pub fn from_fn(
        vocab: Vocab,
        max_len: usize,
        num_queries: usize,
        mut fill: impl FnMut(QueryId, &[usize]) -> Vec<f64>,
    ) -> Result<Self, PolicyError> {
        if num_queries == 0 {
            return Err(PolicyError::BadLogits("policy needs at least one query"));
        }
        let prefixes = enumerate_prefixes(&vocab, max_len)?;
        let mut table = BTreeMap::new();
        for q in 0..num_queries {
            for prefix in &prefixes {
                let block = fill(QueryId(q), prefix);
                validate_block(&vocab, &block)?;
                table.insert((QueryId(q), prefix.clone()), block);
            }
        }
        Ok(TabularPolicy { vocab, max_len, num_queries, table, frozen: false })
    }

    /// All-zero logits: uniform conditionals everywhere.
    pub fn zeros(vocab: Vocab, max_len: usize, num_queries: usize) -> Result<Self, PolicyError> {
        let size = vocab.size;
        Self::from_fn(vocab, max_len, num_queries, |_, _| vec![0.0; size])
    }

    pub fn set_logits(&mut self, query: QueryId, prefix: &[usize], block: Vec<f64>) -> Result<(), PolicyError> {
        if self.frozen {
            return Err(PolicyError::Frozen);
        }
        validate_block(&self.vocab, &block)?;
        let key = self.param_key(query, prefix)?;
        match self.table.get_mut(&key) {
            Some(slot) => {
                *slot = block;
                Ok(())
            }
            None => Err(PolicyError::UnknownKey { key }),
        }
    }

    /// Multiplies every logit by `factor` (the per-step tempering operation).
    pub fn scale_logits(&mut self, factor: f64) -> Result<(), PolicyError> {
        if self.frozen {
            return Err(PolicyError::Frozen);
        }
        if !factor.is_finite() {
            return Err(PolicyError::BadLogits("scale factor must be finite"));
        }
        for block in self.table.values_mut() {
            for v in block.iter_mut() {
                *v *= factor;
            }
        }
        Ok(())
    }
}

impl AutoregressivePolicy for TabularPolicy {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn num_queries(&self) -> usize {
        self.num_queries
    }

    fn conditioning(&self) -> Conditioning {
        Conditioning::Prefix
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn param_key(&self, query: QueryId, prefix: &[usize]) -> Result<ParamKey, PolicyError> {
        self.check_query(query)?;
        Ok((query, prefix.to_vec()))
    }

    fn logits_by_key(&self, key: &ParamKey) -> Result<&[f64], PolicyError> {
        self.table
            .get(key)
            .map(|v| v.as_slice())
            .ok_or_else(|| PolicyError::UnknownKey { key: key.clone() })
    }

    fn logits_by_key_mut(&mut self, key: &ParamKey) -> Result<&mut Vec<f64>, PolicyError> {
        if self.frozen {
            return Err(PolicyError::Frozen);
        }
        self.table.get_mut(key).ok_or_else(|| PolicyError::UnknownKey { key: key.clone() })
    }

    fn param_keys(&self) -> Vec<ParamKey> {
        self.table.keys().cloned().collect()
    }

    fn clone_frozen(&self) -> Self {
        let mut c = self.clone();
        c.frozen = true;
        c
    }

    fn trainable_clone(&self) -> Self {
        let mut c = self.clone();
        c.frozen = false;
        c
    }
}

/// Last-token-conditioned softmax policy. Every prefix ending in the same
/// token shares one logit vector; the empty prefix has its own start class.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramPolicy {
    vocab: Vocab,
    max_len: usize,
    num_queries: usize,
    table: BTreeMap<ParamKey, Vec<f64>>,
    frozen: bool,
}

impl BigramPolicy {
    /// Builds the table by calling `fill` for the start class (`&[]`) and for
    /// each non-EOS last-token class (`&[t]`).
    pub fn from_fn(
        vocab: Vocab,
        max_len: usize,
        num_queries: usize,
        mut fill: impl FnMut(QueryId, &[usize]) -> Vec<f64>,
    ) -> Result<Self, PolicyError> {
        if num_queries == 0 {
            return Err(PolicyError::BadLogits("policy needs at least one query"));
        }
        if max_len == 0 {
            return Err(PolicyError::Trajectory(SeqSpaceError::BadMaxLen));
        }
        let mut classes: Vec<Vec<usize>> = vec![Vec::new()];
        if max_len >= 2 {
            for t in 0..vocab.size {
                if t != vocab.eos_id {
                    classes.push(vec![t]);
                }
            }
        }
        let mut table = BTreeMap::new();
        for q in 0..num_queries {
            for class in &classes {
                let block = fill(QueryId(q), class);
                validate_block(&vocab, &block)?;
                table.insert((QueryId(q), class.clone()), block);
            }
        }
        Ok(BigramPolicy { vocab, max_len, num_queries, table, frozen: false })
    }

    pub fn zeros(vocab: Vocab, max_len: usize, num_queries: usize) -> Result<Self, PolicyError> {
        let size = vocab.size;
        Self::from_fn(vocab, max_len, num_queries, |_, _| vec![0.0; size])
    }
}

impl AutoregressivePolicy for BigramPolicy {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn num_queries(&self) -> usize {
        self.num_queries
    }

    fn conditioning(&self) -> Conditioning {
        Conditioning::LastToken
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn param_key(&self, query: QueryId, prefix: &[usize]) -> Result<ParamKey, PolicyError> {
        self.check_query(query)?;
        let class = match prefix.last() {
            Some(&t) => vec![t],
            None => Vec::new(),
        };
        Ok((query, class))
    }

    fn logits_by_key(&self, key: &ParamKey) -> Result<&[f64], PolicyError> {
        self.table
            .get(key)
            .map(|v| v.as_slice())
            .ok_or_else(|| PolicyError::UnknownKey { key: key.clone() })
    }

    fn logits_by_key_mut(&mut self, key: &ParamKey) -> Result<&mut Vec<f64>, PolicyError> {
        if self.frozen {
            return Err(PolicyError::Frozen);
        }
        self.table.get_mut(key).ok_or_else(|| PolicyError::UnknownKey { key: key.clone() })
    }

    fn param_keys(&self) -> Vec<ParamKey> {
        self.table.keys().cloned().collect()
    }

    fn clone_frozen(&self) -> Self {
        let mut c = self.clone();
        c.frozen = true;
        c
    }

    fn trainable_clone(&self) -> Self {
        let mut c = self.clone();
        c.frozen = false;
        c
    }
}

// ---------------------------------------------------------------------------
// Text serialization
//
// Header lines, then one line per conditioning class:
//
//     powerflow-policy v1
//     conditioning prefix
//     vocab_size 3
//     eos_id 0
//     marker_id none
//     max_len 4
//     queries 2
//     0 / · : 1.2500000000000000e-1 ...
//     0 / 1 2 : ...
//
// "·" denotes the empty prefix/start class. Logits are printed with 17
// significant digits, so values round-trip bit-exactly.
// ---------------------------------------------------------------------------

fn fmt_logit(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_key_line(key: &ParamKey, block: &[f64]) -> String {
    let prefix = if key.1.is_empty() {
        "·".to_string()
    } else {
        key.1.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
    };
    let vals = block.iter().map(|&v| fmt_logit(v)).collect::<Vec<_>>().join(" ");
    format!("{} / {} : {}", key.0 .0, prefix, vals)
}

/// Serializes any policy into the text format above (complete table).
pub fn policy_to_text<P: AutoregressivePolicy>(policy: &P) -> String {
    let v = policy.vocab();
    let mut out = String::new();
    out.push_str("powerflow-policy v1\n");
    out.push_str(match policy.conditioning() {
        Conditioning::Prefix => "conditioning prefix\n",
        Conditioning::LastToken => "conditioning last_token\n",
    });
    out.push_str(&format!("vocab_size {}\n", v.size));
    out.push_str(&format!("eos_id {}\n", v.eos_id));
    match v.marker_id {
        Some(m) => out.push_str(&format!("marker_id {m}\n")),
        None => out.push_str("marker_id none\n"),
    }
    out.push_str(&format!("max_len {}\n", policy.max_len()));
    out.push_str(&format!("queries {}\n", policy.num_queries()));
    for key in policy.param_keys() {
        let block = policy.logits_by_key(&key).expect("own key");
        out.push_str(&fmt_key_line(&key, block));
        out.push('\n');
    }
    out
}

/// A policy parsed back from text; the header decides the family.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedPolicy {
    Tabular(TabularPolicy),
    Bigram(BigramPolicy),
}

impl LoadedPolicy {
    pub fn vocab(&self) -> Vocab {
        match self {
            LoadedPolicy::Tabular(p) => p.vocab(),
            LoadedPolicy::Bigram(p) => p.vocab(),
        }
    }
}

fn parse_err(line: usize, msg: impl fmt::Display) -> PolicyError {
    PolicyError::Parse { line, msg: msg.to_string() }
}

/// Parses the text format written by [`policy_to_text`]. Missing classes are
/// an error: the table must be complete.
pub fn policy_from_text(text: &str) -> Result<LoadedPolicy, PolicyError> {
    let mut lines = text.lines().enumerate();

    let mut header: BTreeMap<String, String> = BTreeMap::new();
    let (_, magic) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
    if magic.trim() != "powerflow-policy v1" {
        return Err(parse_err(1, "expected header 'powerflow-policy v1'"));
    }
    let mut entries: Vec<(usize, ParamKey, Vec<f64>)> = Vec::new();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.contains(" / ") {
            entries.push(parse_entry(lineno, line)?);
        } else {
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| parse_err(lineno, "expected 'key value'"))?;
            header.insert(key.to_string(), value.trim().to_string());
        }
    }

    let get = |k: &str| -> Result<&String, PolicyError> {
        header.get(k).ok_or_else(|| parse_err(0, format!("missing header field '{k}'")))
    };
    let parse_usize = |k: &str| -> Result<usize, PolicyError> {
        get(k)?.parse::<usize>().map_err(|e| parse_err(0, format!("field '{k}': {e}")))
    };

    let size = parse_usize("vocab_size")?;
    let eos_id = parse_usize("eos_id")?;
    let marker = match get("marker_id")?.as_str() {
        "none" => None,
        s => Some(s.parse::<usize>().map_err(|e| parse_err(0, format!("field 'marker_id': {e}")))?),
    };
    let max_len = parse_usize("max_len")?;
    let num_queries = parse_usize("queries")?;
    let vocab = Vocab::new(size, eos_id, marker)?;

    let mut map: BTreeMap<ParamKey, Vec<f64>> = BTreeMap::new();
    for (lineno, key, block) in entries {
        if block.len() != size {
            return Err(parse_err(lineno, "logit count differs from vocab_size"));
        }
        if map.insert(key, block).is_some() {
            return Err(parse_err(lineno, "duplicate entry"));
        }
    }

    let lookup = |q: QueryId, class: &[usize]| -> Vec<f64> {
        map.get(&(q, class.to_vec())).cloned().unwrap_or_default()
    };

    let built: LoadedPolicy = match get("conditioning")?.as_str() {
        "prefix" => LoadedPolicy::Tabular(TabularPolicy::from_fn(vocab, max_len, num_queries, |q, p| lookup(q, p))?),
        "last_token" => LoadedPolicy::Bigram(BigramPolicy::from_fn(vocab, max_len, num_queries, |q, p| lookup(q, p))?),
        other => return Err(parse_err(0, format!("unknown conditioning '{other}'"))),
    };
    // from_fn rejects empty vectors (length mismatch), so completeness is
    // already enforced; the map may still hold unreachable extra keys.
    let expected: usize = match &built {
        LoadedPolicy::Tabular(p) => p.param_keys().len(),
        LoadedPolicy::Bigram(p) => p.param_keys().len(),
    };
    if map.len() != expected {
        return Err(parse_err(0, format!("expected {expected} table entries, found {}", map.len())));
    }
    Ok(built)
}

fn parse_entry(lineno: usize, line: &str) -> Result<(usize, ParamKey, Vec<f64>), PolicyError> {
    let (qpart, rest) = line.split_once(" / ").ok_or_else(|| parse_err(lineno, "missing ' / '"))?;
    let (prefix_part, vals_part) = rest.split_once(" : ").ok_or_else(|| parse_err(lineno, "missing ' : '"))?;
    let query = qpart
        .trim()
        .parse::<usize>()
        .map_err(|e| parse_err(lineno, format!("query id: {e}")))?;
    let prefix: Vec<usize> = if prefix_part.trim() == "·" {
        Vec::new()
    } else {
        prefix_part
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|e| parse_err(lineno, format!("prefix token: {e}"))))
            .collect::<Result<_, _>>()?
    };
    let vals: Vec<f64> = vals_part
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|e| parse_err(lineno, format!("logit: {e}"))))
        .collect::<Result<_, _>>()?;
    Ok((lineno, (QueryId(query), prefix), vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::derive_stream;
    use crate::seqspace::enumerate_trajectories;

    fn vocab2() -> Vocab {
        Vocab::plain(2, 0).unwrap()
    }

    fn uniform2() -> TabularPolicy {
        TabularPolicy::zeros(vocab2(), 2, 1).unwrap()
    }

    fn traj(tokens: &[usize], term: Termination) -> Trajectory {
        Trajectory { tokens: tokens.to_vec(), terminated_by: term }
    }

    #[test]
    fn log_prob_of_uniform_two_step_universe() {
        let p = uniform2();
        let y = traj(&[1, 0], Termination::Eos);
        let lp = p.log_prob(QueryId(0), &y).unwrap();
        assert!((lp - 0.25f64.ln()).abs() < 1e-12, "got {lp}");
        // Force-stop contributes no factor: [1,1] also has probability 1/4.
        let y2 = traj(&[1, 1], Termination::MaxLen);
        assert!((p.log_prob(QueryId(0), &y2).unwrap() - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn next_token_dist_matches_softmax_at_both_temperatures() {
        let vocab = vocab2();
        let p = TabularPolicy::from_fn(vocab, 2, 1, |_, _| vec![0.0, 3.0f64.ln()]).unwrap();
        let d1 = p.next_token_dist(QueryId(0), &[], 1.0).unwrap();
        assert!((d1[1] - 0.75).abs() < 1e-15);
        assert!((d1[0] - 0.25).abs() < 1e-15);
        let d05 = p.next_token_dist(QueryId(0), &[], 0.5).unwrap();
        assert!((d05[1] - 0.9).abs() < 1e-12);
        assert!((d05[0] - 0.1).abs() < 1e-12);
        assert!(p.next_token_dist(QueryId(0), &[], 0.0).is_err());
        assert!(p.next_token_dist(QueryId(0), &[], -1.0).is_err());
    }

    #[test]
    fn saturated_logits_give_vanishing_score() {
        // Root effectively deterministic on EOS: eos logit 0, other -30.
        let p = TabularPolicy::from_fn(vocab2(), 2, 1, |_, _| vec![0.0, -30.0]).unwrap();
        let g = p.grad_log_prob(QueryId(0), &traj(&[0], Termination::Eos)).unwrap();
        let block = g.get(&(QueryId(0), Vec::new())).unwrap();
        let leak = (-30.0f64).exp() / (1.0 + (-30.0f64).exp());
        // block[0] = 1 - softmax_eos suffers cancellation near 1, so its error
        // bound is a ulp of 1.0, not a ulp of the leak itself.
        assert!((block[0] - leak).abs() < 1e-15, "expected ~{leak:e}, got {:e}", block[0]);
        assert!((block[1] + leak).abs() < 1e-15);
        assert!(block[0] > 0.0 && block[0] < 1.5e-13);
    }

    #[test]
    fn trajectory_probabilities_sum_to_one_over_random_policies() {
        for i in 0..100u64 {
            let size = 2 + (i % 2) as usize; // vocab of 2 or 3 tokens
            let max_len = 1 + (i % 5) as usize;
            let vocab = Vocab::plain(size, 0).unwrap();
            let mut rng = derive_stream(41, &[i]);
            let p = TabularPolicy::from_fn(vocab, max_len, 1, |_, _| {
                (0..size).map(|_| crate::math::uniform_f64(&mut rng, -2.0, 2.0)).collect()
            })
            .unwrap();
            let total: f64 = enumerate_trajectories(&vocab, max_len)
                .unwrap()
                .iter()
                .map(|y| p.log_prob(QueryId(0), y).unwrap().exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-10, "policy {i}: mass {total}");
        }
    }

    #[test]
    fn expected_score_vanishes_exactly() {
        // E_pi[grad log pi] = 0; checked over random tabular and bigram policies.
        for i in 0..20u64 {
            let vocab = Vocab::plain(3, 0).unwrap();
            let max_len = 1 + (i % 4) as usize;
            let mut rng = derive_stream(43, &[i]);
            let mut fill = |_: QueryId, _: &[usize]| -> Vec<f64> {
                (0..3).map(|_| crate::math::uniform_f64(&mut rng, -2.0, 2.0)).collect()
            };
            let universe = enumerate_trajectories(&vocab, max_len).unwrap();
            let check = |g: ParamGradient| {
                assert!(g.max_abs() < 1e-9, "policy {i}: residual {}", g.max_abs());
            };
            if i % 2 == 0 {
                let p = TabularPolicy::from_fn(vocab, max_len, 1, &mut fill).unwrap();
                let mut acc = ParamGradient::new();
                for y in &universe {
                    let w = p.log_prob(QueryId(0), y).unwrap().exp();
                    acc.add_scaled(&p.grad_log_prob(QueryId(0), y).unwrap(), w);
                }
                check(acc);
            } else {
                let p = BigramPolicy::from_fn(vocab, max_len, 1, &mut fill).unwrap();
                let mut acc = ParamGradient::new();
                for y in &universe {
                    let w = p.log_prob(QueryId(0), y).unwrap().exp();
                    acc.add_scaled(&p.grad_log_prob(QueryId(0), y).unwrap(), w);
                }
                check(acc);
            }
        }
    }

    #[test]
    fn near_zero_temperature_concentrates_on_argmax() {
        let vocab = Vocab::plain(3, 0).unwrap();
        let mut rng = derive_stream(7, &[0]);
        for _ in 0..50 {
            // Distinct logits on a coarse grid, so the argmax gap is >= 0.5.
            let mut logits: Vec<f64>;
            loop {
                logits = (0..3)
                    .map(|_| (crate::math::uniform_f64(&mut rng, -4.0, 4.0) * 2.0).round() / 2.0)
                    .collect();
                let mut sorted = logits.clone();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if sorted[0] - sorted[1] >= 0.5 {
                    break;
                }
            }
            let p = TabularPolicy::from_fn(vocab, 2, 1, |_, _| logits.clone()).unwrap();
            let dist = p.next_token_dist(QueryId(0), &[], 1e-3).unwrap();
            let argmax = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert!(dist[argmax] >= 1.0 - 1e-6, "dist {dist:?} logits {logits:?}");
        }
    }

    #[test]
    fn sampling_is_seed_deterministic_and_matches_exact_probabilities() {
        let vocab = Vocab::plain(2, 0).unwrap();
        let p = TabularPolicy::from_fn(vocab, 2, 1, |_, _| vec![0.0, 1.0]).unwrap();
        let draw = |seed: u64, n: usize| -> Vec<Trajectory> {
            let mut rng = derive_stream(seed, &[]);
            (0..n).map(|_| p.sample(QueryId(0), 1.0, &mut rng).unwrap()).collect()
        };
        assert_eq!(draw(5, 200), draw(5, 200));
        assert_ne!(draw(5, 200), draw(6, 200));

        let universe = enumerate_trajectories(&vocab, 2).unwrap();
        let exact: Vec<f64> =
            universe.iter().map(|y| p.log_prob(QueryId(0), y).unwrap().exp()).collect();
        let n = 100_000;
        let samples = draw(11, n);
        for (y, pe) in universe.iter().zip(&exact) {
            let freq = samples.iter().filter(|s| *s == y).count() as f64 / n as f64;
            assert!((freq - pe).abs() < 0.01, "trajectory {:?}: freq {freq} exact {pe}", y.tokens);
        }
    }

    #[test]
    fn frozen_clones_are_value_equal_and_immutable() {
        let mut p = uniform2();
        let frozen = p.clone_frozen();
        p.set_logits(QueryId(0), &[], vec![1.0, -1.0]).unwrap();
        let y = traj(&[0], Termination::Eos);
        // The clone kept the original values.
        assert!((frozen.log_prob(QueryId(0), &y).unwrap() - 0.5f64.ln()).abs() < 1e-12);
        assert_ne!(
            frozen.log_prob(QueryId(0), &y).unwrap(),
            p.log_prob(QueryId(0), &y).unwrap()
        );
        let mut frozen2 = frozen.clone();
        let key = (QueryId(0), Vec::new());
        assert_eq!(frozen2.logits_by_key_mut(&key).unwrap_err(), PolicyError::Frozen);
        assert!(frozen.trainable_clone().logits_by_key_mut(&key).is_ok());
    }

    #[test]
    fn bigram_shares_parameters_across_depths() {
        let vocab = Vocab::plain(2, 0).unwrap();
        let p = BigramPolicy::from_fn(vocab, 3, 1, |_, class| {
            if class.is_empty() {
                vec![0.0, 1.0]
            } else {
                vec![0.5, -0.5]
            }
        })
        .unwrap();
        // Prefixes [1] and [1,1] map to the same class.
        assert_eq!(
            p.param_key(QueryId(0), &[1]).unwrap(),
            p.param_key(QueryId(0), &[1, 1]).unwrap()
        );
        // Along [1,1,?] the class [1] is visited twice and accumulates.
        let y = traj(&[1, 1, 0], Termination::Eos);
        let g = p.grad_log_prob(QueryId(0), &y).unwrap();
        assert_eq!(g.len(), 2);
        let shared = g.get(&(QueryId(0), vec![1])).unwrap();
        let soft = math::softmax(&[0.5, -0.5], 1.0);
        // One step chose token 1, one chose EOS: (0 - p0) + (1 - p0) etc.
        assert!((shared[1] - (1.0 - soft[1] - soft[1])).abs() < 1e-12);
        assert!((shared[0] - (1.0 - soft[0] - soft[0])).abs() < 1e-12);
    }

    #[test]
    fn unknown_query_is_rejected_everywhere() {
        let p = uniform2();
        let y = traj(&[0], Termination::Eos);
        assert!(matches!(
            p.log_prob(QueryId(3), &y).unwrap_err(),
            PolicyError::UnknownQuery { .. }
        ));
        assert!(p.logits(QueryId(1), &[]).is_err());
    }

    #[test]
    fn text_round_trip_is_bit_exact_for_both_families() {
        let vocab = Vocab::new(3, 0, Some(2)).unwrap();
        let mut rng = derive_stream(77, &[1]);
        let tab = TabularPolicy::from_fn(vocab, 3, 2, |_, _| {
            (0..3).map(|_| crate::math::uniform_f64(&mut rng, -3.0, 3.0)).collect()
        })
        .unwrap();
        let text = policy_to_text(&tab);
        match policy_from_text(&text).unwrap() {
            LoadedPolicy::Tabular(back) => {
                assert_eq!(back.vocab(), tab.vocab());
                for key in tab.param_keys() {
                    let a = tab.logits_by_key(&key).unwrap();
                    let b = back.logits_by_key(&key).unwrap();
                    for (x, y) in a.iter().zip(b) {
                        assert_eq!(x.to_bits(), y.to_bits(), "lossy round-trip at {key:?}");
                    }
                }
            }
            other => panic!("expected tabular, got {other:?}"),
        }

        let big = BigramPolicy::from_fn(vocab, 3, 1, |_, _| {
            (0..3).map(|_| crate::math::uniform_f64(&mut rng, -3.0, 3.0)).collect()
        })
        .unwrap();
        let text = policy_to_text(&big);
        match policy_from_text(&text).unwrap() {
            LoadedPolicy::Bigram(back) => assert_eq!(back, big.trainable_clone()),
            other => panic!("expected bigram, got {other:?}"),
        }
    }

    #[test]
    fn malformed_policy_text_reports_line_numbers() {
        let vocab = vocab2();
        let p = TabularPolicy::zeros(vocab, 2, 1).unwrap();
        let good = policy_to_text(&p);
        assert!(policy_from_text("nonsense").is_err());
        let truncated: String = good.lines().take(7).map(|l| format!("{l}\n")).collect();
        assert!(policy_from_text(&truncated).is_err(), "incomplete table must not parse");
        let corrupted = good.replace("0.0000000000000000e0", "zero");
        match policy_from_text(&corrupted).unwrap_err() {
            PolicyError::Parse { line, .. } => assert!(line >= 8),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
