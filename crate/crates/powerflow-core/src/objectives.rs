//! Training objectives over enumerable policies: squared balancing losses
//! with a learned log-partition term, the clipped off-policy variant, the
//! token-averaged degenerate variant, and score-function RL baselines.
//!
//! Every loss is per-sample; the trainer averages over a batch. Gradients are
//! analytic and flow through `log pi` only — importance weights and
//! advantages are treated as detached constants.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

// Unused whenever std is in the crate graph (its inherent f64 methods win);
// required for the pure no_std build.
#[allow(unused_imports)]
use num_traits::Float;

use crate::oracle::{self, OracleError};
use crate::policy::{AutoregressivePolicy, ParamGradient, PolicyError};
use crate::seqspace::{QueryId, Trajectory};
use crate::target::{format_penalty, log_density_unnorm, TargetError, TargetSpec};

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveError {
    BadClip { eps_low: f64, eps_high: f64 },
    BadAlpha(f64),
    BadBeta(f64),
    BadLength(usize),
    NonFinite(&'static str),
    UnknownKindName,
    /// The operation is only defined for a subset of loss kinds.
    UnsupportedKind(LossKind),
    UnknownSlot { query: usize, len: usize },
    Oracle(OracleError),
    Policy(PolicyError),
    Target(TargetError),
}

impl fmt::Display for ObjectiveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveError::BadClip { eps_low, eps_high } => {
                write!(f, "clip widths must satisfy 0 < eps_low < 1 and eps_high > 0, got ({eps_low}, {eps_high})")
            }
            ObjectiveError::BadAlpha(a) => write!(f, "alpha must be positive and finite, got {a}"),
            ObjectiveError::BadBeta(b) => write!(f, "beta must be positive and finite, got {b}"),
            ObjectiveError::BadLength(l) => write!(f, "trajectory length must be >= 1, got {l}"),
            ObjectiveError::NonFinite(what) => write!(f, "{what} must be finite"),
            ObjectiveError::UnknownKindName => write!(
                f,
                "unknown loss kind; expected one of tb_traj, tb_token, la_tb, powerflow, rl_traj, rl_token"
            ),
            ObjectiveError::UnsupportedKind(k) => write!(f, "operation is not defined for loss kind {k}"),
            ObjectiveError::UnknownSlot { query, len } => {
                write!(f, "no log-partition entry for query {query}, length {len}")
            }
            ObjectiveError::Oracle(e) => write!(f, "{e}"),
            ObjectiveError::Policy(e) => write!(f, "{e}"),
            ObjectiveError::Target(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for ObjectiveError {}

impl From<OracleError> for ObjectiveError {
    fn from(e: OracleError) -> Self {
        ObjectiveError::Oracle(e)
    }
}
impl From<PolicyError> for ObjectiveError {
    fn from(e: PolicyError) -> Self {
        ObjectiveError::Policy(e)
    }
}
impl From<TargetError> for ObjectiveError {
    fn from(e: TargetError) -> Self {
        ObjectiveError::Target(e)
    }
}

/// The loss family. `Traj` variants balance whole-trajectory quantities,
/// `Token` variants length-average them, `LaTb` divides the log-mismatch by
/// length, and `PowerFlow` is `LaTb` on the power target with a format
/// penalty and a clipped off-policy weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LossKind {
    TbTraj,
    TbToken,
    LaTb,
    PowerFlow,
    RlTraj,
    RlToken,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::TbTraj,
        LossKind::TbToken,
        LossKind::LaTb,
        LossKind::PowerFlow,
        LossKind::RlTraj,
        LossKind::RlToken,
    ];

    pub fn is_rl(self) -> bool {
        matches!(self, LossKind::RlTraj | LossKind::RlToken)
    }

    /// Kinds whose log-partition term is a per-token quantity, making the
    /// length-aware oracle target the right comparison distribution.
    pub fn is_length_aware(self) -> bool {
        matches!(self, LossKind::LaTb | LossKind::PowerFlow)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LossKind::TbTraj => "tb_traj",
            LossKind::TbToken => "tb_token",
            LossKind::LaTb => "la_tb",
            LossKind::PowerFlow => "powerflow",
            LossKind::RlTraj => "rl_traj",
            LossKind::RlToken => "rl_token",
        };
        f.write_str(name)
    }
}

impl FromStr for LossKind {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tb_traj" => Ok(LossKind::TbTraj),
            "tb_token" => Ok(LossKind::TbToken),
            "la_tb" => Ok(LossKind::LaTb),
            "powerflow" => Ok(LossKind::PowerFlow),
            "rl_traj" => Ok(LossKind::RlTraj),
            "rl_token" => Ok(LossKind::RlToken),
            _ => Err(ObjectiveError::UnknownKindName),
        }
    }
}

/// Asymmetric clipping band for the off-policy importance ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipSpec {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl Default for ClipSpec {
    fn default() -> Self {
        ClipSpec { eps_low: 0.2, eps_high: 0.28 }
    }
}

impl ClipSpec {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let ok = self.eps_low > 0.0
            && self.eps_low < 1.0
            && self.eps_high > 0.0
            && self.eps_high.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ObjectiveError::BadClip { eps_low: self.eps_low, eps_high: self.eps_high })
        }
    }
}

/// Squared balance of whole-trajectory quantities:
/// `(log Z + log pi - log ptilde)^2`.
pub fn loss_tb_traj(logz: f64, log_pi: f64, log_ptilde: f64) -> f64 {
    let r = logz + log_pi - log_ptilde;
    r * r
}

/// Token-averaged degenerate variant: the target term is the length-averaged
/// base log-probability, `(log Z + log pi - alpha * log_pbase / len)^2`.
/// Its fixed point rewards per-token average quality regardless of what the
/// whole-trajectory target says, which is exactly its failure mode.
pub fn loss_tb_token(logz: f64, log_pi: f64, log_pbase: f64, len: usize, alpha: f64) -> f64 {
    let r = logz + log_pi - alpha * log_pbase / len as f64;
    r * r
}

/// Length-aware squared balance: `(log Z' + (log pi - log ptilde)/len)^2`.
/// Dividing the mismatch by length makes the per-sample scale independent of
/// trajectory length, and turns the learned normalizer into a per-token
/// quantity.
pub fn loss_la_tb(logzp: f64, log_pi: f64, log_ptilde: f64, len: usize) -> f64 {
    let r = logzp + (log_pi - log_ptilde) / len as f64;
    r * r
}

/// Clipped importance ratio `clip(pi_new/pi_old, 1 - eps_low, 1 + eps_high)`.
/// The result is detached: it scales losses and gradients as a constant.
pub fn clip_ratio(log_pi_new: f64, log_pi_old: f64, clip: &ClipSpec) -> f64 {
    (log_pi_new - log_pi_old)
        .exp()
        .max(1.0 - clip.eps_low)
        .min(1.0 + clip.eps_high)
}

/// The clipped, penalty-aware, length-aware loss:
/// `w * (log Z' + log pi_new / len - alpha * (log_pbase / len + psi))^2`
/// with `w = clip_ratio(log_pi_new, log_pi_old)`. `psi` is the per-token
/// penalty applied to this particular trajectory (0 when compliant).
#[allow(clippy::too_many_arguments)]
pub fn loss_powerflow(
    logzp: f64,
    log_pi_new: f64,
    log_pi_old: f64,
    log_pbase: f64,
    psi: f64,
    len: usize,
    alpha: f64,
    clip: &ClipSpec,
) -> f64 {
    let w = clip_ratio(log_pi_new, log_pi_old, clip);
    let r = logzp + log_pi_new / len as f64 - alpha * (log_pbase / len as f64 + psi);
    w * r * r
}

/// Score-function RL surrogate against the KL-regularized reward
/// `r - beta * (log pi - log p_base)` with reward `r = log p_base`
/// (trajectory kind) or `log p_base / len` (token kind). Returns
/// `(surrogate, advantage)` where the surrogate is `-advantage * log_pi`
/// with the advantage detached, so descent moves parameters along
/// `advantage * grad log pi`.
pub fn loss_rl_kl(
    kind: LossKind,
    log_pi: f64,
    log_pbase: f64,
    len: usize,
    beta: f64,
    baseline: f64,
) -> Result<(f64, f64), ObjectiveError> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(ObjectiveError::BadBeta(beta));
    }
    if len == 0 {
        return Err(ObjectiveError::BadLength(0));
    }
    let reward = match kind {
        LossKind::RlTraj => log_pbase,
        LossKind::RlToken => log_pbase / len as f64,
        other => return Err(ObjectiveError::UnsupportedKind(other)),
    };
    let advantage = (reward - beta * (log_pi - log_pbase)) - baseline;
    Ok((-advantage * log_pi, advantage))
}

/// Log-partition initialization: `mean_ref_token_logprob * (alpha - 1) + noise`.
/// On per-token-constant bases the noise-free value equals the converged
/// per-token normalizer exactly.
pub fn init_logz(mean_ref_token_logprob: f64, alpha: f64, noise: f64) -> f64 {
    mean_ref_token_logprob * (alpha - 1.0) + noise
}

/// Learned log-partition values. One scalar per query by default; the
/// per-length mode keys entries by (query, trajectory length) so the
/// token-averaged variant can be run with a length-resolved normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct LogZScalar {
    per_length: bool,
    max_len: usize,
    values: BTreeMap<(QueryId, usize), f64>,
}

impl LogZScalar {
    /// One entry per query, shared across lengths.
    pub fn scalar(queries: &[QueryId], mut init: impl FnMut(QueryId) -> f64) -> Self {
        let values = queries.iter().map(|&q| ((q, 0), init(q))).collect();
        LogZScalar { per_length: false, max_len: 0, values }
    }

    /// One entry per (query, length in 1..=max_len).
    pub fn per_length(
        queries: &[QueryId],
        max_len: usize,
        mut init: impl FnMut(QueryId, usize) -> f64,
    ) -> Self {
        let mut values = BTreeMap::new();
        for &q in queries {
            for len in 1..=max_len {
                values.insert((q, len), init(q, len));
            }
        }
        LogZScalar { per_length: true, max_len, values }
    }

    pub fn is_per_length(&self) -> bool {
        self.per_length
    }

    fn slot(&self, query: QueryId, len: usize) -> (QueryId, usize) {
        if self.per_length {
            (query, len)
        } else {
            (query, 0)
        }
    }

    pub fn get(&self, query: QueryId, len: usize) -> Result<f64, ObjectiveError> {
        self.values
            .get(&self.slot(query, len))
            .copied()
            .ok_or(ObjectiveError::UnknownSlot { query: query.0, len })
    }

    pub fn add(&mut self, query: QueryId, len: usize, delta: f64) -> Result<(), ObjectiveError> {
        let slot = self.slot(query, len);
        match self.values.get_mut(&slot) {
            Some(v) => {
                *v += delta;
                Ok(())
            }
            None => Err(ObjectiveError::UnknownSlot { query: query.0, len }),
        }
    }

    /// Entries in canonical (query, length) order, for optimizers.
    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&(QueryId, usize), &mut f64)> {
        self.values.iter_mut()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(QueryId, usize), &f64)> {
        self.values.iter()
    }

    /// Values flattened in canonical order, for metrics export.
    pub fn flattened(&self) -> Vec<f64> {
        self.values.values().copied().collect()
    }
}

/// Static loss configuration shared by every sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub kind: LossKind,
    pub alpha: f64,
    /// KL-regularization strength; only read by RL kinds.
    pub beta: f64,
    /// Clipping band; only read by PowerFlow.
    pub clip: ClipSpec,
}

impl LossParams {
    pub fn new(kind: LossKind, alpha: f64) -> Self {
        LossParams { kind, alpha, beta: 1.0, clip: ClipSpec::default() }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(ObjectiveError::BadAlpha(self.alpha));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(ObjectiveError::BadBeta(self.beta));
        }
        self.clip.validate()
    }
}

/// Everything a loss needs to know about one sampled trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleTerms {
    pub log_pi_new: f64,
    pub log_pi_old: f64,
    pub log_pbase: f64,
    /// Full unnormalized target log-density (power of the base plus penalty).
    pub log_ptilde: f64,
    /// Per-token penalty this trajectory incurs (0 when compliant).
    pub psi: f64,
    pub len: usize,
}

impl SampleTerms {
    /// Evaluate all per-sample quantities for a trajectory under the training
    /// policy, the frozen snapshot, and the base.
    pub fn from_policies<P, B>(
        policy: &P,
        snapshot: &P,
        base: &B,
        spec: &TargetSpec,
        query: QueryId,
        y: &Trajectory,
    ) -> Result<SampleTerms, ObjectiveError>
    where
        P: AutoregressivePolicy,
        B: AutoregressivePolicy,
    {
        Ok(SampleTerms {
            log_pi_new: policy.log_prob(query, y)?,
            log_pi_old: snapshot.log_prob(query, y)?,
            log_pbase: base.log_prob(query, y)?,
            log_ptilde: log_density_unnorm(base, query, y, spec)?,
            psi: format_penalty(y, &base.vocab(), spec)?,
            len: y.len(),
        })
    }

    fn validate(&self) -> Result<(), ObjectiveError> {
        if self.len == 0 {
            return Err(ObjectiveError::BadLength(0));
        }
        let finite = self.log_pi_new.is_finite()
            && self.log_pi_old.is_finite()
            && self.log_pbase.is_finite()
            && self.log_ptilde.is_finite()
            && self.psi.is_finite();
        if finite {
            Ok(())
        } else {
            Err(ObjectiveError::NonFinite("sample log-probabilities"))
        }
    }
}

struct Inner {
    loss: f64,
    /// Coefficient multiplying `grad log pi` in the loss gradient.
    d_log_pi: f64,
    d_logz: f64,
    weight: f64,
    advantage: f64,
}

fn inner_eval(
    params: &LossParams,
    terms: &SampleTerms,
    logz: f64,
    baseline: f64,
) -> Result<Inner, ObjectiveError> {
    params.validate()?;
    terms.validate()?;
    if !logz.is_finite() {
        return Err(ObjectiveError::NonFinite("log-partition value"));
    }
    let len = terms.len as f64;
    let out = match params.kind {
        LossKind::TbTraj => {
            let r = logz + terms.log_pi_new - terms.log_ptilde;
            Inner { loss: r * r, d_log_pi: 2.0 * r, d_logz: 2.0 * r, weight: 1.0, advantage: 0.0 }
        }
        LossKind::TbToken => {
            let r = logz + terms.log_pi_new - params.alpha * terms.log_pbase / len;
            Inner { loss: r * r, d_log_pi: 2.0 * r, d_logz: 2.0 * r, weight: 1.0, advantage: 0.0 }
        }
        LossKind::LaTb => {
            let r = logz + (terms.log_pi_new - terms.log_ptilde) / len;
            Inner {
                loss: r * r,
                d_log_pi: 2.0 * r / len,
                d_logz: 2.0 * r,
                weight: 1.0,
                advantage: 0.0,
            }
        }
        LossKind::PowerFlow => {
            let w = clip_ratio(terms.log_pi_new, terms.log_pi_old, &params.clip);
            let r = logz + terms.log_pi_new / len
                - params.alpha * (terms.log_pbase / len + terms.psi);
            Inner {
                loss: w * r * r,
                d_log_pi: w * 2.0 * r / len,
                d_logz: w * 2.0 * r,
                weight: w,
                advantage: 0.0,
            }
        }
        LossKind::RlTraj | LossKind::RlToken => {
            let (loss, advantage) = loss_rl_kl(
                params.kind,
                terms.log_pi_new,
                terms.log_pbase,
                terms.len,
                params.beta,
                baseline,
            )?;
            Inner { loss, d_log_pi: -advantage, d_logz: 0.0, weight: 1.0, advantage }
        }
    };
    Ok(out)
}

/// Per-sample loss value. `baseline` is only read by RL kinds.
pub fn sample_loss(
    params: &LossParams,
    terms: &SampleTerms,
    logz: f64,
    baseline: f64,
) -> Result<f64, ObjectiveError> {
    Ok(inner_eval(params, terms, logz, baseline)?.loss)
}

/// Raw (pre-baseline) RL advantage for a sample, used to build batch-mean
/// baselines before the gradient pass.
pub fn rl_raw_advantage(
    params: &LossParams,
    terms: &SampleTerms,
) -> Result<f64, ObjectiveError> {
    let (_, a) = loss_rl_kl(
        params.kind,
        terms.log_pi_new,
        terms.log_pbase,
        terms.len,
        params.beta,
        0.0,
    )?;
    Ok(a)
}

/// Full per-sample evaluation: loss, analytic parameter gradient, and the
/// derivative with respect to the relevant log-partition entry.
#[derive(Debug, Clone)]
pub struct SampleEval {
    pub loss: f64,
    pub grad: ParamGradient,
    pub d_logz: f64,
    /// Clip weight (1 for every kind except the clipped one).
    pub weight: f64,
    /// Advantage (0 for non-RL kinds).
    pub advantage: f64,
}

/// Analytic gradient of the per-sample loss with respect to policy logits
/// (through `grad log pi`; importance weights and advantages detached) and
/// the log-partition entry (0 for RL kinds).
pub fn grad_loss<P: AutoregressivePolicy>(
    params: &LossParams,
    terms: &SampleTerms,
    logz: f64,
    baseline: f64,
    policy: &P,
    query: QueryId,
    y: &Trajectory,
) -> Result<SampleEval, ObjectiveError> {
    let inner = inner_eval(params, terms, logz, baseline)?;
    let mut grad = policy.grad_log_prob(query, y)?;
    grad.scale(inner.d_log_pi);
    Ok(SampleEval {
        loss: inner.loss,
        grad,
        d_logz: inner.d_logz,
        weight: inner.weight,
        advantage: inner.advantage,
    })
}

/// Exact minimizer of the expected squared loss over the log-partition value
/// at fixed policy: `E_pi[log ptilde - log pi]` for the trajectory-level
/// kind, `E_pi[(log ptilde - log pi)/len]` for the length-aware kind.
pub fn optimal_logz<P, B>(
    policy: &P,
    base: &B,
    query: QueryId,
    spec: &TargetSpec,
    kind: LossKind,
) -> Result<f64, ObjectiveError>
where
    P: AutoregressivePolicy,
    B: AutoregressivePolicy,
{
    let ys = oracle::universe(policy)?;
    let lps = oracle::policy_log_probs(policy, query, &ys)?;
    let lds = oracle::target_log_unnorm(base, query, &ys, spec)?;
    let value = match kind {
        LossKind::TbTraj => lps
            .iter()
            .zip(&lds)
            .map(|(lp, ld)| lp.exp() * (ld - lp))
            .sum(),
        LossKind::LaTb => lps
            .iter()
            .zip(&lds)
            .zip(&ys)
            .map(|((lp, ld), y)| lp.exp() * (ld - lp) / y.len() as f64)
            .sum(),
        other => return Err(ObjectiveError::UnsupportedKind(other)),
    };
    Ok(value)
}
