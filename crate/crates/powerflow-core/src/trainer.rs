//! On-policy training loop: batched sampling from a periodically refreshed
//! snapshot, analytic per-sample gradients averaged in canonical order, plain
//! or moment-based optimizer steps, and per-step divergence metrics against
//! the exact oracle target of the configured loss.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

// Unused whenever std is in the crate graph (its inherent f64 methods win);
// required for the pure no_std build.
#[allow(unused_imports)]
use num_traits::Float;

use crate::math::{derive_stream, uniform_f64};
use crate::objectives::{
    grad_loss, init_logz, rl_raw_advantage, ClipSpec, LogZScalar, LossKind, LossParams,
    ObjectiveError, SampleTerms,
};
use crate::oracle::{
    self, length_aware_target, power_target, total_variation, OracleError, UniverseDist,
};
use crate::policy::{AutoregressivePolicy, ParamGradient, ParamKey, PolicyError};
use crate::seqspace::{QueryId, Trajectory};
use crate::target::TargetSpec;

const TAG_INIT_BATCH: u64 = 0x696e_6974;
const TAG_SAMPLE: u64 = 0x7361_6d70;
const TAG_NOISE: u64 = 0x6e6f_6973;

#[derive(Debug, Clone, PartialEq)]
pub enum TrainerError {
    BadConfig(&'static str),
    /// Mean batch loss blew past the guard threshold.
    Diverged { step: usize, mean_loss: f64 },
    NonFiniteParam { step: usize },
    NonFiniteGradient,
    Objective(ObjectiveError),
    Policy(PolicyError),
    Oracle(OracleError),
}

impl fmt::Display for TrainerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainerError::BadConfig(msg) => write!(f, "bad training config: {msg}"),
            TrainerError::Diverged { step, mean_loss } => {
                write!(f, "training diverged at step {step}: mean loss {mean_loss}")
            }
            TrainerError::NonFiniteParam { step } => {
                write!(f, "non-finite parameter after step {step}")
            }
            TrainerError::NonFiniteGradient => write!(f, "non-finite gradient entry"),
            TrainerError::Objective(e) => write!(f, "{e}"),
            TrainerError::Policy(e) => write!(f, "{e}"),
            TrainerError::Oracle(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for TrainerError {}

impl From<ObjectiveError> for TrainerError {
    fn from(e: ObjectiveError) -> Self {
        TrainerError::Objective(e)
    }
}
impl From<PolicyError> for TrainerError {
    fn from(e: PolicyError) -> Self {
        TrainerError::Policy(e)
    }
}
impl From<OracleError> for TrainerError {
    fn from(e: OracleError) -> Self {
        TrainerError::Oracle(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    AdaptiveMoment { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adaptive_default() -> Self {
        Optimizer::AdaptiveMoment { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    fn validate(&self) -> Result<(), TrainerError> {
        if let Optimizer::AdaptiveMoment { beta1, beta2, eps } = self {
            let ok = (0.0..1.0).contains(beta1) && (0.0..1.0).contains(beta2) && *eps > 0.0;
            if !ok {
                return Err(TrainerError::BadConfig("moment decay rates must lie in [0, 1) and eps > 0"));
            }
        }
        Ok(())
    }
}

/// Whether the learned log-partition is one scalar per query or a per-length
/// table (the alternative reading for token-averaged balancing).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogZMode {
    Scalar,
    PerLength,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Queries per step; must equal the provided query list length (training
    /// is full-batch over queries — subsampling would only add noise at this
    /// scale).
    pub batch_queries: usize,
    pub samples_per_query: usize,
    pub lr: f64,
    pub logz_lr: f64,
    pub optimizer: Optimizer,
    pub temperature: f64,
    pub clip: ClipSpec,
    /// Steps between snapshot refreshes; 1 is pure on-policy.
    pub refresh_every: usize,
    pub seed: u64,
    pub losskind: LossKind,
    pub target: TargetSpec,
    /// KL-regularization strength for RL kinds.
    pub beta: f64,
    pub logz_mode: LogZMode,
    /// Half-width of the uniform noise added to the log-partition init.
    pub logz_init_noise: f64,
    /// Record metrics every k-th step (the final step is always recorded).
    pub metrics_every: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: small batch, plain gradient descent, sampling
    /// temperature dropped to 0.7 when the target flattens (alpha < 1).
    pub fn desk_default(losskind: LossKind, target: TargetSpec) -> Self {
        TrainConfig {
            steps: 2000,
            batch_queries: 4,
            samples_per_query: 16,
            lr: 0.05,
            logz_lr: 0.5,
            optimizer: Optimizer::Sgd,
            temperature: if target.alpha < 1.0 { 0.7 } else { 1.0 },
            clip: ClipSpec::default(),
            refresh_every: 8,
            seed: 0,
            losskind,
            target,
            beta: 1.0,
            logz_mode: LogZMode::Scalar,
            logz_init_noise: 0.01,
            metrics_every: 1,
        }
    }

    fn loss_params(&self) -> LossParams {
        LossParams { kind: self.losskind, alpha: self.target.alpha, beta: self.beta, clip: self.clip }
    }

    pub fn validate(&self, num_queries: usize) -> Result<(), TrainerError> {
        if self.steps == 0 {
            return Err(TrainerError::BadConfig("steps must be >= 1"));
        }
        if num_queries == 0 {
            return Err(TrainerError::BadConfig("query list must be nonempty"));
        }
        if self.batch_queries != num_queries {
            return Err(TrainerError::BadConfig("batch_queries must equal the provided query count"));
        }
        if self.samples_per_query == 0 {
            return Err(TrainerError::BadConfig("samples_per_query must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() || !(self.logz_lr > 0.0) || !self.logz_lr.is_finite() {
            return Err(TrainerError::BadConfig("learning rates must be positive"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(TrainerError::BadConfig("temperature must be positive"));
        }
        if self.refresh_every == 0 {
            return Err(TrainerError::BadConfig("refresh_every must be >= 1"));
        }
        if self.metrics_every == 0 {
            return Err(TrainerError::BadConfig("metrics_every must be >= 1"));
        }
        if !(self.logz_init_noise >= 0.0) || !self.logz_init_noise.is_finite() {
            return Err(TrainerError::BadConfig("logz_init_noise must be >= 0"));
        }
        self.optimizer.validate()?;
        self.target.validate().map_err(ObjectiveError::Target)?;
        self.loss_params().validate()?;
        Ok(())
    }
}

/// Per-step training diagnostics. `tv_to_target` and `kl_to_target` compare
/// the post-update exact policy distribution with the loss kind's oracle
/// target, averaged across queries; the remaining fields describe the batch
/// that produced the update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_loss: f64,
    pub mean_sampled_length: f64,
    pub tv_to_target: f64,
    pub kl_to_target: f64,
    pub logz_values: Vec<f64>,
    pub mean_token_logprob_base: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput<P: AutoregressivePolicy> {
    pub policy: P,
    pub logz: LogZScalar,
    pub metrics: Vec<StepMetrics>,
    /// Largest observed |clip weight - 1| across the whole run; exactly 0 in
    /// the pure on-policy regime.
    pub max_weight_deviation: f64,
}

/// Optimizer state: first/second moment accumulators per parameter block and
/// per log-partition slot. Only blocks that have received a gradient carry
/// state (sparse-update semantics).
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    t: u64,
    m: BTreeMap<ParamKey, Vec<f64>>,
    v: BTreeMap<ParamKey, Vec<f64>>,
    logz_m: BTreeMap<(QueryId, usize), f64>,
    logz_v: BTreeMap<(QueryId, usize), f64>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

fn adaptive_delta(m: &mut f64, v: &mut f64, g: f64, b1: f64, b2: f64, eps: f64, t: u64) -> f64 {
    *m = b1 * *m + (1.0 - b1) * g;
    *v = b2 * *v + (1.0 - b2) * g * g;
    let mhat = *m / (1.0 - b1.powi(t as i32));
    let vhat = *v / (1.0 - b2.powi(t as i32));
    mhat / (vhat.sqrt() + eps)
}

/// One descent step over policy logits and log-partition entries. Policy
/// blocks update at `lr`, log-partition slots at `logz_lr`.
pub fn optimizer_step<P: AutoregressivePolicy>(
    policy: &mut P,
    logz: &mut LogZScalar,
    grad: &ParamGradient,
    logz_grad: &BTreeMap<(QueryId, usize), f64>,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<(), TrainerError> {
    for (_, block) in grad.iter() {
        if block.iter().any(|g| !g.is_finite()) {
            return Err(TrainerError::NonFiniteGradient);
        }
    }
    if logz_grad.values().any(|g| !g.is_finite()) {
        return Err(TrainerError::NonFiniteGradient);
    }
    state.t += 1;
    match config.optimizer {
        Optimizer::Sgd => {
            for (key, block) in grad.iter() {
                let logits = policy.logits_by_key_mut(key)?;
                for (p, g) in logits.iter_mut().zip(block) {
                    *p -= config.lr * g;
                }
            }
            for (&slot, &g) in logz_grad {
                logz.add(slot.0, slot.1, -config.logz_lr * g)?;
            }
        }
        Optimizer::AdaptiveMoment { beta1, beta2, eps } => {
            let t = state.t;
            for (key, block) in grad.iter() {
                let m = state.m.entry(key.clone()).or_insert_with(|| alloc::vec![0.0; block.len()]);
                let v = state.v.entry(key.clone()).or_insert_with(|| alloc::vec![0.0; block.len()]);
                let logits = policy.logits_by_key_mut(key)?;
                for (j, (p, g)) in logits.iter_mut().zip(block).enumerate() {
                    *p -= config.lr * adaptive_delta(&mut m[j], &mut v[j], *g, beta1, beta2, eps, t);
                }
            }
            for (&slot, &g) in logz_grad {
                let m = state.logz_m.entry(slot).or_insert(0.0);
                let v = state.logz_v.entry(slot).or_insert(0.0);
                let delta = adaptive_delta(m, v, g, beta1, beta2, eps, t);
                logz.add(slot.0, slot.1, -config.logz_lr * delta)?;
            }
        }
    }
    Ok(())
}

/// The oracle distribution a run is scored against: the trajectory-level
/// power target for whole-trajectory kinds, the length-aware fixed point for
/// per-token kinds. RL kinds imply alpha = 1 + 1/beta and carry no format
/// penalty. Token-averaged kinds have no proper target of their own; the
/// length-aware fixed point is used as the reference there.
pub fn metrics_target<B: AutoregressivePolicy>(
    config: &TrainConfig,
    base: &B,
    query: QueryId,
) -> Result<UniverseDist, TrainerError> {
    let spec = if config.losskind.is_rl() {
        TargetSpec {
            alpha: 1.0 + 1.0 / config.beta,
            marker_required: false,
            ..config.target
        }
    } else {
        config.target
    };
    let t = match config.losskind {
        LossKind::TbTraj | LossKind::RlTraj => power_target(base, query, &spec)?,
        LossKind::LaTb | LossKind::PowerFlow | LossKind::TbToken | LossKind::RlToken => {
            length_aware_target(base, query, &spec)?
        }
    };
    Ok(t.dist)
}

struct BatchSample {
    query: QueryId,
    y: Trajectory,
    terms: SampleTerms,
}

/// Run the training loop. The policy starts as a trainable clone of `base`;
/// log-partition entries start at `mean_ref_token_logprob * (alpha - 1)` plus
/// uniform noise, with the mean pooled per query over a pre-training batch
/// sampled from the base. Deterministic given the config.
pub fn train<P: AutoregressivePolicy>(
    config: &TrainConfig,
    base: &P,
    queries: &[QueryId],
) -> Result<TrainOutput<P>, TrainerError> {
    config.validate(queries.len())?;
    for &q in queries {
        base.check_query(q)?;
    }

    let base = base.clone_frozen();
    let mut policy = base.trainable_clone();
    let params = config.loss_params();

    // Log-partition init from a pre-training batch of base samples.
    let mut pbar = BTreeMap::new();
    for &q in queries {
        let mut rng = derive_stream(config.seed, &[TAG_INIT_BATCH, q.0 as u64]);
        let mut sum_lp = 0.0;
        let mut sum_len = 0.0;
        for _ in 0..config.samples_per_query {
            let y = base.sample(q, config.temperature, &mut rng)?;
            sum_lp += base.log_prob(q, &y)?;
            sum_len += y.len() as f64;
        }
        pbar.insert(q, sum_lp / sum_len);
    }
    let noise_of = |q: QueryId| {
        let mut rng = derive_stream(config.seed, &[TAG_NOISE, q.0 as u64]);
        if config.logz_init_noise > 0.0 {
            uniform_f64(&mut rng, -config.logz_init_noise, config.logz_init_noise)
        } else {
            0.0
        }
    };
    let mut logz = match config.logz_mode {
        LogZMode::Scalar => LogZScalar::scalar(queries, |q| {
            init_logz(pbar[&q], config.target.alpha, noise_of(q))
        }),
        LogZMode::PerLength => LogZScalar::per_length(queries, policy.max_len(), |q, _| {
            init_logz(pbar[&q], config.target.alpha, noise_of(q))
        }),
    };

    // Oracle targets are fixed for the whole run.
    let mut target_dists = BTreeMap::new();
    for &q in queries {
        target_dists.insert(q, metrics_target(config, &base, q)?);
    }

    let mut snapshot = policy.clone_frozen();
    let mut state = OptimizerState::new();
    let mut metrics = Vec::new();
    let mut max_weight_deviation: f64 = 0.0;
    let batch_size = (queries.len() * config.samples_per_query) as f64;

    for step in 0..config.steps {
        if step % config.refresh_every == 0 {
            snapshot = policy.clone_frozen();
        }

        // Sample the batch from the snapshot, in canonical order, each draw
        // on its own derived stream so the schedule cannot matter.
        let mut batch = Vec::with_capacity(queries.len() * config.samples_per_query);
        for &q in queries {
            for s in 0..config.samples_per_query {
                let mut rng = derive_stream(
                    config.seed,
                    &[TAG_SAMPLE, step as u64, q.0 as u64, s as u64],
                );
                let y = snapshot.sample(q, config.temperature, &mut rng)?;
                let terms = SampleTerms::from_policies(&policy, &snapshot, &base, &config.target, q, &y)?;
                batch.push(BatchSample { query: q, y, terms });
            }
        }

        // RL kinds subtract the batch-mean raw advantage.
        let baseline = if params.kind.is_rl() {
            let mut sum = 0.0;
            for sample in &batch {
                sum += rl_raw_advantage(&params, &sample.terms)?;
            }
            sum / batch_size
        } else {
            0.0
        };

        let mut grad = ParamGradient::new();
        let mut logz_grad: BTreeMap<(QueryId, usize), f64> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut len_sum = 0.0;
        let mut lp_base_sum = 0.0;
        for sample in &batch {
            let len = sample.y.len();
            let z = logz.get(sample.query, len)?;
            let eval = grad_loss(&params, &sample.terms, z, baseline, &policy, sample.query, &sample.y)?;
            grad.add_scaled(&eval.grad, 1.0 / batch_size);
            let slot = if config.logz_mode == LogZMode::PerLength {
                (sample.query, len)
            } else {
                (sample.query, 0)
            };
            *logz_grad.entry(slot).or_insert(0.0) += eval.d_logz / batch_size;
            loss_sum += eval.loss;
            len_sum += len as f64;
            lp_base_sum += sample.terms.log_pbase;
            let dev = (eval.weight - 1.0).abs();
            if dev > max_weight_deviation {
                max_weight_deviation = dev;
            }
        }
        let mean_loss = loss_sum / batch_size;
        if !mean_loss.is_finite() || mean_loss > 1e6 {
            return Err(TrainerError::Diverged { step, mean_loss });
        }

        optimizer_step(&mut policy, &mut logz, &grad, &logz_grad, &mut state, config)?;

        for key in policy.param_keys() {
            if policy.logits_by_key(&key)?.iter().any(|p| !p.is_finite()) {
                return Err(TrainerError::NonFiniteParam { step });
            }
        }
        if logz.flattened().iter().any(|z| !z.is_finite()) {
            return Err(TrainerError::NonFiniteParam { step });
        }

        if step % config.metrics_every == 0 || step + 1 == config.steps {
            let mut tv_sum = 0.0;
            let mut kl_sum = 0.0;
            for &q in queries {
                let d = oracle::policy_distribution(&policy, q)?;
                let target = &target_dists[&q];
                tv_sum += total_variation(&d.probs, &target.probs)?;
                kl_sum += oracle::kl_divergence(&d.probs, &target.probs)?;
            }
            metrics.push(StepMetrics {
                step,
                mean_loss,
                mean_sampled_length: len_sum / batch_size,
                tv_to_target: tv_sum / queries.len() as f64,
                kl_to_target: kl_sum / queries.len() as f64,
                logz_values: logz.flattened(),
                mean_token_logprob_base: lp_base_sum / len_sum,
            });
        }
    }

    Ok(TrainOutput { policy, logz, metrics, max_weight_deviation })
}

/// One labeled training run inside a comparison sweep.
#[derive(Debug, Clone)]
pub struct CompareRun<P: AutoregressivePolicy> {
    pub losskind: LossKind,
    pub output: TrainOutput<P>,
}

/// Train every config against the same base and queries. Configs must share
/// seed, step count, and metrics cadence so their metric series align row by
/// row; nothing is asserted here — judgments belong to callers and tests.
pub fn compare_dynamics<P: AutoregressivePolicy>(
    configs: &[TrainConfig],
    base: &P,
    queries: &[QueryId],
) -> Result<Vec<CompareRun<P>>, TrainerError> {
    let first = configs.first().ok_or(TrainerError::BadConfig("empty config set"))?;
    for c in configs {
        if c.seed != first.seed || c.steps != first.steps || c.metrics_every != first.metrics_every {
            return Err(TrainerError::BadConfig(
                "compared configs must share seed, steps, and metrics_every",
            ));
        }
    }
    let mut runs = Vec::with_capacity(configs.len());
    for config in configs {
        runs.push(CompareRun { losskind: config.losskind, output: train(config, base, queries)? });
    }
    Ok(runs)
}
