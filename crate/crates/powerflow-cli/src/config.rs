//! Experiment configuration: flat `key = value` text grouped by `[section]`
//! headers, resolved into the core library's typed configs.
//!
//! Section presence decides which subcommand a file describes, and each file
//! must describe exactly one:
//!
//! * `[gradcheck]` alone → `gradcheck`
//! * `[vote]` alone → `mvsim`
//! * `[base]` + `[target]` + `[train]` (with `loss`) → `train`
//! * the same plus `[compare]` (and no `loss` key) → `compare`
//! * `[base]` + `[target]` alone → `oracle`
//!
//! `[output]` may accompany any of them. Parsing resolves every default, so
//! serializing and re-parsing a config reproduces it field by field.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use powerflow_core::bases::{
    constant_rate_base, random_base, tempering_gap_base, two_mode_base, uniform_base,
};
use powerflow_core::mvsim::{RewardRule, VoteConfig, VoteMode, VotePopulation};
use powerflow_core::policy::{policy_from_text, LoadedPolicy};
use powerflow_core::trainer::{LogZMode, Optimizer, TrainConfig};
use powerflow_core::{ClipSpec, LossKind, PsiMode, TargetSpec, Vocab};

use crate::artifacts::fmt_f64;

/// A configuration problem: malformed text, missing or contradictory fields,
/// or an unreadable referenced file. Always maps to exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub msg: String,
}

impl ConfigError {
    fn new(msg: impl Into<String>) -> Self {
        ConfigError { line: None, msg: msg.into() }
    }

    fn at(line: usize, msg: impl Into<String>) -> Self {
        ConfigError { line: Some(line), msg: msg.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(n) => write!(f, "line {n}: {}", self.msg),
            None => write!(f, "{}", self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

/// The subcommand a config file describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Compare,
    Oracle,
    Mvsim,
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Compare => "compare",
            Command::Oracle => "oracle",
            Command::Mvsim => "mvsim",
            Command::Gradcheck => "gradcheck",
        }
    }

    pub fn from_name(name: &str) -> Option<Command> {
        match name {
            "train" => Some(Command::Train),
            "compare" => Some(Command::Compare),
            "oracle" => Some(Command::Oracle),
            "mvsim" => Some(Command::Mvsim),
            "gradcheck" => Some(Command::Gradcheck),
            _ => None,
        }
    }
}

/// How the base policy is produced. The two-mode, tempering-gap, and file
/// generators fix their own vocabulary and length bound, so explicit shape
/// keys are rejected for them.
#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorSpec {
    Uniform,
    ConstantRate { rate: f64 },
    TwoMode { short_p: f64, long_p: f64, long_len: usize },
    Random { seed: u64 },
    TemperingGap,
    File { path: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseSpec {
    pub generator: GeneratorSpec,
    pub vocab_size: usize,
    pub eos_id: usize,
    pub marker_id: Option<usize>,
    pub max_len: usize,
    pub num_queries: usize,
}

impl BaseSpec {
    fn vocab(&self) -> Result<Vocab, ConfigError> {
        Vocab::new(self.vocab_size, self.eos_id, self.marker_id)
            .map_err(|e| ConfigError::new(format!("[base] {e}")))
    }

    /// Materialize the base policy. `config_dir` anchors relative paths of
    /// the `file(...)` generator.
    pub fn build(&self, config_dir: &Path) -> Result<LoadedPolicy, ConfigError> {
        let wrap = |e: &dyn fmt::Display| ConfigError::new(format!("[base] {e}"));
        let policy = match &self.generator {
            GeneratorSpec::Uniform => {
                uniform_base(self.vocab()?, self.max_len, self.num_queries).map_err(|e| wrap(&e))?
            }
            GeneratorSpec::ConstantRate { rate } => {
                constant_rate_base(self.vocab()?, self.max_len, self.num_queries, *rate)
                    .map_err(|e| wrap(&e))?
            }
            GeneratorSpec::TwoMode { short_p, long_p, long_len } => {
                two_mode_base(self.num_queries, *short_p, *long_p, *long_len)
                    .map_err(|e| wrap(&e))?
            }
            GeneratorSpec::Random { seed } => {
                random_base(self.vocab()?, self.max_len, self.num_queries, *seed)
                    .map_err(|e| wrap(&e))?
            }
            GeneratorSpec::TemperingGap => {
                tempering_gap_base(self.num_queries).map_err(|e| wrap(&e))?
            }
            GeneratorSpec::File { path } => {
                let full = config_dir.join(path);
                let text = std::fs::read_to_string(&full).map_err(|e| {
                    ConfigError::new(format!("cannot read policy file {}: {e}", full.display()))
                })?;
                return policy_from_text(&text)
                    .map_err(|e| ConfigError::new(format!("policy file {}: {e}", full.display())));
            }
        };
        Ok(LoadedPolicy::Tabular(policy))
    }
}

/// The `[train]` section with every default resolved except the two fields
/// whose defaults depend on the rest of the experiment: `temperature` (picked
/// by the target's alpha when absent) and `batch_queries` (the full query
/// count when absent).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub loss: Option<LossKind>,
    pub steps: usize,
    pub batch_queries: Option<usize>,
    pub samples_per_query: usize,
    pub lr: f64,
    pub logz_lr: f64,
    pub optimizer: Optimizer,
    pub temperature: Option<f64>,
    pub clip_eps_low: f64,
    pub clip_eps_high: f64,
    pub refresh_every: usize,
    pub seed: u64,
    pub beta: f64,
    pub logz_mode: LogZMode,
    pub logz_init_noise: f64,
    pub metrics_every: usize,
}

impl TrainSection {
    pub fn to_train_config(
        &self,
        loss: LossKind,
        target: TargetSpec,
        num_queries: usize,
    ) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_queries: self.batch_queries.unwrap_or(num_queries),
            samples_per_query: self.samples_per_query,
            lr: self.lr,
            logz_lr: self.logz_lr,
            optimizer: self.optimizer,
            temperature: self
                .temperature
                .unwrap_or(if target.alpha < 1.0 { 0.7 } else { 1.0 }),
            clip: ClipSpec { eps_low: self.clip_eps_low, eps_high: self.clip_eps_high },
            refresh_every: self.refresh_every,
            seed: self.seed,
            losskind: loss,
            target,
            beta: self.beta,
            logz_mode: self.logz_mode,
            logz_init_noise: self.logz_init_noise,
            metrics_every: self.metrics_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteSection {
    pub pi0: Vec<f64>,
    pub n_votes: usize,
    pub beta: f64,
    pub iterations: usize,
    pub mode: VoteMode,
    pub reward_rule: RewardRule,
}

impl VoteSection {
    pub fn population(&self) -> Result<VotePopulation, ConfigError> {
        VotePopulation::new(self.pi0.clone())
            .map_err(|e| ConfigError::new(format!("[vote] pi0: {e}")))
    }

    pub fn vote_config(&self) -> VoteConfig {
        VoteConfig {
            n_votes: self.n_votes,
            beta: self.beta,
            iterations: self.iterations,
            mode: self.mode,
            reward_rule: self.reward_rule,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSection {
    pub instances: usize,
    pub h: f64,
    pub seed: u64,
}

/// One fully resolved experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub command: Command,
    pub base: Option<BaseSpec>,
    pub target: Option<TargetSpec>,
    pub train: Option<TrainSection>,
    pub compare_losses: Option<Vec<LossKind>>,
    pub vote: Option<VoteSection>,
    pub gradcheck: Option<GradcheckSection>,
    pub out_dir: String,
}

// ---------------------------------------------------------------------------
// Raw line-level parsing
// ---------------------------------------------------------------------------

const KNOWN_SECTIONS: [&str; 7] =
    ["base", "target", "train", "compare", "vote", "gradcheck", "output"];

type Entries = BTreeMap<String, (String, usize)>;

fn parse_sections(text: &str) -> Result<BTreeMap<String, Entries>, ConfigError> {
    let mut sections: BTreeMap<String, Entries> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let name = inner
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::at(lineno, "unterminated section header"))?
                .trim()
                .to_string();
            if !KNOWN_SECTIONS.contains(&name.as_str()) {
                return Err(ConfigError::at(lineno, format!("unknown section [{name}]")));
            }
            if sections.contains_key(&name) {
                return Err(ConfigError::at(lineno, format!("duplicate section [{name}]")));
            }
            sections.insert(name.clone(), Entries::new());
            current = Some(name);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::at(lineno, "expected `key = value` or `[section]`"))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::at(lineno, "empty key"));
        }
        let section = current
            .as_ref()
            .ok_or_else(|| ConfigError::at(lineno, "key appears before any [section] header"))?;
        let entries = sections.get_mut(section).expect("section was inserted");
        if entries.insert(key.clone(), (value, lineno)).is_some() {
            return Err(ConfigError::at(lineno, format!("duplicate key `{key}` in [{section}]")));
        }
    }
    Ok(sections)
}

/// Tracks which keys of one section have been consumed, so typos surface as
/// "unknown key" instead of being ignored.
struct Keys<'a> {
    name: &'static str,
    entries: &'a Entries,
    used: Vec<&'a str>,
}

impl<'a> Keys<'a> {
    fn new(name: &'static str, entries: &'a Entries) -> Self {
        Keys { name, entries, used: Vec::new() }
    }

    fn take(&mut self, key: &'static str) -> Option<(&'a str, usize)> {
        let (value, line) = self.entries.get(key)?;
        self.used.push(key);
        Some((value.as_str(), *line))
    }

    fn require(&mut self, key: &'static str) -> Result<(&'a str, usize), ConfigError> {
        self.take(key)
            .ok_or_else(|| ConfigError::new(format!("missing key `{key}` in [{}]", self.name)))
    }

    fn finish(self) -> Result<(), ConfigError> {
        for (key, (_, line)) in self.entries {
            if !self.used.contains(&key.as_str()) {
                return Err(ConfigError::at(
                    *line,
                    format!("unknown key `{key}` in [{}]", self.name),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Value parsers
// ---------------------------------------------------------------------------

fn p_usize(v: &str, line: usize) -> Result<usize, ConfigError> {
    v.parse().map_err(|_| ConfigError::at(line, format!("expected a nonnegative integer, got `{v}`")))
}

fn p_u64(v: &str, line: usize) -> Result<u64, ConfigError> {
    v.parse().map_err(|_| ConfigError::at(line, format!("expected a nonnegative integer, got `{v}`")))
}

fn p_f64(v: &str, line: usize) -> Result<f64, ConfigError> {
    let x: f64 = v
        .parse()
        .map_err(|_| ConfigError::at(line, format!("expected a number, got `{v}`")))?;
    if !x.is_finite() {
        return Err(ConfigError::at(line, format!("number must be finite, got `{v}`")));
    }
    Ok(x)
}

fn p_bool(v: &str, line: usize) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::at(line, format!("expected `true` or `false`, got `{v}`"))),
    }
}

fn p_f64_list(v: &str, line: usize) -> Result<Vec<f64>, ConfigError> {
    v.split(',').map(|s| p_f64(s.trim(), line)).collect()
}

/// Split `name(arg1, arg2)` into the name and its argument strings; a bare
/// name yields no arguments.
fn p_call(v: &str, line: usize) -> Result<(String, Vec<String>), ConfigError> {
    match v.split_once('(') {
        None => Ok((v.to_string(), Vec::new())),
        Some((name, rest)) => {
            let inner = rest
                .strip_suffix(')')
                .ok_or_else(|| ConfigError::at(line, format!("missing `)` in `{v}`")))?;
            let args = if inner.trim().is_empty() {
                Vec::new()
            } else {
                inner.split(',').map(|s| s.trim().to_string()).collect()
            };
            Ok((name.trim().to_string(), args))
        }
    }
}

fn arity(line: usize, name: &str, args: &[String], want: usize) -> Result<(), ConfigError> {
    if args.len() != want {
        return Err(ConfigError::at(
            line,
            format!("`{name}` takes {want} argument(s), got {}", args.len()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Section resolvers
// ---------------------------------------------------------------------------

fn resolve_base(entries: &Entries) -> Result<BaseSpec, ConfigError> {
    let mut keys = Keys::new("base", entries);
    let (gen_str, gen_line) = keys.require("generator")?;
    let (name, args) = p_call(gen_str, gen_line)?;
    let generator = match name.as_str() {
        "uniform" => {
            arity(gen_line, &name, &args, 0)?;
            GeneratorSpec::Uniform
        }
        "constant-rate" => {
            arity(gen_line, &name, &args, 1)?;
            GeneratorSpec::ConstantRate { rate: p_f64(&args[0], gen_line)? }
        }
        "two-mode" => {
            arity(gen_line, &name, &args, 3)?;
            GeneratorSpec::TwoMode {
                short_p: p_f64(&args[0], gen_line)?,
                long_p: p_f64(&args[1], gen_line)?,
                long_len: p_usize(&args[2], gen_line)?,
            }
        }
        "random" => {
            arity(gen_line, &name, &args, 1)?;
            GeneratorSpec::Random { seed: p_u64(&args[0], gen_line)? }
        }
        "tempering-gap" => {
            arity(gen_line, &name, &args, 0)?;
            GeneratorSpec::TemperingGap
        }
        "file" => {
            arity(gen_line, &name, &args, 1)?;
            GeneratorSpec::File { path: args[0].clone() }
        }
        other => {
            return Err(ConfigError::at(
                gen_line,
                format!(
                    "unknown generator `{other}`; expected uniform, constant-rate(c), \
                     two-mode(short_p, long_p, long_len), random(seed), tempering-gap, \
                     or file(path)"
                ),
            ))
        }
    };

    let shape_is_free = matches!(
        generator,
        GeneratorSpec::Uniform | GeneratorSpec::ConstantRate { .. } | GeneratorSpec::Random { .. }
    );
    let spec = if shape_is_free {
        let vocab_size = match keys.take("vocab_size") {
            Some((v, l)) => p_usize(v, l)?,
            None => 3,
        };
        let eos_id = match keys.take("eos_id") {
            Some((v, l)) => p_usize(v, l)?,
            None => 0,
        };
        let marker_id = match keys.take("marker_id") {
            Some(("none", _)) => None,
            Some((v, l)) => Some(p_usize(v, l)?),
            None => None,
        };
        let max_len = match keys.take("max_len") {
            Some((v, l)) => p_usize(v, l)?,
            None => 4,
        };
        let num_queries = match keys.take("num_queries") {
            Some((v, l)) => p_usize(v, l)?,
            None => 1,
        };
        BaseSpec { generator, vocab_size, eos_id, marker_id, max_len, num_queries }
    } else {
        for fixed in ["vocab_size", "eos_id", "marker_id", "max_len"] {
            if let Some((_, l)) = keys.take(fixed) {
                return Err(ConfigError::at(
                    l,
                    format!("`{fixed}` is fixed by this generator and cannot be set"),
                ));
            }
        }
        let num_queries = match &generator {
            GeneratorSpec::File { .. } => {
                if let Some((_, l)) = keys.take("num_queries") {
                    return Err(ConfigError::at(
                        l,
                        "`num_queries` is read from the policy file and cannot be set".to_string(),
                    ));
                }
                0
            }
            _ => match keys.take("num_queries") {
                Some((v, l)) => p_usize(v, l)?,
                None => 1,
            },
        };
        let (vocab_size, eos_id, max_len) = match &generator {
            GeneratorSpec::TwoMode { long_len, .. } => (2, 0, *long_len),
            GeneratorSpec::TemperingGap => (3, 0, 2),
            GeneratorSpec::File { .. } => (0, 0, 0),
            _ => unreachable!("shape-free generators handled above"),
        };
        BaseSpec { generator, vocab_size, eos_id, marker_id: None, max_len, num_queries }
    };
    keys.finish()?;
    Ok(spec)
}

fn resolve_target(entries: &Entries) -> Result<TargetSpec, ConfigError> {
    let mut keys = Keys::new("target", entries);
    let (alpha_str, alpha_line) = keys.require("alpha")?;
    let alpha = p_f64(alpha_str, alpha_line)?;
    let psi_value = match keys.take("psi_value") {
        Some((v, l)) => p_f64(v, l)?,
        None => -0.5,
    };
    let marker_required = match keys.take("marker_required") {
        Some((v, l)) => p_bool(v, l)?,
        None => false,
    };
    let length_aware = match keys.take("length_aware") {
        Some((v, l)) => p_bool(v, l)?,
        None => false,
    };
    let psi_mode = match keys.take("psi_mode") {
        Some(("per_token", _)) => PsiMode::PerToken,
        Some(("flat", _)) => PsiMode::Flat,
        Some((v, l)) => {
            return Err(ConfigError::at(l, format!("expected `per_token` or `flat`, got `{v}`")))
        }
        None => PsiMode::PerToken,
    };
    keys.finish()?;
    let spec = TargetSpec { alpha, psi_value, marker_required, length_aware, psi_mode };
    spec.validate().map_err(|e| ConfigError::new(format!("[target] {e}")))?;
    Ok(spec)
}

fn resolve_train(entries: &Entries) -> Result<TrainSection, ConfigError> {
    let mut keys = Keys::new("train", entries);
    let loss = match keys.take("loss") {
        Some((v, l)) => Some(
            v.parse::<LossKind>().map_err(|_| {
                ConfigError::at(
                    l,
                    format!(
                        "unknown loss `{v}`; expected tb_traj, tb_token, la_tb, powerflow, \
                         rl_traj, or rl_token"
                    ),
                )
            })?,
        ),
        None => None,
    };
    let steps = match keys.take("steps") {
        Some((v, l)) => p_usize(v, l)?,
        None => 2000,
    };
    let batch_queries = match keys.take("batch_queries") {
        Some((v, l)) => Some(p_usize(v, l)?),
        None => None,
    };
    let samples_per_query = match keys.take("samples_per_query") {
        Some((v, l)) => p_usize(v, l)?,
        None => 16,
    };
    let lr = match keys.take("lr") {
        Some((v, l)) => p_f64(v, l)?,
        None => 0.05,
    };
    let logz_lr = match keys.take("logz_lr") {
        Some((v, l)) => p_f64(v, l)?,
        None => 0.5,
    };
    let optimizer = match keys.take("optimizer") {
        Some((v, l)) => {
            let (name, args) = p_call(v, l)?;
            match name.as_str() {
                "sgd" => {
                    arity(l, &name, &args, 0)?;
                    Optimizer::Sgd
                }
                "adaptive" => {
                    if args.is_empty() {
                        Optimizer::adaptive_default()
                    } else {
                        arity(l, &name, &args, 3)?;
                        Optimizer::AdaptiveMoment {
                            beta1: p_f64(&args[0], l)?,
                            beta2: p_f64(&args[1], l)?,
                            eps: p_f64(&args[2], l)?,
                        }
                    }
                }
                other => {
                    return Err(ConfigError::at(
                        l,
                        format!("unknown optimizer `{other}`; expected sgd or adaptive(b1, b2, eps)"),
                    ))
                }
            }
        }
        None => Optimizer::Sgd,
    };
    let temperature = match keys.take("temperature") {
        Some((v, l)) => Some(p_f64(v, l)?),
        None => None,
    };
    let clip_eps_low = match keys.take("clip_eps_low") {
        Some((v, l)) => p_f64(v, l)?,
        None => 0.2,
    };
    let clip_eps_high = match keys.take("clip_eps_high") {
        Some((v, l)) => p_f64(v, l)?,
        None => 0.28,
    };
    let refresh_every = match keys.take("refresh_every") {
        Some((v, l)) => p_usize(v, l)?,
        None => 8,
    };
    let seed = match keys.take("seed") {
        Some((v, l)) => p_u64(v, l)?,
        None => 0,
    };
    let beta = match keys.take("beta") {
        Some((v, l)) => p_f64(v, l)?,
        None => 1.0,
    };
    let logz_mode = match keys.take("logz_mode") {
        Some(("scalar", _)) => LogZMode::Scalar,
        Some(("per_length", _)) => LogZMode::PerLength,
        Some((v, l)) => {
            return Err(ConfigError::at(l, format!("expected `scalar` or `per_length`, got `{v}`")))
        }
        None => LogZMode::Scalar,
    };
    let logz_init_noise = match keys.take("logz_init_noise") {
        Some((v, l)) => p_f64(v, l)?,
        None => 0.01,
    };
    let metrics_every = match keys.take("metrics_every") {
        Some((v, l)) => p_usize(v, l)?,
        None => 1,
    };
    keys.finish()?;
    Ok(TrainSection {
        loss,
        steps,
        batch_queries,
        samples_per_query,
        lr,
        logz_lr,
        optimizer,
        temperature,
        clip_eps_low,
        clip_eps_high,
        refresh_every,
        seed,
        beta,
        logz_mode,
        logz_init_noise,
        metrics_every,
    })
}

fn resolve_compare(entries: &Entries) -> Result<Vec<LossKind>, ConfigError> {
    let mut keys = Keys::new("compare", entries);
    let (v, l) = keys.require("losses")?;
    let mut losses = Vec::new();
    for part in v.split(',') {
        let name = part.trim();
        let kind = name.parse::<LossKind>().map_err(|_| {
            ConfigError::at(l, format!("unknown loss `{name}` in `losses`"))
        })?;
        if losses.contains(&kind) {
            return Err(ConfigError::at(l, format!("loss `{name}` listed twice")));
        }
        losses.push(kind);
    }
    keys.finish()?;
    Ok(losses)
}

fn resolve_vote(entries: &Entries) -> Result<VoteSection, ConfigError> {
    let mut keys = Keys::new("vote", entries);
    let (pi0_str, pi0_line) = keys.require("pi0")?;
    let pi0 = p_f64_list(pi0_str, pi0_line)?;
    let n_votes = match keys.take("n_votes") {
        Some((v, l)) => p_usize(v, l)?,
        None => 3,
    };
    let beta = match keys.take("beta") {
        Some((v, l)) => p_f64(v, l)?,
        None => 1.0,
    };
    let iterations = match keys.take("iterations") {
        Some((v, l)) => p_usize(v, l)?,
        None => 10_000,
    };
    let mode = match keys.take("mode") {
        Some((v, l)) => {
            let (name, args) = p_call(v, l)?;
            match name.as_str() {
                "exact" => {
                    arity(l, &name, &args, 0)?;
                    VoteMode::Exact
                }
                "monte-carlo" => {
                    arity(l, &name, &args, 2)?;
                    VoteMode::MonteCarlo {
                        samples: p_usize(&args[0], l)?,
                        seed: p_u64(&args[1], l)?,
                    }
                }
                other => {
                    return Err(ConfigError::at(
                        l,
                        format!("unknown mode `{other}`; expected exact or monte-carlo(samples, seed)"),
                    ))
                }
            }
        }
        None => VoteMode::Exact,
    };
    let reward_rule = match keys.take("reward_rule") {
        Some(("selected", _)) => RewardRule::SelectedWinner,
        Some(("membership", _)) => RewardRule::Membership,
        Some((v, l)) => {
            return Err(ConfigError::at(l, format!("expected `selected` or `membership`, got `{v}`")))
        }
        None => RewardRule::SelectedWinner,
    };
    keys.finish()?;
    Ok(VoteSection { pi0, n_votes, beta, iterations, mode, reward_rule })
}

fn resolve_gradcheck(entries: &Entries) -> Result<GradcheckSection, ConfigError> {
    let mut keys = Keys::new("gradcheck", entries);
    let instances = match keys.take("instances") {
        Some((v, l)) => p_usize(v, l)?,
        None => 50,
    };
    let h = match keys.take("h") {
        Some((v, l)) => p_f64(v, l)?,
        None => 1e-5,
    };
    let seed = match keys.take("seed") {
        Some((v, l)) => p_u64(v, l)?,
        None => 0,
    };
    keys.finish()?;
    if instances == 0 {
        return Err(ConfigError::new("[gradcheck] instances must be >= 1"));
    }
    if !(h > 0.0) {
        return Err(ConfigError::new("[gradcheck] h must be positive"));
    }
    Ok(GradcheckSection { instances, h, seed })
}

fn resolve_output(entries: &Entries) -> Result<String, ConfigError> {
    let mut keys = Keys::new("output", entries);
    let dir = match keys.take("dir") {
        Some((v, l)) => {
            if v.is_empty() {
                return Err(ConfigError::at(l, "output dir must be nonempty"));
            }
            v.to_string()
        }
        None => "out".to_string(),
    };
    keys.finish()?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// Whole-config resolution
// ---------------------------------------------------------------------------

pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let sections = parse_sections(text)?;

    let base = sections.get("base").map(|e| resolve_base(e)).transpose()?;
    let target = sections.get("target").map(|e| resolve_target(e)).transpose()?;
    let train = sections.get("train").map(|e| resolve_train(e)).transpose()?;
    let compare_losses = sections.get("compare").map(|e| resolve_compare(e)).transpose()?;
    let vote = sections.get("vote").map(|e| resolve_vote(e)).transpose()?;
    let gradcheck = sections.get("gradcheck").map(|e| resolve_gradcheck(e)).transpose()?;
    let out_dir = match sections.get("output") {
        Some(e) => resolve_output(e)?,
        None => "out".to_string(),
    };

    let experiment_sections: Vec<&str> = ["base", "target", "train", "compare", "vote", "gradcheck"]
        .into_iter()
        .filter(|s| sections.contains_key(*s))
        .collect();
    let listing = || experiment_sections.join(", ");

    let command = if gradcheck.is_some() {
        if experiment_sections.len() > 1 {
            return Err(ConfigError::new(format!(
                "[gradcheck] cannot be combined with other experiment sections (found: {})",
                listing()
            )));
        }
        Command::Gradcheck
    } else if vote.is_some() {
        if experiment_sections.len() > 1 {
            return Err(ConfigError::new(format!(
                "[vote] cannot be combined with other experiment sections (found: {})",
                listing()
            )));
        }
        Command::Mvsim
    } else if let Some(train_section) = &train {
        if base.is_none() || target.is_none() {
            return Err(ConfigError::new(
                "[train] requires [base] and [target] sections".to_string(),
            ));
        }
        if compare_losses.is_some() {
            if train_section.loss.is_some() {
                return Err(ConfigError::new(
                    "a compare config takes its losses from [compare]; remove `loss` from [train]"
                        .to_string(),
                ));
            }
            if compare_losses.as_ref().is_some_and(|l| l.is_empty()) {
                return Err(ConfigError::new("[compare] losses list must be nonempty".to_string()));
            }
            Command::Compare
        } else {
            if train_section.loss.is_none() {
                return Err(ConfigError::new(
                    "a train config needs `loss` in [train] (or a [compare] section)".to_string(),
                ));
            }
            Command::Train
        }
    } else if base.is_some() {
        if compare_losses.is_some() {
            return Err(ConfigError::new("[compare] requires a [train] section".to_string()));
        }
        if target.is_none() {
            return Err(ConfigError::new("[base] without [train] describes an oracle dump and requires [target]".to_string()));
        }
        Command::Oracle
    } else if experiment_sections.is_empty() {
        return Err(ConfigError::new(
            "config defines no experiment: add [base]+[target](+[train]), [vote], or [gradcheck]"
                .to_string(),
        ));
    } else {
        return Err(ConfigError::new(format!(
            "config sections do not describe any subcommand (found: {})",
            listing()
        )));
    };

    Ok(ExperimentConfig {
        command,
        base,
        target,
        train,
        compare_losses,
        vote,
        gradcheck,
        out_dir,
    })
}

pub fn parse_file(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text)
}

// ---------------------------------------------------------------------------
// Serialization (canonical form; parse . serialize == identity)
// ---------------------------------------------------------------------------

fn generator_str(g: &GeneratorSpec) -> String {
    match g {
        GeneratorSpec::Uniform => "uniform".to_string(),
        GeneratorSpec::ConstantRate { rate } => format!("constant-rate({})", fmt_f64(*rate)),
        GeneratorSpec::TwoMode { short_p, long_p, long_len } => {
            format!("two-mode({}, {}, {long_len})", fmt_f64(*short_p), fmt_f64(*long_p))
        }
        GeneratorSpec::Random { seed } => format!("random({seed})"),
        GeneratorSpec::TemperingGap => "tempering-gap".to_string(),
        GeneratorSpec::File { path } => format!("file({path})"),
    }
}

pub fn serialize(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    if let Some(base) = &cfg.base {
        s.push_str("[base]\n");
        let _ = writeln!(s, "generator = {}", generator_str(&base.generator));
        let shape_is_free = matches!(
            base.generator,
            GeneratorSpec::Uniform | GeneratorSpec::ConstantRate { .. } | GeneratorSpec::Random { .. }
        );
        if shape_is_free {
            let _ = writeln!(s, "vocab_size = {}", base.vocab_size);
            let _ = writeln!(s, "eos_id = {}", base.eos_id);
            match base.marker_id {
                Some(m) => drop(writeln!(s, "marker_id = {m}")),
                None => drop(writeln!(s, "marker_id = none")),
            }
            let _ = writeln!(s, "max_len = {}", base.max_len);
        }
        if !matches!(base.generator, GeneratorSpec::File { .. }) {
            let _ = writeln!(s, "num_queries = {}", base.num_queries);
        }
        s.push('\n');
    }
    if let Some(t) = &cfg.target {
        s.push_str("[target]\n");
        let _ = writeln!(s, "alpha = {}", fmt_f64(t.alpha));
        let _ = writeln!(s, "psi_value = {}", fmt_f64(t.psi_value));
        let _ = writeln!(s, "marker_required = {}", t.marker_required);
        let _ = writeln!(s, "length_aware = {}", t.length_aware);
        let _ = writeln!(
            s,
            "psi_mode = {}",
            match t.psi_mode {
                PsiMode::PerToken => "per_token",
                PsiMode::Flat => "flat",
            }
        );
        s.push('\n');
    }
    if let Some(t) = &cfg.train {
        s.push_str("[train]\n");
        if let Some(loss) = t.loss {
            let _ = writeln!(s, "loss = {loss}");
        }
        let _ = writeln!(s, "steps = {}", t.steps);
        if let Some(b) = t.batch_queries {
            let _ = writeln!(s, "batch_queries = {b}");
        }
        let _ = writeln!(s, "samples_per_query = {}", t.samples_per_query);
        let _ = writeln!(s, "lr = {}", fmt_f64(t.lr));
        let _ = writeln!(s, "logz_lr = {}", fmt_f64(t.logz_lr));
        match t.optimizer {
            Optimizer::Sgd => drop(writeln!(s, "optimizer = sgd")),
            Optimizer::AdaptiveMoment { beta1, beta2, eps } => drop(writeln!(
                s,
                "optimizer = adaptive({}, {}, {})",
                fmt_f64(beta1),
                fmt_f64(beta2),
                fmt_f64(eps)
            )),
        }
        if let Some(temp) = t.temperature {
            let _ = writeln!(s, "temperature = {}", fmt_f64(temp));
        }
        let _ = writeln!(s, "clip_eps_low = {}", fmt_f64(t.clip_eps_low));
        let _ = writeln!(s, "clip_eps_high = {}", fmt_f64(t.clip_eps_high));
        let _ = writeln!(s, "refresh_every = {}", t.refresh_every);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "beta = {}", fmt_f64(t.beta));
        let _ = writeln!(
            s,
            "logz_mode = {}",
            match t.logz_mode {
                LogZMode::Scalar => "scalar",
                LogZMode::PerLength => "per_length",
            }
        );
        let _ = writeln!(s, "logz_init_noise = {}", fmt_f64(t.logz_init_noise));
        let _ = writeln!(s, "metrics_every = {}", t.metrics_every);
        s.push('\n');
    }
    if let Some(losses) = &cfg.compare_losses {
        s.push_str("[compare]\n");
        let names: Vec<String> = losses.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(s, "losses = {}", names.join(", "));
        s.push('\n');
    }
    if let Some(v) = &cfg.vote {
        s.push_str("[vote]\n");
        let entries: Vec<String> = v.pi0.iter().map(|&p| fmt_f64(p)).collect();
        let _ = writeln!(s, "pi0 = {}", entries.join(", "));
        let _ = writeln!(s, "n_votes = {}", v.n_votes);
        let _ = writeln!(s, "beta = {}", fmt_f64(v.beta));
        let _ = writeln!(s, "iterations = {}", v.iterations);
        match v.mode {
            VoteMode::Exact => {
                let _ = writeln!(s, "mode = exact");
            }
            VoteMode::MonteCarlo { samples, seed } => {
                let _ = writeln!(s, "mode = monte-carlo({samples}, {seed})");
            }
        }
        let _ = writeln!(
            s,
            "reward_rule = {}",
            match v.reward_rule {
                RewardRule::SelectedWinner => "selected",
                RewardRule::Membership => "membership",
            }
        );
        s.push('\n');
    }
    if let Some(g) = &cfg.gradcheck {
        s.push_str("[gradcheck]\n");
        let _ = writeln!(s, "instances = {}", g.instances);
        let _ = writeln!(s, "h = {}", fmt_f64(g.h));
        let _ = writeln!(s, "seed = {}", g.seed);
        s.push('\n');
    }
    s.push_str("[output]\n");
    let _ = writeln!(s, "dir = {}", cfg.out_dir);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRAIN_CFG: &str = "\
# length-aware balancing on a random base
[base]
generator = random(42)
vocab_size = 3
max_len = 4

[target]
alpha = 4

[train]
loss = la_tb
steps = 200
seed = 7

[output]
dir = runs/demo
";

    #[test]
    fn parses_a_train_config_with_defaults() {
        let cfg = parse(TRAIN_CFG).unwrap();
        assert_eq!(cfg.command, Command::Train);
        let base = cfg.base.as_ref().unwrap();
        assert_eq!(base.generator, GeneratorSpec::Random { seed: 42 });
        assert_eq!(base.vocab_size, 3);
        assert_eq!(base.eos_id, 0);
        assert_eq!(base.marker_id, None);
        assert_eq!(base.max_len, 4);
        assert_eq!(base.num_queries, 1);
        let t = cfg.target.unwrap();
        assert_eq!(t.alpha, 4.0);
        assert_eq!(t.psi_value, -0.5);
        let ts = cfg.train.as_ref().unwrap();
        assert_eq!(ts.loss, Some(LossKind::LaTb));
        assert_eq!(ts.steps, 200);
        assert_eq!(ts.samples_per_query, 16);
        assert_eq!(ts.seed, 7);
        assert_eq!(ts.temperature, None);
        assert_eq!(cfg.out_dir, "runs/demo");

        let tc = ts.to_train_config(LossKind::LaTb, t, 1);
        assert_eq!(tc.batch_queries, 1);
        assert_eq!(tc.temperature, 1.0);
        let flat = ts.to_train_config(LossKind::LaTb, TargetSpec::power(0.5), 1);
        assert_eq!(flat.temperature, 0.7);
    }

    #[test]
    fn round_trips_every_command_shape() {
        let mvsim = "\
[vote]
pi0 = 0.6, 0.4
n_votes = 3
mode = monte-carlo(1000, 9)
reward_rule = membership
";
        let gradcheck = "\
[gradcheck]
instances = 10
h = 0.00001
";
        let compare = "\
[base]
generator = two-mode(0.6, 0.7, 6)

[target]
alpha = 4
psi_mode = flat

[train]
steps = 50
optimizer = adaptive(0.9, 0.999, 0.00000001)
temperature = 0.9
logz_mode = per_length

[compare]
losses = tb_traj, la_tb
";
        let oracle = "\
[base]
generator = tempering-gap

[target]
alpha = 2
";
        for (text, command) in [
            (TRAIN_CFG, Command::Train),
            (mvsim, Command::Mvsim),
            (gradcheck, Command::Gradcheck),
            (compare, Command::Compare),
            (oracle, Command::Oracle),
        ] {
            let cfg = parse(text).unwrap();
            assert_eq!(cfg.command, command);
            let rt = parse(&serialize(&cfg)).unwrap();
            assert_eq!(rt, cfg, "round trip changed the {} config", command.name());
        }
    }

    #[test]
    fn rejects_malformed_lines_and_unknown_names() {
        let cases: [(&str, &str); 8] = [
            ("lr = 0.5\n", "before any"),
            ("[train\n", "unterminated"),
            ("[sandwich]\n", "unknown section"),
            ("[train]\nsteps = 5\nsteps = 6\n", "duplicate key"),
            ("[train]\n[train]\n", "duplicate section"),
            ("[train]\nstep = 5\n", "unknown key"),
            ("[train]\nloss = shortcut\n", "unknown loss"),
            ("[base]\ngenerator = fractal(3)\n", "unknown generator"),
        ];
        for (text, expect) in cases {
            let err = parse(text).unwrap_err().to_string();
            assert!(err.contains(expect), "`{text}` gave `{err}`, wanted `{expect}`");
        }
    }

    #[test]
    fn enforces_one_experiment_per_config() {
        // Vote plus train is ambiguous.
        let both = "[vote]\npi0 = 0.6, 0.4\n\n[train]\nloss = la_tb\n";
        assert!(parse(both).unwrap_err().to_string().contains("cannot be combined"));
        // Train without its base.
        let bare = "[train]\nloss = la_tb\n";
        assert!(parse(bare).unwrap_err().to_string().contains("requires [base]"));
        // Compare must not set a loss in [train].
        let cfg = "\
[base]
generator = uniform

[target]
alpha = 2

[train]
loss = la_tb

[compare]
losses = tb_traj
";
        assert!(parse(cfg).unwrap_err().to_string().contains("remove `loss`"));
        // Empty config.
        assert!(parse("# nothing\n").unwrap_err().to_string().contains("no experiment"));
    }

    #[test]
    fn fixed_shape_generators_reject_shape_keys() {
        let cfg = "\
[base]
generator = two-mode(0.6, 0.7, 6)
max_len = 9

[target]
alpha = 4
";
        let err = parse(cfg).unwrap_err().to_string();
        assert!(err.contains("fixed by this generator"), "{err}");

        let ok = parse(
            "[base]\ngenerator = two-mode(0.6, 0.7, 6)\nnum_queries = 2\n\n[target]\nalpha = 4\n",
        )
        .unwrap();
        let base = ok.base.unwrap();
        assert_eq!(base.max_len, 6);
        assert_eq!(base.vocab_size, 2);
        assert_eq!(base.num_queries, 2);
    }

    #[test]
    fn builds_every_generator() {
        use powerflow_core::AutoregressivePolicy;
        let dir = Path::new(".");
        let specs = [
            ("uniform", 3, 4),
            ("constant-rate(-1.0986122886681098)", 3, 4),
            ("random(5)", 3, 4),
            ("two-mode(0.6, 0.7, 6)", 2, 6),
            ("tempering-gap", 3, 2),
        ];
        for (gen, vocab_size, max_len) in specs {
            let cfg =
                parse(&format!("[base]\ngenerator = {gen}\n\n[target]\nalpha = 2\n")).unwrap();
            let built = cfg.base.unwrap().build(dir).unwrap();
            assert_eq!(built.vocab().size, vocab_size, "{gen}");
            match built {
                LoadedPolicy::Tabular(p) => assert_eq!(p.max_len(), max_len, "{gen}"),
                LoadedPolicy::Bigram(_) => panic!("generators produce tabular bases"),
            }
        }
    }

    #[test]
    fn vote_section_maps_to_core_types() {
        let cfg = parse("[vote]\npi0 = 0.5, 0.3, 0.2\nn_votes = 5\nbeta = 0.25\niterations = 77\n")
            .unwrap();
        let v = cfg.vote.unwrap();
        let pop = v.population().unwrap();
        assert_eq!(pop.probs(), &[0.5, 0.3, 0.2]);
        let vc = v.vote_config();
        assert_eq!(vc.n_votes, 5);
        assert_eq!(vc.beta, 0.25);
        assert_eq!(vc.iterations, 77);
        assert_eq!(vc.mode, VoteMode::Exact);
        assert_eq!(vc.reward_rule, RewardRule::SelectedWinner);

        let bad = parse("[vote]\npi0 = 0.5, 0.3\n").unwrap();
        assert!(bad.vote.unwrap().population().unwrap_err().to_string().contains("sum to 1"));
    }
}
