//! Subcommand implementations. Every command computes all of its artifacts
//! in memory and returns them; the caller writes files only after the whole
//! computation succeeded, so failed runs leave nothing behind.

use std::path::Path;

use powerflow_core::mvsim::run_dynamics;
use powerflow_core::objectives::{grad_loss, sample_loss, LossParams, SampleTerms};
use powerflow_core::oracle::{
    finite_diff, length_aware_target, policy_distribution, power_target,
};
use powerflow_core::policy::LoadedPolicy;
use powerflow_core::trainer::{compare_dynamics, train};
use powerflow_core::{
    AutoregressivePolicy, ClipSpec, LossKind, PsiMode, QueryId, StepMetrics, TargetSpec,
    UniverseDist, Vocab,
};
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

use crate::artifacts::{
    fmt_f64, gradcheck_csv, kv_summary_csv, metrics_jsonl, mvsim_csv, oracle_csv,
    scalar_summary_csv, train_summary_csv, RunSummary,
};
use crate::chart::{render_chart, Series};
use crate::config::{BaseSpec, Command, ExperimentConfig, GradcheckSection, TrainSection};
use crate::CliError;

/// One output file, assembled in memory.
pub struct Artifact {
    pub name: String,
    pub content: String,
}

/// Execute the experiment a config describes; returns the artifacts to write
/// and the lines to print on success.
pub fn execute(
    cfg: &ExperimentConfig,
    config_dir: &Path,
) -> Result<(Vec<Artifact>, Vec<String>), CliError> {
    match cfg.command {
        Command::Train => cmd_train(cfg, config_dir),
        Command::Compare => cmd_compare(cfg, config_dir),
        Command::Oracle => cmd_oracle(cfg, config_dir),
        Command::Mvsim => cmd_mvsim(cfg),
        Command::Gradcheck => cmd_gradcheck(cfg),
    }
}

// ---------------------------------------------------------------------------
// train / compare
// ---------------------------------------------------------------------------

struct RunData {
    kind: LossKind,
    metrics: Vec<StepMetrics>,
    max_weight_deviation: f64,
}

impl RunData {
    fn last(&self) -> &StepMetrics {
        self.metrics.last().expect("training records at least the final step")
    }

    fn summary(&self) -> RunSummary {
        RunSummary::from_metrics(
            self.kind.to_string(),
            self.last().step + 1,
            self.max_weight_deviation,
            self.last(),
        )
    }

    fn series(&self, name: &str, f: impl Fn(&StepMetrics) -> f64) -> Series {
        Series::new(name, self.metrics.iter().map(|m| (m.step as f64, f(m))).collect())
    }
}

fn run_losses(
    section: &TrainSection,
    losses: &[LossKind],
    target: TargetSpec,
    base_spec: &BaseSpec,
    config_dir: &Path,
) -> Result<Vec<RunData>, CliError> {
    fn go<P: AutoregressivePolicy>(
        section: &TrainSection,
        losses: &[LossKind],
        target: TargetSpec,
        base: &P,
    ) -> Result<Vec<RunData>, CliError> {
        let queries: Vec<QueryId> = (0..base.num_queries()).map(QueryId).collect();
        let configs: Vec<_> = losses
            .iter()
            .map(|&k| section.to_train_config(k, target, queries.len()))
            .collect();
        if losses.len() == 1 {
            let out = train(&configs[0], base, &queries)?;
            return Ok(vec![RunData {
                kind: losses[0],
                metrics: out.metrics,
                max_weight_deviation: out.max_weight_deviation,
            }]);
        }
        let runs = compare_dynamics(&configs, base, &queries)?;
        Ok(runs
            .into_iter()
            .map(|r| RunData {
                kind: r.losskind,
                metrics: r.output.metrics,
                max_weight_deviation: r.output.max_weight_deviation,
            })
            .collect())
    }

    match base_spec.build(config_dir)? {
        LoadedPolicy::Tabular(b) => go(section, losses, target, &b),
        LoadedPolicy::Bigram(b) => go(section, losses, target, &b),
    }
}

fn cmd_train(
    cfg: &ExperimentConfig,
    config_dir: &Path,
) -> Result<(Vec<Artifact>, Vec<String>), CliError> {
    let section = cfg.train.as_ref().expect("train config has [train]");
    let loss = section.loss.expect("train config has a loss");
    let target = cfg.target.expect("train config has [target]");
    let base_spec = cfg.base.as_ref().expect("train config has [base]");

    let runs = run_losses(section, &[loss], target, base_spec, config_dir)?;
    let run = &runs[0];
    let chart = render_chart(
        &format!("training diagnostics ({loss})"),
        "step",
        "value",
        &[
            run.series("tv_to_target", |m| m.tv_to_target),
            run.series("kl_to_target", |m| m.kl_to_target),
            run.series("mean_sampled_length", |m| m.mean_sampled_length),
        ],
    )?;
    let artifacts = vec![
        Artifact { name: "metrics.jsonl".into(), content: metrics_jsonl(&run.metrics) },
        Artifact { name: "summary.csv".into(), content: train_summary_csv(&[run.summary()]) },
        Artifact { name: "chart.svg".into(), content: chart },
    ];
    let last = run.last();
    let lines = vec![format!(
        "train {loss}: {} steps, final tv {}, final kl {}, final mean length {}",
        last.step + 1,
        fmt_f64(last.tv_to_target),
        fmt_f64(last.kl_to_target),
        fmt_f64(last.mean_sampled_length),
    )];
    Ok((artifacts, lines))
}

fn cmd_compare(
    cfg: &ExperimentConfig,
    config_dir: &Path,
) -> Result<(Vec<Artifact>, Vec<String>), CliError> {
    let section = cfg.train.as_ref().expect("compare config has [train]");
    let losses = cfg.compare_losses.as_ref().expect("compare config has [compare]");
    let target = cfg.target.expect("compare config has [target]");
    let base_spec = cfg.base.as_ref().expect("compare config has [base]");

    let runs = run_losses(section, losses, target, base_spec, config_dir)?;
    let chart = render_chart(
        "mean sampled length by objective",
        "step",
        "mean sampled length",
        &runs
            .iter()
            .map(|r| r.series(&r.kind.to_string(), |m| m.mean_sampled_length))
            .collect::<Vec<_>>(),
    )?;
    let mut artifacts: Vec<Artifact> = runs
        .iter()
        .map(|r| Artifact {
            name: format!("metrics_{}.jsonl", r.kind),
            content: metrics_jsonl(&r.metrics),
        })
        .collect();
    let summaries: Vec<RunSummary> = runs.iter().map(|r| r.summary()).collect();
    artifacts.push(Artifact { name: "summary.csv".into(), content: train_summary_csv(&summaries) });
    artifacts.push(Artifact { name: "chart.svg".into(), content: chart });
    let lines = runs
        .iter()
        .map(|r| {
            let last = r.last();
            format!(
                "compare {}: final mean length {}, final tv {}",
                r.kind,
                fmt_f64(last.mean_sampled_length),
                fmt_f64(last.tv_to_target),
            )
        })
        .collect();
    Ok((artifacts, lines))
}

// ---------------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------------

fn cmd_oracle(
    cfg: &ExperimentConfig,
    config_dir: &Path,
) -> Result<(Vec<Artifact>, Vec<String>), CliError> {
    let spec = cfg.target.expect("oracle config has [target]");
    let base_spec = cfg.base.as_ref().expect("oracle config has [base]");

    fn go<P: AutoregressivePolicy>(
        base: &P,
        spec: &TargetSpec,
    ) -> Result<Vec<(usize, UniverseDist, UniverseDist, UniverseDist, f64, f64)>, CliError> {
        let mut out = Vec::new();
        for q in 0..base.num_queries() {
            let query = QueryId(q);
            let power = power_target(base, query, spec)?;
            let la = length_aware_target(base, query, spec)?;
            let pdist = policy_distribution(base, query)?;
            out.push((q, pdist, power.dist, la.dist, power.log_z, la.log_z));
        }
        Ok(out)
    }

    let per_query = match base_spec.build(config_dir)? {
        LoadedPolicy::Tabular(b) => go(&b, &spec)?,
        LoadedPolicy::Bigram(b) => go(&b, &spec)?,
    };

    let mut summary_rows: Vec<(usize, &str, String)> = Vec::new();
    let mut lines = Vec::new();
    for (q, base, power, la, log_z, log_zprime) in &per_query {
        let tv_base_power = powerflow_core::oracle::total_variation(&base.probs, &power.probs)?;
        let tv_base_la = powerflow_core::oracle::total_variation(&base.probs, &la.probs)?;
        let base_marginal = base.first_token_marginal(base_vocab_size(base));
        let power_marginal = power.first_token_marginal(base_vocab_size(base));
        let first_token_gap = base_marginal
            .iter()
            .zip(&power_marginal)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        summary_rows.push((*q, "log_z", fmt_f64(*log_z)));
        summary_rows.push((*q, "log_zprime", fmt_f64(*log_zprime)));
        summary_rows.push((*q, "base_mean_length", fmt_f64(base.mean_length())));
        summary_rows.push((*q, "power_mean_length", fmt_f64(power.mean_length())));
        summary_rows.push((*q, "la_mean_length", fmt_f64(la.mean_length())));
        summary_rows.push((*q, "base_entropy", fmt_f64(base.entropy())));
        summary_rows.push((*q, "power_entropy", fmt_f64(power.entropy())));
        summary_rows.push((*q, "la_entropy", fmt_f64(la.entropy())));
        summary_rows.push((*q, "tv_base_power", fmt_f64(tv_base_power)));
        summary_rows.push((*q, "tv_base_la", fmt_f64(tv_base_la)));
        summary_rows.push((*q, "first_token_gap", fmt_f64(first_token_gap)));
        lines.push(format!(
            "oracle query {q}: log_z {}, log_zprime {}, tv(base, power) {}",
            fmt_f64(*log_z),
            fmt_f64(*log_zprime),
            fmt_f64(tv_base_power),
        ));
    }

    let csv_rows: Vec<(usize, &UniverseDist, &UniverseDist, &UniverseDist)> =
        per_query.iter().map(|(q, b, p, l, _, _)| (*q, b, p, l)).collect();

    let (_, base0, power0, la0, _, _) = &per_query[0];
    let index_series = |name: &str, dist: &UniverseDist| {
        Series::new(
            name,
            dist.probs.iter().enumerate().map(|(i, &p)| (i as f64, p)).collect(),
        )
    };
    let chart = render_chart(
        "base vs exact targets over the trajectory universe (query 0)",
        "trajectory index",
        "probability",
        &[
            index_series("p_base", base0),
            index_series("p_power", power0),
            index_series("p_length_aware", la0),
        ],
    )?;

    let artifacts = vec![
        Artifact { name: "oracle.csv".into(), content: oracle_csv(&csv_rows) },
        Artifact { name: "summary.csv".into(), content: scalar_summary_csv(&summary_rows) },
        Artifact { name: "chart.svg".into(), content: chart },
    ];
    Ok((artifacts, lines))
}

fn base_vocab_size(dist: &UniverseDist) -> usize {
    dist.trajectories
        .iter()
        .flat_map(|y| y.tokens.iter().copied())
        .max()
        .map_or(1, |m| m + 1)
}

// ---------------------------------------------------------------------------
// mvsim
// ---------------------------------------------------------------------------

fn cmd_mvsim(cfg: &ExperimentConfig) -> Result<(Vec<Artifact>, Vec<String>), CliError> {
    let section = cfg.vote.as_ref().expect("mvsim config has [vote]");
    let pop = section.population()?;
    let vc = section.vote_config();
    let run = run_dynamics(&pop, &vc)?;

    let final_step = run.steps.last().expect("dynamics record at least the initial state");
    let final_mass = final_step.population.probs()[run.mode];
    let summary = kv_summary_csv(&[
        ("mode_index", run.mode.to_string()),
        ("converged", run.converged.to_string()),
        ("iterations_recorded", final_step.iteration.to_string()),
        ("final_mode_mass", fmt_f64(final_mass)),
    ]);

    let m = pop.len();
    let series: Vec<Series> = (0..m)
        .map(|i| {
            Series::new(
                format!("pi_{i}"),
                run.steps
                    .iter()
                    .map(|s| (s.iteration as f64, s.population.probs()[i]))
                    .collect(),
            )
        })
        .collect();
    let chart = render_chart(
        "majority-vote population dynamics",
        "iteration",
        "probability",
        &series,
    )?;

    let artifacts = vec![
        Artifact { name: "mvsim.csv".into(), content: mvsim_csv(&run) },
        Artifact { name: "summary.csv".into(), content: summary },
        Artifact { name: "chart.svg".into(), content: chart },
    ];
    let lines = vec![format!(
        "mvsim: {m} answers, mode {} at mass {} after {} iterations (converged: {})",
        run.mode,
        fmt_f64(final_mass),
        final_step.iteration,
        run.converged,
    )];
    Ok((artifacts, lines))
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

/// The self-check gate: analytic gradients must match central finite
/// differences this tightly, relative to the gradient scale.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

/// Maximum relative error between the analytic per-sample loss gradient and
/// a central finite difference, per loss kind, over randomized instances
/// (random base, training policy, snapshot, trajectory, and constants).
/// Detached factors (the clip weight and the advantage) are pinned at their
/// unperturbed values, matching the gradient the losses are defined to have.
pub fn gradcheck_errors(
    section: &GradcheckSection,
) -> Result<Vec<(LossKind, f64)>, CliError> {
    let alphas = [4.0, 0.5, 2.0, 1.5];
    let betas = [1.0 / 3.0, 1.0, 3.0];
    let mut results = Vec::new();
    for (ki, &kind) in LossKind::ALL.iter().enumerate() {
        let mut worst = 0.0_f64;
        for i in 0..section.instances {
            let alpha = alphas[i % alphas.len()];
            let beta = betas[i % betas.len()];
            let with_marker = i % 3 == 0;
            let vocab = if with_marker {
                Vocab::new(4, 0, Some(2)).expect("valid vocabulary")
            } else {
                Vocab::plain(3, 0).expect("valid vocabulary")
            };
            let spec = TargetSpec {
                alpha,
                psi_value: -0.5,
                marker_required: with_marker,
                length_aware: kind.is_length_aware(),
                psi_mode: if i % 2 == 0 { PsiMode::PerToken } else { PsiMode::Flat },
            };
            let s = section
                .seed
                .wrapping_add(ki as u64 * 1_000_003)
                .wrapping_add(i as u64 * 37);
            let base = powerflow_core::bases::random_base(vocab, 3, 1, s)
                .map_err(|e| CliError::Config(e.to_string()))?
                .clone_frozen();
            let policy = powerflow_core::bases::random_base(vocab, 3, 1, s.wrapping_add(1))
                .map_err(|e| CliError::Config(e.to_string()))?;
            let snapshot = powerflow_core::bases::random_base(vocab, 3, 1, s.wrapping_add(2))
                .map_err(|e| CliError::Config(e.to_string()))?
                .clone_frozen();
            let mut rng = ChaCha8Rng::seed_from_u64(s.wrapping_add(3));
            let q = QueryId(0);
            let y = policy.sample(q, 1.0, &mut rng)?;
            let terms = SampleTerms::from_policies(&policy, &snapshot, &base, &spec, q, &y)?;
            let logz = -0.9 + 0.11 * (i % 17) as f64;
            let baseline = 0.15 - 0.03 * (i % 11) as f64;
            let params = LossParams { kind, alpha, beta, clip: ClipSpec::default() };
            let eval = grad_loss(&params, &terms, logz, baseline, &policy, q, &y)?;
            let numeric = finite_diff(
                &policy,
                |p| {
                    let lp = p.log_prob(q, &y).expect("perturbed policy scores its own sample");
                    let t = SampleTerms { log_pi_new: lp, ..terms };
                    match kind {
                        LossKind::PowerFlow => {
                            let len = t.len as f64;
                            let r = logz + lp / len - alpha * (t.log_pbase / len + t.psi);
                            eval.weight * r * r
                        }
                        LossKind::RlTraj | LossKind::RlToken => -eval.advantage * lp,
                        _ => sample_loss(&params, &t, logz, baseline)
                            .expect("perturbed sample terms stay finite"),
                    }
                },
                section.h,
            )?;
            let rel = eval.grad.max_abs_diff(&numeric) / eval.grad.max_abs().max(1.0);
            worst = worst.max(rel);
        }
        results.push((kind, worst));
    }
    Ok(results)
}

fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<(Vec<Artifact>, Vec<String>), CliError> {
    let section = cfg.gradcheck.as_ref().expect("gradcheck config has [gradcheck]");
    let results = gradcheck_errors(section)?;
    let overall = results.iter().fold(0.0_f64, |acc, (_, e)| acc.max(*e));
    if !(overall < GRADCHECK_TOLERANCE) {
        let (kind, err) = results
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one loss kind");
        return Err(CliError::SelfCheck(format!(
            "gradient check failed: {kind} max relative error {err:e} (tolerance {GRADCHECK_TOLERANCE:e})"
        )));
    }
    let rows: Vec<(String, usize, f64)> = results
        .iter()
        .map(|(k, e)| (k.to_string(), section.instances, *e))
        .collect();
    let artifacts =
        vec![Artifact { name: "gradcheck.csv".into(), content: gradcheck_csv(&rows) }];
    let lines = vec![format!(
        "gradcheck: {} kinds x {} instances, max relative error {:.3e} (tolerance {:.0e})",
        results.len(),
        section.instances,
        overall,
        GRADCHECK_TOLERANCE,
    )];
    Ok((artifacts, lines))
}
