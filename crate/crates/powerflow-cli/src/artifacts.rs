//! Deterministic artifact emission: a JSONL metrics stream, CSV summaries,
//! and the per-iteration table of the voting simulator. Everything is built
//! as an in-memory string and written in one shot, so a failed run leaves no
//! partial files and identical runs produce identical bytes.

use std::fmt::Write as _;

use powerflow_core::mvsim::DynamicsRun;
use powerflow_core::{StepMetrics, Termination, UniverseDist};

/// Canonical float formatting: Rust's shortest round-trip decimal form.
/// Deterministic for equal inputs, and `parse::<f64>` recovers the value.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// A float as a JSON number; the trainer only emits finite metrics, but a
/// non-finite value must not silently corrupt the stream.
fn json_num(x: f64) -> String {
    if x.is_finite() {
        fmt_f64(x)
    } else {
        "null".to_string()
    }
}

/// One JSON object per recorded step, keys matching the metric field names.
pub fn metrics_jsonl(metrics: &[StepMetrics]) -> String {
    let mut s = String::new();
    for m in metrics {
        let logz: Vec<String> = m.logz_values.iter().map(|&z| json_num(z)).collect();
        let _ = writeln!(
            s,
            "{{\"step\":{},\"mean_loss\":{},\"mean_sampled_length\":{},\"tv_to_target\":{},\
             \"kl_to_target\":{},\"logz_values\":[{}],\"mean_token_logprob_base\":{}}}",
            m.step,
            json_num(m.mean_loss),
            json_num(m.mean_sampled_length),
            json_num(m.tv_to_target),
            json_num(m.kl_to_target),
            logz.join(","),
            json_num(m.mean_token_logprob_base),
        );
    }
    s
}

/// Final-state summary of one training run.
pub struct RunSummary {
    pub loss: String,
    pub steps: usize,
    pub final_mean_loss: f64,
    pub final_mean_sampled_length: f64,
    pub final_tv_to_target: f64,
    pub final_kl_to_target: f64,
    pub max_weight_deviation: f64,
    pub logz_values: Vec<f64>,
}

impl RunSummary {
    pub fn from_metrics(
        loss: String,
        steps: usize,
        max_weight_deviation: f64,
        last: &StepMetrics,
    ) -> Self {
        RunSummary {
            loss,
            steps,
            final_mean_loss: last.mean_loss,
            final_mean_sampled_length: last.mean_sampled_length,
            final_tv_to_target: last.tv_to_target,
            final_kl_to_target: last.kl_to_target,
            max_weight_deviation,
            logz_values: last.logz_values.clone(),
        }
    }
}

pub fn train_summary_csv(rows: &[RunSummary]) -> String {
    let mut s = String::from(
        "loss,steps,final_mean_loss,final_mean_sampled_length,final_tv_to_target,\
         final_kl_to_target,max_weight_deviation,logz_values\n",
    );
    for r in rows {
        let logz: Vec<String> = r.logz_values.iter().map(|&z| fmt_f64(z)).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.loss,
            r.steps,
            fmt_f64(r.final_mean_loss),
            fmt_f64(r.final_mean_sampled_length),
            fmt_f64(r.final_tv_to_target),
            fmt_f64(r.final_kl_to_target),
            fmt_f64(r.max_weight_deviation),
            logz.join(" "),
        );
    }
    s
}

/// Per-iteration table of a voting run: the population, its expected reward,
/// and the log-ratio gaps, one row per recorded iteration.
pub fn mvsim_csv(run: &DynamicsRun) -> String {
    let m = run.steps.first().map_or(0, |s| s.population.len());
    let mut s = String::from("iteration");
    for i in 0..m {
        let _ = write!(s, ",pi_{i}");
    }
    for i in 0..m {
        let _ = write!(s, ",rbar_{i}");
    }
    for i in 0..m {
        let _ = write!(s, ",lambda_{i}");
    }
    s.push('\n');
    for step in &run.steps {
        let _ = write!(s, "{}", step.iteration);
        for &p in step.population.probs() {
            let _ = write!(s, ",{}", fmt_f64(p));
        }
        for &r in &step.rbar {
            let _ = write!(s, ",{}", fmt_f64(r));
        }
        for &l in &step.lambda {
            let _ = write!(s, ",{}", fmt_f64(l));
        }
        s.push('\n');
    }
    s
}

/// Plain `quantity,value` rows for run-level scalar summaries.
pub fn kv_summary_csv(rows: &[(&str, String)]) -> String {
    let mut s = String::from("quantity,value\n");
    for (quantity, value) in rows {
        let _ = writeln!(s, "{quantity},{value}");
    }
    s
}

/// `quantity,value` rows (plus a query column) for scalar summaries.
pub fn scalar_summary_csv(rows: &[(usize, &str, String)]) -> String {
    let mut s = String::from("query,quantity,value\n");
    for (query, quantity, value) in rows {
        let _ = writeln!(s, "{query},{quantity},{value}");
    }
    s
}

fn termination_str(t: Termination) -> &'static str {
    match t {
        Termination::Eos => "eos",
        Termination::MaxLen => "max_len",
    }
}

/// Per-trajectory table: the base distribution next to both exact targets,
/// aligned on the enumeration order.
pub fn oracle_csv(
    rows: &[(usize, &UniverseDist, &UniverseDist, &UniverseDist)],
) -> String {
    let mut s = String::from(
        "query,index,tokens,termination,length,p_base,p_power,p_length_aware\n",
    );
    for &(query, base, power, la) in rows {
        for (i, y) in base.trajectories.iter().enumerate() {
            let tokens: Vec<String> = y.tokens.iter().map(|t| t.to_string()).collect();
            let _ = writeln!(
                s,
                "{query},{i},{},{},{},{},{},{}",
                tokens.join(" "),
                termination_str(y.terminated_by),
                y.len(),
                fmt_f64(base.probs[i]),
                fmt_f64(power.probs[i]),
                fmt_f64(la.probs[i]),
            );
        }
    }
    s
}

pub fn gradcheck_csv(rows: &[(String, usize, f64)]) -> String {
    let mut s = String::from("loss,instances,max_rel_err\n");
    for (kind, instances, err) in rows {
        let _ = writeln!(s, "{kind},{instances},{}", fmt_f64(*err));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_round_trips() {
        for x in [1.5, 0.25, 1e-5, 2.0, -0.648, 0.1 + 0.2, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(2.0), "2");
        assert_eq!(fmt_f64(0.648), "0.648");
        assert_eq!(json_num(f64::INFINITY), "null");
    }

    #[test]
    fn metrics_lines_are_json_objects_in_field_order() {
        let m = StepMetrics {
            step: 3,
            mean_loss: 0.5,
            mean_sampled_length: 2.25,
            tv_to_target: 0.125,
            kl_to_target: 0.0625,
            logz_values: vec![-1.5, 0.5],
            mean_token_logprob_base: -1.0,
        };
        let line = metrics_jsonl(&[m]);
        assert_eq!(
            line,
            "{\"step\":3,\"mean_loss\":0.5,\"mean_sampled_length\":2.25,\
             \"tv_to_target\":0.125,\"kl_to_target\":0.0625,\"logz_values\":[-1.5,0.5],\
             \"mean_token_logprob_base\":-1}\n"
        );
    }

    #[test]
    fn mvsim_table_reports_the_first_reward_row() {
        use powerflow_core::mvsim::{run_dynamics, VoteConfig, VotePopulation};
        let pop = VotePopulation::new(vec![0.6, 0.4]).unwrap();
        let run = run_dynamics(&pop, &VoteConfig::exact(3, 1.0)).unwrap();
        let csv = mvsim_csv(&run);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "iteration,pi_0,pi_1,rbar_0,rbar_1,lambda_0,lambda_1");
        let first = lines.next().unwrap();
        assert!(first.starts_with("0,0.6,0.4,"), "{first}");
        let cols: Vec<f64> =
            first.split(',').map(|c| c.parse().unwrap()).collect();
        assert!((cols[3] - 0.648).abs() < 1e-12);
        assert!((cols[4] - 0.352).abs() < 1e-12);
        assert_eq!(cols[5], 0.0);
    }
}
