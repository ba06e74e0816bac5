//! Exact majority-vote dynamics on a finite answer set: expected plurality
//! reward with uniform tie-breaking, the exponentiated population update, and
//! the log-ratio drift that certifies convergence to a point mass at the
//! initial mode.

use alloc::vec::Vec;
use core::fmt;

// Unused whenever std is in the crate graph (its inherent f64 methods win);
// required for the pure no_std build.
#[allow(unused_imports)]
use num_traits::Float;

use crate::math::{derive_stream, unit_f64};

const TAG_MC_VOTE: u64 = 0x6d63_7674;

/// Exact mode enumerates every vote composition; its cost is
/// C(N + m - 1, m - 1), capped here.
const COMPOSITION_CAP: u128 = 1_000_000;
/// Exact mode keeps the answer set small enough for the cap to be meaningful.
const MAX_EXACT_ANSWERS: usize = 6;
/// A population counts as converged once the mode holds this much mass.
pub const CONVERGENCE_MASS: f64 = 1.0 - 1e-9;
/// Default iteration budget for convergence runs.
pub const DEFAULT_ITERATION_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub enum MvError {
    EmptyPopulation,
    NegativeEntry,
    NotASimplex { sum: f64 },
    /// Exact enumeration supports at most six answers.
    TooManyAnswers { count: usize },
    CompositionCapExceeded { count: u128 },
    BadVotes,
    BadBeta,
    BadIterations,
    BadSamples,
    ShapeMismatch { left: usize, right: usize },
    NonUniqueMode,
}

impl fmt::Display for MvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MvError::EmptyPopulation => write!(f, "population must be nonempty"),
            MvError::NegativeEntry => write!(f, "population entries must be nonnegative"),
            MvError::NotASimplex { sum } => {
                write!(f, "population must sum to 1 (got {sum})")
            }
            MvError::TooManyAnswers { count } => {
                write!(f, "exact mode supports at most {MAX_EXACT_ANSWERS} answers (got {count})")
            }
            MvError::CompositionCapExceeded { count } => {
                write!(f, "exact enumeration needs {count} compositions (cap {COMPOSITION_CAP})")
            }
            MvError::BadVotes => write!(f, "vote count must be an integer >= 2"),
            MvError::BadBeta => write!(f, "beta must be positive and finite"),
            MvError::BadIterations => write!(f, "iteration budget must be >= 1"),
            MvError::BadSamples => write!(f, "sample count must be >= 1"),
            MvError::ShapeMismatch { left, right } => {
                write!(f, "vector lengths differ: {left} vs {right}")
            }
            MvError::NonUniqueMode => write!(f, "population must have a unique maximum entry"),
        }
    }
}

impl core::error::Error for MvError {}

/// A probability vector over the finite answer set.
#[derive(Debug, Clone, PartialEq)]
pub struct VotePopulation {
    probs: Vec<f64>,
}

impl VotePopulation {
    pub fn new(probs: Vec<f64>) -> Result<Self, MvError> {
        if probs.is_empty() {
            return Err(MvError::EmptyPopulation);
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(MvError::NegativeEntry);
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(MvError::NotASimplex { sum });
        }
        Ok(VotePopulation { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the strictly unique maximum entry.
    pub fn mode_index(&self) -> Result<usize, MvError> {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        let ties = self.probs.iter().filter(|&&p| p == self.probs[best]).count();
        if ties != 1 {
            return Err(MvError::NonUniqueMode);
        }
        Ok(best)
    }
}

/// How a vote batch converts into per-answer reward. `SelectedWinner` pays
/// each tied maximizer 1/|tie set| (the reward is the probability of being
/// the answer actually chosen after the uniform tie-break), so rewards sum
/// to 1. `Membership` pays every tied maximizer in full — the reward is the
/// probability of belonging to the mode set, which can sum above 1. The
/// selected-winner rule is the default; membership exists for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RewardRule {
    #[default]
    SelectedWinner,
    Membership,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VoteMode {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoteConfig {
    pub n_votes: usize,
    pub beta: f64,
    pub iterations: usize,
    pub mode: VoteMode,
    pub reward_rule: RewardRule,
}

impl VoteConfig {
    pub fn exact(n_votes: usize, beta: f64) -> Self {
        VoteConfig {
            n_votes,
            beta,
            iterations: DEFAULT_ITERATION_CAP,
            mode: VoteMode::Exact,
            reward_rule: RewardRule::SelectedWinner,
        }
    }

    fn validate(&self) -> Result<(), MvError> {
        if self.n_votes < 2 {
            return Err(MvError::BadVotes);
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(MvError::BadBeta);
        }
        if self.iterations == 0 {
            return Err(MvError::BadIterations);
        }
        if let VoteMode::MonteCarlo { samples, .. } = self.mode {
            if samples == 0 {
                return Err(MvError::BadSamples);
            }
        }
        Ok(())
    }
}

/// C(n + m - 1, m - 1): the number of vote-count compositions to enumerate.
fn composition_count(n_votes: usize, answers: usize) -> u128 {
    let mut c: u128 = 1;
    for k in 1..answers as u128 {
        c = c * (n_votes as u128 + k) / k;
        if c > COMPOSITION_CAP * 1024 {
            return c;
        }
    }
    c
}

fn log_factorial_table(n: usize) -> Vec<f64> {
    let mut table = Vec::with_capacity(n + 1);
    table.push(0.0);
    let mut acc = 0.0;
    for k in 1..=n {
        acc += (k as f64).ln();
        table.push(acc);
    }
    table
}

/// Credit one batch outcome: weight `w` spread over the argmax set of
/// `counts` per the reward rule.
fn credit_outcome(counts: &[usize], w: f64, rule: RewardRule, out: &mut [f64]) {
    let max = *counts.iter().max().expect("nonempty counts");
    let ties = counts.iter().filter(|&&c| c == max).count();
    let share = match rule {
        RewardRule::SelectedWinner => w / ties as f64,
        RewardRule::Membership => w,
    };
    for (r, &c) in out.iter_mut().zip(counts) {
        if c == max {
            *r += share;
        }
    }
}

fn exact_reward(probs: &[f64], config: &VoteConfig) -> Result<Vec<f64>, MvError> {
    let m = probs.len();
    if m > MAX_EXACT_ANSWERS {
        return Err(MvError::TooManyAnswers { count: m });
    }
    let count = composition_count(config.n_votes, m);
    if count > COMPOSITION_CAP {
        return Err(MvError::CompositionCapExceeded { count });
    }
    let lfact = log_factorial_table(config.n_votes);
    let log_probs: Vec<f64> = probs.iter().map(|&p| p.ln()).collect();
    let mut reward = alloc::vec![0.0; m];
    let mut counts = alloc::vec![0usize; m];

    // Lexicographic recursion over compositions of n_votes into m parts.
    fn recurse(
        pos: usize,
        remaining: usize,
        counts: &mut [usize],
        probs: &[f64],
        log_probs: &[f64],
        lfact: &[f64],
        n: usize,
        rule: RewardRule,
        reward: &mut [f64],
    ) {
        if pos + 1 == counts.len() {
            counts[pos] = remaining;
            let mut log_w = lfact[n];
            let mut possible = true;
            for (i, &c) in counts.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                if probs[i] == 0.0 {
                    possible = false;
                    break;
                }
                log_w += c as f64 * log_probs[i] - lfact[c];
            }
            if possible {
                credit_outcome(counts, log_w.exp(), rule, reward);
            }
            return;
        }
        for c in 0..=remaining {
            counts[pos] = c;
            recurse(pos + 1, remaining - c, counts, probs, log_probs, lfact, n, rule, reward);
        }
        counts[pos] = 0;
    }

    recurse(
        0,
        config.n_votes,
        &mut counts,
        probs,
        &log_probs,
        &lfact,
        config.n_votes,
        config.reward_rule,
        &mut reward,
    );
    Ok(reward)
}

fn monte_carlo_reward(
    probs: &[f64],
    config: &VoteConfig,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>, MvError> {
    let m = probs.len();
    let mut rng = derive_stream(seed, &[TAG_MC_VOTE]);
    let mut reward = alloc::vec![0.0; m];
    let mut counts = alloc::vec![0usize; m];
    let w = 1.0 / samples as f64;
    for _ in 0..samples {
        counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..config.n_votes {
            let u = unit_f64(&mut rng);
            let mut acc = 0.0;
            let mut chosen = m - 1;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            counts[chosen] += 1;
        }
        // Fractional tie credit estimates the same expectation as a random
        // tie-break, with strictly less variance.
        credit_outcome(&counts, w, config.reward_rule, &mut reward);
    }
    Ok(reward)
}

/// Expected per-answer reward of one N-vote plurality round: the probability
/// that each answer wins (after the uniform tie-break) under iid votes from
/// `pi`. Sums to 1 exactly (up to rounding) under the selected-winner rule.
pub fn expected_majority_reward(
    pi: &VotePopulation,
    config: &VoteConfig,
) -> Result<Vec<f64>, MvError> {
    config.validate()?;
    match config.mode {
        VoteMode::Exact => exact_reward(pi.probs(), config),
        VoteMode::MonteCarlo { samples, seed } => {
            monte_carlo_reward(pi.probs(), config, samples, seed)
        }
    }
}

/// One exponentiated-reward step: multiply by exp(rbar/beta) and renormalize
/// (computed max-shifted so tiny beta cannot overflow).
pub fn mv_update(
    pi: &VotePopulation,
    rbar: &[f64],
    beta: f64,
) -> Result<VotePopulation, MvError> {
    if rbar.len() != pi.len() {
        return Err(MvError::ShapeMismatch { left: pi.len(), right: rbar.len() });
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(MvError::BadBeta);
    }
    if rbar.iter().any(|r| !r.is_finite()) {
        return Err(MvError::NegativeEntry);
    }
    let shift = rbar.iter().fold(f64::NEG_INFINITY, |a, &r| a.max(r / beta));
    let weights: Vec<f64> = pi
        .probs()
        .iter()
        .zip(rbar)
        .map(|(&p, &r)| p * (r / beta - shift).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    let probs = weights.iter().map(|w| w / z).collect();
    VotePopulation::new(probs)
}

/// One recorded iterate: the population entering iteration `k`, the expected
/// reward it generates, and the log-ratio gap Λ_k(y') = log(π_k(y*)/π_k(y'))
/// for every answer (the mode's own entry is identically 0).
#[derive(Debug, Clone, PartialEq)]
pub struct VoteStep {
    pub iteration: usize,
    pub population: VotePopulation,
    pub rbar: Vec<f64>,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsRun {
    pub steps: Vec<VoteStep>,
    /// Index of the initial unique mode y*.
    pub mode: usize,
    /// Whether the mode mass crossed the convergence threshold within budget.
    pub converged: bool,
}

fn lambda_of(pi: &VotePopulation, mode: usize) -> Vec<f64> {
    let pm = pi.probs()[mode];
    pi.probs().iter().map(|&p| (pm / p).ln()).collect()
}

/// Iterate reward + update from `pi0` until the initial mode soaks up
/// 1 - 1e-9 of the mass or the iteration budget runs out. Each recorded step
/// holds the pre-update population, so the first row shows pi0 and its
/// reward; the converged population is recorded as the final row.
pub fn run_dynamics(pi0: &VotePopulation, config: &VoteConfig) -> Result<DynamicsRun, MvError> {
    config.validate()?;
    let mode = pi0.mode_index()?;
    let mut pi = pi0.clone();
    let mut steps = Vec::new();
    let mut converged = false;
    for k in 0..=config.iterations {
        let rbar = expected_majority_reward(&pi, config)?;
        steps.push(VoteStep {
            iteration: k,
            population: pi.clone(),
            rbar: rbar.clone(),
            lambda: lambda_of(&pi, mode),
        });
        if pi.probs()[mode] > CONVERGENCE_MASS {
            converged = true;
            break;
        }
        if k == config.iterations {
            break;
        }
        pi = mv_update(&pi, &rbar, config.beta)?;
    }
    Ok(DynamicsRun { steps, mode, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pop(probs: &[f64]) -> VotePopulation {
        VotePopulation::new(probs.to_vec()).unwrap()
    }

    #[test]
    fn population_validation() {
        assert!(matches!(VotePopulation::new(Vec::new()), Err(MvError::EmptyPopulation)));
        assert!(matches!(
            VotePopulation::new(alloc::vec![0.5, -0.1, 0.6]),
            Err(MvError::NegativeEntry)
        ));
        assert!(matches!(
            VotePopulation::new(alloc::vec![0.5, 0.6]),
            Err(MvError::NotASimplex { .. })
        ));
        assert_eq!(pop(&[0.6, 0.4]).mode_index().unwrap(), 0);
        assert!(matches!(pop(&[0.5, 0.5]).mode_index(), Err(MvError::NonUniqueMode)));
        assert!(matches!(
            pop(&[0.25, 0.25, 0.25, 0.25]).mode_index(),
            Err(MvError::NonUniqueMode)
        ));
    }

    #[test]
    fn symmetric_pair_splits_the_reward() {
        let config = VoteConfig::exact(2, 1.0);
        let r = expected_majority_reward(&pop(&[0.5, 0.5]), &config).unwrap();
        // (2,0) and (0,2) are decisive at 0.25 each; (1,1) splits its 0.5.
        assert!((r[0] - 0.5).abs() < 1e-15);
        assert!((r[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn three_vote_pair_matches_the_binomial_tally() {
        let config = VoteConfig::exact(3, 1.0);
        let r = expected_majority_reward(&pop(&[0.6, 0.4]), &config).unwrap();
        // Majority for answer 0 needs at least 2 of 3 votes.
        let expect = 0.6f64.powi(3) + 3.0 * 0.6 * 0.6 * 0.4;
        assert!((r[0] - expect).abs() < 1e-12, "r0 {} vs {expect}", r[0]);
        assert!((r[0] - 0.648).abs() < 1e-12);
        assert!((r[1] - 0.352).abs() < 1e-12);
    }

    #[test]
    fn rewards_sum_to_one_and_respect_the_ordering() {
        // Deterministic sweep over assorted populations and vote counts.
        let populations: [&[f64]; 5] = [
            &[0.6, 0.4],
            &[0.5, 0.3, 0.2],
            &[0.4, 0.3, 0.2, 0.1],
            &[0.35, 0.3, 0.2, 0.1, 0.05],
            &[0.9, 0.02, 0.02, 0.02, 0.02, 0.02],
        ];
        for probs in populations {
            for n in [2usize, 3, 5, 8] {
                let config = VoteConfig::exact(n, 1.0);
                let r = expected_majority_reward(&pop(probs), &config).unwrap();
                let sum: f64 = r.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "sum {sum} for n={n} probs {probs:?}");
                for i in 0..probs.len() {
                    for j in 0..probs.len() {
                        if probs[i] > probs[j] {
                            assert!(
                                r[i] > r[j],
                                "reward order violated at n={n}: {probs:?} -> {r:?}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn membership_rule_counts_every_tied_winner() {
        let mut config = VoteConfig::exact(2, 1.0);
        config.reward_rule = RewardRule::Membership;
        let r = expected_majority_reward(&pop(&[0.5, 0.5]), &config).unwrap();
        // The (1,1) outcome now pays both answers in full: 0.25 + 0.5 each.
        assert!((r[0] - 0.75).abs() < 1e-15);
        assert!((r[1] - 0.75).abs() < 1e-15);
        let sum: f64 = r.iter().sum();
        assert!(sum > 1.0);
    }

    #[test]
    fn zero_probability_answers_never_win() {
        let config = VoteConfig::exact(3, 1.0);
        let r = expected_majority_reward(&pop(&[0.7, 0.3, 0.0]), &config).unwrap();
        assert_eq!(r[2], 0.0);
        let sum: f64 = r.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_guards_reject_oversized_problems() {
        let config = VoteConfig::exact(60, 1.0);
        let p = pop(&[0.3, 0.2, 0.2, 0.1, 0.1, 0.1]);
        assert!(matches!(
            expected_majority_reward(&p, &config),
            Err(MvError::CompositionCapExceeded { .. })
        ));
        let seven = VotePopulation::new(alloc::vec![
            0.2, 0.2, 0.2, 0.1, 0.1, 0.1, 0.1
        ])
        .unwrap();
        assert!(matches!(
            expected_majority_reward(&seven, &VoteConfig::exact(2, 1.0)),
            Err(MvError::TooManyAnswers { .. })
        ));
        assert!(matches!(
            expected_majority_reward(&p, &VoteConfig::exact(1, 1.0)),
            Err(MvError::BadVotes)
        ));
    }

    #[test]
    fn update_matches_the_hand_computed_step() {
        let r = alloc::vec![0.648, 0.352];
        let next = mv_update(&pop(&[0.6, 0.4]), &r, 1.0).unwrap();
        let z = 0.6 * 0.648f64.exp() + 0.4 * 0.352f64.exp();
        let expect0 = 0.6 * 0.648f64.exp() / z;
        assert!((next.probs()[0] - expect0).abs() < 1e-12);
        assert!((next.probs()[0] - 0.6685).abs() < 5e-4);
        assert!((next.probs()[1] - 0.3315).abs() < 5e-4);
    }

    #[test]
    fn constant_reward_leaves_the_population_fixed() {
        let pi = pop(&[0.3, 0.45, 0.25]);
        let next = mv_update(&pi, &[0.7, 0.7, 0.7], 2.0).unwrap();
        for (a, b) in next.probs().iter().zip(pi.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_beta_freezes_the_population() {
        let pi = pop(&[0.6, 0.4]);
        let next = mv_update(&pi, &[0.648, 0.352], 1e9).unwrap();
        for (a, b) in next.probs().iter().zip(pi.probs()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn tiny_beta_does_not_overflow() {
        let pi = pop(&[0.6, 0.4]);
        let next = mv_update(&pi, &[0.648, 0.352], 1e-9).unwrap();
        assert!(next.probs()[0] > 1.0 - 1e-12);
    }

    #[test]
    fn update_rejects_shape_and_beta_errors() {
        let pi = pop(&[0.6, 0.4]);
        assert!(matches!(
            mv_update(&pi, &[0.5], 1.0),
            Err(MvError::ShapeMismatch { .. })
        ));
        assert!(matches!(mv_update(&pi, &[0.5, 0.5], 0.0), Err(MvError::BadBeta)));
    }

    #[test]
    fn two_answer_dynamics_concentrate_within_sixty_rounds() {
        let config = VoteConfig::exact(3, 1.0);
        let run = run_dynamics(&pop(&[0.6, 0.4]), &config).unwrap();
        assert_eq!(run.mode, 0);
        assert!(run.converged);
        assert!(run.steps.len() <= 61, "took {} rounds", run.steps.len());
        let first = &run.steps[0];
        assert_eq!(first.iteration, 0);
        assert!((first.population.probs()[0] - 0.6).abs() < 1e-15);
        assert!((first.rbar[0] - 0.648).abs() < 1e-12);
        // Mode mass strictly increases and lambda never decreases.
        for w in run.steps.windows(2) {
            assert!(w[1].population.probs()[0] > w[0].population.probs()[0]);
            assert!(w[1].lambda[1] >= w[0].lambda[1]);
        }
        let last = run.steps.last().unwrap();
        assert!(last.population.probs()[0] > CONVERGENCE_MASS);
    }

    #[test]
    fn four_answer_dynamics_keep_every_gap_monotone() {
        let config = VoteConfig::exact(5, 1.0);
        let run = run_dynamics(&pop(&[0.4, 0.3, 0.2, 0.1]), &config).unwrap();
        assert!(run.converged);
        for w in run.steps.windows(2) {
            for y in 0..4 {
                assert!(
                    w[1].lambda[y] >= w[0].lambda[y],
                    "lambda dropped for answer {y} at iteration {}",
                    w[1].iteration
                );
            }
        }
        assert!(run.steps.last().unwrap().population.probs()[0] > 0.999);
        // The mode's own gap stays identically zero.
        for s in &run.steps {
            assert_eq!(s.lambda[0], 0.0);
        }
    }

    #[test]
    fn lambda_obeys_the_reward_gap_recurrence() {
        let config = VoteConfig::exact(3, 0.7);
        let run = run_dynamics(&pop(&[0.5, 0.3, 0.2]), &config).unwrap();
        for w in run.steps.windows(2) {
            for y in 0..3 {
                let predicted =
                    w[0].lambda[y] + (w[0].rbar[run.mode] - w[0].rbar[y]) / config.beta;
                assert!(
                    (w[1].lambda[y] - predicted).abs() < 1e-9,
                    "recurrence broken at iteration {}",
                    w[1].iteration
                );
            }
        }
    }

    #[test]
    fn near_dirac_population_stays_concentrated() {
        let config = VoteConfig::exact(3, 1.0);
        let run = run_dynamics(&pop(&[0.999, 0.001]), &config).unwrap();
        assert!(run.converged);
        for s in &run.steps {
            assert!(s.population.probs()[0] >= 0.999);
        }
        for w in run.steps.windows(2) {
            assert!(w[1].lambda[1] > w[0].lambda[1]);
        }
    }

    #[test]
    fn dynamics_reject_tied_modes_and_exhaust_budgets() {
        let config = VoteConfig::exact(2, 1.0);
        assert!(matches!(
            run_dynamics(&pop(&[0.5, 0.5]), &config),
            Err(MvError::NonUniqueMode)
        ));
        // A huge beta freezes the dynamics, so the budget runs out.
        let mut frozen = VoteConfig::exact(3, 1e12);
        frozen.iterations = 5;
        let run = run_dynamics(&pop(&[0.6, 0.4]), &frozen).unwrap();
        assert!(!run.converged);
        assert_eq!(run.steps.len(), 6);
    }

    #[test]
    fn monte_carlo_tracks_the_exact_reward() {
        let pi = pop(&[0.4, 0.3, 0.2, 0.1]);
        let exact = expected_majority_reward(&pi, &VoteConfig::exact(5, 1.0)).unwrap();
        let mut mc_config = VoteConfig::exact(5, 1.0);
        mc_config.mode = VoteMode::MonteCarlo { samples: 200_000, seed: 7 };
        let mc = expected_majority_reward(&pi, &mc_config).unwrap();
        for (a, b) in mc.iter().zip(&exact) {
            assert!((a - b).abs() < 0.01, "mc {a} vs exact {b}");
        }
        // Deterministic given the seed.
        let again = expected_majority_reward(&pi, &mc_config).unwrap();
        assert_eq!(mc, again);
    }
}
