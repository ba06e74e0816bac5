//! Power-sharpened target densities over trajectory universes.
//!
//! The unnormalized target is `ptilde(y) = p_base(y)^alpha * penalty(y)`:
//! raising a distribution to a power `alpha` and renormalizing sharpens it
//! (alpha > 1) or flattens it (alpha < 1) while preserving ranks. The optional
//! format penalty docks trajectories whose final content token is not the
//! designated marker.

use alloc::vec::Vec;
use core::fmt;

// Unused whenever std is in the crate graph (its inherent f64 methods win);
// required for the pure no_std build.
#[allow(unused_imports)]
use num_traits::Float;

use crate::math::log_sum_exp;
use crate::policy::{AutoregressivePolicy, PolicyError, TabularPolicy};
use crate::seqspace::{QueryId, Trajectory, Vocab};

#[derive(Debug, Clone, PartialEq)]
pub enum TargetError {
    BadAlpha(f64),
    BadPsi(f64),
    /// Zero probabilities cannot be flattened: 0^alpha with alpha < 1 would
    /// have to receive infinite relative mass.
    ZeroEntryNeedsSharpening,
    NegativeEntry(f64),
    NotADistribution { sum: f64 },
    EmptyVector,
    /// The target demands a marker check but the vocabulary defines no marker.
    MarkerUnconfigured,
    Policy(PolicyError),
}

impl fmt::Display for TargetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetError::BadAlpha(a) => write!(f, "alpha must be positive and finite, got {a}"),
            TargetError::BadPsi(p) => write!(f, "psi_value must be finite and <= 0, got {p}"),
            TargetError::ZeroEntryNeedsSharpening => {
                write!(f, "zero probability entries are only admissible with alpha >= 1")
            }
            TargetError::NegativeEntry(v) => write!(f, "probability entries must be >= 0, got {v}"),
            TargetError::NotADistribution { sum } => {
                write!(f, "probability vector sums to {sum}, not 1")
            }
            TargetError::EmptyVector => write!(f, "probability vector is empty"),
            TargetError::MarkerUnconfigured => {
                write!(f, "marker_required is set but the vocabulary has no marker_id")
            }
            TargetError::Policy(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for TargetError {}

impl From<PolicyError> for TargetError {
    fn from(e: PolicyError) -> Self {
        TargetError::Policy(e)
    }
}

/// How the format penalty enters the trajectory-level log-density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PsiMode {
    /// Penalty is a per-token energy: contributes `alpha * |y| * psi`.
    #[default]
    PerToken,
    /// Penalty is a flat trajectory-level energy: contributes `psi` once,
    /// unscaled by alpha or length.
    Flat,
}

/// Full specification of a sharpened target distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetSpec {
    /// Sharpening exponent; > 1 sharpens, < 1 flattens, 1 is the base itself.
    pub alpha: f64,
    /// Penalty value applied when the marker check fails; must be <= 0.
    pub psi_value: f64,
    /// Whether trajectories must end their content with the marker token.
    pub marker_required: bool,
    /// Whether downstream consumers should match the length-normalized target
    /// (the fixed point of per-token residual balancing) rather than the
    /// trajectory-level power target.
    pub length_aware: bool,
    pub psi_mode: PsiMode,
}

impl TargetSpec {
    /// Plain trajectory-level power target with default penalty settings.
    pub fn power(alpha: f64) -> Self {
        TargetSpec {
            alpha,
            psi_value: -0.5,
            marker_required: false,
            length_aware: false,
            psi_mode: PsiMode::PerToken,
        }
    }

    /// Same defaults, flagged for length-aware matching.
    pub fn length_aware(alpha: f64) -> Self {
        TargetSpec { length_aware: true, ..TargetSpec::power(alpha) }
    }

    pub fn validate(&self) -> Result<(), TargetError> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(TargetError::BadAlpha(self.alpha));
        }
        if !(self.psi_value <= 0.0) || !self.psi_value.is_finite() {
            return Err(TargetError::BadPsi(self.psi_value));
        }
        Ok(())
    }
}

/// Per-token penalty value for one trajectory: 0 when no marker is required
/// or the final content token is the marker, `psi_value` otherwise (including
/// trajectories with no content tokens at all).
pub fn format_penalty(y: &Trajectory, vocab: &Vocab, spec: &TargetSpec) -> Result<f64, TargetError> {
    spec.validate()?;
    if !spec.marker_required {
        return Ok(0.0);
    }
    let marker = vocab.marker_id.ok_or(TargetError::MarkerUnconfigured)?;
    match y.final_content_token(vocab) {
        Some(t) if t == marker => Ok(0.0),
        _ => Ok(spec.psi_value),
    }
}

/// Unnormalized target log-density of one trajectory under `spec`:
/// `alpha * log p_base(y)` plus the penalty contribution per [`PsiMode`].
pub fn log_density_unnorm<P: AutoregressivePolicy>(
    base: &P,
    query: QueryId,
    y: &Trajectory,
    spec: &TargetSpec,
) -> Result<f64, TargetError> {
    spec.validate()?;
    let lp = base.log_prob(query, y)?;
    let psi = format_penalty(y, &base.vocab(), spec)?;
    let penalty_term = match spec.psi_mode {
        PsiMode::PerToken => spec.alpha * y.len() as f64 * psi,
        PsiMode::Flat => psi,
    };
    Ok(spec.alpha * lp + penalty_term)
}

/// Normalized power of a finite probability vector: `p_i^alpha / sum p_j^alpha`,
/// computed in the log domain so saturated inputs cannot overflow.
pub fn alpha_power(probs: &[f64], alpha: f64) -> Result<Vec<f64>, TargetError> {
    if probs.is_empty() {
        return Err(TargetError::EmptyVector);
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(TargetError::BadAlpha(alpha));
    }
    let mut sum = 0.0;
    for &p in probs {
        if p < 0.0 || !p.is_finite() {
            return Err(TargetError::NegativeEntry(p));
        }
        if p == 0.0 && alpha < 1.0 {
            return Err(TargetError::ZeroEntryNeedsSharpening);
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(TargetError::NotADistribution { sum });
    }
    let logs: Vec<f64> = probs
        .iter()
        .map(|&p| if p == 0.0 { f64::NEG_INFINITY } else { alpha * p.ln() })
        .collect();
    let lse = log_sum_exp(&logs);
    Ok(logs.iter().map(|&l| (l - lse).exp()).collect())
}

/// The per-step tempering baseline: every logit vector scaled by `alpha`,
/// equivalent to sampling each conditional at temperature `1/alpha`. This is
/// NOT the trajectory-level power target in general; see
/// [`crate::bases::tempering_gap_base`] for the canonical counterexample.
pub fn temperature_scaled_policy(base: &TabularPolicy, alpha: f64) -> Result<TabularPolicy, TargetError> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(TargetError::BadAlpha(alpha));
    }
    let mut scaled = base.trainable_clone();
    scaled.scale_logits(alpha)?;
    Ok(scaled.clone_frozen())
}
