//! Strategy models for simulated participants: how they value proposed
//! models, how they turn values into claims, and how baseline (non-auction)
//! strategies pick a training target.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::money::{Money, ZERO};
use crate::types::{ModelId, ModelProposal, ParticipantId, Role};

/// Station costs scale linearly with a proposal's training rounds relative
/// to this reference.
pub const REFERENCE_ROUNDS: u32 = 50;

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub enum Strategy {
    /// Claims exactly the true magnitude.
    Truthful,
    /// With probability `prob`, claims the true magnitude perturbed by a
    /// multiplicative uniform noise of the given half-width (clamped at
    /// zero); otherwise claims the truth.
    Dishonest { prob: f64, noise_halfwidth: f64 },
    /// Baseline target rule: train the intersection of all owners' interest
    /// sets.
    SelfishIntersection,
    /// Baseline target rule: train a uniformly random nonempty label subset.
    RandomTarget,
}

impl Strategy {
    pub fn validate(&self) -> Result<(), AgentError> {
        if let Strategy::Dishonest {
            prob,
            noise_halfwidth,
        } = self
        {
            if !(0.0..=1.0).contains(prob) {
                return Err(AgentError::InvalidStrategy(format!(
                    "dishonesty probability {prob} outside [0, 1]"
                )));
            }
            if !noise_halfwidth.is_finite() || *noise_halfwidth < 0.0 {
                return Err(AgentError::InvalidStrategy(format!(
                    "noise half-width {noise_halfwidth} must be nonnegative"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Error, Debug, PartialEq)]
pub enum AgentError {
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("empty interest intersection: the selfish baseline is undefined")]
    EmptyIntersection,
    #[error("agent config for {participant} missing a mean for label {label}")]
    MissingLabelMean {
        participant: ParticipantId,
        label: u32,
    },
}

/// Per-agent configuration: identity, bidding strategy, and the mean of its
/// per-label value (owners) or cost (stations) draws.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct AgentConfig {
    pub id: ParticipantId,
    pub strategy: Strategy,
    /// Fallback mean for labels absent from `label_means`.
    pub mean_value: Money,
    pub label_means: BTreeMap<u32, Money>,
}

impl AgentConfig {
    pub fn new(id: ParticipantId, strategy: Strategy, mean_value: Money) -> Self {
        AgentConfig {
            id,
            strategy,
            mean_value,
            label_means: BTreeMap::new(),
        }
    }

    fn label_mean(&self, label: u32) -> Money {
        self.label_means
            .get(&label)
            .copied()
            .unwrap_or(self.mean_value)
    }
}

/// Uniform integer draw on [mean/2, 3*mean/2]; a zero mean always draws zero.
fn draw_around_mean(mean: Money, rng: &mut ChaCha12Rng) -> Money {
    let m = mean.raw();
    if m <= 0 {
        return ZERO;
    }
    let lo = m / 2;
    let hi = m + m / 2;
    Money::gwei(rng.gen_range(lo..=hi))
}

/// One round's per-label draws for an agent, in ascending label order.
pub fn draw_label_values(
    config: &AgentConfig,
    labels: impl IntoIterator<Item = u32>,
    rng: &mut ChaCha12Rng,
) -> BTreeMap<u32, Money> {
    labels
        .into_iter()
        .map(|l| (l, draw_around_mean(config.label_mean(l), rng)))
        .collect()
}

/// Magnitude an agent attaches to a target set given its per-label draws:
/// additive over the covered labels, with station costs scaled linearly by
/// the training rounds relative to [`REFERENCE_ROUNDS`].
pub fn value_of_target(
    label_values: &BTreeMap<u32, Money>,
    target: &BTreeSet<u32>,
    role: Role,
    rounds: u32,
) -> Money {
    let base: Money = target
        .iter()
        .filter_map(|l| label_values.get(l))
        .copied()
        .sum();
    match role {
        Role::ModelOwner => base,
        Role::BaseStation => {
            Money::gwei(base.raw() * i64::from(rounds) / i64::from(REFERENCE_ROUNDS))
        }
    }
}

/// Draws one round's true magnitudes for an agent, additive over the labels
/// each proposal targets. A per-label draw is made once and reused across
/// proposals so the agent values overlapping targets consistently. Station
/// costs additionally scale with the proposal's training rounds.
pub fn draw_valuations(
    config: &AgentConfig,
    proposals: &[ModelProposal],
    rng: &mut ChaCha12Rng,
) -> BTreeMap<ModelId, Money> {
    let mut labels: BTreeSet<u32> = BTreeSet::new();
    for p in proposals {
        labels.extend(p.target_labels.iter().copied());
    }
    let per_label = draw_label_values(config, labels, rng);

    proposals
        .iter()
        .map(|p| {
            (
                p.model_id,
                value_of_target(&per_label, &p.target_labels, config.id.role, p.rounds),
            )
        })
        .collect()
}

/// Turns a true magnitude into a claim under the agent's strategy. Claims
/// are always nonnegative integers.
pub fn make_bid(strategy: &Strategy, truth: Money, rng: &mut ChaCha12Rng) -> Money {
    debug_assert!(!truth.is_negative());
    match strategy {
        Strategy::Dishonest {
            prob,
            noise_halfwidth,
        } if rng.gen_bool(*prob) => {
            let span = (truth.as_f64() * noise_halfwidth).floor() as i64;
            if span == 0 {
                return truth;
            }
            let offset = rng.gen_range(-span..=span);
            (truth + Money::gwei(offset)).max(ZERO)
        }
        _ => truth,
    }
}

/// Target set for the baseline strategies that bypass the auction.
pub fn select_baseline_target(
    strategy: &Strategy,
    owner_interests: &[BTreeSet<u32>],
    label_universe: &BTreeSet<u32>,
    rng: &mut ChaCha12Rng,
) -> Result<BTreeSet<u32>, AgentError> {
    match strategy {
        Strategy::SelfishIntersection => {
            let mut iter = owner_interests.iter();
            let mut intersection = iter.next().cloned().unwrap_or_default();
            for set in iter {
                intersection = intersection.intersection(set).copied().collect();
            }
            if intersection.is_empty() {
                return Err(AgentError::EmptyIntersection);
            }
            Ok(intersection)
        }
        Strategy::RandomTarget => loop {
            let subset: BTreeSet<u32> = label_universe
                .iter()
                .copied()
                .filter(|_| rng.gen_bool(0.5))
                .collect();
            if !subset.is_empty() {
                return Ok(subset);
            }
        },
        _ => Err(AgentError::InvalidStrategy(
            "only the selfish and random baselines select targets".into(),
        )),
    }
}
