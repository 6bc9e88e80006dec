//! Participants, model proposals, and the claimed/true magnitude profiles
//! shared by the auction, settlement, and ledger layers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::money::Money;

/// Market side of a participant. The side determines the sign convention:
/// an owner's claim is a value (utility inflow) and its payment an outflow;
/// a station's claim is a cost and its payment a reward inflow.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum Role {
    ModelOwner,
    BaseStation,
}

impl Role {
    pub fn opposite(self) -> Role {
        match self {
            Role::ModelOwner => Role::BaseStation,
            Role::BaseStation => Role::ModelOwner,
        }
    }
}

/// Stable identifier for a participant within a scenario. Ordering sorts
/// all owners before all stations, then by index; remainder apportionment
/// and tie-breaks rely on this order being total and stable.
///
/// Serializes as the compact form `"O3"` / `"S1"` so it can key JSON maps
/// in event payloads.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParticipantId {
    pub role: Role,
    pub index: u32,
}

impl ParticipantId {
    pub fn owner(index: u32) -> Self {
        ParticipantId {
            role: Role::ModelOwner,
            index,
        }
    }

    pub fn station(index: u32) -> Self {
        ParticipantId {
            role: Role::BaseStation,
            index,
        }
    }
}

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.role {
            Role::ModelOwner => write!(f, "O{}", self.index),
            Role::BaseStation => write!(f, "S{}", self.index),
        }
    }
}

impl fmt::Debug for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl std::str::FromStr for ParticipantId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (role, rest) = match s.split_at_checked(1) {
            Some(("O", rest)) => (Role::ModelOwner, rest),
            Some(("S", rest)) => (Role::BaseStation, rest),
            _ => return Err(format!("invalid participant id {s:?}")),
        };
        let index = rest
            .parse::<u32>()
            .map_err(|e| format!("invalid participant id {s:?}: {e}"))?;
        Ok(ParticipantId { role, index })
    }
}

impl Serialize for ParticipantId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParticipantId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Numeric model identifier, unique within a round. Tie-breaks in selection
/// always prefer the smallest id, so the ordering is load-bearing.
/// Serializes as `"m4"`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModelId(pub u32);

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

impl fmt::Debug for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl std::str::FromStr for ModelId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('m')
            .and_then(|rest| rest.parse::<u32>().ok())
            .map(ModelId)
            .ok_or_else(|| format!("invalid model id {s:?}"))
    }
}

impl Serialize for ModelId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A model put up for crowdfunding: trainable parameter count, a scalar
/// compute-cost characteristic, the accuracy the proposer promises, the
/// number of training rounds, and the set of target labels.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ModelProposal {
    pub model_id: ModelId,
    pub owner: ParticipantId,
    pub param_size: u64,
    pub characteristics: u64,
    pub expected_accuracy: f64,
    pub rounds: u32,
    pub target_labels: BTreeSet<u32>,
}

impl ModelProposal {
    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.owner.role != Role::ModelOwner {
            return Err(ProfileError::InvalidProposal(format!(
                "proposal {} owned by non-owner {}",
                self.model_id, self.owner
            )));
        }
        if self.target_labels.is_empty() {
            return Err(ProfileError::InvalidProposal(format!(
                "proposal {} has no target labels",
                self.model_id
            )));
        }
        if !(self.expected_accuracy > 0.0 && self.expected_accuracy <= 1.0) {
            return Err(ProfileError::InvalidProposal(format!(
                "proposal {} expected accuracy {} outside (0, 1]",
                self.model_id, self.expected_accuracy
            )));
        }
        if self.rounds == 0 {
            return Err(ProfileError::InvalidProposal(format!(
                "proposal {} has zero training rounds",
                self.model_id
            )));
        }
        Ok(())
    }
}

#[derive(Error, Debug, PartialEq, Eq)]
pub enum ProfileError {
    #[error("negative magnitude {amount} for {participant} on {model}")]
    NegativeAmount {
        participant: ParticipantId,
        model: ModelId,
        amount: Money,
    },
    #[error("missing entry for {participant} on {model}")]
    MissingEntry {
        participant: ParticipantId,
        model: ModelId,
    },
    #[error("unknown participant {0}")]
    UnknownParticipant(ParticipantId),
    #[error("invalid proposal: {0}")]
    InvalidProposal(String),
}

/// Per-participant, per-model magnitudes. Both claimed bids and true
/// valuations share this shape; all stored amounts are nonnegative and the
/// role-derived sign convention is applied inside the mechanism formulas.
#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct Profile {
    rows: BTreeMap<ParticipantId, BTreeMap<ModelId, Money>>,
}

/// Claimed magnitudes (b).
pub type BidProfile = Profile;
/// True magnitudes (v).
pub type ValuationProfile = Profile;

impl Profile {
    pub fn new() -> Self {
        Profile::default()
    }

    /// Registers a participant with no entries yet. Membership matters even
    /// at zero bids: selection requires both sides to be populated.
    pub fn add_participant(&mut self, participant: ParticipantId) {
        self.rows.entry(participant).or_default();
    }

    pub fn set(
        &mut self,
        participant: ParticipantId,
        model: ModelId,
        amount: Money,
    ) -> Result<(), ProfileError> {
        if amount.is_negative() {
            return Err(ProfileError::NegativeAmount {
                participant,
                model,
                amount,
            });
        }
        self.rows
            .entry(participant)
            .or_default()
            .insert(model, amount);
        Ok(())
    }

    pub fn participants(&self) -> impl Iterator<Item = ParticipantId> + '_ {
        self.rows.keys().copied()
    }

    pub fn side(&self, role: Role) -> impl Iterator<Item = ParticipantId> + '_ {
        self.rows.keys().copied().filter(move |p| p.role == role)
    }

    pub fn contains(&self, participant: ParticipantId) -> bool {
        self.rows.contains_key(&participant)
    }

    pub fn side_is_empty(&self, role: Role) -> bool {
        self.side(role).next().is_none()
    }

    pub fn amount(
        &self,
        participant: ParticipantId,
        model: ModelId,
    ) -> Result<Money, ProfileError> {
        self.rows
            .get(&participant)
            .and_then(|r| r.get(&model))
            .copied()
            .ok_or(ProfileError::MissingEntry { participant, model })
    }

    pub fn row(&self, participant: ParticipantId) -> Option<&BTreeMap<ModelId, Money>> {
        self.rows.get(&participant)
    }

    /// Sum of one side's claimed magnitudes for a model.
    pub fn side_sum(&self, role: Role, model: ModelId) -> Result<Money, ProfileError> {
        self.side(role)
            .map(|p| self.amount(p, model))
            .sum::<Result<Money, _>>()
    }

    /// The same market with one participant's entries removed entirely, so
    /// its claims contribute nothing to any welfare sum.
    pub fn without(&self, excluded: ParticipantId) -> Result<Profile, ProfileError> {
        if !self.rows.contains_key(&excluded) {
            return Err(ProfileError::UnknownParticipant(excluded));
        }
        let mut rows = self.rows.clone();
        rows.remove(&excluded);
        Ok(Profile { rows })
    }

    pub fn ensure_complete(&self, models: &[ModelProposal]) -> Result<(), ProfileError> {
        for participant in self.participants() {
            for proposal in models {
                self.amount(participant, proposal.model_id)?;
            }
        }
        Ok(())
    }

    pub fn max_magnitude(&self, participant: ParticipantId) -> Money {
        self.rows
            .get(&participant)
            .map(|r| r.values().copied().fold(Money::gwei(0), Money::max))
            .unwrap_or(Money::gwei(0))
    }

    /// Every magnitude multiplied by a positive integer. Used by the scale
    /// covariance checks.
    pub fn scaled(&self, factor: i64) -> Profile {
        assert!(factor > 0);
        let rows = self
            .rows
            .iter()
            .map(|(p, r)| (*p, r.iter().map(|(m, a)| (*m, *a * factor)).collect()))
            .collect();
        Profile { rows }
    }
}
