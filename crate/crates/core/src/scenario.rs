//! Scenario definitions and the per-round market generator: who the
//! participants are, how interest sets and proposals are drawn, and what
//! every agent's true label values look like. All draws are keyed streams,
//! so any round of any scenario can be regenerated independently.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::agents::{self, AgentConfig, Strategy};
use crate::flsim::AccuracyModel;
use crate::ledger::LedgerParams;
use crate::money::{Money, ZERO};
use crate::rng;
use crate::settlement::PaymentPolicy;
use crate::types::{ModelId, ModelProposal, ParticipantId, Profile, Role};

#[derive(Error, Debug, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// A complete experiment definition. Two generation modes share the struct:
/// with `core_size == 0` every owner values every label and proposals target
/// random label sets; with `core_size > 0` owners get interest sets built
/// around a guaranteed common core and propose exactly their interest set.
#[derive(Clone, PartialEq, Debug)]
pub struct Scenario {
    pub num_owners: u32,
    pub num_stations: u32,
    pub num_rounds: u32,
    /// Proposals per round in the unstructured mode.
    pub models_per_round: u32,
    pub label_universe: u32,
    /// Labels per proposal in the unstructured mode.
    pub labels_per_proposal: u32,
    pub owner_label_mean: Money,
    pub station_label_mean: Money,
    /// Size of the forced common interest core; zero disables interest
    /// structure.
    pub core_size: u32,
    /// Size of the shared pool the owners' extra interest labels come from.
    pub extras_pool: u32,
    /// Every owner expands its interest set by 0..=max_expansion pool labels.
    pub max_expansion: u32,
    pub dishonest_prob: f64,
    pub dishonest_halfwidth: f64,
    /// Standing per-agent strategies; anyone absent bids truthfully.
    /// Experiment drivers may override individual agents on top.
    pub strategies: BTreeMap<ParticipantId, Strategy>,
    pub payment: PaymentPolicy,
    pub accuracy: AccuracyModel,
    /// Realized accuracy below (1 - epsilon) of the promise triggers
    /// punishment votes.
    pub punish_epsilon: f64,
    pub ledger_params: LedgerParams,
    pub initial_balance: Money,
    /// Agents escrow this multiple of their largest bid each round.
    pub deposit_multiple: i64,
    pub seed: u64,
}

impl Default for Scenario {
    /// The participants'-utility experiment: ten owners with 100 Gwei mean
    /// model values, ten stations with 50 Gwei mean costs, one hundred
    /// rounds of single-label proposals.
    fn default() -> Self {
        Scenario {
            num_owners: 10,
            num_stations: 10,
            num_rounds: 100,
            models_per_round: 4,
            label_universe: 10,
            labels_per_proposal: 1,
            owner_label_mean: Money::gwei(100),
            station_label_mean: Money::gwei(50),
            core_size: 0,
            extras_pool: 0,
            max_expansion: 0,
            dishonest_prob: 0.5,
            dishonest_halfwidth: 0.5,
            strategies: BTreeMap::new(),
            payment: PaymentPolicy::default(),
            accuracy: AccuracyModel::default(),
            punish_epsilon: 0.1,
            ledger_params: LedgerParams::default(),
            initial_balance: Money::gwei(100_000),
            deposit_multiple: 4,
            seed: 0,
        }
    }
}

impl Scenario {
    /// The social-utility experiment: per-label means 10/5 Gwei, ten rounds,
    /// interest sets sharing a guaranteed two-label core. The data budget is
    /// large enough that accuracy barely dilutes with target size, which is
    /// the regime where welfare comparisons carry through to social utility.
    pub fn social_defaults() -> Self {
        Scenario {
            num_rounds: 10,
            owner_label_mean: Money::gwei(10),
            station_label_mean: Money::gwei(5),
            core_size: 2,
            extras_pool: 2,
            max_expansion: 2,
            accuracy: AccuracyModel {
                acc_max: 0.9,
                kappa: 2_000,
                total_budget: 50_000,
            },
            ..Scenario::default()
        }
    }

    /// The cooperation-performance experiment: a guaranteed common core,
    /// 10,000 training images over ten labels.
    pub fn accuracy_defaults() -> Self {
        Scenario {
            num_rounds: 10,
            owner_label_mean: Money::gwei(10),
            station_label_mean: Money::gwei(5),
            core_size: 2,
            extras_pool: 2,
            max_expansion: 2,
            accuracy: AccuracyModel {
                acc_max: 0.9,
                kappa: 2_000,
                total_budget: 10_000,
            },
            ..Scenario::default()
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |msg: String| Err(ScenarioError::Invalid(msg));
        if self.num_owners == 0 || self.num_stations == 0 {
            return fail("need at least one owner and one station".into());
        }
        if self.num_rounds == 0 {
            return fail("need at least one round".into());
        }
        if self.label_universe == 0 {
            return fail("label universe must be nonempty".into());
        }
        if self.core_size == 0 {
            if self.models_per_round == 0 {
                return fail("need at least one model per round".into());
            }
            if self.labels_per_proposal == 0 || self.labels_per_proposal > self.label_universe {
                return fail(format!(
                    "labels per proposal {} must be in 1..={}",
                    self.labels_per_proposal, self.label_universe
                ));
            }
        } else if self.core_size + self.extras_pool > self.label_universe {
            return fail(format!(
                "core {} plus extras pool {} exceeds the {}-label universe",
                self.core_size, self.extras_pool, self.label_universe
            ));
        }
        if !(0.0..=1.0).contains(&self.dishonest_prob) || self.dishonest_halfwidth < 0.0 {
            return fail("dishonesty parameters out of range".into());
        }
        if !(0.0..=1.0).contains(&self.punish_epsilon) {
            return fail("punish epsilon out of range".into());
        }
        if !(self.accuracy.acc_max > 0.0 && self.accuracy.acc_max <= 1.0)
            || self.accuracy.kappa == 0
        {
            return fail("accuracy model out of range".into());
        }
        if self.deposit_multiple < self.ledger_params.deposit_floor_multiple {
            return fail("deposit multiple below the contract's floor".into());
        }
        if self.initial_balance <= ZERO {
            return fail("initial balance must be positive".into());
        }
        let roster = self.participants();
        for (participant, strategy) in &self.strategies {
            if !roster.contains(participant) {
                return fail(format!(
                    "strategy assigned to unknown participant {participant}"
                ));
            }
            strategy
                .validate()
                .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn owners(&self) -> Vec<ParticipantId> {
        (0..self.num_owners).map(ParticipantId::owner).collect()
    }

    pub fn stations(&self) -> Vec<ParticipantId> {
        (0..self.num_stations).map(ParticipantId::station).collect()
    }

    pub fn participants(&self) -> Vec<ParticipantId> {
        let mut all = self.owners();
        all.extend(self.stations());
        all
    }

    pub fn labels(&self) -> BTreeSet<u32> {
        (0..self.label_universe).collect()
    }

    fn agent_key(p: ParticipantId) -> u64 {
        let side = match p.role {
            Role::ModelOwner => 0u64,
            Role::BaseStation => 1u64,
        };
        (side << 32) | u64::from(p.index)
    }

    /// Per-agent stream for one purpose in one round.
    pub fn agent_stream(
        &self,
        domain: &str,
        round: u32,
        p: ParticipantId,
    ) -> rand_chacha::ChaCha12Rng {
        rng::stream(self.seed, domain, &[u64::from(round), Self::agent_key(p)])
    }

    fn agent_config(
        &self,
        p: ParticipantId,
        interests: &BTreeMap<ParticipantId, BTreeSet<u32>>,
    ) -> AgentConfig {
        match p.role {
            // Owners value only what they are interested in.
            Role::ModelOwner => {
                let mut config = AgentConfig::new(p, Strategy::Truthful, ZERO);
                if let Some(set) = interests.get(&p) {
                    config.label_means = set.iter().map(|&l| (l, self.owner_label_mean)).collect();
                }
                config
            }
            // Stations bear a cost for every label they might train.
            Role::BaseStation => AgentConfig::new(p, Strategy::Truthful, self.station_label_mean),
        }
    }

    /// The proposer promises what the declared accuracy curve can actually
    /// deliver for a target of this size.
    fn honest_promise(&self, target: &BTreeSet<u32>) -> f64 {
        let per_label = self.accuracy.total_budget / target.len().max(1) as u64;
        self.accuracy.accuracy(per_label).max(f64::MIN_POSITIVE)
    }

    fn proposal(&self, model: u32, owner: ParticipantId, target: BTreeSet<u32>) -> ModelProposal {
        ModelProposal {
            model_id: ModelId(model),
            owner,
            param_size: 25_000_000,
            characteristics: 5,
            expected_accuracy: self.honest_promise(&target),
            rounds: 50,
            target_labels: target,
        }
    }

    /// Generates everything one round of the market needs.
    pub fn generate_round(&self, round: u32) -> RoundSetup {
        let universe: Vec<u32> = self.labels().into_iter().collect();

        // Interest sets. Unstructured mode: every owner values everything.
        let (core, pool) = if self.core_size > 0 {
            let mut pick = rng::stream(self.seed, "core", &[u64::from(round)]);
            let mut shuffled = universe.clone();
            shuffled.shuffle(&mut pick);
            let core: BTreeSet<u32> = shuffled
                .iter()
                .copied()
                .take(self.core_size as usize)
                .collect();
            let pool: Vec<u32> = shuffled
                .iter()
                .copied()
                .skip(self.core_size as usize)
                .take(self.extras_pool as usize)
                .collect();
            (core, pool)
        } else {
            (BTreeSet::new(), Vec::new())
        };

        let mut interests: BTreeMap<ParticipantId, BTreeSet<u32>> = BTreeMap::new();
        for owner in self.owners() {
            let set = if self.core_size == 0 {
                self.labels()
            } else {
                let mut rng = self.agent_stream("interest", round, owner);
                let expansion = rng.gen_range(0..=self.max_expansion.min(pool.len() as u32));
                let mut extras = pool.clone();
                extras.shuffle(&mut rng);
                core.iter()
                    .copied()
                    .chain(extras.into_iter().take(expansion as usize))
                    .collect()
            };
            interests.insert(owner, set);
        }

        // Proposals. Structured mode: each owner proposes its interest set.
        let proposals: Vec<ModelProposal> = if self.core_size > 0 {
            self.owners()
                .into_iter()
                .enumerate()
                .map(|(i, owner)| self.proposal(i as u32, owner, interests[&owner].clone()))
                .collect()
        } else {
            (0..self.models_per_round)
                .map(|i| {
                    let owner = ParticipantId::owner((round + i) % self.num_owners);
                    let mut pick =
                        rng::stream(self.seed, "target", &[u64::from(round), u64::from(i)]);
                    let mut shuffled = universe.clone();
                    shuffled.shuffle(&mut pick);
                    let target: BTreeSet<u32> = shuffled
                        .into_iter()
                        .take(self.labels_per_proposal as usize)
                        .collect();
                    self.proposal(i, owner, target)
                })
                .collect()
        };

        // True per-label magnitudes for every agent.
        let label_values: BTreeMap<ParticipantId, BTreeMap<u32, Money>> = self
            .participants()
            .into_iter()
            .map(|p| {
                let config = self.agent_config(p, &interests);
                let mut rng = self.agent_stream("values", round, p);
                (
                    p,
                    agents::draw_label_values(&config, self.labels(), &mut rng),
                )
            })
            .collect();

        // Training data split equally across stations, remainder to the
        // lowest station indices.
        let stations = self.stations();
        let per = self.accuracy.total_budget / stations.len() as u64;
        let rem = self.accuracy.total_budget % stations.len() as u64;
        let station_shares: BTreeMap<ParticipantId, u64> = stations
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, per + u64::from((i as u64) < rem)))
            .collect();

        RoundSetup {
            round,
            proposals,
            interests,
            core,
            label_values,
            station_shares,
        }
    }
}

/// One generated round: the proposals on the book, the owners' interest
/// sets (with the guaranteed core), every agent's true per-label values,
/// and how the training data is spread over the stations.
#[derive(Clone, PartialEq, Debug)]
pub struct RoundSetup {
    pub round: u32,
    pub proposals: Vec<ModelProposal>,
    pub interests: BTreeMap<ParticipantId, BTreeSet<u32>>,
    pub core: BTreeSet<u32>,
    pub label_values: BTreeMap<ParticipantId, BTreeMap<u32, Money>>,
    pub station_shares: BTreeMap<ParticipantId, u64>,
}

impl RoundSetup {
    /// True magnitude one agent attaches to an arbitrary target trained for
    /// the standard number of rounds.
    pub fn true_value(&self, p: ParticipantId, target: &BTreeSet<u32>) -> Money {
        agents::value_of_target(
            &self.label_values[&p],
            target,
            p.role,
            crate::agents::REFERENCE_ROUNDS,
        )
    }

    /// True valuation profile over the round's proposals.
    pub fn true_profile(&self) -> Profile {
        let mut profile = Profile::new();
        for (&p, labels) in &self.label_values {
            profile.add_participant(p);
            for proposal in &self.proposals {
                let value = agents::value_of_target(
                    labels,
                    &proposal.target_labels,
                    p.role,
                    proposal.rounds,
                );
                profile
                    .set(p, proposal.model_id, value)
                    .expect("magnitudes nonnegative");
            }
        }
        profile
    }

    /// Signed true welfare of an arbitrary target set.
    pub fn true_welfare(&self, target: &BTreeSet<u32>) -> Money {
        let mut welfare = ZERO;
        for &p in self.label_values.keys() {
            let value = self.true_value(p, target);
            welfare += match p.role {
                Role::ModelOwner => value,
                Role::BaseStation => -value,
            };
        }
        welfare
    }

    /// Exact intersection of all owners' interest sets.
    pub fn interest_intersection(&self) -> BTreeSet<u32> {
        let mut iter = self.interests.values();
        let mut out = iter.next().cloned().unwrap_or_default();
        for set in iter {
            out = out.intersection(set).copied().collect();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Scenario::default().validate().unwrap();
        Scenario::social_defaults().validate().unwrap();
        Scenario::accuracy_defaults().validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let s = Scenario {
            num_owners: 0,
            ..Scenario::default()
        };
        assert!(s.validate().is_err());

        let s = Scenario {
            labels_per_proposal: 11,
            ..Scenario::default()
        };
        assert!(s.validate().is_err());

        let s = Scenario {
            core_size: 9,
            ..Scenario::social_defaults()
        };
        assert!(s.validate().is_err());

        let s = Scenario {
            dishonest_prob: 1.5,
            ..Scenario::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn rounds_are_reproducible_and_distinct() {
        let scenario = Scenario::social_defaults();
        let a = scenario.generate_round(3);
        let b = scenario.generate_round(3);
        assert_eq!(a, b);
        let c = scenario.generate_round(4);
        assert_ne!(a, c);
    }

    #[test]
    fn structured_interests_share_the_core() {
        let scenario = Scenario::social_defaults();
        for round in 1..=10 {
            let setup = scenario.generate_round(round);
            assert_eq!(setup.core.len(), 2);
            for interest in setup.interests.values() {
                assert!(setup.core.is_subset(interest));
            }
            assert!(setup.core.is_subset(&setup.interest_intersection()));
            // Proposals are exactly the owners' interest sets.
            for proposal in &setup.proposals {
                assert_eq!(proposal.target_labels, setup.interests[&proposal.owner]);
            }
        }
    }

    #[test]
    fn unstructured_proposals_have_fixed_size() {
        let scenario = Scenario::default();
        let setup = scenario.generate_round(1);
        assert_eq!(setup.proposals.len(), 4);
        for p in &setup.proposals {
            assert_eq!(p.target_labels.len(), 1);
        }
    }

    #[test]
    fn owners_value_only_their_interests() {
        let scenario = Scenario::social_defaults();
        let setup = scenario.generate_round(1);
        let owner = ParticipantId::owner(0);
        let interest = &setup.interests[&owner];
        for (label, value) in &setup.label_values[&owner] {
            if interest.contains(label) {
                assert!(
                    value.raw() >= 5 && value.raw() <= 15,
                    "draw {value} off support"
                );
            } else {
                assert_eq!(*value, ZERO);
            }
        }
    }

    #[test]
    fn station_shares_cover_the_budget() {
        let scenario = Scenario::accuracy_defaults();
        let setup = scenario.generate_round(2);
        let total: u64 = setup.station_shares.values().sum();
        assert_eq!(total, scenario.accuracy.total_budget);
    }

    #[test]
    fn true_welfare_is_additive_over_sides() {
        let scenario = Scenario::social_defaults();
        let setup = scenario.generate_round(1);
        let target = setup.core.clone();
        let owners_sum: Money = scenario
            .owners()
            .into_iter()
            .map(|o| setup.true_value(o, &target))
            .sum();
        let stations_sum: Money = scenario
            .stations()
            .into_iter()
            .map(|s| setup.true_value(s, &target))
            .sum();
        assert_eq!(setup.true_welfare(&target), owners_sum - stations_sum);
    }
}
