//! Multi-round experiment drivers. One function runs a full contract round
//! for a generated market; on top of it sit the three experiment runners
//! (participant utility under dishonesty, social utility across selection
//! strategies, and accuracy on the common-interest labels).

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use thiserror::Error;

use crate::agents::{self, Strategy};
use crate::flsim;
use crate::ledger::{EventHash, Ledger, LedgerConfig, LedgerError};
use crate::mechanism::AuctionOutcome;
use crate::money::{Money, ZERO};
use crate::rng;
use crate::scenario::{RoundSetup, Scenario, ScenarioError};
use crate::settlement::SettlementResult;
use crate::types::{ModelProposal, ParticipantId, Role};

#[derive(Error, Debug)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Agent(#[from] crate::agents::AgentError),
    #[error("experiment requires at least one strategy")]
    NoStrategies,
}

/// Everything observable about one settled round.
#[derive(Clone, PartialEq, Debug)]
pub struct RoundRecord {
    pub round: u32,
    pub outcome: AuctionOutcome,
    pub settlement: SettlementResult,
    /// True welfare of the selected model (zero when none).
    pub welfare_true: Money,
    /// Per-participant realized utility: value against payment and tax,
    /// with recycle rebates and bonuses folded into the payment.
    pub utilities: BTreeMap<ParticipantId, Money>,
    pub report: Option<flsim::TrainingReport>,
    /// True welfare scaled by realized average accuracy; zero when no model
    /// was trained.
    pub social_utility: f64,
}

pub struct SimResult {
    pub rounds: Vec<RoundRecord>,
    pub ledger: Ledger,
}

pub fn ledger_config(scenario: &Scenario) -> LedgerConfig {
    LedgerConfig {
        participants: scenario.participants(),
        initial_balance: scenario.initial_balance,
        policy: scenario.payment.clone(),
        params: scenario.ledger_params,
    }
}

fn strategy_for(
    scenario: &Scenario,
    overrides: &BTreeMap<ParticipantId, Strategy>,
    p: ParticipantId,
) -> Strategy {
    overrides
        .get(&p)
        .or_else(|| scenario.strategies.get(&p))
        .cloned()
        .unwrap_or(Strategy::Truthful)
}

/// Drives one generated market round through the contract: deposits,
/// proposals, sealed bids, selection, synthetic training, punishment votes,
/// and settlement.
pub fn run_market_round(
    ledger: &mut Ledger,
    scenario: &Scenario,
    setup: &RoundSetup,
    strategy_overrides: &BTreeMap<ParticipantId, Strategy>,
) -> Result<RoundRecord, SimError> {
    let round = setup.round;
    let truth = setup.true_profile();

    // Claims: each agent pushes its true magnitudes through its strategy,
    // drawing from its own stream so other agents' randomness is untouched.
    let mut claims: BTreeMap<ParticipantId, BTreeMap<crate::types::ModelId, Money>> =
        BTreeMap::new();
    for p in scenario.participants() {
        let strategy = strategy_for(scenario, strategy_overrides, p);
        let mut stream = scenario.agent_stream("bid", round, p);
        let row = setup
            .proposals
            .iter()
            .map(|proposal| {
                let v = truth
                    .amount(p, proposal.model_id)
                    .expect("truth profile complete");
                (
                    proposal.model_id,
                    agents::make_bid(&strategy, v, &mut stream),
                )
            })
            .collect();
        claims.insert(p, row);
    }

    ledger.open_round()?;
    for p in scenario.participants() {
        let max_bid = claims[&p].values().copied().fold(ZERO, Money::max);
        let amount = (max_bid * scenario.deposit_multiple).max(Money::gwei(1));
        ledger.deposit(p, amount)?;
    }
    ledger.begin_proposals()?;
    for proposal in &setup.proposals {
        ledger.submit_proposal(proposal.owner, proposal.clone())?;
    }
    ledger.begin_bidding()?;
    for (p, row) in &claims {
        let mut salt_stream = scenario.agent_stream("salt", round, *p);
        let mut salt = [0u8; 32];
        salt_stream.fill(&mut salt);
        ledger.submit_bid(*p, row.clone(), EventHash(salt))?;
    }

    let outcome = ledger.run_selection()?.clone();

    let mut report = None;
    if let Some(selected) = outcome.selected {
        let proposal = setup
            .proposals
            .iter()
            .find(|p| p.model_id == selected)
            .expect("selected model was proposed");
        let trained = flsim::train(proposal, &scenario.accuracy, &setup.station_shares);
        let winner = proposal.owner;
        ledger.record_training(winner, trained.clone())?;

        // Non-winner owners vote to punish when the promise was missed.
        let meets = flsim::realized_vs_expected(&trained, proposal, scenario.punish_epsilon);
        for voter in scenario.owners() {
            if voter != winner {
                ledger.cast_punishment_vote(voter, !meets)?;
            }
        }
        report = Some(trained);
    }

    let settlement = ledger.settle()?.clone();

    let welfare_true = match outcome.selected {
        Some(selected) => {
            let proposal = setup
                .proposals
                .iter()
                .find(|p| p.model_id == selected)
                .unwrap();
            setup.true_welfare(&proposal.target_labels)
        }
        None => ZERO,
    };
    let social_utility = match &report {
        Some(r) => flsim::social_utility_metric(welfare_true, r),
        None => 0.0,
    };

    let utilities = round_utilities(scenario, &outcome, &settlement, setup);
    Ok(RoundRecord {
        round,
        outcome,
        settlement,
        welfare_true,
        utilities,
        report,
        social_utility,
    })
}

/// Realized utility per participant: owners net their true value against
/// their pool share (less rebate) and tax; stations net reward (plus bonus)
/// against true cost and tax. Without a selected model only taxes and
/// recycle transfers remain.
fn round_utilities(
    scenario: &Scenario,
    outcome: &AuctionOutcome,
    settlement: &SettlementResult,
    setup: &RoundSetup,
) -> BTreeMap<ParticipantId, Money> {
    let selected_proposal: Option<&ModelProposal> = outcome.selected.map(|m| {
        setup
            .proposals
            .iter()
            .find(|p| p.model_id == m)
            .expect("selected model was proposed")
    });
    scenario
        .participants()
        .into_iter()
        .map(|p| {
            let tax = settlement.taxes.get(&p).copied().unwrap_or(ZERO);
            let value = selected_proposal
                .map(|proposal| {
                    agents::value_of_target(
                        &setup.label_values[&p],
                        &proposal.target_labels,
                        p.role,
                        proposal.rounds,
                    )
                })
                .unwrap_or(ZERO);
            let utility = match p.role {
                Role::ModelOwner => {
                    let share = settlement.owner_shares.get(&p).copied().unwrap_or(ZERO);
                    let rebate = settlement.owner_rebates.get(&p).copied().unwrap_or(ZERO);
                    value - share + rebate - tax
                }
                Role::BaseStation => {
                    let reward = settlement.station_rewards.get(&p).copied().unwrap_or(ZERO);
                    let bonus = settlement.station_bonuses.get(&p).copied().unwrap_or(ZERO);
                    reward + bonus - value - tax
                }
            };
            (p, utility)
        })
        .collect()
}

/// Runs the scenario start to finish on one persistent contract.
pub fn run_simulation(
    scenario: &Scenario,
    strategy_overrides: &BTreeMap<ParticipantId, Strategy>,
) -> Result<SimResult, SimError> {
    scenario.validate()?;
    let mut ledger = Ledger::new(ledger_config(scenario));
    let mut rounds = Vec::with_capacity(scenario.num_rounds as usize);
    for round in 1..=scenario.num_rounds {
        let setup = scenario.generate_round(round);
        rounds.push(run_market_round(
            &mut ledger,
            scenario,
            &setup,
            strategy_overrides,
        )?);
    }
    Ok(SimResult { rounds, ledger })
}

// --- experiment A: participant utility, truth vs dishonesty ---

#[derive(Clone, PartialEq, Debug)]
pub struct UtilityRow {
    pub round: u32,
    pub strategy: &'static str,
    pub utility: Money,
    pub accumulated: Money,
}

pub struct UtilityExperiment {
    pub rows: Vec<UtilityRow>,
    pub truthful: SimResult,
    pub dishonest: SimResult,
}

/// Paired runs with identical market randomness: the tracked owner bids
/// truthfully in one run and through the dishonesty model in the other.
/// Everyone else is truthful in both.
pub fn run_experiment_utility(
    scenario: &Scenario,
    tracked: ParticipantId,
) -> Result<UtilityExperiment, SimError> {
    let truthful = run_simulation(scenario, &BTreeMap::new())?;
    let overrides: BTreeMap<ParticipantId, Strategy> = [(
        tracked,
        Strategy::Dishonest {
            prob: scenario.dishonest_prob,
            noise_halfwidth: scenario.dishonest_halfwidth,
        },
    )]
    .into();
    let dishonest = run_simulation(scenario, &overrides)?;

    let mut rows = Vec::with_capacity(2 * scenario.num_rounds as usize);
    for (label, result) in [("truthful", &truthful), ("dishonest", &dishonest)] {
        let mut accumulated = ZERO;
        for record in &result.rounds {
            let utility = record.utilities[&tracked];
            accumulated += utility;
            rows.push(UtilityRow {
                round: record.round,
                strategy: label,
                utility,
                accumulated,
            });
        }
    }
    Ok(UtilityExperiment {
        rows,
        truthful,
        dishonest,
    })
}

// --- experiment B: social utility across selection strategies ---

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SelectionStrategy {
    Vcg,
    Selfish,
    Random,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 3] = [
        SelectionStrategy::Vcg,
        SelectionStrategy::Selfish,
        SelectionStrategy::Random,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SelectionStrategy::Vcg => "vcg",
            SelectionStrategy::Selfish => "selfish",
            SelectionStrategy::Random => "random",
        }
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct SocialRow {
    pub round: u32,
    pub strategy: &'static str,
    pub social_utility: f64,
    pub accumulated: f64,
}

/// Social utility of training an arbitrary target on this round's market:
/// true welfare of the target scaled by the synthetic accuracy it reaches.
fn baseline_social_utility(
    scenario: &Scenario,
    setup: &RoundSetup,
    target: &BTreeSet<u32>,
) -> (f64, flsim::TrainingReport) {
    let proposal = ModelProposal {
        model_id: crate::types::ModelId(u32::MAX),
        owner: ParticipantId::owner(0),
        param_size: 25_000_000,
        characteristics: 5,
        expected_accuracy: 1.0,
        rounds: 50,
        target_labels: target.clone(),
    };
    let report = flsim::train(&proposal, &scenario.accuracy, &setup.station_shares);
    let welfare = setup.true_welfare(target);
    (flsim::social_utility_metric(welfare, &report), report)
}

pub struct SocialExperiment {
    pub rows: Vec<SocialRow>,
    /// The contract backing the auction arm (untouched when that arm was
    /// not requested).
    pub vcg_ledger: Ledger,
}

/// For each round, decides the training target by every requested strategy
/// over the same drawn market and accumulates the social utility. The VCG
/// arm runs the full contract; the baselines bypass the auction.
pub fn run_experiment_social(
    scenario: &Scenario,
    strategies: &[SelectionStrategy],
) -> Result<SocialExperiment, SimError> {
    scenario.validate()?;
    if strategies.is_empty() {
        return Err(SimError::NoStrategies);
    }
    let mut vcg_ledger = Ledger::new(ledger_config(scenario));
    let mut accumulated: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut rows = Vec::new();

    for round in 1..=scenario.num_rounds {
        let setup = scenario.generate_round(round);
        for &strategy in strategies {
            let social = match strategy {
                SelectionStrategy::Vcg => {
                    run_market_round(&mut vcg_ledger, scenario, &setup, &BTreeMap::new())?
                        .social_utility
                }
                SelectionStrategy::Selfish => {
                    let interests: Vec<BTreeSet<u32>> = setup.interests.values().cloned().collect();
                    let mut stream =
                        rng::stream(scenario.seed, "selfish-target", &[u64::from(round)]);
                    let target = agents::select_baseline_target(
                        &Strategy::SelfishIntersection,
                        &interests,
                        &scenario.labels(),
                        &mut stream,
                    )?;
                    baseline_social_utility(scenario, &setup, &target).0
                }
                SelectionStrategy::Random => {
                    let mut stream =
                        rng::stream(scenario.seed, "random-target", &[u64::from(round)]);
                    let target = agents::select_baseline_target(
                        &Strategy::RandomTarget,
                        &[],
                        &scenario.labels(),
                        &mut stream,
                    )?;
                    baseline_social_utility(scenario, &setup, &target).0
                }
            };
            let acc = accumulated.entry(strategy.label()).or_insert(0.0);
            *acc += social;
            rows.push(SocialRow {
                round,
                strategy: strategy.label(),
                social_utility: social,
                accumulated: *acc,
            });
        }
    }
    Ok(SocialExperiment { rows, vcg_ledger })
}

// --- experiment C: accuracy on the common-interest labels ---

#[derive(Clone, PartialEq, Debug)]
pub struct AccuracyRow {
    pub round: u32,
    pub strategy: &'static str,
    /// Mean synthetic accuracy over the round's common-core labels; labels
    /// the trained target misses count as zero.
    pub intersection_accuracy: f64,
}

fn core_accuracy(core: &BTreeSet<u32>, report: &flsim::TrainingReport) -> f64 {
    if core.is_empty() {
        return 0.0;
    }
    core.iter()
        .map(|l| report.per_label_accuracy.get(l).copied().unwrap_or(0.0))
        .sum::<f64>()
        / core.len() as f64
}

pub struct AccuracyExperiment {
    pub rows: Vec<AccuracyRow>,
    pub vcg_ledger: Ledger,
}

/// Compares accuracy on the guaranteed common labels when the target is
/// picked by the auction versus at random, under the same data budget.
pub fn run_experiment_accuracy(scenario: &Scenario) -> Result<AccuracyExperiment, SimError> {
    scenario.validate()?;
    let mut vcg_ledger = Ledger::new(ledger_config(scenario));
    let mut rows = Vec::new();
    for round in 1..=scenario.num_rounds {
        let setup = scenario.generate_round(round);

        let record = run_market_round(&mut vcg_ledger, scenario, &setup, &BTreeMap::new())?;
        let vcg_accuracy = record
            .report
            .as_ref()
            .map(|r| core_accuracy(&setup.core, r))
            .unwrap_or(0.0);
        rows.push(AccuracyRow {
            round,
            strategy: "vcg",
            intersection_accuracy: vcg_accuracy,
        });

        let mut stream = rng::stream(scenario.seed, "random-target", &[u64::from(round)]);
        let target = agents::select_baseline_target(
            &Strategy::RandomTarget,
            &[],
            &scenario.labels(),
            &mut stream,
        )?;
        let (_, report) = baseline_social_utility(scenario, &setup, &target);
        rows.push(AccuracyRow {
            round,
            strategy: "random",
            intersection_accuracy: core_accuracy(&setup.core, &report),
        });
    }
    Ok(AccuracyExperiment { rows, vcg_ledger })
}
