//! Simulated smart contract: a phased state machine over deposits, sealed
//! bids, selection, training, punishment votes, and settlement, with every
//! state mutation driven by a hash-chained event log.
//!
//! Phase order within a round:
//! Deposit -> Proposal -> Bidding -> Selection -> Training -> Evaluation ->
//! Settlement -> Recycle -> Closed, where Selection jumps straight to
//! Settlement when no model clears its costs. Replaying a complete log
//! through [`Ledger::replay`] reconstructs a state whose digest matches the
//! live run exactly.

mod event;

pub use event::{
    BidReveal, ChainError, Event, EventHash, EventKind, EventLog, EventPayload, GENESIS_HASH,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::flsim::TrainingReport;
use crate::mechanism::{self, AuctionOutcome, MechanismError};
use crate::money::{Money, ZERO};
use crate::settlement::{self, PaymentPolicy, PaymentSchedule, SettlementError, SettlementResult};
use crate::types::{ModelId, ModelProposal, ParticipantId, Profile, Role};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum Phase {
    Setup,
    Deposit,
    Proposal,
    Bidding,
    Selection,
    Training,
    Evaluation,
    Settlement,
    Recycle,
    Closed,
}

#[derive(Error, Debug, PartialEq)]
pub enum LedgerError {
    #[error("{op} not allowed in phase {phase:?}")]
    WrongPhase { op: &'static str, phase: Phase },
    #[error("unknown participant {0}")]
    UnknownParticipant(ParticipantId),
    #[error("deposit must be positive, got {0}")]
    NonpositiveDeposit(Money),
    #[error("{participant} balance {balance} cannot cover deposit {amount}")]
    InsufficientBalance {
        participant: ParticipantId,
        balance: Money,
        amount: Money,
    },
    #[error("only model owners may propose, {0} is a station")]
    StationCannotPropose(ParticipantId),
    #[error("duplicate model id {0}")]
    DuplicateModel(ModelId),
    #[error("{0} must deposit before proposing")]
    NoDeposit(ParticipantId),
    #[error("{participant} deposit {deposit} below required floor {floor}")]
    DepositFloor {
        participant: ParticipantId,
        deposit: Money,
        floor: Money,
    },
    #[error("{0} already submitted a bid this round")]
    DuplicateBid(ParticipantId),
    #[error(
        "bid from {participant} does not cover exactly the proposed models (offender: {model})"
    )]
    IncompleteBid {
        participant: ParticipantId,
        model: ModelId,
    },
    #[error("round aborted: missing bids from {missing:?}; deposits refunded")]
    RoundAborted { missing: Vec<ParticipantId> },
    #[error("no proposals were submitted")]
    NoProposals,
    #[error("training report must come from the winner {winner}, not {reporter}")]
    NotWinner {
        winner: ParticipantId,
        reporter: ParticipantId,
    },
    #[error("training report does not cover station {0}")]
    IncompleteReport(ParticipantId),
    #[error("the winner may not vote on its own punishment")]
    WinnerCannotVote,
    #[error("stations do not vote on punishment")]
    StationCannotVote(ParticipantId),
    #[error("{0} already voted")]
    AlreadyVoted(ParticipantId),
    #[error("no auction outcome recorded for this round")]
    NoOutcome,
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Settlement(#[from] SettlementError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("replayed {what} diverges from the recorded log at sequence {sequence}")]
    ReplayDivergence { what: &'static str, sequence: u64 },
    #[error("ledger invariant violated: {0}")]
    Internal(String),
}

/// Tunables the contract is instantiated with.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct LedgerParams {
    /// A bidder must hold at least this multiple of its largest bid in escrow.
    pub deposit_floor_multiple: i64,
    /// Fraction of the winner's escrow forfeited on a punishment vote.
    pub forfeit_numerator: i64,
    pub forfeit_denominator: i64,
}

impl Default for LedgerParams {
    fn default() -> Self {
        LedgerParams {
            deposit_floor_multiple: 2,
            forfeit_numerator: 1,
            forfeit_denominator: 2,
        }
    }
}

/// Constructor arguments, shared between a live contract and a replay.
#[derive(Clone, PartialEq, Debug)]
pub struct LedgerConfig {
    pub participants: Vec<ParticipantId>,
    pub initial_balance: Money,
    pub policy: PaymentPolicy,
    pub params: LedgerParams,
}

/// A sealed bid as the contract holds it: the public commitment, and the
/// plaintext + salt, which a replay only learns at settlement.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct SealedBid {
    pub commitment: EventHash,
    pub bids: Option<BTreeMap<ModelId, Money>>,
    pub salt: Option<EventHash>,
}

/// A punished winner's forfeiture: the escrow fraction taken and its equal
/// split over the voters.
struct ForfeitPlan {
    winner: ParticipantId,
    forfeited: Money,
    redistributed: BTreeMap<ParticipantId, Money>,
}

/// Commitment digest: SHA-256 over the salt followed by the canonical bid
/// encoding.
pub fn bid_commitment(bids: &BTreeMap<ModelId, Money>, salt: &EventHash) -> EventHash {
    let mut h = Sha256::new();
    h.update(salt.0);
    h.update(serde_json::to_vec(bids).expect("bids serialize"));
    EventHash(h.finalize().into())
}

#[derive(Debug)]
pub struct Ledger {
    config: LedgerConfig,
    phase: Phase,
    round: u32,
    balances: BTreeMap<ParticipantId, Money>,
    deposits: BTreeMap<ParticipantId, Money>,
    proposals: Vec<ModelProposal>,
    sealed_bids: BTreeMap<ParticipantId, SealedBid>,
    outcome: Option<AuctionOutcome>,
    schedule: Option<PaymentSchedule>,
    report: Option<TrainingReport>,
    votes: BTreeMap<ParticipantId, bool>,
    punished: bool,
    settlement: Option<SettlementResult>,
    owner_pool: Money,
    station_pool: Money,
    log: EventLog,
}

/// Everything that defines the contract state, in canonical order, for
/// digesting. The log itself is summarized by its head hash and length.
#[derive(Serialize)]
struct StateDigestView<'a> {
    phase: Phase,
    round: u32,
    balances: &'a BTreeMap<ParticipantId, Money>,
    deposits: &'a BTreeMap<ParticipantId, Money>,
    proposals: &'a Vec<ModelProposal>,
    sealed_bids: &'a BTreeMap<ParticipantId, SealedBid>,
    outcome: &'a Option<AuctionOutcome>,
    report: &'a Option<TrainingReport>,
    votes: &'a BTreeMap<ParticipantId, bool>,
    punished: bool,
    settlement: &'a Option<SettlementResult>,
    owner_pool: Money,
    station_pool: Money,
    log_len: u64,
    log_head: EventHash,
}

impl Ledger {
    pub fn new(config: LedgerConfig) -> Self {
        let balances = config
            .participants
            .iter()
            .map(|&p| (p, config.initial_balance))
            .collect();
        let deposits = config.participants.iter().map(|&p| (p, ZERO)).collect();
        Ledger {
            config,
            phase: Phase::Setup,
            round: 0,
            balances,
            deposits,
            proposals: Vec::new(),
            sealed_bids: BTreeMap::new(),
            outcome: None,
            schedule: None,
            report: None,
            votes: BTreeMap::new(),
            punished: false,
            settlement: None,
            owner_pool: ZERO,
            station_pool: ZERO,
            log: EventLog::new(),
        }
    }

    // --- accessors ---

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn balance(&self, p: ParticipantId) -> Money {
        self.balances.get(&p).copied().unwrap_or(ZERO)
    }

    pub fn deposit_of(&self, p: ParticipantId) -> Money {
        self.deposits.get(&p).copied().unwrap_or(ZERO)
    }

    pub fn outcome(&self) -> Option<&AuctionOutcome> {
        self.outcome.as_ref()
    }

    pub fn settlement(&self) -> Option<&SettlementResult> {
        self.settlement.as_ref()
    }

    pub fn report(&self) -> Option<&TrainingReport> {
        self.report.as_ref()
    }

    pub fn punished(&self) -> bool {
        self.punished
    }

    pub fn recycle_pools(&self) -> (Money, Money) {
        (self.owner_pool, self.station_pool)
    }

    pub fn winner(&self) -> Option<ParticipantId> {
        let selected = self.outcome.as_ref()?.selected?;
        self.proposals
            .iter()
            .find(|p| p.model_id == selected)
            .map(|p| p.owner)
    }

    /// SHA-256 over the canonical serialization of the full contract state.
    pub fn state_digest(&self) -> EventHash {
        let view = StateDigestView {
            phase: self.phase,
            round: self.round,
            balances: &self.balances,
            deposits: &self.deposits,
            proposals: &self.proposals,
            sealed_bids: &self.sealed_bids,
            outcome: &self.outcome,
            report: &self.report,
            votes: &self.votes,
            punished: self.punished,
            settlement: &self.settlement,
            owner_pool: self.owner_pool,
            station_pool: self.station_pool,
            log_len: self.log.len() as u64,
            log_head: self.log.head_hash(),
        };
        event::sha256(&serde_json::to_vec(&view).expect("state serializes"))
    }

    /// Closed-economy check: all balances, escrows, and pools must sum to
    /// the funds the participants brought in.
    pub fn holdings_conserved(&self) -> bool {
        let total: Money = self.balances.values().copied().sum::<Money>()
            + self.deposits.values().copied().sum::<Money>()
            + self.owner_pool
            + self.station_pool;
        total == self.config.initial_balance * self.config.participants.len() as i64
    }

    fn require_phase(&self, expected: Phase, op: &'static str) -> Result<(), LedgerError> {
        if self.phase != expected {
            return Err(LedgerError::WrongPhase {
                op,
                phase: self.phase,
            });
        }
        Ok(())
    }

    fn require_participant(&self, p: ParticipantId) -> Result<(), LedgerError> {
        if !self.config.participants.contains(&p) {
            return Err(LedgerError::UnknownParticipant(p));
        }
        Ok(())
    }

    // --- round lifecycle ---

    /// Opens the next round for deposits. Per-round state from the previous
    /// round is discarded; escrows were refunded when it closed.
    pub fn open_round(&mut self) -> Result<u32, LedgerError> {
        if self.phase != Phase::Setup && self.phase != Phase::Closed {
            return Err(LedgerError::WrongPhase {
                op: "open_round",
                phase: self.phase,
            });
        }
        self.apply_open_round();
        Ok(self.round)
    }

    fn apply_open_round(&mut self) {
        self.round += 1;
        self.phase = Phase::Deposit;
        self.proposals.clear();
        self.sealed_bids.clear();
        self.outcome = None;
        self.schedule = None;
        self.report = None;
        self.votes.clear();
        self.punished = false;
        self.settlement = None;
    }

    /// Closes the deposit window and opens proposals.
    pub fn begin_proposals(&mut self) -> Result<(), LedgerError> {
        self.require_phase(Phase::Deposit, "begin_proposals")?;
        self.phase = Phase::Proposal;
        Ok(())
    }

    /// Closes proposals and opens sealed bidding. Requires at least one
    /// proposal on the book.
    pub fn begin_bidding(&mut self) -> Result<(), LedgerError> {
        self.require_phase(Phase::Proposal, "begin_bidding")?;
        if self.proposals.is_empty() {
            return Err(LedgerError::NoProposals);
        }
        self.phase = Phase::Bidding;
        Ok(())
    }

    // --- operations ---

    pub fn deposit(
        &mut self,
        participant: ParticipantId,
        amount: Money,
    ) -> Result<(), LedgerError> {
        self.require_phase(Phase::Deposit, "deposit")?;
        self.require_participant(participant)?;
        if amount <= ZERO {
            return Err(LedgerError::NonpositiveDeposit(amount));
        }
        let balance = self.balance(participant);
        if balance < amount {
            return Err(LedgerError::InsufficientBalance {
                participant,
                balance,
                amount,
            });
        }
        self.apply_deposit(participant, amount);
        self.log.append(
            self.round,
            EventPayload::Deposited {
                participant,
                amount,
            },
        );
        Ok(())
    }

    fn apply_deposit(&mut self, participant: ParticipantId, amount: Money) {
        *self.balances.entry(participant).or_insert(ZERO) -= amount;
        *self.deposits.entry(participant).or_insert(ZERO) += amount;
    }

    pub fn submit_proposal(
        &mut self,
        owner: ParticipantId,
        proposal: ModelProposal,
    ) -> Result<(), LedgerError> {
        self.require_phase(Phase::Proposal, "submit_proposal")?;
        self.require_participant(owner)?;
        if owner.role != Role::ModelOwner {
            return Err(LedgerError::StationCannotPropose(owner));
        }
        if proposal.owner != owner {
            return Err(LedgerError::Internal(format!(
                "proposal {} names {} as owner but was submitted by {}",
                proposal.model_id, proposal.owner, owner
            )));
        }
        proposal.validate().map_err(MechanismError::Profile)?;
        if self
            .proposals
            .iter()
            .any(|p| p.model_id == proposal.model_id)
        {
            return Err(LedgerError::DuplicateModel(proposal.model_id));
        }
        if self.deposit_of(owner) <= ZERO {
            return Err(LedgerError::NoDeposit(owner));
        }
        self.log.append(
            self.round,
            EventPayload::Proposed {
                proposal: proposal.clone(),
            },
        );
        self.apply_proposal(proposal);
        Ok(())
    }

    fn apply_proposal(&mut self, proposal: ModelProposal) {
        self.proposals.push(proposal);
    }

    /// Submits a sealed bid covering exactly the proposed models. Only the
    /// commitment digest enters the public record; the plaintext is revealed
    /// in the round's Settled event.
    pub fn submit_bid(
        &mut self,
        participant: ParticipantId,
        bids: BTreeMap<ModelId, Money>,
        salt: EventHash,
    ) -> Result<(), LedgerError> {
        self.require_phase(Phase::Bidding, "submit_bid")?;
        self.require_participant(participant)?;
        if self.sealed_bids.contains_key(&participant) {
            return Err(LedgerError::DuplicateBid(participant));
        }
        for proposal in &self.proposals {
            if !bids.contains_key(&proposal.model_id) {
                return Err(LedgerError::IncompleteBid {
                    participant,
                    model: proposal.model_id,
                });
            }
        }
        for model in bids.keys() {
            if !self.proposals.iter().any(|p| p.model_id == *model) {
                return Err(LedgerError::IncompleteBid {
                    participant,
                    model: *model,
                });
            }
        }
        let max_bid = bids.values().copied().fold(ZERO, Money::max);
        let floor = max_bid * self.config.params.deposit_floor_multiple;
        let deposit = self.deposit_of(participant);
        if deposit < floor {
            return Err(LedgerError::DepositFloor {
                participant,
                deposit,
                floor,
            });
        }
        let commitment = bid_commitment(&bids, &salt);
        self.log.append(
            self.round,
            EventPayload::BidSubmitted {
                participant,
                commitment,
            },
        );
        self.sealed_bids.insert(
            participant,
            SealedBid {
                commitment,
                bids: Some(bids),
                salt: Some(salt),
            },
        );
        Ok(())
    }

    fn revealed_profile(&self) -> Result<Profile, LedgerError> {
        let mut profile = Profile::new();
        for (&participant, sealed) in &self.sealed_bids {
            let bids = sealed.bids.as_ref().ok_or_else(|| {
                LedgerError::Internal(format!("sealed bid of {participant} has no plaintext"))
            })?;
            profile.add_participant(participant);
            for (&model, &amount) in bids {
                profile
                    .set(participant, model, amount)
                    .map_err(MechanismError::Profile)?;
            }
        }
        Ok(profile)
    }

    /// Runs the auction once every expected bid is in. Missing bids abort
    /// the round: deposits are refunded, an aborted Settled event is logged,
    /// and the round closes.
    pub fn run_selection(&mut self) -> Result<&AuctionOutcome, LedgerError> {
        self.require_phase(Phase::Bidding, "run_selection")?;
        let missing: Vec<ParticipantId> = self
            .config
            .participants
            .iter()
            .copied()
            .filter(|p| !self.sealed_bids.contains_key(p))
            .collect();
        if !missing.is_empty() {
            let reveals = self.collect_reveals();
            self.log.append(
                self.round,
                EventPayload::Settled {
                    aborted: true,
                    result: SettlementResult::default(),
                    reveals,
                },
            );
            self.apply_abort();
            return Err(LedgerError::RoundAborted { missing });
        }

        self.phase = Phase::Selection;
        let bids = self.revealed_profile()?;
        let schedule =
            settlement::payment_schedule(&bids, &self.proposals, &self.config.policy, self.round)?;
        let outcome = mechanism::run_auction(&bids, &self.proposals, &schedule)?;
        self.log.append(
            self.round,
            EventPayload::ModelSelected {
                outcome: outcome.clone(),
            },
        );
        self.schedule = Some(schedule);
        self.apply_outcome(outcome);
        Ok(self.outcome.as_ref().expect("outcome just set"))
    }

    fn apply_outcome(&mut self, outcome: AuctionOutcome) {
        self.phase = if outcome.selected.is_some() {
            Phase::Training
        } else {
            Phase::Settlement
        };
        self.outcome = Some(outcome);
    }

    fn apply_abort(&mut self) {
        self.refund_deposits();
        self.phase = Phase::Closed;
    }

    fn refund_deposits(&mut self) {
        for (participant, deposit) in self.deposits.iter_mut() {
            *self.balances.get_mut(participant).expect("registered") += *deposit;
            *deposit = ZERO;
        }
    }

    /// Stores the winner's training report. The report must cover every
    /// registered station.
    pub fn record_training(
        &mut self,
        reporter: ParticipantId,
        report: TrainingReport,
    ) -> Result<(), LedgerError> {
        self.require_phase(Phase::Training, "record_training")?;
        let winner = self.winner().ok_or(LedgerError::NoOutcome)?;
        if reporter != winner {
            return Err(LedgerError::NotWinner { winner, reporter });
        }
        for station in self
            .config
            .participants
            .iter()
            .filter(|p| p.role == Role::BaseStation)
        {
            if !report.station_contribution.contains_key(station) {
                return Err(LedgerError::IncompleteReport(*station));
            }
        }
        self.log.append(
            self.round,
            EventPayload::TrainingReported {
                reporter,
                report: report.clone(),
            },
        );
        self.apply_report(report);
        Ok(())
    }

    fn apply_report(&mut self, report: TrainingReport) {
        self.report = Some(report);
        self.phase = Phase::Evaluation;
        // With nobody eligible to vote the evaluation is vacuous.
        if self.eligible_voters().is_empty() {
            self.phase = Phase::Settlement;
        }
    }

    fn eligible_voters(&self) -> Vec<ParticipantId> {
        let winner = self.winner();
        self.config
            .participants
            .iter()
            .copied()
            .filter(|p| p.role == Role::ModelOwner && Some(*p) != winner)
            .collect()
    }

    /// One punishment vote per non-winner owner. Once all have voted, a
    /// strict majority of "punish" marks the winner for forfeiture at
    /// settlement.
    pub fn cast_punishment_vote(
        &mut self,
        voter: ParticipantId,
        punish: bool,
    ) -> Result<(), LedgerError> {
        self.require_phase(Phase::Evaluation, "cast_punishment_vote")?;
        self.require_participant(voter)?;
        if voter.role != Role::ModelOwner {
            return Err(LedgerError::StationCannotVote(voter));
        }
        if Some(voter) == self.winner() {
            return Err(LedgerError::WinnerCannotVote);
        }
        if self.votes.contains_key(&voter) {
            return Err(LedgerError::AlreadyVoted(voter));
        }
        self.log
            .append(self.round, EventPayload::VoteCast { voter, punish });
        self.apply_vote(voter, punish);
        Ok(())
    }

    fn apply_vote(&mut self, voter: ParticipantId, punish: bool) {
        self.votes.insert(voter, punish);
        let voters = self.eligible_voters();
        if self.votes.len() == voters.len() {
            let ayes = self.votes.values().filter(|&&v| v).count();
            self.punished = ayes * 2 > voters.len();
            self.phase = Phase::Settlement;
        }
    }

    /// Executes all transfers for the round: owners pay their pool share and
    /// tax (less any recycle rebate) out of escrow, stations collect rewards
    /// (plus any recycle bonus, less tax), a punished winner forfeits part of
    /// its escrow to the other owners, this round's taxes become the next
    /// pools, and remaining escrow is refunded as the round closes.
    pub fn settle(&mut self) -> Result<&SettlementResult, LedgerError> {
        self.require_phase(Phase::Settlement, "settle")?;
        let outcome = self.outcome.clone().ok_or(LedgerError::NoOutcome)?;
        let bids = self.revealed_profile()?;
        let contributions = match (&self.config.policy.allocation, &self.report) {
            (settlement::Allocation::ByContribution, Some(report)) => {
                Some(report.station_contribution.clone())
            }
            _ => None,
        };
        let result = settlement::settle_round(
            &outcome,
            &bids,
            &self.config.policy,
            contributions.as_ref(),
            self.owner_pool,
            self.station_pool,
        )?;
        if !settlement::verify_budget_balance(&result) {
            return Err(LedgerError::Internal(
                "settlement failed budget-balance check".into(),
            ));
        }

        // Forfeit is computed against the escrow as it stands entering
        // settlement, before any debits.
        let forfeit_plan = self.forfeit_plan()?;

        let reveals = self.collect_reveals();
        self.log.append(
            self.round,
            EventPayload::Settled {
                aborted: false,
                result: result.clone(),
                reveals,
            },
        );
        let overdrafts = self.apply_settlement(&result);
        for (participant, shortfall) in overdrafts {
            self.log.append(
                self.round,
                EventPayload::Punished {
                    participant,
                    forfeited: shortfall,
                    redistributed: BTreeMap::new(),
                },
            );
        }
        if let Some(plan) = forfeit_plan {
            self.log.append(
                self.round,
                EventPayload::Punished {
                    participant: plan.winner,
                    forfeited: plan.forfeited,
                    redistributed: plan.redistributed.clone(),
                },
            );
            self.apply_forfeit(plan.winner, plan.forfeited, &plan.redistributed);
        }
        let (owner_pool, station_pool) = (result.owner_tax_total(), result.station_tax_total());
        self.log.append(
            self.round,
            EventPayload::TaxRecycled {
                owner_pool,
                station_pool,
            },
        );
        self.apply_recycle(owner_pool, station_pool);

        if !self.holdings_conserved() {
            return Err(LedgerError::Internal(
                "holdings not conserved after settlement".into(),
            ));
        }
        Ok(self.settlement.as_ref().expect("settlement just set"))
    }

    fn forfeit_plan(&self) -> Result<Option<ForfeitPlan>, LedgerError> {
        if !self.punished {
            return Ok(None);
        }
        let winner = self.winner().ok_or(LedgerError::NoOutcome)?;
        let escrow = self.deposit_of(winner);
        let forfeited = Money::gwei(
            escrow.raw() * self.config.params.forfeit_numerator
                / self.config.params.forfeit_denominator,
        );
        let beneficiaries = self.eligible_voters();
        if forfeited <= ZERO || beneficiaries.is_empty() {
            return Ok(None);
        }
        let redistributed = settlement::allocate_shares(forfeited, &beneficiaries, None)?;
        Ok(Some(ForfeitPlan {
            winner,
            forfeited,
            redistributed,
        }))
    }

    /// Applies the settlement's net flow for every participant. Outflows
    /// come out of escrow; if the escrow cannot cover them the remainder
    /// overdraws the external balance and the shortfall is reported for a
    /// Punished record ("never silently under-pay").
    fn apply_settlement(&mut self, result: &SettlementResult) -> Vec<(ParticipantId, Money)> {
        let mut overdrafts = Vec::new();
        for &participant in &self.config.participants.clone() {
            let tax = result.taxes.get(&participant).copied().unwrap_or(ZERO);
            let flow = match participant.role {
                Role::ModelOwner => {
                    let share = result
                        .owner_shares
                        .get(&participant)
                        .copied()
                        .unwrap_or(ZERO);
                    let rebate = result
                        .owner_rebates
                        .get(&participant)
                        .copied()
                        .unwrap_or(ZERO);
                    rebate - share - tax
                }
                Role::BaseStation => {
                    let reward = result
                        .station_rewards
                        .get(&participant)
                        .copied()
                        .unwrap_or(ZERO);
                    let bonus = result
                        .station_bonuses
                        .get(&participant)
                        .copied()
                        .unwrap_or(ZERO);
                    reward + bonus - tax
                }
            };
            if flow >= ZERO {
                *self.balances.get_mut(&participant).expect("registered") += flow;
            } else {
                let owed = -flow;
                let escrow = self.deposit_of(participant);
                if owed <= escrow {
                    *self.deposits.get_mut(&participant).expect("registered") -= owed;
                } else {
                    let shortfall = owed - escrow;
                    *self.deposits.get_mut(&participant).expect("registered") = ZERO;
                    *self.balances.get_mut(&participant).expect("registered") -= shortfall;
                    overdrafts.push((participant, shortfall));
                }
            }
        }
        self.settlement = Some(result.clone());
        overdrafts
    }

    fn apply_forfeit(
        &mut self,
        winner: ParticipantId,
        forfeited: Money,
        redistributed: &BTreeMap<ParticipantId, Money>,
    ) {
        *self.deposits.get_mut(&winner).expect("registered") -= forfeited;
        for (beneficiary, amount) in redistributed {
            *self.balances.get_mut(beneficiary).expect("registered") += *amount;
        }
    }

    fn apply_recycle(&mut self, owner_pool: Money, station_pool: Money) {
        self.owner_pool = owner_pool;
        self.station_pool = station_pool;
        self.phase = Phase::Recycle;
        // Closing is unconditional once taxes are pooled.
        self.refund_deposits();
        self.phase = Phase::Closed;
    }

    fn collect_reveals(&self) -> Vec<BidReveal> {
        self.sealed_bids
            .iter()
            .filter_map(|(&participant, sealed)| {
                Some(BidReveal {
                    participant,
                    bids: sealed.bids.clone()?,
                    salt: sealed.salt?,
                })
            })
            .collect()
    }

    // --- views ---

    /// What one participant is allowed to observe. Before the round settles
    /// no other participant's plaintext bid is visible, only commitments.
    pub fn view(&self, viewer: ParticipantId) -> ParticipantView {
        let settled = self.settlement.is_some();
        let proposals = self
            .proposals
            .iter()
            .map(|p| ProposalView::project(p, viewer))
            .collect();
        let revealed_bids = if settled {
            Some(
                self.sealed_bids
                    .iter()
                    .filter_map(|(&p, s)| Some((p, s.bids.clone()?)))
                    .collect(),
            )
        } else {
            None
        };
        ParticipantView {
            phase: self.phase,
            round: self.round,
            own_balance: self.balance(viewer),
            own_deposit: self.deposit_of(viewer),
            proposals,
            own_bid: self.sealed_bids.get(&viewer).and_then(|s| s.bids.clone()),
            bid_commitments: self
                .sealed_bids
                .iter()
                .map(|(&p, s)| (p, s.commitment))
                .collect(),
            selected: self.outcome.as_ref().and_then(|o| o.selected),
            winner: self.winner(),
            revealed_bids,
            outcome: if settled { self.outcome.clone() } else { None },
            report: self.report.clone(),
            settlement: self.settlement.clone(),
        }
    }

    // --- replay ---

    /// Reconstructs the contract state from a recorded log. The hash chain
    /// is verified first (naming the first bad sequence), commitments are
    /// checked against the reveals, and the recorded auction outcome is
    /// re-derived from the revealed bids.
    pub fn replay(config: LedgerConfig, log: &EventLog) -> Result<Ledger, LedgerError> {
        log.verify_chain()?;
        let mut ledger = Ledger::new(config);
        for event in log.events() {
            ledger.replay_event(event)?;
        }
        ledger.log = log.clone();
        Ok(ledger)
    }

    fn replay_event(&mut self, event: &Event) -> Result<(), LedgerError> {
        // A new round number fast-forwards the lifecycle; phase transitions
        // themselves leave no events.
        if event.round == self.round + 1
            && (self.phase == Phase::Setup || self.phase == Phase::Closed)
        {
            self.apply_open_round();
        }
        if event.round != self.round {
            return Err(LedgerError::ReplayDivergence {
                what: "round number",
                sequence: event.sequence,
            });
        }
        match &event.payload {
            EventPayload::Deposited {
                participant,
                amount,
            } => {
                self.apply_deposit(*participant, *amount);
            }
            EventPayload::Proposed { proposal } => {
                if self.phase == Phase::Deposit {
                    self.phase = Phase::Proposal;
                }
                self.apply_proposal(proposal.clone());
            }
            EventPayload::BidSubmitted {
                participant,
                commitment,
            } => {
                if self.phase == Phase::Proposal {
                    self.phase = Phase::Bidding;
                }
                self.sealed_bids.insert(
                    *participant,
                    SealedBid {
                        commitment: *commitment,
                        bids: None,
                        salt: None,
                    },
                );
            }
            EventPayload::ModelSelected { outcome } => {
                self.apply_outcome(outcome.clone());
            }
            EventPayload::TrainingReported {
                reporter: _,
                report,
            } => {
                self.apply_report(report.clone());
            }
            EventPayload::VoteCast { voter, punish } => {
                self.apply_vote(*voter, *punish);
            }
            EventPayload::Settled {
                aborted,
                result,
                reveals,
            } => {
                self.apply_reveals(reveals, event.sequence)?;
                if *aborted {
                    self.apply_abort();
                } else {
                    self.verify_recorded_outcome(event.sequence)?;
                    self.apply_settlement(result);
                }
            }
            EventPayload::Punished {
                participant,
                forfeited,
                redistributed,
            } => {
                // Overdraft records carry no transfer; forfeits do.
                if !redistributed.is_empty() {
                    self.apply_forfeit(*participant, *forfeited, redistributed);
                }
            }
            EventPayload::TaxRecycled {
                owner_pool,
                station_pool,
            } => {
                self.apply_recycle(*owner_pool, *station_pool);
            }
        }
        Ok(())
    }

    fn apply_reveals(&mut self, reveals: &[BidReveal], sequence: u64) -> Result<(), LedgerError> {
        for reveal in reveals {
            let sealed = self.sealed_bids.get_mut(&reveal.participant).ok_or(
                LedgerError::ReplayDivergence {
                    what: "revealed participant",
                    sequence,
                },
            )?;
            if bid_commitment(&reveal.bids, &reveal.salt) != sealed.commitment {
                return Err(LedgerError::ReplayDivergence {
                    what: "bid commitment",
                    sequence,
                });
            }
            sealed.bids = Some(reveal.bids.clone());
            sealed.salt = Some(reveal.salt);
        }
        Ok(())
    }

    /// With the plaintext bids in hand, re-run the auction and check it
    /// produced exactly the recorded outcome.
    fn verify_recorded_outcome(&mut self, sequence: u64) -> Result<(), LedgerError> {
        let recorded = match &self.outcome {
            Some(o) => o.clone(),
            None => {
                return Err(LedgerError::ReplayDivergence {
                    what: "missing outcome",
                    sequence,
                })
            }
        };
        let bids = self.revealed_profile()?;
        let schedule =
            settlement::payment_schedule(&bids, &self.proposals, &self.config.policy, self.round)?;
        let outcome = mechanism::run_auction(&bids, &self.proposals, &schedule)?;
        if outcome != recorded {
            return Err(LedgerError::ReplayDivergence {
                what: "auction outcome",
                sequence,
            });
        }
        self.schedule = Some(schedule);
        Ok(())
    }
}

/// Role-projected proposal: owners learn the promised accuracy and target
/// set, stations learn the size, rounds, and cost characteristics. The
/// proposer sees its own submission in full.
#[derive(Clone, PartialEq, Debug, Serialize)]
pub struct ProposalView {
    pub model_id: ModelId,
    pub owner: ParticipantId,
    pub expected_accuracy: Option<f64>,
    pub target_labels: Option<BTreeSet<u32>>,
    pub param_size: Option<u64>,
    pub rounds: Option<u32>,
    pub characteristics: Option<u64>,
}

impl ProposalView {
    fn project(proposal: &ModelProposal, viewer: ParticipantId) -> ProposalView {
        let own = proposal.owner == viewer;
        let owner_side = viewer.role == Role::ModelOwner;
        ProposalView {
            model_id: proposal.model_id,
            owner: proposal.owner,
            expected_accuracy: (own || owner_side).then_some(proposal.expected_accuracy),
            target_labels: (own || owner_side).then(|| proposal.target_labels.clone()),
            param_size: (own || !owner_side).then_some(proposal.param_size),
            rounds: (own || !owner_side).then_some(proposal.rounds),
            characteristics: (own || !owner_side).then_some(proposal.characteristics),
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize)]
pub struct ParticipantView {
    pub phase: Phase,
    pub round: u32,
    pub own_balance: Money,
    pub own_deposit: Money,
    pub proposals: Vec<ProposalView>,
    pub own_bid: Option<BTreeMap<ModelId, Money>>,
    pub bid_commitments: BTreeMap<ParticipantId, EventHash>,
    pub selected: Option<ModelId>,
    pub winner: Option<ParticipantId>,
    /// Present only after the round has settled.
    pub revealed_bids: Option<BTreeMap<ParticipantId, BTreeMap<ModelId, Money>>>,
    pub outcome: Option<AuctionOutcome>,
    pub report: Option<TrainingReport>,
    pub settlement: Option<SettlementResult>,
}

#[cfg(test)]
mod tests;
