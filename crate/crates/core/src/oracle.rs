//! Independent brute-force verifier for the mechanism's incentive
//! properties.
//!
//! The oracle re-derives everything (welfare, selection, payment shares,
//! group surpluses, taxes, utilities) from raw sums, without calling into
//! the mechanism under test, then (a) cross-checks the mechanism's outputs
//! at the truthful point on every instance, and (b) exhaustively searches an
//! integer bid grid for profitable deviations.
//!
//! Deviation utilities are evaluated against the payment plan frozen at the
//! participant-truthful profile (deterministic midpoint pool, equal split):
//! the plan a participant faces is a function of the candidate model, not of
//! its own claim, which is exactly the premise that makes truthful bidding
//! weakly dominant.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mechanism::{self, AuctionOutcome, MechanismError};
use crate::money::{Money, ZERO};
use crate::rng;
use crate::scenario::Scenario;
use crate::settlement::{self, PaymentPolicy, SettlementError};
use crate::sim::{self, SimError};
use crate::types::{ModelId, ModelProposal, ParticipantId, Profile, ProfileError, Role};

#[derive(Error, Debug)]
pub enum OracleError {
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Settlement(#[from] SettlementError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("oracle and mechanism disagree on instance {instance} for {participant}: {what}")]
    Disagreement {
        instance: u64,
        participant: ParticipantId,
        what: String,
    },
    #[error("unknown participant {0}")]
    UnknownParticipant(ParticipantId),
}

/// A self-contained market: proposals, everybody's true magnitudes, and the
/// claims the non-deviating participants submit.
#[derive(Clone, PartialEq, Debug)]
pub struct Instance {
    pub id: u64,
    pub models: Vec<ModelProposal>,
    pub valuations: Profile,
    pub bids: Profile,
}

/// Classification of one (participant, deviation) pair,
/// judged on the truthful market: whether a model is selected, whether the
/// participant is tax-liable, and which way the deviation pushes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum CaseLabel {
    /// Not tax-liable, a model selected; the deviation withdraws support
    /// from it (or changes nothing).
    Case1,
    /// Tax-liable, a model selected; the deviation withdraws support.
    Case2,
    /// Tax-liable, a model selected; the deviation pushes an alternative.
    Case3,
    /// Not tax-liable, a model selected; the deviation pushes an
    /// alternative.
    Case4,
    /// Nothing selected; the deviation forces a model through.
    Case5,
    /// Nothing selected and the deviation leaves it that way.
    NoPilotNoChoice,
}

impl CaseLabel {
    pub const ALL: [CaseLabel; 6] = [
        CaseLabel::Case1,
        CaseLabel::Case2,
        CaseLabel::Case3,
        CaseLabel::Case4,
        CaseLabel::Case5,
        CaseLabel::NoPilotNoChoice,
    ];
}

/// Result of the exhaustive deviation search for one participant.
#[derive(Clone, PartialEq, Debug)]
pub struct DeviationReport {
    pub instance_id: u64,
    pub participant: ParticipantId,
    pub truthful_utility: Money,
    pub best_deviation_utility: Money,
    pub best_deviation_bids: BTreeMap<ModelId, Money>,
    pub violated: bool,
    /// Classification of the best deviation found.
    pub case_label: CaseLabel,
    /// Grid deviations evaluated (the truthful point included).
    pub deviations: u64,
    /// Deviations tying the truthful utility exactly. Dominance is asserted
    /// in its weak form; ties are recorded, never failed.
    pub ties: u64,
    pub case_counts: BTreeMap<CaseLabel, u64>,
    /// Deviations whose case-specific inequality failed (must stay zero).
    pub case_inequality_failures: u64,
}

/// Everything the grid scan needs, precomputed from raw sums with the
/// payment plan frozen at the participant-truthful profile. Vectors are
/// indexed by the instance's model order (ascending id).
struct Tables {
    model_ids: Vec<ModelId>,
    /// Welfare of each model excluding the scanned participant's claim.
    welfare_others: Vec<i64>,
    /// Frozen surplus of the participant's side-mates under each model.
    surplus_others: Vec<i64>,
    /// Frozen own net gain under each model (value minus share for owners,
    /// reward minus cost for stations).
    own_gain: Vec<i64>,
    /// max(0, max surplus_others): the side-mates' best outcome, with
    /// no-trade worth zero.
    best_surplus: i64,
    /// +1 if the participant's claim adds to welfare (owner), -1 if it
    /// subtracts (station).
    welfare_sign: i64,
    truth: Vec<i64>,
}

impl Tables {
    fn build(instance: &Instance, participant: ParticipantId) -> Result<Tables, OracleError> {
        if !instance.bids.contains(participant) {
            return Err(OracleError::UnknownParticipant(participant));
        }
        let profile = truth_profile(instance, participant)?;
        let owners: Vec<ParticipantId> = profile.side(Role::ModelOwner).collect();
        let stations: Vec<ParticipantId> = profile.side(Role::BaseStation).collect();

        let mut model_ids = Vec::new();
        let mut welfare_others = Vec::new();
        let mut surplus_others = Vec::new();
        let mut own_gain = Vec::new();
        let mut truth = Vec::new();

        let mut sorted_models: Vec<ModelId> = instance.models.iter().map(|m| m.model_id).collect();
        sorted_models.sort();

        for &model in &sorted_models {
            let own_truth = instance.valuations.amount(participant, model)?.raw();
            let side_sum = |side: &[ParticipantId]| -> Result<i64, OracleError> {
                let mut total = 0i64;
                for &p in side {
                    total += profile.amount(p, model)?.raw();
                }
                Ok(total)
            };
            let owners_total = side_sum(&owners)?;
            let stations_total = side_sum(&stations)?;

            // Frozen plan: midpoint pool, equal split with the remainder
            // going one unit at a time down the ascending id order.
            let pool = (owners_total + stations_total).div_euclid(2);
            let share_of = |members: &[ParticipantId], target: ParticipantId| -> i64 {
                let n = members.len() as i64;
                let base = pool.div_euclid(n);
                let rem = pool.rem_euclid(n);
                let position = members.iter().position(|&p| p == target).expect("member") as i64;
                base + i64::from(position < rem)
            };

            let (own, others): (i64, i64) = match participant.role {
                Role::ModelOwner => {
                    let own = own_truth - share_of(&owners, participant);
                    let mut others = 0i64;
                    for &j in owners.iter().filter(|&&j| j != participant) {
                        others += profile.amount(j, model)?.raw() - share_of(&owners, j);
                    }
                    (own, others)
                }
                Role::BaseStation => {
                    let own = share_of(&stations, participant) - own_truth;
                    let mut others = 0i64;
                    for &j in stations.iter().filter(|&&j| j != participant) {
                        others += share_of(&stations, j) - profile.amount(j, model)?.raw();
                    }
                    (own, others)
                }
            };

            let own_claim = profile.amount(participant, model)?.raw();
            let signed_own = match participant.role {
                Role::ModelOwner => own_claim,
                Role::BaseStation => -own_claim,
            };
            model_ids.push(model);
            welfare_others.push(owners_total - stations_total - signed_own);
            surplus_others.push(others);
            own_gain.push(own);
            truth.push(own_truth);
        }

        let best_surplus = surplus_others.iter().copied().fold(0i64, i64::max);
        Ok(Tables {
            model_ids,
            welfare_others,
            surplus_others,
            own_gain,
            best_surplus,
            welfare_sign: match participant.role {
                Role::ModelOwner => 1,
                Role::BaseStation => -1,
            },
            truth,
        })
    }

    /// Selection by welfare argmax (positive only, smallest id wins ties)
    /// and the resulting utility under the frozen plan.
    fn evaluate(&self, bid: &[i64]) -> (Option<usize>, i64) {
        let mut selected: Option<(usize, i64)> = None;
        for (k, &own) in bid.iter().enumerate() {
            let welfare = self.welfare_others[k] + self.welfare_sign * own;
            if welfare <= 0 {
                continue;
            }
            // Ascending id order makes "first strict max" the tie-break.
            if selected.is_none_or(|(_, best)| welfare > best) {
                selected = Some((k, welfare));
            }
        }
        match selected {
            Some((k, _)) => {
                let tax = self.best_surplus - self.surplus_others[k];
                (Some(k), self.own_gain[k] - tax)
            }
            None => (None, -self.best_surplus),
        }
    }

    fn truthful_selection(&self) -> (Option<usize>, i64) {
        self.evaluate(&self.truth)
    }

    fn tax_liable_at_truth(&self) -> bool {
        let (selected, _) = self.truthful_selection();
        let current = selected.map(|k| self.surplus_others[k]).unwrap_or(0);
        self.best_surplus > current
    }
}

/// The instance's bids with the scanned participant's claims replaced by its
/// true magnitudes.
fn truth_profile(instance: &Instance, participant: ParticipantId) -> Result<Profile, OracleError> {
    let mut profile = instance.bids.clone();
    for model in &instance.models {
        let v = instance.valuations.amount(participant, model.model_id)?;
        profile.set(participant, model.model_id, v)?;
    }
    Ok(profile)
}

fn classify(
    tables: &Tables,
    truth_selected: Option<usize>,
    liable: bool,
    bid: &[i64],
    deviation_selected: Option<usize>,
) -> CaseLabel {
    match truth_selected {
        None => {
            if deviation_selected.is_some() {
                CaseLabel::Case5
            } else {
                CaseLabel::NoPilotNoChoice
            }
        }
        Some(selected) => {
            // "Withdrawing support" is role-relative: owners lower their
            // claim on the selected model, stations raise theirs.
            let withdraws = match tables.welfare_sign {
                1 => bid[selected] < tables.truth[selected],
                _ => bid[selected] > tables.truth[selected],
            };
            let boosts_alternative =
                bid.iter()
                    .zip(&tables.truth)
                    .enumerate()
                    .any(|(k, (&claim, &truth))| {
                        k != selected
                            && match tables.welfare_sign {
                                1 => claim > truth,
                                _ => claim < truth,
                            }
                    });
            match (withdraws, boosts_alternative, liable) {
                (true, _, false) => CaseLabel::Case1,
                (true, _, true) => CaseLabel::Case2,
                (false, true, true) => CaseLabel::Case3,
                (false, true, false) => CaseLabel::Case4,
                // Supportive or no-op deviations sit in the trivial branch
                // of the same two cases.
                (false, false, false) => CaseLabel::Case1,
                (false, false, true) => CaseLabel::Case2,
            }
        }
    }
}

/// Classifies one concrete deviation on the truthful market.
pub fn classify_case(
    instance: &Instance,
    participant: ParticipantId,
    deviation: &BTreeMap<ModelId, Money>,
) -> Result<CaseLabel, OracleError> {
    let tables = Tables::build(instance, participant)?;
    let bid: Vec<i64> = tables
        .model_ids
        .iter()
        .map(|m| deviation.get(m).copied().unwrap_or(ZERO).raw())
        .collect();
    let (truth_selected, _) = tables.truthful_selection();
    let liable = tables.tax_liable_at_truth();
    let (deviation_selected, _) = tables.evaluate(&bid);
    Ok(classify(
        &tables,
        truth_selected,
        liable,
        &bid,
        deviation_selected,
    ))
}

/// Exhaustively evaluates every integer bid vector on
/// [0, 2 * max valuation]^models (stepped by `grid_step`) for one
/// participant, holding everyone else's claims fixed. Also cross-checks the
/// mechanism pipeline at the truthful point and verifies the per-case
/// inequalities along the way.
pub fn check_weak_dominance(
    instance: &Instance,
    participant: ParticipantId,
    grid_step: i64,
) -> Result<DeviationReport, OracleError> {
    assert!(grid_step >= 1);
    let tables = Tables::build(instance, participant)?;
    cross_check_truth(instance, participant, &tables)?;

    let (truth_selected, truthful_utility) = tables.truthful_selection();
    let liable = tables.tax_liable_at_truth();

    let grid_hi = 2 * max_valuation(instance);
    let n_models = tables.model_ids.len();
    let mut bid = vec![0i64; n_models];
    let mut best_utility = i64::MIN;
    let mut best_bid = bid.clone();
    let mut best_label = CaseLabel::NoPilotNoChoice;
    let mut deviations = 0u64;
    let mut ties = 0u64;
    let mut case_counts: BTreeMap<CaseLabel, u64> = BTreeMap::new();
    let mut case_inequality_failures = 0u64;

    'scan: loop {
        let (selected, utility) = tables.evaluate(&bid);
        deviations += 1;
        if utility == truthful_utility && bid != tables.truth {
            ties += 1;
        }

        let label = classify(&tables, truth_selected, liable, &bid, selected);
        *case_counts.entry(label).or_insert(0) += 1;
        let inequality_holds = match label {
            // Honest utility weakly dominates in every selected-market case.
            CaseLabel::Case1 | CaseLabel::Case2 | CaseLabel::Case3 | CaseLabel::Case4 => {
                utility <= truthful_utility
            }
            // Forcing a model through a dead market never pays.
            CaseLabel::Case5 => utility <= 0 && utility <= truthful_utility,
            // Leaving a dead market dead changes nothing.
            CaseLabel::NoPilotNoChoice => utility == truthful_utility,
        };
        if !inequality_holds {
            case_inequality_failures += 1;
        }

        if utility > best_utility {
            best_utility = utility;
            best_bid = bid.clone();
            best_label = label;
        }

        // Odometer over the grid.
        for slot in bid.iter_mut() {
            *slot += grid_step;
            if *slot <= grid_hi {
                continue 'scan;
            }
            *slot = 0;
        }
        break;
    }

    Ok(DeviationReport {
        instance_id: instance.id,
        participant,
        truthful_utility: Money::gwei(truthful_utility),
        best_deviation_utility: Money::gwei(best_utility),
        best_deviation_bids: tables
            .model_ids
            .iter()
            .copied()
            .zip(best_bid.iter().map(|&b| Money::gwei(b)))
            .collect(),
        violated: best_utility > truthful_utility,
        case_label: best_label,
        deviations,
        ties,
        case_counts,
        case_inequality_failures,
    })
}

fn max_valuation(instance: &Instance) -> i64 {
    instance
        .valuations
        .participants()
        .map(|p| instance.valuations.max_magnitude(p).raw())
        .max()
        .unwrap_or(0)
        .max(1)
}

/// Two-implementation agreement: at the truthful point the mechanism and
/// settlement pipeline must reproduce the oracle's selection, welfare, tax,
/// and utility exactly.
fn cross_check_truth(
    instance: &Instance,
    participant: ParticipantId,
    tables: &Tables,
) -> Result<(), OracleError> {
    let disagree = |what: String| OracleError::Disagreement {
        instance: instance.id,
        participant,
        what,
    };

    let profile = truth_profile(instance, participant)?;
    let schedule =
        settlement::payment_schedule(&profile, &instance.models, &PaymentPolicy::default(), 0)?;
    let outcome = mechanism::run_auction(&profile, &instance.models, &schedule)?;

    for (k, &model) in tables.model_ids.iter().enumerate() {
        let own_truth_signed = tables.welfare_sign * tables.truth[k];
        let oracle_welfare = tables.welfare_others[k] + own_truth_signed;
        let mechanism_welfare = outcome.welfare[&model].raw();
        if oracle_welfare != mechanism_welfare {
            return Err(disagree(format!(
                "welfare of {model}: oracle {oracle_welfare}, mechanism {mechanism_welfare}"
            )));
        }
    }

    let (oracle_selected, oracle_utility) = tables.truthful_selection();
    let oracle_selected_id = oracle_selected.map(|k| tables.model_ids[k]);
    if oracle_selected_id != outcome.selected {
        return Err(disagree(format!(
            "selection: oracle {oracle_selected_id:?}, mechanism {:?}",
            outcome.selected
        )));
    }

    let oracle_tax = match oracle_selected {
        Some(k) => tables.best_surplus - tables.surplus_others[k],
        None => tables.best_surplus,
    };
    let mechanism_tax = outcome.taxes[&participant].raw();
    if oracle_tax != mechanism_tax {
        return Err(disagree(format!(
            "tax: oracle {oracle_tax}, mechanism {mechanism_tax}"
        )));
    }

    let mut truths = Profile::new();
    for p in instance.valuations.participants() {
        truths.add_participant(p);
    }
    for model in &instance.models {
        for p in instance.valuations.participants() {
            truths.set(
                p,
                model.model_id,
                instance.valuations.amount(p, model.model_id)?,
            )?;
        }
    }
    let mechanism_utility = mechanism::utility(participant, &outcome, &truths)?.raw();
    if oracle_utility != mechanism_utility {
        return Err(disagree(format!(
            "utility: oracle {oracle_utility}, mechanism {mechanism_utility}"
        )));
    }
    Ok(())
}

/// Independent consistency check of a full auction outcome against an
/// instance: welfare sums, selection, pilot/tax structure, and payment
/// conservation, all recomputed from scratch. Used by the verification CLI
/// and by mutation tests.
pub fn verify_outcome(instance: &Instance, outcome: &AuctionOutcome) -> Result<(), OracleError> {
    let disagree = |participant: ParticipantId, what: String| OracleError::Disagreement {
        instance: instance.id,
        participant,
        what,
    };
    for participant in instance.bids.participants() {
        let tables = Tables::build_from_bids(instance, participant)?;
        let (selected, _) = tables.truthful_selection();
        let selected_id = selected.map(|k| tables.model_ids[k]);
        if selected_id != outcome.selected {
            return Err(disagree(
                participant,
                format!(
                    "selection: oracle {selected_id:?}, outcome {:?}",
                    outcome.selected
                ),
            ));
        }
        let expected_tax = match selected {
            Some(k) => tables.best_surplus - tables.surplus_others[k],
            None => tables.best_surplus,
        };
        let recorded = outcome
            .taxes
            .get(&participant)
            .copied()
            .unwrap_or(ZERO)
            .raw();
        if recorded != expected_tax {
            return Err(disagree(
                participant,
                format!("tax: oracle {expected_tax}, outcome {recorded}"),
            ));
        }
        if recorded < 0 {
            return Err(disagree(participant, format!("negative tax {recorded}")));
        }
    }
    // Conservation through the pool.
    if outcome.selected.is_some() {
        let side_total = |role: Role| -> Money {
            outcome
                .payments
                .iter()
                .filter(|(p, _)| p.role == role)
                .map(|(_, m)| *m)
                .sum()
        };
        if side_total(Role::ModelOwner) != outcome.total_payment
            || side_total(Role::BaseStation) != outcome.total_payment
        {
            return Err(disagree(
                ParticipantId::owner(0),
                "payments do not conserve through the pool".into(),
            ));
        }
    }
    Ok(())
}

impl Tables {
    /// Like [`Tables::build`] but with the participant's claims left as bid,
    /// for checking recorded outcomes rather than truthful play.
    fn build_from_bids(
        instance: &Instance,
        participant: ParticipantId,
    ) -> Result<Tables, OracleError> {
        let mut shadow = instance.clone();
        // Point the valuations at the claims so the frozen profile is the
        // as-bid market.
        shadow.valuations = instance.bids.clone();
        Tables::build(&shadow, participant)
    }
}

// --- randomized matrix ---

/// Bounds for the randomized instance generator.
#[derive(Clone, Copy, Debug)]
pub struct InstanceBounds {
    pub max_models: u32,
    pub max_owners: u32,
    pub max_stations: u32,
    pub max_valuation: i64,
    /// Probability that a non-scanned participant bids truthfully rather
    /// than an arbitrary claim.
    pub truthful_bid_prob: f64,
}

impl Default for InstanceBounds {
    fn default() -> Self {
        InstanceBounds {
            max_models: 3,
            max_owners: 4,
            max_stations: 4,
            max_valuation: 20,
            truthful_bid_prob: 0.5,
        }
    }
}

pub fn random_instance(id: u64, bounds: &InstanceBounds, rng: &mut ChaCha12Rng) -> Instance {
    let n_models = rng.gen_range(1..=bounds.max_models);
    let n_owners = rng.gen_range(1..=bounds.max_owners);
    let n_stations = rng.gen_range(1..=bounds.max_stations);

    let models: Vec<ModelProposal> = (0..n_models)
        .map(|i| {
            let mut proposal = crate::fixtures::proposal(i, rng.gen_range(0..n_owners));
            proposal.target_labels = [i].into_iter().collect();
            proposal
        })
        .collect();

    let mut valuations = Profile::new();
    let mut bids = Profile::new();
    let participants: Vec<ParticipantId> = (0..n_owners)
        .map(ParticipantId::owner)
        .chain((0..n_stations).map(ParticipantId::station))
        .collect();
    for &p in &participants {
        let truthful = rng.gen_bool(bounds.truthful_bid_prob);
        for model in &models {
            let v = rng.gen_range(0..=bounds.max_valuation);
            let b = if truthful {
                v
            } else {
                rng.gen_range(0..=bounds.max_valuation)
            };
            valuations
                .set(p, model.model_id, Money::gwei(v))
                .expect("nonnegative");
            bids.set(p, model.model_id, Money::gwei(b))
                .expect("nonnegative");
        }
    }
    Instance {
        id,
        models,
        valuations,
        bids,
    }
}

/// One line of the machine-readable verification report. Together with the
/// matrix seed, the id regenerates the instance exactly.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub seed: u64,
    pub id: u64,
    pub participants: u64,
    pub deviations: u64,
    pub violated: bool,
    pub case_counts: BTreeMap<CaseLabel, u64>,
}

/// Aggregate result of scanning a randomized instance matrix.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct MatrixReport {
    pub instances: u64,
    pub participants_checked: u64,
    pub deviations_evaluated: u64,
    pub violations: Vec<String>,
    pub case_counts: BTreeMap<CaseLabel, u64>,
    pub case_inequality_failures: u64,
    pub ties: u64,
    pub disagreements: Vec<String>,
    pub instance_summaries: Vec<InstanceSummary>,
}

impl MatrixReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
            && self.disagreements.is_empty()
            && self.case_inequality_failures == 0
    }

    /// Case coverage over the whole matrix: every case label must have
    /// been generated and classified at least once.
    pub fn covers_all_cases(&self) -> bool {
        CaseLabel::ALL
            .iter()
            .all(|label| self.case_counts.get(label).copied().unwrap_or(0) > 0)
    }
}

/// Runs the full randomized truthfulness matrix: `num_instances` random
/// small markets, every participant of each scanned over the complete
/// integer deviation grid.
pub fn run_matrix(num_instances: u64, seed: u64, grid_step: i64) -> MatrixReport {
    let bounds = InstanceBounds::default();
    let mut report = MatrixReport::default();
    for id in 0..num_instances {
        let mut stream = rng::stream(seed, "oracle-instance", &[id]);
        let instance = random_instance(id, &bounds, &mut stream);
        report.instances += 1;
        let mut summary = InstanceSummary {
            seed,
            id,
            participants: 0,
            deviations: 0,
            violated: false,
            case_counts: BTreeMap::new(),
        };
        let participants: Vec<ParticipantId> = instance.bids.participants().collect();
        for participant in participants {
            match check_weak_dominance(&instance, participant, grid_step) {
                Ok(deviation_report) => {
                    report.participants_checked += 1;
                    report.deviations_evaluated += deviation_report.deviations;
                    report.ties += deviation_report.ties;
                    report.case_inequality_failures += deviation_report.case_inequality_failures;
                    summary.participants += 1;
                    summary.deviations += deviation_report.deviations;
                    for (label, count) in &deviation_report.case_counts {
                        *report.case_counts.entry(*label).or_insert(0) += count;
                        *summary.case_counts.entry(*label).or_insert(0) += count;
                    }
                    if deviation_report.violated {
                        summary.violated = true;
                        report.violations.push(format!(
                            "instance {id}, {participant}: truthful {} < deviation {} at {:?}",
                            deviation_report.truthful_utility,
                            deviation_report.best_deviation_utility,
                            deviation_report.best_deviation_bids,
                        ));
                    }
                }
                Err(e) => report.disagreements.push(e.to_string()),
            }
        }
        report.instance_summaries.push(summary);
    }
    report
}

/// Monte-Carlo estimate of the mean per-round utility of one side of the
/// market, across seeds, for the participation-constraint check.
pub fn estimate_expected_utility(
    scenario: &Scenario,
    role: Role,
    num_seeds: u64,
) -> Result<f64, OracleError> {
    let mut total = 0f64;
    let mut samples = 0u64;
    for s in 0..num_seeds {
        let seeded = Scenario {
            seed: scenario.seed.wrapping_add(s),
            ..scenario.clone()
        };
        let result = sim::run_simulation(&seeded, &BTreeMap::new())?;
        for record in &result.rounds {
            for (p, u) in &record.utilities {
                if p.role == role {
                    total += u.as_f64();
                    samples += 1;
                }
            }
        }
    }
    Ok(if samples == 0 {
        0.0
    } else {
        total / samples as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn ex1_instance() -> Instance {
        let (bids, models) = fixtures::ex1();
        Instance {
            id: 0,
            models,
            valuations: bids.clone(),
            bids,
        }
    }

    #[test]
    fn ex1_truthful_owner_has_no_profitable_deviation() {
        let instance = ex1_instance();
        let report = check_weak_dominance(&instance, ParticipantId::owner(1), 10).unwrap();
        assert!(!report.violated);
        assert_eq!(report.truthful_utility, Money::gwei(-20));
        // The instance's largest valuation is 120, so the grid spans
        // [0, 240] per model: 25 x 25 vectors at step 10.
        assert_eq!(report.deviations, 625);
    }

    #[test]
    fn all_ex1_participants_pass_at_unit_step() {
        let instance = ex1_instance();
        for p in instance.bids.participants().collect::<Vec<_>>() {
            let report = check_weak_dominance(&instance, p, 1).unwrap();
            assert!(!report.violated, "{p} has a profitable deviation");
            assert_eq!(report.case_inequality_failures, 0);
        }
    }

    #[test]
    fn single_participant_market_trivially_honest() {
        let mut valuations = Profile::new();
        valuations
            .set(ParticipantId::owner(0), ModelId(0), Money::gwei(10))
            .unwrap();
        valuations
            .set(ParticipantId::station(0), ModelId(0), Money::gwei(4))
            .unwrap();
        let instance = Instance {
            id: 1,
            models: vec![fixtures::proposal(0, 0)],
            bids: valuations.clone(),
            valuations,
        };
        for p in [ParticipantId::owner(0), ParticipantId::station(0)] {
            let report = check_weak_dominance(&instance, p, 1).unwrap();
            assert!(!report.violated);
        }
    }

    #[test]
    fn classifier_covers_dead_markets() {
        // One owner worth 5, one station costing 20: nothing is selected.
        let mut valuations = Profile::new();
        valuations
            .set(ParticipantId::owner(0), ModelId(0), Money::gwei(5))
            .unwrap();
        valuations
            .set(ParticipantId::station(0), ModelId(0), Money::gwei(20))
            .unwrap();
        let instance = Instance {
            id: 2,
            models: vec![fixtures::proposal(0, 0)],
            bids: valuations.clone(),
            valuations,
        };

        // An owner bid of 30 forces the model through: Case 5.
        let forcing: BTreeMap<ModelId, Money> = [(ModelId(0), Money::gwei(30))].into();
        assert_eq!(
            classify_case(&instance, ParticipantId::owner(0), &forcing).unwrap(),
            CaseLabel::Case5
        );
        // Standing pat leaves the market dead.
        let pat: BTreeMap<ModelId, Money> = [(ModelId(0), Money::gwei(5))].into();
        assert_eq!(
            classify_case(&instance, ParticipantId::owner(0), &pat).unwrap(),
            CaseLabel::NoPilotNoChoice
        );
    }

    #[test]
    fn classifier_labels_ex1_directions() {
        let instance = ex1_instance();
        let o1 = ParticipantId::owner(1);
        // O1 is tax-liable at truth; withdrawing support from m0 is Case 2.
        let withdraw: BTreeMap<ModelId, Money> =
            [(ModelId(0), Money::gwei(10)), (ModelId(1), Money::gwei(30))].into();
        assert_eq!(
            classify_case(&instance, o1, &withdraw).unwrap(),
            CaseLabel::Case2
        );
        // Boosting m1 instead is Case 3.
        let boost: BTreeMap<ModelId, Money> = [
            (ModelId(0), Money::gwei(100)),
            (ModelId(1), Money::gwei(200)),
        ]
        .into();
        assert_eq!(
            classify_case(&instance, o1, &boost).unwrap(),
            CaseLabel::Case3
        );

        // O2 is not liable: the same directions land in Cases 1 and 4.
        let o2 = ParticipantId::owner(2);
        let withdraw: BTreeMap<ModelId, Money> = [
            (ModelId(0), Money::gwei(10)),
            (ModelId(1), Money::gwei(120)),
        ]
        .into();
        assert_eq!(
            classify_case(&instance, o2, &withdraw).unwrap(),
            CaseLabel::Case1
        );
        let boost: BTreeMap<ModelId, Money> = [
            (ModelId(0), Money::gwei(60)),
            (ModelId(1), Money::gwei(200)),
        ]
        .into();
        assert_eq!(
            classify_case(&instance, o2, &boost).unwrap(),
            CaseLabel::Case4
        );
    }

    #[test]
    fn small_matrix_passes_and_covers_cases() {
        let report = run_matrix(150, 99, 1);
        assert!(report.passed(), "violations: {:?}", report.violations);
        assert!(
            report.covers_all_cases(),
            "coverage: {:?}",
            report.case_counts
        );
        assert!(report.participants_checked > 0);
    }

    #[test]
    fn corrupted_outcome_is_detected() {
        let instance = ex1_instance();
        let profile = truth_profile(&instance, ParticipantId::owner(1)).unwrap();
        let schedule =
            settlement::payment_schedule(&profile, &instance.models, &PaymentPolicy::default(), 0)
                .unwrap();
        let outcome = mechanism::run_auction(&profile, &instance.models, &schedule).unwrap();
        verify_outcome(&instance, &outcome).unwrap();

        // Tax flipped in sign: caught.
        let mut corrupted = outcome.clone();
        let o1 = ParticipantId::owner(1);
        let tax = corrupted.taxes[&o1];
        corrupted.taxes.insert(o1, -tax);
        assert!(verify_outcome(&instance, &corrupted).is_err());

        // Selection swapped: caught.
        let mut corrupted = outcome.clone();
        corrupted.selected = Some(ModelId(1));
        assert!(verify_outcome(&instance, &corrupted).is_err());

        // Station over-credited by one: caught.
        let mut corrupted = outcome;
        let s1 = ParticipantId::station(1);
        let paid = corrupted.payments[&s1];
        corrupted.payments.insert(s1, paid + Money::gwei(1));
        assert!(verify_outcome(&instance, &corrupted).is_err());
    }

    #[test]
    fn expected_utility_positive_on_a_small_default_market() {
        let scenario = Scenario {
            num_rounds: 5,
            seed: 21,
            ..Scenario::default()
        };
        let owners = estimate_expected_utility(&scenario, Role::ModelOwner, 3).unwrap();
        let stations = estimate_expected_utility(&scenario, Role::BaseStation, 3).unwrap();
        assert!(owners >= 0.0, "owner-side mean {owners}");
        assert!(stations >= 0.0, "station-side mean {stations}");
    }

    #[test]
    fn degenerate_market_has_zero_means() {
        // Station costs dwarf owner values, so no model is ever selected,
        // nobody is taxed, and every utility is exactly zero.
        let scenario = Scenario {
            num_rounds: 4,
            owner_label_mean: Money::gwei(10),
            station_label_mean: Money::gwei(500),
            seed: 77,
            ..Scenario::default()
        };
        let owners = estimate_expected_utility(&scenario, Role::ModelOwner, 5).unwrap();
        let stations = estimate_expected_utility(&scenario, Role::BaseStation, 5).unwrap();
        assert_eq!(owners, 0.0);
        assert_eq!(stations, 0.0);
    }

    #[test]
    fn single_seed_estimate_is_the_single_round_mean() {
        let scenario = Scenario {
            num_rounds: 1,
            seed: 33,
            ..Scenario::default()
        };
        let estimate = estimate_expected_utility(&scenario, Role::ModelOwner, 1).unwrap();
        let result = sim::run_simulation(&scenario, &BTreeMap::new()).unwrap();
        let owners: Vec<f64> = result.rounds[0]
            .utilities
            .iter()
            .filter(|(p, _)| p.role == Role::ModelOwner)
            .map(|(_, u)| u.as_f64())
            .collect();
        let mean = owners.iter().sum::<f64>() / owners.len() as f64;
        assert_eq!(estimate, mean);
    }
}
