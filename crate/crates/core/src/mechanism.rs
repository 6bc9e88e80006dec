//! Model selection, pilot detection, and the Clarke tax.
//!
//! All functions are pure and deterministic. The auction is double-sided:
//! owners claim the value a candidate model would yield them, stations claim
//! the cost of training it, and the welfare of a model is the margin between
//! the two sides' claims. Taxes compare, within the taxed participant's own
//! side, the surplus the others enjoy under the selected model against the
//! surplus under the model they would have been best off with; the payment
//! plan entering those surpluses is the announced schedule, a function of
//! the model alone.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::money::{Money, ZERO};
use crate::settlement::PaymentSchedule;
use crate::types::{ModelId, ModelProposal, ParticipantId, Profile, ProfileError, Role};

#[derive(Error, Debug, PartialEq, Eq)]
pub enum MechanismError {
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("no models proposed")]
    NoModels,
    #[error("duplicate model id {0}")]
    DuplicateModel(ModelId),
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

/// Everything the auction decides for one round.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct AuctionOutcome {
    /// Welfare argmax among models with positive welfare; absent when no
    /// model clears its claimed costs.
    pub selected: Option<ModelId>,
    pub welfare: BTreeMap<ModelId, Money>,
    /// What the market would have picked with each participant's claims
    /// removed.
    pub counterfactual_selected: BTreeMap<ParticipantId, Option<ModelId>>,
    /// Participants whose claims influence the outcome: their exclusion
    /// changes the selection, or the selected model is not the one their
    /// side's other members are best off with (which makes them tax-liable).
    pub pilots: BTreeSet<ParticipantId>,
    pub taxes: BTreeMap<ParticipantId, Money>,
    /// Payment magnitudes under the selected model: owners' pool
    /// contributions, stations' rewards. Empty when nothing is selected.
    pub payments: BTreeMap<ParticipantId, Money>,
    /// Pool total C for the selected model; zero when nothing is selected.
    pub total_payment: Money,
}

fn check_models(models: &[ModelProposal]) -> Result<(), MechanismError> {
    if models.is_empty() {
        return Err(MechanismError::NoModels);
    }
    let mut seen = BTreeSet::new();
    for proposal in models {
        proposal.validate().map_err(MechanismError::Profile)?;
        if !seen.insert(proposal.model_id) {
            return Err(MechanismError::DuplicateModel(proposal.model_id));
        }
    }
    Ok(())
}

/// Signed margin between the owner-side and station-side claims for a model.
pub fn social_welfare(bids: &Profile, model: ModelId) -> Result<Money, MechanismError> {
    let owners = bids.side_sum(Role::ModelOwner, model)?;
    let stations = bids.side_sum(Role::BaseStation, model)?;
    Ok(owners - stations)
}

/// The welfare argmax among models with strictly positive welfare, ties
/// broken by smallest model id. Returns `None` when no model clears its
/// costs, and also when either side of the market is unpopulated: a model
/// with no station to train it, or no owner to fund it, cannot be realized.
pub fn select_model(
    bids: &Profile,
    models: &[ModelProposal],
) -> Result<Option<ModelId>, MechanismError> {
    check_models(models)?;
    if bids.side_is_empty(Role::ModelOwner) || bids.side_is_empty(Role::BaseStation) {
        return Ok(None);
    }
    let mut best: Option<(Money, ModelId)> = None;
    for proposal in models {
        let welfare = social_welfare(bids, proposal.model_id)?;
        if welfare <= ZERO {
            continue;
        }
        best = match best {
            Some((w, m)) if welfare < w || (welfare == w && m < proposal.model_id) => Some((w, m)),
            _ => Some((welfare, proposal.model_id)),
        };
    }
    Ok(best.map(|(_, m)| m))
}

/// Selection re-run with one participant's claims removed from every
/// welfare sum.
pub fn counterfactual_selection(
    bids: &Profile,
    models: &[ModelProposal],
    excluded: ParticipantId,
) -> Result<Option<ModelId>, MechanismError> {
    let reduced = bids.without(excluded).map_err(MechanismError::Profile)?;
    select_model(&reduced, models)
}

/// Net surplus the members of `participant`'s side other than itself enjoy
/// under `model`, with the announced payment plan applied: owners keep their
/// claimed value minus their pool share, stations keep their reward minus
/// their claimed cost.
fn others_surplus(
    participant: ParticipantId,
    bids: &Profile,
    model: ModelId,
    schedule: &PaymentSchedule,
) -> Result<Money, MechanismError> {
    let mut surplus = ZERO;
    for other in bids.side(participant.role) {
        if other == participant {
            continue;
        }
        let claim = bids.amount(other, model)?;
        let payment = schedule.share(other, model);
        surplus += match participant.role {
            Role::ModelOwner => claim - payment,
            Role::BaseStation => payment - claim,
        };
    }
    Ok(surplus)
}

/// The Clarke tax: the shortfall between the best surplus the participant's
/// side-mates could have enjoyed (over all candidate models, or over no
/// model at all, which is worth zero) and the surplus they enjoy under the
/// actual selection. Nonnegative by construction; zero whenever the selected
/// outcome is already the side-mates' best.
pub fn clarke_tax(
    participant: ParticipantId,
    bids: &Profile,
    models: &[ModelProposal],
    schedule: &PaymentSchedule,
) -> Result<Money, MechanismError> {
    if !bids.contains(participant) {
        return Err(MechanismError::Profile(ProfileError::UnknownParticipant(
            participant,
        )));
    }
    let selected = select_model(bids, models)?;
    let current = match selected {
        Some(model) => others_surplus(participant, bids, model, schedule)?,
        None => ZERO,
    };
    let mut best = ZERO; // the no-model outcome leaves the others at zero
    for proposal in models {
        best = best.max(others_surplus(
            participant,
            bids,
            proposal.model_id,
            schedule,
        )?);
    }
    Ok(best - current)
}

/// Participants whose claims influence the outcome; see
/// [`AuctionOutcome::pilots`].
pub fn pilots(
    bids: &Profile,
    models: &[ModelProposal],
    schedule: &PaymentSchedule,
) -> Result<BTreeSet<ParticipantId>, MechanismError> {
    let selected = select_model(bids, models)?;
    let mut out = BTreeSet::new();
    for participant in bids.participants() {
        if counterfactual_selection(bids, models, participant)? != selected
            || clarke_tax(participant, bids, models, schedule)? > ZERO
        {
            out.insert(participant);
        }
    }
    Ok(out)
}

/// Runs the full auction under the announced payment plan.
pub fn run_auction(
    bids: &Profile,
    models: &[ModelProposal],
    schedule: &PaymentSchedule,
) -> Result<AuctionOutcome, MechanismError> {
    check_models(models)?;
    bids.ensure_complete(models)
        .map_err(MechanismError::Profile)?;

    let mut welfare = BTreeMap::new();
    for proposal in models {
        welfare.insert(proposal.model_id, social_welfare(bids, proposal.model_id)?);
    }
    let selected = select_model(bids, models)?;

    let mut counterfactual_selected = BTreeMap::new();
    let mut taxes = BTreeMap::new();
    let mut pilot_set = BTreeSet::new();
    for participant in bids.participants() {
        let counterfactual = counterfactual_selection(bids, models, participant)?;
        let tax = clarke_tax(participant, bids, models, schedule)?;
        if tax.is_negative() {
            return Err(MechanismError::Internal(format!(
                "negative tax {tax} for {participant}"
            )));
        }
        if counterfactual != selected || tax > ZERO {
            pilot_set.insert(participant);
        }
        counterfactual_selected.insert(participant, counterfactual);
        taxes.insert(participant, tax);
    }

    let (payments, total_payment) = match selected {
        Some(model) => {
            let payments: BTreeMap<ParticipantId, Money> = bids
                .participants()
                .map(|p| (p, schedule.share(p, model)))
                .collect();
            (payments, schedule.total(model))
        }
        None => (BTreeMap::new(), ZERO),
    };

    Ok(AuctionOutcome {
        selected,
        welfare,
        counterfactual_selected,
        pilots: pilot_set,
        taxes,
        payments,
        total_payment,
    })
}

/// Realized utility for one participant given its true magnitudes: value
/// netted against payment and tax for owners, reward netted against cost and
/// tax for stations. With no model selected only the tax remains.
pub fn utility(
    participant: ParticipantId,
    outcome: &AuctionOutcome,
    truth: &Profile,
) -> Result<Money, MechanismError> {
    let tax = outcome.taxes.get(&participant).copied().unwrap_or(ZERO);
    match outcome.selected {
        None => Ok(-tax),
        Some(model) => {
            let value = truth.amount(participant, model)?;
            let payment = outcome.payments.get(&participant).copied().unwrap_or(ZERO);
            Ok(match participant.role {
                Role::ModelOwner => value - payment - tax,
                Role::BaseStation => payment - value - tax,
            })
        }
    }
}
