//! Payment-pool selection, exact integer share allocation, budget-balance
//! verification, and the tax-recycle transfers.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mechanism::AuctionOutcome;
use crate::money::{Money, ZERO};
use crate::rng;
use crate::types::{ModelId, ModelProposal, ParticipantId, Profile, ProfileError, Role};

/// How each side's pool total is split across its members.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Allocation {
    /// Equal split, remainder assigned one unit at a time in ascending id order.
    Equal,
    /// Largest-remainder apportionment over declared capability weights.
    ByCapability(BTreeMap<ParticipantId, u64>),
    /// Station rewards follow measured training contributions; falls back to
    /// an equal split wherever contributions are not yet known (the payment
    /// plan is announced before training runs).
    ByContribution,
}

/// How the pool total C is picked inside the feasible interval
/// [station claims, owner claims] of the selected model.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum CmRule {
    /// Integer floor of the interval midpoint. Deterministic; the default for
    /// verification runs.
    Midpoint,
    /// Uniform draw from the closed integer interval, seeded per
    /// (seed, round, model) so replays and counterfactuals agree.
    SeededUniform { seed: u64 },
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct PaymentPolicy {
    pub allocation: Allocation,
    pub cm_rule: CmRule,
}

impl Default for PaymentPolicy {
    fn default() -> Self {
        PaymentPolicy {
            allocation: Allocation::Equal,
            cm_rule: CmRule::Midpoint,
        }
    }
}

#[derive(Error, Debug, PartialEq, Eq)]
pub enum SettlementError {
    #[error("interval for {model} is empty: owner claims {owners_total} below station claims {stations_total}")]
    EmptyInterval {
        model: ModelId,
        owners_total: Money,
        stations_total: Money,
    },
    #[error("cannot allocate over an empty member list")]
    EmptyMembers,
    #[error("missing allocation weight for {0}")]
    MissingWeight(ParticipantId),
    #[error("allocation weights sum to zero")]
    ZeroWeightSum,
    #[error("cannot allocate negative total {0}")]
    NegativeTotal(Money),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// The announced payment plan: for every candidate model, the pool total and
/// each participant's share of it (owners fund the pool, stations draw from
/// it). The plan is a function of the model alone, which is what makes the
/// Clarke tax's surplus comparisons well-defined.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct PaymentSchedule {
    totals: BTreeMap<ModelId, Money>,
    shares: BTreeMap<ModelId, BTreeMap<ParticipantId, Money>>,
}

impl PaymentSchedule {
    pub fn total(&self, model: ModelId) -> Money {
        self.totals.get(&model).copied().unwrap_or(ZERO)
    }

    pub fn share(&self, participant: ParticipantId, model: ModelId) -> Money {
        self.shares
            .get(&model)
            .and_then(|s| s.get(&participant))
            .copied()
            .unwrap_or(ZERO)
    }
}

/// Pool total for the selected model, constrained to the feasible interval.
/// Errors when the interval is empty (negative welfare): settlement must not
/// run for such a model.
pub fn choose_total_payment(
    bids: &Profile,
    selected: ModelId,
    policy: &PaymentPolicy,
    round: u32,
) -> Result<Money, SettlementError> {
    let hi = bids.side_sum(Role::ModelOwner, selected)?;
    let lo = bids.side_sum(Role::BaseStation, selected)?;
    if hi < lo {
        return Err(SettlementError::EmptyInterval {
            model: selected,
            owners_total: hi,
            stations_total: lo,
        });
    }
    Ok(pick_in_interval(lo, hi, selected, &policy.cm_rule, round))
}

fn pick_in_interval(lo: Money, hi: Money, model: ModelId, rule: &CmRule, round: u32) -> Money {
    match rule {
        CmRule::Midpoint => (lo + hi).div_rem(2).0,
        CmRule::SeededUniform { seed } => {
            let mut rng = rng::stream(*seed, "cm", &[u64::from(round), u64::from(model.0)]);
            Money::gwei(rng.gen_range(lo.raw()..=hi.raw()))
        }
    }
}

/// Splits `total` across `members` exactly. `weights = None` is an equal
/// split; otherwise largest-remainder apportionment over the weights, ties
/// broken by ascending id. Shares are nonnegative and sum to `total`.
pub fn allocate_shares(
    total: Money,
    members: &[ParticipantId],
    weights: Option<&BTreeMap<ParticipantId, u64>>,
) -> Result<BTreeMap<ParticipantId, Money>, SettlementError> {
    if members.is_empty() {
        return Err(SettlementError::EmptyMembers);
    }
    if total.is_negative() {
        return Err(SettlementError::NegativeTotal(total));
    }

    let member_weights: Vec<(ParticipantId, u64)> = match weights {
        None => members.iter().map(|&m| (m, 1)).collect(),
        Some(w) => members
            .iter()
            .map(|&m| {
                w.get(&m)
                    .map(|&x| (m, x))
                    .ok_or(SettlementError::MissingWeight(m))
            })
            .collect::<Result<_, _>>()?,
    };
    let weight_sum: u64 = member_weights.iter().map(|(_, w)| w).sum();
    if weight_sum == 0 {
        return Err(SettlementError::ZeroWeightSum);
    }

    // floor(total * w / W) each, then hand out the leftover units by largest
    // remainder, ascending id on ties.
    let total_raw = total.raw() as i128;
    let mut shares: BTreeMap<ParticipantId, Money> = BTreeMap::new();
    let mut remainders: Vec<(i128, ParticipantId)> = Vec::with_capacity(member_weights.len());
    let mut allocated: i128 = 0;
    for (member, weight) in &member_weights {
        let scaled = total_raw * i128::from(*weight);
        let floor = scaled.div_euclid(i128::from(weight_sum));
        let rem = scaled.rem_euclid(i128::from(weight_sum));
        shares.insert(
            *member,
            Money::gwei(i64::try_from(floor).expect("share overflow")),
        );
        remainders.push((rem, *member));
        allocated += floor;
    }

    let mut leftover = total_raw - allocated;
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut cursor = remainders.iter().cycle();
    while leftover > 0 {
        let (_, member) = cursor.next().expect("nonempty remainders");
        *shares.get_mut(member).expect("member present") += Money::gwei(1);
        leftover -= 1;
    }

    Ok(shares)
}

/// Builds the full payment plan from the sealed claims: a pool total for
/// every candidate model and both sides' shares of it. Totals for non-viable
/// models (negative welfare) exist only to price counterfactual surpluses;
/// settlement itself refuses to run on them.
pub fn payment_schedule(
    bids: &Profile,
    models: &[ModelProposal],
    policy: &PaymentPolicy,
    round: u32,
) -> Result<PaymentSchedule, SettlementError> {
    let owners: Vec<ParticipantId> = bids.side(Role::ModelOwner).collect();
    let stations: Vec<ParticipantId> = bids.side(Role::BaseStation).collect();

    let mut totals = BTreeMap::new();
    let mut shares: BTreeMap<ModelId, BTreeMap<ParticipantId, Money>> = BTreeMap::new();
    for proposal in models {
        let model = proposal.model_id;
        let owners_total = bids.side_sum(Role::ModelOwner, model)?;
        let stations_total = bids.side_sum(Role::BaseStation, model)?;
        let (lo, hi) = (
            owners_total.min(stations_total),
            owners_total.max(stations_total),
        );
        let total = pick_in_interval(lo, hi, model, &policy.cm_rule, round);
        totals.insert(model, total);

        let mut per_model = BTreeMap::new();
        if !owners.is_empty() {
            per_model.extend(allocate_side(total, &owners, &policy.allocation, None)?);
        }
        if !stations.is_empty() {
            per_model.extend(allocate_side(total, &stations, &policy.allocation, None)?);
        }
        shares.insert(model, per_model);
    }
    Ok(PaymentSchedule { totals, shares })
}

fn allocate_side(
    total: Money,
    members: &[ParticipantId],
    allocation: &Allocation,
    contributions: Option<&BTreeMap<ParticipantId, u64>>,
) -> Result<BTreeMap<ParticipantId, Money>, SettlementError> {
    match allocation {
        Allocation::Equal => allocate_shares(total, members, None),
        Allocation::ByCapability(weights) => allocate_shares(total, members, Some(weights)),
        Allocation::ByContribution => match contributions {
            Some(weights) => allocate_shares(total, members, Some(weights)),
            None => allocate_shares(total, members, None),
        },
    }
}

/// Outcome of settling one round: who pays what into the pool, who draws
/// what from it, the taxes collected, and the recycle transfers applied.
#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct SettlementResult {
    /// C for the selected model; zero when no model was selected.
    pub total_payment: Money,
    pub owner_shares: BTreeMap<ParticipantId, Money>,
    pub station_rewards: BTreeMap<ParticipantId, Money>,
    pub taxes: BTreeMap<ParticipantId, Money>,
    /// Rebates handed back to owners out of the previous round's owner-side
    /// tax pool.
    pub owner_rebates: BTreeMap<ParticipantId, Money>,
    /// Reward top-ups handed to stations out of the previous round's
    /// station-side tax pool.
    pub station_bonuses: BTreeMap<ParticipantId, Money>,
    /// Taxes collected this round minus pool paid back out this round.
    pub recycle_pool_delta: Money,
    /// R = sum of owner payments + all taxes.
    pub revenue: Money,
}

impl SettlementResult {
    pub fn owner_tax_total(&self) -> Money {
        self.taxes
            .iter()
            .filter(|(p, _)| p.role == Role::ModelOwner)
            .map(|(_, t)| *t)
            .sum()
    }

    pub fn station_tax_total(&self) -> Money {
        self.taxes
            .iter()
            .filter(|(p, _)| p.role == Role::BaseStation)
            .map(|(_, t)| *t)
            .sum()
    }
}

/// Computes the transfers for a settled round. `contributions` feeds the
/// ByContribution reward split; the pools are the per-side tax balances
/// carried in from the previous settled round and are drained in full.
pub fn settle_round(
    outcome: &AuctionOutcome,
    bids: &Profile,
    policy: &PaymentPolicy,
    contributions: Option<&BTreeMap<ParticipantId, u64>>,
    owner_pool: Money,
    station_pool: Money,
) -> Result<SettlementResult, SettlementError> {
    let owners: Vec<ParticipantId> = bids.side(Role::ModelOwner).collect();
    let stations: Vec<ParticipantId> = bids.side(Role::BaseStation).collect();

    let (total_payment, owner_shares, station_rewards) = match outcome.selected {
        Some(model) => {
            let owners_total = bids.side_sum(Role::ModelOwner, model)?;
            let stations_total = bids.side_sum(Role::BaseStation, model)?;
            if owners_total < stations_total {
                return Err(SettlementError::EmptyInterval {
                    model,
                    owners_total,
                    stations_total,
                });
            }
            let total = outcome.total_payment;
            let owner_shares = allocate_side(total, &owners, &policy.allocation, None)?;
            let station_rewards =
                allocate_side(total, &stations, &policy.allocation, contributions)?;
            (total, owner_shares, station_rewards)
        }
        None => (ZERO, BTreeMap::new(), BTreeMap::new()),
    };

    let owner_rebates = recycle_adjustments(owner_pool, &owners, &owner_shares)?;
    let station_bonuses = recycle_adjustments(station_pool, &stations, &station_rewards)?;

    let taxes = outcome.taxes.clone();
    let tax_total: Money = taxes.values().copied().sum();
    let drained: Money = owner_rebates.values().copied().sum::<Money>()
        + station_bonuses.values().copied().sum::<Money>();
    let owner_payment_total: Money = owner_shares.values().copied().sum();

    Ok(SettlementResult {
        total_payment,
        owner_shares,
        station_rewards,
        taxes,
        owner_rebates,
        station_bonuses,
        recycle_pool_delta: tax_total - drained,
        revenue: owner_payment_total + tax_total,
    })
}

/// Recycles one side's tax pool: a pro-rata split over the side weighted by
/// its payment shares this round (equal split when the shares are all
/// zero). Owner-side taxes come back as payment rebates, station-side taxes
/// as reward bonuses; the pool is returned in full and the adjustments
/// never feed back into bids, selection, or the tax computation.
pub fn recycle_adjustments(
    pool: Money,
    members: &[ParticipantId],
    shares: &BTreeMap<ParticipantId, Money>,
) -> Result<BTreeMap<ParticipantId, Money>, SettlementError> {
    if pool == ZERO || members.is_empty() {
        return Ok(BTreeMap::new());
    }
    let weights: BTreeMap<ParticipantId, u64> = members
        .iter()
        .map(|&m| (m, shares.get(&m).copied().unwrap_or(ZERO).raw() as u64))
        .collect();
    if weights.values().all(|&w| w == 0) {
        allocate_shares(pool, members, None)
    } else {
        allocate_shares(pool, members, Some(&weights))
    }
}

/// Pure consistency check over a settled round: both sides' shares sum to
/// the pool total, taxes are nonnegative, and collected revenue covers the
/// pool (the mechanism never runs a deficit).
pub fn verify_budget_balance(result: &SettlementResult) -> bool {
    let owner_total: Money = result.owner_shares.values().copied().sum();
    let station_total: Money = result.station_rewards.values().copied().sum();
    let tax_total: Money = result.taxes.values().copied().sum();
    let drained: Money = result.owner_rebates.values().copied().sum::<Money>()
        + result.station_bonuses.values().copied().sum::<Money>();

    owner_total == result.total_payment
        && station_total == result.total_payment
        && result.taxes.values().all(|t| !t.is_negative())
        && result.revenue == owner_total + tax_total
        && result.revenue >= result.total_payment
        && result.recycle_pool_delta == tax_total - drained
}
