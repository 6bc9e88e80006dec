//! Synthetic stand-in for the federated training phase. A saturating
//! exponential maps the per-label data budget to accuracy; station
//! contributions follow their data shares exactly. Real gradient training is
//! deliberately out of scope: everything downstream only consumes the
//! report, so a real trainer could replace this module wholesale.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agents::REFERENCE_ROUNDS;
use crate::money::Money;
use crate::types::{ModelProposal, ParticipantId};

/// Accuracy curve acc(n) = acc_max * (1 - e^(-n / kappa)) over n training
/// images, saturating at `acc_max`.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct AccuracyModel {
    pub acc_max: f64,
    /// Curvature scale in images.
    pub kappa: u64,
    /// Total images available for one training run.
    pub total_budget: u64,
}

impl Default for AccuracyModel {
    fn default() -> Self {
        AccuracyModel {
            acc_max: 0.9,
            kappa: 2_000,
            total_budget: 10_000,
        }
    }
}

impl AccuracyModel {
    pub fn accuracy(&self, images: u64) -> f64 {
        if images == 0 {
            return 0.0;
        }
        self.acc_max * (1.0 - (-(images as f64) / self.kappa as f64).exp())
    }
}

/// What the training winner reports back: per-label accuracy over the target
/// set, its mean, and each station's contribution as an exact fraction
/// (integer data share over the integer total).
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct TrainingReport {
    pub per_label_accuracy: BTreeMap<u32, f64>,
    pub average_accuracy: f64,
    /// Integer data shares; fractions of `contribution_total`. Kept as
    /// integers so they sum to exactly one and can weight reward
    /// apportionment without rounding.
    pub station_contribution: BTreeMap<ParticipantId, u64>,
    pub contribution_total: u64,
    pub rounds_executed: u32,
}

impl TrainingReport {
    pub fn contribution_fraction(&self, station: ParticipantId) -> (u64, u64) {
        (
            self.station_contribution
                .get(&station)
                .copied()
                .unwrap_or(0),
            self.contribution_total,
        )
    }
}

/// Runs one synthetic training pass: the budget is split equally across the
/// proposal's target labels (remainder to the lower label indices), each
/// label's accuracy follows the curve scaled by how many of the reference
/// rounds were run, and contributions mirror data shares. Deterministic.
pub fn train(
    proposal: &ModelProposal,
    acc_model: &AccuracyModel,
    station_data_shares: &BTreeMap<ParticipantId, u64>,
) -> TrainingReport {
    let labels: Vec<u32> = proposal.target_labels.iter().copied().collect();
    let n_labels = labels.len() as u64;
    let per_label = acc_model.total_budget / n_labels;
    let remainder = acc_model.total_budget % n_labels;

    let round_factor = (f64::from(proposal.rounds) / f64::from(REFERENCE_ROUNDS)).min(1.0);

    let per_label_accuracy: BTreeMap<u32, f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let images = per_label + u64::from((i as u64) < remainder);
            (label, acc_model.accuracy(images) * round_factor)
        })
        .collect();
    let average_accuracy =
        per_label_accuracy.values().sum::<f64>() / per_label_accuracy.len() as f64;

    let contribution_total: u64 = station_data_shares.values().sum::<u64>().max(1);
    TrainingReport {
        per_label_accuracy,
        average_accuracy,
        station_contribution: station_data_shares.clone(),
        contribution_total,
        rounds_executed: proposal.rounds,
    }
}

/// Welfare margin scaled by the realized average accuracy.
pub fn social_utility_metric(welfare: Money, report: &TrainingReport) -> f64 {
    welfare.as_f64() * report.average_accuracy
}

/// Whether the realized accuracy meets the proposer's promise within the
/// tolerance `epsilon`; feeds the punishment votes.
pub fn realized_vs_expected(
    report: &TrainingReport,
    proposal: &ModelProposal,
    epsilon: f64,
) -> bool {
    report.average_accuracy >= proposal.expected_accuracy * (1.0 - epsilon)
}
