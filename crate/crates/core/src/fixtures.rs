//! A small worked reference market used throughout the test suites.
//!
//! Two owners and two stations bid on two proposed models. Model m0 carries
//! welfare 80 and wins; model m1 carries welfare 60. Owner O1 is the only
//! pilot: without its claims the market would pick m1 instead, and under the
//! midpoint/equal payment plan its tax works out to exactly 60 Gwei.

use crate::money::Money;
use crate::types::{ModelId, ModelProposal, ParticipantId, Profile};

/// Claimed magnitudes:
///
/// | participant | m0  | m1  |
/// |-------------|-----|-----|
/// | O1          | 100 | 30  |
/// | O2          | 60  | 120 |
/// | S1          | 40  | 40  |
/// | S2          | 40  | 50  |
pub fn ex1() -> (Profile, Vec<ModelProposal>) {
    let mut bids = Profile::new();
    let entries = [
        (ParticipantId::owner(1), [100, 30]),
        (ParticipantId::owner(2), [60, 120]),
        (ParticipantId::station(1), [40, 40]),
        (ParticipantId::station(2), [40, 50]),
    ];
    for (participant, amounts) in entries {
        for (model, amount) in amounts.into_iter().enumerate() {
            bids.set(participant, ModelId(model as u32), Money::gwei(amount))
                .unwrap();
        }
    }
    let models = vec![proposal(0, 1), proposal(1, 2)];
    (bids, models)
}

pub fn proposal(model: u32, owner: u32) -> ModelProposal {
    ModelProposal {
        model_id: ModelId(model),
        owner: ParticipantId::owner(owner),
        param_size: 25_000_000,
        characteristics: 5,
        expected_accuracy: 0.9,
        rounds: 50,
        target_labels: [0, 1, 2].into_iter().collect(),
    }
}
