//! Hash-chained append-only event log.
//!
//! Wire format: one JSON record per line, fields in fixed order
//! (`sequence`, `round`, `payload`, `prev_hash`, `hash`), with the event kind
//! as the payload object's single key and digests hex-encoded lowercase.
//! Each event's hash is SHA-256 over (sequence, round, canonical payload
//! bytes, previous hash); the genesis previous hash is 32 zero bytes.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::flsim::TrainingReport;
use crate::mechanism::AuctionOutcome;
use crate::money::Money;
use crate::settlement::SettlementResult;
use crate::types::{ModelProposal, ParticipantId};

/// 32-byte SHA-256 digest, hex-encoded lowercase on the wire.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHash(pub [u8; 32]);

pub const GENESIS_HASH: EventHash = EventHash([0u8; 32]);

impl fmt::Display for EventHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(self.0))
    }
}

impl fmt::Debug for EventHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &hex::encode(self.0)[..12])
    }
}

impl Serialize for EventHash {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for EventHash {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("digest must be 32 bytes"))?;
        Ok(EventHash(arr))
    }
}

pub fn sha256(bytes: &[u8]) -> EventHash {
    let mut h = Sha256::new();
    h.update(bytes);
    EventHash(h.finalize().into())
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum EventKind {
    Deposited,
    Proposed,
    BidSubmitted,
    ModelSelected,
    TrainingReported,
    VoteCast,
    Settled,
    TaxRecycled,
    Punished,
}

/// A sealed bid revealed at settlement: the plaintext per-model claims and
/// the salt whose digest was committed during bidding.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct BidReveal {
    pub participant: ParticipantId,
    pub bids: BTreeMap<crate::types::ModelId, Money>,
    pub salt: EventHash,
}

// Externally tagged: the payload object's single key is the event kind.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub enum EventPayload {
    Deposited {
        participant: ParticipantId,
        amount: Money,
    },
    Proposed {
        proposal: ModelProposal,
    },
    /// Only the commitment digest goes on the record; the plaintext stays
    /// sealed until the round settles.
    BidSubmitted {
        participant: ParticipantId,
        commitment: EventHash,
    },
    ModelSelected {
        outcome: AuctionOutcome,
    },
    TrainingReported {
        reporter: ParticipantId,
        report: TrainingReport,
    },
    VoteCast {
        voter: ParticipantId,
        punish: bool,
    },
    Settled {
        aborted: bool,
        result: SettlementResult,
        reveals: Vec<BidReveal>,
    },
    TaxRecycled {
        owner_pool: Money,
        station_pool: Money,
    },
    Punished {
        participant: ParticipantId,
        forfeited: Money,
        redistributed: BTreeMap<ParticipantId, Money>,
    },
}

impl EventPayload {
    pub fn kind(&self) -> EventKind {
        match self {
            EventPayload::Deposited { .. } => EventKind::Deposited,
            EventPayload::Proposed { .. } => EventKind::Proposed,
            EventPayload::BidSubmitted { .. } => EventKind::BidSubmitted,
            EventPayload::ModelSelected { .. } => EventKind::ModelSelected,
            EventPayload::TrainingReported { .. } => EventKind::TrainingReported,
            EventPayload::VoteCast { .. } => EventKind::VoteCast,
            EventPayload::Settled { .. } => EventKind::Settled,
            EventPayload::TaxRecycled { .. } => EventKind::TaxRecycled,
            EventPayload::Punished { .. } => EventKind::Punished,
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Event {
    pub sequence: u64,
    pub round: u32,
    pub payload: EventPayload,
    pub prev_hash: EventHash,
    pub hash: EventHash,
}

impl Event {
    pub fn kind(&self) -> EventKind {
        self.payload.kind()
    }
}

fn event_hash(sequence: u64, round: u32, payload: &EventPayload, prev: &EventHash) -> EventHash {
    let payload_bytes = serde_json::to_vec(payload).expect("event payload serializes");
    let mut h = Sha256::new();
    h.update(sequence.to_le_bytes());
    h.update(round.to_le_bytes());
    h.update((payload_bytes.len() as u64).to_le_bytes());
    h.update(&payload_bytes);
    h.update(prev.0);
    EventHash(h.finalize().into())
}

#[derive(Error, Debug, PartialEq, Eq)]
pub enum ChainError {
    #[error("hash chain broken at sequence {sequence}: {reason}")]
    Broken { sequence: u64, reason: String },
    #[error("malformed event record on line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Append-only, gap-free, hash-chained sequence of events.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        EventLog::default()
    }

    pub fn head_hash(&self) -> EventHash {
        self.events.last().map(|e| e.hash).unwrap_or(GENESIS_HASH)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn append(&mut self, round: u32, payload: EventPayload) -> &Event {
        let sequence = self.events.len() as u64;
        let prev_hash = self.head_hash();
        let hash = event_hash(sequence, round, &payload, &prev_hash);
        self.events.push(Event {
            sequence,
            round,
            payload,
            prev_hash,
            hash,
        });
        self.events.last().expect("just pushed")
    }

    /// Verifies sequence continuity, linkage, and every recomputed digest.
    /// Reports the first offending sequence number.
    pub fn verify_chain(&self) -> Result<(), ChainError> {
        let mut prev = GENESIS_HASH;
        for (i, event) in self.events.iter().enumerate() {
            if event.sequence != i as u64 {
                return Err(ChainError::Broken {
                    sequence: i as u64,
                    reason: format!("expected sequence {i}, found {}", event.sequence),
                });
            }
            if event.prev_hash != prev {
                return Err(ChainError::Broken {
                    sequence: event.sequence,
                    reason: "previous-hash link does not match".into(),
                });
            }
            let expected = event_hash(event.sequence, event.round, &event.payload, &prev);
            if event.hash != expected {
                return Err(ChainError::Broken {
                    sequence: event.sequence,
                    reason: "recorded hash does not match recomputed digest".into(),
                });
            }
            prev = event.hash;
        }
        Ok(())
    }

    /// One canonical JSON record per line.
    pub fn encode(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&serde_json::to_string(event).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses the line format. Chain verification is separate so tampering
    /// is reported with sequence numbers, not parse errors.
    pub fn decode(text: &str) -> Result<EventLog, ChainError> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event: Event = serde_json::from_str(line).map_err(|e| ChainError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })?;
            events.push(event);
        }
        Ok(EventLog { events })
    }
}
