//! Message-level protocol between actors and the deterministic harness that
//! schedules them.

mod harness;

use std::collections::BTreeMap;
use std::fmt;

use crate::amount::Amount;
use crate::channel::{Bet, Change, OpenAccept, OpenOffer};
use crate::crypto::{sha256_parts, HashLock, PropositionId, Secret, Sig};
use crate::ledger::OutPoint;
use crate::script::Witness;

pub use harness::{ActorConfig, ChannelConfig, Harness, HarnessError, PropConfig, RoutePlan};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    OpenReq {
        offer: OpenOffer,
    },
    OpenAck {
        accept: OpenAccept,
    },
    FundingSigs {
        witnesses: Vec<(OutPoint, Witness)>,
    },
    CommitSig {
        revision: u64,
        sig: Sig,
    },
    RevokeAck {
        revision: u64,
        secret: Secret,
    },
    UpdateReq {
        change: Change,
        hash: HashLock,
    },
    UpdateAck {
        hash: HashLock,
    },
    BetPropose {
        bet: Bet,
        hash: HashLock,
    },
    BetAccept {
        hash: HashLock,
    },
    SettleReq {
        bet: Bet,
        winner: crate::crypto::Address,
        hash: HashLock,
    },
    SettleAck {
        hash: HashLock,
    },
    Reject {
        reason: String,
    },
    ProofReveal {
        blob: ProofBlob,
    },
    CloseReq {
        balance_a: Amount,
        balance_b: Amount,
    },
    CloseSig {
        sig: Sig,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::OpenReq { .. } => "OpenReq",
            Message::OpenAck { .. } => "OpenAck",
            Message::FundingSigs { .. } => "FundingSigs",
            Message::CommitSig { .. } => "CommitSig",
            Message::RevokeAck { .. } => "RevokeAck",
            Message::UpdateReq { .. } => "UpdateReq",
            Message::UpdateAck { .. } => "UpdateAck",
            Message::BetPropose { .. } => "BetPropose",
            Message::BetAccept { .. } => "BetAccept",
            Message::SettleReq { .. } => "SettleReq",
            Message::SettleAck { .. } => "SettleAck",
            Message::Reject { .. } => "Reject",
            Message::ProofReveal { .. } => "ProofReveal",
            Message::CloseReq { .. } => "CloseReq",
            Message::CloseSig { .. } => "CloseSig",
        }
    }

    /// The proposal message carrying `change`.
    pub fn proposal(change: Change, hash: HashLock) -> Message {
        match change {
            Change::AddBet(bet) => Message::BetPropose { bet, hash },
            Change::SettleBet { bet, winner } => Message::SettleReq { bet, winner, hash },
            change => Message::UpdateReq { change, hash },
        }
    }

    /// The acknowledgement matching a proposal of `change`.
    pub fn ack(change: &Change, hash: HashLock) -> Message {
        match change {
            Change::AddBet(_) => Message::BetAccept { hash },
            Change::SettleBet { .. } => Message::SettleAck { hash },
            _ => Message::UpdateAck { hash },
        }
    }

    /// The change and hash of a proposal message.
    pub fn as_proposal(&self) -> Option<(Change, HashLock)> {
        match self {
            Message::UpdateReq { change, hash } => Some((change.clone(), *hash)),
            Message::BetPropose { bet, hash } => Some((Change::AddBet(bet.clone()), *hash)),
            Message::SettleReq { bet, winner, hash } => Some((
                Change::SettleBet {
                    bet: bet.clone(),
                    winner: *winner,
                },
                *hash,
            )),
            _ => None,
        }
    }

    pub fn as_ack(&self) -> Option<HashLock> {
        match self {
            Message::UpdateAck { hash }
            | Message::BetAccept { hash }
            | Message::SettleAck { hash } => Some(*hash),
            _ => None,
        }
    }
}

/// A message in flight. Sequence numbers increase strictly per sender.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub seq: u64,
    pub from: String,
    pub to: String,
    pub channel: String,
    pub msg: Message,
}

/// An off-chain proof document for a proposition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProofBlob {
    pub prop: PropositionId,
    pub payload: Vec<u8>,
}

/// Ground truth about which propositions have proofs, and what they are.
#[derive(Clone, Debug, Default)]
pub struct ProofOracle {
    props: BTreeMap<PropositionId, (String, bool)>,
}

impl ProofOracle {
    pub fn insert(&mut self, label: &str, provable: bool) -> PropositionId {
        let id = PropositionId::from_label(label);
        self.props.insert(id, (label.to_string(), provable));
        id
    }

    pub fn label(&self, prop: &PropositionId) -> Option<&str> {
        self.props.get(prop).map(|(l, _)| l.as_str())
    }

    pub fn is_provable(&self, prop: &PropositionId) -> bool {
        self.props.get(prop).is_some_and(|(_, p)| *p)
    }

    /// The valid proof of `prop`, if it has one.
    pub fn proof(&self, prop: &PropositionId) -> Option<ProofBlob> {
        let (label, provable) = self.props.get(prop)?;
        provable.then(|| ProofBlob {
            prop: *prop,
            payload: proof_payload(label),
        })
    }
}

fn proof_payload(label: &str) -> Vec<u8> {
    sha256_parts(&[b"proof:", label.as_bytes()]).to_vec()
}

/// Checks a proof document against the oracle.
pub fn verify_proof(blob: &ProofBlob, oracle: &ProofOracle) -> bool {
    match oracle.props.get(&blob.prop) {
        Some((label, true)) => blob.payload == proof_payload(label),
        _ => false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LogLevel {
    Debug,
    Info,
    Warn,
}

impl std::str::FromStr for LogLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "debug" => Ok(LogLevel::Debug),
            "info" => Ok(LogLevel::Info),
            "warn" => Ok(LogLevel::Warn),
            _ => Err(format!("unknown log level {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogEntry {
    pub step: u64,
    pub height: u64,
    pub actor: String,
    pub event: String,
    pub level: LogLevel,
    pub detail: Vec<(String, String)>,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} height={} actor={} event={} detail=",
            self.step, self.height, self.actor, self.event
        )?;
        for (i, (k, v)) in self.detail.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    /// Follows the protocol in whatever role it holds.
    Honest,
    /// Honest, except it publishes a revoked commitment once `at` is reached.
    Cheater { revision: u64, at: u64 },
    /// Never shares proofs it found itself and never concedes on them.
    Withholder,
    /// Honest, and registers every proof it receives on chain at once.
    PublicRevealer,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Honest => "honest",
            PolicyKind::Cheater { .. } => "cheater",
            PolicyKind::Withholder => "withholder",
            PolicyKind::PublicRevealer => "public-revealer",
        }
    }

    /// Whether the honest-party safety bound applies to this policy.
    pub fn is_honest(&self) -> bool {
        matches!(self, PolicyKind::Honest | PolicyKind::PublicRevealer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Policy {
    pub kind: PolicyKind,
    /// Blocks to wait on an unresponsive counterparty before going on chain.
    pub patience: u64,
    /// Extra blocks of safety before a bet deadline when going on chain.
    pub margin: u64,
    /// Whether a doubter concedes to a proof that arrives after the deadline.
    pub window_concede: bool,
    /// Whether a withholding backer still reveals privately to collect.
    pub reveal: bool,
}

impl Default for Policy {
    fn default() -> Self {
        Policy {
            kind: PolicyKind::Honest,
            patience: 3,
            margin: 0,
            window_concede: false,
            reveal: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proof_oracle_checks_payload_and_proposition() {
        let mut oracle = ProofOracle::default();
        let p = oracle.insert("P", true);
        let q = oracle.insert("Q", true);
        let r = oracle.insert("R", false);
        let blob = oracle.proof(&p).unwrap();
        assert!(verify_proof(&blob, &oracle));

        let mut corrupted = blob.clone();
        corrupted.payload[0] ^= 1;
        assert!(!verify_proof(&corrupted, &oracle));

        let q_as_p = ProofBlob {
            prop: p,
            payload: oracle.proof(&q).unwrap().payload,
        };
        assert!(!verify_proof(&q_as_p, &oracle));
        assert!(oracle.proof(&r).is_none());
        assert!(!verify_proof(
            &ProofBlob {
                prop: r,
                payload: proof_payload("R")
            },
            &oracle
        ));
    }

    #[test]
    fn log_line_format() {
        let entry = LogEntry {
            step: 3,
            height: 12,
            actor: "alice".into(),
            event: "send".into(),
            level: LogLevel::Debug,
            detail: vec![
                ("to".into(), "bob".into()),
                ("msg".into(), "CommitSig".into()),
            ],
        };
        assert_eq!(
            entry.to_string(),
            "step=3 height=12 actor=alice event=send detail=to=bob,msg=CommitSig"
        );
    }
}
