//! Simulated Layer-1 chain: UTXO set, block-height clock, transaction
//! validation and the registry of proven propositions.
//!
//! Submitted transactions and proofs are validated against the current tip and
//! confirm together in the next block. There are no fees: any excess of inputs
//! over outputs is burned.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::amount::{Amount, AmountError};
use crate::crypto::{sha256, sha256_parts, Address, Digest, PropositionId};
use crate::script::{
    eval, put_bytes, EvalContext, EvalError, ProvenLookup, Script, ScriptError, Witness,
};

pub type TxId = Digest;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OutPoint {
    pub txid: TxId,
    pub index: u32,
}

impl OutPoint {
    pub fn new(txid: TxId, index: u32) -> Self {
        OutPoint { txid, index }
    }
}

impl fmt::Debug for OutPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.txid.short(), self.index)
    }
}

impl fmt::Display for OutPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxOutput {
    pub amount: Amount,
    pub script: Script,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxInput {
    pub outpoint: OutPoint,
    pub witness: Witness,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transaction {
    pub inputs: Vec<TxInput>,
    pub outputs: Vec<TxOutput>,
}

impl Transaction {
    /// Canonical serialization: input outpoints, then outputs (amount, script).
    /// Witnesses are excluded, so signatures commit to everything else.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 96 * (self.inputs.len() + self.outputs.len()));
        out.extend_from_slice(&(self.inputs.len() as u32).to_le_bytes());
        for input in &self.inputs {
            put_bytes(&mut out, &input.outpoint.txid.0);
            out.extend_from_slice(&input.outpoint.index.to_le_bytes());
        }
        out.extend_from_slice(&(self.outputs.len() as u32).to_le_bytes());
        for output in &self.outputs {
            out.extend_from_slice(&output.amount.atoms().to_le_bytes());
            output.script.encode(&mut out);
        }
        out
    }

    /// Digest signed by every input; doubles as the transaction id.
    pub fn digest(&self) -> TxId {
        Digest(sha256(&self.canonical_bytes()))
    }

    pub fn txid(&self) -> TxId {
        self.digest()
    }

    pub fn output_total(&self) -> Result<Amount, AmountError> {
        Amount::checked_sum(self.outputs.iter().map(|o| o.amount))
    }

    pub fn outpoint(&self, index: usize) -> OutPoint {
        OutPoint::new(self.txid(), index as u32)
    }

    pub fn spends(&self, outpoint: &OutPoint) -> bool {
        self.inputs.iter().any(|i| i.outpoint == *outpoint)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utxo {
    pub output: TxOutput,
    pub creation_height: u64,
}

#[derive(Clone, Debug)]
pub struct ConfirmedTx {
    pub tx: Transaction,
    pub height: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("zero amount")]
    ZeroAmount,
    #[error("transaction has no inputs or no outputs")]
    Empty,
    #[error("duplicate input {0}")]
    DuplicateInput(OutPoint),
    #[error("unknown outpoint {0}")]
    UnknownOutpoint(OutPoint),
    #[error("double spend of {0}")]
    DoubleSpend(OutPoint),
    #[error("input {index}: {error}")]
    Script { index: usize, error: EvalError },
    #[error("invalid output script: {0}")]
    InvalidScript(#[from] ScriptError),
    #[error("outputs exceed inputs")]
    ValueCreated,
    #[error(transparent)]
    Amount(#[from] AmountError),
    #[error("must advance at least one block")]
    NoBlocks,
}

impl LedgerError {
    /// The script failure behind this rejection, if any.
    pub fn eval_error(&self) -> Option<EvalError> {
        match self {
            LedgerError::Script { error, .. } => Some(*error),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
enum HistoryEntry {
    Faucet {
        outpoint: OutPoint,
        output: TxOutput,
    },
    Block {
        txs: Vec<Transaction>,
    },
}

#[derive(Clone, Debug, Default)]
pub struct ChainState {
    height: u64,
    utxos: BTreeMap<OutPoint, Utxo>,
    proven: BTreeMap<PropositionId, u64>,
    pending_txs: Vec<Transaction>,
    pending_proofs: Vec<PropositionId>,
    pending_spends: BTreeSet<OutPoint>,
    spent_by: BTreeMap<OutPoint, TxId>,
    confirmed: BTreeMap<TxId, ConfirmedTx>,
    history: Vec<HistoryEntry>,
    minted: Amount,
    burned: Amount,
    faucet_count: u64,
}

struct RegistryView<'a>(&'a BTreeMap<PropositionId, u64>);

impl ProvenLookup for RegistryView<'_> {
    fn is_proven(&self, prop: &PropositionId) -> bool {
        self.0.contains_key(prop)
    }
}

impl ProvenLookup for ChainState {
    fn is_proven(&self, prop: &PropositionId) -> bool {
        self.proven.contains_key(prop)
    }
}

impl ChainState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    /// Mints a confirmed pay-to-address output at the current height.
    pub fn faucet(&mut self, addr: Address, amount: Amount) -> Result<OutPoint, LedgerError> {
        if amount.is_zero() {
            return Err(LedgerError::ZeroAmount);
        }
        self.minted = self.minted.checked_add(amount)?;
        let txid = Digest(sha256_parts(&[b"faucet", &self.faucet_count.to_le_bytes()]));
        self.faucet_count += 1;
        let outpoint = OutPoint::new(txid, 0);
        let output = TxOutput {
            amount,
            script: Script::PayToAddr(addr),
        };
        self.utxos.insert(
            outpoint,
            Utxo {
                output: output.clone(),
                creation_height: self.height,
            },
        );
        self.history.push(HistoryEntry::Faucet { outpoint, output });
        Ok(outpoint)
    }

    /// Checks `tx` against the current tip without queueing it.
    pub fn validate_tx(&self, tx: &Transaction) -> Result<(), LedgerError> {
        if tx.inputs.is_empty() || tx.outputs.is_empty() {
            return Err(LedgerError::Empty);
        }
        let mut seen = BTreeSet::new();
        for input in &tx.inputs {
            if !seen.insert(input.outpoint) {
                return Err(LedgerError::DuplicateInput(input.outpoint));
            }
        }
        for output in &tx.outputs {
            if output.amount.is_zero() {
                return Err(LedgerError::ZeroAmount);
            }
            output.script.validate()?;
        }
        let digest = tx.digest();
        let registry = RegistryView(&self.proven);
        let mut total_in = Amount::ZERO;
        for (index, input) in tx.inputs.iter().enumerate() {
            let op = input.outpoint;
            if self.pending_spends.contains(&op) || self.spent_by.contains_key(&op) {
                return Err(LedgerError::DoubleSpend(op));
            }
            let utxo = self
                .utxos
                .get(&op)
                .ok_or(LedgerError::UnknownOutpoint(op))?;
            let ctx = EvalContext {
                tx_digest: digest,
                utxo_creation_height: utxo.creation_height,
                chain_height: self.height,
                proven: &registry,
            };
            eval(&utxo.output.script, &input.witness, &ctx)
                .map_err(|error| LedgerError::Script { index, error })?;
            total_in = total_in.checked_add(utxo.output.amount)?;
        }
        if tx.output_total()? > total_in {
            return Err(LedgerError::ValueCreated);
        }
        Ok(())
    }

    /// Validates and queues `tx` for the next block.
    pub fn submit_tx(&mut self, tx: Transaction) -> Result<TxId, LedgerError> {
        self.validate_tx(&tx)?;
        self.pending_spends
            .extend(tx.inputs.iter().map(|i| i.outpoint));
        let txid = tx.txid();
        self.pending_txs.push(tx);
        Ok(txid)
    }

    /// Queues a proof of `prop`; it counts as proven from the next block on.
    pub fn register_proof(&mut self, prop: PropositionId) {
        if !self.proven.contains_key(&prop) && !self.pending_proofs.contains(&prop) {
            self.pending_proofs.push(prop);
        }
    }

    pub fn is_proven(&self, prop: &PropositionId) -> bool {
        self.proven.contains_key(prop)
    }

    pub fn proven_height(&self, prop: &PropositionId) -> Option<u64> {
        self.proven.get(prop).copied()
    }

    /// Advances `k` blocks; everything queued confirms in the first one.
    /// Returns the ids of the transactions that confirmed.
    pub fn advance_blocks(&mut self, k: u64) -> Result<Vec<TxId>, LedgerError> {
        if k == 0 {
            return Err(LedgerError::NoBlocks);
        }
        self.height += 1;
        let txs = std::mem::take(&mut self.pending_txs);
        self.pending_spends.clear();
        let mut confirmed = Vec::with_capacity(txs.len());
        for tx in &txs {
            let txid = tx.txid();
            let mut total_in = Amount::ZERO;
            for input in &tx.inputs {
                let utxo = self
                    .utxos
                    .remove(&input.outpoint)
                    .expect("queued input vanished before confirmation");
                total_in = total_in.checked_add(utxo.output.amount)?;
                self.spent_by.insert(input.outpoint, txid);
            }
            let total_out = tx.output_total()?;
            self.burned = self.burned.checked_add(total_in.checked_sub(total_out)?)?;
            for (index, output) in tx.outputs.iter().enumerate() {
                self.utxos.insert(
                    OutPoint::new(txid, index as u32),
                    Utxo {
                        output: output.clone(),
                        creation_height: self.height,
                    },
                );
            }
            self.confirmed.insert(
                txid,
                ConfirmedTx {
                    tx: tx.clone(),
                    height: self.height,
                },
            );
            confirmed.push(txid);
        }
        self.history.push(HistoryEntry::Block { txs });
        for prop in std::mem::take(&mut self.pending_proofs) {
            self.proven.entry(prop).or_insert(self.height);
        }
        self.height += k - 1;
        Ok(confirmed)
    }

    pub fn utxo(&self, outpoint: &OutPoint) -> Option<&Utxo> {
        self.utxos.get(outpoint)
    }

    pub fn utxos(&self) -> impl Iterator<Item = (&OutPoint, &Utxo)> {
        self.utxos.iter()
    }

    /// `height - creation_height + 1` for a live output.
    pub fn confirmations(&self, outpoint: &OutPoint) -> Option<u64> {
        self.utxos
            .get(outpoint)
            .map(|u| self.height + 1 - u.creation_height)
    }

    pub fn spender_of(&self, outpoint: &OutPoint) -> Option<TxId> {
        self.spent_by.get(outpoint).copied()
    }

    pub fn confirmed_tx(&self, txid: &TxId) -> Option<&ConfirmedTx> {
        self.confirmed.get(txid)
    }

    pub fn is_pending_spend(&self, outpoint: &OutPoint) -> bool {
        self.pending_spends.contains(outpoint)
    }

    /// Live pay-to-address outputs of `addr`, in outpoint order.
    pub fn spendable_by(&self, addr: &Address) -> Vec<(OutPoint, Amount)> {
        self.utxos
            .iter()
            .filter(|(op, u)| {
                u.output.script.pay_to() == Some(*addr) && !self.pending_spends.contains(op)
            })
            .map(|(op, u)| (*op, u.output.amount))
            .collect()
    }

    /// Sum of live pay-to-address outputs of `addr`.
    pub fn holdings(&self, addr: &Address) -> Amount {
        self.utxos
            .values()
            .filter(|u| u.output.script.pay_to() == Some(*addr))
            .map(|u| u.output.amount)
            .sum()
    }

    pub fn live_total(&self) -> Amount {
        self.utxos.values().map(|u| u.output.amount).sum()
    }

    /// Value held by outputs that are not plain pay-to-address.
    pub fn locked_total(&self) -> Amount {
        self.utxos
            .values()
            .filter(|u| u.output.script.pay_to().is_none())
            .map(|u| u.output.amount)
            .sum()
    }

    pub fn minted(&self) -> Amount {
        self.minted
    }

    pub fn burned(&self) -> Amount {
        self.burned
    }

    pub fn has_pending(&self) -> bool {
        !self.pending_txs.is_empty() || !self.pending_proofs.is_empty()
    }

    /// Replays the chain history from genesis and checks that every input
    /// existed when spent, no outpoint is consumed twice, and the rebuilt UTXO
    /// set and burn total match the live state.
    pub fn replay_check(&self) -> Result<(), String> {
        let mut live: BTreeMap<OutPoint, TxOutput> = BTreeMap::new();
        let mut consumed: BTreeSet<OutPoint> = BTreeSet::new();
        let mut burned = 0u128;
        let mut minted = 0u128;
        for entry in &self.history {
            match entry {
                HistoryEntry::Faucet { outpoint, output } => {
                    minted += output.amount.atoms() as u128;
                    live.insert(*outpoint, output.clone());
                }
                HistoryEntry::Block { txs } => {
                    for tx in txs {
                        let txid = tx.txid();
                        let mut total_in = 0u128;
                        for input in &tx.inputs {
                            if !consumed.insert(input.outpoint) {
                                return Err(format!("outpoint {} consumed twice", input.outpoint));
                            }
                            let out = live.remove(&input.outpoint).ok_or_else(|| {
                                format!("input {} not live when spent", input.outpoint)
                            })?;
                            total_in += out.amount.atoms() as u128;
                        }
                        let total_out: u128 =
                            tx.outputs.iter().map(|o| o.amount.atoms() as u128).sum();
                        if total_out > total_in {
                            return Err(format!("tx {} creates value", txid.short()));
                        }
                        burned += total_in - total_out;
                        for (i, output) in tx.outputs.iter().enumerate() {
                            live.insert(OutPoint::new(txid, i as u32), output.clone());
                        }
                    }
                }
            }
        }
        if minted != self.minted.atoms() as u128 || burned != self.burned.atoms() as u128 {
            return Err("mint or burn totals diverge from replay".into());
        }
        let actual: BTreeMap<OutPoint, TxOutput> = self
            .utxos
            .iter()
            .map(|(op, u)| (*op, u.output.clone()))
            .collect();
        if actual != live {
            return Err("live utxo set diverges from replay".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keygen, sign, Secret};
    use crate::script::{Continuation, RelativeDelay};

    fn bars(n: u64) -> Amount {
        Amount::from_bars(n)
    }

    #[test]
    fn new_chain_is_empty() {
        let mut chain = ChainState::new();
        assert_eq!(chain.height(), 0);
        assert_eq!(chain.utxos().count(), 0);
        assert!(!chain.is_proven(&PropositionId::from_label("P")));
        chain.advance_blocks(5).unwrap();
        assert_eq!(chain.height(), 5);
        assert_eq!(chain.advance_blocks(0), Err(LedgerError::NoBlocks));
    }

    #[test]
    fn faucet_rejects_zero() {
        let mut chain = ChainState::new();
        let (_, alice) = keygen(b"alice");
        assert_eq!(
            chain.faucet(alice, Amount::ZERO),
            Err(LedgerError::ZeroAmount)
        );
        let op = chain.faucet(alice, bars(100)).unwrap();
        assert_eq!(chain.utxo(&op).unwrap().output.amount, bars(100));
        assert_eq!(chain.holdings(&alice), bars(100));
    }

    #[test]
    fn funding_tx_needs_both_signatures() {
        let mut chain = ChainState::new();
        let (ka, alice) = keygen(b"alice");
        let (kb, bob) = keygen(b"bob");
        let oa = chain.faucet(alice, bars(100)).unwrap();
        let ob = chain.faucet(bob, bars(100)).unwrap();
        let unsigned = Transaction {
            inputs: vec![
                TxInput {
                    outpoint: oa,
                    witness: Witness::Sig2Witness { a: None, b: None },
                },
                TxInput {
                    outpoint: ob,
                    witness: Witness::Sig2Witness { a: None, b: None },
                },
            ],
            outputs: vec![TxOutput {
                amount: bars(200),
                script: Script::Multisig2(alice, bob),
            }],
        };
        let d = unsigned.digest();
        let mut tx = unsigned.clone();
        tx.inputs[0].witness = Witness::SigWitness(sign(&ka, &d));
        tx.inputs[1].witness = Witness::SigWitness(sign(&kb, &d));
        let txid = chain.submit_tx(tx).unwrap();
        chain.advance_blocks(1).unwrap();
        let multisig = OutPoint::new(txid, 0);

        // Spending the multisig with one signature fails.
        let spend = Transaction {
            inputs: vec![TxInput {
                outpoint: multisig,
                witness: Witness::Sig2Witness { a: None, b: None },
            }],
            outputs: vec![TxOutput {
                amount: bars(200),
                script: Script::PayToAddr(alice),
            }],
        };
        let d = spend.digest();
        let mut half = spend.clone();
        half.inputs[0].witness = Witness::Sig2Witness {
            a: Some(sign(&ka, &d)),
            b: None,
        };
        assert_eq!(
            chain.submit_tx(half).unwrap_err().eval_error(),
            Some(EvalError::MissingSignature)
        );
    }

    #[test]
    fn delay_branch_at_47_of_48_confirmations() {
        let mut chain = ChainState::new();
        let (ka, alice) = keygen(b"alice");
        let (_, bob) = keygen(b"bob");
        let secret = Secret([3; 32]);
        let fund = chain.faucet(alice, bars(10)).unwrap();
        let lock_tx = Transaction {
            inputs: vec![TxInput {
                outpoint: fund,
                witness: Witness::Sig2Witness { a: None, b: None },
            }],
            outputs: vec![TxOutput {
                amount: bars(10),
                script: Script::htlc(
                    secret.hash(),
                    bob,
                    RelativeDelay::new(48).unwrap(),
                    Continuation::PayToAddr(alice),
                ),
            }],
        };
        let mut signed = lock_tx.clone();
        signed.inputs[0].witness = Witness::SigWitness(sign(&ka, &lock_tx.digest()));
        let txid = chain.submit_tx(signed).unwrap();
        chain.advance_blocks(1).unwrap(); // confirmed at height 1
        chain.advance_blocks(46).unwrap(); // height 47: 47 confirmations
        let op = OutPoint::new(txid, 0);
        assert_eq!(chain.confirmations(&op), Some(47));

        let claim = Transaction {
            inputs: vec![TxInput {
                outpoint: op,
                witness: Witness::Sig2Witness { a: None, b: None },
            }],
            outputs: vec![TxOutput {
                amount: bars(10),
                script: Script::PayToAddr(alice),
            }],
        };
        let mut signed = claim.clone();
        signed.inputs[0].witness = Witness::delay(Witness::SigWitness(sign(&ka, &claim.digest())));
        assert_eq!(
            chain.submit_tx(signed.clone()).unwrap_err().eval_error(),
            Some(EvalError::DelayNotElapsed)
        );
        chain.advance_blocks(1).unwrap();
        assert!(chain.submit_tx(signed).is_ok());
    }

    #[test]
    fn confirmation_arithmetic() {
        let mut chain = ChainState::new();
        let (ka, alice) = keygen(b"alice");
        chain.advance_blocks(10).unwrap();
        let fund = chain.faucet(alice, bars(1)).unwrap();
        let tx = Transaction {
            inputs: vec![TxInput {
                outpoint: fund,
                witness: Witness::Sig2Witness { a: None, b: None },
            }],
            outputs: vec![TxOutput {
                amount: bars(1),
                script: Script::PayToAddr(alice),
            }],
        };
        let mut signed = tx.clone();
        signed.inputs[0].witness = Witness::SigWitness(sign(&ka, &tx.digest()));
        let txid = chain.submit_tx(signed).unwrap();
        chain.advance_blocks(48).unwrap();
        assert_eq!(chain.height(), 58);
        let op = OutPoint::new(txid, 0);
        assert_eq!(chain.utxo(&op).unwrap().creation_height, 11);
        assert_eq!(chain.confirmations(&op), Some(48));
    }

    #[test]
    fn proofs_confirm_next_block_first_wins() {
        let mut chain = ChainState::new();
        let p = PropositionId::from_label("P");
        chain.register_proof(p);
        assert!(!chain.is_proven(&p));
        chain.advance_blocks(1).unwrap();
        assert_eq!(chain.proven_height(&p), Some(1));
        chain.register_proof(p);
        chain.advance_blocks(3).unwrap();
        assert_eq!(chain.proven_height(&p), Some(1));
        assert!(!chain.is_proven(&PropositionId::from_label("Q")));
    }

    #[test]
    fn earlier_submission_wins_within_block() {
        let mut chain = ChainState::new();
        let (ka, alice) = keygen(b"alice");
        let (_, bob) = keygen(b"bob");
        let fund = chain.faucet(alice, bars(5)).unwrap();
        let make = |to: Address| {
            let tx = Transaction {
                inputs: vec![TxInput {
                    outpoint: fund,
                    witness: Witness::Sig2Witness { a: None, b: None },
                }],
                outputs: vec![TxOutput {
                    amount: bars(5),
                    script: Script::PayToAddr(to),
                }],
            };
            let mut s = tx.clone();
            s.inputs[0].witness = Witness::SigWitness(sign(&ka, &tx.digest()));
            s
        };
        chain.submit_tx(make(bob)).unwrap();
        assert_eq!(
            chain.submit_tx(make(alice)),
            Err(LedgerError::DoubleSpend(fund))
        );
        chain.advance_blocks(1).unwrap();
        assert_eq!(chain.holdings(&bob), bars(5));
        assert_eq!(
            chain.submit_tx(make(alice)),
            Err(LedgerError::DoubleSpend(fund))
        );
        chain.replay_check().unwrap();
    }

    #[test]
    fn rejects_value_creation_and_burns_difference() {
        let mut chain = ChainState::new();
        let (ka, alice) = keygen(b"alice");
        let fund = chain.faucet(alice, bars(5)).unwrap();
        let make = |amount: Amount| {
            let tx = Transaction {
                inputs: vec![TxInput {
                    outpoint: fund,
                    witness: Witness::Sig2Witness { a: None, b: None },
                }],
                outputs: vec![TxOutput {
                    amount,
                    script: Script::PayToAddr(alice),
                }],
            };
            let mut s = tx.clone();
            s.inputs[0].witness = Witness::SigWitness(sign(&ka, &tx.digest()));
            s
        };
        assert_eq!(
            chain.submit_tx(make(bars(6))),
            Err(LedgerError::ValueCreated)
        );
        chain.submit_tx(make(bars(4))).unwrap();
        chain.advance_blocks(1).unwrap();
        assert_eq!(chain.burned(), bars(1));
        assert_eq!(
            chain.live_total().checked_add(chain.burned()).unwrap(),
            chain.minted()
        );
    }
}
