//! Two-party channel state machine.
//!
//! Each party owns a [`ChannelState`]. Cross-party effects travel as values
//! returned from one party's methods and fed into the other's; the
//! [`handshake`] module wires the two together directly for tests, the `peer`
//! module does the same over messages.
//!
//! Revision `m` of the channel is a pair of commitment transactions. Party X's
//! commitment sends X's balance (and every bet) through an htlc locked with
//! X's secret for revision `m`, so once X reveals that secret the counterparty
//! can sweep them if X ever publishes the revoked commitment.

mod commitment;
pub mod enforce;
pub mod handshake;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::RngCore;
use thiserror::Error;

use crate::amount::{Amount, AmountError};
use crate::crypto::{sign, verify, Address, HashLock, PrivKey, PropositionId, Secret, Sig};
use crate::ledger::{ChainState, LedgerError, OutPoint, Transaction, TxId, TxInput, TxOutput};
use crate::script::{AbsoluteHeight, EvalError, RelativeDelay, Script, Witness};

pub use commitment::CommitmentTemplate;

/// Default confirmation delay on revocable outputs.
pub const DEFAULT_CSV_DELAY: u64 = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::A => "A",
            Side::B => "B",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelParams {
    pub party_a: Address,
    pub party_b: Address,
    pub contrib_a: Amount,
    pub contrib_b: Amount,
    pub csv_delay: RelativeDelay,
}

impl ChannelParams {
    pub fn new(
        party_a: Address,
        party_b: Address,
        contrib_a: Amount,
        contrib_b: Amount,
        csv_delay: RelativeDelay,
    ) -> Result<Self, ChannelError> {
        let params = ChannelParams {
            party_a,
            party_b,
            contrib_a,
            contrib_b,
            csv_delay,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.party_a == self.party_b {
            return Err(ChannelError::InvalidParams("parties must differ"));
        }
        if self.capacity()?.is_zero() {
            return Err(ChannelError::InvalidParams("capacity must be positive"));
        }
        Ok(())
    }

    pub fn capacity(&self) -> Result<Amount, AmountError> {
        self.contrib_a.checked_add(self.contrib_b)
    }

    pub fn address(&self, side: Side) -> Address {
        match side {
            Side::A => self.party_a,
            Side::B => self.party_b,
        }
    }

    pub fn side_of(&self, addr: &Address) -> Option<Side> {
        if *addr == self.party_a {
            Some(Side::A)
        } else if *addr == self.party_b {
            Some(Side::B)
        } else {
            None
        }
    }

    pub fn contribution(&self, side: Side) -> Amount {
        match side {
            Side::A => self.contrib_a,
            Side::B => self.contrib_b,
        }
    }
}

/// A wager on whether `prop` is proven on chain by `deadline`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Bet {
    pub prop: PropositionId,
    /// Contributed by the party betting there will be no proof.
    pub doubter_stake: Amount,
    /// Contributed by the party betting there will be a proof.
    pub backer_stake: Amount,
    pub deadline: AbsoluteHeight,
    pub backer: Address,
    pub doubter: Address,
}

impl Bet {
    pub fn pot(&self) -> Amount {
        self.doubter_stake
            .checked_add(self.backer_stake)
            .expect("bet pot overflow")
    }

    /// The ptlc timeout on chain: the deadline pushed back by the htlc delay.
    pub fn onchain_timeout(&self, delay: RelativeDelay) -> AbsoluteHeight {
        AbsoluteHeight(self.deadline.0 + delay.blocks())
    }

    pub fn stake_of(&self, addr: &Address) -> Amount {
        if *addr == self.backer {
            self.backer_stake
        } else if *addr == self.doubter {
            self.doubter_stake
        } else {
            Amount::ZERO
        }
    }
}

/// A hash-locked payment pending inside the channel, as used for multi-hop
/// routing: `payee` takes it with the preimage, otherwise `payer` reclaims it
/// after `delay` confirmations on chain.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConditionalPayment {
    pub lock: HashLock,
    pub amount: Amount,
    pub payer: Address,
    pub payee: Address,
    pub delay: RelativeDelay,
}

/// Balances and pending contracts at one revision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Terms {
    pub balance_a: Amount,
    pub balance_b: Amount,
    pub bets: Vec<Bet>,
    pub payments: Vec<ConditionalPayment>,
}

impl Terms {
    pub fn initial(params: &ChannelParams) -> Self {
        Terms {
            balance_a: params.contrib_a,
            balance_b: params.contrib_b,
            bets: Vec::new(),
            payments: Vec::new(),
        }
    }

    pub fn balance(&self, side: Side) -> Amount {
        match side {
            Side::A => self.balance_a,
            Side::B => self.balance_b,
        }
    }

    fn balance_mut(&mut self, side: Side) -> &mut Amount {
        match side {
            Side::A => &mut self.balance_a,
            Side::B => &mut self.balance_b,
        }
    }

    /// Value locked in bets and conditional payments.
    pub fn locked(&self) -> Result<Amount, AmountError> {
        Amount::checked_sum(
            self.bets
                .iter()
                .map(Bet::pot)
                .chain(self.payments.iter().map(|p| p.amount)),
        )
    }

    pub fn total(&self) -> Result<Amount, AmountError> {
        self.balance_a
            .checked_add(self.balance_b)?
            .checked_add(self.locked()?)
    }

    pub fn is_quiet(&self) -> bool {
        self.bets.is_empty() && self.payments.is_empty()
    }

    /// The terms after `change`, checked against the channel's parameters.
    pub fn apply(
        &self,
        change: &Change,
        params: &ChannelParams,
        height: u64,
    ) -> Result<Terms, ChannelError> {
        let mut next = self.clone();
        match change {
            Change::SetBalances {
                balance_a,
                balance_b,
            } => {
                let total = balance_a
                    .checked_add(*balance_b)?
                    .checked_add(self.locked()?)?;
                if total != params.capacity()? {
                    return Err(ChannelError::BalanceMismatch);
                }
                next.balance_a = *balance_a;
                next.balance_b = *balance_b;
            }
            Change::AddBet(bet) => {
                let backer = params
                    .side_of(&bet.backer)
                    .ok_or(ChannelError::InvalidBet("backer not in channel"))?;
                let doubter = params
                    .side_of(&bet.doubter)
                    .ok_or(ChannelError::InvalidBet("doubter not in channel"))?;
                if backer == doubter {
                    return Err(ChannelError::InvalidBet("backer and doubter must differ"));
                }
                if bet.pot().is_zero() {
                    return Err(ChannelError::InvalidBet("empty pot"));
                }
                if bet.deadline.0 <= height {
                    return Err(ChannelError::BetDeadlinePassed);
                }
                let d = next.balance_mut(doubter);
                *d = d
                    .checked_sub(bet.doubter_stake)
                    .map_err(|_| ChannelError::InsufficientBalance)?;
                let b = next.balance_mut(backer);
                *b = b
                    .checked_sub(bet.backer_stake)
                    .map_err(|_| ChannelError::InsufficientBalance)?;
                next.bets.push(bet.clone());
            }
            Change::SettleBet { bet, winner } => {
                let index = next
                    .bets
                    .iter()
                    .position(|b| b == bet)
                    .ok_or(ChannelError::NoSuchBet)?;
                if *winner != bet.backer && *winner != bet.doubter {
                    return Err(ChannelError::InvalidBet("winner is not a party to the bet"));
                }
                let side = params
                    .side_of(winner)
                    .ok_or(ChannelError::InvalidBet("winner not in channel"))?;
                next.bets.remove(index);
                let w = next.balance_mut(side);
                *w = w.checked_add(bet.pot())?;
            }
            Change::AddPayment(payment) => {
                let payer = params
                    .side_of(&payment.payer)
                    .ok_or(ChannelError::InvalidPayment("payer not in channel"))?;
                let payee = params
                    .side_of(&payment.payee)
                    .ok_or(ChannelError::InvalidPayment("payee not in channel"))?;
                if payer == payee || payment.amount.is_zero() {
                    return Err(ChannelError::InvalidPayment("degenerate payment"));
                }
                if next.payments.iter().any(|p| p.lock == payment.lock) {
                    return Err(ChannelError::InvalidPayment("duplicate payment lock"));
                }
                let p = next.balance_mut(payer);
                *p = p
                    .checked_sub(payment.amount)
                    .map_err(|_| ChannelError::InsufficientBalance)?;
                next.payments.push(payment.clone());
            }
            Change::FulfillPayment { lock, preimage } => {
                if preimage.hash() != *lock {
                    return Err(ChannelError::InvalidPayment("preimage does not match lock"));
                }
                let index = next
                    .payments
                    .iter()
                    .position(|p| p.lock == *lock)
                    .ok_or(ChannelError::UnknownPayment)?;
                let payment = next.payments.remove(index);
                let side = params.side_of(&payment.payee).expect("validated on add");
                let p = next.balance_mut(side);
                *p = p.checked_add(payment.amount)?;
            }
            Change::FailPayment { lock } => {
                let index = next
                    .payments
                    .iter()
                    .position(|p| p.lock == *lock)
                    .ok_or(ChannelError::UnknownPayment)?;
                let payment = next.payments.remove(index);
                let side = params.side_of(&payment.payer).expect("validated on add");
                let p = next.balance_mut(side);
                *p = p.checked_add(payment.amount)?;
            }
        }
        Ok(next)
    }
}

/// One proposed modification of the channel terms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Change {
    SetBalances {
        balance_a: Amount,
        balance_b: Amount,
    },
    AddBet(Bet),
    SettleBet {
        bet: Bet,
        winner: Address,
    },
    AddPayment(ConditionalPayment),
    FulfillPayment {
        lock: HashLock,
        preimage: Secret,
    },
    FailPayment {
        lock: HashLock,
    },
}

impl Change {
    pub fn kind(&self) -> &'static str {
        match self {
            Change::SetBalances { .. } => "set-balances",
            Change::AddBet(_) => "add-bet",
            Change::SettleBet { .. } => "settle-bet",
            Change::AddPayment(_) => "add-payment",
            Change::FulfillPayment { .. } => "fulfill-payment",
            Change::FailPayment { .. } => "fail-payment",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelStatus {
    Init,
    CommitmentsExchanged,
    Open,
    ClosingCooperative,
    ClosedCooperative,
    ClosedUnilateral { by: Side, revision: u64 },
    Breached { by: Side, revision: u64 },
}

impl ChannelStatus {
    pub fn is_closed(&self) -> bool {
        matches!(
            self,
            ChannelStatus::ClosedCooperative
                | ChannelStatus::ClosedUnilateral { .. }
                | ChannelStatus::Breached { .. }
        )
    }

    pub fn label(&self) -> String {
        match self {
            ChannelStatus::Init => "init".into(),
            ChannelStatus::CommitmentsExchanged => "commitments-exchanged".into(),
            ChannelStatus::Open => "open".into(),
            ChannelStatus::ClosingCooperative => "closing-cooperative".into(),
            ChannelStatus::ClosedCooperative => "closed-cooperative".into(),
            ChannelStatus::ClosedUnilateral { by, revision } => {
                format!("closed-unilateral({by},{revision})")
            }
            ChannelStatus::Breached { by, revision } => format!("breached({by},{revision})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("funding would be signed before the counterparty signed our commitment")]
    HostageRisk,
    #[error("insufficient funds to cover the contribution")]
    InsufficientFunds,
    #[error("balances do not add up to capacity")]
    BalanceMismatch,
    #[error("stale revision {0}")]
    StaleRevision(u64),
    #[error("insufficient channel balance")]
    InsufficientBalance,
    #[error("no such bet")]
    NoSuchBet,
    #[error("active bets or payments remain")]
    ActiveBetsRemain,
    #[error("commitment is not revoked")]
    NoRevealedSecret,
    #[error("transaction is not a counterparty commitment")]
    NotCounterpartyCommitment,
    #[error("no secret or hash for revision {0}")]
    UnknownRevisionSecret(u64),
    #[error("no counterparty signature for revision {0}")]
    MissingCounterpartySig(u64),
    #[error("channel is {0}")]
    WrongStatus(String),
    #[error("an update handshake is already in progress")]
    HandshakeInProgress,
    #[error("no update handshake in progress")]
    NoPendingUpdate,
    #[error("counterparty signature does not verify")]
    BadSignature,
    #[error("revealed secret does not match revision {0}")]
    BadRevocationSecret(u64),
    #[error("bet deadline already passed")]
    BetDeadlinePassed,
    #[error("invalid bet: {0}")]
    InvalidBet(&'static str),
    #[error("invalid payment: {0}")]
    InvalidPayment(&'static str),
    #[error("unknown payment")]
    UnknownPayment,
    #[error("invalid channel parameters: {0}")]
    InvalidParams(&'static str),
    #[error("nothing to claim")]
    NothingToClaim,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Amount(#[from] AmountError),
}

/// What the initiator sends to open a channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpenOffer {
    pub params: ChannelParams,
    pub inputs: Vec<(OutPoint, Amount)>,
    pub first_hash: HashLock,
}

/// The responder's answer to an [`OpenOffer`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpenAccept {
    pub inputs: Vec<(OutPoint, Amount)>,
    pub first_hash: HashLock,
}

#[derive(Clone, Debug)]
struct Funding {
    tx: Transaction,
    inputs_a: Vec<(OutPoint, Amount)>,
}

impl Funding {
    fn outpoint(&self) -> OutPoint {
        self.tx.outpoint(0)
    }
}

#[derive(Clone, Debug)]
struct Pending {
    change: Change,
    proposer: Side,
}

/// Picks pay-to-address outputs in outpoint order until `amount` is covered.
pub fn select_inputs(
    chain: &ChainState,
    addr: &Address,
    amount: Amount,
) -> Result<Vec<(OutPoint, Amount)>, ChannelError> {
    let mut picked = Vec::new();
    let mut total = Amount::ZERO;
    for (op, value) in chain.spendable_by(addr) {
        if total >= amount {
            break;
        }
        total = total.checked_add(value)?;
        picked.push((op, value));
    }
    if total < amount {
        return Err(ChannelError::InsufficientFunds);
    }
    Ok(picked)
}

/// One party's view of a channel.
#[derive(Clone, Debug)]
pub struct ChannelState {
    params: ChannelParams,
    side: Side,
    key: PrivKey,
    status: ChannelStatus,
    revision: u64,
    history: BTreeMap<u64, Terms>,
    my_secrets: BTreeMap<u64, Secret>,
    their_hashes: BTreeMap<u64, HashLock>,
    their_revealed: BTreeMap<u64, Secret>,
    /// Counterparty signatures on my commitment, per revision.
    their_sigs: BTreeMap<u64, Sig>,
    /// Revisions of the counterparty's commitment that I have signed.
    signed_theirs: BTreeSet<u64>,
    /// Highest of my revisions whose secret I have revealed; 0 if none.
    revoked_through: u64,
    pending: Option<Pending>,
    funding: Option<Funding>,
    known_commitments: BTreeMap<TxId, (Side, u64)>,
    closing_tx: Option<TxId>,
    closed_by: Option<TxId>,
}

impl ChannelState {
    fn blank(params: ChannelParams, side: Side, key: PrivKey) -> Result<Self, ChannelError> {
        params.validate()?;
        if key.address() != params.address(side) {
            return Err(ChannelError::InvalidParams(
                "key does not match party address",
            ));
        }
        let mut history = BTreeMap::new();
        history.insert(1, Terms::initial(&params));
        Ok(ChannelState {
            params,
            side,
            key,
            status: ChannelStatus::Init,
            revision: 1,
            history,
            my_secrets: BTreeMap::new(),
            their_hashes: BTreeMap::new(),
            their_revealed: BTreeMap::new(),
            their_sigs: BTreeMap::new(),
            signed_theirs: BTreeSet::new(),
            revoked_through: 0,
            pending: None,
            funding: None,
            known_commitments: BTreeMap::new(),
            closing_tx: None,
            closed_by: None,
        })
    }

    /// Party A starts opening: picks a first secret and announces its funding inputs.
    pub fn initiate<R: RngCore + ?Sized>(
        params: ChannelParams,
        key: PrivKey,
        inputs: Vec<(OutPoint, Amount)>,
        rng: &mut R,
    ) -> Result<(Self, OpenOffer), ChannelError> {
        let mut state = Self::blank(params.clone(), Side::A, key)?;
        if Amount::checked_sum(inputs.iter().map(|i| i.1))? < params.contrib_a {
            return Err(ChannelError::InsufficientFunds);
        }
        let secret = Secret::random(rng);
        state.my_secrets.insert(1, secret);
        state.funding = Some(Funding {
            tx: Transaction {
                inputs: vec![],
                outputs: vec![],
            },
            inputs_a: inputs.clone(),
        });
        Ok((
            state,
            OpenOffer {
                params,
                inputs,
                first_hash: secret.hash(),
            },
        ))
    }

    /// Party B answers an open offer; builds the funding transaction.
    pub fn respond<R: RngCore + ?Sized>(
        offer: &OpenOffer,
        key: PrivKey,
        inputs: Vec<(OutPoint, Amount)>,
        rng: &mut R,
    ) -> Result<(Self, OpenAccept), ChannelError> {
        let mut state = Self::blank(offer.params.clone(), Side::B, key)?;
        if Amount::checked_sum(inputs.iter().map(|i| i.1))? < offer.params.contrib_b {
            return Err(ChannelError::InsufficientFunds);
        }
        if Amount::checked_sum(offer.inputs.iter().map(|i| i.1))? < offer.params.contrib_a {
            return Err(ChannelError::InsufficientFunds);
        }
        let secret = Secret::random(rng);
        state.my_secrets.insert(1, secret);
        state.their_hashes.insert(1, offer.first_hash);
        state.funding = Some(state.build_funding(&offer.inputs, &inputs)?);
        Ok((
            state,
            OpenAccept {
                inputs,
                first_hash: secret.hash(),
            },
        ))
    }

    /// Party A learns B's inputs and first hash.
    pub fn receive_open_accept(&mut self, accept: &OpenAccept) -> Result<(), ChannelError> {
        if self.side != Side::A
            || self.status != ChannelStatus::Init
            || self.their_hashes.contains_key(&1)
        {
            return Err(ChannelError::WrongStatus(self.status.label()));
        }
        if Amount::checked_sum(accept.inputs.iter().map(|i| i.1))? < self.params.contrib_b {
            return Err(ChannelError::InsufficientFunds);
        }
        let inputs_a = self
            .funding
            .as_ref()
            .expect("set by initiate")
            .inputs_a
            .clone();
        self.their_hashes.insert(1, accept.first_hash);
        self.funding = Some(self.build_funding(&inputs_a, &accept.inputs)?);
        Ok(())
    }

    fn build_funding(
        &self,
        inputs_a: &[(OutPoint, Amount)],
        inputs_b: &[(OutPoint, Amount)],
    ) -> Result<Funding, ChannelError> {
        let mut outputs = vec![TxOutput {
            amount: self.params.capacity()?,
            script: Script::Multisig2(self.params.party_a, self.params.party_b),
        }];
        for (side, inputs) in [(Side::A, inputs_a), (Side::B, inputs_b)] {
            let total = Amount::checked_sum(inputs.iter().map(|i| i.1))?;
            let change = total.checked_sub(self.params.contribution(side))?;
            if !change.is_zero() {
                outputs.push(TxOutput {
                    amount: change,
                    script: Script::PayToAddr(self.params.address(side)),
                });
            }
        }
        let inputs = inputs_a
            .iter()
            .chain(inputs_b)
            .map(|(op, _)| TxInput {
                outpoint: *op,
                witness: Witness::Sig2Witness { a: None, b: None },
            })
            .collect();
        Ok(Funding {
            tx: Transaction { inputs, outputs },
            inputs_a: inputs_a.to_vec(),
        })
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn my_address(&self) -> Address {
        self.params.address(self.side)
    }

    pub fn their_address(&self) -> Address {
        self.params.address(self.side.other())
    }

    pub fn status(&self) -> ChannelStatus {
        self.status
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn terms(&self) -> &Terms {
        &self.history[&self.revision]
    }

    pub fn terms_at(&self, revision: u64) -> Option<&Terms> {
        self.history.get(&revision)
    }

    pub fn has_pending_update(&self) -> bool {
        self.pending.is_some()
    }

    pub fn pending_change(&self) -> Option<(&Change, Side)> {
        self.pending.as_ref().map(|p| (&p.change, p.proposer))
    }

    /// Terms staged for the next revision, while a handshake is in progress.
    pub fn pending_terms(&self) -> Option<&Terms> {
        self.pending
            .as_ref()
            .and_then(|_| self.history.get(&(self.revision + 1)))
    }

    pub fn funding_outpoint(&self) -> Option<OutPoint> {
        self.funding
            .as_ref()
            .filter(|f| !f.tx.inputs.is_empty())
            .map(Funding::outpoint)
    }

    pub fn funding_tx(&self) -> Option<&Transaction> {
        self.funding
            .as_ref()
            .map(|f| &f.tx)
            .filter(|tx| !tx.inputs.is_empty())
    }

    pub fn revealed_secret(&self, revision: u64) -> Option<&Secret> {
        self.their_revealed.get(&revision)
    }

    pub fn holds_counterparty_sig(&self, revision: u64) -> bool {
        self.their_sigs.contains_key(&revision)
    }

    /// Whether I have signed the counterparty's commitment at `revision`.
    pub fn has_signed_counterparty(&self, revision: u64) -> bool {
        self.signed_theirs.contains(&revision)
    }

    /// The latest revision of my own commitment I can publish.
    pub fn latest_signed_revision(&self) -> Option<u64> {
        self.their_sigs.keys().next_back().copied()
    }

    /// Revision whose commitments the next signature exchange concerns.
    fn target_revision(&self) -> u64 {
        if self.pending.is_some() {
            self.revision + 1
        } else {
            self.revision
        }
    }

    /// Revisions either party could publish without being punished, as seen
    /// from this side: my latest signed commitment and every counterparty
    /// commitment I signed whose secret I do not hold.
    pub fn publishable_revisions(&self) -> BTreeSet<u64> {
        let mut live: BTreeSet<u64> = self
            .signed_theirs
            .iter()
            .filter(|r| !self.their_revealed.contains_key(r))
            .copied()
            .collect();
        if let Some(r) = self.latest_signed_revision() {
            live.insert(r);
        }
        live
    }

    fn hash_for(&self, owner: Side, revision: u64) -> Result<HashLock, ChannelError> {
        let hash = if owner == self.side {
            self.my_secrets.get(&revision).map(Secret::hash)
        } else {
            self.their_hashes.get(&revision).copied()
        };
        hash.ok_or(ChannelError::UnknownRevisionSecret(revision))
    }

    fn require_status(&self, ok: &[ChannelStatus]) -> Result<(), ChannelError> {
        if ok.contains(&self.status) {
            Ok(())
        } else {
            Err(ChannelError::WrongStatus(self.status.label()))
        }
    }

    /// Signs the counterparty's commitment for the revision under negotiation.
    pub fn sign_counterparty_commitment(&mut self) -> Result<(u64, Sig), ChannelError> {
        let revision = self.target_revision();
        let template = self.build_commitment(self.side.other(), revision)?;
        let txid = template.tx.txid();
        self.known_commitments
            .insert(txid, (self.side.other(), revision));
        self.signed_theirs.insert(revision);
        Ok((revision, sign(&self.key, &txid)))
    }

    /// Stores the counterparty's signature on my commitment after checking it.
    pub fn receive_commitment_sig(&mut self, revision: u64, sig: Sig) -> Result<(), ChannelError> {
        if revision != self.target_revision() {
            return Err(ChannelError::StaleRevision(revision));
        }
        let template = self.build_commitment(self.side, revision)?;
        let txid = template.tx.txid();
        if !verify(&self.their_address(), &sig, &txid) {
            return Err(ChannelError::BadSignature);
        }
        self.known_commitments.insert(txid, (self.side, revision));
        self.their_sigs.insert(revision, sig);
        if self.status == ChannelStatus::Init && revision == 1 {
            self.status = ChannelStatus::CommitmentsExchanged;
        }
        Ok(())
    }

    /// Witnesses for my funding inputs. Refuses until the counterparty has
    /// signed my first commitment, or my contribution could be held hostage.
    pub fn sign_funding(&self) -> Result<Vec<(OutPoint, Witness)>, ChannelError> {
        if !self.their_sigs.contains_key(&1) {
            return Err(ChannelError::HostageRisk);
        }
        let funding = self
            .funding
            .as_ref()
            .filter(|f| !f.tx.inputs.is_empty())
            .ok_or(ChannelError::HostageRisk)?;
        let digest = funding.tx.digest();
        let count_a = funding.inputs_a.len();
        let mine = match self.side {
            Side::A => &funding.tx.inputs[..count_a],
            Side::B => &funding.tx.inputs[count_a..],
        };
        let sig = sign(&self.key, &digest);
        Ok(mine
            .iter()
            .map(|i| (i.outpoint, Witness::SigWitness(sig)))
            .collect())
    }

    /// Combines both parties' funding witnesses into a publishable transaction.
    pub fn assemble_funding(
        &self,
        witnesses: &[(OutPoint, Witness)],
    ) -> Result<Transaction, ChannelError> {
        let mut tx = self.funding_tx().ok_or(ChannelError::HostageRisk)?.clone();
        for input in &mut tx.inputs {
            if let Some((_, w)) = witnesses.iter().find(|(op, _)| *op == input.outpoint) {
                input.witness = w.clone();
            }
        }
        Ok(tx)
    }

    /// Moves to Open once the funding output is on chain.
    pub fn confirm_funding(&mut self, chain: &ChainState) -> bool {
        if !matches!(
            self.status,
            ChannelStatus::Init | ChannelStatus::CommitmentsExchanged
        ) {
            return false;
        }
        match self.funding_outpoint() {
            Some(op) if chain.utxo(&op).is_some() && self.their_sigs.contains_key(&1) => {
                self.status = ChannelStatus::Open;
                true
            }
            _ => false,
        }
    }

    /// Step 1 for the proposer: stage the new terms and pick the next secret.
    pub fn propose<R: RngCore + ?Sized>(
        &mut self,
        change: Change,
        height: u64,
        rng: &mut R,
    ) -> Result<HashLock, ChannelError> {
        self.stage(change, self.side, height, rng)
    }

    /// Step 1 for the acceptor: stage the proposed terms, learn the proposer's next hash.
    pub fn accept<R: RngCore + ?Sized>(
        &mut self,
        change: Change,
        their_hash: HashLock,
        height: u64,
        rng: &mut R,
    ) -> Result<HashLock, ChannelError> {
        let hash = self.stage(change, self.side.other(), height, rng)?;
        self.their_hashes.insert(self.revision + 1, their_hash);
        Ok(hash)
    }

    fn stage<R: RngCore + ?Sized>(
        &mut self,
        change: Change,
        proposer: Side,
        height: u64,
        rng: &mut R,
    ) -> Result<HashLock, ChannelError> {
        self.require_status(&[ChannelStatus::Open])?;
        if self.pending.is_some() {
            return Err(ChannelError::HandshakeInProgress);
        }
        let next = self.terms().apply(&change, &self.params, height)?;
        let secret = Secret::random(rng);
        let revision = self.revision + 1;
        self.my_secrets.insert(revision, secret);
        self.history.insert(revision, next);
        self.pending = Some(Pending { change, proposer });
        Ok(secret.hash())
    }

    /// The proposer learns the acceptor's next hash.
    pub fn receive_accept(&mut self, their_hash: HashLock) -> Result<(), ChannelError> {
        match &self.pending {
            Some(p) if p.proposer == self.side => {
                self.their_hashes.insert(self.revision + 1, their_hash);
                Ok(())
            }
            _ => Err(ChannelError::NoPendingUpdate),
        }
    }

    /// Abandons a staged update, allowed only before I signed anything for it.
    pub fn cancel_pending(&mut self) -> Result<(), ChannelError> {
        if self.pending.is_none() {
            return Err(ChannelError::NoPendingUpdate);
        }
        let next = self.revision + 1;
        if self.signed_theirs.contains(&next) {
            return Err(ChannelError::HandshakeInProgress);
        }
        self.pending = None;
        self.my_secrets.remove(&next);
        self.their_hashes.remove(&next);
        self.their_sigs.remove(&next);
        self.history.remove(&next);
        Ok(())
    }

    /// Step 3: reveal my current secret once I hold a signature on my next commitment.
    pub fn revoke_previous(&mut self) -> Result<(u64, Secret), ChannelError> {
        if self.pending.is_none() {
            return Err(ChannelError::NoPendingUpdate);
        }
        let next = self.revision + 1;
        if !self.their_sigs.contains_key(&next) {
            return Err(ChannelError::MissingCounterpartySig(next));
        }
        let secret = *self
            .my_secrets
            .get(&self.revision)
            .ok_or(ChannelError::UnknownRevisionSecret(self.revision))?;
        self.revoked_through = self.revoked_through.max(self.revision);
        Ok((self.revision, secret))
    }

    /// Stores a revealed counterparty secret. Replays are harmless.
    pub fn receive_revocation(
        &mut self,
        revision: u64,
        secret: Secret,
    ) -> Result<(), ChannelError> {
        match self.their_hashes.get(&revision) {
            Some(h) if *h == secret.hash() => {
                self.their_revealed.insert(revision, secret);
                Ok(())
            }
            Some(_) => Err(ChannelError::BadRevocationSecret(revision)),
            None => Err(ChannelError::UnknownRevisionSecret(revision)),
        }
    }

    pub fn has_revoked_current(&self) -> bool {
        self.revoked_through >= self.revision
    }

    /// Step 4: bump the revision once both sides revoked the old one.
    pub fn complete_update(&mut self) -> Result<bool, ChannelError> {
        if self.pending.is_none() {
            return Err(ChannelError::NoPendingUpdate);
        }
        let next = self.revision + 1;
        let done = self.revoked_through >= self.revision
            && self.their_revealed.contains_key(&self.revision)
            && self.their_sigs.contains_key(&next);
        if done {
            self.revision = next;
            self.pending = None;
        }
        Ok(done)
    }

    /// The cooperative closing transaction at the current balances.
    pub fn closing_tx(&self) -> Result<Transaction, ChannelError> {
        self.require_status(&[ChannelStatus::Open, ChannelStatus::ClosingCooperative])?;
        if self.pending.is_some() {
            return Err(ChannelError::HandshakeInProgress);
        }
        let terms = self.terms();
        if !terms.is_quiet() {
            return Err(ChannelError::ActiveBetsRemain);
        }
        let funding = self
            .funding_outpoint()
            .ok_or(ChannelError::WrongStatus(self.status.label()))?;
        let outputs = [
            (terms.balance_a, self.params.party_a),
            (terms.balance_b, self.params.party_b),
        ]
        .into_iter()
        .filter(|(amount, _)| !amount.is_zero())
        .map(|(amount, addr)| TxOutput {
            amount,
            script: Script::PayToAddr(addr),
        })
        .collect();
        Ok(Transaction {
            inputs: vec![TxInput {
                outpoint: funding,
                witness: Witness::Sig2Witness { a: None, b: None },
            }],
            outputs,
        })
    }

    /// Signs the closing transaction and enters ClosingCooperative.
    pub fn sign_close(&mut self) -> Result<Sig, ChannelError> {
        let tx = self.closing_tx()?;
        let txid = tx.txid();
        self.closing_tx = Some(txid);
        self.status = ChannelStatus::ClosingCooperative;
        Ok(sign(&self.key, &txid))
    }

    /// Completes the closing transaction with the counterparty's signature.
    pub fn complete_close(&mut self, their_sig: Sig) -> Result<Transaction, ChannelError> {
        let my_sig = self.sign_close()?;
        let mut tx = self.closing_tx()?;
        if !verify(&self.their_address(), &their_sig, &tx.txid()) {
            return Err(ChannelError::BadSignature);
        }
        let (a, b) = match self.side {
            Side::A => (my_sig, their_sig),
            Side::B => (their_sig, my_sig),
        };
        tx.inputs[0].witness = Witness::Sig2Witness {
            a: Some(a),
            b: Some(b),
        };
        Ok(tx)
    }

    /// Classifies a transaction that spent the funding output, updating the
    /// channel status. Returns the owner and revision when it is a commitment.
    pub fn observe_close(&mut self, tx: &Transaction) -> Option<(Side, u64)> {
        let funding = self.funding_outpoint()?;
        if !tx.spends(&funding) {
            return None;
        }
        let txid = tx.txid();
        self.closed_by = Some(txid);
        if Some(txid) == self.closing_tx || self.is_closing_tx(tx) {
            self.status = ChannelStatus::ClosedCooperative;
            return None;
        }
        let (owner, revision) = *self.known_commitments.get(&txid)?;
        self.status = if owner != self.side && self.their_revealed.contains_key(&revision) {
            ChannelStatus::Breached {
                by: owner,
                revision,
            }
        } else {
            ChannelStatus::ClosedUnilateral {
                by: owner,
                revision,
            }
        };
        Some((owner, revision))
    }

    fn is_closing_tx(&self, tx: &Transaction) -> bool {
        tx.outputs.iter().all(|o| o.script.pay_to().is_some())
            && !self.known_commitments.contains_key(&tx.txid())
    }

    /// The transaction that closed the channel, once observed.
    pub fn closed_by(&self) -> Option<TxId> {
        self.closed_by
    }

    /// Owner and revision of a commitment this party has signed or received.
    pub fn identify_commitment(&self, txid: &TxId) -> Option<(Side, u64)> {
        self.known_commitments.get(txid).copied()
    }

    pub(crate) fn key(&self) -> &PrivKey {
        &self.key
    }

    pub(crate) fn set_status(&mut self, status: ChannelStatus) {
        self.status = status;
    }

    /// Checks the bookkeeping invariants: every revision's terms add up to
    /// capacity, and the counterparty has revealed every secret below the
    /// current revision and none at or above the next one.
    pub fn check_invariants(&self) -> Result<(), String> {
        let capacity = self.params.capacity().map_err(|e| e.to_string())?;
        for (revision, terms) in &self.history {
            let total = terms.total().map_err(|e| e.to_string())?;
            if total != capacity {
                return Err(format!(
                    "revision {revision} totals {total}, capacity {capacity}"
                ));
            }
        }
        if self.status.is_closed()
            || matches!(
                self.status,
                ChannelStatus::Init | ChannelStatus::CommitmentsExchanged
            )
        {
            return Ok(());
        }
        for r in 1..self.revision {
            if !self.their_revealed.contains_key(&r) {
                return Err(format!(
                    "counterparty secret for revoked revision {r} missing"
                ));
            }
        }
        if self.their_revealed.keys().any(|r| *r > self.revision) {
            return Err("counterparty revealed a secret beyond the current revision".into());
        }
        if self.pending.is_none() && self.their_revealed.contains_key(&self.revision) {
            return Err(format!(
                "counterparty secret for current revision {} revealed",
                self.revision
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::handshake::{
        add_bet, close_cooperative, open_channel, settle_bet, update_balance, Step,
    };
    use super::*;
    use crate::crypto::keygen;
    use crate::script::{Continuation, Ptlc};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const N: u64 = DEFAULT_CSV_DELAY;

    fn bars(n: u64) -> Amount {
        Amount::from_bars(n)
    }

    struct Fixture {
        chain: ChainState,
        a: ChannelState,
        b: ChannelState,
        rng: ChaCha20Rng,
        alpha: Address,
        beta: Address,
    }

    fn open(contrib_a: u64, contrib_b: u64) -> Fixture {
        let (ka, alpha) = keygen(b"alpha");
        let (kb, beta) = keygen(b"beta");
        let mut chain = ChainState::new();
        chain.faucet(alpha, bars(contrib_a.max(1))).unwrap();
        chain.faucet(beta, bars(contrib_b.max(1))).unwrap();
        let params = ChannelParams::new(
            alpha,
            beta,
            bars(contrib_a),
            bars(contrib_b),
            RelativeDelay::new(N).unwrap(),
        )
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let opened = open_channel(&mut chain, params, ka, kb, &mut rng).unwrap();
        chain.advance_blocks(1).unwrap();
        let (mut a, mut b) = (opened.a, opened.b);
        assert!(a.confirm_funding(&chain));
        assert!(b.confirm_funding(&chain));
        Fixture {
            chain,
            a,
            b,
            rng,
            alpha,
            beta,
        }
    }

    fn bet(f: &Fixture, doubter_stake: u64, backer_stake: u64, deadline: u64) -> Bet {
        Bet {
            prop: PropositionId::from_label("P"),
            doubter_stake: bars(doubter_stake),
            backer_stake: bars(backer_stake),
            deadline: AbsoluteHeight(deadline),
            backer: f.beta,
            doubter: f.alpha,
        }
    }

    #[test]
    fn first_commitments_lock_only_the_owner_balance() {
        let f = open(100, 100);
        let ca = f.a.build_commitment(Side::A, 1).unwrap();
        let ha = f.a.my_secrets[&1].hash();
        let delay = RelativeDelay::new(N).unwrap();
        assert_eq!(
            ca.outputs(),
            &[
                TxOutput {
                    amount: bars(100),
                    script: Script::htlc(ha, f.beta, delay, Continuation::PayToAddr(f.alpha))
                },
                TxOutput {
                    amount: bars(100),
                    script: Script::PayToAddr(f.beta)
                },
            ]
        );
        // Both parties build the same transaction for the same owner.
        assert_eq!(f.b.build_commitment(Side::A, 1).unwrap(), ca);
        let cb = f.b.build_commitment(Side::B, 1).unwrap();
        assert_eq!(cb.outputs()[0].script, Script::PayToAddr(f.alpha));
        assert!(matches!(&cb.outputs()[1].script, Script::Htlc(h) if h.claimant == f.alpha));
    }

    #[test]
    fn bet_moves_stakes_into_a_composed_output() {
        let mut f = open(100, 100);
        let b1 = bet(&f, 50, 10, 30);
        let steps = add_bet(&mut f.a, &mut f.b, b1.clone(), f.chain.height(), &mut f.rng).unwrap();
        assert_eq!(steps.len(), 8);
        assert_eq!(
            steps[0],
            Step::Propose {
                by: Side::A,
                revision: 2
            }
        );
        assert_eq!(f.a.revision(), 2);
        assert_eq!(f.b.revision(), 2);

        let ca = f.a.build_commitment(Side::A, 2).unwrap();
        let ha = f.a.my_secrets[&2].hash();
        let delay = RelativeDelay::new(N).unwrap();
        let ptlc = Ptlc::new(b1.prop, f.beta, AbsoluteHeight(30 + N), f.alpha).unwrap();
        assert_eq!(
            ca.outputs(),
            &[
                TxOutput {
                    amount: bars(50),
                    script: Script::htlc(ha, f.beta, delay, Continuation::PayToAddr(f.alpha))
                },
                TxOutput {
                    amount: bars(90),
                    script: Script::PayToAddr(f.beta)
                },
                TxOutput {
                    amount: bars(60),
                    script: Script::htlc(ha, f.beta, delay, Continuation::Ptlc(ptlc))
                },
            ]
        );

        settle_bet(
            &mut f.a,
            &mut f.b,
            b1.clone(),
            f.beta,
            f.chain.height(),
            &mut f.rng,
        )
        .unwrap();
        assert_eq!(
            (f.a.terms().balance_a, f.a.terms().balance_b),
            (bars(50), bars(150))
        );
        assert_eq!(
            settle_bet(
                &mut f.a,
                &mut f.b,
                b1,
                f.alpha,
                f.chain.height(),
                &mut f.rng
            ),
            Err(ChannelError::NoSuchBet)
        );
        f.a.check_invariants().unwrap();
        f.b.check_invariants().unwrap();
    }

    #[test]
    fn timeout_settlement_returns_pot_to_doubter() {
        let mut f = open(100, 100);
        let b1 = bet(&f, 50, 10, 30);
        add_bet(&mut f.a, &mut f.b, b1.clone(), 1, &mut f.rng).unwrap();
        settle_bet(&mut f.a, &mut f.b, b1, f.alpha, 30, &mut f.rng).unwrap();
        assert_eq!(
            (f.b.terms().balance_a, f.b.terms().balance_b),
            (bars(110), bars(90))
        );
    }

    #[test]
    fn funding_is_withheld_until_our_commitment_is_signed() {
        let (ka, alpha) = keygen(b"alpha");
        let (kb, beta) = keygen(b"beta");
        let mut chain = ChainState::new();
        chain.faucet(alpha, bars(100)).unwrap();
        chain.faucet(beta, bars(100)).unwrap();
        let params = ChannelParams::new(
            alpha,
            beta,
            bars(100),
            bars(100),
            RelativeDelay::new(N).unwrap(),
        )
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let inputs_a = select_inputs(&chain, &alpha, bars(100)).unwrap();
        let inputs_b = select_inputs(&chain, &beta, bars(100)).unwrap();
        let (mut a, offer) = ChannelState::initiate(params, ka, inputs_a, &mut rng).unwrap();
        let (b, accept) = ChannelState::respond(&offer, kb, inputs_b, &mut rng).unwrap();
        a.receive_open_accept(&accept).unwrap();
        assert_eq!(a.sign_funding(), Err(ChannelError::HostageRisk));
        assert_eq!(b.sign_funding(), Err(ChannelError::HostageRisk));
    }

    #[test]
    fn open_rejects_short_funds() {
        let (ka, alpha) = keygen(b"alpha");
        let (kb, beta) = keygen(b"beta");
        let mut chain = ChainState::new();
        chain.faucet(alpha, bars(10)).unwrap();
        chain.faucet(beta, bars(100)).unwrap();
        let params = ChannelParams::new(
            alpha,
            beta,
            bars(100),
            bars(100),
            RelativeDelay::new(N).unwrap(),
        )
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(matches!(
            open_channel(&mut chain, params, ka, kb, &mut rng),
            Err(ChannelError::InsufficientFunds)
        ));
    }

    #[test]
    fn update_errors() {
        let mut f = open(100, 100);
        let h = f.chain.height();
        assert_eq!(
            update_balance(&mut f.a, &mut f.b, bars(100), bars(101), h, &mut f.rng),
            Err(ChannelError::BalanceMismatch)
        );
        let (too_big, expired, small) = (bet(&f, 101, 1, 30), bet(&f, 1, 1, h), bet(&f, 1, 1, 30));
        assert_eq!(
            add_bet(&mut f.a, &mut f.b, too_big, h, &mut f.rng),
            Err(ChannelError::InsufficientBalance)
        );
        assert_eq!(
            add_bet(&mut f.a, &mut f.b, expired, h, &mut f.rng),
            Err(ChannelError::BetDeadlinePassed)
        );
        assert!(!f.a.has_pending_update() && !f.b.has_pending_update());
        assert_eq!(f.a.revision(), 1);
        add_bet(&mut f.a, &mut f.b, small, h, &mut f.rng).unwrap();
        assert_eq!(
            close_cooperative(&mut f.a, &mut f.b),
            Err(ChannelError::ActiveBetsRemain)
        );
    }

    #[test]
    fn cooperative_close_pays_current_balances() {
        let mut f = open(100, 100);
        update_balance(&mut f.a, &mut f.b, bars(70), bars(130), 1, &mut f.rng).unwrap();
        let tx = close_cooperative(&mut f.a, &mut f.b).unwrap();
        f.chain.submit_tx(tx.clone()).unwrap();
        f.chain.advance_blocks(1).unwrap();
        f.a.observe_close(&tx);
        f.b.observe_close(&tx);
        assert_eq!(f.a.status(), ChannelStatus::ClosedCooperative);
        assert_eq!(f.b.status(), ChannelStatus::ClosedCooperative);
        assert_eq!(f.chain.holdings(&f.alpha), bars(70));
        assert_eq!(f.chain.holdings(&f.beta), bars(130));
    }

    #[test]
    fn revoked_commitment_is_swept_by_the_counterparty() {
        let mut f = open(100, 100);
        update_balance(&mut f.a, &mut f.b, bars(50), bars(150), 1, &mut f.rng).unwrap();
        let stale = f.a.publish_revision(1).unwrap();
        f.chain.submit_tx(stale.clone()).unwrap();
        f.chain.advance_blocks(1).unwrap();
        assert_eq!(f.b.observe_close(&stale), Some((Side::A, 1)));
        assert_eq!(
            f.b.status(),
            ChannelStatus::Breached {
                by: Side::A,
                revision: 1
            }
        );
        let penalty = f.b.punish(&stale).unwrap().expect("revoked commitment");
        f.chain.submit_tx(penalty).unwrap();
        f.chain.advance_blocks(1).unwrap();
        assert_eq!(f.chain.holdings(&f.beta), bars(200));
        assert_eq!(f.chain.holdings(&f.alpha), Amount::ZERO);
        assert_eq!(f.chain.locked_total(), Amount::ZERO);
    }

    #[test]
    fn current_commitment_is_not_punishable() {
        let mut f = open(100, 100);
        update_balance(&mut f.a, &mut f.b, bars(50), bars(150), 1, &mut f.rng).unwrap();
        let current = f.a.close_unilateral().unwrap();
        assert_eq!(f.b.punish(&current), Ok(None));
        assert_eq!(
            f.b.sweep_revoked(&current),
            Err(ChannelError::NoRevealedSecret)
        );
        // Our own commitment is never a punishment target.
        let mine = f.b.signed_commitment(2).unwrap();
        assert_eq!(
            f.b.sweep_revoked(&mine),
            Err(ChannelError::NotCounterpartyCommitment)
        );
    }

    #[test]
    fn owner_reclaims_balance_after_delay() {
        let mut f = open(100, 100);
        let tx = f.a.close_unilateral().unwrap();
        f.chain.submit_tx(tx.clone()).unwrap();
        f.chain.advance_blocks(1).unwrap();
        f.a.observe_close(&tx);
        let none = BTreeMap::new();
        assert!(f.a.claimable(&f.chain, &none).is_empty());
        f.chain.advance_blocks(N - 2).unwrap();
        assert!(f.a.claimable(&f.chain, &none).is_empty());
        f.chain.advance_blocks(1).unwrap();
        let claims = f.a.claimable(&f.chain, &none);
        assert_eq!(claims.len(), 1);
        f.chain.submit_tx(claims[0].clone()).unwrap();
        f.chain.advance_blocks(1).unwrap();
        assert_eq!(f.chain.holdings(&f.alpha), bars(100));
    }

    #[test]
    fn bet_resolves_on_chain_by_proof_or_timeout() {
        for proven in [true, false] {
            let mut f = open(100, 100);
            let b1 = bet(&f, 50, 10, 30);
            add_bet(&mut f.a, &mut f.b, b1.clone(), 1, &mut f.rng).unwrap();
            let tx = f.b.close_unilateral().unwrap();
            let txid = f.chain.submit_tx(tx.clone()).unwrap();
            if proven {
                f.chain.register_proof(b1.prop);
            }
            f.chain.advance_blocks(1).unwrap();
            let bet_out = OutPoint::new(txid, 2);
            let (winner, loser) = if proven { (&f.b, &f.a) } else { (&f.a, &f.b) };
            assert!(matches!(
                winner.claim_bet_onchain(&f.chain, bet_out),
                Err(ChannelError::Eval(EvalError::DelayNotElapsed))
            ));
            f.chain.advance_blocks(N).unwrap();
            if !proven {
                assert!(matches!(
                    winner.claim_bet_onchain(&f.chain, bet_out),
                    Err(ChannelError::Eval(EvalError::TimeoutNotReached))
                ));
                f.chain.advance_blocks(30 + N - f.chain.height()).unwrap();
            }
            assert!(loser.claim_bet_onchain(&f.chain, bet_out).is_err());
            let claim = winner.claim_bet_onchain(&f.chain, bet_out).unwrap();
            f.chain.submit_tx(claim).unwrap();
            f.chain.advance_blocks(1).unwrap();
            let expected = if proven { (50, 150) } else { (110, 90) };
            let (fa, fb) = (&mut f.a, &mut f.b);
            fa.observe_close(&tx);
            fb.observe_close(&tx);
            let none = BTreeMap::new();
            for claim in fa
                .claimable(&f.chain, &none)
                .into_iter()
                .chain(fb.claimable(&f.chain, &none))
            {
                f.chain.submit_tx(claim).unwrap();
            }
            f.chain.advance_blocks(1).unwrap();
            assert_eq!(
                f.chain.holdings(&f.alpha),
                bars(expected.0),
                "proven={proven}"
            );
            assert_eq!(
                f.chain.holdings(&f.beta),
                bars(expected.1),
                "proven={proven}"
            );
        }
    }

    #[test]
    fn stalled_handshake_leaves_two_revisions_live() {
        let mut f = open(100, 100);
        let change = Change::SetBalances {
            balance_a: bars(90),
            balance_b: bars(110),
        };
        let hp = f.a.propose(change.clone(), 1, &mut f.rng).unwrap();
        let hq = f.b.accept(change, hp, 1, &mut f.rng).unwrap();
        f.a.receive_accept(hq).unwrap();
        let (r, s) = f.b.sign_counterparty_commitment().unwrap();
        f.a.receive_commitment_sig(r, s).unwrap();
        let (r, s) = f.a.sign_counterparty_commitment().unwrap();
        f.b.receive_commitment_sig(r, s).unwrap();
        // A's revocation has not reached B yet.
        let (m, secret) = f.a.revoke_previous().unwrap();
        assert_eq!(m, 1);
        assert!(!f.b.complete_update().unwrap());
        assert_eq!(f.b.publishable_revisions(), [1, 2].into_iter().collect());
        f.b.receive_revocation(m, secret).unwrap();
        f.b.receive_revocation(m, secret).unwrap();
        assert_eq!(
            f.b.receive_revocation(m, Secret([0; 32])),
            Err(ChannelError::BadRevocationSecret(1))
        );
    }

    #[test]
    fn both_proposing_at_once_is_refused() {
        let mut f = open(100, 100);
        let change = Change::SetBalances {
            balance_a: bars(90),
            balance_b: bars(110),
        };
        f.a.propose(change.clone(), 1, &mut f.rng).unwrap();
        assert_eq!(
            f.a.propose(change, 1, &mut f.rng),
            Err(ChannelError::HandshakeInProgress)
        );
        f.a.cancel_pending().unwrap();
        assert_eq!(f.a.revision(), 1);
        f.a.check_invariants().unwrap();
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn updates_preserve_capacity(ops in proptest::collection::vec((0u8..4, 0u64..120, 0u64..120), 1..12)) {
            let mut f = open(100, 100);
            let h = f.chain.height();
            let mut bets: Vec<Bet> = Vec::new();
            for (kind, x, y) in ops {
                let result = match kind {
                    0 => {
                        let locked = f.a.terms().locked().unwrap().atoms();
                        let free = bars(200).atoms() - locked;
                        let na = Amount::from_atoms(bars(x).atoms().min(free));
                        let nb = Amount::from_atoms(free - na.atoms());
                        update_balance(&mut f.a, &mut f.b, na, nb, h, &mut f.rng)
                    }
                    1 => {
                        let b = bet(&f, x % 60, y % 60, 50 + x);
                        let r = add_bet(&mut f.a, &mut f.b, b.clone(), h, &mut f.rng);
                        if r.is_ok() { bets.push(b); }
                        r
                    }
                    _ => match bets.pop() {
                        Some(b) => {
                            let w = if kind == 2 { f.alpha } else { f.beta };
                            settle_bet(&mut f.a, &mut f.b, b, w, h, &mut f.rng)
                        }
                        None => Ok(vec![]),
                    },
                };
                let _ = result;
                proptest::prop_assert_eq!(f.a.revision(), f.b.revision());
                proptest::prop_assert_eq!(f.a.terms(), f.b.terms());
                proptest::prop_assert_eq!(f.a.terms().total().unwrap(), bars(200));
                f.a.check_invariants().map_err(proptest::test_runner::TestCaseError::fail)?;
                f.b.check_invariants().map_err(proptest::test_runner::TestCaseError::fail)?;
                for owner in [Side::A, Side::B] {
                    let c = f.a.build_commitment(owner, f.a.revision()).unwrap();
                    proptest::prop_assert_eq!(c.tx.output_total().unwrap(), bars(200));
                }
            }
        }
    }
}
