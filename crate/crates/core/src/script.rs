//! The contract language: pay-to-address, 2-of-2 multisig, hashed timelock
//! contracts and proposition timelock contracts, plus the evaluator that
//! decides whether a witness satisfies a script.
//!
//! An htlc `h(lock, claimant, N, inner)` is spendable immediately by
//! `claimant` with the preimage of `lock`, or by satisfying `inner` once the
//! output has `N` confirmations. A ptlc `p(P, prover, T, refundee)` is
//! spendable by `prover` once `P` is proven on chain, or by `refundee` once
//! the chain height reaches `T`. Both ptlc branches may be live at once.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::crypto::{hash_secret, verify, Address, Digest, HashLock, PropositionId, Secret, Sig};

/// CSV-style relative delay, counted in confirmations. Always at least one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelativeDelay(u64);

impl RelativeDelay {
    pub fn new(blocks: u64) -> Result<Self, ScriptError> {
        if blocks == 0 {
            return Err(ScriptError::ZeroDelay);
        }
        Ok(RelativeDelay(blocks))
    }

    pub fn blocks(self) -> u64 {
        self.0
    }
}

/// CLTV-style absolute block height.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AbsoluteHeight(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScriptError {
    #[error("relative delay must be at least one block")]
    ZeroDelay,
    #[error("ptlc timeout must be at least height 1")]
    ZeroTimeout,
}

/// `p(prop, prover, timeout, refundee)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Ptlc {
    pub prop: PropositionId,
    pub prover: Address,
    pub timeout: AbsoluteHeight,
    pub refundee: Address,
}

impl Ptlc {
    pub fn new(
        prop: PropositionId,
        prover: Address,
        timeout: AbsoluteHeight,
        refundee: Address,
    ) -> Result<Self, ScriptError> {
        if timeout.0 == 0 {
            return Err(ScriptError::ZeroTimeout);
        }
        Ok(Ptlc {
            prop,
            prover,
            timeout,
            refundee,
        })
    }
}

/// What an htlc's delay branch pays into. Htlcs never nest.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Continuation {
    PayToAddr(Address),
    Ptlc(Ptlc),
}

/// `h(lock, claimant, delay, inner)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Htlc {
    pub lock: HashLock,
    pub claimant: Address,
    pub delay: RelativeDelay,
    pub inner: Continuation,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Script {
    PayToAddr(Address),
    Multisig2(Address, Address),
    Htlc(Htlc),
    Ptlc(Ptlc),
}

impl Script {
    pub fn htlc(
        lock: HashLock,
        claimant: Address,
        delay: RelativeDelay,
        inner: Continuation,
    ) -> Self {
        Script::Htlc(Htlc {
            lock,
            claimant,
            delay,
            inner,
        })
    }

    /// Checks invariants that the constructors enforce but public fields allow breaking.
    pub fn validate(&self) -> Result<(), ScriptError> {
        match self {
            Script::Ptlc(p)
            | Script::Htlc(Htlc {
                inner: Continuation::Ptlc(p),
                ..
            }) if p.timeout.0 == 0 => Err(ScriptError::ZeroTimeout),
            _ => Ok(()),
        }
    }

    /// The address paid when this is a plain pay-to-address output.
    pub fn pay_to(&self) -> Option<Address> {
        match self {
            Script::PayToAddr(a) => Some(*a),
            _ => None,
        }
    }

    /// Canonical encoding: a tag byte, then fields in declaration order,
    /// byte strings length-prefixed.
    pub fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Script::PayToAddr(a) => {
                out.push(0x01);
                put_bytes(out, &a.0);
            }
            Script::Multisig2(a, b) => {
                out.push(0x02);
                put_bytes(out, &a.0);
                put_bytes(out, &b.0);
            }
            Script::Htlc(h) => {
                out.push(0x03);
                put_bytes(out, &h.lock.0);
                put_bytes(out, &h.claimant.0);
                out.extend_from_slice(&h.delay.0.to_le_bytes());
                match &h.inner {
                    Continuation::PayToAddr(a) => Script::PayToAddr(*a).encode(out),
                    Continuation::Ptlc(p) => encode_ptlc(p, out),
                }
            }
            Script::Ptlc(p) => encode_ptlc(p, out),
        }
    }
}

fn encode_ptlc(p: &Ptlc, out: &mut Vec<u8>) {
    out.push(0x04);
    put_bytes(out, &p.prop.0);
    put_bytes(out, &p.prover.0);
    out.extend_from_slice(&p.timeout.0.to_le_bytes());
    put_bytes(out, &p.refundee.0);
}

pub(crate) fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe(&|a: &Address| a.short(), &|p: &PropositionId| p.short()))
    }
}

impl Script {
    /// Renders the contract notation `h(lock,x,N,y)` / `p(P,x,T,y)` with
    /// caller-supplied names for addresses and propositions.
    pub fn describe(
        &self,
        addr: &dyn Fn(&Address) -> String,
        prop: &dyn Fn(&PropositionId) -> String,
    ) -> String {
        let ptlc = |p: &Ptlc| {
            format!(
                "p({},{},{},{})",
                prop(&p.prop),
                addr(&p.prover),
                p.timeout.0,
                addr(&p.refundee)
            )
        };
        match self {
            Script::PayToAddr(a) => addr(a),
            Script::Multisig2(a, b) => format!("multisig({},{})", addr(a), addr(b)),
            Script::Ptlc(p) => ptlc(p),
            Script::Htlc(h) => {
                let inner = match &h.inner {
                    Continuation::PayToAddr(a) => addr(a),
                    Continuation::Ptlc(p) => ptlc(p),
                };
                format!(
                    "h({},{},{},{})",
                    h.lock.short(),
                    addr(&h.claimant),
                    h.delay.0,
                    inner
                )
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Witness {
    SigWitness(Sig),
    Sig2Witness {
        a: Option<Sig>,
        b: Option<Sig>,
    },
    /// htlc: preimage plus the claimant's signature.
    SecretBranch {
        secret: Secret,
        sig: Sig,
    },
    /// htlc: delay elapsed, then a witness for the continuation.
    DelayBranch(Box<Witness>),
    /// ptlc: proposition proven, signed by the prover.
    ProvenBranch(Sig),
    /// ptlc: timeout reached, signed by the refundee.
    TimeoutBranch(Sig),
}

impl Witness {
    pub fn delay(inner: Witness) -> Self {
        Witness::DelayBranch(Box::new(inner))
    }
}

/// Read access to the chain's proven-propositions registry.
pub trait ProvenLookup {
    fn is_proven(&self, prop: &PropositionId) -> bool;
}

impl ProvenLookup for BTreeSet<PropositionId> {
    fn is_proven(&self, prop: &PropositionId) -> bool {
        self.contains(prop)
    }
}

impl<F: Fn(&PropositionId) -> bool> ProvenLookup for F {
    fn is_proven(&self, prop: &PropositionId) -> bool {
        self(prop)
    }
}

pub struct EvalContext<'a> {
    pub tx_digest: Digest,
    pub utxo_creation_height: u64,
    pub chain_height: u64,
    pub proven: &'a dyn ProvenLookup,
}

impl EvalContext<'_> {
    /// Confirmations of the output being spent, counting its own block.
    pub fn confirmations(&self) -> u64 {
        (self.chain_height + 1).saturating_sub(self.utxo_creation_height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("secret does not hash to the lock")]
    BadSecret,
    #[error("required signature missing")]
    MissingSignature,
    #[error("signature invalid for the required address")]
    BadSignature,
    #[error("relative delay not elapsed")]
    DelayNotElapsed,
    #[error("proposition not proven on chain")]
    PropositionNotProven,
    #[error("timeout height not reached")]
    TimeoutNotReached,
    #[error("witness shape does not match script")]
    WitnessShapeMismatch,
}

fn check_sig(addr: &Address, sig: &Sig, ctx: &EvalContext<'_>) -> Result<(), EvalError> {
    if verify(addr, sig, &ctx.tx_digest) {
        Ok(())
    } else {
        Err(EvalError::BadSignature)
    }
}

fn check_opt_sig(
    addr: &Address,
    sig: &Option<Sig>,
    ctx: &EvalContext<'_>,
) -> Result<(), EvalError> {
    match sig {
        Some(sig) => check_sig(addr, sig, ctx),
        None => Err(EvalError::MissingSignature),
    }
}

fn eval_ptlc(p: &Ptlc, w: &Witness, ctx: &EvalContext<'_>) -> Result<(), EvalError> {
    match w {
        Witness::ProvenBranch(sig) => {
            if !ctx.proven.is_proven(&p.prop) {
                return Err(EvalError::PropositionNotProven);
            }
            check_sig(&p.prover, sig, ctx)
        }
        Witness::TimeoutBranch(sig) => {
            if ctx.chain_height < p.timeout.0 {
                return Err(EvalError::TimeoutNotReached);
            }
            check_sig(&p.refundee, sig, ctx)
        }
        _ => Err(EvalError::WitnessShapeMismatch),
    }
}

/// Succeeds exactly when `w` satisfies one of the spend conditions of `script`.
/// Errors name the first condition that failed.
pub fn eval(script: &Script, w: &Witness, ctx: &EvalContext<'_>) -> Result<(), EvalError> {
    match (script, w) {
        (Script::PayToAddr(addr), Witness::SigWitness(sig)) => check_sig(addr, sig, ctx),
        (Script::Multisig2(a, b), Witness::Sig2Witness { a: sa, b: sb }) => {
            check_opt_sig(a, sa, ctx)?;
            check_opt_sig(b, sb, ctx)
        }
        (Script::Htlc(h), Witness::SecretBranch { secret, sig }) => {
            if hash_secret(secret) != h.lock {
                return Err(EvalError::BadSecret);
            }
            check_sig(&h.claimant, sig, ctx)
        }
        (Script::Htlc(h), Witness::DelayBranch(inner)) => {
            if ctx.confirmations() < h.delay.0 {
                return Err(EvalError::DelayNotElapsed);
            }
            match (&h.inner, inner.as_ref()) {
                (Continuation::PayToAddr(addr), Witness::SigWitness(sig)) => {
                    check_sig(addr, sig, ctx)
                }
                (Continuation::Ptlc(p), inner) => eval_ptlc(p, inner, ctx),
                _ => Err(EvalError::WitnessShapeMismatch),
            }
        }
        (Script::Ptlc(p), w) => eval_ptlc(p, w, ctx),
        _ => Err(EvalError::WitnessShapeMismatch),
    }
}
