//! Hashes, secrets, keys and signatures.
//!
//! Signatures are Ed25519. An [`Address`] is the truncated SHA-256 of a public
//! key, so a signature carries its public key and verification checks both the
//! key-to-address binding and the signature itself.

use std::fmt;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use rand::RngCore;
use sha2::{Digest as _, Sha256};

pub const ADDRESS_LEN: usize = 20;

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// Hashes several byte strings as one message.
pub fn sha256_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    hasher.finalize().into()
}

macro_rules! byte_id {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            /// First four bytes in hex, for logs.
            pub fn short(&self) -> String {
                hex::encode(&self.0[..4])
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.short())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&hex::encode(self.0))
            }
        }
    };
}

byte_id!(Secret, 32);
byte_id!(HashLock, 32);
byte_id!(Digest, 32);
byte_id!(Address, ADDRESS_LEN);
byte_id!(PropositionId, 32);

impl Secret {
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Secret(bytes)
    }

    pub fn hash(&self) -> HashLock {
        hash_secret(self)
    }
}

/// SHA-256 of the 32-byte secret.
pub fn hash_secret(secret: &Secret) -> HashLock {
    HashLock(sha256(&secret.0))
}

impl Address {
    pub fn from_public_key(key: &[u8; 32]) -> Self {
        let digest = sha256(key);
        let mut id = [0u8; ADDRESS_LEN];
        id.copy_from_slice(&digest[..ADDRESS_LEN]);
        Address(id)
    }
}

impl PropositionId {
    /// The hash root standing in for a proposition named by `label`.
    pub fn from_label(label: &str) -> Self {
        PropositionId(sha256_parts(&[b"proposition:", label.as_bytes()]))
    }
}

#[derive(Clone)]
pub struct PrivKey(SigningKey);

impl fmt::Debug for PrivKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrivKey({})", self.address().short())
    }
}

impl PrivKey {
    pub fn public_key(&self) -> [u8; 32] {
        self.0.verifying_key().to_bytes()
    }

    pub fn address(&self) -> Address {
        Address::from_public_key(&self.public_key())
    }
}

/// A signature together with the public key that produced it.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Sig {
    pub public_key: [u8; 32],
    pub bytes: [u8; 64],
}

impl fmt::Debug for Sig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sig({}..)", hex::encode(&self.bytes[..4]))
    }
}

/// Deterministic keypair from an arbitrary seed.
pub fn keygen(seed: &[u8]) -> (PrivKey, Address) {
    let key = PrivKey(SigningKey::from_bytes(&sha256_parts(&[b"keygen:", seed])));
    let addr = key.address();
    (key, addr)
}

pub fn sign(key: &PrivKey, digest: &Digest) -> Sig {
    Sig {
        public_key: key.public_key(),
        bytes: key.0.sign(&digest.0).to_bytes(),
    }
}

pub fn verify(addr: &Address, sig: &Sig, digest: &Digest) -> bool {
    if Address::from_public_key(&sig.public_key) != *addr {
        return false;
    }
    let Ok(key) = VerifyingKey::from_bytes(&sig.public_key) else {
        return false;
    };
    key.verify(&digest.0, &ed25519_dalek::Signature::from_bytes(&sig.bytes))
        .is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_secret_hash_matches_reference_sha256() {
        // sha256 of 32 zero bytes, from coreutils sha256sum.
        let expected = "66687aadf862bd776c8fc18b8e9f8e20089714856ee233b3902a591d0d5f2925";
        assert_eq!(hash_secret(&Secret([0; 32])).to_string(), expected);
    }

    #[test]
    fn preimage_fixture() {
        // Secret 0x01..0x20; digest computed with Python's hashlib.
        let mut bytes = [0u8; 32];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = i as u8 + 1;
        }
        assert_eq!(
            hash_secret(&Secret(bytes)).to_string(),
            "ae216c2ef5247a3782c135efa279a3e4cdc61094270f5d2be58c6204b7a612c9"
        );
    }

    #[test]
    fn random_secrets_have_distinct_hashes() {
        let mut rng = rand::thread_rng();
        let hashes: std::collections::BTreeSet<_> =
            (0..256).map(|_| Secret::random(&mut rng).hash()).collect();
        assert_eq!(hashes.len(), 256);
    }

    #[test]
    fn keygen_is_deterministic() {
        let (_, a1) = keygen(b"alice");
        let (_, a2) = keygen(b"alice");
        let (_, b) = keygen(b"bob");
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
    }

    #[test]
    fn sign_verify_roundtrip_and_rejections() {
        let (alice, alice_addr) = keygen(b"alice");
        let (_, bob_addr) = keygen(b"bob");
        let digest = Digest(sha256(b"tx"));
        let sig = sign(&alice, &digest);
        assert!(verify(&alice_addr, &sig, &digest));
        assert!(!verify(&bob_addr, &sig, &digest));

        let mut other = digest;
        other.0[0] ^= 1;
        assert!(!verify(&alice_addr, &sig, &other));

        let mut flipped = sig;
        flipped.bytes[10] ^= 0x80;
        assert!(!verify(&alice_addr, &flipped, &digest));
    }
}
