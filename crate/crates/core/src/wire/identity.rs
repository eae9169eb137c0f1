//! Gate signing identities and verification-key lookup.

use std::collections::BTreeMap;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use parking_lot::RwLock;
use rand::rngs::OsRng;
use rand::{CryptoRng, RngCore};

use super::WireError;
use crate::model::GateAddress;
use crate::resolution::SharedRegistry;

/// A gate's address together with its private signing key.
#[derive(Clone)]
pub struct GateIdentity {
    address: GateAddress,
    signing: SigningKey,
}

impl std::fmt::Debug for GateIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GateIdentity")
            .field("address", &self.address.to_string())
            .field("key", &self.verification_key_hex())
            .finish()
    }
}

impl GateIdentity {
    pub fn generate(address: GateAddress) -> Self {
        Self::generate_from(address, &mut OsRng)
    }

    pub fn generate_from<R: CryptoRng + RngCore>(address: GateAddress, rng: &mut R) -> Self {
        Self {
            address: address.gate_only(),
            signing: SigningKey::generate(rng),
        }
    }

    /// From a hex-encoded 32-byte secret.
    pub fn from_secret_hex(address: GateAddress, secret: &str) -> Result<Self, WireError> {
        let bytes: [u8; 32] = hex::decode(secret)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| WireError::InvalidKey(format!("secret for {address} is not 32 hex bytes")))?;
        Ok(Self {
            address: address.gate_only(),
            signing: SigningKey::from_bytes(&bytes),
        })
    }

    pub fn address(&self) -> &GateAddress {
        &self.address
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn verification_key_hex(&self) -> String {
        hex::encode(self.verifying_key().as_bytes())
    }

    pub fn secret_hex(&self) -> String {
        hex::encode(self.signing.to_bytes())
    }

    pub fn sign(&self, message: &[u8]) -> String {
        hex::encode(self.signing.sign(message).to_bytes())
    }
}

pub fn parse_verifying_key(hex_key: &str) -> Result<VerifyingKey, WireError> {
    let bytes: [u8; 32] = hex::decode(hex_key)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| WireError::InvalidKey("verification key is not 32 hex bytes".into()))?;
    VerifyingKey::from_bytes(&bytes).map_err(|e| WireError::InvalidKey(e.to_string()))
}

/// Checks a hex signature; malformed input simply fails.
pub fn verify_signature(key: &VerifyingKey, message: &[u8], sig_hex: &str) -> bool {
    let Some(bytes) = hex::decode(sig_hex).ok().and_then(|b| <[u8; 64]>::try_from(b).ok()) else {
        return false;
    };
    key.verify(message, &Signature::from_bytes(&bytes)).is_ok()
}

/// Maps a gate address to the key its signatures must verify under.
pub trait KeyLookup: Send + Sync {
    fn verification_key(&self, gate: &GateAddress) -> Option<VerifyingKey>;
}

/// A flat address-to-key table.
#[derive(Debug, Default)]
pub struct KeyDirectory {
    keys: RwLock<BTreeMap<GateAddress, VerifyingKey>>,
}

impl KeyDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, gate: &GateAddress, key: VerifyingKey) {
        self.keys.write().insert(gate.gate_only(), key);
    }
}

impl KeyLookup for KeyDirectory {
    fn verification_key(&self, gate: &GateAddress) -> Option<VerifyingKey> {
        self.keys.read().get(&gate.gate_only()).copied()
    }
}

/// Looks keys up in the registry of the gate's domain, falling back to a
/// directory for endpoints that are not gates (registry services).
pub struct RegistryKeyring {
    registries: BTreeMap<String, SharedRegistry>,
    extra: KeyDirectory,
}

impl RegistryKeyring {
    pub fn new<I: IntoIterator<Item = SharedRegistry>>(registries: I) -> Self {
        Self {
            registries: registries
                .into_iter()
                .map(|r| {
                    let d = r.read().domain().to_string();
                    (d, r)
                })
                .collect(),
            extra: KeyDirectory::new(),
        }
    }

    pub fn extra(&self) -> &KeyDirectory {
        &self.extra
    }
}

impl KeyLookup for RegistryKeyring {
    fn verification_key(&self, gate: &GateAddress) -> Option<VerifyingKey> {
        let from_registry = self.registries.get(gate.domain()).and_then(|r| {
            r.read()
                .verification_key(gate.gate())
                .and_then(|k| parse_verifying_key(k).ok())
        });
        from_registry.or_else(|| self.extra.verification_key(gate))
    }
}
