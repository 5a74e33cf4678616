//! Challenge/response authentication for control connections.
//!
//! Every CLI or daemon connection starts with a handshake: the server
//! issues a single-use 32-byte nonce, the client signs
//! `nonce || principal || server_id` with its private key, and the server
//! verifies the signature against the principal's key in the registry.
//! Nonces expire after 30 seconds, are consumed on success, and a consumed
//! nonce can never authenticate again, so a sniffed handshake replays to a
//! hard failure.
//!
//! The signature scheme is pluggable through [`SignatureScheme`]. The
//! built-in [`KeyedHashScheme`] is a deterministic stand-in (a keyed SHA-256
//! tag whose "public" key equals the key bytes) with known-answer vectors in
//! `testdata/signature_vectors.txt`; production wiring can drop in any real
//! public-key signature behind the same trait.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::{Clock, SimTime};
use crate::registry::Registry;

pub const NONCE_LEN: usize = 32;
pub const CHALLENGE_TTL: Duration = Duration::from_secs(30);
pub const MAX_OUTSTANDING: usize = 1024;

const SIG_DOMAIN: &[u8] = b"consrv-sig-v1";

pub trait SignatureScheme: Send + Sync {
    fn sign(&self, private_key: &[u8], message: &[u8]) -> Vec<u8>;
    fn verify(&self, public_key: &[u8], message: &[u8], signature: &[u8]) -> bool;
}

/// Deterministic keyed-hash scheme: `sig = SHA-256(domain || key || msg)`,
/// public key == key bytes. A stand-in, not public-key cryptography.
#[derive(Debug, Default, Clone, Copy)]
pub struct KeyedHashScheme;

impl SignatureScheme for KeyedHashScheme {
    fn sign(&self, private_key: &[u8], message: &[u8]) -> Vec<u8> {
        let mut h = Sha256::new();
        h.update(SIG_DOMAIN);
        h.update(private_key);
        h.update(message);
        h.finalize().to_vec()
    }

    fn verify(&self, public_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
        let expected = self.sign(public_key, message);
        // Fixed-length compare without early exit.
        if signature.len() != expected.len() {
            return false;
        }
        expected
            .iter()
            .zip(signature)
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            == 0
    }
}

/// Fresh 32-byte key.
pub fn generate_key(rng: &mut impl RngCore) -> Vec<u8> {
    let mut key = vec![0u8; 32];
    rng.fill_bytes(&mut key);
    key
}

/// Short key fingerprint: first 8 hex digits of SHA-256(public key).
pub fn fingerprint(public_key: &[u8]) -> String {
    let digest = Sha256::digest(public_key);
    digest[..4].iter().map(|b| format!("{b:02x}")).collect()
}

/// The exact bytes a client signs.
pub fn challenge_message(nonce: &[u8], principal: &str, server_id: &str) -> Vec<u8> {
    let mut msg = Vec::with_capacity(nonce.len() + principal.len() + server_id.len());
    msg.extend_from_slice(nonce);
    msg.extend_from_slice(principal.as_bytes());
    msg.extend_from_slice(server_id.as_bytes());
    msg
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Challenge {
    pub nonce: [u8; NONCE_LEN],
    pub server_id: String,
    pub issued_at: SimTime,
}

#[derive(Debug, Clone)]
pub struct Credential {
    pub principal: String,
    pub signature: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("authentication failed")]
    AuthFailed,
    #[error("challenge expired or never issued")]
    StaleChallenge,
    #[error("challenge already consumed")]
    ReplayedChallenge,
}

struct StoreInner {
    outstanding: HashMap<[u8; NONCE_LEN], (SimTime, String)>,
    order: VecDeque<[u8; NONCE_LEN]>,
    consumed: HashSet<[u8; NONCE_LEN]>,
    consumed_order: VecDeque<[u8; NONCE_LEN]>,
}

/// Outstanding-nonce store with atomic check-and-consume.
pub struct ChallengeStore {
    clock: Arc<Clock>,
    inner: Mutex<StoreInner>,
    ttl: Duration,
    capacity: usize,
}

impl ChallengeStore {
    pub fn new(clock: Arc<Clock>) -> ChallengeStore {
        ChallengeStore {
            clock,
            inner: Mutex::new(StoreInner {
                outstanding: HashMap::new(),
                order: VecDeque::new(),
                consumed: HashSet::new(),
                consumed_order: VecDeque::new(),
            }),
            ttl: CHALLENGE_TTL,
            capacity: MAX_OUTSTANDING,
        }
    }

    pub fn issue(&self, server_id: &str) -> Challenge {
        let mut nonce = [0u8; NONCE_LEN];
        rand::thread_rng().fill_bytes(&mut nonce);
        let issued_at = self.clock.now();
        let mut inner = self.inner.lock().unwrap();
        while inner.outstanding.len() >= self.capacity {
            // Evict the oldest live challenge.
            match inner.order.pop_front() {
                Some(old) => {
                    inner.outstanding.remove(&old);
                }
                None => break,
            }
        }
        inner
            .outstanding
            .insert(nonce, (issued_at, server_id.to_string()));
        inner.order.push_back(nonce);
        Challenge {
            nonce,
            server_id: server_id.to_string(),
            issued_at,
        }
    }

    /// Verify a credential against an issued challenge and the registry's
    /// key for the principal. Consumes the nonce on success; a failed
    /// signature leaves the challenge outstanding.
    pub fn authenticate(
        &self,
        challenge_nonce: &[u8],
        credential: &Credential,
        registry: &Registry,
        scheme: &dyn SignatureScheme,
    ) -> Result<String, AuthError> {
        let nonce: [u8; NONCE_LEN] = challenge_nonce
            .try_into()
            .map_err(|_| AuthError::StaleChallenge)?;
        let mut inner = self.inner.lock().unwrap();
        if inner.consumed.contains(&nonce) {
            return Err(AuthError::ReplayedChallenge);
        }
        let (issued_at, server_id) = inner
            .outstanding
            .get(&nonce)
            .cloned()
            .ok_or(AuthError::StaleChallenge)?;
        if self.clock.now().since(issued_at) > self.ttl {
            inner.outstanding.remove(&nonce);
            return Err(AuthError::StaleChallenge);
        }
        let key = registry
            .key_for(&credential.principal)
            .ok_or(AuthError::AuthFailed)?;
        let message = challenge_message(&nonce, &credential.principal, &server_id);
        if !scheme.verify(&key.public_key, &message, &credential.signature) {
            return Err(AuthError::AuthFailed);
        }
        inner.outstanding.remove(&nonce);
        inner.consumed.insert(nonce);
        inner.consumed_order.push_back(nonce);
        while inner.consumed.len() > self.capacity * 4 {
            if let Some(old) = inner.consumed_order.pop_front() {
                inner.consumed.remove(&old);
            }
        }
        Ok(credential.principal.clone())
    }

    #[cfg(test)]
    fn outstanding_len(&self) -> usize {
        self.inner.lock().unwrap().outstanding.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::Registry;
    use base64::Engine as _;

    fn registry_with_key(principal: &str, key: &[u8]) -> Registry {
        let b64 = base64::engine::general_purpose::STANDARD.encode(key);
        Registry::from_sources(
            "",
            "",
            &format!("key {principal} {} {b64}\n", fingerprint(key)),
        )
        .unwrap()
    }

    fn sign_challenge(ch: &Challenge, principal: &str, key: &[u8]) -> Credential {
        let msg = challenge_message(&ch.nonce, principal, &ch.server_id);
        Credential {
            principal: principal.to_string(),
            signature: KeyedHashScheme.sign(key, &msg),
        }
    }

    #[test]
    fn consecutive_challenges_have_distinct_nonces() {
        let clock = Clock::manual();
        let store = ChallengeStore::new(clock);
        let a = store.issue("consrv01");
        let b = store.issue("consrv01");
        assert_ne!(a.nonce, b.nonce);
    }

    #[test]
    fn valid_signature_authenticates_and_consumes() {
        let clock = Clock::manual();
        let store = ChallengeStore::new(Arc::clone(&clock));
        let key = b"0123456789abcdef0123456789abcdef".to_vec();
        let reg = registry_with_key("ahorvath", &key);
        let ch = store.issue("consrv01");
        let cred = sign_challenge(&ch, "ahorvath", &key);
        let principal = store
            .authenticate(&ch.nonce, &cred, &reg, &KeyedHashScheme)
            .unwrap();
        assert_eq!(principal, "ahorvath");
        // Same (challenge, credential) again is a replay.
        assert_eq!(
            store.authenticate(&ch.nonce, &cred, &reg, &KeyedHashScheme),
            Err(AuthError::ReplayedChallenge)
        );
    }

    #[test]
    fn wrong_key_fails_without_consuming() {
        let clock = Clock::manual();
        let store = ChallengeStore::new(Arc::clone(&clock));
        let key = b"0123456789abcdef0123456789abcdef".to_vec();
        let other = b"ffffffffffffffffffffffffffffffff".to_vec();
        let reg = registry_with_key("ahorvath", &key);
        let ch = store.issue("consrv01");
        let bad = sign_challenge(&ch, "ahorvath", &other);
        assert_eq!(
            store.authenticate(&ch.nonce, &bad, &reg, &KeyedHashScheme),
            Err(AuthError::AuthFailed)
        );
        // The challenge is still live for a correct retry.
        let good = sign_challenge(&ch, "ahorvath", &key);
        assert!(store
            .authenticate(&ch.nonce, &good, &reg, &KeyedHashScheme)
            .is_ok());
    }

    #[test]
    fn expired_challenge_is_stale() {
        let clock = Clock::manual();
        let store = ChallengeStore::new(Arc::clone(&clock));
        let key = b"0123456789abcdef0123456789abcdef".to_vec();
        let reg = registry_with_key("ahorvath", &key);
        let ch = store.issue("consrv01");
        clock.advance(Duration::from_secs(31));
        let cred = sign_challenge(&ch, "ahorvath", &key);
        assert_eq!(
            store.authenticate(&ch.nonce, &cred, &reg, &KeyedHashScheme),
            Err(AuthError::StaleChallenge)
        );
    }

    #[test]
    fn outstanding_set_is_bounded_and_evicts_oldest() {
        let clock = Clock::manual();
        let store = ChallengeStore::new(Arc::clone(&clock));
        let key = b"0123456789abcdef0123456789abcdef".to_vec();
        let reg = registry_with_key("ahorvath", &key);
        let first = store.issue("consrv01");
        for _ in 0..MAX_OUTSTANDING {
            store.issue("consrv01");
        }
        assert_eq!(store.outstanding_len(), MAX_OUTSTANDING);
        let cred = sign_challenge(&first, "ahorvath", &key);
        assert_eq!(
            store.authenticate(&first.nonce, &cred, &reg, &KeyedHashScheme),
            Err(AuthError::StaleChallenge)
        );
    }

    #[test]
    fn credential_binds_to_one_principal() {
        let clock = Clock::manual();
        let store = ChallengeStore::new(Arc::clone(&clock));
        let key = b"0123456789abcdef0123456789abcdef".to_vec();
        // Both principals share the same key bytes; the signed message still
        // binds the principal name, so a credential cannot cross over.
        let b64 = base64::engine::general_purpose::STANDARD.encode(&key);
        let reg = Registry::from_sources(
            "",
            "",
            &format!("key alice aa00aa00 {b64}\nkey bob bb00bb00 {b64}\n"),
        )
        .unwrap();
        let ch = store.issue("consrv01");
        let msg = challenge_message(&ch.nonce, "alice", &ch.server_id);
        let cred_as_bob = Credential {
            principal: "bob".into(),
            signature: KeyedHashScheme.sign(&key, &msg),
        };
        assert_eq!(
            store.authenticate(&ch.nonce, &cred_as_bob, &reg, &KeyedHashScheme),
            Err(AuthError::AuthFailed)
        );
    }

    #[test]
    fn concurrent_authenticate_consumes_exactly_once() {
        let clock = Clock::manual();
        let store = Arc::new(ChallengeStore::new(Arc::clone(&clock)));
        let key = b"0123456789abcdef0123456789abcdef".to_vec();
        let reg = Arc::new(registry_with_key("ahorvath", &key));
        let ch = store.issue("consrv01");
        let cred = sign_challenge(&ch, "ahorvath", &key);
        let mut handles = Vec::new();
        for _ in 0..8 {
            let store = Arc::clone(&store);
            let reg = Arc::clone(&reg);
            let cred = cred.clone();
            let nonce = ch.nonce;
            handles.push(std::thread::spawn(move || {
                store
                    .authenticate(&nonce, &cred, &reg, &KeyedHashScheme)
                    .is_ok()
            }));
        }
        let wins = handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .filter(|ok| *ok)
            .count();
        assert_eq!(wins, 1);
    }

    #[test]
    fn keyed_hash_scheme_matches_published_vectors() {
        let vectors = include_str!("../testdata/signature_vectors.txt");
        let mut checked = 0;
        for line in vectors.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            assert_eq!(fields.len(), 3, "vector format: key msg sig");
            let key = hex_decode(fields[0]);
            let msg = if fields[1] == "-" {
                Vec::new()
            } else {
                hex_decode(fields[1])
            };
            let want = hex_decode(fields[2]);
            let got = KeyedHashScheme.sign(&key, &msg);
            assert_eq!(got, want, "vector mismatch for key {}", fields[0]);
            assert!(KeyedHashScheme.verify(&key, &msg, &want));
            checked += 1;
        }
        assert_eq!(checked, 4);
    }

    fn hex_decode(s: &str) -> Vec<u8> {
        (0..s.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
            .collect()
    }
}
