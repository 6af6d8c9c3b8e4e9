use std::collections::HashMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdentityKind {
    User,
    #[default]
    Component,
    Domain,
}

/// Identity as written in an identity file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Identity {
    pub subject_id: String,
    #[serde(default)]
    pub kind: IdentityKind,
    pub secret: String,
}

impl Identity {
    pub fn new(subject_id: impl Into<String>, kind: IdentityKind, secret: impl Into<String>) -> Self {
        Self {
            subject_id: subject_id.into(),
            kind,
            secret: secret.into(),
        }
    }
}

/// Stored form: the secret is kept only as a digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StoredIdentity {
    pub subject_id: String,
    pub kind: IdentityKind,
    pub secret_digest: String,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Token {
    pub value: String,
    pub subject_id: String,
    pub issued_at: i64,
    pub ttl: u64,
}

impl Token {
    pub fn is_valid_at(&self, now_ms: i64) -> bool {
        now_ms < self.issued_at + self.ttl as i64 * 1000
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdmError {
    #[error("bad credentials")]
    BadCredentials,
    #[error("subject {0} already exists")]
    DuplicateSubject(String),
}

pub fn digest_secret(secret: &str) -> String {
    hex(&Sha256::digest(secret.as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// 128 random bits from the OS generator, hex encoded.
pub fn fresh_token_value() -> String {
    let mut bytes = [0u8; 16];
    rand::rngs::OsRng.fill_bytes(&mut bytes);
    hex(&bytes)
}

#[derive(Debug, Default)]
pub struct IdentityStore {
    identities: HashMap<String, StoredIdentity>,
    tokens: HashMap<String, Token>,
}

impl IdentityStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_identity(&mut self, identity: &Identity) -> Result<StoredIdentity, IdmError> {
        if self.identities.contains_key(&identity.subject_id) {
            return Err(IdmError::DuplicateSubject(identity.subject_id.clone()));
        }
        let stored = StoredIdentity {
            subject_id: identity.subject_id.clone(),
            kind: identity.kind,
            secret_digest: digest_secret(&identity.secret),
            version: 1,
        };
        self.identities.insert(stored.subject_id.clone(), stored.clone());
        Ok(stored)
    }

    pub fn has_subject(&self, subject_id: &str) -> bool {
        self.identities.contains_key(subject_id)
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = self.identities.keys().cloned().collect();
        out.sort();
        out
    }

    pub fn issue(&mut self, subject_id: &str, secret: &str, now_ms: i64, ttl: u64) -> Result<Token, IdmError> {
        match self.identities.get(subject_id) {
            Some(id) if id.secret_digest == digest_secret(secret) => {}
            _ => return Err(IdmError::BadCredentials),
        }
        let token = Token {
            value: fresh_token_value(),
            subject_id: subject_id.to_owned(),
            issued_at: now_ms,
            ttl,
        };
        self.tokens.insert(token.value.clone(), token.clone());
        Ok(token)
    }

    pub fn validate(&self, value: &str, now_ms: i64) -> Option<&str> {
        self.tokens
            .get(value)
            .filter(|t| t.is_valid_at(now_ms))
            .map(|t| t.subject_id.as_str())
    }

    /// Last-writer-wins on version; returns whether state changed.
    pub fn apply_identity(&mut self, incoming: StoredIdentity) -> bool {
        match self.identities.get(&incoming.subject_id) {
            Some(current) if current.version >= incoming.version => false,
            _ => {
                self.identities.insert(incoming.subject_id.clone(), incoming);
                true
            }
        }
    }

    /// Tokens are immutable once issued.
    pub fn apply_token(&mut self, token: Token) -> bool {
        if self.tokens.contains_key(&token.value) {
            return false;
        }
        self.tokens.insert(token.value.clone(), token);
        true
    }

    pub fn purge_expired(&mut self, now_ms: i64) -> usize {
        let before = self.tokens.len();
        self.tokens.retain(|_, t| t.is_valid_at(now_ms));
        before - self.tokens.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> IdentityStore {
        let mut s = IdentityStore::new();
        s.add_identity(&Identity::new("alice", IdentityKind::User, "pw")).unwrap();
        s
    }

    #[test]
    fn issue_and_validate() {
        let mut s = store();
        let t = s.issue("alice", "pw", 0, 3600).unwrap();
        assert_eq!(t.value.len(), 32);
        assert_eq!(s.validate(&t.value, 1000), Some("alice"));
    }

    #[test]
    fn wrong_secret_rejected() {
        let mut s = store();
        assert_eq!(s.issue("alice", "nope", 0, 60), Err(IdmError::BadCredentials));
        assert_eq!(s.issue("bob", "pw", 0, 60), Err(IdmError::BadCredentials));
    }

    #[test]
    fn two_issuances_distinct_and_valid() {
        let mut s = store();
        let a = s.issue("alice", "pw", 0, 60).unwrap();
        let b = s.issue("alice", "pw", 0, 60).unwrap();
        assert_ne!(a.value, b.value);
        assert!(s.validate(&a.value, 0).is_some() && s.validate(&b.value, 0).is_some());
    }

    #[test]
    fn expiry_and_garbage() {
        let mut s = store();
        let t = s.issue("alice", "pw", 0, 10).unwrap();
        assert!(s.validate(&t.value, 9_999).is_some());
        assert!(s.validate(&t.value, 10_000).is_none());
        assert!(s.validate("0123456789abcdef0123456789abcdef", 0).is_none());
        assert_eq!(s.purge_expired(10_000), 1);
    }

    #[test]
    fn duplicate_subject_rejected() {
        let mut s = store();
        assert!(s.add_identity(&Identity::new("alice", IdentityKind::User, "x")).is_err());
    }

    #[test]
    fn replicated_token_applies_once() {
        let mut a = store();
        let mut b = IdentityStore::new();
        let t = a.issue("alice", "pw", 0, 60).unwrap();
        assert!(b.apply_token(t.clone()));
        assert!(!b.apply_token(t.clone()));
        assert_eq!(b.validate(&t.value, 0), Some("alice"));
    }
}
