//! Three-tier trust chain (administrator, tenant, user) plus engine
//! identities issued by the administrator.
//!
//! Identity namespace:
//!
//! ```text
//! /OGB/admin                      trust anchor
//! /OGB/tenants/<tid>              issued by the anchor
//! /OGB/tenants/<tid>/users/<uid>  issued by the tenant
//! /OGB/engines/<id>               issued by the anchor
//! ```
//!
//! Certificates are published by the certificate repository under
//! `ndn:/OGB-SYS/certs/<identity components>`.

use std::collections::{HashMap, HashSet};
use std::sync::RwLock;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ed25519_dalek::{Signature, Signer as _, SigningKey, Verifier as _, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::naming::{parse, Name, ParsedName};

pub const SYS_ROOT: &str = "OGB-SYS";
pub const CERTS: &str = "certs";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TrustError {
    #[error("{issuer} may not issue a certificate for {subject}")]
    Unauthorized { issuer: String, subject: String },
    #[error("unrecognised identity name {0}")]
    UnknownIdentity(String),
    #[error("malformed key material: {0}")]
    BadKey(String),
}

/// Why a signed packet was refused.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "kebab-case", tag = "reason", content = "detail")]
pub enum Rejection {
    #[error("certificate unavailable: {0}")]
    CertUnavailable(String),
    #[error("rule {0} violated")]
    Rule(String),
    #[error("signature does not match content")]
    Integrity,
    #[error("certificate chain invalid: {0}")]
    Chain(String),
    #[error("packet carries no signature")]
    Unsigned,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Role {
    Admin,
    Tenant { tid: String },
    User { tid: String, uid: String },
    Engine { id: String },
}

impl Role {
    pub fn of(identity: &Name) -> Option<Role> {
        let c: Vec<&str> = identity.components().iter().map(String::as_str).collect();
        match c.as_slice() {
            ["OGB", "admin"] => Some(Role::Admin),
            ["OGB", "tenants", tid] => Some(Role::Tenant { tid: tid.to_string() }),
            ["OGB", "tenants", tid, "users", uid] => Some(Role::User { tid: tid.to_string(), uid: uid.to_string() }),
            ["OGB", "engines", id] => Some(Role::Engine { id: id.to_string() }),
            _ => None,
        }
    }
}

pub fn admin_identity() -> Name {
    Name::new(["OGB", "admin"]).unwrap()
}

pub fn tenant_identity(tid: &str) -> Name {
    Name::new(["OGB", "tenants", tid]).unwrap()
}

pub fn user_identity(tid: &str, uid: &str) -> Name {
    Name::new(["OGB", "tenants", tid, "users", uid]).unwrap()
}

pub fn engine_identity(id: &str) -> Name {
    Name::new(["OGB", "engines", id]).unwrap()
}

pub fn cert_repo_prefix() -> Name {
    Name::new([SYS_ROOT, CERTS]).unwrap()
}

/// Name under which the repository serves the certificate of `identity`.
pub fn cert_repo_name(identity: &Name) -> Name {
    cert_repo_prefix().join(identity.components().iter().cloned())
}

/// Inverse of [`cert_repo_name`].
pub fn identity_from_repo_name(name: &Name) -> Option<Name> {
    let prefix = cert_repo_prefix();
    if prefix.is_prefix_of(name) && name.len() > prefix.len() {
        Name::new(name.components()[prefix.len()..].iter().cloned()).ok()
    } else {
        None
    }
}

#[derive(Clone)]
pub struct KeyPair {
    key: SigningKey,
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "KeyPair({})", B64.encode(self.public_key()))
    }
}

impl KeyPair {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        KeyPair { key: SigningKey::from_bytes(&seed) }
    }

    pub fn generate<R: rand::RngCore>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    pub fn seed(&self) -> [u8; 32] {
        self.key.to_bytes()
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.key.verifying_key().to_bytes()
    }

    pub fn sign(&self, bytes: &[u8]) -> Vec<u8> {
        self.key.sign(bytes).to_bytes().to_vec()
    }
}

mod b64 {
    use super::B64;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        B64.decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    pub identity: Name,
    #[serde(rename = "publicKeyBase64", with = "b64")]
    pub public_key: Vec<u8>,
    #[serde(rename = "issuerKeyLocator")]
    pub issuer_key_locator: Name,
    #[serde(rename = "signatureBase64", with = "b64")]
    pub signature: Vec<u8>,
}

impl Certificate {
    fn signed_bytes(identity: &Name, public_key: &[u8], issuer: &Name) -> Vec<u8> {
        let mut b = b"CERT\0".to_vec();
        b.extend_from_slice(identity.to_string().as_bytes());
        b.push(0);
        b.extend_from_slice(public_key);
        b.push(0);
        b.extend_from_slice(issuer.to_string().as_bytes());
        b
    }

    /// Self-signed anchor for the administrator key.
    pub fn anchor(admin: &KeyPair) -> Certificate {
        let identity = admin_identity();
        let pk = admin.public_key().to_vec();
        let signature = admin.sign(&Self::signed_bytes(&identity, &pk, &identity));
        Certificate { identity: identity.clone(), public_key: pk, issuer_key_locator: identity, signature }
    }

    /// A certificate signed by `signer` claiming issuance from `issuer`
    /// without any authorization check. Used to build forged chains.
    pub fn unchecked(identity: Name, public_key: [u8; 32], issuer: Name, signer: &KeyPair) -> Certificate {
        let signature = signer.sign(&Self::signed_bytes(&identity, &public_key, &issuer));
        Certificate { identity, public_key: public_key.to_vec(), issuer_key_locator: issuer, signature }
    }

    /// Whether `issuer` signed this certificate.
    pub fn issued_by(&self, issuer: &Certificate) -> bool {
        self.issuer_key_locator == issuer.identity && self.verify_signature(&issuer.public_key)
    }

    fn verify_signature(&self, issuer_key: &[u8]) -> bool {
        verify_raw(issuer_key, &Self::signed_bytes(&self.identity, &self.public_key, &self.issuer_key_locator), &self.signature)
    }
}

fn verify_raw(public_key: &[u8], bytes: &[u8], signature: &[u8]) -> bool {
    let Ok(pk) = <[u8; 32]>::try_from(public_key) else { return false };
    let Ok(vk) = VerifyingKey::from_bytes(&pk) else { return false };
    let Ok(sig) = Signature::from_slice(signature) else { return false };
    vk.verify(bytes, &sig).is_ok()
}

/// Key plus certificate of a principal.
#[derive(Debug, Clone)]
pub struct Credentials {
    pub cert: Certificate,
    pub key: KeyPair,
}

impl Credentials {
    pub fn identity(&self) -> &Name {
        &self.cert.identity
    }

    pub fn role(&self) -> Option<Role> {
        Role::of(&self.cert.identity)
    }

    pub fn admin(key: KeyPair) -> Credentials {
        Credentials { cert: Certificate::anchor(&key), key }
    }

    pub fn sign(&self, name: &Name, payload: &[u8]) -> TrustEnvelope {
        TrustEnvelope {
            key_locator: self.cert.identity.clone(),
            signature: self.key.sign(&envelope_bytes(name, payload)),
        }
    }

    /// Issues a certificate for `subject` holding `public_key`.
    pub fn issue(&self, subject: &Name, public_key: [u8; 32]) -> Result<Certificate, TrustError> {
        let issuer_role = self.role().ok_or_else(|| TrustError::UnknownIdentity(self.identity().to_string()))?;
        let subject_role = Role::of(subject).ok_or_else(|| TrustError::UnknownIdentity(subject.to_string()))?;
        let allowed = match (&issuer_role, &subject_role) {
            (Role::Admin, Role::Tenant { .. }) | (Role::Admin, Role::Engine { .. }) => true,
            (Role::Tenant { tid }, Role::User { tid: t, .. }) => tid == t,
            _ => false,
        };
        if !allowed {
            return Err(TrustError::Unauthorized { issuer: self.identity().to_string(), subject: subject.to_string() });
        }
        Ok(Certificate::unchecked(subject.clone(), public_key, self.identity().clone(), &self.key))
    }

    /// Issues a certificate for a fresh key and returns the new principal.
    pub fn issue_new<R: rand::RngCore>(&self, subject: &Name, rng: &mut R) -> Result<Credentials, TrustError> {
        let key = KeyPair::generate(rng);
        let cert = self.issue(subject, key.public_key())?;
        Ok(Credentials { cert, key })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustEnvelope {
    #[serde(rename = "keyLocator")]
    pub key_locator: Name,
    #[serde(rename = "signatureBase64", with = "b64")]
    pub signature: Vec<u8>,
}

/// Bytes covered by an envelope: the canonical name, a NUL, then the payload.
pub fn envelope_bytes(name: &Name, payload: &[u8]) -> Vec<u8> {
    let text = name.to_string();
    let mut b = Vec::with_capacity(text.len() + 1 + payload.len());
    b.extend_from_slice(text.as_bytes());
    b.push(0);
    b.extend_from_slice(payload);
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PacketKind {
    TileInterest,
    DataContent,
    TileContent,
    IpResContent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignerRule {
    /// Signer is a user certified by the tenant named in the packet.
    TenantUser,
    /// Signer is the user named in the packet, certified by the packet's tenant.
    Owner,
    /// Signer is an engine certified by the administrator.
    Engine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    #[serde(rename = "appliesTo")]
    pub applies_to: PacketKind,
    pub signer: SignerRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatorRules {
    pub rules: Vec<Rule>,
}

impl Default for ValidatorRules {
    fn default() -> Self {
        let r = |id: &str, applies_to, signer| Rule { id: id.into(), applies_to, signer };
        ValidatorRules {
            rules: vec![
                r("tile-interest-tenant", PacketKind::TileInterest, SignerRule::TenantUser),
                r("data-owner", PacketKind::DataContent, SignerRule::Owner),
                r("tile-engine", PacketKind::TileContent, SignerRule::Engine),
                r("ipres-engine", PacketKind::IpResContent, SignerRule::Engine),
            ],
        }
    }
}

pub enum CheckOutcome {
    Accept,
    Reject(Rejection),
    NeedCert(Name),
}

/// Tenant and user components extracted from an OGB name.
fn name_owner(name: &Name) -> Option<(String, Option<String>)> {
    match parse(name).ok()? {
        ParsedName::Segment { base, .. } => name_owner(&base),
        ParsedName::Data(d) => Some((d.tid, Some(d.uid))),
        ParsedName::Tile(t) => Some((t.tid, None)),
        ParsedName::TilePrefix(_) | ParsedName::IpRes(_) => Some((String::new(), None)),
    }
}

/// Evaluates signatures against the anchor and the configured rules.
///
/// Fetched certificates are kept in a pool; a certificate becomes trusted
/// only after its chain has been walked to the anchor.
pub struct Validator {
    anchor: Certificate,
    rules: ValidatorRules,
    pool: RwLock<HashMap<Name, Certificate>>,
    trusted: RwLock<HashMap<Name, Vec<u8>>>,
    verified_sigs: RwLock<HashSet<[u8; 32]>>,
}

impl Validator {
    pub fn new(anchor: Certificate, rules: ValidatorRules) -> Self {
        let mut trusted = HashMap::new();
        trusted.insert(anchor.identity.clone(), anchor.public_key.clone());
        Validator {
            anchor,
            rules,
            pool: RwLock::new(HashMap::new()),
            trusted: RwLock::new(trusted),
            verified_sigs: RwLock::new(HashSet::new()),
        }
    }

    pub fn anchor(&self) -> &Certificate {
        &self.anchor
    }

    pub fn rules(&self) -> &ValidatorRules {
        &self.rules
    }

    /// Adds a fetched certificate to the pool. The first copy of a name wins.
    pub fn add_certificate(&self, cert: Certificate) {
        self.pool.write().unwrap().entry(cert.identity.clone()).or_insert(cert);
    }

    pub fn knows(&self, identity: &Name) -> bool {
        self.trusted.read().unwrap().contains_key(identity) || self.pool.read().unwrap().contains_key(identity)
    }

    /// Resolves the public key of `identity`, walking its chain to the anchor.
    fn trusted_key(&self, identity: &Name, depth: usize) -> Result<Vec<u8>, CheckOutcome> {
        if let Some(k) = self.trusted.read().unwrap().get(identity) {
            return Ok(k.clone());
        }
        if depth > 4 {
            return Err(CheckOutcome::Reject(Rejection::Chain("chain too long".into())));
        }
        let cert = self.pool.read().unwrap().get(identity).cloned();
        let Some(cert) = cert else { return Err(CheckOutcome::NeedCert(identity.clone())) };
        let chain = |msg: &str| CheckOutcome::Reject(Rejection::Chain(format!("{identity}: {msg}")));
        let expected_issuer = match Role::of(identity) {
            Some(Role::Tenant { .. }) | Some(Role::Engine { .. }) => admin_identity(),
            Some(Role::User { tid, .. }) => tenant_identity(&tid),
            // A second admin certificate is never accepted; only the anchor.
            Some(Role::Admin) | None => return Err(chain("identity cannot be certified")),
        };
        if cert.issuer_key_locator != expected_issuer {
            return Err(chain("issued outside its namespace"));
        }
        let issuer_key = self.trusted_key(&expected_issuer, depth + 1)?;
        if !cert.verify_signature(&issuer_key) {
            return Err(chain("issuer signature invalid"));
        }
        self.trusted.write().unwrap().insert(identity.clone(), cert.public_key.clone());
        Ok(cert.public_key)
    }

    fn rule_holds(&self, rule: SignerRule, signer: &Name, packet: &Name) -> bool {
        let Some(role) = Role::of(signer) else { return false };
        let Some((ptid, puid)) = name_owner(packet) else { return false };
        match (rule, role) {
            (SignerRule::TenantUser, Role::User { tid, .. }) => tid == ptid,
            (SignerRule::Owner, Role::User { tid, uid }) => tid == ptid && puid.as_deref() == Some(uid.as_str()),
            (SignerRule::Engine, Role::Engine { .. }) => true,
            _ => false,
        }
    }

    /// Single validation step; may ask for a missing certificate.
    pub fn check(&self, kind: PacketKind, name: &Name, payload: &[u8], envelope: Option<&TrustEnvelope>) -> CheckOutcome {
        let Some(env) = envelope else { return CheckOutcome::Reject(Rejection::Unsigned) };
        for rule in self.rules.rules.iter().filter(|r| r.applies_to == kind) {
            if !self.rule_holds(rule.signer, &env.key_locator, name) {
                return CheckOutcome::Reject(Rejection::Rule(rule.id.clone()));
            }
        }
        let key = match self.trusted_key(&env.key_locator, 0) {
            Ok(k) => k,
            Err(outcome) => return outcome,
        };
        let bytes = envelope_bytes(name, payload);
        let digest = {
            let mut h = Sha256::new();
            h.update(&key);
            h.update(&env.signature);
            h.update(&bytes);
            <[u8; 32]>::from(h.finalize())
        };
        if self.verified_sigs.read().unwrap().contains(&digest) {
            return CheckOutcome::Accept;
        }
        if !verify_raw(&key, &bytes, &env.signature) {
            return CheckOutcome::Reject(Rejection::Integrity);
        }
        self.verified_sigs.write().unwrap().insert(digest);
        CheckOutcome::Accept
    }

    /// Checks a packet outside the OGB namespace that must be signed by `signer`.
    pub fn check_signed_by(&self, signer: &Name, name: &Name, payload: &[u8], envelope: Option<&TrustEnvelope>) -> CheckOutcome {
        let Some(env) = envelope else { return CheckOutcome::Reject(Rejection::Unsigned) };
        if &env.key_locator != signer {
            return CheckOutcome::Reject(Rejection::Rule(format!("signer must be {signer}")));
        }
        match self.trusted_key(signer, 0) {
            Ok(key) if verify_raw(&key, &envelope_bytes(name, payload), &env.signature) => CheckOutcome::Accept,
            Ok(_) => CheckOutcome::Reject(Rejection::Integrity),
            Err(outcome) => outcome,
        }
    }

    /// Full validation, fetching missing certificates through `fetch`.
    pub fn verify(
        &self,
        kind: PacketKind,
        name: &Name,
        payload: &[u8],
        envelope: Option<&TrustEnvelope>,
        fetch: &mut dyn FnMut(&Name) -> Option<Certificate>,
    ) -> Result<(), Rejection> {
        loop {
            match self.check(kind, name, payload, envelope) {
                CheckOutcome::Accept => return Ok(()),
                CheckOutcome::Reject(r) => return Err(r),
                CheckOutcome::NeedCert(id) => match fetch(&id) {
                    Some(cert) if cert.identity == id => self.add_certificate(cert),
                    _ => return Err(Rejection::CertUnavailable(id.to_string())),
                },
            }
        }
    }
}

/// Certificates served under `ndn:/OGB-SYS/certs`.
#[derive(Debug, Default, Clone)]
pub struct CertRepository {
    certs: HashMap<Name, Certificate>,
}

impl CertRepository {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&mut self, cert: Certificate) {
        self.certs.insert(cert.identity.clone(), cert);
    }

    pub fn get(&self, identity: &Name) -> Option<&Certificate> {
        self.certs.get(identity)
    }

    pub fn len(&self) -> usize {
        self.certs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.certs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Certificate> {
        self.certs.values()
    }
}
