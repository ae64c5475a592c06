//! Simulated trusted execution boundary.
//!
//! Everything that would live inside SGX in a hardware deployment is gathered
//! here: the sealing key, the witness signing key, quote generation, the
//! attestation service, and the trusted-memory budget that drives block
//! paging. Key material never leaves this module; callers get seal/unseal/
//! sign operations, not keys.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chacha20poly1305::aead::{Aead, Payload};
use chacha20poly1305::{ChaCha20Poly1305, KeyInit, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::RngCore;
use sha2::Sha256;
use thiserror::Error;

use crate::model::{digest, Digest};
use crate::value::{canonical_decode, canonical_encode, Value};

const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;

/// 32-byte build identifier; equal builds produce equal measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Measurement(pub [u8; 32]);

impl Measurement {
    /// Derives the measurement from a build-identifier string, the stand-in
    /// for a hash of the enclave code.
    pub fn from_build_id(build_id: &str) -> Self {
        Measurement(digest(build_id.as_bytes()).0)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let b = hex::decode(s.trim()).ok()?;
        Some(Measurement(b.try_into().ok()?))
    }
}

/// Signed statement of an enclave's measurement plus caller-chosen report
/// data (the handshake binds its transcript digest here).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quote {
    pub measurement: Measurement,
    pub report_data: [u8; 64],
    pub group_id: u32,
    pub signature: [u8; 64],
}

impl Quote {
    fn signed_body(measurement: &Measurement, report_data: &[u8; 64], group_id: u32) -> Vec<u8> {
        canonical_encode(&Value::map_from([
            ("group", Value::Int(group_id as i64)),
            ("measurement", Value::Bytes(measurement.0.to_vec())),
            ("report", Value::Bytes(report_data.to_vec())),
        ]))
    }

    pub fn to_value(&self) -> Value {
        Value::map_from([
            ("group", Value::Int(self.group_id as i64)),
            ("measurement", Value::Bytes(self.measurement.0.to_vec())),
            ("report", Value::Bytes(self.report_data.to_vec())),
            ("sig", Value::Bytes(self.signature.to_vec())),
        ])
    }

    pub fn from_value(v: &Value) -> Option<Quote> {
        let m = v.as_map()?;
        let measurement: [u8; 32] = m.get("measurement")?.as_bytes()?.try_into().ok()?;
        let report: [u8; 64] = m.get("report")?.as_bytes()?.try_into().ok()?;
        let group = m.get("group")?.as_int()?;
        let sig: [u8; 64] = m.get("sig")?.as_bytes()?.try_into().ok()?;
        Some(Quote {
            measurement: Measurement(measurement),
            report_data: report,
            group_id: u32::try_from(group).ok()?,
            signature: sig,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("authentication failure: sealed data is corrupt, tampered, or bound to a different context")]
pub struct AuthenticationFailure;

/// Why an attestation service refused a quote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    BadSignature,
    UnknownMeasurement,
    RevokedGroup,
    ServiceUnreachable(String),
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::BadSignature => "bad_signature",
            RejectReason::UnknownMeasurement => "unknown_measurement",
            RejectReason::RevokedGroup => "revoked_group",
            RejectReason::ServiceUnreachable(_) => "service_unreachable",
        }
    }
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::ServiceUnreachable(e) => write!(f, "service_unreachable: {e}"),
            other => f.write_str(other.code()),
        }
    }
}

/// Shared trust anchor for a network of nodes: the quoting group's key, the
/// measurement whitelist, and the group revocation list. Mirrors what a
/// public attestation service would hold; it never sees application data,
/// only quotes.
#[derive(Clone)]
pub struct AttestationConfig {
    pub group_id: u32,
    pub group_seed: [u8; 32],
    pub whitelist: Vec<Measurement>,
    pub revoked_groups: Vec<u32>,
}

impl AttestationConfig {
    pub fn new_random_group(whitelist: Vec<Measurement>) -> Self {
        let mut seed = [0u8; 32];
        rand::rng().fill_bytes(&mut seed);
        AttestationConfig {
            group_id: 0,
            group_seed: seed,
            whitelist,
            revoked_groups: Vec::new(),
        }
    }

    pub fn load_whitelist(path: &Path) -> std::io::Result<Vec<Measurement>> {
        let text = std::fs::read_to_string(path)?;
        Ok(text.lines().filter_map(Measurement::from_hex).collect())
    }

    pub fn load_revocations(path: &Path) -> std::io::Result<Vec<u32>> {
        let text = std::fs::read_to_string(path)?;
        Ok(text.lines().filter_map(|l| l.trim().parse().ok()).collect())
    }
}

/// In-process attestation service.
pub struct AttestationStub {
    group_id: u32,
    group_verify: VerifyingKey,
    group_sign: SigningKey,
    whitelist: Vec<Measurement>,
    revoked_groups: Vec<u32>,
}

impl AttestationStub {
    pub fn new(cfg: &AttestationConfig) -> Self {
        let group_sign = SigningKey::from_bytes(&cfg.group_seed);
        AttestationStub {
            group_id: cfg.group_id,
            group_verify: group_sign.verifying_key(),
            group_sign,
            whitelist: cfg.whitelist.clone(),
            revoked_groups: cfg.revoked_groups.clone(),
        }
    }

    /// Hands out the group signing key for enclave provisioning, standing in
    /// for the key material fused into a CPU.
    fn group_credentials(&self) -> (u32, SigningKey) {
        (self.group_id, self.group_sign.clone())
    }

    pub fn verify_quote(&self, q: &Quote) -> Result<Measurement, RejectReason> {
        let body = Quote::signed_body(&q.measurement, &q.report_data, q.group_id);
        let sig = Signature::from_bytes(&q.signature);
        if q.group_id != self.group_id || self.group_verify.verify(&body, &sig).is_err() {
            return Err(RejectReason::BadSignature);
        }
        if self.revoked_groups.contains(&q.group_id) {
            return Err(RejectReason::RevokedGroup);
        }
        if !self.whitelist.contains(&q.measurement) {
            return Err(RejectReason::UnknownMeasurement);
        }
        Ok(q.measurement)
    }
}

/// How a node reaches the attestation service: in process, or over TCP when
/// the service runs standalone.
#[derive(Clone)]
pub enum AttestationClient {
    InProcess(Arc<AttestationStub>),
    Remote(String),
}

impl AttestationClient {
    pub fn verify_quote(&self, q: &Quote) -> Result<Measurement, RejectReason> {
        match self {
            AttestationClient::InProcess(stub) => stub.verify_quote(q),
            AttestationClient::Remote(addr) => remote_verify(addr, q),
        }
    }
}

fn write_frame(stream: &mut TcpStream, payload: &[u8]) -> std::io::Result<()> {
    stream.write_all(&(payload.len() as u32).to_le_bytes())?;
    stream.write_all(payload)
}

fn read_frame(stream: &mut TcpStream) -> std::io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > 1 << 20 {
        return Err(std::io::Error::other("oversized attestation frame"));
    }
    let mut buf = vec![0u8; len];
    stream.read_exact(&mut buf)?;
    Ok(buf)
}

fn remote_verify(addr: &str, q: &Quote) -> Result<Measurement, RejectReason> {
    let unreachable = |e: std::io::Error| RejectReason::ServiceUnreachable(e.to_string());
    let mut stream = TcpStream::connect(addr).map_err(unreachable)?;
    write_frame(&mut stream, &canonical_encode(&q.to_value())).map_err(unreachable)?;
    let resp = read_frame(&mut stream).map_err(unreachable)?;
    let v = canonical_decode(&resp)
        .map_err(|e| RejectReason::ServiceUnreachable(e.to_string()))?;
    let m = v
        .as_map()
        .ok_or_else(|| RejectReason::ServiceUnreachable("bad response".into()))?;
    match m.get("status").and_then(Value::as_str) {
        Some("accepted") => {
            let bytes = m
                .get("measurement")
                .and_then(Value::as_bytes)
                .ok_or_else(|| RejectReason::ServiceUnreachable("bad response".into()))?;
            let arr: [u8; 32] = bytes
                .try_into()
                .map_err(|_| RejectReason::ServiceUnreachable("bad response".into()))?;
            Ok(Measurement(arr))
        }
        _ => Err(match m.get("reason").and_then(Value::as_str) {
            Some("revoked_group") => RejectReason::RevokedGroup,
            Some("unknown_measurement") => RejectReason::UnknownMeasurement,
            _ => RejectReason::BadSignature,
        }),
    }
}

/// Runs the attestation stub as a standalone TCP service. Accepts quote
/// frames and answers verdicts until the listener fails.
pub fn serve_attestation(listener: TcpListener, stub: Arc<AttestationStub>) {
    for stream in listener.incoming() {
        let Ok(mut stream) = stream else { continue };
        let stub = stub.clone();
        std::thread::spawn(move || {
            while let Ok(req) = read_frame(&mut stream) {
                let reply = match canonical_decode(&req).ok().and_then(|v| Quote::from_value(&v)) {
                    None => Value::map_from([
                        ("status", Value::str("rejected")),
                        ("reason", Value::str("bad_signature")),
                    ]),
                    Some(q) => match stub.verify_quote(&q) {
                        Ok(m) => Value::map_from([
                            ("status", Value::str("accepted")),
                            ("measurement", Value::Bytes(m.0.to_vec())),
                        ]),
                        Err(r) => Value::map_from([
                            ("status", Value::str("rejected")),
                            ("reason", Value::str(r.code())),
                        ]),
                    },
                };
                if write_frame(&mut stream, &canonical_encode(&reply)).is_err() {
                    break;
                }
            }
        });
    }
}

/// The simulated enclave: sealing, quoting, and witness signing, with key
/// material derived from a node-local seed (the stand-in for CPU fuses).
pub struct Enclave {
    sealing: ChaCha20Poly1305,
    witness_key: SigningKey,
    measurement: Measurement,
    group_id: u32,
    group_sign: SigningKey,
    sign_count: AtomicU64,
}

impl Enclave {
    /// Initializes the enclave from a 32-byte node seed and the attestation
    /// trust anchor. The same seed always yields the same keys, so sealed
    /// data survives restarts.
    pub fn new(node_seed: [u8; 32], build_id: &str, att: &AttestationConfig) -> Arc<Enclave> {
        let hk = Hkdf::<Sha256>::new(Some(b"credb-enclave-v1"), &node_seed);
        let mut seal_key = [0u8; 32];
        hk.expand(b"sealing", &mut seal_key).expect("hkdf expand");
        let mut sign_seed = [0u8; 32];
        hk.expand(b"witness-signing", &mut sign_seed)
            .expect("hkdf expand");
        let stub = AttestationStub::new(att);
        let (group_id, group_sign) = stub.group_credentials();
        Arc::new(Enclave {
            sealing: ChaCha20Poly1305::new_from_slice(&seal_key).expect("key size"),
            witness_key: SigningKey::from_bytes(&sign_seed),
            measurement: Measurement::from_build_id(build_id),
            group_id,
            group_sign,
            sign_count: AtomicU64::new(0),
        })
    }

    pub fn random_seed() -> [u8; 32] {
        let mut seed = [0u8; 32];
        rand::rng().fill_bytes(&mut seed);
        seed
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    /// Public half of the witness signing key; safe to publish.
    pub fn witness_public_key(&self) -> [u8; 32] {
        self.witness_key.verifying_key().to_bytes()
    }

    /// AEAD-encrypts `plaintext` with `context` bound as associated data. A
    /// ciphertext sealed under one context never unseals under another.
    pub fn seal(&self, plaintext: &[u8], context: &[u8]) -> Vec<u8> {
        let mut nonce = [0u8; NONCE_LEN];
        rand::rng().fill_bytes(&mut nonce);
        let ct = self
            .sealing
            .encrypt(
                &Nonce::from(nonce),
                Payload {
                    msg: plaintext,
                    aad: context,
                },
            )
            .expect("seal never fails on owned buffers");
        let mut out = Vec::with_capacity(NONCE_LEN + ct.len());
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&ct);
        out
    }

    pub fn unseal(&self, sealed: &[u8], context: &[u8]) -> Result<Vec<u8>, AuthenticationFailure> {
        if sealed.len() < NONCE_LEN + TAG_LEN {
            return Err(AuthenticationFailure);
        }
        let (nonce, ct) = sealed.split_at(NONCE_LEN);
        let nonce: [u8; NONCE_LEN] = nonce.try_into().unwrap();
        self.sealing
            .decrypt(
                &Nonce::from(nonce),
                Payload {
                    msg: ct,
                    aad: context,
                },
            )
            .map_err(|_| AuthenticationFailure)
    }

    /// Produces a quote over this enclave's measurement carrying
    /// caller-chosen report data, signed by the provisioned group key.
    pub fn make_quote(&self, report_data: [u8; 64]) -> Quote {
        let body = Quote::signed_body(&self.measurement, &report_data, self.group_id);
        let signature = self.group_sign.sign(&body).to_bytes();
        Quote {
            measurement: self.measurement,
            report_data,
            group_id: self.group_id,
            signature,
        }
    }

    /// Signs a witness digest. Deterministic; one call per certified commit.
    pub fn sign_witness_digest(&self, d: &Digest) -> [u8; 64] {
        self.sign_count.fetch_add(1, Ordering::Relaxed);
        self.witness_key.sign(d.as_bytes()).to_bytes()
    }

    /// Number of witness signatures produced since startup.
    pub fn signature_count(&self) -> u64 {
        self.sign_count.load(Ordering::Relaxed)
    }
}

/// Verifies an Ed25519 signature over a witness digest.
pub fn verify_witness_signature(public_key: &[u8; 32], d: &Digest, sig: &[u8; 64]) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(public_key) else {
        return false;
    };
    vk.verify(d.as_bytes(), &Signature::from_bytes(sig)).is_ok()
}

/// Trusted-memory accounting shared by the block cache. Capacity is the
/// simulated EPC size; resident tracks sealed blocks currently held in
/// trusted memory.
pub struct EpcBudget {
    capacity: u64,
    resident: AtomicU64,
}

impl EpcBudget {
    pub fn new(capacity_bytes: u64) -> Self {
        EpcBudget {
            capacity: capacity_bytes,
            resident: AtomicU64::new(0),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn resident(&self) -> u64 {
        self.resident.load(Ordering::Relaxed)
    }

    pub fn add(&self, bytes: u64) {
        self.resident.fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn sub(&self, bytes: u64) {
        self.resident.fetch_sub(bytes, Ordering::Relaxed);
    }

    pub fn over_budget(&self) -> bool {
        self.resident() > self.capacity
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_enclave() -> (Arc<Enclave>, Arc<AttestationStub>) {
        let m = Measurement::from_build_id("test-build");
        let cfg = AttestationConfig::new_random_group(vec![m]);
        let enclave = Enclave::new([1u8; 32], "test-build", &cfg);
        (enclave, Arc::new(AttestationStub::new(&cfg)))
    }

    #[test]
    fn seal_round_trip() {
        let (e, _) = test_enclave();
        let ct = e.seal(b"payload", b"ctx");
        assert_eq!(e.unseal(&ct, b"ctx").unwrap(), b"payload");
    }

    #[test]
    fn unseal_rejects_wrong_context() {
        let (e, _) = test_enclave();
        let ct = e.seal(b"payload", b"ctx-1");
        assert_eq!(e.unseal(&ct, b"ctx-2"), Err(AuthenticationFailure));
    }

    #[test]
    fn unseal_rejects_any_bit_flip() {
        let (e, _) = test_enclave();
        let ct = e.seal(b"a fairly long plaintext for flipping", b"ctx");
        let mut rng = rand::rng();
        for _ in 0..100 {
            let mut tampered = ct.clone();
            let pos = rng.next_u32() as usize % tampered.len();
            let bit = 1u8 << (rng.next_u32() % 8);
            tampered[pos] ^= bit;
            assert_eq!(e.unseal(&tampered, b"ctx"), Err(AuthenticationFailure));
        }
    }

    #[test]
    fn short_ciphertext_rejected() {
        let (e, _) = test_enclave();
        assert_eq!(e.unseal(&[0u8; 8], b"ctx"), Err(AuthenticationFailure));
    }

    #[test]
    fn quote_carries_measurement_and_verifies() {
        let (e, stub) = test_enclave();
        let q = e.make_quote([7u8; 64]);
        assert_eq!(q.measurement, e.measurement());
        assert_eq!(stub.verify_quote(&q), Ok(e.measurement()));
    }

    #[test]
    fn tampered_report_data_rejected() {
        let (e, stub) = test_enclave();
        let mut q = e.make_quote([7u8; 64]);
        q.report_data[0] ^= 1;
        assert_eq!(stub.verify_quote(&q), Err(RejectReason::BadSignature));
    }

    #[test]
    fn unknown_measurement_rejected() {
        let cfg = AttestationConfig::new_random_group(vec![]);
        let e = Enclave::new([2u8; 32], "other-build", &cfg);
        let stub = AttestationStub::new(&cfg);
        let q = e.make_quote([0u8; 64]);
        assert_eq!(
            stub.verify_quote(&q),
            Err(RejectReason::UnknownMeasurement)
        );
    }

    #[test]
    fn revoked_group_rejected() {
        let m = Measurement::from_build_id("b");
        let mut cfg = AttestationConfig::new_random_group(vec![m]);
        cfg.revoked_groups.push(cfg.group_id);
        let e = Enclave::new([3u8; 32], "b", &cfg);
        let stub = AttestationStub::new(&cfg);
        let q = e.make_quote([0u8; 64]);
        assert_eq!(stub.verify_quote(&q), Err(RejectReason::RevokedGroup));
    }

    #[test]
    fn witness_signature_verifies_and_counts() {
        let (e, _) = test_enclave();
        let d = digest(b"body");
        assert_eq!(e.signature_count(), 0);
        let sig = e.sign_witness_digest(&d);
        assert_eq!(e.signature_count(), 1);
        assert!(verify_witness_signature(&e.witness_public_key(), &d, &sig));
        let other = digest(b"other");
        assert!(!verify_witness_signature(
            &e.witness_public_key(),
            &other,
            &sig
        ));
    }

    #[test]
    fn remote_attestation_service_round_trip() {
        let (e, stub) = test_enclave();
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        std::thread::spawn(move || serve_attestation(listener, stub));
        let client = AttestationClient::Remote(addr);
        let q = e.make_quote([9u8; 64]);
        assert_eq!(client.verify_quote(&q), Ok(e.measurement()));
        let mut bad = q.clone();
        bad.signature[0] ^= 1;
        assert_eq!(client.verify_quote(&bad), Err(RejectReason::BadSignature));
    }
}
