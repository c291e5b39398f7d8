//! Mutually-attested secret migration between two simulated enclaves:
//! a four-step Diffie-Hellman exchange where each side authenticates the
//! peer by deriving its measurement from the shared MARS section, run
//! over a channel with pluggable drop/replay/tamper adversaries.

use crate::attest::{AttestError, Platform, Report, MAC_CONSTRUCTION, REPORT_WIRE_LEN};
use crate::build::final_measurement;
use crate::derive::{derive_measurement, DeriveError, MageView};
use crate::image::EnclaveImage;
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const NONCE_LEN: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("operation requires state {expected}, runtime is in {actual:?}")]
    WrongState {
        expected: &'static str,
        actual: SessionState,
    },
    #[error("session aborted: {0:?}")]
    Aborted(AbortReason),
    #[error("malformed message: {0}")]
    MessageFormat(String),
    #[error("peer public key has unexpected length {0}")]
    BadPublicKey(usize),
    #[error(transparent)]
    Derive(#[from] DeriveError),
    #[error(transparent)]
    Attest(#[from] AttestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortReason {
    /// Peer's derived measurement does not match the report.
    Identity,
    /// Report MAC verification failed.
    Auth,
    /// A bound hash, digest or authenticated decryption failed.
    Integrity,
    /// Stale nonce: message from another session.
    Replay,
    /// Expected message never arrived (logical step budget).
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Idle,
    AwaitB,
    AwaitSecret,
    Done,
    Aborted(AbortReason),
}

// ---------------------------------------------------------------------------
// Key exchange

/// Abstract keypair generation + shared-secret combine.
pub trait KeyExchange {
    fn name(&self) -> &'static str;
    /// Returns (private, public).
    fn generate(&self, rng: &mut dyn RngCore) -> (Vec<u8>, Vec<u8>);
    fn shared_secret(&self, private: &[u8], peer_public: &[u8]) -> Result<Vec<u8>, ProtocolError>;
}

/// Default instantiation: X25519.
pub struct X25519Kex;

impl KeyExchange for X25519Kex {
    fn name(&self) -> &'static str {
        "x25519"
    }

    fn generate(&self, rng: &mut dyn RngCore) -> (Vec<u8>, Vec<u8>) {
        let mut private = [0u8; 32];
        rng.fill_bytes(&mut private);
        let public = x25519_dalek::x25519(private, x25519_dalek::X25519_BASEPOINT_BYTES);
        (private.to_vec(), public.to_vec())
    }

    fn shared_secret(&self, private: &[u8], peer_public: &[u8]) -> Result<Vec<u8>, ProtocolError> {
        let private: [u8; 32] = private
            .try_into()
            .map_err(|_| ProtocolError::BadPublicKey(private.len()))?;
        let public: [u8; 32] = peer_public
            .try_into()
            .map_err(|_| ProtocolError::BadPublicKey(peer_public.len()))?;
        Ok(x25519_dalek::x25519(private, public).to_vec())
    }
}

/// Deterministic small-group instantiation for reproducible fixtures:
/// classic g^x mod p with p = 2^64 - 59, g = 5. Not for real use.
pub struct ToyGroupKex;

const TOY_P: u64 = 0xffff_ffff_ffff_ffc5;
const TOY_G: u64 = 5;

fn toy_pow(base: u64, exp: u64) -> u64 {
    let mut acc: u128 = 1;
    let mut b: u128 = base as u128 % TOY_P as u128;
    let mut e = exp;
    while e > 0 {
        if e & 1 == 1 {
            acc = acc * b % TOY_P as u128;
        }
        b = b * b % TOY_P as u128;
        e >>= 1;
    }
    acc as u64
}

impl KeyExchange for ToyGroupKex {
    fn name(&self) -> &'static str {
        "toy-modp64"
    }

    fn generate(&self, rng: &mut dyn RngCore) -> (Vec<u8>, Vec<u8>) {
        let mut buf = [0u8; 8];
        rng.fill_bytes(&mut buf);
        let private = u64::from_le_bytes(buf) | 1;
        let public = toy_pow(TOY_G, private);
        (private.to_le_bytes().to_vec(), public.to_le_bytes().to_vec())
    }

    fn shared_secret(&self, private: &[u8], peer_public: &[u8]) -> Result<Vec<u8>, ProtocolError> {
        let private = u64::from_le_bytes(
            private
                .try_into()
                .map_err(|_| ProtocolError::BadPublicKey(private.len()))?,
        );
        let public = u64::from_le_bytes(
            peer_public
                .try_into()
                .map_err(|_| ProtocolError::BadPublicKey(peer_public.len()))?,
        );
        Ok(toy_pow(public, private).to_le_bytes().to_vec())
    }
}

// ---------------------------------------------------------------------------
// Messages

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    /// g^a, fresh nonce, report binding H(g^a || nonce).
    Step1 {
        sender_index: u64,
        nonce: [u8; NONCE_LEN],
        dh_public: Vec<u8>,
        report: Report,
    },
    /// g^b, nonce echo, report binding H(g^a || g^b || nonce).
    Step2 {
        sender_index: u64,
        nonce: [u8; NONCE_LEN],
        dh_public: Vec<u8>,
        report: Report,
    },
    /// Secret ciphertext under the session key.
    Step3 { ciphertext: Vec<u8> },
    /// Encrypted acknowledgement.
    Step4 { ciphertext: Vec<u8> },
}

impl Message {
    pub fn step(&self) -> u8 {
        match self {
            Message::Step1 { .. } => 1,
            Message::Step2 { .. } => 2,
            Message::Step3 { .. } => 3,
            Message::Step4 { .. } => 4,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![self.step()];
        match self {
            Message::Step1 {
                sender_index,
                nonce,
                dh_public,
                report,
            }
            | Message::Step2 {
                sender_index,
                nonce,
                dh_public,
                report,
            } => {
                out.extend_from_slice(&sender_index.to_le_bytes());
                out.extend_from_slice(nonce);
                out.extend_from_slice(&(dh_public.len() as u16).to_le_bytes());
                out.extend_from_slice(dh_public);
                out.extend_from_slice(&report.to_bytes());
            }
            Message::Step3 { ciphertext } | Message::Step4 { ciphertext } => {
                out.extend_from_slice(&(ciphertext.len() as u32).to_le_bytes());
                out.extend_from_slice(ciphertext);
            }
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let err = |what: &str| ProtocolError::MessageFormat(what.to_string());
        let (&tag, rest) = bytes.split_first().ok_or_else(|| err("empty"))?;
        match tag {
            1 | 2 => {
                if rest.len() < 8 + NONCE_LEN + 2 {
                    return Err(err("truncated handshake message"));
                }
                let sender_index = u64::from_le_bytes(rest[..8].try_into().unwrap());
                let nonce: [u8; NONCE_LEN] = rest[8..8 + NONCE_LEN].try_into().unwrap();
                let at = 8 + NONCE_LEN;
                let pub_len = u16::from_le_bytes(rest[at..at + 2].try_into().unwrap()) as usize;
                let at = at + 2;
                if rest.len() != at + pub_len + REPORT_WIRE_LEN {
                    return Err(err("handshake length mismatch"));
                }
                let dh_public = rest[at..at + pub_len].to_vec();
                let report = Report::from_bytes(&rest[at + pub_len..])?;
                Ok(if tag == 1 {
                    Message::Step1 {
                        sender_index,
                        nonce,
                        dh_public,
                        report,
                    }
                } else {
                    Message::Step2 {
                        sender_index,
                        nonce,
                        dh_public,
                        report,
                    }
                })
            }
            3 | 4 => {
                if rest.len() < 4 {
                    return Err(err("truncated ciphertext message"));
                }
                let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
                if rest.len() != 4 + len {
                    return Err(err("ciphertext length mismatch"));
                }
                let ciphertext = rest[4..].to_vec();
                Ok(if tag == 3 {
                    Message::Step3 { ciphertext }
                } else {
                    Message::Step4 { ciphertext }
                })
            }
            other => Err(err(&format!("unknown step tag {other}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Runtime

/// Shared execution environment for one session: the (simulated) platform
/// both enclaves run on, the key-exchange instantiation, and randomness.
pub struct Env<'a> {
    pub platform: &'a Platform,
    pub kex: &'a dyn KeyExchange,
    pub rng: &'a mut dyn RngCore,
}

#[derive(Default)]
struct Session {
    private: Vec<u8>,
    public: Vec<u8>,
    nonce: [u8; NONCE_LEN],
    peer_index: u64,
    peer_measurement: [u8; 32],
    key: Option<[u8; 32]>,
    secret: Option<Vec<u8>>,
    ack_verified: bool,
}

/// One simulated launched enclave participating in the protocol.
pub struct EnclaveRuntime {
    pub name: String,
    pub measurement: [u8; 32],
    pub view: MageView,
    pub group_index: u64,
    pub state: SessionState,
    session: Session,
}

const STEP3_NONCE: [u8; 12] = *b"mage-step-3\0";
const STEP4_NONCE: [u8; 12] = *b"mage-step-4\0";

fn hash_concat(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// Report data layout: 32-byte binding hash, then 32 zero bytes.
fn report_data(hash: &[u8; 32]) -> [u8; 64] {
    let mut out = [0u8; 64];
    out[..32].copy_from_slice(hash);
    out
}

fn session_key(shared: &[u8], nonce: &[u8; NONCE_LEN]) -> [u8; 32] {
    let mut mac = Hmac::<Sha256>::new_from_slice(shared).expect("any key length");
    mac.update(b"MAGE-SESSION");
    mac.update(nonce);
    mac.finalize().into_bytes().into()
}

fn seal(key: &[u8; 32], nonce12: &[u8; 12], plaintext: &[u8], aad: &[u8]) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(&Key::from(*key));
    cipher
        .encrypt(
            &Nonce::from(*nonce12),
            Payload {
                msg: plaintext,
                aad,
            },
        )
        .expect("encryption is infallible for in-memory buffers")
}

fn open(key: &[u8; 32], nonce12: &[u8; 12], ciphertext: &[u8], aad: &[u8]) -> Option<Vec<u8>> {
    let cipher = ChaCha20Poly1305::new(&Key::from(*key));
    cipher
        .decrypt(
            &Nonce::from(*nonce12),
            Payload {
                msg: ciphertext,
                aad,
            },
        )
        .ok()
}

impl EnclaveRuntime {
    /// "Launch" an enclave: compute its measurement and capture its view
    /// of its own MARS section. `group_index` is its entry index.
    pub fn launch(
        img: &EnclaveImage,
        name: impl Into<String>,
        group_index: u64,
    ) -> Result<Self, DeriveError> {
        let measurement = final_measurement(img).map_err(|e| match e {
            crate::build::BuildError::Measure(m) => DeriveError::Measure(m),
            _ => DeriveError::BadSectionLength(0),
        })?;
        Ok(EnclaveRuntime {
            name: name.into(),
            measurement,
            view: MageView::from_image(img)?,
            group_index,
            state: SessionState::Idle,
            session: Session::default(),
        })
    }

    /// Construct a runtime directly; used for impostor scenarios where
    /// the view is a stolen copy of the group section.
    pub fn with_view(
        measurement: [u8; 32],
        view: MageView,
        name: impl Into<String>,
        group_index: u64,
    ) -> Self {
        EnclaveRuntime {
            name: name.into(),
            measurement,
            view,
            group_index,
            state: SessionState::Idle,
            session: Session::default(),
        }
    }

    pub fn migrated_secret(&self) -> Option<&[u8]> {
        self.session.secret.as_deref()
    }

    pub fn ack_verified(&self) -> bool {
        self.session.ack_verified
    }

    fn abort(&mut self, reason: AbortReason) -> ProtocolError {
        self.state = SessionState::Aborted(reason);
        ProtocolError::Aborted(reason)
    }

    fn require(&self, expected: SessionState, name: &'static str) -> Result<(), ProtocolError> {
        if self.state != expected {
            return Err(ProtocolError::WrongState {
                expected: name,
                actual: self.state,
            });
        }
        Ok(())
    }

    /// Step 1: derive the target's measurement, generate (a, g^a) and a
    /// fresh nonce, report-bind H(g^a || nonce).
    pub fn step1_initiate(
        &mut self,
        env: &mut Env,
        target_index: u64,
    ) -> Result<Message, ProtocolError> {
        self.require(SessionState::Idle, "Idle")?;
        let target_measurement = derive_measurement(&self.view, target_index)?;
        let (private, public) = env.kex.generate(env.rng);
        let mut nonce = [0u8; NONCE_LEN];
        env.rng.fill_bytes(&mut nonce);

        let binding = hash_concat(&[&public, &nonce]);
        let report = env.platform.ereport(
            self.measurement,
            target_measurement,
            &report_data(&binding),
        )?;

        self.session = Session {
            private,
            public: public.clone(),
            nonce,
            peer_index: target_index,
            peer_measurement: target_measurement,
            ..Session::default()
        };
        self.state = SessionState::AwaitB;
        Ok(Message::Step1 {
            sender_index: self.group_index,
            nonce,
            dh_public: public,
            report,
        })
    }

    /// Step 2: authenticate the initiator against the measurement derived
    /// from our own MARS, then answer with (b, g^b).
    pub fn step2_respond(&mut self, env: &mut Env, msg: &Message) -> Result<Message, ProtocolError> {
        self.require(SessionState::Idle, "Idle")?;
        let (sender_index, nonce, peer_public, report) = match msg {
            Message::Step1 {
                sender_index,
                nonce,
                dh_public,
                report,
            } => (*sender_index, *nonce, dh_public.clone(), report),
            _ => {
                return Err(ProtocolError::MessageFormat(format!(
                    "expected step 1, got step {}",
                    msg.step()
                )))
            }
        };

        let expected_measurement = match derive_measurement(&self.view, sender_index) {
            Ok(m) => m,
            Err(_) => return Err(self.abort(AbortReason::Identity)),
        };
        if report.attester_measurement != expected_measurement {
            return Err(self.abort(AbortReason::Identity));
        }
        if !env.platform.verify_report(self.measurement, report) {
            return Err(self.abort(AbortReason::Auth));
        }
        let binding = hash_concat(&[&peer_public, &nonce]);
        if report.report_data != report_data(&binding) {
            return Err(self.abort(AbortReason::Integrity));
        }

        let (private, public) = env.kex.generate(env.rng);
        let shared = env.kex.shared_secret(&private, &peer_public)?;
        let key = session_key(&shared, &nonce);

        let binding2 = hash_concat(&[&peer_public, &public, &nonce]);
        let report2 = env.platform.ereport(
            self.measurement,
            expected_measurement,
            &report_data(&binding2),
        )?;

        self.session = Session {
            private,
            public: public.clone(),
            nonce,
            peer_index: sender_index,
            peer_measurement: expected_measurement,
            key: Some(key),
            ..Session::default()
        };
        self.state = SessionState::AwaitSecret;
        Ok(Message::Step2 {
            sender_index: self.group_index,
            nonce,
            dh_public: public,
            report: report2,
        })
    }

    /// Step 3: authenticate the responder, derive the session key and
    /// send the encrypted secret.
    pub fn step3_provision(
        &mut self,
        env: &mut Env,
        msg: &Message,
        secret: &[u8],
    ) -> Result<Message, ProtocolError> {
        self.require(SessionState::AwaitB, "AwaitB")?;
        let (sender_index, nonce, peer_public, report) = match msg {
            Message::Step2 {
                sender_index,
                nonce,
                dh_public,
                report,
            } => (*sender_index, *nonce, dh_public.clone(), report),
            _ => {
                return Err(ProtocolError::MessageFormat(format!(
                    "expected step 2, got step {}",
                    msg.step()
                )))
            }
        };

        // Nonce echo first: a stale nonce means another session's message.
        if nonce != self.session.nonce {
            return Err(self.abort(AbortReason::Replay));
        }
        if sender_index != self.session.peer_index
            || report.attester_measurement != self.session.peer_measurement
        {
            return Err(self.abort(AbortReason::Identity));
        }
        if !env.platform.verify_report(self.measurement, report) {
            return Err(self.abort(AbortReason::Auth));
        }
        let binding = hash_concat(&[&self.session.public, &peer_public, &nonce]);
        if report.report_data != report_data(&binding) {
            return Err(self.abort(AbortReason::Integrity));
        }

        let shared = env.kex.shared_secret(&self.session.private, &peer_public)?;
        let key = session_key(&shared, &self.session.nonce);
        let ciphertext = seal(&key, &STEP3_NONCE, secret, &self.session.nonce);
        self.session.key = Some(key);
        self.session.secret = Some(secret.to_vec());
        self.state = SessionState::Done;
        Ok(Message::Step3 { ciphertext })
    }

    /// Step 4: decrypt and store the secret, answer with an encrypted
    /// acknowledgement.
    pub fn step4_ack(&mut self, msg: &Message) -> Result<Message, ProtocolError> {
        self.require(SessionState::AwaitSecret, "AwaitSecret")?;
        let ciphertext = match msg {
            Message::Step3 { ciphertext } => ciphertext,
            _ => {
                return Err(ProtocolError::MessageFormat(format!(
                    "expected step 3, got step {}",
                    msg.step()
                )))
            }
        };
        let key = self.session.key.expect("key set in step 2");
        let secret = match open(&key, &STEP3_NONCE, ciphertext, &self.session.nonce) {
            Some(s) => s,
            None => return Err(self.abort(AbortReason::Integrity)),
        };
        self.session.secret = Some(secret);
        self.state = SessionState::Done;

        let mut ack = b"ACK".to_vec();
        ack.extend_from_slice(&self.session.nonce);
        let ciphertext = seal(&key, &STEP4_NONCE, &ack, &self.session.nonce);
        Ok(Message::Step4 { ciphertext })
    }

    /// The initiator checks the optional acknowledgement. The secret has
    /// already been handed over; a bad ack aborts, a missing ack does not.
    pub fn process_ack(&mut self, msg: &Message) -> Result<(), ProtocolError> {
        self.require(SessionState::Done, "Done")?;
        let ciphertext = match msg {
            Message::Step4 { ciphertext } => ciphertext,
            _ => {
                return Err(ProtocolError::MessageFormat(format!(
                    "expected step 4, got step {}",
                    msg.step()
                )))
            }
        };
        let key = self.session.key.expect("key set in step 3");
        let plaintext = match open(&key, &STEP4_NONCE, ciphertext, &self.session.nonce) {
            Some(p) => p,
            None => return Err(self.abort(AbortReason::Integrity)),
        };
        if plaintext.len() != 3 + NONCE_LEN
            || &plaintext[..3] != b"ACK"
            || plaintext[3..] != self.session.nonce
        {
            return Err(self.abort(AbortReason::Replay));
        }
        self.session.ack_verified = true;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Channel and harness

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adversary {
    Honest,
    /// Suppress the message of the given step.
    Drop(u8),
    /// Substitute the same step's message from a previous session.
    Replay(u8),
    /// Flip one byte of the given step's message.
    Tamper { step: u8, byte_index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    AToB,
    BToA,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::AToB => write!(f, "A->B"),
            Direction::BToA => write!(f, "B->A"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeliveryNote {
    Delivered,
    Dropped,
    Tampered(usize),
    Replayed,
}

#[derive(Debug, Clone)]
pub struct TranscriptEntry {
    pub step: u8,
    pub direction: Direction,
    /// Bytes as delivered (original bytes for suppressed messages).
    pub payload: Vec<u8>,
    pub note: DeliveryNote,
}

pub struct Channel {
    pub adversary: Adversary,
    pub transcript: Vec<TranscriptEntry>,
    replay_source: Option<(u8, Vec<u8>)>,
}

impl Channel {
    pub fn new(adversary: Adversary) -> Self {
        Channel {
            adversary,
            transcript: Vec::new(),
            replay_source: None,
        }
    }

    pub fn honest() -> Self {
        Self::new(Adversary::Honest)
    }

    /// Message bytes from a previous session, substituted when the
    /// adversary is `Replay(step)`.
    pub fn set_replay_source(&mut self, step: u8, bytes: Vec<u8>) {
        self.replay_source = Some((step, bytes));
    }

    fn deliver(&mut self, step: u8, direction: Direction, bytes: Vec<u8>) -> Option<Vec<u8>> {
        let (note, delivered) = match self.adversary {
            Adversary::Drop(s) if s == step => (DeliveryNote::Dropped, None),
            Adversary::Replay(s) if s == step => {
                let old = self
                    .replay_source
                    .as_ref()
                    .filter(|(s2, _)| *s2 == step)
                    .map(|(_, b)| b.clone())
                    .expect("replay adversary needs a recorded message for this step");
                (DeliveryNote::Replayed, Some(old))
            }
            Adversary::Tamper { step: s, byte_index } if s == step => {
                let mut t = bytes.clone();
                let idx = byte_index % t.len();
                t[idx] ^= 0x01;
                (DeliveryNote::Tampered(idx), Some(t))
            }
            _ => (DeliveryNote::Delivered, Some(bytes.clone())),
        };
        self.transcript.push(TranscriptEntry {
            step,
            direction,
            payload: delivered.clone().unwrap_or(bytes),
            note,
        });
        delivered
    }

    /// Line-oriented export: one message per line, preceded by a header
    /// naming the MAC and key-exchange constructions.
    pub fn export_transcript(&self, kex_name: &str) -> String {
        let mut out = format!("# mac={MAC_CONSTRUCTION} kex={kex_name}\n");
        for entry in &self.transcript {
            let note = match &entry.note {
                DeliveryNote::Delivered => "delivered".to_string(),
                DeliveryNote::Dropped => "dropped".to_string(),
                DeliveryNote::Tampered(i) => format!("tampered@{i}"),
                DeliveryNote::Replayed => "replayed".to_string(),
            };
            out.push_str(&format!(
                "step{} {} {} {}\n",
                entry.step,
                entry.direction,
                hex::encode(&entry.payload),
                note
            ));
        }
        out
    }
}

/// Final states and artifacts of one driven session.
#[derive(Debug)]
pub struct SessionOutcome {
    pub initiator_state: SessionState,
    pub responder_state: SessionState,
    pub migrated_secret: Option<Vec<u8>>,
    pub ack_verified: bool,
}

fn sweep_timeout(state: &mut SessionState) {
    if matches!(
        state,
        SessionState::Idle | SessionState::AwaitB | SessionState::AwaitSecret
    ) {
        *state = SessionState::Aborted(AbortReason::Timeout);
    }
}

/// Drive the four steps between initiator `a` and responder `b` through
/// the channel. Aborts are outcomes, not errors; parties still waiting
/// when the message flow ends time out.
pub fn run_session(
    a: &mut EnclaveRuntime,
    b: &mut EnclaveRuntime,
    channel: &mut Channel,
    env: &mut Env,
    target_index: u64,
    secret: &[u8],
) -> SessionOutcome {
    let finish = |a: &mut EnclaveRuntime, b: &mut EnclaveRuntime| {
        sweep_timeout(&mut a.state);
        sweep_timeout(&mut b.state);
        SessionOutcome {
            initiator_state: a.state,
            responder_state: b.state,
            migrated_secret: b.migrated_secret().map(|s| s.to_vec()),
            ack_verified: a.ack_verified(),
        }
    };

    // Step 1: A -> B.
    let m1 = match a.step1_initiate(env, target_index) {
        Ok(m) => m,
        Err(_) => return finish(a, b),
    };
    let m2 = match channel.deliver(1, Direction::AToB, m1.to_bytes()) {
        None => return finish(a, b),
        Some(bytes) => match Message::parse(&bytes) {
            Err(_) => {
                b.state = SessionState::Aborted(AbortReason::Integrity);
                return finish(a, b);
            }
            Ok(msg) => match b.step2_respond(env, &msg) {
                Ok(m) => m,
                Err(_) => return finish(a, b),
            },
        },
    };

    // Step 2: B -> A.
    let m3 = match channel.deliver(2, Direction::BToA, m2.to_bytes()) {
        None => return finish(a, b),
        Some(bytes) => match Message::parse(&bytes) {
            Err(_) => {
                a.state = SessionState::Aborted(AbortReason::Integrity);
                return finish(a, b);
            }
            Ok(msg) => match a.step3_provision(env, &msg, secret) {
                Ok(m) => m,
                Err(_) => return finish(a, b),
            },
        },
    };

    // Step 3: A -> B.
    let m4 = match channel.deliver(3, Direction::AToB, m3.to_bytes()) {
        None => return finish(a, b),
        Some(bytes) => match Message::parse(&bytes) {
            Err(_) => {
                b.state = SessionState::Aborted(AbortReason::Integrity);
                return finish(a, b);
            }
            Ok(msg) => match b.step4_ack(&msg) {
                Ok(m) => m,
                Err(_) => return finish(a, b),
            },
        },
    };

    // Step 4: B -> A (optional acknowledgement).
    if let Some(bytes) = channel.deliver(4, Direction::BToA, m4.to_bytes()) {
        match Message::parse(&bytes) {
            Err(_) => {
                a.state = SessionState::Aborted(AbortReason::Integrity);
            }
            Ok(msg) => {
                let _ = a.process_ack(&msg);
            }
        }
    }
    finish(a, b)
}
