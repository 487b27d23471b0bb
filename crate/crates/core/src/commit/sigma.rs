//! Per-session state for the commit/challenge/respond exchange.
//!
//! Both sides are small state machines. A round is: prover commits to a
//! vector of values, verifier answers with one challenge bit, prover sends
//! one response per value, verifier checks every response against the value
//! it expects. Calls out of order are errors, not panics.

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{commit, respond, verify, Challenge, CommitError, GroupElement, GroupParams};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SigmaError {
    #[error("{op} is not allowed while the session is {state}")]
    OutOfOrder { op: &'static str, state: &'static str },
    #[error("expected {expected} values, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Commit(#[from] CommitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ProverState {
    Idle,
    Committed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VerifierState {
    Idle,
    Challenged,
}

fn uniform_blinding(rng: &mut ChaCha8Rng, p: &BigUint) -> BigUint {
    // 64 extra bits keep the modulo bias negligible
    let len = (p.bits() as usize).div_ceil(8) + 8;
    let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
    BigUint::from_bytes_be(&bytes) % p + 1u32
}

/// Committing side.
#[derive(Debug)]
pub struct Prover {
    params: GroupParams,
    rng: ChaCha8Rng,
    state: ProverState,
    values: Vec<BigUint>,
    blindings: Vec<BigUint>,
    challenge: Option<Challenge>,
    responses: Vec<BigUint>,
    round: u64,
}

impl Prover {
    pub fn new(params: GroupParams, seed: u64) -> Prover {
        Prover {
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: ProverState::Idle,
            values: Vec::new(),
            blindings: Vec::new(),
            challenge: None,
            responses: Vec::new(),
            round: 0,
        }
    }

    /// Commit to `values` with fresh blindings drawn from `[1, p]`.
    pub fn commit(&mut self, values: &[BigUint]) -> Result<Vec<GroupElement>, SigmaError> {
        if self.state != ProverState::Idle {
            return Err(SigmaError::OutOfOrder { op: "commit", state: "awaiting a challenge" });
        }
        let p = self.params.p().clone();
        let mut out = Vec::with_capacity(values.len());
        self.blindings.clear();
        for v in values {
            let r = uniform_blinding(&mut self.rng, &p);
            out.push(commit(v, &r, &self.params)?.c);
            self.blindings.push(r);
        }
        self.values = values.to_vec();
        self.challenge = None;
        self.responses.clear();
        self.state = ProverState::Committed;
        Ok(out)
    }

    pub fn respond(&mut self, b: Challenge) -> Result<Vec<BigUint>, SigmaError> {
        if self.state != ProverState::Committed {
            return Err(SigmaError::OutOfOrder { op: "respond", state: "idle" });
        }
        let p = self.params.p();
        self.responses = self.blindings.iter().zip(&self.values).map(|(r, x)| respond(r, x, b, p)).collect();
        self.challenge = Some(b);
        self.state = ProverState::Idle;
        self.round += 1;
        Ok(self.responses.clone())
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn committed_values(&self) -> &[BigUint] {
        &self.values
    }

    pub fn challenge(&self) -> Option<Challenge> {
        self.challenge
    }

    pub fn responses(&self) -> &[BigUint] {
        &self.responses
    }
}

/// Checking side; knows the values it expects the prover to have committed.
#[derive(Debug)]
pub struct Verifier {
    params: GroupParams,
    rng: ChaCha8Rng,
    expected: Vec<BigUint>,
    state: VerifierState,
    commitments: Vec<GroupElement>,
    challenge: Option<Challenge>,
    round: u64,
}

impl Verifier {
    pub fn new(params: GroupParams, expected: Vec<BigUint>, seed: u64) -> Verifier {
        Verifier {
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            expected,
            state: VerifierState::Idle,
            commitments: Vec::new(),
            challenge: None,
            round: 0,
        }
    }

    /// Record the commitments and draw a uniform challenge bit.
    pub fn challenge(&mut self, commitments: Vec<GroupElement>) -> Result<Challenge, SigmaError> {
        if self.state != VerifierState::Idle {
            return Err(SigmaError::OutOfOrder { op: "challenge", state: "awaiting responses" });
        }
        if commitments.len() != self.expected.len() {
            return Err(SigmaError::CountMismatch { expected: self.expected.len(), got: commitments.len() });
        }
        let b = if self.rng.random::<bool>() { Challenge::One } else { Challenge::Zero };
        self.commitments = commitments;
        self.challenge = Some(b);
        self.state = VerifierState::Challenged;
        Ok(b)
    }

    /// Accept iff every response opens its commitment to the expected value.
    pub fn check(&mut self, responses: &[BigUint]) -> Result<bool, SigmaError> {
        if self.state != VerifierState::Challenged {
            return Err(SigmaError::OutOfOrder { op: "check", state: "idle" });
        }
        if responses.len() != self.expected.len() {
            return Err(SigmaError::CountMismatch { expected: self.expected.len(), got: responses.len() });
        }
        let b = self.challenge.expect("set when challenged");
        let ok = self.commitments.iter().zip(responses).zip(&self.expected).all(|((c, s), x)| verify(c, s, b, x, &self.params));
        self.state = VerifierState::Idle;
        self.round += 1;
        Ok(ok)
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn last_challenge(&self) -> Option<Challenge> {
        self.challenge
    }
}
