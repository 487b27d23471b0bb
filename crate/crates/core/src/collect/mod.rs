//! Voltage collection with hidden share positions.
//!
//! Each meter splits every voltage magnitude into `k` shares, hides them at a
//! fixed secret set of positions inside an `I`-dimensional vector padded with
//! decoys, and streams those vectors to the operator. Before any data flows
//! the operator has to prove it knows the positions: it walks through the
//! candidate tuples, committing to each tuple's indices, and the meter checks
//! the responses against its true indices. Acceptance reveals the tuple to the
//! operator; each rejection reveals one wrong tuple. That leakage is inherent
//! to the guess-and-confirm protocol and is not hidden here.

mod transport;
pub mod wire;

pub use transport::{ChannelTransport, TcpTransport, Transport};
pub use wire::{Message, Verdict};

use std::fmt;
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::{Duration, Instant};

use ndarray::Array2;
use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::commit::{CommitError, GroupParams, Prover, SigmaError, Verifier};

#[derive(Debug, thiserror::Error)]
pub enum CollectError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("voltage must be positive, got {0}")]
    NonPositiveVoltage(f64),
    #[error("transport timed out")]
    Timeout,
    #[error("peer closed the connection")]
    Closed,
    #[error("codec error: {0}")]
    Codec(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Commit(#[from] CommitError),
    #[error(transparent)]
    Sigma(#[from] SigmaError),
}

pub type Result<T, E = CollectError> = std::result::Result<T, E>;

/// Lower share fraction of a single split.
pub const SPLIT_LO: f64 = 0.49;
/// Upper share fraction of a single split.
pub const SPLIT_HI: f64 = 0.51;
/// Decoys are drawn from `[DECOY_LO·min, DECOY_HI·max]` of the shares.
pub const DECOY_LO: f64 = 0.97;
pub const DECOY_HI: f64 = 1.03;

fn check_k(k: usize) -> Result<()> {
    if k != 2 && k != 4 {
        return Err(CollectError::InvalidArgument(format!("k must be 2 or 4, got {k}")));
    }
    Ok(())
}

fn split_once<R: Rng>(v: f64, rng: &mut R) -> (f64, f64) {
    // snap to the grid of v's last bit: then v - a is exact and a + (v - a) == v
    let q = v.next_up() - v;
    let a = (rng.random_range(SPLIT_LO * v..=SPLIT_HI * v) / q).round() * q;
    (a, v - a)
}

/// Split `v` into `k` shares. `k = 4` splits each half again, giving the
/// order `[a1, a2, b1, b2]`; [`combine_shares`] undoes it exactly.
pub fn split_voltage_with<R: Rng>(v: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    check_k(k)?;
    if !(v > 0.0) || !v.is_finite() {
        return Err(CollectError::NonPositiveVoltage(v));
    }
    let (a, b) = split_once(v, rng);
    if k == 2 {
        return Ok(vec![a, b]);
    }
    let (a1, a2) = split_once(a, rng);
    let (b1, b2) = split_once(b, rng);
    Ok(vec![a1, a2, b1, b2])
}

pub fn split_voltage(v: f64, k: usize, seed: u64) -> Result<Vec<f64>> {
    split_voltage_with(v, k, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Pairwise sum mirroring the split tree.
pub fn combine_shares(shares: &[f64]) -> f64 {
    match shares.len() {
        0 => 0.0,
        1 => shares[0],
        n => combine_shares(&shares[..n / 2]) + combine_shares(&shares[n / 2..]),
    }
}

/// An `I`-vector holding the shares at secret positions and decoys elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitEmbedding {
    pub values: Vec<f64>,
    pub true_indices: Vec<usize>,
    pub k: usize,
    pub lo: f64,
    pub hi: f64,
}

impl SplitEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn shares(&self) -> Vec<f64> {
        self.true_indices.iter().map(|&i| self.values[i]).collect()
    }

    pub fn recover(&self) -> f64 {
        combine_shares(&self.shares())
    }
}

fn sample_indices<R: Rng>(dim: usize, k: usize, rng: &mut R) -> Vec<usize> {
    rand::seq::index::sample(rng, dim, k).into_vec()
}

/// Place `shares` at `indices` and fill the rest with uniform decoys.
pub fn embed_at<R: Rng>(shares: &[f64], indices: &[usize], dim: usize, rng: &mut R) -> Result<SplitEmbedding> {
    if dim <= shares.len() {
        return Err(CollectError::InvalidArgument(format!("dimension {dim} must exceed k = {}", shares.len())));
    }
    if indices.len() != shares.len() || indices.iter().any(|&i| i >= dim) {
        return Err(CollectError::InvalidArgument("index tuple does not fit the vector".into()));
    }
    let min = shares.iter().copied().fold(f64::INFINITY, f64::min);
    let max = shares.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (DECOY_LO * min, DECOY_HI * max);
    let mut values: Vec<f64> = (0..dim).map(|_| rng.random_range(lo..=hi)).collect();
    for (&i, &s) in indices.iter().zip(shares) {
        values[i] = s;
    }
    Ok(SplitEmbedding { values, true_indices: indices.to_vec(), k: shares.len(), lo, hi })
}

/// Embed with freshly sampled distinct positions.
pub fn embed(shares: &[f64], dim: usize, seed: u64) -> Result<SplitEmbedding> {
    if dim <= shares.len() {
        return Err(CollectError::InvalidArgument(format!("dimension {dim} must exceed k = {}", shares.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = sample_indices(dim, shares.len(), &mut rng);
    embed_at(shares, &indices, dim, &mut rng)
}

/// All ordered tuples of `k` distinct indices from `0..I`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateList {
    tuples: Vec<Vec<usize>>,
    cursor: usize,
}

pub fn enumerate_candidates(dim: usize, k: usize) -> Result<CandidateList> {
    if k == 0 || dim <= k {
        return Err(CollectError::InvalidArgument(format!("need I > k > 0, got I = {dim}, k = {k}")));
    }
    fn rec(dim: usize, k: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in 0..dim {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(dim, k, cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut tuples = Vec::new();
    rec(dim, k, &mut Vec::with_capacity(k), &mut vec![false; dim], &mut tuples);
    Ok(CandidateList { tuples, cursor: 0 })
}

/// `I! / (I - k)!`.
pub fn permutation_count(dim: usize, k: usize) -> usize {
    (dim - k + 1..=dim).product()
}

impl CandidateList {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn tuples(&self) -> &[Vec<usize>] {
        &self.tuples
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn shuffle(&mut self, seed: u64) {
        self.tuples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.cursor = 0;
    }

    /// Move `tuple` to the front, if present.
    pub fn prioritize(&mut self, tuple: &[usize]) {
        if let Some(pos) = self.tuples.iter().position(|t| t == tuple) {
            let t = self.tuples.remove(pos);
            self.tuples.insert(0, t);
        }
    }
}

impl Iterator for CandidateList {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let t = self.tuples.get(self.cursor).cloned();
        self.cursor += 1;
        t
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Meter side: holds the voltage series and the secret share positions.
#[derive(Debug, Clone)]
pub struct SmAgent {
    pub id: usize,
    dim: usize,
    k: usize,
    true_indices: Vec<usize>,
    voltages: Vec<f64>,
    seed: u64,
    /// Sigma rounds demanded per candidate before accepting.
    rounds_per_candidate: u32,
}

impl SmAgent {
    pub fn new(id: usize, voltages: Vec<f64>, dim: usize, k: usize, seed: u64) -> Result<SmAgent> {
        check_k(k)?;
        if dim <= k {
            return Err(CollectError::InvalidArgument(format!("dimension {dim} must exceed k = {k}")));
        }
        let seed = mix(seed, id as u64);
        let true_indices = sample_indices(dim, k, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(SmAgent { id, dim, k, true_indices, voltages, seed, rounds_per_candidate: 1 })
    }

    pub fn with_rounds(mut self, rounds: u32) -> SmAgent {
        self.rounds_per_candidate = rounds.max(1);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Secret; exposed for tests and simulation bookkeeping only.
    pub fn true_indices(&self) -> &[usize] {
        &self.true_indices
    }

    pub fn voltages(&self) -> &[f64] {
        &self.voltages
    }

    /// The embedded vector for time step `t`.
    pub fn embedding(&self, t: usize) -> Result<SplitEmbedding> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, t as u64 + 1));
        let v = *self.voltages.get(t).ok_or_else(|| CollectError::InvalidArgument(format!("time step {t} out of range")))?;
        let shares = split_voltage_with(v, self.k, &mut rng)?;
        embed_at(&shares, &self.true_indices, self.dim, &mut rng)
    }

    /// Serve one session: answer the handshake, then stream `samples` vectors.
    pub fn serve(&self, params: &GroupParams, samples: usize, chunk_rows: usize, t: &mut dyn Transport) -> Result<SmOutcome> {
        let session = match t.recv()? {
            Message::Hello { dim, k, session } => {
                if dim as usize != self.dim || k as usize != self.k {
                    t.send(&Message::Verdict(Verdict::Reject))?;
                    return Err(CollectError::Protocol(format!(
                        "operator expects I = {dim}, k = {k}; meter has I = {}, k = {}",
                        self.dim, self.k
                    )));
                }
                session
            }
            other => return Err(CollectError::Protocol(format!("expected HELLO, got {}", other.name()))),
        };
        t.send(&Message::Ack)?;

        let expected = self.true_indices.iter().map(|&i| BigUint::from(i)).collect();
        let mut verifier = Verifier::new(params.clone(), expected, mix(self.seed, session));
        let mut passed = 0;
        loop {
            let commits = match t.recv() {
                Ok(Message::Commits(c)) => c,
                Ok(other) => return Err(CollectError::Protocol(format!("expected COMMITS, got {}", other.name()))),
                Err(CollectError::Closed) => return Ok(SmOutcome::Exhausted),
                Err(e) => return Err(e),
            };
            let decoded: std::result::Result<Vec<_>, _> = commits.iter().map(|b| params.decode(b)).collect();
            let Ok(elements) = decoded else {
                passed = 0;
                t.send(&Message::Verdict(Verdict::Reject))?;
                continue;
            };
            let b = match verifier.challenge(elements) {
                Ok(b) => b,
                Err(SigmaError::CountMismatch { .. }) => {
                    passed = 0;
                    t.send(&Message::Verdict(Verdict::Reject))?;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            t.send(&Message::Challenge(b))?;
            let responses = match t.recv()? {
                Message::Responses(r) => r.iter().map(|b| BigUint::from_bytes_be(b)).collect::<Vec<_>>(),
                other => return Err(CollectError::Protocol(format!("expected RESPONSES, got {}", other.name()))),
            };
            let ok = match verifier.check(&responses) {
                Ok(ok) => ok,
                Err(SigmaError::CountMismatch { .. }) => false,
                Err(e) => return Err(e.into()),
            };
            if !ok {
                passed = 0;
                t.send(&Message::Verdict(Verdict::Reject))?;
                continue;
            }
            passed += 1;
            if passed < self.rounds_per_candidate {
                t.send(&Message::Verdict(Verdict::Continue))?;
                continue;
            }
            t.send(&Message::Verdict(Verdict::Accept))?;
            break;
        }

        if samples > self.voltages.len() {
            return Err(CollectError::InvalidArgument(format!(
                "meter {} holds {} samples, {samples} requested",
                self.id,
                self.voltages.len()
            )));
        }
        let chunk_rows = chunk_rows.max(1);
        let mut start = 0;
        while start < samples {
            let end = (start + chunk_rows).min(samples);
            let mut values = Vec::with_capacity((end - start) * self.dim);
            for step in start..end {
                for v in self.embedding(step)?.values {
                    values.push(wire::to_fixed(v)?);
                }
            }
            t.send(&Message::Data { rows: (end - start) as u32, dim: self.dim as u32, values })?;
            expect_ack(t)?;
            start = end;
        }
        t.send(&Message::Data { rows: 0, dim: self.dim as u32, values: Vec::new() })?;
        expect_ack(t)?;
        Ok(SmOutcome::Delivered)
    }
}

fn expect_ack(t: &mut dyn Transport) -> Result<()> {
    match t.recv()? {
        Message::Ack => Ok(()),
        other => Err(CollectError::Protocol(format!("expected ACK, got {}", other.name()))),
    }
}

/// How a session ended from the meter's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmOutcome {
    Delivered,
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Accepted,
    Exhausted,
    Aborted,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Accepted => "accepted",
            Outcome::Exhausted => "exhausted",
            Outcome::Aborted => "aborted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SessionRecord {
    pub sm_id: usize,
    pub dim: usize,
    pub k: usize,
    /// Candidate tuples tried, including the accepted one.
    pub rounds: u64,
    /// Commit/challenge/respond exchanges.
    pub sigma_rounds: u64,
    pub handshake_secs: f64,
    pub duration_secs: f64,
    pub outcome: Outcome,
    pub error: Option<String>,
}

/// Operator side.
#[derive(Debug, Clone)]
pub struct DsoAgent {
    params: GroupParams,
    seed: u64,
    hint: Option<Vec<usize>>,
}

impl DsoAgent {
    pub fn new(params: GroupParams, seed: u64) -> DsoAgent {
        DsoAgent { params, seed, hint: None }
    }

    /// Try `tuple` before anything else (best-case replay).
    pub fn with_first_candidate(mut self, tuple: Vec<usize>) -> DsoAgent {
        self.hint = Some(tuple);
        self
    }

    pub fn params(&self) -> &GroupParams {
        &self.params
    }

    fn session_id(&self, sm_id: usize) -> u64 {
        mix(self.seed, sm_id as u64)
    }

    /// Drive one session. Dropping the transport on exhaustion tells the
    /// meter no candidates are left.
    pub fn run(&self, sm_id: usize, dim: usize, k: usize, mut t: Box<dyn Transport>) -> (SessionRecord, Option<Vec<f64>>) {
        let start = Instant::now();
        let mut rec = SessionRecord {
            sm_id,
            dim,
            k,
            rounds: 0,
            sigma_rounds: 0,
            handshake_secs: 0.0,
            duration_secs: 0.0,
            outcome: Outcome::Aborted,
            error: None,
        };
        let result = self.drive(&mut rec, dim, k, t.as_mut(), start);
        drop(t);
        rec.duration_secs = start.elapsed().as_secs_f64();
        match result {
            Ok(Some(data)) => {
                rec.outcome = Outcome::Accepted;
                (rec, Some(data))
            }
            Ok(None) => {
                rec.outcome = Outcome::Exhausted;
                (rec, None)
            }
            Err(e) => {
                rec.outcome = Outcome::Aborted;
                rec.error = Some(e.to_string());
                (rec, None)
            }
        }
    }

    fn drive(
        &self,
        rec: &mut SessionRecord,
        dim: usize,
        k: usize,
        t: &mut dyn Transport,
        start: Instant,
    ) -> Result<Option<Vec<f64>>> {
        let session = self.session_id(rec.sm_id);
        let mut candidates = enumerate_candidates(dim, k)?;
        candidates.shuffle(session);
        if let Some(h) = &self.hint {
            candidates.prioritize(h);
        }
        t.send(&Message::Hello { dim: dim as u32, k: k as u32, session })?;
        match t.recv()? {
            Message::Ack => {}
            Message::Verdict(Verdict::Reject) => {
                return Err(CollectError::Protocol("meter rejected the session parameters".into()))
            }
            other => return Err(CollectError::Protocol(format!("expected ACK, got {}", other.name()))),
        }
        let mut prover = Prover::new(self.params.clone(), mix(session, 0x5eed));
        let mut accepted = None;
        'outer: for cand in candidates {
            rec.rounds += 1;
            let values: Vec<BigUint> = cand.iter().map(|&i| BigUint::from(i)).collect();
            loop {
                let cs = prover.commit(&values)?;
                let blobs = cs.iter().map(|c| self.params.encode(c)).collect::<std::result::Result<_, _>>()?;
                t.send(&Message::Commits(blobs))?;
                let b = match t.recv()? {
                    Message::Challenge(b) => b,
                    Message::Verdict(Verdict::Reject) => continue 'outer,
                    other => return Err(CollectError::Protocol(format!("expected CHALLENGE, got {}", other.name()))),
                };
                let s = prover.respond(b)?;
                rec.sigma_rounds += 1;
                t.send(&Message::Responses(s.iter().map(|x| x.to_bytes_be()).collect()))?;
                match t.recv()? {
                    Message::Verdict(Verdict::Accept) => {
                        accepted = Some(cand);
                        break 'outer;
                    }
                    Message::Verdict(Verdict::Reject) => continue 'outer,
                    Message::Verdict(Verdict::Continue) => continue,
                    other => return Err(CollectError::Protocol(format!("expected VERDICT, got {}", other.name()))),
                }
            }
        }
        rec.handshake_secs = start.elapsed().as_secs_f64();
        let Some(tuple) = accepted else {
            return Ok(None);
        };

        let mut recovered = Vec::new();
        loop {
            match t.recv()? {
                Message::Data { rows, dim: d, values } => {
                    if d as usize != dim {
                        return Err(CollectError::Protocol(format!("DATA width {d}, expected {dim}")));
                    }
                    t.send(&Message::Ack)?;
                    if rows == 0 {
                        break;
                    }
                    for row in values.chunks(dim) {
                        let shares: Vec<f64> = tuple.iter().map(|&i| wire::from_fixed(row[i])).collect();
                        recovered.push(combine_shares(&shares));
                    }
                }
                other => return Err(CollectError::Protocol(format!("expected DATA, got {}", other.name()))),
            }
        }
        Ok(Some(recovered))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransportKind {
    Channel,
    /// Loopback TCP; port 0 picks an ephemeral port.
    Tcp {
        port: u16,
    },
}

#[derive(Debug, Clone)]
pub struct CollectOptions {
    pub parallel: bool,
    pub transport: TransportKind,
    pub timeout: Duration,
    /// Time steps per DATA frame.
    pub chunk_rows: usize,
}

impl Default for CollectOptions {
    fn default() -> Self {
        CollectOptions { parallel: false, transport: TransportKind::Channel, timeout: Duration::from_secs(10), chunk_rows: 96 }
    }
}

fn open_pair(opts: &CollectOptions, listener: Option<&Mutex<TcpListener>>) -> Result<(Box<dyn Transport>, Box<dyn Transport>)> {
    match listener {
        None => {
            let (a, b) = ChannelTransport::pair(opts.timeout);
            Ok((Box::new(a), Box::new(b)))
        }
        Some(l) => {
            let guard = l.lock().map_err(|_| CollectError::Protocol("listener lock poisoned".into()))?;
            let (a, b) = TcpTransport::loopback_pair(&guard, opts.timeout)?;
            Ok((Box::new(a), Box::new(b)))
        }
    }
}

fn run_session(
    sm: &SmAgent,
    dso: &DsoAgent,
    samples: usize,
    opts: &CollectOptions,
    listener: Option<&Mutex<TcpListener>>,
) -> (SessionRecord, Option<Vec<f64>>) {
    let (mut sm_side, dso_side) = match open_pair(opts, listener) {
        Ok(p) => p,
        Err(e) => {
            let rec = SessionRecord {
                sm_id: sm.id,
                dim: sm.dim,
                k: sm.k,
                rounds: 0,
                sigma_rounds: 0,
                handshake_secs: 0.0,
                duration_secs: 0.0,
                outcome: Outcome::Aborted,
                error: Some(e.to_string()),
            };
            return (rec, None);
        }
    };
    std::thread::scope(|s| {
        let meter = s.spawn(move || {
            let r = sm.serve(dso.params(), samples, opts.chunk_rows, sm_side.as_mut());
            if let Err(e) = &r {
                log::warn!("meter {}: {e}", sm.id);
            }
        });
        let out = dso.run(sm.id, sm.dim, sm.k, dso_side);
        meter.join().expect("meter thread panicked");
        out
    })
}

/// One complete session over the in-process transport, no data requested.
pub fn run_handshake(sm: &SmAgent, dso: &DsoAgent) -> SessionRecord {
    run_session(sm, dso, 0, &CollectOptions::default(), None).0
}

#[derive(Debug, Clone)]
pub struct CollectedData {
    pub bus_ids: Vec<usize>,
    /// `T x N`; columns of failed meters are NaN.
    pub voltages: Array2<f64>,
    pub records: Vec<SessionRecord>,
    pub partial: bool,
    pub duration: Duration,
}

impl CollectedData {
    pub fn failed(&self) -> Vec<usize> {
        self.records.iter().filter(|r| r.outcome != Outcome::Accepted).map(|r| r.sm_id).collect()
    }
}

/// Run one session per meter and assemble the `T x N` voltage matrix.
pub fn collect_dataset(sms: &[SmAgent], dso: &DsoAgent, samples: usize, opts: &CollectOptions) -> Result<CollectedData> {
    let start = Instant::now();
    let listener = match opts.transport {
        TransportKind::Channel => None,
        TransportKind::Tcp { port } => Some(Mutex::new(TcpListener::bind(("127.0.0.1", port))?)),
    };
    let workers =
        if opts.parallel { std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(sms.len()).max(1) } else { 1 };
    let mut slots: Vec<Option<(SessionRecord, Option<Vec<f64>>)>> = vec![None; sms.len()];
    if workers == 1 {
        for (slot, sm) in slots.iter_mut().zip(sms) {
            *slot = Some(run_session(sm, dso, samples, opts, listener.as_ref()));
        }
    } else {
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel();
        std::thread::scope(|s| {
            for _ in 0..workers {
                let tx = tx.clone();
                let (next, listener) = (&next, listener.as_ref());
                s.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(sm) = sms.get(i) else { break };
                    let out = run_session(sm, dso, samples, opts, listener);
                    if tx.send((i, out)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            // single writer
            for (i, out) in rx {
                slots[i] = Some(out);
            }
        });
    }

    let mut voltages = Array2::from_elem((samples, sms.len()), f64::NAN);
    let mut records = Vec::with_capacity(sms.len());
    let mut partial = false;
    for (j, slot) in slots.into_iter().enumerate() {
        let (rec, data) = slot.expect("every session reports");
        match data {
            Some(series) if series.len() == samples => {
                for (t, v) in series.into_iter().enumerate() {
                    voltages[[t, j]] = v;
                }
            }
            _ => partial = true,
        }
        records.push(rec);
    }
    Ok(CollectedData { bus_ids: sms.iter().map(|s| s.id).collect(), voltages, records, partial, duration: start.elapsed() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commit::{setup, Realization};

    #[test]
    fn split_k2() {
        for seed in 0..200 {
            let s = split_voltage(1.0, 2, seed).unwrap();
            assert!((0.49..=0.51).contains(&s[0]));
            assert_eq!(s[0] + s[1], 1.0);
            let s = split_voltage(1.02, 2, seed).unwrap();
            assert_eq!(s[0] + s[1], 1.02);
        }
    }

    #[test]
    fn split_k4_interval_oracle() {
        // two nested splits: each share lies in [0.49^2 v, 0.51^2 v]
        let (lo, hi) = (SPLIT_LO * SPLIT_LO, SPLIT_HI * SPLIT_HI);
        for seed in 0..200 {
            let s = split_voltage(1.0, 4, seed).unwrap();
            assert_eq!(s.len(), 4);
            for x in &s {
                assert!(*x >= lo - 1e-15 && *x <= hi + 1e-15, "{x}");
            }
            assert_eq!(combine_shares(&s), 1.0);
        }
    }

    #[test]
    fn split_rejects() {
        assert!(matches!(split_voltage(0.0, 2, 1), Err(CollectError::NonPositiveVoltage(_))));
        assert!(matches!(split_voltage(-1.0, 2, 1), Err(CollectError::NonPositiveVoltage(_))));
        assert!(split_voltage(1.0, 3, 1).is_err());
    }

    #[test]
    fn embed_bounds_example() {
        for seed in 0..100 {
            let e = embed(&[0.50, 0.52], 8, seed).unwrap();
            assert_eq!(e.dim(), 8);
            for v in &e.values {
                assert!(*v >= 0.485 - 1e-15 && *v <= 0.5356 + 1e-15);
            }
            assert_eq!(e.shares(), vec![0.50, 0.52]);
            assert_ne!(e.true_indices[0], e.true_indices[1]);
        }
        assert!(embed(&[0.5, 0.5], 2, 0).is_err());
    }

    #[test]
    fn embed_positions_vary_with_seed() {
        let a: Vec<_> = (0..50).map(|s| embed(&[0.5, 0.5], 16, s).unwrap().true_indices).collect();
        let distinct: std::collections::HashSet<_> = a.iter().collect();
        assert!(distinct.len() > 40);
    }

    #[test]
    fn candidates() {
        assert_eq!(enumerate_candidates(4, 2).unwrap().len(), 12);
        assert_eq!(enumerate_candidates(16, 2).unwrap().len(), 240);
        assert_eq!(permutation_count(16, 2), 240);
        assert_eq!(enumerate_candidates(6, 4).unwrap().len(), permutation_count(6, 4));
        let list = enumerate_candidates(5, 2).unwrap();
        let set: std::collections::HashSet<_> = list.tuples().iter().collect();
        assert_eq!(set.len(), list.len());
        assert_eq!(list.tuples().iter().filter(|t| **t == vec![3, 1]).count(), 1);
        assert!(enumerate_candidates(2, 2).is_err());
    }

    #[test]
    fn honest_handshake_and_best_case() {
        let params = setup(Realization::ToyModp, 1).unwrap();
        for id in 0..10 {
            let sm = SmAgent::new(id, vec![], 4, 2, 9).unwrap();
            let dso = DsoAgent::new(params.clone(), 3);
            let rec = run_handshake(&sm, &dso);
            assert_eq!(rec.outcome, Outcome::Accepted);
            assert!((1..=12).contains(&rec.rounds));
            let best = run_handshake(&sm, &dso.with_first_candidate(sm.true_indices().to_vec()));
            assert_eq!(best.outcome, Outcome::Accepted);
            assert_eq!(best.rounds, 1);
        }
    }

    #[test]
    fn multiple_rounds_per_candidate() {
        let params = setup(Realization::ToyModp, 1).unwrap();
        let sm = SmAgent::new(2, vec![], 4, 2, 9).unwrap().with_rounds(3);
        let dso = DsoAgent::new(params, 3).with_first_candidate(sm.true_indices().to_vec());
        let rec = run_handshake(&sm, &dso);
        assert_eq!(rec.outcome, Outcome::Accepted);
        assert_eq!((rec.rounds, rec.sigma_rounds), (1, 3));
    }

    #[test]
    fn mismatched_dimensions_abort() {
        let params = setup(Realization::ToyModp, 1).unwrap();
        let sm = SmAgent::new(1, vec![], 8, 2, 9).unwrap();
        let dso = DsoAgent::new(params, 3);
        let (mut a, b) = ChannelTransport::pair(Duration::from_secs(2));
        let (rec, _) = std::thread::scope(|s| {
            s.spawn(|| sm.serve(dso.params(), 0, 8, &mut a));
            dso.run(1, 4, 2, Box::new(b))
        });
        assert_eq!(rec.outcome, Outcome::Aborted);
    }

    #[test]
    fn silent_meter_times_out() {
        let params = setup(Realization::ToyModp, 1).unwrap();
        let dso = DsoAgent::new(params, 3);
        let (_keep, b) = ChannelTransport::pair(Duration::from_millis(30));
        let (rec, data) = dso.run(1, 4, 2, Box::new(b));
        assert_eq!(rec.outcome, Outcome::Aborted);
        assert!(rec.error.unwrap().contains("timed out"));
        assert!(data.is_none());
    }

    #[test]
    fn collect_recovers_exactly() {
        let params = setup(Realization::ToyModp, 2).unwrap();
        let dso = DsoAgent::new(params, 5);
        let sms: Vec<SmAgent> = (1..=4)
            .map(|id| {
                let v: Vec<f64> = (0..50).map(|t| 0.95 + 0.001 * ((t * id) % 37) as f64).collect();
                SmAgent::new(id, v, 8, if id % 2 == 0 { 4 } else { 2 }, 11).unwrap()
            })
            .collect();
        for parallel in [false, true] {
            let opts = CollectOptions { parallel, chunk_rows: 7, ..Default::default() };
            let out = collect_dataset(&sms, &dso, 50, &opts).unwrap();
            assert!(!out.partial);
            for (j, sm) in sms.iter().enumerate() {
                for t in 0..50 {
                    assert_eq!(out.voltages[[t, j]], sm.voltages()[t]);
                }
            }
        }
    }

    #[test]
    fn failing_meter_is_isolated() {
        let params = setup(Realization::ToyModp, 2).unwrap();
        let dso = DsoAgent::new(params, 5);
        let good = SmAgent::new(1, vec![1.0; 10], 4, 2, 1).unwrap();
        let bad = SmAgent::new(2, vec![1.0, -1.0, 1.0], 4, 2, 1).unwrap();
        let out = collect_dataset(&[good, bad], &dso, 3, &CollectOptions::default()).unwrap();
        assert!(out.partial);
        assert_eq!(out.failed(), vec![2]);
        assert_eq!(out.voltages[[2, 0]], 1.0);
        assert!(out.voltages[[0, 1]].is_nan());
    }

    #[test]
    fn tcp_collection() {
        let params = setup(Realization::Secp256k1, 2).unwrap();
        let dso = DsoAgent::new(params, 5);
        let sms: Vec<SmAgent> = (1..=2).map(|id| SmAgent::new(id, vec![0.98, 1.01, 0.97], 4, 2, 3).unwrap()).collect();
        let opts = CollectOptions { transport: TransportKind::Tcp { port: 0 }, parallel: true, ..Default::default() };
        let out = collect_dataset(&sms, &dso, 3, &opts).unwrap();
        assert!(!out.partial, "{:?}", out.records);
        assert_eq!(out.voltages[[1, 1]], 1.01);
    }
}
