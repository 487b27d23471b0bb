//! Pedersen commitments and the commit/challenge/respond round.
//!
//! Written multiplicatively, a commitment to `x0` with blinding `r` is
//! `C = g^x0 · h^r`. After committing, the prover receives a challenge bit
//! `b` and answers with `s = (r + x0·(1 - b)) mod p`. A verifier that knows
//! the value it expects (`x0`) recovers `r' = (s - (1 - b)·x0) mod p` and
//! accepts iff recommitting `(x0, r')` reproduces `C`.
//!
//! Two group realizations are provided:
//!
//! * `toy-modp`: the prime-order subgroup of quadratic residues modulo a
//!   small safe prime. Small enough that soundness and binding can be checked
//!   exhaustively.
//! * `secp256k1`: the elliptic curve, via the `k256` crate. Exponents are
//!   reduced modulo the curve group order.
//!
//! `h` is always derived from `g` by hashing into the group, so nobody knows
//! `log_g h`.

mod sigma;
mod toy;

pub use sigma::{Prover, SigmaError, Verifier};
pub use toy::ToyGroup;

use std::fmt;
use std::str::FromStr;

use k256::elliptic_curve::group::Group as _;
use k256::elliptic_curve::ops::LinearCombination;
use k256::elliptic_curve::sec1::{FromEncodedPoint, ToEncodedPoint};
use k256::elliptic_curve::PrimeField;
use k256::{AffinePoint, EncodedPoint, FieldBytes, ProjectivePoint, Scalar};
use num_bigint::BigUint;
use num_traits::{One, Zero};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CommitError {
    #[error("unsupported group realization `{0}`")]
    Unsupported(String),
    #[error("blinding factor must lie in [1, p]")]
    BlindingOutOfRange,
    #[error("operands come from different group realizations")]
    MixedRealizations,
    #[error("invalid group parameters: {0}")]
    InvalidParams(String),
    #[error("invalid group element encoding: {0}")]
    BadEncoding(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Realization {
    #[serde(rename = "toy-modp")]
    ToyModp,
    #[serde(rename = "secp256k1")]
    Secp256k1,
}

impl fmt::Display for Realization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Realization::ToyModp => "toy-modp",
            Realization::Secp256k1 => "secp256k1",
        })
    }
}

impl FromStr for Realization {
    type Err = CommitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toy-modp" | "toy" => Ok(Realization::ToyModp),
            "secp256k1" => Ok(Realization::Secp256k1),
            other => Err(CommitError::Unsupported(other.to_string())),
        }
    }
}

/// Challenge bit sent by the verifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Challenge {
    Zero,
    One,
}

impl Challenge {
    pub fn from_bit(bit: u8) -> Option<Challenge> {
        match bit {
            0 => Some(Challenge::Zero),
            1 => Some(Challenge::One),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Challenge::Zero => 0,
            Challenge::One => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroupElement {
    Toy(u64),
    Secp(ProjectivePoint),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Group {
    Toy(ToyGroup),
    Secp256k1,
}

/// Public parameters shared by prover and verifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupParams {
    group: Group,
    g: GroupElement,
    h: GroupElement,
    /// Exponent modulus: the order of the group generated by `g`.
    p: BigUint,
}

/// secp256k1 group order `n`.
pub const SECP256K1_ORDER_HEX: &str = "FFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141";

/// Default toy modulus: the safe prime `1019 = 2·509 + 1`.
pub const TOY_SAFE_PRIME: u64 = 1019;

fn seed_digest(label: &[u8], seed: u64, extra: &[u8], counter: u32) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(label);
    hasher.update(seed.to_be_bytes());
    hasher.update(extra);
    hasher.update(counter.to_be_bytes());
    hasher.finalize().into()
}

fn scalar_from_biguint(x: &BigUint) -> Scalar {
    let n = BigUint::parse_bytes(SECP256K1_ORDER_HEX.as_bytes(), 16).expect("valid constant");
    let reduced = x % n;
    let bytes = reduced.to_bytes_be();
    let mut repr = FieldBytes::default();
    repr[32 - bytes.len()..].copy_from_slice(&bytes);
    Option::from(Scalar::from_repr(repr)).expect("reduced below the group order")
}

/// Generate public parameters deterministically from `seed`.
///
/// Toy: `g` is a seeded quadratic residue modulo [`TOY_SAFE_PRIME`], so it
/// generates the order-509 subgroup. Curve: `g` is the standard base point
/// times a seeded scalar. In both cases `h` is hashed into the group from the
/// encoding of `g`.
pub fn setup(realization: Realization, seed: u64) -> Result<GroupParams, CommitError> {
    match realization {
        Realization::ToyModp => {
            let group = ToyGroup::safe_prime(TOY_SAFE_PRIME)?;
            let mut ctr = 0;
            let g = loop {
                let d = seed_digest(b"privpf/pedersen/g", seed, &[], ctr);
                let cand = group.hash_to_group(&d);
                ctr += 1;
                if cand != 1 {
                    break cand;
                }
            };
            let h = derive_toy_h(&group, g)?;
            GroupParams::toy(group.modulus(), g, h)
        }
        Realization::Secp256k1 => {
            let mut ctr = 0;
            let k = loop {
                let d = seed_digest(b"privpf/pedersen/g", seed, &[], ctr);
                let k = scalar_from_biguint(&BigUint::from_bytes_be(&d));
                ctr += 1;
                if !bool::from(k.is_zero()) {
                    break k;
                }
            };
            let g = ProjectivePoint::GENERATOR * k;
            let h = derive_secp_h(&g);
            Ok(GroupParams {
                group: Group::Secp256k1,
                g: GroupElement::Secp(g),
                h: GroupElement::Secp(h),
                p: BigUint::parse_bytes(SECP256K1_ORDER_HEX.as_bytes(), 16).expect("valid constant"),
            })
        }
    }
}

fn derive_toy_h(group: &ToyGroup, g: u64) -> Result<u64, CommitError> {
    let enc = g.to_be_bytes();
    for ctr in 0..10_000 {
        let d = seed_digest(b"privpf/pedersen/h", 0, &enc, ctr);
        let h = group.hash_to_group(&d);
        if h != 1 && h != g {
            return Ok(h);
        }
    }
    Err(CommitError::InvalidParams("could not derive h".into()))
}

/// Try-and-increment: hash to an x coordinate until it lies on the curve.
fn derive_secp_h(g: &ProjectivePoint) -> ProjectivePoint {
    let enc = g.to_affine().to_encoded_point(true);
    let mut ctr = 0u32;
    loop {
        let d = seed_digest(b"privpf/pedersen/h", 0, enc.as_bytes(), ctr);
        let mut compressed = [0u8; 33];
        compressed[0] = 0x02;
        compressed[1..].copy_from_slice(&d);
        if let Ok(ep) = EncodedPoint::from_bytes(compressed) {
            let maybe: Option<AffinePoint> = AffinePoint::from_encoded_point(&ep).into();
            if let Some(pt) = maybe {
                let h = ProjectivePoint::from(pt);
                if h != *g && !bool::from(h.is_identity()) {
                    return h;
                }
            }
        }
        ctr += 1;
    }
}

impl GroupParams {
    /// Toy parameters from explicit residues. The exponent modulus becomes
    /// the multiplicative order of `g`; `h` must lie in the group `g`
    /// generates.
    pub fn toy(modulus: u64, g: u64, h: u64) -> Result<GroupParams, CommitError> {
        let group = ToyGroup::new(modulus)?;
        if g.is_multiple_of(modulus) || h.is_multiple_of(modulus) {
            return Err(CommitError::InvalidParams("generators must be units".into()));
        }
        let (g, h) = (g % modulus, h % modulus);
        if g == 1 || h == 1 {
            return Err(CommitError::InvalidParams("generators must not be the identity".into()));
        }
        if g == h {
            return Err(CommitError::InvalidParams("g and h must differ".into()));
        }
        let order = group.element_order(g);
        if group.pow(h, order) != 1 {
            return Err(CommitError::InvalidParams(format!("h = {h} is not in the group generated by g = {g}")));
        }
        Ok(GroupParams { group: Group::Toy(group), g: GroupElement::Toy(g), h: GroupElement::Toy(h), p: BigUint::from(order) })
    }

    pub fn realization(&self) -> Realization {
        match self.group {
            Group::Toy(_) => Realization::ToyModp,
            Group::Secp256k1 => Realization::Secp256k1,
        }
    }

    /// Exponent modulus `p`.
    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn g(&self) -> &GroupElement {
        &self.g
    }

    pub fn h(&self) -> &GroupElement {
        &self.h
    }

    pub fn toy_group(&self) -> Option<&ToyGroup> {
        match &self.group {
            Group::Toy(t) => Some(t),
            Group::Secp256k1 => None,
        }
    }

    pub fn identity(&self) -> GroupElement {
        match self.group {
            Group::Toy(_) => GroupElement::Toy(1),
            Group::Secp256k1 => GroupElement::Secp(ProjectivePoint::IDENTITY),
        }
    }

    pub fn owns(&self, e: &GroupElement) -> bool {
        matches!((&self.group, e), (Group::Toy(_), GroupElement::Toy(_)) | (Group::Secp256k1, GroupElement::Secp(_)))
    }

    pub fn op(&self, a: &GroupElement, b: &GroupElement) -> Result<GroupElement, CommitError> {
        match (&self.group, a, b) {
            (Group::Toy(t), GroupElement::Toy(x), GroupElement::Toy(y)) => Ok(GroupElement::Toy(t.mul(*x, *y))),
            (Group::Secp256k1, GroupElement::Secp(x), GroupElement::Secp(y)) => Ok(GroupElement::Secp(x + y)),
            _ => Err(CommitError::MixedRealizations),
        }
    }

    pub fn pow(&self, base: &GroupElement, e: &BigUint) -> Result<GroupElement, CommitError> {
        match (&self.group, base) {
            (Group::Toy(t), GroupElement::Toy(x)) => {
                let e = (e % &self.p).iter_u64_digits().next().unwrap_or(0);
                Ok(GroupElement::Toy(t.pow(*x, e)))
            }
            (Group::Secp256k1, GroupElement::Secp(pt)) => Ok(GroupElement::Secp(pt * &scalar_from_biguint(e))),
            _ => Err(CommitError::MixedRealizations),
        }
    }

    /// `g^x · h^r` without range checks on `r`.
    fn commit_raw(&self, x0: &BigUint, r: &BigUint) -> GroupElement {
        match (&self.group, &self.g, &self.h) {
            (Group::Toy(t), GroupElement::Toy(g), GroupElement::Toy(h)) => {
                let reduce = |v: &BigUint| (v % &self.p).iter_u64_digits().next().unwrap_or(0);
                GroupElement::Toy(t.mul(t.pow(*g, reduce(x0)), t.pow(*h, reduce(r))))
            }
            (Group::Secp256k1, GroupElement::Secp(g), GroupElement::Secp(h)) => {
                let (a, b) = (scalar_from_biguint(x0), scalar_from_biguint(r));
                GroupElement::Secp(ProjectivePoint::lincomb(g, &a, h, &b))
            }
            _ => unreachable!("generators always match the group"),
        }
    }

    /// Byte width of an encoded element.
    pub fn element_len(&self) -> usize {
        match &self.group {
            Group::Toy(t) => t.byte_width(),
            Group::Secp256k1 => 33,
        }
    }

    /// Fixed-width big-endian residue (toy) or 33-byte SEC1 compressed point.
    /// The curve identity, which has no compressed form, is 33 zero bytes.
    pub fn encode(&self, e: &GroupElement) -> Result<Vec<u8>, CommitError> {
        match (&self.group, e) {
            (Group::Toy(t), GroupElement::Toy(x)) => {
                let w = t.byte_width();
                Ok(x.to_be_bytes()[8 - w..].to_vec())
            }
            (Group::Secp256k1, GroupElement::Secp(pt)) => {
                if bool::from(pt.is_identity()) {
                    return Ok(vec![0u8; 33]);
                }
                Ok(pt.to_affine().to_encoded_point(true).as_bytes().to_vec())
            }
            _ => Err(CommitError::MixedRealizations),
        }
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<GroupElement, CommitError> {
        match &self.group {
            Group::Toy(t) => {
                if bytes.len() != t.byte_width() {
                    return Err(CommitError::BadEncoding(format!("expected {} bytes, got {}", t.byte_width(), bytes.len())));
                }
                let v = bytes.iter().fold(0u64, |acc, &b| (acc << 8) | b as u64);
                let order = self.p.iter_u64_digits().next().unwrap_or(0);
                if v == 0 || v >= t.modulus() || t.pow(v, order) != 1 {
                    return Err(CommitError::BadEncoding(format!("{v} is not a group element")));
                }
                Ok(GroupElement::Toy(v))
            }
            Group::Secp256k1 => {
                if bytes.len() != 33 {
                    return Err(CommitError::BadEncoding(format!("expected 33 bytes, got {}", bytes.len())));
                }
                if bytes.iter().all(|&b| b == 0) {
                    return Ok(GroupElement::Secp(ProjectivePoint::IDENTITY));
                }
                let ep = EncodedPoint::from_bytes(bytes).map_err(|e| CommitError::BadEncoding(e.to_string()))?;
                let maybe: Option<AffinePoint> = AffinePoint::from_encoded_point(&ep).into();
                maybe.map(|pt| GroupElement::Secp(pt.into())).ok_or_else(|| CommitError::BadEncoding("not a curve point".into()))
            }
        }
    }

    pub fn commit(&self, x0: &BigUint, r: &BigUint) -> Result<Commitment, CommitError> {
        commit(x0, r, self)
    }

    pub fn verify(&self, c: &GroupElement, s: &BigUint, b: Challenge, x0_claimed: &BigUint) -> bool {
        verify(c, s, b, x0_claimed, self)
    }
}

/// A commitment; the opening is only known on the committing side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Commitment {
    pub c: GroupElement,
    pub opening: Option<Opening>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Opening {
    pub x0: BigUint,
    pub r: BigUint,
}

/// `C = g^x0 · h^r` with `r` in `[1, p]`.
pub fn commit(x0: &BigUint, r: &BigUint, params: &GroupParams) -> Result<Commitment, CommitError> {
    if r.is_zero() || r > params.p() {
        return Err(CommitError::BlindingOutOfRange);
    }
    Ok(Commitment { c: params.commit_raw(x0, r), opening: Some(Opening { x0: x0.clone(), r: r.clone() }) })
}

fn one_minus(b: Challenge) -> bool {
    b == Challenge::Zero
}

/// `s = (r + x0·(1 - b)) mod p`.
pub fn respond(r: &BigUint, x0: &BigUint, b: Challenge, p: &BigUint) -> BigUint {
    if one_minus(b) {
        (r + x0) % p
    } else {
        r % p
    }
}

/// `r = (s - (1 - b)·x0) mod p`, the inverse of [`respond`].
pub fn recover_blinding(s: &BigUint, x0: &BigUint, b: Challenge, p: &BigUint) -> BigUint {
    let s = s % p;
    if one_minus(b) {
        let x = x0 % p;
        (s + p - x) % p
    } else {
        s
    }
}

/// Recompute-and-compare: accept iff `commit(x0_claimed, r')` equals `C`,
/// where `r'` is the blinding recovered from `s` under the claimed value.
pub fn verify(c: &GroupElement, s: &BigUint, b: Challenge, x0_claimed: &BigUint, params: &GroupParams) -> bool {
    if !params.owns(c) {
        return false;
    }
    let r = recover_blinding(s, x0_claimed, b, params.p());
    params.commit_raw(x0_claimed, &r) == *c
}

/// Group operation on two commitments; the result opens to the sums.
pub fn homomorphic_add(c1: &Commitment, c2: &Commitment, params: &GroupParams) -> Result<Commitment, CommitError> {
    let c = params.op(&c1.c, &c2.c)?;
    let opening = match (&c1.opening, &c2.opening) {
        (Some(a), Some(b)) => Some(Opening { x0: &a.x0 + &b.x0, r: &a.r + &b.r }),
        _ => None,
    };
    Ok(Commitment { c, opening })
}

/// Given two distinct openings of the same commitment, return `log_g h`:
/// `x + r·w = x' + r'·w` gives `w = (x - x')·(r' - r)^-1 mod p`. Requires a
/// prime exponent modulus.
pub fn dlog_from_collision(a: &Opening, b: &Opening, p: &BigUint) -> Option<BigUint> {
    let sub = |x: &BigUint, y: &BigUint| ((x % p) + p - (y % p)) % p;
    let dr = sub(&b.r, &a.r);
    if dr.is_zero() {
        return None;
    }
    // Fermat inverse; p is prime
    let inv = dr.modpow(&(p - BigUint::from(2u8)), p);
    if (&inv * &dr) % p != BigUint::one() {
        return None;
    }
    Some((sub(&a.x0, &b.x0) * inv) % p)
}
