//! Framed binary protocol between a meter and the operator.
//!
//! Every frame is `len: u32 BE | tag: u8 | payload`, where `len` counts the
//! tag byte plus the payload. Multi-byte integers are big-endian.
//!
//! | tag | message   | payload                                                  |
//! |-----|-----------|----------------------------------------------------------|
//! | 1   | HELLO     | `I: u32, k: u32, session: u64`                           |
//! | 2   | COMMITS   | `count: u32`, then per element `len: u32, bytes`         |
//! | 3   | CHALLENGE | `b: u8` (0 or 1)                                         |
//! | 4   | RESPONSES | `count: u32`, then per integer `len: u32, BE magnitude`  |
//! | 5   | VERDICT   | `u8`: 0 reject, 1 accept, 2 continue with next round     |
//! | 6   | DATA      | `rows: u32, I: u32`, then `rows·I` fixed-point `i64`     |
//! | 7   | ACK       | empty                                                    |
//!
//! DATA values are fixed-point in units of 2^-60 p.u. Any `f64` in
//! `[2^-7, 8)` converts without loss, so voltage shares survive the trip
//! bit-for-bit. A DATA frame with zero rows ends the stream.

use std::io::{Read, Write};

use super::CollectError;
use crate::commit::Challenge;

/// Upper bound on a single frame, guards against absurd length prefixes.
pub const MAX_FRAME_LEN: usize = 64 << 20;

const FIXED_SCALE: f64 = (1u64 << 60) as f64;

const TAG_HELLO: u8 = 1;
const TAG_COMMITS: u8 = 2;
const TAG_CHALLENGE: u8 = 3;
const TAG_RESPONSES: u8 = 4;
const TAG_VERDICT: u8 = 5;
const TAG_DATA: u8 = 6;
const TAG_ACK: u8 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Reject,
    Accept,
    /// Current round passed; another round follows for the same candidate.
    Continue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Hello { dim: u32, k: u32, session: u64 },
    Commits(Vec<Vec<u8>>),
    Challenge(Challenge),
    Responses(Vec<Vec<u8>>),
    Verdict(Verdict),
    Data { rows: u32, dim: u32, values: Vec<i64> },
    Ack,
}

impl Message {
    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::Commits(_) => "COMMITS",
            Message::Challenge(_) => "CHALLENGE",
            Message::Responses(_) => "RESPONSES",
            Message::Verdict(_) => "VERDICT",
            Message::Data { .. } => "DATA",
            Message::Ack => "ACK",
        }
    }
}

/// `v` in units of 2^-60, rounded to nearest.
pub fn to_fixed(v: f64) -> Result<i64, CollectError> {
    let scaled = v * FIXED_SCALE;
    if !scaled.is_finite() || scaled.abs() >= i64::MAX as f64 {
        return Err(CollectError::Codec(format!("value {v} does not fit the fixed-point range")));
    }
    Ok(scaled.round() as i64)
}

pub fn from_fixed(x: i64) -> f64 {
    x as f64 / FIXED_SCALE
}

fn put_blobs(out: &mut Vec<u8>, blobs: &[Vec<u8>]) {
    out.extend_from_slice(&(blobs.len() as u32).to_be_bytes());
    for b in blobs {
        out.extend_from_slice(&(b.len() as u32).to_be_bytes());
        out.extend_from_slice(b);
    }
}

/// Full frame including the length prefix.
pub fn encode(msg: &Message) -> Vec<u8> {
    let mut body = Vec::new();
    match msg {
        Message::Hello { dim, k, session } => {
            body.push(TAG_HELLO);
            body.extend_from_slice(&dim.to_be_bytes());
            body.extend_from_slice(&k.to_be_bytes());
            body.extend_from_slice(&session.to_be_bytes());
        }
        Message::Commits(elems) => {
            body.push(TAG_COMMITS);
            put_blobs(&mut body, elems);
        }
        Message::Challenge(b) => {
            body.push(TAG_CHALLENGE);
            body.push(b.bit());
        }
        Message::Responses(ints) => {
            body.push(TAG_RESPONSES);
            put_blobs(&mut body, ints);
        }
        Message::Verdict(v) => {
            body.push(TAG_VERDICT);
            body.push(match v {
                Verdict::Reject => 0,
                Verdict::Accept => 1,
                Verdict::Continue => 2,
            });
        }
        Message::Data { rows, dim, values } => {
            body.push(TAG_DATA);
            body.extend_from_slice(&rows.to_be_bytes());
            body.extend_from_slice(&dim.to_be_bytes());
            body.reserve(values.len() * 8);
            for v in values {
                body.extend_from_slice(&v.to_be_bytes());
            }
        }
        Message::Ack => body.push(TAG_ACK),
    }
    let mut frame = Vec::with_capacity(body.len() + 4);
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    frame
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CollectError> {
        if self.buf.len() - self.pos < n {
            return Err(CollectError::Codec("truncated payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CollectError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CollectError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CollectError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn blobs(&mut self) -> Result<Vec<Vec<u8>>, CollectError> {
        let n = self.u32()? as usize;
        // each blob needs at least its 4-byte length
        if n > (self.buf.len() - self.pos) / 4 {
            return Err(CollectError::Codec("element count exceeds payload".into()));
        }
        (0..n)
            .map(|_| {
                let len = self.u32()? as usize;
                Ok(self.take(len)?.to_vec())
            })
            .collect()
    }

    fn done(&self) -> Result<(), CollectError> {
        if self.pos != self.buf.len() {
            return Err(CollectError::Codec(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Decode a frame body (tag + payload, without the length prefix).
pub fn decode_body(body: &[u8]) -> Result<Message, CollectError> {
    let mut c = Cursor { buf: body, pos: 0 };
    let msg = match c.u8()? {
        TAG_HELLO => Message::Hello { dim: c.u32()?, k: c.u32()?, session: c.u64()? },
        TAG_COMMITS => Message::Commits(c.blobs()?),
        TAG_CHALLENGE => {
            let b = c.u8()?;
            Message::Challenge(Challenge::from_bit(b).ok_or_else(|| CollectError::Codec(format!("challenge bit {b}")))?)
        }
        TAG_RESPONSES => Message::Responses(c.blobs()?),
        TAG_VERDICT => Message::Verdict(match c.u8()? {
            0 => Verdict::Reject,
            1 => Verdict::Accept,
            2 => Verdict::Continue,
            v => return Err(CollectError::Codec(format!("verdict byte {v}"))),
        }),
        TAG_DATA => {
            let rows = c.u32()?;
            let dim = c.u32()?;
            let n = rows as usize * dim as usize;
            if n.checked_mul(8) != Some(body.len() - c.pos) {
                return Err(CollectError::Codec(format!("DATA {rows}x{dim} does not match payload size")));
            }
            let values = (0..n).map(|_| c.u64().map(|v| v as i64)).collect::<Result<_, _>>()?;
            Message::Data { rows, dim, values }
        }
        TAG_ACK => Message::Ack,
        t => return Err(CollectError::Codec(format!("unknown tag {t}"))),
    };
    c.done()?;
    Ok(msg)
}

/// Decode one complete frame; returns the message and the bytes consumed.
pub fn decode(buf: &[u8]) -> Result<(Message, usize), CollectError> {
    if buf.len() < 4 {
        return Err(CollectError::Codec("truncated length prefix".into()));
    }
    let len = u32::from_be_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
    if len == 0 || len > MAX_FRAME_LEN {
        return Err(CollectError::Codec(format!("frame length {len}")));
    }
    if buf.len() < 4 + len {
        return Err(CollectError::Codec("truncated frame".into()));
    }
    Ok((decode_body(&buf[4..4 + len])?, 4 + len))
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> std::io::Result<()> {
    w.write_all(&encode(msg))?;
    w.flush()
}

pub fn read_body<R: Read>(r: &mut R) -> std::io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len == 0 || len > MAX_FRAME_LEN {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("frame length {len}")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_message() -> impl Strategy<Value = Message> {
        let blobs = proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..40), 0..6);
        prop_oneof![
            (any::<u32>(), any::<u32>(), any::<u64>()).prop_map(|(dim, k, session)| Message::Hello { dim, k, session }),
            blobs.clone().prop_map(Message::Commits),
            any::<bool>().prop_map(|b| Message::Challenge(if b { Challenge::One } else { Challenge::Zero })),
            blobs.prop_map(Message::Responses),
            prop_oneof![Just(Verdict::Reject), Just(Verdict::Accept), Just(Verdict::Continue)].prop_map(Message::Verdict),
            (0u32..6, 0u32..6).prop_flat_map(|(rows, dim)| {
                proptest::collection::vec(any::<i64>(), (rows * dim) as usize).prop_map(move |values| Message::Data {
                    rows,
                    dim,
                    values,
                })
            }),
            Just(Message::Ack),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(msg in arb_message()) {
            let frame = encode(&msg);
            let (back, used) = decode(&frame).unwrap();
            prop_assert_eq!(used, frame.len());
            prop_assert_eq!(encode(&back), frame);
            prop_assert_eq!(back, msg);
        }

        #[test]
        fn garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode(&bytes);
        }

        #[test]
        fn truncation_is_an_error(msg in arb_message(), cut in 1usize..16) {
            let frame = encode(&msg);
            let keep = frame.len().saturating_sub(cut);
            prop_assert!(decode(&frame[..keep]).is_err());
        }

        #[test]
        fn fixed_point_is_exact_in_range(v in 0.0078125f64..8.0) {
            prop_assert_eq!(from_fixed(to_fixed(v).unwrap()), v);
        }
    }

    #[test]
    fn layout() {
        let f = encode(&Message::Hello { dim: 16, k: 2, session: 7 });
        assert_eq!(f, [0, 0, 0, 17, 1, 0, 0, 0, 16, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0, 7]);
        assert_eq!(encode(&Message::Ack), [0, 0, 0, 1, 7]);
        assert_eq!(encode(&Message::Challenge(Challenge::One)), [0, 0, 0, 2, 3, 1]);
        assert!(decode(&[0, 0, 0, 2, 3, 2]).is_err());
        assert!(decode(&[0, 0, 0, 2, 7, 0]).is_err());
    }

    #[test]
    fn fixed_point_range() {
        assert_eq!(to_fixed(1.0).unwrap(), 1 << 60);
        assert!(to_fixed(8.0).is_err());
        assert!(to_fixed(f64::NAN).is_err());
        assert_eq!(from_fixed(to_fixed(-0.5).unwrap()), -0.5);
    }
}
