//! Binary model checkpoint. All integers and floats are little-endian.
//!
//! ```text
//! magic    8 bytes  "PPFMODEL"
//! version  u32      1
//! layers   u32      weight layer count L
//! hidden   u32      hidden width (`ModelSpec::hidden`)
//! scaled   u8       1 if the model standardizes inputs
//! fitted   u8       1 if scaler parameters follow
//! [scaler] u32 width, width x f64 mean, width x f64 std,
//!          u32 count, count x u32 constant-feature indices
//! L times: u32 fan_in, u32 fan_out, u8 frozen,
//!          fan_in*fan_out x f64 weights (row-major, fan_in rows),
//!          fan_out x f64 bias
//! ```
//!
//! Parameters are stored as f64; the single-precision values convert exactly.

use ndarray::{Array1, Array2};

use super::{EstimatorError, EstimatorModel, Layer, ModelSpec, Network, Result, Scaler};

const MAGIC: &[u8; 8] = b"PPFMODEL";
const VERSION: u32 = 1;

pub fn encode(model: &EstimatorModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(model.net.parameter_count() * 8 + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.net.layers.len() as u32).to_le_bytes());
    out.extend_from_slice(&(model.spec.hidden as u32).to_le_bytes());
    out.push(model.spec.scaler as u8);
    out.push(model.scaler.is_some() as u8);
    if let Some(s) = &model.scaler {
        out.extend_from_slice(&(s.width() as u32).to_le_bytes());
        for v in s.mean.iter().chain(s.std.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(s.constant.len() as u32).to_le_bytes());
        for &c in &s.constant {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
    }
    for l in &model.net.layers {
        out.extend_from_slice(&(l.fan_in() as u32).to_le_bytes());
        out.extend_from_slice(&(l.fan_out() as u32).to_le_bytes());
        out.push(l.frozen as u8);
        for &w in l.w.iter() {
            out.extend_from_slice(&(w as f64).to_le_bytes());
        }
        for &b in l.b.iter() {
            out.extend_from_slice(&(b as f64).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len().saturating_sub(self.pos) < n {
            return Err(EstimatorError::BadCheckpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| EstimatorError::BadCheckpoint("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode(buf: &[u8]) -> Result<EstimatorModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(EstimatorError::BadCheckpoint("wrong magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(EstimatorError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let n_layers = r.u32()?;
    let hidden = r.u32()?;
    let scaled = r.u8()? != 0;
    let scaler = if r.u8()? != 0 {
        let width = r.u32()?;
        let mean = Array1::from(r.f64s(width)?);
        let std = Array1::from(r.f64s(width)?);
        let n_const = r.u32()?;
        let constant = (0..n_const).map(|_| r.u32()).collect::<Result<_>>()?;
        Some(Scaler { mean, std, constant })
    } else {
        None
    };
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let fan_in = r.u32()?;
        let fan_out = r.u32()?;
        let frozen = r.u8()? != 0;
        let w = r.f64s(fan_in * fan_out)?.into_iter().map(|v| v as f32).collect();
        let b = r.f64s(fan_out)?.into_iter().map(|v| v as f32).collect::<Vec<_>>();
        let w = Array2::from_shape_vec((fan_in, fan_out), w).map_err(|e| EstimatorError::BadCheckpoint(e.to_string()))?;
        if let Some(prev) = layers.last().map(|l: &Layer<f32>| l.fan_out()) {
            if prev != fan_in {
                return Err(EstimatorError::BadCheckpoint(format!("layer {} input {fan_in} does not chain from {prev}", i + 1)));
            }
        }
        layers.push(Layer { w, b: Array1::from(b), frozen });
    }
    if r.pos != buf.len() {
        return Err(EstimatorError::BadCheckpoint("trailing bytes".into()));
    }
    if layers.is_empty() {
        return Err(EstimatorError::BadCheckpoint("no layers".into()));
    }
    if let Some(s) = &scaler {
        if s.width() != layers[0].fan_in() {
            return Err(EstimatorError::BadCheckpoint("scaler width does not match the input layer".into()));
        }
    }
    Ok(EstimatorModel { spec: ModelSpec { layers: n_layers, hidden, scaler: scaled }, scaler, net: Network { layers } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::Preset;

    #[test]
    fn round_trip_bit_exact() {
        let mut m = EstimatorModel::for_buses(Preset::Ann2, 3, 7).unwrap();
        m.scaler = Some(Scaler {
            mean: Array1::from(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]),
            std: Array1::from(vec![1.0, 2.0, 3.0, 4.0, 5.0, 1.0]),
            constant: vec![5],
        });
        m.set_frozen(&[2, 6]).unwrap();
        let bytes = encode(&m);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(decode(&bytes).unwrap(), m);

        let plain = EstimatorModel::for_buses(Preset::Ann0, 2, 1).unwrap();
        assert_eq!(decode(&encode(&plain)).unwrap(), plain);
    }

    #[test]
    fn corrupt_input_rejected() {
        let m = EstimatorModel::for_buses(Preset::Ann1, 2, 1).unwrap();
        let bytes = encode(&m);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
    }
}
