//! Named parameter tensors and their checkpoint encoding.
//!
//! Checkpoint layout (all integers `u32` little-endian):
//!
//! ```text
//! count
//! repeat count times:
//!     name_len, name (UTF-8), ndim, dims[ndim], data (f32 LE, row-major)
//! ```

use std::io::{Read, Write};

use crate::error::ModelError;
use crate::tensor::{Scalar, Tensor};

/// Ordered list of named tensors. The order is fixed by construction and is
/// the order used when flattening for communication.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites every tensor from a flat buffer produced by [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<(), ModelError> {
        if flat.len() != self.numel() {
            return Err(ModelError::Input(format!(
                "flat buffer has {} values, parameter set has {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Fingerprint of every value's bit pattern, used to compare replicas.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over the raw bit patterns.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.flatten() {
            for b in v.as_f64().to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), ModelError> {
        write_u32(&mut w, self.entries.len())?;
        for (name, t) in &self.entries {
            write_u32(&mut w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(&mut w, t.shape().len())?;
            for &d in t.shape() {
                write_u32(&mut w, d)?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ModelError> {
        let count = read_u32(&mut r)?;
        let mut set = Self::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)?;
            if name_len > 4096 {
                return Err(ModelError::Checkpoint(format!(
                    "name length {name_len} too large"
                )));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| ModelError::Checkpoint("parameter name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)?;
            if ndim == 0 || ndim > 8 {
                return Err(ModelError::Checkpoint(format!("{name}: bad rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r)?);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| ModelError::Checkpoint(format!("{name}: {e}")))?;
            set.push(name, t);
        }
        Ok(set)
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<(), ModelError> {
    let v = u32::try_from(v).map_err(|_| ModelError::Checkpoint(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.push(
            "a.weight",
            Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0),
        );
        p.push("a.bias", Tensor::from_fn(&[3], |i| i as f32));
        p
    }

    #[test]
    fn checkpoint_bytes_are_length_prefixed_le() {
        let mut p = ParamSet::<f32>::new();
        p.push("w", Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let expected: Vec<u8> = [
            &1u32.to_le_bytes()[..],
            &1u32.to_le_bytes(),
            b"w",
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &1.0f32.to_le_bytes(),
        ]
        .concat();
        assert_eq!(buf, expected);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(ParamSet::<f32>::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn flat_assign_checks_length() {
        let mut p = sample();
        assert!(p.assign_flat(&[0.0; 3]).is_err());
        let flat: Vec<f32> = (0..9).map(|i| i as f32).collect();
        p.assign_flat(&flat).unwrap();
        assert_eq!(p.flatten(), flat);
    }

    proptest! {
        #[test]
        fn checkpoint_round_trips(vals in proptest::collection::vec(-1e6f32..1e6, 9)) {
            let mut p = sample();
            p.assign_flat(&vals).unwrap();
            let mut buf = Vec::new();
            p.write_to(&mut buf).unwrap();
            let back = ParamSet::<f32>::read_from(buf.as_slice()).unwrap();
            prop_assert_eq!(back.checksum(), p.checksum());
            prop_assert_eq!(back, p);
        }
    }
}
