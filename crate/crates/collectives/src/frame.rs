//! Wire frames.
//!
//! ```text
//! offset  size  field
//! 0       1     opcode
//! 1       4     tag           (u32 LE)
//! 5       4     chunk_index   (u32 LE)
//! 9       4     payload_len   (u32 LE)
//! 13      n     payload       (tensor data as f32 LE)
//! ```

use std::io::{Read, Write};

use crate::error::CommError;

pub const HEADER_LEN: usize = 13;
/// Upper bound on a single payload, to reject garbage headers early.
pub const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Hello = 1,
    RankAssign = 2,
    BarrierArrive = 3,
    BarrierRelease = 4,
    ReduceChunk = 5,
    GatherChunk = 6,
    Bcast = 7,
    Shutdown = 8,
}

impl TryFrom<u8> for Opcode {
    type Error = CommError;
    fn try_from(v: u8) -> Result<Self, CommError> {
        Ok(match v {
            1 => Opcode::Hello,
            2 => Opcode::RankAssign,
            3 => Opcode::BarrierArrive,
            4 => Opcode::BarrierRelease,
            5 => Opcode::ReduceChunk,
            6 => Opcode::GatherChunk,
            7 => Opcode::Bcast,
            8 => Opcode::Shutdown,
            other => return Err(CommError::Protocol(format!("unknown opcode {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub opcode: Opcode,
    pub tag: u32,
    pub chunk_index: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(opcode: Opcode, tag: u32, chunk_index: u32, payload: Vec<u8>) -> Self {
        Self {
            opcode,
            tag,
            chunk_index,
            payload,
        }
    }

    pub fn control(opcode: Opcode, tag: u32) -> Self {
        Self::new(opcode, tag, 0, Vec::new())
    }

    pub fn floats(opcode: Opcode, tag: u32, chunk_index: u32, values: &[f32]) -> Self {
        Self::new(opcode, tag, chunk_index, f32s_to_bytes(values))
    }

    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.push(self.opcode as u8);
        out.extend_from_slice(&self.tag.to_le_bytes());
        out.extend_from_slice(&self.chunk_index.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CommError> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    /// Reads one frame; `Ok(None)` on a clean end of stream before any header byte.
    pub fn read_from(r: &mut impl Read) -> Result<Option<Frame>, CommError> {
        let mut header = [0u8; HEADER_LEN];
        let mut got = 0;
        while got < HEADER_LEN {
            match r.read(&mut header[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => {
                    return Err(CommError::Transport(
                        "stream closed inside a frame header".into(),
                    ))
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let opcode = Opcode::try_from(header[0])?;
        let word =
            |i: usize| u32::from_le_bytes([header[i], header[i + 1], header[i + 2], header[i + 3]]);
        let (tag, chunk_index, len) = (word(1), word(5), word(9) as usize);
        if len > MAX_PAYLOAD {
            return Err(CommError::Protocol(format!(
                "payload length {len} exceeds limit"
            )));
        }
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)
            .map_err(|e| CommError::Transport(format!("payload truncated: {e}")))?;
        Ok(Some(Frame {
            opcode,
            tag,
            chunk_index,
            payload,
        }))
    }

    pub fn to_f32s(&self) -> Result<Vec<f32>, CommError> {
        bytes_to_f32s(&self.payload)
    }
}

pub fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn bytes_to_f32s(bytes: &[u8]) -> Result<Vec<f32>, CommError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(CommError::Protocol(format!(
            "{} payload bytes is not a whole number of f32",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let f = Frame::floats(Opcode::ReduceChunk, 0x0102_0304, 7, &[1.0]);
        assert_eq!(
            f.encode(),
            vec![5, 0x04, 0x03, 0x02, 0x01, 7, 0, 0, 0, 4, 0, 0, 0, 0x00, 0x00, 0x80, 0x3f]
        );
    }

    #[test]
    fn bad_opcode_and_truncation_are_rejected() {
        let mut bytes = Frame::control(Opcode::Hello, 1).encode();
        bytes[0] = 99;
        assert!(matches!(
            Frame::read_from(&mut bytes.as_slice()),
            Err(CommError::Protocol(_))
        ));

        let bytes = Frame::floats(Opcode::Bcast, 0, 0, &[1.0, 2.0]).encode();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(
            Frame::read_from(&mut &cut[..]),
            Err(CommError::Transport(_))
        ));
        assert!(Frame::read_from(&mut &bytes[..5]).is_err());
        assert!(Frame::read_from(&mut &[][..]).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn frames_round_trip(op in 1u8..=8, tag: u32, idx: u32, vals in proptest::collection::vec(any::<f32>(), 0..64)) {
            let f = Frame::floats(Opcode::try_from(op).unwrap(), tag, idx, &vals);
            let bytes = f.encode();
            prop_assert_eq!(bytes.len(), HEADER_LEN + 4 * vals.len());
            let back = Frame::read_from(&mut bytes.as_slice()).unwrap().unwrap();
            prop_assert_eq!(&back, &f);
            let floats = back.to_f32s().unwrap();
            prop_assert!(floats.iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
