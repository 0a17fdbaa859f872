//! Canonical binary encoding of [`SparseMessage`].
//!
//! ```text
//! u32 LE  sender
//! u32 LE  dim (n)
//! [u8]    membership bitmap, ceil(n/8) bytes, coordinate l at bit l%8 of byte l/8
//! then, for each selected coordinate in ascending order:
//!   0xFF               zero mark (8 bits)
//!   f64 big-endian     nonzero value (64 bits)
//! ```
//!
//! Past the 8-byte header and the bitmap padding, the payload is
//! [`bit_cost`](crate::pme::bit_cost) plus one bit per selected coordinate:
//! the bitmap spends a bit on every coordinate where the accounting model
//! only charges unselected ones. A big-endian binary64 starts
//! with the byte `0xFF` only for NaN, negative infinity and negative values
//! of magnitude at least 2^1009, so those values are not encodable.

use thiserror::Error;

use crate::pme::{PmeError, SparseMessage};

pub const HEADER_BYTES: usize = 8;
pub const ZERO_MARK: u8 = 0xFF;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("truncated input: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} trailing bytes after message")]
    Trailing(usize),
    #[error("non-zero padding bits in bitmap")]
    Padding,
    #[error("value {0} cannot be encoded")]
    Unencodable(f64),
    #[error("non-canonical value encoding at offset {0}")]
    NonCanonical(usize),
    #[error("sender or dimension does not fit in 32 bits")]
    Overflow,
    #[error(transparent)]
    Message(#[from] PmeError),
}

/// Encoded size in bytes.
pub fn encoded_len(msg: &SparseMessage) -> usize {
    let z = msg.zero_count();
    HEADER_BYTES + msg.dim().div_ceil(8) + 8 * (msg.len() - z) + z
}

pub fn encode(msg: &SparseMessage) -> Result<Vec<u8>, CodecError> {
    let sender = u32::try_from(msg.sender()).map_err(|_| CodecError::Overflow)?;
    let dim = u32::try_from(msg.dim()).map_err(|_| CodecError::Overflow)?;
    let mut out = Vec::with_capacity(encoded_len(msg));
    out.extend_from_slice(&sender.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    let mut bitmap = vec![0u8; msg.dim().div_ceil(8)];
    for &i in msg.indices() {
        bitmap[i / 8] |= 1 << (i % 8);
    }
    out.extend_from_slice(&bitmap);
    for &v in msg.values() {
        if v == 0.0 {
            out.push(ZERO_MARK);
        } else {
            let bytes = v.to_be_bytes();
            if bytes[0] == ZERO_MARK {
                return Err(CodecError::Unencodable(v));
            }
            out.extend_from_slice(&bytes);
        }
    }
    Ok(out)
}

fn take(buf: &[u8], offset: usize, len: usize) -> Result<&[u8], CodecError> {
    buf.get(offset..offset.saturating_add(len))
        .ok_or(CodecError::Truncated { offset, needed: len })
}

pub fn decode(buf: &[u8]) -> Result<SparseMessage, CodecError> {
    let header = take(buf, 0, HEADER_BYTES)?;
    let sender = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let bitmap = take(buf, HEADER_BYTES, dim.div_ceil(8))?;
    if !dim.is_multiple_of(8) {
        let last = bitmap[bitmap.len() - 1];
        if last >> (dim % 8) != 0 {
            return Err(CodecError::Padding);
        }
    }
    let mut indices = Vec::new();
    for (byte_idx, &byte) in bitmap.iter().enumerate() {
        for bit in 0..8 {
            if byte & (1 << bit) != 0 {
                indices.push(byte_idx * 8 + bit);
            }
        }
    }
    let mut offset = HEADER_BYTES + bitmap.len();
    let mut values = Vec::with_capacity(indices.len());
    for _ in 0..indices.len() {
        let first = take(buf, offset, 1)?[0];
        if first == ZERO_MARK {
            values.push(0.0);
            offset += 1;
        } else {
            let bytes: [u8; 8] = take(buf, offset, 8)?.try_into().unwrap();
            let v = f64::from_be_bytes(bytes);
            if v == 0.0 || !v.is_finite() {
                return Err(CodecError::NonCanonical(offset));
            }
            values.push(v);
            offset += 8;
        }
    }
    if offset != buf.len() {
        return Err(CodecError::Trailing(buf.len() - offset));
    }
    Ok(SparseMessage::new(sender, dim, indices, values)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pme::bit_cost;

    #[test]
    fn star_example_layout() {
        let msg = SparseMessage::from_selection(5, &[3.0, 6.0, 0.0, 6.0], vec![2, 3]).unwrap();
        let bytes = encode(&msg).unwrap();
        let mut expect = vec![5, 0, 0, 0, 4, 0, 0, 0, 0b1100, ZERO_MARK];
        expect.extend_from_slice(&6.0f64.to_be_bytes());
        assert_eq!(bytes, expect);
        assert_eq!(decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn payload_matches_bit_cost() {
        let w: Vec<f64> = (0..37).map(|i| if i % 5 == 0 { 0.0 } else { i as f64 - 10.5 }).collect();
        let msg = SparseMessage::from_selection(9, &w, (0..37).step_by(3).collect()).unwrap();
        let bytes = encode(&msg).unwrap();
        assert_eq!(bytes.len(), encoded_len(&msg));
        let padding_bits = (8 - msg.dim() % 8) % 8;
        assert_eq!(8 * (bytes.len() - HEADER_BYTES) - padding_bits, bit_cost(&msg) as usize + msg.len());
    }

    #[test]
    fn rejects_malformed() {
        let msg = SparseMessage::from_selection(1, &[1.0, 2.0, 3.0], vec![0, 2]).unwrap();
        let good = encode(&msg).unwrap();
        assert!(matches!(decode(&good[..good.len() - 1]), Err(CodecError::Truncated { .. })));
        let mut trailing = good.clone();
        trailing.push(0);
        assert_eq!(decode(&trailing), Err(CodecError::Trailing(1)));
        let mut pad = good.clone();
        pad[8] |= 0b1000;
        assert_eq!(decode(&pad), Err(CodecError::Padding));
        let mut empty = good[..9].to_vec();
        empty[8] = 0;
        assert!(matches!(decode(&empty), Err(CodecError::Message(_))));
        let mut zero_val = good[..9].to_vec();
        zero_val[8] = 0b001;
        zero_val.extend_from_slice(&0.0f64.to_be_bytes());
        assert!(matches!(decode(&zero_val), Err(CodecError::NonCanonical(_))));
        assert!(matches!(decode(&[0, 0, 0, 0, 255, 255, 255, 255]), Err(CodecError::Truncated { .. })));
    }

    #[test]
    fn huge_negative_is_unencodable() {
        let msg = SparseMessage::from_selection(0, &[-f64::MAX], vec![0]).unwrap();
        assert!(matches!(encode(&msg), Err(CodecError::Unencodable(_))));
    }
}
