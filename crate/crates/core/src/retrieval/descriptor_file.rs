//! `GPAE` descriptor files: magic, `u32` count, `u32` dim, then per row the
//! identity (`u16` length + UTF-8), a distractor byte and `dim` `f32`
//! values. Little-endian throughout.

use std::path::Path;

use super::DescriptorMatrix;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"GPAE";

pub fn encode_descriptors(m: &DescriptorMatrix) -> Result<Vec<u8>> {
    let count = u32::try_from(m.len()).map_err(|_| Error::Data("too many descriptors".into()))?;
    let dim = u32::try_from(m.dim()).map_err(|_| Error::Data("descriptor too wide".into()))?;
    let mut out = Vec::with_capacity(12 + m.rows().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for i in 0..m.len() {
        let id = m.identities()[i].as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| Error::Data(format!("identity too long: {}", m.identities()[i])))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
        out.push(m.is_distractor()[i] as u8);
        for v in m.row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_descriptors(bytes: &[u8]) -> Result<DescriptorMatrix> {
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Data(format!("descriptor file truncated at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::Data("not a descriptor file (bad magic)".into()));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let (mut rows, mut ids, mut flags) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let id = std::str::from_utf8(take(len)?).map_err(|_| Error::Data("identity is not UTF-8".into()))?;
        ids.push(id.to_string());
        flags.push(match take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Data(format!("bad distractor flag {b}"))),
        });
        rows.extend(take(dim * 4)?.chunks(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())));
    }
    if pos != bytes.len() {
        return Err(Error::Data("trailing bytes after descriptor rows".into()));
    }
    DescriptorMatrix::new(dim, rows, ids, flags)
}

pub fn write_descriptors(path: &Path, m: &DescriptorMatrix) -> Result<()> {
    write_atomic(path, &encode_descriptors(m)?)
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_descriptors(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let m = DescriptorMatrix::new(2, vec![1.0, -2.0, 0.5, 3.0], vec!["7".into(), "dorsal_left/12".into()], vec![false, true]).unwrap();
        let bytes = encode_descriptors(&m).unwrap();
        assert_eq!(&bytes[..4], b"GPAE");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b'7');
        assert_eq!(bytes[15], 0);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(decode_descriptors(&bytes).unwrap(), m);
        assert!(decode_descriptors(&bytes[..bytes.len() - 1]).is_err());
    }
}
