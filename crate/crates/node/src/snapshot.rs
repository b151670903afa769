//! Local dataset snapshots on disk.
//!
//! `"XMKD" | version: u16 | rows: u32 | dim: u32 | rows*dim f32 | rows u16`,
//! little-endian, features row-major.

use std::io::{self, Read, Write};

use xmk_core::LocalDataset;

const MAGIC: &[u8; 4] = b"XMKD";
const VERSION: u16 = 1;

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

pub fn write_snapshot<W: Write>(w: &mut W, data: &LocalDataset) -> io::Result<()> {
    let rows = data.len();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(data.dim as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(rows * data.dim * 4 + rows * 2);
    for x in &data.features {
        buf.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    for y in &data.labels {
        buf.extend_from_slice(&y.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_snapshot<R: Read>(r: &mut R) -> io::Result<LocalDataset> {
    let mut head = [0u8; 14];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(invalid("not a dataset snapshot"));
    }
    if u16::from_le_bytes([head[4], head[5]]) != VERSION {
        return Err(invalid("unsupported snapshot version"));
    }
    let rows = u32::from_le_bytes(head[6..10].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(head[10..14].try_into().unwrap()) as usize;
    let cells = rows
        .checked_mul(dim)
        .ok_or_else(|| invalid("snapshot too large"))?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != cells * 4 + rows * 2 {
        return Err(invalid("snapshot length does not match its header"));
    }
    let (feat, labels) = body.split_at(cells * 4);
    let features = feat
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let labels = labels
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    LocalDataset::new(features, labels, dim).map_err(|e| invalid(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_at_f32_precision() {
        let data =
            LocalDataset::new(vec![0.5, -1.25, 3.0, 1e-3, 2.0, 7.5], vec![1, 4, 0], 2).unwrap();
        let mut bytes = Vec::new();
        write_snapshot(&mut bytes, &data).unwrap();
        assert_eq!(bytes.len(), 14 + 6 * 4 + 3 * 2);
        let back = read_snapshot(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.labels, data.labels);
        assert_eq!(back.dim, 2);
        for (a, b) in back.features.iter().zip(&data.features) {
            assert!((a - b).abs() < 1e-6);
        }
        bytes.pop();
        assert!(read_snapshot(&mut bytes.as_slice()).is_err());
        assert!(read_snapshot(&mut &b"XMKE\x01\x00"[..]).is_err());
    }
}
