//! Binary vector snapshots.
//!
//! Layout: `b"MVS1"`, subvector count (u32), one length per subvector (u64),
//! element width (u32, always 8), then each subvector's payload as
//! little-endian f64.

use std::io::{Read, Write};

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MVS1";

pub fn write_snapshot<W: Write>(out: &mut W, subs: &[Vec<f64>]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(subs.len() as u32).to_le_bytes())?;
    for s in subs {
        out.write_all(&(s.len() as u64).to_le_bytes())?;
    }
    out.write_all(&8u32.to_le_bytes())?;
    for s in subs {
        let bytes: Vec<u8> = s.iter().flat_map(|x| x.to_le_bytes()).collect();
        out.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_snapshot<R: Read>(input: &mut R) -> Result<Vec<Vec<f64>>> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a vector snapshot".into()));
    }
    let count = read_u32(input)? as usize;
    let mut lens = Vec::with_capacity(count);
    for _ in 0..count {
        let mut b = [0u8; 8];
        read_exact(input, &mut b)?;
        lens.push(u64::from_le_bytes(b) as usize);
    }
    let width = read_u32(input)?;
    if width != 8 {
        return Err(Error::Format(format!("element width {width}, expected 8")));
    }
    let mut out = Vec::with_capacity(count);
    for len in lens {
        let mut bytes = vec![0u8; len * 8];
        read_exact(input, &mut bytes)?;
        out.push(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    Ok(out)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated snapshot".into()),
        _ => Error::Io(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let subs = vec![vec![1.0, -0.0, f64::MIN_POSITIVE], vec![], vec![f64::NAN]];
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &subs).unwrap();
        assert_eq!(&buf[..4], b"MVS1");
        assert_eq!(buf.len(), 4 + 4 + 3 * 8 + 4 + 4 * 8);
        let back = read_snapshot(&mut buf.as_slice()).unwrap();
        for (a, b) in subs.iter().flatten().zip(back.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back[1].len(), 0);
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(matches!(read_snapshot(&mut &b"NOPE"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &[vec![1.0, 2.0]]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_snapshot(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
