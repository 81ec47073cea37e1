//! Little-endian primitives shared by the checkpoint and dataset formats.

use std::io::{self, Read, Write};

use crate::error::{Error, FormatError, Result};

pub(crate) fn read_exact<const N: usize>(r: &mut impl Read, what: &'static str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| truncated(e, what))?;
    Ok(buf)
}

pub(crate) fn truncated(e: io::Error, what: &'static str) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        FormatError::Truncated(what).into()
    } else {
        e.into()
    }
}

pub(crate) fn read_magic(r: &mut impl Read, expected: [u8; 4]) -> Result<()> {
    let found = read_exact::<4>(r, "magic")?;
    if found != expected {
        return Err(FormatError::BadMagic { expected, found }.into());
    }
    Ok(())
}

pub(crate) fn read_u8(r: &mut impl Read, what: &'static str) -> Result<u8> {
    Ok(read_exact::<1>(r, what)?[0])
}

pub(crate) fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, what)?))
}

pub(crate) fn read_u64(r: &mut impl Read, what: &'static str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, what)?))
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize, what: &'static str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(|e| truncated(e, what))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub(crate) fn write_f64s(w: &mut impl Write, values: &[f64]) -> io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}
