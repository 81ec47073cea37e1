//! Binary dataset file.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"MSCD"  u32 version
//! u32 n_train, u32 n_meta, u32 n_validation, u32 n_test
//! u32 d_img, u32 d_txt
//! records, split by split in the order above:
//!     u64 id, u64 original_partner, u8 clean
//!     f64 image[d_img], f64 text[d_txt]
//! u32 manifest_len, manifest JSON bytes
//! ```
//!
//! Trailing bytes after the manifest are rejected.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DatasetBundle, Manifest, PairRecord};
use crate::binio;
use crate::error::{FormatError, Result};

pub const MAGIC: [u8; 4] = *b"MSCD";
pub const VERSION: u32 = 1;

pub fn write_to(bundle: &DatasetBundle, w: &mut impl Write) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (_, split) in bundle.splits() {
        w.write_all(&(split.len() as u32).to_le_bytes())?;
    }
    w.write_all(&(bundle.d_img() as u32).to_le_bytes())?;
    w.write_all(&(bundle.d_txt() as u32).to_le_bytes())?;
    for (_, split) in bundle.splits() {
        for r in split {
            w.write_all(&r.id.to_le_bytes())?;
            w.write_all(&r.original_partner.to_le_bytes())?;
            w.write_all(&[r.clean as u8])?;
            binio::write_f64s(w, &r.image)?;
            binio::write_f64s(w, &r.text)?;
        }
    }
    let manifest = serde_json::to_vec(&bundle.manifest)?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(&manifest)?;
    Ok(())
}

pub fn to_bytes(bundle: &DatasetBundle) -> Vec<u8> {
    let mut buf = Vec::new();
    write_to(bundle, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn write_dataset(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(bundle, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<DatasetBundle> {
    read_from(&mut BufReader::new(File::open(path)?))
}

pub fn read_from(r: &mut impl Read) -> Result<DatasetBundle> {
    binio::read_magic(r, MAGIC)?;
    let version = binio::read_u32(r, "version")?;
    if version != VERSION {
        return Err(FormatError::Version {
            expected: VERSION,
            found: version,
        }
        .into());
    }
    let mut counts = [0usize; 4];
    for c in &mut counts {
        *c = binio::read_u32(r, "split counts")? as usize;
    }
    let d_img = binio::read_u32(r, "d_img")? as usize;
    let d_txt = binio::read_u32(r, "d_txt")? as usize;

    let mut splits: [Vec<PairRecord>; 4] = Default::default();
    for (split, &n) in splits.iter_mut().zip(&counts) {
        split.reserve(n);
        for _ in 0..n {
            let id = binio::read_u64(r, "record id")?;
            let original_partner = binio::read_u64(r, "record partner")?;
            let clean = match binio::read_u8(r, "record flag")? {
                0 => false,
                1 => true,
                f => return Err(FormatError::Inconsistent(format!("clean flag {f}")).into()),
            };
            let image = binio::read_f64s(r, d_img, "image features")?;
            let text = binio::read_f64s(r, d_txt, "text features")?;
            split.push(PairRecord {
                id,
                image,
                text,
                clean,
                original_partner,
            });
        }
    }

    let len = binio::read_u32(r, "manifest length")? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|e| binio::truncated(e, "manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&json)
        .map_err(|e| FormatError::Inconsistent(format!("manifest: {e}")))?;
    let mut probe = [0u8; 1];
    if read_some(r, &mut probe)? != 0 {
        return Err(FormatError::Inconsistent("trailing bytes after manifest".into()).into());
    }
    if manifest.generation.d_img != d_img || manifest.generation.d_txt != d_txt {
        return Err(FormatError::Inconsistent(format!(
            "header dims {d_img}x{d_txt} disagree with manifest {}x{}",
            manifest.generation.d_img, manifest.generation.d_txt
        ))
        .into());
    }
    let [train, meta, validation, test] = splits;
    let bundle = DatasetBundle {
        train,
        meta,
        validation,
        test,
        manifest,
    };
    bundle
        .validate()
        .map_err(|e| FormatError::Inconsistent(e.to_string()))?;
    Ok(bundle)
}

fn read_some(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    loop {
        match r.read(buf) {
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            other => return other,
        }
    }
}
