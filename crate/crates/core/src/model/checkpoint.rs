//! Binary checkpoint for one network pair.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"MSCP"  u32 version
//! repeated until EOF:
//!     u16 name_len, name bytes (UTF-8)
//!     u32 rank, u32 dims[rank]
//!     f64 payload[product(dims)]
//! ```
//!
//! Tensor names: `image.{k}.weight`, `image.{k}.bias`, `text.{k}.*`,
//! `projection`, `meta.{k}.*`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::binio;
use crate::error::{FormatError, Result};

use super::{Linear, MainNetParams, MetaNetParams, Mlp, Network};

pub const MAGIC: [u8; 4] = *b"MSCP";
pub const VERSION: u32 = 1;

pub fn named_tensors(net: &Network) -> Vec<(String, &Tensor)> {
    fn push_mlp<'a>(prefix: &str, m: &'a Mlp, out: &mut Vec<(String, &'a Tensor)>) {
        for (k, l) in m.layers.iter().enumerate() {
            out.push((format!("{prefix}.{k}.weight"), &l.weight));
            out.push((format!("{prefix}.{k}.bias"), &l.bias));
        }
    }
    let mut out = Vec::new();
    push_mlp("image", &net.main.image, &mut out);
    push_mlp("text", &net.main.text, &mut out);
    out.push(("projection".to_string(), &net.main.projection));
    push_mlp("meta", &net.meta.mlp, &mut out);
    out
}

pub fn write_to(net: &Network, w: &mut impl Write) -> io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in named_tensors(net) {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        binio::write_f64s(w, t.data())?;
    }
    Ok(())
}

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let mut buf = Vec::new();
    write_to(net, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(net, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Network> {
    read_from(&mut BufReader::new(File::open(path)?))
}

/// Reads named tensors in file order.
pub fn read_tensors(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    binio::read_magic(r, MAGIC)?;
    let version = binio::read_u32(r, "version")?;
    if version != VERSION {
        return Err(FormatError::Version {
            expected: VERSION,
            found: version,
        }
        .into());
    }
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 2];
        match r.read(&mut len[..1])? {
            0 => break,
            _ => r
                .read_exact(&mut len[1..])
                .map_err(|e| binio::truncated(e, "tensor name length"))?,
        }
        let len = u16::from_le_bytes(len) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| binio::truncated(e, "tensor name"))?;
        let name = String::from_utf8(name)
            .map_err(|_| FormatError::Inconsistent("tensor name is not UTF-8".into()))?;
        let rank = binio::read_u32(r, "tensor rank")? as usize;
        if rank > 8 {
            return Err(FormatError::Inconsistent(format!("{name}: rank {rank}")).into());
        }
        let dims = (0..rank)
            .map(|_| binio::read_u32(r, "tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let data = binio::read_f64s(r, numel, "tensor payload")?;
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

pub fn read_from(r: &mut impl Read) -> Result<Network> {
    let tensors = read_tensors(r)?;
    let net = assemble(tensors)?;
    net.validate()?;
    Ok(net)
}

fn assemble(tensors: Vec<(String, Tensor)>) -> Result<Network> {
    let mut image = Vec::new();
    let mut text = Vec::new();
    let mut meta = Vec::new();
    let mut projection = None;
    for (name, t) in tensors {
        if name == "projection" {
            projection = Some(t);
            continue;
        }
        let bad = || FormatError::Inconsistent(format!("unexpected tensor {name:?}"));
        let mut parts = name.split('.');
        let (Some(prefix), Some(k), Some(kind), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad().into());
        };
        let k: usize = k.parse().map_err(|_| bad())?;
        let layers = match prefix {
            "image" => &mut image,
            "text" => &mut text,
            "meta" => &mut meta,
            _ => return Err(bad().into()),
        };
        match kind {
            "weight" if k == layers.len() => layers.push(Linear {
                weight: t,
                bias: Tensor::zeros(0, 0),
            }),
            "bias" if k + 1 == layers.len() => layers[k].bias = t,
            _ => return Err(bad().into()),
        }
    }
    let projection =
        projection.ok_or_else(|| FormatError::Inconsistent("missing projection".into()))?;
    Ok(Network {
        main: MainNetParams {
            image: Mlp { layers: image },
            text: Mlp { layers: text },
            projection,
        },
        meta: MetaNetParams {
            mlp: Mlp { layers: meta },
        },
    })
}
