//! Checkpoint files.
//!
//! Layout (little-endian): magic `CALC`, version `u32`, role tag `u32`,
//! spec hash (length-prefixed hex), spec text (length-prefixed), frozen
//! flag `u8`, attribute count `u32` with length-prefixed key/value pairs,
//! tensor count `u32`, then per tensor its length-prefixed name followed by
//! the tensor in `CALT` format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Network, NetworkSpec, ParameterSet, Role};
use crate::error::{Error, Result};
use crate::tensor::{read_exact, read_u32, Tensor};

const MAGIC: &[u8; 4] = b"CALC";
const VERSION: u32 = 1;

/// A loaded network plus free-form string attributes (e.g. the
/// calibration budget it was trained with).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub attrs: BTreeMap<String, String>,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(Error::Format(format!("string length {n} too large")));
    }
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("non-UTF-8 string".into()))
}

pub fn save_checkpoint(
    network: &Network,
    attrs: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&network.spec.role.tag().to_le_bytes())?;
    write_str(&mut w, &network.spec.hash())?;
    write_str(&mut w, &network.spec.to_text())?;
    w.write_all(&[u8::from(network.params.is_frozen())])?;
    w.write_all(&(attrs.len() as u32).to_le_bytes())?;
    for (k, v) in attrs {
        write_str(&mut w, k)?;
        write_str(&mut w, v)?;
    }
    w.write_all(&(network.params.len() as u32).to_le_bytes())?;
    for (name, t) in network.params.iter() {
        write_str(&mut w, name)?;
        t.write_to(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

fn corrupt(e: Error) -> Error {
    match e {
        Error::Format(m) | Error::MalformedSpec(m) | Error::Shape(m) => Error::CorruptCheckpoint(m),
        other => other,
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    read_body(&mut r).map_err(corrupt)
}

/// Loads a checkpoint and requires its spec to hash to `expected`'s hash.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &NetworkSpec) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let (want, got) = (expected.hash(), ck.network.spec.hash());
    if want != got {
        return Err(Error::SpecMismatch { expected: want, found: got });
    }
    Ok(ck)
}

fn read_body<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let role = Role::from_tag(read_u32(r)?).ok_or_else(|| Error::Format("unknown role tag".into()))?;
    let hash = read_str(r)?;
    let spec = NetworkSpec::from_text(&read_str(r)?)?;
    if spec.role != role {
        return Err(Error::Format(format!("role tag {role} disagrees with spec role {}", spec.role)));
    }
    if spec.hash() != hash {
        return Err(Error::Format("stored spec hash does not match stored spec".into()));
    }
    let mut flag = [0u8; 1];
    read_exact(r, &mut flag)?;
    let n_attrs = read_u32(r)?;
    let mut attrs = BTreeMap::new();
    for _ in 0..n_attrs {
        let k = read_str(r)?;
        attrs.insert(k, read_str(r)?);
    }
    let n = read_u32(r)?;
    let mut params = ParameterSet::new();
    for _ in 0..n {
        let name = read_str(r)?;
        params.insert(name, Tensor::read_from(r)?)?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    if flag[0] == 1 {
        params.freeze();
    }
    Ok(Checkpoint { network: Network::from_parts(spec, params)?, attrs })
}
