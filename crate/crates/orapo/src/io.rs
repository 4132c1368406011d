//! Binary parameter files.
//!
//! Layout: a 16-byte header — magic `PPAR`, format version (u32 LE), then
//! D, H, V as u16 LE and two reserved bytes — followed by every parameter
//! as little-endian f64 in flat order (w_ctx, w_prefix, bias, w_out).
//! Round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::policy::PolicyParams;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"PPAR";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn save_params(path: &Path, params: &PolicyParams) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(MAGIC);
    header[4..8].copy_from_slice(&VERSION.to_le_bytes());
    let d = u16::try_from(params.ctx_dim)
        .map_err(|_| Error::Config("ctx_dim too large for checkpoint header".into()))?;
    let h = u16::try_from(params.hidden_dim)
        .map_err(|_| Error::Config("hidden_dim too large for checkpoint header".into()))?;
    let v = u16::try_from(params.vocab_size)
        .map_err(|_| Error::Config("vocab_size too large for checkpoint header".into()))?;
    header[8..10].copy_from_slice(&d.to_le_bytes());
    header[10..12].copy_from_slice(&h.to_le_bytes());
    header[12..14].copy_from_slice(&v.to_le_bytes());
    out.write_all(&header)?;
    for x in params.to_flat() {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_params(path: &Path) -> Result<PolicyParams> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; HEADER_LEN];
    file.read_exact(&mut header)
        .map_err(|_| Error::Parse { line: 0, msg: "truncated parameter header".into() })?;
    if &header[0..4] != MAGIC {
        return Err(Error::Parse { line: 0, msg: "bad magic in parameter file".into() });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Parse { line: 0, msg: format!("unsupported parameter file version {version}") });
    }
    let d = u16::from_le_bytes(header[8..10].try_into().unwrap()) as usize;
    let h = u16::from_le_bytes(header[10..12].try_into().unwrap()) as usize;
    let v = u16::from_le_bytes(header[12..14].try_into().unwrap()) as usize;
    let count = d * h + v * h + h + h * v;
    let mut body = vec![0u8; count * 8];
    file.read_exact(&mut body)
        .map_err(|_| Error::Parse { line: 0, msg: "truncated parameter body".into() })?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(Error::Parse { line: 0, msg: "trailing bytes after parameter body".into() });
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    PolicyParams::from_flat(d, h, v, &flat)
}
