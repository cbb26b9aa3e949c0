//! Binary weight files: magic, config, then every tensor as little-endian
//! `f32` in declaration order.
//!
//! Header after the magic: four `u64` sizes (input channels, base filters,
//! depth, kernel), a padding tag byte, input offset and scale as `f64`, and
//! the init seed.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{Network, NetworkConfig, Padding};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NWT1";

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn to_bytes(net: &Network<f32>) -> Vec<u8> {
    let c = &net.config;
    let mut out = Vec::with_capacity(48 + 4 * net.parameter_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [c.in_channels, c.base_filters, c.depth, c.kernel_size] {
        put_u64(&mut out, v as u64);
    }
    out.push(match c.padding {
        Padding::Zero => 0,
        Padding::Periodic => 1,
    });
    out.extend_from_slice(&c.input_offset.to_le_bytes());
    out.extend_from_slice(&c.input_scale.to_le_bytes());
    put_u64(&mut out, c.seed);
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network<f32>> {
    let mut cursor = bytes;
    let mut magic = [0u8; 4];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a weight checkpoint".into()));
    }
    let next_u64 = |cursor: &mut &[u8]| -> Result<u64> {
        let mut buf = [0u8; 8];
        cursor
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("checkpoint truncated".into()))?;
        Ok(u64::from_le_bytes(buf))
    };
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = next_u64(&mut cursor)? as usize;
    }
    let padding = match cursor.first() {
        Some(0) => Padding::Zero,
        Some(1) => Padding::Periodic,
        _ => return Err(Error::Format("bad padding tag".into())),
    };
    cursor = &cursor[1..];
    let input_offset = f64::from_bits(next_u64(&mut cursor)?);
    let input_scale = f64::from_bits(next_u64(&mut cursor)?);
    let seed = next_u64(&mut cursor)?;
    let config = NetworkConfig {
        in_channels: dims[0],
        base_filters: dims[1],
        depth: dims[2],
        kernel_size: dims[3],
        padding,
        input_offset,
        input_scale,
        seed,
    };
    let mut net = Network::<f32>::init(&config)?;
    let expected = 4 * net.parameter_count();
    if cursor.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} parameter bytes, found {}",
            cursor.len()
        )));
    }
    for (p, chunk) in net.params_mut().zip(cursor.chunks_exact(4)) {
        *p = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
    }
    Ok(net)
}

pub fn save(net: &Network<f32>, path: &Path) -> Result<()> {
    let mut file = BufWriter::new(fs::File::create(path)?);
    file.write_all(&to_bytes(net))?;
    file.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Network<f32>> {
    from_bytes(&fs::read(path)?)
}
