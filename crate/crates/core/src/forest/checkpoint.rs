//! Binary layout: `"FFF1"`, then variant, P, D, d_in, d_out as little-endian
//! `u32`, then `w_in`, `b_in`, `w_out`, `b_out` as little-endian `f64`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::io::{read_f64s, read_magic, read_u32, write_f64s, write_u32};
use crate::params::Params;

use super::{ForestParams, Variant};

pub const FOREST_MAGIC: &[u8; 4] = b"FFF1";

pub fn write_forest<W: Write>(params: &ForestParams, mut w: W) -> Result<()> {
    w.write_all(FOREST_MAGIC)?;
    for v in [
        params.variant().code(),
        params.trees() as u32,
        params.depth() as u32,
        params.d_in() as u32,
        params.d_out() as u32,
    ] {
        write_u32(&mut w, v)?;
    }
    for t in params.tensors() {
        write_f64s(&mut w, t)?;
    }
    Ok(())
}

pub fn read_forest<R: Read>(mut r: R) -> Result<ForestParams> {
    read_magic(&mut r, FOREST_MAGIC)?;
    let variant = Variant::from_code(read_u32(&mut r)?)?;
    let trees = read_u32(&mut r)? as usize;
    let depth = read_u32(&mut r)? as usize;
    let d_in = read_u32(&mut r)? as usize;
    let d_out = read_u32(&mut r)? as usize;
    let mut params = ForestParams::zeros(trees, depth, d_in, d_out, variant)
        .map_err(|e| Error::Format(format!("bad forest header: {e}")))?;
    for t in params.tensors_mut() {
        read_f64s(&mut r, t)?;
    }
    if !params.is_finite() {
        return Err(Error::Format("checkpoint contains non-finite parameters".into()));
    }
    Ok(params)
}
