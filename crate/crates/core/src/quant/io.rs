//! `DLQQ` record: magic, `u8` bits, `u8` scheme, `u8` granularity,
//! `u32` rows, `u32` cols, `u32` group count, then `i32` codes, `f64`
//! scales and `i32` zero points.

use std::io::{Read, Write};

use super::{Granularity, QuantSpec, QuantizedTensor, Scheme};
use crate::error::{Error, Result};
use crate::numerics::binio::{BinReader, BinWriter};

pub const QUANT_MAGIC: &[u8; 4] = b"DLQQ";

pub fn write_quantized<W: Write>(w: &mut BinWriter<W>, q: &QuantizedTensor) -> Result<()> {
    w.bytes(QUANT_MAGIC)?;
    w.u8(q.spec.bits)?;
    w.u8(match q.spec.scheme {
        Scheme::Symmetric => 0,
        Scheme::Asymmetric => 1,
    })?;
    w.u8(match q.spec.granularity {
        Granularity::PerTensor => 0,
        Granularity::PerChannel => 1,
        Granularity::PerToken => 2,
    })?;
    w.len(q.rows)?;
    w.len(q.cols)?;
    w.len(q.scales.len())?;
    for &c in &q.codes {
        w.i32(c)?;
    }
    for &s in &q.scales {
        w.f64(s)?;
    }
    for &z in &q.zero_points {
        w.i32(z)?;
    }
    Ok(())
}

pub fn read_quantized<R: Read>(r: &mut BinReader<R>) -> Result<QuantizedTensor> {
    r.magic(QUANT_MAGIC)?;
    let bits = r.u8()?;
    let scheme = match r.u8()? {
        0 => Scheme::Symmetric,
        1 => Scheme::Asymmetric,
        v => return Err(Error::Format(format!("unknown scheme tag {v}"))),
    };
    let granularity = match r.u8()? {
        0 => Granularity::PerTensor,
        1 => Granularity::PerChannel,
        2 => Granularity::PerToken,
        v => return Err(Error::Format(format!("unknown granularity tag {v}"))),
    };
    let spec =
        QuantSpec::new(bits, scheme, granularity).map_err(|e| Error::Format(e.to_string()))?;
    let rows = r.len()?;
    let cols = r.len()?;
    let groups = r.len()?;
    let codes = (0..rows * cols)
        .map(|_| r.i32())
        .collect::<Result<Vec<_>>>()?;
    let scales = (0..groups).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let zero_points = (0..groups).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
    let q = QuantizedTensor {
        codes,
        scales,
        zero_points,
        spec,
        rows,
        cols,
    };
    q.validate()?;
    Ok(q)
}
