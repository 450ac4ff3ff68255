//! Flat little-endian binary checkpoints of a parameter bundle.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "LMCKPT01"
//! 8       1     architecture: 0 srnn, 1 lt-rnn, 2 lstm, 3 lstm-peephole, 4 pooled
//! 9       1     nonlinearity: 0 identity, 1 relu, 2 tanh (0 for LSTMs)
//! 10      4     pool size, u32 (0 unless pooled)
//! 14      4     tensor count n, u32
//! then n tensors, each:
//!         2     name length L, u16
//!         L     name, UTF-8
//!         4     rows, u32
//!         4     cols, u32
//!         8·rows·cols   entries, f64, row-major
//! ```
//!
//! Tensors appear in [`Model::tensors`] order. Nothing follows the last one.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Architecture, LstmParams, Model, Nonlinearity, PooledParams, RnnParams};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"LMCKPT01";

fn format_error(msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        msg: msg.into(),
    }
}

fn arch_code(a: Architecture) -> u8 {
    match a {
        Architecture::Srnn => 0,
        Architecture::LtRnn => 1,
        Architecture::Lstm => 2,
        Architecture::LstmPeephole => 3,
        Architecture::Pooled => 4,
    }
}

fn nl_code(n: Nonlinearity) -> u8 {
    match n {
        Nonlinearity::Identity => 0,
        Nonlinearity::Relu => 1,
        Nonlinearity::Tanh => 2,
    }
}

pub fn write_model(model: &Model, out: &mut dyn Write) -> Result<()> {
    let (nl, pool) = match model {
        Model::Srnn(p) | Model::LtRnn(p) => (nl_code(p.nonlinearity), 0u32),
        Model::Lstm(_) => (0, 0),
        Model::Pooled(p) => (nl_code(p.nonlinearity), p.pool as u32),
    };
    out.write_all(MAGIC)?;
    out.write_all(&[arch_code(model.architecture()), nl])?;
    out.write_all(&pool.to_le_bytes())?;
    let tensors = model.tensors();
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rows() as u32).to_le_bytes())?;
        out.write_all(&(t.cols() as u32).to_le_bytes())?;
        for v in t.as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_model(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut dyn Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_error("truncated file"),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

pub fn read_model(r: &mut dyn Read) -> Result<Model> {
    if &read_exact::<8>(r)? != MAGIC {
        return Err(format_error("bad magic"));
    }
    let [arch, nl] = read_exact::<2>(r)?;
    let pool = u32::from_le_bytes(read_exact(r)?) as usize;
    let count = u32::from_le_bytes(read_exact(r)?) as usize;
    let nonlinearity = match nl {
        0 => Nonlinearity::Identity,
        1 => Nonlinearity::Relu,
        2 => Nonlinearity::Tanh,
        c => return Err(format_error(format!("unknown nonlinearity code {c}"))),
    };
    let expected: &[&str] = match arch {
        0 | 1 => &["encoder", "transition", "bias", "decoder"],
        2 => &["input_weights", "recurrent_weights", "bias", "decoder"],
        3 => &["input_weights", "recurrent_weights", "bias", "decoder", "peephole"],
        4 => &["encoder", "transition", "bias", "decoder_raw", "decoder_pooled"],
        c => return Err(format_error(format!("unknown architecture code {c}"))),
    };
    if count != expected.len() {
        return Err(format_error(format!("expected {} tensors, found {count}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for want in expected {
        let len = u16::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| format_error("truncated tensor name"))?;
        if name != want.as_bytes() {
            return Err(format_error(format!(
                "expected tensor `{want}`, found `{}`",
                String::from_utf8_lossy(&name)
            )));
        }
        let rows = u32::from_le_bytes(read_exact(r)?) as usize;
        let cols = u32::from_le_bytes(read_exact(r)?) as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| *n <= (1 << 28))
            .ok_or_else(|| format_error(format!("tensor `{want}` is implausibly large")))?;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(|_| format_error(format!("truncated tensor `{want}`")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push(Matrix::new(rows, cols, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(format_error("trailing bytes after last tensor"));
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("count checked");
    let model = match arch {
        0 | 1 => {
            let p = RnnParams::new(next(), next(), next(), next(), nonlinearity)?;
            if arch == 0 {
                Model::Srnn(p)
            } else {
                Model::LtRnn(p)
            }
        }
        2 | 3 => Model::Lstm(LstmParams {
            input_weights: next(),
            recurrent_weights: next(),
            bias: next(),
            decoder: next(),
            peephole: (arch == 3).then(&mut next),
        }),
        _ => {
            if pool == 0 {
                return Err(format_error("pooled checkpoint with pool size 0"));
            }
            Model::Pooled(PooledParams {
                encoder: next(),
                transition: next(),
                bias: next(),
                decoder_raw: next(),
                decoder_pooled: next(),
                pool,
                nonlinearity,
            })
        }
    };
    model.check_shapes()?;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    read_model(&mut bytes.as_slice())
}
