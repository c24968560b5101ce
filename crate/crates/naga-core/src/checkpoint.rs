//! Bit-exact model serialization. Weights are stored as raw f64 bit
//! patterns so a reloaded model reproduces its predictions to the last
//! ulp, which the determinism guarantees depend on.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{EncoderKind, ModelConfig, ModelError, NagaModel};
use crate::rng::Rng;
use crate::tensor::{ShapeError, Tensor};

const MAGIC: &[u8; 8] = b"NAGACKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_bits().to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_bits(u64::from_le_bytes(buf)))
}

fn read_len(r: &mut impl Read, what: &str, cap: u64) -> Result<usize, CheckpointError> {
    let v = read_u64(r)?;
    if v > cap {
        return Err(CheckpointError::Corrupt(format!("{what} {v} is implausibly large")));
    }
    Ok(v as usize)
}

fn encoder_tag(kind: EncoderKind) -> u8 {
    match kind {
        EncoderKind::Vedic => 0,
        EncoderKind::Affine => 1,
        EncoderKind::Identity => 2,
    }
}

fn encoder_from_tag(tag: u8) -> Result<EncoderKind, CheckpointError> {
    match tag {
        0 => Ok(EncoderKind::Vedic),
        1 => Ok(EncoderKind::Affine),
        2 => Ok(EncoderKind::Identity),
        other => Err(CheckpointError::Corrupt(format!("unknown encoder tag {other}"))),
    }
}

pub fn save_model(model: &NagaModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;

    let c = &model.config;
    for v in [
        c.d_in, c.d_hidden, c.d_inner, c.d_state, c.h_head, c.k, c.pred_len, c.num_cells,
    ] {
        write_u64(&mut w, v as u64)?;
    }
    w.write_all(&[encoder_tag(c.encoder), c.use_flip as u8])?;
    for v in [c.mask_prob, c.dropout_p, c.eps] {
        write_f64(&mut w, v)?;
    }

    let params = model.params_vec();
    write_u64(&mut w, params.len() as u64)?;
    for (name, t) in &params {
        write_u64(&mut w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        write_u64(&mut w, t.rank() as u64)?;
        for &d in t.shape() {
            write_u64(&mut w, d as u64)?;
        }
        for &v in t.data() {
            write_f64(&mut w, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NagaModel, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }

    let mut dims = [0usize; 8];
    for d in dims.iter_mut() {
        *d = read_len(&mut r, "dimension", 1 << 32)?;
    }
    let mut flags = [0u8; 2];
    r.read_exact(&mut flags)?;
    let encoder = encoder_from_tag(flags[0])?;
    let use_flip = match flags[1] {
        0 => false,
        1 => true,
        other => return Err(CheckpointError::Corrupt(format!("bad flip flag {other}"))),
    };
    let mask_prob = read_f64(&mut r)?;
    let dropout_p = read_f64(&mut r)?;
    let eps = read_f64(&mut r)?;
    let config = ModelConfig {
        d_in: dims[0],
        d_hidden: dims[1],
        d_inner: dims[2],
        d_state: dims[3],
        h_head: dims[4],
        k: dims[5],
        pred_len: dims[6],
        num_cells: dims[7],
        encoder,
        use_flip,
        mask_prob,
        dropout_p,
        eps,
    };

    let n_params = read_len(&mut r, "parameter count", 1 << 20)?;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = read_len(&mut r, "name length", 4096)?;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
        let rank = read_len(&mut r, "rank", 3)?;
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let d = read_len(&mut r, "dimension", 1 << 32)?;
            shape.push(d);
            len = len.saturating_mul(d);
        }
        if len > (1 << 30) {
            return Err(CheckpointError::Corrupt(format!(
                "tensor \"{name}\" claims {len} elements"
            )));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(read_f64(&mut r)?);
        }
        params.push((name, Tensor::from_vec(&shape, data)?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes after parameters".into()));
    }

    // Build a model of the right structure, then overwrite every weight
    // with the stored values; the name and shape checks in the restore
    // double as integrity validation.
    let mut model = NagaModel::init(config, &mut Rng::new(0))?;
    model.set_params_vec(&params)?;
    Ok(model)
}
