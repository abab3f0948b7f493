//! Binary checkpoint of a [`ModelState`].
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "PDMM"             4 bytes magic
//! version            u32 (currently 1)
//! width count        u32, followed by that many u32 widths n_0..n_L
//! activation         u8  (0 = relu)
//! loss               u8  (0 = softmax cross-entropy)
//! per layer l = 1..L:
//!     W, b, z, p     matrices
//!     q, u           matrices, hidden layers only
//!     tau, theta     f64 backtracking seeds
//! labels             matrix
//! ```
//!
//! A matrix is `rows: u32, cols: u32` followed by `rows * cols` f64 values in
//! row-major order. Biases are stored as `n x 1` matrices.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Activation, LayerBlock, Loss, ModelState, NetworkSpec, StepSeeds};

pub const MAGIC: &[u8; 4] = b"PDMM";
pub const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_matrix(w: &mut impl Write, m: &Matrix) -> Result<()> {
    write_u32(w, m.rows() as u32)?;
    write_u32(w, m.cols() as u32)?;
    let mut buf = Vec::with_capacity(m.as_slice().len() * 8);
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_exact(r)?))
}

fn read_matrix(r: &mut impl Read) -> Result<Matrix> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Checkpoint("matrix size overflow".into()))?;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated matrix: {e}")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn write_checkpoint(state: &ModelState, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, state.spec.layer_widths.len() as u32)?;
    for &width in &state.spec.layer_widths {
        write_u32(&mut w, width as u32)?;
    }
    let activation = match state.spec.activation {
        Activation::Relu => 0u8,
    };
    let loss = match state.spec.loss {
        Loss::SoftmaxCrossEntropy => 0u8,
    };
    w.write_all(&[activation, loss])?;
    for layer in &state.layers {
        write_matrix(&mut w, &layer.w)?;
        write_matrix(&mut w, &Matrix::column(&layer.b))?;
        write_matrix(&mut w, &layer.z)?;
        write_matrix(&mut w, &layer.p)?;
        if let (Some(q), Some(u)) = (&layer.q, &layer.u) {
            write_matrix(&mut w, q)?;
            write_matrix(&mut w, u)?;
        }
        write_f64(&mut w, layer.seeds.tau)?;
        write_f64(&mut w, layer.seeds.theta)?;
    }
    write_matrix(&mut w, &state.labels)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ModelState> {
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    if count > 1 << 16 {
        return Err(Error::Checkpoint(format!("implausible layer count {count}")));
    }
    let widths = (0..count)
        .map(|_| read_u32(&mut r).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let [activation, loss] = read_exact::<2>(&mut r)?;
    let activation = match activation {
        0 => Activation::Relu,
        other => return Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
    };
    let loss = match loss {
        0 => Loss::SoftmaxCrossEntropy,
        other => return Err(Error::Checkpoint(format!("unknown loss tag {other}"))),
    };
    let spec = NetworkSpec {
        layer_widths: widths,
        activation,
        loss,
    };
    spec.validate()?;
    let l_count = spec.num_layers();
    let mut layers = Vec::with_capacity(l_count);
    for l in 0..l_count {
        let w = read_matrix(&mut r)?;
        let b = read_matrix(&mut r)?.into_vec();
        let z = read_matrix(&mut r)?;
        let p = read_matrix(&mut r)?;
        let (q, u) = if l + 1 < l_count {
            (Some(read_matrix(&mut r)?), Some(read_matrix(&mut r)?))
        } else {
            (None, None)
        };
        let tau = read_f64(&mut r)?;
        let theta = read_f64(&mut r)?;
        layers.push(LayerBlock {
            w,
            b,
            z,
            p,
            q,
            u,
            seeds: StepSeeds { tau, theta },
        });
    }
    let labels = read_matrix(&mut r)?;
    let state = ModelState {
        spec,
        layers,
        labels,
    };
    state
        .validate()
        .map_err(|e| Error::Checkpoint(format!("inconsistent state: {e}")))?;
    Ok(state)
}
