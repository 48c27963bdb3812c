//! Flat binary serialization for model weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes   b"TVLW"
//! version u32       1
//! kind    u32       1 = encoder, 2 = decoder
//! config  u64 each  encoder: n_patches, d_model, n_heads, n_layers, seed, pos_embed(0/1)
//!                   decoder: d_model, n_heads, n_layers, d_ffn, vocab, seed, pos_embed(0/1)
//! data    f64 LE    weight matrices, row-major, in draw order:
//!                   encoder: cls_embed, then per layer q,k,v,o,up,down
//!                   decoder: token_embed, unembed, then per layer q,k,v,o,up,down
//! ```
//!
//! A loaded model is bit-identical to the saved one; round-tripping is
//! checked by comparing forward passes.

use std::io::{Read, Write};

use crate::tensor::DenseMatrix;

use super::{BlockWeights, Decoder, DecoderConfig, Encoder, EncoderConfig, ModelError};

const MAGIC: &[u8; 4] = b"TVLW";
const VERSION: u32 = 1;
const KIND_ENCODER: u32 = 1;
const KIND_DECODER: u32 = 2;

pub fn save_encoder<W: Write>(enc: &Encoder, w: &mut W) -> Result<(), ModelError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&KIND_ENCODER.to_le_bytes())?;
    for v in [
        enc.cfg.n_patches as u64,
        enc.cfg.d_model as u64,
        enc.cfg.n_heads as u64,
        enc.cfg.n_layers as u64,
        enc.cfg.seed,
        enc.cfg.pos_embed as u64,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    write_matrix(w, &enc.cls_embed)?;
    for b in &enc.blocks {
        write_block(w, b)?;
    }
    Ok(())
}

pub fn load_encoder<R: Read>(r: &mut R) -> Result<Encoder, ModelError> {
    read_header(r, KIND_ENCODER)?;
    let cfg = EncoderConfig {
        n_patches: read_u64(r)? as usize,
        d_model: read_u64(r)? as usize,
        n_heads: read_u64(r)? as usize,
        n_layers: read_u64(r)? as usize,
        seed: read_u64(r)?,
        pos_embed: read_bool(r)?,
    };
    cfg.validate()?;
    let cls_embed = read_matrix(r, 1, cfg.d_model)?;
    let blocks = (0..cfg.n_layers)
        .map(|_| read_block(r, cfg.d_model, cfg.d_ffn()))
        .collect::<Result<Vec<_>, _>>()?;
    expect_eof(r)?;
    Ok(Encoder {
        cfg,
        cls_embed,
        blocks,
    })
}

pub fn save_decoder<W: Write>(dec: &Decoder, w: &mut W) -> Result<(), ModelError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&KIND_DECODER.to_le_bytes())?;
    for v in [
        dec.cfg.d_model as u64,
        dec.cfg.n_heads as u64,
        dec.cfg.n_layers as u64,
        dec.cfg.d_ffn as u64,
        dec.cfg.vocab as u64,
        dec.cfg.seed,
        dec.cfg.pos_embed as u64,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    write_matrix(w, &dec.token_embed)?;
    write_matrix(w, &dec.unembed)?;
    for b in &dec.blocks {
        write_block(w, b)?;
    }
    Ok(())
}

pub fn load_decoder<R: Read>(r: &mut R) -> Result<Decoder, ModelError> {
    read_header(r, KIND_DECODER)?;
    let cfg = DecoderConfig {
        d_model: read_u64(r)? as usize,
        n_heads: read_u64(r)? as usize,
        n_layers: read_u64(r)? as usize,
        d_ffn: read_u64(r)? as usize,
        vocab: read_u64(r)? as usize,
        seed: read_u64(r)?,
        pos_embed: read_bool(r)?,
    };
    cfg.validate()?;
    let token_embed = read_matrix(r, cfg.vocab, cfg.d_model)?;
    let unembed = read_matrix(r, cfg.d_model, cfg.vocab)?;
    let blocks = (0..cfg.n_layers)
        .map(|_| read_block(r, cfg.d_model, cfg.d_ffn))
        .collect::<Result<Vec<_>, _>>()?;
    expect_eof(r)?;
    Ok(Decoder {
        cfg,
        token_embed,
        unembed,
        blocks,
    })
}

// ---- helpers ----

fn write_block<W: Write>(w: &mut W, b: &BlockWeights) -> Result<(), ModelError> {
    for m in [&b.w_q, &b.w_k, &b.w_v, &b.w_o, &b.w_up, &b.w_down] {
        write_matrix(w, m)?;
    }
    Ok(())
}

fn read_block<R: Read>(r: &mut R, d: usize, ffn: usize) -> Result<BlockWeights, ModelError> {
    Ok(BlockWeights {
        w_q: read_matrix(r, d, d)?,
        w_k: read_matrix(r, d, d)?,
        w_v: read_matrix(r, d, d)?,
        w_o: read_matrix(r, d, d)?,
        w_up: read_matrix(r, d, ffn)?,
        w_down: read_matrix(r, ffn, d)?,
    })
}

fn write_matrix<W: Write>(w: &mut W, m: &DenseMatrix) -> Result<(), ModelError> {
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<DenseMatrix, ModelError> {
    let mut data = Vec::with_capacity(rows * cols);
    let mut buf = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    DenseMatrix::new(rows, cols, data).map_err(|e| ModelError::Format {
        detail: format!("corrupt weight matrix: {e}"),
    })
}

fn read_header<R: Read>(r: &mut R, expected_kind: u32) -> Result<(), ModelError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Format {
            detail: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(ModelError::Format {
            detail: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let kind = read_u32(r)?;
    if kind != expected_kind {
        return Err(ModelError::Format {
            detail: format!("kind {kind} does not match expected {expected_kind}"),
        });
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_bool<R: Read>(r: &mut R) -> Result<bool, ModelError> {
    match read_u64(r)? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(ModelError::Format {
            detail: format!("boolean field must be 0 or 1, got {other}"),
        }),
    }
}

fn expect_eof<R: Read>(r: &mut R) -> Result<(), ModelError> {
    let mut buf = [0u8; 1];
    match r.read(&mut buf)? {
        0 => Ok(()),
        _ => Err(ModelError::Format {
            detail: "trailing bytes after weight data".into(),
        }),
    }
}
