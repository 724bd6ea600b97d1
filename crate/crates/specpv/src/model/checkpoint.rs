//! Bit-exact checkpoint format.
//!
//! Layout (all little-endian, documented in `docs/checkpoint.md`):
//! magic `SPCV`, version u32, config block, tensor count u32, then per
//! tensor: name length u16, UTF-8 name, rows u32, cols u32, row-major f32
//! payload. Save/load round-trips are bitwise identical.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelConfig, TinyTransformer};
use crate::numerics::rope::{RopeConfig, RopeScaling};
use crate::numerics::Tensor2D;

pub const MAGIC: &[u8; 4] = b"SPCV";
pub const VERSION: u32 = 1;

fn scaling_code(mode: RopeScaling) -> u32 {
    match mode {
        RopeScaling::None => 0,
        RopeScaling::Linear => 1,
        RopeScaling::YarnLike => 2,
    }
}

fn scaling_from_code(code: u32) -> Result<RopeScaling> {
    match code {
        0 => Ok(RopeScaling::None),
        1 => Ok(RopeScaling::Linear),
        2 => Ok(RopeScaling::YarnLike),
        other => Err(Error::Checkpoint(format!("unknown rope scaling code {other}"))),
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f32(w: &mut impl Write, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor2D) -> Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    write_u32(w, t.rows() as u32)?;
    write_u32(w, t.cols() as u32)?;
    for &v in t.data() {
        write_f32(w, v)?;
    }
    Ok(())
}

fn vec_tensor(v: &[f32]) -> Tensor2D {
    Tensor2D::from_vec(1, v.len(), v.to_vec()).expect("sized")
}

/// Tensor names in save order.
fn tensor_entries(model: &TinyTransformer) -> Vec<(String, Tensor2D)> {
    let mut out = vec![("tok_embed".to_string(), model.embedding.clone())];
    for (i, layer) in model.layers.iter().enumerate() {
        out.push((format!("l{i}.attn_norm"), vec_tensor(&layer.attn_norm)));
        out.push((format!("l{i}.wq"), layer.wq.clone()));
        out.push((format!("l{i}.wk"), layer.wk.clone()));
        out.push((format!("l{i}.wv"), layer.wv.clone()));
        out.push((format!("l{i}.wo"), layer.wo.clone()));
        out.push((format!("l{i}.ffn_norm"), vec_tensor(&layer.ffn_norm)));
        out.push((format!("l{i}.w_gate"), layer.w_gate.clone()));
        out.push((format!("l{i}.w_up"), layer.w_up.clone()));
        out.push((format!("l{i}.w_down"), layer.w_down.clone()));
    }
    out.push(("final_norm".to_string(), vec_tensor(&model.final_norm)));
    out.push(("lm_head".to_string(), model.lm_head.clone()));
    out
}

pub fn save_checkpoint(model: &TinyTransformer, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let cfg = model.config();
    write_u32(&mut w, cfg.vocab_size as u32)?;
    write_u32(&mut w, cfg.dim as u32)?;
    write_u32(&mut w, cfg.n_layers as u32)?;
    write_u32(&mut w, cfg.n_heads as u32)?;
    write_u32(&mut w, cfg.head_dim as u32)?;
    write_u32(&mut w, cfg.ffn_dim as u32)?;
    write_f32(&mut w, cfg.rope.theta_base)?;
    write_u32(&mut w, scaling_code(cfg.rope.scaling_mode))?;
    write_f32(&mut w, cfg.rope.scaling_factor)?;
    write_f32(&mut w, cfg.rope.yarn_beta_slow)?;
    write_f32(&mut w, cfg.rope.yarn_beta_fast)?;
    write_u32(&mut w, cfg.rope.yarn_original_context as u32)?;
    write_u32(&mut w, cfg.feature_tap_layers.len() as u32)?;
    for &t in &cfg.feature_tap_layers {
        write_u32(&mut w, t as u32)?;
    }
    let entries = tensor_entries(model);
    write_u32(&mut w, entries.len() as u32)?;
    for (name, tensor) in &entries {
        write_tensor(&mut w, name, tensor)?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::Checkpoint(format!("truncated file while reading {what}")))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(f32::from_le_bytes(b))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<TinyTransformer> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    let mut magic = [0u8; 4];
    r.exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let vocab_size = r.u32("vocab_size")? as usize;
    let dim = r.u32("dim")? as usize;
    let n_layers = r.u32("n_layers")? as usize;
    let n_heads = r.u32("n_heads")? as usize;
    let head_dim = r.u32("head_dim")? as usize;
    let ffn_dim = r.u32("ffn_dim")? as usize;
    let theta_base = r.f32("rope.theta_base")?;
    let scaling_mode = scaling_from_code(r.u32("rope.scaling_mode")?)?;
    let scaling_factor = r.f32("rope.scaling_factor")?;
    let yarn_beta_slow = r.f32("rope.yarn_beta_slow")?;
    let yarn_beta_fast = r.f32("rope.yarn_beta_fast")?;
    let yarn_original_context = r.u32("rope.yarn_original_context")? as usize;
    let tap_count = r.u32("tap count")? as usize;
    let mut feature_tap_layers = Vec::with_capacity(tap_count);
    for _ in 0..tap_count {
        feature_tap_layers.push(r.u32("tap layer")? as usize);
    }
    let rope = RopeConfig {
        head_dim,
        theta_base,
        scaling_mode,
        scaling_factor,
        yarn_beta_slow,
        yarn_beta_fast,
        yarn_original_context,
    };
    let cfg = ModelConfig {
        vocab_size,
        dim,
        n_layers,
        n_heads,
        head_dim,
        ffn_dim,
        rope,
        feature_tap_layers,
    };
    cfg.validate()
        .map_err(|e| Error::Checkpoint(format!("invalid config in checkpoint: {e}")))?;

    let tensor_count = r.u32("tensor count")? as usize;
    let mut tensors: HashMap<String, Tensor2D> = HashMap::with_capacity(tensor_count);
    let known = known_names(&cfg);
    for _ in 0..tensor_count {
        let name_len = r.u16("tensor name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.exact(&mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if !known.contains(&name) {
            return Err(Error::Checkpoint(format!("unknown tensor name '{name}'")));
        }
        let rows = r.u32(&format!("tensor '{name}' rows"))? as usize;
        let cols = r.u32(&format!("tensor '{name}' cols"))? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f32(&format!("tensor '{name}' payload"))?);
        }
        tensors.insert(name, Tensor2D::from_vec(rows, cols, data)?);
    }

    fn take(tensors: &mut HashMap<String, Tensor2D>, name: String) -> Result<Tensor2D> {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    }
    fn take_vec(
        tensors: &mut HashMap<String, Tensor2D>,
        name: String,
        len: usize,
    ) -> Result<Vec<f32>> {
        let t = take(tensors, name.clone())?;
        if t.rows() * t.cols() != len {
            return Err(Error::Checkpoint(format!("tensor '{name}' has wrong size")));
        }
        Ok(t.data().to_vec())
    }

    let embedding = take(&mut tensors, "tok_embed".to_string())?;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        layers.push(LayerWeights {
            attn_norm: take_vec(&mut tensors, format!("l{i}.attn_norm"), dim)?,
            wq: take(&mut tensors, format!("l{i}.wq"))?,
            wk: take(&mut tensors, format!("l{i}.wk"))?,
            wv: take(&mut tensors, format!("l{i}.wv"))?,
            wo: take(&mut tensors, format!("l{i}.wo"))?,
            ffn_norm: take_vec(&mut tensors, format!("l{i}.ffn_norm"), dim)?,
            w_gate: take(&mut tensors, format!("l{i}.w_gate"))?,
            w_up: take(&mut tensors, format!("l{i}.w_up"))?,
            w_down: take(&mut tensors, format!("l{i}.w_down"))?,
        });
    }
    let final_norm = take_vec(&mut tensors, "final_norm".to_string(), dim)?;
    let lm_head = take(&mut tensors, "lm_head".to_string())?;

    Ok(TinyTransformer {
        cfg,
        embedding,
        layers,
        final_norm,
        lm_head,
    })
}

fn known_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names = vec!["tok_embed".to_string(), "final_norm".to_string(), "lm_head".to_string()];
    for i in 0..cfg.n_layers {
        for suffix in ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down"] {
            names.push(format!("l{i}.{suffix}"));
        }
    }
    names
}
