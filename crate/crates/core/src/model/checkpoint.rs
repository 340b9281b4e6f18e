use indexmap::IndexMap;

use crate::numerics::Tensor;

use super::{ModelConfig, ModelError, StudentModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPKT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Little-endian binary dump of config and parameters.
pub fn save_checkpoint(model: &StudentModel) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size, c.max_seq_len, c.adapter_rank] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            ModelError::Checkpoint(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Restores a model from [`save_checkpoint`] bytes, checking every shape
/// against what the stored config implies.
pub fn load_checkpoint(bytes: &[u8]) -> Result<StudentModel, ModelError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let config = ModelConfig {
        n_layers: r.u32()?,
        n_heads: r.u32()?,
        d_model: r.u32()?,
        d_ff: r.u32()?,
        vocab_size: r.u32()?,
        max_seq_len: r.u32()?,
        adapter_rank: r.u32()?,
        seed: r.u64()?,
    };
    config.validate()?;
    let reference = StudentModel::new(config.clone())?;
    let n = r.u32()?;
    if n != reference.params().len() {
        return Err(ModelError::Checkpoint(format!(
            "{n} parameters stored, config implies {}",
            reference.params().len()
        )));
    }
    let mut params = IndexMap::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let expected = reference.param(&name)?.shape();
        if shape != expected {
            return Err(ModelError::Checkpoint(format!(
                "parameter {name} has shape {shape:?}, config implies {expected:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(StudentModel::from_parts(config, params))
}

/// Like [`load_checkpoint`], but fails if the stored architecture differs
/// from `expected`.
pub fn load_checkpoint_for(bytes: &[u8], expected: &ModelConfig) -> Result<StudentModel, ModelError> {
    let model = load_checkpoint(bytes)?;
    let got = model.config();
    let fields = [
        ("n_layers", got.n_layers, expected.n_layers),
        ("n_heads", got.n_heads, expected.n_heads),
        ("d_model", got.d_model, expected.d_model),
        ("d_ff", got.d_ff, expected.d_ff),
        ("vocab_size", got.vocab_size, expected.vocab_size),
        ("max_seq_len", got.max_seq_len, expected.max_seq_len),
        ("adapter_rank", got.adapter_rank, expected.adapter_rank),
    ];
    for (field, found, want) in fields {
        if found != want {
            return Err(ModelError::ConfigMismatch { field, found: found as u64, expected: want as u64 });
        }
    }
    Ok(model)
}

impl StudentModel {
    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, save_checkpoint(self))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        load_checkpoint(&bytes)
    }
}
