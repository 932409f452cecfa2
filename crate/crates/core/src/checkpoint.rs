//! Little-endian model container.
//!
//! ```text
//! magic      8 bytes  "PCNCKPT1"
//! count      u32
//! count x {
//!     name_len u16, name utf-8
//!     dtype    u8 (0 = f32, 1 = f64)
//!     rank     u8, dims u32 x rank
//!     data     numel x dtype, little-endian
//! }
//! footer     key=value text up to EOF: arch, cycles, classes, plain and,
//!            when known, the input normalization `norm_mean` / `norm_std`
//! ```
//!
//! Loading rebuilds the model from the footer and overwrites every learnable
//! tensor and running statistic by name, so a save/load round trip is
//! bit-exact.

use std::collections::HashMap;
use std::path::Path;

use crate::config::{self, KvMap};
use crate::data::ChannelStats;
use crate::error::{PcnError, Result};
use crate::tensor::{DType, Scalar, Tensor};
use crate::zoo::{Model, ModelSpec};

pub const MAGIC: &[u8; 8] = b"PCNCKPT1";

/// Serialize the model's parameters, running statistics and spec.
pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut tensors = model.named_params();
    tensors.extend(model.named_buffers());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out.extend_from_slice(model.spec.to_kv().as_bytes());
    if let Some(st) = &model.input_stats {
        let join = |v: &[f64; 3]| v.map(|x| x.to_string()).join(",");
        out.extend_from_slice(
            config::render(&[("norm_mean", join(&st.mean)), ("norm_std", join(&st.std))]).as_bytes(),
        );
    }
    out
}

fn parse_triple(kv: &mut KvMap, key: &str) -> Result<Option<[f64; 3]>> {
    let Some(raw) = kv.take::<String>(key)? else {
        return Ok(None);
    };
    let vals: Vec<f64> = raw
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| format_err(format!("bad `{key}` value `{raw}`"))))
        .collect::<Result<_>>()?;
    let triple: [f64; 3] = vals
        .try_into()
        .map_err(|_| format_err(format!("`{key}` needs three values")))?;
    Ok(Some(triple))
}

fn parse_footer(text: &str) -> Result<(ModelSpec, Option<ChannelStats>)> {
    let mut kv = KvMap::parse(text)?;
    let spec = ModelSpec::take_from(&mut kv)?;
    let stats = match (parse_triple(&mut kv, "norm_mean")?, parse_triple(&mut kv, "norm_std")?) {
        (Some(mean), Some(std)) => Some(ChannelStats { mean, std }),
        (None, None) => None,
        _ => return Err(format_err("norm_mean and norm_std must appear together")),
    };
    kv.finish()?;
    Ok((spec, stats))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(PcnError::Format {
                what: "checkpoint",
                detail: format!("truncated while reading {what} at byte {}", self.pos),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn format_err(detail: impl Into<String>) -> PcnError {
    PcnError::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

/// Parse the spec stored in a checkpoint footer without loading weights.
pub fn read_spec(bytes: &[u8]) -> Result<(ModelSpec, DType)> {
    let (tensors, (spec, _)) = parse(bytes)?;
    let dtype = tensors.first().map_or(DType::F32, |t| t.1);
    Ok((spec, dtype))
}

type RawTensor<'a> = (String, DType, Vec<usize>, &'a [u8]);

type Footer = (ModelSpec, Option<ChannelStats>);

fn parse(bytes: &[u8]) -> Result<(Vec<RawTensor<'_>>, Footer)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(format_err("bad magic"));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| format_err("tensor name is not utf-8"))?
            .to_string();
        let tag = r.u8("dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| format_err(format!("unknown dtype tag {tag}")))?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size_of()))
            .ok_or_else(|| format_err(format!("`{name}` is too large")))?;
        let data = r.take(numel, "tensor data")?;
        tensors.push((name, dtype, shape, data));
    }
    let footer = std::str::from_utf8(&bytes[r.pos..]).map_err(|_| format_err("footer is not utf-8"))?;
    Ok((tensors, parse_footer(footer)?))
}

/// Rebuild a model from [`to_bytes`] output.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let (raw, (spec, stats)) = parse(bytes)?;
    let mut by_name: HashMap<String, (DType, Vec<usize>, &[u8])> = HashMap::new();
    for (name, dtype, shape, data) in raw {
        if by_name.insert(name.clone(), (dtype, shape, data)).is_some() {
            return Err(format_err(format!("duplicate tensor `{name}`")));
        }
    }
    let mut model = Model::<T>::build(spec, 0)?;
    model.input_stats = stats;
    let mut fill = |name: &str, dst: &mut Tensor<T>| -> Result<()> {
        let (dtype, shape, data) = by_name
            .remove(name)
            .ok_or_else(|| format_err(format!("missing tensor `{name}`")))?;
        if dtype != T::DTYPE {
            return Err(format_err(format!(
                "`{name}` stored as {dtype:?}, requested {:?}",
                T::DTYPE
            )));
        }
        if shape != dst.shape() {
            return Err(format_err(format!(
                "`{name}` has shape {shape:?}, model expects {:?}",
                dst.shape()
            )));
        }
        let step = dtype.size_of();
        for (v, chunk) in dst.data_mut().iter_mut().zip(data.chunks_exact(step)) {
            *v = T::read_le(chunk);
        }
        Ok(())
    };
    for (name, t) in model.named_params_mut() {
        fill(&name, t)?;
    }
    for (name, t) in model.named_buffers_mut() {
        fill(&name, t)?;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(format_err(format!("unexpected tensor `{extra}`")));
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| PcnError::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| PcnError::io(path, e))?;
    from_bytes(&bytes)
}
