//! Single-file checkpoints.
//!
//! A text manifest (magic line, scalar state, the run configuration, then
//! one `name shape offset` line per tensor) followed by `payload <bytes>`
//! and the raw little-endian element data. Offsets are byte offsets into
//! the payload.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Adam, RunConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{Dtype, Real, Tensor};

const MAGIC: &str = "flowvae-checkpoint 1";

/// Hex SHA-256 of the canonical model configuration text.
pub fn config_digest(model: &ModelConfig) -> String {
    Sha256::digest(model.to_text().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::format("checkpoint", msg)
}

/// Parsed manifest. Tensor payloads stay as byte ranges until typed.
struct Manifest<'a> {
    dtype: Dtype,
    update: u64,
    adam_steps: u64,
    adam_skipped: u64,
    digest: String,
    config: RunConfig,
    tensors: Vec<(String, Vec<usize>, &'a [u8])>,
}

fn header_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("truncated manifest"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| bad("manifest is not UTF-8"))
}

fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| bad(format!("expected `{key}`, found {line:?}")))
}

fn number<V: std::str::FromStr>(s: &str) -> Result<V> {
    s.parse().map_err(|_| bad(format!("bad number {s:?}")))
}

fn parse(bytes: &[u8]) -> Result<Manifest<'_>> {
    let mut pos = 0;
    if header_line(bytes, &mut pos)? != MAGIC {
        return Err(bad("not a flowvae checkpoint"));
    }
    let dtype = Dtype::parse(field(header_line(bytes, &mut pos)?, "dtype")?).ok_or_else(|| bad("unknown dtype"))?;
    let update = number(field(header_line(bytes, &mut pos)?, "update")?)?;
    let adam_steps = number(field(header_line(bytes, &mut pos)?, "adam_steps")?)?;
    let adam_skipped = number(field(header_line(bytes, &mut pos)?, "adam_skipped")?)?;
    let digest = field(header_line(bytes, &mut pos)?, "digest")?.to_string();
    let config_len: usize = number(field(header_line(bytes, &mut pos)?, "config")?)?;
    let text = bytes
        .get(pos..pos + config_len)
        .ok_or_else(|| bad("truncated config"))?;
    pos += config_len;
    let config = RunConfig::parse(std::str::from_utf8(text).map_err(|_| bad("config is not UTF-8"))?)?;
    let count: usize = number(field(header_line(bytes, &mut pos)?, "tensors")?)?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = header_line(bytes, &mut pos)?;
        let parts: Vec<&str> = line.split(' ').collect();
        let [name, shape, offset] = parts[..] else {
            return Err(bad(format!("bad tensor line {line:?}")));
        };
        let shape = if shape == "-" {
            Vec::new()
        } else {
            shape.split('x').map(number).collect::<Result<Vec<usize>>>()?
        };
        entries.push((name.to_string(), shape, number::<usize>(offset)?));
    }
    let payload_len: usize = number(field(header_line(bytes, &mut pos)?, "payload")?)?;
    let payload = &bytes[pos..];
    if payload.len() != payload_len {
        return Err(bad(format!(
            "payload is {} bytes, manifest says {payload_len}",
            payload.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape, offset) in entries {
        let len = shape.iter().product::<usize>() * dtype.size();
        let data = payload
            .get(offset..offset + len)
            .ok_or_else(|| bad(format!("tensor {name} out of range")))?;
        tensors.push((name, shape, data));
    }
    Ok(Manifest {
        dtype,
        update,
        adam_steps,
        adam_skipped,
        digest,
        config,
        tensors,
    })
}

/// Element type recorded in a checkpoint file.
pub fn peek_dtype(bytes: &[u8]) -> Result<Dtype> {
    Ok(parse(bytes)?.dtype)
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".to_string()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

impl<T: Real> Trainer<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = self.config.to_text();
        let mut tensors: Vec<(String, &Tensor<T>)> = Vec::new();
        for (id, p) in self.model.params.iter() {
            tensors.push((p.name.clone(), &p.value));
            if p.trainable {
                tensors.push((format!("adam.m.{}", p.name), &self.adam.m[id.index()]));
                tensors.push((format!("adam.v.{}", p.name), &self.adam.v[id.index()]));
            }
        }
        let mut manifest = format!(
            "{MAGIC}\ndtype {}\nupdate {}\nadam_steps {}\nadam_skipped {}\ndigest {}\nconfig {}\n{config}tensors {}\n",
            T::DTYPE.name(),
            self.update,
            self.adam.steps,
            self.adam.skipped,
            config_digest(&self.config.model),
            config.len(),
            tensors.len()
        );
        let mut payload = Vec::new();
        for (name, t) in &tensors {
            manifest.push_str(&format!("{name} {} {}\n", shape_text(t.shape()), payload.len()));
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
        manifest.push_str(&format!("payload {}\n", payload.len()));
        let mut out = manifest.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    /// Restores a trainer. With `expected`, the checkpoint must have been
    /// written for exactly that model configuration.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let m = parse(bytes)?;
        if m.dtype != T::DTYPE {
            return Err(bad(format!(
                "checkpoint holds {} values, requested {}",
                m.dtype.name(),
                T::DTYPE.name()
            )));
        }
        let found = config_digest(&m.config.model);
        if m.digest != found {
            return Err(Error::DigestMismatch {
                expected: m.digest,
                found,
            });
        }
        if let Some(cfg) = expected {
            let want = config_digest(cfg);
            if want != m.digest {
                return Err(Error::DigestMismatch {
                    expected: want,
                    found: m.digest,
                });
            }
        }
        let mut model = Model::<T>::new(m.config.model.clone(), m.config.train.seed)?;
        let mut adam = Adam::new(m.config.train.adam(), &model.params);
        let mut seen = 0;
        for (name, shape, data) in m.tensors {
            let values: Vec<T> = data.chunks_exact(m.dtype.size()).map(T::read_le).collect();
            let tensor = Tensor::new(&shape, values)?;
            let (target, key) = match name.strip_prefix("adam.m.") {
                Some(k) => (Some(&mut adam.m), k),
                None => match name.strip_prefix("adam.v.") {
                    Some(k) => (Some(&mut adam.v), k),
                    None => (None, name.as_str()),
                },
            };
            let id = model
                .params
                .id(key)
                .ok_or_else(|| bad(format!("unknown tensor {name}")))?;
            match target {
                None => model.params.set_value(id, tensor)?,
                Some(moments) => {
                    if moments[id.index()].shape() != tensor.shape() {
                        return Err(bad(format!("tensor {name} has shape {:?}", tensor.shape())));
                    }
                    moments[id.index()] = tensor;
                }
            }
            seen += 1;
        }
        let wanted = model.params.len() + 2 * model.params.iter().filter(|(_, p)| p.trainable).count();
        if seen != wanted {
            return Err(bad(format!("{seen} tensors, expected {wanted}")));
        }
        adam.steps = m.adam_steps;
        adam.skipped = m.adam_skipped;
        Ok(Trainer::from_parts(m.config, model, adam, m.update))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, expected)
    }
}
