//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TIPCKPT1"  u32 version  [32] sha256(config text)
//! u32 len + config text    u32 len + schema JSON    u64 optimizer step
//! u32 entries, each: u16 len + name, u8 dtype (0 = f32), u8 ndim,
//!                    ndim x u64 dims, u64 byte offset into the payload
//! u64 payload length + payload
//! ```
//!
//! Model slots come first in registration order, then the optimizer moments
//! as `opt.m.<slot>` and `opt.v.<slot>` for every slot that has them.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use tabimg_core::data::TabularSchema;
use tabimg_core::model::{Model, ParamGroup};
use tabimg_core::numeric::{OptimizerState, ParamStore, Tensor};

use crate::config::{hex, RunConfig};
use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"TIPCKPT1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const MOMENT_PREFIXES: [&str; 2] = ["opt.m.", "opt.v."];

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn bad(detail: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(detail.into())
}

impl Checkpoint {
    /// Hex digest of the embedded configuration.
    pub fn digest(&self) -> String {
        crate::config::digest(&self.config.to_text())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let text = self.config.to_text();
        let schema = serde_json::to_string(&self.model.schema)?;
        let mut entries: Vec<Entry> = self
            .model
            .params
            .iter()
            .map(|(_, p)| Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect();
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in MOMENT_PREFIXES.iter().zip([&opt.first, &opt.second]) {
                for ((_, p), m) in self.model.params.iter().zip(moments) {
                    if !m.is_empty() {
                        entries.push(Entry {
                            name: format!("{prefix}{}", p.name),
                            shape: p.value.shape().to_vec(),
                            data: m.clone(),
                        });
                    }
                }
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(text.as_bytes()));
        for blob in [text.as_bytes(), schema.as_bytes()] {
            out.extend_from_slice(&len_u32(blob.len())?.to_le_bytes());
            out.extend_from_slice(blob);
        }
        let step = self.optimizer.as_ref().map_or(0, |o| o.step);
        out.extend_from_slice(&step.to_le_bytes());
        out.extend_from_slice(&len_u32(entries.len())?.to_le_bytes());
        let mut offset = 0u64;
        for e in &entries {
            let name_len = u16::try_from(e.name.len()).map_err(|_| bad(format!("slot name {} too long", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(u8::try_from(e.shape.len()).map_err(|_| bad("too many dimensions"))?);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * e.data.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for e in &entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let stored: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let text = r.string()?;
        if Sha256::digest(text.as_bytes()).as_slice() != stored {
            return Err(bad("config digest does not match the embedded config"));
        }
        let schema: TabularSchema = serde_json::from_str(&r.string()?)?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("slot name is not UTF-8"))?
                .to_owned();
            if r.u8()? != DTYPE_F32 {
                return Err(bad(format!("slot {name}: unsupported dtype")));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            table.push((name, shape, offset));
        }
        let payload_len = r.u64()?;
        let payload = r.take(usize::try_from(payload_len).map_err(|_| bad("payload too large"))?)?;
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut expected_offset = 0u64;
        let mut store = ParamStore::new();
        let mut moments: [Vec<(String, Vec<f32>)>; 2] = Default::default();
        for (name, shape, offset) in table {
            let n: usize = shape.iter().product();
            if offset != expected_offset {
                return Err(bad(format!("slot {name}: offset {offset}, expected {expected_offset}")));
            }
            let end = offset + 4 * n as u64;
            if end > payload_len {
                return Err(bad(format!("slot {name} runs past the payload")));
            }
            expected_offset = end;
            let data: Vec<f32> = payload[offset as usize..end as usize]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            if let Some((k, base)) = MOMENT_PREFIXES
                .iter()
                .enumerate()
                .find_map(|(k, p)| name.strip_prefix(p).map(|b| (k, b)))
            {
                moments[k].push((base.to_owned(), data));
            } else {
                if ParamGroup::of(&name).is_none() {
                    return Err(bad(format!("unknown slot {name}")));
                }
                store
                    .insert(name.clone(), Tensor::new(&shape, data)?)
                    .map_err(|_| bad(format!("slot {name} appears twice")))?;
            }
        }
        if expected_offset != payload_len {
            return Err(bad("payload length does not match the entry table"));
        }

        let config = RunConfig::parse(&text)?;
        let model = Model::from_params(config.model.clone(), schema, store)?;
        let optimizer = if step == 0 && moments.iter().all(Vec::is_empty) {
            None
        } else {
            let mut opt = OptimizerState::new(&model.params, config.pretrain.lr, config.pretrain.weight_decay);
            opt.step = step;
            for (k, list) in moments.into_iter().enumerate() {
                let target = if k == 0 { &mut opt.first } else { &mut opt.second };
                for (base, data) in list {
                    let id = model
                        .params
                        .id(&base)
                        .ok_or_else(|| bad(format!("moment for unknown slot {base}")))?;
                    if data.len() != model.params.value(id).numel() {
                        return Err(bad(format!("moment for {base} has the wrong size")));
                    }
                    target[id.index()] = data;
                }
            }
            Some(opt)
        };
        Ok(Checkpoint {
            config,
            model,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Hex digest stored in an encoded checkpoint, read without decoding
    /// the rest.
    pub fn peek_digest(bytes: &[u8]) -> Result<String> {
        if bytes.len() < 44 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        Ok(hex(&bytes[12..44]))
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| bad("section longer than 4 GiB"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("text section is not UTF-8"))
    }
}
