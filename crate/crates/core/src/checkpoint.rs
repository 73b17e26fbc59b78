//! Binary checkpoint container.
//!
//! Layout: the 4-byte magic `SPD1`, a little-endian `u64` header length, a
//! JSON header, then the payload. The header carries free-form metadata and
//! a manifest of entries; each entry names a byte range of the payload that
//! holds either little-endian `f64` values or a bit-packed mask (LSB first).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{EncoderModel, ModelConfig};
use crate::prune::Mask;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPD1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EntryKind {
    F64,
    Bits,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: BTreeMap<String, Value>,
    entries: Vec<Entry>,
}

/// Named tensors and masks plus JSON metadata. Keys are kept sorted so the
/// serialized bytes depend only on the contents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, Tensor>,
    pub masks: BTreeMap<String, Mask>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let offset = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(Entry {
                name: name.clone(),
                kind: EntryKind::F64,
                shape: t.shape().to_vec(),
                offset,
                len: payload.len() - offset,
            });
        }
        for (name, m) in &self.masks {
            let offset = payload.len();
            let mut packed = vec![0u8; m.numel().div_ceil(8)];
            for (i, &k) in m.bits().iter().enumerate() {
                if k {
                    packed[i / 8] |= 1 << (i % 8);
                }
            }
            payload.extend_from_slice(&packed);
            entries.push(Entry {
                name: name.clone(),
                kind: EntryKind::Bits,
                shape: m.shape().to_vec(),
                offset,
                len: packed.len(),
            });
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            entries,
        })?;
        let mut out = Vec::with_capacity(12 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an SPD1 checkpoint".into()));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let body = 12usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[12..body])?;
        let payload = &bytes[body..];
        let mut ck = Checkpoint {
            meta: header.meta,
            ..Checkpoint::default()
        };
        for e in header.entries {
            let raw = e
                .offset
                .checked_add(e.len)
                .filter(|&end| end <= payload.len())
                .map(|end| &payload[e.offset..end])
                .ok_or_else(|| Error::Format(format!("entry {} out of bounds", e.name)))?;
            let numel: usize = e.shape.iter().product();
            match e.kind {
                EntryKind::F64 => {
                    if e.len != numel * 8 {
                        return Err(Error::Format(format!("entry {} has bad length", e.name)));
                    }
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    let t = Tensor::new(e.shape, data)
                        .map_err(|err| Error::Format(format!("entry {}: {err}", e.name)))?;
                    ck.tensors.insert(e.name, t);
                }
                EntryKind::Bits => {
                    if e.len != numel.div_ceil(8) {
                        return Err(Error::Format(format!("entry {} has bad length", e.name)));
                    }
                    let bits = (0..numel).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect();
                    ck.masks.insert(e.name, Mask::from_bits(&e.shape, bits)?);
                }
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
    }

    /// Stores every model parameter under its canonical name and the
    /// architecture under `meta["model"]`.
    pub fn put_model(&mut self, model: &EncoderModel) -> Result<()> {
        self.meta
            .insert("model".into(), serde_json::to_value(&model.config)?);
        for (name, t) in model.named_params() {
            self.tensors.insert(name, t.clone());
        }
        Ok(())
    }

    pub fn model(&self) -> Result<EncoderModel> {
        let cfg: ModelConfig = serde_json::from_value(
            self.meta
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint lacks model config".into()))?,
        )?;
        cfg.validate()?;
        let mut model = EncoderModel::new(cfg, &mut crate::rng::Rng::new(0))?;
        for (name, slot) in model.named_params_mut() {
            let t = self.tensor(&name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!("tensor {name} has the wrong shape")));
            }
            *slot = t.clone();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = Checkpoint::new();
        let odd = vec![f64::MIN_POSITIVE, -0.0, 1e-310, std::f64::consts::PI, -7.25];
        ck.tensors
            .insert("a".into(), Tensor::new(vec![5], odd.clone()).unwrap());
        ck.masks.insert(
            "m".into(),
            Mask::from_bits(
                &[3, 3],
                vec![true, false, true, true, false, false, true, true, false],
            )
            .unwrap(),
        );
        ck.meta.insert("step".into(), 17.into());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let got: Vec<u64> = back.tensors["a"]
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let want: Vec<u64> = odd.iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, want);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn model_round_trip() {
        let cfg = ModelConfig {
            num_layers: 1,
            d_model: 4,
            num_heads: 2,
            d_ff: 8,
            vocab_size: 7,
            max_seq_len: 5,
            num_classes: 2,
            position_embeddings: true,
        };
        let m = EncoderModel::new(cfg, &mut Rng::new(3)).unwrap();
        let mut ck = Checkpoint::new();
        ck.put_model(&m).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.model().unwrap(), m);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            Checkpoint::from_bytes(b"nope"),
            Err(Error::Format(_))
        ));
        let mut bytes = Checkpoint::new().to_bytes().unwrap();
        bytes[4] = 200;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }
}
