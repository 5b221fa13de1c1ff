use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::model::Network;
use super::params::{ParamSet, TensorSpec};
use super::{NetConfig, NetError};
use crate::encoder::FeatureLayout;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TUSCKPT1";
pub const NET_SCHEMA: &str = "tusnet/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f64 elements from the start of the data section.
    pub offset: usize,
}

/// JSON header of a tensor container: schema, free-form metadata, and the
/// tensor directory. Data follows as little-endian f64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerHeader {
    pub schema: String,
    pub dtype: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `magic | u64 header length | JSON header | f64 data`.
pub fn write_container(
    path: impl AsRef<Path>,
    schema: &str,
    meta: serde_json::Value,
    tensors: &[(String, Vec<usize>, &[f64])],
) -> Result<(), NetError> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, shape, data) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += data.len();
    }
    let header = ContainerHeader {
        schema: schema.to_string(),
        dtype: "f64".into(),
        meta,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| NetError::Format(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + offset * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, data) in tensors {
        for x in data.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(&buf)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a container, checking the schema. Every tensor is returned with
/// its data.
pub fn read_container(
    path: impl AsRef<Path>,
    schema: &str,
) -> Result<(ContainerHeader, Vec<Vec<f64>>), NetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| NetError::Format(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size"))?;
    let header: ContainerHeader = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| NetError::Format(format!("header: {e}")))?;
    if header.schema != schema {
        return Err(NetError::Format(format!(
            "schema {:?}, expected {schema:?}",
            header.schema
        )));
    }
    if header.dtype != "f64" {
        return Err(NetError::Format(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    let data = &bytes[header_end..];
    if data.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let total = data.len() / 8;
    let mut out = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let len: usize = t.shape.iter().product();
        let end = t
            .offset
            .checked_add(len)
            .filter(|&e| e <= total)
            .ok_or_else(|| NetError::Format(format!("tensor {} runs past the data", t.name)))?;
        let values = data[t.offset * 8..end * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(values);
    }
    Ok((header, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, NetError> {
        use rand::SeedableRng;
        let seed: [u8; 32] = hex::decode(&self.seed)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| NetError::Format("bad rng seed".into()))?;
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| NetError::Format("bad rng position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetMeta {
    config: NetConfig,
    layout: FeatureLayout,
    ontology_fingerprint: String,
    adam: Option<Adam>,
    rng: Option<RngState>,
    extra: serde_json::Value,
}

/// A saved network with optional optimizer and RNG state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub ontology_fingerprint: String,
    pub adam: Option<Adam>,
    pub rng: Option<ChaCha8Rng>,
    /// Caller metadata such as the history window or training metrics.
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError> {
        let meta = NetMeta {
            config: self.network.config.clone(),
            layout: self.network.layout,
            ontology_fingerprint: self.ontology_fingerprint.clone(),
            adam: self.adam.clone(),
            rng: self.rng.as_ref().map(RngState::capture),
            extra: self.extra.clone(),
        };
        let meta = serde_json::to_value(meta).map_err(|e| NetError::Format(e.to_string()))?;
        let params = &self.network.params;
        let mut tensors: Vec<(String, Vec<usize>, &[f64])> = params
            .specs
            .iter()
            .map(|s| (s.name.clone(), s.shape.clone(), &params.data[s.range()]))
            .collect();
        if let Some(adam) = &self.adam {
            for s in &params.specs {
                tensors.push((
                    format!("adam.m/{}", s.name),
                    s.shape.clone(),
                    &adam.m[s.range()],
                ));
            }
            for s in &params.specs {
                tensors.push((
                    format!("adam.v/{}", s.name),
                    s.shape.clone(),
                    &adam.v[s.range()],
                ));
            }
        }
        write_container(path, NET_SCHEMA, meta, &tensors)
    }

    /// Loads a checkpoint, refusing one built for a different ontology.
    pub fn load(path: impl AsRef<Path>, fingerprint: &str) -> Result<Self, NetError> {
        let (header, data) = read_container(path, NET_SCHEMA)?;
        let meta: NetMeta = serde_json::from_value(header.meta)
            .map_err(|e| NetError::Format(format!("metadata: {e}")))?;
        if meta.ontology_fingerprint != fingerprint {
            return Err(NetError::Fingerprint {
                expected: fingerprint.to_string(),
                found: meta.ontology_fingerprint,
            });
        }
        let mut params = ParamSet::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        for (entry, values) in header.tensors.iter().zip(data) {
            if let Some(name) = entry.name.strip_prefix("adam.m/") {
                adam_m.push((name.to_string(), values));
            } else if let Some(name) = entry.name.strip_prefix("adam.v/") {
                adam_v.push((name.to_string(), values));
            } else {
                let id = params.add(entry.name.clone(), &entry.shape);
                params.slice_mut(id).copy_from_slice(&values);
            }
        }
        let network = Network::from_params(meta.config, meta.layout, params)?;
        let adam = match meta.adam {
            Some(mut adam) => {
                let flatten = |parts: Vec<(String, Vec<f64>)>| -> Result<Vec<f64>, NetError> {
                    let names: Vec<&str> = parts.iter().map(|(n, _)| n.as_str()).collect();
                    let expected: Vec<&str> = network
                        .params
                        .specs
                        .iter()
                        .map(|s: &TensorSpec| s.name.as_str())
                        .collect();
                    if names != expected {
                        return Err(NetError::Format(
                            "optimizer state does not match parameters".into(),
                        ));
                    }
                    Ok(parts.into_iter().flat_map(|(_, v)| v).collect())
                };
                adam.m = flatten(adam_m)?;
                adam.v = flatten(adam_v)?;
                Some(adam)
            }
            None => None,
        };
        let rng = meta.rng.as_ref().map(RngState::restore).transpose()?;
        Ok(Self {
            network,
            ontology_fingerprint: meta.ontology_fingerprint,
            adam,
            rng,
            extra: meta.extra,
        })
    }
}
