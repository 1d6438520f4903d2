//! Single-file array container: header, JSON manifest, then little-endian payloads.
//!
//! Layout: 8-byte magic, `u32` version, `u64` manifest length, manifest JSON, payload.
//! The manifest lists every array with dtype, shape, payload offset and SHA-256.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compiler::{compile, CompiledNetwork, FrozenHead, FrozenNetwork, FrozenNode};
use crate::densenet::{build_model, ModelConfig};
use crate::error::{Error, Result};
use crate::lgc::{GroupedConv3d, SelectionMode};
use crate::network::{Network, Pool};
use crate::ops::Conv3dSpec;
use crate::permutation::PermutationIndex;
use crate::tensor::{DType, NdArray, Scalar};

pub const CONTAINER_MAGIC: &[u8; 8] = b"LGC3DCKP";
pub const CONTAINER_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub arrays: Vec<ArrayEntry>,
    pub meta: serde_json::Value,
}

/// Named arrays plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Container<T> {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, NdArray<T>)>,
}

fn encode<T: Scalar>(a: &NdArray<T>) -> Vec<u8> {
    match T::DTYPE {
        DType::F32 => a
            .data()
            .iter()
            .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
            .collect(),
        DType::F64 => a.data().iter().flat_map(|v| v.as_f64().to_le_bytes()).collect(),
    }
}

fn decode<T: Scalar>(bytes: &[u8]) -> Vec<T> {
    match T::DTYPE {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::lit(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
    }
}

fn width(d: DType) -> usize {
    match d {
        DType::F32 => 4,
        DType::F64 => 8,
    }
}

impl<T: Scalar> Container<T> {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, a: NdArray<T>) {
        self.arrays.push((name.into(), a));
    }

    pub fn get(&self, name: &str) -> Result<&NdArray<T>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Config(format!("container has no array {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, a) in &self.arrays {
            let bytes = encode(a);
            entries.push(ArrayEntry {
                name: name.clone(),
                dtype: T::DTYPE,
                shape: a.shape().to_vec(),
                offset: payload.len(),
                bytes: bytes.len(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
            payload.extend_from_slice(&bytes);
        }
        let manifest = Manifest {
            kind: self.kind.clone(),
            arrays: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let manifest = read_manifest(bytes, origin)?;
        let payload = &bytes[HEADER_LEN + manifest_len(bytes) as usize..];
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in &manifest.arrays {
            if e.dtype != T::DTYPE {
                return Err(Error::DimMismatch(format!(
                    "array {} stored as {:?}, requested {:?}",
                    e.name,
                    e.dtype,
                    T::DTYPE
                )));
            }
            let end = e
                .offset
                .checked_add(e.bytes)
                .ok_or_else(|| Error::DimOverflow(e.name.clone()))?;
            if end > payload.len() {
                return Err(Error::Truncated {
                    expected: end,
                    found: payload.len(),
                });
            }
            let raw = &payload[e.offset..end];
            if hex::encode(Sha256::digest(raw)) != e.sha256 {
                return Err(Error::Checksum(e.name.clone()));
            }
            let numel: usize = e.shape.iter().product();
            if numel * width(e.dtype) != e.bytes {
                return Err(Error::DimMismatch(format!(
                    "array {} shape {:?} vs {} bytes",
                    e.name, e.shape, e.bytes
                )));
            }
            arrays.push((e.name.clone(), NdArray::new(e.shape.clone(), decode(raw))?));
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn manifest_len(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"))
}

/// Parse only the header and manifest.
pub fn read_manifest(bytes: &[u8], origin: &Path) -> Result<Manifest> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != CONTAINER_MAGIC {
        return Err(Error::BadMagic(origin.to_path_buf()));
    }
    if u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) != CONTAINER_VERSION {
        return Err(Error::BadMagic(origin.to_path_buf()));
    }
    let len = usize::try_from(manifest_len(bytes)).map_err(|_| Error::DimOverflow("manifest length".into()))?;
    let end = HEADER_LEN
        .checked_add(len)
        .ok_or_else(|| Error::DimOverflow("manifest length".into()))?;
    if end > bytes.len() {
        return Err(Error::Truncated {
            expected: end,
            found: bytes.len(),
        });
    }
    Ok(serde_json::from_slice(&bytes[HEADER_LEN..end])?)
}

/// Copy named arrays into a network built from `cfg`. Every array must be present.
pub fn network_from_arrays<T: Scalar>(
    cfg: &ModelConfig,
    arrays: &[(String, NdArray<T>)],
    mode: SelectionMode,
    temperature: T,
) -> Result<Network<T>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut net = build_model::<T, _>(cfg, &mut rng)?;
    for (name, _, slot) in net.arrays_mut() {
        let src = arrays
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks array {name:?}")))?;
        if src.shape() != slot.shape() {
            return Err(Error::DimMismatch(format!(
                "array {name}: stored {:?}, model expects {:?}",
                src.shape(),
                slot.shape()
            )));
        }
        *slot = src.clone();
    }
    net.set_mode(mode);
    net.set_temperature(temperature);
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlanNode {
    name: String,
    inputs: Vec<usize>,
    level: usize,
    has_affine: bool,
    lgc: bool,
    pool_output: bool,
    spec: Conv3dSpec,
    channel_perm: PermutationIndex,
    kernel_perm: PermutationIndex,
    channel_counts: Vec<usize>,
    kernel_counts: Vec<usize>,
    /// Compile-time merged input index, kept for audit and verified on load.
    merged: PermutationIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlanMeta {
    source_hash: String,
    input_channels: usize,
    input_dims: [usize; 3],
    pools: Vec<Pool>,
    nodes: Vec<PlanNode>,
    head_inputs: Vec<usize>,
    head_restore: PermutationIndex,
    #[serde(default)]
    model: Option<ModelConfig>,
}

/// Store a frozen network together with its compiled indices.
pub fn plan_container<T: Scalar>(
    frozen: &FrozenNetwork<T>,
    compiled: &CompiledNetwork<T>,
    model: Option<&ModelConfig>,
) -> Result<Container<T>> {
    let mut arrays = Vec::new();
    let mut nodes = Vec::with_capacity(frozen.nodes.len());
    for (i, (n, c)) in frozen.nodes.iter().zip(&compiled.layers).enumerate() {
        for (g, b) in n.conv.blocks.iter().enumerate() {
            if let Some(b) = b {
                arrays.push((format!("node{i}.block{g}"), b.clone()));
            }
        }
        if let Some((s, t)) = &n.affine {
            arrays.push((format!("node{i}.scale"), NdArray::new(vec![s.len()], s.clone())?));
            arrays.push((format!("node{i}.shift"), NdArray::new(vec![t.len()], t.clone())?));
        }
        nodes.push(PlanNode {
            name: n.name.clone(),
            inputs: n.inputs.clone(),
            level: n.level,
            has_affine: n.affine.is_some(),
            lgc: n.lgc,
            pool_output: n.pool_output,
            spec: n.conv.spec,
            channel_perm: n.conv.channel_perm.clone(),
            kernel_perm: n.conv.kernel_perm.clone(),
            channel_counts: n.conv.channel_counts.clone(),
            kernel_counts: n.conv.kernel_counts.clone(),
            merged: c.merged.clone(),
        });
    }
    let h = &frozen.head;
    arrays.push(("head.scale".into(), NdArray::new(vec![h.scale.len()], h.scale.clone())?));
    arrays.push(("head.shift".into(), NdArray::new(vec![h.shift.len()], h.shift.clone())?));
    arrays.push(("head.weight".into(), h.weight.clone()));
    arrays.push(("head.bias".into(), h.bias.clone()));
    let meta = PlanMeta {
        source_hash: frozen.source_hash.clone(),
        input_channels: frozen.input_channels,
        input_dims: frozen.input_dims,
        pools: frozen.pools.clone(),
        nodes,
        head_inputs: h.inputs.clone(),
        head_restore: compiled.head.restore.clone(),
        model: model.cloned(),
    };
    Ok(Container {
        kind: "plan".into(),
        meta: serde_json::to_value(meta)?,
        arrays,
    })
}

/// Rebuild the frozen network, recompile it and check the stored indices agree.
pub fn plan_from_container<T: Scalar>(
    c: &Container<T>,
) -> Result<(FrozenNetwork<T>, CompiledNetwork<T>, Option<ModelConfig>)> {
    if c.kind != "plan" {
        return Err(Error::Config(format!("expected a plan container, found {:?}", c.kind)));
    }
    let meta: PlanMeta = serde_json::from_value(c.meta.clone())?;
    let vec_of = |name: &str| -> Result<Vec<T>> { Ok(c.get(name)?.data().to_vec()) };
    let mut nodes = Vec::with_capacity(meta.nodes.len());
    for (i, n) in meta.nodes.iter().enumerate() {
        let blocks = n
            .kernel_counts
            .iter()
            .enumerate()
            .map(|(g, &k)| {
                if k == 0 {
                    Ok(None)
                } else {
                    c.get(&format!("node{i}.block{g}")).cloned().map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let conv = GroupedConv3d {
            spec: n.spec,
            blocks,
            channel_perm: n.channel_perm.clone(),
            kernel_perm: n.kernel_perm.clone(),
            channel_counts: n.channel_counts.clone(),
            kernel_counts: n.kernel_counts.clone(),
        };
        let affine = if n.has_affine {
            Some((vec_of(&format!("node{i}.scale"))?, vec_of(&format!("node{i}.shift"))?))
        } else {
            None
        };
        nodes.push(FrozenNode {
            name: n.name.clone(),
            inputs: n.inputs.clone(),
            level: n.level,
            affine,
            conv,
            lgc: n.lgc,
            pool_output: n.pool_output,
        });
    }
    let frozen = FrozenNetwork {
        input_channels: meta.input_channels,
        input_dims: meta.input_dims,
        pools: meta.pools.clone(),
        nodes,
        head: FrozenHead {
            inputs: meta.head_inputs.clone(),
            scale: vec_of("head.scale")?,
            shift: vec_of("head.shift")?,
            weight: c.get("head.weight")?.clone(),
            bias: c.get("head.bias")?.clone(),
        },
        source_hash: meta.source_hash.clone(),
    };
    let compiled = compile(&frozen)?;
    for (layer, stored) in compiled.layers.iter().zip(&meta.nodes) {
        if layer.merged != stored.merged {
            return Err(Error::Compile(format!(
                "{}: stored merged index disagrees with recompilation",
                layer.name
            )));
        }
    }
    if compiled.head.restore != meta.head_restore {
        return Err(Error::Compile(
            "stored restoration index disagrees with recompilation".into(),
        ));
    }
    Ok((frozen, compiled, meta.model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::toy_chain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn container_round_trip_and_checksum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Container::<f32>::new("test", serde_json::json!({"k": 1}));
        c.push("a", NdArray::randn(&[2, 3], 1.0, &mut rng));
        c.push("b", NdArray::randn(&[4], 1.0, &mut rng));
        let bytes = c.to_bytes().unwrap();
        let back = Container::<f32>::from_bytes(&bytes, Path::new("m")).unwrap();
        assert_eq!(back, c);
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 1;
        assert!(matches!(
            Container::<f32>::from_bytes(&bad, Path::new("m")),
            Err(Error::Checksum(_))
        ));
        assert!(matches!(
            Container::<f64>::from_bytes(&bytes, Path::new("m")),
            Err(Error::DimMismatch(_))
        ));
        assert!(matches!(
            Container::<f32>::from_bytes(&bytes[..bytes.len() - 4], Path::new("m")),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn plan_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = toy_chain::<f32, _>(&[3, 6, 5], &[3, 2], [3, 4, 4], 3, 3, &mut rng).unwrap();
        net.randomize_hard_groups(&mut rng);
        net.randomize_norms(&mut rng);
        let frozen = FrozenNetwork::from_network(&net).unwrap();
        let compiled = compile(&frozen).unwrap();
        let c = plan_container(&frozen, &compiled, None).unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = Container::<f32>::from_bytes(&bytes, Path::new("p")).unwrap();
        let (f2, c2, _) = plan_from_container(&back).unwrap();
        assert_eq!(f2, frozen);
        assert_eq!(c2, compiled);
    }
}
