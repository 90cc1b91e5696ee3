use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::DatasetSpec;
use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, ConvKind, Dense, Network, Node, Op, TrainingConfig};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

/// Run information stored next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchSpec,
    pub lambda: f64,
    pub epochs: usize,
    pub final_accuracy: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub training: Option<TrainingConfig>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub train_fraction: Option<f64>,
    /// Number of channels removed from the trained network, if pruned.
    #[serde(default)]
    pub pruned_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length.
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum NodeRecord {
    Input,
    Conv {
        inputs: Vec<usize>,
        kind: ConvKind,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        inputs: Vec<usize>,
        channels: usize,
        eps: f64,
        momentum: f64,
        channel_ids: Vec<u32>,
    },
    Relu {
        inputs: Vec<usize>,
    },
    MaxPool {
        inputs: Vec<usize>,
    },
    GlobalAvgPool {
        inputs: Vec<usize>,
    },
    Dense {
        inputs: Vec<usize>,
        in_features: usize,
        out_features: usize,
    },
    Add {
        inputs: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    input_shape: [usize; 3],
    num_classes: usize,
    nodes: Vec<NodeRecord>,
    tensors: Vec<TensorRecord>,
    blob: BlobInfo,
    metadata: CheckpointMeta,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorRecord>,
}

/// Tensor names and slices in blob order.
fn named_tensors(net: &Network) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut out = Vec::new();
    for (i, node) in net.nodes().iter().enumerate() {
        match &node.op {
            Op::Conv(c) => out.push((format!("{i}.conv.weight"), c.weight.shape().to_vec(), c.weight.data())),
            Op::BatchNorm(bn) => {
                let n = bn.gamma.len();
                out.push((format!("{i}.bn.gamma"), vec![n], &bn.gamma[..]));
                out.push((format!("{i}.bn.beta"), vec![n], &bn.beta[..]));
                out.push((format!("{i}.bn.running_mean"), vec![n], &bn.running_mean[..]));
                out.push((format!("{i}.bn.running_var"), vec![n], &bn.running_var[..]));
            }
            Op::Dense(d) => {
                out.push((format!("{i}.dense.weight"), d.weight.shape().to_vec(), d.weight.data()));
                out.push((format!("{i}.dense.bias"), vec![d.bias.len()], &d.bias[..]));
            }
            _ => {}
        }
    }
    out
}

fn node_record(node: &Node<f32>) -> NodeRecord {
    let inputs = node.inputs.clone();
    match &node.op {
        Op::Input => NodeRecord::Input,
        Op::Conv(c) => NodeRecord::Conv {
            inputs,
            kind: c.kind,
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
        },
        Op::BatchNorm(bn) => NodeRecord::BatchNorm {
            inputs,
            channels: bn.gamma.len(),
            eps: bn.eps as f64,
            momentum: bn.momentum as f64,
            channel_ids: bn.channel_ids.clone(),
        },
        Op::Relu => NodeRecord::Relu { inputs },
        Op::MaxPool => NodeRecord::MaxPool { inputs },
        Op::GlobalAvgPool => NodeRecord::GlobalAvgPool { inputs },
        Op::Dense(d) => NodeRecord::Dense {
            inputs,
            in_features: d.in_features,
            out_features: d.out_features,
        },
        Op::Add => NodeRecord::Add { inputs },
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `dir/manifest.json` and `dir/tensors.bin`, creating `dir`.
pub fn save_checkpoint(net: &Network, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, values) in named_tensors(net) {
        let offset = blob.len() as u64;
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorRecord {
            name,
            shape,
            dtype: "f32".into(),
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        input_shape: net.input_shape(),
        num_classes: net.num_classes(),
        nodes: net.nodes().iter().map(node_record).collect(),
        tensors,
        blob: BlobInfo {
            file: BLOB_FILE.into(),
            bytes: blob.len() as u64,
            sha256: sha256_hex(&blob),
        },
        metadata: meta.clone(),
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&man_path, text + "\n").map_err(|e| Error::io(&man_path, e))
}

struct BlobReader<'a> {
    blob: &'a [u8],
    records: std::collections::HashMap<&'a str, &'a TensorRecord>,
}

impl BlobReader<'_> {
    fn take(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let rec = self
            .records
            .get(name)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("missing tensor {name}")))?;
        if rec.shape != shape || rec.dtype != "f32" {
            return Err(Error::MalformedCheckpoint(format!(
                "tensor {name}: {} {:?}, expected f32 {:?}",
                rec.dtype, rec.shape, shape
            )));
        }
        let numel: usize = shape.iter().product();
        let (start, len) = (rec.offset as usize, rec.length as usize);
        if len != numel * 4 || start.checked_add(len).is_none_or(|end| end > self.blob.len()) {
            return Err(Error::MalformedCheckpoint(format!(
                "tensor {name} has a bad byte range"
            )));
        }
        Ok(self.blob[start..start + len]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

/// Loads a checkpoint directory written by [`save_checkpoint`].
///
/// Checks run in order: format version, blob length, checksum, then
/// structure.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let man_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let probe: VersionProbe =
        serde_json::from_str(&text).map_err(|e| Error::MalformedCheckpoint(format!("manifest: {e}")))?;
    if probe.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: probe.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::MalformedCheckpoint(format!("manifest: {e}")))?;
    let blob_path = dir.join(&manifest.blob.file);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if (blob.len() as u64) < manifest.blob.bytes {
        return Err(Error::Truncated {
            expected: manifest.blob.bytes,
            actual: blob.len() as u64,
        });
    }
    if blob.len() as u64 > manifest.blob.bytes {
        return Err(Error::MalformedCheckpoint(format!(
            "blob has {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob.bytes
        )));
    }
    let actual = sha256_hex(&blob);
    if actual != manifest.blob.sha256 {
        return Err(Error::ChecksumMismatch {
            expected: manifest.blob.sha256.clone(),
            actual,
        });
    }

    let mut records = std::collections::HashMap::new();
    for rec in &manifest.tensors {
        if records.insert(rec.name.as_str(), rec).is_some() {
            return Err(Error::MalformedCheckpoint(format!("tensor {} listed twice", rec.name)));
        }
    }
    let reader = BlobReader { blob: &blob, records };
    let mut used = 0usize;
    let mut nodes = Vec::with_capacity(manifest.nodes.len());
    for (i, rec) in manifest.nodes.iter().enumerate() {
        let node = match rec {
            NodeRecord::Input => Node {
                op: Op::Input,
                inputs: vec![],
            },
            NodeRecord::Conv {
                inputs,
                kind,
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let per_group = match kind {
                    ConvKind::Standard => *in_channels,
                    ConvKind::Depthwise => 1,
                };
                let shape = vec![*out_channels, per_group, *kernel, *kernel];
                let data = reader.take(&format!("{i}.conv.weight"), &shape)?;
                used += 1;
                Node {
                    op: Op::Conv(Conv {
                        kind: *kind,
                        in_channels: *in_channels,
                        out_channels: *out_channels,
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                        weight: Tensor::new(shape, data)?,
                    }),
                    inputs: inputs.clone(),
                }
            }
            NodeRecord::BatchNorm {
                inputs,
                channels,
                eps,
                momentum,
                channel_ids,
            } => {
                let get = |part: &str| reader.take(&format!("{i}.bn.{part}"), &[*channels]);
                let bn = BatchNorm {
                    gamma: get("gamma")?,
                    beta: get("beta")?,
                    running_mean: get("running_mean")?,
                    running_var: get("running_var")?,
                    eps: *eps as f32,
                    momentum: *momentum as f32,
                    channel_ids: channel_ids.clone(),
                };
                used += 4;
                Node {
                    op: Op::BatchNorm(bn),
                    inputs: inputs.clone(),
                }
            }
            NodeRecord::Dense {
                inputs,
                in_features,
                out_features,
            } => {
                let shape = vec![*out_features, *in_features];
                let weight = reader.take(&format!("{i}.dense.weight"), &shape)?;
                let bias = reader.take(&format!("{i}.dense.bias"), &[*out_features])?;
                used += 2;
                Node {
                    op: Op::Dense(Dense {
                        in_features: *in_features,
                        out_features: *out_features,
                        weight: Tensor::new(shape, weight)?,
                        bias,
                    }),
                    inputs: inputs.clone(),
                }
            }
            NodeRecord::Relu { inputs } => simple(Op::Relu, inputs),
            NodeRecord::MaxPool { inputs } => simple(Op::MaxPool, inputs),
            NodeRecord::GlobalAvgPool { inputs } => simple(Op::GlobalAvgPool, inputs),
            NodeRecord::Add { inputs } => simple(Op::Add, inputs),
        };
        nodes.push(node);
    }
    if used != manifest.tensors.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "{} tensor records, {used} consumed by the graph",
            manifest.tensors.len()
        )));
    }
    let network = Network::from_nodes(nodes, manifest.input_shape, manifest.num_classes)
        .map_err(|e| Error::MalformedCheckpoint(format!("graph: {e}")))?;
    Ok(Checkpoint {
        network,
        meta: manifest.metadata,
        tensors: manifest.tensors,
    })
}

fn simple(op: Op<f32>, inputs: &[usize]) -> Node<f32> {
    Node {
        op,
        inputs: inputs.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_network, count_parameters};
    use crate::prune::{prune_channels, ChannelRef};
    use crate::tensor::Tensor;

    fn meta(arch: &ArchSpec) -> CheckpointMeta {
        CheckpointMeta {
            arch: arch.clone(),
            lambda: 1e-3,
            epochs: 3,
            final_accuracy: Some(0.5),
            seed: 9,
            training: Some(TrainingConfig::default()),
            dataset: None,
            train_fraction: Some(0.7),
            pruned_channels: 0,
        }
    }

    fn batch(shape: [usize; 3]) -> Tensor<f32> {
        let mut dims = vec![3];
        dims.extend(shape);
        Tensor::from_fn(&dims, |i| ((i * 37 % 101) as f32 / 50.0) - 1.0)
    }

    fn perturb_running_stats(net: &mut Network) {
        for ord in 0..net.batch_norm_count() {
            let bn = net.batch_norm_mut(ord).unwrap();
            for (k, (m, v)) in bn.running_mean.iter_mut().zip(bn.running_var.iter_mut()).enumerate() {
                *m = 0.01 * k as f32;
                *v = 1.0 + 0.1 * k as f32;
            }
        }
    }

    #[test]
    fn roundtrip_is_bitwise_for_every_family() {
        let dir = tempfile::tempdir().unwrap();
        for arch in [
            ArchSpec::vgg(11).with_input([1, 8, 16]).with_base_channels(4),
            ArchSpec::resnet(11).with_input([1, 8, 16]).with_base_channels(4),
            ArchSpec::mobilenet(0.5).with_input([1, 8, 16]).with_base_channels(4),
        ] {
            let mut net: Network = build_network(&arch, 3).unwrap();
            perturb_running_stats(&mut net);
            let path = dir.path().join(arch.label());
            save_checkpoint(&net, &meta(&arch), &path).unwrap();
            let ck = load_checkpoint(&path).unwrap();
            assert_eq!(ck.network, net);
            assert_eq!(ck.meta, meta(&arch));
            let x = batch(arch.input_shape);
            let a = net.forward_eval(&x).unwrap();
            let b = ck.network.forward_eval(&x).unwrap();
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn pruned_network_keeps_its_shape() {
        let dir = tempfile::tempdir().unwrap();
        let arch = ArchSpec::vgg(8).with_input([1, 8, 8]).with_base_channels(4);
        let net: Network = build_network(&arch, 1).unwrap();
        let gone = [ChannelRef::new(0, 1), ChannelRef::new(2, 3)];
        let pruned = prune_channels(&net, &gone).unwrap();
        save_checkpoint(&pruned, &meta(&arch), dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap().network;
        assert_eq!(count_parameters(&back), count_parameters(&pruned));
        assert_eq!(back.batch_norms().next().unwrap().2.channel_ids, vec![0, 2, 3]);
    }

    fn saved() -> (tempfile::TempDir, Network) {
        let dir = tempfile::tempdir().unwrap();
        let arch = ArchSpec::vgg(8).with_input([1, 8, 8]).with_base_channels(2);
        let net: Network = build_network(&arch, 1).unwrap();
        save_checkpoint(&net, &meta(&arch), dir.path()).unwrap();
        (dir, net)
    }

    #[test]
    fn truncated_blob_detected() {
        let (dir, _) = saved();
        let p = dir.path().join(BLOB_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
        assert_eq!(err.code(), "checkpoint_truncated");
    }

    #[test]
    fn corrupted_blob_detected() {
        let (dir, _) = saved();
        let p = dir.path().join(BLOB_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes[10] ^= 0x40;
        fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert_eq!(err.code(), "checkpoint_checksum");
    }

    #[test]
    fn foreign_version_rejected() {
        let (dir, _) = saved();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&p, text).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { found: 7, expected: 1 }));
    }

    #[test]
    fn missing_tensor_is_malformed() {
        let (dir, _) = saved();
        let p = dir.path().join(MANIFEST_FILE);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        v["tensors"].as_array_mut().unwrap().remove(0);
        fs::write(&p, v.to_string()).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap_err().code(), "checkpoint_malformed");
    }

    #[test]
    fn every_parameter_and_buffer_recorded_once() {
        let (dir, net) = saved();
        let ck = load_checkpoint(dir.path()).unwrap();
        let floats: u64 = ck.tensors.iter().map(|t| t.length / 4).sum();
        let pc = count_parameters(&net);
        assert_eq!(floats as usize, pc.total());
        let mut names: Vec<&str> = ck.tensors.iter().map(|t| t.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), ck.tensors.len());
    }
}
