//! Model checkpoint format.
//!
//! Layout mirrors the grid format: magic "CKP1", a u32 LE byte length, that
//! many bytes of UTF-8 JSON descriptor, then every tensor in descriptor
//! order as raw binary32 little-endian. Parameter bits roundtrip exactly,
//! so a reloaded model predicts bit-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array4};
use serde::{Deserialize, Serialize};

use super::{ConvLayer, FcnModel, FcnSpec};
use crate::error::{Error, Result};
use crate::raster::ChannelStats;

const MAGIC: [u8; 4] = *b"CKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: u64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_array4(name: impl Into<String>, a: &Array4<f32>) -> NamedTensor {
        let d = a.dim();
        NamedTensor {
            name: name.into(),
            shape: vec![d.0, d.1, d.2, d.3],
            data: a.as_slice().unwrap().to_vec(),
        }
    }

    pub fn from_array1(name: impl Into<String>, a: &Array1<f32>) -> NamedTensor {
        NamedTensor {
            name: name.into(),
            shape: vec![a.len()],
            data: a.as_slice().unwrap().to_vec(),
        }
    }

    fn expected_len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Adam moment tensors, stored alongside the step counter so training can
/// resume mid-run. Tensor names carry "adam.m." / "adam.v." prefixes over
/// the parameter names.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerBlob {
    pub t: u64,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: FcnSpec,
    pub params: Vec<NamedTensor>,
    pub stats: Option<ChannelStats>,
    pub optimizer: Option<OptimizerBlob>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    spec: FcnSpec,
    tensors: Vec<TensorEntry>,
    stats: Option<ChannelStats>,
    optimizer_t: Option<u64>,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_model(
        model: &FcnModel<f32>,
        stats: Option<ChannelStats>,
        optimizer: Option<OptimizerBlob>,
        meta: CheckpointMeta,
    ) -> Checkpoint {
        let mut params = Vec::with_capacity(2 * model.n_layers());
        for (i, layer) in model.hidden_layers().iter().enumerate() {
            params.push(NamedTensor::from_array4(
                format!("conv{}.weight", i + 1),
                &layer.weight,
            ));
            params.push(NamedTensor::from_array1(
                format!("conv{}.bias", i + 1),
                &layer.bias,
            ));
        }
        params.push(NamedTensor::from_array4("head.weight", &model.head().weight));
        params.push(NamedTensor::from_array1("head.bias", &model.head().bias));
        Checkpoint {
            spec: model.spec().clone(),
            params,
            stats,
            optimizer,
            meta,
        }
    }

    /// Rebuilds the model, verifying tensor names and shapes against the
    /// stored spec.
    pub fn to_model(&self) -> Result<FcnModel<f32>> {
        let shapes = self.spec.layer_shapes();
        if self.params.len() != 2 * shapes.len() {
            return Err(Error::format(format!(
                "checkpoint holds {} parameter tensors, spec needs {}",
                self.params.len(),
                2 * shapes.len()
            )));
        }
        let mut layers = Vec::with_capacity(self.spec.hidden_layers);
        let mut head = None;
        for (idx, &(o, i, k)) in shapes.iter().enumerate() {
            let stem = if idx < self.spec.hidden_layers {
                format!("conv{}", idx + 1)
            } else {
                "head".to_string()
            };
            let wt = &self.params[2 * idx];
            let bt = &self.params[2 * idx + 1];
            let expect_w = format!("{stem}.weight");
            let expect_b = format!("{stem}.bias");
            if wt.name != expect_w || bt.name != expect_b {
                return Err(Error::format(format!(
                    "tensor order mismatch: found {}/{}, expected {}/{}",
                    wt.name, bt.name, expect_w, expect_b
                )));
            }
            if wt.shape != [o, i, k, k] || bt.shape != [o] {
                return Err(Error::format(format!(
                    "{} shape {:?} does not match spec {:?}",
                    wt.name,
                    wt.shape,
                    (o, i, k, k)
                )));
            }
            let weight = Array4::from_shape_vec((o, i, k, k), wt.data.clone())
                .map_err(|e| Error::format(format!("{}: {e}", wt.name)))?;
            let bias = Array1::from_vec(bt.data.clone());
            let layer = ConvLayer { weight, bias };
            if idx < self.spec.hidden_layers {
                layers.push(layer);
            } else {
                head = Some(layer);
            }
        }
        FcnModel::from_parts(self.spec.clone(), layers, head.unwrap())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let all_tensors: Vec<&NamedTensor> = ckpt
        .params
        .iter()
        .chain(ckpt.optimizer.iter().flat_map(|o| o.tensors.iter()))
        .collect();
    for t in &all_tensors {
        if t.data.len() != t.expected_len() {
            return Err(Error::parameter(format!(
                "tensor {} holds {} values but its shape implies {}",
                t.name,
                t.data.len(),
                t.expected_len()
            )));
        }
    }
    let descriptor = Descriptor {
        spec: ckpt.spec.clone(),
        tensors: all_tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        stats: ckpt.stats.clone(),
        optimizer_t: ckpt.optimizer.as_ref().map(|o| o.t),
        meta: ckpt.meta.clone(),
    };

    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    let json = serde_json::to_vec(&descriptor)?;
    let len = u32::try_from(json.len())
        .map_err(|_| Error::format("descriptor too large for length prefix"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(64 * 1024);
    for t in &all_tensors {
        for chunk in t.data.chunks(16 * 1024) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let file = File::open(path.as_ref())?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::truncation("file shorter than magic"))?;
    if magic != MAGIC {
        return Err(Error::format(format!(
            "bad magic {:02x?}, expected \"CKP1\"",
            magic
        )));
    }

    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|_| Error::truncation("file ends inside descriptor length"))?;
    let desc_len = u32::from_le_bytes(len_bytes) as usize;
    let mut json = vec![0u8; desc_len];
    r.read_exact(&mut json)
        .map_err(|_| Error::truncation("file ends inside descriptor"))?;
    let descriptor: Descriptor = serde_json::from_slice(&json)
        .map_err(|e| Error::format(format!("bad descriptor: {e}")))?;
    descriptor
        .spec
        .validate()
        .map_err(|e| Error::format(format!("bad spec in descriptor: {e}")))?;

    let mut params = Vec::new();
    let mut adam = Vec::new();
    for entry in &descriptor.tensors {
        let elems: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; elems * 4];
        r.read_exact(&mut bytes).map_err(|_| {
            Error::truncation(format!(
                "payload ends inside tensor {} ({elems} values expected)",
                entry.name
            ))
        })?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = NamedTensor {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            data,
        };
        if entry.name.starts_with("adam.m.") || entry.name.starts_with("adam.v.") {
            adam.push(tensor);
        } else {
            params.push(tensor);
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after declared payload"));
    }

    let optimizer = match (descriptor.optimizer_t, adam.is_empty()) {
        (Some(t), false) => Some(OptimizerBlob { t, tensors: adam }),
        (None, true) => None,
        (Some(_), true) => {
            return Err(Error::format("optimizer step recorded without moment tensors"))
        }
        (None, false) => {
            return Err(Error::format("moment tensors present without optimizer step"))
        }
    };

    Ok(Checkpoint {
        spec: descriptor.spec,
        params,
        stats: descriptor.stats,
        optimizer,
        meta: descriptor.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::build_fcn;
    use ndarray::Array4;
    use rand::Rng as _;

    fn tmp() -> tempfile::TempPath {
        tempfile::Builder::new()
            .suffix(".ckpt")
            .tempfile()
            .unwrap()
            .into_temp_path()
    }

    fn spec() -> FcnSpec {
        FcnSpec {
            in_channels: 3,
            hidden_layers: 2,
            filters: 6,
            kernel: 3,
            leaky_slope: 0.01,
        }
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            seed: 99,
            epoch: 17,
            val_loss: Some(1.25),
        }
    }

    #[test]
    fn roundtrip_is_bitwise_on_predictions() {
        let model = build_fcn(&spec(), 7).unwrap();
        let ckpt = Checkpoint::from_model(&model, None, None, meta());
        let path = tmp();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        let restored = back.to_model().unwrap();

        let mut rng = crate::seeding::rng_from(5);
        let mut x = Array4::<f32>::zeros((1, 3, 9, 7));
        for v in x.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let y0 = model.forward(&x).unwrap();
        let y1 = restored.forward(&x).unwrap();
        for (a, b) in y0.iter().zip(y1.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn optimizer_state_and_stats_survive() {
        let model = build_fcn(&spec(), 7).unwrap();
        let moments: Vec<NamedTensor> = model
            .param_tensors()
            .iter()
            .flat_map(|(name, data)| {
                ["adam.m", "adam.v"].map(|p| NamedTensor {
                    name: format!("{p}.{name}"),
                    shape: vec![data.len()],
                    data: data.iter().map(|v| v * 0.5).collect(),
                })
            })
            .collect();
        let stats = ChannelStats {
            mean: vec![1.0, 2.0, 3.0],
            std: vec![0.5, 0.5, 2.0],
        };
        let ckpt = Checkpoint::from_model(
            &model,
            Some(stats.clone()),
            Some(OptimizerBlob {
                t: 321,
                tensors: moments,
            }),
            meta(),
        );
        let path = tmp();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta, meta());
        assert_eq!(back.stats.as_ref(), Some(&stats));
        let opt = back.optimizer.as_ref().unwrap();
        assert_eq!(opt.t, 321);
        assert_eq!(opt.tensors.len(), 12);
        assert_eq!(back, ckpt);
    }

    #[test]
    fn truncated_tensor_is_detected() {
        let model = build_fcn(&spec(), 7).unwrap();
        let ckpt = Checkpoint::from_model(&model, None, None, meta());
        let path = tmp();
        save_checkpoint(&ckpt, &path).unwrap();
        let file = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        let full = file.metadata().unwrap().len();
        file.set_len(full - 2).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Truncation(_)) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn tensor_shape_mismatch_is_format_error() {
        let model = build_fcn(&spec(), 7).unwrap();
        let mut ckpt = Checkpoint::from_model(&model, None, None, meta());
        ckpt.params[0].shape = vec![5, 3, 3, 3];
        ckpt.params[0].data.truncate(5 * 3 * 3 * 3);
        // file saves fine; FcnSpec validation catches it at model build
        let path = tmp();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        match back.to_model() {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn orphan_optimizer_step_is_format_error() {
        let model = build_fcn(&spec(), 7).unwrap();
        let ckpt = Checkpoint::from_model(
            &model,
            None,
            Some(OptimizerBlob {
                t: 3,
                tensors: vec![],
            }),
            meta(),
        );
        let path = tmp();
        save_checkpoint(&ckpt, &path).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
