//! Model persistence: a versioned binary container holding named f64
//! tensors little-endian, prefixed by a JSON model descriptor so a file is
//! enough to rebuild the model and run it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::gnn::{GnnError, GnnModel, GnnParams, ModelKind, TrunkSpec};

const MAGIC: &[u8; 4] = b"FLNK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] GnnError),
}

fn bad(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

/// Everything about a model except its tensor values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub kind: ModelKind,
    pub k_max: usize,
    pub l: usize,
    pub m: usize,
    pub varying_k: bool,
    pub width_divisor: usize,
    pub spec: TrunkSpec,
    pub pilot_rms: f64,
    pub n_u: usize,
    pub image_extractor: Option<Box<ModelDescriptor>>,
    pub pilot_extractor: Option<Box<ModelDescriptor>>,
}

impl ModelDescriptor {
    pub fn of(model: &GnnModel) -> ModelDescriptor {
        ModelDescriptor {
            kind: model.kind,
            k_max: model.k_max,
            l: model.l,
            m: model.m,
            varying_k: model.varying_k,
            width_divisor: model.width_divisor,
            spec: model.params.spec.clone(),
            pilot_rms: model.pilot_rms,
            n_u: model.n_u,
            image_extractor: model
                .image_extractor
                .as_ref()
                .map(|e| Box::new(ModelDescriptor::of(e))),
            pilot_extractor: model
                .pilot_extractor
                .as_ref()
                .map(|e| Box::new(ModelDescriptor::of(e))),
        }
    }

    /// A model with this shape and zero-seeded parameters, ready for
    /// [`GnnModel::load_named`].
    fn hollow_model(&self) -> GnnModel {
        GnnModel {
            kind: self.kind,
            k_max: self.k_max,
            l: self.l,
            m: self.m,
            varying_k: self.varying_k,
            width_divisor: self.width_divisor,
            pilot_rms: self.pilot_rms,
            n_u: self.n_u,
            params: GnnParams::init(self.spec.clone(), 0),
            image_extractor: self
                .image_extractor
                .as_ref()
                .map(|d| Box::new(d.hollow_model())),
            pilot_extractor: self
                .pilot_extractor
                .as_ref()
                .map(|d| Box::new(d.hollow_model())),
        }
    }
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<(), CheckpointError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn save_model(path: &Path, model: &GnnModel) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let descriptor = serde_json::to_vec(&ModelDescriptor::of(model))
        .map_err(|e| bad(format!("descriptor serialization failed: {e}")))?;
    write_u64(&mut w, descriptor.len() as u64)?;
    w.write_all(&descriptor)?;
    let tensors = model.named_tensors();
    write_u64(&mut w, tensors.len() as u64)?;
    for (name, tensor) in tensors {
        write_u64(&mut w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        write_u64(&mut w, tensor.shape.len() as u64)?;
        for &d in &tensor.shape {
            write_u64(&mut w, d as u64)?;
        }
        for v in &tensor.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<GnnModel, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a model checkpoint (bad magic)"));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let desc_len = read_u64(&mut r)? as usize;
    let mut desc = vec![0u8; desc_len];
    r.read_exact(&mut desc)?;
    let descriptor: ModelDescriptor = serde_json::from_slice(&desc)
        .map_err(|e| bad(format!("descriptor parse failed: {e}")))?;
    let count = read_u64(&mut r)? as usize;
    let mut tensors = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let ndim = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.insert(name, Tensor::from_vec(&shape, data));
    }
    let mut model = descriptor.hollow_model();
    model.load_named(|name| tensors.get(name).cloned())?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelTensor;
    use crate::gnn;
    use crate::rng::{substream, tag};
    use num_complex::Complex64;
    use rand::Rng;

    fn tiny_spec(input: usize, l: usize, m: usize, width: usize) -> TrunkSpec {
        TrunkSpec {
            embed: vec![input, width, width],
            psi: vec![width, width],
            rho: vec![width, width],
            xi: vec![2 * width, width],
            stages: 2,
            readout_out: 2 * m * l + l,
        }
    }

    fn sample(k: usize, l: usize, m: usize, seed: u64) -> gnn::SampleData {
        let mut h = ChannelTensor::zeros(k, l, m);
        let mut rng = substream(seed, tag::SAMPLE, 0);
        for z in h.data.iter_mut() {
            *z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let pilot = gnn::pilot_features(&h, 1.0);
        gnn::SampleData { image: None, pilot: Some(pilot), h }
    }

    #[test]
    fn file_roundtrip_preserves_model_and_decisions() {
        let (k, l, m) = (2, 1, 2);
        let mut model = GnnModel::with_spec(
            ModelKind::Pilot,
            k,
            l,
            m,
            tiny_spec(2 * l * m, l, m, 8),
            17,
        );
        model.pilot_rms = 2.5;
        model.n_u = 16;
        // Move the running statistics off their defaults so persistence of
        // the non-trainable state is exercised too.
        let train: Vec<gnn::SampleData> = (0..12).map(|i| sample(k, l, m, 100 + i)).collect();
        let val: Vec<gnn::SampleData> = (0..4).map(|i| sample(k, l, m, 300 + i)).collect();
        let schedule = gnn::TrainSchedule {
            epochs: 1,
            batch_size: 6,
            ..Default::default()
        };
        gnn::train(&mut model, &train, &val, &[1.0], 0.1, &schedule).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(ModelDescriptor::of(&loaded), ModelDescriptor::of(&model));
        assert_eq!(loaded.named_tensors(), model.named_tensors());
        assert_eq!(loaded.pilot_rms, 2.5);
        assert_eq!(loaded.n_u, 16);

        let probe = sample(k, l, m, 999);
        let (a1, d1) = gnn::infer(&model, &probe, &[1.0], 0.1).unwrap();
        let (a2, d2) = gnn::infer(&loaded, &probe, &[1.0], 0.1).unwrap();
        assert_eq!(a1.serving, a2.serving);
        assert_eq!(d1.min_rate.to_bits(), d2.min_rate.to_bits());
    }

    #[test]
    fn combined_model_roundtrips_with_nested_extractors() {
        let (k, l, m) = (2, 1, 2);
        let img =
            GnnModel::with_spec(ModelKind::Image, k, l, m, tiny_spec(3 * l, l, m, 8), 4);
        let mut pil =
            GnnModel::with_spec(ModelKind::Pilot, k, l, m, tiny_spec(2 * l * m, l, m, 8), 5);
        pil.pilot_rms = 1.75;
        let model =
            GnnModel::new(ModelKind::Combined, k, l, m, false, 64, 6, Some((img, pil)))
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("combined.ckpt");
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.named_tensors(), model.named_tensors());
        assert_eq!(loaded.pilot_extractor.as_ref().unwrap().pilot_rms, 1.75);
        assert_eq!(loaded.pilot_rms, 1.75);
    }

    #[test]
    fn malformed_files_are_rejected_with_context() {
        let dir = tempfile::tempdir().unwrap();
        let bad_magic = dir.path().join("bad.ckpt");
        std::fs::write(&bad_magic, b"nope").unwrap();
        match load_model(&bad_magic) {
            Err(CheckpointError::Format(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected format error, got {other:?}"),
        }

        let model = GnnModel::with_spec(
            ModelKind::Pilot,
            2,
            1,
            2,
            tiny_spec(4, 1, 2, 8),
            3,
        );
        let good = dir.path().join("good.ckpt");
        save_model(&good, &model).unwrap();
        let bytes = std::fs::read(&good).unwrap();

        let truncated = dir.path().join("cut.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&truncated), Err(CheckpointError::Io(_))));

        let mut wrong_version = bytes;
        wrong_version[4] = 99;
        let versioned = dir.path().join("ver.ckpt");
        std::fs::write(&versioned, &wrong_version).unwrap();
        match load_model(&versioned) {
            Err(CheckpointError::Format(msg)) => assert!(msg.contains("version")),
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
