//! Model checkpoints: a zip archive holding `spec.json`, `meta.json`, and one
//! raw little-endian `f32` blob per named parameter array.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::netspec::NetworkSpec;
use crate::nn::Model;

/// Training provenance stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub protocol: String,
    pub epoch: usize,
    /// Mean training loss per completed epoch.
    pub loss_curve: Vec<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub meta: TrainingMeta,
}

/// Every array of a model under a stable name, e.g. `layer3.running_var`.
fn named_arrays(model: &Model) -> Vec<(String, &[f32])> {
    let mut out = Vec::new();
    for (i, p) in model.layer_params().iter().enumerate() {
        let Some(p) = p else { continue };
        out.push((format!("layer{i}.weight"), p.weight.as_slice().expect("contiguous")));
        out.push((format!("layer{i}.bias"), p.bias.as_slice().expect("contiguous")));
        if let Some(bn) = &p.bn {
            out.push((format!("layer{i}.gamma"), bn.gamma.as_slice().expect("contiguous")));
            out.push((format!("layer{i}.beta"), bn.beta.as_slice().expect("contiguous")));
            out.push((format!("layer{i}.running_mean"), bn.running_mean.as_slice().expect("contiguous")));
            out.push((format!("layer{i}.running_var"), bn.running_var.as_slice().expect("contiguous")));
        }
    }
    out
}

impl ModelCheckpoint {
    pub fn new(model: Model, meta: TrainingMeta) -> Self {
        ModelCheckpoint { model, meta }
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.model.spec()
    }

    /// Serialized archive. Entry timestamps are fixed so equal checkpoints
    /// produce equal bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let zip_err = |e: zip::result::ZipError| Error::Checkpoint { path: "<memory>".into(), reason: e.to_string() };
        let io_err = |e: std::io::Error| Error::Checkpoint { path: "<memory>".into(), reason: e.to_string() };
        let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
        let opts = SimpleFileOptions::default()
            .compression_method(CompressionMethod::Deflated)
            .last_modified_time(DateTime::default());
        zip.start_file("spec.json", opts).map_err(zip_err)?;
        zip.write_all(serde_json::to_string_pretty(self.spec())?.as_bytes()).map_err(io_err)?;
        zip.start_file("meta.json", opts).map_err(zip_err)?;
        zip.write_all(serde_json::to_string_pretty(&self.meta)?.as_bytes()).map_err(io_err)?;
        for (name, data) in named_arrays(&self.model) {
            zip.start_file(format!("params/{name}.f32"), opts).map_err(zip_err)?;
            let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            zip.write_all(&bytes).map_err(io_err)?;
        }
        Ok(zip.finish().map_err(zip_err)?.into_inner())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        let mut zip = ZipArchive::new(Cursor::new(bytes)).map_err(|e| bad(e.to_string()))?;
        let mut read_entry = |name: &str| -> Result<Vec<u8>> {
            let mut entry = zip.by_name(name).map_err(|e| bad(format!("{name}: {e}")))?;
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf).map_err(|e| bad(format!("{name}: {e}")))?;
            Ok(buf)
        };
        let spec: NetworkSpec = serde_json::from_slice(&read_entry("spec.json")?).map_err(|e| bad(format!("spec.json: {e}")))?;
        let meta: TrainingMeta = serde_json::from_slice(&read_entry("meta.json")?).map_err(|e| bad(format!("meta.json: {e}")))?;
        let mut model = Model::new(spec, 0).map_err(|e| bad(e.to_string()))?;
        let names: Vec<(String, usize)> = named_arrays(&model).into_iter().map(|(n, d)| (n, d.len())).collect();
        let mut blobs = Vec::with_capacity(names.len());
        for (name, len) in &names {
            let raw = read_entry(&format!("params/{name}.f32"))?;
            if raw.len() != len * 4 {
                return Err(bad(format!("{name} holds {} values, spec needs {len}", raw.len() / 4)));
            }
            blobs.push(raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect::<Vec<f32>>());
        }
        let mut blobs = blobs.into_iter();
        for p in model.layer_params_mut().iter_mut().flatten() {
            let mut fill = |dst: &mut [f32]| dst.copy_from_slice(&blobs.next().expect("one blob per array"));
            fill(p.weight.as_slice_mut().expect("contiguous"));
            fill(p.bias.as_slice_mut().expect("contiguous"));
            if let Some(bn) = &mut p.bn {
                fill(bn.gamma.as_slice_mut().expect("contiguous"));
                fill(bn.beta.as_slice_mut().expect("contiguous"));
                fill(bn.running_mean.as_slice_mut().expect("contiguous"));
                fill(bn.running_var.as_slice_mut().expect("contiguous"));
            }
        }
        Ok(ModelCheckpoint { model, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Errors unless the checkpoint maps `in_channels` to `out_channels`.
    pub fn expect_io(&self, in_channels: usize, out_channels: usize, role: &str) -> Result<()> {
        let spec = self.spec();
        if spec.in_channels != in_channels || spec.out_channels != out_channels {
            return Err(Error::ShapeMismatch(format!(
                "{role} needs a {in_channels}->{out_channels} channel network, checkpoint `{}` is {}->{}",
                spec.name, spec.in_channels, spec.out_channels
            )));
        }
        Ok(())
    }
}
