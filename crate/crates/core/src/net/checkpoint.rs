//! Trained model snapshots and their file format.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::{softmax_f64, LayerSpec, LayerWeights};
use super::tensor::Tensor;
use super::{infer_layers, validate_architecture, NetError};
use crate::imaging::{CsiImage, Site};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SECCIMDL";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Images per inference batch.
const INFER_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    /// Epoch whose weights were kept (0 = initialization).
    pub epoch: usize,
    pub val_accuracy: f64,
    pub train_accuracy: f64,
    pub seed: u64,
    pub history: Vec<EpochStats>,
}

/// Weights of a trained network plus the training sites its classes stand for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub input_shape: [usize; 3],
    /// Class `i` is the location `sites[i]`.
    pub sites: Vec<Site>,
    pub layers: Vec<LayerWeights<f32>>,
    pub metadata: TrainingMetadata,
}

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: Vec<LayerSpec>,
    input_shape: [usize; 3],
    class_count: usize,
    sites: Vec<Site>,
    metadata: TrainingMetadata,
}

impl ModelCheckpoint {
    pub fn architecture(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn class_count(&self) -> usize {
        self.sites.len()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let out = validate_architecture(&self.architecture(), &self.input_shape)?;
        if out != [self.sites.len()] {
            return Err(NetError::Shape(format!(
                "network output {out:?} does not match {} classes",
                self.sites.len()
            )));
        }
        for l in &self.layers {
            let shapes = l.params.iter().chain(&l.state).map(|t| t.shape.clone());
            if !shapes.eq(l.spec.param_shapes().into_iter().chain(l.spec.state_shapes())) {
                return Err(NetError::Shape(format!("{} weights do not match the layer spec", l.spec.name())));
            }
        }
        Ok(())
    }

    fn logits_layers(&self) -> &[LayerWeights<f32>] {
        match self.layers.last() {
            Some(l) if l.spec == LayerSpec::Softmax => &self.layers[..self.layers.len() - 1],
            _ => &self.layers,
        }
    }

    /// Class probabilities for one image (inference mode).
    pub fn predict_probs(&self, image: &CsiImage) -> Result<Vec<f64>, NetError> {
        Ok(self.predict_batch(&[image])?.remove(0))
    }

    /// Class probabilities for each image, in input order.
    pub fn predict_batch(&self, images: &[&CsiImage]) -> Result<Vec<Vec<f64>>, NetError> {
        let [c, h, w] = self.input_shape;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_BATCH) {
            let mut data = Vec::with_capacity(chunk.len() * c * h * w);
            for img in chunk {
                if img.shape() != self.input_shape {
                    return Err(NetError::Shape(format!(
                        "image shape {:?} does not match model input {:?}",
                        img.shape(),
                        self.input_shape
                    )));
                }
                data.extend_from_slice(&img.pixels);
            }
            let x = Tensor::from_vec(&[chunk.len(), c, h, w], data);
            let logits = infer_layers(self.logits_layers(), &x);
            for b in 0..chunk.len() {
                out.push(softmax_f64(&logits.sample(b).iter().map(|&v| v as f64).collect::<Vec<_>>()));
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes()?)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NetError> {
        let header = Header {
            architecture: self.architecture(),
            input_shape: self.input_shape,
            class_count: self.class_count(),
            sites: self.sites.clone(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| NetError::Header(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.layers.iter().flat_map(|l| l.params.iter().chain(&l.state)) {
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let mut r = Reader(bytes);
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(NetError::BadMagic);
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(NetError::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = r.u32("header length")? as usize;
        let header: Header =
            serde_json::from_slice(r.take(len, "header")?).map_err(|e| NetError::Header(e.to_string()))?;
        if header.class_count != header.sites.len() {
            return Err(NetError::Header(format!(
                "class_count {} but {} sites",
                header.class_count,
                header.sites.len()
            )));
        }
        validate_architecture(&header.architecture, &header.input_shape)?;
        let mut layers = Vec::with_capacity(header.architecture.len());
        for spec in header.architecture {
            let mut read = |shapes: Vec<Vec<usize>>| -> Result<Vec<Tensor<f32>>, NetError> {
                shapes.into_iter().map(|s| r.tensor(&s)).collect()
            };
            let params = read(spec.param_shapes())?;
            let state = read(spec.state_shapes())?;
            layers.push(LayerWeights { spec, params, state });
        }
        if !r.0.is_empty() {
            return Err(NetError::Shape(format!("{} trailing bytes after the last tensor", r.0.len())));
        }
        let ckpt = Self {
            input_shape: header.input_shape,
            sites: header.sites,
            layers,
            metadata: header.metadata,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], NetError> {
        if self.0.len() < n {
            return Err(NetError::Truncated(what));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, NetError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self, expected: &[usize]) -> Result<Tensor<f32>, NetError> {
        let ndim = self.u32("tensor rank")? as usize;
        if ndim > 8 {
            return Err(NetError::Shape(format!("tensor rank {ndim} exceeds 8")));
        }
        let shape: Vec<usize> = (0..ndim)
            .map(|_| self.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        if shape != expected {
            return Err(NetError::Shape(format!("tensor shape {shape:?}, architecture expects {expected:?}")));
        }
        let n: usize = shape.iter().product();
        let data = self
            .take(4 * n, "tensor data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_vec(&shape, data))
    }
}
