use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::codec::{Reader, Writer};
use crate::randomness::SeedRng;
use crate::Hash256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Recipe for a synthetic dataset. Generation is a pure function of the spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: TaskKind,
    pub samples: usize,
    pub features: usize,
    /// Output width for regression, number of classes for classification.
    pub outputs: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// The bundled toy regression task.
    pub fn toy_regression() -> Self {
        Self { kind: TaskKind::Regression, samples: 256, features: 8, outputs: 2, seed: 42 }
    }

    pub fn generate(&self) -> Result<Dataset, ModelError> {
        if self.samples == 0 || self.features == 0 || self.outputs == 0 {
            return Err(ModelError::Layout("dataset dimensions must be positive".into()));
        }
        let mut rng = SeedRng::from_label(b"pogo/dataset", self.seed);
        let (n, f, o) = (self.samples, self.features, self.outputs);
        match self.kind {
            TaskKind::Regression => {
                // Smooth teacher: y_j = sin(a_j·x) + 0.5 tanh(b_j·x).
                let scale = 1.0 / (f as f64).sqrt();
                let a: Vec<f64> = (0..o * f).map(|_| rng.normal() * scale).collect();
                let b: Vec<f64> = (0..o * f).map(|_| rng.normal() * scale).collect();
                let mut inputs = Vec::with_capacity(n * f);
                let mut targets = Vec::with_capacity(n * o);
                for _ in 0..n {
                    let x: Vec<f64> = (0..f).map(|_| rng.normal()).collect();
                    for j in 0..o {
                        let da: f64 = (0..f).map(|k| a[j * f + k] * x[k]).sum();
                        let db: f64 = (0..f).map(|k| b[j * f + k] * x[k]).sum();
                        targets.push((da.sin() + 0.5 * db.tanh()) as f32);
                    }
                    inputs.extend(x.iter().map(|&v| v as f32));
                }
                Dataset::new(inputs, f, targets, o)
            }
            TaskKind::Classification => {
                let centers: Vec<f64> = (0..o * f).map(|_| rng.normal() * 1.5).collect();
                let mut inputs = Vec::with_capacity(n * f);
                let mut targets = vec![0.0f32; n * o];
                for i in 0..n {
                    let class = rng.below(o as u64) as usize;
                    for k in 0..f {
                        inputs.push((centers[class * f + k] + rng.normal()) as f32);
                    }
                    targets[i * o + class] = 1.0;
                }
                Dataset::new(inputs, f, targets, o)
            }
        }
    }
}

/// Row-major feature and target matrices plus their content id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<f32>,
    targets: Vec<f32>,
    features: usize,
    outputs: usize,
    id: Hash256,
}

impl Dataset {
    pub fn new(inputs: Vec<f32>, features: usize, targets: Vec<f32>, outputs: usize) -> Result<Self, ModelError> {
        if features == 0 || outputs == 0 || inputs.len() % features != 0 || targets.len() % outputs != 0 {
            return Err(ModelError::Layout("matrix widths do not divide data".into()));
        }
        let rows = inputs.len() / features;
        if rows == 0 || rows != targets.len() / outputs {
            return Err(ModelError::Layout(format!(
                "{rows} input rows vs {} target rows",
                targets.len() / outputs
            )));
        }
        if let Some(i) = inputs.iter().chain(&targets).position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(i));
        }
        let mut ds = Self { inputs, targets, features, outputs, id: Hash256::ZERO };
        ds.id = Hash256::of(&ds.to_bytes());
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.features
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn id(&self) -> Hash256 {
        self.id
    }

    pub fn input(&self, row: usize) -> &[f32] {
        &self.inputs[row * self.features..(row + 1) * self.features]
    }

    pub fn target(&self, row: usize) -> &[f32] {
        &self.targets[row * self.outputs..(row + 1) * self.outputs]
    }

    pub fn full(&self) -> Batch<'_> {
        Batch { data: self, rows: (0..self.len()).collect() }
    }

    pub fn batch(&self, rows: &[usize]) -> Result<Batch<'_>, ModelError> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(ModelError::Layout(format!("row {bad} out of range for {} rows", self.len())));
        }
        Ok(Batch { data: self, rows: rows.to_vec() })
    }

    /// Canonical serialization: rows, feature width, target width (u64 LE),
    /// then inputs and targets as f32 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(24 + 4 * (self.inputs.len() + self.targets.len()));
        w.u64(self.len() as u64).u64(self.features as u64).u64(self.outputs as u64);
        for &v in self.inputs.iter().chain(&self.targets) {
            w.f32(v);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader::new(bytes);
        let rows = r.len_u64(bytes.len())?;
        let features = r.len_u64(bytes.len())?;
        let outputs = r.len_u64(bytes.len())?;
        let n_in = rows.checked_mul(features).ok_or_else(|| ModelError::Layout("overflow".into()))?;
        let n_out = rows.checked_mul(outputs).ok_or_else(|| ModelError::Layout("overflow".into()))?;
        if r.remaining() != 4 * (n_in + n_out) {
            return Err(ModelError::Layout("dataset payload length mismatch".into()));
        }
        let inputs = (0..n_in).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
        let targets = (0..n_out).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
        r.finish()?;
        Dataset::new(inputs, features, targets, outputs)
    }
}

/// A selection of dataset rows. Rows may repeat.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub(crate) data: &'a Dataset,
    pub(crate) rows: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.data
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}
