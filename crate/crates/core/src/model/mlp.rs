use serde::{Deserialize, Serialize};

use super::{Batch, LayerSpan, Layout, ModelError, ParamVector};
use crate::randomness::SeedRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Squared error averaged over output coordinates.
    Mse,
    /// Softmax cross-entropy against (possibly soft) label rows.
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub inputs: usize,
    pub hidden: Vec<usize>,
    pub outputs: usize,
    pub loss: LossKind,
}

impl Architecture {
    /// Consecutive `(fan_in, fan_out)` pairs, input layer first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.inputs);
        widths.extend(&self.hidden);
        widths.push(self.outputs);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// `layer{k}.weight` (shape `[fan_out, fan_in]`) then `layer{k}.bias`.
    pub fn layout(&self) -> Layout {
        let mut spans = Vec::new();
        let mut offset = 0;
        for (k, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            spans.push(LayerSpan { name: format!("layer{k}.weight"), offset, shape: vec![fan_out, fan_in] });
            offset += fan_in * fan_out;
            spans.push(LayerSpan { name: format!("layer{k}.bias"), offset, shape: vec![fan_out] });
            offset += fan_out;
        }
        Layout::new(spans).expect("architecture spans are contiguous")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.inputs == 0 || self.outputs == 0 || self.hidden.contains(&0) {
            return Err(ModelError::Layout("all layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample losses and their arithmetic mean.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub per_sample: Vec<f32>,
    pub mean: f32,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    arch: Architecture,
    dims: Vec<(usize, usize)>,
    layout: Layout,
}

impl Mlp {
    pub fn new(arch: Architecture) -> Result<Self, ModelError> {
        arch.validate()?;
        Ok(Self { dims: arch.layer_dims(), layout: arch.layout(), arch })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Xavier-uniform weights, zero biases, from a keyed stream.
    pub fn init(&self, rng: &mut SeedRng) -> ParamVector {
        let mut values = Vec::with_capacity(self.layout.dim());
        for &(fan_in, fan_out) in &self.dims {
            let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| (rng.unit_f32() * 2.0 - 1.0) * limit));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector::new(values, self.layout.clone()).expect("initial values are finite")
    }

    fn check(&self, params: &ParamVector, batch: &Batch<'_>) -> Result<(), ModelError> {
        if params.layout() != &self.layout {
            return Err(ModelError::Layout("parameter layout does not match architecture".into()));
        }
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let data = batch.dataset();
        if data.features() != self.arch.inputs || data.outputs() != self.arch.outputs {
            return Err(ModelError::Layout(format!(
                "batch is {}→{} but model is {}→{}",
                data.features(),
                data.outputs(),
                self.arch.inputs,
                self.arch.outputs
            )));
        }
        Ok(())
    }

    /// Activations of every layer for one sample; the last entry is the
    /// linear output.
    fn activations(&self, w: &[f32], x: &[f32]) -> Vec<Vec<f32>> {
        let mut acts = Vec::with_capacity(self.dims.len() + 1);
        acts.push(x.to_vec());
        let mut offset = 0;
        let last = self.dims.len() - 1;
        for (k, &(fan_in, fan_out)) in self.dims.iter().enumerate() {
            let weights = &w[offset..offset + fan_in * fan_out];
            let bias = &w[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let prev = acts.last().unwrap();
            let out: Vec<f32> = (0..fan_out)
                .map(|j| {
                    let row = &weights[j * fan_in..(j + 1) * fan_in];
                    let mut z = bias[j];
                    for (wi, ai) in row.iter().zip(prev) {
                        z += wi * ai;
                    }
                    if k == last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    /// Loss of one sample and, when `delta` is given, the loss gradient with
    /// respect to the output pre-activations.
    fn sample_loss(&self, out: &[f32], y: &[f32], delta: Option<&mut [f32]>) -> f32 {
        match self.arch.loss {
            LossKind::Mse => {
                let n = out.len() as f32;
                let mut sum = 0.0f32;
                for (o, t) in out.iter().zip(y) {
                    let d = o - t;
                    sum += d * d;
                }
                if let Some(delta) = delta {
                    for ((g, o), t) in delta.iter_mut().zip(out).zip(y) {
                        *g = 2.0 * (o - t) / n;
                    }
                }
                sum / n
            }
            LossKind::CrossEntropy => {
                let max = out.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0.0f32;
                for o in out {
                    denom += (o - max).exp();
                }
                let lse = max + denom.ln();
                let mut y_sum = 0.0f32;
                let mut yz = 0.0f32;
                for (o, t) in out.iter().zip(y) {
                    y_sum += t;
                    yz += t * o;
                }
                if let Some(delta) = delta {
                    for ((g, o), t) in delta.iter_mut().zip(out).zip(y) {
                        *g = (o - lse).exp() * y_sum - t;
                    }
                }
                lse * y_sum - yz
            }
        }
    }

    pub fn forward(&self, params: &ParamVector, batch: &Batch<'_>) -> Result<LossEval, ModelError> {
        self.check(params, batch)?;
        let data = batch.dataset();
        let w = params.values();
        let per_sample: Vec<f32> = batch
            .rows()
            .iter()
            .map(|&r| {
                let acts = self.activations(w, data.input(r));
                self.sample_loss(acts.last().unwrap(), data.target(r), None)
            })
            .collect();
        let mut sum = 0.0f32;
        for l in &per_sample {
            sum += l;
        }
        let mean = sum / per_sample.len() as f32;
        Ok(LossEval { per_sample, mean })
    }

    pub fn loss(&self, params: &ParamVector, batch: &Batch<'_>) -> Result<f32, ModelError> {
        Ok(self.forward(params, batch)?.mean)
    }

    /// Mean loss and its gradient over the batch.
    pub fn loss_and_gradient(&self, params: &ParamVector, batch: &Batch<'_>) -> Result<(f32, ParamVector), ModelError> {
        self.check(params, batch)?;
        let data = batch.dataset();
        let w = params.values();
        let mut grad = vec![0.0f32; w.len()];
        let mut loss_sum = 0.0f32;

        // Offsets of each layer's weight block.
        let mut offsets = Vec::with_capacity(self.dims.len());
        let mut off = 0;
        for &(fan_in, fan_out) in &self.dims {
            offsets.push(off);
            off += fan_in * fan_out + fan_out;
        }

        for &r in batch.rows() {
            let acts = self.activations(w, data.input(r));
            let mut delta = vec![0.0f32; self.arch.outputs];
            loss_sum += self.sample_loss(acts.last().unwrap(), data.target(r), Some(&mut delta));

            for k in (0..self.dims.len()).rev() {
                let (fan_in, fan_out) = self.dims[k];
                let base = offsets[k];
                let prev = &acts[k];
                for j in 0..fan_out {
                    let d = delta[j];
                    let g_row = &mut grad[base + j * fan_in..base + (j + 1) * fan_in];
                    for (g, a) in g_row.iter_mut().zip(prev) {
                        *g += d * a;
                    }
                    grad[base + fan_in * fan_out + j] += d;
                }
                if k > 0 {
                    let weights = &w[base..base + fan_in * fan_out];
                    let mut next = vec![0.0f32; fan_in];
                    for j in 0..fan_out {
                        let d = delta[j];
                        for (n, wij) in next.iter_mut().zip(&weights[j * fan_in..(j + 1) * fan_in]) {
                            *n += wij * d;
                        }
                    }
                    for (n, a) in next.iter_mut().zip(prev) {
                        *n *= 1.0 - a * a;
                    }
                    delta = next;
                }
            }
        }

        let n = batch.len() as f32;
        for g in &mut grad {
            *g /= n;
        }
        Ok((loss_sum / n, params.with_values(grad)?))
    }

    pub fn gradient(&self, params: &ParamVector, batch: &Batch<'_>) -> Result<ParamVector, ModelError> {
        Ok(self.loss_and_gradient(params, batch)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dataset, DatasetSpec};

    fn toy_arch() -> Architecture {
        Architecture { inputs: 8, hidden: vec![32, 32], outputs: 2, loss: LossKind::Mse }
    }

    #[test]
    fn layout_names_and_count() {
        let arch = toy_arch();
        let layout = arch.layout();
        assert_eq!(layout.dim(), 8 * 32 + 32 + 32 * 32 + 32 + 32 * 2 + 2);
        assert_eq!(layout.dim(), arch.param_count());
        assert_eq!(layout.span("layer1.weight").unwrap().shape, vec![32, 32]);
        assert_eq!(layout.spans().last().unwrap().name, "layer2.bias");
    }

    #[test]
    fn zero_network_mse_is_mean_square_target() {
        let mlp = Mlp::new(toy_arch()).unwrap();
        let ds = DatasetSpec::toy_regression().generate().unwrap();
        let params = ParamVector::zeros(mlp.layout().clone());
        let eval = mlp.forward(&params, &ds.full()).unwrap();
        for (r, l) in eval.per_sample.iter().enumerate() {
            let y = ds.target(r);
            let expected = (y[0] * y[0] + y[1] * y[1]) / 2.0;
            assert_eq!(*l, expected);
        }
    }

    #[test]
    fn seed_42_golden_loss() {
        let mlp = Mlp::new(toy_arch()).unwrap();
        let ds = DatasetSpec::toy_regression().generate().unwrap();
        let params = mlp.init(&mut SeedRng::from_label(b"pogo/init", 42));
        let loss = mlp.loss(&params, &ds.full()).unwrap();
        assert_eq!(loss.to_bits(), GOLDEN_SEED42_LOSS_BITS, "loss {loss}");
    }

    const GOLDEN_SEED42_LOSS_BITS: u32 = 1060057239;

    #[test]
    fn duplicated_batch_has_same_mean() {
        let mlp = Mlp::new(toy_arch()).unwrap();
        let ds = DatasetSpec::toy_regression().generate().unwrap();
        let params = mlp.init(&mut SeedRng::from_label(b"pogo/init", 1));
        let rows: Vec<usize> = (0..16).collect();
        let doubled: Vec<usize> = rows.iter().flat_map(|&r| [r, r]).collect();
        let a = mlp.loss(&params, &ds.batch(&rows).unwrap()).unwrap();
        let b = mlp.loss(&params, &ds.batch(&doubled).unwrap()).unwrap();
        assert!((a - b).abs() <= 4.0 * f32::EPSILON * a, "{a} vs {b}");
    }

    #[test]
    fn linear_probe_gradient_is_analytic() {
        // f(x) = w·x + b, single sample, MSE with one output: grad_w = 2(f - y) x.
        let arch = Architecture { inputs: 3, hidden: vec![], outputs: 1, loss: LossKind::Mse };
        let mlp = Mlp::new(arch).unwrap();
        let ds = Dataset::new(vec![1.0, -2.0, 0.5], 3, vec![4.0], 1).unwrap();
        let params = ParamVector::new(vec![0.5, 0.25, 2.0, 1.0], mlp.layout().clone()).unwrap();
        // f = 0.5 - 0.5 + 1.0 + 1.0 = 2.0, residual -2.0
        let g = mlp.gradient(&params, &ds.full()).unwrap();
        assert_eq!(g.values(), &[-4.0, 8.0, -2.0, -4.0]);
    }

    #[test]
    fn repeated_sample_gradient_matches_single() {
        let mlp = Mlp::new(toy_arch()).unwrap();
        let ds = DatasetSpec::toy_regression().generate().unwrap();
        let params = mlp.init(&mut SeedRng::from_label(b"pogo/init", 3));
        let one = mlp.gradient(&params, &ds.batch(&[5]).unwrap()).unwrap();
        let four = mlp.gradient(&params, &ds.batch(&[5, 5, 5, 5]).unwrap()).unwrap();
        for (a, b) in one.values().iter().zip(four.values()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-6), "{a} vs {b}");
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let arch = Architecture { inputs: 2, hidden: vec![4], outputs: 4, loss: LossKind::CrossEntropy };
        let mlp = Mlp::new(arch).unwrap();
        let ds = Dataset::new(vec![1.0, 2.0], 2, vec![0.0, 1.0, 0.0, 0.0], 4).unwrap();
        let params = ParamVector::zeros(mlp.layout().clone());
        let loss = mlp.loss(&params, &ds.full()).unwrap();
        assert!((loss - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_layout_error() {
        let mlp = Mlp::new(toy_arch()).unwrap();
        let ds = Dataset::new(vec![0.0; 3], 3, vec![0.0; 2], 2).unwrap();
        let params = ParamVector::zeros(mlp.layout().clone());
        assert!(matches!(mlp.forward(&params, &ds.full()), Err(ModelError::Layout(_))));
        let wrong = ParamVector::zeros(Layout::flat(mlp.layout().dim()));
        let ok = DatasetSpec::toy_regression().generate().unwrap();
        assert!(matches!(mlp.forward(&wrong, &ok.full()), Err(ModelError::Layout(_))));
    }
}
