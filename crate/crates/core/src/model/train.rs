use serde::{Deserialize, Serialize};

use super::{Batch, Dataset, Mlp, ModelError, ParamVector};
use crate::randomness::{pick_indices, Seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPolicy {
    /// Learning rate.
    pub eta: f32,
    /// Required full-precision loss decrement per block.
    pub epsilon: f32,
    pub batch_size: usize,
    /// Quantized-loss decrement required for fine-tuning tasks.
    pub epsilon_fine: f32,
}

impl Default for TrainPolicy {
    fn default() -> Self {
        Self { eta: 0.05, epsilon: 1e-3, batch_size: 32, epsilon_fine: 5e-4 }
    }
}

impl TrainPolicy {
    pub fn validate(&self, dataset_len: usize) -> Result<(), ModelError> {
        let positive = |v: f32| v.is_finite() && v > 0.0;
        if !positive(self.eta) || !positive(self.epsilon) || !positive(self.epsilon_fine) {
            return Err(ModelError::Policy("eta, epsilon and epsilon_fine must be positive".into()));
        }
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return Err(ModelError::Policy(format!(
                "batch size {} outside 1..={dataset_len}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// `params − eta · ∇L(params; batch)`. The input is left untouched.
pub fn sgd_step(mlp: &Mlp, params: &ParamVector, batch: &Batch<'_>, policy: &TrainPolicy) -> Result<ParamVector, ModelError> {
    if !(policy.eta.is_finite() && policy.eta >= 0.0) {
        return Err(ModelError::Policy("eta must be finite and non-negative".into()));
    }
    let grad = mlp.gradient(params, batch)?;
    let eta = policy.eta;
    let next = params
        .values()
        .iter()
        .zip(grad.values())
        .map(|(p, g)| p - eta * g)
        .collect();
    params.with_values(next)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub steps: usize,
    /// Full-dataset loss before and after training.
    pub loss_before: f32,
    pub loss_after: f32,
}

/// SGD on seeded mini-batches until the full-dataset loss drops below
/// `start − epsilon` and `accept` also agrees, or `max_steps` is exhausted.
///
/// Step `s` draws its batch from `seed.child("batch", s)`, so a run is a pure
/// function of its inputs.
pub fn train_until<F>(
    mlp: &Mlp,
    params: &ParamVector,
    dataset: &Dataset,
    policy: &TrainPolicy,
    max_steps: usize,
    seed: &Seed,
    mut accept: F,
) -> Result<TrainOutcome, ModelError>
where
    F: FnMut(&ParamVector, f32) -> bool,
{
    policy.validate(dataset.len())?;
    if max_steps == 0 {
        return Err(ModelError::Policy("max_steps must be at least 1".into()));
    }
    let full = dataset.full();
    let start = mlp.loss(params, &full)?;
    let target = start - policy.epsilon;
    let mut current = params.clone();
    let mut best = start;
    for step in 0..max_steps {
        let rows = pick_indices(&seed.child("batch", step as u64), dataset.len(), policy.batch_size)
            .expect("batch size validated against dataset");
        let batch = dataset.batch(&rows)?;
        current = sgd_step(mlp, &current, &batch, policy)?;
        let loss = mlp.loss(&current, &full)?;
        best = best.min(loss);
        if loss < target && accept(&current, loss) {
            return Ok(TrainOutcome { params: current, steps: step + 1, loss_before: start, loss_after: loss });
        }
    }
    Err(ModelError::NoProgress { steps: max_steps, start, best, epsilon: policy.epsilon })
}

pub fn train_until_decrement(
    mlp: &Mlp,
    params: &ParamVector,
    dataset: &Dataset,
    policy: &TrainPolicy,
    max_steps: usize,
    seed: &Seed,
) -> Result<TrainOutcome, ModelError> {
    train_until(mlp, params, dataset, policy, max_steps, seed, |_, _| true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, DatasetSpec, LossKind};
    use crate::randomness::{derive_seed, Purpose, SeedRng};
    use crate::Hash256;

    fn setup() -> (Mlp, Dataset, ParamVector) {
        let mlp = Mlp::new(Architecture { inputs: 8, hidden: vec![32, 32], outputs: 2, loss: LossKind::Mse }).unwrap();
        let ds = DatasetSpec::toy_regression().generate().unwrap();
        let params = mlp.init(&mut SeedRng::from_label(b"pogo/init", 42));
        (mlp, ds, params)
    }

    fn seed() -> Seed {
        derive_seed(&Hash256::ZERO, 0, Purpose::MiniBatch)
    }

    #[test]
    fn zero_eta_is_identity() {
        let (mlp, ds, params) = setup();
        let policy = TrainPolicy { eta: 0.0, ..TrainPolicy::default() };
        let out = sgd_step(&mlp, &params, &ds.full(), &policy).unwrap();
        assert_eq!(out, params);
    }

    #[test]
    fn one_dimensional_update_matches_hand_computation() {
        let mlp = Mlp::new(Architecture { inputs: 1, hidden: vec![], outputs: 1, loss: LossKind::Mse }).unwrap();
        let ds = Dataset::new(vec![2.0], 1, vec![1.0], 1).unwrap();
        let params = ParamVector::new(vec![1.0, 0.0], mlp.layout().clone()).unwrap();
        // f = 2, residual 1, grads: w = 2·1·2 = 4, b = 2.
        let policy = TrainPolicy { eta: 0.125, ..TrainPolicy::default() };
        let out = sgd_step(&mlp, &params, &ds.full(), &policy).unwrap();
        assert_eq!(out.values(), &[0.5, -0.25]);
        assert_eq!(params.values(), &[1.0, 0.0]);
    }

    #[test]
    fn small_step_decreases_batch_loss() {
        let (mlp, ds, params) = setup();
        let batch = ds.batch(&(0..32).collect::<Vec<_>>()).unwrap();
        let policy = TrainPolicy { eta: 0.01, ..TrainPolicy::default() };
        let before = mlp.loss(&params, &batch).unwrap();
        let after = mlp.loss(&sgd_step(&mlp, &params, &batch, &policy).unwrap(), &batch).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn impossible_decrement_fails() {
        let (mlp, ds, params) = setup();
        let start = mlp.loss(&params, &ds.full()).unwrap();
        let policy = TrainPolicy { epsilon: start + 1.0, ..TrainPolicy::default() };
        let err = train_until_decrement(&mlp, &params, &ds, &policy, 5, &seed()).unwrap_err();
        assert!(matches!(err, ModelError::NoProgress { steps: 5, .. }));
    }

    #[test]
    fn converged_params_cannot_progress() {
        // Zero targets and zero weights: zero loss, zero gradient.
        let mlp = Mlp::new(Architecture { inputs: 2, hidden: vec![3], outputs: 1, loss: LossKind::Mse }).unwrap();
        let ds = Dataset::new(vec![1.0, 2.0, 3.0, 4.0], 2, vec![0.0, 0.0], 1).unwrap();
        let params = ParamVector::zeros(mlp.layout().clone());
        let policy = TrainPolicy { batch_size: 2, ..TrainPolicy::default() };
        assert!(matches!(
            train_until_decrement(&mlp, &params, &ds, &policy, 10, &seed()),
            Err(ModelError::NoProgress { .. })
        ));
    }

    #[test]
    fn toy_task_succeeds_within_pinned_steps() {
        let (mlp, ds, params) = setup();
        let out = train_until_decrement(&mlp, &params, &ds, &TrainPolicy::default(), 200, &seed()).unwrap();
        assert!(out.loss_after < out.loss_before - TrainPolicy::default().epsilon);
        assert_eq!(out.steps, PINNED_TOY_STEPS);
    }

    const PINNED_TOY_STEPS: usize = 1;

    #[test]
    fn policy_validation() {
        let p = TrainPolicy::default();
        assert!(p.validate(32).is_ok());
        assert!(TrainPolicy { batch_size: 11, ..p.clone() }.validate(10).is_err());
        assert!(TrainPolicy { batch_size: 0, ..p.clone() }.validate(10).is_err());
        assert!(TrainPolicy { eta: 0.0, ..p.clone() }.validate(10).is_err());
        assert!(TrainPolicy { epsilon_fine: -1.0, ..p }.validate(10).is_err());
    }
}
