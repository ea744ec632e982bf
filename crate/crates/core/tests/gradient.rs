mod oracle;

use pogo_core::model::{Architecture, DatasetSpec, LossKind, Mlp, TaskKind};
use pogo_core::randomness::SeedRng;

#[test]
fn analytic_gradient_matches_finite_differences() {
    let check = oracle::check_gradients();
    assert!(check.probes >= 100, "only {} probes", check.probes);
    assert!(check.failures.is_empty(), "{:#?}", &check.failures[..check.failures.len().min(10)]);
}

#[test]
fn forward_pass_matches_f64_oracle() {
    for (loss, kind) in [(LossKind::Mse, TaskKind::Regression), (LossKind::CrossEntropy, TaskKind::Classification)] {
        let arch = Architecture { inputs: 6, hidden: vec![7, 5], outputs: 3, loss };
        let data = DatasetSpec { kind, samples: 40, features: 6, outputs: 3, seed: 9 }.generate().unwrap();
        let mlp = Mlp::new(arch).unwrap();
        let params = mlp.init(&mut SeedRng::from_label(b"oracle/fwd", 1));
        let rows: Vec<usize> = (0..40).step_by(3).collect();
        assert!(oracle::forward_matches(&mlp, &params, &data, &rows));
    }
}
