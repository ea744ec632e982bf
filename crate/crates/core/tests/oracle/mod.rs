//! Independent reference implementations used as test oracles. Nothing here
//! calls into the code under test except to read inputs.

#![allow(dead_code)]

use pogo_core::model::{Architecture, Dataset, DatasetSpec, LossKind, Mlp, ParamVector};
use pogo_core::randomness::SeedRng;

/// Mean loss of an MLP evaluated entirely in f64: tanh hidden layers, linear
/// output, squared error averaged over outputs or softmax cross-entropy.
pub fn mlp_loss_f64(arch: &Architecture, w: &[f64], data: &Dataset, rows: &[usize]) -> f64 {
    let mut widths = vec![arch.inputs];
    widths.extend(&arch.hidden);
    widths.push(arch.outputs);
    let mut total = 0.0;
    for &r in rows {
        let mut a: Vec<f64> = data.input(r).iter().map(|&v| v as f64).collect();
        let mut off = 0;
        for k in 0..widths.len() - 1 {
            let (n_in, n_out) = (widths[k], widths[k + 1]);
            let wt = &w[off..off + n_in * n_out];
            let b = &w[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let last = k == widths.len() - 2;
            a = (0..n_out)
                .map(|j| {
                    let z = b[j] + (0..n_in).map(|i| wt[j * n_in + i] * a[i]).sum::<f64>();
                    if last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
        }
        let y: Vec<f64> = data.target(r).iter().map(|&v| v as f64).collect();
        total += match arch.loss {
            LossKind::Mse => a.iter().zip(&y).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / a.len() as f64,
            LossKind::CrossEntropy => {
                let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + a.iter().map(|o| (o - m).exp()).sum::<f64>().ln();
                a.iter().zip(&y).map(|(o, t)| t * (lse - o)).sum::<f64>()
            }
        };
    }
    total / rows.len() as f64
}

pub struct GradientCheck {
    pub probes: usize,
    pub failures: Vec<String>,
    pub worst_ratio: f64,
}

pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;

/// Compare the analytic gradient against central differences of the f64
/// oracle at every coordinate, for a handful of architectures and both
/// losses. An entry passes if `|g - fd| <= max(REL_TOL * |fd|, ABS_FLOOR)`.
pub fn check_gradients() -> GradientCheck {
    use pogo_core::model::TaskKind;
    let cases = [
        (Architecture { inputs: 4, hidden: vec![5], outputs: 3, loss: LossKind::Mse }, TaskKind::Regression, 1u64),
        (Architecture { inputs: 3, hidden: vec![4, 4], outputs: 3, loss: LossKind::CrossEntropy }, TaskKind::Classification, 2),
        (Architecture { inputs: 8, hidden: vec![16], outputs: 2, loss: LossKind::Mse }, TaskKind::Regression, 3),
        (Architecture { inputs: 5, hidden: vec![], outputs: 4, loss: LossKind::CrossEntropy }, TaskKind::Classification, 4),
    ];
    let mut out = GradientCheck { probes: 0, failures: Vec::new(), worst_ratio: 0.0 };
    for (arch, kind, seed) in cases {
        let spec = DatasetSpec { kind, samples: 24, features: arch.inputs, outputs: arch.outputs, seed };
        let data = spec.generate().expect("valid dataset spec");
        let rows: Vec<usize> = (0..16).collect();
        let batch = data.batch(&rows).expect("rows in range");
        let mlp = Mlp::new(arch.clone()).expect("valid architecture");
        let mut params = mlp.init(&mut SeedRng::from_label(b"oracle/init", seed));
        // Non-zero biases so every term of the backward pass is exercised.
        let mut rng = SeedRng::from_label(b"oracle/bias", seed);
        let values: Vec<f32> = params.values().iter().map(|&v| v + 0.1 * (rng.unit_f32() - 0.5)).collect();
        params = params.with_values(values).expect("finite values");
        let (_, grad) = mlp.loss_and_gradient(&params, &batch).expect("gradient");
        let w: Vec<f64> = params.values().iter().map(|&v| v as f64).collect();
        for i in 0..w.len() {
            let h = 1e-5 * w[i].abs().max(1.0);
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (mlp_loss_f64(&arch, &wp, &data, &rows) - mlp_loss_f64(&arch, &wm, &data, &rows)) / (2.0 * h);
            let g = grad.values()[i] as f64;
            let allowed = (REL_TOL * fd.abs()).max(ABS_FLOOR);
            let err = (g - fd).abs();
            out.probes += 1;
            out.worst_ratio = out.worst_ratio.max(err / allowed);
            if err > allowed {
                out.failures.push(format!("{arch:?} coordinate {i}: analytic {g}, finite difference {fd}"));
            }
        }
    }
    out
}

/// The f32 forward pass agrees with the f64 oracle to single precision.
pub fn forward_matches(mlp: &Mlp, params: &ParamVector, data: &Dataset, rows: &[usize]) -> bool {
    let w: Vec<f64> = params.values().iter().map(|&v| v as f64).collect();
    let oracle = mlp_loss_f64(mlp.architecture(), &w, data, rows);
    let got = mlp.loss(params, &data.batch(rows).unwrap()).unwrap() as f64;
    (got - oracle).abs() <= 1e-5 * oracle.abs().max(1.0)
}

/// Probability that at least one of `m` independent uniform challenges hits
/// one of `k` tampered leaves out of `l`.
pub fn detection_probability(k: usize, l: usize, m: usize) -> f64 {
    1.0 - (1.0 - k as f64 / l as f64).powi(m as i32)
}

/// Price after `k` blocks of maximal upward pressure at `step` per block.
pub fn compounded_price(p0: f64, step: f64, k: u32) -> f64 {
    p0 * (1.0 + step).powi(k as i32)
}
