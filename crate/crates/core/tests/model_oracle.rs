//! Recomputes every loss term with plain loops over the stored parameters
//! and compares against the tape-based forward pass.

use orthofair::autodiff::{Tape, Tensor};
use orthofair::model::{
    AblationVariant, Batch, FairModel, LossWeights, ModelConfig, Noise, TrunkGuard,
};
use orthofair::nn::{ActivationKind, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn layer(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let w = &store.by_name(&format!("{name}.weight")).unwrap().value;
    let b = &store.by_name(&format!("{name}.bias")).unwrap().value;
    let (k, n) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..n)
                .map(|j| b.data()[j] + (0..k).map(|i| row[i] * w.data()[i * n + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn tanh(x: Mat) -> Mat {
    x.into_iter().map(|r| r.into_iter().map(f64::tanh).collect()).collect()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn sample(mu: &Mat, ls: &Mat, eps: &Tensor) -> Mat {
    let d = mu[0].len();
    mu.iter()
        .zip(ls)
        .enumerate()
        .map(|(i, (m, l))| (0..d).map(|j| m[j] + l[j].exp() * eps.data()[i * d + j]).collect())
        .collect()
}

fn kl(mu: &Mat, ls: &Mat, prior: &[f64]) -> f64 {
    let per_row: Vec<f64> = mu
        .iter()
        .zip(ls)
        .map(|(m, l)| {
            (0..m.len())
                .map(|j| 0.5 * ((2.0 * l[j]).exp() + (m[j] - prior[j]).powi(2) - 1.0 - 2.0 * l[j]))
                .sum()
        })
        .collect();
    per_row.iter().sum::<f64>() / per_row.len() as f64
}

fn ce(logits: &Mat, labels: &[usize]) -> f64 {
    -logits
        .iter()
        .zip(labels)
        .map(|(r, &y)| log_softmax(r)[y])
        .sum::<f64>()
        / labels.len() as f64
}

fn sensitive_disc(store: &ParamStore, z: &Mat) -> Mat {
    let h = tanh(layer(store, "sensitive_disc.0", z));
    let h = tanh(layer(store, "sensitive_disc.1", &h));
    layer(store, "sensitive_disc.2", &h)
}

fn clamp(x: Mat) -> Mat {
    x.into_iter().map(|r| r.into_iter().map(|v| v.clamp(-10.0, 10.0)).collect()).collect()
}

#[test]
fn tape_losses_match_straight_line_reimplementation() {
    let config = ModelConfig {
        input_dim: 3,
        code_dim: 2,
        trunk_hidden: vec![5],
        sensitive_hidden: vec![4, 3],
        target_classes: 2,
        sensitive_classes: 3,
        activation: ActivationKind::Tanh,
        variant: AblationVariant::Full,
        ..ModelConfig::default()
    };
    let model = FairModel::new(config.clone(), 2024).unwrap();
    let rows: Mat = vec![
        vec![0.5, -1.0, 0.2],
        vec![1.5, 0.3, -0.7],
        vec![-0.4, 0.8, 1.1],
        vec![0.0, -0.2, -1.3],
    ];
    let batch = Batch {
        x: Tensor::from_rows(&rows).unwrap(),
        y: vec![0, 1, 1, 0],
        s: vec![2, 0, 1, 2],
    };
    let noise = Noise::draw(&mut ChaCha8Rng::seed_from_u64(5), 4, &config);
    let weights = LossWeights {
        entropy: 0.35,
        orth_disent: 1.7,
    };

    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let got = model
        .forward_losses(&mut tape, &vars, &batch, weights, &noise, TrunkGuard::StopGradient)
        .unwrap()
        .breakdown;

    let p = model.params();
    let h = tanh(layer(p, "trunk.0", &rows));
    let mu_t = layer(p, "target_enc.mean", &h);
    let ls_t = clamp(layer(p, "target_enc.log_std", &h));
    let mu_s = layer(p, "sensitive_enc.mean", &h);
    let ls_s = clamp(layer(p, "sensitive_enc.log_std", &h));
    let z_t = sample(&mu_t, &ls_t, &noise.target[0]);
    let z_s = sample(&mu_s, &ls_s, &noise.sensitive[0]);

    let l_t = ce(&layer(p, "target_disc.0", &z_t), &batch.y);
    let l_s = ce(&sensitive_disc(p, &z_s), &batch.s);
    let l_e = sensitive_disc(p, &z_t)
        .iter()
        .map(|r| log_softmax(r).iter().map(|lp| lp.exp() * lp).sum::<f64>())
        .sum::<f64>()
        / 4.0;
    let l_zt = kl(&mu_t, &ls_t, &[1.0, 0.0]);
    let l_zs = kl(&mu_s, &ls_s, &[0.0, 1.0]);
    let j = l_t + l_s + 0.35 * l_e + 1.7 * (l_zt + l_zs);

    for (name, a, b) in [
        ("L_T", got.l_t, l_t),
        ("L_S", got.l_s, l_s),
        ("L_E", got.l_e, l_e),
        ("L_zT", got.l_zt, l_zt),
        ("L_zS", got.l_zs, l_zs),
        ("J", got.j, j),
    ] {
        assert!((a - b).abs() <= 1e-10, "{name}: tape {a} vs oracle {b}");
    }
    assert!(got.l_e < 0.0 && got.l_e >= -(3f64).ln() - 1e-12);
}
