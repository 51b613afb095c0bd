use guide_core::classifier::mlp::Mlp;
use guide_core::classifier::{
    self, cross_entropy_loss, loss_and_grad, softmax, train, train_observed, Bundle, EncoderModel, Grads, HeadModel, Mode,
    TrainConfig, Workspace,
};
use guide_core::pseudo_domain::{kmeans_fit, ClusterConfig};
use guide_core::store::{self, SynthSpec, TrainingView};
use guide_core::transform::TransformKind;
use guide_core::{metrics, seed, Matrix};
use proptest::prelude::*;
use rand::Rng;

fn loss_only(enc: &EncoderModel, head: &HeadModel, x: &[f64], pp: Option<&[f64]>, y: usize) -> f64 {
    cross_entropy_loss(&classifier::forward(enc, head, x, pp).unwrap(), y)
}

/// Central differences over every parameter of encoder and head.
fn check_gradients(enc: &EncoderModel, head: &HeadModel, x: &[f64], pp: Option<&[f64]>, y: usize) -> Result<(), String> {
    let h = 1e-5;
    let mut grads = Grads::zeros_like(enc, head);
    loss_and_grad(enc, head, x, pp, y, &mut grads, 1.0, &mut Workspace::default()).unwrap();

    let compare = |analytic: f64, numeric: f64, what: &str| -> Result<(), String> {
        let scale = analytic.abs().max(numeric.abs());
        let ok = if scale < 1e-7 { (analytic - numeric).abs() < 1e-9 } else { (analytic - numeric).abs() / scale < 1e-4 };
        if ok { Ok(()) } else { Err(format!("{what}: analytic {analytic} numeric {numeric}")) }
    };

    let mut head_p = head.clone();
    let n_tensors = head_p.net.tensors_mut().len();
    for t in 0..n_tensors {
        for j in 0..head_p.net.tensors_mut()[t].len() {
            let orig = head_p.net.tensors_mut()[t][j];
            head_p.net.tensors_mut()[t][j] = orig + h;
            let up = loss_only(enc, &head_p, x, pp, y);
            head_p.net.tensors_mut()[t][j] = orig - h;
            let down = loss_only(enc, &head_p, x, pp, y);
            head_p.net.tensors_mut()[t][j] = orig;
            compare(grads.head.tensors()[t][j], (up - down) / (2.0 * h), &format!("head tensor {t}[{j}]"))?;
        }
    }
    if let (Some(_), Some(eg)) = (enc.net(), grads.encoder.as_ref()) {
        let mut enc_p = enc.clone();
        let n_tensors = enc_p.net_mut().unwrap().tensors_mut().len();
        for t in 0..n_tensors {
            for j in 0..enc_p.net_mut().unwrap().tensors_mut()[t].len() {
                let orig = enc_p.net_mut().unwrap().tensors_mut()[t][j];
                enc_p.net_mut().unwrap().tensors_mut()[t][j] = orig + h;
                let up = loss_only(&enc_p, head, x, pp, y);
                enc_p.net_mut().unwrap().tensors_mut()[t][j] = orig - h;
                let down = loss_only(&enc_p, head, x, pp, y);
                enc_p.net_mut().unwrap().tensors_mut()[t][j] = orig;
                compare(eg.tensors()[t][j], (up - down) / (2.0 * h), &format!("encoder tensor {t}[{j}]"))?;
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn analytic_gradients_match_finite_differences(
        d_in in 1usize..=8,
        hidden in prop::collection::vec(1usize..=6, 0..=2),
        phi in 1usize..=5,
        aug in prop::option::of(1usize..=3),
        classes in 2usize..=5,
        s in any::<u64>(),
    ) {
        let mut rng = seed::rng(s);
        let widths: Vec<usize> = std::iter::once(d_in).chain(hidden).chain([phi]).collect();
        let mut enc = EncoderModel::mlp(&widths, &mut rng);
        let mut head = HeadModel::new(phi, aug, classes, None, &mut rng);
        // Nonzero biases keep pre-activations off the ReLU kink.
        for net in [enc.net_mut().unwrap(), &mut head.net] {
            for (t, tensor) in net.tensors_mut().into_iter().enumerate() {
                if t % 2 == 1 {
                    tensor.iter_mut().for_each(|b| *b = rng.random::<f64>() * 0.6 + 0.2);
                }
            }
        }
        let x: Vec<f64> = (0..d_in).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let pp: Option<Vec<f64>> = aug.map(|a| (0..a).map(|_| rng.random::<f64>()).collect());
        let y = rng.random_range(0..classes);
        prop_assert!(check_gradients(&enc, &head, &x, pp.as_deref(), y).is_ok(), "{:?}", check_gradients(&enc, &head, &x, pp.as_deref(), y));
    }

    #[test]
    fn softmax_normalizes(logits in prop::collection::vec(-500.0f64..500.0, 1..10), y in 0usize..10) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let y = y % logits.len();
        prop_assert!(cross_entropy_loss(&logits, y) >= 0.0);
    }
}

#[test]
fn hidden_head_gradients_match() {
    let mut rng = seed::rng(9);
    let enc = EncoderModel::mlp(&[4, 5, 3], &mut rng);
    let head = HeadModel::new(3, Some(2), 3, Some(4), &mut rng);
    check_gradients(&enc, &head, &[0.3, -0.2, 0.9, 0.1], Some(&[0.5, -0.5]), 1).unwrap();
}

fn toy_separable(n: usize, seed_: u64) -> (Matrix, Matrix, Vec<usize>) {
    let mut rng = seed::rng(seed_);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = Matrix::from_fn(n, 2, |i, j| {
        let sign = if labels[i] == 1 { 1.0 } else { -1.0 };
        if j == 0 { sign * (0.5 + rng.random::<f64>()) } else { rng.random::<f64>() * 2.0 - 1.0 }
    });
    let psi = Matrix::from_fn(n, 1, |i, _| (i % 3) as f64 * 4.0);
    (x, psi, labels)
}

fn view<'a>(x: &'a Matrix, psi: &'a Matrix, y: &'a [usize], c: usize) -> TrainingView<'a> {
    TrainingView { inputs: x, psi, class_labels: y, n_classes: c }
}

#[test]
fn separable_toy_reaches_perfect_training_accuracy() {
    let (x, psi, y) = toy_separable(60, 1);
    let clusters = kmeans_fit(&psi, &ClusterConfig::new(3, 0)).unwrap();
    for mode in [Mode::Erm, Mode::Guide] {
        let cfg = TrainConfig { identity_encoder: true, steps: 500, learning_rate: 0.1, mode, ..TrainConfig::default() };
        let out = train(view(&x, &psi, &y, 2), Some(&clusters), &cfg).unwrap();
        let pred = out.model.predict_rows(&x, &psi).unwrap();
        assert_eq!(metrics::accuracy(&pred, &y).unwrap(), 1.0, "{mode}");
    }
}

#[test]
fn single_step_run_has_one_refit() {
    let (x, psi, y) = toy_separable(20, 2);
    let clusters = kmeans_fit(&psi, &ClusterConfig::new(3, 0)).unwrap();
    let cfg = TrainConfig { steps: 1, ..TrainConfig::default() };
    let out = train(view(&x, &psi, &y, 2), Some(&clusters), &cfg).unwrap();
    assert_eq!(out.history.refit_steps, vec![0]);
    assert_eq!(out.history.losses.len(), 1);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let (x, psi, y) = toy_separable(16, 3);
    let clusters = kmeans_fit(&psi, &ClusterConfig::new(3, 0)).unwrap();
    let base = TrainConfig { learning_rate: 0.0, batch_size: 16, steps: 20, ..TrainConfig::default() };
    let a = train(view(&x, &psi, &y, 2), Some(&clusters), &TrainConfig { steps: 1, ..base.clone() }).unwrap();
    let b = train(view(&x, &psi, &y, 2), Some(&clusters), &base).unwrap();
    assert_eq!(a.model.encoder, b.model.encoder);
    assert_eq!(a.model.head, b.model.head);
    // The full batch is visited in a different shuffled order each step, so
    // the mean differs only by summation rounding.
    let l0 = b.history.losses[0];
    assert!(b.history.losses.iter().all(|&l| (l - l0).abs() <= 1e-12 * l0));
}

#[test]
fn training_is_bit_deterministic() {
    let (x, psi, y) = toy_separable(40, 4);
    let clusters = kmeans_fit(&psi, &ClusterConfig::new(3, 0)).unwrap();
    let cfg = TrainConfig { steps: 100, seed: 11, ..TrainConfig::default() };
    let a = train(view(&x, &psi, &y, 2), Some(&clusters), &cfg).unwrap();
    let b = train(view(&x, &psi, &y, 2), Some(&clusters), &cfg).unwrap();
    assert_eq!(a, b);
    let c = train(view(&x, &psi, &y, 2), Some(&clusters), &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.model.head, c.model.head);
}

#[test]
fn refit_reproduces_cluster_means_at_zero_ridge() {
    let (x, psi, y) = toy_separable(30, 5);
    let clusters = kmeans_fit(&psi, &ClusterConfig::new(3, 0)).unwrap();
    let cfg = TrainConfig { steps: 40, ridge: 0.0, ..TrainConfig::default() };
    let mut refits = 0;
    train_observed(view(&x, &psi, &y, 2), Some(&clusters), &cfg, &mut |ev| {
        refits += 1;
        for k in 0..clusters.k() {
            let got = ev.transform.apply(clusters.centroid(k)).unwrap();
            for (a, b) in got.iter().zip(ev.targets.means.row(k)) {
                assert!((a - b).abs() < 1e-8, "step {} cluster {k}: {a} vs {b}", ev.step);
            }
        }
    })
    .unwrap();
    assert_eq!(refits, guide_core::classifier::log_schedule(40, 2.0).len());
}

#[test]
fn inference_matches_training_time_forward() {
    let (x, psi, y) = toy_separable(30, 6);
    let clusters = kmeans_fit(&psi, &ClusterConfig::new(3, 0)).unwrap();
    let cfg = TrainConfig { steps: 50, ..TrainConfig::default() };
    let out = train(view(&x, &psi, &y, 2), Some(&clusters), &cfg).unwrap();
    let t = out.transform().unwrap();
    for i in 0..x.rows() {
        let pp = t.apply(clusters.centroid(clusters.assignments()[i])).unwrap();
        let train_path = classifier::forward(out.encoder(), out.head(), x.row(i), Some(&pp)).unwrap();
        assert_eq!(out.model.logits(x.row(i), psi.row(i)).unwrap(), train_path);
        let (label, probs) = classifier::predict(out.encoder(), out.head(), t, &clusters, x.row(i), psi.row(i)).unwrap();
        assert_eq!(label, classifier::argmax(&train_path));
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_head_predicts_first_class_uniformly() {
    let enc = EncoderModel::Identity { dim: 2 };
    let head = HeadModel::zeros(2, None, 3);
    let logits = classifier::forward(&enc, &head, &[1.0, -4.0], None).unwrap();
    assert_eq!(logits, vec![0.0; 3]);
    assert_eq!(classifier::argmax(&logits), 0);
    assert!(classifier::forward(&enc, &head, &[1.0, -4.0], Some(&[1.0])).is_err());
}

#[test]
fn zero_noise_seen_domains_are_classified_exactly() {
    let spec = SynthSpec { noise_sigma: 0.0, samples_per_cell: 20, ..SynthSpec::default() };
    let ds = store::generate_synthetic(&spec).unwrap();
    let clusters = kmeans_fit(ds.psi(), &ClusterConfig::new(spec.n_domains, 0)).unwrap();
    let cfg = TrainConfig { steps: 1500, learning_rate: 0.05, ..TrainConfig::default() };
    let out = train(ds.training_view(), Some(&clusters), &cfg).unwrap();
    let pred = out.model.predict_rows(ds.inputs(), ds.psi()).unwrap();
    assert_eq!(metrics::accuracy(&pred, ds.class_labels()).unwrap(), 1.0);
}

#[test]
fn bundle_file_round_trip_predicts_identically() {
    let (x, psi, y) = toy_separable(30, 7);
    let clusters = kmeans_fit(&psi, &ClusterConfig::new(3, 0)).unwrap();
    for transform in [TransformKind::Rbf, TransformKind::Linear] {
        let cfg = TrainConfig { steps: 30, transform, ..TrainConfig::default() };
        let out = train(view(&x, &psi, &y, 2), Some(&clusters), &cfg).unwrap();
        let mut bundle = Bundle::new(out.model.clone());
        bundle.refit_steps = out.history.refit_steps.clone();
        bundle.config = cfg.to_config();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bundle");
        bundle.save(&p).unwrap();
        let back = Bundle::load(&p).unwrap();
        assert_eq!(back, bundle);
        assert_eq!(back.model.predict_rows(&x, &psi).unwrap(), out.model.predict_rows(&x, &psi).unwrap());
    }
}

#[test]
fn mlp_from_layers_rejects_inconsistent_widths() {
    let mut rng = seed::rng(0);
    let a = Mlp::new(&[3, 4], &mut rng);
    let b = Mlp::new(&[5, 2], &mut rng);
    let layers = vec![a.layers()[0].clone(), b.layers()[0].clone()];
    assert!(Mlp::from_layers(layers).is_err());
}
