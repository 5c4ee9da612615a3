use gatedrag::prober::{
    bce_with_logit, select_layers, train_ensemble, train_prober_on, Condition, LayerProber, ProberEnsemble,
    ProberSample, TrainParams,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_prober(rng: &mut ChaCha8Rng, d: usize, h: usize) -> LayerProber<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    let w1 = (0..h).map(|_| (0..d).map(|_| n.sample(rng)).collect()).collect();
    let b1 = (0..h).map(|_| n.sample(rng)).collect();
    let w2 = (0..h).map(|_| n.sample(rng)).collect();
    LayerProber::from_weights(0, w1, b1, w2, n.sample(rng)).unwrap()
}

/// Loss from scratch, independent of the prober's own code path.
fn reference_loss(params: &[f64], d: usize, h: usize, xs: &[Vec<f64>], ys: &[f64], ws: &[f64]) -> f64 {
    let (w1, rest) = params.split_at(h * d);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(h);
    let mut total = 0.0;
    for ((x, y), w) in xs.iter().zip(ys).zip(ws) {
        let z: f64 = (0..h)
            .map(|j| {
                let a: f64 = (0..d).map(|i| w1[j * d + i] * x[i]).sum::<f64>() + b1[j];
                w2[j] * a.max(0.0)
            })
            .sum::<f64>()
            + b2[0];
        let p = 1.0 / (1.0 + (-z).exp());
        total += w * -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    total / ws.iter().sum::<f64>()
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut configs = 0;
    while configs < 100 {
        let (d, h, n) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..6));
        let p = random_prober(&mut rng, d, h);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        // Skip configurations with a hidden unit near its ReLU kink.
        let near_kink = xs.iter().any(|x| {
            (0..h).any(|j| {
                let a: f64 = (0..d).map(|i| p.w1()[j * d + i] * x[i]).sum::<f64>() + p.b1()[j];
                a.abs() < 1e-2
            })
        });
        if near_kink {
            continue;
        }
        configs += 1;
        let ys: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let ws: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let (loss, grad) = p.loss_and_grad(&refs, &ys, &ws).unwrap();
        let reference = reference_loss(p.params(), d, h, &xs, &ys, &ws);
        assert!((loss - reference).abs() <= 1e-9 * reference.max(1.0), "{loss} vs {reference}");
        let step = 1e-4;
        for k in 0..p.params().len() {
            let mut plus = p.params().to_vec();
            plus[k] += step;
            let mut minus = p.params().to_vec();
            minus[k] -= step;
            let numeric = (reference_loss(&plus, d, h, &xs, &ys, &ws) - reference_loss(&minus, d, h, &xs, &ys, &ws)) / (2.0 * step);
            let scale = grad[k].abs().max(numeric.abs()).max(1e-3);
            assert!((grad[k] - numeric).abs() / scale < 1e-4, "param {k}: {} vs {numeric}", grad[k]);
        }
    }
}

fn blobs(rng: &mut ChaCha8Rng, per_class: usize, d: usize, separation: f64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let n = Normal::new(0.0, 1.0).unwrap();
    let offset = separation / 2.0 / (d as f64).sqrt();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..2 * per_class {
        let positive = i % 2 == 0;
        let sign = if positive { 1.0 } else { -1.0 };
        xs.push((0..d).map(|_| sign * offset + n.sample(rng)).collect());
        ys.push(positive);
    }
    (xs, ys)
}

#[test]
fn learns_separated_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (xs, ys) = blobs(&mut rng, 200, 8, 4.0);
    let params = TrainParams {
        seed: 3,
        ..TrainParams::default()
    };
    let (p, report) = train_prober_on(&xs, &ys, 0, &params).unwrap();
    assert_eq!(report.holdout_size, 40);
    let (tx, ty) = blobs(&mut rng, 1000, 8, 4.0);
    let correct = tx.iter().zip(&ty).filter(|(x, y)| (p.forward(x).unwrap() >= 0.5) == **y).count();
    let acc = correct as f64 / tx.len() as f64;
    assert!(acc >= 0.95, "test accuracy {acc}, report {report:?}");
}

#[test]
fn training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (xs, ys) = blobs(&mut rng, 50, 4, 4.0);
    let params = TrainParams {
        hidden_width: 16,
        max_epochs: 5,
        seed: 9,
        ..TrainParams::default()
    };
    let a = train_prober_on(&xs, &ys, 2, &params).unwrap();
    let b = train_prober_on(&xs, &ys, 2, &params).unwrap();
    assert_eq!(a, b);
}

#[test]
fn full_batch_loss_decreases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (xs, ys) = blobs(&mut rng, 200, 8, 4.0);
    let mut p = LayerProber::<f64>::init(0, 8, 256, &mut rng);
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let targets: Vec<f64> = ys.iter().map(|&y| f64::from(u8::from(y))).collect();
    let weights = vec![1.0; xs.len()];
    let mut velocity = vec![0.0; p.params().len()];
    let mut last = p.loss(&refs, &targets, &weights).unwrap();
    for _ in 0..5 {
        let (_, g) = p.loss_and_grad(&refs, &targets, &weights).unwrap();
        for ((w, v), g) in p.params_mut().iter_mut().zip(&mut velocity).zip(g) {
            *v = 0.9 * *v - 1e-3 * g;
            *w += *v;
        }
        let now = p.loss(&refs, &targets, &weights).unwrap();
        assert!(now < last, "{now} >= {last}");
        last = now;
    }
}

#[test]
fn layer_selection_is_the_last_two_thirds() {
    for l in 3..=48usize {
        let sel = select_layers(l);
        let start = l.div_ceil(3);
        assert_eq!(sel, (start..l).collect::<Vec<_>>());
        assert!(sel.iter().all(|&i| 3 * i >= l));
    }
    assert!(select_layers(1).is_empty());
}

proptest! {
    #[test]
    fn gate_is_mean_of_layer_probabilities(seed in any::<u64>(), l in 3usize..20, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probers: Vec<_> = select_layers(l)
            .into_iter()
            .map(|layer| {
                let p = random_prober(&mut rng, d, 3);
                LayerProber::from_weights(
                    layer,
                    p.w1().chunks(d).map(<[f64]>::to_vec).collect(),
                    p.b1().to_vec(),
                    p.w2().to_vec(),
                    p.b2(),
                )
                .unwrap()
            })
            .collect();
        let ens = ProberEnsemble::new(l, 0.5, probers).unwrap();
        let vectors: Vec<Vec<f32>> = (0..l).map(|_| (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect()).collect();
        let gate = ens.gate_vectors(&vectors).unwrap();
        let mut expected = 0.0;
        for p in &ens.probers {
            let x: Vec<f64> = vectors[p.layer_index()].iter().map(|&v| f64::from(v)).collect();
            expected += p.forward(&x).unwrap();
        }
        expected /= ens.probers.len() as f64;
        prop_assert!((gate.score - expected).abs() <= 1e-12);
        prop_assert_eq!(gate.sufficient, gate.score >= 0.5);
    }

    #[test]
    fn bce_is_nonnegative_and_finite(z in -800.0f64..800.0, y in prop::bool::ANY) {
        let l = bce_with_logit(z, f64::from(u8::from(y)));
        prop_assert!(l.is_finite() && l >= 0.0);
    }
}

#[test]
fn ensemble_training_end_to_end() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = Normal::new(0.0, 1.0).unwrap();
    let samples: Vec<ProberSample> = (0..120)
        .map(|i| {
            let label = u8::from(i % 2 == 0);
            let shift = if label == 1 { 1.5f32 } else { -1.5 };
            ProberSample {
                example_id: format!("e{i}"),
                condition: Condition::NoRetrieval,
                label,
                layer_vectors: (0..4).map(|_| (0..3).map(|_| shift + n.sample(&mut rng) as f32).collect()).collect(),
            }
        })
        .collect();
    let params = TrainParams {
        hidden_width: 8,
        learning_rate: 1e-2,
        seed: 5,
        ..TrainParams::default()
    };
    let (ens, reports) = train_ensemble(&samples, &params, 0.5).unwrap();
    assert_eq!(ens.selected_layers, vec![2, 3]);
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r.holdout_accuracy >= 0.9), "{reports:?}");
    let (again, _) = train_ensemble(&samples, &params, 0.5).unwrap();
    assert_eq!(ens, again);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ens.json");
    ens.save(&path).unwrap();
    assert_eq!(ProberEnsemble::<f64>::load(&path).unwrap(), ens);
}

#[test]
fn single_precision_probers_work() {
    let p = LayerProber::<f32>::from_weights(0, vec![vec![1.0, 0.0]], vec![0.0], vec![2.0], -1.0).unwrap();
    let v = p.forward(&[1.0, 5.0]).unwrap();
    assert!((v - 0.731_058_6).abs() < 1e-6);
}
