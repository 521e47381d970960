use icebench::model::linear::ShuffledBatches;
use icebench::model::{fit_softmax, io, Batch, BatchSource, SoftmaxLinear, TrainConfig};
use icebench::rng::StreamKey;
use icebench::Result;
use proptest::prelude::*;
use rand::Rng;

fn random_instance(seed: u64) -> (SoftmaxLinear, Batch) {
    let mut rng = StreamKey::new(seed).rng();
    let (k, d, n) = (
        rng.random_range(2..7),
        rng.random_range(1..9),
        rng.random_range(1..20),
    );
    let mut m = SoftmaxLinear::zeros(k, d);
    m.weights
        .iter_mut()
        .chain(m.bias.iter_mut())
        .for_each(|w| *w = rng.random_range(-2.0..2.0));
    let mut b = Batch::new(d);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        b.push(&x, rng.random_range(0..k as u8));
    }
    (m, b)
}

fn max_relative_gradient_error(m: &SoftmaxLinear, b: &Batch) -> f64 {
    let (_, g) = m.loss_and_grad(b);
    let h = 1e-3;
    let mut worst = 0.0f64;
    let n_w = m.weights.len();
    for i in 0..n_w + m.bias.len() {
        let at = |off: f64| {
            let mut p = m.clone();
            if i < n_w {
                p.weights[i] += off;
            } else {
                p.bias[i - n_w] += off;
            }
            p.loss(b)
        };
        let analytic = if i < n_w {
            g.weights[i]
        } else {
            g.bias[i - n_w]
        };
        // fourth-order central stencil
        let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

proptest! {
    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>()) {
        let (m, b) = random_instance(seed);
        prop_assert!(max_relative_gradient_error(&m, &b) < 1e-4);
    }

    #[test]
    fn model_file_round_trips(seed in any::<u64>()) {
        let (m, _) = random_instance(seed);
        let bytes = io::encode(&m);
        prop_assert_eq!(io::decode(&bytes).unwrap(), m);
    }

    #[test]
    fn truncated_model_file_is_rejected(seed in any::<u64>(), cut in 1usize..64) {
        let (m, _) = random_instance(seed);
        let bytes = io::encode(&m);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(io::decode(&bytes[..keep]).is_err());
    }
}

/// Trains towards class 0 while validation wants class 1, so validation
/// loss rises every epoch.
struct Opposed(Batch);

impl BatchSource for Opposed {
    fn steps_per_epoch(&self) -> usize {
        1
    }
    fn batch(&mut self, _: usize, _: usize) -> Result<Option<Batch>> {
        Ok(Some(self.0.clone()))
    }
}

fn opposed() -> (Opposed, Batch) {
    let mut train = Batch::new(1);
    train.push(&[1.0], 0);
    let mut val = Batch::new(1);
    val.push(&[1.0], 1);
    (Opposed(train), val)
}

#[test]
fn worsening_validation_stops_after_patience_plus_one() {
    for patience in [1, 3, 7] {
        let (mut src, val) = opposed();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            early_stop_patience: patience,
            max_epochs: 100,
            ..TrainConfig::default()
        };
        let (model, log) = fit_softmax(2, 1, &[0, 1], &mut src, &val, &cfg).unwrap();
        assert_eq!(log.epochs.len(), patience + 1);
        assert!(log.stopped_early);
        assert!(log.epochs.windows(2).all(|w| w[1].val_loss > w[0].val_loss));
        assert_eq!(log.best_epoch, 1);
        assert_eq!(model.loss(&val), log.best_val_loss().unwrap());
    }
}

#[test]
fn returned_state_attains_minimum_logged_loss() {
    let mut rng = StreamKey::new(4).rng();
    let mut data = Batch::new(2);
    for _ in 0..200 {
        let y = rng.random_range(0..3u8);
        let x = [
            y as f64 + rng.random_range(-0.8..0.8),
            rng.random_range(-1.0..1.0),
        ];
        data.push(&x, y);
    }
    let val = data.clone();
    let cfg = TrainConfig {
        learning_rate: 0.5,
        max_epochs: 60,
        early_stop_patience: 5,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let mut src = ShuffledBatches::new(&data, cfg.batch_size, 1);
    let (model, log) = fit_softmax(3, 2, &[0, 1, 2], &mut src, &val, &cfg).unwrap();
    let min = log
        .epochs
        .iter()
        .map(|e| e.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(model.loss(&val), min);
    assert_eq!(log.epochs[log.best_epoch - 1].val_loss, min);
}

#[test]
fn single_class_returns_constant_predictor() {
    let (mut src, val) = opposed();
    let (model, log) = fit_softmax(6, 1, &[3], &mut src, &val, &TrainConfig::default()).unwrap();
    assert!(log.warning.is_some());
    assert_eq!(model.predict(&[123.0]), 3);
}

#[test]
fn diverging_training_reports_non_finite_loss() {
    let mut train = Batch::new(1);
    train.push(&[1e200], 0);
    train.push(&[-1e200], 1);
    let cfg = TrainConfig {
        learning_rate: 1e100,
        ..TrainConfig::default()
    };
    let err = fit_softmax(2, 1, &[0, 1], &mut Opposed(train.clone()), &train, &cfg).unwrap_err();
    assert!(
        matches!(err, icebench::Error::NonFiniteLoss { .. }),
        "{err}"
    );
}
