mod support;

use qe_core::corpus::{AnnotatedPair, Dataset, Split};
use qe_core::encoder::{EncoderConfig, PoolingStrategy};
use qe_core::model::QEModel;
use qe_core::trainer::{evaluate_loss, train, TrainConfig};

fn small() -> EncoderConfig {
    EncoderConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        max_len: 32,
        dropout_rate: 0.0,
        ..EncoderConfig::default()
    }
}

#[test]
fn overfits_a_single_pair() {
    let ds = Dataset::new(
        Split::Train,
        "xx-yy",
        vec![AnnotatedPair::labeled("only", "guten tag", "good day", 0.5)],
    )
    .unwrap();
    let model = QEModel::new(small(), PoolingStrategy::Cls, 2).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 1,
        epochs: 200,
        patience: 200,
        ..TrainConfig::default()
    };
    let out = train(model, &ds, &ds, &cfg).unwrap();
    let score = out.model.predict("guten tag", "good day").unwrap();
    assert!((score - 0.5).abs() <= 1e-2, "score {score}");
}

/// Label is the z-scored share of 'x' bytes in the target: a mean of
/// per-token features, reachable by mean pooling and the affine head.
fn linear_set(n: usize) -> Dataset {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
    let mut raw = Vec::new();
    let mut pairs = Vec::new();
    for i in 0..n {
        let len: usize = rng.gen_range(4..10);
        let share: f64 = rng.gen();
        let target: String = (0..len)
            .map(|_| if rng.gen::<f64>() < share { 'x' } else { 'o' })
            .collect();
        let count = target.chars().filter(|&c| c == 'x').count();
        raw.push(count as f64 / len as f64);
        pairs.push(AnnotatedPair::labeled(format!("l{i}"), "src", target, 0.0));
    }
    let z = qe_core::corpus::zscore_normalize(&[raw]).unwrap();
    for (p, z) in pairs.iter_mut().zip(z) {
        p.z_mean = Some(z);
    }
    Dataset::new(Split::Train, "xx-yy", pairs).unwrap()
}

#[test]
fn smoothed_training_loss_decreases() {
    let ds = linear_set(64);
    let model = QEModel::new(small(), PoolingStrategy::Mean, 4).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 20,
        patience: 100,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(model, &ds, &ds, &cfg).unwrap();
    let losses = out.log.train_losses();
    let windows: Vec<f64> = losses
        .chunks_exact(10)
        .map(|w| w.iter().sum::<f64>() / 10.0)
        .collect();
    let rises = windows.windows(2).filter(|w| w[1] > w[0]).count();
    // Mini-batch noise may lift an occasional window; the trend must hold.
    assert!(
        rises * 5 <= windows.len(),
        "{rises} of {} windows rose: {windows:?}",
        windows.len()
    );
    assert!(windows.last().unwrap() < &(0.5 * windows[0]), "{windows:?}");
}

#[test]
fn returned_model_is_the_best_checkpoint() {
    let ds = support::corrupted_copies(40, 3, "c", Split::Train);
    let dev = support::corrupted_copies(20, 4, "d", Split::Dev);
    let model = QEModel::new(small(), PoolingStrategy::Cls, 6).unwrap();
    // A large step size makes the dev loss bounce.
    let cfg = TrainConfig {
        learning_rate: 3e-2,
        batch_size: 4,
        epochs: 8,
        eval_every: Some(3),
        patience: 50,
        ..TrainConfig::default()
    };
    let out = train(model, &ds, &dev, &cfg).unwrap();
    let dev_losses = out.log.dev_losses();
    let (best_idx, best) =
        dev_losses.iter().enumerate().fold(
            (0, f64::INFINITY),
            |acc, (i, &l)| if l < acc.1 - 1e-6 { (i, l) } else { acc },
        );
    assert_eq!(evaluate_loss(&out.model, &dev).unwrap(), best);
    let dev_steps: Vec<u64> = out
        .log
        .records
        .iter()
        .filter(|r| r.split == qe_core::trainer::LogSplit::Dev)
        .map(|r| r.step)
        .collect();
    assert_eq!(out.best_step, dev_steps[best_idx]);
}
