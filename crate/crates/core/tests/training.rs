use ocvtp::checkpoint::{load_checkpoint, save_checkpoint};
use ocvtp::token_store::{synth_corpus, SynthSpec, TokenCorpus};
use ocvtp::trainer::{budget_schedule, train, CheckpointBundle, ModelDims, Optimizer, TrainConfig};

fn small_dims() -> ModelDims {
    ModelDims {
        slot_dim: 32,
        slot_mlp_hidden: 64,
        decoder_width: 64,
        decoder_heads: 4,
        decoder_layers: 2,
        decoder_ffn: 128,
        n_max: None,
    }
}

fn default_corpus() -> TokenCorpus {
    synth_corpus(&SynthSpec::default()).unwrap()
}

#[test]
fn single_item_loss_halves_in_500_steps() {
    let corpus = synth_corpus(&SynthSpec {
        n_items: 1,
        ..SynthSpec::default()
    })
    .unwrap();
    let config = TrainConfig {
        budget_set: vec![8],
        steps: 500,
        batch_size: 1,
        learning_rate: 1e-3,
        optimizer: Optimizer::adam(),
        model: small_dims(),
        ..TrainConfig::default()
    };
    let ckpt = train::<f32>(&corpus, &config).unwrap();
    let h = &ckpt.loss_history;
    assert_eq!(h.len(), 500);
    let (first, last) = (h[0], h[h.len() - 1]);
    assert!(last <= 0.5 * first, "initial {first}, final {last}");
}

#[test]
fn budget_frequencies_concentrate() {
    let config = TrainConfig {
        steps: 4000,
        ..TrainConfig::default()
    };
    let schedule = budget_schedule(&config);
    assert_eq!(schedule.len(), 4000);
    for b in &config.budget_set {
        let f = schedule.iter().filter(|&&x| x == *b).count() as f64 / 4000.0;
        assert!((f - 0.25).abs() <= 0.03, "budget {b}: frequency {f}");
    }
}

/// Fraction of steps in the final half whose trailing 100-step mean exceeds
/// the mean of the 100 steps before it.
fn trend_violations(history: &[f64], window: usize) -> (usize, usize) {
    let ma = |end: usize| history[end - window..end].iter().sum::<f64>() / window as f64;
    let start = (history.len() / 2).max(2 * window);
    let checked: Vec<bool> = (start..=history.len()).map(|end| ma(end) > ma(end - window)).collect();
    (checked.iter().filter(|&&v| v).count(), checked.len())
}

#[test]
fn moving_average_loss_trends_down() {
    let config = TrainConfig {
        budget_set: vec![8, 16, 32],
        steps: 1200,
        batch_size: 4,
        learning_rate: 3e-4,
        optimizer: Optimizer::adam(),
        model: small_dims(),
        ..TrainConfig::default()
    };
    let ckpt = train::<f32>(&default_corpus(), &config).unwrap();
    let (bad, total) = trend_violations(&ckpt.loss_history, 100);
    assert!(bad as f64 <= 0.05 * total as f64, "{bad} of {total} windows rose");
}

#[test]
fn identical_seeds_give_identical_training() {
    let corpus = synth_corpus(&SynthSpec {
        n_items: 4,
        c: 8,
        n_objects: 3,
        total_tokens: Some(24),
        ..SynthSpec::default()
    })
    .unwrap();
    let config = TrainConfig {
        budget_set: vec![3, 5],
        steps: 20,
        batch_size: 2,
        model: ModelDims {
            slot_dim: 8,
            slot_mlp_hidden: 8,
            decoder_width: 8,
            decoder_heads: 2,
            decoder_layers: 1,
            decoder_ffn: 8,
            n_max: None,
        },
        ..TrainConfig::default()
    };
    let a = train::<f32>(&corpus, &config).unwrap();
    let b = train::<f32>(&corpus, &config).unwrap();
    assert_eq!(a, b);
    let other = train::<f32>(&corpus, &TrainConfig { seed: 1, ..config }).unwrap();
    assert_ne!(a.model, other.model);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ocvc");
    save_checkpoint(&a, &path).unwrap();
    let back: CheckpointBundle<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back, a);
}
