//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the report is always printed.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use ocvtp::checkpoint::{encode_checkpoint, load_checkpoint, save_checkpoint};
use ocvtp::cost_model::{prefill_flops, ArchSpec, CostRow, PrunerArch};
use ocvtp::evalbench::{run_bench, BaselineMethod, Method};
use ocvtp::matrix::Matrix;
use ocvtp::objective::{aw_mse_masks, mse, HardMasks, LossKind};
use ocvtp::params::{derive_seed, rng, standard_normal, ParamSet};
use ocvtp::pruner::{prune_from_attention, PadMode, PruneInput};
use ocvtp::slot_attention::{aggregate_traced, SlotAttentionParams, SlotConfig};
use ocvtp::token_store::{synth_corpus, SynthSpec, TokenCorpus};
use ocvtp::trainer::{budget_schedule, grad_check, train, CheckpointBundle, ModelDims, Optimizer, TrainConfig};
use rand::seq::SliceRandom;
use rand::Rng;

/// Agreement to three significant figures.
const SIG3: f64 = 5e-3;
const FLOPS_RUNTIME: Duration = Duration::from_secs(1);
const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const GRAD_COORDS: usize = 256;
const GRAD_RUNTIME: Duration = Duration::from_secs(60);
const COLUMN_TOL: f64 = 1e-6;
const AW_TOL: f64 = 1e-12;
const FREQ_TOL: f64 = 0.03;
/// Percentage-point tolerance on the headline FLOPs reductions.
const REDUCTION_TOL: f64 = 0.01;
const OVERHEAD_BOUND: f64 = 0.005;
const COVERAGE_BOUND: f64 = 0.9;
const PIPELINE_RUNTIME: Duration = Duration::from_secs(600);
const TINY_COVERAGE_BOUND: f64 = 0.8;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn llava15() -> ArchSpec {
    ArchSpec::preset("llava-1.5").unwrap()
}

fn llava_next() -> ArchSpec {
    ArchSpec::preset("llava-next").unwrap()
}

fn flops_reproduction() -> Outcome {
    let start = Instant::now();
    let cases = [
        (llava15(), 576, 6.30e12),
        (llava15(), 64, 0.97e12),
        (llava_next(), 2880, 33.76e12),
        (llava_next(), 160, 1.95e12),
    ];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (arch, nv, published) in cases {
        let got = prefill_flops(&arch, nv, 32).total_flops;
        let rel = (got - published).abs() / published;
        worst = worst.max(rel);
        parts.push(format!("{}+32: {:.4} T", nv, got / 1e12));
    }
    let elapsed = start.elapsed();
    check(
        worst < SIG3 && elapsed < FLOPS_RUNTIME,
        format!("{}; worst relative gap {worst:.2e}; {elapsed:?}", parts.join(", ")),
    )
}

fn flops_ratios() -> Outcome {
    let r15 = CostRow::new(&llava15(), &PrunerArch::default(), 576, 64, 32).unwrap().ratio();
    let rnext = CostRow::new(&llava_next(), &PrunerArch::default(), 2880, 160, 32).unwrap().ratio();
    let ok = (r15 - 0.154).abs() < 5e-4
        && (rnext - 0.058).abs() < 5e-4
        && ((1.0 - r15) - 0.85).abs() <= REDUCTION_TOL
        && ((1.0 - rnext) - 0.95).abs() <= REDUCTION_TOL;
    check(
        ok,
        format!(
            "llava-1.5@64 ratio {r15:.4} (reduction {:.1}%), llava-next@160 ratio {rnext:.4} (reduction {:.1}%)",
            100.0 * (1.0 - r15),
            100.0 * (1.0 - rnext)
        ),
    )
}

fn pruner_overhead() -> Outcome {
    let a = CostRow::new(&llava15(), &PrunerArch::default(), 576, 64, 32).unwrap();
    let b = CostRow::new(&llava_next(), &PrunerArch::default(), 2880, 160, 32).unwrap();
    check(
        a.overhead() < OVERHEAD_BOUND && b.overhead() < OVERHEAD_BOUND,
        format!(
            "llava-1.5 {:.3} G ({:.3}%), llava-next {:.3} G ({:.3}%)",
            a.pruner.total_flops / 1e9,
            100.0 * a.overhead(),
            b.pruner.total_flops / 1e9,
            100.0 * b.overhead()
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let corpus = synth_corpus(&SynthSpec {
        n_items: 2,
        c: 8,
        n_objects: 3,
        tokens_per_object: (3, 5),
        total_tokens: Some(12),
        seed: 4,
        ..SynthSpec::default()
    })
    .unwrap();
    let config = TrainConfig {
        budget_set: vec![3],
        steps: 10,
        batch_size: 2,
        learning_rate: 1e-2,
        loss_kind: LossKind::AwMse,
        model: ModelDims {
            slot_dim: 8,
            slot_mlp_hidden: 12,
            decoder_width: 8,
            decoder_heads: 2,
            decoder_layers: 2,
            decoder_ffn: 12,
            n_max: None,
        },
        ..TrainConfig::default()
    };
    let ckpt = train::<f64>(&corpus, &config).map_err(|e| e.to_string())?;
    let report = grad_check(&ckpt, &corpus.items, GRAD_EPS, GRAD_COORDS, 9).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check(
        report.max_relative_error <= GRAD_TOL && report.checked >= 200 && elapsed < GRAD_RUNTIME,
        format!(
            "{} coordinates, max relative error {:.2e} at {}; {elapsed:.1?}",
            report.checked, report.max_relative_error, report.worst
        ),
    )
}

fn normalization_invariant() -> Outcome {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for trial in 0..1000u64 {
        let (s, n, c) = (r.random_range(1..=8), r.random_range(1..=40), r.random_range(2..=16));
        let config = SlotConfig {
            c,
            d: r.random_range(2..=16),
            mlp_hidden: r.random_range(2..=32),
            iterations: r.random_range(1..=5),
        };
        let mut params = SlotAttentionParams::<f64>::init(config, &mut rng(trial));
        let jitter = r.random_range(0.0..0.5);
        params.visit_mut("", &mut |_, m| {
            for v in m.as_mut_slice() {
                *v += jitter * r.sample::<f64, _>(rand_distr::StandardNormal);
            }
        });
        let scale = 10f64.powf(r.random_range(-1.0..1.5));
        let q: Matrix<f64> = standard_normal(s, c, &mut r);
        let x = standard_normal::<f64>(n, c, &mut r).map(|v| v * scale);
        let (_, iters) = aggregate_traced(&params, &q, &x).map_err(|e| e.to_string())?;
        for a in &iters {
            for j in 0..n {
                worst = worst.max((a.column(j).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    check(worst <= COLUMN_TOL, format!("1000 aggregations, worst column deviation {worst:.2e}"))
}

fn aw_mse_degeneracy() -> Outcome {
    let mut r = rng(6);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (s, per, c) = (r.random_range(1..=12), r.random_range(1..=12), r.random_range(1..=16));
        let n = s * per;
        let mut owner: Vec<usize> = (0..n).map(|j| j % s).collect();
        owner.shuffle(&mut r);
        let masks = HardMasks::from_owner(owner, s).unwrap();
        let vp: Matrix<f64> = standard_normal(n, c, &mut r);
        let v: Matrix<f64> = standard_normal(n, c, &mut r);
        let aw = aw_mse_masks(&vp, &v, &masks).unwrap().value;
        let plain = mse(&vp, &v).unwrap().value;
        worst = worst.max((aw - plain).abs() / plain.abs().max(f64::MIN_POSITIVE));
    }
    check(worst <= AW_TOL, format!("100 instances, worst relative gap {worst:.2e}"))
}

/// Checks the forwarding contract of one pruning result; `Err` names the violation.
fn contract(forwarded: &[usize], masks: &HardMasks, s: usize, n: usize, mode: PadMode) -> Result<(), String> {
    let unique: BTreeSet<usize> = forwarded.iter().copied().collect();
    if unique.len() != forwarded.len() || forwarded.iter().any(|&j| j >= n) {
        return Err(format!("forwarded {forwarded:?} has repeats or out-of-range indices"));
    }
    match mode {
        PadMode::Pad if forwarded.len() != s => return Err(format!("pad forwarded {} of {s}", forwarded.len())),
        PadMode::NoPad if forwarded.len() > s => return Err(format!("nopad forwarded {} > {s}", forwarded.len())),
        _ => {}
    }
    let m: Matrix<f64> = masks.to_matrix();
    for j in 0..n {
        let col = m.column(j);
        let ones = col.iter().filter(|&&v| v == 1.0).count();
        let zeros = col.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != s - 1 {
            return Err(format!("mask column {j} is not one-hot"));
        }
    }
    if masks.areas.iter().sum::<usize>() != n {
        return Err("areas do not sum to n".into());
    }
    Ok(())
}

fn budget_contract() -> Outcome {
    let mut r = rng(7);
    let mut duplicates = 0;
    for trial in 0..1000 {
        let s = r.random_range(1..=16);
        let n = s + r.random_range(0..=64);
        let temperature = 10f64.powf(r.random_range(-1.0..1.5));
        let logits = standard_normal::<f64>(s, n, &mut r).map(|v| v * temperature);
        let mut a = logits.clone();
        for j in 0..n {
            let max = logits.column(j).into_iter().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.column(j).iter().map(|v| (v - max).exp()).sum();
            for i in 0..s {
                a.set(i, j, (logits.get(i, j) - max).exp() / z);
            }
        }
        let mode = if r.random_bool(0.5) { PadMode::Pad } else { PadMode::NoPad };
        let v: Matrix<f64> = standard_normal(n, 2, &mut r);
        let res = prune_from_attention(&a, &v, mode).map_err(|e| e.to_string())?;
        duplicates += usize::from(res.n_duplicates > 0);
        contract(&res.forwarded, &res.masks, s, n, mode).map_err(|e| format!("instance {trial}: {e}"))?;
    }
    Ok(format!("1000 instances hold the contract ({duplicates} with duplicate elections)"))
}

fn small_dims() -> ModelDims {
    ModelDims {
        slot_dim: 32,
        slot_mlp_hidden: 64,
        decoder_width: 32,
        decoder_heads: 2,
        decoder_layers: 1,
        decoder_ffn: 64,
        n_max: None,
    }
}

fn train_once_multi_budget(corpus: &TokenCorpus) -> Outcome {
    let config = TrainConfig {
        budget_set: vec![8, 16, 32],
        steps: 60,
        batch_size: 2,
        learning_rate: 3e-4,
        optimizer: Optimizer::adam(),
        model: small_dims(),
        ..TrainConfig::default()
    };
    let ckpt = train::<f32>(corpus, &config).map_err(|e| e.to_string())?;
    for &s in &config.budget_set {
        for mode in [PadMode::Pad, PadMode::NoPad] {
            for (i, item) in corpus.items.iter().enumerate() {
                let x: Matrix<f32> = item.tokens_as();
                let input = PruneInput {
                    v_ref: &x,
                    v_last: &x,
                    budget: s,
                    pad_mode: mode,
                };
                let (res, _) = ckpt.prune(&input, i as u64).map_err(|e| e.to_string())?;
                contract(&res.forwarded, &res.masks, s, x.rows(), mode)
                    .map_err(|e| format!("budget {s} item {i}: {e}"))?;
                if res.kept.rows() != res.forwarded.len() {
                    return Err(format!("budget {s} item {i}: kept rows differ from indices"));
                }
            }
        }
    }
    let schedule = budget_schedule(&TrainConfig { steps: 4000, ..config.clone() });
    let expected = 1.0 / config.budget_set.len() as f64;
    let freqs: Vec<f64> = config
        .budget_set
        .iter()
        .map(|b| schedule.iter().filter(|&&x| x == *b).count() as f64 / schedule.len() as f64)
        .collect();
    check(
        freqs.iter().all(|f| (f - expected).abs() <= FREQ_TOL),
        format!("one checkpoint serves {:?} in both modes; frequencies {freqs:.3?}", config.budget_set),
    )
}

fn representativeness(corpus: &TokenCorpus) -> Outcome {
    let start = Instant::now();
    let config = TrainConfig {
        budget_set: vec![8],
        steps: 3000,
        batch_size: 4,
        learning_rate: 3e-4,
        optimizer: Optimizer::adam(),
        slot_iterations: 6,
        loss_kind: LossKind::AwMse,
        model: ModelDims {
            slot_dim: 64,
            slot_mlp_hidden: 128,
            decoder_width: 64,
            decoder_heads: 4,
            decoder_layers: 2,
            decoder_ffn: 128,
            n_max: None,
        },
        ..TrainConfig::default()
    };
    let ckpt = train::<f32>(corpus, &config).map_err(|e| e.to_string())?;
    let methods = [Method::OcVtp, Method::Baseline(BaselineMethod::Random)];
    let report = run_bench(corpus, &ckpt, &[8], &methods, &[0, 1]).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let oc = report.row(Method::OcVtp, 8).unwrap();
    let random = report.row(Method::Baseline(BaselineMethod::Random), 8).unwrap();
    let coverage = oc.coverage.unwrap();
    let expected = report.random_expectation[0].coverage;
    check(
        coverage >= COVERAGE_BOUND
            && coverage > expected
            && oc.recon_error <= random.recon_error
            && elapsed < PIPELINE_RUNTIME,
        format!(
            "coverage {coverage:.4} (random expectation {expected:.4}, sampled {:.4}); recon {:.4} vs random {:.4}; {:.0?}",
            random.coverage.unwrap(),
            oc.recon_error,
            random.recon_error,
            elapsed
        ),
    )
}

fn tiny_cluster_rate(corpus: &TokenCorpus, ckpt: &CheckpointBundle<f32>, tiny_label: u32) -> f64 {
    let hits = corpus
        .items
        .iter()
        .enumerate()
        .filter(|(i, item)| {
            let x: Matrix<f32> = item.tokens_as();
            let input = PruneInput {
                v_ref: &x,
                v_last: &x,
                budget: 8,
                pad_mode: PadMode::Pad,
            };
            let (res, _) = ckpt.prune(&input, derive_seed(0, &[*i as u64])).unwrap();
            let labels = item.labels.as_ref().unwrap();
            res.forwarded.iter().any(|&j| labels[j] == tiny_label)
        })
        .count();
    hits as f64 / corpus.len() as f64
}

fn loss_ablation() -> Outcome {
    let spec = SynthSpec {
        tiny_object_tokens: Some(2),
        ..SynthSpec::default()
    };
    let corpus = synth_corpus(&spec).unwrap();
    let tiny_label = spec.n_objects as u32 - 1;
    let sizes_ok = corpus
        .items
        .iter()
        .all(|it| it.n() == 96 && it.labels.as_ref().unwrap().iter().filter(|&&l| l == tiny_label).count() == 2);
    if !sizes_ok {
        return Err("tiny cluster is not 2 tokens of 96".into());
    }
    let base = TrainConfig {
        budget_set: vec![spec.n_objects],
        steps: 3000,
        batch_size: 4,
        learning_rate: 3e-4,
        optimizer: Optimizer::adam(),
        model: ModelDims {
            slot_dim: 64,
            slot_mlp_hidden: 128,
            decoder_width: 64,
            decoder_heads: 4,
            decoder_layers: 2,
            decoder_ffn: 128,
            n_max: None,
        },
        ..TrainConfig::default()
    };
    let aw = train::<f32>(&corpus, &TrainConfig { loss_kind: LossKind::AwMse, ..base.clone() }).map_err(|e| e.to_string())?;
    let plain = train::<f32>(&corpus, &TrainConfig { loss_kind: LossKind::Mse, ..base }).map_err(|e| e.to_string())?;
    let (aw_rate, mse_rate) = (tiny_cluster_rate(&corpus, &aw, tiny_label), tiny_cluster_rate(&corpus, &plain, tiny_label));
    check(
        aw_rate >= TINY_COVERAGE_BOUND && aw_rate > mse_rate,
        format!("tiny cluster kept on {:.1}% of items with aw_mse vs {:.1}% with mse", 100.0 * aw_rate, 100.0 * mse_rate),
    )
}

fn determinism(corpus: &TokenCorpus) -> Outcome {
    let config = TrainConfig {
        budget_set: vec![8, 16],
        steps: 30,
        batch_size: 2,
        model: small_dims(),
        ..TrainConfig::default()
    };
    let a = train::<f32>(corpus, &config).map_err(|e| e.to_string())?;
    let b = train::<f32>(corpus, &config).map_err(|e| e.to_string())?;
    if encode_checkpoint(&a) != encode_checkpoint(&b) {
        return Err("checkpoints differ between identical runs".into());
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ocvc");
    save_checkpoint(&a, &path).map_err(|e| e.to_string())?;
    let loaded: CheckpointBundle<f32> = load_checkpoint(&path).map_err(|e| e.to_string())?;
    if encode_checkpoint(&loaded) != encode_checkpoint(&a) {
        return Err("save/load changed the checkpoint".into());
    }
    for (i, item) in corpus.items.iter().enumerate().take(16) {
        let x: Matrix<f32> = item.tokens_as();
        let input = PruneInput {
            v_ref: &x,
            v_last: &x,
            budget: 16,
            pad_mode: PadMode::Pad,
        };
        let runs = [&a, &b, &loaded].map(|c| c.prune(&input, i as u64).unwrap());
        if runs.iter().any(|r| r != &runs[0]) {
            return Err(format!("prune results differ on item {i}"));
        }
    }
    Ok("bit-identical checkpoints and prune results across reruns and a save/load round-trip".into())
}

fn main() {
    let corpus = synth_corpus(&SynthSpec::default()).expect("default corpus");
    type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("FLOPs reproduction", Box::new(flops_reproduction)),
        ("FLOPs ratios", Box::new(flops_ratios)),
        ("pruner overhead bound", Box::new(pruner_overhead)),
        ("gradient correctness", Box::new(gradient_correctness)),
        ("normalization invariant", Box::new(normalization_invariant)),
        ("AW-MSE degeneracy", Box::new(aw_mse_degeneracy)),
        ("budget contract", Box::new(budget_contract)),
        ("train-once multi-budget", Box::new(|| train_once_multi_budget(&corpus))),
        ("representativeness oracle", Box::new(|| representativeness(&corpus))),
        ("loss ablation direction", Box::new(loss_ablation)),
        ("determinism and persistence", Box::new(|| determinism(&corpus))),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let id = k + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
