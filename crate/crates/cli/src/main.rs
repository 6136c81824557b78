use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ocvtp::checkpoint::{load_checkpoint, peek_dtype, save_checkpoint};
use ocvtp::cost_model::{
    cost_table_csv, cost_table_text, format_flops, load_arch_file, prefill_flops, ArchSpec, CostRow, PrunerArch,
};
use ocvtp::evalbench::{run_bench, Method};
use ocvtp::matrix::Matrix;
use ocvtp::objective::LossKind;
use ocvtp::params::derive_seed;
use ocvtp::pruner::{PadMode, PruneInput};
use ocvtp::token_store::{load_corpus, save_corpus, synth_corpus, SynthSpec, TokenCorpus, TokenSequence};
use ocvtp::trainer::{train_with_progress, Bucketing, CheckpointBundle, ModelDims, Optimizer, TrainConfig};
use ocvtp::viz::{infer_grid, parse_grid, render_masks, save_png};
use ocvtp::{Dtype, OcvtpError, Result, Scalar};

const DEFAULT_SEED: u64 = 0;

#[derive(Parser)]
#[command(name = "ocvtp", version, about = "Object-centric vision token pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic token corpus (OCVT file).
    Synth(SynthArgs),
    /// Train the pruner and write an OCVC checkpoint plus a loss-history CSV.
    Train(TrainArgs),
    /// Prune every item of a corpus and write {item_id: [indices]} JSON.
    Prune(PruneArgs),
    /// Benchmark the pruner against baselines and write a JSON report.
    Eval(EvalArgs),
    /// Print prefill FLOPs for a language backbone.
    Flops(FlopsArgs),
    /// Render the hard masks and kept tokens of one item as a PNG grid.
    Viz(VizArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    items: usize,
    #[arg(long, default_value_t = 8)]
    objects: usize,
    #[arg(long, default_value_t = 8)]
    tokens_min: usize,
    #[arg(long, default_value_t = 16)]
    tokens_max: usize,
    /// Exact token count per item (0 keeps the drawn sizes).
    #[arg(long, default_value_t = 96)]
    total_tokens: usize,
    /// Make the last object this many tokens.
    #[arg(long)]
    tiny_object_tokens: Option<usize>,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 1.0)]
    center_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_scale: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Loss history CSV (defaults to the checkpoint path with a .loss.csv suffix).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,192")]
    budgets: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value = "aw_mse", value_parser = parse_loss)]
    loss: LossKind,
    #[arg(long, default_value_t = 3)]
    iterations: usize,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    optimizer: OptimizerArg,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    token_condition_prob: f64,
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    dtype: DtypeArg,
    #[arg(long, default_value_t = 64)]
    slot_dim: usize,
    #[arg(long, default_value_t = 128)]
    slot_mlp_hidden: usize,
    #[arg(long, default_value_t = 128)]
    decoder_width: usize,
    #[arg(long, default_value_t = 4)]
    decoder_heads: usize,
    #[arg(long, default_value_t = 2)]
    decoder_layers: usize,
    #[arg(long, default_value_t = 256)]
    decoder_ffn: usize,
    #[arg(long)]
    n_max: Option<usize>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Tokens the slots attend over (typically a middle encoder layer).
    #[arg(long)]
    reference: PathBuf,
    /// Tokens gathered into the output (typically the last layer); defaults to the reference.
    #[arg(long)]
    forwarded: Option<PathBuf>,
    #[arg(long)]
    budget: usize,
    /// Refill to exactly `budget` tokens after dedup (default).
    #[arg(long, conflicts_with = "no_pad")]
    pad: bool,
    #[arg(long)]
    no_pad: bool,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    budgets: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "oc-vtp,random,norm_topk,medoid", value_parser = parse_method)]
    methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    /// Built-in name (llava-1.5, llava-next) or a key of --arch-file.
    #[arg(long)]
    arch: String,
    #[arg(long)]
    arch_file: Option<PathBuf>,
    #[arg(long)]
    vision: u64,
    #[arg(long, default_value_t = 32)]
    text: u64,
    /// Vision tokens kept after pruning; adds the pruned and overhead columns.
    #[arg(long)]
    kept: Option<u64>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = PrunerArch::default().c)]
    pruner_channels: u64,
    #[arg(long, default_value_t = PrunerArch::default().d)]
    pruner_dim: u64,
    #[arg(long, default_value_t = PrunerArch::default().mlp_hidden)]
    pruner_mlp_hidden: u64,
    #[arg(long, default_value_t = PrunerArch::default().iterations)]
    pruner_iterations: u64,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Item id or zero-based index (defaults to the first item).
    #[arg(long)]
    item: Option<String>,
    #[arg(long)]
    budget: usize,
    #[arg(long, conflicts_with = "no_pad")]
    pad: bool,
    #[arg(long)]
    no_pad: bool,
    /// Grid shape HxW for non-square token counts.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    s.parse().map_err(|e: OcvtpError| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: OcvtpError| e.to_string())
}

fn pad_mode(no_pad: bool) -> PadMode {
    if no_pad {
        PadMode::NoPad
    } else {
        PadMode::Pad
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| OcvtpError::storage(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_objects: a.objects,
        tokens_per_object: (a.tokens_min, a.tokens_max),
        c: a.channels,
        center_scale: a.center_scale,
        noise_scale: a.noise_scale,
        n_items: a.items,
        seed: a.seed,
        total_tokens: (a.total_tokens > 0).then_some(a.total_tokens),
        tiny_object_tokens: a.tiny_object_tokens,
    };
    let corpus = synth_corpus(&spec)?;
    save_corpus(&corpus, &a.out)?;
    println!("wrote {} items to {}", corpus.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let config = TrainConfig {
        budget_set: a.budgets,
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        loss_kind: a.loss,
        slot_iterations: a.iterations,
        eval_every: a.eval_every,
        bucketing: Bucketing::ByTokenCount,
        optimizer: match a.optimizer {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Adam => Optimizer::adam(),
        },
        grad_clip: a.grad_clip,
        token_condition_prob: a.token_condition_prob,
        model: ModelDims {
            slot_dim: a.slot_dim,
            slot_mlp_hidden: a.slot_mlp_hidden,
            decoder_width: a.decoder_width,
            decoder_heads: a.decoder_heads,
            decoder_layers: a.decoder_layers,
            decoder_ffn: a.decoder_ffn,
            n_max: a.n_max,
        },
    };
    let loss_csv = a.loss_csv.unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    match a.dtype {
        DtypeArg::F32 => train_as::<f32>(&corpus, &config, &a.out, &loss_csv),
        DtypeArg::F64 => train_as::<f64>(&corpus, &config, &a.out, &loss_csv),
    }
}

fn train_as<T: Scalar>(corpus: &TokenCorpus, config: &TrainConfig, out: &Path, loss_csv: &Path) -> Result<()> {
    let bundle: CheckpointBundle<T> =
        train_with_progress(corpus, config, |step, loss| eprintln!("step {step:>6}  loss {loss:.6}"))?;
    save_checkpoint(&bundle, out)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in bundle.loss_history.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write_file(loss_csv, csv)?;
    println!("wrote {} and {}", out.display(), loss_csv.display());
    Ok(())
}

fn prune(a: PruneArgs) -> Result<()> {
    match peek_dtype(&a.checkpoint)? {
        Dtype::F32 => prune_as::<f32>(a),
        Dtype::F64 => prune_as::<f64>(a),
    }
}

/// Pairs each reference item with the forwarded item of the same id.
fn paired<'a>(reference: &'a TokenCorpus, forwarded: &'a TokenCorpus) -> Result<Vec<(&'a TokenSequence, &'a TokenSequence)>> {
    reference
        .items
        .iter()
        .map(|r| {
            let f = forwarded.get(&r.item_id).ok_or_else(|| {
                OcvtpError::Validation(format!("item {} missing from the forwarded corpus", r.item_id))
            })?;
            if f.n() != r.n() {
                return Err(OcvtpError::Shape(format!(
                    "item {}: reference has {} tokens, forwarded has {}",
                    r.item_id,
                    r.n(),
                    f.n()
                )));
            }
            Ok((r, f))
        })
        .collect()
}

fn prune_as<T: Scalar>(a: PruneArgs) -> Result<()> {
    let ckpt: CheckpointBundle<T> = load_checkpoint(&a.checkpoint)?;
    let reference = load_corpus(&a.reference)?;
    let forwarded = match &a.forwarded {
        Some(p) => load_corpus(p)?,
        None => reference.clone(),
    };
    let mode = pad_mode(a.no_pad);
    let mut out = BTreeMap::new();
    for (i, (r, f)) in paired(&reference, &forwarded)?.into_iter().enumerate() {
        let (v_ref, v_last): (Matrix<T>, Matrix<T>) = (r.tokens_as(), f.tokens_as());
        let input = PruneInput {
            v_ref: &v_ref,
            v_last: &v_last,
            budget: a.budget,
            pad_mode: mode,
        };
        let (result, _) = ckpt.prune(&input, derive_seed(a.seed, &[i as u64]))?;
        out.insert(r.item_id.clone(), result.forwarded);
    }
    write_file(&a.out, serde_json::to_string_pretty(&out).expect("serializes"))?;
    let meta = serde_json::json!({
        "seed": a.seed,
        "budget": a.budget,
        "pad_mode": mode,
        "checkpoint": a.checkpoint,
        "reference": a.reference,
        "forwarded": a.forwarded.as_ref().unwrap_or(&a.reference),
    });
    write_file(&with_suffix(&a.out, ".meta.json"), serde_json::to_string_pretty(&meta).expect("serializes"))?;
    println!("pruned {} items to {}", out.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    match peek_dtype(&a.checkpoint)? {
        Dtype::F32 => eval_as::<f32>(a),
        Dtype::F64 => eval_as::<f64>(a),
    }
}

fn eval_as<T: Scalar>(a: EvalArgs) -> Result<()> {
    let ckpt: CheckpointBundle<T> = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let report = run_bench(&corpus, &ckpt, &a.budgets, &a.methods, &a.seeds)?;
    write_file(&a.out, report.to_json())?;
    if let Some(csv) = &a.csv {
        write_file(csv, report.to_csv())?;
    }
    print!("{}", report.to_csv());
    Ok(())
}

fn flops(a: FlopsArgs) -> Result<()> {
    let arch = match &a.arch_file {
        Some(path) => load_arch_file(path)?
            .remove(&a.arch)
            .ok_or_else(|| OcvtpError::config("arch", format!("{} not found in {}", a.arch, path.display())))?,
        None => ArchSpec::preset(&a.arch)?,
    };
    let vanilla = prefill_flops(&arch, a.vision, a.text);
    println!(
        "{} prefill, {} vision + {} text tokens: {} ({} FLOPs)",
        arch.name,
        a.vision,
        a.text,
        format_flops(vanilla.total_flops),
        vanilla.total_exact()
    );
    if let Some(kept) = a.kept {
        let pruner = PrunerArch {
            c: a.pruner_channels,
            d: a.pruner_dim,
            mlp_hidden: a.pruner_mlp_hidden,
            iterations: a.pruner_iterations,
            mac_factor: arch.mac_factor,
        };
        let row = CostRow::new(&arch, &pruner, a.vision, kept, a.text)?;
        print!("{}", cost_table_text(std::slice::from_ref(&row)));
        if let Some(csv) = &a.csv {
            write_file(csv, cost_table_csv(&[row]))?;
        }
    } else if let Some(csv) = &a.csv {
        let row = CostRow::new(&arch, &PrunerArch::default(), a.vision, a.vision, a.text)?;
        write_file(csv, cost_table_csv(&[row]))?;
    }
    Ok(())
}

fn viz(a: VizArgs) -> Result<()> {
    match peek_dtype(&a.checkpoint)? {
        Dtype::F32 => viz_as::<f32>(a),
        Dtype::F64 => viz_as::<f64>(a),
    }
}

fn viz_as<T: Scalar>(a: VizArgs) -> Result<()> {
    let ckpt: CheckpointBundle<T> = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let (index, item) = match &a.item {
        None => corpus.items.first().map(|it| (0, it)),
        Some(key) => corpus
            .items
            .iter()
            .enumerate()
            .find(|(_, it)| &it.item_id == key)
            .or_else(|| key.parse::<usize>().ok().and_then(|i| corpus.items.get(i).map(|it| (i, it)))),
    }
    .ok_or_else(|| OcvtpError::config("item", format!("no item {:?}", a.item)))?;
    let grid = match &a.grid {
        Some(g) => parse_grid(g)?,
        None => infer_grid(item.n())?,
    };
    let v: Matrix<T> = item.tokens_as();
    let input = PruneInput {
        v_ref: &v,
        v_last: &v,
        budget: a.budget,
        pad_mode: pad_mode(a.no_pad),
    };
    let (result, _) = ckpt.prune(&input, derive_seed(a.seed, &[index as u64]))?;
    save_png(&render_masks(&result.masks, &result.forwarded, grid)?, &a.out)?;
    println!("wrote {} ({}x{} grid, item {})", a.out.display(), grid.0, grid.1, item.item_id);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Prune(a) => prune(a),
        Command::Eval(a) => eval(a),
        Command::Flops(a) => flops(a),
        Command::Viz(a) => viz(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("error: {}", msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
