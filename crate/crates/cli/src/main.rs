use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cvturb::architecture::{init_params, ModelConfig};
use cvturb::checkpoint::{save_checkpoint, Checkpoint};
use cvturb::conv::count_macs;
use cvturb::cvnn::{complex_conv2d, ComplexKernel, ComplexTensor};
use cvturb::gradcheck::{reduced_model_config, ElementSelection, GradCheckConfig, ModelCheckSetup};
use cvturb::pipeline::{
    evaluate_sequences, load_sequence, load_training_pairs, restore_video, save_sequence, synthesize_video, RunConfig,
    VideoSequence, CLEAN_DIR, DEFAULT_FPS, DISTORTED_DIR, RUN_KEYS,
};
use cvturb::training::{dataset_loss, history_csv, train_loop};
use cvturb::turbulence::{generate_psf_bank, procedural_scene, PsfBank};
use cvturb::Tensor;

/// Turbulence mitigation with a complex-valued restoration network.
#[derive(Parser, Debug)]
#[command(name = "cvturb", version, about, after_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Degrade clean frames with simulated turbulence
    Synth(SynthArgs),
    /// Train a model on clean/distorted pairs
    Train(TrainArgs),
    /// Restore a distorted frame sequence
    Restore(RestoreArgs),
    /// PSNR/SSIM of a sequence against a reference
    Eval(EvalArgs),
    /// Check tape gradients against finite differences on a reduced model
    Gradcheck(GradcheckArgs),
    /// Forward timing and multiply-accumulate counts
    Bench(BenchArgs),
}

#[derive(Args, Debug, Default)]
struct Shared {
    /// `key = value` settings file, applied before flags
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// full or tiny
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    shared: Shared,
    /// Directory of clean frames
    #[arg(long, conflicts_with = "generate")]
    input: Option<PathBuf>,
    /// Procedural clean scene instead of --input
    #[arg(long, value_name = "WxHxT")]
    generate: Option<String>,
    /// Receives clean/, distorted/ and psf/
    #[arg(long)]
    output: Option<PathBuf>,
    /// Use this PSF bank instead of generating one
    #[arg(long)]
    psf_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    /// Directory with clean/ and distorted/, or with such sub-directories
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Frames per window, N_t (odd)
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    no_refinement: bool,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    /// Per-step loss log as CSV
    #[arg(long)]
    history: Option<PathBuf>,
    /// Print every n-th step
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct RestoreArgs {
    #[command(flatten)]
    shared: Shared,
    /// Checkpoint to restore with
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Frames per window; must match the checkpoint
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Spatial size of the random window
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Elements per tensor; 0 checks every element
    #[arg(long, default_value_t = 3)]
    per_tensor: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    shared: Shared,
    /// Square frame size
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long)]
    window: Option<usize>,
    /// Timed forward passes per variant; the fastest is reported
    #[arg(long, default_value_t = 2)]
    runs: usize,
}

fn keys_help() -> String {
    let mut s = String::from("Config file keys (defaults):\n");
    for (k, d) in RUN_KEYS {
        s.push_str(&format!("  {k} = {d}\n"));
    }
    s
}

/// Defaults, then the config file, then flags.
fn run_config(shared: &Shared, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &shared.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let mut set = |k: &str, v: &Option<String>| -> Result<()> {
        if let Some(v) = v {
            cfg.set(k, v).with_context(|| format!("--{k}"))?;
        }
        Ok(())
    };
    set("preset", &shared.preset)?;
    set("seed", &shared.seed.map(|s| s.to_string()))?;
    for (k, v) in flags {
        set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn p(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

fn flag(on: bool) -> Option<String> {
    on.then(|| "true".to_string())
}

fn required<'a>(path: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    match path {
        Some(p) => Ok(p),
        None => bail!("missing --{name} (or `{name}` in the config file)"),
    }
}

fn parse_generate(spec: &str) -> Result<(usize, usize, usize)> {
    let dims: Vec<usize> = spec
        .split('x')
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .ok()
        .filter(|d: &Vec<usize>| d.len() == 3 && d.iter().all(|&v| v > 0))
        .with_context(|| format!("--generate expects WxHxT with positive sizes, got `{spec}`"))?;
    Ok((dims[0], dims[1], dims[2]))
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = run_config(
        &a.shared,
        &[
            ("input", p(&a.input)),
            ("output", p(&a.output)),
            ("psf-dir", p(&a.psf_dir)),
        ],
    )?;
    let out = required(&cfg.paths.output, "output")?;
    let clean = match (&a.generate, &cfg.paths.input) {
        (Some(g), _) => {
            let (w, h, t) = parse_generate(g)?;
            VideoSequence::from_unit(&procedural_scene(w, h, t, cfg.synth.seed), DEFAULT_FPS)?.quantized()
        }
        (None, Some(dir)) => load_sequence(dir)?,
        (None, None) => bail!("synth needs --input DIR or --generate WxHxT"),
    };
    let bank = match &cfg.paths.psf_dir {
        Some(dir) => PsfBank::load(dir)?,
        None => generate_psf_bank(cfg.synth.seed),
    };
    let distorted = synthesize_video(&clean, &bank, &cfg.synth)?;
    save_sequence(&clean, out.join(CLEAN_DIR))?;
    save_sequence(&distorted, out.join(DISTORTED_DIR))?;
    bank.save(&out.join("psf"))?;
    println!(
        "synth: {} frames {}x{}, {} PSFs, seed {} -> {}",
        clean.len(),
        clean.width,
        clean.height,
        bank.len(),
        cfg.synth.seed,
        out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = run_config(
        &a.shared,
        &[
            ("data", p(&a.data)),
            ("epochs", s(&a.epochs)),
            ("max-steps", s(&a.max_steps)),
            ("lr", s(&a.lr)),
            ("window", s(&a.window)),
            ("crop", s(&a.crop)),
            ("channels", s(&a.channels)),
            ("no-refinement", flag(a.no_refinement)),
            ("checkpoint-out", p(&a.checkpoint_out)),
        ],
    )?;
    let data = required(&cfg.paths.data, "data")?;
    let out = required(&cfg.paths.checkpoint_out, "checkpoint-out")?;
    let pairs = load_training_pairs(data)?;
    let model = init_params::<f32>(&cfg.model, cfg.train.seed)?;
    println!(
        "train: {} video(s), {} parameters, window {}, crop {}, lr {}",
        pairs.len(),
        model.params.num_elements(),
        cfg.model.n_frames(),
        cfg.train.crop,
        cfg.train.learning_rate
    );
    let initial = dataset_loss(&pairs, &model, &cfg.train)?.total;
    let start = Instant::now();
    let every = a.log_every.max(1);
    let outcome = train_loop(&pairs, model, &cfg.train, |r| {
        if r.step % every == 0 {
            println!(
                "step {:>6} epoch {:>4} loss {:.6} (charbonnier {:.6}, laplacian {:.6}, l2 {:.6})",
                r.step, r.epoch, r.total, r.charbonnier_sum, r.laplacian, r.l2
            );
        }
    })?;
    let last = dataset_loss(&pairs, &outcome.model, &cfg.train)?.total;
    save_checkpoint(out, &outcome.model, Some(&outcome.adam))?;
    if let Some(h) = &a.history {
        fs::write(h, history_csv(&outcome.history)).with_context(|| format!("writing {}", h.display()))?;
    }
    println!(
        "trained {} steps in {:.1}s, loss {initial:.6} -> {last:.6}, checkpoint {}",
        outcome.history.len(),
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn restore(a: &RestoreArgs) -> Result<()> {
    let cfg = run_config(
        &a.shared,
        &[("model", p(&a.model)), ("input", p(&a.input)), ("output", p(&a.output))],
    )?;
    let ckpt_path = required(&cfg.paths.model, "model")?;
    let input = required(&cfg.paths.input, "input")?;
    let output = required(&cfg.paths.output, "output")?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let mut model_cfg: ModelConfig = ckpt.model_config()?;
    if let Some(n) = a.window {
        if n == 0 || n % 2 == 0 {
            bail!("--window must be odd and positive, got {n}");
        }
        model_cfg.n_back = n / 2;
        model_cfg.n_forward = n / 2;
    }
    let (model, _) = ckpt.restore(&model_cfg)?;
    let video = load_sequence(input)?;
    let start = Instant::now();
    let restored = restore_video(&video, &model)?;
    save_sequence(&restored, output)?;
    let secs = start.elapsed().as_secs_f64();
    println!(
        "restored {} frames {}x{} in {secs:.1}s ({:.2} frames/s) -> {}",
        restored.len(),
        restored.width,
        restored.height,
        restored.len() as f64 / secs,
        output.display()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = run_config(
        &a.shared,
        &[("test", p(&a.test)), ("ref", p(&a.reference)), ("csv", p(&a.csv))],
    )?;
    let test = required(&cfg.paths.test, "test")?;
    let reference = required(&cfg.paths.reference, "ref")?;
    let report = evaluate_sequences(test, reference, cfg.paths.csv.as_deref())?;
    for c in 0..report.channel_count() {
        println!(
            "channel {c}: PSNR {:.3} dB, SSIM {:.4}",
            report.mean_psnr_channel(c),
            report.mean_ssim_channel(c)
        );
    }
    println!(
        "{} frames: PSNR {:.3} dB, SSIM {:.4}",
        report.frames.len(),
        report.mean_psnr(),
        report.mean_ssim()
    );
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let model = reduced_model_config();
    let selection = match a.per_tensor {
        0 => ElementSelection::All,
        n => ElementSelection::PerTensor { count: n, seed: a.seed },
    };
    let cfg = GradCheckConfig {
        tolerance: a.tolerance,
        selection,
        ..GradCheckConfig::default()
    };
    let start = Instant::now();
    let setup = ModelCheckSetup::new(&model, a.size, a.seed)?;
    let report = setup.run(&cfg)?;
    println!(
        "gradcheck: {} scales, {} channels, {}x{}, {} frames, loss {:.6}",
        model.scales,
        model.channels,
        a.size,
        a.size,
        model.n_frames(),
        report.loss
    );
    for w in report.worst.iter().take(5) {
        println!(
            "  {}[{}] analytic {:.6e} numeric {:.6e} rel {:.2e}",
            w.param, w.index, w.analytic, w.numeric, w.rel_error
        );
    }
    println!("{} in {:.1}s", report.summary(), start.elapsed().as_secs_f64());
    if !report.passed() {
        bail!(
            "max rel. error {:.3e} >= {:.1e} in {}",
            report.max_rel_error,
            report.tolerance,
            report.offenders.join(", ")
        );
    }
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<()> {
    let cfg = run_config(&a.shared, &[("window", s(&a.window))])?;
    let size = a.size;
    let with = ModelConfig {
        refinement_enabled: true,
        ..cfg.model.clone()
    };
    let without = ModelConfig {
        refinement_enabled: false,
        ..cfg.model.clone()
    };
    if size % with.required_divisor() != 0 {
        bail!("--size must be a multiple of {}", with.required_divisor());
    }
    let window = Tensor::<f32>::from_fn(&[with.input_channels(), size, size], |i| {
        ((i * 7919) % 255) as f32 / 127.5 - 1.0
    });
    let mut seconds = Vec::new();
    for (name, mc) in [("with refinement", &with), ("without refinement", &without)] {
        let model = init_params::<f32>(mc, cfg.train.seed)?;
        let (_, macs) = count_macs(|| model.forward(&window));
        let best = (0..a.runs.max(1))
            .map(|_| {
                let t = Instant::now();
                model.forward(&window).map(|_| t.elapsed().as_secs_f64())
            })
            .collect::<cvturb::Result<Vec<f64>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        println!(
            "forward {name}: {size}x{size}, {} frames, {:.3}s ({:.2} frames/s), {:.2} GMAC",
            mc.n_frames(),
            best,
            1.0 / best,
            macs as f64 / 1e9
        );
        seconds.push(best);
    }
    println!("refinement time ratio: {:.2}", seconds[0] / seconds[1]);

    let c = with.channels;
    let x = ComplexTensor::new(
        Tensor::<f32>::full(&[c, size, size], 0.5),
        Tensor::<f32>::full(&[c, size, size], -0.5),
    )?;
    let k = ComplexKernel::without_bias(
        Tensor::full(&[c, c, 3, 3], 0.01),
        Tensor::full(&[c, c, 3, 3], 0.02),
        1,
        1,
    )?;
    let (_, complex) = count_macs(|| complex_conv2d(&x, &k));
    let (_, real) = count_macs(|| cvturb::conv::conv2d(&x.re, &k.real_weights, 1, 1));
    println!(
        "{c}->{c} 3x3 conv at {size}x{size}: complex {complex} MAC, real {real} MAC, ratio {:.1}",
        complex as f64 / real as f64
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Restore(a) => restore(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
