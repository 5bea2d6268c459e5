mod ppm;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use ern_core::compiler::{compile, gen_random_checkpoint, load, serialize, Checkpoint, CompiledModel};
use ern_core::graph::{conv_stats, model_stats, ArchConfig, Engine, ExecOptions, KernelPath};
use ern_core::kernels::ConvSpec;
use ern_core::oracle::{cross_check, OracleModel};
use ern_core::par::Parallelism;
use ern_core::pixembed::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const EXIT_USAGE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_VERIFY: u8 = 3;

/// Integer-only inference for binary-weight residual networks.
#[derive(Parser)]
#[command(name = "ern", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a float checkpoint manifest into an `.ern` model.
    Compile(CompileArgs),
    /// Classify one image.
    Infer(InferArgs),
    /// Print parameter, size and MAC counts for an architecture or a single conv.
    Stats(StatsArgs),
    /// Cross-check a compiled model against the float oracle on random images.
    Verify(VerifyArgs),
    /// Time inference for each kernel path.
    Bench(BenchArgs),
    /// Write a seeded random checkpoint.
    InitRandom(InitArgs),
}

#[derive(Args)]
struct CompileArgs {
    /// Manifest file, or the directory containing manifest.json.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Shared scaling constant; defaults to the value stored in the manifest.
    #[arg(long)]
    shared_const: Option<f64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Binary PPM (P6, maxval 255).
    #[arg(long, conflicts_with = "raw", required_unless_present = "raw")]
    image: Option<PathBuf>,
    /// Raw CHW uint8 RGB tensor; needs --height and --width.
    #[arg(long, requires_all = ["height", "width"])]
    raw: Option<PathBuf>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value_t = 5)]
    top: usize,
    /// Average logits over four corner and one centre crop plus their mirrors.
    #[arg(long, requires = "crop_size")]
    ten_crop: bool,
    #[arg(long)]
    crop_size: Option<usize>,
    #[arg(long, default_value = "popcount")]
    kernel: KernelPath,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long, required_unless_present = "conv")]
    arch: Option<String>,
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    /// Thermometer levels per colour channel.
    #[arg(long, default_value_t = 10)]
    thermo_k: usize,
    /// Single conv layer as IN:OUT:K:STRIDE (padding K/2).
    #[arg(long, conflicts_with = "arch")]
    conv: Option<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side length of the random test images.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Worker threads; 1 runs the sequential kernels.
    #[arg(long)]
    threads: Option<usize>,
    /// Time only this path; both are timed by default.
    #[arg(long)]
    kernel: Option<KernelPath>,
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    arch: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    thermo_k: usize,
    #[arg(long, default_value_t = 1.0)]
    shared_const: f64,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn usage(err: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_USAGE, err: err.into() }
    }

    fn verify(msg: String) -> Self {
        Self { code: EXIT_VERIFY, err: anyhow!(msg) }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self { code: EXIT_INPUT, err: e.into() }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.cmd {
        Command::Compile(a) => cmd_compile(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::InitRandom(a) => cmd_init_random(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn read_model(path: &Path) -> anyhow::Result<CompiledModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    load(&bytes).with_context(|| format!("loading {}", path.display()))
}

fn read_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::open(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let data = (0..3 * h * w).map(|_| rng.random::<u8>()).collect();
    Image::new(3, h, w, data).expect("valid image shape")
}

fn cmd_compile(a: CompileArgs) -> CmdResult {
    let ckpt = read_checkpoint(&a.manifest)?;
    let c = compile(&ckpt, a.shared_const)?;
    let bytes = serialize(&c.model);
    fs::write(&a.out, &bytes).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "compiled {} ({} layers, c = {}) -> {} ({} bytes)",
        ckpt.manifest.arch,
        c.model.graph().layers().count(),
        c.model.shared_const(),
        a.out.display(),
        bytes.len()
    );
    Ok(())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn ten_crops(img: &Image, s: usize) -> Result<Vec<Image>, Failure> {
    let (h, w) = (img.height(), img.width());
    if s == 0 || s > h || s > w {
        return Err(Failure::usage(anyhow!("crop size {s} does not fit a {h}x{w} image")));
    }
    let origins = [(0, 0), (0, w - s), (h - s, 0), (h - s, w - s), ((h - s) / 2, (w - s) / 2)];
    let mut crops = Vec::with_capacity(10);
    for mirror in [false, true] {
        for (top, left) in origins {
            crops.push(img.crop(top, left, s, s, mirror)?);
        }
    }
    Ok(crops)
}

fn cmd_infer(a: InferArgs) -> CmdResult {
    let model = read_model(&a.model)?;
    let img = match (&a.image, &a.raw) {
        (Some(p), _) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            ppm::parse(&bytes).with_context(|| format!("parsing {}", p.display()))?
        }
        (None, Some(p)) => {
            let (h, w) = (a.height.expect("required by clap"), a.width.expect("required by clap"));
            let data = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            if data.len() != 3 * h * w {
                return Err(anyhow!("raw tensor has {} bytes, 3x{h}x{w} needs {}", data.len(), 3 * h * w).into());
            }
            Image::new(3, h, w, data)?
        }
        (None, None) => unreachable!("clap requires an input"),
    };
    let engine = Engine::new(&model, ExecOptions { kernel: a.kernel, ..Default::default() })?;
    let logits = if a.ten_crop {
        let crops = ten_crops(&img, a.crop_size.expect("required by clap"))?;
        let mut acc = vec![0.0; model.graph().config().num_classes];
        for crop in &crops {
            for (s, l) in acc.iter_mut().zip(engine.run(crop)?) {
                *s += l;
            }
        }
        acc.iter().map(|s| s / crops.len() as f64).collect()
    } else {
        engine.run(&img)?
    };
    let probs = softmax(&logits);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&i, &j| probs[j].total_cmp(&probs[i]).then(i.cmp(&j)));
    for &i in order.iter().take(a.top) {
        println!("{i}\t{:.6}", probs[i]);
    }
    Ok(())
}

fn parse_conv(s: &str) -> Result<ConvSpec, Failure> {
    let parts: Vec<usize> = s
        .split(':')
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::usage(anyhow!("--conv expects IN:OUT:K:STRIDE, got `{s}`")))?;
    match parts[..] {
        [i, o, k, st] => Ok(ConvSpec::square(i, o, k, st)),
        _ => Err(Failure::usage(anyhow!("--conv expects IN:OUT:K:STRIDE, got `{s}`"))),
    }
}

fn cmd_stats(a: StatsArgs) -> CmdResult {
    if let Some(conv) = &a.conv {
        let spec = parse_conv(conv)?;
        let l = conv_stats(&spec, a.resolution, a.resolution)?;
        if a.json {
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({ "conv": conv, "resolution": a.resolution, "layer": l }))?
            );
        } else {
            println!("conv {conv} at {0}x{0}", a.resolution);
            println!("output:      {}x{}x{}", spec.out_ch, l.out_height, l.out_width);
            println!("params:      {}", l.params);
            println!("macs:        {}", l.macs);
            println!("activations: {}", l.activations);
        }
        return Ok(());
    }
    let name = a.arch.as_deref().expect("required by clap");
    let cfg = ArchConfig::by_name(name).map_err(Failure::usage)?;
    let s = model_stats(&cfg, a.thermo_k, a.resolution)?;
    let mib = |b: u64| b as f64 / (1024.0 * 1024.0);
    if a.json {
        let mut v = serde_json::to_value(&s)?;
        v["binary_weight_mib"] = json!(mib(s.binary_weight_bytes));
        v["final_layer_mib"] = json!(mib(s.final_layer_bytes));
        v["weights_and_thresholds_bytes"] = json!(s.binary_weight_bytes + s.threshold_bytes);
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        println!("arch:                {} at {2}x{2} (k = {1})", s.arch, a.thermo_k, s.resolution);
        println!("conv layers:         {}", s.conv_layers);
        println!("params:              {}", s.param_count);
        println!("weights-only bytes:  {} ({:.3} MiB)", s.binary_weight_bytes, mib(s.binary_weight_bytes));
        println!("padded weight bytes: {}", s.padded_weight_bytes);
        println!("threshold bytes:     {}", s.threshold_bytes);
        println!(
            "final layer:         {} params, {} bytes ({:.3} MiB)",
            s.final_layer_params,
            s.final_layer_bytes,
            mib(s.final_layer_bytes)
        );
        println!("macs:                {}", s.macs);
        println!("activations:         {}", s.activations);
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let model = read_model(&a.model)?;
    let ckpt = read_checkpoint(&a.manifest)?;
    let oracle = OracleModel::from_checkpoint(&ckpt, Some(model.shared_const()))?;
    if oracle.graph() != model.graph() {
        return Err(Failure::verify("model and manifest describe different networks".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut images = Vec::new();
    let mut layers: Vec<(String, u64, u64, u64)> = Vec::new();
    let mut passed = true;
    for i in 0..a.images {
        let img = random_image(a.resolution, a.resolution, &mut rng);
        let r = cross_check(&model, &oracle, &img, ExecOptions::default())?;
        if layers.is_empty() {
            layers = r.layers.iter().map(|l| (l.name.clone(), 0, 0, 0)).collect();
        }
        for (agg, l) in layers.iter_mut().zip(&r.layers) {
            agg.1 += l.elements;
            agg.2 += l.mismatches;
            agg.3 += l.ties;
        }
        passed &= r.passed();
        images.push(json!({
            "index": i,
            "passed": r.passed(),
            "first_divergence": r.first_divergence,
            "first_acc_failure": r.first_acc_failure,
            "mismatches": r.total_mismatches(),
            "ties": r.total_ties(),
            "acc_failures": r.acc_failures,
            "max_logit_rel_err": r.max_logit_rel_err,
            "float_ops_in_trunk": r.float_ops_in_trunk,
        }));
    }
    if a.json {
        let layers: Vec<_> =
            layers.iter().map(|(n, e, m, t)| json!({ "name": n, "elements": e, "mismatches": m, "ties": t })).collect();
        let out = json!({
            "passed": passed,
            "images": a.images,
            "seed": a.seed,
            "resolution": a.resolution,
            "per_image": images,
            "layers": layers,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        for im in &images {
            println!(
                "image {}: {} (mismatches {}, ties {}, max logit rel err {:.3e}{})",
                im["index"],
                if im["passed"] == true { "ok" } else { "FAIL" },
                im["mismatches"],
                im["ties"],
                im["max_logit_rel_err"].as_f64().unwrap_or(f64::NAN),
                im["first_divergence"].as_str().map(|l| format!(", first divergence at {l}")).unwrap_or_default()
            );
        }
        let ties: u64 = layers.iter().map(|l| l.3).sum();
        let mism: u64 = layers.iter().map(|l| l.2).sum();
        println!("{} layers checked, {mism} mismatches, {ties} boundary ties", layers.len());
    }
    if passed {
        Ok(())
    } else {
        Err(Failure::verify("engine and oracle disagree".into()))
    }
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let model = read_model(&a.model)?;
    if a.iters == 0 {
        return Err(Failure::usage(anyhow!("--iters must be at least 1")));
    }
    let threads = a.threads.unwrap_or_else(rayon::current_num_threads);
    if threads == 0 {
        return Err(Failure::usage(anyhow!("--threads must be at least 1")));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| anyhow!(e))?;
    let parallelism = if threads == 1 { Parallelism::Sequential } else { Parallelism::Parallel };
    let img = random_image(a.resolution, a.resolution, &mut ChaCha8Rng::seed_from_u64(a.seed));
    let kernels = match a.kernel {
        Some(k) => vec![k],
        None => vec![KernelPath::Naive, KernelPath::Popcount],
    };
    println!("{0}x{0} input, {threads} thread(s), {1} iteration(s)", a.resolution, a.iters);
    let mut results: Vec<(KernelPath, Vec<f64>, f64)> = Vec::new();
    for kernel in kernels {
        let engine = Engine::new(&model, ExecOptions { kernel, parallelism })?;
        let (logits, times) = pool.install(|| -> anyhow::Result<_> {
            let logits = engine.run(&img)?;
            let mut times = Vec::with_capacity(a.iters);
            for _ in 0..a.iters {
                let t = Instant::now();
                let out = engine.run(&img)?;
                times.push(t.elapsed().as_secs_f64() * 1e3);
                anyhow::ensure!(out == logits, "non-deterministic output from {kernel:?}");
            }
            Ok((logits, times))
        })?;
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let min = times.iter().copied().fold(f64::INFINITY, f64::min);
        println!("{kernel:?}: mean {mean:.2} ms, min {min:.2} ms");
        results.push((kernel, logits, mean));
    }
    if let [(_, a_logits, naive), (_, b_logits, pop)] = &results[..] {
        println!("speedup (naive / popcount): {:.2}x", naive / pop);
        if a_logits != b_logits {
            return Err(Failure::verify("kernel paths produced different logits".into()));
        }
        println!("logits identical across kernel paths");
    }
    Ok(())
}

fn cmd_init_random(a: InitArgs) -> CmdResult {
    let cfg = ArchConfig::by_name(&a.arch).map_err(Failure::usage)?;
    let ckpt = gen_random_checkpoint(&cfg, a.thermo_k, a.shared_const, a.seed)?;
    ckpt.write_dir(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} checkpoint ({} layers) to {}", a.arch, ckpt.manifest.layers.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_a_distribution() {
        let p = softmax(&[1000.0, 999.0, 995.0, 998.0]);
        assert!(p.iter().all(|v| *v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p[0] > p[1] && p[1] > p[3] && p[3] > p[2]);
    }

    #[test]
    fn ten_crop_geometry() {
        let img = Image::filled(10, 12, [1, 2, 3]);
        let crops = ten_crops(&img, 8).unwrap();
        assert_eq!(crops.len(), 10);
        assert!(crops.iter().all(|c| (c.height(), c.width()) == (8, 8)));
        assert!(ten_crops(&img, 11).is_err());
    }

    #[test]
    fn conv_flag_parsing() {
        let s = parse_conv("3:64:7:2").unwrap();
        assert_eq!((s.in_ch, s.out_ch, s.kh, s.stride, s.padding), (3, 64, 7, (2, 2), (3, 3)));
        assert!(parse_conv("3:64:7").is_err());
        assert!(parse_conv("a:b:c:d").is_err());
    }
}
