//! `stconv`: build, cost, train and probe spatiotemporal video networks.
//!
//! Settings resolve in three layers: built-in defaults, then the config
//! file named by `--config` / `--train-config`, then explicit flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stconv::analysis::probe::write_reversal_grid;
use stconv::analysis::{
    count_flops, count_params, curve, export_embeddings, offsets, reversal_probe, tradeoff_curve, weight_offset_stats, BnParams, CostConvention,
    MacConvention,
};
use stconv::arch::{describe, render_table, ArchConfig, ArchSpec, ConvMode, Family, InputGeometry, Preset, VariantOpts};
use stconv::data::{Dataset, DatasetSpec, GeneratorKind};
use stconv::selftest::{all_passed, gradient_suite, oracle_suite};
use stconv::train::{evaluate, train, LrSchedule, TrainConfig};
use stconv::{Error, Network};

const EXIT_USAGE: u8 = 1;
const EXIT_RECONCILE: u8 = 2;
const EXIT_NON_FINITE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "stconv", version, about = "Spatiotemporal convolution networks: build, cost, train and probe")]
struct Cli {
    /// Directory that receives every artifact.
    #[arg(long, global = true, env = "STCONV_OUT_DIR", hide_env_values = true, default_value = "stconv-out")]
    out_dir: PathBuf,

    /// Worker threads for gradient shards and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Resolve an architecture and write its spec and an initialised checkpoint.
    Build {
        #[command(flatten)]
        arch: ArchArgs,
        /// Initialisation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the layer table of an architecture.
    Describe {
        #[command(flatten)]
        arch: ArchArgs,
    },
    /// Write the per-layer parameter and FLOP report as CSV.
    Count {
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        cost: CostArgs,
        /// Clips per batch.
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Compare totals with the published figures; exit 2 on a miss.
        #[arg(long)]
        reconcile: bool,
    },
    /// Write FLOPs against the number of 3D units along a surgery family.
    Curve {
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        cost: CostArgs,
        /// Surgery family swept over its transition index.
        #[arg(long, value_enum, default_value_t = SurgeryFamily::TopHeavy)]
        family: SurgeryFamily,
        /// Full 3D or separable temporal units.
        #[arg(long = "conv", value_enum, default_value_t = ConvArg::Full)]
        conv_mode: ConvArg,
    },
    /// Train on a synthetic dataset; writes a checkpoint and a log.
    Train {
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Top-1/top-5 of a network on a synthetic dataset.
    Eval {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Accuracy on clips in order and reversed, plus the largest logit change.
    ReverseTest {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Per-offset statistics of every temporal kernel, with a boxplot script.
    WeightStats {
        #[command(flatten)]
        net: NetArgs,
    },
    /// Space-time pooled activations of one layer, one row per clip.
    ExportEmb {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Layer whose output is pooled.
        #[arg(long, default_value = "Mixed5c")]
        layer: String,
    },
    /// Run the kernel oracle and gradient suites; exit 2 on a failure.
    Selftest {
        /// Random instances per oracle check.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Seed for the random instances.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct ArchArgs {
    /// Preset: i3d, i2d, s3d, s3d-g, fast-s3d, bottom-heavy[-s3d]:K or top-heavy[-s3d]:K.
    #[arg(long)]
    arch: Option<String>,
    /// Architecture TOML; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Desk-scale geometry: channels divided by 8, 13x32x32 grey clips, 2 classes.
    #[arg(long)]
    mini: bool,
    /// Add feature gating after every temporal convolution.
    #[arg(long)]
    gated: bool,
    /// Clip length.
    #[arg(long)]
    frames: Option<usize>,
    /// Clip height and width.
    #[arg(long)]
    size: Option<usize>,
    /// Number of output classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Channel width multiplier.
    #[arg(long)]
    multiplier: Option<f64>,
}

#[derive(Debug, Args)]
struct CostArgs {
    /// FLOPs per multiply-accumulate.
    #[arg(long, value_parser = ["1", "2"], default_value = "1")]
    mac: String,
    /// Batch-norm tensors counted as parameters: excluded, learnable or with_statistics.
    #[arg(long, default_value = "learnable")]
    bn: String,
}

#[derive(Debug, Args)]
struct NetArgs {
    /// Checkpoint written by `build` or `train`; without it a fresh network is built.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchArgs,
    /// Initialisation seed when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Synthetic dataset generator.
    #[arg(long, value_enum, default_value_t = DatasetKind::DirectionalMotion)]
    dataset: DatasetKind,
    /// Number of clips.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Seed of the dataset generator.
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training TOML; flags override its keys.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Checkpoint to start from instead of a fresh initialisation.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Optimisation steps; the default step schedule is rescaled to match.
    #[arg(long)]
    steps: Option<usize>,
    /// Clips per step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Constant learning rate in place of the step schedule.
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum coefficient.
    #[arg(long)]
    momentum: Option<f64>,
    /// Seed for initialisation, shuffling and dropout.
    #[arg(long)]
    seed: Option<u64>,
    /// Synthetic dataset generator.
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    /// Number of training clips.
    #[arg(long)]
    samples: Option<usize>,
    /// Seed of the dataset generator.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Evaluate on the training set every N steps (0: only at the end).
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DatasetKind {
    DirectionalMotion,
    StaticTexture,
    SpeedContrast,
}

impl From<DatasetKind> for GeneratorKind {
    fn from(k: DatasetKind) -> Self {
        match k {
            DatasetKind::DirectionalMotion => Self::DirectionalMotion,
            DatasetKind::StaticTexture => Self::StaticTexture,
            DatasetKind::SpeedContrast => Self::SpeedContrast,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SurgeryFamily {
    TopHeavy,
    BottomHeavy,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConvArg {
    Full,
    Sep,
}

/// A failed run and the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } => EXIT_NON_FINITE,
            _ => EXIT_USAGE,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, msg: msg.into() }
}

type Outcome = Result<(), Failure>;

impl ArchArgs {
    fn resolve(&self) -> Result<ArchSpec, Failure> {
        let preset = self.arch.as_deref().map(str::parse::<Preset>).transpose()?;
        let mut cfg = match &self.config {
            Some(path) => ArchConfig::from_toml(&fs::read_to_string(path)?)?,
            None => ArchConfig::from_preset(preset.unwrap_or(Preset::I3D), &VariantOpts::default()),
        };
        if self.mini {
            let m = VariantOpts::mini();
            cfg.input = m.input;
            cfg.classes = m.classes;
            cfg.channel_multiplier = m.channel_multiplier;
        }
        if let Some(p) = preset {
            (cfg.family, cfg.conv, cfg.k, cfg.gated) = (Some(p.family), p.conv, p.k, p.gated);
            cfg.layers = None;
        }
        cfg.gated |= self.gated;
        if let Some(t) = self.frames {
            cfg.input.frames = t;
        }
        if let Some(s) = self.size {
            (cfg.input.height, cfg.input.width) = (s, s);
        }
        if let Some(c) = self.classes {
            cfg.classes = c;
        }
        if let Some(m) = self.multiplier {
            cfg.channel_multiplier = m;
        }
        Ok(cfg.resolve()?)
    }

    /// File-name stem for artifacts.
    fn tag(&self) -> String {
        let base = match (&self.arch, &self.config) {
            (Some(a), _) => a.clone(),
            (None, Some(p)) => p.file_stem().map_or("arch".into(), |s| s.to_string_lossy().into_owned()),
            (None, None) => "i3d".into(),
        };
        let mut tag: String = base.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '-' }).collect();
        if self.gated {
            tag.push_str("-gated");
        }
        if self.mini {
            tag.push_str("-mini");
        }
        tag
    }
}

impl CostArgs {
    fn convention(&self) -> Result<CostConvention, Failure> {
        let mac = if self.mac == "2" { MacConvention::Two } else { MacConvention::One };
        Ok(CostConvention { mac, bn: self.bn.parse::<BnParams>()? })
    }
}

impl NetArgs {
    fn load(&self) -> Result<(Network<f32>, String), Failure> {
        match &self.checkpoint {
            Some(path) => {
                let tag = path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
                Ok((Network::load(path)?, tag))
            }
            None => Ok((Network::new(self.arch.resolve()?, self.seed)?, self.arch.tag())),
        }
    }
}

impl DataArgs {
    fn load(&self, net: &Network<f32>, out_dir: &Path) -> Result<Dataset<f32>, Failure> {
        dataset(self.dataset, net, self.samples, self.data_seed, out_dir)
    }
}

/// Dataset matching the network's clip geometry and class count, cached
/// under the output directory.
fn dataset(kind: DatasetKind, net: &Network<f32>, samples: usize, seed: u64, out_dir: &Path) -> Result<Dataset<f32>, Failure> {
    let mut spec = DatasetSpec::new(kind.into(), net.spec().input, samples, seed);
    spec.classes = net.spec().classes;
    let dir = out_dir.join("data").join(format!("{kind:?}-{}-{samples}-{seed}", geometry_tag(spec.geometry)).to_lowercase());
    Ok(Dataset::load_or_generate(&spec, &dir)?)
}

fn geometry_tag(g: InputGeometry) -> String {
    format!("{}x{}x{}x{}", g.frames, g.height, g.width, g.channels)
}

fn write(out_dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, Failure> {
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join(name);
    fs::write(&path, bytes)?;
    println!("wrote {}", path.display());
    Ok(path)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> stconv::Result<()>) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Published totals at 64x224x224: parameters and FLOPs.
fn anchors(preset: Preset) -> Option<(Option<f64>, f64)> {
    match preset {
        Preset::I3D => Some((Some(12.06e6), 107.89e9)),
        Preset::S3D => Some((Some(8.77e6), 66.38e9)),
        Preset::S3D_G => Some((Some(11.56e6), 71.38e9)),
        Preset::FAST_S3D => Some((None, 43.47e9)),
        _ => None,
    }
}

fn reconcile(arch: &ArchArgs, spec: &ArchSpec, cost: CostConvention) -> Outcome {
    let mut preset: Preset = arch.arch.as_deref().ok_or_else(|| usage("--reconcile needs --arch"))?.parse()?;
    preset.gated |= arch.gated;
    let (params_want, flops_want) = anchors(preset).ok_or_else(|| usage(format!("no published figures for `{preset}`")))?;
    if spec.input != InputGeometry::paper() || spec.classes != VariantOpts::default().classes {
        return Err(usage("published figures are for the full-size network on 64x224x224 clips"));
    }
    let mut ok = true;
    if let Some(want) = params_want {
        let got = count_params(spec, cost)?.totals.params as f64;
        let r = got / want - 1.0;
        ok &= r.abs() <= 0.01;
        println!("reconcile params {:.3}M vs {:.2}M ({:+.2}%, tolerance 1%)", got / 1e6, want / 1e6, 100.0 * r);
    }
    // The MAC convention is calibrated: whichever lands closer.
    let (r, mac, got) = MacConvention::ALL
        .into_iter()
        .map(|mac| {
            let got = count_flops(spec, spec.input, 1, CostConvention { mac, ..cost }).map(|c| c.totals.flops as f64);
            got.map(|g| (g / flops_want - 1.0, mac, g))
        })
        .collect::<stconv::Result<Vec<_>>>()?
        .into_iter()
        .min_by(|a, b| a.0.abs().total_cmp(&b.0.abs()))
        .unwrap();
    ok &= r.abs() <= 0.02;
    println!("reconcile flops {:.2}G vs {:.2}G ({:+.2}%, mac={}, tolerance 2%)", got / 1e9, flops_want / 1e9, 100.0 * r, mac.factor());
    if ok {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_RECONCILE,
            msg: format!("`{preset}` does not reconcile with the published figures"),
        })
    }
}

fn run(cli: Cli) -> Outcome {
    let out = cli.out_dir.as_path();
    let workers = cli.workers.max(1);
    match cli.command {
        Command::Build { arch, seed } => {
            let spec = arch.resolve()?;
            let net = Network::<f32>::new(spec.clone(), seed)?;
            let tag = arch.tag();
            write(out, &format!("{tag}.arch.toml"), spec.to_toml()?.as_bytes())?;
            let path = out.join(format!("{tag}.stck"));
            let mut meta = serde_json::Map::new();
            meta.insert("seed".into(), seed.into());
            net.save(&path, meta)?;
            println!("wrote {}", path.display());
            println!("params={}", net.num_params());
        }
        Command::Describe { arch } => {
            print!("{}", render_table(&describe(&arch.resolve()?)?));
        }
        Command::Count { arch, cost, batch, reconcile: check } => {
            let spec = arch.resolve()?;
            let conv = cost.convention()?;
            let report = count_flops(&spec, spec.input, batch, conv)?;
            write(out, &format!("cost_{}.csv", arch.tag()), &csv_bytes(|b| report.write_csv(b))?)?;
            let t = report.totals;
            println!(
                "total params={} ({:.3}M) macs={} flops={} ({:.2} GFLOPs; conv {:.2} G, elementwise {:.2} G) input={} batch={batch} {conv}",
                t.params,
                t.params as f64 / 1e6,
                t.macs,
                t.flops,
                t.flops as f64 / 1e9,
                t.conv_flops as f64 / 1e9,
                t.elementwise_flops as f64 / 1e9,
                geometry_tag(spec.input),
            );
            if check {
                reconcile(&arch, &spec, conv)?;
            }
        }
        Command::Curve { arch, cost, family, conv_mode } => {
            let spec = arch.resolve()?;
            let opts = VariantOpts {
                input: spec.input,
                classes: spec.classes,
                channel_multiplier: arch.multiplier.unwrap_or(if arch.mini { VariantOpts::mini().channel_multiplier } else { 1.0 }),
                batch_norm: spec.batch_norm,
                temporal_padding: spec.temporal_padding,
                ..VariantOpts::default()
            };
            let (fam, name) = match family {
                SurgeryFamily::TopHeavy => (Family::TopHeavy, "top-heavy"),
                SurgeryFamily::BottomHeavy => (Family::BottomHeavy, "bottom-heavy"),
            };
            let (mode, mode_name) = match conv_mode {
                ConvArg::Full => (ConvMode::Full, "full"),
                ConvArg::Sep => (ConvMode::Separable, "sep"),
            };
            let curve = tradeoff_curve(fam, mode, &opts, cost.convention()?)?;
            write(out, &format!("curve_{name}_{mode_name}.csv"), &csv_bytes(|b| curve.write_csv(b))?)?;
            write(out, "plot_curve.py", curve::plot_script().as_bytes())?;
            for p in &curve.points {
                println!("k={:>2} n_3d={:>2} gflops={:.3}", p.k, p.n_3d, p.flops as f64 / 1e9);
            }
        }
        Command::Train { arch, train: t } => run_train(&arch, &t, out, workers)?,
        Command::Eval { net, data } => {
            let (model, tag) = net.load()?;
            let d = data.load(&model, out)?;
            let r = evaluate(&model, &d, workers)?;
            let json = serde_json::to_string_pretty(&r).map_err(|e| usage(e.to_string()))?;
            write(out, &format!("eval_{tag}.json"), json.as_bytes())?;
            println!("top1={:.4} top5={:.4} samples={}", r.top1, r.top5, r.samples);
        }
        Command::ReverseTest { net, data } => {
            let (model, tag) = net.load()?;
            let d = data.load(&model, out)?;
            let r = reversal_probe(&model, &d, workers)?;
            write(out, &format!("reversal_{tag}.csv"), &csv_bytes(|b| write_reversal_grid(&[(tag.clone(), r.clone())], b))?)?;
            println!("normal={:.4} reversed={:.4} max_logit_delta={:e} clips={}", r.acc_normal, r.acc_reversed, r.max_logit_delta, r.clips);
        }
        Command::WeightStats { net } => {
            let (model, tag) = net.load()?;
            let stats = weight_offset_stats(&model);
            if let Some(n) = &stats.notice {
                println!("{n}");
            }
            write(out, &format!("offsets_{tag}.csv"), &csv_bytes(|b| stats.write_csv(b))?)?;
            write(out, "plot_offsets.py", offsets::boxplot_script().as_bytes())?;
            for l in &stats.layers {
                println!("{:<8} depth={} off_center_ratio={:.4}", l.layer, l.depth, l.off_center_ratio);
            }
        }
        Command::ExportEmb { net, data, layer } => {
            let (model, tag) = net.load()?;
            let d = data.load(&model, out)?;
            let emb = export_embeddings(&model, &d, &layer)?;
            write(out, &format!("emb_{tag}_{layer}.csv"), &csv_bytes(|b| emb.write_csv(b))?)?;
            println!("clips={} dim={}", d.len(), emb.dim());
        }
        Command::Selftest { instances, seed } => {
            let mut checks = oracle_suite(instances, seed)?;
            checks.extend(gradient_suite(seed)?);
            for c in &checks {
                let verdict = if c.passed { "ok  " } else { "FAIL" };
                println!("{verdict} {} ({} instances, worst {:.3e}, tolerance {:.0e})", c.name, c.instances, c.worst, c.tolerance);
            }
            if !all_passed(&checks) {
                return Err(Failure {
                    code: EXIT_RECONCILE,
                    msg: "self-test failed".into(),
                });
            }
        }
    }
    Ok(())
}

fn run_train(arch: &ArchArgs, t: &TrainArgs, out: &Path, workers: usize) -> Outcome {
    let mut net: Network<f32> = match &t.init {
        Some(path) => Network::load(path)?,
        None => Network::new(arch.resolve()?, t.seed.unwrap_or(0))?,
    };
    let base = DatasetSpec::new(GeneratorKind::DirectionalMotion, net.spec().input, 500, 0);
    let (mut cfg, from_file) = match &t.train_config {
        Some(path) => (TrainConfig::from_toml(&fs::read_to_string(path)?)?, true),
        None => (TrainConfig::desk_scale(base), false),
    };
    if let Some(steps) = t.steps {
        cfg.steps = steps;
        if !from_file {
            cfg.schedule = LrSchedule::desk_scale(steps);
        }
    }
    if let Some(lr) = t.lr {
        cfg.schedule = LrSchedule::constant(lr);
    }
    if let Some(v) = t.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = t.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = t.seed {
        cfg.seed = v;
    }
    if let Some(v) = t.dataset {
        cfg.dataset.kind = v.into();
    }
    if let Some(v) = t.samples {
        cfg.dataset.samples = v;
    }
    if let Some(v) = t.data_seed {
        cfg.dataset.seed = v;
    }
    if let Some(v) = t.eval_every {
        cfg.eval_every = v;
    }
    cfg.dataset.geometry = net.spec().input;
    cfg.dataset.classes = net.spec().classes;
    cfg.validate()?;
    let dir = out.join("data").join(format!("{:?}-{}-{}-{}", cfg.dataset.kind, geometry_tag(cfg.dataset.geometry), cfg.dataset.samples, cfg.dataset.seed).to_lowercase());
    let data = Dataset::<f32>::load_or_generate(&cfg.dataset, &dir)?;
    let tag = arch.tag();
    let mut log = Vec::new();
    let result = train(&mut net, &data, &cfg, workers, &mut log);
    write(out, &format!("{tag}.train.log"), &log)?;
    let outcome = result?;
    write(out, &format!("{tag}.train.toml"), cfg.to_toml()?.as_bytes())?;
    let path = out.join(format!("{tag}.stck"));
    let mut meta = serde_json::Map::new();
    meta.insert("steps".into(), cfg.steps.into());
    meta.insert("seed".into(), cfg.seed.into());
    net.save(&path, meta)?;
    println!("wrote {}", path.display());
    if let Some(last) = outcome.steps.last() {
        println!("final step={} loss={:.6}", last.step, last.loss);
    }
    if let Some((step, r)) = outcome.evals.last() {
        println!("train top1={:.4} top5={:.4} at step {step}", r.top1, r.top5);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
