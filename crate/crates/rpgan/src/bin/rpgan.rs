//! Command-line surface: train, analyze, fuse, extend, invert, generate,
//! noise and sweep-nin. Exit codes: 0 ok, 2 configuration problem,
//! 3 numerical abort, 4 verification failure.

use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rpgan::analysis::{
    diversity_ratio, freeze_and_vary, noise_inject, FrozenRouteSpec, ImageMetric,
};
use rpgan::checkpoint::{load_checkpoint, save_checkpoint, save_inverter, GanBundle, RngState};
use rpgan::config::{DataConfig, RunConfig};
use rpgan::data::{atomic_write, mixture_centers, write_grid};
use rpgan::error::Error;
use rpgan::fusion::{benchmark_fusion, fuse_buckets, plan_random, verify_fusion};
use rpgan::generator::Generator;
use rpgan::lifecycle::{
    edit_route, extend, incremental_train, invert, train_inverter, ExtensionSpec, InitMode,
    InverterCfg,
};
use rpgan::tensor::Tensor;
use rpgan::train::TrainSession;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "rpgan",
    about = "Random-path generator toolkit: train, analyze, fuse, extend, invert",
    version,
    after_long_help = CONFIG_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

const CONFIG_HELP: &str = "\
Run configs are plain text `section.key = value` files. Sections and keys:
  arch.kind = mlp|conv|linear, plus per-kind shape keys:
    mlp:    arch.z_dim, arch.hidden, arch.out_dim, arch.m
    conv:   arch.z_dim, arch.stem (CxHxW), arch.channels, arch.out_channels, arch.m
    linear: arch.shapes, arch.m
  disc.hidden, disc.channels (critic widths)
  train.loss = hinge-sn|wgan-penalty, train.lr, train.beta1, train.beta2,
    train.d_steps, train.batch, train.steps, train.seed,
    train.diversity_weight, train.penalty_coef, train.train_z
  data.kind = ring|idx, plus data.modes/radius/sigma/count or
    data.path/labels/colorize/keep_labels
  out.dir
Unknown keys are rejected; each run writes its resolved.cfg beside the
outputs. RPGAN_THREADS caps the worker count of parallel analysis and
inverter training.";

#[derive(Subcommand)]
enum Command {
    /// Train a generator/critic pair from a config file.
    Train(TrainArgs),
    /// Per-bucket diversity ratios and qualitative grids from a checkpoint.
    Analyze(AnalyzeArgs),
    /// Fuse a contiguous range of dense buckets and benchmark the result.
    Fuse(FuseArgs),
    /// Append fresh instances to buckets, optionally with incremental training.
    Extend(ExtendArgs),
    /// Train per-bucket route classifiers on generated images.
    Invert(InvertArgs),
    /// Sample images/points from a checkpointed generator.
    Generate(GenerateArgs),
    /// Perturb one layer of a single-instance generator with Gaussian noise.
    Noise(NoiseArgs),
    /// Train one model per instance-count value and tabulate the outcomes.
    SweepNin(SweepArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (section.key = value).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's step count.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image metric: color, semantic or pixel.
    #[arg(long, default_value = "color")]
    metric: String,
    /// Independent base routes to average over.
    #[arg(long, default_value_t = 100)]
    routes: usize,
    /// Images generated per varied bucket.
    #[arg(long, default_value_t = 4)]
    per_bucket: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Inclusive 1-based bucket range, e.g. 3..5.
    #[arg(long)]
    range: String,
    /// Instances in the fused bucket.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 30)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum tolerated |fused - composed| during verification.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtendArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Instances appended per bucket, e.g. 5,5,0,0.
    #[arg(long)]
    add: String,
    /// Initialization: random or clone-perturb.
    #[arg(long, default_value = "random")]
    init: String,
    /// Noise level for clone-perturb.
    #[arg(long, default_value_t = 0.02)]
    perturb_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional config for incremental training of the new instances.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Allow the fixed input to keep training during the incremental phase.
    #[arg(long, default_value_t = false)]
    train_z: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Generated images used for training plus holdout.
    #[arg(long, default_value_t = 5000)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 4)]
    cols: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// 1-based layer (bucket) index to perturb.
    #[arg(long)]
    layer: usize,
    /// Comma-separated noise levels.
    #[arg(long, default_value = "0.01,0.1,1.0")]
    sigma: String,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Instance counts to sweep, e.g. 5,10,15.
    #[arg(long)]
    values: String,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() {
    if let Ok(v) = std::env::var("RPGAN_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Extend(a) => cmd_extend(a),
        Command::Invert(a) => cmd_invert(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Noise(a) => cmd_noise(a),
        Command::SweepNin(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => 3,
        Error::Verification(_) => 4,
        _ => 2,
    }
}

type CmdResult = Result<(), Error>;

fn run_training(cfg: &RunConfig) -> Result<(TrainSession<f32>, GanBundle), Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let gen = cfg.build_generator(&mut rng)?;
    let disc = cfg.build_discriminator(&mut rng)?;
    let data = cfg.build_dataset(&mut rng)?;
    let mut session = TrainSession::new(gen, disc, cfg.train.clone())?;
    session.run(&data, cfg.train.steps)?;
    let bundle = GanBundle {
        generator: session.gen.clone(),
        discriminator: Some(session.disc.clone()),
        optimizers: Some((session.opt_g.clone(), session.opt_d.clone())),
        seed: cfg.train.seed,
        rng_state: Some(RngState {
            seed: session.rng.get_seed(),
            word_pos: session.rng.get_word_pos(),
        }),
        steps_done: session.step as u64,
    };
    Ok((session, bundle))
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::parse_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    let (session, bundle) = run_training(&cfg)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    atomic_write(
        &cfg.out_dir.join("resolved.cfg"),
        cfg.resolved_text().as_bytes(),
    )?;
    save_checkpoint(&bundle, cfg.out_dir.join("checkpoint.rpgn"))?;
    session.report.write_csv(cfg.out_dir.join("report.csv"))?;
    println!(
        "trained {} steps; checkpoint and report in {}",
        session.step,
        cfg.out_dir.display()
    );
    Ok(())
}

fn load_generator(path: &Path) -> Result<GanBundle, Error> {
    load_checkpoint(path)
}

fn is_image_shape(shape: &[usize]) -> bool {
    shape.len() == 3 && (shape[0] == 1 || shape[0] == 3)
}

fn cmd_analyze(args: AnalyzeArgs) -> CmdResult {
    let bundle = load_generator(&args.checkpoint)?;
    let gen = bundle.generator;
    let metric = ImageMetric::parse(&args.metric)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let report = diversity_ratio(
        &gen,
        metric,
        bundle.discriminator.as_ref(),
        args.routes,
        args.per_bucket,
        &mut rng,
    )?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    report.write_csv(args.out.join("diversity.csv"))?;

    // qualitative grids: one row per varied bucket, when samples are images
    let shape = gen.output_sample_shape()?;
    if is_image_shape(&shape) {
        let base = gen.sample_route(&mut rng);
        for l in 0..gen.buckets.len() {
            let k = args.per_bucket.min(gen.buckets[l].len());
            let spec = FrozenRouteSpec {
                base_route: base.clone(),
                vary_bucket: l,
                instance_subset: None,
            };
            let (images, _) = freeze_and_vary(&gen, &spec, k, &mut rng)?;
            let ext = if shape[0] == 1 { "pgm" } else { "ppm" };
            write_grid(&images, k, args.out.join(format!("bucket_{}.{ext}", l + 1)))?;
        }
    }
    println!(
        "diversity over {} routes ({} skipped) in {}",
        report.routes_used,
        report.routes_skipped,
        args.out.display()
    );
    Ok(())
}

fn parse_range(s: &str) -> Result<(usize, usize), Error> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| Error::Config(format!("range: expected a..b, got '{s}'")))?;
    let first: usize = a
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad range start '{a}'")))?;
    let last: usize = b
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad range end '{b}'")))?;
    if first == 0 || last < first {
        return Err(Error::Config(format!(
            "range '{s}' must be 1-based and increasing"
        )));
    }
    Ok((first - 1, last - 1))
}

fn cmd_fuse(args: FuseArgs) -> CmdResult {
    let bundle = load_generator(&args.checkpoint)?;
    let gen = bundle.generator.clone();
    let (first, last) = parse_range(&args.range)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let plan = plan_random(&gen, first, last, args.count, &mut rng)?;
    let fused = fuse_buckets(&gen, &plan)?;

    let worst = verify_fusion(&gen, &fused, &plan, 50.max(args.count), &mut rng)?;
    if worst > args.tolerance {
        return Err(Error::Verification(format!(
            "fused outputs diverge: max abs diff {worst:e} exceeds {:e}",
            args.tolerance
        )));
    }
    let bench = benchmark_fusion(&gen, &fused, &plan, args.batch, args.reps, &mut rng)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    bench.write_csv(args.out.join("bench.csv"))?;
    let fused_bundle = GanBundle {
        generator: fused,
        discriminator: bundle.discriminator,
        optimizers: None,
        seed: bundle.seed,
        rng_state: None,
        steps_done: bundle.steps_done,
    };
    save_checkpoint(&fused_bundle, args.out.join("fused.rpgn"))?;
    println!(
        "fused buckets {}..{}: max abs diff {worst:.3e}, speedup x{:.2}, range flops {} -> {}",
        first + 1,
        last + 1,
        bench.speedup,
        bench.composed_range_flops,
        bench.fused_range_flops
    );
    Ok(())
}

fn cmd_extend(args: ExtendArgs) -> CmdResult {
    let bundle = load_generator(&args.checkpoint)?;
    let added: Vec<usize> = args
        .add
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad extension count '{p}'")))
        })
        .collect::<Result<_, Error>>()?;
    let init = match args.init.as_str() {
        "random" => InitMode::Random,
        "clone-perturb" => InitMode::ClonePerturb {
            std: args.perturb_std,
        },
        other => {
            return Err(Error::Config(format!(
                "init: expected random|clone-perturb, got '{other}'"
            )))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let spec = ExtensionSpec { added, init };
    let mut extended = extend(&bundle.generator, &spec, &mut rng)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut disc = bundle
        .discriminator
        .clone()
        .ok_or_else(|| Error::Contract("checkpoint carries no critic to continue".into()))?;
    if let Some(train_cfg_path) = &args.train_config {
        let cfg = RunConfig::parse_file(train_cfg_path)?;
        let mut train = cfg.train.clone();
        train.train_z = args.train_z;
        let mut data_rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xda7a);
        let data = cfg.build_dataset(&mut data_rng)?;
        let report = incremental_train(&mut extended, &mut disc, &data, &train)?;
        report.write_csv(args.out.join("report.csv"))?;
        atomic_write(
            &args.out.join("resolved.cfg"),
            cfg.resolved_text().as_bytes(),
        )?;
    }
    let out_bundle = GanBundle {
        generator: extended,
        discriminator: Some(disc),
        optimizers: None,
        seed: args.seed,
        rng_state: None,
        steps_done: bundle.steps_done,
    };
    save_checkpoint(&out_bundle, args.out.join("extended.rpgn"))?;
    println!(
        "extended to instance counts {:?} in {}",
        out_bundle.generator.instance_counts(),
        args.out.display()
    );
    Ok(())
}

fn cmd_invert(args: InvertArgs) -> CmdResult {
    let bundle = load_generator(&args.checkpoint)?;
    let gen = bundle.generator;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let cfg = InverterCfg {
        epochs: args.epochs,
        ..InverterCfg::default()
    };
    let (inverter, report) = train_inverter(&gen, args.samples, &cfg, &mut rng)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    report.write_csv(args.out.join("accuracy.csv"))?;
    save_inverter(&inverter, args.out.join("inverter.rpgn"))?;

    // round-trip demonstration: generate, invert, re-render, edit
    let route = gen.sample_route(&mut rng);
    let image = gen.forward(&route)?;
    let recovered = invert(&inverter, &image)?;
    let edited = edit_route(&gen, &recovered, 0, 0)?;
    let _ = gen.forward(&edited)?;
    let one_based = |r: &rpgan::generator::Route| -> String {
        r.0.iter()
            .map(|&x| (x + 1).to_string())
            .collect::<Vec<_>>()
            .join("-")
    };
    println!(
        "inverter accuracies {:?}; sample route {} recovered as {}",
        report
            .accuracy
            .iter()
            .map(|a| format!("{a:.3}"))
            .collect::<Vec<_>>(),
        one_based(&route),
        one_based(&recovered)
    );
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> CmdResult {
    let bundle = load_generator(&args.checkpoint)?;
    let gen = bundle.generator;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (batch, routes) = gen.batch_forward(args.count, &mut rng)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let mut csv = String::from("sample,route\n");
    for (i, r) in routes.iter().enumerate() {
        let one_based: Vec<String> = r.0.iter().map(|&x| (x + 1).to_string()).collect();
        csv.push_str(&format!("{},{}\n", i, one_based.join("-")));
    }
    atomic_write(&args.out.join("routes.csv"), csv.as_bytes())?;

    let shape = gen.output_sample_shape()?;
    if is_image_shape(&shape) {
        let images: Vec<Tensor<f32>> = (0..args.count)
            .map(|i| batch.slice_sample(i))
            .collect::<Result<_, Error>>()?;
        let ext = if shape[0] == 1 { "pgm" } else { "ppm" };
        write_grid(&images, args.cols, args.out.join(format!("samples.{ext}")))?;
    } else {
        let mut pts = String::from("sample,x,y\n");
        for i in 0..args.count {
            let p = batch.slice_sample(i)?;
            pts.push_str(&format!("{},{},{}\n", i, p.data()[0], p.data()[1]));
        }
        atomic_write(&args.out.join("points.csv"), pts.as_bytes())?;
    }
    println!("generated {} samples in {}", args.count, args.out.display());
    Ok(())
}

fn cmd_noise(args: NoiseArgs) -> CmdResult {
    let bundle = load_generator(&args.checkpoint)?;
    let gen = bundle.generator;
    if args.layer == 0 || args.layer > gen.buckets.len() {
        return Err(Error::Config(format!(
            "layer must be 1..={}",
            gen.buckets.len()
        )));
    }
    let sigmas: Vec<f64> = args
        .sigma
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad sigma '{p}'")))
        })
        .collect::<Result<_, Error>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let (base, routes) = gen.batch_forward(args.count, &mut rng)?;
    let mut csv = String::from("sigma,mean_pixel_distance\n");
    let shape = gen.output_sample_shape()?;
    for &sigma in &sigmas {
        let noisy = noise_inject(&gen, args.layer - 1, sigma, &mut rng)?;
        let mut total = 0.0;
        let mut imgs = Vec::new();
        for (i, route) in routes.iter().enumerate() {
            let a = base.slice_sample(i)?;
            let b = noisy.forward(route)?;
            let n = a.numel() as f64;
            total += a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| (x as f64 - y as f64).abs())
                .sum::<f64>()
                / n;
            if imgs.len() < 8 {
                imgs.push(b);
            }
        }
        csv.push_str(&format!("{},{}\n", sigma, total / routes.len() as f64));
        if is_image_shape(&shape) {
            let ext = if shape[0] == 1 { "pgm" } else { "ppm" };
            write_grid(
                &imgs,
                imgs.len(),
                args.out.join(format!("noise_{sigma}.{ext}")),
            )?;
        }
    }
    atomic_write(&args.out.join("noise.csv"), csv.as_bytes())?;
    println!("noise sweep written to {}", args.out.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> CmdResult {
    let mut cfg = RunConfig::parse_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let mut values: Vec<usize> = args
        .values
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad sweep value '{p}'")))
        })
        .collect::<Result<_, Error>>()?;
    let before = values.len();
    values.sort_unstable();
    values.dedup();
    if values.len() != before {
        eprintln!("warning: duplicate sweep values removed");
    }
    if values.is_empty() || values.contains(&0) {
        return Err(Error::Config("sweep values must be positive".into()));
    }

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut csv = String::from("n_in,steps,loss_d,loss_g,diversity,modes_covered\n");
    for &v in &values {
        let mut run = cfg.clone();
        run.arch = cfg.arch.with_uniform_m(v);
        run.out_dir = cfg.out_dir.join(format!("nin_{v}"));
        let (session, bundle) = run_training(&run)?;
        std::fs::create_dir_all(&run.out_dir).map_err(|e| Error::io(&run.out_dir, e))?;
        save_checkpoint(&bundle, run.out_dir.join("checkpoint.rpgn"))?;
        session.report.write_csv(run.out_dir.join("report.csv"))?;
        let last = session.report.rows.last();
        let modes = match &run.data {
            DataConfig::Ring {
                modes,
                radius,
                sigma,
                ..
            } => {
                let covered = count_modes(&session.gen, *modes, *radius, *sigma, cfg.train.seed)?;
                covered.to_string()
            }
            _ => String::new(),
        };
        csv.push_str(&format!(
            "{v},{},{},{},{},{modes}\n",
            session.step,
            last.map_or(f64::NAN, |r| r.loss_d),
            last.map_or(f64::NAN, |r| r.loss_g),
            last.map_or(f64::NAN, |r| r.diversity),
        ));
    }
    atomic_write(&cfg.out_dir.join("sweep.csv"), csv.as_bytes())?;
    atomic_write(
        &cfg.out_dir.join("resolved.cfg"),
        cfg.resolved_text().as_bytes(),
    )?;
    println!("sweep over {values:?} written to {}", cfg.out_dir.display());
    Ok(())
}

fn count_modes(
    gen: &Generator<f32>,
    modes: usize,
    radius: f64,
    sigma: f64,
    seed: u64,
) -> Result<usize, Error> {
    let centers = mixture_centers(modes, radius);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
    let (batch, _) = gen.batch_forward(512, &mut rng)?;
    let mut covered = vec![false; modes];
    for i in 0..512 {
        let p = batch.slice_sample(i)?;
        let (x, y) = (p.data()[0] as f64, p.data()[1] as f64);
        for (ci, c) in centers.iter().enumerate() {
            if ((x - c[0]).powi(2) + (y - c[1]).powi(2)).sqrt() <= 3.0 * sigma {
                covered[ci] = true;
            }
        }
    }
    Ok(covered.iter().filter(|&&c| c).count())
}
