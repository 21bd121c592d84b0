use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use clap::{Parser, Subcommand, ValueEnum};

use noiseadapt::config::RunConfig;
use noiseadapt::data::{format_sig9, generate_stream, write_csv, write_tensor};
use noiseadapt::diffusion::NoiseSchedule;
use noiseadapt::models::ModelBundle;
use noiseadapt::pipeline::{load_models, save_models, train_models};
use noiseadapt::stream::{autoencoder_upper_bound, run_oracle, run_stream, Summary, Variant};
use noiseadapt::{Error, Result};

#[derive(Parser)]
#[command(name = "noiseadapt", version, about = "Stream-adaptive video prediction with a frozen latent diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// `key = value` config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Streaming variant (overrides `variant`).
    #[arg(long, global = true)]
    variant: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the autoencoder and denoiser and write their parameter files.
    Train,
    /// Run one stream and write per-step CSV and summary.
    Stream,
    /// Sweep one setting over its default grid and several seeds.
    Ablate {
        #[arg(long, value_enum)]
        sweep: Sweep,
    },
    /// Best-of-k oracle and autoencoder upper bound on one stream.
    Oracle,
    /// Print the default configuration.
    Defaults,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Sweep {
    P,
    Lambda,
    EveryK,
    Steps,
    Eta,
}

impl Sweep {
    fn name(self) -> &'static str {
        match self {
            Sweep::P => "p",
            Sweep::Lambda => "lambda",
            Sweep::EveryK => "every_k",
            Sweep::Steps => "steps",
            Sweep::Eta => "eta",
        }
    }

    fn grid(self) -> &'static [&'static str] {
        match self {
            Sweep::P => &["0", "0.25", "0.5", "0.75", "0.9", "1"],
            Sweep::Lambda => &["0", "0.0005", "0.002", "0.01"],
            Sweep::EveryK => &["1", "2", "5", "10"],
            Sweep::Steps => &["5", "10", "20"],
            Sweep::Eta => &["0", "0.5", "1"],
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(v) = &cli.variant {
        config.stream.variant = v.parse()?;
    }
    config.validate()?;
    Ok(config)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn prepare_out(config: &RunConfig, name: &str) -> Result<()> {
    fs::create_dir_all(&config.out).map_err(|e| Error::Io { path: config.out.clone(), source: e })?;
    write_text(&config.out.join(format!("{name}.config")), &config.to_text())
}

fn curve_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{i},{}\n", format_sig9(*l)));
    }
    write_text(path, &text)
}

fn cmd_train(config: &RunConfig) -> Result<()> {
    prepare_out(config, "train")?;
    let models = train_models(&config.train)?;
    let files = save_models(&config.model_dir, &models, config.train.feature_seed)?;
    curve_csv(&config.out.join("autoencoder_curve.csv"), &models.autoencoder_report.losses)?;
    curve_csv(&config.out.join("denoiser_curve.csv"), &models.denoiser_report.losses)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn load(config: &RunConfig) -> Result<(ModelBundle, NoiseSchedule)> {
    let (bundle, schedule) = load_models(&config.model_dir, config.train.model)?;
    if schedule != config.schedule()? {
        return Err(Error::InvalidConfig("schedule in config differs from the trained model's".into()));
    }
    Ok((bundle, schedule))
}

fn cmd_stream(config: &RunConfig) -> Result<()> {
    let name = format!("{}_seed{}", config.stream.variant, config.seed);
    prepare_out(config, &name)?;
    let (bundle, schedule) = load(config)?;
    let clips = generate_stream(&config.stream_spec())?;
    let run = run_stream(&bundle, &schedule, clips, &config.stream, &mut config.rng())?;
    write_csv(&run.records, &config.out.join(format!("{name}.csv")))?;
    let summary = run.summary.to_text();
    write_text(&config.out.join(format!("{name}.summary")), &summary)?;
    if let Some(traj) = run.noise_trajectory() {
        write_tensor(&config.out.join(format!("{name}_noise.nft")), &traj)?;
    }
    print!("{summary}");
    Ok(())
}

struct Row {
    value: &'static str,
    seed: u64,
    variant: Variant,
    summary: Summary,
}

fn cmd_ablate(config: &RunConfig, sweep: Sweep) -> Result<()> {
    let name = format!("ablate_{}", sweep.name());
    prepare_out(config, &name)?;
    let (bundle, schedule) = load(config)?;
    let mut jobs = Vec::new();
    for &value in sweep.grid() {
        for i in 0..config.sweep_seeds as u64 {
            let mut c = config.clone();
            c.seed = config.seed + i;
            if let Sweep::Eta = sweep {
                // Noise optimisation needs deterministic sampling, so eta only varies the frozen sampler.
                c.stream.variant = Variant::Frozen;
            }
            c.set(sweep.name(), value)?;
            c.validate()?;
            jobs.push((value, c));
        }
    }
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (jobs, next, bundle, schedule) = (&jobs, &next, &bundle, &schedule);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((value, c)) = jobs.get(i) else { break };
                let result = generate_stream(&c.stream_spec())
                    .and_then(|clips| run_stream(bundle, schedule, clips, &c.stream, &mut c.rng()))
                    .map(|run| Row { value, seed: c.seed, variant: c.stream.variant, summary: run.summary });
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut rows: Vec<(usize, Result<Row>)> = rx.into_iter().collect();
    rows.sort_by_key(|(i, _)| *i);
    let mut text = String::new();
    let mut header = false;
    for (_, row) in rows {
        let row = row?;
        let entries = row.summary.entries();
        if !header {
            let keys: Vec<&str> = entries.iter().map(|(k, _)| *k).collect();
            text.push_str(&format!("{},seed,variant,{}\n", sweep.name(), keys.join(",")));
            header = true;
        }
        let values: Vec<String> = entries.into_iter().map(|(_, v)| v).collect();
        text.push_str(&format!("{},{},{},{}\n", row.value, row.seed, row.variant, values.join(",")));
    }
    let path = config.out.join(format!("{name}.csv"));
    write_text(&path, &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_oracle(config: &RunConfig) -> Result<()> {
    let name = format!("oracle_seed{}", config.seed);
    prepare_out(config, &name)?;
    let (bundle, schedule) = load(config)?;
    let clips = generate_stream(&config.stream_spec())?;
    let steps = run_oracle(&bundle, &schedule, &config.stream.sampler, &clips, config.oracle_k, &mut config.rng())?;
    let ub = autoencoder_upper_bound(bundle.autoencoder.as_ref(), &clips)?;
    let mut text = String::from("step,single_ssim,best_ssim,best_psnr,upper_bound_ssim\n");
    for (o, u) in steps.iter().zip(&ub.ssim) {
        let f = format_sig9;
        text.push_str(&format!("{},{},{},{},{}\n", o.step, f(o.single_ssim), f(o.best_ssim), f(o.best_psnr), f(*u)));
    }
    write_text(&config.out.join(format!("{name}.csv")), &text)?;
    let n = steps.len() as f64;
    let single = steps.iter().map(|o| o.single_ssim).sum::<f64>() / n;
    let best = steps.iter().map(|o| o.best_ssim).sum::<f64>() / n;
    let summary = format!(
        "k = {}\nmean_single_ssim = {}\nmean_best_ssim = {}\nupper_bound_ssim = {}\nupper_bound_psnr = {}\n",
        config.oracle_k,
        format_sig9(single),
        format_sig9(best),
        format_sig9(ub.mean_ssim),
        format_sig9(ub.mean_psnr)
    );
    write_text(&config.out.join(format!("{name}.summary")), &summary)?;
    print!("{summary}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let config = resolve(cli)?;
    match cli.command {
        Command::Train => cmd_train(&config),
        Command::Stream => cmd_stream(&config),
        Command::Ablate { sweep } => cmd_ablate(&config, sweep),
        Command::Oracle => cmd_oracle(&config),
        Command::Defaults => {
            print!("{}", RunConfig::default().to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(std::io::stderr(), "error: {}: {msg}", e.class());
            ExitCode::from(2)
        }
    }
}
