use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mssdepth::config::RunConfig;
use mssdepth::events::{read_events, Geometry, StackMode};
use mssdepth::harness::{
    evaluate_checkpoint, predict, prediction_pgm, prediction_text, stack_window, train, Dataset,
};
use mssdepth::model::checkpoint::load_checkpoint;
use mssdepth::synth::{dataset_manifest, generate, SceneSpec, WINDOW_US};
use mssdepth::tensor::io::write_tensor;
use mssdepth::{Error, Result};

/// Spiking U-Net depth estimation from event-camera streams.
#[derive(Parser, Debug)]
#[command(name = "mssdepth", version)]
struct Cli {
    /// Overrides the seed of the config or scene spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppresses progress output.
    #[arg(long, global = true)]
    quiet: bool,
    /// Prints the effective run configuration (defaults merged with
    /// `--config` when given) and exits.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generates a synthetic stereo dataset from a scene spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stacks one window of events into an SPKT tensor [T, C, H, W].
    Stack {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        events_right: Option<PathBuf>,
        #[arg(long = "T", default_value_t = 5)]
        time_steps: usize,
        #[arg(long, default_value_t = 50)]
        window_ms: u64,
        #[arg(long, default_value_t = 0)]
        window_start_ms: u64,
        #[arg(long, default_value = "cumulative")]
        mode: StackMode,
        #[arg(long, default_value_t = 260)]
        height: usize,
        #[arg(long, default_value_t = 346)]
        width: usize,
        /// Clamps counts to {0, 1}.
        #[arg(long)]
        binarize: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a model; writes train.log, last.spkc and best.spkc.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continues from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Prints the metrics report of a checkpoint over a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Writes PREFIX.txt (raw depth grid) and PREFIX.pgm for one window.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        events_right: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        window_start_ms: u64,
        /// Depth mapped to white in the PGM.
        #[arg(long, default_value_t = 10.0)]
        max_depth: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints firing rates, AC operations and the dense-MAC baseline.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.command {
        Some(Command::Train {
            config: Some(path), ..
        }) => RunConfig::read(path)?,
        _ => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if cli.dump_config {
        print!("{}", run_config(&cli)?.to_text());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(Error::Validation("no command given; see --help".into()));
    };
    match command {
        Command::Synth { spec, out } => {
            let mut s = SceneSpec::read(spec)?;
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let scene = generate(&s)?;
            fs::create_dir_all(out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let manifest = dataset_manifest(&s, &scene, out)?;
            println!("{}", manifest.display());
        }
        Command::Stack {
            events,
            events_right,
            time_steps,
            window_ms,
            window_start_ms,
            mode,
            height,
            width,
            binarize,
            out,
        } => {
            let left = read_events(events)?;
            let right = events_right.as_deref().map(read_events).transpose()?;
            let mut t = stack_window(
                &left,
                right.as_deref(),
                window_start_ms * 1000,
                window_ms * 1000,
                *time_steps,
                *mode,
                Geometry::new(*height, *width),
            )?;
            if *binarize {
                t = t.binarized();
            }
            write_tensor(out, &t.data)?;
            if !cli.quiet {
                println!("{} shape={:?}", out.display(), t.data.shape());
            }
        }
        Command::Train {
            data,
            out,
            resume,
            ..
        } => {
            let cfg = run_config(&cli)?;
            let data = data
                .clone()
                .or_else(|| (!cfg.data_dir.is_empty()).then(|| PathBuf::from(&cfg.data_dir)))
                .ok_or_else(|| Error::Validation("no dataset: pass --data or set data_dir".into()))?;
            let out = out
                .clone()
                .or_else(|| (!cfg.out_dir.is_empty()).then(|| PathBuf::from(&cfg.out_dir)))
                .ok_or_else(|| Error::Validation("no output directory: pass --out or set out_dir".into()))?;
            let dataset = Dataset::load(&data)?;
            fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            write(&out.join("config.txt"), &cfg.to_text())?;
            let outcome = train(&cfg, &dataset, &out, resume.as_deref(), !cli.quiet)?;
            if !cli.quiet {
                println!("checkpoint={}", outcome.last_checkpoint.display());
            }
        }
        Command::Eval { model, data } => {
            let ck = load_checkpoint(model)?;
            let report = evaluate_checkpoint(&ck, &Dataset::load(data)?)?;
            print!("{}", report.metrics_text());
        }
        Command::Predict {
            model,
            events,
            events_right,
            window_start_ms,
            max_depth,
            out,
        } => {
            if !(*max_depth > 0.0) {
                return Err(Error::Validation(format!("--max-depth must be > 0, got {max_depth}")));
            }
            let ck = load_checkpoint(model)?;
            let left = read_events(events)?;
            let right = events_right.as_deref().map(read_events).transpose()?;
            let start = window_start_ms * 1000;
            let depth = predict(&ck, &left, right.as_deref(), start)?;
            let txt = PathBuf::from(format!("{}.txt", out.display()));
            let pgm = PathBuf::from(format!("{}.pgm", out.display()));
            write(&txt, &prediction_text(&depth, start + WINDOW_US))?;
            write(&pgm, &prediction_pgm(&depth, *max_depth))?;
            if !cli.quiet {
                println!("{}\n{}", txt.display(), pgm.display());
            }
        }
        Command::Inspect { model, data } => {
            let ck = load_checkpoint(model)?;
            let report = evaluate_checkpoint(&ck, &Dataset::load(data)?)?;
            print!("{}", report.inspect_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
