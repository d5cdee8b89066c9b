use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dnt_bench::dataset::{load_dataset, load_sequence};
use dnt_bench::maps::write_frame_maps;
use dnt_bench::protocol::{evaluate, variants, Protocol, ResultLog};
use dnt_bench::report::{emit_report, summary};
use dnt_bench::results::{read_rects, sidecar_path, write_rects, RectWriter, Sidecar};
use dnt_bench::runner::{track_sequence, BackboneChoice};
use dnt_bench::selftest::{self, Status};
use dnt_core::tracking::TrackerConfig;

#[derive(Parser)]
#[command(name = "dnt", version, about = "Dual-network visual tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackboneKind {
    Pretrained,
    Test,
}

#[derive(clap::Args)]
struct TrackerArgs {
    /// Flat `key = value` configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    backbone: BackboneKind,
    /// VGG-16 tensor archive for `--backbone pretrained`.
    #[arg(long, env = "DNT_WEIGHTS")]
    weights: Option<PathBuf>,
    /// Overrides `rng_seed`; also seeds the test backbone.
    #[arg(long)]
    seed: Option<u64>,
}

impl TrackerArgs {
    fn resolve(&self) -> Result<(TrackerConfig, BackboneChoice)> {
        let mut cfg = match &self.config {
            Some(p) => TrackerConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrackerConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.rng_seed = s;
        }
        let backbone = match self.backbone {
            BackboneKind::Test => BackboneChoice::Test { seed: cfg.rng_seed },
            BackboneKind::Pretrained => match &self.weights {
                Some(w) => BackboneChoice::Pretrained { weights: w.clone() },
                None => bail!("--backbone pretrained needs --weights or DNT_WEIGHTS"),
            },
        };
        Ok((cfg, backbone))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Track one OTB-layout sequence and write `x,y,w,h` per frame.
    Track {
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write boundary, output, extracted and reference maps per frame.
        #[arg(long)]
        debug_maps: Option<PathBuf>,
        #[command(flatten)]
        tracker: TrackerArgs,
    },
    /// Score result logs against a dataset and write tables and plots.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, env = "DNT_DATA")]
        data: PathBuf,
        #[arg(long, default_value = "ope")]
        protocol: Protocol,
        #[arg(long)]
        out: PathBuf,
        /// Run the tracker for every result log that is missing.
        #[arg(long)]
        run: bool,
        #[command(flatten)]
        tracker: TrackerArgs,
    },
    /// Run the built-in checks and print one line per check.
    Selftest {
        /// Sequence for the pretrained-backbone check.
        #[arg(long, env = "DNT_SEQUENCE")]
        sequence: Option<PathBuf>,
        #[arg(long, env = "DNT_WEIGHTS")]
        weights: Option<PathBuf>,
    },
}

fn track(sequence: &Path, out: &Path, debug_maps: Option<&Path>, args: &TrackerArgs) -> Result<()> {
    let seq = load_sequence(sequence)?;
    let (cfg, backbone) = args.resolve()?;
    let v = variants(Protocol::Ope, &seq)[0];
    let mut writer = RectWriter::create(out)?;
    writer.push(&v.init)?;
    let mut sidecar = Sidecar::create(&sidecar_path(out), &seq.name, &v, cfg.rng_seed)?;
    if let Some(dir) = debug_maps {
        std::fs::create_dir_all(dir)?;
    }
    track_sequence(&seq, &v, &cfg, &backbone, |report, tracker| {
        writer.push(&report.rect)?;
        sidecar.push(report)?;
        if let (Some(dir), Some(maps)) = (debug_maps, tracker.last_maps()) {
            write_frame_maps(maps, report.frame, dir)?;
        }
        Ok(())
    })?;
    log::info!("{}: {} frames -> {}", seq.name, seq.len(), out.display());
    Ok(())
}

fn eval(results: &Path, data: &Path, protocol: Protocol, out: &Path, run: bool, args: &TrackerArgs) -> Result<()> {
    let sequences = load_dataset(data)?;
    if sequences.is_empty() {
        bail!("no sequences with groundtruth_rect.txt under {}", data.display());
    }
    let resolved = if run { Some(args.resolve()?) } else { None };
    std::fs::create_dir_all(results)?;
    let mut logs = Vec::new();
    for seq in &sequences {
        for v in variants(protocol, seq) {
            let path = results.join(ResultLog::file_name(&seq.name, &v));
            let rects = match (&resolved, path.exists()) {
                (_, true) => read_rects(&path)?,
                (Some((cfg, backbone)), false) => {
                    log::info!("running {} {} {}", seq.name, protocol, v.id);
                    let rects = track_sequence(seq, &v, cfg, backbone, |_, _| Ok(()))?;
                    write_rects(&path, &rects)?;
                    rects
                }
                (None, false) => bail!("missing result log {} (pass --run to generate it)", path.display()),
            };
            logs.push(ResultLog { sequence: seq.name.clone(), variant: v, rects });
        }
    }
    let report = evaluate(protocol, &sequences, &logs)?;
    emit_report(&report, out)?;
    print!("{}", summary(&report));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Track { sequence, out, debug_maps, tracker } => track(sequence, out, debug_maps.as_deref(), tracker),
        Command::Eval { results, data, protocol, out, run, tracker } => eval(results, data, *protocol, out, *run, tracker),
        Command::Selftest { sequence, weights } => {
            let outcomes = selftest::run_all(sequence.as_deref(), weights.as_deref());
            for o in &outcomes {
                println!("{o}");
            }
            if outcomes.iter().any(|o| o.status == Status::Fail) {
                return ExitCode::FAILURE;
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
