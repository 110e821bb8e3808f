//! `gftnn-aec`: process a microphone/reference pair, score a manifest, or
//! render a simulated test set.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 I/O or processing,
//! 3 model load.

use std::path::PathBuf;
use std::process::ExitCode;

use aec_core::aec::FilterKind;
use aec_core::audio::{read_wav, write_wav, WavFormat};
use aec_core::features::Combo;
use aec_core::pipeline::{evaluate, Pipeline, PipelineConfig};
use aec_core::simulation::{build_testset, GridConfig, Manifest, Sources};
use aec_core::AecError;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "gftnn-aec", version, about = "Hybrid DSP and neural acoustic echo canceller")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterArg {
    Mdf,
    Wrls,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum ComboArg {
    Dx,
    Ex,
    Dey,
}

/// Flags shared by `process` and `eval`; each overrides the config file.
#[derive(clap::Args)]
struct PipelineArgs {
    /// JSON pipeline config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    filter: Option<FilterArg>,
    #[arg(long, value_enum)]
    tde: Option<Switch>,
    #[arg(long, value_enum)]
    combo: Option<ComboArg>,
    /// Post-filter weights in GFTW format.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Off expects 16 kHz input and skips the band split.
    #[arg(long, value_enum)]
    subband: Option<Switch>,
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineConfig, AecError> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(f) = self.filter {
            cfg.filter = match f {
                FilterArg::Mdf => FilterKind::Mdf,
                FilterArg::Wrls => FilterKind::Wrls,
                FilterArg::None => FilterKind::None,
            };
        }
        if let Some(t) = self.tde {
            cfg.tde = t.into();
        }
        if let Some(c) = self.combo {
            cfg.combo = match c {
                ComboArg::Dx => Combo::Dx,
                ComboArg::Ex => Combo::Ex,
                ComboArg::Dey => Combo::Dey,
            };
        }
        if let Some(m) = &self.model {
            cfg.model = Some(m.clone());
        }
        if let Some(s) = self.subband {
            cfg.subband = s.into();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Cancel echo in one recording.
    Process {
        #[arg(long)]
        mic: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Score every entry of a manifest and print the results table.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render a simulated test set and its manifest.
    Simulate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory with near/, far/ and noise/ WAV files; synthetic when absent.
        #[arg(long)]
        sources: Option<PathBuf>,
    },
}

fn exit_code(err: &AecError) -> u8 {
    match err {
        AecError::Config(_) => 1,
        AecError::Load(_) => 3,
        _ => 2,
    }
}

fn run(cmd: Command) -> Result<(), AecError> {
    match cmd {
        Command::Process { mic, reference, out, pipeline } => {
            let cfg = pipeline.resolve()?;
            let mic = read_wav(mic)?;
            let reference = read_wav(reference)?;
            let p = Pipeline::new(cfg)?;
            let (s_hat, report) = p.process(&mic, &reference)?;
            write_wav(out, &s_hat, WavFormat::Float32)?;
            print!("{report}");
        }
        Command::Eval { manifest, pipeline, csv } => {
            let cfg = pipeline.resolve()?;
            let manifest = Manifest::load(&manifest)?;
            let label = format!("filter={} tde={} combo={} model={}", cfg.filter, cfg.tde, cfg.combo, cfg.model.is_some());
            let p = Pipeline::new(cfg)?;
            let (table, _) = evaluate(&manifest, &p, &label)?;
            print!("{}", table.to_text());
            if let Some(path) = csv {
                std::fs::write(path, table.to_csv())?;
            }
        }
        Command::Simulate { grid, out_dir, seed, sources } => {
            let grid = GridConfig::load(grid)?;
            let sources = match sources {
                Some(dir) => Sources::from_dir(dir)?,
                None => Sources::synthetic(),
            };
            let manifest = build_testset(&sources, &grid, &out_dir, seed)?;
            println!("entries={}", manifest.entries.len());
            println!("manifest={}", out_dir.join("manifest.txt").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
