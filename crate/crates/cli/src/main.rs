//! Command-line driver for the retrieval model.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/parse error, 4 numeric
//! failure (non-finite loss or score).

use std::path::Path;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use mamfusion_core::config::RunConfig;
use mamfusion_core::data_io::heatmap::{head_mean, write_map};
use mamfusion_core::data_io::{
    generate_synthetic, load_checkpoint, save_checkpoint, Corpus, Manifest, SyntheticSpec,
};
use mamfusion_core::error::Error;
use mamfusion_core::model::MamFusion;
use mamfusion_core::training::{evaluate, toggles_from, LossTrace, Trainer};
use mamfusion_core::video_encoder::Toggles;

#[derive(Parser)]
#[command(
    name = "mamfusion",
    about = "Partially-relevant video retrieval at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Module {
    Mamba,
    Ttv,
    Tvt,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic partially-relevant corpus.
    Synth {
        /// Spec file (key = value lines).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for feature files and manifest.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint plus loss trace.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Corpus manifest.
        #[arg(long)]
        data: PathBuf,
        /// Output directory (checkpoint.mmck, loss_trace.csv).
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint: prints R@K metrics, writes a report file.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Score with unfused sentence vectors (no pairwise fusion).
        #[arg(long)]
        fast_mode: bool,
        /// Disable a module at evaluation time (repeatable).
        #[arg(long = "disable", value_enum)]
        disable: Vec<Module>,
        /// Report file path (defaults to <checkpoint>.report.txt).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Export fusion attention maps for one (caption, video) pair as CSV
    /// and binary portable graymaps: <out>.{tvt,ttv}.{csv,pgm}.
    Heatmap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Caption id from the manifest.
        #[arg(long)]
        query: String,
        /// Video id from the manifest.
        #[arg(long)]
        video: String,
        /// Output path stem.
        #[arg(long)]
        out: PathBuf,
        /// Corpus manifest (falls back to the config's `manifest` key).
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(), // 0 for --help/--version, 2 for usage errors
    };
    match dispatch(cli) {
        Ok(()) => std::process::exit(0),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::Numeric { .. } => 4,
        Error::Config { .. } => 2,
        _ => 3,
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { spec, out } => {
            let spec = SyntheticSpec::load(&spec)?;
            generate_synthetic(&spec, &out)?;
            println!("wrote {} videos to {}", spec.n_videos, out.display());
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            seed,
        } => train(&config, &data, &out, seed),
        Command::Eval {
            config,
            data,
            checkpoint,
            fast_mode,
            disable,
            report,
        } => eval(
            &config,
            &data,
            &checkpoint,
            fast_mode,
            &disable,
            report.as_deref(),
        ),
        Command::Heatmap {
            config,
            checkpoint,
            query,
            video,
            out,
            data,
        } => heatmap(&config, &checkpoint, &query, &video, &out, data.as_deref()),
    }
}

fn toggles_with_disabled(base: Toggles, disable: &[Module]) -> Toggles {
    let mut t = base;
    for m in disable {
        match m {
            Module::Mamba => t.mamba = false,
            Module::Ttv => t.ttv = false,
            Module::Tvt => t.tvt = false,
        }
    }
    t
}

fn train(config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> Result<(), Error> {
    let mut run = RunConfig::load(config)?;
    if let Some(seed) = seed {
        run.train.seed = seed;
    }
    let manifest = Manifest::load(data)?;
    let corpus: Corpus<f32> = Corpus::load(&manifest)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.display().to_string(),
        what: e.to_string(),
    })?;

    let model = MamFusion::<f32>::new(run.model.clone(), run.train.seed)?;
    let mut trainer = Trainer::new(model, run.train.clone())?;
    let mut trace = LossTrace::default();
    for epoch in 1..=run.train.epochs {
        let started = Instant::now();
        let mean_loss = trainer.train_epoch(&corpus)?;
        trace.push(epoch, mean_loss, started.elapsed().as_millis() as u64);
        println!("epoch {epoch}/{} mean_loss {mean_loss}", run.train.epochs);
    }
    let ckpt_path = out.join("checkpoint.mmck");
    save_checkpoint(&trainer.model, &ckpt_path)?;
    std::fs::write(out.join("loss_trace.csv"), trace.to_csv()).map_err(|e| Error::Io {
        path: out.display().to_string(),
        what: e.to_string(),
    })?;
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

fn eval(
    config: &Path,
    data: &Path,
    checkpoint: &Path,
    fast_mode: bool,
    disable: &[Module],
    report_path: Option<&Path>,
) -> Result<(), Error> {
    let run = RunConfig::load(config)?;
    let manifest = Manifest::load(data)?;
    let corpus: Corpus<f32> = Corpus::load(&manifest)?;
    let mut model = MamFusion::<f32>::new(run.model.clone(), run.train.seed)?;
    load_checkpoint(&mut model, checkpoint)?;

    let toggles = toggles_with_disabled(toggles_from(&run.train), disable);
    let fast = fast_mode || run.train.fast_mode;
    let outcome = evaluate(&model, &corpus, fast, toggles)?;
    print!("{}", outcome.report.to_key_value());
    if outcome.zero_norm_events > 0 {
        eprintln!(
            "warning: {} zero-norm vectors scored as 0",
            outcome.zero_norm_events
        );
    }
    let default_report = checkpoint.with_extension("mmck.report.txt");
    let report_path = report_path.unwrap_or(&default_report);
    std::fs::write(report_path, outcome.report.to_key_value()).map_err(|e| Error::Io {
        path: report_path.display().to_string(),
        what: e.to_string(),
    })?;
    Ok(())
}

fn heatmap(
    config: &Path,
    checkpoint: &Path,
    query: &str,
    video: &str,
    out: &Path,
    data: Option<&Path>,
) -> Result<(), Error> {
    let run = RunConfig::load(config)?;
    let data = match (data, &run.manifest) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => p.clone(),
        (None, None) => {
            return Err(Error::Config {
                what: "heatmap needs --data or a `manifest` key in the config".into(),
            })
        }
    };
    let manifest = Manifest::load(&data)?;
    let corpus: Corpus<f32> = Corpus::load(&manifest)?;
    let mut model = MamFusion::<f32>::new(run.model.clone(), run.train.seed)?;
    load_checkpoint(&mut model, checkpoint)?;

    let caption = corpus
        .captions
        .iter()
        .find(|c| c.id == query)
        .ok_or_else(|| Error::Parse {
            path: data.display().to_string(),
            line: 0,
            what: format!("no caption with id '{query}'"),
        })?;
    let video_entry = corpus
        .videos
        .iter()
        .find(|v| v.id == video)
        .ok_or_else(|| Error::Parse {
            path: data.display().to_string(),
            line: 0,
            what: format!("no video with id '{video}'"),
        })?;

    let text = model.encode_text(&caption.words)?;
    let video_repr = model.encode_video(&video_entry.frames, &Toggles::all())?;
    let scorer = model.scorer(false, Toggles::all());
    let pair = scorer.score_pair(&text, &video_repr)?;
    let fused = pair.fused.expect("full toggles always fuse");
    let tvt = head_mean(fused.tvt_weights.as_ref().expect("tvt enabled"));
    let ttv = head_mean(fused.ttv_weights.as_ref().expect("ttv enabled"));

    write_map(out, "tvt", &tvt)?;
    write_map(out, "ttv", &ttv)?;
    println!("score {}", pair.score);
    println!(
        "wrote {}.tvt.csv/.pgm and {}.ttv.csv/.pgm",
        out.display(),
        out.display()
    );
    Ok(())
}
