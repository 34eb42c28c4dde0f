use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use demoscope::datasets::index_dataset;
use demoscope::harness::{self, HarnessError, ReportFormat, RunConfig};
use demoscope::taxonomy::DatasetId;

#[derive(Parser)]
#[command(name = "demoscope", version, about = "Zero-shot age, gender and race inference with image-capable chat models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index a dataset directory and save the index as JSON.
    Ingest {
        #[arg(long)]
        dataset: DatasetId,
        #[arg(long)]
        root: PathBuf,
        /// Label CSV (FairFace, CACD). Defaults to the only CSV in the root.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Where to write the index. Defaults to `<dataset>_index.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an evaluation described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Fixture file for the scripted mock client.
        #[arg(long)]
        mock: Option<PathBuf>,
    },
    /// Compare finished runs in one table.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Allow runs over different datasets.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value = "md")]
        format: ReportFormat,
    },
    /// Index a dataset directory and print label histograms and skipped files.
    Validate {
        #[arg(long)]
        dataset: DatasetId,
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
}

fn ingest(dataset: DatasetId, root: PathBuf, labels: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), HarnessError> {
    if !root.is_dir() {
        return Err(HarnessError::DatasetMissing(format!("{} is not a directory", root.display())));
    }
    let labels = harness::find_labels(dataset, &root, labels.as_deref())?;
    let (index, skipped) = index_dataset(dataset, &root, labels.as_deref())?;
    let out = out.unwrap_or_else(|| PathBuf::from(format!("{dataset}_index.json")));
    index.save(&out)?;
    println!("indexed {} {} samples into {}", index.len(), dataset, out.display());
    if !skipped.is_empty() {
        let path = out.with_extension("skipped.txt");
        std::fs::write(&path, skipped.to_text()).map_err(|e| HarnessError::Io {
            path: path.clone(),
            message: e.to_string(),
        })?;
        println!("skipped {} entries, listed in {}", skipped.len(), path.display());
    }
    Ok(())
}

async fn run(config: PathBuf, mock: Option<PathBuf>) -> Result<(), HarnessError> {
    let config = RunConfig::load(&config)?;
    let artifacts = harness::run(&config, mock.as_deref()).await?;
    print!("{}", harness::render_markdown(std::slice::from_ref(&artifacts.metrics)));
    println!("artifacts written to {}", artifacts.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest {
            dataset,
            root,
            labels,
            out,
        } => ingest(dataset, root, labels, out),
        Command::Run { config, mock } => match tokio::runtime::Runtime::new() {
            Ok(rt) => rt.block_on(run(config, mock)),
            Err(e) => Err(HarnessError::Io {
                path: PathBuf::new(),
                message: format!("cannot start runtime: {e}"),
            }),
        },
        Command::Report { dirs, force, format } => harness::report(&dirs, force, format).map(|text| print!("{text}")),
        Command::Validate { dataset, root, labels } => {
            harness::validate(dataset, &root, labels.as_deref()).map(|d| print!("{}", d.to_text()))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
