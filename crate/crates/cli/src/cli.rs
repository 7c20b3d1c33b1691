//! Command-line interface. Exit status is 0 on success, 1 on a domain
//! error and 2 on a usage error.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cellscout_core::analytics::{dominant_labels, RegionOrigin};
use cellscout_core::bench::{generate_synthetic, run_benchmark, BenchConfig, SyntheticSpec};
use cellscout_core::matrix::TableFormat;
use cellscout_core::miner::associations::select_k_with_progress;
use cellscout_core::miner::{train_with_progress, MinerConfig};
use cellscout_core::{ExpressionMatrix, NormalizationMethod, NormalizationSpec};

use crate::api::{router, AppState};
use crate::error::{AppError, AppResult};
use crate::store::{LabelSet, Store, MODEL_FILE};

pub const DEFAULT_PORT: u16 = 8080;
pub const PORT_ENV: &str = "CELLSCOUT_PORT";

#[derive(Debug, Parser)]
#[command(name = "cellscout", version, about = "Association mining for single-cell expression data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Normalization {
    Log1pZscore,
    Log1pOnly,
    None,
}

impl From<Normalization> for NormalizationSpec {
    fn from(n: Normalization) -> Self {
        let method = match n {
            Normalization::Log1pZscore => NormalizationMethod::Log1pZscore,
            Normalization::Log1pOnly => NormalizationMethod::Log1pOnly,
            Normalization::None => NormalizationMethod::None,
        };
        NormalizationSpec {
            method,
            ..Default::default()
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct Target {
    /// Store directory.
    pub store: PathBuf,
    /// Dataset id; may be omitted when the store holds one dataset.
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// JSON file with a (partial) miner configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub genes_per_expert: Option<usize>,
}

impl TrainArgs {
    fn config(&self, k: Option<usize>) -> AppResult<MinerConfig> {
        let mut c = match &self.config {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
            None => MinerConfig::default(),
        };
        if let Some(k) = k {
            c.k = k;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.genes_per_expert {
            c.genes_per_expert = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Copy an expression CSV into a store as a new dataset.
    Ingest {
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        name: Option<String>,
        /// CSV of `cell_id,label` ground-truth classes.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Normalization::Log1pZscore)]
        normalization: Normalization,
    },
    /// Generate planted-state data with labels into a store.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synthetic")]
        name: String,
        #[arg(long, default_value_t = 3)]
        states: usize,
        #[arg(long, default_value_t = 200)]
        cells_per_state: usize,
        #[arg(long, default_value_t = 60)]
        genes: usize,
        #[arg(long, default_value_t = 8)]
        markers: usize,
        #[arg(long, default_value_t = 3.0)]
        lift: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train the miner and store the model.
    Train {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Train once per candidate k and report informativeness.
    SweepK {
        #[command(flatten)]
        target: Target,
        #[arg(long, value_delimiter = ',', required = true)]
        candidates: Vec<usize>,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Compare the model embedding with PCA against the stored labels.
    Benchmark {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = 5)]
        knn_k: usize,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
    /// Create a region from cell ids, a ground-truth class or an association.
    Region {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        name: String,
        #[arg(long, value_delimiter = ',', group = "members")]
        cells: Option<Vec<String>>,
        #[arg(long, group = "members")]
        label: Option<String>,
        #[arg(long, group = "members")]
        association: Option<usize>,
    },
    /// Score a biomarker on two regions and append it to the history.
    Verify {
        #[command(flatten)]
        target: Target,
        #[arg(long, value_delimiter = ',', required = true)]
        genes: Vec<String>,
        #[arg(long)]
        pos: String,
        #[arg(long)]
        neg: String,
    },
    /// Serve the HTTP API.
    Serve {
        store: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.code());
            let usage = matches!(e, AppError::AmbiguousDataset(_) | AppError::BadRequest(_));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn out(text: &str) -> AppResult<()> {
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(text.as_bytes())?;
    if !text.ends_with('\n') {
        stdout.write_all(b"\n")?;
    }
    Ok(())
}

fn execute(command: Command) -> AppResult<()> {
    match command {
        Command::Ingest {
            csv,
            out: root,
            name,
            labels,
            normalization,
        } => {
            let matrix = ExpressionMatrix::load(&csv, TableFormat::from_path(&csv)).map_err(AppError::Parse)?;
            let labels = labels
                .map(|p| -> AppResult<LabelSet> { LabelSet::from_csv(&std::fs::read_to_string(p)?, &matrix) })
                .transpose()?;
            let report = matrix.validate();
            if !report.is_clean() {
                eprintln!(
                    "warning: {} zero-variance genes, {} all-zero cells",
                    report.zero_variance_genes.len(),
                    report.zero_cells.len()
                );
            }
            let name = name.unwrap_or_else(|| {
                csv.file_stem()
                    .map_or("dataset".into(), |s| s.to_string_lossy().into_owned())
            });
            let id = Store::open(root)?.ingest(&name, &matrix, normalization.into(), labels.as_ref())?;
            out(&id)
        }
        Command::Synth {
            out: root,
            name,
            states,
            cells_per_state,
            genes,
            markers,
            lift,
            noise,
            seed,
        } => {
            let spec = SyntheticSpec {
                n_states: states,
                cells_per_state,
                n_genes: genes,
                markers_per_state: markers,
                marker_lift: lift,
                noise_sd: noise,
                seed,
            };
            let data = generate_synthetic(&spec)?;
            let labels = LabelSet {
                classes: (0..states).map(|s| format!("state{s}")).collect(),
                labels: data.labels,
            };
            let id = Store::open(root)?.ingest(&name, &data.matrix, NormalizationSpec::default(), Some(&labels))?;
            out(&id)
        }
        Command::Train { target, k, args } => {
            let config = args.config(k)?;
            let store = Store::open(&target.store)?;
            let mut ds = store.load(&store.resolve(target.dataset.as_deref())?)?;
            let step = (config.epochs / 10).max(1);
            let trained = train_with_progress(&ds.normalized, &config, |r| {
                if (r.epoch + 1) % step == 0 || r.epoch + 1 == r.epochs {
                    eprintln!("epoch {}/{} loss {:.6}", r.epoch + 1, r.epochs, r.loss.total);
                }
            })?;
            let summary = format!(
                "dataset {} k {} epochs {} seed {} informativeness {:.4} final_loss {:.6}",
                ds.id(),
                config.k,
                config.epochs,
                config.seed,
                trained.informativeness,
                trained.history.last().map_or(f64::NAN, |l| l.total),
            );
            ds.install_model(trained)?;
            out(&summary)?;
            out(&format!("model {}", ds.dir.join(MODEL_FILE).display()))
        }
        Command::SweepK {
            target,
            candidates,
            args,
        } => {
            let template = args.config(None)?;
            let store = Store::open(&target.store)?;
            let ds = store.load(&store.resolve(target.dataset.as_deref())?)?;
            let report = select_k_with_progress(&ds.normalized, &template, &candidates, |row| {
                match (row.informativeness, &row.error) {
                    (Some(v), _) => eprintln!("k {} informativeness {v:.4}", row.k),
                    (None, e) => eprintln!("k {} failed {}", row.k, e.as_deref().unwrap_or("")),
                }
            })?;
            out(&report.to_table())
        }
        Command::Benchmark {
            target,
            knn_k,
            split_seed,
        } => {
            let store = Store::open(&target.store)?;
            let ds = store.load(&store.resolve(target.dataset.as_deref())?)?;
            let config = BenchConfig {
                knn_k,
                split_seed,
                ..Default::default()
            };
            let report = run_benchmark(&ds.normalized, &ds.labels()?.labels, ds.model()?, &config)?;
            out(&report.to_csv())
        }
        Command::Region {
            target,
            name,
            cells,
            label,
            association,
        } => {
            let store = Store::open(&target.store)?;
            let mut ds = store.load(&store.resolve(target.dataset.as_deref())?)?;
            let (members, origin) = if let Some(ids) = cells {
                (cellscout_core::matrix::resolve_cells(&ds.raw, &ids)?, RegionOrigin::Manual)
            } else if let Some(class) = label {
                let labels = ds.labels()?;
                let c = labels
                    .classes
                    .iter()
                    .position(|n| *n == class)
                    .ok_or_else(|| AppError::not_found("label", class))?;
                let members = (0..labels.labels.len()).filter(|&i| labels.labels[i] == c).collect();
                (members, RegionOrigin::Manual)
            } else if let Some(u) = association {
                let model = ds.model()?;
                if u >= model.associations.len() {
                    return Err(AppError::not_found("association", u.to_string()));
                }
                let dominant = dominant_labels(&model.associations);
                let members = (0..dominant.len()).filter(|&i| dominant[i] == u).collect();
                (members, RegionOrigin::PureRegion)
            } else {
                return Err(AppError::BadRequest(
                    "one of --cells, --label or --association is required".into(),
                ));
            };
            let region = ds.add_region(&name, members, origin)?;
            out(&format!("{} {}", region.id, region.cell_indices.len()))
        }
        Command::Verify {
            target,
            genes,
            pos,
            neg,
        } => {
            let store = Store::open(&target.store)?;
            let mut ds = store.load(&store.resolve(target.dataset.as_deref())?)?;
            let card = ds.verify(&genes, &pos, &neg)?;
            out(&serde_json::to_string_pretty(&card)?)
        }
        Command::Serve { store, port, host } => {
            let port = match std::env::var(PORT_ENV) {
                Ok(v) => v
                    .parse()
                    .map_err(|_| AppError::BadRequest(format!("{PORT_ENV}={v:?} is not a port")))?,
                Err(_) => port,
            };
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|_| AppError::BadRequest(format!("bad address {host}:{port}")))?;
            serve(Store::open(store)?, addr)
        }
    }
}

fn serve(store: Store, addr: SocketAddr) -> AppResult<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(AppState::new(store)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
