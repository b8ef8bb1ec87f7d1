//! `attnlens`: the batch pipeline from raw speeds to snapshots, plus the
//! snapshot server.

mod dataset;
mod export;
mod manifest;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use attnlens_core::data::synth::{synth_generate, SynthConfig};
use attnlens_core::data::{
    aggregate_5min, chronological_split, daily_trend, load_raw_readings_csv, load_speed_csv, RoadId,
    SpeedPanel, SpeedUnit, SplitSpec,
};
use attnlens_core::dependency::{
    causality_scan_with, dtw_matrix, elbow_suggest, granger_pairs_with, spectral_cluster, DistanceMatrix,
    LagCriterion, DEFAULT_DTW_WINDOW, DEFAULT_MAX_LAG,
};
use attnlens_core::enforcement::{EnforcementConfig, EnforcementReport, TargetPool};
use attnlens_core::metrics::{compute_errors, quartile_cohorts, ErrorTable, HistoricalAverage};
use attnlens_core::model::{load_checkpoint, save_checkpoint, train, window_starts, Horizon, ModelConfig};
use attnlens_core::snapshot::{build_snapshot, Snapshot, SnapshotConfig, SnapshotInputs};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dataset::{Dataset, DatasetMeta};
use manifest::{beside, Run};

#[derive(Parser)]
#[command(name = "attnlens", version, about = "Attention diagnostics for spatio-temporal traffic forecasters")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted clusters and lead/lag links.
    Synth(SynthArgs),
    /// Turn speed readings and a road graph into a dataset directory.
    Ingest(IngestArgs),
    /// Train the forecaster on a dataset.
    Train(TrainArgs),
    /// Dependency and error analytics on a dataset.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Precompute everything the server needs into an immutable snapshot.
    Snapshot(SnapshotArgs),
    /// Run attention enforcement against a snapshot.
    Enforce(EnforceArgs),
    /// Serve a snapshot over HTTP.
    Serve(ServeArgs),
    /// Write histogram CSV and SVG for an enforcement report.
    Export(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    TwoCluster,
    Ulsan,
    La,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, conflicts_with = "config", default_value = "ulsan", required = false)]
    preset: Preset,
    /// Generator settings as JSON (see README).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Measurement noise std for a preset; incident noise is 1.5 times this.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Gridded `timestamp,road_id,speed` rows.
    #[arg(long, conflicts_with = "readings", required_unless_present = "readings")]
    speeds: Option<PathBuf>,
    /// Irregular `timestamp,road_id,speed` readings, averaged into 5-minute cells.
    #[arg(long)]
    readings: Option<PathBuf>,
    /// `from_id,to_id,weight` edges.
    #[arg(long)]
    graph: PathBuf,
    /// `road_id,lat,lon` rows.
    #[arg(long)]
    coords: Option<PathBuf>,
    #[arg(long, default_value = "kmh")]
    unit: SpeedUnit,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Full `ModelConfig` as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    ffn_width: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    windows_per_epoch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Segment {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Criterion {
    Aic,
    Bic,
}

impl From<Criterion> for LagCriterion {
    fn from(c: Criterion) -> Self {
        match c {
            Criterion::Aic => LagCriterion::Aic,
            Criterion::Bic => LagCriterion::Bic,
        }
    }
}

#[derive(Subcommand)]
enum Analyze {
    /// Pairwise DTW distances between daily trends.
    Dtw {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DTW_WINDOW)]
        window: usize,
        #[arg(long, value_enum, default_value = "train")]
        segment: Segment,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spectral clustering of a distance matrix.
    Cluster {
        #[arg(long)]
        distances: PathBuf,
        /// Cluster count; the elbow suggestion when omitted.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 8)]
        k_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Granger tests of candidate roads against one target (or every road).
    Granger {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: Option<String>,
        /// Candidate causes; every other road when omitted.
        #[arg(long, value_delimiter = ',')]
        candidates: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_MAX_LAG)]
        max_lag: usize,
        #[arg(long, value_enum, default_value = "bic")]
        lag_criterion: Criterion,
        #[arg(long, value_enum, default_value = "train")]
        segment: Segment,
        /// Print non-significant pairs too.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-road forecast errors on the test segment, cohorts and the
    /// historical-average baseline.
    Errors {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "15", value_parser = parse_horizon)]
        horizon: Horizon,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SnapshotArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long, default_value_t = 8)]
    k_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "15", value_parser = parse_horizon)]
    horizon: Horizon,
    #[arg(long, default_value_t = DEFAULT_DTW_WINDOW)]
    dtw_window: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_LAG)]
    max_lag: usize,
    #[arg(long, value_enum, default_value = "bic")]
    lag_criterion: Criterion,
    /// Windows sampled for the head-cluster matrices.
    #[arg(long)]
    head_cluster_windows: Option<usize>,
}

#[derive(Args)]
struct EnforceArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    clusters: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Defaults to the snapshot's cohort horizon.
    #[arg(long, value_parser = parse_horizon)]
    horizon: Option<Horizon>,
    /// Draw targets from this fraction of highest-MAE roads instead of the top quartile.
    #[arg(long)]
    top_fraction: Option<f64>,
    /// Give every head the head-mean enforced row.
    #[arg(long)]
    head_mean: bool,
    /// Evaluate every `stride`-th test window.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    stride: u64,
    /// Report JSON; a CSV with the same stem is written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Concurrent enforcement jobs.
    #[arg(long, default_value_t = 2)]
    workers: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_horizon(s: &str) -> Result<Horizon, String> {
    let minutes: u32 = s.parse().map_err(|_| format!("{s:?} is not a number of minutes"))?;
    Horizon::new(minutes).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train_cmd(a),
        Command::Analyze(a) => analyze(a),
        Command::Snapshot(a) => snapshot(a),
        Command::Enforce(a) => enforce(a),
        Command::Serve(a) => serve(a),
        Command::Export(a) => export_cmd(a),
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut run = Run::new("synth");
    let config = match &a.config {
        Some(path) => {
            run.input(path);
            read_json::<SynthConfig>(path)?
        }
        None => match a.preset {
            Preset::TwoCluster => SynthConfig::two_cluster(a.noise),
            Preset::Ulsan => SynthConfig::ulsan_style(a.noise),
            Preset::La => SynthConfig::la_style(a.noise),
        },
    };
    let (panel, network, truth) = synth_generate(&config, a.seed)?;
    let meta = DatasetMeta {
        name: config.name.clone(),
        unit: config.unit,
    };
    Dataset::write(&a.out, &meta, &panel, &network)?;
    write_json(&a.out.join("truth.json"), &truth)?;
    write_json(&a.out.join("synth.json"), &config)?;
    run.seed(a.seed).config(&config).output(&a.out).write(&beside(&a.out))?;
    println!(
        "{}: {} roads, {} steps, {} planted links -> {}",
        config.name,
        panel.num_roads(),
        panel.len(),
        truth.causal_links.len(),
        a.out.display()
    );
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let mut run = Run::new("ingest");
    let raw = match (&a.speeds, &a.readings) {
        (Some(p), _) => {
            run.input(p);
            load_speed_csv(p, a.unit)?
        }
        (None, Some(p)) => {
            run.input(p);
            aggregate_5min(&load_raw_readings_csv(p)?, a.unit)?
        }
        (None, None) => bail!("one of --speeds or --readings is required"),
    };
    run.input(&a.graph);
    if let Some(c) = &a.coords {
        run.input(c);
    }
    let network = dataset::network_for(&raw, &a.graph, a.coords.as_deref())?;
    let name = a.name.clone().unwrap_or_else(|| {
        a.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
    });
    let meta = DatasetMeta { name, unit: a.unit };
    Dataset::write(&a.out, &meta, &raw, &network)?;
    // Fails here, not at training time, if a road has no usable readings.
    Dataset::load(&a.out)?;
    run.output(&a.out).write(&beside(&a.out))?;
    println!(
        "{}: {} roads, {} steps, {} missing cells -> {}",
        meta.name,
        raw.num_roads(),
        raw.len(),
        raw.imputed_count(),
        a.out.display()
    );
    Ok(())
}

fn segment(panel: &SpeedPanel, which: Segment) -> Result<SpeedPanel> {
    let (train, _, test) = chronological_split(panel, &SplitSpec::default())?;
    Ok(match which {
        Segment::Train => train,
        Segment::Test => test,
        Segment::All => panel.clone(),
    })
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut run = Run::new("train");
    let mut config = match &a.config {
        Some(p) => {
            run.input(p);
            read_json::<ModelConfig>(p)?
        }
        None => ModelConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { config.$f = v; })* };
    }
    set!(epochs, heads, width, ffn_width, encoder_layers, decoder_layers, learning_rate, batch_size, patience, seed);
    if a.windows_per_epoch.is_some() {
        config.windows_per_epoch = a.windows_per_epoch;
    }
    config.validate()?;
    let data = Dataset::load(&a.data)?;
    let (tr, va, _) = chronological_split(&data.panel, &SplitSpec::default())?;
    let model = train(&tr, &va, &data.network, &config)?;
    save_checkpoint(&model, &a.out)?;
    for p in Dataset::files(&a.data) {
        run.input(p);
    }
    run.seed(config.seed).config(&config).output(&a.out).write(&beside(&a.out))?;
    println!("model -> {}", a.out.display());
    Ok(())
}

fn analyze(a: Analyze) -> Result<()> {
    match a {
        Analyze::Dtw {
            data,
            window,
            segment: which,
            out,
        } => {
            let mut run = Run::new("analyze dtw");
            let ds = Dataset::load(&data)?;
            let panel = segment(&ds.panel, which)?;
            let ids = panel.roads().to_vec();
            let trends = ids.iter().map(|r| daily_trend(&panel, r)).collect::<attnlens_core::Result<Vec<_>>>()?;
            let d = dtw_matrix(&ids, &trends, window)?;
            write_json(&out, &d)?;
            for p in Dataset::files(&data) {
                run.input(p);
            }
            run.config(&window).output(&out).write(&beside(&out))?;
            let off = d.off_diagonal();
            let mean = off.iter().sum::<f64>() / off.len().max(1) as f64;
            println!("{} roads, mean pairwise distance {mean:.3} -> {}", d.len(), out.display());
        }
        Analyze::Cluster {
            distances,
            k,
            k_max,
            seed,
            out,
        } => {
            let mut run = Run::new("analyze cluster");
            let d: DistanceMatrix = read_json(&distances)?;
            let elbow = elbow_suggest(&d, k_max.min(d.len().saturating_sub(1)), seed)?;
            let k = k.unwrap_or(elbow.suggested_k);
            let mut clusters = spectral_cluster(&d, k, seed)?;
            clusters.elbow = elbow.curve;
            write_json(&out, &clusters)?;
            run.seed(seed).input(&distances).output(&out).write(&beside(&out))?;
            for p in &clusters.elbow {
                println!("k={:<2} inertia={:.4}", p.k, p.inertia);
            }
            println!("elbow suggests k={}, using k={k}", elbow.suggested_k);
            for c in 0..clusters.k {
                let members: Vec<String> = clusters.members(c).iter().map(|r| r.to_string()).collect();
                println!("cluster {c}: {}", members.join(", "));
            }
            if clusters.degenerate {
                tracing::warn!("distance matrix is degenerate; assignment is arbitrary");
            }
        }
        Analyze::Granger {
            data,
            target,
            candidates,
            max_lag,
            lag_criterion,
            segment: which,
            all,
            out,
        } => {
            let mut run = Run::new("analyze granger");
            let ds = Dataset::load(&data)?;
            let panel = segment(&ds.panel, which)?;
            let criterion = LagCriterion::from(lag_criterion);
            let targets: Vec<RoadId> = match target {
                Some(t) => vec![known(&panel, &t)?],
                None => panel.roads().to_vec(),
            };
            let candidates: Vec<RoadId> = if candidates.is_empty() {
                panel.roads().to_vec()
            } else {
                candidates.iter().map(|c| known(&panel, c)).collect::<Result<_>>()?
            };
            let mut results = Vec::new();
            for t in &targets {
                let found = if all {
                    granger_pairs_with(t, &candidates, &panel, max_lag, criterion)?
                } else {
                    causality_scan_with(t, &candidates, &panel, max_lag, criterion)?
                };
                for r in &found {
                    println!("{r}");
                }
                results.extend(found);
            }
            for p in Dataset::files(&data) {
                run.input(p);
            }
            if let Some(out) = out {
                write_json(&out, &results)?;
                run.config(&(max_lag, criterion)).output(&out).write(&beside(&out))?;
            }
        }
        Analyze::Errors {
            data,
            model,
            horizon,
            out,
        } => {
            let mut run = Run::new("analyze errors");
            let ds = Dataset::load(&data)?;
            let state = load_checkpoint(&model)?;
            let (tr, _, test) = chronological_split(&ds.panel, &SplitSpec::default())?;
            let starts = window_starts(test.len(), true);
            if starts.is_empty() {
                bail!("test segment is too short for a single forecast window");
            }
            let errors = compute_errors(&state.predict(&test, &starts)?, &test)?;
            let baseline = compute_errors(&HistoricalAverage::fit(&tr).predict(&test, &starts)?, &test)?;
            let cohorts = quartile_cohorts(&errors, horizon)?;
            std::fs::create_dir_all(&out)?;
            let csv = std::fs::File::create(out.join("errors.csv"))?;
            errors.write_csv(std::io::BufWriter::new(csv))?;
            write_json(&out.join("errors.json"), &errors)?;
            write_json(&out.join("baseline_errors.json"), &baseline)?;
            write_json(&out.join("cohorts.json"), &cohorts)?;
            for p in Dataset::files(&data) {
                run.input(p);
            }
            run.input(&model).config(&horizon).output(&out).write(&beside(&out))?;
            for h in &errors.horizons {
                println!(
                    "{:>2} min: model MAE {:.3}, historical average {:.3}",
                    h.minutes(),
                    mean_mae(&errors, *h),
                    mean_mae(&baseline, *h)
                );
            }
            println!(
                "cohorts at {} min: Q1 {:.3}, Q3 {:.3}, {} low, {} high",
                horizon.minutes(),
                cohorts.q1,
                cohorts.q3,
                cohorts.low.len(),
                cohorts.high.len()
            );
        }
    }
    Ok(())
}

fn known(panel: &SpeedPanel, id: &str) -> Result<RoadId> {
    let road = RoadId::new(id);
    if panel.road_index(&road).is_none() {
        bail!("unknown road {id}");
    }
    Ok(road)
}

fn mean_mae(table: &ErrorTable, h: Horizon) -> f64 {
    let maes = table.maes(h);
    maes.iter().map(|(_, m)| m).sum::<f64>() / maes.len().max(1) as f64
}

fn snapshot(a: SnapshotArgs) -> Result<()> {
    let mut run = Run::new("snapshot");
    let ds = Dataset::load(&a.data)?;
    let mut config = SnapshotConfig {
        clusters: a.clusters,
        k_max: a.k_max,
        seed: a.seed,
        horizon: a.horizon,
        dtw_window: a.dtw_window,
        max_lag: a.max_lag,
        lag_criterion: a.lag_criterion.into(),
        ..SnapshotConfig::default()
    };
    if let Some(w) = a.head_cluster_windows {
        config.head_cluster_windows = w;
    }
    let inputs = SnapshotInputs {
        dataset: ds.meta.name.clone(),
        panel: ds.panel,
        checkpoint: a.model.clone(),
    };
    let manifest = build_snapshot(&inputs, &config, &a.out)?;
    for p in Dataset::files(&a.data) {
        run.input(p);
    }
    run.seed(a.seed)
        .config(&config)
        .input(&a.model)
        .output(&a.out)
        .write(&beside(&a.out))?;
    println!("snapshot {} -> {}", manifest.id, a.out.display());
    Ok(())
}

fn enforce(a: EnforceArgs) -> Result<()> {
    let mut run = Run::new("enforce");
    let snap = Snapshot::load(&a.snapshot)?;
    let config = EnforcementConfig {
        clusters: a.clusters.clone(),
        k: a.k,
        alpha: a.alpha,
        horizon: a.horizon.unwrap_or(snap.cohorts.horizon),
        pool: match a.top_fraction {
            Some(f) => TargetPool::TopFraction(f),
            None => TargetPool::HighCohort,
        },
        per_head: !a.head_mean,
        max_lag: snap.manifest.config.max_lag,
    };
    config.validate()?;
    let report = attnlens_server::run_enforcement(&snap, &config, a.stride as usize)?;
    for w in &report.plan.warnings {
        tracing::warn!("{w}");
    }
    write_json(&a.out, &report)?;
    let csv_path = a.out.with_extension("csv");
    report.write_csv(std::io::BufWriter::new(std::fs::File::create(&csv_path)?))?;
    run.config(&(&config, a.stride))
        .input(a.snapshot.join(attnlens_core::snapshot::MANIFEST_FILE))
        .output(&a.out)
        .output(&csv_path)
        .write(&beside(&a.out))?;
    for t in &report.targets {
        if let Some(h) = t.at(report.horizon) {
            println!(
                "{} (reference {}): MAE {:.3} -> {:.3}",
                t.road, t.reference, h.mae_before, h.mae_after
            );
        }
    }
    let s = &report.summary;
    println!(
        "mean MAE {:.3} -> {:.3} over {} windows, {:.0}% of targets improved",
        s.mean_mae_before,
        s.mean_mae_after,
        report.windows,
        s.fraction_improved * 100.0
    );
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let snap = Snapshot::load(&a.snapshot)?;
    println!("serving snapshot {} on http://{}", snap.id(), a.bind);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(attnlens_server::serve(snap, a.bind, a.workers))?;
    Ok(())
}

fn export_cmd(a: ExportArgs) -> Result<()> {
    let mut run = Run::new("export");
    let report: EnforcementReport = read_json(&a.report)?;
    std::fs::create_dir_all(&a.out)?;
    export::histogram_csv(&report.histogram, &a.out.join("histogram.csv"))?;
    std::fs::write(a.out.join("histogram.svg"), export::histogram_svg(&report))?;
    report.write_csv(std::io::BufWriter::new(std::fs::File::create(a.out.join("targets.csv"))?))?;
    run.input(&a.report).output(&a.out).write(&beside(&a.out))?;
    println!("exported -> {}", a.out.display());
    Ok(())
}
