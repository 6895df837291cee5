use std::fs;
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing::info;
use tracing_subscriber::EnvFilter;

use tilepress::autoscaler::ScalerConfig;
use tilepress::bench::{self, BenchConfig, BenchError, Mode, SlideBatch, Workflow};
use tilepress::clock::{Clock, WallClock};
use tilepress::conversion::{
    convert_slide, slide_id_for_key, ConversionService, DicomSink, HttpDicomSink, ServiceConfig,
};
use tilepress::dicom::DEFAULT_UID_ROOT;
use tilepress::dicom_store::{self, DicomStore};
use tilepress::http::{HttpServer, Request};
use tilepress::object_store::{BucketConfig, ObjectStore};
use tilepress::wsi::{generate_base_only, generate_slide};

#[derive(Parser)]
#[command(
    name = "tilepress",
    version,
    about = "Whole-slide image to DICOM conversion pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the serial / parallel / event-driven benchmark.
    Bench(BenchArgs),
    /// Write a batch of synthetic SPYR slides.
    Gen(GenArgs),
    /// Convert one SPYR file into a local DICOM store.
    Convert(ConvertArgs),
    /// Serve the conversion endpoint (POST /push, GET /healthz).
    Serve(ServeArgs),
    /// Serve a DICOM store over HTTP.
    Store(StoreArgs),
}

fn duration(s: &str) -> Result<Duration, humantime::DurationError> {
    humantime::parse_duration(s)
}

#[derive(Args)]
struct BenchArgs {
    /// serial, parallel or event; repeat or comma-separate for several.
    #[arg(long, value_delimiter = ',', default_values_t = vec!["serial".to_string(), "parallel".to_string(), "event".to_string()])]
    workflow: Vec<String>,
    #[arg(long, default_value_t = 50)]
    batch: usize,
    #[arg(long, default_value_t = 4096)]
    width: u32,
    /// Defaults to the width.
    #[arg(long)]
    height: Option<u32>,
    #[arg(long, default_value_t = 256)]
    tile: u32,
    #[arg(long, default_value = "simwork")]
    mode: Mode,
    #[arg(long, default_value = "10s", value_parser = duration)]
    work_cost: Duration,
    #[arg(long, default_value = "2s", value_parser = duration)]
    cold_start: Duration,
    #[arg(long, default_value = "60s", value_parser = duration)]
    idle_timeout: Duration,
    #[arg(long, default_value_t = 16)]
    max_instances: usize,
    #[arg(long, default_value_t = 0)]
    min_instances: usize,
    /// TOML scaler config; overrides the individual scaler flags.
    #[arg(long)]
    scaler_config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Fail the first delivery of this share of slides after converting them.
    #[arg(long, default_value_t = 0.0)]
    fault_fraction: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 4096)]
    width: u32,
    #[arg(long)]
    height: Option<u32>,
    #[arg(long, default_value_t = 256)]
    tile: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Store every pyramid level instead of the base level only.
    #[arg(long)]
    full_pyramid: bool,
}

#[derive(Args)]
struct ConvertArgs {
    file: PathBuf,
    /// DICOM store root.
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the file stem.
    #[arg(long)]
    slide_id: Option<String>,
    #[arg(long, default_value = DEFAULT_UID_ROOT)]
    uid_root: String,
    /// Re-tile to this size.
    #[arg(long)]
    tile: Option<u32>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: String,
    /// Object store root.
    #[arg(long, env = "TILEPRESS_STORE_ROOT")]
    store_root: PathBuf,
    /// Base URL of a DICOM store served by `tilepress store`; a local store
    /// under `<store-root>/dicom` is used when absent.
    #[arg(long, env = "TILEPRESS_DICOM_STORE")]
    dicom_store: Option<String>,
    #[arg(long, env = "TILEPRESS_UID_ROOT", default_value = DEFAULT_UID_ROOT)]
    uid_root: String,
    #[arg(long, env = "TILEPRESS_TILE_SIZE")]
    tile: Option<u32>,
    #[arg(long, default_value = "10m", value_parser = duration)]
    request_timeout: Duration,
}

#[derive(Args)]
struct StoreArgs {
    #[arg(long, default_value = "127.0.0.1:8081")]
    listen: String,
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value_t = 4)]
    threads: usize,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Bench(a) => run_bench(a),
        Command::Gen(a) => run_gen(a),
        Command::Convert(a) => run_convert(a),
        Command::Serve(a) => run_serve(a),
        Command::Store(a) => run_store(a),
    }
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let workflows = a
        .workflow
        .iter()
        .map(|w| w.parse::<Workflow>().map_err(anyhow::Error::msg))
        .collect::<Result<Vec<_>>>()?;
    let scaler = match &a.scaler_config {
        Some(path) => ScalerConfig::load(path)?,
        None => ScalerConfig {
            min_instances: a.min_instances,
            max_instances: a.max_instances,
            cold_start: a.cold_start,
            idle_timeout: a.idle_timeout,
            ..ScalerConfig::default()
        },
    };
    let cfg = BenchConfig {
        batch: a.batch,
        width: a.width,
        height: a.height.unwrap_or(a.width),
        tile_size: a.tile,
        seed: a.seed,
        mode: a.mode,
        work_cost: a.work_cost,
        workers: a.workers,
        scaler,
        fault_fraction: a.fault_fraction,
        ..BenchConfig::default()
    };
    cfg.validate()?;

    info!(batch = cfg.batch, "generating slides");
    let batch = SlideBatch::generate(&cfg, &a.out.join("slides"))?;
    let mut reports = Vec::new();
    let mut failed = false;
    for w in workflows {
        let dir = a.out.join("runs").join(w.name().to_ascii_lowercase());
        match bench::run_workflow(w, &cfg, &batch, &dir) {
            Ok(r) => reports.push(r),
            Err(BenchError::DeadLettered {
                dead_lettered,
                report,
            }) => {
                eprintln!("{w}: {dead_lettered} message(s) dead-lettered");
                failed = true;
                reports.push(*report);
            }
            Err(e) => return Err(e).with_context(|| format!("{w} workflow")),
        }
    }
    let table = bench::emit_report(&reports, &a.out)?;
    print!("{table}");
    println!("outputs written to {}", a.out.display());
    if failed || reports.iter().any(|r| r.failures > 0) {
        bail!("benchmark finished with failures");
    }
    Ok(())
}

fn run_gen(a: GenArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let height = a.height.unwrap_or(a.width);
    for i in 0..a.count {
        let key = bench::slide_key(i);
        let id = slide_id_for_key(&key);
        let seed = a.seed.wrapping_add(i as u64);
        let bytes = if a.full_pyramid {
            generate_slide(id, a.width, height, a.tile, seed)?
        } else {
            generate_base_only(id, a.width, height, a.tile, seed)?
        };
        let path = a.out.join(&key);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run_convert(a: ConvertArgs) -> Result<()> {
    let source = fs::read(&a.file).with_context(|| format!("reading {}", a.file.display()))?;
    let name = a
        .file
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("slide");
    let slide_id = a
        .slide_id
        .clone()
        .unwrap_or_else(|| slide_id_for_key(name).to_string());
    let config = ServiceConfig {
        uid_root: a.uid_root,
        tile_size: a.tile,
        ..ServiceConfig::default()
    };
    let instances = convert_slide(&source, &slide_id, &config)?;
    let store = DicomStore::open(&a.out, Arc::new(WallClock))?;
    let token = DicomSink::begin(&store).map_err(anyhow::Error::msg)?;
    for bytes in &instances {
        store.store_instance(bytes, &token)?;
    }
    let summary = store.commit(&token)?;
    let study = tilepress::dicom::make_uids(&slide_id, 0, &config.uid_root)?.study;
    for e in store.query_series(&study)? {
        println!("{}\t{} bytes", a.out.join(&e.path).display(), e.byte_size);
    }
    println!(
        "{} instance(s) for {slide_id}: {} added, {} unchanged",
        summary.total(),
        summary.added,
        summary.unchanged
    );
    Ok(())
}

/// Block until Ctrl-C, then run `on_signal`.
fn wait_for_interrupt(on_signal: impl FnOnce()) -> Result<()> {
    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })?;
    let _ = rx.recv();
    on_signal();
    Ok(())
}

fn run_serve(a: ServeArgs) -> Result<()> {
    let clock: Arc<dyn Clock> = Arc::new(WallClock);
    let objects = Arc::new(ObjectStore::open(
        a.store_root.join("objects"),
        clock.clone(),
    )?);
    ensure_bucket(&objects, bench::LANDING_BUCKET)?;
    let sink: Arc<dyn DicomSink> = match &a.dicom_store {
        Some(url) => Arc::new(HttpDicomSink::new(url)),
        None => Arc::new(DicomStore::open(a.store_root.join("dicom"), clock.clone())?),
    };
    let config = ServiceConfig {
        uid_root: a.uid_root,
        tile_size: a.tile,
        request_timeout: a.request_timeout,
    };
    let service = Arc::new(ConversionService::new(objects, sink, clock, config));
    let handler = {
        let service = service.clone();
        Arc::new(move |req: &Request| service.route(req))
    };
    // One request at a time, like a single serverless instance.
    let server = HttpServer::start(&a.listen, 1, handler)?;
    eprintln!("conversion service listening on {}", server.url("/push"));
    wait_for_interrupt(|| {
        eprintln!("draining");
        service.drain();
    })?;
    server.stop();
    Ok(())
}

fn ensure_bucket(objects: &ObjectStore, bucket: &str) -> Result<()> {
    if objects.bucket_config(bucket).is_err() {
        objects.create_bucket(bucket, BucketConfig::default())?;
    }
    Ok(())
}

fn run_store(a: StoreArgs) -> Result<()> {
    let store = Arc::new(DicomStore::open(&a.root, Arc::new(WallClock))?);
    let server = HttpServer::start(
        &a.listen,
        a.threads,
        Arc::new(dicom_store::http_handler(store)),
    )?;
    eprintln!("DICOM store listening on {}", server.url(""));
    wait_for_interrupt(|| {})?;
    server.stop();
    Ok(())
}
