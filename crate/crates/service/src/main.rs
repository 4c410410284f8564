use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use coverage_core::pipeline::{compute_work_fields, load_engine, FIELDS_FILE};
use coverage_service::{router, AppState, ResultStore};

/// Serves scenario evaluation and map layers over HTTP.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    /// Work directory produced by `coverage ingest`.
    #[arg(long, env = "COVERAGE_WORK_DIR")]
    work_dir: PathBuf,
    /// Result store; defaults to <work-dir>/results.
    #[arg(long, env = "COVERAGE_STORE_DIR")]
    store_dir: Option<PathBuf>,
    #[arg(long, env = "COVERAGE_BIND", default_value = "127.0.0.1")]
    bind: std::net::IpAddr,
    #[arg(long, env = "COVERAGE_PORT", default_value_t = 8080)]
    port: u16,
    /// Threads for the initial field computation; defaults to all cores.
    #[arg(long, env = "COVERAGE_JOBS")]
    jobs: Option<usize>,
    /// Relocation jobs allowed to run at once.
    #[arg(long, env = "COVERAGE_MAX_RELOCATIONS", default_value_t = 2)]
    max_relocations: usize,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let store_dir = args.store_dir.clone().unwrap_or_else(|| args.work_dir.join("results"));
    let store = ResultStore::open(&store_dir).context("opening result store")?;
    let state = Arc::new(AppState::new(store, Some(args.work_dir.clone()), args.max_relocations));

    // load in the background so /graph/summary can answer 503 meanwhile
    let loader = Arc::clone(&state);
    let work = args.work_dir.clone();
    let load = tokio::task::spawn_blocking(move || -> anyhow::Result<()> {
        if !work.join(FIELDS_FILE).exists() {
            log::info!("no cached fields in {}; computing with {jobs} threads", work.display());
            compute_work_fields(&work, jobs)?;
        }
        let engine = load_engine(&work)?;
        log::info!(
            "loaded {} nodes, {} stations",
            engine.graph().node_count(),
            engine.stations().len()
        );
        loader.set_engine(Arc::new(engine));
        Ok(())
    });

    tokio::spawn(async move {
        let err = match load.await {
            Ok(Ok(())) => return,
            Ok(Err(e)) => format!("{e:#}"),
            Err(e) => format!("loader panicked: {e}"),
        };
        log::error!("loading work directory failed: {err}");
        std::process::exit(1);
    });

    let addr = SocketAddr::new(args.bind, args.port);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    log::info!("listening on http://{addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .context("server error")
}
