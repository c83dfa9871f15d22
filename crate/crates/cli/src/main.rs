use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use classwatch_cli::api::{router, AppState};
use classwatch_cli::load_model;
use classwatch_cli::remote::RemoteGateway;
use classwatch_core::analytics::session_summary;
use classwatch_core::dataset::{
    balanced_sample, build_manifest, label_clips, load_split, parse_annotations, read_manifest_entries, split_overlap,
    ClassTarget, PrepConfig, SampleTargets, SplitMode,
};
use classwatch_core::emotion::{
    evaluate, save_checkpoint_file, train, AdamConfig, Architecture, EmotionClass, LabeledDataset, Split,
};
use classwatch_core::gateway::{Gateway, GatewayConfig};
use classwatch_core::matcher::MatcherConfig;
use classwatch_core::session::SessionEngine;
use classwatch_core::sim::render::{synthetic_dataset, HELD_OUT_SEED_OFFSET};
use classwatch_core::sim::{enroll_students, generate_students, run_scenario, GroundTruthLog, Pace, SimScenario};
use classwatch_core::store::{self, JournalStore, RecordFilter, Store};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Parser, Debug)]
#[command(name = "classwatch", version, about = "Classroom attendance and engagement monitor")]
struct Cli {
    /// Journal file holding students, sessions, attendance and emotions.
    #[arg(long, global = true, env = "CLASSWATCH_DB", default_value = "classwatch.ndjson")]
    db_path: PathBuf,
    /// Classifier checkpoint (JSON).
    #[arg(long, global = true, env = "CLASSWATCH_MODEL", default_value = "model.json")]
    model_path: PathBuf,
    #[arg(long, global = true, env = "CLASSWATCH_LISTEN", default_value = "127.0.0.1:8080")]
    listen_addr: SocketAddr,
    #[arg(long, global = true, default_value_t = 2000)]
    capture_interval_ms: u64,
    /// Identity match threshold (Euclidean distance).
    #[arg(long, global = true, default_value_t = 0.6)]
    threshold: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the HTTP server.
    Serve {
        /// Directory with the built dashboard, served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        max_batch: usize,
    },
    /// Stream a synthetic classroom into the local store or a running server.
    Simulate {
        /// Scenario file (TOML); overrides the flags below.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        students: usize,
        #[arg(long, default_value_t = 5)]
        minutes: u64,
        /// Student id to keep out of the room (repeatable).
        #[arg(long)]
        absent: Vec<String>,
        #[arg(long, default_value_t = 0)]
        intruders: usize,
        #[arg(long)]
        sigma: Option<f64>,
        /// Base URL of a running server, e.g. http://127.0.0.1:8080.
        #[arg(long)]
        remote: Option<String>,
        /// Wait out each tick instead of running compressed.
        #[arg(long, conflicts_with = "compressed")]
        realtime: bool,
        /// Run ticks back-to-back (the default).
        #[arg(long)]
        compressed: bool,
        /// Write the ground-truth log here (JSON).
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Train the reference classifier and save it to --model-path.
    Train {
        /// Manifest produced by `prep-daisee`.
        #[arg(long, conflicts_with = "synthetic")]
        manifest: Option<PathBuf>,
        /// Train on this many synthetic crops per class instead.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Per-epoch loss/accuracy CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Report per-class metrics of the saved classifier on a test split.
    Evaluate {
        #[arg(long, conflicts_with = "synthetic")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Build a labeled frame manifest from clip annotations and extracted frames.
    PrepDaisee {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        frames_root: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "manifest.csv")]
        out: PathBuf,
        /// Clips per class in code order (boredom, confusion, engagement,
        /// frustration); `all` takes every clip.
        #[arg(long, default_value = "40,40,40,all")]
        targets: String,
        #[arg(long, value_enum, default_value_t = SplitArg::Frame)]
        split_mode: SplitArg,
        #[arg(long, default_value_t = 10)]
        frames_per_clip: usize,
    },
    /// Dump the store as NDJSON records.
    Export {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Load NDJSON records produced by `export`.
    Import {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Frame,
    Clip,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<(), BoxError> {
    match &cli.command {
        Command::Serve { static_dir, max_batch } => serve(&cli, static_dir.clone(), *max_batch),
        Command::Simulate {
            scenario,
            seed,
            students,
            minutes,
            absent,
            intruders,
            sigma,
            remote,
            realtime,
            ground_truth,
            ..
        } => {
            let scenario = match scenario {
                Some(path) => SimScenario::load(path)?,
                None => {
                    let mut s = SimScenario::new(*seed, *students, *minutes);
                    s.tick_ms = cli.capture_interval_ms;
                    s.absent_students = absent.clone();
                    s.intruder_count = *intruders;
                    s.threshold = cli.threshold;
                    if let Some(sigma) = sigma {
                        s.embedding_noise_sigma = *sigma;
                    }
                    s.validate()?;
                    s
                }
            };
            let mut scenario = scenario;
            let pace = if *realtime {
                scenario.start_time_ms = classwatch_core::now_ms();
                Pace::RealTime
            } else {
                Pace::Compressed
            };
            let log = match remote {
                Some(url) => simulate_remote(&scenario, url, pace)?,
                None => simulate_local(&cli, &scenario, pace)?,
            };
            if let Some(path) = ground_truth {
                serde_json::to_writer(BufWriter::new(File::create(path)?), &log)?;
            }
            Ok(())
        }
        Command::Train {
            manifest,
            synthetic,
            epochs,
            batch_size,
            seed,
            history,
        } => {
            let (train_set, test_set) = datasets(manifest.as_deref(), *synthetic)?;
            let config = AdamConfig {
                epochs: *epochs,
                batch_size: *batch_size,
                ..AdamConfig::default()
            };
            log::info!("training on {} items ({} held out)", train_set.items.len(), test_set.items.len());
            let validation = (!test_set.items.is_empty()).then_some(&test_set);
            let run = train::train(&train_set, validation, Architecture::default(), &config, *seed)?;
            for h in &run.history {
                log::info!(
                    "epoch {:>2}  loss {:.4}  train acc {:.3}  test acc {}",
                    h.epoch,
                    h.train_loss,
                    h.train_acc,
                    h.val_acc.map_or("-".into(), |a| format!("{a:.3}"))
                );
            }
            if let Some(path) = history {
                train::write_history(BufWriter::new(File::create(path)?), &run.history)?;
            }
            save_checkpoint_file(&run.params, &cli.model_path)?;
            log::info!("saved {}", cli.model_path.display());
            Ok(())
        }
        Command::Evaluate {
            manifest,
            synthetic,
            json,
        } => {
            let (_, test_set) = datasets(manifest.as_deref(), synthetic.or(Some(50)).filter(|_| manifest.is_none()))?;
            let model = load_model(&cli.model_path)?;
            let report = evaluate(model.as_ref(), &test_set)?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{report}");
            }
            Ok(())
        }
        Command::PrepDaisee {
            annotations,
            frames_root,
            seed,
            out,
            targets,
            split_mode,
            frames_per_clip,
        } => {
            let rows = parse_annotations(File::open(annotations)?)?;
            let labeled = label_clips(&rows);
            log::info!("{} annotated clips, {} with a primary label", rows.len(), labeled.len());
            let sampled = balanced_sample(&labeled, &parse_targets(targets)?, *seed)?;
            let config = PrepConfig {
                frames_per_clip: *frames_per_clip,
                split_mode: match split_mode {
                    SplitArg::Frame => SplitMode::Frame,
                    SplitArg::Clip => SplitMode::Clip,
                },
                ..PrepConfig::new(*seed)
            };
            let manifest = build_manifest(&sampled, frames_root, &config)?;
            manifest.write_csv(BufWriter::new(File::create(out)?))?;
            for class in EmotionClass::ALL {
                let (tr, te) = manifest.class_split(class);
                println!(
                    "{:<12} clips {:>4}  train {:>5}  test {:>5}",
                    class.label(),
                    manifest.clip_counts[class.code()],
                    tr,
                    te
                );
            }
            println!(
                "total        train {:>5}  test {:>5}  -> {}",
                manifest.count(Split::Train),
                manifest.count(Split::Test),
                out.display()
            );
            Ok(())
        }
        Command::Export { out } => {
            let store = JournalStore::open(&cli.db_path)?;
            match out {
                Some(path) => store::export(&store, BufWriter::new(File::create(path)?))?,
                None => store::export(&store, std::io::stdout().lock())?,
            }
            Ok(())
        }
        Command::Import { input } => {
            let store = JournalStore::open(&cli.db_path)?;
            let n = store::import(&store, BufReader::new(File::open(input)?))?;
            log::info!("imported {n} records into {}", cli.db_path.display());
            Ok(())
        }
    }
}

fn parse_targets(text: &str) -> Result<SampleTargets, BoxError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!("expected 4 comma-separated targets, got {text:?}").into());
    }
    let mut out = [ClassTarget::TakeAll; 4];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = match p {
            "all" => ClassTarget::TakeAll,
            n => ClassTarget::Count(n.parse().map_err(|_| format!("bad target {n:?}"))?),
        };
    }
    Ok(SampleTargets(out))
}

fn datasets(manifest: Option<&Path>, synthetic: Option<usize>) -> Result<(LabeledDataset, LabeledDataset), BoxError> {
    if let Some(path) = manifest {
        let entries = read_manifest_entries(File::open(path)?)?;
        if !split_overlap(&entries).is_empty() {
            log::warn!("manifest has frames in both splits");
        }
        return Ok((load_split(&entries, Split::Train, 1)?, load_split(&entries, Split::Test, 1)?));
    }
    let per_class = synthetic.ok_or("pass --manifest or --synthetic")?;
    Ok((
        synthetic_dataset(per_class, 0, Split::Train),
        synthetic_dataset(per_class.div_ceil(4), HELD_OUT_SEED_OFFSET, Split::Test),
    ))
}

fn build_gateway(cli: &Cli, max_batch: usize) -> Result<(Arc<Gateway>, Arc<JournalStore>), BoxError> {
    let store = Arc::new(JournalStore::open(&cli.db_path)?);
    let engine = Arc::new(SessionEngine::new(
        store.clone(),
        load_model(&cli.model_path)?,
        MatcherConfig::new(cli.threshold)?,
    ));
    let config = GatewayConfig {
        capture_interval_ms: cli.capture_interval_ms,
        max_batch,
    };
    Ok((Arc::new(Gateway::new(engine, config)?), store))
}

fn serve(cli: &Cli, static_dir: Option<PathBuf>, max_batch: usize) -> Result<(), BoxError> {
    let (gateway, _store) = build_gateway(cli, max_batch)?;
    let app = router(AppState::new(gateway), static_dir);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(cli.listen_addr).await?;
        log::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok::<_, BoxError>(())
    })
}

fn report(log: &GroundTruthLog, summary: serde_json::Value) {
    let rejected = log.emitted().filter(|e| e.ack.as_ref().is_some_and(|a| !a.is_accepted())).count();
    let out = json!({
        "emitted": log.emitted().count(),
        "rejected": rejected,
        "students_in_room": log.present_students().len(),
        "intruder_detections": log.intruder_emissions(),
        "summary": summary,
    });
    println!("{}", serde_json::to_string_pretty(&out).unwrap_or_default());
}

fn simulate_local(cli: &Cli, scenario: &SimScenario, pace: Pace) -> Result<GroundTruthLog, BoxError> {
    let (gateway, store) = build_gateway(cli, 32)?;
    let engine = gateway.engine().clone();
    let students = generate_students(scenario)?;
    let fresh: Vec<_> = students
        .iter()
        .filter(|s| !engine.roster().contains(&s.student_id))
        .cloned()
        .collect();
    enroll_students(&engine, scenario, &fresh)?;
    let session = engine.start_session(&scenario.course_label, scenario.start_time_ms)?;
    log::info!("{}: {} ticks, {} students", session.session_id, scenario.ticks(), students.len());
    let log = run_scenario(scenario, &students, &session.session_id, gateway.as_ref(), pace)?;
    let end = scenario.start_time_ms + (scenario.ticks() * scenario.tick_ms) as i64;
    engine.end_session(&session.session_id, end)?;
    let summary = session_summary(&engine, &session.session_id)?;
    let rows = store.emotions(&RecordFilter::session(&session.session_id)).len();
    let mut value = serde_json::to_value(&summary)?;
    value["emotion_rows"] = json!(rows);
    report(&log, value);
    Ok(log)
}

fn simulate_remote(scenario: &SimScenario, url: &str, pace: Pace) -> Result<GroundTruthLog, BoxError> {
    let remote = RemoteGateway::connect(url)?;
    let students = generate_students(scenario)?;
    for s in &students {
        remote.enroll(&s.student_id, &s.display_name, s.embedding.as_slice(), scenario.start_time_ms)?;
    }
    let start = scenario.start_time_ms;
    let session = remote.start_session(&scenario.course_label, start)?;
    log::info!("{} on {url}: {} ticks", session.session_id, scenario.ticks());
    let log = run_scenario(scenario, &students, &session.session_id, &remote, pace)?;
    let end = start + (scenario.ticks() * scenario.tick_ms) as i64;
    remote.end_session(&session.session_id, end)?;
    report(&log, remote.summary(&session.session_id)?);
    Ok(log)
}
