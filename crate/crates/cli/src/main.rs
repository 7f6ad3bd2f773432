mod svg;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand, ValueEnum};
use sono_core::biosignal::{segment_hrv, synth, write_hrv_csv, EcgRecord};
use sono_core::orchestrator::{
    phase_intervals, read_phase_intervals_csv, run_session, write_log_jsonl,
    write_phase_intervals_csv, write_simulation_csv, EventKind, Scenario, SessionLog,
};
use sono_core::phase::ProcedurePhase;
use sono_core::registration::{kabsch_solve, save_anchor, AnchorRecord, PointCorrespondences};
use sono_core::stats::{analyze, write_results_csv, Design, LongTable};
use sono_server::{Server, ServerConfig};

const ECG_RATE_HZ: f64 = 250.0;

#[derive(Parser)]
#[command(name = "sono", version, about = "Robotic ultrasound session simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scripted session and write its log, traces and phase intervals.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write a synthetic ECG matching the session phases.
        #[arg(long)]
        with_ecg: bool,
    },
    /// Host a live session on the framed protocol and the console bridge.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7400")]
        bind: SocketAddr,
        #[arg(long, default_value = "127.0.0.1:7401")]
        ws_bind: SocketAddr,
        #[arg(long)]
        no_bridge: bool,
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        pace: f64,
        /// Where the session log is written on exit.
        #[arg(long, default_value = "session_log.jsonl")]
        log: PathBuf,
    },
    /// Solve the virtual-to-real registration from paired points.
    Register {
        #[arg(long)]
        points: PathBuf,
        #[arg(long, default_value = "anchor.json")]
        out: PathBuf,
        #[arg(long, default_value = "anchor")]
        label: String,
        /// Stored in the anchor file; fixed by default so output is reproducible.
        #[arg(long, default_value = "1970-01-01T00:00:00Z")]
        created_at: DateTime<Utc>,
    },
    /// RMSSD per Resting/Execution interval of an ECG recording.
    Hrv {
        #[arg(long)]
        ecg: PathBuf,
        #[arg(long)]
        intervals: PathBuf,
        #[arg(long, default_value = "hrv.csv")]
        out: PathBuf,
    },
    /// Run a test battery on long-format study data.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        design: DesignArg,
        #[arg(long)]
        measure: Option<String>,
        #[arg(long)]
        phase: Option<String>,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignArg {
    Wilcoxon,
    Kruskal,
    Friedman,
    Shapiro,
}

impl From<DesignArg> for Design {
    fn from(d: DesignArg) -> Design {
        match d {
            DesignArg::Wilcoxon => Design::Wilcoxon,
            DesignArg::Kruskal => Design::Kruskal,
            DesignArg::Friedman => Design::Friedman,
            DesignArg::Shapiro => Design::Shapiro,
        }
    }
}

enum Failure {
    Usage(anyhow::Error),
    Domain(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Domain(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SONO_LOG_LEVEL", "warn"))
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            scenario,
            out,
            seed,
            with_ecg,
        } => simulate(&scenario, &out, seed, with_ecg),
        Command::Serve {
            bind,
            ws_bind,
            no_bridge,
            scenario,
            pace,
            log,
        } => serve(
            bind,
            (!no_bridge).then_some(ws_bind),
            scenario.as_deref(),
            pace,
            &log,
        ),
        Command::Register {
            points,
            out,
            label,
            created_at,
        } => register(&points, &out, label, created_at),
        Command::Hrv {
            ecg,
            intervals,
            out,
        } => hrv(&ecg, &intervals, &out),
        Command::Stats {
            data,
            design,
            measure,
            phase,
            out,
        } => stats(
            &data,
            design.into(),
            measure.as_deref(),
            phase.as_deref(),
            &out,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("cannot create {}", path.display())
    })?))
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    Scenario::from_path(path)
        .map_err(|e| Failure::Usage(anyhow!("scenario {}: {e}", path.display())))
}

fn phase_sequence(log: &SessionLog) -> Vec<ProcedurePhase> {
    let mut phases = vec![ProcedurePhase::Setup];
    phases.extend(log.events.iter().filter_map(|e| match e.kind {
        EventKind::PhaseChange { to, .. } => Some(to),
        _ => None,
    }));
    phases
}

fn simulate(scenario: &Path, out: &Path, seed: Option<u64>, with_ecg: bool) -> Outcome {
    let mut scenario = load_scenario(scenario)?;
    if let Some(seed) = seed {
        scenario.config.seed = seed;
    }
    let log = run_session(&scenario.config, &scenario.utterances).context("session failed")?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;

    let mut w = create(&out.join("session_log.jsonl"))?;
    write_log_jsonl(&log.events, &mut w).context("writing session log")?;
    w.flush().context("writing session log")?;

    let mut w = create(&out.join("simulation.csv"))?;
    write_simulation_csv(&log.events, &mut w).context("writing simulation.csv")?;
    w.flush().context("writing simulation.csv")?;

    let intervals = phase_intervals(&log.events).context("deriving phase intervals")?;
    let mut w = create(&out.join("phase_intervals.csv"))?;
    write_phase_intervals_csv(&intervals, &mut w).context("writing phase_intervals.csv")?;
    w.flush().context("writing phase_intervals.csv")?;

    let trace: Vec<(f64, f64)> = log
        .events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::RobotState(s) if s.phase == ProcedurePhase::Execution => {
                Some((e.t_s, s.contact_force))
            }
            _ => None,
        })
        .collect();
    fs::write(
        out.join("force.svg"),
        svg::line_chart(
            "Contact force during the scan",
            "t (s)",
            "force (N)",
            &trace,
        ),
    )
    .context("writing force.svg")?;

    if with_ecg {
        let (ecg, _) = synth::session_ecg(ECG_RATE_HZ, &intervals, scenario.config.seed);
        let mut w = create(&out.join("ecg.csv"))?;
        ecg.write_csv(&mut w).context("writing ecg.csv")?;
        w.flush().context("writing ecg.csv")?;
    }

    let peak = trace.iter().map(|p| p.1).fold(0.0, f64::max);
    let phases: Vec<&str> = phase_sequence(&log).iter().map(|p| p.as_str()).collect();
    println!(
        "outcome {}; phases {}; {} events; peak force {:.3} N; wrote {}",
        log.outcome,
        phases.join(">"),
        log.events.len(),
        peak,
        out.display()
    );
    Ok(())
}

fn serve(
    bind: SocketAddr,
    ws_bind: Option<SocketAddr>,
    scenario: Option<&Path>,
    pace: f64,
    log_path: &Path,
) -> Outcome {
    let scenario = match scenario {
        Some(p) => load_scenario(p)?,
        None => Scenario::default(),
    };
    let config = ServerConfig {
        tcp_bind: bind,
        ws_bind,
        session: scenario.config,
        utterances: scenario.utterances,
        pace,
        ..ServerConfig::default()
    };
    config.validate().map_err(|e| Failure::Usage(e.into()))?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting runtime")?;
    let report = runtime.block_on(async {
        let server = Server::start(config).await?;
        println!("protocol endpoint on {}", server.tcp_addr());
        if let Some(a) = server.ws_addr() {
            println!("console bridge on ws://{a}");
        }
        let mut poll = tokio::time::interval(Duration::from_millis(50));
        loop {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {
                    log::info!("interrupted");
                    server.shutdown();
                    break;
                }
                _ = poll.tick() => if server.is_finished() { break },
            }
        }
        server.join().await
    });
    let report = report.context("server failed")?;
    let mut w = create(log_path)?;
    write_log_jsonl(&report.events, &mut w).context("writing session log")?;
    w.flush().context("writing session log")?;
    println!(
        "outcome {}; {} events; log in {}",
        report.outcome,
        report.events.len(),
        log_path.display()
    );
    Ok(())
}

fn register(points: &Path, out: &Path, label: String, created_at: DateTime<Utc>) -> Outcome {
    let c = PointCorrespondences::from_csv_path(points)
        .with_context(|| format!("{}", points.display()))?;
    let solved = kabsch_solve(&c).context("registration failed")?;
    let n = c.len();
    let record = AnchorRecord {
        transform: solved.transform,
        label,
        created_at,
        source_points: c,
    };
    save_anchor(&record, out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "rms residual {:.6} mm over {n} points; anchor written to {}",
        solved.rms_residual * 1e3,
        out.display()
    );
    Ok(())
}

fn hrv(ecg_path: &Path, intervals_path: &Path, out: &Path) -> Outcome {
    let ecg =
        EcgRecord::from_csv_path(ecg_path).with_context(|| format!("{}", ecg_path.display()))?;
    let file = File::open(intervals_path)
        .with_context(|| format!("cannot open {}", intervals_path.display()))?;
    let intervals = read_phase_intervals_csv(BufReader::new(file))
        .with_context(|| format!("{}", intervals_path.display()))?;
    let reports = segment_hrv(&ecg, &intervals).context("hrv analysis failed")?;
    let mut w = create(out)?;
    write_hrv_csv(&reports, &mut w).context("writing hrv report")?;
    w.flush().context("writing hrv report")?;
    let summary: Vec<String> = reports
        .iter()
        .map(|r| match r.rmssd {
            Some(v) => format!("{} {:.1} ms ({} beats)", r.phase, v, r.n_beats),
            None => format!("{} insufficient beats ({})", r.phase, r.n_beats),
        })
        .collect();
    println!("rmssd: {}; report in {}", summary.join(", "), out.display());
    Ok(())
}

fn stats(
    data: &Path,
    design: Design,
    measure: Option<&str>,
    phase: Option<&str>,
    out: &Path,
) -> Outcome {
    let table = LongTable::from_csv_path(data).with_context(|| format!("{}", data.display()))?;
    let rows = analyze(&table.filter(measure, phase), design).context("analysis failed")?;
    let mut w = create(out)?;
    write_results_csv(&rows, &mut w).context("writing results")?;
    w.flush().context("writing results")?;
    let head = &rows[0];
    let df = head.df.map(|d| format!(", df = {d}")).unwrap_or_default();
    println!(
        "{}: statistic = {:.4}{df}, p = {:.4e}; {} rows in {}",
        head.method,
        head.statistic,
        head.p,
        rows.len(),
        out.display()
    );
    Ok(())
}
