use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use qkdnet_core::link::{connect_with_retry, run_user, Bitmap, NetSifter, Transcript, DEFAULT_TIMEOUT};
use qkdnet_core::sim::{
    load_config, preset, summarize_jsonl, summary_csv, ConfigError, Engine, KeyEntry, KeyFile, Mode, MetricsSeries,
    SimError, PRESET_NAMES,
};
use qkdnet_core::SimConfig;

#[derive(Parser)]
#[command(name = "qkdnet", version, about = "1xN plug-and-play QKD network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a scenario and write its metrics.
    Run(RunArgs),
    /// Socket-mode server: wait for every user, then simulate.
    Serve(ServeArgs),
    /// Socket-mode user endpoint.
    User(UserArgs),
    /// Per-user summary of a metrics file, as CSV.
    Report {
        metrics: PathBuf,
    },
    /// Write the shipped scenario configs.
    Presets {
        /// Directory to write `<name>.json` files into; stdout if omitted.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Only this preset.
        #[arg(long)]
        name: Option<String>,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    duration_hours: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics as JSON lines.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-user summary CSV.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Final sifted keys of both sides (per-pulse mode only).
    #[arg(long)]
    keys: Option<PathBuf>,
    /// Server-side message transcript (per-pulse mode only).
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LinkMode {
    Inproc,
    Net,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, value_enum, default_value = "inproc")]
    mode: LinkMode,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 0)]
    port: u16,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 7878)]
    port: u16,
}

#[derive(Args)]
struct UserArgs {
    #[arg(long)]
    user: u32,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 7878)]
    port: u16,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write this user's key and last timing notice.
    #[arg(long)]
    keys: Option<PathBuf>,
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Per-exchange timeout in seconds.
    #[arg(long, default_value_t = DEFAULT_TIMEOUT.as_secs_f64())]
    timeout: f64,
}

/// What a user process reports back after BYE.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UserReport {
    user: u32,
    blocks: usize,
    key: Bitmap,
    last_notice: Option<(u32, u32)>,
}

enum Failure {
    Config(ConfigError),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<SimError>() {
            Ok(SimError::Config(c)) => Failure::Config(c),
            Ok(other) => Failure::Runtime(other.into()),
            Err(e) => Failure::Runtime(e),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QKDSIM_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Serve(args) => cmd_serve(args),
        Cmd::User(args) => cmd_user(args).map_err(Failure::from),
        Cmd::Report { metrics } => cmd_report(&metrics).map_err(Failure::from),
        Cmd::Presets { out_dir, name } => cmd_presets(out_dir.as_deref(), name.as_deref()).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error at {}: {e}", e.path());
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_scenario(args: &ScenarioArgs) -> Result<SimConfig, Failure> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => load_config(path)?,
        (None, Some(name)) => preset(name).ok_or_else(|| {
            ConfigError::invalid("preset", format!("unknown preset {name:?}; known: {}", PRESET_NAMES.join(", ")))
        })?,
        (None, None) => return Err(ConfigError::invalid("config", "pass --config or --preset").into()),
    };
    if let Some(h) = args.duration_hours {
        cfg.duration_s = h * 3600.0;
        cfg.events.retain(|e| e.time_s() <= cfg.duration_s);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    if cfg.mode != Mode::PerPulse && (args.keys.is_some() || args.transcript.is_some()) {
        return Err(ConfigError::invalid("mode", "--keys and --transcript need per_pulse mode").into());
    }
    Ok(cfg)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_outputs(args: &ScenarioArgs, series: &MetricsSeries, keys: Option<KeyFile>) -> anyhow::Result<()> {
    if let Some(path) = &args.out {
        series.write_jsonl(create(path)?).with_context(|| format!("writing {}", path.display()))?;
    }
    let csv = summary_csv(&series.summary());
    match &args.summary {
        Some(path) => std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    if let (Some(path), Some(keys)) = (&args.keys, keys) {
        let text = serde_json::to_string_pretty(&keys)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn open_transcript(path: Option<&Path>) -> anyhow::Result<Option<Transcript>> {
    path.map(|p| Transcript::create(p).with_context(|| format!("creating {}", p.display())))
        .transpose()
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let cfg = load_scenario(&args.scenario)?;
    if args.mode == LinkMode::Net {
        return run_net(&cfg, &args.scenario, &args.host, args.port, true);
    }
    let series = match cfg.mode {
        Mode::Block => Engine::new(cfg.clone())?.run()?,
        Mode::PerPulse => {
            let transcript = open_transcript(args.scenario.transcript.as_deref())?;
            let mut sifter = qkdnet_core::link::InProcSifter::new(cfg.seed, cfg.qber_sample_fraction, transcript);
            Engine::with_sifter(cfg.clone(), &mut sifter)?.run()?
        }
    };
    let keys = (cfg.mode == Mode::PerPulse).then(|| key_file(&series, &BTreeMap::new()));
    write_outputs(&args.scenario, &series, keys)?;
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> Result<(), Failure> {
    let cfg = load_scenario(&args.scenario)?;
    run_net(&cfg, &args.scenario, &args.host, args.port, false)
}

fn key_file(series: &MetricsSeries, user_keys: &BTreeMap<u32, Bitmap>) -> KeyFile {
    KeyFile {
        users: series
            .keys
            .iter()
            .map(|(&user, k)| KeyEntry {
                user,
                server_key: Bitmap::from_u8s(&k.server),
                user_key: user_keys
                    .get(&user)
                    .cloned()
                    .or_else(|| k.user.as_ref().map(|b| Bitmap::from_u8s(b))),
            })
            .collect(),
    }
}

fn spawn_user(exe: &Path, host: &str, port: u16, user: u32, seed: u64, keys: &Path) -> anyhow::Result<Child> {
    Command::new(exe)
        .args(["user", "--host", host, "--port", &port.to_string(), "--user", &user.to_string()])
        .args(["--seed", &seed.to_string(), "--keys"])
        .arg(keys)
        .stdin(Stdio::null())
        .spawn()
        .with_context(|| format!("spawning user {user}"))
}

fn run_net(cfg: &SimConfig, args: &ScenarioArgs, host: &str, port: u16, spawn: bool) -> Result<(), Failure> {
    if cfg.mode != Mode::PerPulse {
        return Err(ConfigError::invalid("mode", "socket mode sifts real bits and needs per_pulse").into());
    }
    let listener = TcpListener::bind((host, port)).with_context(|| format!("binding {host}:{port}"))?;
    let addr = listener.local_addr().context("reading the bound address")?;
    log::info!("listening on {addr}");

    let scratch = tempfile::tempdir().context("creating a scratch directory")?;
    let mut children = Vec::new();
    if spawn {
        let exe = std::env::current_exe().context("locating this executable")?;
        for u in &cfg.users {
            let keys = scratch.path().join(format!("user-{}.json", u.id));
            children.push((u.id, keys.clone(), spawn_user(&exe, &addr.ip().to_string(), addr.port(), u.id, cfg.seed, &keys)?));
        }
    } else {
        eprintln!("waiting for {} users on {addr}", cfg.users.len());
    }

    let outcome = (|| -> anyhow::Result<MetricsSeries> {
        let transcript = open_transcript(args.transcript.as_deref())?;
        let patience = if spawn { Duration::from_secs(30) } else { Duration::from_secs(3600) };
        let mut sifter = NetSifter::accept(
            &listener,
            cfg.users.len(),
            cfg.seed,
            cfg.qber_sample_fraction,
            DEFAULT_TIMEOUT,
            transcript,
            patience,
        )
        .context("accepting users")?;
        Ok(Engine::with_sifter(cfg.clone(), &mut sifter)?.run()?)
    })();
    let series = match outcome {
        Ok(s) => s,
        Err(e) => {
            for (_, _, child) in &mut children {
                let _ = child.kill();
                let _ = child.wait();
            }
            return Err(e.into());
        }
    };

    let mut user_keys = BTreeMap::new();
    for (id, keys, mut child) in children {
        let status = child.wait().with_context(|| format!("waiting for user {id}"))?;
        if !status.success() {
            return Err(anyhow::anyhow!("user {id} exited with {status}").into());
        }
        let file = File::open(&keys).with_context(|| format!("reading user {id} keys"))?;
        let report: UserReport = serde_json::from_reader(BufReader::new(file)).context("parsing a user report")?;
        user_keys.insert(report.user, report.key);
    }
    write_outputs(args, &series, Some(key_file(&series, &user_keys)))?;
    Ok(())
}

fn cmd_user(args: UserArgs) -> anyhow::Result<()> {
    if !(args.timeout > 0.0 && args.timeout.is_finite()) {
        bail!("--timeout must be positive");
    }
    let stream = connect_with_retry((args.host.as_str(), args.port), Duration::from_secs(30))
        .with_context(|| format!("connecting to {}:{}", args.host, args.port))?;
    let mut transcript = open_transcript(args.transcript.as_deref())?;
    let run = run_user(stream, args.user, args.seed, Duration::from_secs_f64(args.timeout), transcript.as_mut())
        .with_context(|| format!("user {} session", args.user))?;
    let bits: Vec<u8> = run.blocks.iter().flat_map(|b| b.bits.iter().copied()).collect();
    let report = UserReport {
        user: args.user,
        blocks: run.blocks.len(),
        key: Bitmap::from_u8s(&bits),
        last_notice: run.last_notice.map(|w| (w.coarse, w.fine)),
    };
    let text = serde_json::to_string_pretty(&report)?;
    match &args.keys {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_report(path: &Path) -> anyhow::Result<()> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let summaries = summarize_jsonl(BufReader::new(file)).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let mut out = std::io::stdout().lock();
    out.write_all(summary_csv(&summaries).as_bytes())?;
    Ok(())
}

fn cmd_presets(out_dir: Option<&Path>, name: Option<&str>) -> anyhow::Result<()> {
    let names: Vec<&str> = match name {
        Some(n) if PRESET_NAMES.contains(&n) => vec![n],
        Some(n) => bail!("unknown preset {n:?}; known: {}", PRESET_NAMES.join(", ")),
        None => PRESET_NAMES.to_vec(),
    };
    for n in names {
        let json = preset(n).expect("listed presets exist").to_json();
        match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                let path = dir.join(format!("{n}.json"));
                std::fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
            }
            None => println!("{json}"),
        }
    }
    Ok(())
}
