use std::collections::BTreeSet;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use taemu::debugstub::{self, DebugTarget};
use taemu::fuzz::{self, Budget, FuzzConfig, HarnessSpec};
use taemu::greedy::{self, ApiUniverse, Icfg, MergeLevel, ReportFormat};
use taemu::manager::server::{self, ServerConfig};
use taemu::manager::{GpParam, GpParamSet, InvocationResult, OutParam, TaInstance};
use taemu::taelf::{assemble, StaticAnnotationConfig};
use taemu::vtee::{ApiRegistry, MissingApiPolicy};

const EXIT_USAGE: u8 = 1;
const EXIT_CRASHED: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(name = "taemu", version, about = "Rehost, fuzz and debug trusted applications")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one command invocation and print the result
    Run {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        call: CallArgs,
    },
    /// Run a fuzzing campaign
    Fuzz(FuzzArgs),
    /// Re-execute one input (raw or a crash file) through a harness
    Replay {
        #[command(flatten)]
        target: TargetArgs,
        harness: PathBuf,
        input: PathBuf,
    },
    /// Rank TEE-specific APIs by the coverage they unlock
    RankApis {
        #[arg(required = true)]
        graphs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Level::Global)]
        level: Level,
        #[arg(long, value_enum, default_value_t = Format::Both)]
        format: Format,
    },
    /// Serve one invocation to a GDB remote client
    Debug {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        call: CallArgs,
        #[arg(long, default_value_t = 1234)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Assemble TIR-32 source into a TAELF container
    Asm {
        source: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Serve the interactive client protocol
    Serve {
        #[command(flatten)]
        target: TargetArgs,
        #[arg(long, conflicts_with = "tcp", required_unless_present = "tcp")]
        socket: Option<PathBuf>,
        #[arg(long)]
        tcp: Option<String>,
        /// Pause before this API and notify the client (repeatable)
        #[arg(long = "pause-at")]
        pause_at: Vec<String>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TargetArgs {
    /// TAELF file
    ta: PathBuf,
    /// Static-binary annotation file (`ADDR NAME` per line)
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Leave TEE-specific APIs unimplemented
    #[arg(long)]
    no_extensions: bool,
    #[arg(long, value_enum, default_value_t = MissingApi::Crash)]
    missing_api: MissingApi,
}

#[derive(Args)]
struct CallArgs {
    #[arg(long, default_value = "0", value_parser = parse_u32)]
    cmd: u32,
    /// none | value:A:B | memref:HEX | memref@FILE | memref_out:SIZE (up to four)
    #[arg(long = "param")]
    params: Vec<String>,
    /// Override the param_types word derived from --param
    #[arg(long, value_parser = parse_u32)]
    types: Option<u32>,
}

#[derive(Args)]
struct FuzzArgs {
    #[command(flatten)]
    target: TargetArgs,
    harness: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, conflicts_with = "seconds")]
    iters: Option<u64>,
    #[arg(long)]
    seconds: Option<f64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(short, long, default_value = "out")]
    output: PathBuf,
    /// Directory of seed inputs
    #[arg(long)]
    seeds: Option<PathBuf>,
    #[arg(long, default_value_t = 4096)]
    max_len: usize,
    #[arg(long)]
    stop_on_bug: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Tee,
    Global,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Curve,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum MissingApi {
    Crash,
    Stub,
}

fn parse_u32(s: &str) -> std::result::Result<u32, String> {
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u32::from_str_radix(h, 16),
        None => s.parse(),
    };
    r.map_err(|e| format!("`{s}`: {e}"))
}

/// Usage-level failure: bad flag values, unreadable inputs.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read(path)?).map_err(|_| usage(format!("{}: not UTF-8", path.display())))
}

impl TargetArgs {
    fn registry(&self) -> ApiRegistry {
        let mut reg = if self.no_extensions {
            ApiRegistry::new()
        } else {
            ApiRegistry::with_extensions()
        };
        reg.policy = match self.missing_api {
            MissingApi::Crash => MissingApiPolicy::Crash,
            MissingApi::Stub => MissingApiPolicy::ReturnZero,
        };
        reg
    }

    fn load(&self) -> Result<TaInstance> {
        let bytes = read(&self.ta)?;
        let config = match &self.annotations {
            Some(p) => Some(StaticAnnotationConfig::parse(&read_text(p)?).map_err(|e| usage(e.to_string()))?),
            None => None,
        };
        TaInstance::from_bytes(&bytes, config.as_ref(), self.registry())
            .map_err(|e| usage(format!("{}: {e}", self.ta.display())))
    }
}

impl CallArgs {
    fn paramset(&self) -> Result<GpParamSet> {
        if self.params.len() > 4 {
            return Err(usage("at most four --param values"));
        }
        let mut params: [GpParam; 4] = Default::default();
        let mut types = 0u16;
        for (i, spec) in self.params.iter().enumerate() {
            let (p, nibble) = parse_param(spec)?;
            params[i] = p;
            types |= (nibble as u16) << (4 * i);
        }
        if let Some(t) = self.types {
            types = u16::try_from(t).map_err(|_| usage("--types must fit in 16 bits"))?;
        }
        Ok(GpParamSet::new(types, params))
    }
}

fn parse_param(spec: &str) -> Result<(GpParam, u8)> {
    let bad = || usage(format!("bad --param `{spec}`"));
    if spec == "none" {
        return Ok((GpParam::None, 0));
    }
    if let Some(rest) = spec.strip_prefix("value:") {
        let (a, b) = rest.split_once(':').ok_or_else(bad)?;
        let a = parse_u32(a).map_err(|_| bad())?;
        let b = parse_u32(b).map_err(|_| bad())?;
        return Ok((GpParam::value(a, b), 3));
    }
    if let Some(h) = spec.strip_prefix("memref:") {
        return Ok((GpParam::memref(hex::decode(h).map_err(|_| bad())?), 7));
    }
    if let Some(path) = spec.strip_prefix("memref@") {
        return Ok((GpParam::memref(read(Path::new(path))?), 7));
    }
    if let Some(n) = spec.strip_prefix("memref_out:") {
        let n = parse_u32(n).map_err(|_| bad())?;
        return Ok((GpParam::memref(vec![0; n as usize]), 6));
    }
    Err(bad())
}

fn print_result(r: &InvocationResult) {
    println!("outcome: {}", r.outcome);
    println!("return: {:#x} origin: {}", r.return_code, r.return_origin);
    for (i, p) in r.out_params.iter().enumerate() {
        match p {
            OutParam::None => {}
            OutParam::Value { a, b } => println!("param{i}: value {a:#x} {b:#x}"),
            OutParam::Memref { data, size } => println!("param{i}: memref size={size} {}", hex::encode(data)),
        }
    }
    for line in &r.log {
        println!("log: {line}");
    }
}

fn exit_for(r: &InvocationResult) -> u8 {
    if r.crashed() {
        EXIT_CRASHED
    } else {
        0
    }
}

fn run(target: &TargetArgs, call: &CallArgs) -> Result<u8> {
    let params = call.paramset()?;
    let mut inst = target.load()?;
    let session = match inst.open_session(&GpParamSet::empty()) {
        Ok((s, _)) => s,
        Err(r) => {
            print_result(&r);
            return Ok(exit_for(&r).max(1));
        }
    };
    let r = inst.invoke_command(session, call.cmd, &params)?;
    print_result(&r);
    Ok(exit_for(&r))
}

fn read_seeds(dir: &Path) -> Result<Vec<Vec<u8>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| usage(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.iter().map(|p| read(p)).collect()
}

fn load_harness(path: &Path) -> Result<HarnessSpec> {
    HarnessSpec::parse(&read_text(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn fuzz_cmd(a: &FuzzArgs) -> Result<u8> {
    let harness = load_harness(&a.harness)?;
    let budget = match (a.iters, a.seconds) {
        (_, Some(s)) => Budget::Seconds(s as f64),
        (Some(n), None) => Budget::Iterations(n),
        (None, None) => Budget::Iterations(100_000),
    };
    let config = FuzzConfig {
        budget,
        seed: a.seed,
        seeds: match &a.seeds {
            Some(d) => read_seeds(d)?,
            None => Vec::new(),
        },
        max_len: a.max_len,
        stop_on_bug: a.stop_on_bug,
    };
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    // Load once up front so bad targets fail as usage errors.
    let first = a.target.load()?;
    let results = if a.jobs == 1 {
        vec![fuzz::fuzz_loop(first, &harness, &config)]
    } else {
        let make = || {
            let bytes = fs::read(&a.target.ta).map_err(fuzz::FuzzError::Io)?;
            let config = match &a.target.annotations {
                Some(p) => Some(StaticAnnotationConfig::parse(&fs::read_to_string(p).map_err(fuzz::FuzzError::Io)?)
                    .expect("parsed once already")),
                None => None,
            };
            Ok(TaInstance::from_bytes(&bytes, config.as_ref(), a.target.registry())?)
        };
        fuzz::fuzz_parallel(make, &harness, &config, a.jobs)
    };
    for (i, r) in results.into_iter().enumerate() {
        let r = r?;
        let dir = if a.jobs == 1 {
            a.output.clone()
        } else {
            a.output.join(format!("job{i}"))
        };
        r.write_to(&dir)
            .with_context(|| format!("writing {}", dir.display()))?;
        println!("{}: {}", dir.display(), r.stats.line());
        for c in &r.crashes {
            println!("  {} {} ({})", c.triage.as_str(), c.key, c.crash);
        }
    }
    Ok(0)
}

fn replay_cmd(target: &TargetArgs, harness: &Path, input: &Path) -> Result<u8> {
    let harness = load_harness(harness)?;
    let bytes = read(input)?;
    let input = match fuzz::parse_crash_file(&bytes) {
        Ok((_, raw)) => raw,
        Err(_) => bytes,
    };
    match fuzz::replay(target.load()?, &harness, &input)? {
        None => {
            println!("input shorter than the harness minimum; not executed");
            Ok(0)
        }
        Some(r) => {
            if let Some(c) = r.outcome.crash() {
                println!("crash: {}", c.class);
                println!("key: {}", fuzz::DedupKey::of(c));
            }
            print_result(&r);
            Ok(exit_for(&r))
        }
    }
}

fn rank_cmd(paths: &[PathBuf], level: Level, format: Format) -> Result<u8> {
    let mut per_file: Vec<Vec<Icfg>> = Vec::new();
    for p in paths {
        let graphs = greedy::parse_icfg(&read_text(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        per_file.push(graphs);
    }
    let g = match level {
        Level::Tee => {
            let all: Vec<Icfg> = per_file.into_iter().flatten().collect();
            greedy::merge(&all, MergeLevel::Tee)
        }
        Level::Global => {
            let tees: Vec<Icfg> = per_file.iter().map(|gs| greedy::merge(gs, MergeLevel::Tee)).collect();
            greedy::merge(&tees, MergeLevel::Global)
        }
    };
    let universe = ApiUniverse::of(&g);
    let result = greedy::greedy_rank(&g, &universe.tee);
    if matches!(format, Format::Csv | Format::Both) {
        print!("{}", greedy::emit_report(&result, ReportFormat::Csv));
    }
    if format == Format::Both {
        println!();
    }
    if matches!(format, Format::Curve | Format::Both) {
        print!("{}", greedy::emit_report(&result, ReportFormat::Curve));
    }
    match result.threshold_index_90 {
        Some(n) => eprintln!("90% of {} blocks reachable after {n} APIs", result.total),
        None => eprintln!("90% of {} blocks is not reachable", result.total),
    }
    Ok(0)
}

fn debug_cmd(target: &TargetArgs, call: &CallArgs, host: &str, port: u16) -> Result<u8> {
    let params = call.paramset()?;
    let mut t = DebugTarget::new(target.load()?, call.cmd, &params)?;
    let listener = TcpListener::bind((host, port)).with_context(|| format!("binding {host}:{port}"))?;
    eprintln!("listening on {}", listener.local_addr()?);
    debugstub::serve_tcp(&mut t, &listener)?;
    match t.result() {
        Some(r) => {
            print_result(r);
            Ok(exit_for(r))
        }
        None => {
            println!("debugger left before the call finished");
            Ok(0)
        }
    }
}

fn asm_cmd(source: &Path, output: &Path) -> Result<u8> {
    let bytes = assemble(&read_text(source)?).map_err(|e| usage(format!("{}: {e}", source.display())))?;
    fs::write(output, bytes).with_context(|| format!("writing {}", output.display()))?;
    Ok(0)
}

fn serve_cmd(
    target: &TargetArgs,
    socket: Option<&Path>,
    tcp: Option<&str>,
    pause_at: &[String],
    store: Option<&Path>,
) -> Result<u8> {
    let mut inst = target.load()?;
    let config = ServerConfig {
        pause_at: pause_at.iter().cloned().collect::<BTreeSet<_>>(),
        store: store.map(Path::to_path_buf),
    };
    match (socket, tcp) {
        (Some(path), _) => server::serve_unix(&mut inst, &config, path)?,
        (None, Some(addr)) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            server::serve_tcp(&mut inst, &config, listener)?
        }
        (None, None) => bail!("no endpoint"),
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run { target, call } => run(&target, &call),
        Command::Fuzz(a) => fuzz_cmd(&a),
        Command::Replay { target, harness, input } => replay_cmd(&target, &harness, &input),
        Command::RankApis { graphs, level, format } => rank_cmd(&graphs, level, format),
        Command::Debug {
            target,
            call,
            port,
            host,
        } => debug_cmd(&target, &call, &host, port),
        Command::Asm { source, output } => asm_cmd(&source, &output),
        Command::Serve {
            target,
            socket,
            tcp,
            pause_at,
            store,
        } => serve_cmd(&target, socket.as_deref(), tcp.as_deref(), &pause_at, store.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TAEMU_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("taemu: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_INTERNAL)
            }
        }
    }
}
