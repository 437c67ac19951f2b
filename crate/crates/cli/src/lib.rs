//! `prefixbatch` command line: `gen`, `plan`, `simulate`, `report` and
//! `attn-selftest`.
//!
//! Exit status is 0 on success, 1 when an input or flag value is rejected
//! and 2 when the command line itself cannot be parsed.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use prefixbatch::attention::selftest;
use prefixbatch::metrics::{report, summarize, MetricsError, Summary, ValleyConfig};
use prefixbatch::prefix_tree::{
    build_tree, groups_to_workload, parse_groups, plan, processed_tokens, saving_ratio_static, write_groups,
    PlanError, PrefixSharingGroup,
};
use prefixbatch::scheduler::{read_trace_csv, simulate, Policy, SchedulerConfig, SimError, SimInput};
use prefixbatch::workload::{
    generate_industry, generate_microbenchmark, parse_workload, shuffle_workload, write_workload, IndustrySpec,
    SyntheticSpec, Workload, WorkloadError,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "prefixbatch", version, about = "Prefix-sharing batch planning and scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic workload file.
    Gen(GenArgs),
    /// Build prefix-sharing groups from a workload.
    Plan(PlanArgs),
    /// Run the batching simulator and write per-iteration traces.
    Simulate(SimulateArgs),
    /// Summarize traces and lay them side by side.
    Report(ReportArgs),
    /// Check the prefix-shared attention reference against dense attention.
    AttnSelftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 2000)]
    prefix_len: usize,
    #[arg(long, default_value_t = 200)]
    distinct_len: usize,
    #[arg(long, default_value_t = 16)]
    sharing_degree: usize,
    #[arg(long, default_value_t = 400)]
    num_groups: usize,
    #[arg(long, default_value_t = 100)]
    output_len: u32,
    #[arg(long, env = "PREFIXBATCH_SEED", default_value_t = 0)]
    seed: u64,
    /// Document/query workload with a shared instruction instead of the
    /// fixed-shape microbenchmark. Ignores the shape flags.
    #[arg(long)]
    industry: bool,
    /// Request count for --industry.
    #[arg(long, default_value_t = 8000)]
    num_requests: usize,
    /// Randomize arrival order (seeded by --seed).
    #[arg(long)]
    shuffle: bool,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct SchedulerArgs {
    #[arg(long, default_value_t = 2048)]
    chunk_size: usize,
    #[arg(long, default_value_t = 16)]
    block_size: usize,
    #[arg(long, default_value_t = 32768)]
    total_blocks: usize,
    /// Admission cap in blocks (defaults to --total-blocks).
    #[arg(long)]
    mem_threshold: Option<usize>,
    #[arg(long, default_value_t = 256)]
    request_cap: usize,
    #[arg(long, default_value_t = 8192)]
    lru_blocks: usize,
    /// Keep groups in plan order instead of sorting by prefill tokens.
    #[arg(long)]
    no_reorder: bool,
    /// Limit on new group prefixes started per iteration.
    #[arg(long)]
    max_new_groups: Option<usize>,
}

impl SchedulerArgs {
    fn config(&self, policy: Policy) -> SchedulerConfig {
        SchedulerConfig {
            chunk_size: self.chunk_size,
            block_size: self.block_size,
            total_blocks: self.total_blocks,
            mem_threshold: self.mem_threshold,
            policy,
            request_cap: self.request_cap,
            lru_blocks: self.lru_blocks,
            reorder: !self.no_reorder,
            max_new_groups_per_iter: self.max_new_groups,
        }
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// batchllm, fcfs_cap or fcfs_cap_lru; repeat to run several.
    #[arg(long, required = true, value_parser = parse_policy)]
    policy: Vec<Policy>,
    /// Workload or groups file.
    #[arg(short, long)]
    input: PathBuf,
    /// Trace CSV. With several policies, `<stem>.<policy>.csv` is written
    /// next to it for each.
    #[arg(short, long)]
    output: PathBuf,
    /// Summary JSON (default `<trace stem>.summary.json`). Single policy only.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    valley_alpha: f64,
    #[command(flatten)]
    sched: SchedulerArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Trace CSVs, each with its `<stem>.summary.json` alongside.
    #[arg(short, long, required = true)]
    input: Vec<PathBuf>,
    /// Side-by-side CSV of per-iteration token counts.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Write the summaries as a JSON array here instead of stdout.
    #[arg(long)]
    summaries: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    valley_alpha: f64,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    #[arg(long, env = "PREFIXBATCH_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
}

fn parse_policy(s: &str) -> std::result::Result<Policy, String> {
    s.parse().map_err(|e: SimError| e.to_string())
}

/// Runs the command line and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let res = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Plan(a) => plan_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::AttnSelftest(a) => selftest_cmd(a),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let mut w = if a.industry {
        generate_industry(&IndustrySpec {
            num_requests: a.num_requests,
            output_len: a.output_len,
            seed: a.seed,
            ..IndustrySpec::default()
        })?
    } else {
        generate_microbenchmark(&SyntheticSpec {
            prefix_len: a.prefix_len,
            distinct_len: a.distinct_len,
            sharing_degree: a.sharing_degree,
            num_groups: a.num_groups,
            output_len: a.output_len,
            seed: a.seed,
        })?
    };
    if a.shuffle {
        w = shuffle_workload(&w, a.seed);
    }
    write_workload(&w, &a.output)?;
    println!("wrote {} requests to {}", w.len(), a.output.display());
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

enum Input {
    Workload(Workload),
    Groups(Vec<PrefixSharingGroup>),
}

/// Groups files are recognized by a `prefix` key on the first record.
fn read_input(path: &Path) -> Result<Input> {
    let mut first = String::new();
    let mut reader = open(path)?;
    while first.trim().is_empty() {
        first.clear();
        let n = reader.read_line(&mut first).map_err(|source| CliError::Io {
            path: path.to_owned(),
            source,
        })?;
        if n == 0 {
            return Err(CliError::Invalid(format!("{}: empty input", path.display())));
        }
    }
    let is_groups = serde_json::from_str::<serde_json::Value>(&first)
        .ok()
        .is_some_and(|v| v.get("prefix").is_some());
    let with_path = |msg: String| CliError::Invalid(format!("{}: {msg}", path.display()));
    if is_groups {
        parse_groups(open(path)?)
            .map(Input::Groups)
            .map_err(|e| with_path(e.to_string()))
    } else {
        parse_workload(open(path)?)
            .map(Input::Workload)
            .map_err(|e| with_path(e.to_string()))
    }
}

fn read_workload_input(path: &Path) -> Result<Workload> {
    match read_input(path)? {
        Input::Workload(w) => Ok(w),
        Input::Groups(g) => Ok(groups_to_workload(&g)),
    }
}

fn plan_cmd(a: PlanArgs) -> Result<()> {
    let w = read_workload_input(&a.input)?;
    let start = Instant::now();
    let groups = plan(&w);
    let secs = start.elapsed().as_secs_f64();
    write_groups(&groups, &a.output)?;

    let logical = w.logical_prefill_tokens();
    let tree = build_tree(&w);
    let naive = tree.first_level_saved_tokens() as f64 / logical as f64;
    let multi = tree.multi_level_saved_tokens() as f64 / logical as f64;
    let ratio = saving_ratio_static(&groups);
    let shared = groups.iter().filter(|g| g.members.len() > 1).count();
    println!("requests: {}", w.len());
    println!("groups: {} ({shared} with a shared prefix)", groups.len());
    println!("logical prefill tokens: {logical}");
    println!("processed prefill tokens: {}", processed_tokens(&groups));
    println!("saving ratio: {:.1}% ({ratio:.6})", ratio * 100.0);
    println!("  first level, before enlargement: {:.1}%", naive * 100.0);
    println!("  all tree levels: {:.1}%", multi * 100.0);
    println!("preprocessing time: {secs:.3}s");
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_owned(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn simulate_cmd(a: SimulateArgs) -> Result<()> {
    let vc = ValleyConfig::new(a.valley_alpha)?;
    let mut policies = a.policy.clone();
    policies.dedup();
    if policies.len() > 1 && a.summary.is_some() {
        return Err(CliError::Invalid("--summary only applies to a single --policy".into()));
    }
    let input = read_input(&a.input)?;
    let needs_groups = policies.contains(&Policy::BatchLlm);
    let needs_workload = policies.iter().any(|p| p.is_fcfs());
    let (groups, workload) = match input {
        Input::Workload(w) => (needs_groups.then(|| plan(&w)), Some(w)),
        Input::Groups(g) => {
            let w = needs_workload.then(|| groups_to_workload(&g));
            (Some(g), w)
        }
    };

    let jobs: Vec<(Policy, PathBuf, PathBuf)> = policies
        .iter()
        .map(|&p| {
            if policies.len() == 1 {
                let summary = a.summary.clone().unwrap_or_else(|| with_suffix(&a.output, ".summary.json"));
                (p, a.output.clone(), summary)
            } else {
                let trace = with_suffix(&a.output, &format!(".{p}.csv"));
                let summary = with_suffix(&trace, ".summary.json");
                (p, trace, summary)
            }
        })
        .collect();

    let results: Vec<Result<Summary>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(policy, trace_path, summary_path)| {
                let (groups, workload) = (&groups, &workload);
                let config = a.sched.config(*policy);
                s.spawn(move || -> Result<Summary> {
                    let input = match policy {
                        Policy::BatchLlm => SimInput::Groups(groups.as_deref().expect("planned above")),
                        _ => SimInput::Workload(workload.as_ref().expect("flattened above")),
                    };
                    let trace = simulate(input, config)?;
                    trace.write_csv(trace_path)?;
                    let summary = summarize(policy.as_str(), &trace, vc)?;
                    write_json(summary_path, &summary)?;
                    Ok(summary)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });

    for ((policy, trace_path, _), res) in jobs.iter().zip(results) {
        let s = res?;
        println!(
            "{policy}: {} iterations, saving ratio {:.1}%, mean tokens/iteration {:.1}, valley fraction {:.4} ({:.4} with tail, alpha {}) -> {}",
            s.iterations,
            s.saving_ratio * 100.0,
            s.mean_tokens_per_iteration,
            s.valley_fraction,
            s.valley_fraction_with_tail,
            s.valley_alpha,
            trace_path.display()
        );
    }
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let vc = ValleyConfig::new(a.valley_alpha)?;
    let mut traces = Vec::new();
    for path in &a.input {
        let rows = read_trace_csv(path)?;
        let summary_path = with_suffix(path, ".summary.json");
        let summary: Summary = serde_json::from_reader(open(&summary_path)?).map_err(|source| CliError::Json {
            path: summary_path.clone(),
            source,
        })?;
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        traces.push((label, summary.into_trace(rows)));
    }
    let refs: Vec<(&str, _)> = traces.iter().map(|(l, t)| (l.as_str(), t)).collect();
    let r = report(&refs, vc)?;
    match (&r.paired_csv, &a.output) {
        (Some(csv), Some(out)) => fs::write(out, csv).map_err(|source| CliError::Io {
            path: out.clone(),
            source,
        })?,
        (None, Some(_)) => eprintln!("note: a single trace has no side-by-side CSV"),
        _ => {}
    }
    match &a.summaries {
        Some(path) => write_json(path, &r.summaries)?,
        None => println!("{}", serde_json::to_string_pretty(&r.summaries).expect("summaries serialize")),
    }
    Ok(())
}

fn selftest_cmd(a: SelftestArgs) -> Result<()> {
    if a.instances == 0 {
        return Err(CliError::Invalid("--instances must be positive".into()));
    }
    let r = selftest(a.seed, a.instances);
    println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
    if r.passed {
        Ok(())
    } else {
        Err(CliError::Invalid("attention self-test exceeded tolerance".into()))
    }
}
