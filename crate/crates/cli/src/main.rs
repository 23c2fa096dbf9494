//! `pvmdiff`: differential fuzzing of pickle implementations.
//!
//! Exit status: `run` 0 on completion; `replay` 0 without and 1 with a
//! discrepancy; `disasm` 0 when the payload checks out, 1 otherwise;
//! 2 for usage, configuration and I/O errors everywhere.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use pvmdiff_core::campaign::{self, CampaignConfig};
use pvmdiff_core::disasm;
use pvmdiff_core::harness::{Budget, TargetId};
use pvmdiff_core::hashing::payload_seed;
use pvmdiff_core::{generate, GenLimits};

#[derive(Parser)]
#[command(name = "pvmdiff", version, about = "Differential fuzzer for pickle implementations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a fuzzing campaign.
    Run(RunArgs),
    /// Execute one stored payload on a target set and report the verdict.
    Replay(ReplayArgs),
    /// Print the disassembler listing of a pickle file.
    Disasm { path: PathBuf },
    /// Print or write generated payloads.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct LimitArgs {
    #[arg(long)]
    max_opcodes: Option<u32>,
    #[arg(long)]
    min_opcodes: Option<u32>,
    #[arg(long)]
    max_ascii_digits: Option<u32>,
    #[arg(long)]
    max_bytes_len: Option<u64>,
    #[arg(long)]
    put_max: Option<u64>,
    #[arg(long)]
    long_binput_max: Option<u64>,
    #[arg(long)]
    buffers_items: Option<u32>,
    /// Start from the large-input limits; explicit flags still apply.
    #[arg(long)]
    relaxed: bool,
}

impl LimitArgs {
    fn limits(&self) -> GenLimits {
        let mut l = if self.relaxed { GenLimits::relaxed() } else { GenLimits::default() };
        l.max_opcodes = self.max_opcodes.unwrap_or(l.max_opcodes);
        l.min_opcodes = self.min_opcodes.unwrap_or(l.min_opcodes);
        l.max_ascii_digits = self.max_ascii_digits.unwrap_or(l.max_ascii_digits);
        l.max_bytes_len = self.max_bytes_len.unwrap_or(l.max_bytes_len);
        l.put_index_max = self.put_max.unwrap_or(l.put_index_max);
        l.long_binput_index_max = self.long_binput_max.unwrap_or(l.long_binput_index_max);
        l.buffers_item_count = self.buffers_items.unwrap_or(l.buffers_item_count);
        l
    }
}

#[derive(Args)]
struct ExecArgs {
    /// Comma-separated target list.
    #[arg(long, default_value = "internal-pvm,internal-disasm")]
    targets: String,
    #[arg(long, default_value_t = 2000)]
    budget_ms: u64,
    #[arg(long, default_value_t = 512)]
    budget_mem_mib: u64,
    /// Bridge executable for ext-* targets.
    #[arg(long)]
    bridge_cmd: Option<PathBuf>,
}

impl ExecArgs {
    fn targets(&self) -> Result<Vec<TargetId>, String> {
        TargetId::parse_list(&self.targets).map_err(|e| e.to_string())
    }

    fn budget(&self) -> Budget {
        Budget { wall: Duration::from_millis(self.budget_ms), memory_bytes: self.budget_mem_mib << 20 }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, conflicts_with = "iterations", required_unless_present = "iterations")]
    duration: Option<f64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value = "pvmdiff-out")]
    out: PathBuf,
    #[command(flatten)]
    exec: ExecArgs,
    #[command(flatten)]
    limits: LimitArgs,
}

#[derive(Args)]
struct ReplayArgs {
    /// A raw pickle file or a finding directory.
    path: PathBuf,
    #[command(flatten)]
    exec: ExecArgs,
    #[arg(long, default_value_t = GenLimits::default().buffers_item_count)]
    buffers_items: u32,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Directory for `<n>.pkl` files; hex lines on stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    limits: LimitArgs,
}

fn run(args: RunArgs) -> Result<ExitCode, String> {
    let duration = match args.duration {
        Some(secs) if !(secs.is_finite() && secs >= 0.0) => return Err(format!("invalid duration {secs}")),
        Some(secs) => Some(Duration::from_secs_f64(secs)),
        None => None,
    };
    let cfg = CampaignConfig {
        duration,
        max_iterations: args.iterations,
        seed: args.seed,
        workers: args.workers,
        limits: args.limits.limits(),
        targets: args.exec.targets()?,
        out_dir: args.out.clone(),
        budget: args.exec.budget(),
        bridge_cmd: args.exec.bridge_cmd.clone(),
    };
    let result = campaign::run(&cfg).map_err(|e| e.to_string())?;
    let s = &result.stats;
    println!(
        "executed {} payloads in {:.1} s; {} error hits, {} storage hits, {} unique signatures",
        s.payloads_executed, s.elapsed_secs, s.error_discrepancy_hits, s.storage_discrepancy_hits, s.unique_signatures
    );
    println!("report: {}", args.out.join("report.txt").display());
    Ok(ExitCode::SUCCESS)
}

fn replay(args: ReplayArgs) -> Result<ExitCode, String> {
    let targets = args.exec.targets()?;
    let report = campaign::replay(&args.path, &targets, args.exec.budget(), args.buffers_items, args.exec.bridge_cmd)
        .map_err(|e| e.to_string())?;
    for record in &report.records {
        println!("{}", serde_json::to_string(record).map_err(|e| e.to_string())?);
    }
    match report.verdict {
        Some(v) => {
            println!("discrepancy: {} {}", v.kind, v.outcome_vector);
            Ok(ExitCode::from(1))
        }
        None => {
            println!("no discrepancy");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn disassemble(path: PathBuf) -> Result<ExitCode, String> {
    let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let result = disasm::disassemble_bytes(&bytes);
    print!("{result}");
    Ok(if result.is_ok() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn generate_payloads(args: GenerateArgs) -> Result<ExitCode, String> {
    let limits = args.limits.limits();
    limits.validate().map_err(|e| e.to_string())?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    for i in 0..args.count {
        let p = generate(payload_seed(args.seed, i), &limits);
        match &args.out {
            Some(dir) => {
                let path = dir.join(format!("{i}.pkl"));
                std::fs::write(&path, &p.pickle_bytes).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            None => {
                let hex: String = p.pickle_bytes.iter().map(|b| format!("{b:02x}")).collect();
                println!("{} {} {} {hex}", p.seed, p.encoding, p.buffers_choice.id());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Replay(args) => replay(args),
        Command::Disasm { path } => disassemble(path),
        Command::Generate(args) => generate_payloads(args),
    };
    result.unwrap_or_else(|e| {
        eprintln!("pvmdiff: {e}");
        ExitCode::from(2)
    })
}
