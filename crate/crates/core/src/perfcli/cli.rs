//! `streamcnn` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 no feasible plan,
//! 3 datapath/oracle mismatch, 4 I/O error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::perf::{energy_efficiency, gops, operating_point, PerfCounters, PowerProfile};
use super::report::{report, Format};
use crate::datapath::{AccelConfig, Accelerator, SimError};
use crate::netmodel::{
    alexnet, load_filters, load_tensor, parse_network, random_network_filters, random_tensor, store_tensor, FilterSet,
    NetError, NetworkSpec, Tensor3D,
};
use crate::oracle::run_network_ref_layers;
use crate::planner::{emit_network, plan_csv, plan_layer, write_command_stream, PlanError, TilePlan};

#[derive(Debug, Parser)]
#[command(
    name = "streamcnn",
    version,
    about = "Streaming CNN accelerator simulator and planner"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Args)]
struct NetArgs {
    /// Network description; the bundled AlexNet stack when omitted.
    #[arg(long)]
    net: Option<PathBuf>,
    /// Buffer bank size in KiB.
    #[arg(long, default_value_t = 128)]
    sram_kb: u64,
    /// Override the planner with a fixed GX,GY,F decomposition.
    #[arg(long, value_parser = parse_tile)]
    tile: Option<(usize, usize, usize)>,
    /// Apply --tile to this layer only (1-based).
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 500.0)]
    freq_mhz: f64,
    /// Power at --freq-mhz; defaults to the bundled operating point.
    #[arg(long)]
    power_mw: Option<f64>,
    #[arg(long, default_value = "text")]
    format: Format,
}

#[derive(Debug, Clone, Args)]
struct DataArgs {
    /// Input tensor (FXT3); random when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Filter sets (FXW4), one per layer.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synthesize random weights from --seed.
    #[arg(long)]
    random_weights: bool,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Plan every layer and print the decomposition report.
    Plan {
        #[command(flatten)]
        net: NetArgs,
        /// Write the command stream here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the network and print counters.
    Run {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Write a JSON run record here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the final activations (FXT3) here.
        #[arg(long)]
        save_output: Option<PathBuf>,
    },
    /// Simulate and compare every layer against the reference model.
    Verify {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Re-render a saved run record.
    Report {
        run: PathBuf,
        #[arg(long, default_value = "text")]
        format: Format,
        /// Clock for the throughput columns; the recorded one by default.
        #[arg(long)]
        freq_mhz: Option<f64>,
    },
}

fn parse_tile(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [gx, gy, f] => Ok((gx, gy, f)),
        _ => Err(format!("expected GX,GY,F, got `{s}`")),
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Infeasible(String),
    Mismatch(String),
    Io(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Infeasible(_) => 2,
            CliError::Mismatch(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Infeasible(m) | CliError::Mismatch(m) | CliError::Io(m) => m,
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::Infeasible { .. } | PlanError::DoesNotFit { .. } => CliError::Infeasible(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Capacity { .. } => CliError::Infeasible(e.to_string()),
            SimError::Net(n) => n.into(),
            SimError::Plan(p) => p.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Saved outcome of `run`, re-rendered by `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub net: NetworkSpec,
    pub plans: Vec<TilePlan>,
    pub counters: Vec<PerfCounters>,
    pub freq_mhz: f64,
    pub power_mw: Option<f64>,
    pub seed: Option<u64>,
}

fn load_net(args: &NetArgs) -> Result<NetworkSpec, CliError> {
    match &args.net {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            Ok(parse_network(&text)?)
        }
        None => Ok(alexnet()),
    }
}

fn make_plans(net: &NetworkSpec, args: &NetArgs) -> Result<Vec<TilePlan>, CliError> {
    let sram = args.sram_kb * 1024;
    if let Some(n) = args.layer {
        if n == 0 || n > net.layers.len() {
            return Err(CliError::Usage(format!("--layer {n} outside 1..={}", net.layers.len())));
        }
    }
    net.layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let fixed = args.tile.filter(|_| args.layer.is_none_or(|n| n == i + 1));
            let plan = match fixed {
                Some((gx, gy, f)) => TilePlan::fitting(l, gx, gy, f, sram),
                None => plan_layer(l, sram),
            };
            plan.map_err(|e| CliError::from(e).with_context(&format!("layer {}", i + 1)))
        })
        .collect()
}

impl CliError {
    fn with_context(self, ctx: &str) -> Self {
        let wrap = |m: String| format!("{ctx}: {m}");
        match self {
            CliError::Usage(m) => CliError::Usage(wrap(m)),
            CliError::Infeasible(m) => CliError::Infeasible(wrap(m)),
            CliError::Mismatch(m) => CliError::Mismatch(wrap(m)),
            CliError::Io(m) => CliError::Io(wrap(m)),
        }
    }
}

fn power_profile(args: &NetArgs) -> Option<PowerProfile> {
    let profile = match args.power_mw {
        Some(mw) => Some(PowerProfile::new(args.freq_mhz, mw)),
        None => operating_point(args.freq_mhz),
    };
    if profile.is_none() {
        PowerProfile::new(args.freq_mhz, 1.0).check_envelope();
    }
    profile
}

fn load_data(
    net: &NetworkSpec,
    data: &DataArgs,
    need_weights_flag: bool,
) -> Result<(Tensor3D, Vec<FilterSet>), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(data.seed);
    let first = &net.layers[0];
    let input = match &data.input {
        Some(p) => load_tensor(p)?,
        None => random_tensor(&mut rng, first.in_c, first.in_h, first.in_w, 1.0),
    };
    let weights = match (&data.weights, data.random_weights) {
        (Some(_), true) => return Err(CliError::Usage("--weights and --random-weights are exclusive".into())),
        (Some(p), false) => load_filters(p)?,
        (None, true) => random_network_filters(&mut rng, net),
        (None, false) if !need_weights_flag => random_network_filters(&mut rng, net),
        (None, false) => return Err(CliError::Usage("give --weights PATH or --random-weights".into())),
    };
    if weights.len() != net.layers.len() {
        return Err(CliError::Usage(format!(
            "{} filter sets for {} layers",
            weights.len(),
            net.layers.len()
        )));
    }
    for (i, (w, l)) in weights.iter().zip(&net.layers).enumerate() {
        w.check_layer(l)
            .map_err(|e| CliError::Usage(format!("layer {}: {e}", i + 1)))?;
    }
    if input.dims() != first.in_dims() {
        return Err(CliError::Usage(format!(
            "input is {:?} (w, h, c), network expects {:?}",
            input.dims(),
            first.in_dims()
        )));
    }
    Ok((input, weights))
}

fn sim_config(args: &NetArgs) -> AccelConfig {
    AccelConfig {
        sram_bytes: args.sram_kb * 1024,
        ..AccelConfig::default()
    }
}

fn plan_details(net: &NetworkSpec, plans: &[TilePlan]) -> String {
    let mut s = String::new();
    for (i, (p, l)) in plans.iter().zip(&net.layers).enumerate() {
        let fp = &p.footprint;
        writeln!(
            s,
            "layer {}: {}x{} tiles x {} feature groups, {} sub-kernels, {}",
            i + 1,
            p.gx,
            p.gy,
            p.f,
            p.s,
            p.loop_order.tag()
        )
        .unwrap();
        writeln!(
            s,
            "  input tile {} B ({} B without halo), output tile {} B, weights {} B, resident {} B",
            fp.input_halo,
            fp.input_naive,
            fp.output,
            fp.weights,
            fp.resident()
        )
        .unwrap();
        writeln!(
            s,
            "  DRAM in {} B, out {} B (layer data {} B)",
            p.dram_in,
            p.dram_out,
            l.input_bytes() + l.weight_bytes() + p.dram_out
        )
        .unwrap();
    }
    s
}

fn throughput_summary(total: &PerfCounters, freq_mhz: f64, profile: Option<&PowerProfile>) -> String {
    let g = gops(total, freq_mhz);
    let mut s = format!(
        "cycles {}  stalls {}  MACs {}  utilization {:.3}\nthroughput {:.2} GOPS of {:.2} peak at {freq_mhz} MHz\n",
        total.cycles,
        total.stall_cycles,
        total.macs,
        total.utilization(),
        g.achieved,
        g.peak
    );
    writeln!(
        s,
        "SRAM reads {} writes {} words, DRAM in {} out {} B, commands {} ({} B)",
        total.sram_reads,
        total.sram_writes,
        total.dram_bytes_in,
        total.dram_bytes_out,
        total.commands_executed,
        total.command_bytes
    )
    .unwrap();
    if let Some(p) = profile {
        writeln!(
            s,
            "efficiency {:.3} TOPS/W achieved, {:.3} TOPS/W peak at {} mW",
            energy_efficiency(g.achieved, p),
            energy_efficiency(g.peak, p),
            p.power_mw
        )
        .unwrap();
    }
    s
}

fn cmd_plan(args: &NetArgs, out_path: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let net = load_net(args)?;
    let plans = make_plans(&net, args)?;
    match args.format {
        Format::Csv => write!(out, "{}", plan_csv(&plans))?,
        Format::Text => {
            write!(out, "{}", report(&net, &plans, None, args.freq_mhz, Format::Text))?;
            writeln!(out)?;
            write!(out, "{}", plan_details(&net, &plans))?;
        }
    }
    if let Some(p) = out_path {
        let cmds = emit_network(&plans, &net.layers).map_err(|e| CliError::Usage(e.to_string()))?;
        let mut f = std::fs::File::create(p)?;
        write_command_stream(&mut f, &cmds).map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(())
}

fn cmd_run(
    args: &NetArgs,
    data: &DataArgs,
    record_path: Option<&Path>,
    save_output: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let net = load_net(args)?;
    let plans = make_plans(&net, args)?;
    let (input, weights) = load_data(&net, data, true)?;
    let run = Accelerator::new(sim_config(args)).run_network(&net, &plans, &input, &weights)?;
    write!(
        out,
        "{}",
        report(&net, &plans, Some(&run.layers), args.freq_mhz, args.format)
    )?;
    let profile = power_profile(args);
    if args.format == Format::Text {
        writeln!(out)?;
        write!(
            out,
            "{}",
            throughput_summary(&run.total(), args.freq_mhz, profile.as_ref())
        )?;
    }
    if let Some(p) = record_path {
        let record = RunRecord {
            net: net.clone(),
            plans,
            counters: run.layers.clone(),
            freq_mhz: args.freq_mhz,
            power_mw: profile.map(|p| p.power_mw),
            seed: (data.weights.is_none() || data.input.is_none()).then_some(data.seed),
        };
        let json = serde_json::to_string_pretty(&record).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(p, json)?;
    }
    if let Some(p) = save_output {
        store_tensor(run.outputs.last().expect("at least one layer"), p)?;
    }
    Ok(())
}

/// First differing element of two equally shaped tensors.
fn first_mismatch(got: &Tensor3D, want: &Tensor3D) -> Option<(usize, usize, usize, usize)> {
    if got.dims() != want.dims() {
        return Some((0, 0, 0, usize::MAX));
    }
    let count = got.data.iter().zip(&want.data).filter(|(a, b)| a != b).count();
    let i = got.data.iter().zip(&want.data).position(|(a, b)| a != b)?;
    let (c, rest) = (i / (got.h * got.w), i % (got.h * got.w));
    Some((c, rest / got.w, rest % got.w, count))
}

fn cmd_verify(args: &NetArgs, data: &DataArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let net = load_net(args)?;
    let plans = make_plans(&net, args)?;
    let (input, weights) = load_data(&net, data, false)?;
    let config = sim_config(args);
    let (sim, reference) = std::thread::scope(|s| {
        let sim = s.spawn(|| Accelerator::new(config).run_network(&net, &plans, &input, &weights));
        let reference = s.spawn(|| run_network_ref_layers(&net, &input, &weights));
        (
            sim.join().expect("simulator thread panicked"),
            reference.join().expect("reference thread panicked"),
        )
    });
    let sim = sim?;
    let reference = reference.map_err(|e| CliError::Usage(format!("reference model: {e}")))?;
    let mut failures = Vec::new();
    for (i, (got, want)) in sim.outputs.iter().zip(&reference).enumerate() {
        match first_mismatch(got, want) {
            None => writeln!(out, "layer {}: {} values identical", i + 1, got.data.len())?,
            Some((c, y, x, n)) => {
                writeln!(
                    out,
                    "layer {}: {n} values differ, first at channel {c} row {y} col {x}",
                    i + 1
                )?;
                failures.push(i + 1);
            }
        }
    }
    let total = sim.total();
    let g = gops(&total, args.freq_mhz);
    write!(
        out,
        "{}",
        throughput_summary(&total, args.freq_mhz, power_profile(args).as_ref())
    )?;
    if g.achieved > g.peak {
        return Err(CliError::Mismatch(format!(
            "achieved {:.3} GOPS exceeds peak {:.3}",
            g.achieved, g.peak
        )));
    }
    if !failures.is_empty() {
        return Err(CliError::Mismatch(format!(
            "layers {failures:?} differ from the reference"
        )));
    }
    writeln!(out, "verify: OK")?;
    Ok(())
}

fn cmd_report(path: &Path, format: Format, freq: Option<f64>, out: &mut dyn Write) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let record: RunRecord =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let freq = freq.unwrap_or(record.freq_mhz);
    write!(
        out,
        "{}",
        report(&record.net, &record.plans, Some(&record.counters), freq, format)
    )?;
    if format == Format::Text {
        let total: PerfCounters = record.counters.iter().copied().sum();
        let profile = record.power_mw.map(|mw| PowerProfile::new(freq, mw));
        writeln!(out)?;
        write!(out, "{}", throughput_summary(&total, freq, profile.as_ref()))?;
    }
    Ok(())
}

/// Run the CLI on `args` (program name first). Normal output goes to
/// `out`, diagnostics and usage text to `err`. Returns the exit status.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    return 0;
                }
                _ => 1,
            };
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    let result = match &cli.cmd {
        Cmd::Plan { net, out: path } => cmd_plan(net, path.as_deref(), out),
        Cmd::Run {
            net,
            data,
            out: path,
            save_output,
        } => cmd_run(net, data, path.as_deref(), save_output.as_deref(), out),
        Cmd::Verify { net, data } => cmd_verify(net, data, out),
        Cmd::Report { run, format, freq_mhz } => cmd_report(run, *format, *freq_mhz, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_cli(
            std::iter::once("streamcnn").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn tile_flag_parsing() {
        assert_eq!(parse_tile("3,3,2"), Ok((3, 3, 2)));
        assert!(parse_tile("3,3").is_err());
        assert!(parse_tile("a,1,1").is_err());
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let (code, _, err) = run(&["plan", "--bogus"]);
        assert_eq!(code, 1);
        assert!(err.contains("Usage"));
    }

    #[test]
    fn tiny_budget_is_infeasible() {
        let (code, _, err) = run(&["plan", "--sram-kb", "1"]);
        assert_eq!(code, 2, "{err}");
    }

    #[test]
    fn missing_net_file_is_io_error() {
        let (code, _, _) = run(&["plan", "--net", "/nonexistent/x.net"]);
        assert_eq!(code, 4);
    }

    #[test]
    fn plan_csv_has_a_row_per_layer() {
        let (code, out, _) = run(&["plan", "--format", "csv"]);
        assert_eq!(code, 0);
        assert_eq!(out.lines().count(), 6);
    }
}
