//! Performance metrics, reports and the command-line driver.

mod cli;
mod perf;
mod report;

pub use cli::{run_cli, CliError, RunRecord};
pub use perf::{
    bundled_operating_points, energy_efficiency, gops, load_operating_points, operating_point, parse_operating_points,
    peak_gops, Gops, PerfCounters, PowerProfile, BUNDLED_OPERATING_POINTS, FREQ_ENVELOPE_MHZ,
};
pub use report::{format_ops, render_csv, render_text, report, report_cells, Format, REPORT_COLUMNS};
