//! Per-layer summary tables in text and CSV.
//!
//! Both renderings are produced from the same cell strings, so they always
//! carry identical numbers. Memory columns use 1000-byte kilobytes; layer
//! rows round each layer's bytes to KB, the totals row rounds the summed
//! bytes to MB.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::perf::{gops, PerfCounters};
use crate::netmodel::{kb_rounded, NetworkSpec, KB};
use crate::planner::TilePlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Format {
    Text,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(Format::Text),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown format `{other}` (expected text or csv)")),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 12] = [
    "layer",
    "input",
    "output",
    "ops",
    "in_mem",
    "out_mem",
    "total_mem",
    "plan",
    "order",
    "cycles",
    "gops",
    "dram_kb",
];

/// Ops as `211M`, or `1.3G` from a billion up.
pub fn format_ops(ops: u64) -> String {
    if ops >= 1_000_000_000 {
        format!("{:.1}G", ops as f64 / 1e9)
    } else {
        format!("{}M", (ops + 500_000) / 1_000_000)
    }
}

fn format_mb(bytes: u64) -> String {
    format!("{:.1}MB", bytes as f64 / (KB * KB) as f64)
}

fn dims((w, h, c): (usize, usize, usize)) -> String {
    format!("{w}x{h}x{c}")
}

/// Table cells, header first, one row per layer and a totals row.
pub fn report_cells(
    net: &NetworkSpec,
    plans: &[TilePlan],
    counters: Option<&[PerfCounters]>,
    freq_mhz: f64,
) -> Vec<Vec<String>> {
    let mut rows = vec![REPORT_COLUMNS.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    let (mut ops, mut inb, mut outb, mut dram, mut total) = (0, 0, 0, 0, PerfCounters::default());
    for (i, l) in net.layers.iter().enumerate() {
        let plan = plans.get(i);
        let c = counters.and_then(|c| c.get(i));
        let (lin, lout) = (l.input_bytes(), l.output_bytes());
        ops += l.ops_count();
        inb += lin;
        outb += lout;
        let mut row = vec![
            (i + 1).to_string(),
            dims(l.in_dims()),
            dims(l.conv_dims().expect("validated layer")),
            format_ops(l.ops_count()),
            format!("{}KB", kb_rounded(lin)),
            format!("{}KB", kb_rounded(lout)),
            format!("{}KB", kb_rounded(lin + lout)),
        ];
        match plan {
            Some(p) => {
                dram += p.dram_total();
                row.push(format!("{}x{}x{}", p.gx, p.gy, p.f));
                row.push(p.loop_order.tag().to_string());
            }
            None => row.extend(["-".to_string(), "-".to_string()]),
        }
        match c {
            Some(c) => {
                total += *c;
                row.push(c.cycles.to_string());
                row.push(format!("{:.2}", gops(c, freq_mhz).achieved));
            }
            None => row.extend(["-".to_string(), "-".to_string()]),
        }
        row.push(match plan {
            Some(p) => kb_rounded(p.dram_total()).to_string(),
            None => "-".to_string(),
        });
        rows.push(row);
    }
    let ran = counters.is_some_and(|c| !c.is_empty());
    rows.push(vec![
        "total".to_string(),
        String::new(),
        String::new(),
        format_ops(ops),
        format_mb(inb),
        format_mb(outb),
        format_mb(inb + outb),
        String::new(),
        String::new(),
        if ran { total.cycles.to_string() } else { "-".to_string() },
        if ran {
            format!("{:.2}", gops(&total, freq_mhz).achieved)
        } else {
            "-".to_string()
        },
        if plans.is_empty() {
            "-".to_string()
        } else {
            kb_rounded(dram).to_string()
        },
    ]);
    rows
}

pub fn render_text(cells: &[Vec<String>]) -> String {
    let cols = cells.first().map_or(0, Vec::len);
    let widths: Vec<usize> = (0..cols)
        .map(|j| cells.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (cell, &w))| {
                if j == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
        if i == 0 {
            writeln!(
                out,
                "{}",
                "-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1))
            )
            .unwrap();
        }
    }
    out
}

pub fn render_csv(cells: &[Vec<String>]) -> String {
    let mut out = String::new();
    for row in cells {
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    out
}

/// Per-layer table of a network, its plans and, after a run, its counters.
pub fn report(
    net: &NetworkSpec,
    plans: &[TilePlan],
    counters: Option<&[PerfCounters]>,
    freq_mhz: f64,
    format: Format,
) -> String {
    let cells = report_cells(net, plans, counters, freq_mhz);
    match format {
        Format::Text => render_text(&cells),
        Format::Csv => render_csv(&cells),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::alexnet;
    use crate::planner::{plan_layer, SRAM_BYTES};

    fn parse_text(text: &str) -> Vec<Vec<String>> {
        text.lines()
            .filter(|l| !l.starts_with("---"))
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    }

    #[test]
    fn alexnet_plan_only_columns() {
        let net = alexnet();
        let cells = report_cells(&net, &[], None, 500.0);
        let col = |name: &str| {
            let j = REPORT_COLUMNS.iter().position(|c| *c == name).unwrap();
            cells[1..].iter().map(|r| r[j].clone()).collect::<Vec<_>>()
        };
        assert_eq!(col("ops"), ["211M", "448M", "299M", "224M", "150M", "1.3G"]);
        assert_eq!(col("in_mem"), ["309KB", "140KB", "87KB", "130KB", "130KB", "0.8MB"]);
        assert_eq!(col("out_mem"), ["581KB", "373KB", "130KB", "130KB", "87KB", "1.3MB"]);
        assert_eq!(col("total_mem"), ["890KB", "513KB", "216KB", "260KB", "216KB", "2.1MB"]);
    }

    #[test]
    fn text_and_csv_agree() {
        let net = alexnet();
        let plans: Vec<_> = net.layers.iter().map(|l| plan_layer(l, SRAM_BYTES).unwrap()).collect();
        let counters: Vec<_> = (0..5)
            .map(|i| PerfCounters {
                cycles: 1000 + i,
                macs: 50_000,
                ..Default::default()
            })
            .collect();
        let csv = report(&net, &plans, Some(&counters), 500.0, Format::Csv);
        let text = report(&net, &plans, Some(&counters), 500.0, Format::Text);
        let from_csv: Vec<Vec<String>> = csv
            .lines()
            .map(|l| l.split(',').filter(|c| !c.is_empty()).map(str::to_string).collect())
            .collect();
        assert_eq!(from_csv, parse_text(&text));
    }

    #[test]
    fn single_layer_totals() {
        let net = NetworkSpec::new("one", vec![alexnet().layers[2]]).unwrap();
        let cells = report_cells(&net, &[], None, 500.0);
        assert_eq!(cells.len(), 3);
        assert_eq!(cells[2][0], "total");
        assert_eq!(cells[2][3], "299M");
    }

    #[test]
    fn empty_network_has_header_and_zero_totals() {
        let net = NetworkSpec {
            name: "empty".into(),
            layers: Vec::new(),
        };
        let cells = report_cells(&net, &[], None, 500.0);
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[1][3..7], ["0M", "0.0MB", "0.0MB", "0.0MB"]);
    }

    #[test]
    fn ops_formatting() {
        assert_eq!(format_ops(0), "0M");
        assert_eq!(format_ops(210_830_400), "211M");
        assert_eq!(format_ops(1_331_569_728), "1.3G");
    }
}
