//! Event counters and throughput / efficiency arithmetic.

use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapath::PEAK_MACS_PER_CYCLE;

/// Counters accumulated by the simulator. SRAM counts are 16-byte word
/// accesses; DRAM counts are bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerfCounters {
    pub cycles: u64,
    pub stall_cycles: u64,
    pub macs: u64,
    pub sram_reads: u64,
    pub sram_writes: u64,
    pub dram_bytes_in: u64,
    pub dram_bytes_out: u64,
    pub commands_executed: u64,
    /// DRAM bytes spent fetching command words, kept apart from data traffic.
    pub command_bytes: u64,
    pub pixels_streamed: u64,
    pub prefetch_words: u64,
    pub peak_sram_bytes: u64,
}

impl PerfCounters {
    /// Cycles in which the datapath was not stalled.
    pub fn active_cycles(&self) -> u64 {
        self.cycles - self.stall_cycles
    }

    /// Fraction of peak MAC throughput over the whole run.
    pub fn utilization(&self) -> f64 {
        if self.cycles == 0 {
            return 0.0;
        }
        self.macs as f64 / (self.cycles * PEAK_MACS_PER_CYCLE) as f64
    }

    pub fn ops(&self) -> u64 {
        2 * self.macs
    }
}

impl AddAssign for PerfCounters {
    fn add_assign(&mut self, o: Self) {
        self.cycles += o.cycles;
        self.stall_cycles += o.stall_cycles;
        self.macs += o.macs;
        self.sram_reads += o.sram_reads;
        self.sram_writes += o.sram_writes;
        self.dram_bytes_in += o.dram_bytes_in;
        self.dram_bytes_out += o.dram_bytes_out;
        self.commands_executed += o.commands_executed;
        self.command_bytes += o.command_bytes;
        self.pixels_streamed += o.pixels_streamed;
        self.prefetch_words += o.prefetch_words;
        self.peak_sram_bytes = self.peak_sram_bytes.max(o.peak_sram_bytes);
    }
}

impl Add for PerfCounters {
    type Output = Self;

    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

impl std::iter::Sum for PerfCounters {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Achieved and peak throughput in GOPS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gops {
    pub achieved: f64,
    pub peak: f64,
}

/// Peak throughput at `freq_mhz`: every PE busy every cycle, two ops per MAC.
pub fn peak_gops(freq_mhz: f64) -> f64 {
    2.0 * PEAK_MACS_PER_CYCLE as f64 * freq_mhz / 1000.0
}

pub fn gops(c: &PerfCounters, freq_mhz: f64) -> Gops {
    let achieved = if c.cycles == 0 {
        0.0
    } else {
        // ops / (cycles / f) with f in MHz gives ops per microsecond
        2.0 * c.macs as f64 * freq_mhz / c.cycles as f64 / 1000.0
    };
    Gops {
        achieved,
        peak: peak_gops(freq_mhz),
    }
}

/// Operating point: clock and the measured power drawn at it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerProfile {
    #[serde(default)]
    pub name: String,
    pub freq_mhz: f64,
    pub power_mw: f64,
    #[serde(default)]
    pub voltage: Option<f64>,
    #[serde(default)]
    pub pj_per_mac: Option<f64>,
    #[serde(default)]
    pub pj_per_sram_word: Option<f64>,
    #[serde(default)]
    pub pj_per_dram_byte: Option<f64>,
}

/// Clock range the power figures were characterized over.
pub const FREQ_ENVELOPE_MHZ: (f64, f64) = (20.0, 500.0);

impl PowerProfile {
    pub fn new(freq_mhz: f64, power_mw: f64) -> Self {
        let p = PowerProfile {
            name: String::new(),
            freq_mhz,
            power_mw,
            voltage: None,
            pj_per_mac: None,
            pj_per_sram_word: None,
            pj_per_dram_byte: None,
        };
        p.check_envelope();
        p
    }

    /// Logs a warning when the clock lies outside the characterized range.
    pub fn check_envelope(&self) -> bool {
        let (lo, hi) = FREQ_ENVELOPE_MHZ;
        let inside = (lo..=hi).contains(&self.freq_mhz);
        if !inside {
            log::warn!("{} MHz is outside the characterized {lo}-{hi} MHz range", self.freq_mhz);
        }
        inside
    }

    /// Event-based energy estimate in microjoules, when every coefficient is
    /// present.
    pub fn event_energy_uj(&self, c: &PerfCounters) -> Option<f64> {
        let pj = self.pj_per_mac? * c.macs as f64
            + self.pj_per_sram_word? * (c.sram_reads + c.sram_writes) as f64
            + self.pj_per_dram_byte? * (c.dram_bytes_in + c.dram_bytes_out) as f64;
        Some(pj / 1e6)
    }
}

/// Efficiency in TOPS/W: GOPS per milliwatt.
pub fn energy_efficiency(gops: f64, profile: &PowerProfile) -> f64 {
    assert!(profile.power_mw > 0.0, "power must be positive");
    gops / profile.power_mw
}

#[derive(Debug, Clone, Deserialize)]
struct OperatingPoints {
    point: Vec<PowerProfile>,
}

/// Operating points shipped with the crate.
pub const BUNDLED_OPERATING_POINTS: &str = include_str!("../../config/operating_points.toml");

pub fn parse_operating_points(text: &str) -> Result<Vec<PowerProfile>, toml::de::Error> {
    Ok(toml::from_str::<OperatingPoints>(text)?.point)
}

pub fn load_operating_points(path: impl AsRef<Path>) -> std::io::Result<Vec<PowerProfile>> {
    let text = std::fs::read_to_string(path)?;
    parse_operating_points(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

pub fn bundled_operating_points() -> Vec<PowerProfile> {
    parse_operating_points(BUNDLED_OPERATING_POINTS).expect("bundled operating points parse")
}

/// Bundled profile whose clock matches `freq_mhz`, if any.
pub fn operating_point(freq_mhz: f64) -> Option<PowerProfile> {
    bundled_operating_points()
        .into_iter()
        .find(|p| (p.freq_mhz - freq_mhz).abs() < 1e-9)
}
