//! Simulator and decomposition planner for a streaming CNN accelerator with
//! a 128 KB single-port buffer bank and sixteen 3x3 convolution units.
//!
//! - [`fxp`]: Q8.8 words and the 48-bit accumulator
//! - [`netmodel`]: layer descriptions, tensors, file formats
//! - [`oracle`]: loop-nest reference convolution and pooling
//! - [`planner`]: tiling search, DRAM traffic, command streams
//! - [`datapath`]: the cycle-approximate engine
//! - [`perfcli`]: counters, throughput metrics, reports and the CLI

pub mod datapath;
pub mod fxp;
pub mod netmodel;
pub mod oracle;
pub mod perfcli;
pub mod planner;
