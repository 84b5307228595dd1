//! Measurement harness: throughput, round-trip latency, time-to-first-byte
//! and fan-in, over the fabric or loopback sockets.

pub mod sim;
pub mod socket;
pub mod stats;

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::Serialize;

use crate::overlay::Placement;
pub use stats::{ecdf, summarize, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ConnectionType {
    FunctionToFunction,
    VmToFunction,
    FunctionToVm,
    FunctionToVmNative,
    VmToVm,
    VmToVmNative,
}

impl ConnectionType {
    pub const ALL: [ConnectionType; 6] = [
        ConnectionType::FunctionToFunction,
        ConnectionType::VmToFunction,
        ConnectionType::FunctionToVm,
        ConnectionType::FunctionToVmNative,
        ConnectionType::VmToVm,
        ConnectionType::VmToVmNative,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ConnectionType::FunctionToFunction => "Function-to-Function",
            ConnectionType::VmToFunction => "VM-to-Function",
            ConnectionType::FunctionToVm => "Function-to-VM",
            ConnectionType::FunctionToVmNative => "Function-to-VM-native",
            ConnectionType::VmToVm => "VM-to-VM",
            ConnectionType::VmToVmNative => "VM-to-VM-native",
        }
    }

    /// Placement of the connecting side.
    pub fn client(self) -> Placement {
        match self {
            ConnectionType::FunctionToFunction | ConnectionType::FunctionToVm | ConnectionType::FunctionToVmNative => {
                Placement::Function
            }
            _ => Placement::Vm,
        }
    }

    /// Placement of the accepting side.
    pub fn server(self) -> Placement {
        match self {
            ConnectionType::FunctionToFunction | ConnectionType::VmToFunction => Placement::Function,
            _ => Placement::Vm,
        }
    }

    /// Whether setup goes through the agents.
    pub fn brokered(self) -> bool {
        !matches!(self, ConnectionType::FunctionToVmNative | ConnectionType::VmToVmNative)
    }
}

impl fmt::Display for ConnectionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ConnectionType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ConnectionType::ALL
            .into_iter()
            .find(|t| t.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = ConnectionType::ALL.iter().map(|t| t.label()).collect();
                format!("unknown connection type {s:?}; expected one of {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ThroughputFwd,
    ThroughputRev,
    RttLatency,
    Ttfb,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::ThroughputFwd => "throughput_fwd",
            Metric::ThroughputRev => "throughput_rev",
            Metric::RttLatency => "rtt_latency",
            Metric::Ttfb => "ttfb",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Metric::ThroughputFwd | Metric::ThroughputRev => "Mbit/s",
            Metric::RttLatency | Metric::Ttfb => "us",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

impl Direction {
    pub fn metric(self) -> Metric {
        match self {
            Direction::Forward => Metric::ThroughputFwd,
            Direction::Reverse => Metric::ThroughputRev,
        }
    }
}

/// Samples of one metric for one connection type, with their summary.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub connection_type: ConnectionType,
    pub metric: Metric,
    pub samples: Vec<f64>,
    /// Establishments or pairs that failed, with the reason.
    pub failures: Vec<String>,
}

impl BenchRecord {
    pub fn summary(&self) -> Option<Summary> {
        summarize(&self.samples)
    }
}

pub const CSV_HEADER: &str = "connection_type,metric,mean,median,std,min,max";

/// Writes the summary table; records without samples are skipped.
pub fn write_csv(out: &mut dyn Write, records: &[BenchRecord]) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        if let Some(s) = r.summary() {
            writeln!(out, "{},{},{},{},{},{},{}", r.connection_type, r.metric, s.mean, s.median, s.std, s.min, s.max)?;
        }
    }
    Ok(())
}

/// Writes every sample so the summary can be recomputed.
pub fn write_raw(out: &mut dyn Write, records: &[BenchRecord]) -> io::Result<()> {
    writeln!(out, "connection_type,metric,value")?;
    for r in records {
        for v in &r.samples {
            writeln!(out, "{},{},{}", r.connection_type, r.metric, v)?;
        }
    }
    Ok(())
}

pub fn write_ecdf(out: &mut dyn Write, samples: &[f64]) -> io::Result<()> {
    writeln!(out, "value,quantile")?;
    for (v, q) in ecdf(samples) {
        writeln!(out, "{v},{q}")?;
    }
    Ok(())
}

/// One point of the fan-in series.
#[derive(Debug, Clone, PartialEq)]
pub struct FanInPoint {
    pub senders: usize,
    /// Aggregate receive rate per interval, Mbit/s.
    pub samples: Vec<f64>,
    pub failures: Vec<String>,
}

pub fn write_fanin_csv(out: &mut dyn Write, points: &[FanInPoint]) -> io::Result<()> {
    writeln!(out, "senders,mean_mbits,std")?;
    for p in points {
        if let Some(s) = summarize(&p.samples) {
            writeln!(out, "{},{},{}", p.senders, s.mean, s.std)?;
        }
    }
    Ok(())
}

pub(crate) fn mbits(bytes: u64, secs: f64) -> f64 {
    bytes as f64 * 8.0 / secs / 1e6
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        for t in ConnectionType::ALL {
            assert_eq!(t.label().parse::<ConnectionType>(), Ok(t));
        }
        assert!("vm-to-vm-native".parse::<ConnectionType>().is_ok());
        assert!("VM-to-Cloud".parse::<ConnectionType>().is_err());
    }

    #[test]
    fn native_types_skip_the_broker() {
        let brokered: Vec<_> = ConnectionType::ALL.iter().filter(|t| t.brokered()).collect();
        assert_eq!(brokered.len(), 4);
    }

    #[test]
    fn csv_has_table_columns() {
        let r = BenchRecord {
            connection_type: ConnectionType::VmToVm,
            metric: Metric::Ttfb,
            samples: vec![500.0, 300.0],
            failures: vec![],
        };
        let mut out = Vec::new();
        write_csv(&mut out, &[r]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), format!("{CSV_HEADER}\nVM-to-VM,ttfb,400,400,100,300,500\n"));
    }
}
