//! Serialisable report documents shared by the CLI and the Python bindings.
//!
//! Numeric reports never contain wall-clock data; timings are kept in a
//! separate [`Timings`] document so that re-running a manifest reproduces the
//! report byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::certify::Certificate;
use crate::netmodel::{NetworkSpec, Units};
use crate::sim::{Classification, Trajectory};
use crate::steadystate::DispatchResult;
use crate::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

impl InputFile {
    pub fn new(path: &Path, bytes: &[u8]) -> Self {
        Self {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        }
    }
}

/// What was run, on which inputs, with which resolved options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<InputFile>,
    pub options: serde_json::Value,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, inputs: Vec<InputFile>, options: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            inputs,
            options,
            tool_version: TOOL_VERSION.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyReport {
    pub manifest: RunManifest,
    pub network_fingerprint: String,
    pub units: Units,
    pub beta: f64,
    pub beta_capped: bool,
    pub tau: f64,
    pub cpl_buses: Vec<String>,
    /// Voltage floor in working units and in volts.
    pub floor: Vec<f64>,
    pub floor_volts: Vec<f64>,
    pub delta_inf: Vec<f64>,
}

impl CertifyReport {
    pub fn new(manifest: RunManifest, cert: &Certificate) -> Self {
        Self {
            manifest,
            network_fingerprint: cert.network_fingerprint.clone(),
            units: cert.units,
            beta: cert.beta,
            beta_capped: cert.beta_capped,
            tau: cert.tau,
            cpl_buses: cert.cpl_buses.clone(),
            floor: cert.floor.clone(),
            floor_volts: cert.floor_volts(),
            delta_inf: cert.delta_inf.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub manifest: RunManifest,
    pub network_fingerprint: String,
    pub setpoints_volts: Vec<f64>,
    pub result: DispatchResult,
}

impl SynthesisReport {
    pub fn new(manifest: RunManifest, fingerprint: String, result: DispatchResult) -> Self {
        Self {
            manifest,
            network_fingerprint: fingerprint,
            setpoints_volts: result
                .point
                .u
                .iter()
                .map(|u| u * result.voltage_scale)
                .collect(),
            result,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub converged: usize,
    pub diverged: usize,
    pub undecided: usize,
}

impl ClassCounts {
    pub fn add(&mut self, c: Classification) {
        match c {
            Classification::Converged => self.converged += 1,
            Classification::Diverged => self.diverged += 1,
            Classification::Undecided => self.undecided += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.converged + self.diverged + self.undecided
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRow {
    pub index: usize,
    pub status: Classification,
    pub final_distance: f64,
    pub steps: usize,
    /// Largest normalised increase of `V` along the run, when a certificate
    /// was supplied.
    pub lyapunov_increase: Option<f64>,
}

impl SimulationRow {
    pub fn new(index: usize, t: &Trajectory, lyapunov_increase: Option<f64>) -> Self {
        Self {
            index,
            status: t.status,
            final_distance: t.final_distance,
            steps: t.steps,
            lyapunov_increase,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub manifest: RunManifest,
    pub network_fingerprint: String,
    pub setpoints: Vec<f64>,
    pub counts: ClassCounts,
    pub rows: Vec<SimulationRow>,
}

/// Per-step wall-clock seconds, written next to (never inside) a report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub command: String,
    pub seconds: BTreeMap<String, f64>,
}

impl Timings {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            seconds: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, step: &str, seconds: f64) {
        self.seconds.insert(step.to_string(), seconds);
    }
}

/// Refuse a certificate produced for a different network.
pub fn check_pairing(spec: &NetworkSpec, cert: &Certificate) -> Result<()> {
    let fp = spec.fingerprint();
    if fp != cert.network_fingerprint {
        return Err(Error::Schema(format!(
            "certificate was issued for network {} but this network hashes to {fp}",
            cert.network_fingerprint
        )));
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    write_text(dir, name, &to_json_pretty(value)?)
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{parse_network, tests::one_bus_json};

    #[test]
    fn hash_is_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn pairing_rejects_other_network() {
        let spec = parse_network(one_bus_json()).unwrap();
        let mut other = spec.clone();
        other.buses[0].capacitance *= 2.0;
        let cert = Certificate {
            network_fingerprint: spec.fingerprint(),
            ..crate::certify::tests::dummy_certificate()
        };
        assert!(check_pairing(&spec, &cert).is_ok());
        assert!(matches!(
            check_pairing(&other, &cert),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn counts_add_up() {
        let mut c = ClassCounts::default();
        for k in [
            Classification::Converged,
            Classification::Diverged,
            Classification::Converged,
            Classification::Undecided,
        ] {
            c.add(k);
        }
        assert_eq!(
            (c.converged, c.diverged, c.undecided, c.total()),
            (2, 1, 1, 4)
        );
    }
}
