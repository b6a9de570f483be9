//! Binary snapshot files and their JSON energy sidecars.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    [u8; 8]  b"LMSNAP\0\0"
//! version  u32
//! n        u32
//! d        u32
//! reserved u32
//! time, gamma, eps, rho_bar   f64
//! rho[n*n], u_1[n*n], .., u_d[n*n]   f64, row-major
//! ```

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::compressible_solver::{EnergySample, FieldState};
use crate::error::{Error, Result};
use crate::state_space::Params;

pub const MAGIC: [u8; 8] = *b"LMSNAP\0\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 4 + 4 * 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub version: u32,
    pub n: u32,
    pub d: u32,
    pub time: f64,
    pub gamma: f64,
    pub eps: f64,
    pub rho_bar: f64,
}

pub fn encode(state: &FieldState, p: &Params) -> Vec<u8> {
    let nn = state.cells();
    let mut out = Vec::with_capacity(HEADER_LEN + 3 * nn * 8);
    out.extend_from_slice(&MAGIC);
    for v in [VERSION, state.n as u32, 2, 0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in [state.time, p.gamma, p.eps, p.rho_bar] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for field in [&state.rho, &state.u[0], &state.u[1]] {
        for v in field {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(SnapshotHeader, FieldState)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Snapshot(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..8] != MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let u32_at = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().unwrap());
    let f64_at = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    let version = u32_at(0);
    if version != VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let n = u32_at(1);
    let d = u32_at(2);
    if d != 2 {
        return Err(Error::Snapshot(format!("unsupported dimension {d}")));
    }
    let base = 8 + 16;
    let header = SnapshotHeader {
        version,
        n,
        d,
        time: f64_at(base),
        gamma: f64_at(base + 8),
        eps: f64_at(base + 16),
        rho_bar: f64_at(base + 24),
    };
    let nn = (n as usize) * (n as usize);
    let expected = HEADER_LEN + (1 + d as usize) * nn * 8;
    if bytes.len() != expected {
        return Err(Error::Snapshot(format!("expected {expected} bytes, got {}", bytes.len())));
    }
    let read = |k: usize| -> Vec<f64> {
        (0..nn)
            .map(|i| f64_at(HEADER_LEN + (k * nn + i) * 8))
            .collect()
    };
    let state = FieldState {
        n: n as usize,
        rho: read(0),
        u: [read(1), read(2)],
        time: header.time,
    };
    Ok((header, state))
}

pub fn write_snapshot(path: &Path, state: &FieldState, p: &Params) -> Result<()> {
    fs::write(path, encode(state, p))?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<(SnapshotHeader, FieldState)> {
    decode(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySidecar {
    pub params: Params,
    pub n: usize,
    pub series: Vec<EnergySample>,
}

pub fn write_energy_sidecar(path: &Path, sidecar: &EnergySidecar) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

pub fn read_energy_sidecar(path: &Path) -> Result<EnergySidecar> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let p = Params::new(2, 1.4, 0.01, 1.2, 0.5).unwrap();
        let mut s = FieldState::from_fn(16, |x, y| (1.0 + x * y, [x - y, 0.5 * x]));
        s.time = 0.25;
        let bytes = encode(&s, &p);
        let (h, back) = decode(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(h.gamma, 1.4);
        assert_eq!(h.rho_bar, 1.2);
        assert_eq!(h.n, 16);
    }

    #[test]
    fn rejects_corruption() {
        let p = Params::default();
        let s = FieldState::uniform(16, 1.0, [0.0, 0.0]);
        let bytes = encode(&s, &p);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = Params::default();
        let s = FieldState::uniform(16, 1.0, [0.1, 0.2]);
        let path = dir.path().join("s.bin");
        write_snapshot(&path, &s, &p).unwrap();
        assert_eq!(read_snapshot(&path).unwrap().1, s);
        let side = EnergySidecar {
            params: p,
            n: 16,
            series: vec![EnergySample { step: 0, time: 0.0, energy: 1.0 }],
        };
        let sp = dir.path().join("s.json");
        write_energy_sidecar(&sp, &side).unwrap();
        assert_eq!(read_energy_sidecar(&sp).unwrap(), side);
    }
}
