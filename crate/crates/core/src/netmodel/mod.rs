//! Network data model, case ingestion, energization bookkeeping, islands and
//! admittance assembly over the energized subgraph.

mod crankpath;
mod matpower;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bigload::BigLoad;

pub use crankpath::{apply_energization, apply_energization_with, load_crankpath, CrankPath, CrankStep, Dispatch, EnergizeError};
pub use matpower::parse_matpower;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CaseError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported format_version {0}, expected 1")]
    Version(u32),
    #[error("no buses")]
    NoBuses,
    #[error("{field}: unknown bus {bus}")]
    UnknownBus { field: String, bus: u32 },
    #[error("{field}: unknown generator {generator}")]
    UnknownGenerator { field: String, generator: u32 },
    #[error("duplicate {kind} id {id}")]
    Duplicate { kind: &'static str, id: u32 },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

impl CaseError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        CaseError::Invalid { field: field.into(), message: message.into() }
    }

    pub(crate) fn from_toml(text: &str, e: toml::de::Error) -> Self {
        let line = e.span().map(|s| text[..s.start.min(text.len())].lines().count().max(1)).unwrap_or(0);
        CaseError::Parse { line, message: e.message().to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bases {
    #[serde(default = "default_mva")]
    pub mva: f64,
    #[serde(default = "default_frequency")]
    pub frequency_hz: f64,
}

fn default_mva() -> f64 {
    100.0
}

fn default_frequency() -> f64 {
    60.0
}

impl Default for Bases {
    fn default() -> Self {
        Self { mva: default_mva(), frequency_hz: default_frequency() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    pub base_kv: f64,
    #[serde(default)]
    pub energized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_max: Option<f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub g_shunt: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub b_shunt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_real: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_imag: Option<f64>,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn is_one(x: &f64) -> bool {
    *x == 1.0
}

impl Bus {
    pub fn new(id: u32, base_kv: f64) -> Self {
        Self { id, base_kv, energized: false, v_min: None, v_max: None, g_shunt: 0.0, b_shunt: 0.0, v_real: None, v_imag: None }
    }

    pub fn voltage(&self) -> Option<Complex64> {
        Some(Complex64::new(self.v_real?, self.v_imag?))
    }

    pub fn set_voltage(&mut self, v: Complex64) {
        self.v_real = Some(v.re);
        self.v_imag = Some(v.im);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub b: f64,
    /// Off-nominal turns ratio on the `from` side.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub tap: f64,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub status: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

impl Branch {
    pub fn new(from: u32, to: u32, r: f64, x: f64) -> Self {
        Self { from, to, r, x, b: 0.0, tap: 1.0, status: true }
    }

    pub fn series_admittance(&self) -> Complex64 {
        Complex64::new(self.r, self.x).inv()
    }

    /// Two-port stamp `[[Yff, Yft], [Ytf, Ytt]]` of the pi model.
    pub fn stamp(&self) -> [[Complex64; 2]; 2] {
        let y = self.series_admittance();
        let half = Complex64::new(0.0, self.b / 2.0);
        let t = self.tap;
        [[(y + half) / (t * t), -y / t], [-y / t, y + half]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub id: u32,
    pub bus: u32,
    /// Actuated active set-point.
    pub p_set: f64,
    pub q_set: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Droop gain `M`, per unit power per Hz.
    pub droop_gain: f64,
    pub v_set: f64,
    #[serde(default = "default_ramp_min")]
    pub ramp_min: f64,
    #[serde(default = "default_ramp_max")]
    pub ramp_max: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub participates_in_sync: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub is_reference: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub energized: bool,
    /// Crank-path target `P^C`; defaults to `p_set`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_crank: Option<f64>,
}

fn default_ramp_min() -> f64 {
    -0.5
}

fn default_ramp_max() -> f64 {
    0.5
}

impl Generator {
    pub fn crank_p(&self) -> f64 {
        self.p_crank.unwrap_or(self.p_set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoadModel {
    ConstantPower { p_d: f64, q_d: f64 },
    Big(BigLoad),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadRecord {
    pub bus: u32,
    #[serde(default, skip_serializing_if = "is_false")]
    pub energized: bool,
    #[serde(flatten)]
    pub model: LoadModel,
}

impl LoadRecord {
    /// Current drawn at voltage `v`.
    pub fn current(&self, v: Complex64) -> Complex64 {
        match self.model {
            LoadModel::ConstantPower { p_d, q_d } => (Complex64::new(p_d, q_d) / v).conj(),
            LoadModel::Big(l) => {
                let (r, i) = crate::bigload::big_current(&l, v.re, v.im);
                Complex64::new(r, i)
            }
        }
    }

    /// Complex power drawn at voltage `v`.
    pub fn power(&self, v: Complex64) -> Complex64 {
        v * self.current(v).conj()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    #[serde(default)]
    pub bases: Bases,
    #[serde(default)]
    pub buses: Vec<Bus>,
    #[serde(default)]
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub generators: Vec<Generator>,
    #[serde(default)]
    pub loads: Vec<LoadRecord>,
    /// Crank steps applied so far, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub applied_steps: Vec<u32>,
    /// Frequency deviation of the latest solved state, Hz.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub delta_f: f64,
}

/// Parses a case file. Structured-text cases and matrix-style cases
/// (`function mpc = ...`) are both accepted. Everything starts de-energized.
pub fn load_case(text: &str) -> Result<Network, CaseError> {
    let mut net = if looks_like_matpower(text) {
        parse_matpower(text)?
    } else {
        toml::from_str::<Network>(text).map_err(|e| CaseError::from_toml(text, e))?
    };
    net.deenergize();
    net.validate()?;
    Ok(net)
}

fn looks_like_matpower(text: &str) -> bool {
    text.lines().map(str::trim).any(|l| l.starts_with("function") && l.contains("mpc"))
}

impl Network {
    pub fn from_toml(text: &str) -> Result<Network, CaseError> {
        let net: Network = toml::from_str(text).map_err(|e| CaseError::from_toml(text, e))?;
        net.validate()?;
        Ok(net)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network is always representable")
    }

    pub fn deenergize(&mut self) {
        for b in &mut self.buses {
            b.energized = false;
            b.v_real = None;
            b.v_imag = None;
        }
        for g in &mut self.generators {
            g.energized = false;
            g.p_crank = None;
        }
        for l in &mut self.loads {
            l.energized = false;
        }
        self.applied_steps.clear();
        self.delta_f = 0.0;
    }

    pub fn validate(&self) -> Result<(), CaseError> {
        if self.format_version != FORMAT_VERSION {
            return Err(CaseError::Version(self.format_version));
        }
        if self.buses.is_empty() {
            return Err(CaseError::NoBuses);
        }
        if !(self.bases.mva > 0.0) || !(self.bases.frequency_hz > 0.0) {
            return Err(CaseError::invalid("bases", "bases must be positive"));
        }
        let mut ids = BTreeSet::new();
        for (k, b) in self.buses.iter().enumerate() {
            if !ids.insert(b.id) {
                return Err(CaseError::Duplicate { kind: "bus", id: b.id });
            }
            if !(b.base_kv > 0.0) {
                return Err(CaseError::invalid(format!("buses[{k}].base_kv"), "must be positive"));
            }
            if let (Some(lo), Some(hi)) = (b.v_min, b.v_max) {
                if !(lo < hi) {
                    return Err(CaseError::invalid(format!("buses[{k}].v_min"), "v_min must be below v_max"));
                }
            }
            if !b.energized && (b.v_real.is_some() || b.v_imag.is_some()) {
                return Err(CaseError::invalid(format!("buses[{k}]"), "de-energized bus carries a voltage"));
            }
        }
        let known = |bus: u32, field: String| if ids.contains(&bus) { Ok(()) } else { Err(CaseError::UnknownBus { field, bus }) };
        for (k, br) in self.branches.iter().enumerate() {
            known(br.from, format!("branches[{k}].from"))?;
            known(br.to, format!("branches[{k}].to"))?;
            if br.r == 0.0 && br.x == 0.0 {
                return Err(CaseError::invalid(format!("branches[{k}]"), "zero impedance"));
            }
            if !(br.tap > 0.0) {
                return Err(CaseError::invalid(format!("branches[{k}].tap"), "must be positive"));
            }
        }
        let mut gids = BTreeSet::new();
        for (k, g) in self.generators.iter().enumerate() {
            if !gids.insert(g.id) {
                return Err(CaseError::Duplicate { kind: "generator", id: g.id });
            }
            known(g.bus, format!("generators[{k}].bus"))?;
            if g.p_min > g.p_max {
                return Err(CaseError::invalid(format!("generators[{k}].p_min"), "p_min exceeds p_max"));
            }
            if g.q_min > g.q_max {
                return Err(CaseError::invalid(format!("generators[{k}].q_min"), "q_min exceeds q_max"));
            }
            if !(g.droop_gain >= 0.0) {
                return Err(CaseError::invalid(format!("generators[{k}].droop_gain"), "must be non-negative"));
            }
            if !(g.ramp_min <= 0.0 && g.ramp_max >= 0.0) {
                return Err(CaseError::invalid(format!("generators[{k}].ramp_min"), "ramp range must contain 0"));
            }
            if !(g.v_set > 0.0) {
                return Err(CaseError::invalid(format!("generators[{k}].v_set"), "must be positive"));
            }
        }
        for (k, l) in self.loads.iter().enumerate() {
            known(l.bus, format!("loads[{k}].bus"))?;
        }
        Ok(())
    }

    pub fn bus_position(&self, id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn bus(&self, id: u32) -> Option<&Bus> {
        self.buses.iter().find(|b| b.id == id)
    }

    pub fn bus_mut(&mut self, id: u32) -> Option<&mut Bus> {
        self.buses.iter_mut().find(|b| b.id == id)
    }

    pub fn generator(&self, id: u32) -> Option<&Generator> {
        self.generators.iter().find(|g| g.id == id)
    }

    pub fn generator_mut(&mut self, id: u32) -> Option<&mut Generator> {
        self.generators.iter_mut().find(|g| g.id == id)
    }

    pub fn energized_buses(&self) -> Vec<u32> {
        self.buses.iter().filter(|b| b.energized).map(|b| b.id).collect()
    }

    pub fn is_energized(&self, bus: u32) -> bool {
        self.bus(bus).is_some_and(|b| b.energized)
    }

    /// In service iff the status flag is set and both ends are energized.
    pub fn branch_in_service(&self, br: &Branch) -> bool {
        br.status && self.is_energized(br.from) && self.is_energized(br.to)
    }

    pub fn in_service_branches(&self) -> impl Iterator<Item = &Branch> {
        self.branches.iter().filter(|b| self.branch_in_service(b))
    }

    pub fn energized_generators(&self) -> impl Iterator<Item = &Generator> {
        self.generators.iter().filter(|g| g.energized && self.is_energized(g.bus))
    }

    pub fn energized_loads(&self) -> impl Iterator<Item = &LoadRecord> {
        self.loads.iter().filter(|l| l.energized && self.is_energized(l.bus))
    }

    /// Voltage bounds of a bus, falling back to `default` where unset.
    pub fn voltage_bounds(&self, bus: u32, default: (f64, f64)) -> (f64, f64) {
        let b = self.bus(bus);
        (b.and_then(|b| b.v_min).unwrap_or(default.0), b.and_then(|b| b.v_max).unwrap_or(default.1))
    }

    pub fn is_fully_energized(&self) -> bool {
        self.buses.iter().all(|b| b.energized)
    }
}

/// Connected components of the energized subgraph over in-service branches.
/// Each island lists bus ids in ascending order; islands are ordered by
/// their smallest bus id.
pub fn islands(net: &Network) -> Vec<Vec<u32>> {
    let mut adj: BTreeMap<u32, Vec<u32>> = net.energized_buses().into_iter().map(|b| (b, Vec::new())).collect();
    for br in net.in_service_branches() {
        adj.get_mut(&br.from).expect("energized").push(br.to);
        adj.get_mut(&br.to).expect("energized").push(br.from);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &start in adj.keys() {
        if !seen.insert(start) {
            continue;
        }
        let mut comp = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(b) = queue.pop_front() {
            for &n in &adj[&b] {
                if seen.insert(n) {
                    comp.push(n);
                    queue.push_back(n);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Sparse complex bus admittance matrix over energized buses.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    /// Bus id of each row/column, ascending.
    pub buses: Vec<u32>,
    pub index: HashMap<u32, usize>,
    /// Row-wise sorted `(column, value)` entries.
    pub rows: Vec<Vec<(usize, Complex64)>>,
}

impl AdmittanceMatrix {
    pub fn dim(&self) -> usize {
        self.buses.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.rows[i].iter().find(|(c, _)| *c == j).map_or(Complex64::new(0.0, 0.0), |e| e.1)
    }

    /// `sum_k Y_ik V_k` for every row.
    pub fn mul(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.rows.iter().map(|row| row.iter().map(|&(c, y)| y * v[c]).sum()).collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<Complex64>> {
        let n = self.dim();
        let mut d = vec![vec![Complex64::new(0.0, 0.0); n]; n];
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, y) in row {
                d[r][c] = y;
            }
        }
        d
    }
}

pub fn assemble_ybus(net: &Network) -> AdmittanceMatrix {
    let mut buses = net.energized_buses();
    buses.sort_unstable();
    assemble_ybus_for(net, &buses)
}

/// Admittance matrix restricted to `buses` (all must be energized).
pub fn assemble_ybus_for(net: &Network, buses: &[u32]) -> AdmittanceMatrix {
    let index: HashMap<u32, usize> = buses.iter().enumerate().map(|(i, &b)| (b, i)).collect();
    let mut acc: Vec<BTreeMap<usize, Complex64>> = vec![BTreeMap::new(); buses.len()];
    for (&id, &i) in &index {
        let b = net.bus(id).expect("bus exists");
        if b.g_shunt != 0.0 || b.b_shunt != 0.0 {
            *acc[i].entry(i).or_default() += Complex64::new(b.g_shunt, b.b_shunt);
        }
    }
    for br in net.in_service_branches() {
        let (Some(&f), Some(&t)) = (index.get(&br.from), index.get(&br.to)) else { continue };
        let s = br.stamp();
        *acc[f].entry(f).or_default() += s[0][0];
        *acc[f].entry(t).or_default() += s[0][1];
        *acc[t].entry(f).or_default() += s[1][0];
        *acc[t].entry(t).or_default() += s[1][1];
    }
    let rows = acc.into_iter().map(|m| m.into_iter().collect()).collect();
    AdmittanceMatrix { buses: buses.to_vec(), index, rows }
}
