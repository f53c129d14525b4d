use std::collections::BTreeSet;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CaseError, LoadModel, Network, FORMAT_VERSION};
use crate::bigload::pq_to_big;

/// Crank-path target for one generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub generator: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_set: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrankStep {
    pub sequence: u32,
    pub buses: Vec<u32>,
    #[serde(default)]
    pub generators: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dispatch: Vec<Dispatch>,
    /// Sequence number of the step that must be applied first.
    #[serde(skip)]
    pub previous: Option<u32>,
}

impl CrankStep {
    pub fn dispatch_for(&self, generator: u32) -> Option<&Dispatch> {
        self.dispatch.iter().find(|d| d.generator == generator)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrankPath {
    pub format_version: u32,
    #[serde(default)]
    pub steps: Vec<CrankStep>,
}

impl CrankPath {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, sequence: u32) -> Option<&CrankStep> {
        self.steps.iter().find(|s| s.sequence == sequence)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("crank path is always representable")
    }

    fn link(&mut self) {
        let mut prev = None;
        for s in &mut self.steps {
            s.previous = prev;
            prev = Some(s.sequence);
        }
    }
}

/// Parses and validates a crank path against `net`.
pub fn load_crankpath(text: &str, net: &Network) -> Result<CrankPath, CaseError> {
    let mut path: CrankPath = toml::from_str(text).map_err(|e| CaseError::from_toml(text, e))?;
    if path.format_version != FORMAT_VERSION {
        return Err(CaseError::Version(path.format_version));
    }
    if path.steps.is_empty() {
        return Err(CaseError::invalid("steps", "empty crank path"));
    }
    let mut energized = BTreeSet::new();
    let mut last = None;
    for (k, step) in path.steps.iter().enumerate() {
        if last.is_some_and(|l| step.sequence <= l) {
            return Err(CaseError::invalid(format!("steps[{k}].sequence"), "sequence numbers must strictly increase"));
        }
        last = Some(step.sequence);
        for &b in &step.buses {
            if net.bus(b).is_none() {
                return Err(CaseError::UnknownBus { field: format!("steps[{k}].buses"), bus: b });
            }
            energized.insert(b);
        }
        let ids = step.generators.iter().copied().chain(step.dispatch.iter().map(|d| d.generator));
        for g in ids {
            let Some(gen) = net.generator(g) else {
                return Err(CaseError::UnknownGenerator { field: format!("steps[{k}].generators"), generator: g });
            };
            if !energized.contains(&gen.bus) {
                return Err(CaseError::invalid(
                    format!("steps[{k}].generators"),
                    format!("generator {g} sits on bus {} which is not energized by this step", gen.bus),
                ));
            }
        }
    }
    let first = &path.steps[0];
    let has_reference = first.generators.iter().any(|&g| net.generator(g).is_some_and(|g| g.is_reference));
    if !has_reference {
        return Err(CaseError::invalid("steps[0].generators", "first step must energize the reference generator"));
    }
    path.link();
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergizeError {
    #[error("step {step} applied out of order: expected predecessor {expected:?}, last applied {last:?}")]
    OutOfOrder { step: u32, expected: Option<u32>, last: Option<u32> },
    #[error("step {step}: unknown bus {bus}")]
    UnknownBus { step: u32, bus: u32 },
    #[error("step {step}: unknown generator {generator}")]
    UnknownGenerator { step: u32, generator: u32 },
}

/// Energizes one crank step at loading factor 1.
pub fn apply_energization(net: &Network, step: &CrankStep) -> Result<Network, EnergizeError> {
    apply_energization_with(net, step, 1.0)
}

/// Energizes the listed buses and generators, attaches the loads of newly
/// energized buses as linear loads drawing `loading_factor` times their case
/// power at flat voltage, and applies the step's dispatch targets.
/// Re-applying an already applied step returns the network unchanged.
pub fn apply_energization_with(net: &Network, step: &CrankStep, loading_factor: f64) -> Result<Network, EnergizeError> {
    if net.applied_steps.contains(&step.sequence) {
        return Ok(net.clone());
    }
    let last = net.applied_steps.last().copied();
    if last != step.previous {
        return Err(EnergizeError::OutOfOrder { step: step.sequence, expected: step.previous, last });
    }
    let mut out = net.clone();
    for &b in &step.buses {
        let bus = out.bus_mut(b).ok_or(EnergizeError::UnknownBus { step: step.sequence, bus: b })?;
        bus.energized = true;
    }
    let flat = Complex64::new(1.0, 0.0);
    for load in &mut out.loads {
        if load.energized || !step.buses.contains(&load.bus) {
            continue;
        }
        load.energized = true;
        if let LoadModel::ConstantPower { p_d, q_d } = load.model {
            let big = pq_to_big(p_d * loading_factor, q_d * loading_factor, flat.re, flat.im).expect("flat voltage is nonzero");
            load.model = LoadModel::Big(big);
        }
    }
    for &g in &step.generators {
        let gen = out.generator_mut(g).ok_or(EnergizeError::UnknownGenerator { step: step.sequence, generator: g })?;
        gen.energized = true;
    }
    for d in &step.dispatch {
        let gen = out.generator_mut(d.generator).ok_or(EnergizeError::UnknownGenerator { step: step.sequence, generator: d.generator })?;
        if let Some(p) = d.p {
            gen.p_set = p;
            gen.p_crank = Some(p);
        }
        if let Some(q) = d.q {
            gen.q_set = q;
        }
        if let Some(v) = d.v_set {
            gen.v_set = v;
        }
    }
    // Crank targets persist across steps until a dispatch entry overrides them.
    for g in &mut out.generators {
        if g.energized && g.p_crank.is_none() {
            g.p_crank = Some(g.p_set);
        }
    }
    out.applied_steps.push(step.sequence);
    Ok(out)
}
