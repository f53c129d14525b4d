//! One operator session walking a crank path: the live network, the
//! networks before each actuated step, the report history and the
//! measurement windows feeding load re-fits.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use blackstart_core::bigload::{fit_big, MeasurementSample, MeasurementWindows};
use blackstart_core::netmodel::{load_case, load_crankpath, CaseError, CrankPath, LoadModel, LoadRecord, Network};
use blackstart_core::powerflow::{solve_with, PfError, PfMode};
use blackstart_core::restoration::{
    actuate_step, boundary_state, dispatch_of, synchronize, validate_step, BoundaryState, RestorationError, StepBounds,
    StepReport, SyncError, SyncRecommendation,
};

use crate::config::EngineConfig;

/// Samples needed before a bus load is re-fitted.
pub const MIN_FIT_SAMPLES: usize = 8;

/// SHA-256 of the canonical TOML rendering of `net`, hex encoded.
pub fn network_hash(net: &Network) -> String {
    hex::encode(Sha256::digest(net.to_toml().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    /// Case file text, TOML or MATPOWER.
    pub case: String,
    /// Crank path TOML.
    pub crankpath: String,
    #[serde(default)]
    pub bounds: Option<StepBounds>,
    #[serde(default)]
    pub loading_factor: Option<f64>,
    /// Interconnection bus reported by the boundary endpoint.
    #[serde(default)]
    pub boundary_bus: Option<u32>,
    #[serde(default)]
    pub island_id: Option<String>,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{0}")]
    Case(#[from] CaseError),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error(transparent)]
    Restoration(#[from] RestorationError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    PowerFlow(#[from] PfError),
}

impl SessionError {
    /// Field or line the error refers to, when it has one.
    pub fn locus(&self) -> Option<String> {
        match self {
            SessionError::Case(CaseError::Parse { line, .. }) => Some(format!("line {line}")),
            SessionError::Case(CaseError::UnknownBus { field, .. })
            | SessionError::Case(CaseError::UnknownGenerator { field, .. })
            | SessionError::Case(CaseError::Invalid { field, .. }) => Some(field.clone()),
            _ => None,
        }
    }
}

/// Validation of the cursor step that an actuation may cite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitedValidation {
    pub step: u32,
    pub network_hash: String,
    pub report: StepReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingSync {
    pub network_hash: String,
    pub recommendation: SyncRecommendation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub accepted: usize,
    /// Records for buses not in the case.
    pub unknown_bus: usize,
    /// Duplicate or out-of-order timestamps.
    pub rejected: usize,
    pub refitted: Vec<u32>,
    pub fit_errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub island_id: String,
    pub initial: Network,
    pub network: Network,
    /// Crank path TOML; the parsed form is rebuilt on load.
    path_toml: String,
    #[serde(skip)]
    path: Option<CrankPath>,
    /// 1-based index of the next step to actuate.
    pub cursor: u32,
    pub reports: Vec<StepReport>,
    /// Network before each actuated step.
    pub history: Vec<Network>,
    /// Network hash right after each actuation, before any later
    /// measurement re-fit or synchronization.
    #[serde(default)]
    pub actuated: Vec<String>,
    pub windows: MeasurementWindows,
    pub bounds: StepBounds,
    pub loading_factor: f64,
    pub boundary_bus: Option<u32>,
    pub last_validation: Option<CitedValidation>,
    pub pending_sync: Option<PendingSync>,
}

impl Session {
    pub fn create(id: String, req: &CreateSession, cfg: &EngineConfig) -> Result<Self, SessionError> {
        let mut initial = load_case(&req.case)?;
        initial.deenergize();
        let path = load_crankpath(&req.crankpath, &initial)?;
        let bounds = req.bounds.unwrap_or(cfg.bounds);
        bounds.validate().map_err(SessionError::BadRequest)?;
        let loading_factor = req.loading_factor.unwrap_or(cfg.loading_factor);
        if !(loading_factor > 0.0) {
            return Err(SessionError::BadRequest("loading_factor must be positive".into()));
        }
        if let Some(b) = req.boundary_bus {
            if initial.bus(b).is_none() {
                return Err(CaseError::UnknownBus { field: "boundary_bus".into(), bus: b }.into());
            }
        }
        Ok(Self {
            island_id: req.island_id.clone().unwrap_or_else(|| id.clone()),
            id,
            network: initial.clone(),
            initial,
            path_toml: path.to_toml(),
            path: Some(path),
            cursor: 1,
            reports: Vec::new(),
            history: Vec::new(),
            actuated: Vec::new(),
            windows: MeasurementWindows::default(),
            bounds,
            loading_factor,
            boundary_bus: req.boundary_bus,
            last_validation: None,
            pending_sync: None,
        })
    }

    /// Restores the parsed crank path after deserialization.
    pub fn relink(&mut self) -> Result<(), SessionError> {
        self.path = Some(load_crankpath(&self.path_toml, &self.initial)?);
        Ok(())
    }

    pub fn path(&self) -> &CrankPath {
        self.path.as_ref().expect("session crank path linked")
    }

    pub fn steps(&self) -> u32 {
        self.path().len() as u32
    }

    pub fn network_hash(&self) -> String {
        network_hash(&self.network)
    }

    /// Inputs of a validation, detached from the session so the solve can
    /// run without holding it.
    pub fn validation_job(&self, step: Option<u32>, cfg: &EngineConfig) -> Result<ValidationJob, SessionError> {
        let step = step.unwrap_or(self.cursor);
        if step == 0 || step > self.cursor || step > self.steps() {
            return Err(SessionError::BadRequest(format!(
                "step {step} out of range: cursor {}, {} steps",
                self.cursor,
                self.steps()
            )));
        }
        let net = if step == self.cursor { self.network.clone() } else { self.history[step as usize - 1].clone() };
        Ok(ValidationJob {
            step,
            is_cursor: step == self.cursor,
            network_hash: network_hash(&net),
            crank: self.path().steps[step as usize - 1].clone(),
            network: net,
            bounds: self.bounds,
            config: cfg.restoration(self.loading_factor),
        })
    }

    /// Records a cursor-step validation so actuation can cite it. Ignored if
    /// the network moved on while the job ran.
    pub fn record_validation(&mut self, job: &ValidationJob, report: &StepReport) {
        if job.is_cursor && job.step == self.cursor && job.network_hash == self.network_hash() {
            self.last_validation =
                Some(CitedValidation { step: job.step, network_hash: job.network_hash.clone(), report: report.clone() });
        }
    }

    /// Actuates the cursor step with the validation computed on
    /// `network_hash`.
    pub fn actuate(&mut self, network_hash: &str) -> Result<StepReport, SessionError> {
        let current = self.network_hash();
        if network_hash != current {
            return Err(SessionError::Conflict(format!("stale network hash {network_hash}, current {current}")));
        }
        let Some(cited) = self.last_validation.as_ref().filter(|v| v.step == self.cursor && v.network_hash == current) else {
            return Err(SessionError::Conflict(format!("step {} has no validation on the current network", self.cursor)));
        };
        if !cited.report.feasible {
            return Err(SessionError::Conflict(format!("step {} validation is not feasible", self.cursor)));
        }
        let report = cited.report.clone();
        let step = self.path().steps[self.cursor as usize - 1].clone();
        let next = actuate_step(&self.network, &step, &report, self.loading_factor)?;
        self.actuated.push(self::network_hash(&next));
        self.history.push(std::mem::replace(&mut self.network, next));
        self.reports.push(report.clone());
        self.cursor += 1;
        self.last_validation = None;
        self.pending_sync = None;
        Ok(report)
    }

    /// Adds samples to the per-bus windows and re-fits the linear load of
    /// every bus that received new samples.
    pub fn ingest(&mut self, samples: &[MeasurementSample]) -> IngestSummary {
        let mut s = IngestSummary { accepted: 0, unknown_bus: 0, rejected: 0, refitted: Vec::new(), fit_errors: Vec::new() };
        let mut touched = std::collections::BTreeSet::new();
        for &m in samples {
            if self.network.bus(m.bus).is_none() {
                s.unknown_bus += 1;
            } else if self.windows.push(m) {
                s.accepted += 1;
                touched.insert(m.bus);
            } else {
                s.rejected += 1;
            }
        }
        for bus in touched {
            if self.windows.len(bus) < MIN_FIT_SAMPLES {
                continue;
            }
            match fit_big(&self.windows.samples(bus)) {
                Ok(fit) => {
                    self.replace_load(bus, LoadModel::Big(fit.load));
                    s.refitted.push(bus);
                }
                Err(e) => s.fit_errors.push(format!("bus {bus}: {e}")),
            }
        }
        if !s.refitted.is_empty() {
            self.last_validation = None;
            self.pending_sync = None;
        }
        s
    }

    fn replace_load(&mut self, bus: u32, model: LoadModel) {
        let energized = self.network.is_energized(bus);
        self.network.loads.retain(|l| l.bus != bus);
        self.network.loads.push(LoadRecord { bus, energized, model });
        self.network.loads.sort_by_key(|l| l.bus);
    }

    pub fn boundary(&self, bus: Option<u32>, timestamp: f64) -> Result<BoundaryState, SessionError> {
        let bus = bus
            .or(self.boundary_bus)
            .ok_or_else(|| SessionError::BadRequest("no boundary bus configured for this session".into()))?;
        Ok(boundary_state(&self.network, bus, &self.island_id, timestamp)?)
    }

    /// Stores a recommendation computed on `network_hash` for later
    /// confirmation.
    pub fn record_sync(&mut self, network_hash: &str, rec: &SyncRecommendation) {
        if network_hash == self.network_hash() {
            self.pending_sync = Some(PendingSync { network_hash: network_hash.to_string(), recommendation: rec.clone() });
        }
    }

    /// Applies the pending recommendation's set-points and re-solves the
    /// governor power flow.
    pub fn confirm_sync(&mut self, network_hash: &str, cfg: &EngineConfig) -> Result<SyncRecommendation, SessionError> {
        let current = self.network_hash();
        if network_hash != current {
            return Err(SessionError::Conflict(format!("stale network hash {network_hash}, current {current}")));
        }
        let Some(pending) = self.pending_sync.as_ref().filter(|p| p.network_hash == current) else {
            return Err(SessionError::Conflict("no recommendation pending for the current network".into()));
        };
        if !pending.recommendation.converged {
            return Err(SessionError::Conflict("pending recommendation is indeterminate".into()));
        }
        let rec = pending.recommendation.clone();
        let mut net = self.network.clone();
        for sp in &rec.generators {
            if let Some(g) = net.generator_mut(sp.id) {
                g.p_set = sp.p_set;
                g.v_set = sp.v_set;
            }
        }
        let pf = solve_with(&net, PfMode::Governor, &cfg.pf)?;
        pf.store(&mut net);
        self.network = net;
        self.pending_sync = None;
        self.last_validation = None;
        Ok(rec)
    }
}

/// Everything one validation needs, owned.
#[derive(Debug, Clone)]
pub struct ValidationJob {
    pub step: u32,
    pub is_cursor: bool,
    pub network_hash: String,
    pub network: Network,
    pub crank: blackstart_core::netmodel::CrankStep,
    pub bounds: StepBounds,
    pub config: blackstart_core::restoration::RestorationConfig,
}

impl ValidationJob {
    pub fn run(&self) -> Result<StepReport, SessionError> {
        let prev = dispatch_of(&self.network);
        Ok(validate_step(&self.network, &self.crank, &prev, &self.bounds, &self.config)?)
    }
}

/// Inputs of a synchronization solve, owned.
#[derive(Debug, Clone)]
pub struct SyncJob {
    pub network_hash: String,
    pub network: Network,
    pub local_bus: u32,
    pub remote: BoundaryState,
    pub participating: Vec<u32>,
    pub options: blackstart_core::restoration::SyncOptions,
}

impl SyncJob {
    pub fn run(&self) -> Result<SyncRecommendation, SessionError> {
        Ok(synchronize(&self.network, self.local_bus, &self.remote, &self.participating, &self.options)?)
    }
}

impl Session {
    pub fn sync_job(
        &self,
        remote: BoundaryState,
        participating: Vec<u32>,
        local_bus: Option<u32>,
        cfg: &EngineConfig,
    ) -> Result<SyncJob, SessionError> {
        let local_bus = local_bus
            .or(self.boundary_bus)
            .ok_or_else(|| SessionError::BadRequest("local_bus missing and no boundary bus configured".into()))?;
        Ok(SyncJob {
            network_hash: self.network_hash(),
            network: self.network.clone(),
            local_bus,
            remote,
            participating,
            options: cfg.sync(self.bounds),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayStep {
    pub step: u32,
    /// Largest difference in frequency deviation or any correction.
    pub max_difference: f64,
    pub same_status: bool,
    /// Actuating the recomputed report reproduces the recorded network.
    pub same_network: bool,
}

impl ReplayStep {
    pub fn reproduced(&self, tol: f64) -> bool {
        self.same_status && self.same_network && self.max_difference <= tol
    }
}

impl Session {
    /// Re-validates and re-actuates every recorded step from the stored
    /// pre-step networks and compares against the recorded outcome.
    pub fn replay(&self, cfg: &EngineConfig) -> Result<Vec<ReplayStep>, SessionError> {
        let config = cfg.restoration(self.loading_factor);
        let mut out = Vec::new();
        for (k, (before, recorded)) in self.history.iter().zip(&self.reports).enumerate() {
            let step = &self.path().steps[k];
            let report = validate_step(before, step, &dispatch_of(before), &self.bounds, &config)?;
            let mut diff = (report.delta_f - recorded.delta_f).abs();
            for (a, b) in report.generators.iter().zip(&recorded.generators) {
                diff = diff.max((a.delta_p - b.delta_p).abs());
            }
            if report.generators.len() != recorded.generators.len() {
                diff = f64::INFINITY;
            }
            let same_network = actuate_step(before, step, recorded, self.loading_factor)
                .is_ok_and(|n| self.actuated.get(k).is_some_and(|h| *h == network_hash(&n)));
            out.push(ReplayStep { step: step.sequence, max_difference: diff, same_status: report.status == recorded.status, same_network });
        }
        Ok(out)
    }
}
