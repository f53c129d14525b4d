//! Steady-state power flow over the energized subnetwork in rectangular
//! current-injection form.
//!
//! Two modes share one Newton solver. In classical mode the reference
//! generator's active power is the extra unknown and absorbs any imbalance.
//! In governor mode every generator, the reference included, follows its
//! droop curve and the island frequency deviation is the extra unknown.
//! Generators regulate their bus voltage magnitude to `v_set` and the
//! reference bus fixes the angle. Each island is solved independently.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use blackstart_pdip::{LinalgError, SparseLu, Triplets};

use crate::ad::Jet;
use crate::netmodel::{assemble_ybus_for, islands, AdmittanceMatrix, Generator, LoadModel, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PfMode {
    Classical,
    Governor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothLimitParams {
    pub sharpness: f64,
}

impl Default for SmoothLimitParams {
    fn default() -> Self {
        Self { sharpness: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PfOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_dv: f64,
    pub max_ddf: f64,
    pub homotopy_steps: usize,
    pub smooth: SmoothLimitParams,
}

impl Default for PfOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 50, max_dv: 0.1, max_ddf: 0.5, homotopy_steps: 10, smooth: SmoothLimitParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PfError {
    #[error("no energized buses")]
    NothingEnergized,
    #[error("no reference in island {island:?}")]
    NoReference { island: Vec<u32> },
    #[error("island {island:?} has more than one reference generator")]
    MultipleReferences { island: Vec<u32> },
    #[error("singular Jacobian at unknown {unknown}")]
    Singular { unknown: String },
    #[error("no convergence after {iterations} iterations: worst residual {residual:.3e} at bus {bus}")]
    NonConvergence { iterations: usize, bus: u32, residual: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorOutput {
    pub id: u32,
    pub bus: u32,
    pub p_out: f64,
    pub q_out: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IslandSolution {
    pub buses: Vec<u32>,
    pub reference_bus: u32,
    pub delta_f: f64,
    pub iterations: usize,
    pub homotopy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PFSolution {
    pub mode: PfMode,
    /// Energized bus ids, ascending, aligned with `v_real`/`v_imag`.
    pub buses: Vec<u32>,
    pub v_real: Vec<f64>,
    pub v_imag: Vec<f64>,
    /// Frequency deviation of the first island, Hz. Zero in classical mode.
    pub delta_f: f64,
    pub generators: Vec<GeneratorOutput>,
    pub islands: Vec<IslandSolution>,
    pub converged: bool,
    pub iterations: usize,
    pub max_kcl_residual: f64,
}

impl PFSolution {
    pub fn voltage(&self, bus: u32) -> Option<Complex64> {
        let i = self.buses.iter().position(|&b| b == bus)?;
        Some(Complex64::new(self.v_real[i], self.v_imag[i]))
    }

    pub fn v_mag(&self) -> impl Iterator<Item = f64> + '_ {
        self.v_real.iter().zip(&self.v_imag).map(|(r, i)| r.hypot(*i))
    }

    pub fn v_extremes(&self) -> (f64, f64) {
        self.v_mag().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }

    pub fn generator(&self, id: u32) -> Option<&GeneratorOutput> {
        self.generators.iter().find(|g| g.id == id)
    }

    /// Writes solved voltages and frequency deviation into `net`.
    pub fn store(&self, net: &mut Network) {
        for (k, &b) in self.buses.iter().enumerate() {
            if let Some(bus) = net.bus_mut(b) {
                bus.v_real = Some(self.v_real[k]);
                bus.v_imag = Some(self.v_imag[k]);
            }
        }
        net.delta_f = self.delta_f;
    }
}

/// Smooth-limited droop response `ΔP` of one generator at frequency
/// deviation `delta_f`, using the default blending scale.
pub fn droop_response(gen: &Generator, delta_f: f64) -> f64 {
    droop_response_with(gen, delta_f, &SmoothLimitParams::default())
}

pub fn droop_response_with(gen: &Generator, delta_f: f64, params: &SmoothLimitParams) -> f64 {
    droop_jet(gen, Jet::<1>::constant(delta_f), params).v
}

/// `d ΔP / d Δf`.
pub fn droop_slope(gen: &Generator, delta_f: f64, params: &SmoothLimitParams) -> f64 {
    droop_jet(gen, Jet::<1>::var(delta_f, 0), params).g[0]
}

/// Double softplus saturation of `-M Δf` between `p_min - p_set` and
/// `p_max - p_set`.
pub fn droop_jet<const N: usize>(gen: &Generator, delta_f: Jet<N>, params: &SmoothLimitParams) -> Jet<N> {
    let width = gen.p_max - gen.p_min;
    if gen.droop_gain == 0.0 || width <= 0.0 {
        return Jet::constant(0.0);
    }
    saturating_droop(delta_f, gen.droop_gain, gen.p_min - gen.p_set, gen.p_max - gen.p_set, params.sharpness * width)
}

/// `-gain * Δf` smoothly clamped to `[lo, hi]` with blending scale `s`.
pub fn saturating_droop<const N: usize>(delta_f: Jet<N>, gain: f64, lo: f64, hi: f64, s: f64) -> Jet<N> {
    let mid = delta_f * (-gain);
    ((mid - lo) / s).softplus() * s - ((mid - hi) / s).softplus() * s + lo
}

/// Complex current injected by a source delivering `p + jq` at `v`, as a
/// jet over `(vr, vi, p, q)`.
pub fn injection_current(vr: Jet<4>, vi: Jet<4>, p: Jet<4>, q: Jet<4>) -> (Jet<4>, Jet<4>) {
    let m = (vr.sqr() + vi.sqr()).recip();
    ((p * vr + q * vi) * m, (p * vi - q * vr) * m)
}

#[derive(Debug, Clone)]
struct GenBus {
    bus: usize,
    gens: Vec<usize>,
    v_set: f64,
}

/// Newton system of one island. Unknowns are `[vr_0, vi_0, ..., q_pv..., x]`
/// where `x` is the reference power (classical) or `Δf` (governor).
/// Equations are `[kcl_r_0, kcl_i_0, ..., |V_pv|^2 - v_set^2, vi_ref]`.
#[derive(Debug, Clone)]
pub struct IslandSystem<'a> {
    net: &'a Network,
    pub mode: PfMode,
    pub smooth: SmoothLimitParams,
    pub buses: Vec<u32>,
    pub ybus: AdmittanceMatrix,
    gen_buses: Vec<GenBus>,
    ref_slot: usize,
    loads: Vec<(usize, LoadModel)>,
    pub load_scale: f64,
}

impl<'a> IslandSystem<'a> {
    pub fn new(net: &'a Network, buses: &[u32], mode: PfMode, smooth: SmoothLimitParams) -> Result<Self, PfError> {
        let ybus = assemble_ybus_for(net, buses);
        let mut gen_buses: Vec<GenBus> = Vec::new();
        let mut ref_slot = None;
        for (gi, g) in net.generators.iter().enumerate() {
            if !g.energized {
                continue;
            }
            let Some(&bus) = ybus.index.get(&g.bus) else { continue };
            let slot = match gen_buses.iter().position(|gb| gb.bus == bus) {
                Some(s) => s,
                None => {
                    gen_buses.push(GenBus { bus, gens: Vec::new(), v_set: g.v_set });
                    gen_buses.len() - 1
                }
            };
            gen_buses[slot].gens.push(gi);
            if g.is_reference {
                if ref_slot.is_some_and(|s| s != slot) {
                    return Err(PfError::MultipleReferences { island: buses.to_vec() });
                }
                ref_slot = Some(slot);
            }
        }
        let ref_slot = ref_slot.ok_or_else(|| PfError::NoReference { island: buses.to_vec() })?;
        let loads = net
            .energized_loads()
            .filter_map(|l| ybus.index.get(&l.bus).map(|&i| (i, l.model)))
            .collect();
        Ok(Self { net, mode, smooth, buses: buses.to_vec(), ybus, gen_buses, ref_slot, loads, load_scale: 1.0 })
    }

    pub fn dim(&self) -> usize {
        2 * self.buses.len() + self.gen_buses.len() + 1
    }

    fn last(&self) -> usize {
        self.dim() - 1
    }

    pub fn unknown_name(&self, k: usize) -> String {
        let n = self.buses.len();
        if k < 2 * n {
            format!("{}[{}]", if k % 2 == 0 { "vr" } else { "vi" }, self.buses[k / 2])
        } else if k < self.last() {
            format!("q[{}]", self.buses[self.gen_buses[k - 2 * n].bus])
        } else {
            match self.mode {
                PfMode::Classical => format!("p_ref[{}]", self.buses[self.gen_buses[self.ref_slot].bus]),
                PfMode::Governor => "delta_f".to_string(),
            }
        }
    }

    /// Flat start: unit voltages, zero angles, set-point powers.
    pub fn flat_start(&self) -> Vec<f64> {
        let n = self.buses.len();
        let mut z = vec![0.0; self.dim()];
        for i in 0..n {
            z[2 * i] = 1.0;
        }
        for gb in &self.gen_buses {
            z[2 * gb.bus] = gb.v_set;
        }
        if self.mode == PfMode::Classical {
            z[self.last()] = self.gen_buses[self.ref_slot].gens.iter().map(|&g| self.net.generators[g].p_set).sum();
        }
        z
    }

    /// Total active power at a generator bus as a jet over the last unknown.
    fn bus_power(&self, slot: usize, x: f64) -> Jet<1> {
        let gens = self.gen_buses[slot].gens.iter().map(|&g| &self.net.generators[g]);
        match self.mode {
            PfMode::Classical if slot == self.ref_slot => Jet::var(x, 0),
            PfMode::Classical => Jet::constant(gens.map(|g| g.p_set).sum()),
            PfMode::Governor => {
                let df = Jet::<1>::var(x, 0);
                gens.fold(Jet::constant(0.0), |acc, g| acc + droop_jet(g, df, &self.smooth) + g.p_set)
            }
        }
    }

    /// Residual and (optionally) Jacobian at `z`.
    pub fn evaluate(&self, z: &[f64], with_jacobian: bool) -> (Vec<f64>, Option<Triplets>) {
        let n = self.buses.len();
        let dim = self.dim();
        let last = self.last();
        let mut f = vec![0.0; dim];
        let mut jac = with_jacobian.then(|| Triplets::new(dim, dim));

        for (i, row) in self.ybus.rows.iter().enumerate() {
            for &(k, y) in row {
                let (vr, vi) = (z[2 * k], z[2 * k + 1]);
                f[2 * i] -= y.re * vr - y.im * vi;
                f[2 * i + 1] -= y.re * vi + y.im * vr;
                if let Some(j) = jac.as_mut() {
                    j.push(2 * i, 2 * k, -y.re);
                    j.push(2 * i, 2 * k + 1, y.im);
                    j.push(2 * i + 1, 2 * k, -y.im);
                    j.push(2 * i + 1, 2 * k + 1, -y.re);
                }
            }
        }

        for &(i, model) in &self.loads {
            let (vr, vi) = (z[2 * i], z[2 * i + 1]);
            match model {
                LoadModel::Big(l) => {
                    let l = l.scaled(self.load_scale);
                    f[2 * i] -= l.g * vr - l.b * vi + l.alpha_r;
                    f[2 * i + 1] -= l.g * vi + l.b * vr + l.alpha_i;
                    if let Some(j) = jac.as_mut() {
                        j.push(2 * i, 2 * i, -l.g);
                        j.push(2 * i, 2 * i + 1, l.b);
                        j.push(2 * i + 1, 2 * i, -l.b);
                        j.push(2 * i + 1, 2 * i + 1, -l.g);
                    }
                }
                LoadModel::ConstantPower { p_d, q_d } => {
                    let [jr, ji, p, q] = Jet::vars([vr, vi, p_d * self.load_scale, q_d * self.load_scale]);
                    let (ir, ii) = injection_current(jr, ji, p, q);
                    f[2 * i] -= ir.v;
                    f[2 * i + 1] -= ii.v;
                    if let Some(j) = jac.as_mut() {
                        for (row, cur) in [(2 * i, ir), (2 * i + 1, ii)] {
                            j.push(row, 2 * i, -cur.g[0]);
                            j.push(row, 2 * i + 1, -cur.g[1]);
                        }
                    }
                }
            }
        }

        for (slot, gb) in self.gen_buses.iter().enumerate() {
            let i = gb.bus;
            let qk = 2 * n + slot;
            let pj = self.bus_power(slot, z[last]);
            let [jr, ji, p, q] = Jet::vars([z[2 * i], z[2 * i + 1], pj.v, z[qk]]);
            let (ir, ii) = injection_current(jr, ji, p, q);
            f[2 * i] += ir.v;
            f[2 * i + 1] += ii.v;
            f[qk] = z[2 * i] * z[2 * i] + z[2 * i + 1] * z[2 * i + 1] - gb.v_set * gb.v_set;
            if let Some(j) = jac.as_mut() {
                for (row, cur) in [(2 * i, ir), (2 * i + 1, ii)] {
                    j.push(row, 2 * i, cur.g[0]);
                    j.push(row, 2 * i + 1, cur.g[1]);
                    j.push(row, qk, cur.g[3]);
                    j.push(row, last, cur.g[2] * pj.g[0]);
                }
                j.push(qk, 2 * i, 2.0 * z[2 * i]);
                j.push(qk, 2 * i + 1, 2.0 * z[2 * i + 1]);
            }
        }

        let r = self.gen_buses[self.ref_slot].bus;
        f[last] = z[2 * r + 1];
        if let Some(j) = jac.as_mut() {
            j.push(last, 2 * r + 1, 1.0);
        }
        (f, jac)
    }

    fn clip(&self, dz: &mut [f64], opts: &PfOptions) {
        let n2 = 2 * self.buses.len();
        for d in &mut dz[..n2] {
            *d = d.clamp(-opts.max_dv, opts.max_dv);
        }
        if self.mode == PfMode::Governor {
            let last = self.last();
            dz[last] = dz[last].clamp(-opts.max_ddf, opts.max_ddf);
        }
    }

    /// Damped Newton from `z`. Returns iterations used on success.
    pub fn newton(&self, z: &mut [f64], opts: &PfOptions) -> Result<usize, PfError> {
        for it in 0..=opts.max_iter {
            let (f, jac) = self.evaluate(z, true);
            let worst = self.worst_mismatch(&f);
            if worst <= opts.tol {
                return Ok(it);
            }
            if it == opts.max_iter || !worst.is_finite() {
                return Err(self.non_convergence(it, &f));
            }
            let a = jac.expect("requested").to_csr();
            let lu = SparseLu::factor(&a).map_err(|e| self.singular(e))?;
            let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
            let mut dz = lu.solve_refined(&a, &rhs).map_err(|e| self.singular(e))?;
            self.clip(&mut dz, opts);
            for (zi, d) in z.iter_mut().zip(&dz) {
                *zi += d;
            }
        }
        unreachable!()
    }

    /// Largest equation mismatch, taking each bus's current balance as one
    /// complex number.
    fn worst_mismatch(&self, f: &[f64]) -> f64 {
        let n2 = 2 * self.buses.len();
        let kcl = f[..n2].chunks_exact(2).map(|c| c[0].hypot(c[1]));
        let rest = f[n2..].iter().map(|v| v.abs());
        kcl.chain(rest).fold(0.0, |m, v| if v.is_nan() { f64::INFINITY } else { m.max(v) })
    }

    fn non_convergence(&self, iterations: usize, f: &[f64]) -> PfError {
        let (k, residual) = max_abs(f);
        let bus = if k < 2 * self.buses.len() {
            self.buses[k / 2]
        } else if k < self.last() {
            self.buses[self.gen_buses[k - 2 * self.buses.len()].bus]
        } else {
            self.buses[self.gen_buses[self.ref_slot].bus]
        };
        PfError::NonConvergence { iterations, bus, residual }
    }

    fn singular(&self, e: LinalgError) -> PfError {
        match e {
            LinalgError::Singular { column } => PfError::Singular { unknown: self.unknown_name(column) },
            LinalgError::Dimension { .. } => unreachable!("square by construction"),
        }
    }

    /// Flat-start Newton with load-continuation fallback.
    pub fn solve(&mut self, opts: &PfOptions) -> Result<(Vec<f64>, usize, bool), PfError> {
        let mut z = self.flat_start();
        self.load_scale = 1.0;
        let first = match self.newton(&mut z, opts) {
            Ok(it) => return Ok((z, it, false)),
            Err(e) => e,
        };
        let steps = opts.homotopy_steps.max(1);
        let mut z = self.flat_start();
        let mut total = 0;
        for s in 1..=steps {
            self.load_scale = s as f64 / steps as f64;
            match self.newton(&mut z, opts) {
                Ok(it) => total += it,
                Err(e @ PfError::Singular { .. }) => {
                    self.load_scale = 1.0;
                    return Err(e);
                }
                Err(_) => {
                    self.load_scale = 1.0;
                    return Err(first);
                }
            }
        }
        self.load_scale = 1.0;
        Ok((z, total, true))
    }

    /// Generator outputs at a solved state. Reactive power at a bus with
    /// several units is shared equally.
    pub fn generator_outputs(&self, z: &[f64]) -> Vec<GeneratorOutput> {
        let n = self.buses.len();
        let mut out = Vec::new();
        for (slot, gb) in self.gen_buses.iter().enumerate() {
            let share = z[2 * n + slot] / gb.gens.len() as f64;
            let x = z[self.last()];
            for &gi in &gb.gens {
                let g = &self.net.generators[gi];
                let p_out = match self.mode {
                    PfMode::Classical if slot == self.ref_slot => {
                        let others: f64 = gb.gens.iter().filter(|&&o| o != gi).map(|&o| self.net.generators[o].p_set).sum();
                        x - others
                    }
                    PfMode::Classical => g.p_set,
                    PfMode::Governor => g.p_set + droop_response_with(g, x, &self.smooth),
                };
                out.push(GeneratorOutput { id: g.id, bus: g.bus, p_out, q_out: share });
            }
        }
        out
    }

    pub fn reference_bus(&self) -> u32 {
        self.buses[self.gen_buses[self.ref_slot].bus]
    }

    pub fn delta_f(&self, z: &[f64]) -> f64 {
        match self.mode {
            PfMode::Classical => 0.0,
            PfMode::Governor => z[self.last()],
        }
    }
}

fn max_abs(f: &[f64]) -> (usize, f64) {
    f.iter().enumerate().fold((0, 0.0), |(bk, bv), (k, v)| {
        let a = if v.is_finite() { v.abs() } else { f64::INFINITY };
        if a > bv { (k, a) } else { (bk, bv) }
    })
}

/// Classical power flow: the reference generator absorbs the imbalance.
pub fn solve_pf(net: &Network) -> Result<PFSolution, PfError> {
    solve_with(net, PfMode::Classical, &PfOptions::default())
}

/// Governor power flow: every generator follows its droop curve around its
/// set-point and the island frequency deviation balances the power.
pub fn solve_gpf(net: &Network) -> Result<PFSolution, PfError> {
    solve_with(net, PfMode::Governor, &PfOptions::default())
}

pub fn solve_with(net: &Network, mode: PfMode, opts: &PfOptions) -> Result<PFSolution, PfError> {
    let parts = islands(net);
    if parts.is_empty() {
        return Err(PfError::NothingEnergized);
    }
    let mut sol = PFSolution {
        mode,
        buses: Vec::new(),
        v_real: Vec::new(),
        v_imag: Vec::new(),
        delta_f: 0.0,
        generators: Vec::new(),
        islands: Vec::new(),
        converged: true,
        iterations: 0,
        max_kcl_residual: 0.0,
    };
    let mut volts = Vec::new();
    for part in &parts {
        let mut sys = IslandSystem::new(net, part, mode, opts.smooth)?;
        let (z, iterations, homotopy) = sys.solve(opts)?;
        for (k, &b) in part.iter().enumerate() {
            volts.push((b, z[2 * k], z[2 * k + 1]));
        }
        sol.generators.extend(sys.generator_outputs(&z));
        sol.islands.push(IslandSolution {
            buses: part.clone(),
            reference_bus: sys.reference_bus(),
            delta_f: sys.delta_f(&z),
            iterations,
            homotopy,
        });
        sol.iterations = sol.iterations.max(iterations);
    }
    volts.sort_by_key(|v| v.0);
    for (b, r, i) in volts {
        sol.buses.push(b);
        sol.v_real.push(r);
        sol.v_imag.push(i);
    }
    sol.generators.sort_by_key(|g| g.id);
    sol.delta_f = sol.islands[0].delta_f;
    sol.max_kcl_residual = kcl_residual(net, &sol).iter().map(|(_, r)| r.norm()).fold(0.0, f64::max);
    Ok(sol)
}

/// Complex current mismatch `I_gen - I_load - (Y V)_i` at every energized
/// bus of `solution`.
pub fn kcl_residual(net: &Network, solution: &PFSolution) -> Vec<(u32, Complex64)> {
    if solution.buses.is_empty() {
        return Vec::new();
    }
    let y = assemble_ybus_for(net, &solution.buses);
    let v: Vec<Complex64> = solution.v_real.iter().zip(&solution.v_imag).map(|(&r, &i)| Complex64::new(r, i)).collect();
    let mut res: Vec<Complex64> = y.mul(&v).into_iter().map(|c| -c).collect();
    for l in net.energized_loads() {
        if let Some(&i) = y.index.get(&l.bus) {
            res[i] -= l.current(v[i]);
        }
    }
    for g in &solution.generators {
        if let Some(&i) = y.index.get(&g.bus) {
            res[i] += (Complex64::new(g.p_out, g.q_out) / v[i]).conj();
        }
    }
    solution.buses.iter().copied().zip(res).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bigload::BigLoad;
    use crate::netmodel::{Bases, Branch, Bus, LoadRecord};

    pub(crate) fn gen(id: u32, bus: u32, p: f64, m: f64) -> Generator {
        Generator {
            id,
            bus,
            p_set: p,
            q_set: 0.0,
            p_min: 0.0,
            p_max: 10.0,
            q_min: -5.0,
            q_max: 5.0,
            droop_gain: m,
            v_set: 1.0,
            ramp_min: -1.0,
            ramp_max: 1.0,
            participates_in_sync: false,
            is_reference: id == 1,
            energized: true,
            p_crank: None,
        }
    }

    fn net(branches: Vec<Branch>, gens: Vec<Generator>, loads: Vec<(u32, LoadModel)>, nbus: u32) -> Network {
        let mut buses: Vec<Bus> = (1..=nbus).map(|i| Bus::new(i, 100.0)).collect();
        for b in &mut buses {
            b.energized = true;
        }
        Network {
            format_version: 1,
            name: String::new(),
            bases: Bases::default(),
            buses,
            branches,
            generators: gens,
            loads: loads.into_iter().map(|(bus, model)| LoadRecord { bus, energized: true, model }).collect(),
            applied_steps: vec![],
            delta_f: 0.0,
        }
    }

    #[test]
    fn droop_examples() {
        let mut g = gen(1, 1, 5.0, 0.0);
        assert_eq!(droop_response(&g, 3.0), 0.0);
        g.droop_gain = 2.5;
        assert!((droop_response(&g, 1.2) + 3.0).abs() < 1e-9);
        let sat = droop_response(&g, -100.0);
        assert!((sat - 5.0).abs() < 1e-9 && sat <= 5.0);
    }

    #[test]
    fn no_flow_network() {
        let n = net(vec![Branch::new(1, 2, 0.0, 0.1)], vec![gen(1, 1, 0.0, 1.0)], vec![], 2);
        let s = solve_pf(&n).unwrap();
        assert!(s.converged);
        for v in s.v_mag() {
            assert!((v - 1.0).abs() < 1e-10);
        }
        assert!(s.generators[0].p_out.abs() < 1e-10);
    }

    #[test]
    fn two_bus_matches_hand_newton() {
        // Lossless line x, constant-impedance load g at bus 2, source at 1.0 pu.
        let (x, g) = (0.2, 1.5);
        let load = LoadModel::Big(BigLoad { alpha_r: 0.0, alpha_i: 0.0, g, b: 0.0 });
        let n = net(vec![Branch::new(1, 2, 0.0, x)], vec![gen(1, 1, 0.0, 1.0)], vec![(2, load)], 2);
        let s = solve_pf(&n).unwrap();
        // Voltage divider: V2 = 1 / (1 + j x g).
        let v2 = Complex64::new(1.0, 0.0) / Complex64::new(1.0, x * g);
        let got = s.voltage(2).unwrap();
        assert!((got - v2).norm() < 1e-9);
        assert!((s.generators[0].p_out - g * v2.norm_sqr()).abs() < 1e-9);
    }

    #[test]
    fn one_machine_balance() {
        // Lossless link, constant current load: surplus s settles at Δf = s / M.
        let load = LoadModel::Big(BigLoad { alpha_r: 2.0, alpha_i: 0.0, g: 0.0, b: 0.0 });
        let m = 1.7;
        let n = net(vec![Branch::new(1, 2, 0.0, 0.05)], vec![gen(1, 1, 2.5, m)], vec![(2, load)], 2);
        let s = solve_gpf(&n).unwrap();
        let p_load = (s.voltage(2).unwrap() * Complex64::new(2.0, 0.0)).re;
        let surplus = 2.5 - p_load;
        assert!((s.delta_f - surplus / m).abs() < 1e-6, "{} vs {}", s.delta_f, surplus / m);
        assert!(s.max_kcl_residual < 1e-8);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let load = LoadModel::ConstantPower { p_d: 1.0, q_d: 0.3 };
        let big = LoadModel::Big(BigLoad { alpha_r: 0.1, alpha_i: -0.05, g: 0.8, b: -0.2 });
        let mut br = Branch::new(2, 3, 0.02, 0.1);
        br.tap = 1.05;
        br.b = 0.1;
        let n = net(
            vec![Branch::new(1, 2, 0.01, 0.1), br],
            vec![gen(1, 1, 1.0, 1.0), gen(2, 3, 0.5, 0.4)],
            vec![(2, load), (3, big)],
            3,
        );
        for mode in [PfMode::Classical, PfMode::Governor] {
            let sys = IslandSystem::new(&n, &[1, 2, 3], mode, SmoothLimitParams::default()).unwrap();
            let z: Vec<f64> = sys.flat_start().iter().enumerate().map(|(k, v)| v + 0.03 * ((k * 7 % 5) as f64 - 2.0)).collect();
            let jac = sys.evaluate(&z, true).1.unwrap().to_dense();
            for k in 0..z.len() {
                let h = 1e-6;
                let mut p = z.clone();
                let mut m = z.clone();
                p[k] += h;
                m[k] -= h;
                let (fp, _) = sys.evaluate(&p, false);
                let (fm, _) = sys.evaluate(&m, false);
                for r in 0..z.len() {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    assert!((fd - jac[r][k]).abs() < 1e-6 * fd.abs().max(1.0), "{mode:?} J[{r}][{k}] {} vs {fd}", jac[r][k]);
                }
            }
        }
    }

    #[test]
    fn zero_gain_imbalance_is_singular() {
        let load = LoadModel::Big(BigLoad { alpha_r: 0.0, alpha_i: 0.0, g: 1.0, b: 0.0 });
        let n = net(vec![Branch::new(1, 2, 0.0, 0.1)], vec![gen(1, 1, 2.0, 0.0)], vec![(2, load)], 2);
        assert_eq!(solve_gpf(&n), Err(PfError::Singular { unknown: "delta_f".into() }));
    }

    #[test]
    fn island_without_reference() {
        let mut n = net(vec![], vec![gen(1, 1, 0.0, 1.0)], vec![], 2);
        n.generators[0].is_reference = true;
        assert_eq!(solve_pf(&n), Err(PfError::NoReference { island: vec![2] }));
    }

    #[test]
    fn perturbation_stays_local() {
        let n = net(
            vec![Branch::new(1, 2, 0.01, 0.1), Branch::new(2, 3, 0.01, 0.1), Branch::new(3, 4, 0.01, 0.1)],
            vec![gen(1, 1, 0.0, 1.0)],
            vec![(4, LoadModel::ConstantPower { p_d: 0.5, q_d: 0.1 })],
            4,
        );
        let mut s = solve_pf(&n).unwrap();
        s.v_real[1] += 0.01;
        let r = kcl_residual(&n, &s);
        let bad: Vec<u32> = r.iter().filter(|(_, c)| c.norm() > 1e-6).map(|(b, _)| *b).collect();
        assert_eq!(bad, vec![1, 2, 3]);
    }
}
