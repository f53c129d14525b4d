//! Grid optimization problem shared by crank-step validation and island
//! synchronization.
//!
//! Per bus: `vr`, `vi`, `vsq`. Per island: `df`. Per generator: `p` (pinned
//! to its target), `q`, `dpp` (droop response), `dpg` (correction), `ptot`.
//! Per regulated bus: a scaled voltage deviation `e = W * dvsq`.
//! Objective: `sum dpg^2 + sum e^2`.

use blackstart_pdip::{OptProblem, Triplets, Variable};

use crate::ad::Jet;
use crate::netmodel::{assemble_ybus_for, AdmittanceMatrix, LoadModel, Network};
use crate::powerflow::{injection_current, saturating_droop};

pub(crate) const GEN_VARS: usize = 5;
pub(crate) const P: usize = 0;
pub(crate) const Q: usize = 1;
pub(crate) const DPP: usize = 2;
pub(crate) const DPG: usize = 3;
pub(crate) const PTOT: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    /// Position in `Network::generators`.
    pub index: usize,
    pub id: u32,
    pub bus: u32,
    pub p_target: f64,
    /// Bounds on the correction; `None` pins it to zero.
    pub dpg_bounds: Option<(f64, f64)>,
    pub droop_gain: f64,
    pub p_bounds: (f64, f64),
    pub q_bounds: (f64, f64),
    pub v_set: f64,
    /// Whether the bus voltage magnitude is softly held at `v_set`.
    pub regulates: bool,
    /// Governor follows the smooth saturating curve (sharpness relative to
    /// the output range) instead of the linear droop with output bounds.
    pub saturation: Option<f64>,
}

impl GenSpec {
    pub(crate) fn droop<const N: usize>(&self, df: Jet<N>) -> Jet<N> {
        match self.saturation {
            Some(sharp) => {
                let (lo, hi) = self.p_bounds;
                let width = hi - lo;
                if width <= 0.0 || self.droop_gain == 0.0 {
                    return Jet::constant(0.0);
                }
                saturating_droop(df, self.droop_gain, lo - self.p_target, hi - self.p_target, sharp * width)
            }
            None => df * (-self.droop_gain),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryTarget {
    pub bus: u32,
    pub v_real: f64,
    pub v_imag: f64,
    pub delta_f: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Regulated {
    pub bus: usize,
    pub v_set: f64,
}

#[derive(Debug, Clone)]
pub struct GridProblem {
    pub buses: Vec<u32>,
    pub ybus: AdmittanceMatrix,
    pub(crate) island_of: Vec<usize>,
    /// Local index of the angle-reference bus per island, `None` where the
    /// boundary fixes the angle.
    pub(crate) island_ref: Vec<Option<usize>>,
    pub gens: Vec<GenSpec>,
    pub(crate) gen_bus: Vec<usize>,
    pub(crate) regulated: Vec<Regulated>,
    pub(crate) loads: Vec<(usize, LoadModel)>,
    pub boundary: Option<BoundaryTarget>,
    pub weight: f64,
    vars: Vec<Variable>,
    names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProblemError {
    UnknownBus(u32),
    NoReference(Vec<u32>),
}

impl GridProblem {
    /// `islands` partitions the buses; `references[k]` is the angle bus of
    /// island `k` (ignored for the island holding the boundary bus).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        net: &Network,
        islands: &[Vec<u32>],
        references: &[Option<u32>],
        gens: Vec<GenSpec>,
        v_bounds: &dyn Fn(u32) -> (f64, f64),
        df_bounds: (f64, f64),
        boundary: Option<BoundaryTarget>,
        weight: f64,
    ) -> Result<Self, ProblemError> {
        let mut buses: Vec<u32> = islands.iter().flatten().copied().collect();
        buses.sort_unstable();
        let ybus = assemble_ybus_for(net, &buses);
        let mut island_of = vec![0; buses.len()];
        for (k, isl) in islands.iter().enumerate() {
            for b in isl {
                island_of[ybus.index[b]] = k;
            }
        }
        let boundary_island = match boundary {
            Some(t) => Some(island_of[*ybus.index.get(&t.bus).ok_or(ProblemError::UnknownBus(t.bus))?]),
            None => None,
        };
        let mut island_ref = Vec::new();
        for (k, isl) in islands.iter().enumerate() {
            if Some(k) == boundary_island {
                island_ref.push(None);
                continue;
            }
            let r = references.get(k).copied().flatten().ok_or_else(|| ProblemError::NoReference(isl.clone()))?;
            island_ref.push(Some(*ybus.index.get(&r).ok_or(ProblemError::UnknownBus(r))?));
        }
        let mut gen_bus = Vec::new();
        for g in &gens {
            gen_bus.push(*ybus.index.get(&g.bus).ok_or(ProblemError::UnknownBus(g.bus))?);
        }
        let mut regulated: Vec<Regulated> = Vec::new();
        for (g, &b) in gens.iter().zip(&gen_bus) {
            if g.regulates && !regulated.iter().any(|r| r.bus == b) {
                regulated.push(Regulated { bus: b, v_set: g.v_set });
            }
        }
        let loads = net.energized_loads().filter_map(|l| ybus.index.get(&l.bus).map(|&i| (i, l.model))).collect();

        let mut vars = Vec::new();
        for &b in &buses {
            let (lo, hi) = v_bounds(b);
            vars.push(Variable::free(format!("vr[{b}]")).with_max_step(0.1));
            vars.push(Variable::free(format!("vi[{b}]")).with_max_step(0.1));
            vars.push(Variable::bounded(format!("vsq[{b}]"), lo * lo, hi * hi));
        }
        for k in 0..islands.len() {
            vars.push(Variable::bounded(format!("df[{k}]"), df_bounds.0, df_bounds.1).with_max_step(0.5));
        }
        for g in &gens {
            let id = g.id;
            vars.push(Variable::free(format!("p[G{id}]")));
            vars.push(Variable::bounded(format!("q[G{id}]"), g.q_bounds.0, g.q_bounds.1));
            vars.push(Variable::free(format!("dpp[G{id}]")));
            vars.push(match g.dpg_bounds {
                Some((lo, hi)) => Variable::bounded(format!("dpg[G{id}]"), lo, hi),
                None => Variable::free(format!("dpg[G{id}]")),
            });
            vars.push(match g.saturation {
                Some(_) => Variable::free(format!("ptot[G{id}]")),
                None => Variable::bounded(format!("ptot[G{id}]"), g.p_bounds.0, g.p_bounds.1),
            });
        }
        for r in &regulated {
            vars.push(Variable::free(format!("dvsq_w[{}]", buses[r.bus])));
        }

        let mut problem = Self {
            buses,
            ybus,
            island_of,
            island_ref,
            gens,
            gen_bus,
            regulated,
            loads,
            boundary,
            weight,
            vars,
            names: Vec::new(),
        };
        problem.names = problem.build_names();
        Ok(problem)
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_islands(&self) -> usize {
        self.island_ref.len()
    }

    pub fn vr(&self, i: usize) -> usize {
        3 * i
    }

    pub fn vi(&self, i: usize) -> usize {
        3 * i + 1
    }

    pub fn vsq(&self, i: usize) -> usize {
        3 * i + 2
    }

    pub fn df(&self, k: usize) -> usize {
        3 * self.n_bus() + k
    }

    pub fn gen_var(&self, g: usize, which: usize) -> usize {
        3 * self.n_bus() + self.n_islands() + GEN_VARS * g + which
    }

    pub fn dev_var(&self, k: usize) -> usize {
        3 * self.n_bus() + self.n_islands() + GEN_VARS * self.gens.len() + k
    }

    pub fn regulated_buses(&self) -> Vec<u32> {
        self.regulated.iter().map(|r| self.buses[r.bus]).collect()
    }

    pub fn bus_index(&self, bus: u32) -> Option<usize> {
        self.ybus.index.get(&bus).copied()
    }

    pub fn island_of_bus(&self, i: usize) -> usize {
        self.island_of[i]
    }

    // Constraint rows: KCL (2n), vsq (n), per island angle pin (1) or
    // boundary (3), per generator 3 or 4, per regulated bus 1.
    fn island_rows(&self) -> usize {
        self.island_ref.iter().map(|r| if r.is_some() { 1 } else { 3 }).sum()
    }

    fn gen_rows(&self, g: usize) -> usize {
        if self.gens[g].dpg_bounds.is_some() { 3 } else { 4 }
    }

    fn gen_row_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.gens.len());
        let mut r = 3 * self.n_bus() + self.island_rows();
        for g in 0..self.gens.len() {
            offs.push(r);
            r += self.gen_rows(g);
        }
        offs
    }

    fn dev_row0(&self) -> usize {
        3 * self.n_bus() + self.island_rows() + (0..self.gens.len()).map(|g| self.gen_rows(g)).sum::<usize>()
    }

    fn build_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for &b in &self.buses {
            names.push(format!("kcl_r[{b}]"));
            names.push(format!("kcl_i[{b}]"));
        }
        for &b in &self.buses {
            names.push(format!("vsq_def[{b}]"));
        }
        for (k, r) in self.island_ref.iter().enumerate() {
            match r {
                Some(i) => names.push(format!("angle_ref[{}]", self.buses[*i])),
                None => {
                    let b = self.boundary.map(|t| t.bus).unwrap_or_default();
                    names.push(format!("boundary_vr[{b}]"));
                    names.push(format!("boundary_vi[{b}]"));
                    names.push(format!("boundary_df[{k}]"));
                }
            }
        }
        for (g, spec) in self.gens.iter().enumerate() {
            let id = spec.id;
            names.push(format!("p_target[G{id}]"));
            names.push(format!("droop[G{id}]"));
            names.push(format!("p_balance[G{id}]"));
            if self.gen_rows(g) == 4 {
                names.push(format!("dpg_fixed[G{id}]"));
            }
        }
        for r in &self.regulated {
            names.push(format!("v_set[{}]", self.buses[r.bus]));
        }
        names
    }

    fn gen_jets(&self, x: &[f64], g: usize) -> (Jet<4>, Jet<4>) {
        let i = self.gen_bus[g];
        let [vr, vi, p, q] = Jet::vars([x[self.vr(i)], x[self.vi(i)], x[self.gen_var(g, PTOT)], x[self.gen_var(g, Q)]]);
        injection_current(vr, vi, p, q)
    }

    fn load_jets(&self, x: &[f64], i: usize, model: LoadModel) -> (Jet<4>, Jet<4>) {
        let (vr, vi) = (x[self.vr(i)], x[self.vi(i)]);
        match model {
            LoadModel::Big(l) => {
                let [vr, vi, _, _] = Jet::<4>::vars([vr, vi, 0.0, 0.0]);
                (vr * l.g - vi * l.b + l.alpha_r, vi * l.g + vr * l.b + l.alpha_i)
            }
            LoadModel::ConstantPower { p_d, q_d } => {
                let [vr, vi, _, _] = Jet::<4>::vars([vr, vi, 0.0, 0.0]);
                injection_current(vr, vi, Jet::constant(p_d), Jet::constant(q_d))
            }
        }
    }
}

impl OptProblem for GridProblem {
    fn variables(&self) -> &[Variable] {
        &self.vars
    }

    fn num_constraints(&self) -> usize {
        self.names.len()
    }

    fn constraint_name(&self, j: usize) -> String {
        self.names[j].clone()
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let dpg: f64 = (0..self.gens.len()).map(|g| x[self.gen_var(g, DPG)].powi(2)).sum();
        let dev: f64 = (0..self.regulated.len()).map(|k| x[self.dev_var(k)].powi(2)).sum();
        dpg + dev
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for k in 0..self.gens.len() {
            let j = self.gen_var(k, DPG);
            g[j] = 2.0 * x[j];
        }
        for k in 0..self.regulated.len() {
            let j = self.dev_var(k);
            g[j] = 2.0 * x[j];
        }
        g
    }

    fn constraints(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n_bus();
        let mut c = vec![0.0; self.num_constraints()];
        for (i, row) in self.ybus.rows.iter().enumerate() {
            for &(k, y) in row {
                let (vr, vi) = (x[self.vr(k)], x[self.vi(k)]);
                c[2 * i] -= y.re * vr - y.im * vi;
                c[2 * i + 1] -= y.re * vi + y.im * vr;
            }
        }
        for &(i, model) in &self.loads {
            let (ir, ii) = self.load_jets(x, i, model);
            c[2 * i] -= ir.v;
            c[2 * i + 1] -= ii.v;
        }
        for g in 0..self.gens.len() {
            let i = self.gen_bus[g];
            let (ir, ii) = self.gen_jets(x, g);
            c[2 * i] += ir.v;
            c[2 * i + 1] += ii.v;
        }
        for i in 0..n {
            c[2 * n + i] = x[self.vsq(i)] - x[self.vr(i)].powi(2) - x[self.vi(i)].powi(2);
        }
        let mut r = 3 * n;
        for (k, rf) in self.island_ref.iter().enumerate() {
            match rf {
                Some(i) => {
                    c[r] = x[self.vi(*i)];
                    r += 1;
                }
                None => {
                    let t = self.boundary.expect("boundary island");
                    let b = self.ybus.index[&t.bus];
                    c[r] = x[self.vr(b)] - t.v_real;
                    c[r + 1] = x[self.vi(b)] - t.v_imag;
                    c[r + 2] = x[self.df(k)] - t.delta_f;
                    r += 3;
                }
            }
        }
        for (g, row) in self.gen_row_offsets().into_iter().enumerate() {
            let spec = &self.gens[g];
            let v = |w| x[self.gen_var(g, w)];
            c[row] = v(P) - spec.p_target;
            c[row + 1] = v(DPP) - spec.droop(Jet::<1>::constant(x[self.df(self.island_of[self.gen_bus[g]])])).v;
            c[row + 2] = v(PTOT) - v(P) - v(DPP) - v(DPG);
            if spec.dpg_bounds.is_none() {
                c[row + 3] = v(DPG);
            }
        }
        let r0 = self.dev_row0();
        for (k, reg) in self.regulated.iter().enumerate() {
            c[r0 + k] = x[self.vsq(reg.bus)] - reg.v_set * reg.v_set + x[self.dev_var(k)] / self.weight;
        }
        c
    }

    fn jacobian(&self, x: &[f64]) -> Triplets {
        let n = self.n_bus();
        let mut j = Triplets::new(self.num_constraints(), x.len());
        for (i, row) in self.ybus.rows.iter().enumerate() {
            for &(k, y) in row {
                j.push(2 * i, self.vr(k), -y.re);
                j.push(2 * i, self.vi(k), y.im);
                j.push(2 * i + 1, self.vr(k), -y.im);
                j.push(2 * i + 1, self.vi(k), -y.re);
            }
        }
        for &(i, model) in &self.loads {
            let (ir, ii) = self.load_jets(x, i, model);
            for (row, cur) in [(2 * i, ir), (2 * i + 1, ii)] {
                j.push(row, self.vr(i), -cur.g[0]);
                j.push(row, self.vi(i), -cur.g[1]);
            }
        }
        for g in 0..self.gens.len() {
            let i = self.gen_bus[g];
            let (ir, ii) = self.gen_jets(x, g);
            let cols = [self.vr(i), self.vi(i), self.gen_var(g, PTOT), self.gen_var(g, Q)];
            for (row, cur) in [(2 * i, ir), (2 * i + 1, ii)] {
                for (c, d) in cols.iter().zip(cur.g) {
                    j.push(row, *c, d);
                }
            }
        }
        for i in 0..n {
            j.push(2 * n + i, self.vsq(i), 1.0);
            j.push(2 * n + i, self.vr(i), -2.0 * x[self.vr(i)]);
            j.push(2 * n + i, self.vi(i), -2.0 * x[self.vi(i)]);
        }
        let mut r = 3 * n;
        for (k, rf) in self.island_ref.iter().enumerate() {
            match rf {
                Some(i) => {
                    j.push(r, self.vi(*i), 1.0);
                    r += 1;
                }
                None => {
                    let b = self.ybus.index[&self.boundary.expect("boundary island").bus];
                    j.push(r, self.vr(b), 1.0);
                    j.push(r + 1, self.vi(b), 1.0);
                    j.push(r + 2, self.df(k), 1.0);
                    r += 3;
                }
            }
        }
        for (g, row) in self.gen_row_offsets().into_iter().enumerate() {
            let spec = &self.gens[g];
            j.push(row, self.gen_var(g, P), 1.0);
            j.push(row + 1, self.gen_var(g, DPP), 1.0);
            let df = self.df(self.island_of[self.gen_bus[g]]);
            j.push(row + 1, df, -spec.droop(Jet::<1>::var(x[df], 0)).g[0]);
            j.push(row + 2, self.gen_var(g, PTOT), 1.0);
            j.push(row + 2, self.gen_var(g, P), -1.0);
            j.push(row + 2, self.gen_var(g, DPP), -1.0);
            j.push(row + 2, self.gen_var(g, DPG), -1.0);
            if spec.dpg_bounds.is_none() {
                j.push(row + 3, self.gen_var(g, DPG), 1.0);
            }
        }
        let r0 = self.dev_row0();
        for (k, reg) in self.regulated.iter().enumerate() {
            j.push(r0 + k, self.vsq(reg.bus), 1.0);
            j.push(r0 + k, self.dev_var(k), 1.0 / self.weight);
        }
        j
    }

    fn lagrangian_hessian(&self, x: &[f64], lambda: &[f64]) -> Triplets {
        let n = self.n_bus();
        let mut h = Triplets::new(x.len(), x.len());
        for g in 0..self.gens.len() {
            h.push(self.gen_var(g, DPG), self.gen_var(g, DPG), 2.0);
        }
        for k in 0..self.regulated.len() {
            h.push(self.dev_var(k), self.dev_var(k), 2.0);
        }
        let mut stamp = |cols: &[usize], jet: &Jet<4>, w: f64| {
            for (a, &ca) in cols.iter().enumerate() {
                for (b, &cb) in cols.iter().enumerate() {
                    h.push(ca, cb, w * jet.h[a][b]);
                }
            }
        };
        for &(i, model) in &self.loads {
            let (ir, ii) = self.load_jets(x, i, model);
            let cols = [self.vr(i), self.vi(i)];
            stamp(&cols, &ir, -lambda[2 * i]);
            stamp(&cols, &ii, -lambda[2 * i + 1]);
        }
        for g in 0..self.gens.len() {
            let i = self.gen_bus[g];
            let (ir, ii) = self.gen_jets(x, g);
            let cols = [self.vr(i), self.vi(i), self.gen_var(g, PTOT), self.gen_var(g, Q)];
            stamp(&cols, &ir, lambda[2 * i]);
            stamp(&cols, &ii, lambda[2 * i + 1]);
        }
        for i in 0..n {
            h.push(self.vr(i), self.vr(i), -2.0 * lambda[2 * n + i]);
            h.push(self.vi(i), self.vi(i), -2.0 * lambda[2 * n + i]);
        }
        for (g, row) in self.gen_row_offsets().into_iter().enumerate() {
            let spec = &self.gens[g];
            if spec.saturation.is_some() {
                let df = self.df(self.island_of[self.gen_bus[g]]);
                let curve = spec.droop(Jet::<1>::var(x[df], 0));
                h.push(df, df, -lambda[row + 1] * curve.h[0][0]);
            }
        }
        h
    }
}
