// Quadratic test programs shared by unit and integration tests. Names are
// resolved through the parent module so the file compiles in both places.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{KktState, OptProblem, Triplets, Variable};

/// `min 0.5 x'Qx + c'x  s.t.  A x = b,  [sum x^2 = r2],  lower < x < upper`
#[derive(Debug, Clone)]
pub struct Qp {
    pub q: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub sphere: Option<f64>,
    pub vars: Vec<Variable>,
}

impl Qp {
    pub fn new(q: Vec<Vec<f64>>, c: Vec<f64>) -> Self {
        let vars = (0..c.len()).map(|i| Variable::free(format!("x{i}"))).collect();
        Self { q, c, a: vec![], b: vec![], sphere: None, vars }
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        for (v, (lo, hi)) in self.vars.iter_mut().zip(bounds) {
            v.lower = lo;
            v.upper = hi;
        }
        self
    }

    pub fn with_equality(mut self, a: Vec<Vec<f64>>, b: Vec<f64>) -> Self {
        self.a = a;
        self.b = b;
        self
    }

    pub fn with_sphere(mut self, r2: f64) -> Self {
        self.sphere = Some(r2);
        self
    }

    /// Strictly convex objective, `m` linear equalities, optional sphere,
    /// all constraints feasible at a point inside the box.
    pub fn random(n: usize, m: usize, seed: u64, sphere: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut q = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                q[i][j] = (0..n).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            }
            q[i][i] += 0.5;
        }
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let xf: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let a: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b = a.iter().map(|row| row.iter().zip(&xf).map(|(x, y)| x * y).sum()).collect();
        let bounds = xf
            .iter()
            .map(|&x| match rng.random_range(0..4) {
                0 => (f64::NEG_INFINITY, f64::INFINITY),
                1 => (x - rng.random_range(0.1..1.0), f64::INFINITY),
                2 => (f64::NEG_INFINITY, x + rng.random_range(0.1..1.0)),
                _ => (x - rng.random_range(0.1..1.0), x + rng.random_range(0.1..1.0)),
            })
            .collect();
        let mut p = Self::new(q, c).with_bounds(bounds).with_equality(a, b);
        if sphere {
            p = p.with_sphere(xf.iter().map(|x| x * x).sum());
        }
        p
    }

    pub fn random_interior_state(&self, seed: u64) -> KktState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.vars.len();
        let x = self
            .vars
            .iter()
            .map(|v| {
                let lo = if v.has_lower() { v.lower } else { -2.0 };
                let hi = if v.has_upper() { v.upper } else { 2.0 };
                let (lo, hi) = if v.has_lower() && !v.has_upper() { (lo, lo + 2.0) } else if !v.has_lower() && v.has_upper() { (hi - 2.0, hi) } else { (lo, hi) };
                lo + (hi - lo) * rng.random_range(0.05..0.95)
            })
            .collect();
        let lambda = (0..self.num_constraints()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut mu_lo = vec![0.0; n];
        let mut mu_hi = vec![0.0; n];
        for (i, v) in self.vars.iter().enumerate() {
            if v.has_lower() {
                mu_lo[i] = rng.random_range(0.01..2.0);
            }
            if v.has_upper() {
                mu_hi[i] = rng.random_range(0.01..2.0);
            }
        }
        KktState { x, lambda, mu_lo, mu_hi }
    }
}

impl OptProblem for Qp {
    fn variables(&self) -> &[Variable] {
        &self.vars
    }

    fn num_constraints(&self) -> usize {
        self.a.len() + usize::from(self.sphere.is_some())
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let n = x.len();
        let mut f = 0.0;
        for i in 0..n {
            f += self.c[i] * x[i];
            for j in 0..n {
                f += 0.5 * x[i] * self.q[i][j] * x[j];
            }
        }
        f
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len()).map(|i| self.c[i] + (0..x.len()).map(|j| self.q[i][j] * x[j]).sum::<f64>()).collect()
    }

    fn constraints(&self, x: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> =
            self.a.iter().zip(&self.b).map(|(row, b)| row.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() - b).collect();
        if let Some(r2) = self.sphere {
            g.push(x.iter().map(|v| v * v).sum::<f64>() - r2);
        }
        g
    }

    fn jacobian(&self, x: &[f64]) -> Triplets {
        let mut t = Triplets::new(self.num_constraints(), x.len());
        for (r, row) in self.a.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                t.push(r, c, v);
            }
        }
        if self.sphere.is_some() {
            for (c, &v) in x.iter().enumerate() {
                t.push(self.a.len(), c, 2.0 * v);
            }
        }
        t
    }

    fn lagrangian_hessian(&self, x: &[f64], lambda: &[f64]) -> Triplets {
        let n = x.len();
        let mut t = Triplets::new(n, n);
        for i in 0..n {
            for j in 0..n {
                t.push(i, j, self.q[i][j]);
            }
        }
        if self.sphere.is_some() {
            for i in 0..n {
                t.push(i, i, 2.0 * lambda[self.a.len()]);
            }
        }
        t
    }
}
