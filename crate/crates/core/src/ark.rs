//! Single-rate Runge–Kutta engine: explicit and diagonally implicit
//! embedded pairs, an integral step controller, adaptive and fixed-step
//! evolution.

use crate::context::TaskContext;
use crate::newton::{BlockJacobian, CsrMatrix, NewtonConfig, NewtonSolver, Rhs};
use crate::vectors::{ManyVector, WeightVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    Explicit,
    Dirk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTable {
    pub name: &'static str,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub c: Vec<f64>,
    pub order: u32,
    pub embedded_order: u32,
    pub kind: TableKind,
}

impl ButcherTable {
    /// Five-stage L-stable SDIRK of order 4 with an order-3 embedding,
    /// diagonal 1/4 (Hairer & Wanner).
    pub fn sdirk4() -> Self {
        Self {
            name: "SDIRK4(3)",
            a: vec![
                vec![0.25],
                vec![0.5, 0.25],
                vec![17.0 / 50.0, -1.0 / 25.0, 0.25],
                vec![371.0 / 1360.0, -137.0 / 2720.0, 15.0 / 544.0, 0.25],
                vec![25.0 / 24.0, -49.0 / 48.0, 125.0 / 16.0, -85.0 / 12.0, 0.25],
            ],
            b: vec![25.0 / 24.0, -49.0 / 48.0, 125.0 / 16.0, -85.0 / 12.0, 0.25],
            b_hat: vec![59.0 / 48.0, -17.0 / 96.0, 225.0 / 32.0, -85.0 / 12.0, 0.0],
            c: vec![0.25, 0.75, 11.0 / 20.0, 0.5, 1.0],
            order: 4,
            embedded_order: 3,
            kind: TableKind::Dirk,
        }
    }

    /// Four-stage L-stable, stiffly accurate ESDIRK of order 3 with an
    /// order-2 embedding (Kennedy & Carpenter, ARK3(2)4L[2]SA implicit part).
    pub fn esdirk3() -> Self {
        let g = 1767732205903.0 / 4055673282236.0;
        let b = vec![
            1471266399579.0 / 7840856788654.0,
            -4482444167858.0 / 7529755066697.0,
            11266239266428.0 / 11593286722821.0,
            g,
        ];
        Self {
            name: "ESDIRK3(2)",
            a: vec![
                vec![0.0],
                vec![g, g],
                vec![2746238789719.0 / 10658868560708.0, -640167445237.0 / 6845629431997.0, g],
                b.clone(),
            ],
            b,
            b_hat: vec![
                2756255671327.0 / 12835298489170.0,
                -10771552573575.0 / 22201958757719.0,
                9247589265047.0 / 10645013368117.0,
                2193209047091.0 / 5459859503100.0,
            ],
            c: vec![0.0, 1767732205903.0 / 2027836641118.0, 0.6, 1.0],
            order: 3,
            embedded_order: 2,
            kind: TableKind::Dirk,
        }
    }

    /// Bogacki–Shampine 3(2).
    pub fn bogacki_shampine() -> Self {
        Self {
            name: "BS3(2)",
            a: vec![
                vec![],
                vec![0.5],
                vec![0.0, 0.75],
                vec![2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0],
            ],
            b: vec![2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0, 0.0],
            b_hat: vec![7.0 / 24.0, 0.25, 1.0 / 3.0, 0.125],
            c: vec![0.0, 0.5, 0.75, 1.0],
            order: 3,
            embedded_order: 2,
            kind: TableKind::Explicit,
        }
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    /// Coefficient `A_ij`, zero outside the stored triangle.
    pub fn coef(&self, i: usize, j: usize) -> f64 {
        self.a[i].get(j).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        let bad = |m: String| Err(Error::Config(format!("table {}: {m}", self.name)));
        if self.a.len() != s || self.c.len() != s || self.b_hat.len() != s {
            return bad("inconsistent stage counts".into());
        }
        for (i, row) in self.a.iter().enumerate() {
            let limit = match self.kind {
                TableKind::Explicit => i,
                TableKind::Dirk => i + 1,
            };
            if row.len() > limit {
                return bad(format!("row {i} is not lower triangular"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - self.c[i]).abs() > 1e-14 {
                return bad(format!("row {i} sums to {sum}, abscissa {}", self.c[i]));
            }
        }
        for w in [&self.b, &self.b_hat] {
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-14 {
                return bad(format!("weights sum to {sum}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rtol: 1e-5, atol: 1e-9 }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config(format!("tolerances must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Controller {
    pub safety: f64,
    pub bias: f64,
    pub max_growth: f64,
    pub h_max: f64,
    pub max_steps: u64,
}

impl Default for Controller {
    fn default() -> Self {
        Self {
            safety: 0.99,
            bias: 2.0,
            max_growth: 2.0,
            h_max: f64::INFINITY,
            max_steps: 5000,
        }
    }
}

/// Step-size reduction after a failed nonlinear solve.
pub const CONV_FAIL_FACTOR: f64 = 0.25;
/// Step-size reduction when the error estimate is not finite.
pub const NONFINITE_FACTOR: f64 = 0.1;
const MAX_CONSECUTIVE_FAILURES: u32 = 20;

impl Controller {
    pub fn validate(&self) -> Result<()> {
        if !(self.safety > 0.0 && self.safety < 1.0) || !(self.max_growth > 1.0) || !(self.h_max > 0.0) {
            return Err(Error::Config(format!("invalid controller {self:?}")));
        }
        if !(self.bias > 0.0) || self.max_steps == 0 {
            return Err(Error::Config(format!("invalid controller {self:?}")));
        }
        Ok(())
    }

    /// `h min(max_growth, safety (1 / (bias err))^(1/(p+1)))`, capped at `h_max`.
    pub fn next_h(&self, h: f64, err: f64, embedded_order: u32) -> f64 {
        let factor = if !err.is_finite() {
            NONFINITE_FACTOR
        } else if err <= 0.0 {
            self.max_growth
        } else {
            let k = 1.0 / (embedded_order as f64 + 1.0);
            self.max_growth.min(self.safety * (1.0 / (self.bias * err)).powf(k))
        };
        (h * factor).min(self.h_max)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub steps: u64,
    pub attempts: u64,
    pub error_fails: u64,
    pub conv_fails: u64,
}

impl StepStats {
    pub fn merge(&mut self, o: &StepStats) {
        self.steps += o.steps;
        self.attempts += o.attempts;
        self.error_fails += o.error_fails;
        self.conv_fails += o.conv_fails;
    }
}

/// One explicit step. Returns the new state and, when requested, the WRMS
/// norm of the embedded difference.
#[allow(clippy::too_many_arguments)]
pub fn erk_step<P: Rhs + ?Sized>(
    ctx: &TaskContext,
    p: &P,
    table: &ButcherTable,
    t: f64,
    v: &ManyVector,
    h: f64,
    w: Option<&WeightVector>,
) -> Result<(ManyVector, f64)> {
    if table.kind != TableKind::Explicit {
        return Err(Error::Config(format!("{} is not explicit", table.name)));
    }
    let s = table.stages();
    let mut k: Vec<ManyVector> = Vec::with_capacity(s);
    let mut stage = v.clone();
    for i in 0..s {
        combine(ctx, &mut stage, v, h, &table.a[i], &k)?;
        let mut ki = v.clone();
        p.eval(ctx, t + table.c[i] * h, &stage, &mut ki)?;
        k.push(ki);
    }
    finish(ctx, table, v, h, &k, w)
}

/// One diagonally implicit step; stage equations go through `newton`.
#[allow(clippy::too_many_arguments)]
pub fn dirk_step<P: BlockJacobian + ?Sized>(
    ctx: &TaskContext,
    p: &P,
    table: &ButcherTable,
    newton: &mut NewtonSolver,
    t: f64,
    v: &ManyVector,
    h: f64,
    w: &WeightVector,
    want_error: bool,
) -> Result<(ManyVector, f64)> {
    if table.kind != TableKind::Dirk {
        return Err(Error::Config(format!("{} is not diagonally implicit", table.name)));
    }
    let s = table.stages();
    let mut k: Vec<ManyVector> = Vec::with_capacity(s);
    let mut known = v.clone();
    let mut z = v.clone();
    for i in 0..s {
        let row = &table.a[i];
        combine(ctx, &mut known, v, h, &row[..i.min(row.len())], &k)?;
        let aii = table.coef(i, i);
        let mut ki = v.clone();
        if aii == 0.0 {
            z.copy_from(&known)?;
            p.eval(ctx, t + table.c[i] * h, &z, &mut ki)?;
        } else {
            // trivial predictor: the previous stage value stays in `z`
            newton.solve_stage(ctx, p, t + table.c[i] * h, h * aii, &known, &mut z, &mut ki, w)?;
        }
        k.push(ki);
    }
    finish(ctx, table, v, h, &k, if want_error { Some(w) } else { None })
}

/// `out = v + h Σ_j coeffs[j] k[j]`, with the increments summed before `v`
/// is added.
fn combine(
    ctx: &TaskContext,
    out: &mut ManyVector,
    v: &ManyVector,
    h: f64,
    coeffs: &[f64],
    k: &[ManyVector],
) -> Result<()> {
    let mut cs = Vec::with_capacity(coeffs.len() + 1);
    let mut vs = Vec::with_capacity(coeffs.len() + 1);
    for (c, kj) in coeffs.iter().zip(k) {
        if *c != 0.0 {
            cs.push(h * c);
            vs.push(kj);
        }
    }
    cs.push(1.0);
    vs.push(v);
    out.assign_combination(&cs, &vs, ctx.fused())
}

fn finish(
    ctx: &TaskContext,
    table: &ButcherTable,
    v: &ManyVector,
    h: f64,
    k: &[ManyVector],
    w: Option<&WeightVector>,
) -> Result<(ManyVector, f64)> {
    let mut next = v.clone();
    combine(ctx, &mut next, v, h, &table.b, k)?;
    let err = match w {
        Some(w) => {
            let d: Vec<f64> = table.b.iter().zip(&table.b_hat).map(|(b, bh)| b - bh).collect();
            let mut diff = v.clone();
            let mut cs = Vec::new();
            let mut vs = Vec::new();
            for (c, kj) in d.iter().zip(k) {
                if *c != 0.0 {
                    cs.push(h * c);
                    vs.push(kj);
                }
            }
            if cs.is_empty() {
                diff.fill(0.0);
            } else {
                diff.assign_combination(&cs, &vs, ctx.fused())?;
            }
            ctx.coll.wrms_norm(&diff, w)?
        }
        None => 0.0,
    };
    Ok((next, err))
}

/// Time-stepping driver shared by explicit and implicit tables.
#[derive(Debug)]
pub struct Integrator {
    pub table: ButcherTable,
    pub tol: Tolerances,
    pub ctrl: Controller,
    pub newton: NewtonSolver,
    pub stats: StepStats,
    /// Accepted step sizes, kept when `trace` is set.
    pub trace: Option<Vec<f64>>,
    h_next: Option<f64>,
}

impl Integrator {
    pub fn new(table: ButcherTable, tol: Tolerances, ctrl: Controller, newton: NewtonConfig) -> Result<Self> {
        table.validate()?;
        tol.validate()?;
        ctrl.validate()?;
        newton.validate()?;
        Ok(Self {
            table,
            tol,
            ctrl,
            newton: NewtonSolver::new(newton),
            stats: StepStats::default(),
            trace: None,
            h_next: None,
        })
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    /// Forgets step-size history and the stored Jacobian.
    pub fn reset(&mut self) {
        self.h_next = None;
        self.newton.reset();
    }

    fn attempt<P: BlockJacobian + ?Sized>(
        &mut self,
        ctx: &TaskContext,
        p: &P,
        t: f64,
        y: &ManyVector,
        h: f64,
        want_error: bool,
    ) -> Result<(ManyVector, f64)> {
        let w = WeightVector::new(y, self.tol.rtol, self.tol.atol)?;
        match self.table.kind {
            TableKind::Explicit => erk_step(ctx, p, &self.table, t, y, h, want_error.then_some(&w)),
            TableKind::Dirk => dirk_step(ctx, p, &self.table, &mut self.newton, t, y, h, &w, want_error),
        }
    }

    fn initial_step<P: BlockJacobian + ?Sized>(
        &self,
        ctx: &TaskContext,
        p: &P,
        t0: f64,
        y: &ManyVector,
    ) -> Result<f64> {
        let mut f0 = y.clone();
        p.eval(ctx, t0, y, &mut f0)?;
        let w = WeightVector::new(y, self.tol.rtol, self.tol.atol)?;
        let fnorm = ctx.coll.wrms_norm(&f0, &w)?;
        let h = if fnorm > 0.0 { 0.5 / fnorm } else { f64::INFINITY };
        Ok(h.min(self.ctrl.h_max))
    }

    /// Adaptive evolution of `y` from `t0` to `tf`.
    pub fn evolve_adaptive<P: BlockJacobian + ?Sized>(
        &mut self,
        ctx: &TaskContext,
        p: &P,
        t0: f64,
        tf: f64,
        y: &mut ManyVector,
    ) -> Result<()> {
        if !(tf > t0) {
            return Err(Error::Domain(format!("final time {tf} must exceed {t0}")));
        }
        let mut t = t0;
        let mut h = match self.h_next {
            Some(h) => h.min(self.ctrl.h_max),
            None => self.initial_step(ctx, p, t0, y)?,
        };
        let mut steps = 0u64;
        let mut failures = 0u32;
        while t < tf {
            if steps >= self.ctrl.max_steps {
                return Err(Error::Evolution {
                    t,
                    reason: format!("reached {} steps before {tf}", self.ctrl.max_steps),
                });
            }
            let last = t + h >= tf - 1e-10 * h.abs().max(tf.abs() * f64::EPSILON);
            let h_try = if last { tf - t } else { h };
            self.stats.attempts += 1;
            match self.attempt(ctx, p, t, y, h_try, true) {
                Ok((next, err)) if err <= 1.0 => {
                    *y = next;
                    t = if last { tf } else { t + h_try };
                    steps += 1;
                    self.stats.steps += 1;
                    failures = 0;
                    if let Some(tr) = &mut self.trace {
                        tr.push(h_try);
                    }
                    let grown = self.ctrl.next_h(h_try, err, self.table.embedded_order);
                    // a truncated final step keeps the controller's previous size
                    h = if last { grown.max(h.min(self.ctrl.h_max)) } else { grown };
                }
                Ok((_, err)) => {
                    self.stats.error_fails += 1;
                    failures += 1;
                    h = self.ctrl.next_h(h_try, err, self.table.embedded_order);
                }
                Err(e) if e.is_recoverable() => {
                    self.stats.conv_fails += 1;
                    failures += 1;
                    h = h_try * CONV_FAIL_FACTOR;
                }
                Err(e) => return Err(e),
            }
            if failures > MAX_CONSECUTIVE_FAILURES || !(h > (t.abs() + tf.abs()) * f64::EPSILON) {
                return Err(Error::Evolution {
                    t,
                    reason: format!("step size collapsed to {h:e} after {failures} failures"),
                });
            }
        }
        self.h_next = Some(h);
        Ok(())
    }

    /// Fixed-step evolution; any solver failure is fatal.
    pub fn evolve_fixed<P: BlockJacobian + ?Sized>(
        &mut self,
        ctx: &TaskContext,
        p: &P,
        t0: f64,
        tf: f64,
        h: f64,
        y: &mut ManyVector,
    ) -> Result<()> {
        if !(h > 0.0) || !(tf >= t0) {
            return Err(Error::Domain(format!("fixed step {h} over [{t0}, {tf}]")));
        }
        let mut t = t0;
        let mut n = 0usize;
        while t < tf {
            let last = t + h >= tf - 1e-10 * h;
            let h_try = if last { tf - t } else { h };
            self.stats.attempts += 1;
            match self.attempt(ctx, p, t, y, h_try, false) {
                Ok((next, _)) => *y = next,
                Err(e) => {
                    return Err(Error::Fatal {
                        phase: "fixed-step",
                        step: n,
                        source: Box::new(e),
                    })
                }
            }
            n += 1;
            self.stats.steps += 1;
            t = if last { tf } else { t0 + n as f64 * h };
        }
        Ok(())
    }
}

/// Small dense ODE on one cell: `f(t, y, out)` and `jac(t, y, dense)` over
/// a flat serial state.
pub struct DenseOde<F, J> {
    pub dim: usize,
    pub f: F,
    pub jac: J,
}

impl<F, J> Rhs for DenseOde<F, J>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    fn eval(&self, _: &TaskContext, t: f64, y: &ManyVector, ydot: &mut ManyVector) -> Result<()> {
        let flat = y.to_flat();
        let mut out = vec![0.0; self.dim];
        (self.f)(t, &flat, &mut out);
        for (d, o) in ydot.iter_mut().zip(out) {
            *d = o;
        }
        Ok(())
    }
}

impl<F, J> BlockJacobian for DenseOde<F, J>
where
    F: Fn(f64, &[f64], &mut [f64]),
    J: Fn(f64, &[f64], &mut [f64]),
{
    fn cells(&self) -> usize {
        1
    }

    fn pattern(&self) -> CsrMatrix {
        let all: Vec<(usize, usize)> = (0..self.dim * self.dim).map(|k| (k / self.dim, k % self.dim)).collect();
        CsrMatrix::block_pattern(1, self.dim, &all).expect("dense pattern fits its block")
    }

    fn jacobian(&self, _: &TaskContext, t: f64, y: &ManyVector, jac: &mut CsrMatrix) -> Result<()> {
        let flat = y.to_flat();
        let mut dense = vec![0.0; self.dim * self.dim];
        (self.jac)(t, &flat, &mut dense);
        jac.vals.copy_from_slice(&dense);
        Ok(())
    }
}

/// [`DenseOde`] without a Jacobian, for explicit tables.
pub fn explicit_ode<F>(dim: usize, f: F) -> DenseOde<F, fn(f64, &[f64], &mut [f64])>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    fn zero(_: f64, _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
    }
    DenseOde { dim, f, jac: zero }
}
