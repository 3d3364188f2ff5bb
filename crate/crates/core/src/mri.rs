//! Multirate infinitesimal step integration: explicit slow stages whose
//! increments are spread as constant forcing over fast sub-solves.

use crate::ark::{ButcherTable, Integrator, StepStats, TableKind};
use crate::context::TaskContext;
use crate::newton::{BlockJacobian, CsrMatrix, NewtonStats, Rhs};
use crate::profiling::Region;
use crate::vectors::ManyVector;
use crate::{Error, Result};

/// Slow coupling table padded with a final row equal to the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MriCoupling {
    pub name: &'static str,
    /// `s + 1` rows; row `i` holds `A_ij` for `j < i`.
    pub a: Vec<Vec<f64>>,
    /// `s + 1` abscissae ending in 1.
    pub c: Vec<f64>,
    pub order: u32,
}

impl MriCoupling {
    /// Pads an explicit table.
    pub fn from_explicit(table: &ButcherTable) -> Result<Self> {
        if table.kind != TableKind::Explicit {
            return Err(Error::Config(format!("{} is not explicit", table.name)));
        }
        table.validate()?;
        let s = table.stages();
        let mut a: Vec<Vec<f64>> = (0..s).map(|i| (0..i).map(|j| table.coef(i, j)).collect()).collect();
        a.push(table.b.clone());
        let mut c = table.c.clone();
        c.push(1.0);
        let m = Self {
            name: table.name,
            a,
            c,
            order: table.order,
        };
        m.validate()?;
        Ok(m)
    }

    /// Three-stage third-order slow table:
    /// `c = (0, 1/3, 3/4)`, `A21 = 1/3`, `A31 = -3/16`, `A32 = 15/16`,
    /// `b = (1/6, 3/10, 8/15)`.
    pub fn kw3() -> Self {
        let table = ButcherTable {
            name: "KW3",
            a: vec![vec![], vec![1.0 / 3.0], vec![-3.0 / 16.0, 15.0 / 16.0]],
            b: vec![1.0 / 6.0, 3.0 / 10.0, 8.0 / 15.0],
            b_hat: vec![1.0 / 6.0, 3.0 / 10.0, 8.0 / 15.0],
            c: vec![0.0, 1.0 / 3.0, 0.75],
            order: 3,
            embedded_order: 3,
            kind: TableKind::Explicit,
        };
        Self::from_explicit(&table).expect("built-in table is valid")
    }

    pub fn forward_euler() -> Self {
        Self {
            name: "forward Euler",
            a: vec![vec![], vec![1.0]],
            c: vec![0.0, 1.0],
            order: 1,
        }
    }

    /// The slow explicit table this coupling pads.
    pub fn slow_table(&self) -> ButcherTable {
        let s = self.stages();
        let b = self.a[s].clone();
        ButcherTable {
            name: self.name,
            a: self.a[..s].to_vec(),
            b: b.clone(),
            b_hat: b,
            c: self.c[..s].to_vec(),
            order: self.order,
            embedded_order: self.order,
            kind: TableKind::Explicit,
        }
    }

    /// Number of slow stages `s`.
    pub fn stages(&self) -> usize {
        self.c.len() - 1
    }

    pub fn coef(&self, i: usize, j: usize) -> f64 {
        self.a[i].get(j).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("coupling {}: {m}", self.name)));
        if self.c.len() < 2 || self.a.len() != self.c.len() {
            return bad("row and abscissa counts differ");
        }
        if self.c[0] != 0.0 || *self.c.last().unwrap() != 1.0 {
            return bad("abscissae must run from 0 to 1");
        }
        if self.c.windows(2).any(|w| w[1] < w[0]) {
            return bad("abscissae must be nondecreasing");
        }
        for (i, row) in self.a.iter().enumerate() {
            if row.len() > i {
                return bad("rows must be strictly lower triangular");
            }
        }
        let sum: f64 = self.a[self.stages()].iter().sum();
        if (sum - 1.0).abs() > 1e-14 {
            return bad("padded row must sum to 1");
        }
        Ok(())
    }
}

/// `r = Σ_{j<i} (A_ij - A_{i-1,j}) fs_j / (c_i - c_{i-1})` for `1 <= i <= s`.
pub fn mri_forcing(
    coupling: &MriCoupling,
    i: usize,
    fs: &[ManyVector],
    fused: bool,
    out: &mut ManyVector,
) -> Result<()> {
    if i == 0 || i > coupling.stages() || fs.len() < i {
        return Err(Error::Range(format!(
            "forcing for stage {i} with {} slow values",
            fs.len()
        )));
    }
    let dc = coupling.c[i] - coupling.c[i - 1];
    forcing_over_span(coupling, i, fs, 1.0, dc, fused, out)
}

/// Forcing scaled so that `span` times it is the slow increment over a step of
/// size `h`; passing the floating-point length of the fast interval keeps the
/// forced increment free of the rounding in `t + c_i h`.
fn forcing_over_span(
    coupling: &MriCoupling,
    i: usize,
    fs: &[ManyVector],
    h: f64,
    span: f64,
    fused: bool,
    out: &mut ManyVector,
) -> Result<()> {
    if span == 0.0 {
        return Err(Error::Domain(format!("stage {i} has no fast interval")));
    }
    let scale = h / span;
    let coeffs: Vec<f64> = (0..i)
        .map(|j| (coupling.coef(i, j) - coupling.coef(i - 1, j)) * scale)
        .collect();
    let vecs: Vec<&ManyVector> = fs[..i].iter().collect();
    out.assign_combination(&coeffs, &vecs, fused)
}

/// Fast right-hand side plus a constant forcing vector.
pub struct Forced<'a, F: ?Sized> {
    pub inner: &'a F,
    pub r: &'a ManyVector,
}

impl<F: Rhs + ?Sized> Rhs for Forced<'_, F> {
    fn eval(&self, ctx: &TaskContext, t: f64, y: &ManyVector, ydot: &mut ManyVector) -> Result<()> {
        self.inner.eval(ctx, t, y, ydot)?;
        ydot.axpy(1.0, self.r)
    }
}

impl<F: BlockJacobian + ?Sized> BlockJacobian for Forced<'_, F> {
    fn cells(&self) -> usize {
        self.inner.cells()
    }

    fn pattern(&self) -> CsrMatrix {
        self.inner.pattern()
    }

    fn jacobian(&self, ctx: &TaskContext, t: f64, y: &ManyVector, jac: &mut CsrMatrix) -> Result<()> {
        self.inner.jacobian(ctx, t, y, jac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FastMode {
    /// Adaptive fast steps, bounded by the integrator's `h_max`.
    Adaptive,
    Fixed(f64),
}

#[derive(Debug)]
pub struct MriStepper {
    pub coupling: MriCoupling,
    pub fast: Integrator,
    pub slow_evals: u64,
}

impl MriStepper {
    pub fn new(coupling: MriCoupling, fast: Integrator) -> Result<Self> {
        coupling.validate()?;
        Ok(Self {
            coupling,
            fast,
            slow_evals: 0,
        })
    }

    /// Advances `y` from `t` by one slow step `h`.
    #[allow(clippy::too_many_arguments)]
    pub fn step<S: Rhs + ?Sized, F: BlockJacobian + ?Sized>(
        &mut self,
        ctx: &TaskContext,
        slow: &S,
        fast: &F,
        t: f64,
        h: f64,
        mode: FastMode,
        y: &mut ManyVector,
    ) -> Result<()> {
        let s = self.coupling.stages();
        let c = self.coupling.c.clone();
        let mut fs: Vec<ManyVector> = Vec::with_capacity(s);
        let mut r = y.clone();
        for i in 1..=s {
            let mut f = y.clone();
            slow.eval(ctx, t + c[i - 1] * h, y, &mut f)?;
            self.slow_evals += 1;
            fs.push(f);
            let (t0, t1) = (t + c[i - 1] * h, t + c[i] * h);
            if c[i] == c[i - 1] {
                // equal abscissae: the explicit increment with no fast solve
                let mut coeffs = vec![];
                let mut vecs: Vec<&ManyVector> = vec![];
                let base = y.clone();
                for (j, fj) in fs.iter().enumerate() {
                    coeffs.push(h * (self.coupling.coef(i, j) - self.coupling.coef(i - 1, j)));
                    vecs.push(fj);
                }
                coeffs.push(1.0);
                vecs.push(&base);
                y.assign_combination(&coeffs, &vecs, ctx.fused())?;
            } else {
                let tf = if i == s { t + h } else { t1 };
                forcing_over_span(&self.coupling, i, &fs, h, tf - t0, ctx.fused(), &mut r)?;
                let forced = Forced { inner: fast, r: &r };
                self.fast.reset();
                match mode {
                    FastMode::Adaptive => self.fast.evolve_adaptive(ctx, &forced, t0, tf, y),
                    FastMode::Fixed(hf) => self.fast.evolve_fixed(ctx, &forced, t0, tf, hf, y),
                }
                .map_err(|e| match e {
                    Error::Fatal { .. } | Error::Evolution { .. } => e,
                    other => Error::Evolution {
                        t: t0,
                        reason: format!("fast solve of slow stage {i} failed: {other}"),
                    },
                })?;
            }
        }
        Ok(())
    }
}

/// Transient adaptive phase followed by fixed fast steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoPhasePlan {
    pub t0: f64,
    pub t_transient: f64,
    pub tf: f64,
    pub h_slow: f64,
    pub h_fast: f64,
}

/// Length of the adaptive transient window.
pub const TRANSIENT_LENGTH: f64 = 0.1;
/// Slow-to-fast step ratio.
pub const STEP_RATIO: f64 = 1000.0;

impl TwoPhasePlan {
    pub fn new(t0: f64, tf: f64, h_slow: f64) -> Result<Self> {
        Self::with_fast_step(t0, tf, h_slow, h_slow / STEP_RATIO)
    }

    pub fn with_fast_step(t0: f64, tf: f64, h_slow: f64, h_fast: f64) -> Result<Self> {
        if !(tf > t0) || !(h_slow > 0.0) || !(h_fast > 0.0) {
            return Err(Error::Config(format!(
                "plan needs tf > t0 and positive steps: t0={t0}, tf={tf}, hS={h_slow}, hF={h_fast}"
            )));
        }
        Ok(Self {
            t0,
            t_transient: (t0 + TRANSIENT_LENGTH).min(tf),
            tf,
            h_slow,
            h_fast,
        })
    }

    pub fn has_fixed_phase(&self) -> bool {
        self.tf > self.t_transient
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseStats {
    pub slow_steps: u64,
    pub fast: StepStats,
    pub newton: NewtonStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TwoPhaseStats {
    pub transient: PhaseStats,
    pub fixed: PhaseStats,
}

impl TwoPhaseStats {
    pub fn slow_steps(&self) -> u64 {
        self.transient.slow_steps + self.fixed.slow_steps
    }
}

/// Runs both phases. `post_step` sees the state after every slow step.
#[allow(clippy::too_many_arguments)]
pub fn evolve_two_phase<S: Rhs + ?Sized, F: BlockJacobian + ?Sized>(
    ctx: &TaskContext,
    stepper: &mut MriStepper,
    slow: &S,
    fast: &F,
    plan: &TwoPhasePlan,
    y: &mut ManyVector,
    post_step: &mut dyn FnMut(&mut ManyVector) -> Result<()>,
) -> Result<TwoPhaseStats> {
    let mut stats = TwoPhaseStats::default();
    let h_max_saved = stepper.fast.ctrl.h_max;
    stepper.fast.ctrl.h_max = plan.h_fast;
    let phases = [
        (
            "transient",
            Region::Transient,
            plan.t0,
            plan.t_transient,
            FastMode::Adaptive,
        ),
        (
            "fixed-step",
            Region::FixedStep,
            plan.t_transient,
            plan.tf,
            FastMode::Fixed(plan.h_fast),
        ),
    ];
    let result = (|| {
        for (k, (name, region, a, b, mode)) in phases.into_iter().enumerate() {
            if !(b > a) {
                continue;
            }
            let _t = ctx.prof.scope(region);
            let fast0 = stepper.fast.stats;
            let newton0 = stepper.fast.newton.stats;
            let mut t = a;
            let mut n = 0usize;
            while t < b {
                let last = t + plan.h_slow >= b - 1e-10 * plan.h_slow;
                let h = if last { b - t } else { plan.h_slow };
                stepper.step(ctx, slow, fast, t, h, mode, y).map_err(|e| Error::Fatal {
                    phase: name,
                    step: n,
                    source: Box::new(e),
                })?;
                post_step(y)?;
                n += 1;
                t = if last { b } else { a + n as f64 * plan.h_slow };
            }
            let ps = PhaseStats {
                slow_steps: n as u64,
                fast: diff_step(stepper.fast.stats, fast0),
                newton: diff_newton(stepper.fast.newton.stats, newton0),
            };
            if k == 0 {
                stats.transient = ps;
            } else {
                stats.fixed = ps;
            }
        }
        Ok(())
    })();
    stepper.fast.ctrl.h_max = h_max_saved;
    result.map(|_| stats)
}

fn diff_step(a: StepStats, b: StepStats) -> StepStats {
    StepStats {
        steps: a.steps - b.steps,
        attempts: a.attempts - b.attempts,
        error_fails: a.error_fails - b.error_fails,
        conv_fails: a.conv_fails - b.conv_fails,
    }
}

fn diff_newton(a: NewtonStats, b: NewtonStats) -> NewtonStats {
    NewtonStats {
        iters: a.iters - b.iters,
        solves: a.solves - b.solves,
        conv_fails: a.conv_fails - b.conv_fails,
        jac_evals: a.jac_evals - b.jac_evals,
        factorizations: a.factorizations - b.factorizations,
    }
}
