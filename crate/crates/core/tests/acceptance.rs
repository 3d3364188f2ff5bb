//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Tolerances are fixed below. A failing criterion makes the binary exit
//! nonzero unless it is marked host-limited, which only happens when the
//! machine has fewer cores than the criterion has workers.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mrflow::ark::{erk_step, ButcherTable, Controller, DenseOde, Integrator, Tolerances};
use mrflow::chemistry::{derived_units, ReactionNetwork, Surrogate, N_C};
use mrflow::comm::{run_in_process, Comm};
use mrflow::context::TaskContext;
use mrflow::euler::{scatter_cells, EulerRhs, GasConstants, NFLUID};
use mrflow::harness::{emit_report, run_simulation, scaling_plan, RunConfig, RunOutput, PLOT_THRESHOLD};
use mrflow::mesh::{dims_create, Boundaries, BoundaryCondition, Decomposition, UniformGrid};
use mrflow::mri::{FastMode, MriCoupling, MriStepper};
use mrflow::newton::{block_lu_factor, CsrMatrix, NewtonConfig, NewtonSolver};
use mrflow::profiling::{Profiler, Region};
use mrflow::testsuite::{expm, matvec, observed_order, reference_solve};
use mrflow::vectors::{Collective, ManyVector, ReductionMode, VectorSpec, WeightVector};

const WENO_MIN_ORDER: f64 = 4.5;
const CONSERVATION_TOL: f64 = 1e-12;
const MRI_ORDER: (f64, f64) = (2.7, 3.3);
const MRI_RATIO: f64 = 1000.0;
const SLOW_LIMIT_ULPS: f64 = 2.0;
const DIRK_ORDER_SLACK: f64 = 0.3;
const SURROGATE_WRMS_MAX: f64 = 5.0;
const LU_REL_TOL: f64 = 1e-12;
const UNITS_SIG4: f64 = 5e-5;
const DECOMP_WRMS_MAX: f64 = 1e-12;
const TOTAL_IDENTITY_REL: f64 = 0.01;
const SUNDIALS_TIME_REL: f64 = 0.05;
const WEAK_SCALING_MIN_EFF: f64 = 0.5;

struct Outcome {
    pass: bool,
    detail: String,
    host_limited: bool,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome {
        pass,
        detail,
        host_limited: false,
    }
}

type Check = fn() -> Result<Outcome, String>;

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn periodic_state(e: &EulerRhs, f: impl Fn([f64; 3]) -> Vec<f64>) -> ManyVector {
    let dc = &e.decomp;
    let mut y = ManyVector::zeros(&e.specs());
    let mut cellwise = vec![0.0; dc.local_cells() * e.nf];
    for k in 0..dc.ext[2] {
        for j in 0..dc.ext[1] {
            for i in 0..dc.ext[0] {
                let c = dc.cell(i, j, k);
                cellwise[c * e.nf..(c + 1) * e.nf].copy_from_slice(&f(dc.center(i, j, k)));
            }
        }
    }
    scatter_cells(&cellwise, e.nf, dc.local_cells(), &mut y).unwrap();
    y
}

fn periodic_euler(n: [usize; 3]) -> Result<EulerRhs, String> {
    let dc = Decomposition::new(
        UniformGrid::unit_cube(n),
        Boundaries::all(BoundaryCondition::Periodic),
        1,
        0,
    )
    .map_err(err)?;
    Ok(EulerRhs::new(dc, GasConstants::from_gamma(1.4).map_err(err)?, 0))
}

fn ac1_weno_order() -> Result<Outcome, String> {
    let comm = Comm::solo();
    let ctx = TaskContext::new(&comm, ReductionMode::default());
    let table = ButcherTable::bogacki_shampine();
    let tau = std::f64::consts::TAU;
    let (u, p, tf) = (1.0, 1.0, 0.1);
    let wave = move |x: f64, t: f64| 1.0 + 0.2 * (tau * (x - u * t)).sin();
    let grids = [32usize, 64, 128, 256];
    let mut dxs = Vec::new();
    let mut errs = Vec::new();
    for &n in &grids {
        let e = periodic_euler([n, 3, 3])?;
        let mut y = periodic_state(&e, |x| {
            let rho = wave(x[0], 0.0);
            vec![rho, rho * u, 0.0, 0.0, p / 0.4 + 0.5 * rho * u * u]
        });
        let dx = 1.0 / n as f64;
        // time error ~ dt^3 ~ dx^5
        let dt_target = 0.3 * dx * (dx * 32.0).powf(2.0 / 3.0);
        let steps = (tf / dt_target).ceil() as usize;
        let dt = tf / steps as f64;
        for s in 0..steps {
            y = erk_step(&ctx, &e, &table, s as f64 * dt, &y, dt, None).map_err(err)?.0;
        }
        let l1: f64 = (0..n)
            .map(|i| (y.sub(0)[e.decomp.cell(i, 1, 1)] - wave(e.decomp.center(i, 1, 1)[0], tf)).abs())
            .sum::<f64>()
            / n as f64;
        dxs.push(dx);
        errs.push(l1);
    }
    let order = observed_order(&dxs, &errs).map_err(err)?;
    Ok(outcome(
        order >= WENO_MIN_ORDER,
        format!(
            "observed L1 order {order:.3} (min {WENO_MIN_ORDER}) over grids {grids:?}, errors {}",
            sci(&errs)
        ),
    ))
}

fn ac2_conservation() -> Result<Outcome, String> {
    let comm = Comm::solo();
    let ctx = TaskContext::new(&comm, ReductionMode::default());
    let e = periodic_euler([16, 16, 16])?;
    let tau = std::f64::consts::TAU;
    let mut y = periodic_state(&e, |x| {
        let rho = 1.0 + 0.2 * (tau * x[0]).sin() * (tau * x[1]).cos();
        let v = [0.3 + 0.1 * (tau * x[2]).sin(), -0.2, 0.1 * (tau * x[0]).cos()];
        let p = 1.0 + 0.1 * (tau * (x[0] + x[2])).sin();
        let ke = 0.5 * rho * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        vec![rho, rho * v[0], rho * v[1], rho * v[2], p / 0.4 + ke]
    });
    // sound speed below 1.5 and flow speed below 0.5 everywhere
    let h = 0.4 * (1.0 / 16.0) / 2.0;
    let table = MriCoupling::kw3().slow_table();
    let sums = |y: &ManyVector| -> Vec<(f64, f64)> {
        (0..NFLUID)
            .map(|f| {
                (
                    y.sub(f).iter().sum::<f64>(),
                    y.sub(f).iter().map(|v| v.abs()).sum::<f64>(),
                )
            })
            .collect()
    };
    let before = sums(&y);
    for s in 0..100 {
        y = erk_step(&ctx, &e, &table, s as f64 * h, &y, h, None).map_err(err)?.0;
    }
    let after = sums(&y);
    let drift: Vec<f64> = before
        .iter()
        .zip(&after)
        .map(|((a, scale), (b, _))| (b - a).abs() / scale)
        .collect();
    let worst = drift.iter().cloned().fold(0.0, f64::max);
    Ok(outcome(
        worst <= CONSERVATION_TOL,
        format!(
            "max relative drift {worst:.2e} (tol {CONSERVATION_TOL:.0e}) after 100 steps; per field {}",
            sci(&drift)
        ),
    ))
}

fn linear_multirate_error(h: f64) -> Result<f64, String> {
    let lambda = 20.0;
    let slow_m = [0.0, -1.0, 0.5, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let fast_m = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, lambda, 0.0, -lambda];
    let apply = |m: [f64; 9]| {
        move |_: f64, y: &[f64], o: &mut [f64]| {
            for i in 0..3 {
                o[i] = (0..3).map(|j| m[i * 3 + j] * y[j]).sum();
            }
        }
    };
    let slow = DenseOde {
        dim: 3,
        f: apply(slow_m),
        jac: |_: f64, _: &[f64], o: &mut [f64]| o.fill(0.0),
    };
    let fast = DenseOde {
        dim: 3,
        f: apply(fast_m),
        jac: move |_: f64, _: &[f64], o: &mut [f64]| o.copy_from_slice(&fast_m),
    };
    let comm = Comm::solo();
    let ctx = TaskContext::new(&comm, ReductionMode::default());
    let fast_int = Integrator::new(
        ButcherTable::esdirk3(),
        Tolerances::default(),
        Controller::default(),
        NewtonConfig::default(),
    )
    .map_err(err)?;
    let mut stepper = MriStepper::new(MriCoupling::kw3(), fast_int).map_err(err)?;
    let y0 = [1.0, 0.0, 0.5];
    let mut y = ManyVector::serial(y0.to_vec());
    let steps = (1.0 / h).round() as usize;
    for n in 0..steps {
        stepper
            .step(
                &ctx,
                &slow,
                &fast,
                n as f64 * h,
                h,
                FastMode::Fixed(h / MRI_RATIO),
                &mut y,
            )
            .map_err(err)?;
    }
    let m: Vec<f64> = slow_m.iter().zip(&fast_m).map(|(a, b)| a + b).collect();
    let exact = matvec(&expm(&m, 3), &y0);
    Ok(y.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

fn ac3_mri_order() -> Result<Outcome, String> {
    let hs = [0.1, 0.05, 0.025, 0.0125, 0.00625];
    let errs = hs
        .iter()
        .map(|&h| linear_multirate_error(h))
        .collect::<Result<Vec<_>, _>>()?;
    let p = observed_order(&hs, &errs).map_err(err)?;
    Ok(outcome(
        (MRI_ORDER.0..=MRI_ORDER.1).contains(&p),
        format!(
            "observed order {p:.3} in [{}, {}] at h_slow/h_fast = {MRI_RATIO}, errors {}",
            MRI_ORDER.0,
            MRI_ORDER.1,
            sci(&errs)
        ),
    ))
}

fn ac4_slow_limit() -> Result<Outcome, String> {
    let comm = Comm::solo();
    let ctx = TaskContext::new(&comm, ReductionMode::default());
    let coupling = MriCoupling::kw3();
    let table = coupling.slow_table();
    let fast_int = Integrator::new(
        ButcherTable::esdirk3(),
        Tolerances::default(),
        Controller::default(),
        NewtonConfig::default(),
    )
    .map_err(err)?;
    let mut stepper = MriStepper::new(coupling, fast_int).map_err(err)?;
    let slow = DenseOde {
        dim: 2,
        f: |t: f64, y: &[f64], o: &mut [f64]| {
            o[0] = -y[1] + 0.1 * t;
            o[1] = y[0] - 0.2 * y[1] * y[1];
        },
        jac: |_: f64, _: &[f64], o: &mut [f64]| o.fill(0.0),
    };
    let zero = DenseOde {
        dim: 2,
        f: |_: f64, _: &[f64], o: &mut [f64]| o.fill(0.0),
        jac: |_: f64, _: &[f64], o: &mut [f64]| o.fill(0.0),
    };
    let h = 0.01;
    let mut y_erk = ManyVector::serial(vec![1.0, 0.5]);
    let mut worst: f64 = 0.0;
    for n in 0..100 {
        let t = n as f64 * h;
        let mut y = y_erk.clone();
        stepper
            .step(&ctx, &slow, &zero, t, h, FastMode::Fixed(h), &mut y)
            .map_err(err)?;
        let next = erk_step(&ctx, &slow, &table, t, &y_erk, h, None).map_err(err)?.0;
        for ((a, b), y0) in y.iter().zip(next.iter()).zip(y_erk.iter()) {
            let ulp = a.abs().max(b.abs()).max(y0.abs()) * f64::EPSILON;
            worst = worst.max((a - b).abs() / ulp);
        }
        y_erk = next;
    }
    Ok(outcome(
        worst <= SLOW_LIMIT_ULPS,
        format!("max per-step difference {worst:.2} ulp (max {SLOW_LIMIT_ULPS}) over 100 steps"),
    ))
}

fn fixed_step_error(table: &ButcherTable, h: f64, exact: &[f64]) -> Result<f64, String> {
    let comm = Comm::solo();
    let ctx = TaskContext::new(&comm, ReductionMode::default());
    let p = van_der_pol();
    let tight = Tolerances {
        rtol: 1e-12,
        atol: 1e-14,
    };
    let mut integ =
        Integrator::new(table.clone(), tight, Controller::default(), NewtonConfig::default()).map_err(err)?;
    let mut y = ManyVector::serial(vec![2.0, 0.0]);
    integ.evolve_fixed(&ctx, &p, 0.0, 1.0, h, &mut y).map_err(err)?;
    Ok(y.iter().zip(exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

fn vdp(_: f64, y: &[f64], o: &mut [f64]) {
    o[0] = y[1];
    o[1] = 0.5 * (1.0 - y[0] * y[0]) * y[1] - y[0];
}

fn van_der_pol() -> DenseOde<fn(f64, &[f64], &mut [f64]), impl Fn(f64, &[f64], &mut [f64])> {
    DenseOde {
        dim: 2,
        f: vdp as fn(f64, &[f64], &mut [f64]),
        jac: |_: f64, y: &[f64], o: &mut [f64]| {
            o.copy_from_slice(&[0.0, 1.0, -y[0] * y[1] - 1.0, 0.5 * (1.0 - y[0] * y[0])]);
        },
    }
}

fn ac5_dirk() -> Result<Outcome, String> {
    let exact = reference_solve(vdp, 0.0, &[2.0, 0.0], &[1.0], 1e-12, 1e-14)
        .map_err(err)?
        .remove(0);
    let hs = [0.1, 0.05, 0.025, 0.0125];
    let mut notes = Vec::new();
    let mut pass = true;
    for table in [ButcherTable::esdirk3(), ButcherTable::sdirk4()] {
        let errs = hs
            .iter()
            .map(|&h| fixed_step_error(&table, h, &exact))
            .collect::<Result<Vec<_>, _>>()?;
        let p = observed_order(&hs, &errs).map_err(err)?;
        let ok = (p - table.order as f64).abs() <= DIRK_ORDER_SLACK;
        pass &= ok;
        notes.push(format!("{} order {p:.3} (nominal {})", table.name, table.order));
    }

    // single surrogate cell against a tight reference
    let net = Surrogate::default();
    let nf = NFLUID + N_C;
    let mut y0 = vec![0.0; nf];
    y0[0] = 1.0;
    y0[4] = 1.0;
    y0[NFLUID + mrflow::chemistry::H] = 1.0;
    y0[NFLUID + mrflow::chemistry::EG] = 1.0;
    let tf = 0.1;
    let h_max = 0.1 / 1000.0;
    let reference = reference_solve(|_, y, o| net.rhs(y, o), 0.0, &y0, &[tf], 1e-12, 1e-14)
        .map_err(err)?
        .remove(0);
    let comm = Comm::solo();
    let ctx = TaskContext::new(&comm, ReductionMode::default());
    let cell = DenseOde {
        dim: nf,
        f: |_: f64, y: &[f64], o: &mut [f64]| net.rhs(y, o),
        jac: |_: f64, y: &[f64], o: &mut [f64]| net.jacobian(y, o),
    };
    let ctrl = Controller {
        h_max,
        ..Controller::default()
    };
    let tol = Tolerances::default();
    let mut integ = Integrator::new(ButcherTable::esdirk3(), tol, ctrl, NewtonConfig::default())
        .map_err(err)?
        .with_trace();
    let mut y = ManyVector::serial(y0.clone());
    integ.evolve_adaptive(&ctx, &cell, 0.0, tf, &mut y).map_err(err)?;
    let wrms = (y
        .iter()
        .zip(&reference)
        .map(|(a, r)| ((a - r) / (tol.rtol * r.abs() + tol.atol)).powi(2))
        .sum::<f64>()
        / nf as f64)
        .sqrt();
    let trace = integ.trace.clone().unwrap_or_default();
    let within_cap = trace.iter().all(|&h| h <= h_max * (1.0 + 1e-12));
    // the final step may be truncated to land on tf
    let growth = trace[..trace.len().saturating_sub(1)]
        .windows(2)
        .map(|w| w[1] / w[0])
        .fold(0.0, f64::max);
    let ctrl_ok = ctrl.safety == 0.99 && ctrl.bias == 2.0 && ctrl.max_growth == 2.0 && ctrl.max_steps == 5000;
    let ok = wrms <= SURROGATE_WRMS_MAX && within_cap && growth <= 2.0 * (1.0 + 1e-12) && ctrl_ok;
    pass &= ok;
    notes.push(format!(
        "surrogate WRMS {wrms:.3} (max {SURROGATE_WRMS_MAX}) in {} steps, max growth {growth:.3}, h <= h_max {within_cap}, controller {ctrl_ok}",
        trace.len()
    ));
    Ok(outcome(pass, notes.join("; ")))
}

fn dense_solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
            .unwrap();
        if p != k {
            for c in 0..n {
                a.swap(k * n + c, p * n + c);
            }
            b.swap(k, p);
        }
        for r in k + 1..n {
            let l = a[r * n + k] / a[k * n + k];
            for c in k..n {
                a[r * n + c] -= l * a[k * n + c];
            }
            b[r] -= l * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|c| a[i * n + c] * x[c]).sum();
        x[i] = (b[i] - s) / a[i * n + i];
    }
    x
}

fn ac6_newton_and_lu() -> Result<Outcome, String> {
    // linear residual: one Newton iteration
    let comm = Comm::solo();
    let ctx = TaskContext::new(&comm, ReductionMode::default());
    let lin = DenseOde {
        dim: 3,
        f: |_: f64, y: &[f64], o: &mut [f64]| {
            o[0] = -3.0 * y[0] + y[1];
            o[1] = 0.5 * y[0] - 20.0 * y[1] + y[2];
            o[2] = -y[2];
        },
        jac: |_: f64, _: &[f64], o: &mut [f64]| o.copy_from_slice(&[-3.0, 1.0, 0.0, 0.5, -20.0, 1.0, 0.0, 0.0, -1.0]),
    };
    let known = ManyVector::serial(vec![1.0, 2.0, -1.0]);
    let mut z = known.clone();
    let mut fz = known.clone();
    let w = WeightVector::new(&known, 1e-5, 1e-9).map_err(err)?;
    let mut newton = NewtonSolver::new(NewtonConfig::default());
    let iters = newton
        .solve_stage(&ctx, &lin, 0.0, 0.25, &known, &mut z, &mut fz, &w)
        .map_err(err)?;

    // block LU against a dense elimination of the whole matrix
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let width = NFLUID + N_C;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let cells = 12;
        let blocks: Vec<Vec<f64>> = (0..cells)
            .map(|_| {
                let mut b: Vec<f64> = (0..width * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
                for d in 0..width {
                    b[d * width + d] += 3.0;
                }
                b
            })
            .collect();
        let a = CsrMatrix::from_dense_blocks(width, &blocks);
        let rhs: Vec<f64> = (0..cells * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut x = rhs.clone();
        block_lu_factor(&a, width).map_err(err)?.solve(&mut x).map_err(err)?;
        let oracle = dense_solve(a.to_dense(), rhs);
        let scale = oracle.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let diff = x.iter().zip(&oracle).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        worst = worst.max(diff / scale);
    }

    // factor and solve on two workers without any transport
    let traffic = run_in_process(2, |comm| {
        let before = comm.stats();
        let blocks = vec![vec![2.0, 1.0, 0.0, 3.0]; 50];
        let a = CsrMatrix::from_dense_blocks(2, &blocks);
        let mut x = vec![1.0; 100];
        block_lu_factor(&a, 2)?.solve(&mut x)?;
        let after = comm.stats();
        Ok((after.messages_sent - before.messages_sent) + (after.reduction_rounds - before.reduction_rounds))
    })
    .map_err(err)?;
    let silent = traffic.iter().all(|&t| t == 0);
    Ok(outcome(
        iters == 1 && worst <= LU_REL_TOL && silent,
        format!("linear stage converged in {iters} iteration(s); block LU vs dense max rel error {worst:.2e} (tol {LU_REL_TOL:.0e}); transport events during solves {traffic:?}"),
    ))
}

fn small_run(tasks: usize, cells: usize, unfused: bool) -> RunConfig {
    let mut c = RunConfig::default();
    c.tasks = tasks;
    c.seed = 11;
    c.mesh.cells = [cells; 3];
    c.time.t0 = 0.0;
    c.time.tf = 0.15;
    c.time.h_slow = 0.05;
    c.time.h_fast = 0.05 / 50.0;
    c.network.clumps = Some(40);
    if unfused {
        c.set_unfused();
    }
    c
}

fn ac7_reduction_batching() -> Result<Outcome, String> {
    let counts = run_in_process(2, |comm| {
        let specs = vec![VectorSpec::serial(8); 6];
        let mut out = Vec::new();
        for mode in [ReductionMode::default(), ReductionMode::unfused()] {
            let coll = Collective::new(comm, mode);
            let mut x = ManyVector::zeros(&specs);
            x.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64 - 1.0);
            let w = WeightVector::new(&x, 1e-5, 1e-9)?;
            let before = coll.ledger().global_reduction_count();
            coll.wrms_norm(&x, &w)?;
            out.push(coll.ledger().global_reduction_count() - before);
        }
        Ok(out)
    })
    .map_err(err)?;
    let counts_ok = counts.iter().all(|c| c == &vec![1, 6]);
    let fused = run_simulation(&small_run(2, 12, false)).map_err(err)?;
    let unfused = run_simulation(&small_run(2, 12, true)).map_err(err)?;
    let identical = fused
        .state
        .iter()
        .flatten()
        .zip(unfused.state.iter().flatten())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok(outcome(
        counts_ok && identical && unfused.reductions > fused.reductions,
        format!(
            "6-subvector WRMS reductions batched/unbatched {:?} (want [1, 6]); mini-run bit-identical {identical}, reductions fused {} vs unfused {}",
            counts[0], fused.reductions, unfused.reductions
        ),
    ))
}

fn ac8_units() -> Result<Outcome, String> {
    let (d, mo, e) = derived_units(3e70, 3.0857e30, 1e11).map_err(err)?;
    let close = |a: f64, b: f64| ((a - b) / b).abs() < UNITS_SIG4;
    Ok(outcome(
        close(d, 1.0211e-21) && close(mo, 3.1507e-2) && close(e, 9.7223e17),
        format!("density {d:.4e}, momentum {mo:.4e}, energy {e:.4e}"),
    ))
}

fn ac9_plan() -> Result<Outcome, String> {
    // (n, nodes, mesh, unknowns, h_slow, h_fast, tf)
    let table: [(usize, usize, [usize; 3], u64, f64, f64, f64); 7] = [
        (1, 2, [125, 100, 100], 18_750_000, 1.0e-1, 1.0e-4, 1.0),
        (2, 16, [250, 200, 200], 150_000_000, 5.0e-2, 5.0e-5, 0.5),
        (4, 128, [500, 400, 400], 1_200_000_000, 2.5e-2, 2.5e-5, 0.25),
        (
            6,
            432,
            [750, 600, 600],
            4_050_000_000,
            1.0 / 60.0,
            1.0 / 60_000.0,
            1.0 / 6.0,
        ),
        (8, 1024, [1000, 800, 800], 9_600_000_000, 1.25e-2, 1.25e-5, 0.125),
        (10, 2000, [1250, 1000, 1000], 18_750_000_000, 1.0e-2, 1.0e-5, 0.1),
        (
            12,
            3456,
            [1500, 1200, 1200],
            32_400_000_000,
            1.0 / 120.0,
            1.0 / 120_000.0,
            1.0 / 12.0,
        ),
    ];
    let mut bad = Vec::new();
    for (n, nodes, mesh, unknowns, hs, hf, tf) in table {
        let r = scaling_plan(n).map_err(err)?;
        let transient = tf.min(0.1);
        if r.nodes != nodes
            || r.mesh != mesh
            || r.unknowns != unknowns
            || r.h_slow != hs
            || r.h_fast != hf
            || r.tf != tf
            || r.t_transient != transient
        {
            bad.push(n);
        }
    }
    Ok(outcome(
        bad.is_empty(),
        if bad.is_empty() {
            "rows 1, 2, 4, 6, 8, 10, 12 match in every cell".into()
        } else {
            format!("mismatched rows {bad:?}")
        },
    ))
}

fn wrms_diff(a: &RunOutput, b: &RunOutput, cfg: &RunConfig) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (x, y) in a.state.iter().flatten().zip(b.state.iter().flatten()) {
        let w = cfg.tolerances.rtol * x.abs() + cfg.tolerances.atol;
        s += ((x - y) / w).powi(2);
        n += 1;
    }
    (s / n as f64).sqrt()
}

fn ac10_decomposition() -> Result<Outcome, String> {
    let cfg = small_run(1, 32, false);
    let one = run_simulation(&cfg).map_err(err)?;
    let eight = run_simulation(&small_run(8, 32, false)).map_err(err)?;
    let d = wrms_diff(&one, &eight, &cfg);
    let steps = one.stats.slow_steps();
    Ok(outcome(
        d <= DECOMP_WRMS_MAX && steps == 3,
        format!("32^3, {steps} slow steps through both phases: WRMS difference n_p=1 vs 8 is {d:.2e} (max {DECOMP_WRMS_MAX:.0e})"),
    ))
}

fn injected(prof: &Profiler, phase: Region, fast: u64, solve: u64, infra: u64) {
    let _p = prof.scope(phase);
    {
        let _f = prof.scope(Region::FFast);
        std::thread::sleep(Duration::from_millis(fast));
    }
    {
        let _s = prof.scope(Region::LSolve);
        std::thread::sleep(Duration::from_millis(solve));
    }
    std::thread::sleep(Duration::from_millis(infra));
}

fn ac11_profiler() -> Result<Outcome, String> {
    let run = run_simulation(&small_run(2, 12, false)).map_err(err)?;
    let p = &run.profile;
    let total = p.get(Region::Total).mean;
    let parts = p.get(Region::Setup).mean + p.get(Region::Transient).mean + p.get(Region::FixedStep).mean;
    let identity = (total - parts).abs() / total;
    let euler = p.get(Region::Euler).mean;
    let inner = p.get(Region::Mpi).mean + p.get(Region::Packing).mean + p.get(Region::FdWeno).mean;
    let nested = euler >= inner;

    let mut worst: f64 = 0.0;
    for (fast, solve, infra) in [(60, 30, 40), (20, 10, 80), (40, 40, 50)] {
        let prof = Profiler::new();
        injected(&prof, Region::Transient, fast, solve, infra);
        injected(&prof, Region::FixedStep, fast, solve, infra);
        let measured = prof.profile().sundials_time();
        let want = 2.0 * infra as f64 / 1e3;
        worst = worst.max((measured - want).abs() / want);
    }
    Ok(outcome(
        identity <= TOTAL_IDENTITY_REL && nested && worst <= SUNDIALS_TIME_REL,
        format!(
            "(n) vs (a)+(l)+(m) off by {:.3}% (max 1%); (f) >= (c)+(d)+(e) {nested} (mean (f) {euler:.3e}s, inner sum {inner:.3e}s); injected-delay infrastructure time max rel error {:.2}% (max 5%)",
            100.0 * identity,
            100.0 * worst
        ),
    ))
}

fn ac12_weak_scaling() -> Result<Outcome, String> {
    let mut profiles = Vec::new();
    let mut per_step = Vec::new();
    for unfused in [false, true] {
        for n_p in [1usize, 2, 4, 8] {
            if unfused && !(n_p == 1 || n_p == 8) {
                continue;
            }
            let layout = dims_create(n_p);
            let mut c = RunConfig::default();
            c.tasks = n_p;
            c.seed = 5;
            c.mesh.cells = [24 * layout[0], 24 * layout[1], 24 * layout[2]];
            c.time.t0 = 0.0;
            c.time.tf = 0.02;
            c.time.h_slow = 0.01;
            c.time.h_fast = 0.01 / 20.0;
            if unfused {
                c.set_unfused();
            }
            let out = run_simulation(&c).map_err(err)?;
            per_step.push((out.mode.clone(), n_p, out.profile.time_per_step().map_err(err)?));
            profiles.push((out.mode.clone(), out.profile));
        }
    }
    let report = emit_report(&profiles).map_err(err)?;
    let eff = report.efficiency["fused"].last().map(|e| e.1).unwrap_or(0.0);
    let rows = report.csv.lines().count() - 1;
    let filter_ok = Region::ALL.iter().filter(|&&r| r != Region::Total).all(|&r| {
        let big = profiles
            .iter()
            .any(|(_, p)| p.get(r).mean > PLOT_THRESHOLD * p.get(Region::Total).mean);
        big == report.plotted.contains(&r)
    });
    let shaped = rows == profiles.len() * Region::ALL.len() && report.efficiency.len() == 2 && filter_ok;
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let pass = eff >= WEAK_SCALING_MIN_EFF && shaped;
    Ok(Outcome {
        pass,
        detail: format!(
            "fused efficiency n_p=8 vs 1 is {eff:.3} (min {WEAK_SCALING_MIN_EFF}); report rows {rows}, paired modes {}, 0.5% filter consistent {filter_ok}, plotted {:?}; time per slow step {per_step:.3?}; host cores {cores}",
            report.efficiency.len(),
            report.plotted.iter().map(|r| r.letter()).collect::<String>()
        ),
        host_limited: !pass && shaped && cores < 8,
    })
}

fn main() {
    let checks: [(&str, &str, Check); 12] = [
        ("AC1", "WENO5 spatial order", ac1_weno_order),
        ("AC2", "conservation", ac2_conservation),
        ("AC3", "MRI order", ac3_mri_order),
        ("AC4", "slow-limit equivalence", ac4_slow_limit),
        ("AC5", "DIRK behavior", ac5_dirk),
        ("AC6", "Newton and linear solver", ac6_newton_and_lu),
        ("AC7", "reduction batching", ac7_reduction_batching),
        ("AC8", "units", ac8_units),
        ("AC9", "scaling plan", ac9_plan),
        ("AC10", "decomposition independence", ac10_decomposition),
        ("AC11", "profiler identities", ac11_profiler),
        ("AC12", "desk-scale weak scaling", ac12_weak_scaling),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut hard_failures = 0;
    for (id, name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let result = check().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let tag = match (result.pass, result.host_limited) {
            (true, _) => "PASS",
            (false, true) => "FAIL (host-limited)",
            (false, false) => "FAIL",
        };
        if !result.pass && !result.host_limited {
            hard_failures += 1;
        }
        println!(
            "{id} {tag} {name}: {} [{:.1}s]",
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if hard_failures > 0 {
        std::process::exit(1);
    }
}
