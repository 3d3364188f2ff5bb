//! Run configuration, the weak-scaling plan, the in-process run driver and
//! report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ark::{ButcherTable, Controller, Integrator, Tolerances};
use crate::chemistry::{
    project_gas_energy, ChemistryRhs, ClumpField, InitialConditions, Surrogate, UnitSystem, EG, GAMMA, N_C, RHO0, T0,
};
use crate::comm::{run_in_process, CommStats};
use crate::context::TaskContext;
use crate::euler::{EulerRhs, GasConstants, NFLUID};
use crate::mesh::{self, Boundaries, BoundaryCondition, Decomposition, UniformGrid};
use crate::mri::{evolve_two_phase, MriCoupling, MriStepper, TwoPhasePlan, TwoPhaseStats};
use crate::newton::NewtonConfig;
use crate::profiling::{aggregate, parallel_efficiency, AggregateProfile, Region, RegionStats};
use crate::vectors::exact::ExactSum;
use crate::vectors::snapshot::write_snapshot;
use crate::vectors::{ManyVector, ReductionMode};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub cells: [usize; 3],
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    /// Face order: x-left, x-right, y-left, y-right, z-left, z-right.
    pub bcs: [BoundaryCondition; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub t0: f64,
    pub tf: f64,
    pub h_slow: f64,
    pub h_fast: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Features {
    pub fused_ops: bool,
    pub batched_reductions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceConfig {
    pub rtol: f64,
    pub atol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub k1: f64,
    pub k2: f64,
    pub q: f64,
    /// Clump count; 10 per task when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clumps: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tasks: usize,
    pub seed: u64,
    pub mesh: MeshConfig,
    pub time: TimeConfig,
    pub features: Features,
    pub tolerances: ToleranceConfig,
    pub network: NetworkConfig,
    pub output: OutputConfig,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            cells: [16, 16, 16],
            lo: [0.0; 3],
            hi: [1.0; 3],
            bcs: [BoundaryCondition::Reflecting; 6],
        }
    }
}

impl Default for TimeConfig {
    fn default() -> Self {
        let row = scaling_plan(1).expect("row 1 exists");
        Self {
            t0: 0.0,
            tf: row.tf,
            h_slow: row.h_slow,
            h_fast: row.h_fast,
        }
    }
}

impl Default for Features {
    fn default() -> Self {
        Self {
            fused_ops: true,
            batched_reductions: true,
        }
    }
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        let tol = Tolerances::default();
        Self {
            rtol: tol.rtol,
            atol: tol.atol,
        }
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let s = Surrogate::default();
        Self {
            k1: s.k1,
            k2: s.k2,
            q: s.q,
            clumps: None,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tasks: 1,
            seed: 1,
            mesh: MeshConfig::default(),
            time: TimeConfig::default(),
            features: Features::default(),
            tolerances: ToleranceConfig::default(),
            network: NetworkConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        if self.tasks == 0 {
            return bad("tasks");
        }
        if self.mesh.cells.iter().any(|&n| n == 0) {
            return bad("mesh cell counts");
        }
        for d in 0..3 {
            if !(self.mesh.hi[d] > self.mesh.lo[d]) {
                return Err(Error::Config(format!("axis {d}: upper bound must exceed lower bound")));
            }
        }
        Boundaries::new(self.mesh.bcs)?;
        let t = &self.time;
        if !(t.tf > t.t0) {
            return Err(Error::Config("tf must exceed t0".into()));
        }
        if !(t.h_slow > 0.0) {
            return bad("h_slow");
        }
        if !(t.h_fast > 0.0) || t.h_fast > t.h_slow {
            return Err(Error::Config(
                "h_fast must be positive and no larger than h_slow".into(),
            ));
        }
        if !(self.tolerances.rtol > 0.0) || !(self.tolerances.atol > 0.0) {
            return bad("tolerances");
        }
        let n = &self.network;
        if !(n.k1 > 0.0) || !(n.k2 > 0.0) || !(n.q > 0.0) {
            return bad("network rate constants");
        }
        if n.clumps == Some(0) {
            return bad("clump count");
        }
        Ok(())
    }

    pub fn mode(&self) -> ReductionMode {
        ReductionMode {
            fused_ops: self.features.fused_ops,
            batched_reductions: self.features.batched_reductions,
        }
    }

    /// Turns both newer vector features off.
    pub fn set_unfused(&mut self) {
        self.features = Features {
            fused_ops: false,
            batched_reductions: false,
        };
    }

    pub fn mode_label(&self) -> &'static str {
        match (self.features.fused_ops, self.features.batched_reductions) {
            (true, true) => "fused",
            (false, false) => "unfused",
            (true, false) => "fused-unbatched",
            (false, true) => "unfused-batched",
        }
    }

    /// Mesh and time settings of a weak-scaling row.
    pub fn apply_plan(&mut self, row: &ScalingPlanRow) {
        self.mesh.cells = row.mesh;
        self.time.t0 = 0.0;
        self.time.tf = row.tf;
        self.time.h_slow = row.h_slow;
        self.time.h_fast = row.h_fast;
    }

    pub fn clump_count(&self) -> usize {
        self.network.clumps.unwrap_or(10 * self.tasks)
    }
}

/// One row of the weak-scaling plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingPlanRow {
    pub n: usize,
    pub nodes: usize,
    pub tasks: usize,
    pub mesh: [usize; 3],
    pub unknowns: u64,
    pub h_slow: f64,
    pub h_fast: f64,
    pub tf: f64,
    pub t_transient: f64,
}

pub const TASKS_PER_NODE: usize = 40;

pub fn scaling_plan(n: usize) -> Result<ScalingPlanRow> {
    if n == 0 {
        return Err(Error::Config("plan index must be at least 1".into()));
    }
    let mesh = [125 * n, 100 * n, 100 * n];
    let nodes = 2 * n * n * n;
    // each value is a single rounding of an exact ratio
    Ok(ScalingPlanRow {
        n,
        nodes,
        tasks: nodes * TASKS_PER_NODE,
        mesh,
        unknowns: mesh.iter().map(|&m| m as u64).product::<u64>() * (NFLUID + N_C) as u64,
        h_slow: 1.0 / (10 * n) as f64,
        h_fast: 1.0 / (10_000 * n) as f64,
        tf: 1.0 / n as f64,
        t_transient: if n < 10 { 0.1 } else { 1.0 / n as f64 },
    })
}

impl ScalingPlanRow {
    pub fn display(&self) -> String {
        format!(
            "n={} nodes={} tasks={} mesh={}x{}x{} unknowns={:.4e} h_slow={:.16e} h_fast={:.16e} tf={:.16e} transient_end={:.16e}",
            self.n,
            self.nodes,
            self.tasks,
            self.mesh[0],
            self.mesh[1],
            self.mesh[2],
            self.unknowns as f64,
            self.h_slow,
            self.h_fast,
            self.tf,
            self.t_transient
        )
    }
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Global state: five fluid fields then the cell-major chemistry block,
    /// all in global cell order.
    pub state: Vec<Vec<f64>>,
    pub profile: AggregateProfile,
    pub stats: TwoPhaseStats,
    /// Global reductions recorded by rank 0's solver ledger.
    pub reductions: u64,
    pub comm: Vec<CommStats>,
    pub mode: String,
    pub csv: String,
}

struct TaskResult {
    decomp: Decomposition,
    local: Vec<Vec<f64>>,
    profile: AggregateProfile,
    stats: TwoPhaseStats,
    reductions: u64,
    comm: CommStats,
}

/// Exact mean of the gas-energy slot over every cell of the global grid.
fn global_mean_gas_energy(ctx: &TaskContext, y: &ManyVector, global_cells: usize) -> Result<f64> {
    let mut local = ExactSum::new();
    for c in y.sub(NFLUID).chunks_exact(N_C) {
        local.add(c[EG]);
    }
    let sum = ctx.coll.exact_sums(&[local])?[0];
    Ok(sum / global_cells as f64)
}

fn run_task(cfg: &RunConfig, comm: &crate::comm::Comm) -> Result<TaskResult> {
    let ctx = TaskContext::new(comm, cfg.mode());
    let total = ctx.prof.scope(Region::Total);
    let setup = ctx.prof.scope(Region::Setup);
    let grid = UniformGrid::new(cfg.mesh.lo, cfg.mesh.hi, cfg.mesh.cells)?;
    let decomp = Decomposition::new(grid.clone(), Boundaries::new(cfg.mesh.bcs)?, comm.size(), comm.rank())?;
    let cells = decomp.local_cells();
    let euler = EulerRhs::new(decomp.clone(), GasConstants::from_gamma(GAMMA)?, N_C);
    let mut y = ManyVector::zeros(&euler.specs());
    let ic = InitialConditions {
        rho0: RHO0,
        t0: T0,
        gamma: GAMMA,
        clumps: ClumpField::generate(RHO0, grid.lo, grid.hi, grid.spacing(0), cfg.clump_count(), cfg.seed),
        units: UnitSystem::default(),
    };
    ic.fill(&decomp, &mut y)?;
    let e_ref = global_mean_gas_energy(&ctx, &y, grid.cells())?;
    if !(e_ref > 0.0 && e_ref.is_finite()) {
        return Err(Error::Domain(format!("mean gas energy {e_ref} is not positive")));
    }
    let fast = ChemistryRhs::new(
        Surrogate {
            k1: cfg.network.k1,
            k2: cfg.network.k2,
            q: cfg.network.q,
            e_ref,
        },
        cells,
    );
    let integrator = Integrator::new(
        ButcherTable::esdirk3(),
        Tolerances {
            rtol: cfg.tolerances.rtol,
            atol: cfg.tolerances.atol,
        },
        Controller::default(),
        NewtonConfig::default(),
    )?;
    let mut stepper = MriStepper::new(MriCoupling::kw3(), integrator)?;
    let plan = TwoPhasePlan::with_fast_step(cfg.time.t0, cfg.time.tf, cfg.time.h_slow, cfg.time.h_fast)?;
    drop(setup);
    let stats = evolve_two_phase(&ctx, &mut stepper, &euler, &fast, &plan, &mut y, &mut |y| {
        project_gas_energy(y, cells)
    })?;
    drop(total);
    let reductions = ctx.coll.ledger().global_reduction_count();
    let profile = aggregate(comm, &ctx.prof.profile(), stats.slow_steps() as usize)?;
    Ok(TaskResult {
        decomp,
        local: y.into_subs(),
        profile,
        stats,
        reductions,
        comm: comm.stats(),
    })
}

/// Places every task's owned cells at their global positions.
fn assemble_global(results: &[TaskResult]) -> Vec<Vec<f64>> {
    let decomps: Vec<Decomposition> = results.iter().map(|r| r.decomp.clone()).collect();
    (0..=NFLUID)
        .map(|s| {
            let blocks: Vec<Vec<f64>> = results.iter().map(|r| r.local[s].clone()).collect();
            mesh::assemble_global(&decomps, &blocks, if s == NFLUID { N_C } else { 1 })
        })
        .collect()
}

pub const PROFILE_HEADER: [&str; 7] = ["tasks", "mode", "slow_steps", "region", "min", "mean", "max"];

/// Per-region profile rows of one run.
pub fn profile_csv(profile: &AggregateProfile, mode: &str) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PROFILE_HEADER).map_err(csv_err)?;
    for r in Region::ALL {
        let s = profile.get(r);
        w.write_record([
            profile.tasks.to_string(),
            mode.to_string(),
            profile.slow_steps.to_string(),
            r.label().to_string(),
            format!("{:.16e}", s.min),
            format!("{:.16e}", s.mean),
            format!("{:.16e}", s.max),
        ])
        .map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
        .map_err(|e| Error::Format(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

/// Parses rows written by [`profile_csv`]; one file may hold several runs.
pub fn read_profile_csv(text: &str) -> Result<Vec<(String, AggregateProfile)>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let headers = rd.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != PROFILE_HEADER {
        return Err(Error::Format(format!("unexpected profile header {headers:?}")));
    }
    let mut runs: Vec<(String, AggregateProfile)> = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad number {:?} in column {}", &rec[i], PROFILE_HEADER[i])))
        };
        let tasks: usize = rec[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad task count {:?}", &rec[0])))?;
        let steps: usize = rec[2]
            .parse()
            .map_err(|_| Error::Format(format!("bad step count {:?}", &rec[2])))?;
        let mode = rec[1].to_string();
        let region =
            Region::from_label(&rec[3]).ok_or_else(|| Error::Format(format!("unknown region {:?}", &rec[3])))?;
        let stats = RegionStats {
            min: num(4)?,
            mean: num(5)?,
            max: num(6)?,
        };
        let fresh = match runs.last() {
            Some((m, p)) => *m != mode || p.tasks != tasks || p.slow_steps != steps || region == Region::ALL[0],
            None => true,
        };
        if fresh {
            runs.push((
                mode,
                AggregateProfile {
                    tasks,
                    slow_steps: steps,
                    regions: [RegionStats::default(); crate::profiling::NUM_REGIONS],
                },
            ));
        }
        runs.last_mut().unwrap().1.regions[region.index()] = stats;
    }
    if runs.is_empty() {
        return Err(Error::Format("profile file has no rows".into()));
    }
    Ok(runs)
}

/// Runs a full simulation with one in-process worker per task.
pub fn run_simulation(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let results = run_in_process(cfg.tasks, |comm| run_task(cfg, comm))?;
    let state = assemble_global(&results);
    let head = &results[0];
    let mode = cfg.mode_label().to_string();
    let csv = profile_csv(&head.profile, &mode)?;
    if let Some(p) = &cfg.output.csv {
        std::fs::write(p, &csv)?;
    }
    if let Some(p) = &cfg.output.snapshot {
        let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
        write_snapshot(&mut f, &state)?;
        std::io::Write::flush(&mut f)?;
    }
    Ok(RunOutput {
        state,
        profile: head.profile.clone(),
        stats: head.stats,
        reductions: head.reductions,
        comm: results.iter().map(|r| r.comm).collect(),
        mode,
        csv,
    })
}

pub const PLOT_THRESHOLD: f64 = 0.005;

pub const REPORT_HEADER: [&str; 7] = ["tasks", "region", "min", "mean", "max", "efficiency", "mode"];

#[derive(Debug, Clone)]
pub struct Report {
    pub csv: String,
    pub script: String,
    /// Regions drawn in the plot, in region order.
    pub plotted: Vec<Region>,
    /// Efficiency per mode, ordered by task count.
    pub efficiency: BTreeMap<String, Vec<(usize, f64)>>,
}

/// Scaling table and plot script from one or more run profiles.
pub fn emit_report(profiles: &[(String, AggregateProfile)]) -> Result<Report> {
    if profiles.is_empty() {
        return Err(Error::Config("report needs at least one profile".into()));
    }
    let mut by_mode: BTreeMap<String, Vec<&AggregateProfile>> = BTreeMap::new();
    for (m, p) in profiles {
        by_mode.entry(m.clone()).or_default().push(p);
    }
    for runs in by_mode.values_mut() {
        runs.sort_by_key(|p| p.tasks);
    }
    let plotted: Vec<Region> = Region::ALL
        .into_iter()
        .filter(|&r| r != Region::Total)
        .filter(|&r| {
            profiles.iter().any(|(_, p)| {
                let total = p.get(Region::Total).mean;
                total > 0.0 && p.get(r).mean > PLOT_THRESHOLD * total
            })
        })
        .collect();

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    let mut efficiency = BTreeMap::new();
    for (mode, runs) in &by_mode {
        let reference = runs[0];
        let mut effs = Vec::new();
        for p in runs {
            let e = parallel_efficiency(p, reference)?;
            effs.push((p.tasks, e));
            for r in Region::ALL {
                let s = p.get(r);
                w.write_record([
                    p.tasks.to_string(),
                    r.label().to_string(),
                    format!("{:.16e}", s.min),
                    format!("{:.16e}", s.mean),
                    format!("{:.16e}", s.max),
                    format!("{:.16e}", e),
                    mode.clone(),
                ])
                .map_err(csv_err)?;
            }
        }
        efficiency.insert(mode.clone(), effs);
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
        .map_err(|e| Error::Format(e.to_string()))?;
    let script = plot_script(&by_mode, &plotted);
    Ok(Report {
        csv,
        script,
        plotted,
        efficiency,
    })
}

fn plot_script(by_mode: &BTreeMap<String, Vec<&AggregateProfile>>, plotted: &[Region]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "import matplotlib.pyplot as plt");
    let _ = writeln!(
        s,
        "fig, axes = plt.subplots(1, {}, sharey=True, squeeze=False)",
        by_mode.len().max(1)
    );
    for (k, (mode, runs)) in by_mode.iter().enumerate() {
        let tasks: Vec<String> = runs.iter().map(|p| p.tasks.to_string()).collect();
        let _ = writeln!(s, "ax = axes[0][{k}]");
        let _ = writeln!(s, "tasks = [{}]", tasks.join(", "));
        for &r in plotted {
            let col = |f: fn(&RegionStats) -> f64| -> String {
                runs.iter()
                    .map(|p| format!("{:.16e}", f(&p.get(r))))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            let _ = writeln!(s, "mean = [{}]", col(|x| x.mean));
            let _ = writeln!(s, "lo = [{}]", col(|x| x.mean - x.min));
            let _ = writeln!(s, "hi = [{}]", col(|x| x.max - x.mean));
            let _ = writeln!(
                s,
                "ax.errorbar(tasks, mean, yerr=[lo, hi], marker='o', capsize=3, label='({}) {}')",
                r.letter(),
                r.label()
            );
        }
        let _ = writeln!(s, "ax.set_xscale('log')");
        let _ = writeln!(s, "ax.set_xlabel('tasks')");
        let _ = writeln!(s, "ax.set_title('{mode}')");
    }
    let _ = writeln!(s, "axes[0][0].set_ylabel('seconds')");
    let _ = writeln!(s, "axes[0][-1].legend(fontsize='small')");
    let _ = writeln!(s, "fig.tight_layout()");
    let _ = writeln!(s, "fig.savefig('scaling.png', dpi=150)");
    s
}
