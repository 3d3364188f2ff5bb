//! Species layout, unit system, clumpy initial conditions and the
//! surrogate reaction network.
//!
//! The solver state is dimensionless. Species slots hold mass densities in
//! density units; the `e_g` slot holds specific gas energy in units of
//! `(LengthUnits / TimeUnits)^2`, so that `e_t = rho e_g + |m|^2 / (2 rho)`
//! holds in scaled variables as well.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::cell::RefCell;

use crate::context::TaskContext;
use crate::euler::{scatter_cells, NFLUID};
use crate::mesh::Decomposition;
use crate::newton::{gather_cells, BlockJacobian, CsrMatrix, Rhs};
use crate::profiling::Region;
use crate::vectors::ManyVector;
use crate::{Error, Result};

pub const N_C: usize = 10;

pub const H: usize = 0;
pub const H_PLUS: usize = 1;
pub const H_MINUS: usize = 2;
pub const H2: usize = 3;
pub const H2_PLUS: usize = 4;
pub const HE: usize = 5;
pub const HE_PLUS: usize = 6;
pub const HE_PLUS2: usize = 7;
pub const ELECTRON: usize = 8;
pub const EG: usize = 9;

pub const SPECIES_NAMES: [&str; N_C] = ["H", "H+", "H-", "H2", "H2+", "He", "He+", "He++", "e-", "e_g"];

pub const RHO0: f64 = 1.67e-22;
pub const T0: f64 = 10.0;
pub const K_B: f64 = 1.3806488e-16;
pub const GAMMA: f64 = 5.0 / 3.0;
pub const NUMBER_DENSITY_PREFACTOR: f64 = 5.988e23;
pub const M_H: f64 = 1.00794;
pub const M_HE: f64 = 4.002602;
pub const M_H2: f64 = 2.01588;
pub const TRACE: f64 = 1e-40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitSystem {
    pub mass: f64,
    pub length: f64,
    pub time: f64,
}

impl Default for UnitSystem {
    fn default() -> Self {
        Self {
            mass: 3e70,
            length: 3.0857e30,
            time: 1e11,
        }
    }
}

impl UnitSystem {
    pub fn new(mass: f64, length: f64, time: f64) -> Result<Self> {
        if !(mass > 0.0 && length > 0.0 && time > 0.0) {
            return Err(Error::Config(format!(
                "units must be positive: {mass}, {length}, {time}"
            )));
        }
        Ok(Self { mass, length, time })
    }

    pub fn density(&self) -> f64 {
        self.mass / (self.length * self.length * self.length)
    }

    pub fn velocity(&self) -> f64 {
        self.length / self.time
    }

    pub fn momentum(&self) -> f64 {
        self.density() * self.velocity()
    }

    pub fn energy(&self) -> f64 {
        self.density() * self.velocity() * self.velocity()
    }

    /// Scale of one cell value per field slot: fluid fields then species.
    pub fn field_scale(&self, field: usize) -> f64 {
        match field {
            0 => self.density(),
            1..=3 => self.momentum(),
            4 => self.energy(),
            f if f == NFLUID + EG => self.velocity() * self.velocity(),
            _ => self.density(),
        }
    }

    pub fn nondimensionalize(&self, w: &mut [f64]) {
        for (f, x) in w.iter_mut().enumerate() {
            *x /= self.field_scale(f);
        }
    }

    pub fn redimensionalize(&self, w: &mut [f64]) {
        for (f, x) in w.iter_mut().enumerate() {
            *x *= self.field_scale(f);
        }
    }
}

/// `(DensityUnits, MomentumUnits, EnergyUnits)`.
pub fn derived_units(mass: f64, length: f64, time: f64) -> Result<(f64, f64, f64)> {
    let u = UnitSystem::new(mass, length, time)?;
    Ok((u.density(), u.momentum(), u.energy()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clump {
    pub center: [f64; 3],
    pub radius: f64,
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClumpField {
    pub rho0: f64,
    pub center: [f64; 3],
    pub clumps: Vec<Clump>,
}

impl ClumpField {
    /// Draws `count` clumps from a seeded ChaCha8 stream. Every task calls
    /// this with the same arguments and gets the same list.
    pub fn generate(rho0: f64, lo: [f64; 3], hi: [f64; 3], dx: f64, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clumps = (0..count)
            .map(|_| {
                let center = std::array::from_fn(|d| rng.gen_range(lo[d]..hi[d]));
                let radius = rng.gen_range(3.0 * dx..=6.0 * dx);
                let size = rng.gen_range(0.0..=5.0);
                Clump { center, radius, size }
            })
            .collect();
        Self {
            rho0,
            center: std::array::from_fn(|d| 0.5 * (lo[d] + hi[d])),
            clumps,
        }
    }

    pub fn density(&self, x: [f64; 3]) -> f64 {
        let mut s = 1.0 + 5.0 * (-20.0 * dist2(x, self.center)).exp();
        for c in &self.clumps {
            s += c.size * (-2.0 * dist2(x, c.center) / (c.radius * c.radius)).exp();
        }
        self.rho0 * s
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum()
}

pub fn temperature_field(x: [f64; 3], center: [f64; 3], t0: f64) -> f64 {
    t0 * (1.0 + 5.0 * (-20.0 * dist2(x, center)).exp())
}

/// Number density from species mass densities.
pub fn number_density(c: &[f64]) -> f64 {
    NUMBER_DENSITY_PREFACTOR
        * (c[H2] / M_H2
            + c[H2_PLUS] / M_H2
            + c[H_PLUS] / M_H
            + c[H_MINUS] / M_H
            + c[HE_PLUS] / M_HE
            + c[HE_PLUS2] / M_HE
            + c[HE] / M_HE
            + c[H] / M_H)
}

/// Species slots and specific gas energy in CGS for density `rho` and temperature `t`.
pub fn species_init(rho: f64, t: f64, gamma: f64) -> Result<[f64; N_C]> {
    if !(rho > 0.0) {
        return Err(Error::Domain(format!("density {rho} must be positive")));
    }
    let mut c = [0.0; N_C];
    c[H2] = 1e-12 * rho;
    c[H2_PLUS] = TRACE * rho;
    c[H_PLUS] = TRACE * rho;
    c[H_MINUS] = TRACE * rho;
    c[HE_PLUS] = TRACE * rho;
    c[HE_PLUS2] = TRACE * rho;
    c[HE] = 0.24 * rho - c[HE_PLUS] - c[HE_PLUS2];
    c[H] = rho - c[H2] - c[H2_PLUS] - c[H_PLUS] - c[H_MINUS] - c[HE_PLUS] - c[HE_PLUS2] - c[HE];
    c[ELECTRON] = c[H_PLUS] / M_H + c[HE_PLUS] / M_HE + 2.0 * c[HE_PLUS2] / M_HE - c[H_MINUS] / M_H + c[H2_PLUS] / M_H2;
    c[EG] = K_B * t * number_density(&c) / (rho * (gamma - 1.0));
    Ok(c)
}

/// Sum of the eight mass-carrying species.
pub fn mass_species_total(c: &[f64]) -> f64 {
    c[H] + c[H_PLUS] + c[H_MINUS] + c[H2] + c[H2_PLUS] + c[HE] + c[HE_PLUS] + c[HE_PLUS2]
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialConditions {
    pub rho0: f64,
    pub t0: f64,
    pub gamma: f64,
    pub clumps: ClumpField,
    pub units: UnitSystem,
}

impl InitialConditions {
    /// Dimensionless cell state at a dimensionless position.
    pub fn cell(&self, x: [f64; 3]) -> Result<[f64; NFLUID + N_C]> {
        let rho = self.clumps.density(x);
        let t = temperature_field(x, self.clumps.center, self.t0);
        let c = species_init(rho, t, self.gamma)?;
        let mut w = [0.0; NFLUID + N_C];
        w[0] = rho;
        w[4] = rho * c[EG];
        w[NFLUID..].copy_from_slice(&c);
        self.units.nondimensionalize(&mut w);
        Ok(w)
    }

    pub fn fill(&self, decomp: &Decomposition, y: &mut ManyVector) -> Result<()> {
        let e = decomp.ext;
        let mut cell = vec![0.0; decomp.local_cells() * (NFLUID + N_C)];
        for k in 0..e[2] {
            for j in 0..e[1] {
                for i in 0..e[0] {
                    let l = decomp.cell(i, j, k);
                    let w = self.cell(decomp.center(i, j, k))?;
                    cell[l * w.len()..(l + 1) * w.len()].copy_from_slice(&w);
                }
            }
        }
        scatter_cells(&cell, NFLUID + N_C, decomp.local_cells(), y)
    }
}

/// Cell-local reaction source over the full cell state `[fluid, species]`.
pub trait ReactionNetwork: Send + Sync {
    fn n_species(&self) -> usize;

    /// Time derivative of every field of one cell.
    fn rhs(&self, w: &[f64], out: &mut [f64]);

    /// Dense row-major `nf x nf` Jacobian of [`ReactionNetwork::rhs`];
    /// entries outside [`ReactionNetwork::pattern`] are zero.
    fn jacobian(&self, w: &[f64], block: &mut [f64]);

    /// Structurally nonzero `(row, col)` pairs, row-major order.
    fn pattern(&self) -> Vec<(usize, usize)>;
}

/// Hydrogen-molecule formation surrogate. Released energy is counted in
/// units of `e_ref`, so `q` is the heat per unit of formed H2 relative to
/// the reference gas energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surrogate {
    pub k1: f64,
    pub k2: f64,
    pub q: f64,
    pub e_ref: f64,
}

impl Default for Surrogate {
    fn default() -> Self {
        Self {
            k1: 1e2,
            k2: 1e4,
            q: 1e-2,
            e_ref: 1.0,
        }
    }
}

const RH: usize = NFLUID + H;
const RH2: usize = NFLUID + H2;
const REG: usize = NFLUID + EG;
const RET: usize = 4;
const RRHO: usize = 0;

impl Surrogate {
    /// Net formation rate `k1 H^2 - k2 H2 theta`.
    #[inline]
    pub fn net_rate(&self, w: &[f64]) -> f64 {
        let theta = w[REG] / self.e_ref;
        self.k1 * w[RH] * w[RH] - self.k2 * w[RH2] * theta
    }
}

impl ReactionNetwork for Surrogate {
    fn n_species(&self) -> usize {
        N_C
    }

    fn rhs(&self, w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        let r = self.net_rate(w);
        let qe = self.q * self.e_ref;
        out[RH] = -2.0 * r;
        out[RH2] = r;
        out[REG] = qe * r / w[RRHO];
        // total energy gains what the gas energy gains, per unit volume
        out[RET] = qe * r;
    }

    fn jacobian(&self, w: &[f64], block: &mut [f64]) {
        let nf = NFLUID + N_C;
        block.iter_mut().for_each(|x| *x = 0.0);
        let rho = w[RRHO];
        let theta = w[REG] / self.e_ref;
        let dr_dh = 2.0 * self.k1 * w[RH];
        let dr_dh2 = -self.k2 * theta;
        let dr_deg = -self.k2 * w[RH2] / self.e_ref;
        let r = self.net_rate(w);
        let qe = self.q * self.e_ref;
        let mut set = |row: usize, col: usize, v: f64| block[row * nf + col] = v;
        set(RH, RH, -2.0 * dr_dh);
        set(RH, RH2, -2.0 * dr_dh2);
        set(RH, REG, -2.0 * dr_deg);
        set(RH2, RH, dr_dh);
        set(RH2, RH2, dr_dh2);
        set(RH2, REG, dr_deg);
        set(REG, RRHO, -qe * r / (rho * rho));
        set(REG, RH, qe * dr_dh / rho);
        set(REG, RH2, qe * dr_dh2 / rho);
        set(REG, REG, qe * dr_deg / rho);
        set(RET, RH, qe * dr_dh);
        set(RET, RH2, qe * dr_dh2);
        set(RET, REG, qe * dr_deg);
    }

    fn pattern(&self) -> Vec<(usize, usize)> {
        let mut p = Vec::new();
        for row in [RET, RH, RH2, REG] {
            if row == REG {
                p.push((row, RRHO));
            }
            for col in [RH, RH2, REG] {
                p.push((row, col));
            }
        }
        p.sort_unstable();
        p
    }
}

/// Cell-local reactions over a fluid state, the fast right-hand side.
pub struct ChemistryRhs<N> {
    pub net: N,
    cells: usize,
    nf: usize,
    scratch: RefCell<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

impl<N: ReactionNetwork> ChemistryRhs<N> {
    pub fn new(net: N, cells: usize) -> Self {
        let nf = NFLUID + net.n_species();
        Self {
            net,
            cells,
            nf,
            scratch: RefCell::new((Vec::new(), vec![0.0; cells * nf], vec![0.0; nf * nf])),
        }
    }
}

impl<N: ReactionNetwork> Rhs for ChemistryRhs<N> {
    fn eval(&self, ctx: &TaskContext, _t: f64, y: &ManyVector, ydot: &mut ManyVector) -> Result<()> {
        let _t = ctx.prof.scope(Region::FFast);
        let mut guard = self.scratch.borrow_mut();
        let (cells_in, out, _) = &mut *guard;
        gather_cells(y, self.cells, cells_in);
        if cells_in.len() != self.cells * self.nf {
            return Err(Error::Conformance(format!(
                "state holds {} values per cell, network needs {}",
                cells_in.len() / self.cells.max(1),
                self.nf
            )));
        }
        for (w, o) in cells_in.chunks_exact(self.nf).zip(out.chunks_exact_mut(self.nf)) {
            self.net.rhs(w, o);
        }
        scatter_cells(out, self.nf, self.cells, ydot)
    }
}

impl<N: ReactionNetwork> BlockJacobian for ChemistryRhs<N> {
    fn cells(&self) -> usize {
        self.cells
    }

    fn pattern(&self) -> CsrMatrix {
        CsrMatrix::block_pattern(self.cells, self.nf, &self.net.pattern()).expect("network pattern fits its block")
    }

    fn jacobian(&self, _ctx: &TaskContext, _t: f64, y: &ManyVector, jac: &mut CsrMatrix) -> Result<()> {
        let mut guard = self.scratch.borrow_mut();
        let (cells_in, _, block) = &mut *guard;
        gather_cells(y, self.cells, cells_in);
        let nf = self.nf;
        for (cell, w) in cells_in.chunks_exact(nf).enumerate() {
            self.net.jacobian(w, block);
            for r in 0..nf {
                let row = cell * nf + r;
                for k in jac.row_ptr[row]..jac.row_ptr[row + 1] {
                    jac.vals[k] = block[r * nf + (jac.col_idx[k] - cell * nf)];
                }
            }
        }
        Ok(())
    }
}

/// Resets the `e_g` slot of every cell from the fluid energy.
pub fn project_gas_energy(y: &mut ManyVector, cells: usize) -> Result<()> {
    if y.num_subvectors() != NFLUID + 1 || y.sub(NFLUID).len() != cells * N_C {
        return Err(Error::Conformance("state has no chemistry block".into()));
    }
    let subs = y.subs_mut();
    let (fluid, chem) = subs.split_at_mut(NFLUID);
    for c in 0..cells {
        let w = [fluid[0][c], fluid[1][c], fluid[2][c], fluid[3][c], fluid[4][c]];
        chem[0][c * N_C + EG] = crate::euler::internal_energy(&w) / w[0];
    }
    Ok(())
}
