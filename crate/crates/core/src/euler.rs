//! Compressible Euler slow right-hand side.
//!
//! A cell state is `w = [rho, m_x, m_y, m_z, e_t, c_0 .. c_{n_c-1}]`. Face
//! fluxes come from component-wise WENO5 with local Lax-Friedrichs
//! splitting; the divergence is the usual telescoping difference of shared
//! face values, so interior fluxes cancel exactly in sums.

use std::cell::RefCell;

use crate::context::TaskContext;
use crate::mesh::{begin_exchange, Decomposition, FieldSet, HaloBuffer, HALO};
use crate::profiling::Region;
use crate::vectors::{ManyVector, VectorKind, VectorSpec};
use crate::{Error, Result};

pub const NFLUID: usize = 5;
pub const WENO_EPS: f64 = 1e-6;
pub const STENCIL: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GasConstants {
    /// Specific gas constant.
    pub r: f64,
    pub cv: f64,
    pub gamma: f64,
}

impl GasConstants {
    pub fn new(r: f64, cv: f64) -> Result<Self> {
        if !(r > 0.0 && cv > 0.0) {
            return Err(Error::Config(format!("gas constants R={r}, cv={cv}")));
        }
        Ok(Self {
            r,
            cv,
            gamma: 1.0 + r / cv,
        })
    }

    pub fn from_gamma(gamma: f64) -> Result<Self> {
        if !(gamma > 1.0) {
            return Err(Error::Config(format!("gamma = {gamma} must exceed 1")));
        }
        Ok(Self {
            r: gamma - 1.0,
            cv: 1.0,
            gamma,
        })
    }

    /// Temperature form: p = rho R T with e_t - |m|^2/(2 rho) = rho cv T.
    pub fn pressure_from_temperature(&self, rho: f64, t: f64) -> f64 {
        rho * self.r * t
    }

    pub fn temperature(&self, w: &[f64]) -> f64 {
        internal_energy(w) / (w[0] * self.cv)
    }
}

#[inline]
pub fn internal_energy(w: &[f64]) -> f64 {
    w[4] - (w[1] * w[1] + w[2] * w[2] + w[3] * w[3]) / (2.0 * w[0])
}

#[inline]
pub fn pressure(w: &[f64], gamma: f64, cell: usize) -> Result<f64> {
    let rho = w[0];
    let e = internal_energy(w);
    if !(rho > 0.0 && e > 0.0) {
        return Err(Error::EosDomain {
            cell,
            detail: format!("rho = {rho}, internal energy = {e}"),
        });
    }
    Ok((gamma - 1.0) * e)
}

#[inline]
pub fn sound_speed(w: &[f64], gamma: f64, cell: usize) -> Result<f64> {
    let p = pressure(w, gamma, cell)?;
    Ok((gamma * p / w[0]).sqrt())
}

/// Physical flux along direction `d`; returns `|v_d| + c`.
#[inline]
pub fn flux(w: &[f64], d: usize, gamma: f64, cell: usize, out: &mut [f64]) -> Result<f64> {
    let p = pressure(w, gamma, cell)?;
    let rho = w[0];
    let v = w[1 + d] / rho;
    out[0] = w[1 + d];
    out[1] = w[1] * v;
    out[2] = w[2] * v;
    out[3] = w[3] * v;
    out[1 + d] += p;
    out[4] = (w[4] + p) * v;
    for (o, c) in out[NFLUID..].iter_mut().zip(&w[NFLUID..]) {
        *o = c * v;
    }
    Ok(v.abs() + (gamma * p / rho).sqrt())
}

/// Fluxes of all stencil cells (position major); returns the stencil's
/// largest `|v_d| + c`.
pub fn stencil_fluxes(stencil: &[f64], nf: usize, d: usize, gamma: f64, fluxes: &mut [f64]) -> Result<f64> {
    let mut lambda = 0.0f64;
    for p in 0..STENCIL {
        let s = flux(
            &stencil[p * nf..(p + 1) * nf],
            d,
            gamma,
            p,
            &mut fluxes[p * nf..(p + 1) * nf],
        )?;
        lambda = lambda.max(s);
    }
    Ok(lambda)
}

/// Fifth-order reconstruction at the right edge of `v[2]` from `v[0..5]`.
#[inline]
pub fn weno5_reconstruct(v: [f64; 5]) -> f64 {
    let [v0, v1, v2, v3, v4] = v;
    let q0 = (2.0 * v0 - 7.0 * v1 + 11.0 * v2) / 6.0;
    let q1 = (-v1 + 5.0 * v2 + 2.0 * v3) / 6.0;
    let q2 = (2.0 * v2 + 5.0 * v3 - v4) / 6.0;
    let s = |a: f64| a * a;
    let b0 = 13.0 / 12.0 * s(v0 - 2.0 * v1 + v2) + 0.25 * s(v0 - 4.0 * v1 + 3.0 * v2);
    let b1 = 13.0 / 12.0 * s(v1 - 2.0 * v2 + v3) + 0.25 * s(v1 - v3);
    let b2 = 13.0 / 12.0 * s(v2 - 2.0 * v3 + v4) + 0.25 * s(3.0 * v2 - 4.0 * v3 + v4);
    let a0 = 0.1 / s(WENO_EPS + b0);
    let a1 = 0.6 / s(WENO_EPS + b1);
    let a2 = 0.3 / s(WENO_EPS + b2);
    (a0 * q0 + a1 * q1 + a2 * q2) / (a0 + a1 + a2)
}

/// Face flux between stencil positions 2 and 3 with splitting
/// `f± = (f ± lambda w) / 2`.
pub fn weno5_face_flux(stencil: &[f64], fluxes: &[f64], nf: usize, wave_speed: f64, out: &mut [f64]) {
    for c in 0..nf {
        let plus = |p: usize| 0.5 * (fluxes[p * nf + c] + wave_speed * stencil[p * nf + c]);
        let minus = |p: usize| 0.5 * (fluxes[p * nf + c] - wave_speed * stencil[p * nf + c]);
        let fp = weno5_reconstruct([plus(0), plus(1), plus(2), plus(3), plus(4)]);
        let fm = weno5_reconstruct([minus(5), minus(4), minus(3), minus(2), minus(1)]);
        out[c] = fp + fm;
    }
}

/// External forcing `G(x, t)`, written into one cell's field slice.
pub type Forcing = Box<dyn Fn(f64, [f64; 3], &mut [f64]) + Send + Sync>;

/// Face fluxes of one subdomain, one array per direction with
/// `ext[d] + 1` faces along `d`. Face `f` lies between cells `f - 1` and `f`.
pub struct FaceFluxes {
    pub nf: usize,
    pub dims: [[usize; 3]; 3],
    pub data: [Vec<f64>; 3],
    interior_done: bool,
    boundary_done: bool,
}

impl FaceFluxes {
    pub fn new(ext: [usize; 3], nf: usize) -> Self {
        let dims: [[usize; 3]; 3] = std::array::from_fn(|d| {
            let mut e = ext;
            e[d] += 1;
            e
        });
        Self {
            nf,
            dims,
            data: std::array::from_fn(|d| vec![0.0; dims[d].iter().product::<usize>() * nf]),
            interior_done: false,
            boundary_done: false,
        }
    }

    #[inline]
    pub fn offset(&self, d: usize, p: [usize; 3]) -> usize {
        let e = self.dims[d];
        ((p[2] * e[1] + p[1]) * e[0] + p[0]) * self.nf
    }

    pub fn reset(&mut self) {
        self.interior_done = false;
        self.boundary_done = false;
    }
}

/// Faces along one axis whose stencil stays inside the subdomain.
pub fn interior_faces(n: usize) -> std::ops::Range<usize> {
    if n >= 2 * HALO {
        HALO..n - HALO + 1
    } else {
        0..0
    }
}

fn boundary_faces(n: usize) -> Vec<usize> {
    let inner = interior_faces(n);
    (0..=n).filter(|f| !inner.contains(f)).collect()
}

pub struct EulerRhs {
    pub decomp: Decomposition,
    pub gas: GasConstants,
    pub nf: usize,
    pub forcing: Option<Forcing>,
    scratch: RefCell<Scratch>,
}

struct Scratch {
    faces: FaceFluxes,
    pencil: Vec<f64>,
    fluxes: Vec<f64>,
    rhs: Vec<f64>,
    gcell: Vec<f64>,
}

impl EulerRhs {
    pub fn new(decomp: Decomposition, gas: GasConstants, n_c: usize) -> Self {
        let nf = NFLUID + n_c;
        let cells = decomp.local_cells();
        let scratch = Scratch {
            faces: FaceFluxes::new(decomp.ext, nf),
            pencil: Vec::new(),
            fluxes: vec![0.0; STENCIL * nf],
            rhs: vec![0.0; cells * nf],
            gcell: vec![0.0; nf],
        };
        Self {
            decomp,
            gas,
            nf,
            forcing: None,
            scratch: RefCell::new(scratch),
        }
    }

    pub fn with_forcing(mut self, g: Forcing) -> Self {
        self.forcing = Some(g);
        self
    }

    pub fn n_c(&self) -> usize {
        self.nf - NFLUID
    }

    /// Subvector specs of the state: five fluid fields then the chemistry block.
    pub fn specs(&self) -> Vec<VectorSpec> {
        let cells = self.decomp.local_cells();
        let global = self.decomp.grid.cells();
        let mut specs = vec![
            VectorSpec {
                kind: VectorKind::DistributedField,
                local_length: cells,
                global_length: global,
            };
            NFLUID
        ];
        if self.n_c() > 0 {
            specs.push(VectorSpec {
                kind: VectorKind::TaskLocalBlock,
                local_length: cells * self.n_c(),
                global_length: global * self.n_c(),
            });
        }
        specs
    }

    #[inline]
    fn strides(&self) -> [usize; 3] {
        let e = self.decomp.ext;
        [1, e[0], e[0] * e[1]]
    }

    /// Packs the stencil of face `f` on the pencil through `base` (a cell
    /// with coordinate 0 along `d`) reading only local cells.
    #[inline]
    pub fn pack_interior(&self, fields: &FieldSet, d: usize, base: [usize; 3], f: usize, out: &mut [f64]) {
        let st = self.strides();
        let b = base[0] * st[0] + base[1] * st[1] + base[2] * st[2];
        let nf = self.nf;
        for p in 0..STENCIL {
            let cell = b + (f + p - HALO) * st[d];
            fields.cell_into(cell, &mut out[p * nf..(p + 1) * nf]);
        }
    }

    /// Same as [`EulerRhs::pack_interior`] but stencil cells outside the
    /// subdomain come from the halo buffer.
    pub fn pack_boundary(
        &self,
        fields: &FieldSet,
        halo: &HaloBuffer,
        d: usize,
        base: [usize; 3],
        f: usize,
        out: &mut [f64],
    ) {
        let ext = self.decomp.ext;
        let nf = self.nf;
        for p in 0..STENCIL {
            let q = f as isize + p as isize - HALO as isize;
            let slot = &mut out[p * nf..(p + 1) * nf];
            if q >= 0 && (q as usize) < ext[d] {
                let mut c = base;
                c[d] = q as usize;
                fields.cell_into(self.decomp.cell(c[0], c[1], c[2]), slot);
            } else {
                let mut c = [base[0] as isize, base[1] as isize, base[2] as isize];
                c[d] = q;
                for (fi, s) in slot.iter_mut().enumerate() {
                    *s = halo.ghost(ext, c, fi);
                }
            }
        }
    }

    fn transverse(&self, d: usize) -> Vec<[usize; 3]> {
        let e = self.decomp.ext;
        let (a, b) = match d {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut out = Vec::with_capacity(e[a] * e[b]);
        for ib in 0..e[b] {
            for ia in 0..e[a] {
                let mut c = [0; 3];
                c[a] = ia;
                c[b] = ib;
                out.push(c);
            }
        }
        out
    }

    fn compute_faces(
        &self,
        ctx: &TaskContext,
        s: &mut Scratch,
        d: usize,
        faces: &[usize],
        mut pack: impl FnMut([usize; 3], usize, &mut [f64]),
    ) -> Result<()> {
        let nf = self.nf;
        let width = STENCIL * nf;
        s.pencil.resize(faces.len() * width, 0.0);
        for base in self.transverse(d) {
            {
                let _t = ctx.prof.scope(Region::Packing);
                for (n, &f) in faces.iter().enumerate() {
                    pack(base, f, &mut s.pencil[n * width..(n + 1) * width]);
                }
            }
            let _t = ctx.prof.scope(Region::FdWeno);
            for (n, &f) in faces.iter().enumerate() {
                let stencil = &s.pencil[n * width..(n + 1) * width];
                let lambda = stencil_fluxes(stencil, nf, d, self.gas.gamma, &mut s.fluxes).map_err(|e| match e {
                    Error::EosDomain { cell: p, detail } => {
                        let mut c = base;
                        let q = f as isize + p as isize - HALO as isize;
                        c[d] = q.clamp(0, self.decomp.ext[d] as isize - 1) as usize;
                        Error::EosDomain {
                            cell: self.decomp.cell(c[0], c[1], c[2]),
                            detail: format!("{detail} (stencil offset {q} along axis {d})"),
                        }
                    }
                    other => other,
                })?;
                let mut p = base;
                p[d] = f;
                let off = s.faces.offset(d, p);
                weno5_face_flux(stencil, &s.fluxes, nf, lambda, &mut s.faces.data[d][off..off + nf]);
            }
        }
        Ok(())
    }

    /// Faces whose stencils need no halo data.
    fn interior_pass(&self, ctx: &TaskContext, s: &mut Scratch, fields: &FieldSet) -> Result<()> {
        for d in 0..3 {
            let faces: Vec<usize> = interior_faces(self.decomp.ext[d]).collect();
            self.compute_faces(ctx, s, d, &faces, |base, f, out| {
                self.pack_interior(fields, d, base, f, out)
            })?;
        }
        s.faces.interior_done = true;
        Ok(())
    }

    fn boundary_pass(&self, ctx: &TaskContext, s: &mut Scratch, fields: &FieldSet, halo: &HaloBuffer) -> Result<()> {
        for d in 0..3 {
            let faces = boundary_faces(self.decomp.ext[d]);
            self.compute_faces(ctx, s, d, &faces, |base, f, out| {
                self.pack_boundary(fields, halo, d, base, f, out)
            })?;
        }
        s.faces.boundary_done = true;
        Ok(())
    }

    /// `-div F` per cell, cell-major with `nf` values per cell.
    pub fn flux_divergence(&self, faces: &FaceFluxes, out: &mut [f64]) -> Result<()> {
        if !(faces.interior_done && faces.boundary_done) {
            return Err(Error::Sequencing(
                "flux divergence requested before all face fluxes were computed".into(),
            ));
        }
        let e = self.decomp.ext;
        let nf = self.nf;
        let h: [f64; 3] = std::array::from_fn(|d| self.decomp.grid.spacing(d));
        for k in 0..e[2] {
            for j in 0..e[1] {
                for i in 0..e[0] {
                    let cell = self.decomp.cell(i, j, k);
                    let lo: [usize; 3] = std::array::from_fn(|d| faces.offset(d, [i, j, k]));
                    let hi = [
                        faces.offset(0, [i + 1, j, k]),
                        faces.offset(1, [i, j + 1, k]),
                        faces.offset(2, [i, j, k + 1]),
                    ];
                    for c in 0..nf {
                        let dx = (faces.data[0][hi[0] + c] - faces.data[0][lo[0] + c]) / h[0];
                        let dy = (faces.data[1][hi[1] + c] - faces.data[1][lo[1] + c]) / h[1];
                        let dz = (faces.data[2][hi[2] + c] - faces.data[2][lo[2] + c]) / h[2];
                        out[cell * nf + c] = -(dx + dy + dz);
                    }
                }
            }
        }
        Ok(())
    }

    /// `-div F(y) + G(t)`: begin exchange, interior faces, finish exchange,
    /// boundary faces, divergence.
    pub fn f_slow(&self, ctx: &TaskContext, t: f64, y: &ManyVector, ydot: &mut ManyVector) -> Result<()> {
        let _g = ctx.prof.scope(Region::FSlow);
        let _f = ctx.prof.scope(Region::Euler);
        let cells = self.decomp.local_cells();
        let fields = FieldSet::from_vector(y, cells)?;
        if fields.num_fields() != self.nf {
            return Err(Error::Conformance(format!(
                "state carries {} fields, expected {}",
                fields.num_fields(),
                self.nf
            )));
        }
        let mut guard = self.scratch.borrow_mut();
        let s = &mut *guard;
        s.faces.reset();

        let mut exchange = {
            let _t = ctx.prof.scope(Region::Mpi);
            begin_exchange(ctx.comm(), &self.decomp, &fields)?
        };
        self.interior_pass(ctx, s, &fields)?;
        {
            let _t = ctx.prof.scope(Region::Mpi);
            exchange.finish(ctx.comm(), &self.decomp)?;
        }
        let halo = exchange.halos()?;
        self.boundary_pass(ctx, s, &fields, halo)?;

        let mut rhs = std::mem::take(&mut s.rhs);
        self.flux_divergence(&s.faces, &mut rhs)?;
        if let Some(g) = &self.forcing {
            let e = self.decomp.ext;
            for k in 0..e[2] {
                for j in 0..e[1] {
                    for i in 0..e[0] {
                        let cell = self.decomp.cell(i, j, k);
                        s.gcell.fill(0.0);
                        g(t, self.decomp.center(i, j, k), &mut s.gcell);
                        for (r, gv) in rhs[cell * self.nf..(cell + 1) * self.nf].iter_mut().zip(&s.gcell) {
                            *r += gv;
                        }
                    }
                }
            }
        }
        scatter_cells(&rhs, self.nf, cells, ydot)?;
        s.rhs = rhs;
        Ok(())
    }
}

impl crate::newton::Rhs for EulerRhs {
    fn eval(&self, ctx: &TaskContext, t: f64, y: &ManyVector, ydot: &mut ManyVector) -> Result<()> {
        self.f_slow(ctx, t, y, ydot)
    }
}

/// Writes cell-major values into a vector whose subvectors hold
/// consecutive fields.
pub fn scatter_cells(src: &[f64], nf: usize, cells: usize, dst: &mut ManyVector) -> Result<()> {
    let mut f0 = 0;
    for sub in dst.subs_mut() {
        let width = if cells == 0 { 0 } else { sub.len() / cells };
        for (cell, chunk) in sub.chunks_exact_mut(width.max(1)).enumerate().take(cells) {
            chunk.copy_from_slice(&src[cell * nf + f0..cell * nf + f0 + width]);
        }
        f0 += width;
    }
    if f0 != nf {
        return Err(Error::Conformance(format!(
            "destination holds {f0} fields, expected {nf}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{run_in_process, Comm};
    use crate::mesh::{Boundaries, BoundaryCondition, UniformGrid};
    use crate::vectors::ReductionMode;

    const G14: f64 = 1.4;

    #[test]
    fn pressure_examples() {
        // 1.4 - 1 is not exactly 0.4 in binary
        assert!((pressure(&[1.0, 0.0, 0.0, 0.0, 2.5], G14, 0).unwrap() - 1.0).abs() < 1e-15);
        let p = pressure(&[1.0, 1.0, 0.0, 0.0, 3.0], G14, 0).unwrap();
        assert!((p - 1.0).abs() < 1e-15);
        assert!(matches!(
            pressure(&[1.0, 3.0, 0.0, 0.0, 1.0], G14, 7),
            Err(Error::EosDomain { cell: 7, .. })
        ));
    }

    #[test]
    fn eos_forms_agree() {
        let gas = GasConstants::new(0.4, 1.0).unwrap();
        assert!((gas.gamma - 1.4).abs() < 1e-15);
        let w = [2.0, 0.3, -0.1, 0.2, 5.0];
        let t = gas.temperature(&w);
        let p1 = gas.pressure_from_temperature(w[0], t);
        let p2 = pressure(&w, gas.gamma, 0).unwrap();
        assert!((p1 - p2).abs() <= 1e-14 * p2);
    }

    #[test]
    fn sound_speed_examples() {
        let c = sound_speed(&[1.0, 0.0, 0.0, 0.0, 2.5], G14, 0).unwrap();
        assert!((c - 1.4f64.sqrt()).abs() < 1e-15);
        let c4 = sound_speed(&[1.0, 0.0, 0.0, 0.0, 10.0], G14, 0).unwrap();
        assert!((c4 - 2.0 * c).abs() < 1e-14);
        // gamma 5/3, p = 2, rho = 0.5 -> e = p / (gamma - 1) = 3
        let c = sound_speed(&[0.5, 0.0, 0.0, 0.0, 3.0], 5.0 / 3.0, 0).unwrap();
        assert!((c - (20.0f64 / 3.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn flux_examples() {
        let mut f = [0.0; 7];
        flux(&[1.0, 0.0, 0.0, 0.0, 2.5, 0.2, 0.3], 0, G14, 0, &mut f).unwrap();
        for (a, b) in f.iter().zip([0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        flux(&[1.0, 1.0, 0.0, 0.0, 3.0, 0.2, 0.3], 0, G14, 0, &mut f).unwrap();
        let want = [1.0, 2.0, 0.0, 0.0, 4.0, 0.2, 0.3];
        for (a, b) in f.iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
        let w = [1.3, 0.2, -0.5, 0.1, 4.0];
        let mut fx = [0.0; 5];
        let mut fy = [0.0; 5];
        flux(&w, 0, G14, 0, &mut fx).unwrap();
        flux(&[w[0], w[2], w[1], w[3], w[4]], 1, G14, 0, &mut fy).unwrap();
        assert_eq!([fx[0], fx[1], fx[2], fx[3], fx[4]], [fy[0], fy[2], fy[1], fy[3], fy[4]]);
    }

    #[test]
    fn reconstruction_reproduces_constants_and_lines() {
        assert_eq!(weno5_reconstruct([2.0; 5]), 2.0);
        // cell averages of a linear profile: face value at the right edge of cell 2
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((weno5_reconstruct(v) - 3.5).abs() < 1e-12);
    }

    #[test]
    fn constant_state_gives_physical_flux() {
        let w = [1.2, 0.3, 0.1, -0.2, 3.0, 0.7];
        let nf = 6;
        let stencil: Vec<f64> = (0..STENCIL).flat_map(|_| w).collect();
        let mut fl = vec![0.0; STENCIL * nf];
        let lam = stencil_fluxes(&stencil, nf, 0, G14, &mut fl).unwrap();
        let mut out = vec![0.0; nf];
        weno5_face_flux(&stencil, &fl, nf, lam, &mut out);
        let mut exact = vec![0.0; nf];
        flux(&w, 0, G14, 0, &mut exact).unwrap();
        for (a, b) in out.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    fn state(rhs: &EulerRhs, f: impl Fn([f64; 3]) -> Vec<f64>) -> ManyVector {
        let dc = &rhs.decomp;
        let mut y = ManyVector::zeros(&rhs.specs());
        let nf = rhs.nf;
        let mut cellwise = vec![0.0; dc.local_cells() * nf];
        for k in 0..dc.ext[2] {
            for j in 0..dc.ext[1] {
                for i in 0..dc.ext[0] {
                    let w = f(dc.center(i, j, k));
                    let c = dc.cell(i, j, k);
                    cellwise[c * nf..(c + 1) * nf].copy_from_slice(&w);
                }
            }
        }
        scatter_cells(&cellwise, nf, dc.local_cells(), &mut y).unwrap();
        y
    }

    fn smooth(x: [f64; 3]) -> Vec<f64> {
        let tau = std::f64::consts::TAU;
        let rho = 1.0 + 0.2 * (tau * x[0]).sin() * (tau * x[1]).cos();
        let u = [0.3 + 0.1 * (tau * x[2]).sin(), -0.2, 0.1 * (tau * x[0]).cos()];
        let p = 1.0 + 0.1 * (tau * (x[0] + x[2])).sin();
        let m: Vec<f64> = u.iter().map(|v| rho * v).collect();
        let et = p / 0.4 + 0.5 * rho * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
        vec![rho, m[0], m[1], m[2], et, 0.5 * rho, 0.25 * rho]
    }

    #[test]
    fn constant_periodic_state_has_zero_rhs() {
        let comm = Comm::solo();
        let ctx = TaskContext::new(&comm, ReductionMode::default());
        let dc = Decomposition::new(
            UniformGrid::unit_cube([6, 7, 8]),
            Boundaries::all(BoundaryCondition::Periodic),
            1,
            0,
        )
        .unwrap();
        let e = EulerRhs::new(dc, GasConstants::from_gamma(G14).unwrap(), 2);
        let y = state(&e, |_| vec![1.1, 0.2, -0.3, 0.4, 5.0, 0.3, 0.8]);
        let mut ydot = y.clone();
        e.f_slow(&ctx, 0.0, &y, &mut ydot).unwrap();
        assert!(ydot.iter().all(|&v| v.abs() < 1e-13), "{:?}", ydot.max_abs_local());
        let p = ctx.prof.profile();
        assert!(p.get(Region::Euler) >= p.get(Region::FdWeno) + p.get(Region::Packing) + p.get(Region::Mpi));
        assert!(p.get(Region::FSlow) >= p.get(Region::Euler));
    }

    #[test]
    fn static_gas_with_reflecting_walls_stays_at_rest() {
        let comm = Comm::solo();
        let ctx = TaskContext::new(&comm, ReductionMode::default());
        let dc = Decomposition::new(
            UniformGrid::unit_cube([6, 6, 6]),
            Boundaries::all(BoundaryCondition::Reflecting),
            1,
            0,
        )
        .unwrap();
        let e = EulerRhs::new(dc, GasConstants::from_gamma(G14).unwrap(), 1);
        let y = state(&e, |_| vec![0.7, 0.0, 0.0, 0.0, 2.0, 0.1]);
        let mut ydot = y.clone();
        e.f_slow(&ctx, 0.0, &y, &mut ydot).unwrap();
        assert!(ydot.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn periodic_divergence_sums_to_zero() {
        let comm = Comm::solo();
        let ctx = TaskContext::new(&comm, ReductionMode::default());
        let dc = Decomposition::new(
            UniformGrid::unit_cube([8, 8, 8]),
            Boundaries::all(BoundaryCondition::Periodic),
            1,
            0,
        )
        .unwrap();
        let e = EulerRhs::new(dc, GasConstants::from_gamma(G14).unwrap(), 2);
        let y = state(&e, smooth);
        let mut ydot = y.clone();
        e.f_slow(&ctx, 0.0, &y, &mut ydot).unwrap();
        for s in 0..ydot.num_subvectors() {
            let total: f64 = ydot.sub(s).iter().sum();
            let scale: f64 = ydot.sub(s).iter().map(|v| v.abs()).sum();
            assert!(total.abs() <= 1e-13 * scale.max(1.0), "sub {s}: {total}");
        }
    }

    #[test]
    fn divergence_before_fluxes_is_sequencing_error() {
        let dc = Decomposition::new(
            UniformGrid::unit_cube([4, 4, 4]),
            Boundaries::all(BoundaryCondition::Periodic),
            1,
            0,
        )
        .unwrap();
        let e = EulerRhs::new(dc, GasConstants::from_gamma(G14).unwrap(), 0);
        let faces = FaceFluxes::new([4, 4, 4], 5);
        let mut out = vec![0.0; 64 * 5];
        assert!(matches!(e.flux_divergence(&faces, &mut out), Err(Error::Sequencing(_))));
    }

    #[test]
    fn interior_and_boundary_packers_agree() {
        let comm = Comm::solo();
        let dc = Decomposition::new(
            UniformGrid::unit_cube([9, 7, 8]),
            Boundaries::all(BoundaryCondition::Periodic),
            1,
            0,
        )
        .unwrap();
        let e = EulerRhs::new(dc.clone(), GasConstants::from_gamma(G14).unwrap(), 2);
        let y = state(&e, smooth);
        let fields = FieldSet::from_vector(&y, dc.local_cells()).unwrap();
        let mut ex = begin_exchange(&comm, &dc, &fields).unwrap();
        ex.finish(&comm, &dc).unwrap();
        let halo = ex.halos().unwrap();
        let mut a = vec![0.0; STENCIL * e.nf];
        let mut b = a.clone();
        for d in 0..3 {
            for base in e.transverse(d) {
                for f in interior_faces(dc.ext[d]) {
                    e.pack_interior(&fields, d, base, f, &mut a);
                    e.pack_boundary(&fields, halo, d, base, f, &mut b);
                    assert_eq!(a, b);
                }
                // near the edges the boundary packer must match the wrapped global field
                for f in boundary_faces(dc.ext[d]) {
                    e.pack_boundary(&fields, halo, d, base, f, &mut b);
                    for p in 0..STENCIL {
                        let mut c = base;
                        let q = (f as isize + p as isize - 3).rem_euclid(dc.ext[d] as isize);
                        c[d] = q as usize;
                        let mut want = vec![0.0; e.nf];
                        fields.cell_into(dc.cell(c[0], c[1], c[2]), &mut want);
                        assert_eq!(&b[p * e.nf..(p + 1) * e.nf], &want[..]);
                    }
                }
            }
        }
    }

    fn gather_rhs(n_p: usize, layout: [usize; 3]) -> Vec<f64> {
        let grid = UniformGrid::unit_cube([12, 10, 8]);
        let nf = 7;
        let out = run_in_process(n_p, |comm| {
            let ctx = TaskContext::new(comm, ReductionMode::default());
            let dc = Decomposition::with_layout(
                grid.clone(),
                Boundaries::new([
                    BoundaryCondition::Reflecting,
                    BoundaryCondition::Neumann,
                    BoundaryCondition::Periodic,
                    BoundaryCondition::Periodic,
                    BoundaryCondition::Reflecting,
                    BoundaryCondition::Reflecting,
                ])?,
                layout,
                comm.rank(),
            )?;
            let e = EulerRhs::new(dc.clone(), GasConstants::from_gamma(G14)?, 2);
            let y = state(&e, smooth);
            let mut ydot = y.clone();
            e.f_slow(&ctx, 0.0, &y, &mut ydot)?;
            let mut cellwise = vec![0.0; dc.local_cells() * nf];
            let fs = FieldSet::from_vector(&ydot, dc.local_cells())?;
            for c in 0..dc.local_cells() {
                fs.cell_into(c, &mut cellwise[c * nf..(c + 1) * nf]);
            }
            Ok((dc, cellwise))
        })
        .unwrap();
        let (dcs, blocks): (Vec<_>, Vec<_>) = out.into_iter().unzip();
        crate::mesh::assemble_global(&dcs, &blocks, nf)
    }

    #[test]
    fn rhs_is_bitwise_decomposition_independent() {
        let serial = gather_rhs(1, [1, 1, 1]);
        for (n, layout) in [(2, [2, 1, 1]), (8, [2, 2, 2]), (6, [1, 3, 2])] {
            let par = gather_rhs(n, layout);
            assert!(
                serial.iter().zip(&par).all(|(a, b)| a.to_bits() == b.to_bits()),
                "layout {layout:?}"
            );
        }
    }
}
