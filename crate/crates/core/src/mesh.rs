//! Uniform grid, task decomposition and 3-deep halo exchange.
//!
//! Faces are numbered `0 = -x, 1 = +x, 2 = -y, 3 = +y, 4 = -z, 5 = +z`.
//! Fields are addressed by a flat index over a [`FieldSet`]; the halo code
//! only assumes that, when reflecting walls are used, fields `1, 2, 3` are
//! the x, y, z momenta.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::comm::Comm;
use crate::vectors::ManyVector;
use crate::{Error, Result};

/// Ghost layers on each side of a subdomain.
pub const HALO: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct UniformGrid {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub n: [usize; 3],
}

impl UniformGrid {
    pub fn new(lo: [f64; 3], hi: [f64; 3], n: [usize; 3]) -> Result<Self> {
        for d in 0..3 {
            if n[d] == 0 || !(hi[d] > lo[d]) {
                return Err(Error::Config(format!(
                    "axis {d}: need n > 0 and hi > lo, got n={}, [{}, {}]",
                    n[d], lo[d], hi[d]
                )));
            }
        }
        Ok(Self { lo, hi, n })
    }

    pub fn unit_cube(n: [usize; 3]) -> Self {
        Self::new([0.0; 3], [1.0; 3], n).unwrap()
    }

    pub fn spacing(&self, d: usize) -> f64 {
        (self.hi[d] - self.lo[d]) / self.n[d] as f64
    }

    pub fn center(&self, d: usize, i: usize) -> f64 {
        self.lo[d] + (i as f64 + 0.5) * self.spacing(d)
    }

    pub fn cells(&self) -> usize {
        self.n.iter().product()
    }
}

/// Factors `n_p` into three factors as close to equal as possible,
/// largest first.
pub fn dims_create(n_p: usize) -> [usize; 3] {
    let n_p = n_p.max(1);
    let mut best = [n_p, 1, 1];
    for a in 1..=n_p {
        if n_p % a != 0 {
            continue;
        }
        for b in 1..=a {
            if (n_p / a) % b != 0 {
                continue;
            }
            let c = n_p / a / b;
            if c > b {
                continue;
            }
            let cand = [a, b, c];
            // ratio a/c compared exactly as a*c' vs a'*c
            let better = cand[0] * best[2] < best[0] * cand[2]
                || (cand[0] * best[2] == best[0] * cand[2]
                    && (cand[0] < best[0] || (cand[0] == best[0] && cand > best)));
            if better {
                best = cand;
            }
        }
    }
    best
}

/// Cell range owned by coordinate `coord` of `parts` along an axis of `n` cells.
pub fn axis_extent(n: usize, parts: usize, coord: usize) -> Result<Range<usize>> {
    if coord >= parts {
        return Err(Error::Range(format!("coordinate {coord} outside layout of {parts}")));
    }
    let base = n / parts;
    let rem = n % parts;
    let start = coord * base + coord.min(rem);
    let len = base + usize::from(coord < rem);
    Ok(start..start + len)
}

pub fn local_extents(grid: &UniformGrid, layout: [usize; 3], coords: [usize; 3]) -> Result<[Range<usize>; 3]> {
    Ok([
        axis_extent(grid.n[0], layout[0], coords[0])?,
        axis_extent(grid.n[1], layout[1], coords[1])?,
        axis_extent(grid.n[2], layout[2], coords[2])?,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryCondition {
    Periodic,
    Neumann,
    Dirichlet,
    Reflecting,
}

/// One condition per face, in face order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Boundaries(pub [BoundaryCondition; 6]);

impl Boundaries {
    pub fn new(faces: [BoundaryCondition; 6]) -> Result<Self> {
        for d in 0..3 {
            let (l, r) = (faces[2 * d], faces[2 * d + 1]);
            if (l == BoundaryCondition::Periodic) != (r == BoundaryCondition::Periodic) {
                return Err(Error::Config(format!(
                    "axis {d}: periodic on one face requires periodic on the other"
                )));
            }
        }
        Ok(Self(faces))
    }

    pub fn all(bc: BoundaryCondition) -> Self {
        Self([bc; 6])
    }

    pub fn periodic(&self, d: usize) -> bool {
        self.0[2 * d] == BoundaryCondition::Periodic
    }
}

pub fn face_dir(face: usize) -> usize {
    face / 2
}

pub fn opposite(face: usize) -> usize {
    face ^ 1
}

/// The view of the global decomposition held by one task.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub grid: UniformGrid,
    pub bcs: Boundaries,
    pub n_p: usize,
    pub layout: [usize; 3],
    pub rank: usize,
    pub coords: [usize; 3],
    /// Global index of the first owned cell along each axis.
    pub start: [usize; 3],
    /// Owned cells along each axis.
    pub ext: [usize; 3],
    /// Neighbor rank per face; `None` on a physical boundary.
    pub neighbors: [Option<usize>; 6],
}

impl Decomposition {
    pub fn new(grid: UniformGrid, bcs: Boundaries, n_p: usize, rank: usize) -> Result<Self> {
        Self::with_layout(grid, bcs, dims_create(n_p), rank)
    }

    pub fn with_layout(grid: UniformGrid, bcs: Boundaries, layout: [usize; 3], rank: usize) -> Result<Self> {
        let n_p = layout.iter().product();
        if rank >= n_p {
            return Err(Error::Range(format!("rank {rank} outside {n_p} tasks")));
        }
        let coords = Self::coords_of(layout, rank);
        let ranges = local_extents(&grid, layout, coords)?;
        let mut start = [0; 3];
        let mut ext = [0; 3];
        for d in 0..3 {
            start[d] = ranges[d].start;
            ext[d] = ranges[d].len();
            if grid.n[d] / layout[d] < HALO {
                return Err(Error::Config(format!(
                    "axis {d}: {} cells over {} tasks leaves a subdomain thinner than {HALO} cells",
                    grid.n[d], layout[d]
                )));
            }
        }
        let mut neighbors = [None; 6];
        for face in 0..6 {
            let d = face_dir(face);
            let mut c = coords;
            let upper = face % 2 == 1;
            if upper && c[d] + 1 < layout[d] {
                c[d] += 1;
            } else if !upper && c[d] > 0 {
                c[d] -= 1;
            } else if bcs.periodic(d) {
                c[d] = if upper { 0 } else { layout[d] - 1 };
            } else {
                continue;
            }
            neighbors[face] = Some(Self::rank_of(layout, c));
        }
        Ok(Self {
            grid,
            bcs,
            n_p,
            layout,
            rank,
            coords,
            start,
            ext,
            neighbors,
        })
    }

    /// Row-major rank order, last axis fastest.
    pub fn rank_of(layout: [usize; 3], c: [usize; 3]) -> usize {
        (c[0] * layout[1] + c[1]) * layout[2] + c[2]
    }

    pub fn coords_of(layout: [usize; 3], rank: usize) -> [usize; 3] {
        [
            rank / (layout[1] * layout[2]),
            (rank / layout[2]) % layout[1],
            rank % layout[2],
        ]
    }

    /// The same decomposition seen from another rank.
    pub fn for_rank(&self, rank: usize) -> Result<Self> {
        Self::with_layout(self.grid.clone(), self.bcs, self.layout, rank)
    }

    pub fn local_cells(&self) -> usize {
        self.ext.iter().product()
    }

    /// Local cell index, x fastest.
    pub fn cell(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.ext[1] + j) * self.ext[0] + i
    }

    pub fn global_cell(&self, i: usize, j: usize, k: usize) -> usize {
        let n = self.grid.n;
        ((self.start[2] + k) * n[1] + self.start[1] + j) * n[0] + self.start[0] + i
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.grid.center(0, self.start[0] + i),
            self.grid.center(1, self.start[1] + j),
            self.grid.center(2, self.start[2] + k),
        ]
    }

    /// Extents of the halo slab on `face`.
    pub fn slab_dims(&self, face: usize) -> [usize; 3] {
        let mut dims = self.ext;
        dims[face_dir(face)] = HALO;
        dims
    }
}

/// Read access to per-cell fields stored as consecutive subvectors.
///
/// Subvector `s` has `width_s` fields per cell, stored cell-major.
pub struct FieldSet<'a> {
    parts: Vec<(&'a [f64], usize)>,
    /// Flat field index to (part, offset within cell).
    map: Vec<(usize, usize)>,
}

impl<'a> FieldSet<'a> {
    pub fn new(parts: Vec<(&'a [f64], usize)>, cells: usize) -> Result<Self> {
        let mut map = Vec::new();
        for (p, (data, width)) in parts.iter().enumerate() {
            if data.len() != cells * width {
                return Err(Error::Conformance(format!(
                    "field block {p} has {} entries for {cells} cells x {width}",
                    data.len()
                )));
            }
            map.extend((0..*width).map(|o| (p, o)));
        }
        Ok(Self { parts, map })
    }

    pub fn from_vector(v: &'a ManyVector, cells: usize) -> Result<Self> {
        let parts = v
            .subs()
            .iter()
            .map(|s| (s.as_slice(), if cells == 0 { 0 } else { s.len() / cells }))
            .collect();
        Self::new(parts, cells)
    }

    pub fn num_fields(&self) -> usize {
        self.map.len()
    }

    #[inline]
    pub fn get(&self, cell: usize, field: usize) -> f64 {
        let (p, o) = self.map[field];
        let (data, width) = self.parts[p];
        data[cell * width + o]
    }

    /// Copies all fields of `cell` into `out`.
    #[inline]
    pub fn cell_into(&self, cell: usize, out: &mut [f64]) {
        let mut f = 0;
        for &(data, width) in &self.parts {
            out[f..f + width].copy_from_slice(&data[cell * width..(cell + 1) * width]);
            f += width;
        }
    }
}

/// Ghost slabs for all six faces. Within a slab the face-normal coordinate
/// is `depth - 1` (depth 1 touches the face), cells are x fastest and the
/// fields of a cell are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct HaloBuffer {
    pub nf: usize,
    pub dims: [[usize; 3]; 6],
    pub slabs: [Vec<f64>; 6],
}

impl HaloBuffer {
    pub fn new(decomp: &Decomposition, nf: usize) -> Self {
        let dims: [[usize; 3]; 6] = std::array::from_fn(|f| decomp.slab_dims(f));
        Self {
            nf,
            dims,
            slabs: std::array::from_fn(|f| vec![0.0; dims[f].iter().product::<usize>() * nf]),
        }
    }

    /// Offset of the first field of a slab cell given slab coordinates.
    #[inline]
    pub fn offset(&self, face: usize, c: [usize; 3]) -> usize {
        let d = self.dims[face];
        ((c[2] * d[1] + c[1]) * d[0] + c[0]) * self.nf
    }

    /// Ghost value at local coordinates that lie just outside one face.
    /// Exactly one coordinate may be out of range.
    #[inline]
    pub fn ghost(&self, ext: [usize; 3], p: [isize; 3], field: usize) -> f64 {
        let mut c = [0usize; 3];
        let mut face = usize::MAX;
        for d in 0..3 {
            if p[d] < 0 {
                face = 2 * d;
                c[d] = (-p[d] - 1) as usize;
            } else if p[d] as usize >= ext[d] {
                face = 2 * d + 1;
                c[d] = p[d] as usize - ext[d];
            } else {
                c[d] = p[d] as usize;
            }
        }
        debug_assert!(face != usize::MAX, "coordinates are inside the subdomain");
        self.slabs[face][self.offset(face, c) + field]
    }
}

/// Packs the `HALO` interior layers next to `face` in slab layout.
pub fn pack_face(decomp: &Decomposition, fields: &FieldSet, face: usize) -> Vec<f64> {
    let d = face_dir(face);
    let dims = decomp.slab_dims(face);
    let nf = fields.num_fields();
    let mut out = vec![0.0; dims.iter().product::<usize>() * nf];
    let mut pos = 0;
    for c2 in 0..dims[2] {
        for c1 in 0..dims[1] {
            for c0 in 0..dims[0] {
                let mut p = [c0, c1, c2];
                // slab normal coordinate is depth - 1
                p[d] = if face % 2 == 0 { p[d] } else { decomp.ext[d] - 1 - p[d] };
                let cell = decomp.cell(p[0], p[1], p[2]);
                fields.cell_into(cell, &mut out[pos..pos + nf]);
                pos += nf;
            }
        }
    }
    out
}

/// Fills a physical-boundary ghost slab from the mirrored interior slab.
pub fn apply_boundary(face: usize, bc: BoundaryCondition, mirror: &[f64], nf: usize) -> Result<Vec<f64>> {
    let d = face_dir(face);
    match bc {
        BoundaryCondition::Periodic => Err(Error::BoundaryMisuse(format!(
            "face {face} is periodic; periodic faces are filled by exchange"
        ))),
        BoundaryCondition::Neumann => Ok(mirror.to_vec()),
        BoundaryCondition::Dirichlet => Ok(mirror.iter().map(|x| -x).collect()),
        BoundaryCondition::Reflecting => {
            if nf < 4 {
                return Err(Error::BoundaryMisuse(format!(
                    "reflecting wall needs momentum fields, only {nf} fields present"
                )));
            }
            let mut out = mirror.to_vec();
            for cell in out.chunks_exact_mut(nf) {
                cell[1 + d] = -cell[1 + d];
            }
            Ok(out)
        }
    }
}

const HEADER: usize = 1 + 2 + 12;

fn encode(face: usize, nf: usize, dims: [usize; 3], payload: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + payload.len() * 8);
    out.push(face as u8);
    out.extend_from_slice(&(nf as u16).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in payload {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn decode(msg: &[u8], face: usize, nf: usize, dims: [usize; 3]) -> Result<Vec<f64>> {
    if msg.len() < HEADER {
        return Err(Error::Communication("short halo message".into()));
    }
    let got_nf = u16::from_le_bytes([msg[1], msg[2]]) as usize;
    let got: Vec<usize> = (0..3)
        .map(|i| u32::from_le_bytes(msg[3 + 4 * i..7 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let expected = dims.iter().product::<usize>() * nf;
    if msg[0] as usize != face || got_nf != nf || got != dims || msg.len() != HEADER + 8 * expected {
        return Err(Error::Communication(format!(
            "halo message mismatch: face {} fields {got_nf} dims {got:?}, expected face {face} fields {nf} dims {dims:?}",
            msg[0]
        )));
    }
    Ok(msg[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

enum ExchangeState {
    Pending { mirrors: [Option<Vec<f64>>; 6] },
    Finished,
}

/// An in-flight halo exchange.
pub struct Exchange {
    state: ExchangeState,
    halo: HaloBuffer,
}

/// Sends this task's boundary layers to every neighbor and returns a
/// handle; halo data becomes readable after [`Exchange::finish`].
pub fn begin_exchange(comm: &Comm, decomp: &Decomposition, fields: &FieldSet) -> Result<Exchange> {
    let nf = fields.num_fields();
    let mut mirrors: [Option<Vec<f64>>; 6] = Default::default();
    for (face, mirror) in mirrors.iter_mut().enumerate() {
        let slab = pack_face(decomp, fields, face);
        match decomp.neighbors[face] {
            Some(dest) => comm.send_halo(dest, encode(face, nf, decomp.slab_dims(face), &slab))?,
            None => *mirror = Some(slab),
        }
    }
    Ok(Exchange {
        state: ExchangeState::Pending { mirrors },
        halo: HaloBuffer::new(decomp, nf),
    })
}

impl Exchange {
    pub fn is_finished(&self) -> bool {
        matches!(self.state, ExchangeState::Finished)
    }

    /// Waits for every neighbor message and fills physical-boundary faces.
    pub fn finish(&mut self, comm: &Comm, decomp: &Decomposition) -> Result<()> {
        let mirrors = match std::mem::replace(&mut self.state, ExchangeState::Finished) {
            ExchangeState::Pending { mirrors } => mirrors,
            ExchangeState::Finished => return Err(Error::Protocol("exchange already finished".into())),
        };
        let nf = self.halo.nf;
        for (face, mirror) in mirrors.into_iter().enumerate() {
            let dims = self.halo.dims[face];
            self.halo.slabs[face] = match (decomp.neighbors[face], mirror) {
                (Some(src), _) => {
                    // the neighbor packed its opposite face
                    let msg = comm.recv_halo(src, opposite(face) as u8)?;
                    decode(&msg, opposite(face), nf, dims)?
                }
                (None, Some(m)) => apply_boundary(face, decomp.bcs.0[face], &m, nf)?,
                (None, None) => unreachable!("physical face without mirror data"),
            };
        }
        Ok(())
    }

    pub fn halos(&self) -> Result<&HaloBuffer> {
        match self.state {
            ExchangeState::Finished => Ok(&self.halo),
            ExchangeState::Pending { .. } => Err(Error::NotReady),
        }
    }

    pub fn into_halos(self) -> Result<HaloBuffer> {
        match self.state {
            ExchangeState::Finished => Ok(self.halo),
            ExchangeState::Pending { .. } => Err(Error::NotReady),
        }
    }
}

/// Assembles per-task blocks of cell-major data (`width` values per cell)
/// into global x-fastest order.
pub fn assemble_global(decomps: &[Decomposition], blocks: &[Vec<f64>], width: usize) -> Vec<f64> {
    let Some(first) = decomps.first() else {
        return Vec::new();
    };
    let mut out = vec![0.0; first.grid.cells() * width];
    for (dc, block) in decomps.iter().zip(blocks) {
        for k in 0..dc.ext[2] {
            for j in 0..dc.ext[1] {
                for i in 0..dc.ext[0] {
                    let l = dc.cell(i, j, k) * width;
                    let g = dc.global_cell(i, j, k) * width;
                    out[g..g + width].copy_from_slice(&block[l..l + width]);
                }
            }
        }
    }
    out
}
