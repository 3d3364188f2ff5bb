//! Composed vectors, fused kernels and collective reductions.
//!
//! A [`ManyVector`] is an ordered list of subvectors that behaves as one
//! long vector (subvector-major, then local index). Element-wise kernels are
//! purely local. Anything that needs a global scalar goes through a
//! [`Collective`], which owns the task's [`ReductionLedger`] and decides
//! whether partial results travel in one round or one round per subvector.

pub mod exact;
pub mod snapshot;

use std::cell::Cell;

use crate::comm::Comm;
use crate::{Error, Result};
pub use exact::ExactSum;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorKind {
    /// One slice of a field partitioned across tasks.
    DistributedField,
    /// A block owned entirely by one task.
    TaskLocalBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VectorSpec {
    pub kind: VectorKind,
    pub local_length: usize,
    pub global_length: usize,
}

impl VectorSpec {
    pub fn serial(len: usize) -> Self {
        Self {
            kind: VectorKind::TaskLocalBlock,
            local_length: len,
            global_length: len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManyVector {
    specs: Vec<VectorSpec>,
    subs: Vec<Vec<f64>>,
}

impl ManyVector {
    pub fn zeros(specs: &[VectorSpec]) -> Self {
        Self {
            specs: specs.to_vec(),
            subs: specs.iter().map(|s| vec![0.0; s.local_length]).collect(),
        }
    }

    pub fn from_parts(specs: Vec<VectorSpec>, subs: Vec<Vec<f64>>) -> Result<Self> {
        if specs.len() != subs.len() {
            return Err(Error::Conformance(format!(
                "{} specs for {} subvectors",
                specs.len(),
                subs.len()
            )));
        }
        for (i, (s, v)) in specs.iter().zip(&subs).enumerate() {
            if s.local_length != v.len() {
                return Err(Error::Conformance(format!(
                    "subvector {i} has {} entries, spec says {}",
                    v.len(),
                    s.local_length
                )));
            }
        }
        Ok(Self { specs, subs })
    }

    /// A single task-local subvector; convenient for ODE systems.
    pub fn serial(data: Vec<f64>) -> Self {
        Self {
            specs: vec![VectorSpec::serial(data.len())],
            subs: vec![data],
        }
    }

    pub fn specs(&self) -> &[VectorSpec] {
        &self.specs
    }

    pub fn num_subvectors(&self) -> usize {
        self.subs.len()
    }

    pub fn sub(&self, i: usize) -> &[f64] {
        &self.subs[i]
    }

    pub fn sub_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.subs[i]
    }

    pub fn subs(&self) -> &[Vec<f64>] {
        &self.subs
    }

    pub fn subs_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.subs
    }

    pub fn into_subs(self) -> Vec<Vec<f64>> {
        self.subs
    }

    pub fn local_len(&self) -> usize {
        self.subs.iter().map(Vec::len).sum()
    }

    pub fn global_len(&self) -> usize {
        self.specs.iter().map(|s| s.global_length).sum()
    }

    /// Local elements in subvector-major order.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.subs.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.subs.iter_mut().flatten()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn check_conformant(&self, other: &ManyVector) -> Result<()> {
        if self.specs != other.specs {
            return Err(Error::Conformance(format!(
                "specs differ: {:?} vs {:?}",
                self.specs, other.specs
            )));
        }
        Ok(())
    }

    pub fn fill(&mut self, c: f64) {
        self.iter_mut().for_each(|x| *x = c);
    }

    pub fn copy_from(&mut self, other: &ManyVector) -> Result<()> {
        self.check_conformant(other)?;
        for (a, b) in self.subs.iter_mut().zip(&other.subs) {
            a.copy_from_slice(b);
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        self.iter_mut().for_each(|x| *x *= c);
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &ManyVector) -> Result<()> {
        self.check_conformant(x)?;
        for (s, xs) in self.subs.iter_mut().zip(&x.subs) {
            for (si, xi) in s.iter_mut().zip(xs) {
                *si += a * xi;
            }
        }
        Ok(())
    }

    pub fn linear_sum(a: f64, x: &ManyVector, b: f64, y: &ManyVector) -> Result<ManyVector> {
        let mut out = x.clone();
        out.assign_linear_sum(a, x, b, y)?;
        Ok(out)
    }

    /// `self = a * x + b * y`
    pub fn assign_linear_sum(&mut self, a: f64, x: &ManyVector, b: f64, y: &ManyVector) -> Result<()> {
        x.check_conformant(y)?;
        self.check_conformant(x)?;
        for ((o, xs), ys) in self.subs.iter_mut().zip(&x.subs).zip(&y.subs) {
            for ((oi, xi), yi) in o.iter_mut().zip(xs).zip(ys) {
                *oi = a * xi + b * yi;
            }
        }
        Ok(())
    }

    pub fn fused_linear_combination(coeffs: &[f64], vecs: &[&ManyVector]) -> Result<ManyVector> {
        let first = vecs.first().ok_or(Error::EmptyCombination)?;
        let mut out = ManyVector::zeros(first.specs());
        out.assign_combination(coeffs, vecs, true)?;
        Ok(out)
    }

    /// `self = Σ_j coeffs[j] * vecs[j]`, accumulated left to right.
    ///
    /// With `fused` the sum is formed in one pass per element; otherwise it
    /// is built from successive [`ManyVector::assign_linear_sum`] calls. Both
    /// paths perform the same floating-point operations in the same order.
    pub fn assign_combination(&mut self, coeffs: &[f64], vecs: &[&ManyVector], fused: bool) -> Result<()> {
        if coeffs.is_empty() || vecs.is_empty() {
            return Err(Error::EmptyCombination);
        }
        if coeffs.len() != vecs.len() {
            return Err(Error::Conformance(format!(
                "{} coefficients for {} vectors",
                coeffs.len(),
                vecs.len()
            )));
        }
        for v in vecs {
            self.check_conformant(v)?;
        }
        if fused {
            let mut srcs: Vec<&[f64]> = Vec::with_capacity(vecs.len());
            for s in 0..self.subs.len() {
                let out = &mut self.subs[s][..];
                let n = out.len();
                srcs.clear();
                srcs.extend(vecs.iter().map(|v| &v.subs[s][..n]));
                match srcs[..] {
                    [a] => {
                        for (o, x) in out.iter_mut().zip(a) {
                            *o = coeffs[0] * x;
                        }
                    }
                    [a, b] => {
                        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                            *o = coeffs[0] * x + coeffs[1] * y;
                        }
                    }
                    [a, b, c] => {
                        for (((o, x), y), z) in out.iter_mut().zip(a).zip(b).zip(c) {
                            *o = coeffs[0] * x + coeffs[1] * y + coeffs[2] * z;
                        }
                    }
                    _ => {
                        for (i, o) in out.iter_mut().enumerate() {
                            let mut acc = coeffs[0] * srcs[0][i];
                            for (c, x) in coeffs[1..].iter().zip(&srcs[1..]) {
                                acc += c * x[i];
                            }
                            *o = acc;
                        }
                    }
                }
            }
        } else {
            for s in 0..self.subs.len() {
                for (o, x) in self.subs[s].iter_mut().zip(&vecs[0].subs[s]) {
                    *o = coeffs[0] * x;
                }
            }
            for j in 1..vecs.len() {
                for (o, x) in self.subs.iter_mut().zip(&vecs[j].subs) {
                    for (oi, xi) in o.iter_mut().zip(x) {
                        *oi = 1.0 * *oi + coeffs[j] * xi;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn max_abs_local(&self) -> f64 {
        self.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// Error weights `w_i = 1 / (rtol |y_i| + atol)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(ManyVector);

impl WeightVector {
    pub fn new(y: &ManyVector, rtol: f64, atol: f64) -> Result<Self> {
        if !(rtol >= 0.0 && atol > 0.0) {
            return Err(Error::Domain(format!("tolerances rtol={rtol}, atol={atol}")));
        }
        let mut w = y.clone();
        w.iter_mut().for_each(|x| *x = 1.0 / (rtol * x.abs() + atol));
        Ok(Self(w))
    }

    pub fn ones(like: &ManyVector) -> Self {
        let mut w = like.clone();
        w.fill(1.0);
        Self(w)
    }

    pub fn as_vector(&self) -> &ManyVector {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReductionMode {
    pub fused_ops: bool,
    pub batched_reductions: bool,
}

impl Default for ReductionMode {
    fn default() -> Self {
        Self {
            fused_ops: true,
            batched_reductions: true,
        }
    }
}

impl ReductionMode {
    pub fn unfused() -> Self {
        Self {
            fused_ops: false,
            batched_reductions: false,
        }
    }
}

#[derive(Debug, Default)]
pub struct ReductionLedger {
    global_reduction_count: Cell<u64>,
    local_phase_open: Cell<bool>,
}

impl ReductionLedger {
    pub fn global_reduction_count(&self) -> u64 {
        self.global_reduction_count.get()
    }

    pub fn local_phase_open(&self) -> bool {
        self.local_phase_open.get()
    }

    fn record_round(&self) {
        self.global_reduction_count.set(self.global_reduction_count.get() + 1);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Min,
    Max,
}

/// One task's contribution to a global reduction.
#[derive(Debug, Clone)]
pub enum Partial {
    Sum(ExactSum),
    Min(f64),
    Max(f64),
}

impl Partial {
    pub fn new(op: ReduceOp, local: f64) -> Self {
        match op {
            ReduceOp::Sum => Partial::Sum([local].into_iter().collect()),
            ReduceOp::Min => Partial::Min(local),
            ReduceOp::Max => Partial::Max(local),
        }
    }

    fn payload(&self) -> Vec<f64> {
        match self {
            Partial::Sum(s) => s.to_payload(),
            Partial::Min(v) | Partial::Max(v) => vec![*v],
        }
    }

    fn width(&self) -> usize {
        match self {
            Partial::Sum(_) => exact::LIMBS + 2,
            _ => 1,
        }
    }

    fn combine(&self, contributions: &[&[f64]]) -> Result<f64> {
        Ok(match self {
            Partial::Sum(_) => {
                let mut acc = ExactSum::new();
                for c in contributions {
                    acc.merge(&ExactSum::from_payload(c)?);
                }
                acc.value()
            }
            Partial::Min(_) => contributions.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min),
            Partial::Max(_) => contributions.iter().map(|c| c[0]).fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// A task's handle for collective vector operations.
pub struct Collective<'a> {
    comm: &'a Comm,
    mode: ReductionMode,
    ledger: ReductionLedger,
}

impl<'a> Collective<'a> {
    pub fn new(comm: &'a Comm, mode: ReductionMode) -> Self {
        Self {
            comm,
            mode,
            ledger: ReductionLedger::default(),
        }
    }

    pub fn comm(&self) -> &'a Comm {
        self.comm
    }

    pub fn mode(&self) -> ReductionMode {
        self.mode
    }

    pub fn ledger(&self) -> &ReductionLedger {
        &self.ledger
    }

    /// Starts a local phase: partials may now be computed and later finalized.
    pub fn open_local_phase(&self) -> Result<()> {
        if self.ledger.local_phase_open.get() {
            return Err(Error::Protocol("local reduction phase already open".into()));
        }
        self.ledger.local_phase_open.set(true);
        Ok(())
    }

    /// Combines every task's partials. Batched mode ships all of them in one
    /// round; otherwise each partial gets its own round.
    pub fn local_reduce_then_finalize(&self, partials: &[Partial]) -> Result<Vec<f64>> {
        if !self.ledger.local_phase_open.get() {
            return Err(Error::Protocol(
                "finalize called without an open local reduction phase".into(),
            ));
        }
        self.ledger.local_phase_open.set(false);
        if partials.is_empty() {
            return Ok(Vec::new());
        }
        if self.mode.batched_reductions {
            let payload: Vec<f64> = partials.iter().flat_map(|p| p.payload()).collect();
            let gathered = self.round(&payload)?;
            let mut offset = 0;
            partials
                .iter()
                .map(|p| {
                    let w = p.width();
                    let slices: Vec<&[f64]> = gathered.iter().map(|g| &g[offset..offset + w]).collect();
                    offset += w;
                    p.combine(&slices)
                })
                .collect()
        } else {
            partials
                .iter()
                .map(|p| {
                    let gathered = self.round(&p.payload())?;
                    let slices: Vec<&[f64]> = gathered.iter().map(Vec::as_slice).collect();
                    p.combine(&slices)
                })
                .collect()
        }
    }

    fn round(&self, payload: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.ledger.record_round();
        let gathered = self.comm.allgather(payload)?;
        if gathered.iter().any(|g| g.len() != payload.len()) {
            return Err(Error::Protocol("tasks contributed different reduction payloads".into()));
        }
        Ok(gathered)
    }

    fn reduce(&self, partials: &[Partial]) -> Result<Vec<f64>> {
        self.open_local_phase()?;
        self.local_reduce_then_finalize(partials)
    }

    pub fn global_sum(&self, local: f64) -> Result<f64> {
        Ok(self.reduce(&[Partial::new(ReduceOp::Sum, local)])?[0])
    }

    pub fn global_max(&self, local: f64) -> Result<f64> {
        Ok(self.reduce(&[Partial::new(ReduceOp::Max, local)])?[0])
    }

    pub fn global_min(&self, local: f64) -> Result<f64> {
        Ok(self.reduce(&[Partial::new(ReduceOp::Min, local)])?[0])
    }

    /// Exact global sums of several local sequences in one reduction step.
    pub fn exact_sums(&self, locals: &[ExactSum]) -> Result<Vec<f64>> {
        let partials: Vec<Partial> = locals.iter().cloned().map(Partial::Sum).collect();
        self.reduce(&partials)
    }

    fn dot_partials(x: &ManyVector, y: &ManyVector) -> Vec<ExactSum> {
        x.subs
            .iter()
            .zip(&y.subs)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).collect())
            .collect()
    }

    /// One partial per subvector unless a single batched round carries them
    /// anyway, in which case they are merged locally first.
    fn per_subvector(&self, parts: Vec<ExactSum>) -> Vec<Partial> {
        if self.mode.batched_reductions {
            let mut all = ExactSum::new();
            for p in &parts {
                all.merge(p);
            }
            vec![Partial::Sum(all)]
        } else {
            parts.into_iter().map(Partial::Sum).collect()
        }
    }

    pub fn dot(&self, x: &ManyVector, y: &ManyVector) -> Result<f64> {
        x.check_conformant(y)?;
        Ok(self.multi_dot(x, &[y])?[0])
    }

    /// `[<x, y_1>, ..., <x, y_k>]`. With fused ops this is one reduction step.
    pub fn multi_dot(&self, x: &ManyVector, ys: &[&ManyVector]) -> Result<Vec<f64>> {
        for y in ys {
            x.check_conformant(y)?;
        }
        if self.mode.fused_ops || ys.len() == 1 {
            let groups: Vec<Vec<ExactSum>> = ys.iter().map(|y| Self::dot_partials(x, y)).collect();
            self.finish_sum_groups(groups)
        } else {
            ys.iter()
                .map(|y| Ok(self.finish_sum_groups(vec![Self::dot_partials(x, y)])?[0]))
                .collect()
        }
    }

    fn wrms_partials(x: &ManyVector, w: &WeightVector) -> Vec<ExactSum> {
        x.subs
            .iter()
            .zip(&w.0.subs)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(p, q)| {
                        let t = p * q;
                        t * t
                    })
                    .collect()
            })
            .collect()
    }

    pub fn wrms_norm(&self, x: &ManyVector, w: &WeightVector) -> Result<f64> {
        Ok(self.wrms_norms(&[(x, w)])?[0])
    }

    /// Several WRMS norms computed in one reduction step.
    pub fn wrms_norms(&self, pairs: &[(&ManyVector, &WeightVector)]) -> Result<Vec<f64>> {
        let mut groups = Vec::with_capacity(pairs.len());
        for (x, w) in pairs {
            x.check_conformant(&w.0)?;
            groups.push(Self::wrms_partials(x, w));
        }
        let sums = self.finish_sum_groups(groups)?;
        Ok(sums
            .iter()
            .zip(pairs)
            .map(|(s, (x, _))| (s / x.global_len() as f64).sqrt())
            .collect())
    }

    /// Reduces groups of per-subvector exact sums, returning one total per group.
    ///
    /// Exactness makes the totals independent of how the rounds are split:
    /// unbatched mode rounds each subvector total separately, so the
    /// per-subvector values are re-summed from their exact payloads instead.
    fn finish_sum_groups(&self, groups: Vec<Vec<ExactSum>>) -> Result<Vec<f64>> {
        if self.mode.batched_reductions {
            let partials: Vec<Partial> = groups.into_iter().flat_map(|g| self.per_subvector(g)).collect();
            self.reduce(&partials)
        } else {
            let mut out = Vec::with_capacity(groups.len());
            for g in groups {
                let mut total = ExactSum::new();
                for part in g {
                    self.open_local_phase()?;
                    self.ledger.local_phase_open.set(false);
                    let gathered = self.round(&part.to_payload())?;
                    for c in &gathered {
                        total.merge(&ExactSum::from_payload(c)?);
                    }
                }
                out.push(total.value());
            }
            Ok(out)
        }
    }
}
