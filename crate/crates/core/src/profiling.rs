//! Wall-clock timer regions and their cross-task aggregation.

use std::cell::Cell;
use std::time::{Duration, Instant};

use crate::comm::Comm;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Setup,
    Io,
    Mpi,
    Packing,
    FdWeno,
    Euler,
    FSlow,
    FFast,
    JFast,
    LSetup,
    LSolve,
    Transient,
    FixedStep,
    Total,
}

pub const NUM_REGIONS: usize = 14;

impl Region {
    pub const ALL: [Region; NUM_REGIONS] = [
        Region::Setup,
        Region::Io,
        Region::Mpi,
        Region::Packing,
        Region::FdWeno,
        Region::Euler,
        Region::FSlow,
        Region::FFast,
        Region::JFast,
        Region::LSetup,
        Region::LSolve,
        Region::Transient,
        Region::FixedStep,
        Region::Total,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Region letter `a` through `n`.
    pub fn letter(self) -> char {
        (b'a' + self as u8) as char
    }

    pub fn label(self) -> &'static str {
        match self {
            Region::Setup => "setup",
            Region::Io => "io",
            Region::Mpi => "mpi",
            Region::Packing => "packing",
            Region::FdWeno => "fd-weno",
            Region::Euler => "euler",
            Region::FSlow => "fslow",
            Region::FFast => "ffast",
            Region::JFast => "jfast",
            Region::LSetup => "lsetup",
            Region::LSolve => "lsolve",
            Region::Transient => "transient",
            Region::FixedStep => "fixed-step",
            Region::Total => "total",
        }
    }

    pub fn from_label(s: &str) -> Option<Region> {
        Region::ALL.into_iter().find(|r| r.label() == s)
    }
}

/// Per-task accumulated seconds.
#[derive(Debug, Default)]
pub struct Profiler {
    acc: [Cell<f64>; NUM_REGIONS],
}

pub struct Scope<'a> {
    profiler: &'a Profiler,
    region: Region,
    start: Instant,
}

impl Drop for Scope<'_> {
    fn drop(&mut self) {
        self.profiler.add(self.region, self.start.elapsed());
    }
}

impl Profiler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn scope(&self, region: Region) -> Scope<'_> {
        Scope {
            profiler: self,
            region,
            start: Instant::now(),
        }
    }

    pub fn add(&self, region: Region, d: Duration) {
        let c = &self.acc[region.index()];
        c.set(c.get() + d.as_secs_f64());
    }

    pub fn profile(&self) -> TimerProfile {
        TimerProfile {
            seconds: std::array::from_fn(|i| self.acc[i].get()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TimerProfile {
    pub seconds: [f64; NUM_REGIONS],
}

impl TimerProfile {
    pub fn get(&self, r: Region) -> f64 {
        self.seconds[r.index()]
    }

    /// (l + m) - (g + h + i + j + k)
    pub fn sundials_time(&self) -> f64 {
        use Region::*;
        (self.get(Transient) + self.get(FixedStep))
            - (self.get(FSlow) + self.get(FFast) + self.get(JFast) + self.get(LSetup) + self.get(LSolve))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegionStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateProfile {
    pub tasks: usize,
    pub slow_steps: usize,
    pub regions: [RegionStats; NUM_REGIONS],
}

impl AggregateProfile {
    pub fn from_profiles(profiles: &[TimerProfile], slow_steps: usize) -> Self {
        let n = profiles.len().max(1) as f64;
        let regions = std::array::from_fn(|i| {
            let vals = profiles.iter().map(|p| p.seconds[i]);
            RegionStats {
                min: vals.clone().fold(f64::INFINITY, f64::min),
                mean: vals.clone().sum::<f64>() / n,
                max: vals.fold(f64::NEG_INFINITY, f64::max),
            }
        });
        Self {
            tasks: profiles.len(),
            slow_steps,
            regions,
        }
    }

    pub fn get(&self, r: Region) -> RegionStats {
        self.regions[r.index()]
    }

    /// Aggregate formula applied to region means.
    pub fn sundials_time(&self) -> f64 {
        let mean = TimerProfile {
            seconds: std::array::from_fn(|i| self.regions[i].mean),
        };
        mean.sundials_time()
    }

    pub fn time_per_step(&self) -> Result<f64> {
        if self.slow_steps == 0 {
            return Err(Error::Arithmetic("profile has zero slow steps".into()));
        }
        Ok((self.get(Region::Transient).mean + self.get(Region::FixedStep).mean) / self.slow_steps as f64)
    }
}

/// Gathers every task's profile in a single collective round.
pub fn aggregate(comm: &Comm, local: &TimerProfile, slow_steps: usize) -> Result<AggregateProfile> {
    let gathered = comm.allgather(&local.seconds)?;
    let profiles: Vec<TimerProfile> = gathered
        .into_iter()
        .map(|g| {
            g.try_into()
                .map(|seconds| TimerProfile { seconds })
                .map_err(|_| Error::Protocol("profile payload has the wrong length".into()))
        })
        .collect::<Result<_>>()?;
    Ok(AggregateProfile::from_profiles(&profiles, slow_steps))
}

/// Reference time per slow step divided by this run's.
pub fn parallel_efficiency(profile: &AggregateProfile, reference: &AggregateProfile) -> Result<f64> {
    let here = profile.time_per_step()?;
    let there = reference.time_per_step()?;
    if here <= 0.0 {
        return Err(Error::Arithmetic("non-positive time per step".into()));
    }
    Ok(there / here)
}

/// Smallest observable nonzero tick of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..32 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}
