//! Independent oracles for convergence and accuracy studies.
//!
//! Nothing here shares code with the integrators it is used to judge: the
//! reference solver works on plain slices with its own tableau and step
//! control.

use crate::{Error, Result};

/// Least-squares slope of `log(error)` against `log(step)`.
pub fn observed_order(steps: &[f64], errors: &[f64]) -> Result<f64> {
    if steps.len() != errors.len() || steps.len() < 3 {
        return Err(Error::Study(format!(
            "need at least 3 (step, error) pairs, got {} and {}",
            steps.len(),
            errors.len()
        )));
    }
    if let Some(e) = errors.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(Error::Study(format!("error {e} is not positive")));
    }
    if let Some(h) = steps.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
        return Err(Error::Study(format!("step {h} is not positive")));
    }
    let x: Vec<f64> = steps.iter().map(|h| h.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Study("steps do not vary".into()));
    }
    Ok(sxy / sxx)
}

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_E: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Dormand–Prince 5(4) solution at each of `times` (increasing, after `t0`).
pub fn reference_solve<F>(f: F, t0: f64, y0: &[f64], times: &[f64], rtol: f64, atol: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut k = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut y5 = vec![0.0; n];
    let mut out = Vec::with_capacity(times.len());
    f(t, &y, &mut k[0]);
    let mut h = {
        let scale: f64 = (y.iter().zip(&k[0]))
            .map(|(yi, fi)| (fi / (atol + rtol * yi.abs())).powi(2))
            .sum::<f64>()
            / n.max(1) as f64;
        if scale > 0.0 {
            0.01 / scale.sqrt()
        } else {
            1e-6
        }
    };
    let mut count = 0usize;
    for &target in times {
        if target < t {
            return Err(Error::Study(format!("output time {target} precedes {t}")));
        }
        while t < target {
            count += 1;
            if count > 50_000_000 {
                return Err(Error::Study("reference solve exceeded its step budget".into()));
            }
            let last = t + h >= target;
            let hs = if last { target - t } else { h };
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = y[i];
                    for j in 0..s {
                        acc += hs * DP_A[s][j] * k[j][i];
                    }
                    stage[i] = acc;
                }
                f(t + DP_C[s] * hs, &stage, &mut k[s]);
            }
            let mut err2 = 0.0;
            for i in 0..n {
                let mut hi = y[i];
                let mut lo = y[i];
                for j in 0..7 {
                    hi += hs * DP_B[j] * k[j][i];
                    lo += hs * DP_E[j] * k[j][i];
                }
                y5[i] = hi;
                let sc = atol + rtol * y[i].abs().max(hi.abs());
                err2 += ((hi - lo) / sc).powi(2);
            }
            let err = (err2 / n.max(1) as f64).sqrt();
            if !err.is_finite() {
                h = hs * 0.2;
                continue;
            }
            if err <= 1.0 {
                t = if last { target } else { t + hs };
                y.copy_from_slice(&y5);
                // first-same-as-last
                let (first, rest) = k.split_at_mut(6);
                first[0].copy_from_slice(&rest[0]);
            }
            let fac = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            h = if last && err <= 1.0 { h.max(hs * fac) } else { hs * fac };
            if !(h > t.abs() * f64::EPSILON) {
                return Err(Error::Study(format!("reference step size underflow at t = {t}")));
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

/// `exp(a)` for a dense row-major `n x n` matrix by scaling and squaring
/// a truncated Taylor series.
pub fn expm(a: &[f64], n: usize) -> Vec<f64> {
    let norm = (0..n)
        .map(|i| a[i * n..(i + 1) * n].iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let mut s = 0;
    while norm / 2f64.powi(s) > 0.25 {
        s += 1;
    }
    let scale = 2f64.powi(-s);
    let b: Vec<f64> = a.iter().map(|x| x * scale).collect();
    let mut result = identity(n);
    let mut term = identity(n);
    for k in 1..=24 {
        term = matmul(&term, &b, n);
        term.iter_mut().for_each(|x| *x /= k as f64);
        for (r, t) in result.iter_mut().zip(&term) {
            *r += t;
        }
    }
    for _ in 0..s {
        result = matmul(&result, &result, n);
    }
    result
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

pub fn matvec(a: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect()
}
