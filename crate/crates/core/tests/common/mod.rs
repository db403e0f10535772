//! Test-only oracles and fixtures. Nothing here calls into the code paths
//! these helpers are used to check.
#![allow(dead_code)]

use chordfit_core::chordio::{ChordBlock, DischargeInput, GenRecipe, SpectrumSource, Timeslice};
use chordfit_core::spectra::{GaussianLine, LineReference, Noise, SpectralModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct transcription of the model formula, independent of `eval_model`.
pub fn naive_model(baseline: &[f64], lines: &[(f64, f64, f64)], x: f64) -> f64 {
    let mut s = 0.0;
    for (j, b) in baseline.iter().enumerate() {
        s += b * x.powi(j as i32);
    }
    for &(a, mu, sig) in lines {
        s += a * (-(x - mu) * (x - mu) / (2.0 * sig * sig)).exp();
    }
    s
}

pub fn naive_model_of(m: &SpectralModel, x: f64) -> f64 {
    let lines: Vec<(f64, f64, f64)> = m
        .lines
        .iter()
        .map(|l| (l.amplitude, l.center, l.width))
        .collect();
    naive_model(&m.baseline, &lines, x)
}

/// Term-by-term weighted χ².
pub fn naive_chi2(m: &SpectralModel, x: &[f64], y: &[f64], s: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..x.len() {
        let r = (y[i] - naive_model_of(m, x[i])) / s[i];
        total += r * r;
    }
    total
}

/// Central finite-difference Jacobian of S(λ_i)/sigma_i with
/// h = 1e-6 · max(|θ_p|, 1).
pub fn fd_jacobian(m: &SpectralModel, x: &[f64], sigma: &[f64]) -> Vec<Vec<f64>> {
    let p0 = m.params();
    let mut jac = vec![vec![0.0; p0.len()]; x.len()];
    for p in 0..p0.len() {
        let h = 1e-6 * p0[p].abs().max(1.0);
        let mut up = p0.clone();
        let mut dn = p0.clone();
        up[p] += h;
        dn[p] -= h;
        let (mu, md) = (m.from_params_like(&up), m.from_params_like(&dn));
        for i in 0..x.len() {
            let d = (naive_model_of(&mu, x[i]) - naive_model_of(&md, x[i])) / (2.0 * h);
            jac[i][p] = d / sigma[i];
        }
    }
    jac
}

/// Gauss–Jordan inverse with partial pivoting.
pub fn gauss_jordan_inverse(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        let d = m[col][col];
        for v in m[col].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    let pivot_row = m[col].clone();
                    for (v, p) in m[r].iter_mut().zip(&pivot_row) {
                        *v -= f * p;
                    }
                }
            }
        }
    }
    Some(m.into_iter().map(|r| r[n..].to_vec()).collect())
}

/// Random model on a 32-pixel grid. Centers sit at tens of nm and widths
/// are ≥ 0.3 nm so the finite-difference oracle's truncation error,
/// ~(1e-6·|μ|/σ)², stays far below the 1e-6 comparison threshold.
pub fn random_model_on_grid(r: &mut ChaCha8Rng) -> (SpectralModel, Vec<f64>) {
    let c: f64 = r.random_range(20.0..80.0);
    let n = 32;
    let x: Vec<f64> = (0..n).map(|i| c - 3.0 + 6.0 * i as f64 / (n - 1) as f64).collect();
    let degree = r.random_range(0..=1);
    let mut baseline = vec![r.random_range(1.0..50.0)];
    if degree == 1 {
        baseline.push(r.random_range(-0.5..0.5));
    }
    let n_lines = r.random_range(1..=3);
    let lines = (0..n_lines)
        .map(|_| {
            GaussianLine::new(
                r.random_range(10.0..1000.0),
                r.random_range(c - 2.5..c + 2.5),
                r.random_range(0.3..1.0),
            )
        })
        .collect();
    (SpectralModel::new(baseline, lines).unwrap(), x)
}

/// Synthetic discharge of `n` chords, `timeslices` fits each, 100-pixel grids.
pub fn synthetic_discharge(n: usize, timeslices: usize, seed: u64) -> DischargeInput {
    let mut r = rng(seed);
    let chords = (0..n)
        .map(|c| {
            let l0 = 529.05;
            let lr = LineReference::new(l0, 1.1178e10, 0.005).unwrap();
            let mu = l0 + r.random_range(-0.1..0.1);
            let sig = r.random_range(0.06..0.15);
            let slices = (0..timeslices)
                .map(|t| {
                    let model = SpectralModel::constant(r.random_range(20.0..80.0))
                        .with_line(GaussianLine::new(r.random_range(500.0..3000.0), mu, sig));
                    Timeslice {
                        time: 1.0 + 0.005 * t as f64,
                        source: SpectrumSource::Generated(GenRecipe {
                            model,
                            noise: Noise::SqrtGaussian,
                            seed: r.random(),
                            grid_min: l0 - 1.0,
                            grid_max: l0 + 1.0,
                            n_pixels: 100,
                        }),
                    }
                })
                .collect();
            let id = if c % 2 == 0 { format!("T{:02}", c + 1) } else { format!("V{:02}", c + 1) };
            ChordBlock::new(id, lr, 1, slices)
        })
        .collect();
    DischargeInput::new(163100, &["# synthetic test discharge"], chords)
}

/// Spearman rank correlation (no tie correction; inputs are continuous).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}
