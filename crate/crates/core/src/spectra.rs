//! Spectral model: a low-order polynomial baseline plus a sum of Gaussian
//! line components, synthetic spectrum generation, first-guess seeding and
//! conversion of fitted line parameters into ion properties.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// FWHM / sigma for a Gaussian, 2·sqrt(2 ln 2).
pub const FWHM_PER_SIGMA: f64 = 2.3548;

/// Highest supported baseline polynomial degree.
pub const MAX_BASELINE_DEGREE: usize = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectrumError {
    #[error("wavelength grid needs at least 4 pixels, got {0}")]
    GridTooShort(usize),
    #[error("wavelength grid must be finite, positive and strictly increasing (pixel {0})")]
    GridNotMonotone(usize),
    #[error("length mismatch: grid has {grid} pixels, {what} has {got}")]
    LengthMismatch {
        what: &'static str,
        grid: usize,
        got: usize,
    },
    #[error("non-finite count at pixel {0}")]
    NonFiniteCount(usize),
    #[error("sigma must be finite and > 0 (pixel {0})")]
    BadSigma(usize),
    #[error("model parameter {0} is out of domain")]
    ModelDomain(String),
    #[error("baseline degree {0} exceeds maximum of {MAX_BASELINE_DEGREE}")]
    BaselineDegree(usize),
    #[error("line width {sigma} nm does not exceed instrumental width {sigma_instr} nm")]
    WidthBelowInstrument { sigma: f64, sigma_instr: f64 },
    #[error("invalid line reference: {0}")]
    BadReference(&'static str),
    #[error("no local maximum above baseline")]
    FlatSpectrum,
    #[error("requested {requested} lines but only {found} separated peaks were found")]
    TooFewPeaks { requested: usize, found: usize },
    #[error("n_lines must be at least 1")]
    NoLinesRequested,
}

pub type Result<T, E = SpectrumError> = std::result::Result<T, E>;

/// Strictly increasing wavelength axis in nm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WavelengthGrid(Vec<f64>);

impl WavelengthGrid {
    pub fn new(pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() < 4 {
            return Err(SpectrumError::GridTooShort(pixels.len()));
        }
        for (i, &x) in pixels.iter().enumerate() {
            if !x.is_finite() || x <= 0.0 {
                return Err(SpectrumError::GridNotMonotone(i));
            }
            if i > 0 && x <= pixels[i - 1] {
                return Err(SpectrumError::GridNotMonotone(i));
            }
        }
        Ok(Self(pixels))
    }

    /// `n` evenly spaced pixels covering `[min, max]` inclusive.
    pub fn linspace(min: f64, max: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(SpectrumError::GridTooShort(n));
        }
        let step = (max - min) / (n - 1) as f64;
        Self::new((0..n).map(|i| min + step * i as f64).collect())
    }

    pub fn pixels(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0[0]
    }

    pub fn max(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn span(&self) -> f64 {
        self.max() - self.min()
    }

    pub fn median_spacing(&self) -> f64 {
        let mut d: Vec<f64> = self.0.windows(2).map(|w| w[1] - w[0]).collect();
        median_in_place(&mut d)
    }
}

impl TryFrom<Vec<f64>> for WavelengthGrid {
    type Error = SpectrumError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WavelengthGrid> for Vec<f64> {
    fn from(g: WavelengthGrid) -> Self {
        g.0
    }
}

/// One chord/timeslice measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    grid: WavelengthGrid,
    counts: Vec<f64>,
    sigma: Vec<f64>,
}

impl Spectrum {
    pub fn new(grid: WavelengthGrid, counts: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let s = Self::new_unchecked_counts(grid, counts, sigma)?;
        if let Some(i) = s.counts.iter().position(|c| !c.is_finite()) {
            return Err(SpectrumError::NonFiniteCount(i));
        }
        Ok(s)
    }

    /// Like [`Spectrum::new`] but admits non-finite counts, so corrupted
    /// measurements can still reach the fitter and be rejected there.
    pub fn new_unchecked_counts(
        grid: WavelengthGrid,
        counts: Vec<f64>,
        sigma: Vec<f64>,
    ) -> Result<Self> {
        for (what, v) in [("counts", &counts), ("sigma", &sigma)] {
            if v.len() != grid.len() {
                return Err(SpectrumError::LengthMismatch {
                    what,
                    grid: grid.len(),
                    got: v.len(),
                });
            }
        }
        if let Some(i) = sigma.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(SpectrumError::BadSigma(i));
        }
        Ok(Self {
            grid,
            counts,
            sigma,
        })
    }

    pub fn grid(&self) -> &WavelengthGrid {
        &self.grid
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianLine {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
}

impl GaussianLine {
    pub fn new(amplitude: f64, center: f64, width: f64) -> Self {
        Self {
            amplitude,
            center,
            width,
        }
    }

    #[inline]
    pub fn eval(&self, lambda: f64) -> f64 {
        let d = lambda - self.center;
        self.amplitude * (-(d * d) / (2.0 * self.width * self.width)).exp()
    }

    fn validate(&self, k: usize) -> Result<()> {
        let bad = |what: &str| Err(SpectrumError::ModelDomain(format!("line {k} {what}")));
        if !self.amplitude.is_finite() || self.amplitude < 0.0 {
            return bad("amplitude");
        }
        if !self.center.is_finite() {
            return bad("center");
        }
        if !self.width.is_finite() || self.width <= 0.0 {
            return bad("width");
        }
        Ok(())
    }
}

/// Baseline polynomial plus Gaussian lines. The flattened parameter vector is
/// `[b0, .., bd, A1, mu1, sigma1, A2, ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralModel {
    pub baseline: Vec<f64>,
    pub lines: Vec<GaussianLine>,
}

impl SpectralModel {
    pub fn new(baseline: Vec<f64>, lines: Vec<GaussianLine>) -> Result<Self> {
        let m = Self { baseline, lines };
        m.validate()?;
        Ok(m)
    }

    pub fn constant(b0: f64) -> Self {
        Self {
            baseline: vec![b0],
            lines: Vec::new(),
        }
    }

    pub fn with_line(mut self, line: GaussianLine) -> Self {
        self.lines.push(line);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.baseline.is_empty() {
            return Err(SpectrumError::ModelDomain("empty baseline".into()));
        }
        if self.baseline.len() > MAX_BASELINE_DEGREE + 1 {
            return Err(SpectrumError::BaselineDegree(self.baseline.len() - 1));
        }
        if let Some(j) = self.baseline.iter().position(|b| !b.is_finite()) {
            return Err(SpectrumError::ModelDomain(format!("baseline b{j}")));
        }
        self.lines
            .iter()
            .enumerate()
            .try_for_each(|(k, l)| l.validate(k))
    }

    pub fn baseline_len(&self) -> usize {
        self.baseline.len()
    }

    pub fn n_params(&self) -> usize {
        self.baseline.len() + 3 * self.lines.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.baseline.clone();
        for l in &self.lines {
            p.extend([l.amplitude, l.center, l.width]);
        }
        p
    }

    /// Overwrite parameters from a flat vector laid out as [`SpectralModel::params`].
    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter vector length");
        let nb = self.baseline.len();
        self.baseline.copy_from_slice(&p[..nb]);
        for (l, chunk) in self.lines.iter_mut().zip(p[nb..].chunks_exact(3)) {
            l.amplitude = chunk[0];
            l.center = chunk[1];
            l.width = chunk[2];
        }
    }

    pub fn from_params_like(&self, p: &[f64]) -> Self {
        let mut m = self.clone();
        m.set_params(p);
        m
    }

    #[inline]
    pub fn baseline_at(&self, lambda: f64) -> f64 {
        // Horner, highest degree first
        self.baseline.iter().rev().fold(0.0, |acc, &b| acc * lambda + b)
    }

    /// Model value at a single wavelength, no validation.
    #[inline]
    pub fn value_at(&self, lambda: f64) -> f64 {
        self.baseline_at(lambda) + self.lines.iter().map(|l| l.eval(lambda)).sum::<f64>()
    }
}

/// Evaluate the model at every pixel of `grid`.
pub fn eval_model(model: &SpectralModel, grid: &WavelengthGrid) -> Result<Vec<f64>> {
    model.validate()?;
    Ok(eval_model_unchecked(model, grid.pixels()))
}

pub(crate) fn eval_model_unchecked(model: &SpectralModel, pixels: &[f64]) -> Vec<f64> {
    pixels.iter().map(|&x| model.value_at(x)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    #[default]
    None,
    SqrtGaussian,
}

/// Noisy (or exact) synthetic spectrum for `model` on `grid`.
///
/// With [`Noise::SqrtGaussian`] every pixel receives zero-mean Gaussian noise
/// of standard deviation `sqrt(max(S, 1))` from a ChaCha8 stream seeded with
/// `seed`, and the reported uncertainties are `sqrt(max(counts, 1))`.
pub fn synthesize(
    model: &SpectralModel,
    grid: &WavelengthGrid,
    noise: Noise,
    seed: u64,
) -> Result<Spectrum> {
    let clean = eval_model(model, grid)?;
    let (counts, sigma) = match noise {
        Noise::None => {
            let ones = vec![1.0; clean.len()];
            (clean, ones)
        }
        Noise::SqrtGaussian => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let counts: Vec<f64> = clean
                .iter()
                .map(|&s| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s + z * s.max(1.0).sqrt()
                })
                .collect();
            let sigma = counts.iter().map(|&c| c.max(1.0).sqrt()).collect();
            (counts, sigma)
        }
    };
    Spectrum::new(grid.clone(), counts, sigma)
}

/// Rest-frame line data and instrument function for one chord.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineReference {
    /// Rest wavelength (nm).
    pub lambda0: f64,
    /// Ion rest energy m c² (eV).
    pub ion_rest_energy: f64,
    /// Instrumental Gaussian width (nm).
    pub sigma_instr: f64,
}

impl LineReference {
    pub fn new(lambda0: f64, ion_rest_energy: f64, sigma_instr: f64) -> Result<Self> {
        let r = Self {
            lambda0,
            ion_rest_energy,
            sigma_instr,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0.is_finite() && self.lambda0 > 0.0) {
            return Err(SpectrumError::BadReference("lambda0 must be > 0"));
        }
        if !(self.ion_rest_energy.is_finite() && self.ion_rest_energy > 0.0) {
            return Err(SpectrumError::BadReference("ion rest energy must be > 0"));
        }
        if !(self.sigma_instr.is_finite() && self.sigma_instr >= 0.0) {
            return Err(SpectrumError::BadReference("instrumental width must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IonProperties {
    /// Line-of-sight velocity (m/s), positive for red shift.
    pub velocity: f64,
    /// Ion temperature (eV).
    pub temperature: f64,
    /// Integrated line intensity (counts·nm).
    pub radiance: f64,
}

/// Doppler shift → velocity, Doppler broadening → temperature, area → radiance.
pub fn ion_properties(line: &GaussianLine, reference: &LineReference) -> Result<IonProperties> {
    reference.validate()?;
    line.validate(0)?;
    if line.width <= reference.sigma_instr {
        return Err(SpectrumError::WidthBelowInstrument {
            sigma: line.width,
            sigma_instr: reference.sigma_instr,
        });
    }
    let l0 = reference.lambda0;
    let velocity = SPEED_OF_LIGHT * (line.center - l0) / l0;
    let thermal_var = line.width * line.width - reference.sigma_instr * reference.sigma_instr;
    let temperature = reference.ion_rest_energy * thermal_var / (l0 * l0);
    let radiance = line.amplitude * line.width * (2.0 * std::f64::consts::PI).sqrt();
    Ok(IonProperties {
        velocity,
        temperature,
        radiance,
    })
}

/// Heuristic starting point for a fit with `n_lines` Gaussians over a
/// constant baseline.
pub fn initial_guess(spectrum: &Spectrum, n_lines: usize) -> Result<SpectralModel> {
    if n_lines == 0 {
        return Err(SpectrumError::NoLinesRequested);
    }
    let counts = spectrum.counts();
    if let Some(i) = counts.iter().position(|c| !c.is_finite()) {
        return Err(SpectrumError::NonFiniteCount(i));
    }
    let x = spectrum.grid().pixels();
    let n = counts.len();

    let edge = (n as f64 * 0.1).ceil().max(1.0) as usize;
    let mut edges: Vec<f64> = counts[..edge]
        .iter()
        .chain(&counts[n - edge..])
        .copied()
        .collect();
    let b0 = median_in_place(&mut edges);

    let excess: Vec<f64> = counts.iter().map(|c| c - b0).collect();
    let mut maxima: Vec<usize> = (0..n)
        .filter(|&i| {
            let left = if i > 0 { excess[i - 1] } else { f64::NEG_INFINITY };
            let right = if i + 1 < n { excess[i + 1] } else { f64::NEG_INFINITY };
            excess[i] > 0.0 && excess[i] >= left && excess[i] >= right
        })
        .collect();
    if maxima.is_empty() {
        return Err(SpectrumError::FlatSpectrum);
    }
    // tallest first; index breaks ties so the order is total
    maxima.sort_by(|&a, &b| excess[b].total_cmp(&excess[a]).then(a.cmp(&b)));

    let mut picked: Vec<usize> = Vec::with_capacity(n_lines);
    for i in maxima {
        if picked.iter().all(|&p| p.abs_diff(i) >= 3) {
            picked.push(i);
            if picked.len() == n_lines {
                break;
            }
        }
    }
    if picked.len() < n_lines {
        return Err(SpectrumError::TooFewPeaks {
            requested: n_lines,
            found: picked.len(),
        });
    }
    picked.sort_unstable();

    let min_width = 0.5 * spectrum.grid().median_spacing();
    let lines = picked
        .into_iter()
        .map(|i| {
            let amplitude = excess[i].max(1.0);
            let half = 0.5 * excess[i];
            let left = half_max_crossing(x, &excess, i, half, Direction::Left);
            let right = half_max_crossing(x, &excess, i, half, Direction::Right);
            let width = ((right - left) / FWHM_PER_SIGMA).max(min_width);
            GaussianLine::new(amplitude, x[i], width)
        })
        .collect();

    Ok(SpectralModel {
        baseline: vec![b0],
        lines,
    })
}

#[derive(Clone, Copy)]
enum Direction {
    Left,
    Right,
}

/// Wavelength where `y` first drops below `half` walking away from `peak`,
/// linearly interpolated; the grid edge if it never does.
fn half_max_crossing(x: &[f64], y: &[f64], peak: usize, half: f64, dir: Direction) -> f64 {
    let mut i = peak;
    loop {
        let next = match dir {
            Direction::Left if i > 0 => i - 1,
            Direction::Right if i + 1 < x.len() => i + 1,
            _ => return x[i],
        };
        if y[next] < half {
            let t = (y[i] - half) / (y[i] - y[next]);
            return x[i] + t * (x[next] - x[i]);
        }
        i = next;
    }
}

pub(crate) fn median_in_place(v: &mut [f64]) -> f64 {
    debug_assert!(!v.is_empty());
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
