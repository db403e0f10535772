//! Synthetic discharge generator.

use chordfit_core::chordio::{ChordBlock, DischargeInput, GenRecipe, SpectrumSource, Timeslice};
use chordfit_core::spectra::{GaussianLine, LineReference, Noise, SpectralModel, SPEED_OF_LIGHT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// C VI 529.05 nm, the usual charge-exchange line.
pub const LAMBDA0: f64 = 529.05;
/// Carbon-12 rest energy in eV.
pub const CARBON_REST_EV: f64 = 1.1178e10;
pub const SIGMA_INSTR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct GenOptions {
    pub chords: usize,
    pub timeslices: usize,
    /// Multiplies the timeslice count.
    pub scale: usize,
    pub seed: u64,
    pub shot: u64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            chords: 64,
            timeslices: 5,
            scale: 1,
            seed: 7,
            shot: 163100,
        }
    }
}

impl GenOptions {
    pub fn total_fits(&self) -> usize {
        self.chords * self.timeslices * self.scale
    }
}

/// Chords differ in pixel count (100–300) and a quarter of them carry a
/// second, weaker line, so per-chord fit cost is uneven.
pub fn generate(opts: &GenOptions) -> DischargeInput {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let reference = LineReference::new(LAMBDA0, CARBON_REST_EV, SIGMA_INSTR).expect("valid constants");
    let n_slices = opts.timeslices * opts.scale;
    let chords = (1..=opts.chords)
        .map(|k| {
            let id = if k % 2 == 1 { format!("T{k:02}") } else { format!("V{k:02}") };
            let pixels = rng.random_range(100..=300);
            let n_lines = if rng.random_bool(0.25) { 2 } else { 1 };
            let v0: f64 = rng.random_range(-1e5..1e5);
            let t0: f64 = rng.random_range(300.0..3000.0);
            let slices = (0..n_slices)
                .map(|i| {
                    let v = v0 * (1.0 + 0.05 * rng.random_range(-1.0..1.0));
                    let t = t0 * (1.0 + 0.05 * rng.random_range(-1.0..1.0));
                    let mu = LAMBDA0 * (1.0 + v / SPEED_OF_LIGHT);
                    let width = (LAMBDA0 * LAMBDA0 * t / CARBON_REST_EV
                        + SIGMA_INSTR * SIGMA_INSTR)
                        .sqrt();
                    let amp = rng.random_range(500.0..3000.0);
                    let mut model = SpectralModel::constant(rng.random_range(20.0..80.0))
                        .with_line(GaussianLine::new(amp, mu, width));
                    if n_lines == 2 {
                        model = model.with_line(GaussianLine::new(0.3 * amp, LAMBDA0 + 0.6, 0.08));
                    }
                    Timeslice {
                        time: 1.0 + 0.005 * i as f64,
                        source: SpectrumSource::Generated(GenRecipe {
                            model,
                            noise: Noise::SqrtGaussian,
                            seed: rng.random(),
                            grid_min: LAMBDA0 - 1.0,
                            grid_max: LAMBDA0 + 1.0,
                            n_pixels: pixels,
                        }),
                    }
                })
                .collect();
            ChordBlock::new(id, reference, n_lines, slices)
        })
        .collect();
    DischargeInput::new(opts.shot, &["# synthetic discharge"], chords)
}

/// Seeded per-task durations in `[min_ms, max_ms]` for dilated runs.
pub fn dilation_durations(n: usize, min_ms: u64, max_ms: u64, seed: u64) -> Vec<std::time::Duration> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| std::time::Duration::from_millis(rng.random_range(min_ms..=max_ms)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chordfit_core::chordio::parse_discharge;

    #[test]
    fn generated_discharge_parses_back() {
        let opts = GenOptions {
            chords: 8,
            timeslices: 2,
            ..Default::default()
        };
        let d = generate(&opts);
        let text = d.to_text();
        assert!(text.starts_with("SHOT 163100\n"));
        assert_eq!(parse_discharge(&text).unwrap(), d);
    }

    #[test]
    fn same_seed_same_bytes() {
        let o = GenOptions { chords: 4, ..Default::default() };
        assert_eq!(generate(&o).to_text(), generate(&o).to_text());
        let other = GenOptions { seed: 8, ..o };
        assert_ne!(generate(&other).to_text(), generate(&GenOptions { chords: 4, ..Default::default() }).to_text());
    }

    #[test]
    fn scale_multiplies_fits() {
        let o = GenOptions { scale: 32, ..Default::default() };
        assert_eq!(o.total_fits(), 10_240);
    }

    #[test]
    fn durations_stay_in_range() {
        let d = dilation_durations(100, 50, 500, 1);
        assert!(d.iter().all(|d| (50..=500).contains(&(d.as_millis() as u64))));
        assert_eq!(d, dilation_durations(100, 50, 500, 1));
    }
}
