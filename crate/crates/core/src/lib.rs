//! Chord-parallel spectral line fitting.
//!
//! Each viewing chord of a charge-exchange spectroscopy diagnostic is fitted
//! independently: Gaussian lines over a baseline are matched to measured
//! spectra by Levenberg–Marquardt χ² minimisation and converted into ion
//! velocity, temperature and radiance. Chords are then run as independent
//! tasks, serially or on a job-array-like worker pool, with golden-file
//! regression checks and speedup / strong-scaling analysis on top.
//!
//! - [`spectra`]: model evaluation, synthetic spectra, Doppler conversion
//! - [`lmfit`]: the minimiser
//! - [`chordio`]: discharge input format, chord splitting, fit output files
//! - [`pipeline`]: fit one chord file end to end
//! - [`dispatch`]: serial, threaded, subprocess and simulated execution
//! - [`certest`]: reference generation and tolerance comparison
//! - [`bench`]: trial timing and scaling analysis

pub mod bench;
pub mod certest;
pub mod chordio;
pub mod dispatch;
pub mod lmfit;
pub mod pipeline;
pub mod spectra;
