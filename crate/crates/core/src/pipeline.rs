//! Per-chord fit pipeline: input stanza → spectra → fits → output records.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::chordio::{
    format_fit_output, parse_discharge, ChordBlock, ChordIoError, FitOutputRecord, FitStatus,
    LineFit,
};
use crate::lmfit::{lm_fit, FitError, FitOptions, FitResult};
use crate::spectra::{initial_guess, ion_properties, IonProperties, SpectrumError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] ChordIoError),
    #[error("chord input must contain exactly one stanza, found {0}")]
    NotSingleChord(usize),
    #[error("{path}: {source}")]
    File {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum SliceError {
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Fit result for one timeslice, with the record that goes to disk.
#[derive(Debug, Clone)]
pub struct SliceFit {
    pub record: FitOutputRecord,
    /// `None` when the slice failed (see `error`).
    pub result: Option<FitResult>,
    pub error: Option<String>,
}

fn fit_slice(
    block: &ChordBlock,
    index: usize,
    options: &FitOptions,
) -> Result<(FitOutputRecord, FitResult), SliceError> {
    let ts = &block.timeslices[index];
    let spectrum = ts.spectrum()?;
    let guess = initial_guess(&spectrum, block.n_lines)?;
    let fit = lm_fit(&spectrum, &guess, options)?;
    let nb = fit.model.baseline_len();
    let err = fit.uncertainties();
    let lines: Vec<LineFit> = fit
        .model
        .lines
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let e = &err[nb + 3 * k..nb + 3 * k + 3];
            LineFit {
                amplitude: l.amplitude,
                amplitude_err: e[0],
                center: l.center,
                center_err: e[1],
                width: l.width,
                width_err: e[2],
            }
        })
        .collect();

    // Ion properties come from the line closest to the rest wavelength.
    let l0 = block.line_ref.lambda0;
    let primary = fit
        .model
        .lines
        .iter()
        .min_by(|a, b| (a.center - l0).abs().total_cmp(&(b.center - l0).abs()))
        .copied()
        .expect("at least one line");
    let ion = match ion_properties(&primary, &block.line_ref) {
        Ok(p) => p,
        Err(SpectrumError::WidthBelowInstrument { .. }) => {
            // velocity and radiance are still meaningful
            let mut unresolved = block.line_ref;
            unresolved.sigma_instr = 0.0;
            let p = ion_properties(&primary, &unresolved)?;
            IonProperties {
                temperature: f64::NAN,
                ..p
            }
        }
        Err(e) => return Err(e.into()),
    };

    let record = FitOutputRecord {
        chord_id: block.chord_id.clone(),
        time: ts.time,
        lines,
        chi2: fit.chi2,
        dof: fit.dof,
        status: FitStatus::Converged(fit.converged),
        ion,
    };
    Ok((record, fit))
}

/// Fit every timeslice of `block`. A failing slice yields a `failed` record
/// and does not stop the chord.
pub fn fit_chord(block: &ChordBlock, options: &FitOptions) -> Vec<SliceFit> {
    (0..block.timeslices.len())
        .map(|i| match fit_slice(block, i, options) {
            Ok((record, result)) => SliceFit {
                record,
                result: Some(result),
                error: None,
            },
            Err(e) => SliceFit {
                record: FitOutputRecord::failed(
                    &block.chord_id,
                    block.timeslices[i].time,
                    block.n_lines,
                ),
                result: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

/// Parse a single-chord input text, fit it and render the output file text.
pub fn process_chord_text(text: &str, options: &FitOptions) -> Result<(String, Vec<SliceFit>), PipelineError> {
    let input = parse_discharge(text)?;
    if input.chords.len() != 1 {
        return Err(PipelineError::NotSingleChord(input.chords.len()));
    }
    let block = &input.chords[0];
    let fits = fit_chord(block, options);
    let records: Vec<FitOutputRecord> = fits.iter().map(|f| f.record.clone()).collect();
    let out = format_fit_output(&block.chord_id, &records)?;
    Ok((out, fits))
}

/// `chord_<k>.in` → `fit_<k>.out`.
pub fn process_chord_file(
    input: &Path,
    output: &Path,
    options: &FitOptions,
) -> Result<Vec<SliceFit>, PipelineError> {
    let text = fs::read_to_string(input).map_err(|source| PipelineError::File {
        path: input.to_path_buf(),
        source,
    })?;
    let (out, fits) = process_chord_text(&text, options)?;
    fs::write(output, out).map_err(|source| PipelineError::File {
        path: output.to_path_buf(),
        source,
    })?;
    Ok(fits)
}
