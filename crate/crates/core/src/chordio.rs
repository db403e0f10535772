//! Discharge input files, per-chord splitting and fit output files.
//!
//! A discharge file is line oriented. Everything before the first line that
//! starts with the token `CHORD` is header (it must contain `SHOT <int>`);
//! each `CHORD` line opens a stanza that runs to the next one:
//!
//! ```text
//! SHOT 163100
//! CHORD T01
//!   LAMBDA0 529.05  IONREST 1.1178e10  SIGINSTR 0.0  NLINES 1
//!   TIME 1.000 GEN A=1000 MU=529.1 SIG=0.1 B0=50 NOISE=sqrt SEED=7 GRID=528.5,529.7,100
//!   TIME 1.005 DATA 4
//!     528.5 12 3.4
//!     ...
//! ```
//!
//! `#` starts a comment. Stanza text is kept verbatim so that splitting is a
//! pure byte partition of the original file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::lmfit::Convergence;
use crate::spectra::{
    synthesize, GaussianLine, IonProperties, LineReference, Noise, SpectralModel, Spectrum,
    SpectrumError, WavelengthGrid,
};

pub const CHORD_KEYWORD: &str = "CHORD";

#[derive(Debug, Error)]
pub enum ChordIoError {
    #[error("no {CHORD_KEYWORD} stanza found")]
    EmptyInput,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("records from chords {0:?} and {1:?} cannot share one output file")]
    MixedChords(String, String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
}

pub type Result<T, E = ChordIoError> = std::result::Result<T, E>;

fn parse_err(line: usize, msg: impl Into<String>) -> ChordIoError {
    ChordIoError::Parse {
        line,
        msg: msg.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ChordIoError + '_ {
    move |source| ChordIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Recipe for a synthetic timeslice.
#[derive(Debug, Clone, PartialEq)]
pub struct GenRecipe {
    pub model: SpectralModel,
    pub noise: Noise,
    pub seed: u64,
    pub grid_min: f64,
    pub grid_max: f64,
    pub n_pixels: usize,
}

impl GenRecipe {
    pub fn grid(&self) -> Result<WavelengthGrid, SpectrumError> {
        WavelengthGrid::linspace(self.grid_min, self.grid_max, self.n_pixels)
    }

    pub fn materialize(&self) -> Result<Spectrum, SpectrumError> {
        synthesize(&self.model, &self.grid()?, self.noise, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpectrumSource {
    Generated(GenRecipe),
    Inline(Spectrum),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeslice {
    /// Seconds into the discharge.
    pub time: f64,
    pub source: SpectrumSource,
}

impl Timeslice {
    pub fn spectrum(&self) -> Result<Spectrum, SpectrumError> {
        match &self.source {
            SpectrumSource::Generated(g) => g.materialize(),
            SpectrumSource::Inline(s) => Ok(s.clone()),
        }
    }
}

/// One viewing chord: its line reference and the spectra to fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ChordBlock {
    pub chord_id: String,
    pub line_ref: LineReference,
    pub n_lines: usize,
    pub timeslices: Vec<Timeslice>,
    raw: String,
}

impl ChordBlock {
    /// Build a block and render its canonical stanza text.
    pub fn new(
        chord_id: impl Into<String>,
        line_ref: LineReference,
        n_lines: usize,
        timeslices: Vec<Timeslice>,
    ) -> Self {
        let mut b = Self {
            chord_id: chord_id.into(),
            line_ref,
            n_lines,
            timeslices,
            raw: String::new(),
        };
        b.raw = render_stanza(&b);
        b
    }

    /// Stanza text exactly as it appeared in (or was rendered for) the file.
    pub fn raw(&self) -> &str {
        &self.raw
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DischargeInput {
    pub shot: u64,
    /// Verbatim text preceding the first stanza.
    pub header: String,
    pub chords: Vec<ChordBlock>,
}

impl DischargeInput {
    /// `SHOT <shot>` followed by `extra_header` lines, then the stanzas.
    pub fn new(shot: u64, extra_header: &[&str], chords: Vec<ChordBlock>) -> Self {
        let mut header = format!("SHOT {shot}\n");
        for l in extra_header {
            header.push_str(l);
            header.push('\n');
        }
        Self {
            shot,
            header,
            chords,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = self.header.clone();
        for c in &self.chords {
            s.push_str(&c.raw);
        }
        s
    }
}

fn is_chord_line(line: &str) -> bool {
    line.strip_prefix(CHORD_KEYWORD)
        .is_some_and(|rest| rest.is_empty() || rest.starts_with(char::is_whitespace))
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(line, format!("invalid {what} {tok:?}")))
}

pub fn parse_discharge(text: &str) -> Result<DischargeInput> {
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let first = lines
        .iter()
        .position(|l| is_chord_line(l))
        .ok_or(ChordIoError::EmptyInput)?;

    let header: String = lines[..first].concat();
    let mut shot = None;
    for (i, l) in lines[..first].iter().enumerate() {
        let toks: Vec<&str> = strip_comment(l).split_whitespace().collect();
        if toks.first() == Some(&"SHOT") {
            if toks.len() != 2 {
                return Err(parse_err(i + 1, "expected SHOT <int>"));
            }
            shot = Some(num::<u64>(toks[1], i + 1, "shot number")?);
        }
    }
    let shot = shot.ok_or_else(|| parse_err(1, "header has no SHOT line"))?;

    let mut starts: Vec<usize> = (first..lines.len())
        .filter(|&i| is_chord_line(lines[i]))
        .collect();
    starts.push(lines.len());

    let mut chords = Vec::with_capacity(starts.len() - 1);
    for w in starts.windows(2) {
        let block = parse_stanza(&lines[w[0]..w[1]], w[0] + 1)?;
        if chords.iter().any(|c: &ChordBlock| c.chord_id == block.chord_id) {
            return Err(parse_err(
                w[0] + 1,
                format!("duplicate chord id {}", block.chord_id),
            ));
        }
        chords.push(block);
    }
    Ok(DischargeInput {
        shot,
        header,
        chords,
    })
}

/// `lines[0]` is the CHORD line, found at 1-based `line0` in the file.
fn parse_stanza(lines: &[&str], line0: usize) -> Result<ChordBlock> {
    let raw: String = lines.concat();
    let head: Vec<&str> = strip_comment(lines[0]).split_whitespace().collect();
    if head.len() != 2 {
        return Err(parse_err(line0, "expected CHORD <id>"));
    }
    let chord_id = head[1].to_string();

    let mut lambda0 = None;
    let mut ion_rest = None;
    let mut sigma_instr = 0.0;
    let mut n_lines = 1usize;
    let mut timeslices: Vec<Timeslice> = Vec::new();

    let mut i = 1;
    while i < lines.len() {
        let lineno = line0 + i;
        let toks: Vec<&str> = strip_comment(lines[i]).split_whitespace().collect();
        i += 1;
        let Some(&key) = toks.first() else { continue };
        match key {
            "LAMBDA0" | "IONREST" | "SIGINSTR" | "NLINES" => {
                if !timeslices.is_empty() {
                    return Err(parse_err(lineno, "line reference after TIME"));
                }
                if !toks.len().is_multiple_of(2) {
                    return Err(parse_err(lineno, "expected KEY VALUE pairs"));
                }
                for kv in toks.chunks_exact(2) {
                    match kv[0] {
                        "LAMBDA0" => lambda0 = Some(num(kv[1], lineno, "LAMBDA0")?),
                        "IONREST" => ion_rest = Some(num(kv[1], lineno, "IONREST")?),
                        "SIGINSTR" => sigma_instr = num(kv[1], lineno, "SIGINSTR")?,
                        "NLINES" => n_lines = num(kv[1], lineno, "NLINES")?,
                        other => return Err(parse_err(lineno, format!("unknown key {other}"))),
                    }
                }
            }
            "TIME" => {
                if toks.len() < 3 {
                    return Err(parse_err(lineno, "expected TIME <s> GEN|DATA ..."));
                }
                let time: f64 = num(toks[1], lineno, "time")?;
                if !time.is_finite() {
                    return Err(parse_err(lineno, "time must be finite"));
                }
                if let Some(prev) = timeslices.last() {
                    if time < prev.time {
                        return Err(parse_err(lineno, "times must be non-decreasing"));
                    }
                }
                let source = match toks[2] {
                    "GEN" => SpectrumSource::Generated(parse_gen(&toks[3..], lineno)?),
                    "DATA" => {
                        if toks.len() != 4 {
                            return Err(parse_err(lineno, "expected DATA <npix>"));
                        }
                        let npix: usize = num(toks[3], lineno, "pixel count")?;
                        let (spec, used) = parse_data(&lines[i..], npix, lineno + 1)?;
                        i += used;
                        SpectrumSource::Inline(spec)
                    }
                    other => {
                        return Err(parse_err(lineno, format!("unknown source {other}")))
                    }
                };
                timeslices.push(Timeslice { time, source });
            }
            other => return Err(parse_err(lineno, format!("unexpected token {other}"))),
        }
    }

    let lambda0 = lambda0.ok_or_else(|| parse_err(line0, "chord has no LAMBDA0"))?;
    let ion_rest = ion_rest.ok_or_else(|| parse_err(line0, "chord has no IONREST"))?;
    let line_ref = LineReference::new(lambda0, ion_rest, sigma_instr)
        .map_err(|e| parse_err(line0, e.to_string()))?;
    if n_lines == 0 {
        return Err(parse_err(line0, "NLINES must be >= 1"));
    }
    if timeslices.is_empty() {
        return Err(parse_err(line0, "chord has no TIME entries"));
    }
    Ok(ChordBlock {
        chord_id,
        line_ref,
        n_lines,
        timeslices,
        raw,
    })
}

fn parse_list(v: &str, lineno: usize, what: &str) -> Result<Vec<f64>> {
    v.split(',').map(|t| num(t, lineno, what)).collect()
}

fn parse_gen(toks: &[&str], lineno: usize) -> Result<GenRecipe> {
    let (mut amp, mut mu, mut sig) = (None, None, None);
    let mut baseline = [None, None];
    let mut noise = None;
    let mut seed = 0u64;
    let mut grid = None;
    for t in toks {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| parse_err(lineno, format!("expected KEY=VALUE, got {t:?}")))?;
        match k {
            "A" => amp = Some(parse_list(v, lineno, "A")?),
            "MU" => mu = Some(parse_list(v, lineno, "MU")?),
            "SIG" => sig = Some(parse_list(v, lineno, "SIG")?),
            "B0" => baseline[0] = Some(num(v, lineno, "B0")?),
            "B1" => baseline[1] = Some(num(v, lineno, "B1")?),
            "NOISE" => {
                noise = Some(match v {
                    "none" => Noise::None,
                    "sqrt" => Noise::SqrtGaussian,
                    _ => return Err(parse_err(lineno, format!("unknown noise {v:?}"))),
                })
            }
            "SEED" => seed = num(v, lineno, "SEED")?,
            "GRID" => {
                let parts: Vec<&str> = v.split(',').collect();
                if parts.len() != 3 {
                    return Err(parse_err(lineno, "GRID=<min>,<max>,<npix>"));
                }
                grid = Some((
                    num::<f64>(parts[0], lineno, "grid min")?,
                    num::<f64>(parts[1], lineno, "grid max")?,
                    num::<usize>(parts[2], lineno, "grid pixels")?,
                ));
            }
            other => return Err(parse_err(lineno, format!("unknown GEN key {other}"))),
        }
    }
    let missing = |k: &str| parse_err(lineno, format!("GEN missing {k}"));
    let amp = amp.ok_or_else(|| missing("A"))?;
    let mu = mu.ok_or_else(|| missing("MU"))?;
    let sig = sig.ok_or_else(|| missing("SIG"))?;
    if amp.len() != mu.len() || amp.len() != sig.len() {
        return Err(parse_err(lineno, "A, MU and SIG lists differ in length"));
    }
    let b0 = baseline[0].ok_or_else(|| missing("B0"))?;
    let mut bl = vec![b0];
    bl.extend(baseline[1]);
    let lines = amp
        .iter()
        .zip(&mu)
        .zip(&sig)
        .map(|((&a, &m), &s)| GaussianLine::new(a, m, s))
        .collect();
    let model = SpectralModel::new(bl, lines).map_err(|e| parse_err(lineno, e.to_string()))?;
    let (grid_min, grid_max, n_pixels) = grid.ok_or_else(|| missing("GRID"))?;
    let recipe = GenRecipe {
        model,
        noise: noise.ok_or_else(|| missing("NOISE"))?,
        seed,
        grid_min,
        grid_max,
        n_pixels,
    };
    recipe.grid().map_err(|e| parse_err(lineno, e.to_string()))?;
    Ok(recipe)
}

/// Parses `npix` data rows, skipping blank and comment lines. Returns the
/// spectrum and the number of lines consumed.
fn parse_data(lines: &[&str], npix: usize, line0: usize) -> Result<(Spectrum, usize)> {
    let mut x = Vec::with_capacity(npix);
    let mut y = Vec::with_capacity(npix);
    let mut s = Vec::with_capacity(npix);
    let mut used = 0;
    while x.len() < npix {
        let Some(l) = lines.get(used) else {
            return Err(parse_err(
                line0 + used,
                format!("DATA block ended after {} of {npix} rows", x.len()),
            ));
        };
        let lineno = line0 + used;
        used += 1;
        let toks: Vec<&str> = strip_comment(l).split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 3 {
            return Err(parse_err(lineno, "expected <lambda> <counts> <sigma>"));
        }
        x.push(num(toks[0], lineno, "wavelength")?);
        y.push(num(toks[1], lineno, "counts")?);
        s.push(num(toks[2], lineno, "sigma")?);
    }
    let grid = WavelengthGrid::new(x).map_err(|e| parse_err(line0, e.to_string()))?;
    let spec = Spectrum::new(grid, y, s).map_err(|e| parse_err(line0, e.to_string()))?;
    Ok((spec, used))
}

fn join(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn render_stanza(b: &ChordBlock) -> String {
    let mut s = String::new();
    let r = &b.line_ref;
    let _ = writeln!(s, "{CHORD_KEYWORD} {}", b.chord_id);
    let _ = writeln!(
        s,
        "  LAMBDA0 {}  IONREST {:e}  SIGINSTR {}  NLINES {}",
        r.lambda0, r.ion_rest_energy, r.sigma_instr, b.n_lines
    );
    for ts in &b.timeslices {
        match &ts.source {
            SpectrumSource::Generated(g) => {
                let m = &g.model;
                let _ = write!(
                    s,
                    "  TIME {} GEN A={} MU={} SIG={} B0={}",
                    ts.time,
                    join(m.lines.iter().map(|l| l.amplitude)),
                    join(m.lines.iter().map(|l| l.center)),
                    join(m.lines.iter().map(|l| l.width)),
                    m.baseline[0],
                );
                if let Some(b1) = m.baseline.get(1) {
                    let _ = write!(s, " B1={b1}");
                }
                let noise = match g.noise {
                    Noise::None => "none",
                    Noise::SqrtGaussian => "sqrt",
                };
                let _ = writeln!(
                    s,
                    " NOISE={noise} SEED={} GRID={},{},{}",
                    g.seed, g.grid_min, g.grid_max, g.n_pixels
                );
            }
            SpectrumSource::Inline(spec) => {
                let _ = writeln!(s, "  TIME {} DATA {}", ts.time, spec.len());
                for ((x, y), e) in spec
                    .grid()
                    .pixels()
                    .iter()
                    .zip(spec.counts())
                    .zip(spec.sigma())
                {
                    let _ = writeln!(s, "    {x} {y} {e}");
                }
            }
        }
    }
    s
}

pub fn chord_input_name(k: usize) -> String {
    format!("chord_{k}.in")
}

pub fn fit_output_name(k: usize) -> String {
    format!("fit_{k}.out")
}

/// Writes `chord_<k>.in` (1-based) for every chord: the full header followed
/// by that chord's stanza. Returns the paths in chord order.
pub fn split_chords(input: &DischargeInput, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    input
        .chords
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let path = out_dir.join(chord_input_name(i + 1));
            let mut text = String::with_capacity(input.header.len() + c.raw.len());
            text.push_str(&input.header);
            text.push_str(&c.raw);
            fs::write(&path, text).map_err(io_err(&path))?;
            Ok(path)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub amplitude: f64,
    pub amplitude_err: f64,
    pub center: f64,
    pub center_err: f64,
    pub width: f64,
    pub width_err: f64,
}

impl LineFit {
    pub fn failed() -> Self {
        Self {
            amplitude: f64::NAN,
            amplitude_err: f64::NAN,
            center: f64::NAN,
            center_err: f64::NAN,
            width: f64::NAN,
            width_err: f64::NAN,
        }
    }

    fn values(&self) -> [f64; 6] {
        [
            self.amplitude,
            self.amplitude_err,
            self.center,
            self.center_err,
            self.width,
            self.width_err,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStatus {
    Converged(Convergence),
    Failed,
}

impl FitStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FitStatus::Converged(c) => c.as_str(),
            FitStatus::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "failed" {
            Some(FitStatus::Failed)
        } else {
            s.parse().ok().map(FitStatus::Converged)
        }
    }
}

/// One fitted timeslice as stored in `fit_<k>.out`.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutputRecord {
    pub chord_id: String,
    pub time: f64,
    pub lines: Vec<LineFit>,
    pub chi2: f64,
    pub dof: usize,
    pub status: FitStatus,
    pub ion: IonProperties,
}

impl FitOutputRecord {
    pub fn failed(chord_id: &str, time: f64, n_lines: usize) -> Self {
        Self {
            chord_id: chord_id.to_string(),
            time,
            lines: vec![LineFit::failed(); n_lines],
            chi2: f64::NAN,
            dof: 0,
            status: FitStatus::Failed,
            ion: IonProperties {
                velocity: f64::NAN,
                temperature: f64::NAN,
                radiance: f64::NAN,
            },
        }
    }
}

pub const LINE_FIELDS: [&str; 6] = ["A", "A_err", "mu", "mu_err", "sigma", "sigma_err"];
pub const TAIL_NUMERIC_FIELDS: [&str; 3] = ["velocity", "temperature", "radiance"];

/// Nine significant digits.
fn fmt9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Renders records of a single chord in the fit output format.
pub fn format_fit_output(chord_id: &str, records: &[FitOutputRecord]) -> Result<String> {
    if let Some(r) = records.iter().find(|r| r.chord_id != chord_id) {
        return Err(ChordIoError::MixedChords(
            chord_id.to_string(),
            r.chord_id.clone(),
        ));
    }
    let mut s = String::new();
    let _ = writeln!(s, "# chord {chord_id}");
    let _ = writeln!(
        s,
        "# time [A A_err mu mu_err sigma sigma_err]... chi2 dof converged velocity temperature radiance"
    );
    for r in records {
        let mut fields = vec![fmt9(r.time)];
        for l in &r.lines {
            fields.extend(l.values().iter().map(|&v| fmt9(v)));
        }
        fields.push(fmt9(r.chi2));
        fields.push(r.dof.to_string());
        fields.push(r.status.as_str().to_string());
        fields.push(fmt9(r.ion.velocity));
        fields.push(fmt9(r.ion.temperature));
        fields.push(fmt9(r.ion.radiance));
        s.push_str(&fields.join(" "));
        s.push('\n');
    }
    Ok(s)
}

/// Writes `fit_<k>.out` into `out_dir`.
pub fn write_fit_output(
    chord_id: &str,
    records: &[FitOutputRecord],
    k: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    let text = format_fit_output(chord_id, records)?;
    let path = out_dir.join(fit_output_name(k));
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

pub fn parse_fit_output(text: &str) -> Result<Vec<FitOutputRecord>> {
    let mut chord: Option<String> = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let toks: Vec<&str> = comment.split_whitespace().collect();
            if toks.first() == Some(&"chord") {
                if toks.len() != 2 {
                    return Err(parse_err(lineno, "expected '# chord <id>'"));
                }
                chord = Some(toks[1].to_string());
            }
            continue;
        }
        let chord_id = chord
            .clone()
            .ok_or_else(|| parse_err(lineno, "data before '# chord' header"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 7 || !(toks.len() - 7).is_multiple_of(6) {
            return Err(parse_err(
                lineno,
                format!("expected 7 + 6*n fields, got {}", toks.len()),
            ));
        }
        let n_lines = (toks.len() - 7) / 6;
        let f = |j: usize, what: &str| num::<f64>(toks[j], lineno, what);
        let time = f(0, "time")?;
        let mut lines = Vec::with_capacity(n_lines);
        for k in 0..n_lines {
            let b = 1 + 6 * k;
            lines.push(LineFit {
                amplitude: f(b, "A")?,
                amplitude_err: f(b + 1, "A_err")?,
                center: f(b + 2, "mu")?,
                center_err: f(b + 3, "mu_err")?,
                width: f(b + 4, "sigma")?,
                width_err: f(b + 5, "sigma_err")?,
            });
        }
        let t = 1 + 6 * n_lines;
        let chi2 = f(t, "chi2")?;
        let dof = num::<usize>(toks[t + 1], lineno, "dof")?;
        let status = FitStatus::parse(toks[t + 2])
            .ok_or_else(|| parse_err(lineno, format!("unknown status {:?}", toks[t + 2])))?;
        let ion = IonProperties {
            velocity: f(t + 3, "velocity")?,
            temperature: f(t + 4, "temperature")?,
            radiance: f(t + 5, "radiance")?,
        };
        out.push(FitOutputRecord {
            chord_id,
            time,
            lines,
            chi2,
            dof,
            status,
            ion,
        });
    }
    Ok(out)
}
