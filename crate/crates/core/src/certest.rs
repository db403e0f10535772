//! Golden-file regression harness for fit output files.
//!
//! `generate_reference` stores a known-good run's `fit_<k>.out` files with a
//! manifest of SHA-256 digests. `compare` parses a later run's outputs and
//! checks every field against the reference: numeric fields with
//! `|a − b| ≤ abs + rel·max(|a|, |b|)`, enumerated fields exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chordio::{parse_fit_output, FitOutputRecord, LINE_FIELDS};

pub const MANIFEST_NAME: &str = "MANIFEST";

#[derive(Debug, Error)]
pub enum CertestError {
    #[error("no fit_<k>.out files in {0}")]
    NothingToStore(PathBuf),
    #[error("reference directory {0} already holds a manifest; pass overwrite to replace it")]
    ReferenceExists(PathBuf),
    #[error("manifest line {line}: {msg}")]
    BadManifest { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = CertestError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CertestError + '_ {
    move |source| CertestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldTolerance {
    pub rel: f64,
    pub abs: f64,
}

impl FieldTolerance {
    /// Pass iff `|a − b| ≤ abs + rel·max(|a|, |b|)`. Two NaNs are equal.
    pub fn accepts(&self, a: f64, b: f64) -> bool {
        if a.is_nan() || b.is_nan() {
            return a.is_nan() && b.is_nan();
        }
        if a == b {
            return true;
        }
        (a - b).abs() <= self.abs + self.rel * a.abs().max(b.abs())
    }
}

/// Default tolerance plus overrides keyed by field name (`A`, `mu_err`,
/// `chi2`, `velocity`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceSpec {
    pub rel: f64,
    pub abs: f64,
    #[serde(default)]
    pub overrides: BTreeMap<String, FieldTolerance>,
}

impl Default for ToleranceSpec {
    fn default() -> Self {
        Self {
            rel: 1e-6,
            abs: 1e-9,
            overrides: BTreeMap::new(),
        }
    }
}

impl ToleranceSpec {
    pub fn exact() -> Self {
        Self {
            rel: 0.0,
            abs: 0.0,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with_override(mut self, field: &str, rel: f64, abs: f64) -> Self {
        self.overrides
            .insert(field.to_string(), FieldTolerance { rel, abs });
        self
    }

    pub fn for_field(&self, field: &str) -> FieldTolerance {
        self.overrides.get(field).copied().unwrap_or(FieldTolerance {
            rel: self.rel,
            abs: self.abs,
        })
    }

    pub fn validate(&self) -> bool {
        let ok = |t: FieldTolerance| t.rel >= 0.0 && t.abs >= 0.0;
        ok(FieldTolerance {
            rel: self.rel,
            abs: self.abs,
        }) && self.overrides.values().all(|&t| ok(t))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub digest: String,
    pub bytes: u64,
}

fn digest_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

fn is_fit_output(name: &str) -> bool {
    name.strip_prefix("fit_")
        .and_then(|s| s.strip_suffix(".out"))
        .is_some_and(|k| k.parse::<usize>().is_ok())
}

fn fit_index(name: &str) -> usize {
    name[4..name.len() - 4].parse().unwrap_or(usize::MAX)
}

/// `fit_<k>.out` names in `dir`, ordered by k.
fn list_outputs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if is_fit_output(&name) && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort_by_key(|n| fit_index(n));
    Ok(names)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{} {} {}\n", e.name, e.digest, e.bytes))
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let toks: Vec<&str> = l.split_whitespace().collect();
            let bad = |msg: &str| CertestError::BadManifest {
                line: i + 1,
                msg: msg.to_string(),
            };
            if toks.len() != 3 {
                return Err(bad("expected 'name digest byte-count'"));
            }
            Ok(ManifestEntry {
                name: toks[0].to_string(),
                digest: toks[1].to_string(),
                bytes: toks[2].parse().map_err(|_| bad("invalid byte count"))?,
            })
        })
        .collect()
}

/// Copy every `fit_<k>.out` from `run_output_dir` into `reference_dir` and
/// write the manifest. Returns the number of files stored.
pub fn generate_reference(
    run_output_dir: &Path,
    reference_dir: &Path,
    overwrite: bool,
) -> Result<usize> {
    let names = list_outputs(run_output_dir)?;
    if names.is_empty() {
        return Err(CertestError::NothingToStore(run_output_dir.to_path_buf()));
    }
    let manifest_path = reference_dir.join(MANIFEST_NAME);
    if manifest_path.exists() {
        if !overwrite {
            return Err(CertestError::ReferenceExists(reference_dir.to_path_buf()));
        }
        // drop stale outputs from the previous reference
        for old in list_outputs(reference_dir)? {
            let p = reference_dir.join(old);
            fs::remove_file(&p).map_err(io_err(&p))?;
        }
    }
    fs::create_dir_all(reference_dir).map_err(io_err(reference_dir))?;
    let mut entries = Vec::with_capacity(names.len());
    for name in names {
        let src = run_output_dir.join(&name);
        let data = fs::read(&src).map_err(io_err(&src))?;
        let dst = reference_dir.join(&name);
        fs::write(&dst, &data).map_err(io_err(&dst))?;
        entries.push(ManifestEntry {
            digest: digest_hex(&data),
            bytes: data.len() as u64,
            name,
        });
    }
    fs::write(&manifest_path, format_manifest(&entries)).map_err(io_err(&manifest_path))?;
    Ok(entries.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub file: String,
    /// 1-based data record within the file; 0 for file-level problems.
    pub record: usize,
    pub field: String,
    pub reference: String,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileVerdict {
    pub file: String,
    pub pass: bool,
    /// Test file bytes equal the reference digest.
    pub digest_match: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Deviation {
    pub worst_abs: f64,
    pub worst_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertestReport {
    pub compared: usize,
    pub files: Vec<FileVerdict>,
    /// Worst deviation per field name across all files.
    pub deviations: BTreeMap<String, Deviation>,
    pub violations: Vec<Violation>,
    pub missing: Vec<String>,
    pub extra: Vec<String>,
    pub pass: bool,
}

impl CertestReport {
    /// Distinct (file, field) pairs out of tolerance.
    pub fn violation_count(&self) -> usize {
        self.violations
            .iter()
            .map(|v| (v.file.as_str(), v.field.as_str()))
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn max_abs_deviation(&self) -> f64 {
        self.deviations
            .values()
            .map(|d| d.worst_abs)
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        let _ = writeln!(
            s,
            "certest: {verdict}  compared={} missing={} extra={} violations={}",
            self.compared,
            self.missing.len(),
            self.extra.len(),
            self.violation_count()
        );
        for m in &self.missing {
            let _ = writeln!(s, "  missing  {m}");
        }
        for f in self.files.iter().filter(|f| f.error.is_some()) {
            let _ = writeln!(s, "  error    {}: {}", f.file, f.error.as_deref().unwrap_or(""));
        }
        if !self.violations.is_empty() {
            let _ = writeln!(
                s,
                "  {:<14} {:>6}  {:<12} {:>20} {:>20}",
                "file", "record", "field", "reference", "test"
            );
            for v in &self.violations {
                let _ = writeln!(
                    s,
                    "  {:<14} {:>6}  {:<12} {:>20} {:>20}",
                    v.file, v.record, v.field, v.reference, v.test
                );
            }
        }
        s
    }
}

/// Flattened (field name, value) pairs in output-column order, excluding the
/// enumerated fields.
fn numeric_fields(r: &FitOutputRecord) -> Vec<(String, f64)> {
    let mut out = vec![("time".to_string(), r.time)];
    for (k, l) in r.lines.iter().enumerate() {
        let vals = [
            l.amplitude,
            l.amplitude_err,
            l.center,
            l.center_err,
            l.width,
            l.width_err,
        ];
        for (name, v) in LINE_FIELDS.iter().zip(vals) {
            out.push((format!("{name}[{}]", k + 1), v));
        }
    }
    out.push(("chi2".into(), r.chi2));
    out.push(("velocity".into(), r.ion.velocity));
    out.push(("temperature".into(), r.ion.temperature));
    out.push(("radiance".into(), r.ion.radiance));
    out
}

/// Field name without a `[line]` suffix, used for tolerance lookups and the
/// per-field deviation summary.
fn base_name(field: &str) -> &str {
    field.split('[').next().unwrap_or(field)
}

struct Comparer<'a> {
    tol: &'a ToleranceSpec,
    deviations: BTreeMap<String, Deviation>,
    violations: Vec<Violation>,
}

impl Comparer<'_> {
    fn exact(&mut self, file: &str, record: usize, field: &str, a: String, b: String) -> bool {
        if a == b {
            return true;
        }
        self.violations.push(Violation {
            file: file.into(),
            record,
            field: field.into(),
            reference: a,
            test: b,
        });
        false
    }

    fn numeric(&mut self, file: &str, record: usize, field: &str, a: f64, b: f64) -> bool {
        let base = base_name(field);
        if a.is_finite() && b.is_finite() {
            let abs = (a - b).abs();
            let scale = a.abs().max(b.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            let d = self.deviations.entry(base.to_string()).or_default();
            d.worst_abs = d.worst_abs.max(abs);
            d.worst_rel = d.worst_rel.max(rel);
        }
        if self.tol.for_field(base).accepts(a, b) {
            return true;
        }
        self.violations.push(Violation {
            file: file.into(),
            record,
            field: field.into(),
            reference: format!("{a:.8e}"),
            test: format!("{b:.8e}"),
        });
        false
    }

    fn records(&mut self, file: &str, reference: &[FitOutputRecord], test: &[FitOutputRecord]) -> bool {
        let mut ok = self.exact(
            file,
            0,
            "record_count",
            reference.len().to_string(),
            test.len().to_string(),
        );
        for (i, (a, b)) in reference.iter().zip(test).enumerate() {
            let rec = i + 1;
            ok &= self.exact(file, rec, "chord", a.chord_id.clone(), b.chord_id.clone());
            ok &= self.exact(file, rec, "n_lines", a.lines.len().to_string(), b.lines.len().to_string());
            ok &= self.exact(file, rec, "dof", a.dof.to_string(), b.dof.to_string());
            ok &= self.exact(
                file,
                rec,
                "converged",
                a.status.as_str().into(),
                b.status.as_str().into(),
            );
            if a.lines.len() == b.lines.len() {
                for ((name, x), (_, y)) in numeric_fields(a).into_iter().zip(numeric_fields(b)) {
                    ok &= self.numeric(file, rec, &name, x, y);
                }
            }
        }
        ok
    }
}

/// Compare every file named in the reference manifest against `test_dir`.
pub fn compare(reference_dir: &Path, test_dir: &Path, tol: &ToleranceSpec) -> Result<CertestReport> {
    let manifest_path = reference_dir.join(MANIFEST_NAME);
    let manifest_text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest = parse_manifest(&manifest_text)?;
    let listed: BTreeSet<&str> = manifest.iter().map(|e| e.name.as_str()).collect();
    let extra: Vec<String> = list_outputs(test_dir)?
        .into_iter()
        .filter(|n| !listed.contains(n.as_str()))
        .collect();

    let mut cmp = Comparer {
        tol,
        deviations: BTreeMap::new(),
        violations: Vec::new(),
    };
    let mut files = Vec::new();
    let mut missing = Vec::new();

    for entry in &manifest {
        let test_path = test_dir.join(&entry.name);
        let Ok(test_bytes) = fs::read(&test_path) else {
            missing.push(entry.name.clone());
            continue;
        };
        let ref_path = reference_dir.join(&entry.name);
        let verdict = |pass: bool, digest_match: bool, error: Option<String>| FileVerdict {
            file: entry.name.clone(),
            pass,
            digest_match,
            error,
        };
        let ref_bytes = match fs::read(&ref_path) {
            Ok(b) => b,
            Err(e) => {
                files.push(verdict(false, false, Some(format!("reference unreadable: {e}"))));
                continue;
            }
        };
        if digest_hex(&ref_bytes) != entry.digest || ref_bytes.len() as u64 != entry.bytes {
            files.push(verdict(
                false,
                false,
                Some("reference file does not match its manifest digest".into()),
            ));
            continue;
        }
        let digest_match = digest_hex(&test_bytes) == entry.digest;
        let parsed = (
            parse_fit_output(&String::from_utf8_lossy(&ref_bytes)),
            parse_fit_output(&String::from_utf8_lossy(&test_bytes)),
        );
        match parsed {
            (Ok(a), Ok(b)) => {
                let pass = cmp.records(&entry.name, &a, &b);
                files.push(verdict(pass, digest_match, None));
            }
            (Err(e), _) => files.push(verdict(false, digest_match, Some(format!("reference: {e}")))),
            (_, Err(e)) => files.push(verdict(false, digest_match, Some(format!("test: {e}")))),
        }
    }

    let pass = missing.is_empty() && files.iter().all(|f| f.pass);
    Ok(CertestReport {
        compared: files.len(),
        files,
        deviations: cmp.deviations,
        violations: cmp.violations,
        missing,
        extra,
        pass,
    })
}
