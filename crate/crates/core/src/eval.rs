//! Objective evaluation of enhanced recordings against references.
//!
//! Native metrics are computed in-process. Anything else (PESQ, STOI, DNSMOS,
//! WER, ...) is delegated to an external command through [`MetricAdapter`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::audio::{log_spectral_distance, mel_spectrogram, read_wav, AudioBuffer, SpectralConfig};
use crate::error::{Error, Result};

pub const NATIVE_METRICS: [&str; 3] = ["lsd", "mel_distance", "snr_gain"];

/// An external metric: `command` is run with `{ref}` and `{est}` replaced by
/// file paths, and the first capture group of `pattern` applied to stdout
/// is parsed as the value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricAdapter {
    pub name: String,
    pub command: Vec<String>,
    #[serde(default = "default_pattern")]
    pub pattern: String,
}

fn default_pattern() -> String {
    r"([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*$".to_string()
}

impl MetricAdapter {
    pub fn new(name: impl Into<String>, command: Vec<String>) -> Self {
        MetricAdapter {
            name: name.into(),
            command,
            pattern: default_pattern(),
        }
    }

    pub fn run(&self, reference: &Path, estimate: &Path) -> Result<f64> {
        let (prog, args) = self
            .command
            .split_first()
            .ok_or_else(|| Error::Config(format!("adapter {} has an empty command", self.name)))?;
        let subst = |a: &String| {
            a.replace("{ref}", &reference.to_string_lossy())
                .replace("{est}", &estimate.to_string_lossy())
        };
        let out = Command::new(subst(prog)).args(args.iter().map(subst)).output()?;
        if !out.status.success() {
            return Err(Error::InvalidInput(format!(
                "{} exited with {}: {}",
                self.name,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let re = Regex::new(&self.pattern).map_err(|e| Error::Config(e.to_string()))?;
        let text = String::from_utf8_lossy(&out.stdout);
        re.captures(text.trim())
            .and_then(|c| c.get(1))
            .and_then(|m| m.as_str().parse::<f64>().ok())
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::InvalidInput(format!("{}: no value in output {:?}", self.name, text.trim())))
    }
}

/// What to compute.
#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Native metric names, in column order.
    pub native: Vec<String>,
    pub adapters: Vec<MetricAdapter>,
    /// Degraded inputs, needed for `snr_gain`; the metric is omitted without it.
    pub input_dir: Option<PathBuf>,
    pub spectral: SpectralConfig,
}

impl EvalOptions {
    pub fn native_only(spectral: SpectralConfig, input_dir: Option<PathBuf>) -> Self {
        EvalOptions {
            native: NATIVE_METRICS.iter().map(|s| s.to_string()).collect(),
            adapters: Vec::new(),
            input_dir,
            spectral,
        }
    }

    fn columns(&self) -> Vec<String> {
        self.native
            .iter()
            .filter(|m| m.as_str() != "snr_gain" || self.input_dir.is_some())
            .cloned()
            .chain(self.adapters.iter().map(|a| a.name.clone()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub values: BTreeMap<String, f64>,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    /// Stems present in only one directory.
    pub skipped: Vec<String>,
}

impl EvaluationReport {
    /// Arithmetic mean over rows that produced the metric, and that count.
    pub fn aggregate(&self, metric: &str) -> Option<(f64, usize)> {
        let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.values.get(metric).copied()).collect();
        (!vals.is_empty()).then(|| (vals.iter().sum::<f64>() / vals.len() as f64, vals.len()))
    }

    pub fn failures(&self, metric: &str) -> usize {
        self.rows.iter().filter(|r| !r.values.contains_key(metric)).count()
    }

    pub fn is_partial(&self) -> bool {
        !self.skipped.is_empty() || self.rows.iter().any(|r| !r.errors.is_empty())
    }

    /// Tab-separated table in fixed column order, followed by a `#` summary block.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id");
        for c in &self.columns {
            s.push('\t');
            s.push_str(c);
        }
        s.push_str("\tstatus\n");
        for r in &self.rows {
            s.push_str(&r.id);
            for c in &self.columns {
                match r.values.get(c) {
                    Some(v) => write!(s, "\t{v:.6}").unwrap(),
                    None => s.push_str("\tNA"),
                }
            }
            if r.errors.is_empty() {
                s.push_str("\tok\n");
            } else {
                writeln!(s, "\terror: {}", r.errors.join("; ").replace(['\t', '\n'], " ")).unwrap();
            }
        }
        s.push_str("# summary\n");
        for c in &self.columns {
            match self.aggregate(c) {
                Some((m, n)) => writeln!(s, "# mean\t{c}\t{m:.6}\tn={n}\tfailed={}", self.failures(c)).unwrap(),
                None => writeln!(s, "# mean\t{c}\tNA\tn=0\tfailed={}", self.failures(c)).unwrap(),
            }
        }
        for k in &self.skipped {
            writeln!(s, "# skipped\t{k}").unwrap();
        }
        s
    }
}

fn snr_db(clean: &AudioBuffer, other: &AudioBuffer) -> f64 {
    let sig: f64 = clean.samples.iter().map(|v| v * v).sum();
    let err: f64 = clean.samples.iter().zip(&other.samples).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 * ((sig + 1e-20) / (err + 1e-20)).log10()
}

/// Mean absolute difference of log10 mel power spectra.
pub fn mel_distance(reference: &AudioBuffer, estimate: &AudioBuffer, cfg: &SpectralConfig) -> Result<f64> {
    if reference.len() != estimate.len() || reference.sample_rate != estimate.sample_rate {
        return Err(Error::InvalidInput("mel distance needs matching signals".into()));
    }
    let a = mel_spectrogram(reference, cfg)?.mapv(|p| (p + 1e-10).log10());
    let b = mel_spectrogram(estimate, cfg)?.mapv(|p| (p + 1e-10).log10());
    Ok((a - b).mapv(f64::abs).mean().unwrap_or(0.0))
}

/// Native metric `name` between loaded signals.
pub fn native_metric(
    name: &str,
    reference: &AudioBuffer,
    estimate: &AudioBuffer,
    input: Option<&AudioBuffer>,
    cfg: &SpectralConfig,
) -> Result<f64> {
    let check = |b: &AudioBuffer| {
        if b.len() != reference.len() || b.sample_rate != reference.sample_rate {
            Err(Error::InvalidInput(format!(
                "length/rate mismatch: {} @ {} Hz vs reference {} @ {} Hz",
                b.len(),
                b.sample_rate,
                reference.len(),
                reference.sample_rate
            )))
        } else {
            Ok(())
        }
    };
    check(estimate)?;
    match name {
        "lsd" => log_spectral_distance(reference, estimate, cfg),
        "mel_distance" => mel_distance(reference, estimate, cfg),
        "snr_gain" => {
            let input = input.ok_or_else(|| Error::InvalidInput("snr_gain needs the degraded input".into()))?;
            check(input)?;
            Ok(snr_db(reference, estimate) - snr_db(reference, input))
        }
        other => Err(Error::Config(format!("unknown metric {other:?}"))),
    }
}

fn wav_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.extension().and_then(|x| x.to_str()).is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), p);
            }
        }
    }
    Ok(out)
}

fn evaluate_one(id: &str, reference: &Path, estimate: &Path, opts: &EvalOptions, columns: &[String]) -> ReportRow {
    let mut row = ReportRow {
        id: id.to_string(),
        values: BTreeMap::new(),
        errors: Vec::new(),
    };
    let loaded = read_wav(reference).and_then(|r| read_wav(estimate).map(|e| (r, e)));
    let input = opts.input_dir.as_ref().map(|d| read_wav(d.join(format!("{id}.wav"))));
    let native: Vec<&String> = columns.iter().filter(|c| opts.native.contains(c)).collect();
    match &loaded {
        Ok((r, e)) => {
            for m in native {
                let inp = match &input {
                    Some(Ok(b)) => Some(b),
                    Some(Err(err)) if m == "snr_gain" => {
                        row.errors.push(format!("snr_gain: {err}"));
                        continue;
                    }
                    _ => None,
                };
                match native_metric(m, r, e, inp, &opts.spectral) {
                    Ok(v) => {
                        row.values.insert(m.clone(), v);
                    }
                    Err(err) => row.errors.push(format!("{m}: {err}")),
                }
            }
        }
        Err(err) => row.errors.push(format!("load: {err}")),
    }
    for a in &opts.adapters {
        match a.run(reference, estimate) {
            Ok(v) => {
                row.values.insert(a.name.clone(), v);
            }
            Err(err) => row.errors.push(format!("{}: {err}", a.name)),
        }
    }
    row
}

/// Evaluates every `*.wav` stem present in both directories.
///
/// Rows are ordered by stem. Per-file failures are recorded in the row and
/// excluded from aggregates; the call fails only if no stem matches.
pub fn evaluate(ref_dir: &Path, est_dir: &Path, opts: &EvalOptions) -> Result<EvaluationReport> {
    for name in &opts.native {
        if !NATIVE_METRICS.contains(&name.as_str()) {
            return Err(Error::Config(format!("unknown native metric {name:?}")));
        }
    }
    let refs = wav_stems(ref_dir)?;
    let ests = wav_stems(est_dir)?;
    let skipped: Vec<String> = refs
        .keys()
        .filter(|k| !ests.contains_key(*k))
        .chain(ests.keys().filter(|k| !refs.contains_key(*k)))
        .cloned()
        .collect();
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> =
        refs.iter().filter_map(|(k, r)| ests.get(k).map(|e| (k, r, e))).collect();
    if pairs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no matching stems between {} and {}",
            ref_dir.display(),
            est_dir.display()
        )));
    }
    let columns = opts.columns();
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(pairs.len());
    let chunk = pairs.len().div_ceil(workers);
    let rows: Vec<ReportRow> = std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| {
                let columns = &columns;
                s.spawn(move || {
                    part.iter()
                        .map(|(id, r, e)| evaluate_one(id, r, e, opts, columns))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    Ok(EvaluationReport { columns, rows, skipped })
}
