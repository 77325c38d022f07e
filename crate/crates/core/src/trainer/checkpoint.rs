use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{EmaState, ExperimentConfig, Trainer};
use crate::adversarial::DiscriminatorBank;
use crate::error::{Error, Result};
use crate::networks::Model;
use crate::nn::{AdamW, ParamStore};

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Human-readable sidecar written next to every binary checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    /// `"train"` for full training state, `"model"` for weights only.
    pub kind: String,
    pub step: usize,
    pub config: ExperimentConfig,
    pub parameters: usize,
    pub has_ema: bool,
    pub layout: Vec<(String, Vec<usize>)>,
}

#[derive(Serialize, Deserialize)]
struct TrainState {
    model: Model,
    store: ParamStore,
    bank: DiscriminatorBank,
    disc_store: ParamStore,
    g_opt: AdamW,
    d_opt: AdamW,
    ema: EmaState,
    rng: ChaCha8Rng,
    step: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelState {
    model: Model,
    store: ParamStore,
    ema: Option<EmaState>,
}

fn manifest_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

/// Differences between two serialisable values as `path: left -> right` lines.
pub fn config_diff<T: Serialize>(left: &T, right: &T) -> Vec<String> {
    fn walk(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    walk(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
                }
            }
            _ if a != b => out.push(format!("{path}: {a} -> {b}")),
            _ => {}
        }
    }
    let a = serde_json::to_value(left).unwrap_or(Value::Null);
    let b = serde_json::to_value(right).unwrap_or(Value::Null);
    let mut out = Vec::new();
    walk("", &a, &b, &mut out);
    out
}

fn write_pair<S: Serialize>(path: &Path, state: &S, manifest: &CheckpointManifest) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    bincode::serialize_into(BufWriter::new(File::create(path)?), state)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(manifest_path(path))?), manifest)?;
    Ok(())
}

pub fn read_manifest(ckpt: &Path) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = serde_json::from_reader(BufReader::new(File::open(manifest_path(ckpt))?))?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {}", m.format)));
    }
    Ok(m)
}

fn check_layout(manifest: &CheckpointManifest, store: &ParamStore) -> Result<()> {
    if store.layout() != manifest.layout {
        return Err(Error::Checkpoint("stored parameters do not match the manifest layout".into()));
    }
    let mut fresh = ParamStore::shape_only();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Model::build(&manifest.config.architecture, &manifest.config.schedule, &mut fresh, &mut rng)?;
    let expected = fresh.layout();
    let base: Vec<_> = manifest.layout.iter().filter(|(n, _)| !n.starts_with("lora.")).cloned().collect();
    if base != expected {
        let first = base
            .iter()
            .zip(&expected)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("{} {:?} vs {} {:?}", a.0, a.1, b.0, b.1))
            .unwrap_or_else(|| format!("{} vs {} parameters", base.len(), expected.len()));
        return Err(Error::Checkpoint(format!("architecture layout mismatch: {first}")));
    }
    Ok(())
}

fn refuse_on_drift(found: &ExperimentConfig, expected: &ExperimentConfig) -> Result<()> {
    let mut diff = config_diff(&found.architecture, &expected.architecture);
    diff.extend(config_diff(&found.schedule, &expected.schedule).into_iter().map(|d| format!("schedule.{d}")));
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("configuration mismatch:\n  {}", diff.join("\n  "))))
    }
}

impl Trainer {
    /// Writes `{dir}/{step}.ckpt` and its `{step}.json` manifest.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.ckpt", self.step));
        let state = TrainState {
            model: self.model.clone(),
            store: self.store.clone(),
            bank: self.bank.clone(),
            disc_store: self.disc_store.clone(),
            g_opt: self.g_opt.clone(),
            d_opt: self.d_opt.clone(),
            ema: self.ema.clone(),
            rng: self.rng.clone(),
            step: self.step,
        };
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT,
            kind: "train".into(),
            step: self.step,
            config: self.config.clone(),
            parameters: self.store.total_count(),
            has_ema: true,
            layout: self.store.layout(),
        };
        write_pair(&path, &state, &manifest)?;
        Ok(path)
    }

    /// Restores full training state. With `expected`, refuses checkpoints
    /// whose architecture or noise schedule differ and lists the differences.
    pub fn load(path: &Path, expected: Option<&ExperimentConfig>) -> Result<Trainer> {
        let manifest = read_manifest(path)?;
        if manifest.kind != "train" {
            return Err(Error::Checkpoint(format!("{} holds weights only", path.display())));
        }
        if let Some(exp) = expected {
            refuse_on_drift(&manifest.config, exp)?;
        }
        let state: TrainState = bincode::deserialize_from(BufReader::new(File::open(path)?))?;
        check_layout(&manifest, &state.store)?;
        let mut t = Trainer::assemble(
            manifest.config,
            state.model,
            state.store,
            state.bank,
            state.disc_store,
            state.ema,
            state.rng,
        )?;
        t.g_opt = state.g_opt;
        t.d_opt = state.d_opt;
        t.step = state.step;
        Ok(t)
    }
}

/// Writes a weights-only checkpoint (for example after adaptation).
pub fn save_model(
    path: &Path,
    model: &Model,
    store: &ParamStore,
    config: &ExperimentConfig,
    step: usize,
) -> Result<()> {
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT,
        kind: "model".into(),
        step,
        config: config.clone(),
        parameters: store.total_count(),
        has_ema: false,
        layout: store.layout(),
    };
    let state = ModelState {
        model: model.clone(),
        store: store.clone(),
        ema: None,
    };
    write_pair(path, &state, &manifest)
}

/// Model and generator weights from either checkpoint kind. `use_ema`
/// substitutes the moving-average weights when they exist.
pub fn load_for_inference(path: &Path, use_ema: bool) -> Result<(Model, ParamStore, CheckpointManifest)> {
    let manifest = read_manifest(path)?;
    let reader = BufReader::new(File::open(path)?);
    let (model, mut store, ema) = match manifest.kind.as_str() {
        "train" => {
            let s: TrainState = bincode::deserialize_from(reader)?;
            (s.model, s.store, Some(s.ema))
        }
        "model" => {
            let s: ModelState = bincode::deserialize_from(reader)?;
            (s.model, s.store, s.ema)
        }
        other => return Err(Error::Checkpoint(format!("unknown checkpoint kind {other:?}"))),
    };
    check_layout(&manifest, &store)?;
    if use_ema {
        match ema {
            Some(e) => e.apply_to(&mut store)?,
            None => log::warn!("{} has no EMA weights; using raw weights", path.display()),
        }
    }
    Ok((model, store, manifest))
}
