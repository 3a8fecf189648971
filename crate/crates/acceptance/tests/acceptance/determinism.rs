//! Bit-exact training reruns and checkpoint persistence.

use std::io::Write;
use std::sync::{Arc, Mutex};

use empdial_core::checkpoint::{load_checkpoint, save_checkpoint, Manifest, MANIFEST_FILE, WEIGHTS_FILE};
use empdial_core::corpus::Example;
use empdial_core::model::Model;
use empdial_core::trainer::{validation_nll, EpochRecord, Trainer};
use empdial_core::TrainConfig;

use crate::common::{tiny_config, toy_model};

#[derive(Clone, Default)]
struct SharedBuf(Arc<Mutex<Vec<u8>>>);

impl Write for SharedBuf {
    fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(b);
        Ok(b.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn config() -> TrainConfig {
    let mut model = tiny_config(16, 1);
    model.dropout = 0.1;
    TrainConfig {
        batch_size: 3,
        warmup_epochs: 2,
        epochs: 4,
        lr: 1e-3,
        seed: 17,
        model,
        ..TrainConfig::default()
    }
}

struct Run {
    step_losses: Vec<u64>,
    history: Vec<EpochRecord>,
    log: Vec<u8>,
    model: Model<f32>,
}

fn train_once() -> Run {
    let cfg = config();
    let (model, examples) = toy_model(cfg.model.clone(), cfg.seed);
    let buf = SharedBuf::default();
    let mut trainer = Trainer::new(model, cfg).unwrap().with_log(Box::new(buf.clone()));
    let mut step_losses = Vec::new();
    for s in 0..12 {
        let batch = [s % 8, (s * 3 + 1) % 8];
        let l = if s % 2 == 0 {
            trainer.emodm_step(&examples, &batch, 0.5).unwrap()
        } else {
            trainer.respg_step(&examples, &batch, 0.5).unwrap()
        };
        step_losses.push(l.to_bits());
    }
    trainer.fit(&examples, &examples[..4]).unwrap();
    let log = buf.0.lock().unwrap().clone();
    Run {
        step_losses,
        history: trainer.history.clone(),
        log,
        model: trainer.into_model(),
    }
}

fn bits(h: &[EpochRecord]) -> Vec<(Option<u64>, Option<u64>, u64)> {
    h.iter()
        .map(|r| (r.emodm_loss.map(f64::to_bits), r.respg_loss.map(f64::to_bits), r.valid_nll.to_bits()))
        .collect()
}

pub fn run() -> Result<String, String> {
    let a = train_once();
    let b = train_once();
    if a.step_losses != b.step_losses {
        return Err("per-step losses differ between runs".into());
    }
    if bits(&a.history) != bits(&b.history) || a.log != b.log {
        return Err("epoch trajectories differ between runs".into());
    }
    if a.model.params != b.model.params {
        return Err("final parameters differ between runs".into());
    }

    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    save_checkpoint(dir.path(), &a.model, &cfg, &a.history).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(dir.path()).map_err(|e| e.to_string())?;
    let (_, examples): (_, Vec<Example>) = toy_model(cfg.model.clone(), cfg.seed);
    let before = validation_nll(&a.model, &examples).unwrap();
    let after = validation_nll(&loaded.model, &examples).unwrap();
    if before.to_bits() != after.to_bits() {
        return Err(format!("validation NLL {before} became {after} after reload"));
    }

    let again = tempfile::tempdir().unwrap();
    save_checkpoint(again.path(), &loaded.model, &loaded.config, &loaded.history).unwrap();
    for f in [MANIFEST_FILE, WEIGHTS_FILE] {
        if std::fs::read(dir.path().join(f)).unwrap() != std::fs::read(again.path().join(f)).unwrap() {
            return Err(format!("re-saved {f} differs"));
        }
    }

    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    let mut names: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
    let count = names.len();
    names.sort();
    names.dedup();
    let vocab_rows = manifest
        .tensors
        .iter()
        .filter(|t| t.shape.first() == Some(&a.model.vocab.len()))
        .count();
    if names.len() != count || count != a.model.params.len() || vocab_rows != 1 {
        return Err(format!(
            "{count} tensors, {} unique, {vocab_rows} vocabulary-sized tables",
            names.len()
        ));
    }
    let floats = a.model.params.num_values() as u64;
    if manifest.weights_bytes != 4 * floats {
        return Err("weights.bin stores more than one copy of some tensor".into());
    }
    Ok(format!(
        "{} steps and {} epochs bit-identical, reload NLL {after:.6} exact, {count} tensors stored once",
        a.step_losses.len(),
        a.history.len()
    ))
}
