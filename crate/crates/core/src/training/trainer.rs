use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{lr_schedule, Checkpoint, NesterovSgd, TrainConfig};
use crate::autodiff::{Mode, Var};
use crate::data::{pad_with, DatasetManifest, ImagePair, PadPlan};
use crate::error::{Error, Result};
use crate::metrics::combined_loss;
use crate::model::ModelGraph;
use crate::tensor::{Float, Tensor};

pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    /// Global update index, starting at 0.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// Mean loss of every epoch, in order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut means: Vec<(f64, usize)> = Vec::new();
        for r in &self.rows {
            if means.len() <= r.epoch {
                means.resize(r.epoch + 1, (0.0, 0));
            }
            means[r.epoch].0 += r.loss;
            means[r.epoch].1 += 1;
        }
        means
            .into_iter()
            .filter(|&(_, n)| n > 0)
            .map(|(s, n)| s / n as f64)
            .collect()
    }

    /// CSV `epoch,step,lr,loss`; floats use their shortest exact form.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "step", "lr", "loss"])?;
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                r.step.to_string(),
                r.lr.to_string(),
                r.loss.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<train log>", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let field = |i: usize| record.get(i).unwrap_or("");
            let bad = || Error::Parse(format!("{}: bad log row {:?}", path.display(), record));
            rows.push(LogRow {
                epoch: field(0).parse().map_err(|_| bad())?,
                step: field(1).parse().map_err(|_| bad())?,
                lr: field(2).parse().map_err(|_| bad())?,
                loss: field(3).parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { rows })
    }
}

pub struct TrainOutcome<T: Float> {
    pub model: ModelGraph<T>,
    pub optimizer: NesterovSgd<T>,
    pub log: TrainLog,
    pub checkpoint: Checkpoint<T>,
    /// One file per epoch, when an output directory was given.
    pub checkpoint_paths: Vec<PathBuf>,
}

pub fn checkpoint_name(epoch: u64) -> String {
    format!("checkpoint_epoch_{:04}.fpdm", epoch)
}

/// Loads every pair of `manifest` and trains on them.
pub fn train<T: Float>(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome<T>> {
    if manifest.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    train_pairs(cfg, &manifest.load_all()?, out_dir, progress)
}

/// Trains a fresh model on in-memory pairs.
///
/// Each epoch visits the pairs in a seeded random order in mini-batches
/// (the last one may be short). Inputs and targets are edge-padded to the
/// nearest size the network accepts. With an output directory, a
/// checkpoint is written after every epoch and the log is rewritten.
pub fn train_pairs<T: Float>(
    cfg: &TrainConfig,
    pairs: &[ImagePair],
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let first = pairs
        .first()
        .ok_or_else(|| Error::Dataset("cannot train on an empty dataset".into()))?;
    let (h, w) = first.distorted.dims();
    let plan = PadPlan::for_size(h, w, cfg.model.size_multiple())?;
    let mut inputs = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let clean = pair
            .clean
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("{} has no ground truth", pair.id)))?;
        if pair.distorted.dims() != (h, w) || clean.dims() != (h, w) {
            return Err(Error::Dataset(format!(
                "{}: every training image must be {}×{}",
                pair.id, h, w
            )));
        }
        inputs.push(pad_with(&pair.distorted, &plan).to_tensor::<T>());
        targets.push(pad_with(clean, &plan).to_tensor::<T>());
    }
    let (ph, pw) = plan.padded_dims(h, w);
    let mut model_cfg = cfg.model.clone();
    model_cfg.input_height = ph;
    model_cfg.input_width = pw;

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut model = ModelGraph::<T>::build(&model_cfg, cfg.seed)?;
    model.set_mode(Mode::Train);
    let mut optimizer = NesterovSgd::new(model.params());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let mut log = TrainLog::default();
    let mut checkpoint_paths = Vec::new();
    let mut updates = 0u64;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = Tensor::stack(&chunk.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>())?;
            let y = Tensor::stack(&chunk.iter().map(|&i| targets[i].clone()).collect::<Vec<_>>())?;
            let (lr, momentum) = lr_schedule(epoch, updates, cfg);

            let vars = model.param_vars();
            let pred = model.trace(&Var::constant(x), &vars, Mode::Train, &mut dropout_rng)?;
            let loss = combined_loss(&pred, &Var::constant(y), &cfg.loss)?;
            drop(pred);
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {} at epoch {}, step {} (lr {}); lower the learning rate",
                    value, epoch, updates, lr
                )));
            }
            loss.backward()?;
            drop(loss);
            model.store_grads(&vars, false)?;
            drop(vars);
            optimizer.step(model.params_mut(), lr, momentum)?;
            model.zero_grads();

            let row = LogRow {
                epoch,
                step: updates,
                lr,
                loss: value,
            };
            progress(&row);
            log.rows.push(row);
            updates += 1;
        }
        if let Some(dir) = out_dir {
            let ckpt = Checkpoint::from_model(&model, &optimizer, epoch as u64 + 1, updates)?;
            let path = dir.join(checkpoint_name(epoch as u64 + 1));
            ckpt.save(&path)?;
            checkpoint_paths.push(path);
            log.save(&dir.join(LOG_FILE))?;
        }
    }
    let checkpoint = Checkpoint::from_model(&model, &optimizer, cfg.epochs as u64, updates)?;
    Ok(TrainOutcome {
        model,
        optimizer,
        log,
        checkpoint,
        checkpoint_paths,
    })
}
