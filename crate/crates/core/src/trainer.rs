//! Training loop: batches, the combined objective, AdamW with cosine decay,
//! CSV logging and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::data::{generate, make_batch, Dataset, PairBatch, Split};
use crate::error::{CadaError, Result};
use crate::losses::{cada_forward, LossBreakdown};
use crate::model::CadaModel;
use crate::numerics::{
    clip_grad_norm, zero_grads, AdamW, AdamWConfig, Checkpoint, CosineSchedule, Moments, NamedArray, Parameter,
};

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "step,ndf,atp,ara,total,lr";
pub const CONFIG_FILE: &str = "config.txt";
pub const RUN_FILE: &str = "run.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Mixed into the seed of the per-step batch generator so it never coincides
/// with the initialisation stream.
const BATCH_SEED_SALT: u64 = 0x5eed_ba7c_0000_0001;

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub ndf: f64,
    pub atp: f64,
    pub ara: f64,
    pub total: f64,
    pub lr: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.ndf, self.atp, self.ara, self.total, self.lr)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let num = |i: usize| -> Result<f64> {
            f.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CadaError::Load(format!("bad training log row {line:?}")))
        };
        if f.len() != 6 {
            return Err(CadaError::Load(format!("bad training log row {line:?}")));
        }
        Ok(LogRow { step: num(0)? as usize, ndf: num(1)?, atp: num(2)?, ara: num(3)?, total: num(4)?, lr: num(5)? })
    }
}

/// Reads a CSV training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| CadaError::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(LogRow::parse).collect()
}

/// Training steps implied by the config for a train split of `n_records` pairs.
pub fn total_steps(config: &Config, n_records: usize) -> usize {
    if config.train.steps > 0 {
        config.train.steps
    } else {
        config.train.epochs * n_records.div_ceil(config.train.batch_size)
    }
}

/// Fills in dataset-dependent fields and validates the result.
pub fn resolve_config(config: &Config, data: &Dataset) -> Result<Config> {
    let mut c = config.clone();
    if c.model.vocab_size == 0 {
        c.model.vocab_size = data.vocab.len();
    } else if c.model.vocab_size != data.vocab.len() {
        return Err(CadaError::Config(format!(
            "model.vocab_size = {} but the dataset vocabulary has {} entries",
            c.model.vocab_size,
            data.vocab.len()
        )));
    }
    if data.image_size() != c.model.image_size || data.images.first().map(|i| i.shape[2]) != Some(c.model.channels) {
        return Err(CadaError::Config(format!(
            "dataset images are {:?}, model expects {}x{}x{}",
            data.images.first().map(|i| i.shape),
            c.model.image_size,
            c.model.image_size,
            c.model.channels
        )));
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Serialize)]
struct RunMetadata<'a> {
    seed: u64,
    config_hash: &'a str,
    dataset: String,
    dataset_manifest_sha256: &'a str,
    total_steps: usize,
    train_records: usize,
    vocab_size: usize,
}

/// Extra controls that do not change what is being trained.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop after this global step (the schedule still spans the full run).
    pub stop_after: Option<usize>,
    /// Print a progress line every this many steps.
    pub progress_every: Option<usize>,
}

pub struct Trainer<'a> {
    pub config: Config,
    pub model: CadaModel<f32>,
    pub optimizer: AdamW<f32>,
    pub schedule: CosineSchedule,
    /// Completed optimizer steps.
    pub step: usize,
    pub total_steps: usize,
    data: &'a Dataset,
    pool: Vec<usize>,
    params: Vec<Parameter<f32>>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &Config, data: &'a Dataset) -> Result<Self> {
        let config = resolve_config(config, data)?;
        let model = CadaModel::new(&config.model, config.train.seed)?;
        Self::assemble(config, model, data)
    }

    fn assemble(config: Config, model: CadaModel<f32>, data: &'a Dataset) -> Result<Self> {
        let pool = data.split_records(Split::Train);
        if pool.len() < config.train.batch_size {
            return Err(CadaError::Validation(format!(
                "train split has {} pairs, fewer than the batch size {}",
                pool.len(),
                config.train.batch_size
            )));
        }
        let total = total_steps(&config, pool.len());
        let optimizer = AdamW::new(AdamWConfig { weight_decay: config.train.weight_decay, beta2: config.train.beta2, ..Default::default() });
        let params = model.parameters();
        Ok(Trainer {
            schedule: CosineSchedule { base_lr: config.train.lr, total_steps: total },
            config,
            model,
            optimizer,
            step: 0,
            total_steps: total,
            data,
            pool,
            params,
        })
    }

    /// Restores model, optimizer and step from a checkpoint written by
    /// [`Trainer::checkpoint`]. The configuration must hash identically.
    pub fn resume(checkpoint: &Checkpoint, config: &Config, data: &'a Dataset) -> Result<Self> {
        let config = resolve_config(config, data)?;
        if checkpoint.config_hash != config.hash() {
            let diff = match Config::parse(&checkpoint.config) {
                Ok(saved) => saved.diff(&config).join("\n"),
                Err(e) => format!("(stored config unreadable: {e})"),
            };
            return Err(CadaError::Checkpoint(format!("config hash mismatch; changed keys:\n{diff}")));
        }
        let model = CadaModel::new(&config.model, config.train.seed)?;
        model.load_weights(checkpoint)?;
        model.check_sharing()?;
        let mut t = Self::assemble(config, model, data)?;
        t.step = checkpoint.step as usize;
        t.optimizer.state.step = checkpoint
            .extra
            .get("optimizer_step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CadaError::Checkpoint("checkpoint lacks optimizer state".into()))?;
        for p in crate::numerics::unique_parameters(&t.params) {
            let get = |kind: &str| -> Result<Vec<f32>> {
                let name = format!("optim.{kind}.{}", p.name);
                let a = checkpoint
                    .get(&name)
                    .ok_or_else(|| CadaError::Checkpoint(format!("missing optimizer tensor `{name}`")))?;
                if a.data.len() != p.tensor.numel() {
                    return Err(CadaError::Checkpoint(format!("optimizer tensor `{name}` has the wrong size")));
                }
                Ok(a.data.clone())
            };
            if t.optimizer.state.step > 0 {
                t.optimizer.state.moments.insert(p.name.clone(), Moments { m: get("m")?, v: get("v")? });
            }
        }
        Ok(t)
    }

    /// Model weights, alias table and optimizer moments.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(&self.config.hash(), &self.config.to_text(), self.step as u64);
        for (name, m) in &self.optimizer.state.moments {
            let shape = ck.get(name).map(|a| a.shape.clone()).unwrap_or_else(|| vec![m.m.len()]);
            ck.tensors.push(NamedArray { name: format!("optim.m.{name}"), shape: shape.clone(), data: m.m.clone() });
            ck.tensors.push(NamedArray { name: format!("optim.v.{name}"), shape, data: m.v.clone() });
        }
        ck.extra.insert("optimizer_step".into(), self.optimizer.state.step.to_string());
        ck
    }

    /// Deterministic batch generator for micro-batch `micro` of global step `step`.
    fn batch_rng(&self, step: usize, micro: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed ^ BATCH_SEED_SALT);
        rng.set_stream((step * self.config.train.grad_accum + micro) as u64);
        rng
    }

    pub fn batch_for(&self, step: usize, micro: usize) -> Result<PairBatch> {
        let mut rng = self.batch_rng(step, micro);
        let c = &self.config;
        let mut batch = make_batch(self.data, &self.pool, c.train.batch_size, c.model.max_len, c.loss.alpha, &mut rng)?;
        if c.train.augment {
            let size = self.data.image_size();
            for img in &mut batch.images {
                generate::augment(img, size, &mut rng);
            }
        }
        Ok(batch)
    }

    /// One optimizer step. On a non-finite loss nothing is updated and the
    /// error carries a diagnostic of the offending batch.
    pub fn train_step(&mut self) -> Result<LogRow> {
        let lr = self.schedule.lr(self.step);
        let accum = self.config.train.grad_accum;
        zero_grads(&self.params);
        let mut sum = LossBreakdown::default();
        for micro in 0..accum {
            let batch = self.batch_for(self.step, micro)?;
            let fwd = match cada_forward(&self.model, &batch, &self.config.loss) {
                Ok(f) => f,
                Err(CadaError::Numeric(msg)) => {
                    return Err(CadaError::Numeric(format!("{msg}\n{}", self.diagnostic(&batch, None, lr))))
                }
                Err(e) => return Err(e),
            };
            let b = fwd.breakdown;
            if ![b.ndf, b.atp, b.ara, b.total].iter().all(|x| x.is_finite()) {
                return Err(CadaError::Numeric(self.diagnostic(&batch, Some(&b), lr)));
            }
            let loss = if accum > 1 { fwd.total.scale(1.0 / accum as f32) } else { fwd.total };
            loss.backward()?;
            sum.ndf += b.ndf / accum as f64;
            sum.atp += b.atp / accum as f64;
            sum.ara += b.ara / accum as f64;
        }
        if self.config.train.grad_clip > 0.0 {
            clip_grad_norm(&self.params, self.config.train.grad_clip)?;
        }
        self.optimizer.step(&self.params, lr)?;
        self.step += 1;
        Ok(LogRow {
            step: self.step,
            ndf: sum.ndf,
            atp: sum.atp,
            ara: sum.ara,
            total: self.config.loss.lambda * sum.ndf + sum.atp + sum.ara,
            lr,
        })
    }

    fn diagnostic(&self, batch: &PairBatch, b: Option<&LossBreakdown>, lr: f64) -> String {
        let mut s = format!("non-finite loss at step {} (lr {lr})", self.step + 1);
        if let Some(b) = b {
            let _ = write!(s, ": ndf={} atp={} ara={} total={}", b.ndf, b.atp, b.ara, b.total);
        }
        s.push('\n');
        for (i, &r) in batch.records.iter().enumerate() {
            let rec = &self.data.records[r];
            let _ = writeln!(s, "  pair {i}: record {r} identity {} image {} caption {:?}", rec.id, rec.image_path, rec.caption);
        }
        s
    }

    fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.model.check_sharing()?;
        self.checkpoint().save(path)
    }

    /// Runs to the end of the schedule (or `opts.stop_after`), writing the
    /// run directory: effective config, run metadata, CSV log and checkpoints.
    /// A resumed trainer keeps the log rows up to its step and appends.
    pub fn run(&mut self, out_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
        fs::create_dir_all(out_dir).map_err(|e| CadaError::io(out_dir, e))?;
        let write = |name: &str, text: &str| -> Result<()> {
            let p = out_dir.join(name);
            fs::write(&p, text).map_err(|e| CadaError::io(&p, e))
        };
        write(CONFIG_FILE, &self.config.to_text())?;
        let meta = RunMetadata {
            seed: self.config.train.seed,
            config_hash: &self.config.hash(),
            dataset: self.data.root.display().to_string(),
            dataset_manifest_sha256: &self.data.manifest_sha256,
            total_steps: self.total_steps,
            train_records: self.pool.len(),
            vocab_size: self.config.model.vocab_size,
        };
        write(RUN_FILE, &(serde_json::to_string_pretty(&meta).expect("plain struct") + "\n"))?;

        let log_path = out_dir.join(LOG_FILE);
        let mut log: Vec<LogRow> = if self.step > 0 && log_path.exists() {
            read_log(&log_path)?.into_iter().filter(|r| r.step <= self.step).collect()
        } else {
            Vec::new()
        };
        let ck_dir = out_dir.join("checkpoints");
        let end = opts.stop_after.unwrap_or(self.total_steps).min(self.total_steps);
        let every = self.config.train.checkpoint_every;

        let mut result = Ok(());
        while self.step < end {
            match self.train_step() {
                Ok(row) => {
                    if let Some(n) = opts.progress_every {
                        if n > 0 && (row.step % n == 0 || row.step == end) {
                            println!(
                                "step {}/{} total {:.4} ndf {:.4} atp {:.4} ara {:.4} lr {:.2e}",
                                row.step, self.total_steps, row.total, row.ndf, row.atp, row.ara, row.lr
                            );
                        }
                    }
                    log.push(row);
                }
                Err(e) => {
                    if let CadaError::Numeric(msg) = &e {
                        let _ = write(&format!("nonfinite_step{}.txt", self.step + 1), msg);
                    }
                    result = Err(e);
                    break;
                }
            }
            if every > 0 && self.step % every == 0 && self.step < end {
                fs::create_dir_all(&ck_dir).map_err(|e| CadaError::io(&ck_dir, e))?;
                self.save_checkpoint(&ck_dir.join(format!("step{:06}.ckpt", self.step)))?;
            }
        }
        let mut text = String::from(LOG_HEADER);
        text.push('\n');
        for r in &log {
            text.push_str(&r.to_csv());
            text.push('\n');
        }
        write(LOG_FILE, &text)?;
        result?;
        let ck_path = out_dir.join(FINAL_CHECKPOINT);
        self.save_checkpoint(&ck_path)?;
        Ok(TrainOutcome { log, checkpoint: ck_path, steps: self.step })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub checkpoint: PathBuf,
    /// Completed global steps.
    pub steps: usize,
}

/// Rebuilds a trained model from a checkpoint file.
pub fn load_model(path: &Path) -> Result<(Config, CadaModel<f32>)> {
    let ck = Checkpoint::load(path)?;
    let config = Config::parse(&ck.config)?;
    if config.hash() != ck.config_hash {
        return Err(CadaError::Checkpoint(format!("{}: stored config does not match its hash", path.display())));
    }
    let model = CadaModel::new(&config.model, config.train.seed)?;
    model.load_weights(&ck)?;
    model.check_sharing()?;
    Ok((config, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, load_dataset, GenerateOptions};

    fn tiny_data(dir: &Path) -> Dataset {
        let opts = GenerateOptions { n_ids: 6, images_per_id: 2, captions_per_image: 2, ..Default::default() };
        generate_dataset(&opts, dir).unwrap();
        load_dataset(dir).unwrap()
    }

    fn tiny_config(steps: usize) -> Config {
        let mut c = Config::desk();
        for o in [
            "model.width_v=16",
            "model.width_t=16",
            "model.heads=2",
            "model.latent_dim=8",
            "model.image_layers=1",
            "model.text_layers=1",
            "train.batch_size=4",
            "loss.group_size=8",
            "loss.group_stride=8",
        ] {
            c.apply_override(o).unwrap();
        }
        c.train.steps = steps;
        c
    }

    fn weights(m: &CadaModel<f32>) -> Vec<Vec<f32>> {
        m.parameters().iter().map(|p| p.tensor.to_vec()).collect()
    }

    #[test]
    fn schedule_spans_configured_lr_to_near_zero() {
        let d = tempfile::tempdir().unwrap();
        let data = tiny_data(d.path());
        let t = Trainer::new(&tiny_config(7), &data).unwrap();
        assert_eq!(t.schedule.lr(0), t.config.train.lr);
        assert!(t.schedule.lr(t.total_steps) <= 0.01 * t.config.train.lr);
        let mut c = tiny_config(0);
        c.train.epochs = 3;
        assert_eq!(total_steps(&c, 20), 15);
    }

    #[test]
    fn runs_are_deterministic() {
        let d = tempfile::tempdir().unwrap();
        let data = tiny_data(d.path());
        let out = tempfile::tempdir().unwrap();
        let mut logs = Vec::new();
        for run in ["a", "b"] {
            let mut t = Trainer::new(&tiny_config(3), &data).unwrap();
            t.run(&out.path().join(run), &TrainOptions::default()).unwrap();
            logs.push(fs::read(out.path().join(run).join(LOG_FILE)).unwrap());
        }
        assert_eq!(logs[0], logs[1]);
        let rows = read_log(&out.path().join("a").join(LOG_FILE)).unwrap();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn logged_total_recomposes_the_terms() {
        let d = tempfile::tempdir().unwrap();
        let data = tiny_data(d.path());
        let t = Trainer::new(&tiny_config(2), &data).unwrap();
        let batch = t.batch_for(0, 0).unwrap();
        let b = cada_forward(&t.model, &batch, &t.config.loss).unwrap().breakdown;
        let recomposed = t.config.loss.lambda * b.ndf + b.atp + b.ara;
        assert!((b.total - recomposed).abs() <= 1e-5 * recomposed.abs().max(1.0), "{b:?}");
    }

    #[test]
    fn split_run_matches_straight_run() {
        let d = tempfile::tempdir().unwrap();
        let data = tiny_data(d.path());
        let out = tempfile::tempdir().unwrap();
        let cfg = tiny_config(4);

        let mut straight = Trainer::new(&cfg, &data).unwrap();
        straight.run(&out.path().join("straight"), &TrainOptions::default()).unwrap();

        let split_dir = out.path().join("split");
        let mut first = Trainer::new(&cfg, &data).unwrap();
        let o = first.run(&split_dir, &TrainOptions { stop_after: Some(2), ..Default::default() }).unwrap();
        assert_eq!(o.steps, 2);
        let ck = Checkpoint::load(&o.checkpoint).unwrap();
        let mut second = Trainer::resume(&ck, &cfg, &data).unwrap();
        assert_eq!(second.step, 2);
        second.run(&split_dir, &TrainOptions::default()).unwrap();

        assert_eq!(weights(&straight.model), weights(&second.model));
        assert_eq!(
            fs::read(out.path().join("straight").join(LOG_FILE)).unwrap(),
            fs::read(split_dir.join(LOG_FILE)).unwrap()
        );
    }

    #[test]
    fn resume_without_steps_keeps_weights() {
        let d = tempfile::tempdir().unwrap();
        let data = tiny_data(d.path());
        let cfg = tiny_config(2);
        let mut t = Trainer::new(&cfg, &data).unwrap();
        t.train_step().unwrap();
        let r = Trainer::resume(&t.checkpoint(), &cfg, &data).unwrap();
        assert_eq!(weights(&t.model), weights(&r.model));
        assert_eq!(r.optimizer.state.step, 1);
    }

    #[test]
    fn resume_rejects_a_different_config() {
        let d = tempfile::tempdir().unwrap();
        let data = tiny_data(d.path());
        let t = Trainer::new(&tiny_config(2), &data).unwrap();
        let mut other = tiny_config(2);
        other.train.lr = 1e-2;
        let err = Trainer::resume(&t.checkpoint(), &other, &data).err().unwrap();
        assert!(matches!(err, CadaError::Checkpoint(_)));
        assert!(err.to_string().contains("train.lr"), "{err}");
    }

    #[test]
    fn corrupted_checkpoint_fails_to_load() {
        let d = tempfile::tempdir().unwrap();
        let data = tiny_data(d.path());
        let t = Trainer::new(&tiny_config(2), &data).unwrap();
        let path = d.path().join("x.ckpt");
        t.checkpoint().save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CadaError::Checkpoint(_))));
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn non_finite_loss_stops_with_a_dump() {
        let d = tempfile::tempdir().unwrap();
        let data = tiny_data(d.path());
        let mut t = Trainer::new(&tiny_config(3), &data).unwrap();
        t.train_step().unwrap();
        let before = weights(&t.model);
        t.model.w_t.w.tensor.update_data(|w| w[0] = f32::NAN);
        let out = tempfile::tempdir().unwrap();
        let err = t.run(out.path(), &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, CadaError::Numeric(_)));
        assert_eq!(t.step, 1);
        let dump = fs::read_to_string(out.path().join("nonfinite_step2.txt")).unwrap();
        assert!(dump.contains("identity"), "{dump}");
        assert!(out.path().join(LOG_FILE).exists());
        assert!(!out.path().join(FINAL_CHECKPOINT).exists());
        let after = weights(&t.model);
        let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 1);
    }
}
