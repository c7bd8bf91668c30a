//! Training, evaluation and ablation over the two-stream model.

mod adam;
mod checkpoint;
mod model;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION, MAGIC};
pub use model::{Forward, Model, ModelSpec, CLASSIFIER};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coord::{self, BranchGradients, Coordinated};
use crate::data::{Dataset, Split, Subspace, SurvivalRecord};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::objectives::{
    c_index, ce_loss, classification_metrics, nll_survival_loss, risk_score, softmax_rows, LossWeights,
    MetricReport, Task,
};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

/// RNG stream used for per-epoch data shuffling; parameter init uses stream 0.
pub const SHUFFLE_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: Option<PathBuf>,
    pub fusion: FusionConfig,
    pub cg_coord_enabled: bool,
    pub ge_con_enabled: bool,
}

impl TrainConfig {
    pub fn new(task: Task) -> Self {
        TrainConfig {
            task,
            alpha: 0.5,
            epochs: task.default_epochs(),
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: None,
            fusion: FusionConfig::default(),
            cg_coord_enabled: true,
            ge_con_enabled: true,
        }
    }

    /// `lr = 0` is accepted so that a frozen run can be checked.
    pub fn validate(&self) -> Result<()> {
        LossWeights::new(self.alpha)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        self.fusion.validate()
    }
}

/// Training signal of one mini-batch, before the optimizer update.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub loss: f64,
    pub task_loss: f64,
    /// Main prediction logits `[B, K]`.
    pub logits: Tensor,
    /// Gradient per parameter key, with the classifier entries replaced by the
    /// coordinated branch sum when CG-Coord is enabled.
    pub grads: BTreeMap<String, Tensor>,
    pub coordinated: Option<Coordinated>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train: MetricReport,
    pub val: MetricReport,
    /// Steps in which CG-Coord projected one branch.
    pub coordinated_steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub metrics_csv: String,
    pub final_val: MetricReport,
    pub checkpoint: Checkpoint,
}

pub struct Trainer<'d> {
    config: TrainConfig,
    data: &'d Dataset,
    model: Model,
    weights: LossWeights,
    params: ParamStore,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM);
    rng
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, data: &'d Dataset) -> Result<Self> {
        config.validate()?;
        let spec = ModelSpec::for_dataset(config.task, config.fusion.clone(), &data.manifest)?;
        let model = Model::new(spec)?;
        let params = model.init(config.seed);
        Ok(Trainer {
            weights: LossWeights::new(config.alpha)?,
            adam: Adam::new(config.lr),
            rng: shuffle_rng(config.seed),
            epoch: 0,
            step: 0,
            model,
            params,
            data,
            config,
        })
    }

    /// Restores a run from a checkpoint; the dataset must match its dimensions.
    pub fn from_checkpoint(ckpt: Checkpoint, data: &'d Dataset) -> Result<Self> {
        ckpt.config.validate()?;
        ckpt.spec.check_dataset(&data.manifest)?;
        let model = Model::new(ckpt.spec)?;
        let expected: Vec<String> = model.init(0).keys().cloned().collect();
        let found: Vec<String> = ckpt.params.keys().cloned().collect();
        if expected != found {
            return Err(Error::Config("checkpoint parameters do not match the model".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        Ok(Trainer {
            weights: LossWeights::new(ckpt.config.alpha)?,
            model,
            params: ckpt.params,
            adam: ckpt.adam,
            rng,
            epoch: ckpt.epoch as usize,
            step: ckpt.step as usize,
            data,
            config: ckpt.config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            spec: self.model.spec.clone(),
            epoch: self.epoch as u64,
            step: self.step as u64,
            rng: RngState {
                seed: self.config.seed,
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    fn records(&self, indices: &[usize]) -> Vec<SurvivalRecord> {
        indices.iter().map(|&i| self.data.labels[i].survival).collect()
    }

    fn class_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices
            .iter()
            .map(|&i| match self.config.task {
                Task::Grading => self.data.labels[i].grade,
                _ => self.data.labels[i].diagnosis,
            })
            .collect()
    }

    fn task_loss<'t>(&self, logits: Var<'t>, indices: &[usize]) -> Result<Var<'t>> {
        match self.config.task {
            Task::Survival => nll_survival_loss(logits, &self.records(indices)),
            _ => ce_loss(logits, &self.class_labels(indices)),
        }
    }

    /// Confidence of one branch on the batch: summed true-class probability,
    /// or the batch C-index of branch risks for survival.
    fn confidence(&self, logits: &Tensor, indices: &[usize]) -> Result<f64> {
        match self.config.task {
            Task::Survival => {
                let risks = row_risks(logits);
                Ok(coord::branch_confidence_surv(&risks, &self.records(indices)))
            }
            _ => coord::branch_confidence_cls(logits, &self.class_labels(indices)),
        }
    }

    /// Classifier gradient and confidence of one branch, with the other
    /// branch's embedding replaced by zeros.
    fn branch(&self, subspace: Subspace, z: &Tensor, indices: &[usize]) -> Result<(BTreeMap<String, Tensor>, f64)> {
        let tape = Tape::new();
        let bound = self.params.bind_prefix(&tape, &format!("{CLASSIFIER}."), true);
        let logits = self.model.classify_branch(&bound, subspace, z)?;
        let loss = self.task_loss(logits, indices)?;
        let grads = tape.backward(loss)?;
        let conf = self.confidence(&logits.value(), indices)?;
        Ok((bound.gradients(&grads), conf))
    }

    /// Forward and backward on one mini-batch; parameters are not touched.
    pub fn gradients(&self, indices: &[usize]) -> Result<StepGradients> {
        let genes = self.data.gene_batch(indices)?;
        let patches = self.data.patch_batch(indices)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, true);
        let fwd = self
            .model
            .forward(&bound, &genes, &patches, &self.data.partition, self.config.ge_con_enabled)?;
        let task_loss = self.task_loss(fwd.logits, indices)?;
        let loss = match (fwd.tumour.ge_con, fwd.tme.ge_con) {
            (Some(t), Some(e)) => crate::objectives::total_loss(task_loss, t, e, self.weights)?,
            _ => task_loss,
        };
        let mut grads = bound.gradients(&tape.backward(loss)?);

        let coordinated = if self.config.cg_coord_enabled {
            let (gt, conf_t) = self.branch(Subspace::Tumour, &fwd.tumour.fused.value(), indices)?;
            let (ge, conf_e) = self.branch(Subspace::Tme, &fwd.tme.fused.value(), indices)?;
            let flatten = |m: &BTreeMap<String, Tensor>| m.values().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>();
            let c = coord::coordinate(&BranchGradients {
                grad_t: flatten(&gt),
                grad_e: flatten(&ge),
                conf_t,
                conf_e,
            })?;
            let combined = c.combined();
            let mut offset = 0;
            for (key, t) in &gt {
                let n = t.len();
                let g = Tensor::new(t.shape(), combined[offset..offset + n].to_vec())?;
                grads.insert(key.clone(), g);
                offset += n;
            }
            Some(c)
        } else {
            None
        };

        Ok(StepGradients {
            loss: loss.item(),
            task_loss: task_loss.item(),
            logits: (*fwd.logits.value()).clone(),
            grads,
            coordinated,
        })
    }

    /// One optimizer step. Non-finite values abort with the step index.
    pub fn step(&mut self, indices: &[usize]) -> Result<StepGradients> {
        let step = self.step;
        let out = match self.gradients(indices) {
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step }),
            other => other?,
        };
        if !out.loss.is_finite() || !out.grads.values().all(Tensor::is_finite) {
            return Err(Error::Diverged { step });
        }
        self.adam.update(&mut self.params, &out.grads)?;
        self.step += 1;
        Ok(out)
    }

    /// One pass over the shuffled training split, then validation.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let mut order = self.data.split_indices(Split::Train);
        order.shuffle(&mut self.rng);
        let mut outputs = Vec::with_capacity(order.len());
        let (mut loss_sum, mut coordinated_steps) = (0.0, 0);
        for batch in order.chunks(self.config.batch_size) {
            let out = self.step(batch)?;
            loss_sum += out.loss * batch.len() as f64;
            coordinated_steps += usize::from(out.coordinated.as_ref().is_some_and(Coordinated::applied));
            outputs.push(out.logits);
        }
        self.epoch += 1;
        let logits = concat_rows(&outputs)?;
        Ok(EpochRecord {
            epoch: self.epoch,
            train_loss: loss_sum / order.len() as f64,
            train: self.report(&logits, &order)?,
            val: self.evaluate(Split::Val)?,
            coordinated_steps,
        })
    }

    /// Metrics of `[N, K]` logits for the samples at `indices`.
    fn report(&self, logits: &Tensor, indices: &[usize]) -> Result<MetricReport> {
        match self.config.task {
            Task::Survival => Ok(MetricReport {
                c_index: Some(c_index(&row_risks(logits), &self.records(indices))),
                ..MetricReport::default()
            }),
            _ => classification_metrics(&softmax_rows(logits), &self.class_labels(indices)),
        }
    }

    /// Main-prediction logits for `indices`, batched, without consistency terms.
    pub fn predict(&self, indices: &[usize]) -> Result<Tensor> {
        let mut parts = Vec::new();
        for batch in indices.chunks(self.config.batch_size) {
            let tape = Tape::new();
            let bound = self.params.bind(&tape, false);
            let genes = self.data.gene_batch(batch)?;
            let patches = self.data.patch_batch(batch)?;
            let fwd = self.model.forward(&bound, &genes, &patches, &self.data.partition, false)?;
            parts.push((*fwd.logits.value()).clone());
        }
        concat_rows(&parts)
    }

    pub fn evaluate_indices(&self, indices: &[usize]) -> Result<MetricReport> {
        if indices.is_empty() {
            return Err(Error::Contract("cannot evaluate an empty sample set".into()));
        }
        self.report(&self.predict(indices)?, indices)
    }

    pub fn evaluate(&self, split: Split) -> Result<MetricReport> {
        self.evaluate_indices(&self.data.split_indices(split))
    }
}

fn row_risks(logits: &Tensor) -> Vec<f64> {
    let k = logits.shape()[1];
    logits.data().chunks(k).map(risk_score).collect()
}

fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let k = parts.first().map_or(0, |t| t.shape()[1]);
    let rows = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&[rows, k], data)
}

fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut csv = String::from(MetricReport::CSV_HEADER);
    csv.push('\n');
    for rec in history {
        for (split, report) in [("train", &rec.train), ("val", &rec.val)] {
            csv.push_str(&report.csv_row(rec.epoch, split));
            csv.push('\n');
        }
    }
    csv
}

/// Trains on an in-memory dataset. Writes `metrics.csv`, `model.sfck` and
/// `config.json` when `out_dir` is set.
pub fn train_on(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), data)?;
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        history.push(trainer.run_epoch()?);
    }
    let outcome = TrainOutcome {
        metrics_csv: metrics_csv(&history),
        final_val: history.last().expect("epochs > 0").val.clone(),
        checkpoint: trainer.checkpoint(),
        history,
    };
    if let Some(dir) = &config.out_dir {
        write_outputs(dir, &outcome)?;
    }
    Ok(outcome)
}

fn write_outputs(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("metrics.csv");
    fs::write(&csv, &outcome.metrics_csv).map_err(|e| Error::io(&csv, e))?;
    outcome.checkpoint.save(dir.join("model.sfck"))?;
    let cfg = dir.join("config.json");
    let json = serde_json::to_string_pretty(&outcome.checkpoint.config).expect("config serializes");
    fs::write(&cfg, json + "\n").map_err(|e| Error::io(&cfg, e))
}

/// Loads `config.data_dir` and trains on it.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let data = Dataset::load(&config.data_dir)?;
    train_on(config, &data)
}

/// Evaluates a saved checkpoint on one split of the dataset in `data_dir`.
pub fn evaluate(checkpoint: impl AsRef<Path>, data_dir: impl AsRef<Path>, split: Split) -> Result<MetricReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = Dataset::load(data_dir)?;
    Trainer::from_checkpoint(ckpt, &data)?.evaluate(split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoGeCon,
    NoCgCoord,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoGeCon, Variant::NoCgCoord];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGeCon => "w/o Ge-Con",
            Variant::NoCgCoord => "w/o CG-Coord",
        }
    }

    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        match self {
            Variant::Full => {
                c.ge_con_enabled = true;
                c.cg_coord_enabled = true;
            }
            Variant::NoGeCon => c.ge_con_enabled = false,
            Variant::NoCgCoord => c.cg_coord_enabled = false,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Final validation report of each seed, in seed order.
    pub runs: Vec<MetricReport>,
    pub mean: MetricReport,
}

fn mean_report(runs: &[MetricReport]) -> MetricReport {
    let mean = |f: fn(&MetricReport) -> Option<f64>| {
        let vals: Vec<f64> = runs.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    MetricReport {
        auc: mean(|r| r.auc),
        acc: mean(|r| r.acc),
        sen: mean(|r| r.sen),
        spec: mean(|r| r.spec),
        f1: mean(|r| r.f1),
        c_index: mean(|r| r.c_index),
    }
}

/// Runs every [`Variant`] for seeds `config.seed .. config.seed + n_seeds`.
/// Files are never written for individual runs.
pub fn ablate_on(config: &TrainConfig, data: &Dataset, n_seeds: usize) -> Result<Vec<AblationRow>> {
    if n_seeds == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    Variant::ALL
        .iter()
        .map(|&variant| {
            let runs = (0..n_seeds as u64)
                .map(|s| {
                    let mut c = variant.apply(config);
                    c.seed = config.seed + s;
                    c.out_dir = None;
                    train_on(&c, data).map(|o| o.final_val)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AblationRow {
                variant,
                mean: mean_report(&runs),
                runs,
            })
        })
        .collect()
}

pub const ABLATION_CSV_HEADER: &str = "variant,auc,acc,sen,spec,f1,cindex";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut csv = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let m = &r.mean;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.variant.name(),
            cell(m.auc),
            cell(m.acc),
            cell(m.sen),
            cell(m.spec),
            cell(m.f1),
            cell(m.c_index)
        );
    }
    csv
}

/// Loads `config.data_dir`, runs the ablation and returns the comparison CSV.
pub fn ablate(config: &TrainConfig, n_seeds: usize) -> Result<String> {
    config.validate()?;
    let data = Dataset::load(&config.data_dir)?;
    Ok(ablation_csv(&ablate_on(config, &data, n_seeds)?))
}
