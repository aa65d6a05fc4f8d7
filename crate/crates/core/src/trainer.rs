//! Mini-batch training: Adam updates, seeded shuffling, validation,
//! checkpointing and a JSON-lines metric log.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{HeadKind, RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_triples, Metrics};
use crate::kgstore::{augment_inverse, build_filter_index, load_dataset, FilterIndex, KnowledgeGraph, LoadOptions, Split};
use crate::model::{Items, Model};
use crate::noise::{NoiseStream, Purpose};
use crate::objective::{assemble, completion_term, Batch, ElboBreakdown};
use crate::tape::{Gradients, Matrix, ParamStore};

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|(_, p)| Matrix::zeros(p.raw_dim())).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Blocks absent from `grads` are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (id, g) in grads.iter() {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            ndarray::Zip::from(params.get_mut(id))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Rescales `grads` to at most `max_norm`; returns the norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: ElboBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_total: f64,
    pub train_completion: f64,
    /// Mean per-query completion loss on validation, evaluation-mode latents.
    pub valid_completion: Option<f64>,
    pub valid: Option<Metrics>,
    pub best: bool,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

/// Fixed layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let dir = Self { root: root.into() };
        for sub in [dir.checkpoints(), dir.logs(), dir.reports()] {
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
        Ok(dir)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("best.ckpt")
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("last.ckpt")
    }

    pub fn metrics_log(&self) -> PathBuf {
        self.logs().join("metrics.jsonl")
    }
}

pub struct TrainOutcome {
    /// Parameters after the final step.
    pub last: Model,
    /// Parameters with the best validation MRR (the last ones when no
    /// validation ran).
    pub best: Model,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

/// Loads the dataset a run config points at.
pub fn load_run_dataset(config: &RunConfig) -> Result<KnowledgeGraph> {
    let path = &config.dataset.path;
    if path.as_os_str().is_empty() {
        return Err(Error::Config("dataset.path is not set".into()));
    }
    if !path.is_dir() {
        return Err(Error::Config(format!("dataset directory {} does not exist", path.display())));
    }
    load_dataset(
        path,
        LoadOptions {
            with_descriptions: config.dataset.with_descriptions,
            strict: config.dataset.strict,
        },
    )
}

/// Mean per-query completion loss over `split`, using evaluation-mode
/// representations and in-batch candidates.
pub fn validation_completion(
    model: &Model,
    kg: &KnowledgeGraph,
    split: Split,
    known: &FilterIndex,
) -> Result<Option<f64>> {
    let pairs = augment_inverse(kg, split);
    if pairs.is_empty() {
        return Ok(None);
    }
    let o = &model.config.objective;
    let (mut total, mut queries) = (0.0, 0usize);
    for chunk in pairs.chunks(model.config.train.batch_size) {
        let batch = Batch::layout(chunk, known, o.self_negatives)?;
        let q = model.representations(kg, Items::Queries(&batch.queries))?;
        let c = model.representations(kg, Items::Entities(&batch.candidates))?;
        let scores = batch.scores(&q.dot(&c.t()), o.gamma, o.tau);
        total += completion_term(&scores, &batch.pairs)?;
        queries += batch.queries.len();
    }
    Ok(Some(total / queries as f64))
}

fn write_line(log: &mut Option<BufWriter<fs::File>>, path: &Path, line: LogLine<'_>) -> Result<()> {
    if let Some(w) = log {
        let text = serde_json::to_string(&line)?;
        writeln!(w, "{text}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Trains from scratch. With a run directory, the resolved config, metric
/// log and best/last checkpoints are written there.
pub fn train(
    kg: &KnowledgeGraph,
    config: &RunConfig,
    run_dir: Option<&RunDir>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let tc = &config.train;
    let noise = NoiseStream::new(tc.seed);
    let mut model = Model::new(kg, config)?;
    let pairs = augment_inverse(kg, Split::Train);
    let known_train = FilterIndex::from_splits(kg, &[Split::Train]);
    let full_filter = build_filter_index(kg);
    let mut valid_triples = kg.split(Split::Valid).to_vec();
    if tc.eval_max_triples > 0 {
        valid_triples.truncate(tc.eval_max_triples);
    }

    let log_path = run_dir.map(RunDir::metrics_log).unwrap_or_default();
    let mut log = match run_dir {
        Some(dir) => {
            fs::write(dir.config(), config.to_toml()?).map_err(|e| Error::io(dir.config(), e))?;
            Some(BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?))
        }
        None => None,
    };

    let mut adam = Adam::new(tc, &model.params);
    let mut step: u64 = 0;
    let mut best: Option<(f64, ParamStore)> = None;
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 1..=tc.epochs {
        order.sort_unstable();
        order.shuffle(&mut noise.rng(Purpose::Shuffle, epoch as u64));
        let (mut sum_total, mut sum_comp, first_step) = (0.0, 0.0, step);
        for chunk in order.chunks(tc.batch_size) {
            let items: Vec<_> = chunk.iter().map(|&i| pairs[i]).collect();
            let batch = Batch::build(&items, &model, &known_train, config.objective.self_negatives)?;
            let (mut grads, loss) = {
                let a = assemble(&model, kg, &batch, &noise, step)?;
                if !a.breakdown.total.is_finite() {
                    return Err(Error::NonFiniteLoss(step));
                }
                (a.tape.backward(a.total), a.breakdown)
            };
            grads.check_finite(&model.params)?;
            let grad_norm = match tc.grad_clip {
                Some(c) => clip_gradients(&mut grads, c),
                None => grads.global_norm(),
            };
            adam.step(&mut model.params, &grads);
            let rec = StepRecord {
                epoch,
                step,
                grad_norm,
                loss,
            };
            write_line(&mut log, &log_path, LogLine::Step(&rec))?;
            sum_total += loss.total;
            sum_comp += loss.comp_total;
            steps.push(rec);
            step += 1;
        }
        let n_steps = step - first_step;

        let validate = !valid_triples.is_empty()
            && ((tc.eval_every > 0 && epoch % tc.eval_every == 0) || epoch == tc.epochs);
        let (valid_completion, valid) = if validate {
            (
                validation_completion(&model, kg, Split::Valid, &full_filter)?,
                Some(evaluate_triples(&model, kg, &valid_triples, &full_filter)?.average),
            )
        } else {
            (None, None)
        };
        let improved = match (&valid, &best) {
            (Some(m), Some((b, _))) => m.mrr > *b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            let mrr = valid.as_ref().map(|m| m.mrr).unwrap_or_default();
            best = Some((mrr, model.params.clone()));
            if let Some(dir) = run_dir {
                Checkpoint::from_model(&model, kg).write(dir.best_checkpoint())?;
            }
        }
        let rec = EpochRecord {
            epoch,
            steps: n_steps,
            train_total: sum_total / n_steps.max(1) as f64,
            train_completion: sum_comp / n_steps.max(1) as f64,
            valid_completion,
            valid,
            best: improved,
        };
        write_line(&mut log, &log_path, LogLine::Epoch(&rec))?;
        if let Some(w) = log.as_mut() {
            w.flush().map_err(|e| Error::io(&log_path, e))?;
        }
        on_epoch(&rec);
        epochs.push(rec);
    }

    if let Some(dir) = run_dir {
        Checkpoint::from_model(&model, kg).write(dir.last_checkpoint())?;
        if best.is_none() {
            Checkpoint::from_model(&model, kg).write(dir.best_checkpoint())?;
        }
    }
    let best_model = match best {
        Some((_, params)) => Model::from_parts(kg, config.clone(), params)?,
        None => model.clone(),
    };
    Ok(TrainOutcome {
        last: model,
        best: best_model,
        epochs,
        steps,
    })
}

/// [`train`] with the latent head replaced and everything else unchanged.
pub fn ablation_train(
    kg: &KnowledgeGraph,
    config: &RunConfig,
    head: HeadKind,
    run_dir: Option<&RunDir>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut cfg = config.clone();
    cfg.model.head = head;
    train(kg, &cfg, run_dir, on_epoch)
}
