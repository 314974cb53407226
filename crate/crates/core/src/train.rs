//! Seeded training loop and held-out evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Task, TaskShape};
use crate::error::{Error, Result};
use crate::exec;
use crate::graph::Graph;
use crate::model::{ModelConfig, Seq2Seq};
use crate::optim::{Adam, OptimConfig};
use crate::param::ParamStore;

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub steps: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Evaluate on the held-out set every this many steps (and after the last).
    pub eval_every: usize,
    /// Number of held-out sequences.
    pub eval_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Copy,
            steps: 1000,
            seed: 0,
            batch_size: 16,
            eval_every: 250,
            eval_size: 128,
            min_len: 3,
            max_len: 8,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn problems(&self, model: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("eval_size", self.eval_size),
            ("min_len", self.min_len),
        ] {
            if v == 0 {
                out.push(format!("train.{name}: must be at least 1"));
            }
        }
        if self.min_len > self.max_len {
            out.push(format!(
                "train.min_len: {} exceeds max_len = {}",
                self.min_len, self.max_len
            ));
        }
        if self.max_len + 1 > model.max_len {
            out.push(format!(
                "train.max_len: sequences of {} tokens plus BOS/EOS exceed model.max_len = {}",
                self.max_len, model.max_len
            ));
        }
        out.extend(self.optim.problems());
        out
    }

    pub fn shape(&self, model: &ModelConfig) -> TaskShape {
        TaskShape {
            vocab: model.vocab_size,
            min_len: self.min_len,
            max_len: self.max_len,
        }
    }

    /// The fixed held-out set, drawn from its own random stream.
    pub fn eval_set(&self, model: &ModelConfig) -> Vec<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(EVAL_STREAM);
        let shape = self.shape(model);
        let mut left = self.eval_size;
        let mut out = Vec::new();
        while left > 0 {
            let n = left.min(self.batch_size.max(1));
            out.push(Batch::sample(self.task, &shape, n, &mut rng));
            left -= n;
        }
        out
    }
}

/// One row of the metrics log. `loss` is the training-batch loss before the
/// update at `step`; for step 0 it is the held-out loss of the initial model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub step: usize,
    pub loss: f64,
    /// Held-out teacher-forced accuracy, present on evaluation steps.
    pub token_accuracy: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<Record>,
}

impl History {
    pub const CSV_HEADER: &'static str = "step,loss,token_accuracy,wall_ms";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let acc = r
                .token_accuracy
                .map(|a| format!("{a:.6}"))
                .unwrap_or_default();
            let _ = writeln!(s, "{},{:.9},{},{:.3}", r.step, r.loss, acc, r.wall_ms);
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map(|r| r.loss).unwrap_or(f64::NAN)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.records
            .iter()
            .rev()
            .find_map(|r| r.token_accuracy)
            .unwrap_or(f64::NAN)
    }
}

/// Held-out `(mean token loss, token accuracy)`; batches are evaluated in
/// parallel when the parallel executor is active.
pub fn evaluate(model: &Seq2Seq, store: &ParamStore, batches: &[Batch]) -> Result<(f64, f64)> {
    let results = exec::map(batches.iter().collect(), |b| model.evaluate(store, b));
    let (mut loss, mut correct, mut total) = (0.0, 0, 0);
    for r in results {
        let (l, c, t) = r?;
        loss += l * t as f64;
        correct += c;
        total += t;
    }
    let total = total.max(1) as f64;
    Ok((loss / total, correct as f64 / total))
}

/// A model being trained together with its optimiser and data stream.
pub struct Trainer {
    pub model: Seq2Seq,
    pub store: ParamStore,
    pub config: TrainConfig,
    optim: Adam,
    rng: ChaCha8Rng,
    shape: TaskShape,
    eval: Vec<Batch>,
}

impl Trainer {
    pub fn new(model_config: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        let mut problems = model_config.problems();
        problems.extend(config.problems(model_config));
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let (model, store) = Seq2Seq::new(model_config, config.seed)?;
        let optim = Adam::new(config.optim.clone(), &store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Trainer {
            shape: config.shape(model_config),
            eval: config.eval_set(model_config),
            model,
            store,
            config: config.clone(),
            optim,
            rng,
        })
    }

    pub fn eval_set(&self) -> &[Batch] {
        &self.eval
    }

    pub fn evaluate(&self) -> Result<(f64, f64)> {
        evaluate(&self.model, &self.store, &self.eval)
    }

    /// One optimiser step on a fresh batch; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.optim.steps() + 1;
        let batch = Batch::sample(
            self.config.task,
            &self.shape,
            self.config.batch_size,
            &mut self.rng,
        );
        let diverged = |loss: f64| Error::Divergence { step, loss };
        self.store.zero_grad();
        let mut g = Graph::new();
        let out = self
            .model
            .forward(&mut g, &self.store, &batch)
            .map_err(|e| match e {
                Error::NonFinite(_) => diverged(f64::NAN),
                e => e,
            })?;
        let loss = self.model.loss(&mut g, out.logits, &batch)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(diverged(value));
        }
        g.backward_into(loss, &mut self.store)?;
        let norm = self.optim.step(&mut self.store);
        if !norm.is_finite() {
            return Err(diverged(value));
        }
        Ok(value)
    }

    /// Runs the configured number of steps and records the metrics log.
    pub fn run(&mut self) -> Result<History> {
        let start = Instant::now();
        let ms = |s: &Instant| s.elapsed().as_secs_f64() * 1e3;
        let mut history = History::default();
        let (loss, acc) = self.evaluate()?;
        history.records.push(Record {
            step: 0,
            loss,
            token_accuracy: Some(acc),
            wall_ms: ms(&start),
        });
        for step in 1..=self.config.steps {
            let loss = self.step()?;
            let token_accuracy = if step % self.config.eval_every == 0 || step == self.config.steps
            {
                Some(self.evaluate()?.1)
            } else {
                None
            };
            history.records.push(Record {
                step,
                loss,
                token_accuracy,
                wall_ms: ms(&start),
            });
        }
        Ok(history)
    }
}

/// Builds, trains, and returns the trainer together with its metrics log.
pub fn train(model: &ModelConfig, config: &TrainConfig) -> Result<(Trainer, History)> {
    let mut t = Trainer::new(model, config)?;
    let h = t.run()?;
    Ok((t, h))
}
