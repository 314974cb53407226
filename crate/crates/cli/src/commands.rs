//! The subcommands, as library functions.

use std::path::{Path, PathBuf};
use std::time::Instant;

use lcap_core::checkpoint;
use lcap_core::data::{Batch, EOS, PAD};
use lcap_core::diagnostics::{self, AgreementSnapshot, IterationStats};
use lcap_core::gradcheck::{self, GradcheckConfig, Report};
use lcap_core::graph::Graph;
use lcap_core::model::Seq2Seq;
use lcap_core::routing::RoutingState;
use lcap_core::train::{History, Trainer};
use lcap_core::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Failure, RunConfig};

/// Largest model `gradcheck` accepts.
pub const GRADCHECK_MAX_PARAMS: usize = 50_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub param_count: usize,
    pub steps_per_sec: f64,
}

pub struct TrainRun {
    pub trainer: Trainer,
    pub history: History,
    pub summary: Summary,
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(io_at(path))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(io_at(path))
}

/// Builds the model and loads `init_checkpoint` when one is configured.
pub fn build_model(cfg: &RunConfig) -> Result<(Seq2Seq, ParamStore), Failure> {
    let (model, mut store) = Seq2Seq::new(&cfg.model, cfg.train.seed)?;
    if let Some(path) = &cfg.init_checkpoint {
        load_checkpoint(path, &mut store)?;
    }
    Ok((model, store))
}

pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<(), Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    checkpoint::load_into(&bytes, store)?;
    Ok(())
}

/// Trains in memory without writing anything.
pub fn run_training(cfg: &RunConfig) -> Result<TrainRun, Failure> {
    cfg.validate()?;
    let mut trainer = Trainer::new(&cfg.model, &cfg.train)?;
    if let Some(path) = &cfg.init_checkpoint {
        load_checkpoint(path, &mut trainer.store)?;
    }
    let start = Instant::now();
    let history = trainer.run()?;
    let secs = start.elapsed().as_secs_f64();
    let summary = Summary {
        final_loss: history.final_loss(),
        final_accuracy: history.final_accuracy(),
        param_count: trainer.store.num_scalars(),
        steps_per_sec: if secs > 0.0 {
            cfg.train.steps as f64 / secs
        } else {
            0.0
        },
    };
    Ok(TrainRun {
        trainer,
        history,
        summary,
    })
}

/// Trains and writes `metrics.csv`, the checkpoint, `summary.json` and the
/// resolved `config.json` into the output directory.
pub fn train(cfg: &RunConfig) -> Result<TrainRun, Failure> {
    cfg.validate()?;
    create_dir(&cfg.output_dir)?;
    let run = run_training(cfg)?;
    let dir = &cfg.output_dir;
    write_file(&dir.join("metrics.csv"), run.history.to_csv())?;
    let ckpt = cfg.checkpoint_path();
    if let Some(parent) = ckpt.parent() {
        create_dir(parent)?;
    }
    checkpoint::save(&ckpt, &run.trainer.store).map_err(|e| Failure::Io(format!("{}: {e}", ckpt.display())))?;
    write_file(&dir.join("config.json"), cfg.to_json())?;
    let summary = serde_json::to_string_pretty(&run.summary).expect("summary serialises");
    write_file(&dir.join("summary.json"), summary + "\n")?;
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub token_accuracy: f64,
    /// Fraction of held-out sources whose greedy decoding equals the target.
    pub sequence_accuracy: f64,
    pub sequences: usize,
}

/// Source and target (without BOS/EOS) of example `i` of a batch.
pub fn example(batch: &Batch, i: usize) -> (Vec<usize>, Vec<usize>) {
    let src = batch.src[i * batch.src_len..(i + 1) * batch.src_len]
        .iter()
        .copied()
        .filter(|&t| t != PAD)
        .collect();
    let tgt = batch.tgt_out[i * batch.tgt_len..(i + 1) * batch.tgt_len]
        .iter()
        .copied()
        .take_while(|&t| t != EOS)
        .collect();
    (src, tgt)
}

/// Held-out evaluation of the parameters in `checkpoint` (or of the
/// configured initial parameters when `None`); writes `eval.json`.
pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalReport, Failure> {
    cfg.validate()?;
    let (model, mut store) = build_model(cfg)?;
    if let Some(path) = checkpoint {
        load_checkpoint(path, &mut store)?;
    }
    let report = evaluate_model(&model, &store, cfg)?;
    create_dir(&cfg.output_dir)?;
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    write_file(&cfg.output_dir.join("eval.json"), json + "\n")?;
    Ok(report)
}

pub fn evaluate_model(model: &Seq2Seq, store: &ParamStore, cfg: &RunConfig) -> Result<EvalReport, Failure> {
    let batches = cfg.train.eval_set(&cfg.model);
    let (loss, token_accuracy) = lcap_core::train::evaluate(model, store, &batches)?;
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = batches
        .iter()
        .flat_map(|b| (0..b.size).map(move |i| example(b, i)))
        .collect();
    let decoded = lcap_core::exec::map(pairs.iter().collect(), |(src, _)| model.greedy_decode(store, src));
    let mut exact = 0;
    for (d, (_, tgt)) in decoded.into_iter().zip(&pairs) {
        if &d? == tgt {
            exact += 1;
        }
    }
    Ok(EvalReport {
        loss,
        token_accuracy,
        sequence_accuracy: exact as f64 / pairs.len().max(1) as f64,
        sequences: pairs.len(),
    })
}

/// The fixed batch used for gradient checks: two sequences from the
/// configured task, drawn from the run seed.
pub fn gradcheck_batch(cfg: &RunConfig) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(3);
    Batch::sample(cfg.train.task, &cfg.train.shape(&cfg.model), 2, &mut rng)
}

/// Gradient check report without any threshold applied.
pub fn gradcheck_report(cfg: &RunConfig) -> Result<Report, Failure> {
    cfg.validate()?;
    let (model, mut store) = build_model(cfg)?;
    let n = store.num_scalars();
    if n >= GRADCHECK_MAX_PARAMS {
        return Err(Failure::config(format!(
            "gradcheck needs fewer than {GRADCHECK_MAX_PARAMS} parameters, model has {n}"
        )));
    }
    let batch = gradcheck_batch(cfg);
    Ok(gradcheck::check_model(&model, &mut store, &batch, &GradcheckConfig::default())?)
}

/// Writes `gradcheck.csv` and fails unless every relative error is below `tolerance`.
pub fn gradcheck(cfg: &RunConfig, tolerance: f64) -> Result<Report, Failure> {
    let report = gradcheck_report(cfg)?;
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("gradcheck.csv"), report.to_csv())?;
    if report.passed(tolerance) {
        return Ok(report);
    }
    let w = report.worst().expect("a failing report has parameters");
    Err(Failure::Gradcheck(format!(
        "{} has relative error {:.3e} at index {} (autodiff {:.9e}, finite difference {:.9e}), tolerance {tolerance:e}",
        w.name, w.max_rel_error, w.worst_index, w.analytic, w.numeric
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Side {
    Encoder,
    Decoder,
}

/// Routing state of one teacher-forced pass over `tokens`, with the
/// decoder fed the model's own greedy output.
pub fn route_state(
    model: &Seq2Seq,
    store: &ParamStore,
    tokens: &[usize],
    side: Side,
) -> Result<RoutingState, Failure> {
    let mut tgt = model.greedy_decode(store, tokens)?;
    // A decoding that never emitted EOS leaves no room for it in the forced pass.
    tgt.truncate(model.config().max_len - 1);
    let batch = Batch::from_pairs(&[(tokens.to_vec(), tgt)]);
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, &batch)?;
    let state = match side {
        Side::Encoder => out.encoder_routing,
        Side::Decoder => out.decoder_routing,
    };
    state.ok_or_else(|| Failure::config("the selected side does not use a routing aggregator"))
}

pub struct RouteViz {
    pub stats: Vec<IterationStats>,
    pub files: Vec<PathBuf>,
}

/// Writes `agreement_iter{t}.{csv,pgm}` per routing iteration and
/// `routing_stats.csv` with one row per iteration.
pub fn route_viz(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    tokens: &[usize],
    side: Option<Side>,
    per_position: bool,
) -> Result<RouteViz, Failure> {
    cfg.validate()?;
    let m = &cfg.model;
    if !m.aggregator.strategy.is_routing() {
        return Err(Failure::config(format!(
            "route-viz needs a routing strategy, model uses {}",
            m.aggregator.strategy.name()
        )));
    }
    let side = match side {
        Some(s) => s,
        None if m.aggregate_encoder => Side::Encoder,
        None if m.aggregate_decoder => Side::Decoder,
        None => return Err(Failure::config("neither side aggregates; enable aggregate_encoder or aggregate_decoder")),
    };
    if tokens.is_empty() {
        return Err(Failure::config("route-viz needs at least one source token"));
    }
    let (model, mut store) = build_model(cfg)?;
    if let Some(path) = checkpoint {
        load_checkpoint(path, &mut store)?;
    }
    let state = route_state(&model, &store, tokens, side)?;
    let snaps = AgreementSnapshot::from_state(&state, None, per_position)?;
    let stats = diagnostics::iteration_stats(&snaps)?;
    create_dir(&cfg.output_dir)?;
    let mut files = Vec::new();
    for s in &snaps {
        let (csv, pgm) = diagnostics::export_heatmap(s, &cfg.output_dir)?;
        files.push(csv);
        files.push(pgm);
        if let Some(p) = diagnostics::export_positions(s, &cfg.output_dir)? {
            files.push(p);
        }
    }
    let stats_path = cfg.output_dir.join("routing_stats.csv");
    write_file(&stats_path, diagnostics::stats_csv(&stats))?;
    files.push(stats_path);
    Ok(RouteViz { stats, files })
}

/// Parses `"3,4,5"` or `"3 4 5"`.
pub fn parse_tokens(s: &str) -> Result<Vec<usize>, Failure> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|e| Failure::config(format!("token {t:?}: {e}")))
        })
        .collect()
}
