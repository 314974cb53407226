//! One training run per value of a single swept setting.

use std::fmt::Write as _;

use lcap_core::aggregation::{CapsuleInputMode, Strategy};

use crate::commands::run_training;
use crate::{Failure, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParam {
    /// Output capsule count.
    N,
    /// Routing iterations.
    T,
    /// Which side aggregates: none, enc, dec or both.
    Placement,
    /// Input capsule construction: per-layer or all-layers.
    CapsuleInput,
    Strategy,
    Seed,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::N => "n",
            SweepParam::T => "t",
            SweepParam::Placement => "placement",
            SweepParam::CapsuleInput => "capsule-input",
            SweepParam::Strategy => "strategy",
            SweepParam::Seed => "seed",
        }
    }
}

pub const PLACEMENTS: [&str; 4] = ["none", "enc", "dec", "both"];

fn parse<T: std::str::FromStr>(value: &str, what: &str) -> Result<T, Failure> {
    value
        .trim()
        .parse()
        .map_err(|_| Failure::config(format!("{what}: cannot parse {value:?}")))
}

/// `base` with the swept setting replaced, validated.
pub fn apply(base: &RunConfig, param: SweepParam, value: &str) -> Result<RunConfig, Failure> {
    let mut cfg = base.clone();
    let agg = &mut cfg.model.aggregator;
    match param {
        SweepParam::N => agg.output_capsules = parse(value, "n")?,
        SweepParam::T => agg.iterations = parse(value, "t")?,
        SweepParam::Placement => {
            let (enc, dec) = match value.trim() {
                "none" => (false, false),
                "enc" => (true, false),
                "dec" => (false, true),
                "both" => (true, true),
                other => return Err(Failure::config(format!("placement: expected one of {PLACEMENTS:?}, got {other:?}"))),
            };
            cfg.model.aggregate_encoder = enc;
            cfg.model.aggregate_decoder = dec;
        }
        SweepParam::CapsuleInput => {
            agg.capsule_input_mode = match value.trim() {
                "per-layer" => CapsuleInputMode::PerLayer,
                "all-layers" => CapsuleInputMode::AllLayers,
                other => {
                    return Err(Failure::config(format!(
                        "capsule-input: expected per-layer or all-layers, got {other:?}"
                    )))
                }
            }
        }
        SweepParam::Strategy => agg.strategy = parse::<Strategy>(value, "strategy")?,
        SweepParam::Seed => cfg.train.seed = parse(value, "seed")?,
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub value: String,
    /// `ok`, `config-error`, `diverged` or `error`.
    pub status: &'static str,
    pub final_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    pub param_count: Option<usize>,
    pub message: String,
}

fn run_one(base: &RunConfig, param: SweepParam, value: &str) -> Row {
    let outcome = apply(base, param, value).and_then(|cfg| run_training(&cfg));
    match outcome {
        Ok(run) => Row {
            value: value.to_string(),
            status: "ok",
            final_accuracy: Some(run.summary.final_accuracy),
            final_loss: Some(run.summary.final_loss),
            param_count: Some(run.summary.param_count),
            message: String::new(),
        },
        Err(f) => Row {
            value: value.to_string(),
            status: match f {
                Failure::Config(_) => "config-error",
                Failure::Divergence(_) => "diverged",
                _ => "error",
            },
            final_accuracy: None,
            final_loss: None,
            param_count: None,
            message: f.to_string().replace('\n', " ").trim().to_string(),
        },
    }
}

/// Runs every value with the shared seed of `base`. With `parallel`, runs
/// execute concurrently; rows keep the order of `values` either way.
pub fn sweep(base: &RunConfig, param: SweepParam, values: &[String], parallel: bool) -> Vec<Row> {
    if parallel {
        lcap_core::exec::map(values.iter().collect(), |v| run_one(base, param, v))
    } else {
        values.iter().map(|v| run_one(base, param, v)).collect()
    }
}

pub const CSV_HEADER: &str = "value,status,final_accuracy,final_loss,param_count,message";

pub fn to_csv(rows: &[Row]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    let opt = |v: Option<f64>, p: usize| v.map(|x| format!("{x:.prec$}", prec = p)).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.value,
            r.status,
            opt(r.final_accuracy, 6),
            opt(r.final_loss, 9),
            r.param_count.map(|n| n.to_string()).unwrap_or_default(),
            r.message.replace(',', ";"),
        );
    }
    s
}

/// Runs the sweep and writes `sweep_{param}.csv` into the output directory.
pub fn run(base: &RunConfig, param: SweepParam, values: &[String], parallel: bool) -> Result<Vec<Row>, Failure> {
    if values.is_empty() {
        return Err(Failure::config("sweep needs at least one value"));
    }
    let rows = sweep(base, param, values, parallel);
    std::fs::create_dir_all(&base.output_dir)?;
    std::fs::write(base.output_dir.join(format!("sweep_{}.csv", param.name())), to_csv(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_maps_to_flags() {
        let base = RunConfig::default();
        let got: Vec<(bool, bool)> = PLACEMENTS
            .iter()
            .map(|p| {
                let c = apply(&base, SweepParam::Placement, p).unwrap();
                (c.model.aggregate_encoder, c.model.aggregate_decoder)
            })
            .collect();
        assert_eq!(got, [(false, false), (true, false), (false, true), (true, true)]);
        assert!(apply(&base, SweepParam::Placement, "middle").is_err());
    }

    #[test]
    fn non_divisor_capsule_count_is_a_config_error() {
        let mut base = RunConfig::default();
        base.model.aggregator.strategy = Strategy::EmRouting;
        let row = run_one(&base, SweepParam::N, "5");
        assert_eq!(row.status, "config-error");
        assert!(row.message.contains("not divisible"), "{}", row.message);
        let csv = to_csv(&[row]);
        assert!(csv.lines().nth(1).unwrap().starts_with("5,config-error,,,,"));
    }
}
