use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::erasure::{run_erasure, EraseConfig, PromptPair, WindowOrdering};
use crate::error::{Error, Result};
use crate::model::ModelParams;

use super::{Evaluator, MetricsReport};

/// Which erasure setting a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    WindowLength,
    MuOnOff,
    LayerDepth,
    Ordering,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::WindowLength => "window-length",
            SweepAxis::MuOnOff => "mu-on-off",
            SweepAxis::LayerDepth => "layer-depth",
            SweepAxis::Ordering => "ordering",
        }
    }

    /// `base` with this axis set to `value`.
    ///
    /// Layer depth accepts `n` for the first `n` layers or `a..b`.
    pub fn apply(self, base: &EraseConfig, value: &str) -> Result<EraseConfig> {
        let bad = || Error::invalid(format!("bad {} value `{value}`", self.name()));
        let mut cfg = base.clone();
        match self {
            SweepAxis::WindowLength => cfg.window = value.parse().map_err(|_| bad())?,
            SweepAxis::MuOnOff => {
                cfg.mu = match value {
                    "on" if base.mu > 0.0 => base.mu,
                    "on" => EraseConfig::default().mu,
                    "off" => 0.0,
                    _ => return Err(bad()),
                }
            }
            SweepAxis::LayerDepth => {
                cfg.layers = match value.split_once("..") {
                    Some((a, b)) => {
                        a.parse().map_err(|_| bad())?..b.parse().map_err(|_| bad())?
                    }
                    None => 0..value.parse().map_err(|_| bad())?,
                }
            }
            SweepAxis::Ordering => {
                cfg.ordering = match value {
                    "sequential" => WindowOrdering::Sequential,
                    "random" => WindowOrdering::Random,
                    _ => return Err(bad()),
                }
            }
        }
        Ok(cfg)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepAxis::WindowLength,
            SweepAxis::MuOnOff,
            SweepAxis::LayerDepth,
            SweepAxis::Ordering,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| Error::invalid(format!("unknown sweep axis `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub metrics: Option<MetricsReport>,
    pub discarded_windows: usize,
    pub error: Option<String>,
}

/// One erasure run and evaluation per value. Failed runs become rows with
/// an error message.
pub fn ablation_sweep(
    evaluator: &Evaluator,
    original: &ModelParams,
    dataset: &[PromptPair],
    base: &EraseConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    Ok(values
        .iter()
        .map(|value| {
            let outcome = axis.apply(base, value).and_then(|cfg| {
                let (erased, report) = run_erasure(original, evaluator.vocab(), dataset, &cfg)?;
                Ok((evaluator.report(&erased)?, report.discarded()))
            });
            match outcome {
                Ok((metrics, discarded)) => SweepRow {
                    axis,
                    value: value.clone(),
                    metrics: Some(metrics),
                    discarded_windows: discarded,
                    error: None,
                },
                Err(e) => SweepRow {
                    axis,
                    value: value.clone(),
                    metrics: None,
                    discarded_windows: 0,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

/// Header plus one record per row. Per-concept columns follow the first
/// successful row's concept list.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let concepts: Vec<String> = rows
        .iter()
        .find_map(|r| r.metrics.as_ref())
        .map(|m| m.per_concept.keys().cloned().collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = [
        "axis",
        "value",
        "target_accuracy",
        "unrelated_mean",
        "unrelated_min",
        "fidelity_proxy",
        "alignment",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(concepts.iter().map(|c| format!("acc_{c}")));
    header.extend(["discarded_windows".to_string(), "error".to_string()]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.axis.name().to_string(), r.value.clone()];
        match &r.metrics {
            Some(m) => {
                rec.extend(
                    [
                        m.erasure_accuracy,
                        m.unrelated_mean,
                        m.unrelated_min,
                        m.fidelity_proxy,
                        m.alignment,
                    ]
                    .map(num),
                );
                rec.extend(
                    concepts
                        .iter()
                        .map(|c| m.per_concept.get(c).map_or(String::new(), |&v| num(v))),
                );
            }
            None => rec.extend(std::iter::repeat_n(String::new(), 5 + concepts.len())),
        }
        rec.push(r.discarded_windows.to_string());
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    std::fs::write(path, sweep_csv(rows)?).map_err(|e| Error::io(path, e))
}
