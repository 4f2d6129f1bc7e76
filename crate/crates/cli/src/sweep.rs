//! Evaluation sweeps of a trained model over target parameters.

use std::io::{Read, Write};

use lumenforge::designgen::{linspace, TargetSpec};
use lumenforge::optics::{evaluate_design, ScenarioKind};
use lumenforge::rng::derive_seed;
use lumenforge::surrogate::{infer_design, MlpModel};
use lumenforge::{Error, Result};
use serde::{Deserialize, Serialize};

/// One swept parameter; `steps == 1` pins it to `lo`.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub kind: ScenarioKind,
    /// One axis per target parameter, in parameter order.
    pub axes: Vec<Axis>,
}

impl SweepPlan {
    /// Parses `w=1000:8000:8,h=1000:8000:8,d=1200` (`lo:hi:steps` or a fixed value).
    pub fn parse(kind: ScenarioKind, spec: &str) -> Result<Self> {
        let names = TargetSpec::param_names(kind);
        let mut axes: Vec<Option<Axis>> = vec![None; names.len()];
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) =
                part.split_once('=').ok_or_else(|| Error::InvalidArgument(format!("expected name=range, got {part:?}")))?;
            let slot = names
                .iter()
                .position(|n| *n == name.trim())
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?} for {kind}")))?;
            let num = |s: &str| {
                s.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::InvalidArgument(format!("bad number {s:?}")))
            };
            let fields: Vec<&str> = value.split(':').collect();
            let axis = match fields.as_slice() {
                [v] => Axis { lo: num(v)?, hi: num(v)?, steps: 1 },
                [lo, hi, n] => {
                    let steps = n.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad step count {n:?}")))?;
                    Axis { lo: num(lo)?, hi: num(hi)?, steps }
                }
                _ => return Err(Error::InvalidArgument(format!("expected lo:hi:steps, got {value:?}"))),
            };
            if axis.steps == 0 || axis.lo > axis.hi {
                return Err(Error::InvalidArgument(format!("empty range for {name}")));
            }
            axes[slot] = Some(axis);
        }
        let axes = axes
            .into_iter()
            .zip(names)
            .map(|(a, n)| a.ok_or_else(|| Error::InvalidArgument(format!("sweep is missing parameter {n}"))))
            .collect::<Result<_>>()?;
        Ok(SweepPlan { kind, axes })
    }

    /// Targets with the first parameter varying fastest.
    pub fn targets(&self) -> Result<Vec<TargetSpec>> {
        let values: Vec<Vec<f64>> = self
            .axes
            .iter()
            .map(|a| if a.steps == 1 { vec![a.lo] } else { linspace((a.lo, a.hi), a.steps) })
            .collect();
        let total: usize = values.iter().map(Vec::len).product();
        (0..total)
            .map(|mut i| {
                let p: Vec<f64> = values
                    .iter()
                    .map(|v| {
                        let x = v[i % v.len()];
                        i /= v.len();
                        x
                    })
                    .collect();
                TargetSpec::from_params(self.kind, &p)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub params: Vec<f64>,
    pub nonuniformity_pct: Option<f64>,
    pub spill: Option<f64>,
    pub extrapolated: bool,
    pub error: Option<String>,
}

/// Infers, traces and scores every target. Rows come back in plan order;
/// each point's trace seed is derived from its index.
pub fn run_sweep(model: &MlpModel, targets: &[TargetSpec], rays: usize, seed: u64) -> Vec<SweepRow> {
    use rayon::prelude::*;
    targets
        .par_iter()
        .enumerate()
        .map(|(index, t)| {
            let params = t.params();
            let extrapolated = model.extrapolates(&params);
            let result = infer_design(model, t).and_then(|surface| {
                let sc = t.kind().scenario();
                evaluate_design(&sc, &surface, t, rays, derive_seed(seed, index as u64))
            });
            match result {
                Ok(ev) => SweepRow {
                    index,
                    params,
                    nonuniformity_pct: Some(ev.nonuniformity_pct),
                    spill: Some(ev.spill_fraction),
                    extrapolated,
                    error: None,
                },
                Err(e) => SweepRow { index, params, nonuniformity_pct: None, spill: None, extrapolated, error: Some(e.to_string()) },
            }
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(kind: ScenarioKind, rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = vec!["index"];
    header.extend(TargetSpec::param_names(kind));
    header.extend(["nonuniformity_pct", "spill", "extrapolated", "error"]);
    out.write_record(&header).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec = vec![r.index.to_string()];
        rec.extend(r.params.iter().map(f64::to_string));
        rec.push(opt(r.nonuniformity_pct));
        rec.push(opt(r.spill));
        rec.push(r.extrapolated.to_string());
        rec.push(r.error.clone().unwrap_or_default());
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: Read>(r: R) -> Result<(ScenarioKind, Vec<SweepRow>)> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(csv_err)?.clone();
    let kind = match header.len() {
        7 => ScenarioKind::ReflectorOffset,
        8 => ScenarioKind::LensRect,
        n => return Err(Error::Format(format!("sweep CSV has {n} columns"))),
    };
    let np = TargetSpec::param_names(kind).len();
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")));
    let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        rows.push(SweepRow {
            index: rec[0].parse().map_err(|_| Error::Format("bad index".into()))?,
            params: (1..=np).map(|i| num(&rec[i])).collect::<Result<_>>()?,
            nonuniformity_pct: opt(&rec[np + 1])?,
            spill: opt(&rec[np + 2])?,
            extrapolated: rec[np + 3] == *"true",
            error: Some(rec[np + 4].to_string()).filter(|e| !e.is_empty()),
        });
    }
    Ok((kind, rows))
}

fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Format(format!("{other:?}")),
        }
    } else {
        Error::Format(e.to_string())
    }
}
