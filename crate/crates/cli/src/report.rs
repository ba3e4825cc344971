use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};
use u5mr_core::aggregate::{load_summaries_csv, Level};
use u5mr_core::direct::load_direct_csv;
use u5mr_core::special::expit;
use u5mr_core::validate::{load_predictions_csv, score_cv, write_scores_csv, CvScores};

use crate::output::{read_manifest, with_outputs};
use crate::{require_dir, ReportArgs, Variant};

/// Normal quantile for 95% intervals of direct estimates.
const Z_95: f64 = 1.959963984540054;

#[derive(Debug, Clone)]
struct Interval {
    source: String,
    region: Option<String>,
    period: i32,
    phase: &'static str,
    median: f64,
    lower: f64,
    upper: f64,
}

#[derive(Default)]
struct Report {
    national: Vec<Interval>,
    regional: Vec<Interval>,
    /// (source, axis, csv record)
    curves: Vec<(String, String, Vec<String>)>,
    scores: Vec<(Variant, CvScores)>,
    labels: HashMap<String, usize>,
}

impl Report {
    /// Run label, suffixed when the same label appears more than once.
    fn label(&mut self, base: &str) -> String {
        let n = self.labels.entry(base.to_string()).or_insert(0);
        *n += 1;
        if *n == 1 {
            base.to_string()
        } else {
            format!("{base}#{n}")
        }
    }
}

fn phase(period: i32, last: i32) -> &'static str {
    if period <= last {
        "estimate"
    } else {
        "prediction"
    }
}

fn last_period(resolved: &Value, key: &str, dir: &Path) -> Result<i32> {
    resolved[key][1]
        .as_i64()
        .map(|v| v as i32)
        .with_context(|| format!("{} manifest lacks {key}", dir.display()))
}

fn variant_of(resolved: &Value, dir: &Path) -> Result<Variant> {
    serde_json::from_value(resolved["variant"].clone())
        .with_context(|| format!("{} manifest lacks a variant", dir.display()))
}

fn add_model_run(report: &mut Report, dir: &Path, resolved: &Value) -> Result<()> {
    let variant = variant_of(resolved, dir)?;
    let last = last_period(resolved, "estimation_periods", dir)?;
    let source = report.label(serde_json::to_value(variant)?.as_str().unwrap_or_default());
    for s in load_summaries_csv(&dir.join("estimates.csv"))? {
        let row = Interval {
            source: source.clone(),
            region: s.region.clone(),
            period: s.period,
            phase: phase(s.period, last),
            median: s.median,
            lower: s.lower,
            upper: s.upper,
        };
        match s.level {
            Level::National => report.national.push(row),
            Level::Region => report.regional.push(row),
            Level::Rural | Level::Urban => {}
        }
    }
    let path = dir.join("age_curves.csv");
    let mut reader =
        csv::Reader::from_path(&path).with_context(|| format!("cannot read {}", path.display()))?;
    for rec in reader.records() {
        let rec = rec?;
        let fields: Vec<String> = rec.iter().map(str::to_string).collect();
        if fields.len() != 7 {
            bail!("malformed row in {}", path.display());
        }
        report
            .curves
            .push((source.clone(), fields[0].clone(), fields[1..].to_vec()));
    }
    Ok(())
}

fn direct_interval(
    source: &str,
    region: Option<String>,
    period: i32,
    logit: f64,
    variance: f64,
) -> Interval {
    let sd = variance.sqrt();
    Interval {
        source: source.to_string(),
        region,
        period,
        phase: "estimate",
        median: 1000.0 * expit(logit),
        lower: 1000.0 * expit(logit - Z_95 * sd),
        upper: 1000.0 * expit(logit + Z_95 * sd),
    }
}

fn add_direct_run(report: &mut Report, dir: &Path, resolved: &Value) -> Result<()> {
    let last = last_period(resolved, "periods", dir)?;
    let direct = report.label("Direct");
    for e in load_direct_csv(&dir.join("direct.csv"))? {
        if let (Some(l), Some(v)) = (e.logit_u5mr, e.variance) {
            report.regional.push(direct_interval(
                &direct,
                Some(e.region.clone()),
                e.period,
                l,
                v,
            ));
        }
    }
    for e in load_direct_csv(&dir.join("direct_national.csv"))? {
        if let (Some(l), Some(v)) = (e.logit_u5mr, e.variance) {
            report
                .national
                .push(direct_interval(&direct, None, e.period, l, v));
        }
    }
    let fh = report.label("Fay-Herriot");
    let path = dir.join("smoothed.csv");
    let mut reader =
        csv::Reader::from_path(&path).with_context(|| format!("cannot read {}", path.display()))?;
    for rec in reader.records() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .unwrap_or("")
                .parse()
                .with_context(|| format!("malformed row in {}", path.display()))
        };
        let period = num(0)? as i32;
        report.national.push(Interval {
            source: fh.clone(),
            region: None,
            period,
            phase: phase(period, last),
            median: num(5)?,
            lower: num(6)?,
            upper: num(7)?,
        });
    }
    Ok(())
}

fn add_cv_run(report: &mut Report, dir: &Path, resolved: &Value) -> Result<()> {
    let variant = variant_of(resolved, dir)?;
    let predictions = load_predictions_csv(&dir.join("cv_predictions.csv"))?;
    report.scores.push((variant, score_cv(&predictions)?));
    Ok(())
}

fn write_intervals(path: &Path, rows: &[Interval], regional: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if regional {
        w.write_record([
            "source", "region", "period", "phase", "median", "lower", "upper",
        ])?;
    } else {
        w.write_record(["source", "period", "phase", "median", "lower", "upper"])?;
    }
    for r in rows {
        let mut rec = vec![r.source.clone()];
        if regional {
            rec.push(r.region.clone().unwrap_or_default());
        }
        rec.extend([
            r.period.to_string(),
            r.phase.to_string(),
            format!("{:.6}", r.median),
            format!("{:.6}", r.lower),
            format!("{:.6}", r.upper),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_map(path: &Path, rows: &[Interval]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "source", "region", "period", "median", "lower", "upper", "ci_width",
    ])?;
    for r in rows.iter().filter(|r| !r.source.starts_with("Direct")) {
        w.write_record([
            r.source.clone(),
            r.region.clone().unwrap_or_default(),
            r.period.to_string(),
            format!("{:.6}", r.median),
            format!("{:.6}", r.lower),
            format!("{:.6}", r.upper),
            format!("{:.6}", r.upper - r.lower),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_curves(path: &Path, curves: &[(String, String, Vec<String>)], axis: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let year = if axis == "period" { "period" } else { "cohort" };
    w.write_record([
        "source", "stratum", "age_band", year, "median", "lower", "upper",
    ])?;
    for (source, _, fields) in curves.iter().filter(|c| c.1 == axis) {
        let mut rec = vec![source.clone()];
        rec.extend(fields.iter().cloned());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<()> {
    for dir in &args.inputs {
        require_dir(dir, "report input")?;
    }
    let manifests: Vec<(PathBuf, Value)> = args
        .inputs
        .iter()
        .map(|d| Ok((d.clone(), read_manifest(d)?)))
        .collect::<Result<_>>()?;
    with_outputs(&args.out.out, "report", args, None, |out| {
        let mut report = Report::default();
        let mut kinds: BTreeMap<String, usize> = BTreeMap::new();
        for (dir, manifest) in &manifests {
            let kind = manifest["subcommand"]
                .as_str()
                .unwrap_or_default()
                .to_string();
            let resolved = &manifest["resolved"];
            match kind.as_str() {
                "fit" | "predict" => add_model_run(&mut report, dir, resolved)?,
                "direct" => add_direct_run(&mut report, dir, resolved)?,
                "cv" => add_cv_run(&mut report, dir, resolved)?,
                other => bail!(
                    "{} holds a {other:?} run, which the report does not use",
                    dir.display()
                ),
            }
            *kinds.entry(kind).or_default() += 1;
        }
        if !report.national.is_empty() {
            write_intervals(
                &out.file("national_trajectory.csv"),
                &report.national,
                false,
            )?;
        }
        if !report.regional.is_empty() {
            write_intervals(&out.file("region_trajectory.csv"), &report.regional, true)?;
            write_map(&out.file("region_map.csv"), &report.regional)?;
        }
        if !report.curves.is_empty() {
            write_curves(&out.file("age_period_curves.csv"), &report.curves, "period")?;
            write_curves(&out.file("age_cohort_curves.csv"), &report.curves, "cohort")?;
        }
        if !report.scores.is_empty() {
            let order = |v: Variant| {
                [Variant::Ap, Variant::Ac, Variant::Apc]
                    .iter()
                    .position(|&x| x == v)
            };
            report.scores.sort_by_key(|(v, _)| order(*v));
            let rows: Vec<(String, CvScores)> = report
                .scores
                .iter()
                .map(|(v, s)| (v.long_name().to_string(), *s))
                .collect();
            write_scores_csv(&out.file("scores.csv"), &rows)?;
        }
        Ok(json!({ "runs": kinds }))
    })
}
