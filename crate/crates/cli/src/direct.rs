use anyhow::{bail, Result};
use serde_json::json;
use u5mr_core::data::{load_survey_csv, AgeBandSchema};
use u5mr_core::direct::{
    direct_estimates, fay_herriot_smooth, write_direct_csv, FayHerriotOptions, SmoothedPoint,
};
use u5mr_core::special::expit;

use crate::fit::expand_rows;
use crate::output::with_outputs;
use crate::{require_file, DirectArgs};

/// Region label of the pooled national series.
pub const NATIONAL: &str = "national";

fn write_smoothed(path: &std::path::Path, points: &[SmoothedPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "period",
        "observed",
        "logit_median",
        "logit_lower",
        "logit_upper",
        "median",
        "lower",
        "upper",
    ])?;
    for p in points {
        w.write_record([
            p.period.to_string(),
            p.observed.to_string(),
            format!("{:.6}", p.median),
            format!("{:.6}", p.lower),
            format!("{:.6}", p.upper),
            format!("{:.6}", 1000.0 * expit(p.median)),
            format!("{:.6}", 1000.0 * expit(p.lower)),
            format!("{:.6}", 1000.0 * expit(p.upper)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn direct(args: &DirectArgs) -> Result<()> {
    require_file(&args.survey, "survey")?;
    with_outputs(
        &args.out.out,
        "direct",
        args,
        Some(args.sampling.seed),
        |out| {
            let load = out.timed("load", || Ok(load_survey_csv(&args.survey, None)?))?;
            if load.records.is_empty() {
                bail!("no valid records in {}", args.survey.display());
            }
            let periods = args.periods.unwrap_or((i32::MIN, i32::MAX));
            let rows = out.timed("expand", || expand_rows(&load.records, periods))?;
            if rows.is_empty() {
                bail!("no person-months in the requested periods");
            }
            let schema = AgeBandSchema::default();
            let regional = out.timed("regional", || Ok(direct_estimates(&rows, &schema)?))?;
            let national_rows: Vec<_> = rows
                .iter()
                .cloned()
                .map(|mut r| {
                    r.region_id = NATIONAL.to_string();
                    r
                })
                .collect();
            let national = out.timed("national", || {
                Ok(direct_estimates(&national_rows, &schema)?)
            })?;
            write_direct_csv(&out.file("direct.csv"), &regional)?;
            write_direct_csv(&out.file("direct_national.csv"), &national)?;
            let options = FayHerriotOptions {
                horizon: args.horizon,
                draws: args.sampling.draws,
                seed: args.sampling.seed,
                ..FayHerriotOptions::default()
            };
            let smoothed = out.timed("fay_herriot", || {
                Ok(fay_herriot_smooth(&national, &options)?)
            })?;
            write_smoothed(&out.file("smoothed.csv"), &smoothed)?;
            let first = rows.iter().map(|r| r.period).min().unwrap();
            let last = rows.iter().map(|r| r.period).max().unwrap();
            Ok(json!({
                "records": load.records.len(),
                "rejections": load.rejections.len(),
                "periods": [first, last],
                "regional_estimates": regional.len(),
                "regional_defined": regional.iter().filter(|e| e.is_defined()).count(),
                "national_defined": national.iter().filter(|e| e.is_defined()).count(),
                "horizon": args.horizon,
            }))
        },
    )
}
