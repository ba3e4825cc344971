use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};
use u5mr_core::aggregate::{
    aggregate_posterior, write_summaries_csv, CohortRule, StratumProportions, DEFAULT_QUANTILES,
};
use u5mr_core::data::{
    expand_birth_history, load_survey_csv, survey_cells, AgeBandSchema, BirthRecord, CountCell,
    ExpandedRow,
};
use u5mr_core::inference::{
    ccd_points, optimize_hyper, sample_latent, sample_latent_ccd, PosteriorDraws,
};
use u5mr_core::model::{assemble_model, LatentModel, ModelConfig, RowKey};
use u5mr_core::spatial::AdjacencyGraph;
use u5mr_core::special::{expit, quantile_sorted, sorted_copy};
use u5mr_core::temporal::{dominant_cohort, period_cells};

use crate::output::{read_manifest, with_outputs, Outputs};
use crate::{require_dir, require_file, FitArgs, ModelArgs, PredictArgs, Variant};

/// Survey, graph and proportions behind a model fit.
pub(crate) struct Inputs {
    pub records: Vec<BirthRecord>,
    pub rejections: usize,
    pub graph: AdjacencyGraph,
    pub proportions: StratumProportions,
    pub cells: Vec<CountCell>,
    pub periods: (i32, i32),
}

pub(crate) fn check_model_inputs(survey: &Path, model: &ModelArgs) -> Result<()> {
    require_file(survey, "survey")?;
    require_file(&model.adjacency, "adjacency file")?;
    require_file(&model.proportions, "proportions file")?;
    if let Some(c) = &model.config {
        require_file(c, "model config")?;
    }
    Ok(())
}

pub(crate) fn load_inputs(survey: &Path, model: &ModelArgs) -> Result<Inputs> {
    let graph = AdjacencyGraph::load_adjacency(&model.adjacency)?;
    let proportions = StratumProportions::load(&model.proportions)?;
    let known: HashSet<String> = graph.ids().iter().cloned().collect();
    let load = load_survey_csv(survey, Some(&known))?;
    if load.records.is_empty() {
        bail!("no valid records in {}", survey.display());
    }
    let schema = AgeBandSchema::default();
    let all = survey_cells(&load.records, &schema, None)?;
    let periods = match model.periods {
        Some(p) => p,
        None => default_periods(&all, &proportions)?,
    };
    let cells: Vec<CountCell> = all
        .into_iter()
        .filter(|c| c.period >= periods.0 && c.period <= periods.1)
        .collect();
    if cells.is_empty() {
        bail!("no person-months in periods {}:{}", periods.0, periods.1);
    }
    Ok(Inputs {
        rejections: load.rejections.len(),
        records: load.records,
        graph,
        proportions,
        cells,
        periods,
    })
}

/// Periods with data that the proportions also cover.
fn default_periods(cells: &[CountCell], proportions: &StratumProportions) -> Result<(i32, i32)> {
    let covered = proportions.periods();
    let (Some(&lo), Some(&hi)) = (covered.first(), covered.last()) else {
        bail!("the proportions file lists no periods");
    };
    let first = cells.iter().map(|c| c.period).min().unwrap().max(lo);
    let last = cells.iter().map(|c| c.period).max().unwrap().min(hi);
    if first > last {
        bail!("no data period is covered by the proportions ({lo}:{hi}); pass --periods");
    }
    Ok((first, last))
}

pub(crate) fn model_config(
    model: &ModelArgs,
    periods: (i32, i32),
    horizon: u32,
) -> Result<ModelConfig> {
    let mut config = match &model.config {
        Some(path) => ModelConfig::load(path)?,
        None => ModelConfig::default(),
    };
    config.variant = model.variant.model();
    config.periods = Some(periods);
    config.horizon = horizon;
    Ok(config)
}

pub(crate) fn expand_rows(
    records: &[BirthRecord],
    periods: (i32, i32),
) -> Result<Vec<ExpandedRow>> {
    let schema = AgeBandSchema::default();
    let mut rows = Vec::new();
    for r in records {
        rows.extend(
            expand_birth_history(r, &schema)?
                .into_iter()
                .filter(|e| e.period >= periods.0 && e.period <= periods.1),
        );
    }
    Ok(rows)
}

pub(crate) fn canonical(path: &Path) -> Result<PathBuf> {
    path.canonicalize()
        .with_context(|| format!("cannot resolve {}", path.display()))
}

fn natural_value(name: &str, theta: f64) -> f64 {
    match name {
        "overdispersion" | "phi" => expit(theta),
        _ => theta.exp(),
    }
}

fn write_hyperparameters(
    out: &mut Outputs,
    model: &LatentModel,
    theta: &[f64],
    hessian: Option<&[Vec<f64>]>,
) -> Result<()> {
    let names: Vec<&str> = model.lgm.hyper().iter().map(|h| h.name.as_str()).collect();
    let mut w = csv::Writer::from_path(out.file("hyperparameters.csv"))?;
    let mut header = vec!["name".to_string(), "internal".into(), "value".into()];
    if hessian.is_some() {
        header.extend(names.iter().map(|n| format!("hessian_{n}")));
    }
    w.write_record(&header)?;
    for (i, name) in names.iter().enumerate() {
        let mut rec = vec![
            name.to_string(),
            theta[i].to_string(),
            format!("{:.10e}", natural_value(name, theta[i])),
        ];
        if let Some(h) = hessian {
            rec.extend(h[i].iter().map(|v| format!("{v:.10e}")));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_theta(path: &Path, model: &LatentModel) -> Result<Vec<f64>> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut by_name = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let value: f64 = rec
            .get(1)
            .unwrap_or("")
            .parse()
            .with_context(|| format!("malformed value in {}", path.display()))?;
        by_name.insert(rec.get(0).unwrap_or("").to_string(), value);
    }
    model
        .lgm
        .hyper()
        .iter()
        .map(|h| {
            by_name
                .get(&h.name)
                .copied()
                .with_context(|| format!("{} lacks hyperparameter {}", path.display(), h.name))
        })
        .collect()
}

/// Linear-predictor row without the spatial and interaction terms.
fn national_row(
    model: &LatentModel,
    band: usize,
    period: i32,
    cohort: i32,
    urban: bool,
) -> Result<Vec<(usize, f64)>> {
    let key = RowKey {
        age_band: band,
        period,
        cohort,
        region: 0,
        urban,
    };
    Ok(model
        .predictor_row(&key)?
        .into_iter()
        .filter(|&(j, _)| j < model.latent.spatial)
        .collect())
}

/// Age-specific logit hazards by period (dominant cohort) and by cohort
/// (month-weighted over the periods in which the cohort reaches the band).
fn write_age_curves(
    path: &Path,
    model: &LatentModel,
    draws: &PosteriorDraws,
    periods: &[i32],
) -> Result<()> {
    let schema = &model.schema;
    let cohorts = model.layout.cohorts();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "axis", "stratum", "age_band", "year", "median", "lower", "upper",
    ])?;
    let mut emit =
        |axis: &str, urban: bool, band: usize, year: i32, values: Vec<f64>| -> Result<()> {
            let s = sorted_copy(&values);
            w.write_record([
                axis.to_string(),
                if urban { "urban" } else { "rural" }.to_string(),
                schema.label(band),
                year.to_string(),
                format!("{:.6}", quantile_sorted(&s, 0.5)),
                format!("{:.6}", quantile_sorted(&s, DEFAULT_QUANTILES[0])),
                format!("{:.6}", quantile_sorted(&s, DEFAULT_QUANTILES[2])),
            ])?;
            Ok(())
        };
    for urban in [false, true] {
        for band in 0..AgeBandSchema::BANDS {
            for &p in periods {
                let row = national_row(model, band, p, dominant_cohort(band, p, schema), urban)?;
                emit("period", urban, band, p, draws.combination(&row))?;
            }
        }
        for band in 0..AgeBandSchema::BANDS {
            for c in cohorts.clone() {
                let mut row: Vec<(usize, f64)> = Vec::new();
                let mut total = 0.0;
                for &p in periods {
                    for cell in period_cells(p, schema)
                        .into_iter()
                        .filter(|x| x.age_band == band && x.cohort == c)
                    {
                        let m = cell.months as f64;
                        row.extend(
                            national_row(model, band, p, c, urban)?
                                .into_iter()
                                .map(|(j, v)| (j, v * m)),
                        );
                        total += m;
                    }
                }
                if total > 0.0 {
                    row.iter_mut().for_each(|e| e.1 /= total);
                    emit("cohort", urban, band, c, draws.combination(&row))?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes estimates (every level, estimation plus prediction periods) and
/// the age curves.
fn write_posterior(
    out: &mut Outputs,
    model: &LatentModel,
    draws: &PosteriorDraws,
    proportions: &StratumProportions,
    periods: (i32, i32),
    horizon: u32,
) -> Result<()> {
    let all: Vec<i32> = (periods.0..=periods.1 + horizon as i32).collect();
    let post = out.timed("aggregate", || {
        aggregate_posterior(model, draws, proportions, &all, CohortRule::Dominant).context(
            "aggregating draws (do the proportions cover every estimation and prediction period?)",
        )
    })?;
    write_summaries_csv(
        &out.file("estimates.csv"),
        &post.summaries(DEFAULT_QUANTILES)?,
    )?;
    let path = out.file("age_curves.csv");
    out.timed("age_curves", || write_age_curves(&path, model, draws, &all))
}

fn max_constraint_residual(model: &LatentModel, draws: &PosteriorDraws) -> f64 {
    draws
        .draws
        .iter()
        .map(|x| model.lgm.constraint_residual(x))
        .fold(0.0, f64::max)
}

fn inputs_json(survey: &Path, model: &ModelArgs) -> Result<Value> {
    Ok(json!({
        "survey": canonical(survey)?,
        "adjacency": canonical(&model.adjacency)?,
        "proportions": canonical(&model.proportions)?,
        "config": model.config.as_deref().map(canonical).transpose()?,
    }))
}

pub fn fit(args: &FitArgs) -> Result<()> {
    check_model_inputs(&args.survey, &args.model)?;
    with_outputs(
        &args.out.out,
        "fit",
        args,
        Some(args.sampling.seed),
        |out| {
            let inputs = out.timed("load", || load_inputs(&args.survey, &args.model))?;
            let config = model_config(&args.model, inputs.periods, args.horizon)?;
            let schema = AgeBandSchema::default();
            let model = out.timed("assemble", || {
                Ok(assemble_model(
                    &inputs.cells,
                    &inputs.graph,
                    &schema,
                    &config,
                )?)
            })?;
            let opt = out.timed("optimize", || {
                Ok(optimize_hyper(
                    &model.lgm,
                    &model.lgm.initial_theta(),
                    args.model.budget,
                )?)
            })?;
            let draws = out.timed("sample", || {
                Ok(if args.ccd {
                    let points = ccd_points(&model.lgm, &opt)?;
                    sample_latent_ccd(&model.lgm, &points, args.sampling.draws, args.sampling.seed)?
                } else {
                    sample_latent(
                        &model.lgm,
                        &opt.approx,
                        args.sampling.draws,
                        args.sampling.seed,
                    )?
                })
            })?;
            let hessian: Vec<Vec<f64>> = (0..opt.theta.len())
                .map(|i| opt.hessian.row(i).iter().copied().collect())
                .collect();
            write_hyperparameters(out, &model, &opt.theta, Some(&hessian))?;
            let report = out.file("fit_report.txt");
            let text = format!(
            "variant = {}\nlog_posterior = {}\niterations = {}\nevaluations = {}\nconverged = {}\nccd = {}\n",
            args.model.variant.long_name(),
            opt.log_posterior,
            opt.iterations,
            opt.evaluations,
            opt.converged,
            args.ccd,
        );
            std::fs::write(&report, text)
                .with_context(|| format!("cannot write {}", report.display()))?;
            write_posterior(
                out,
                &model,
                &draws,
                &inputs.proportions,
                inputs.periods,
                args.horizon,
            )?;
            Ok(json!({
                "variant": args.model.variant,
                "estimation_periods": [inputs.periods.0, inputs.periods.1],
                "horizon": args.horizon,
                "inputs": inputs_json(&args.survey, &args.model)?,
                "records": inputs.records.len(),
                "rejections": inputs.rejections,
                "latent_dim": model.lgm.dim(),
                "observations": model.lgm.observations().len(),
                "theta": opt.theta,
                "log_posterior": opt.log_posterior,
                "iterations": opt.iterations,
                "evaluations": opt.evaluations,
                "converged": opt.converged,
                "max_constraint_residual": max_constraint_residual(&model, &draws),
                "model_config": config.to_text(),
            }))
        },
    )
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    require_dir(&args.fit, "fit directory")?;
    let manifest = read_manifest(&args.fit)?;
    if manifest["subcommand"] != "fit" {
        bail!(
            "{} does not hold a fit (subcommand {})",
            args.fit.display(),
            manifest["subcommand"]
        );
    }
    let fit_args: FitArgs =
        serde_json::from_value(manifest["config"].clone()).context("malformed fit config echo")?;
    let resolved = &manifest["resolved"];
    let path_of = |key: &str| -> Result<PathBuf> {
        let s = resolved["inputs"][key]
            .as_str()
            .with_context(|| format!("fit manifest lacks input {key}"))?;
        Ok(PathBuf::from(s))
    };
    let survey = path_of("survey")?;
    let mut model_args = fit_args.model.clone();
    model_args.adjacency = path_of("adjacency")?;
    model_args.proportions = path_of("proportions")?;
    model_args.config = resolved["inputs"]["config"].as_str().map(PathBuf::from);
    let periods: (i32, i32) = serde_json::from_value(resolved["estimation_periods"].clone())
        .context("fit manifest lacks periods")?;
    model_args.periods = Some(periods);
    check_model_inputs(&survey, &model_args)?;
    let hyper_path = args.fit.join("hyperparameters.csv");
    require_file(&hyper_path, "hyperparameter file")?;

    with_outputs(
        &args.out.out,
        "predict",
        args,
        Some(args.sampling.seed),
        |out| {
            let inputs = out.timed("load", || load_inputs(&survey, &model_args))?;
            let config = model_config(&model_args, periods, args.horizon)?;
            let schema = AgeBandSchema::default();
            let model = out.timed("assemble", || {
                Ok(assemble_model(
                    &inputs.cells,
                    &inputs.graph,
                    &schema,
                    &config,
                )?)
            })?;
            let theta = read_theta(&hyper_path, &model)?;
            let approx = out.timed("mode", || Ok(model.lgm.find_mode(&theta, None)?))?;
            let draws = out.timed("sample", || {
                Ok(sample_latent(
                    &model.lgm,
                    &approx,
                    args.sampling.draws,
                    args.sampling.seed,
                )?)
            })?;
            write_hyperparameters(out, &model, &theta, None)?;
            write_posterior(
                out,
                &model,
                &draws,
                &inputs.proportions,
                periods,
                args.horizon,
            )?;
            let variant: Variant = model_args.variant;
            Ok(json!({
                "variant": variant,
                "estimation_periods": [periods.0, periods.1],
                "horizon": args.horizon,
                "fit": canonical(&args.fit)?,
                "theta": theta,
                "max_constraint_residual": max_constraint_residual(&model, &draws),
            }))
        },
    )
}
