use anyhow::{bail, Context, Result};
use serde_json::json;
use u5mr_core::aggregate::CohortRule;
use u5mr_core::data::AgeBandSchema;
use u5mr_core::direct::direct_estimates;
use u5mr_core::inference::optimize_hyper;
use u5mr_core::model::assemble_model;
use u5mr_core::validate::{loro_cv, score_cv, write_predictions_csv, write_scores_csv, CvOptions};

use crate::fit::{check_model_inputs, expand_rows, load_inputs, model_config};
use crate::output::with_outputs;
use crate::CvArgs;

pub fn cv(args: &CvArgs) -> Result<()> {
    check_model_inputs(&args.survey, &args.model)?;
    with_outputs(&args.out.out, "cv", args, Some(args.sampling.seed), |out| {
        let inputs = out.timed("load", || load_inputs(&args.survey, &args.model))?;
        let config = model_config(&args.model, inputs.periods, 0)?;
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
        let rows = expand_rows(&inputs.records, inputs.periods)?;
        let direct = out.timed("direct", || Ok(direct_estimates(&rows, &schema)?))?;
        let holdout = match args.holdout {
            Some(h) => h,
            None => direct
                .iter()
                .filter(|e| e.is_defined())
                .map(|e| e.period)
                .max()
                .context("no region-period has a defined direct estimate")?,
        };
        if holdout < inputs.periods.0 || holdout > inputs.periods.1 {
            bail!(
                "holdout period {holdout} outside the estimation periods {}:{}",
                inputs.periods.0,
                inputs.periods.1
            );
        }
        let options = CvOptions {
            draws: args.sampling.draws,
            seed: args.sampling.seed,
            rule: CohortRule::Dominant,
            refit_hyper: args.refit_hyper,
        };
        let run = out.timed("loro", || {
            Ok(loro_cv(
                &model,
                &opt.theta,
                Some(&opt.approx.mode),
                &direct,
                &inputs.proportions,
                holdout,
                &options,
            )?)
        })?;
        if run.predictions.is_empty() {
            bail!("no region has a defined direct estimate in {holdout}");
        }
        let scores = score_cv(&run.predictions)?;
        write_predictions_csv(&out.file("cv_predictions.csv"), &run.predictions)?;
        write_scores_csv(
            &out.file("scores.csv"),
            &[(args.model.variant.long_name().to_string(), scores)],
        )?;
        let mut w = csv::Writer::from_path(out.file("cv_skipped.csv"))?;
        w.write_record(["region", "reason"])?;
        for (region, reason) in &run.skipped {
            w.write_record([region, reason])?;
        }
        w.flush()?;
        Ok(json!({
            "variant": args.model.variant,
            "estimation_periods": [inputs.periods.0, inputs.periods.1],
            "holdout": holdout,
            "theta": opt.theta,
            "regions_scored": scores.regions,
            "regions_skipped": run.skipped.len(),
        }))
    })
}
