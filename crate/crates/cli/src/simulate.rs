use std::collections::HashSet;

use anyhow::{Context, Result};
use serde_json::json;
use u5mr_core::data::{
    load_survey_csv, survey_cells, write_cells_csv, write_rejections_csv, write_survey_csv,
    AgeBandSchema,
};
use u5mr_core::spatial::AdjacencyGraph;
use u5mr_core::synth::{
    draw_survey, generate_population, write_clusters_csv, write_truth_csv, PopulationConfig,
    SurveyDesign,
};

use crate::output::with_outputs;
use crate::{require_file, ExpandArgs, SimulateArgs};

pub fn expand(args: &ExpandArgs) -> Result<()> {
    require_file(&args.survey, "survey")?;
    if let Some(a) = &args.adjacency {
        require_file(a, "adjacency file")?;
    }
    with_outputs(&args.out.out, "expand", args, None, |out| {
        let known: Option<HashSet<String>> = match &args.adjacency {
            Some(path) => Some(
                AdjacencyGraph::load_adjacency(path)?
                    .ids()
                    .iter()
                    .cloned()
                    .collect(),
            ),
            None => None,
        };
        let load = out.timed("load", || {
            Ok(load_survey_csv(&args.survey, known.as_ref())?)
        })?;
        let cells = out.timed("expand", || {
            Ok(survey_cells(
                &load.records,
                &AgeBandSchema::default(),
                args.periods,
            )?)
        })?;
        write_cells_csv(out.file("cells.csv"), &cells)?;
        write_rejections_csv(out.file("rejections.csv"), &load.rejections)?;
        Ok(json!({
            "records": load.records.len(),
            "rejections": load.rejections.len(),
            "cells": cells.len(),
            "deaths": cells.iter().map(|c| c.deaths).sum::<u64>(),
        }))
    })
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    if let Some(p) = &args.population {
        require_file(p, "population config")?;
    }
    with_outputs(&args.out.out, "simulate", args, Some(args.seed), |out| {
        let config = match &args.population {
            Some(path) => PopulationConfig::load(path)?,
            None => PopulationConfig::default(),
        };
        let design = SurveyDesign {
            rural_clusters: args.rural_clusters,
            urban_clusters: args.urban_clusters,
            households: args.households,
            jitter: !args.no_jitter,
        };
        let pop = out.timed("population", || {
            Ok(generate_population(&config, args.seed)?)
        })?;
        let survey = out.timed("survey", || {
            Ok(draw_survey(&pop, &design, args.seed.wrapping_add(1))?)
        })?;
        let truth = out.timed("truth", || Ok(pop.truth()?))?;
        write_survey_csv(out.file("survey.csv"), &survey.records)?;
        write_clusters_csv(&out.file("clusters.csv"), &survey.clusters)?;
        write_truth_csv(&out.file("truth.csv"), &truth)?;
        pop.proportions()?.write_csv(&out.file("proportions.csv"))?;
        let adjacency = out.file("adjacency.txt");
        std::fs::write(&adjacency, pop.graph.to_adjacency_text())
            .with_context(|| format!("cannot write {}", adjacency.display()))?;
        let polygons = out.file("regions.txt");
        let text: String = pop.polygons.iter().map(|p| p.to_line() + "\n").collect();
        std::fs::write(&polygons, text)
            .with_context(|| format!("cannot write {}", polygons.display()))?;
        Ok(json!({
            "regions": pop.graph.len(),
            "strata": pop.strata.len(),
            "enumeration_areas": pop.eas.len(),
            "households": pop.total_households(),
            "clusters": survey.clusters.len(),
            "records": survey.records.len(),
            "deaths": survey.records.iter().filter(|r| r.death_month.is_some()).count(),
            "survey_seed": args.seed.wrapping_add(1),
        }))
    })
}
