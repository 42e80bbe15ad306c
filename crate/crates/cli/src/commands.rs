//! Dispatch from parsed arguments to the library.

use std::path::{Path, PathBuf};

use serde_json::json;

use rctdesign_core::allocation::{
    affordable_trial_size, compromise_allocation, cost_optimal_allocation, optimal_allocation,
    rank_candidates,
};
use rctdesign_core::domain::{Allocation, PropensityMap};
use rctdesign_core::error::Result;
use rctdesign_core::io;
use rctdesign_core::sigma::{cell_stats, estimate_sigma, estimate_sigma_pooled};
use rctdesign_core::simulation::star::{star_pipeline, star_standin_rows, StarPipelineConfig};
use rctdesign_core::simulation::{
    run_cost_study, fit_variance_vs_deviation, study_points, synthetic_sweep, SkippedDesign,
    SyntheticDgpSpec,
};

use crate::args::{
    AllocateArgs, Cli, Command, EstimateSigmaArgs, EvaluateArgs, FitArgs, OutputFormat,
    SimulateCostArgs, SimulateStarArgs, SimulateSyntheticArgs,
};

/// Number of rows the bundled stand-in generates (the size of the extract
/// it stands in for).
const STANDIN_ROWS: usize = 4584;
const STANDIN_SEED: u64 = 1985;

fn emit(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(path) => io::write_text(path, body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn warn_skipped(skipped: &[SkippedDesign]) {
    for s in skipped {
        eprintln!(
            "{}",
            json!({ "warning": { "design_id": s.design_id, "skipped": s.reason } })
        );
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Allocate(args) => allocate(args),
        Command::Evaluate(args) => evaluate(args),
        Command::EstimateSigma(args) => estimate_sigma_cmd(args),
        Command::SimulateSynthetic(args) => simulate_synthetic(args),
        Command::SimulateCost(args) => simulate_cost(args),
        Command::SimulateStar(args) => simulate_star(args),
        Command::Fit(args) => fit(args),
    }
}

fn allocate(args: AllocateArgs) -> Result<()> {
    let target = io::read_allocation_csv(&args.f0)?;
    let sigma = io::read_sigma_csv(&args.sigma, target.domain())?;

    let (strategy, allocation, affordable): (&str, Allocation, Option<u64>) =
        if let (Some(costs_path), Some(budget)) = (&args.costs, args.budget) {
            let costs = io::read_cost_csv(costs_path, target.domain(), budget)?;
            let allocation = cost_optimal_allocation(&target, &sigma, &costs)?;
            let n = affordable_trial_size(&allocation, &costs)?;
            ("cost_optimal", allocation, Some(n))
        } else if let Some(k) = args.k {
            ("compromise", compromise_allocation(&target, &sigma, k)?, None)
        } else {
            ("optimal", optimal_allocation(&target, &sigma)?, None)
        };

    match args.format {
        OutputFormat::Csv => emit(args.out.as_deref(), &io::allocation_csv_string(&allocation)),
        OutputFormat::Json => {
            let levels = allocation.domain().levels();
            let probs: Vec<serde_json::Value> = levels
                .iter()
                .enumerate()
                .map(|(m, level)| json!({ "level": level, "prob": allocation.prob(m) }))
                .collect();
            let mut report = json!({
                "strategy": strategy,
                "f1_star": probs,
            });
            if let Some(k) = args.k {
                report["k"] = json!(k);
            }
            if let Some(n1) = args.n1 {
                let counts = allocation.integer_counts(n1);
                report["n1"] = json!(n1);
                report["counts"] = json!(levels
                    .iter()
                    .zip(&counts)
                    .map(|(level, count)| json!({ "level": level, "count": count }))
                    .collect::<Vec<_>>());
            }
            if let Some(n) = affordable {
                report["affordable_n1"] = json!(n);
            }
            let body = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            emit(args.out.as_deref(), &body)
        }
    }
}

fn candidate_spec(raw: &str) -> (String, PathBuf) {
    match raw.split_once('=') {
        Some((id, path)) => (id.to_string(), PathBuf::from(path)),
        None => {
            let path = PathBuf::from(raw);
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| raw.to_string());
            (id, path)
        }
    }
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let target = io::read_allocation_csv(&args.f0)?;
    let sigma = io::read_sigma_csv(&args.sigma, target.domain())?;
    let mut candidates = Vec::with_capacity(args.candidates.len());
    for raw in &args.candidates {
        let (id, path) = candidate_spec(raw);
        let allocation = io::read_allocation_csv_aligned(&path, target.domain())?;
        candidates.push((id, allocation));
    }
    let reports = rank_candidates(&target, &sigma, &candidates, args.n1)?;
    match args.format {
        OutputFormat::Csv => emit(args.out.as_deref(), &io::design_reports_csv(&reports)),
        OutputFormat::Json => {
            let body =
                serde_json::to_string_pretty(&io::design_reports_json(&reports)).unwrap() + "\n";
            emit(args.out.as_deref(), &body)
        }
    }
}

fn estimate_sigma_cmd(args: EstimateSigmaArgs) -> Result<()> {
    let data = io::read_dataset_csv(&args.data)?;
    let e = PropensityMap::uniform(data.domain().clone(), args.e)?;
    let stats = cell_stats(&data);
    let estimate = if args.pool {
        estimate_sigma_pooled(&stats, &e)?
    } else {
        estimate_sigma(&stats, &e)?
    };
    match args.format {
        OutputFormat::Csv => emit(args.out.as_deref(), &io::sigma_csv_string(&estimate.profile)),
        OutputFormat::Json => {
            let body =
                serde_json::to_string_pretty(&io::sigma_estimate_json(&estimate)).unwrap() + "\n";
            emit(args.out.as_deref(), &body)
        }
    }
}

fn simulate_synthetic(args: SimulateSyntheticArgs) -> Result<()> {
    let mut spec = SyntheticDgpSpec::new(args.seed);
    spec.cohort_size = args.n0;
    spec.trial_size = args.n1;
    spec.treatment_probability = args.e;
    let outcome = synthetic_sweep(&spec, args.designs, args.reps)?;
    warn_skipped(&outcome.skipped);
    io::write_points_csv(&args.out_points, &outcome.results)?;
    let fit = fit_variance_vs_deviation(&study_points(&outcome.results))?;
    io::write_fit_json(&args.out_fit, &fit)?;
    Ok(())
}

fn simulate_cost(args: SimulateCostArgs) -> Result<()> {
    let mut spec = SyntheticDgpSpec::new(args.seed);
    spec.cohort_size = args.n0;
    spec.treatment_probability = args.e;
    let costs = io::read_cost_csv(&args.costs, spec.target.domain(), args.budget)?;
    let outcome = run_cost_study(&spec, &costs, args.designs, args.reps)?;
    warn_skipped(&outcome.skipped);
    io::write_points_csv(&args.out_points, &outcome.results)?;
    let fit = fit_variance_vs_deviation(&study_points(&outcome.results))?;
    io::write_fit_json(&args.out_fit, &fit)?;
    Ok(())
}

fn simulate_star(args: SimulateStarArgs) -> Result<()> {
    let (rows, source) = match &args.star {
        Some(path) => (io::read_star_csv(path)?, path.display().to_string()),
        None => (
            star_standin_rows(STANDIN_SEED, STANDIN_ROWS),
            "synthetic-standin".to_string(),
        ),
    };
    let config = StarPipelineConfig {
        candidates: args.candidates,
        trial_size: args.n1,
        replications: args.reps,
        seed: args.seed,
    };
    let outcome = star_pipeline(&rows, &config)?;
    warn_skipped(&outcome.skipped);
    io::write_points_csv(&args.out_points, &outcome.results)?;
    // label the fit with its data source so stand-in runs are unmistakable
    let fit_value = json!({
        "slope": outcome.fit.slope,
        "intercept": outcome.fit.intercept,
        "r_squared": outcome.fit.r_squared,
        "n_points": outcome.fit.n_points,
        "data_source": source,
        "students": outcome.students,
        "treatment_probability": outcome.treatment_probability,
    });
    io::write_json(&args.out_fit, &fit_value)?;
    Ok(())
}

fn fit(args: FitArgs) -> Result<()> {
    let points = io::read_points_csv(&args.points)?;
    let fit = fit_variance_vs_deviation(&points)?;
    let body = serde_json::to_string_pretty(&fit).expect("fit serializes") + "\n";
    emit(args.out.as_deref(), &body)
}
