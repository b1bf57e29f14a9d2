//! `factorboost` command line: train, predict and bench.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use factorboost::baseline::{materialize_join, naive_regression_tree, naive_ujoin_update, rebuild_relation_update};
use factorboost::boosting::update_residuals_snowflake;
use factorboost::engine::ExecStats;
use factorboost::model_io::prediction_relation;
use factorboost::relstore::format_float;
use factorboost::semiring::SemiRing;
use factorboost::synth::{star_features, star_schema, star_target, star_tree, StarSpec};
use factorboost::{
    load_dataset, predict_batch, save, train_decision_tree, train_gbm, train_random_forest, ClassCriterion, Column,
    ColumnKind, Criterion, Dataset, EnsembleModel, ForestParams, GbmParams, Objective, SampleSpec, SavedModel, Task,
    TrainInput, TreeModel, TreeParams,
};

#[derive(Parser, Debug)]
#[command(name = "factorboost", version, about = "Tree models trained over normalized multi-table data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a dataset config.
    Train(TrainArgs),
    /// Write predictions for every row of the prediction relation.
    Predict(PredictArgs),
    /// Compare factorized training and residual updates against join materialization.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelType {
    Dt,
    Rf,
    Gbm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CriterionArg {
    Variance,
    Gini,
    Entropy,
    ChiSquare,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Model JSON output path.
    #[arg(long)]
    out: PathBuf,
    /// Training-log CSV; defaults to the model path with a `.log.csv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "gbm")]
    model_type: ModelType,
    /// Boosting objective; defaults to rmse, or softmax for a categorical target.
    #[arg(long)]
    objective: Option<String>,
    /// Split criterion for dt/rf; defaults to variance, or gini for a categorical target.
    #[arg(long, value_enum)]
    criterion: Option<CriterionArg>,
    #[arg(long, default_value_t = 31)]
    num_leaves: usize,
    #[arg(long)]
    max_depth: Option<usize>,
    /// Boosting rounds, or trees for rf.
    #[arg(long, alias = "num-iterations", default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, alias = "min-data-in-leaf", default_value_t = 1.0)]
    min_leaf_count: f64,
    /// L2 leaf regularization of boosted trees.
    #[arg(long, default_value_t = factorboost::semiring::DEFAULT_BETA)]
    lambda_l2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of join tuples sampled per forest tree.
    #[arg(long, default_value_t = 1.0)]
    bagging_fraction: f64,
    /// Fraction of features offered to each forest tree.
    #[arg(long, default_value_t = 1.0)]
    feature_fraction: f64,
    /// Sample forest rows with replacement.
    #[arg(long)]
    bootstrap: bool,
    #[arg(long, env = "FACTORBOOST_THREADS")]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 1_000_000)]
    fact_rows: usize,
    #[arg(long, default_value_t = 10_000)]
    dim_rows: usize,
    #[arg(long, default_value_t = 8)]
    leaves: usize,
    /// Timed repetitions per strategy; the median is reported.
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(&a),
        Command::Predict(a) => predict(&a),
        Command::Bench(a) => bench(&a).map(|table| print!("{table}")),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            1
        }
    }
}

fn target_classes(ds: &Dataset) -> Result<Option<usize>> {
    let (rel, col) = ds.db.resolve(&ds.target)?;
    let column = &ds.db.relation(rel).columns()[col];
    if column.kind() != ColumnKind::Categorical {
        return Ok(None);
    }
    let dict = ds.db.dictionaries().categorical(&ds.target.relation, &ds.target.column);
    let max_code = column.codes().into_iter().flatten().copied().max().map_or(0, |c| c as usize + 1);
    Ok(Some(dict.map_or(max_code, |d| d.len()).max(max_code)))
}

struct LogRow {
    iteration: usize,
    metric_name: String,
    metric: f64,
    seconds: f64,
    messages_computed: usize,
    messages_reused: usize,
}

fn train(a: &TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    if a.num_leaves == 0 {
        bail!("--num-leaves must be at least 1");
    }
    if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
        bail!("--learning-rate must be positive");
    }
    let threads = a.threads.unwrap_or_else(factorboost::scheduler::default_workers);
    if threads == 0 {
        bail!("--threads must be at least 1");
    }
    let classes = target_classes(&ds)?;
    let task = match classes {
        Some(k) => Task::Classification { k },
        None => Task::Regression,
    };
    let criterion = match (a.criterion, classes) {
        (None, None) | (Some(CriterionArg::Variance), None) => Criterion::Variance,
        (None, Some(_)) => Criterion::Class {
            criterion: ClassCriterion::Gini,
        },
        (Some(CriterionArg::Variance), Some(_)) => bail!("variance criterion needs a numeric target"),
        (Some(_), None) => bail!("classification criteria need a categorical target"),
        (Some(c), Some(_)) => Criterion::Class {
            criterion: match c {
                CriterionArg::Gini => ClassCriterion::Gini,
                CriterionArg::Entropy => ClassCriterion::Entropy,
                _ => ClassCriterion::ChiSquare,
            },
        },
    };
    let tree = TreeParams {
        max_leaves: a.num_leaves,
        max_depth: a.max_depth.unwrap_or(usize::MAX),
        min_leaf_count: a.min_leaf_count,
        criterion,
        threads,
        ..TreeParams::default()
    };

    let mut log = Vec::new();
    let model = match a.model_type {
        ModelType::Dt => {
            let stats = ExecStats::new();
            let start = Instant::now();
            let t = fit_tree(&ds, task, &tree, &stats)?;
            log.push(tree_log_row(0, &t, task, start, &stats));
            EnsembleModel::from_tree(t, task)
        }
        ModelType::Rf => {
            let params = ForestParams {
                n_trees: a.iterations,
                sample: SampleSpec {
                    row_rate: a.bagging_fraction,
                    feature_rate: a.feature_fraction,
                    with_replacement: a.bootstrap,
                    seed: a.seed,
                },
                tree,
                threads,
            };
            let start = Instant::now();
            let m = train_random_forest(&ds.db, &ds.target, &ds.features, task, &params)?;
            let seconds = start.elapsed().as_secs_f64() / m.trees.len() as f64;
            for (i, t) in m.trees.iter().enumerate() {
                let (metric_name, metric) = leaf_metric(t, task);
                log.push(LogRow {
                    iteration: i,
                    metric_name,
                    metric,
                    seconds,
                    messages_computed: 0,
                    messages_reused: 0,
                });
            }
            m
        }
        ModelType::Gbm => {
            let objective = match (&a.objective, classes) {
                (Some(name), _) => Objective::from_name(name)?,
                (None, Some(_)) => Objective::Softmax { k: 0 },
                (None, None) => Objective::Rmse,
            };
            let objective = match (objective, classes) {
                (Objective::Softmax { .. }, Some(k)) => Objective::Softmax { k },
                (Objective::Softmax { .. }, None) => bail!("softmax needs a categorical target"),
                (_, Some(_)) => bail!("objective {} needs a numeric target", objective.name()),
                (o, None) => o,
            };
            let params = GbmParams {
                iterations: a.iterations,
                learning_rate: a.learning_rate,
                objective,
                tree,
                beta: a.lambda_l2,
                ..GbmParams::default()
            };
            let (m, report) = train_gbm(&ds.db, &ds.target, &ds.features, &params)?;
            for it in &report.iterations {
                log.push(LogRow {
                    iteration: it.iteration,
                    metric_name: report.metric.clone(),
                    metric: it.metric,
                    seconds: it.seconds,
                    messages_computed: it.messages_computed,
                    messages_reused: it.messages_reused,
                });
            }
            m
        }
    };
    let saved = SavedModel::from_trained(model, &ds.db, Some(&ds.target))?;
    save(&saved, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.csv"));
    write_log(&log_path, &log)?;
    Ok(())
}

fn fit_tree(ds: &Dataset, task: Task, params: &TreeParams, stats: &std::sync::Arc<ExecStats>) -> Result<TreeModel> {
    let mut input = match task {
        Task::Regression => TrainInput::regression(&ds.db, &ds.target, ds.features.clone())?,
        Task::Classification { k } => TrainInput::classification(&ds.db, &ds.target, ds.features.clone(), k)?,
    };
    input.stats = std::sync::Arc::clone(stats);
    Ok(train_decision_tree(&input, params)?)
}

/// Training rmse or error rate of a tree, from its leaf aggregates.
fn leaf_metric(t: &TreeModel, task: Task) -> (String, f64) {
    let leaves = t.leaves();
    match task {
        Task::Regression => {
            let (mut sse, mut n) = (0.0, 0.0);
            for l in leaves {
                let agg = &t.nodes[l].agg;
                if agg.len() == 3 && agg[0] > 0.0 {
                    sse += (agg[2] - agg[1] * agg[1] / agg[0]).max(0.0);
                    n += agg[0];
                }
            }
            ("rmse".into(), if n > 0.0 { (sse / n).sqrt() } else { 0.0 })
        }
        Task::Classification { k } => {
            let ring = SemiRing::ClassCount { k };
            let (mut wrong, mut n) = (0.0, 0.0);
            for l in leaves {
                let agg = &t.nodes[l].agg;
                if agg.len() == ring.width() {
                    let best = agg[1..].iter().copied().fold(0.0, f64::max);
                    wrong += agg[0] - best;
                    n += agg[0];
                }
            }
            ("error".into(), if n > 0.0 { wrong / n } else { 0.0 })
        }
    }
}

fn tree_log_row(iteration: usize, t: &TreeModel, task: Task, start: Instant, stats: &ExecStats) -> LogRow {
    let (metric_name, metric) = leaf_metric(t, task);
    LogRow {
        iteration,
        metric_name,
        metric,
        seconds: start.elapsed().as_secs_f64(),
        messages_computed: stats.computed(),
        messages_reused: stats.reused(),
    }
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from("iteration,metric_name,metric,seconds,messages_computed,messages_reused\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{},{}",
            r.iteration,
            r.metric_name,
            format_float(r.metric),
            r.seconds,
            r.messages_computed,
            r.messages_reused
        )?;
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn predict(a: &PredictArgs) -> Result<()> {
    let saved = factorboost::load(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let ds = load_dataset(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    let fact = prediction_relation(&ds.db)?;
    let preds = predict_batch(&saved, &ds.db, Some(fact))?;
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?,
    );
    match saved.model.task {
        Task::Regression => {
            writeln!(out, "row_id,prediction")?;
            for (i, p) in preds.iter().enumerate() {
                writeln!(out, "{i},{}", format_float(p[0]))?;
            }
        }
        Task::Classification { k } => {
            let labels: Vec<String> = match &saved.class_labels {
                Some(l) => l.clone(),
                None => (0..k).map(|c| c.to_string()).collect(),
            };
            let header: Vec<String> = labels.iter().map(|l| csv_field(&format!("p_{l}"))).collect();
            writeln!(out, "row_id,label,{}", header.join(","))?;
            for (i, p) in preds.iter().enumerate() {
                let best = factorboost::tree::argmax(p);
                let probs: Vec<String> = p.iter().map(|&v| format_float(v)).collect();
                writeln!(out, "{i},{},{}", csv_field(&labels[best]), probs.join(","))?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn time_runs(runs: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut secs = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        f()?;
        secs.push(start.elapsed().as_secs_f64());
    }
    Ok(median(secs))
}

/// Runs the benchmark and renders its result table.
fn bench(a: &BenchArgs) -> Result<String> {
    if a.runs == 0 || a.fact_rows == 0 || a.dim_rows == 0 || a.leaves == 0 {
        bail!("bench sizes must be positive");
    }
    let spec = StarSpec {
        fact_rows: a.fact_rows,
        dim_rows: a.dim_rows,
        seed: a.seed,
    };
    let mut db = star_schema(&spec)?;
    let fact = db.id("F")?;
    let params = TreeParams {
        max_leaves: a.leaves,
        ..TreeParams::default()
    };

    let mut table = String::new();
    writeln!(table, "star schema: fact {} rows, dim {} rows, {} leaves, median of {} runs", a.fact_rows, a.dim_rows, a.leaves, a.runs)?;
    writeln!(table)?;
    writeln!(table, "{:<34} {:>12} {:>16}", "tree training", "seconds", "peak rows")?;
    let fz_stats = ExecStats::new();
    let fz_secs = time_runs(1, || {
        let mut input = TrainInput::regression(&db, &star_target(), star_features())?;
        input.stats = std::sync::Arc::clone(&fz_stats);
        train_decision_tree(&input, &params)?;
        Ok(())
    })?;
    writeln!(table, "{:<34} {:>12.4} {:>16}", "factorized", fz_secs, fz_stats.peak_rows())?;
    let naive_stats = ExecStats::new();
    let naive_secs = time_runs(1, || {
        naive_regression_tree(&db, &star_target(), &star_features(), &params, &naive_stats)?;
        Ok(())
    })?;
    writeln!(table, "{:<34} {:>12.4} {:>16}", "materialized join", naive_secs, naive_stats.peak_rows())?;

    let tree = star_tree(&db, a.leaves)?;
    db.add_column(fact, Column::numeric("pred", vec![0.0; a.fact_rows]))?;
    let lr = 0.1;
    let in_place = time_runs(a.runs, || {
        update_residuals_snowflake(&mut db, fact, "pred", &tree, lr)?;
        Ok(())
    })?;
    let rebuild = time_runs(a.runs, || {
        rebuild_relation_update(&db, fact, "pred", &tree, lr)?;
        Ok(())
    })?;
    let ujoin = time_runs(a.runs, || {
        naive_ujoin_update(&db, fact, "pred", &tree, lr)?;
        Ok(())
    })?;
    let join_rows = materialize_join(&db, None)?.len();
    writeln!(table)?;
    writeln!(table, "{:<34} {:>12} {:>16}", "residual update", "seconds", "vs in-place")?;
    for (name, secs) in [
        ("in-place column swap", in_place),
        ("full-column rebuild", rebuild),
        ("naive U-join rebuild", ujoin),
    ] {
        writeln!(table, "{:<34} {:>12.4} {:>15.2}x", name, secs, secs / in_place)?;
    }
    writeln!(table)?;
    writeln!(table, "join tuples: {join_rows}")?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_table_lists_every_strategy() {
        let args = BenchArgs {
            fact_rows: 2000,
            dim_rows: 50,
            leaves: 4,
            runs: 1,
            seed: 1,
        };
        let table = bench(&args).unwrap();
        for needle in ["factorized", "materialized join", "in-place", "full-column", "U-join", "join tuples: 2000"] {
            assert!(table.contains(needle), "{table}");
        }
    }

    #[test]
    fn csv_fields_are_quoted_when_needed() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }

    #[test]
    fn usage_errors_are_parse_errors() {
        assert!(Cli::try_parse_from(["factorboost", "train"]).is_err());
        assert!(Cli::try_parse_from(["factorboost", "frobnicate"]).is_err());
        let cli = Cli::try_parse_from(["factorboost", "train", "--config", "a", "--out", "b", "--num-iterations", "7"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!(a.iterations, 7);
        assert_eq!(a.model_type, ModelType::Gbm);
    }
}
