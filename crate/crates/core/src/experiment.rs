//! Experiment runners behind the command-line interface: the toy regression,
//! the repeated-split UCI protocol and the forward-pass benchmark.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    derive_seed, grid_search_dropout, make_splits, toy_generate, Dataset, GridSearchOutcome,
    ProtocolConfig, TOY_DEFAULT_N,
};
use crate::error::{Error, Result};
use crate::moment_core::CovarianceMode;
use crate::network::{
    build_model, init_parameters, Architecture, HeadKind, ModelConfig, ParameterSet,
};
use crate::objective::{evaluate, predict_all, predictive_moments, PredictiveMoments};
use crate::special::{counters, OpCounts};
use crate::training::{train, TrainConfig};

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Default dropout rate of the toy experiment.
pub const TOY_DROPOUT: f64 = 0.001;
/// Number of evenly spaced evaluation points in `[-1, 1]`.
pub const TOY_GRID_POINTS: usize = 200;

/// Predictive summary at one evaluation point of the toy experiment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyPoint {
    pub x: f64,
    pub pred_mean: f64,
    pub pred_std: f64,
    pub epistemic_std: f64,
    pub aleatoric_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyRun {
    pub architecture: Architecture,
    pub points: Vec<ToyPoint>,
    pub final_loss: f64,
}

impl ToyRun {
    fn mean_std_where(&self, keep: impl Fn(f64) -> bool) -> f64 {
        let sel: Vec<f64> = self
            .points
            .iter()
            .filter(|p| keep(p.x))
            .map(|p| p.pred_std)
            .collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    }

    /// Mean predictive std over `0.6 ≤ |x| ≤ 1`.
    pub fn outer_std(&self) -> f64 {
        self.mean_std_where(|x| x.abs() >= 0.6)
    }

    /// Mean predictive std over `|x| ≤ 0.4`.
    pub fn inner_std(&self) -> f64 {
        self.mean_std_where(|x| x.abs() <= 0.4)
    }

    /// Pearson correlation between the predicted aleatoric std and `|sin x|` on `[-0.5, 0.5]`.
    pub fn aleatoric_correlation(&self) -> f64 {
        let (a, b): (Vec<f64>, Vec<f64>) = self
            .points
            .iter()
            .filter(|p| p.x.abs() <= 0.5)
            .map(|p| (p.aleatoric_std, p.x.sin().abs()))
            .unzip();
        pearson(&a, &b)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,pred_mean,pred_std,epistemic_std,aleatoric_std\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                p.x, p.pred_mean, p.pred_std, p.epistemic_std, p.aleatoric_std
            );
        }
        s
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Evenly spaced points covering `[-1, 1]` including both ends.
pub fn toy_grid() -> Vec<f64> {
    (0..TOY_GRID_POINTS)
        .map(|i| -1.0 + 2.0 * i as f64 / (TOY_GRID_POINTS - 1) as f64)
        .collect()
}

/// Trains one architecture on the toy data and evaluates it on [`toy_grid`].
///
/// Features and labels are used as generated, without standardization.
pub fn toy_run(
    arch: Architecture,
    data: &Dataset,
    train_config: &TrainConfig,
    dropout: f64,
) -> Result<ToyRun> {
    let config = build_model(
        arch,
        1,
        crate::network::DEFAULT_HIDDEN_WIDTH,
        dropout,
        CovarianceMode::Full,
        HeadKind::Heteroscedastic2,
    )?;
    let outcome = train(&config, train_config, data)?;
    let mut points = Vec::with_capacity(TOY_GRID_POINTS);
    for x in toy_grid() {
        let head = crate::network::forward(&config, &outcome.params, &[x])?;
        let pm = predictive_moments(&head, config.head)?;
        let epistemic = head.variance(0);
        let aleatoric = pm.variance - epistemic;
        points.push(ToyPoint {
            x,
            pred_mean: pm.mean,
            pred_std: pm.variance.sqrt(),
            epistemic_std: epistemic.sqrt(),
            aleatoric_std: aleatoric.max(0.0).sqrt(),
        });
    }
    Ok(ToyRun {
        architecture: arch,
        points,
        final_loss: outcome.loss_trace.last().copied().unwrap_or(f64::NAN),
    })
}

/// Runs the toy experiment for both architectures and writes
/// `toy_train.csv` and `toy_<arch>.csv` into `out_dir`.
pub fn run_toy(out_dir: &Path, train_config: &TrainConfig, dropout: f64) -> Result<Vec<ToyRun>> {
    let data = toy_generate(TOY_DEFAULT_N, train_config.seed);
    let mut train_csv = String::from("x,y\n");
    for i in 0..data.len() {
        let _ = writeln!(train_csv, "{},{}", data.row(i)[0], data.label(i));
    }
    write_file(&out_dir.join("toy_train.csv"), &train_csv)?;
    let mut runs = Vec::new();
    for arch in [Architecture::MpGelu, Architecture::Relu] {
        let run = toy_run(arch, &data, train_config, dropout)?;
        write_file(
            &out_dir.join(format!("toy_{}.csv", arch.as_str())),
            &run.to_csv(),
        )?;
        runs.push(run);
    }
    Ok(runs)
}

/// Settings of one UCI protocol run.
#[derive(Clone, Debug, PartialEq)]
pub struct UciOptions {
    pub arch: Architecture,
    pub mode: CovarianceMode,
    pub head: HeadKind,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    /// Fixed dropout rate; `None` runs the grid search.
    pub dropout: Option<f64>,
    pub timing_repetitions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: usize,
    pub nll: f64,
    pub rmse: f64,
    pub runtime_s: f64,
}

/// One dataset × architecture × variant result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub dataset: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "Q")]
    pub q: usize,
    pub architecture: Architecture,
    pub covariance_mode: CovarianceMode,
    pub head: HeadKind,
    pub dropout_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_search: Option<GridSearchOutcome>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub splits: Vec<SplitResult>,
    pub nll_mean: f64,
    pub nll_se: f64,
    pub rmse_mean: f64,
    pub rmse_se: f64,
    pub runtime_s: f64,
}

/// Mean and standard error (sample std / √n).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median wall time in seconds of `reps` runs of `f`, after one warm-up run.
pub fn time_median<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        std::hint::black_box(f()?);
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&mut times))
}

/// Grid search (unless a rate is fixed), then train and test on every split.
///
/// Splits train in parallel on `protocol.jobs` threads; the runtime of each
/// test pass is measured afterwards on the calling thread alone.
pub fn run_uci(ds: &Dataset, opts: &UciOptions) -> Result<ExperimentResult> {
    let protocol = &opts.protocol;
    let (dropout_rate, grid_search) = match opts.dropout {
        Some(rate) => (rate, None),
        None => {
            let g =
                grid_search_dropout(ds, opts.arch, opts.mode, opts.head, &opts.train, protocol)?;
            (g.best_rate, Some(g))
        }
    };
    let config = build_model(
        opts.arch,
        ds.q(),
        protocol.hidden_width,
        dropout_rate,
        opts.mode,
        opts.head,
    )?;
    let splits = make_splits(
        ds,
        protocol.repeats,
        protocol.test_frac,
        0.0,
        protocol.split_seed,
    )?;
    let trained: Vec<(Dataset, ParameterSet, f64, f64)> = protocol.pool()?.install(|| {
        splits
            .par_iter()
            .enumerate()
            .map(|(k, split)| {
                let data = split.materialize(ds);
                let tc = TrainConfig {
                    seed: derive_seed(opts.train.seed, &[k as u64]),
                    ..opts.train
                };
                let outcome = train(&config, &tc, &data.train)?;
                let eval = evaluate(&config, &outcome.params, &data.test)?;
                Ok((data.test, outcome.params, eval.nll, eval.rmse))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut results = Vec::with_capacity(trained.len());
    for (k, (test, params, nll, rmse)) in trained.iter().enumerate() {
        let runtime_s = time_median(opts.timing_repetitions, || {
            predict_all(&config, params, test)
        })?;
        results.push(SplitResult {
            split: k,
            nll: *nll,
            rmse: *rmse,
            runtime_s,
        });
    }
    let nlls: Vec<f64> = results.iter().map(|r| r.nll).collect();
    let rmses: Vec<f64> = results.iter().map(|r| r.rmse).collect();
    let (nll_mean, nll_se) = mean_and_se(&nlls);
    let (rmse_mean, rmse_se) = mean_and_se(&rmses);
    let runtime_s = results.iter().map(|r| r.runtime_s).sum::<f64>() / results.len() as f64;
    Ok(ExperimentResult {
        dataset: ds.name().to_string(),
        n: ds.len(),
        q: ds.q(),
        architecture: opts.arch,
        covariance_mode: opts.mode,
        head: opts.head,
        dropout_rate,
        grid_search,
        learning_rate: opts.train.learning_rate,
        epochs: opts.train.epochs,
        batch_size: opts.train.batch_size,
        seed: opts.train.seed,
        splits: results,
        nll_mean,
        nll_se,
        rmse_mean,
        rmse_se,
        runtime_s,
    })
}

/// Column set of the results tables.
pub const TABLE_HEADER: &str = "dataset,N,Q,nll_mean,nll_se,rmse_mean,rmse_se,runtime_s";

impl ExperimentResult {
    pub fn table_row(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.6}",
            self.dataset,
            self.n,
            self.q,
            self.nll_mean,
            self.nll_se,
            self.rmse_mean,
            self.rmse_se,
            self.runtime_s
        )
    }

    /// Stem shared by the result files of this variant, e.g. `mp_gelu_full_2out`.
    pub fn variant_stem(&self) -> String {
        variant_stem(self.architecture, self.covariance_mode, self.head)
    }
}

pub fn variant_stem(arch: Architecture, mode: CovarianceMode, head: HeadKind) -> String {
    format!(
        "{}_{}_{}out",
        arch.as_str(),
        mode.as_str(),
        head.output_dim()
    )
}

/// Writes `<dataset>_<variant>.json` and inserts or replaces the dataset's row
/// in `table_<variant>.csv`. Returns the paths written.
pub fn write_result(out_dir: &Path, result: &ExperimentResult) -> Result<(PathBuf, PathBuf)> {
    let stem = result.variant_stem();
    let json_path = out_dir.join(format!("{}_{stem}.json", result.dataset));
    write_file(&json_path, &(serde_json::to_string_pretty(result)? + "\n"))?;

    let table_path = out_dir.join(format!("table_{stem}.csv"));
    let mut rows: Vec<String> = match fs::read_to_string(&table_path) {
        Ok(text) => text
            .lines()
            .skip(1)
            .filter(|l| !l.is_empty() && l.split(',').next() != Some(result.dataset.as_str()))
            .map(str::to_string)
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(&table_path, e)),
    };
    rows.push(result.table_row());
    rows.sort();
    let mut table = String::from(TABLE_HEADER);
    table.push('\n');
    for r in rows {
        table.push_str(&r);
        table.push('\n');
    }
    write_file(&table_path, &table)?;
    Ok((json_path, table_path))
}

/// Hidden widths of the benchmark.
pub const BENCHMARK_WIDTHS: [usize; 4] = [20, 64, 256, 1024];
/// Input dimension of the benchmark models.
pub const BENCHMARK_INPUT_DIM: usize = 13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub width: usize,
    pub covariance_mode: CovarianceMode,
    pub passes: usize,
    pub mp_gelu_layers: usize,
    pub relu_layers: usize,
    pub mp_gelu_ns: f64,
    pub relu_ns: f64,
    /// `relu_ns / mp_gelu_ns`.
    pub speedup: f64,
    pub mp_gelu_calls: OpCounts,
    pub relu_calls: OpCounts,
}

impl BenchmarkRow {
    pub const CSV_HEADER: &'static str = "width,cov,passes,mp_gelu_layers,relu_layers,mp_gelu_ns,relu_ns,speedup,mp_gelu_erf,mp_gelu_exp,mp_gelu_sqrt,relu_erf,relu_exp,relu_sqrt";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.0},{:.0},{:.4},{},{},{},{},{},{}",
            self.width,
            self.covariance_mode.as_str(),
            self.passes,
            self.mp_gelu_layers,
            self.relu_layers,
            self.mp_gelu_ns,
            self.relu_ns,
            self.speedup,
            self.mp_gelu_calls.erf,
            self.mp_gelu_calls.exp,
            self.mp_gelu_calls.sqrt,
            self.relu_calls.erf,
            self.relu_calls.exp,
            self.relu_calls.sqrt
        )
    }
}

/// Forward passes per timed repetition, sized so that a repetition takes
/// roughly the same time at every width.
pub fn benchmark_passes(width: usize, mode: CovarianceMode) -> usize {
    let cost = match mode {
        CovarianceMode::Full => (width as f64).powi(3),
        CovarianceMode::Diagonal => (width as f64).powi(2),
    };
    ((2.0e7 / cost) as usize).clamp(1, 2000)
}

struct Bench {
    config: ModelConfig,
    params: ParameterSet,
}

impl Bench {
    fn new(arch: Architecture, width: usize, mode: CovarianceMode, seed: u64) -> Result<Self> {
        let config = build_model(
            arch,
            BENCHMARK_INPUT_DIM,
            width,
            0.05,
            mode,
            HeadKind::Heteroscedastic2,
        )?;
        let params = init_parameters(&config, seed);
        Ok(Bench { config, params })
    }

    fn pass(&self, x: &[f64]) -> Result<PredictiveMoments> {
        let head = crate::network::forward(&self.config, &self.params, x)?;
        predictive_moments(&head, self.config.head)
    }

    fn counts_per_pass(&self, x: &[f64]) -> Result<OpCounts> {
        let before = counters();
        self.pass(x)?;
        Ok(counters() - before)
    }
}

/// Times matched MP-GELU and ReLU networks at one width. Repetitions of the two
/// architectures are interleaved; each reports the median over `repetitions`.
pub fn benchmark_width(
    width: usize,
    mode: CovarianceMode,
    repetitions: usize,
    seed: u64,
) -> Result<BenchmarkRow> {
    let mp = Bench::new(Architecture::MpGelu, width, mode, seed)?;
    let relu = Bench::new(Architecture::Relu, width, mode, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[width as u64]));
    let passes = benchmark_passes(width, mode);
    let inputs: Vec<Vec<f64>> = (0..passes)
        .map(|_| {
            (0..BENCHMARK_INPUT_DIM)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect()
        })
        .collect();
    let run = |b: &Bench| -> Result<f64> {
        let start = Instant::now();
        for x in &inputs {
            std::hint::black_box(b.pass(x)?);
        }
        Ok(start.elapsed().as_secs_f64() * 1e9 / passes as f64)
    };
    run(&mp)?;
    run(&relu)?;
    let mut mp_times = Vec::with_capacity(repetitions);
    let mut relu_times = Vec::with_capacity(repetitions);
    for rep in 0..repetitions.max(1) {
        // Alternate which architecture goes first to cancel drift.
        if rep % 2 == 0 {
            mp_times.push(run(&mp)?);
            relu_times.push(run(&relu)?);
        } else {
            relu_times.push(run(&relu)?);
            mp_times.push(run(&mp)?);
        }
    }
    let mp_gelu_ns = median(&mut mp_times);
    let relu_ns = median(&mut relu_times);
    Ok(BenchmarkRow {
        width,
        covariance_mode: mode,
        passes,
        mp_gelu_layers: mp.config.layers.len(),
        relu_layers: relu.config.layers.len(),
        mp_gelu_ns,
        relu_ns,
        speedup: relu_ns / mp_gelu_ns,
        mp_gelu_calls: mp.counts_per_pass(&inputs[0])?,
        relu_calls: relu.counts_per_pass(&inputs[0])?,
    })
}

pub fn run_benchmark(
    widths: &[usize],
    mode: CovarianceMode,
    repetitions: usize,
    seed: u64,
) -> Result<Vec<BenchmarkRow>> {
    widths
        .iter()
        .map(|&w| benchmark_width(w, mode, repetitions, seed))
        .collect()
}

pub fn benchmark_csv(rows: &[BenchmarkRow]) -> String {
    let mut s = String::from(BenchmarkRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_grid_spans_unit_interval() {
        let g = toy_grid();
        assert_eq!(g.len(), 200);
        assert_eq!((g[0], g[199]), (-1.0, 1.0));
    }

    #[test]
    fn standard_error_of_constant_is_zero() {
        assert_eq!(mean_and_se(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, se) = mean_and_se(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_of_linear_relation_is_one() {
        let a = [1.0, 2.0, 3.0];
        assert!((pearson(&a, &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn table_rows_are_replaced_per_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ExperimentResult {
            dataset: "boston".into(),
            n: 506,
            q: 13,
            architecture: Architecture::MpGelu,
            covariance_mode: CovarianceMode::Full,
            head: HeadKind::Heteroscedastic2,
            dropout_rate: 0.01,
            grid_search: None,
            learning_rate: 0.001,
            epochs: 1,
            batch_size: 256,
            seed: 0,
            splits: vec![],
            nll_mean: 1.0,
            nll_se: 0.1,
            rmse_mean: 0.5,
            rmse_se: 0.05,
            runtime_s: 0.001,
        };
        write_result(dir.path(), &r).unwrap();
        r.nll_mean = 2.0;
        let (_, table) = write_result(dir.path(), &r).unwrap();
        let text = fs::read_to_string(table).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(TABLE_HEADER));
        assert!(text.contains("boston,506,13,2.0000"));
    }

    #[test]
    fn benchmark_counts_follow_the_operation_table() {
        let row = benchmark_width(8, CovarianceMode::Diagonal, 1, 0).unwrap();
        // Two MP-GELU layers: one erf and one sqrt per unit.
        assert_eq!(row.mp_gelu_calls.erf, 16);
        assert_eq!(row.mp_gelu_calls.exp, 0);
        // Two ReLU layers: erf, exp and sqrt per unit.
        assert_eq!(row.relu_calls.erf + row.relu_calls.exp, 32);
        assert_eq!((row.mp_gelu_layers, row.relu_layers), (6, 8));
    }
}
