//! File formats, run configuration and the command implementations behind
//! the `fts-trend` binary.
//!
//! Matrix CSV layout: the header row holds a corner label followed by one
//! label per curve (time), every other row holds an `s` label followed by the
//! curve values at that `s`. Long tables have one `(s, t, value)` triple per
//! row.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{run_benchmark, BenchmarkConfig, BenchmarkRow, CellSummary, EstimatorId};
use crate::forecast_pipeline::{compare_forecasts, summed_l1, PipelineConfig, DEFAULT_DIFF_THRESHOLD};
use crate::fts_sim::{add_trend, simulate_far1, FARProcessSpec, TrendSurfaceId};
use crate::series::GridFunctionSeries;
use crate::smoothing::{select_lambdas_scaled, MarginalScaling};
use crate::splines::BSplineBasis;
use crate::tensor_trend::{fit_trend_with_bases, ForecastStep};

/// Environment variable naming the output directory.
pub const OUTPUT_DIR_ENV: &str = "FTS_TREND_OUTPUT_DIR";
/// Exit status of a run that wrote its outputs but had failed cells.
pub const EXIT_PARTIAL_FAILURE: i32 = 3;

/// A loaded matrix CSV: the series plus the labels it was read with.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub series: GridFunctionSeries,
    pub time_labels: Vec<String>,
    pub corner_label: String,
}

impl Dataset {
    /// Labels the curves `1..=N` and the corner `s`.
    pub fn from_series(series: GridFunctionSeries) -> Self {
        let time_labels = (1..=series.len()).map(|i| i.to_string()).collect();
        Self {
            series,
            time_labels,
            corner_label: "s".into(),
        }
    }
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_number(cell: &str, line: u64, what: &str) -> Result<f64> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Err(parse_err(line, format!("missing {what}")));
    }
    let v: f64 = cell
        .parse()
        .map_err(|_| parse_err(line, format!("{what} '{cell}' is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("{what} '{cell}' is not finite")));
    }
    Ok(v)
}

/// Reads a matrix CSV. With `rescale_time` the curves get `t = n/N`;
/// otherwise the time labels must be numbers in `(0, 1]`.
pub fn read_dataset<R: Read>(reader: R, rescale_time: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(rec) => rec?,
        None => return Err(parse_err(1, "empty file")),
    };
    if header.len() < 2 {
        return Err(parse_err(1, "header needs a corner label and at least one time label"));
    }
    let corner_label = header[0].trim().to_string();
    let time_labels: Vec<String> = header.iter().skip(1).map(|c| c.trim().to_string()).collect();
    for (i, label) in time_labels.iter().enumerate() {
        if label.is_empty() {
            return Err(parse_err(1, format!("time label {} is empty", i + 1)));
        }
        if time_labels[..i].contains(label) {
            return Err(parse_err(1, format!("duplicate time label '{label}'")));
        }
    }
    let n = time_labels.len();
    let mut s_grid = Vec::new();
    let mut body = Vec::new();
    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != n + 1 {
            return Err(parse_err(line, format!("expected {} cells, found {}", n + 1, rec.len())));
        }
        let s = parse_number(&rec[0], line, "s label")?;
        if let Some(&prev) = s_grid.last() {
            if s <= prev {
                return Err(parse_err(line, format!("s label {s} does not increase (previous {prev})")));
            }
        }
        s_grid.push(s);
        for cell in rec.iter().skip(1) {
            body.push(parse_number(cell, line, "value")?);
        }
    }
    let m = s_grid.len();
    if m < 2 {
        return Err(parse_err(1, "at least two s rows are required"));
    }
    let values = DMatrix::from_row_slice(m, n, &body);
    let domain = (s_grid[0], s_grid[m - 1]);
    let series = if rescale_time {
        GridFunctionSeries::new(values, s_grid, domain)?
    } else {
        let t = time_labels
            .iter()
            .map(|l| parse_number(l, 1, "time label"))
            .collect::<Result<Vec<_>>>()?;
        GridFunctionSeries::with_time_grid(values, s_grid, t, domain)?
    };
    Ok(Dataset {
        series,
        time_labels,
        corner_label,
    })
}

pub fn load_dataset(path: &Path, rescale_time: bool) -> Result<Dataset> {
    read_dataset(File::open(path)?, rescale_time)
}

/// `{:?}` prints the shortest string that parses back to the same `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_matrix<W: Write>(
    writer: W,
    corner: &str,
    s_grid: &[f64],
    time_labels: &[String],
    values: &DMatrix<f64>,
) -> Result<()> {
    if values.shape() != (s_grid.len(), time_labels.len()) {
        return Err(Error::DimensionMismatch(format!(
            "{:?} values for {} s labels and {} time labels",
            values.shape(),
            s_grid.len(),
            time_labels.len()
        )));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(std::iter::once(corner).chain(time_labels.iter().map(String::as_str)))?;
    for (i, s) in s_grid.iter().enumerate() {
        let row: Vec<String> = std::iter::once(fmt_f64(*s))
            .chain(values.row(i).iter().map(|v| fmt_f64(*v)))
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    write_matrix(
        file,
        &data.corner_label,
        data.series.s_grid(),
        &data.time_labels,
        data.series.values(),
    )
}

/// Long format: columns `s`, `t` (the time label) and `value`.
pub fn write_long<W: Write>(writer: W, s_grid: &[f64], time_labels: &[String], values: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["s", "t", "value"])?;
    for (j, t) in time_labels.iter().enumerate() {
        for (i, s) in s_grid.iter().enumerate() {
            w.write_record([fmt_f64(*s), t.clone(), fmt_f64(values[(i, j)])])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub k1: usize,
    pub k2: usize,
    pub lambda_s: Option<f64>,
    pub lambda_t: Option<f64>,
    pub horizon: usize,
    pub r: usize,
    pub p_max: usize,
    pub replications: usize,
    pub base_seed: u64,
    pub output_dir: PathBuf,
    pub scaling: MarginalScaling,
    pub step: ForecastStep,
    pub diff_threshold: f64,
    /// Curves per synthetic series.
    pub n: usize,
    pub trends: Vec<TrendSurfaceId>,
    pub estimators: Vec<EstimatorId>,
    pub n_values: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bench = BenchmarkConfig::default();
        Self {
            k1: bench.k1,
            k2: bench.k2,
            lambda_s: None,
            lambda_t: None,
            horizon: 4,
            r: 4,
            p_max: 5,
            replications: bench.replications,
            base_seed: bench.base_seed,
            output_dir: PathBuf::from("out"),
            scaling: bench.scaling,
            step: ForecastStep::default(),
            diff_threshold: DEFAULT_DIFF_THRESHOLD,
            n: 300,
            trends: bench.trends,
            estimators: bench.estimators,
            n_values: bench.n_values,
        }
    }
}

pub fn parse_scaling(value: &str) -> Result<MarginalScaling> {
    match value.trim().to_ascii_lowercase().replace('_', "-").as_str() {
        "literal" => Ok(MarginalScaling::Literal),
        "sample-size" | "samplesize" => Ok(MarginalScaling::SampleSize),
        other => Err(Error::Config(format!("unknown scaling '{other}'"))),
    }
}

pub fn parse_step(value: &str) -> Result<ForecastStep> {
    match value.trim().to_ascii_lowercase().as_str() {
        "harmonic" => Ok(ForecastStep::Harmonic),
        "uniform" => Ok(ForecastStep::Uniform),
        other => Err(Error::Config(format!("unknown forecast step '{other}'"))),
    }
}

fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<T>().map_err(|e| Error::Config(format!("'{v}': {e}"))))
        .collect()
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key} = '{value}': {e}")))
}

impl RunConfig {
    /// Sets one field from its textual form; keys are the field names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.trim() {
            "k1" => self.k1 = parse_value(key, value)?,
            "k2" => self.k2 = parse_value(key, value)?,
            "lambda_s" => self.lambda_s = Some(parse_value(key, value)?),
            "lambda_t" => self.lambda_t = Some(parse_value(key, value)?),
            "horizon" | "h" => self.horizon = parse_value(key, value)?,
            "r" => self.r = parse_value(key, value)?,
            "p_max" => self.p_max = parse_value(key, value)?,
            "replications" => self.replications = parse_value(key, value)?,
            "base_seed" => self.base_seed = parse_value(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value.trim()),
            "scaling" => self.scaling = parse_scaling(value)?,
            "step" => self.step = parse_step(value)?,
            "diff_threshold" => self.diff_threshold = parse_value(key, value)?,
            "n" => self.n = parse_value(key, value)?,
            "trends" => self.trends = parse_list(value)?,
            "estimators" => self.estimators = parse_list(value)?,
            "n_values" => self.n_values = parse_list(value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(i as u64 + 1, format!("expected key = value, found '{line}'")))?;
            self.set(key, value).map_err(|e| parse_err(i as u64 + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k1 < 4 || self.k2 < 4 {
            return bad(format!("k1 and k2 must be at least 4, got {} and {}", self.k1, self.k2));
        }
        for (name, v) in [("lambda_s", self.lambda_s), ("lambda_t", self.lambda_t)] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return bad(format!("{name} must be a finite nonnegative number, got {v}"));
                }
            }
        }
        for (name, v) in [
            ("horizon", self.horizon),
            ("r", self.r),
            ("replications", self.replications),
            ("n", self.n),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.trends.is_empty() || self.estimators.is_empty() || self.n_values.is_empty() {
            return bad("trends, estimators and n_values must be nonempty".into());
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            k1: self.k1,
            k2: self.k2,
            r: self.r,
            p_max: self.p_max,
            lambda_s: self.lambda_s,
            lambda_t: self.lambda_t,
            scaling: self.scaling,
            step: self.step,
            diff_threshold: self.diff_threshold,
        }
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            trends: self.trends.clone(),
            estimators: self.estimators.clone(),
            n_values: self.n_values.clone(),
            replications: self.replications,
            base_seed: self.base_seed,
            k1: self.k1,
            k2: self.k2,
            scaling: self.scaling,
            ..BenchmarkConfig::default()
        }
    }
}

/// Files written by a command and the number of failed cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub failures: usize,
}

impl CommandOutput {
    pub fn exit_code(&self) -> i32 {
        if self.failures == 0 {
            0
        } else {
            EXIT_PARTIAL_FAILURE
        }
    }
}

struct OutputDir {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl OutputDir {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let mut file = BufWriter::new(File::create(&path)?);
        f(&mut file)?;
        file.flush()?;
        self.files.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    fn finish(self, failures: usize) -> CommandOutput {
        CommandOutput {
            files: self.files,
            failures,
        }
    }
}

/// Contents of `fit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetrendSummary {
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub lambda_s_selected: bool,
    pub lambda_t_selected: bool,
    pub edf: f64,
    pub ridge: Option<f64>,
    pub k1: usize,
    pub k2: usize,
    pub scaling: MarginalScaling,
    pub num_points: usize,
    pub num_curves: usize,
}

/// Writes `trend.csv`, `residual.csv`, their long forms and `fit.json`.
pub fn command_detrend(cfg: &RunConfig, data: &Dataset) -> Result<CommandOutput> {
    cfg.validate()?;
    let series = &data.series;
    let (lo, hi) = series.s_domain();
    let basis_s = BSplineBasis::cubic(lo, hi, cfg.k1)?;
    let basis_t = BSplineBasis::cubic(0.0, 1.0, cfg.k2)?;
    let (ls, lt) = match (cfg.lambda_s, cfg.lambda_t) {
        (Some(ls), Some(lt)) => (ls, lt),
        (ls, lt) => {
            let (rs, rt) = select_lambdas_scaled(series, &basis_s, &basis_t, cfg.scaling)?;
            (ls.unwrap_or(rs), lt.unwrap_or(rt))
        }
    };
    let fit = fit_trend_with_bases(series, basis_s, basis_t, ls, lt)?;
    let trend = fit.fitted_values(series)?;
    let residual = series.values() - &trend;
    let s = series.s_grid();
    let labels = &data.time_labels;
    let corner = &data.corner_label;
    let mut out = OutputDir::create(&cfg.output_dir)?;
    out.write("trend.csv", |w| write_matrix(w, corner, s, labels, &trend))?;
    out.write("residual.csv", |w| write_matrix(w, corner, s, labels, &residual))?;
    out.write("trend_long.csv", |w| write_long(w, s, labels, &trend))?;
    out.write("residual_long.csv", |w| write_long(w, s, labels, &residual))?;
    out.json(
        "fit.json",
        &DetrendSummary {
            lambda_s: ls,
            lambda_t: lt,
            lambda_s_selected: cfg.lambda_s.is_none(),
            lambda_t_selected: cfg.lambda_t.is_none(),
            edf: fit.edf(),
            ridge: fit.ridge(),
            k1: cfg.k1,
            k2: cfg.k2,
            scaling: cfg.scaling,
            num_points: series.num_points(),
            num_curves: series.len(),
        },
    )?;
    Ok(out.finish(0))
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub config: BenchmarkConfig,
    pub rows: usize,
    pub failures: usize,
    pub cells: Vec<CellSummary>,
}

/// One entry of `errors.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub trend: TrendSurfaceId,
    pub estimator: EstimatorId,
    pub n: usize,
    pub replication: usize,
    pub seed: u64,
    pub error: String,
}

impl From<&BenchmarkRow> for FailedCell {
    fn from(row: &BenchmarkRow) -> Self {
        Self {
            trend: row.trend,
            estimator: row.estimator,
            n: row.n,
            replication: row.replication,
            seed: row.seed,
            error: row.error.clone(),
        }
    }
}

/// Writes `benchmark.csv` and `summary.json`, plus `errors.json` when some
/// cells failed.
pub fn command_benchmark(cfg: &RunConfig) -> Result<CommandOutput> {
    cfg.validate()?;
    let bench = cfg.benchmark();
    let report = run_benchmark(&bench)?;
    let failed: Vec<FailedCell> = report.failures().map(FailedCell::from).collect();
    let mut out = OutputDir::create(&cfg.output_dir)?;
    out.write("benchmark.csv", |w| report.write_csv(w))?;
    out.json(
        "summary.json",
        &BenchmarkSummary {
            config: bench,
            rows: report.rows.len(),
            failures: failed.len(),
            cells: report.summary.clone(),
        },
    )?;
    if !failed.is_empty() {
        out.json("errors.json", &failed)?;
    }
    Ok(out.finish(failed.len()))
}

/// Contents of `forecast.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSummary {
    pub holdout: usize,
    pub time_labels: Vec<String>,
    pub l1_with: f64,
    pub l1_without: f64,
    pub l1_with_by_horizon: Vec<f64>,
    pub l1_without_by_horizon: Vec<f64>,
}

/// Holds out the last `holdout` curves and writes `truth.csv`,
/// `with_trend.csv`, `without_trend.csv`, `forecast.json` and the long table
/// `forecast_long.csv`.
pub fn command_forecast(cfg: &RunConfig, data: &Dataset, holdout: usize) -> Result<CommandOutput> {
    cfg.validate()?;
    if holdout == 0 {
        return Err(Error::InvalidArgument("holdout must be at least 1".into()));
    }
    let cmp = compare_forecasts(&data.series, holdout, &cfg.pipeline())?;
    let n = data.series.len();
    let labels: Vec<String> = data.time_labels[n - holdout..].to_vec();
    let s = data.series.s_grid();
    let by_horizon = |pred: &DMatrix<f64>| -> Result<Vec<f64>> {
        (0..holdout)
            .map(|j| {
                summed_l1(
                    s,
                    &cmp.truth.columns(j, 1).into_owned(),
                    &pred.columns(j, 1).into_owned(),
                )
            })
            .collect()
    };
    let summary = ForecastSummary {
        holdout,
        time_labels: labels.clone(),
        l1_with: cmp.l1_with,
        l1_without: cmp.l1_without,
        l1_with_by_horizon: by_horizon(&cmp.with_trend)?,
        l1_without_by_horizon: by_horizon(&cmp.without_trend)?,
    };
    let corner = &data.corner_label;
    let mut out = OutputDir::create(&cfg.output_dir)?;
    out.write("truth.csv", |w| write_matrix(w, corner, s, &labels, &cmp.truth))?;
    out.write("with_trend.csv", |w| write_matrix(w, corner, s, &labels, &cmp.with_trend))?;
    out.write("without_trend.csv", |w| write_matrix(w, corner, s, &labels, &cmp.without_trend))?;
    out.write("forecast_long.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["horizon", "t", "s", "truth", "with_trend", "without_trend"])?;
        for (j, label) in labels.iter().enumerate() {
            for (i, sv) in s.iter().enumerate() {
                csv.write_record([
                    (j + 1).to_string(),
                    label.clone(),
                    fmt_f64(*sv),
                    fmt_f64(cmp.truth[(i, j)]),
                    fmt_f64(cmp.with_trend[(i, j)]),
                    fmt_f64(cmp.without_trend[(i, j)]),
                ])?;
            }
        }
        csv.flush()?;
        Ok(())
    })?;
    out.json("forecast.json", &summary)?;
    Ok(out.finish(0))
}

/// FAR(1) series of `n` curves on the default grid, plus `trend` if given.
pub fn synthetic_dataset(trend: Option<TrendSurfaceId>, n: usize, seed: u64) -> Result<Dataset> {
    let spec = FARProcessSpec::new(seed);
    let far = simulate_far1(&spec, n)?;
    let series = match trend {
        Some(id) => add_trend(id, &far)?,
        None => far,
    };
    Ok(Dataset::from_series(series))
}

/// Writes `series.csv` and, with a trend, the true surface `trend.csv`.
pub fn command_simulate(cfg: &RunConfig, trend: Option<TrendSurfaceId>) -> Result<CommandOutput> {
    cfg.validate()?;
    let data = synthetic_dataset(trend, cfg.n, cfg.base_seed)?;
    let mut out = OutputDir::create(&cfg.output_dir)?;
    out.write("series.csv", |w| {
        write_matrix(
            w,
            &data.corner_label,
            data.series.s_grid(),
            &data.time_labels,
            data.series.values(),
        )
    })?;
    if let Some(id) = trend {
        let s = data.series.s_grid();
        let t = data.series.t_grid();
        let surface = DMatrix::from_fn(s.len(), t.len(), |i, j| id.eval(s[i], t[j]));
        out.write("trend.csv", |w| write_matrix(w, &data.corner_label, s, &data.time_labels, &surface))?;
    }
    Ok(out.finish(0))
}
