//! Command-line front end: argument parsing, CSV ingestion and dispatch to the
//! library.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rbcsmooth::inference::{self, default_grid, DensityBandwidth, DEFAULT_NEVAL};
use rbcsmooth::montecarlo::{run_study, BandwidthMode, SimDesign};
use rbcsmooth::output::{sig6, summarize, Format};
use rbcsmooth::{
    BandwidthChoice, BwMethod, FitSpec, KdeMethod, KdeSpec, KernelType, Sample, VceKind, VceSpec,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("column '{name}' not found (available: {})", available.join(", "))]
    MissingColumn {
        name: String,
        available: Vec<String>,
    },
    #[error("no usable rows in {path}")]
    Empty { path: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] rbcsmooth::Error),
}

#[derive(Debug, Parser)]
#[command(
    name = "rbcsmooth",
    version,
    about = "Local polynomial and kernel density estimation with robust bias-corrected confidence intervals"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Point estimates with conventional and robust bias-corrected intervals
    Lprobust(LpArgs),
    /// Data-driven bandwidths for local polynomial regression
    Lpbwselect(LpArgs),
    /// Kernel density estimates with robust bias-corrected intervals
    Kdrobust(KdArgs),
    /// Data-driven bandwidths for kernel density estimation
    Kdbwselect(KdArgs),
    /// Simulation study on a known regression function
    Simulate(SimArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Lprobust(_) => "lprobust",
            Command::Lpbwselect(_) => "lpbwselect",
            Command::Kdrobust(_) => "kdrobust",
            Command::Kdbwselect(_) => "kdbwselect",
            Command::Simulate(_) => "simulate",
        }
    }
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Comma-separated evaluation points (overrides the default grid)
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub eval: Option<Vec<f64>>,
    /// Number of equally spaced evaluation points
    #[arg(long, default_value_t = DEFAULT_NEVAL)]
    pub neval: usize,
    /// Lower end of the default grid (defaults to min(x))
    #[arg(long, allow_hyphen_values = true)]
    pub grid_min: Option<f64>,
    /// Upper end of the default grid (defaults to max(x))
    #[arg(long, allow_hyphen_values = true)]
    pub grid_max: Option<f64>,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Write machine-readable results to this file
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Format of --out (defaults to the file extension, else json)
    #[arg(long, value_enum)]
    pub format: Option<MachineFormat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MachineFormat {
    Json,
    Csv,
}

impl From<MachineFormat> for Format {
    fn from(f: MachineFormat) -> Self {
        match f {
            MachineFormat::Json => Format::Json,
            MachineFormat::Csv => Format::Csv,
        }
    }
}

#[derive(Debug, Args)]
pub struct LpArgs {
    /// Input CSV file with a header row
    #[arg(long)]
    pub data: PathBuf,
    /// Name of the covariate column
    #[arg(long)]
    pub x: String,
    /// Name of the outcome column
    #[arg(long)]
    pub y: String,
    /// Name of the cluster column (required by --vce cluster|nncluster)
    #[arg(long)]
    pub cluster_col: Option<String>,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Polynomial order
    #[arg(long, default_value_t = 1)]
    pub p: usize,
    /// Derivative order
    #[arg(long, default_value_t = 0)]
    pub deriv: usize,
    /// Kernel: epa, tri or uni
    #[arg(long, default_value = "epa")]
    pub kernel: KernelType,
    /// Confidence level
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Ratio h/b
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    /// Variance estimator: hc0, hc1, hc2, hc3, nn, cluster or nncluster
    #[arg(long, default_value = "nn")]
    pub vce: VceKind,
    /// Neighbors used by the nn variance estimators
    #[arg(long, default_value_t = 3)]
    pub nnmatch: usize,
    /// Use interior-only bias formulas
    #[arg(long)]
    pub interior: bool,
    /// Minimum observations per window (0 disables)
    #[arg(long, default_value_t = 21)]
    pub bwcheck: usize,
    /// Selector: mse-dpi, imse-dpi, mse-rot, imse-rot, ce-dpi or ce-rot [default: imse-dpi]
    #[arg(long)]
    pub bwselect: Option<BwMethod>,
    /// Main bandwidth (skips selection)
    #[arg(long)]
    pub h: Option<f64>,
    /// Bias-correction bandwidth (sets rho = h/b)
    #[arg(long)]
    pub b: Option<f64>,
    #[command(flatten)]
    pub output: OutArgs,
}

#[derive(Debug, Args)]
pub struct KdArgs {
    /// Input CSV file with a header row
    #[arg(long)]
    pub data: PathBuf,
    /// Name of the variable column
    #[arg(long)]
    pub x: String,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Kernel: epa, tri or uni
    #[arg(long, default_value = "epa")]
    pub kernel: KernelType,
    /// Confidence level
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Ratio h/b
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    /// Selector: mse-dpi, imse-dpi or rot [default: imse-dpi]
    #[arg(long)]
    pub bwselect: Option<KdeMethod>,
    /// Main bandwidth (skips selection)
    #[arg(long)]
    pub h: Option<f64>,
    /// Bias-correction bandwidth
    #[arg(long)]
    pub b: Option<f64>,
    #[command(flatten)]
    pub output: OutArgs,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Sample size per replication
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Number of replications
    #[arg(long, default_value_t = 2000)]
    pub reps: usize,
    /// Polynomial order
    #[arg(long, default_value_t = 1)]
    pub p: usize,
    /// Derivative order
    #[arg(long, default_value_t = 0)]
    pub deriv: usize,
    /// Bandwidth: population, mse-dpi, imse-dpi, mse-rot, imse-rot, ce-dpi or ce-rot
    #[arg(long, default_value = "imse-dpi")]
    pub bw: BandwidthMode,
    /// Comma-separated evaluation points in [0, 1]
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    pub eval: Vec<f64>,
    /// Kernel: epa, tri or uni
    #[arg(long, default_value = "epa")]
    pub kernel: KernelType,
    /// Variance estimator
    #[arg(long, default_value = "nn")]
    pub vce: VceKind,
    /// Neighbors used by the nn variance estimators
    #[arg(long, default_value_t = 3)]
    pub nnmatch: usize,
    /// Confidence level
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Random seed
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Write the metrics table as CSV to this file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Loaded rows plus the number dropped for missing or non-finite values.
#[derive(Debug)]
pub struct Ingested {
    pub sample: Sample,
    pub dropped: usize,
}

fn open_csv(path: &Path) -> Result<(csv::Reader<fs::File>, Vec<String>), CliError> {
    let p = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| CliError::Io {
        path: p.clone(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|source| CliError::Csv { path: p, source })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    Ok((rdr, headers))
}

fn column(headers: &[String], name: &str) -> Result<usize, CliError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::MissingColumn {
            name: name.to_string(),
            available: headers.to_vec(),
        })
}

fn parse_finite(field: Option<&str>) -> Option<f64> {
    field
        .and_then(|s| s.trim().parse::<f64>().ok())
        .filter(|v| v.is_finite())
}

struct Columns {
    x: Vec<f64>,
    y: Vec<f64>,
    cluster: Vec<String>,
    dropped: usize,
}

/// Reads `xcol`, optionally `ycol` and `clustercol`. Rows whose x (or y) is
/// missing or non-finite are dropped.
fn read_columns(
    path: &Path,
    xcol: &str,
    ycol: Option<&str>,
    clustercol: Option<&str>,
) -> Result<Columns, CliError> {
    let (mut rdr, headers) = open_csv(path)?;
    let xi = column(&headers, xcol)?;
    let yi = ycol.map(|c| column(&headers, c)).transpose()?;
    let ci = clustercol.map(|c| column(&headers, c)).transpose()?;
    let (mut x, mut y, mut cl) = (Vec::new(), Vec::new(), Vec::new());
    let mut dropped = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|source| CliError::Csv {
            path: path.display().to_string(),
            source,
        })?;
        let xv = parse_finite(rec.get(xi));
        let yv = match yi {
            Some(i) => parse_finite(rec.get(i)),
            None => Some(0.0),
        };
        match (xv, yv) {
            (Some(a), Some(b)) => {
                x.push(a);
                y.push(b);
                if let Some(i) = ci {
                    cl.push(rec.get(i).unwrap_or("").trim().to_string());
                }
            }
            _ => dropped += 1,
        }
    }
    if x.is_empty() {
        return Err(CliError::Empty {
            path: path.display().to_string(),
        });
    }
    Ok(Columns {
        x,
        y,
        cluster: cl,
        dropped,
    })
}

/// Loads a regression sample from CSV.
pub fn ingest_csv(
    path: &Path,
    xcol: &str,
    ycol: &str,
    clustercol: Option<&str>,
) -> Result<Ingested, CliError> {
    let c = read_columns(path, xcol, Some(ycol), clustercol)?;
    let mut sample = Sample::new(c.x, c.y)?;
    if clustercol.is_some() {
        sample = sample.with_clusters(&c.cluster)?;
    }
    Ok(Ingested {
        sample,
        dropped: c.dropped,
    })
}

/// Loads one numeric column for density estimation.
pub fn ingest_column(path: &Path, xcol: &str) -> Result<(Vec<f64>, usize), CliError> {
    let c = read_columns(path, xcol, None, None)?;
    Ok((c.x, c.dropped))
}

fn notice_dropped(dropped: usize) {
    if dropped > 0 {
        let s = if dropped == 1 { "" } else { "s" };
        eprintln!("note: {dropped} row{s} dropped (missing or non-finite values)");
    }
}

fn grid_for(x: &[f64], g: &GridArgs) -> Result<Vec<f64>, CliError> {
    match &g.eval {
        Some(_) if g.grid_min.is_some() || g.grid_max.is_some() => Err(CliError::Usage(
            "--eval cannot be combined with --grid-min/--grid-max".into(),
        )),
        Some(e) => Ok(e.clone()),
        None => Ok(default_grid(x, g.neval, g.grid_min, g.grid_max)?),
    }
}

fn machine_format(o: &OutArgs) -> Format {
    if let Some(f) = o.format {
        return f.into();
    }
    match o
        .out
        .as_ref()
        .and_then(|p| p.extension())
        .and_then(|e| e.to_str())
    {
        Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
        _ => Format::Json,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl LpArgs {
    pub fn fit_spec(&self) -> FitSpec {
        if self.h.is_some() && self.bwselect.is_some() {
            eprintln!("note: --h given, --bwselect ignored");
        }
        let rho = match (self.h, self.b) {
            (Some(h), Some(b)) => h / b,
            _ => self.rho,
        };
        FitSpec {
            p: self.p,
            nu: self.deriv,
            kernel: self.kernel,
            level: self.level,
            rho,
            vce: VceSpec {
                kind: self.vce,
                nnmatch: self.nnmatch,
            },
            interior: self.interior,
            bwcheck: (self.bwcheck > 0).then_some(self.bwcheck),
            bwselect: self.bwselect.unwrap_or_default(),
            h: self.h,
            b: self.b,
        }
    }
}

impl KdArgs {
    pub fn kde_spec(&self) -> KdeSpec {
        if self.h.is_some() && self.bwselect.is_some() {
            eprintln!("note: --h given, --bwselect ignored");
        }
        KdeSpec {
            kernel: self.kernel,
            level: self.level,
            rho: self.rho,
            bwselect: self.bwselect.unwrap_or_default(),
            h: self.h,
            b: self.b,
        }
    }
}

fn bandwidth_text(rows: &[(f64, f64, f64, String)]) -> String {
    let mut out = format!("{:>12}  {:>12}  {:>12}  warnings\n", "eval", "h", "b");
    out.push_str(&"=".repeat(50));
    out.push('\n');
    for (e, h, b, w) in rows {
        let line = format!("{:>12}  {:>12}  {:>12}  {w}", sig6(*e), sig6(*h), sig6(*b));
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn warnings_str(w: &[rbcsmooth::Warning]) -> String {
    w.iter().map(|w| w.as_str()).collect::<Vec<_>>().join(",")
}

fn lp_bandwidth_machine(choices: &[BandwidthChoice], fmt: Format) -> String {
    match fmt {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let _ = w.write_record(["eval", "h", "b", "method", "warnings"]);
            for c in choices {
                let ws: Vec<&str> = c.warnings.iter().map(|w| w.as_str()).collect();
                let _ = w.write_record([
                    format!("{}", c.eval),
                    finite_or_empty(c.h),
                    finite_or_empty(c.b),
                    c.method.to_string(),
                    ws.join(";"),
                ]);
            }
            String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default()
        }
        _ => serde_json::to_string_pretty(choices).unwrap_or_default(),
    }
}

fn kd_bandwidth_machine(choices: &[DensityBandwidth], fmt: Format) -> String {
    match fmt {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let _ = w.write_record(["eval", "h", "b", "warnings"]);
            for c in choices {
                let ws: Vec<&str> = c.warnings.iter().map(|w| w.as_str()).collect();
                let _ = w.write_record([
                    format!("{}", c.eval),
                    finite_or_empty(c.h),
                    finite_or_empty(c.b),
                    ws.join(";"),
                ]);
            }
            String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default()
        }
        _ => serde_json::to_string_pretty(choices).unwrap_or_default(),
    }
}

fn finite_or_empty(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

/// Runs one subcommand, writing the text report to `stdout`.
pub fn dispatch(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: "<stdout>".into(),
        source,
    };
    match &cli.command {
        Command::Lprobust(a) => {
            let spec = a.fit_spec();
            let data = ingest_csv(&a.data, &a.x, &a.y, a.cluster_col.as_deref())?;
            notice_dropped(data.dropped);
            let grid = grid_for(data.sample.x(), &a.grid)?;
            let rows = inference::lprobust(&data.sample, &spec, Some(&grid))?;
            write!(stdout, "{}", summarize(&rows, Format::Text, spec.level)).map_err(io)?;
            if let Some(path) = &a.output.out {
                write_file(
                    path,
                    &summarize(&rows, machine_format(&a.output), spec.level),
                )?;
            }
        }
        Command::Lpbwselect(a) => {
            let spec = a.fit_spec();
            let data = ingest_csv(&a.data, &a.x, &a.y, a.cluster_col.as_deref())?;
            notice_dropped(data.dropped);
            let grid = grid_for(data.sample.x(), &a.grid)?;
            let choices = inference::lpbwselect(&data.sample, &spec, Some(&grid))?;
            let rows: Vec<_> = choices
                .iter()
                .map(|c| (c.eval, c.h, c.b, warnings_str(&c.warnings)))
                .collect();
            write!(stdout, "{}", bandwidth_text(&rows)).map_err(io)?;
            if let Some(path) = &a.output.out {
                write_file(
                    path,
                    &lp_bandwidth_machine(&choices, machine_format(&a.output)),
                )?;
            }
        }
        Command::Kdrobust(a) => {
            let spec = a.kde_spec();
            let (x, dropped) = ingest_column(&a.data, &a.x)?;
            notice_dropped(dropped);
            let grid = grid_for(&x, &a.grid)?;
            let rows = inference::kdrobust(&x, &spec, Some(&grid))?;
            write!(stdout, "{}", summarize(&rows, Format::Text, spec.level)).map_err(io)?;
            if let Some(path) = &a.output.out {
                write_file(
                    path,
                    &summarize(&rows, machine_format(&a.output), spec.level),
                )?;
            }
        }
        Command::Kdbwselect(a) => {
            let spec = a.kde_spec();
            let (x, dropped) = ingest_column(&a.data, &a.x)?;
            notice_dropped(dropped);
            let grid = grid_for(&x, &a.grid)?;
            let choices = inference::kdbwselect(&x, &spec, Some(&grid))?;
            let rows: Vec<_> = choices
                .iter()
                .map(|c| (c.eval, c.h, c.b, warnings_str(&c.warnings)))
                .collect();
            write!(stdout, "{}", bandwidth_text(&rows)).map_err(io)?;
            if let Some(path) = &a.output.out {
                write_file(
                    path,
                    &kd_bandwidth_machine(&choices, machine_format(&a.output)),
                )?;
            }
        }
        Command::Simulate(a) => {
            let design = SimDesign {
                n: a.n,
                reps: a.reps,
                evals: a.eval.clone(),
                p: a.p,
                nu: a.deriv,
                kernel: a.kernel,
                vce: VceSpec {
                    kind: a.vce,
                    nnmatch: a.nnmatch,
                },
                bandwidth: a.bw,
                level: a.level,
                seed: a.seed,
            };
            let result = run_study(&design)?;
            write!(stdout, "{}", result.to_text(&design)).map_err(io)?;
            if let Some(path) = &a.out {
                write_file(path, &result.to_csv())?;
            }
        }
    }
    Ok(())
}

/// Configures the global worker pool from `NPROBUST_THREADS` (0 or unset = auto).
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("NPROBUST_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| {
        CliError::Usage(format!(
            "NPROBUST_THREADS must be a non-negative integer, got '{v}'"
        ))
    })?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

/// One-line error report: `error[<subcommand>]: <message>`.
pub fn error_line(subcommand: &str, err: &CliError) -> String {
    let msg = err.to_string().replace(['\n', '\r'], " ");
    format!("error[{subcommand}]: {msg}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn blank_value_is_dropped() {
        let f = write_tmp("x,y\n1,2\n2,\n3,4\n");
        let d = ingest_csv(f.path(), "x", "y", None).unwrap();
        assert_eq!(d.sample.len(), 2);
        assert_eq!(d.dropped, 1);
        assert_eq!(d.sample.y(), &[2.0, 4.0]);
    }

    #[test]
    fn missing_column_lists_headers() {
        let f = write_tmp("a,b\n1,2\n3,4\n");
        let e = ingest_csv(f.path(), "a", "zzz", None).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("zzz") && msg.contains("a, b"), "{msg}");
    }

    #[test]
    fn non_finite_and_empty() {
        let f = write_tmp("x,y\nNaN,1\ninf,2\nfoo,3\n");
        assert!(matches!(
            ingest_csv(f.path(), "x", "y", None),
            Err(CliError::Empty { .. })
        ));
    }

    #[test]
    fn round_trip_sample() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.731).sin()).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v - 1.0 / 3.0).collect();
        let mut body = String::from("x,y,g\n");
        for (i, (a, b)) in x.iter().zip(&y).enumerate() {
            body.push_str(&format!("{a},{b},c{}\n", i % 4));
        }
        let f = write_tmp(&body);
        let d = ingest_csv(f.path(), "x", "y", Some("g")).unwrap();
        assert_eq!(d.sample.x(), &x[..]);
        assert_eq!(d.sample.y(), &y[..]);
        assert_eq!(d.dropped, 0);
        let cl = d.sample.cluster().unwrap();
        assert_eq!(cl.iter().max(), Some(&3));
    }

    #[test]
    fn explicit_h_sets_rho_from_b() {
        let cli = Cli::try_parse_from([
            "rbcsmooth",
            "lprobust",
            "--data",
            "d.csv",
            "--x",
            "x",
            "--y",
            "y",
            "--h",
            "0.2",
            "--b",
            "0.4",
            "--bwcheck",
            "0",
        ])
        .unwrap();
        let Command::Lprobust(a) = &cli.command else {
            panic!()
        };
        let spec = a.fit_spec();
        assert_eq!(spec.rho, 0.5);
        assert_eq!(spec.bwcheck, None);
        assert_eq!(spec.bwselect, BwMethod::ImseDpi);
    }

    #[test]
    fn error_line_is_single_line() {
        let e = CliError::Usage("a\nb".into());
        assert_eq!(error_line("lprobust", &e), "error[lprobust]: a b");
    }

    #[test]
    fn format_from_extension() {
        let o = OutArgs {
            out: Some("r.CSV".into()),
            format: None,
        };
        assert_eq!(machine_format(&o), Format::Csv);
        let o = OutArgs {
            out: Some("r.txt".into()),
            format: None,
        };
        assert_eq!(machine_format(&o), Format::Json);
        let o = OutArgs {
            out: Some("r.csv".into()),
            format: Some(MachineFormat::Json),
        };
        assert_eq!(machine_format(&o), Format::Json);
    }
}
