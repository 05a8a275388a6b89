//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage or shape errors, 3 I/O and corrupt
//! files, 4 computation failures, 5 a bound that the measurement exceeded.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bounds::{bound_report, BoundMode, BoundOptions};
use crate::cost::{float_model_bops, model_bops, tradeoff_sweep, CostReport, SweepEval, SweepGrid};
use crate::error::Error;
use crate::expansion::{expand_model, ExpandConfig, ExpandedModel};
use crate::inference::{
    build_engine, compare_engines, Calibration, Comparison, Engine, EngineKind, FloatEngine,
    FloatSimEngine,
};
use crate::model::{
    generate_synthetic_model, load_expanded, load_model, parse_layer_list, save_expanded,
    save_model, LayerKind, Model,
};
use crate::quant::DEFAULT_OUTLIER_FRACTION;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_COMPUTE: i32 = 4;
pub const EXIT_UNSOUND: i32 = 5;

#[derive(Parser, Debug)]
#[command(
    name = "rex",
    version,
    about = "Residual-expansion post-training quantization"
)]
struct Cli {
    /// Seed for every randomized step (echoed in reports).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Report format.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CalibrationArg {
    Analytic,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Spectral,
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EngineArg {
    Float,
    FloatSim,
    Integer,
}

impl From<EngineArg> for EngineKind {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Float => EngineKind::Float,
            EngineArg::FloatSim => EngineKind::FloatSim,
            EngineArg::Integer => EngineKind::Integer,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic model.
    Generate {
        /// e.g. `dense:16:16:relu,dense:16:4` or `conv2d:1:4:3:1:8:relu:bias`.
        #[arg(long)]
        layers: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Expand a model into quantized residues.
    Quantize {
        model: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        expand: ExpandArgs,
        /// Total overhead budget in percent (omit for dense expansion).
        #[arg(long)]
        budget: Option<f64>,
    },
    /// Compute the analytic bound and check it empirically.
    Bound {
        model: PathBuf,
        expanded: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Spectral)]
        mode: ModeArg,
        /// Largest admissible `k1 + k2` (default K + 1).
        #[arg(long)]
        cutoff: Option<usize>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compare an engine against the float model on random inputs.
    Eval {
        model: PathBuf,
        expanded: PathBuf,
        /// `random:N` or `random:N:seed=S`.
        #[arg(long, default_value = "random:1000")]
        inputs: String,
        #[arg(long, value_enum, default_value_t = EngineArg::FloatSim)]
        engine: EngineArg,
        #[arg(long)]
        cutoff: Option<usize>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run one tensor file through an engine.
    Infer {
        /// Expanded model directory (or a float model for `--engine float`).
        model: PathBuf,
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = EngineArg::Integer)]
        engine: EngineArg,
        #[arg(long)]
        cutoff: Option<usize>,
        #[arg(short, long, default_value = "y.bin")]
        output: PathBuf,
    },
    /// Bit-operation cost of a float or expanded model.
    Cost {
        model: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Error-versus-cost sweep over a configuration grid.
    Tradeoff {
        model: PathBuf,
        /// Comma-separated bit-widths.
        #[arg(long, default_value = "4")]
        bits: String,
        /// Comma list or inclusive range `a..b`.
        #[arg(long, default_value = "1..3")]
        orders: String,
        /// Comma-separated budgets in percent.
        #[arg(long, default_value = "0")]
        budgets: String,
        /// Comma-separated operator ids.
        #[arg(long, default_value = "uniform")]
        operators: String,
        #[arg(long, default_value_t = DEFAULT_OUTLIER_FRACTION)]
        outlier_frac: f64,
        #[arg(long, default_value_t = 8)]
        act_bits: u8,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ExpandArgs {
    #[arg(long)]
    bits: u8,
    #[arg(long, default_value_t = 1)]
    order: usize,
    #[arg(long, default_value = "uniform")]
    operator: String,
    #[arg(long, default_value_t = DEFAULT_OUTLIER_FRACTION)]
    outlier_frac: f64,
    /// Activation bit-width; 0 keeps activations in float.
    #[arg(long, default_value_t = 8)]
    act_bits: u8,
    #[arg(long, value_enum, default_value_t = CalibrationArg::Analytic)]
    calibration: CalibrationArg,
    /// Inputs drawn for sampled calibration.
    #[arg(long, default_value_t = 256)]
    calib_samples: usize,
    /// Clip sampled ranges to this percentile of |activation|.
    #[arg(long)]
    percentile: Option<f64>,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig(_)
            | Error::UnknownOperator(_)
            | Error::UnsupportedBits(_)
            | Error::ShapeMismatch(_) => EXIT_USAGE,
            Error::Io { .. }
            | Error::MissingFile(_)
            | Error::Manifest(_)
            | Error::LengthMismatch { .. }
            | Error::NonFinite { .. }
            | Error::UnknownLayerKind(_)
            | Error::InvalidShape(_)
            | Error::CodeRange { .. }
            | Error::NonPositiveScale(_) => EXIT_IO,
            Error::UnsupportedActivation(_)
            | Error::MissingCalibration
            | Error::AccumulatorOverflow { .. }
            | Error::MultiplierRange(_) => EXIT_COMPUTE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return EXIT_USAGE;
        }
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Generate { layers, output } => cmd_generate(cli, layers, output),
        Command::Quantize {
            model,
            output,
            expand,
            budget,
        } => cmd_quantize(cli, model, output, expand, *budget),
        Command::Bound {
            model,
            expanded,
            samples,
            mode,
            cutoff,
            output,
        } => cmd_bound(
            cli,
            model,
            expanded,
            *samples,
            *mode,
            *cutoff,
            output.as_deref(),
        ),
        Command::Eval {
            model,
            expanded,
            inputs,
            engine,
            cutoff,
            output,
        } => cmd_eval(
            cli,
            model,
            expanded,
            inputs,
            *engine,
            *cutoff,
            output.as_deref(),
        ),
        Command::Infer {
            model,
            input,
            engine,
            cutoff,
            output,
        } => cmd_infer(model, input, *engine, *cutoff, output),
        Command::Cost { model, output } => cmd_cost(cli, model, output.as_deref()),
        Command::Tradeoff {
            model,
            bits,
            orders,
            budgets,
            operators,
            outlier_frac,
            act_bits,
            samples,
            output,
        } => {
            let grid = SweepGrid {
                operators: operators.split(',').map(|s| s.trim().to_string()).collect(),
                bits: parse_list(bits, "--bits")?,
                orders: parse_orders(orders)?,
                budgets: parse_list::<f64>(budgets, "--budgets")?
                    .into_iter()
                    .map(|b| b / 100.0)
                    .collect(),
            };
            let eval = SweepEval {
                samples: *samples,
                seed: cli.seed,
                act_bits: act_bits_opt(*act_bits)?,
                outlier_fraction: *outlier_frac,
                calibration: Calibration::Analytic,
            };
            cmd_tradeoff(cli, model, &grid, &eval, output.as_deref())
        }
    }
}

fn act_bits_opt(bits: u8) -> std::result::Result<Option<u8>, Failure> {
    match bits {
        0 => Ok(None),
        2..=8 => Ok(Some(bits)),
        b => Err(Failure::usage(format!(
            "--act-bits must be 0 or lie in [2, 8], got {b}"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(
    text: &str,
    flag: &str,
) -> std::result::Result<Vec<T>, Failure> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Failure::usage(format!("{flag}: cannot parse `{s}`")))
        })
        .collect()
}

fn parse_orders(text: &str) -> std::result::Result<Vec<usize>, Failure> {
    match text.split_once("..") {
        Some((a, b)) => {
            let lo: usize = a
                .trim()
                .parse()
                .map_err(|_| Failure::usage(format!("--orders: `{text}`")))?;
            let hi: usize = b
                .trim()
                .trim_start_matches('=')
                .parse()
                .map_err(|_| Failure::usage(format!("--orders: `{text}`")))?;
            Ok((lo..=hi).collect())
        }
        None => parse_list(text, "--orders"),
    }
}

fn format_or(cli: &Cli, default: Format) -> Format {
    cli.format.unwrap_or(default)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn to_csv<T: Serialize>(rows: &[T]) -> std::result::Result<String, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Failure {
            code: EXIT_COMPUTE,
            message: e.to_string(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Failure {
        code: EXIT_COMPUTE,
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn emit(text: &str, output: Option<&Path>) -> CliResult {
    match output {
        Some(path) => fs::write(path, text).map_err(|e| Error::io(path, e).into()),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Error::io("<stdout>", e).into())
        }
    }
}

#[derive(Serialize)]
struct GenerateSummary<'a> {
    command: &'static str,
    seed: u64,
    output: &'a Path,
    layers: usize,
    parameters: usize,
}

fn cmd_generate(cli: &Cli, layers: &str, output: &Path) -> CliResult {
    let shapes = parse_layer_list(layers).map_err(|e| Failure::usage(e.to_string()))?;
    let model = generate_synthetic_model(&shapes, cli.seed)?;
    save_model(&model, output)?;
    let summary = GenerateSummary {
        command: "generate",
        seed: cli.seed,
        output,
        layers: model.layers.len(),
        parameters: model
            .layers
            .iter()
            .map(|l| l.weight.len() + l.bias.as_ref().map_or(0, |b| b.len()))
            .sum(),
    };
    emit(&to_json(&summary), None)
}

#[derive(Serialize)]
struct LayerSummary {
    layer: String,
    gamma: f64,
    residues: usize,
    /// Largest scale of each stored residue.
    max_scale: Vec<f64>,
    kept_fraction: Vec<f64>,
}

#[derive(Serialize)]
struct QuantizeSummary<'a> {
    command: &'static str,
    seed: u64,
    output: &'a Path,
    bits: u8,
    order: usize,
    operator: &'a str,
    budget_percent: Option<f64>,
    layers: Vec<LayerSummary>,
}

fn cmd_quantize(
    cli: &Cli,
    model_dir: &Path,
    output: &Path,
    args: &ExpandArgs,
    budget: Option<f64>,
) -> CliResult {
    if !(1..=8).contains(&args.bits) {
        return Err(Failure::usage(format!(
            "--bits must lie in [1, 8], got {}",
            args.bits
        )));
    }
    if args.order == 0 {
        return Err(Failure::usage("--order must be >= 1"));
    }
    if let Some(b) = budget {
        if !(b >= 0.0 && b.is_finite()) {
            return Err(Failure::usage(format!("--budget must be >= 0, got {b}")));
        }
    }
    if !(args.outlier_frac > 0.0 && args.outlier_frac < 1.0) {
        return Err(Failure::usage(format!(
            "--outlier-frac must lie in (0, 1), got {}",
            args.outlier_frac
        )));
    }
    let act_bits = act_bits_opt(args.act_bits)?;
    let calibration = match args.calibration {
        CalibrationArg::Analytic => Calibration::Analytic,
        CalibrationArg::Sampled => Calibration::Sampled {
            samples: args.calib_samples,
            seed: cli.seed,
            percentile: args.percentile,
        },
    };
    let cfg = ExpandConfig {
        bits: args.bits,
        order: args.order,
        budget: budget.map(|b| b / 100.0),
        operator: args.operator.clone(),
        outlier_fraction: args.outlier_frac,
        act_bits,
        calibration,
    };
    cfg.validate()?;
    crate::quant::operator_by_id(&cfg.operator, cfg.outlier_fraction)?;
    let model = load_model(model_dir)?;
    let em = expand_model(&model, &cfg).map_err(|e| match Failure::from(e) {
        f if f.code == EXIT_IO || f.code == EXIT_USAGE => Failure {
            code: EXIT_COMPUTE,
            ..f
        },
        f => f,
    })?;
    save_expanded(&em, output)?;

    let layers: Vec<LayerSummary> = em
        .layers
        .iter()
        .map(|l| LayerSummary {
            layer: l.geometry.name.clone(),
            gamma: l.gamma,
            residues: l.residues.len(),
            max_scale: l
                .residues
                .iter()
                .map(|r| r.q.scales.iter().fold(0.0, |a: f64, &b| a.max(b)))
                .collect(),
            kept_fraction: l.residues.iter().map(|r| r.kept_fraction()).collect(),
        })
        .collect();
    match format_or(cli, Format::Json) {
        Format::Json => emit(
            &to_json(&QuantizeSummary {
                command: "quantize",
                seed: cli.seed,
                output,
                bits: em.bits,
                order: em.order,
                operator: &em.operator,
                budget_percent: budget,
                layers,
            }),
            None,
        ),
        Format::Csv => {
            #[derive(Serialize)]
            struct Row<'a> {
                layer: &'a str,
                gamma: f64,
                residues: usize,
                max_scale_order1: f64,
            }
            let rows: Vec<Row> = layers
                .iter()
                .map(|l| Row {
                    layer: &l.layer,
                    gamma: l.gamma,
                    residues: l.residues,
                    max_scale_order1: l.max_scale.first().copied().unwrap_or(0.0),
                })
                .collect();
            emit(&to_csv(&rows)?, None)
        }
    }
}

fn load_pair(
    model: &Path,
    expanded: &Path,
) -> std::result::Result<(Model, ExpandedModel), Failure> {
    Ok((load_model(model)?, load_expanded(expanded)?))
}

fn cmd_bound(
    cli: &Cli,
    model: &Path,
    expanded: &Path,
    samples: usize,
    mode: ModeArg,
    cutoff: Option<usize>,
    output: Option<&Path>,
) -> CliResult {
    let (model, em) = load_pair(model, expanded)?;
    let opts = BoundOptions {
        mode: match mode {
            ModeArg::Spectral => BoundMode::Spectral,
            ModeArg::Analytic => BoundMode::Analytic,
        },
        cutoff,
    };
    let report = bound_report(&model, &em, &opts, samples, cli.seed)?;
    let text = match format_or(cli, Format::Json) {
        Format::Json => to_json(&report),
        Format::Csv => {
            #[derive(Serialize)]
            struct Row<'a> {
                layer: &'a str,
                sigma: f64,
                e: f64,
                e_frobenius: f64,
                delta: f64,
            }
            let rows: Vec<Row> = report
                .layers
                .iter()
                .map(|l| Row {
                    layer: &l.name,
                    sigma: l.sigma,
                    e: l.e,
                    e_frobenius: l.e_frobenius,
                    delta: l.delta,
                })
                .collect();
            to_csv(&rows)?
        }
    };
    emit(&text, output)?;
    if report.is_sound() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_UNSOUND,
            message: format!(
                "measured error {} exceeds the bound {}",
                report.u_empirical.unwrap_or(f64::NAN),
                report.u
            ),
        })
    }
}

/// Parses `random:N` or `random:N:seed=S`.
fn parse_inputs(spec: &str, default_seed: u64) -> std::result::Result<(usize, u64), Failure> {
    let bad = || {
        Failure::usage(format!(
            "--inputs: expected random:N[:seed=S], got `{spec}`"
        ))
    };
    let mut parts = spec.split(':');
    if parts.next() != Some("random") {
        return Err(bad());
    }
    let n: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
    let seed = match parts.next() {
        None => default_seed,
        Some(p) => p
            .strip_prefix("seed=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(bad)?,
    };
    if parts.next().is_some() || n == 0 {
        return Err(bad());
    }
    Ok((n, seed))
}

#[derive(Serialize)]
struct EvalReport {
    command: &'static str,
    seed: u64,
    engine: EngineKind,
    samples: usize,
    versus_float: Comparison,
    #[serde(skip_serializing_if = "Option::is_none")]
    versus_float_sim: Option<Comparison>,
}

fn cmd_eval(
    cli: &Cli,
    model: &Path,
    expanded: &Path,
    inputs: &str,
    engine: EngineArg,
    cutoff: Option<usize>,
    output: Option<&Path>,
) -> CliResult {
    let (n, seed) = parse_inputs(inputs, cli.seed)?;
    let (model, em) = load_pair(model, expanded)?;
    let len = model
        .input_len()
        .ok_or_else(|| Failure::usage("the model has no layers"))?;
    let kind = EngineKind::from(engine);
    let candidate = build_engine(kind, Some(&model), Some(&em), cutoff)?;
    let float = FloatEngine(&model);
    let versus_float = compare_engines(&float, candidate.as_ref(), len, n, seed)?;
    let versus_float_sim = if kind == EngineKind::Integer {
        let sim = FloatSimEngine::new(&em, cutoff)?;
        Some(compare_engines(&sim, candidate.as_ref(), len, n, seed)?)
    } else {
        None
    };
    let report = EvalReport {
        command: "eval",
        seed,
        engine: kind,
        samples: n,
        versus_float,
        versus_float_sim,
    };
    let text = match format_or(cli, Format::Json) {
        Format::Json => to_json(&report),
        Format::Csv => {
            let mut rows = vec![("float", versus_float)];
            if let Some(c) = versus_float_sim {
                rows.push(("float-sim", c));
            }
            #[derive(Serialize)]
            struct Row {
                reference: &'static str,
                samples: usize,
                max_abs_err: f64,
                mean_max_err: f64,
                argmax_agreement: f64,
            }
            let rows: Vec<Row> = rows
                .into_iter()
                .map(|(r, c)| Row {
                    reference: r,
                    samples: c.samples,
                    max_abs_err: c.max_abs_err,
                    mean_max_err: c.mean_max_err,
                    argmax_agreement: c.argmax_agreement,
                })
                .collect();
            to_csv(&rows)?
        }
    };
    emit(&text, output)
}

/// Reads a tensor file: an ASCII line `shape d0 d1 ...` then raw
/// little-endian f32 values.
pub fn read_tensor_file(path: &Path) -> crate::Result<(Vec<usize>, Vec<f64>)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Manifest(format!("{}: missing shape header", path.display())))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Manifest(format!("{}: header is not UTF-8", path.display())))?;
    let mut words = header.split_whitespace();
    if words.next() != Some("shape") {
        return Err(Error::Manifest(format!(
            "{}: header must start with `shape`",
            path.display()
        )));
    }
    let shape: Vec<usize> = words
        .map(|w| w.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Manifest(format!("{}: bad shape header", path.display())))?;
    let count: usize = shape.iter().product();
    let body = &bytes[nl + 1..];
    if shape.is_empty() || body.len() != count * 4 {
        return Err(Error::LengthMismatch {
            name: path.display().to_string(),
            declared: count * 4,
            available: body.len(),
        });
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            name: path.display().to_string(),
            index,
        });
    }
    Ok((shape, data))
}

pub fn write_tensor_file(path: &Path, shape: &[usize], data: &[f64]) -> crate::Result<()> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let mut bytes = format!("shape {}\n", dims.join(" ")).into_bytes();
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn cmd_infer(
    model_dir: &Path,
    input: &Path,
    engine: EngineArg,
    cutoff: Option<usize>,
    output: &Path,
) -> CliResult {
    let (_, x) = read_tensor_file(input)?;
    let kind = EngineKind::from(engine);
    let (y, last) = if kind == EngineKind::Float {
        let model = load_model(model_dir)?;
        let y = FloatEngine(&model).forward(&x)?;
        (y, model.layers.last().map(|l| l.geometry.clone()))
    } else {
        let em = load_expanded(model_dir)?;
        let engine = build_engine(kind, None, Some(&em), cutoff)?;
        (
            engine.forward(&x)?,
            em.layers.last().map(|l| l.geometry.clone()),
        )
    };
    let shape = match last {
        Some(g) if g.kind == LayerKind::Conv2d => {
            vec![g.out_channels, g.out_spatial(), g.out_spatial()]
        }
        _ => vec![y.len()],
    };
    write_tensor_file(output, &shape, &y)?;
    Ok(())
}

fn cost_rows(report: &CostReport) -> Vec<CostRow> {
    let mut rows: Vec<CostRow> = report
        .layers
        .iter()
        .map(|l| CostRow {
            layer: l.name.clone(),
            k_eff: l.k_eff,
            original: l.bops.original,
            float_ops: l.bops.float_ops,
            int_ops: l.bops.int_ops,
            total: l.bops.total,
        })
        .collect();
    rows.push(CostRow {
        layer: "total".into(),
        k_eff: f64::NAN,
        original: report.original,
        float_ops: report.float_ops,
        int_ops: report.int_ops,
        total: report.total,
    });
    rows
}

#[derive(Serialize)]
struct CostRow {
    layer: String,
    k_eff: f64,
    original: f64,
    float_ops: f64,
    int_ops: f64,
    total: f64,
}

fn cmd_cost(cli: &Cli, path: &Path, output: Option<&Path>) -> CliResult {
    let report = if path.join("expansion.json").is_file() {
        model_bops(&load_expanded(path)?)?
    } else {
        float_model_bops(&load_model(path)?)?
    };
    let text = match format_or(cli, Format::Json) {
        Format::Json => to_json(&report),
        Format::Csv => to_csv(&cost_rows(&report))?,
    };
    emit(&text, output)
}

fn cmd_tradeoff(
    cli: &Cli,
    model: &Path,
    grid: &SweepGrid,
    eval: &SweepEval,
    output: Option<&Path>,
) -> CliResult {
    if grid.bits.is_empty() || grid.orders.is_empty() || grid.budgets.is_empty() {
        return Err(Failure::usage("the sweep grid is empty"));
    }
    if let Some(b) = grid.bits.iter().find(|b| !(1..=8).contains(*b)) {
        return Err(Failure::usage(format!(
            "--bits must lie in [1, 8], got {b}"
        )));
    }
    if grid.orders.contains(&0) {
        return Err(Failure::usage("--orders must be >= 1"));
    }
    if let Some(g) = grid.budgets.iter().find(|g| !(**g >= 0.0)) {
        return Err(Failure::usage(format!(
            "--budgets must be >= 0, got {}",
            g * 100.0
        )));
    }
    for op in &grid.operators {
        crate::quant::operator_by_id(op, eval.outlier_fraction)?;
    }
    let model = load_model(model)?;
    let rows = tradeoff_sweep(&model, grid, eval)?;
    let text = match format_or(cli, Format::Csv) {
        Format::Csv => to_csv(&rows)?,
        Format::Json => {
            #[derive(Serialize)]
            struct Sweep<'a> {
                command: &'static str,
                seed: u64,
                samples: usize,
                rows: &'a [crate::cost::SweepRow],
            }
            to_json(&Sweep {
                command: "tradeoff",
                seed: eval.seed,
                samples: eval.samples,
                rows: &rows,
            })
        }
    };
    emit(&text, output)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_grids_and_inputs() {
        assert_eq!(parse_orders("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_orders("2,5").unwrap(), vec![2, 5]);
        assert_eq!(parse_inputs("random:1000:seed=3", 0).unwrap(), (1000, 3));
        assert_eq!(parse_inputs("random:5", 9).unwrap(), (5, 9));
        assert!(parse_inputs("file:x", 0).is_err());
        assert!(parse_list::<u8>("2,x", "--bits").is_err());
    }

    #[test]
    fn bad_flags_exit_with_usage() {
        assert_eq!(
            run(["rex", "quantize", "m", "-o", "q", "--bits", "9"]),
            EXIT_USAGE
        );
        assert_eq!(run(["rex", "frobnicate"]), EXIT_USAGE);
        assert_eq!(
            run(["rex", "generate", "--layers", "dense:4", "-o", "x"]),
            EXIT_USAGE
        );
    }
}
