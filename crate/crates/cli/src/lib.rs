//! Command-line front end. Every subcommand writes CSV preceded by `#`
//! comment lines that record the fully resolved configuration, so a run
//! can be repeated from its output alone.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rectifier::analysis::{attenuation_vs_he, monte_carlo_probe, predict_gains};
use rectifier::data::{load_idx, Dataset, GaussianClasses};
use rectifier::init::{Direction, InitScheme};
use rectifier::model::{parse_spec, ActivationKind, NetworkSpec};
use rectifier::optim::OptimConfig;
use rectifier::train::{grad_check_with, train, GradFault, RunStatus, TrainConfig};
use rectifier::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DEGENERATE: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "rectifier", version, about = "Rectifier networks: init analysis, variance probes, training and gradient checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Analytic per-layer std and variance gains for an init scheme.
    InitReport(InitReportArgs),
    /// Monte-Carlo estimate of per-layer variance ratios at initialization.
    Probe(ProbeArgs),
    /// Train a network with minibatch SGD.
    Train(TrainArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Network spec file.
    #[arg(long)]
    spec: PathBuf,
    /// he-fwd, he-bwd, xavier, fixed:<sigma>, prelu:<a>:fwd or prelu:<a>:bwd.
    #[arg(long, default_value = "he-fwd")]
    scheme: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InitReportArgs {
    #[command(flatten)]
    common: Common,
    /// Replace every activation: relu, lrelu:<a>, prelu:<a>, prelu-shared:<a>, identity.
    #[arg(long)]
    act: Option<String>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    /// Replace every activation: relu, lrelu:<a>, prelu:<a>, prelu-shared:<a>, identity.
    #[arg(long)]
    act: Option<String>,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Examples per trial.
    #[arg(long, default_value_t = 256)]
    batch: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// idx:<images>,<labels> or synth:<classes>,<per_class>,<dims>,<separation>.
    #[arg(long)]
    data: String,
    /// Held-out data, same syntax. A synth value reuses the training centers
    /// with a fresh sample.
    #[arg(long)]
    val_data: Option<String>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0005)]
    weight_decay: f64,
    /// Learning-rate switch points, e.g. `10:0.001,15:0.0001`.
    #[arg(long)]
    lr_steps: Option<String>,
    /// Replace every activation: relu, lrelu:<a>, prelu:<a>, prelu-shared:<a>, identity.
    #[arg(long)]
    act: Option<String>,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    /// Keep PReLU slopes at their initial value.
    #[arg(long)]
    freeze_slopes: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Debug: double the analytic slope gradients before comparing.
    #[arg(long)]
    corrupt_slope_grads: bool,
}

/// Parses `relu`, `identity`, `lrelu:<a>`, `prelu:<a>` or
/// `prelu-shared:<a>`; a space may replace the colon.
pub fn parse_activation(s: &str) -> Result<ActivationKind, Error> {
    let bad = || Error::invalid(format!("unknown activation '{s}'"));
    let mut parts = s.trim().splitn(2, [':', ' ']);
    let name = parts.next().unwrap_or("");
    let slope = parts.next().map(|v| v.trim().parse::<f64>().map_err(|_| bad())).transpose()?;
    let kind = match (name, slope) {
        ("relu", None) => ActivationKind::Relu,
        ("identity", None) => ActivationKind::Identity,
        ("lrelu", Some(a)) => ActivationKind::LeakyRelu(a),
        ("prelu", Some(a)) => ActivationKind::PreluChannelWise(a),
        ("prelu-shared", Some(a)) => ActivationKind::PreluShared(a),
        _ => return Err(bad()),
    };
    if !kind.initial_slope().is_finite() {
        return Err(bad());
    }
    Ok(kind)
}

fn act_token(kind: ActivationKind) -> String {
    match kind {
        ActivationKind::Relu => "relu".into(),
        ActivationKind::Identity => "identity".into(),
        ActivationKind::LeakyRelu(a) => format!("lrelu:{a}"),
        ActivationKind::PreluChannelWise(a) => format!("prelu:{a}"),
        ActivationKind::PreluShared(a) => format!("prelu-shared:{a}"),
    }
}

enum Failure {
    Usage(String),
    /// The command produced output but a check did not hold.
    Check(Outcome),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

struct Outcome {
    csv: String,
    summary: String,
    code: i32,
}

fn load_spec(path: &Path, act: Option<&str>) -> Result<NetworkSpec, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read spec {}: {e}", path.display())))?;
    let spec = parse_spec(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok(match act {
        Some(a) => spec.with_activation(parse_activation(a)?),
        None => spec,
    })
}

fn header(out: &mut String, command: &str, common: &Common, extra: &[(&str, String)]) {
    let _ = writeln!(out, "# command={command}");
    let _ = writeln!(out, "# spec={}", common.spec.display());
    let _ = writeln!(out, "# scheme={}", common.scheme);
    let _ = writeln!(out, "# seed={}", common.seed);
    for (k, v) in extra {
        let _ = writeln!(out, "# {k}={v}");
    }
}

fn analytic_slope(spec: &NetworkSpec) -> Result<f64, Failure> {
    spec.uniform_activation_slope().ok_or_else(|| {
        Failure::Usage("activations have different slopes; pass --act to pick one".into())
    })
}

fn init_report(args: &InitReportArgs) -> Result<Outcome, Failure> {
    let c = &args.common;
    let spec = load_spec(&c.spec, args.act.as_deref())?;
    let scheme: InitScheme = c.scheme.parse()?;
    let slope = analytic_slope(&spec)?;
    let report = predict_gains(&spec, &scheme, slope)?;
    let mut csv = String::new();
    let mut extra = vec![("activation_slope", slope.to_string())];
    if let Some(a) = &args.act {
        extra.push(("act", a.clone()));
    }
    header(&mut csv, "init-report", c, &extra);
    let _ = writeln!(csv, "# forward_product={}", report.forward_product);
    let _ = writeln!(csv, "# backward_product={}", report.backward_product);
    let mut summary = format!(
        "{} weighted layers, forward product {:.6e}, backward product {:.6e}\n",
        report.layers.len(),
        report.forward_product,
        report.backward_product
    );
    if let InitScheme::FixedStd(sigma) = scheme {
        let att = attenuation_vs_he(&spec, sigma, Direction::Backward)?;
        let _ = writeln!(csv, "# attenuation_vs_he_bwd={att}");
        let _ = writeln!(csv, "# attenuation_reciprocal={}", 1.0 / att);
        let _ = writeln!(
            summary,
            "gradient std reaching layer 1 is 1/{:.4e} of the he-bwd value",
            1.0 / att
        );
    }
    csv += &report.to_csv();
    Ok(Outcome { csv, summary, code: EXIT_OK })
}

fn probe(args: &ProbeArgs) -> Result<Outcome, Failure> {
    let c = &args.common;
    let spec = load_spec(&c.spec, args.act.as_deref())?;
    let scheme: InitScheme = c.scheme.parse()?;
    let report = monte_carlo_probe(&spec, &scheme, args.trials, args.batch, c.seed)?;
    let mut csv = String::new();
    let mut extra = vec![
        ("trials", args.trials.to_string()),
        ("batch", args.batch.to_string()),
        ("activation_slope", report.activation_slope.to_string()),
    ];
    if let Some(a) = &args.act {
        extra.push(("act", a.clone()));
    }
    header(&mut csv, "probe", c, &extra);
    csv += &report.to_csv();
    let summary = format!("{} layers probed over {} trials\n", report.layers.len(), args.trials);
    Ok(Outcome { csv, summary, code: EXIT_OK })
}

/// Parses a `--data` value into a dataset. `held_out` draws a fresh sample
/// from the synth distribution.
fn load_data(value: &str, seed: u64, held_out: bool) -> Result<Dataset, Failure> {
    let bad = || Failure::Usage(format!("bad data source '{value}'"));
    if let Some(rest) = value.strip_prefix("idx:") {
        let (img, lbl) = rest.split_once(',').ok_or_else(bad)?;
        return Ok(load_idx(Path::new(img), Path::new(lbl), true)?);
    }
    let rest = value.strip_prefix("synth:").ok_or_else(bad)?;
    let f: Vec<&str> = rest.split(',').collect();
    if f.len() != 4 {
        return Err(bad());
    }
    let classes: usize = f[0].trim().parse().map_err(|_| bad())?;
    let per_class: usize = f[1].trim().parse().map_err(|_| bad())?;
    let dims: usize = f[2].trim().parse().map_err(|_| bad())?;
    let sep: f64 = f[3].trim().parse().map_err(|_| bad())?;
    let gen = GaussianClasses::new(classes, dims, sep, seed)?;
    let sample_seed = if held_out { seed.wrapping_add(0x5151) } else { seed };
    Ok(gen.sample(per_class, sample_seed)?)
}

fn train_cmd(args: &TrainArgs) -> Result<Outcome, Failure> {
    let c = &args.common;
    let spec = load_spec(&c.spec, None)?;
    let activation = args.act.as_deref().map(parse_activation).transpose()?;
    let scheme: InitScheme = c.scheme.parse()?;
    let lr_schedule = match &args.lr_steps {
        Some(s) => OptimConfig::parse_lr_steps(s)?,
        None => Vec::new(),
    };
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        optim: OptimConfig {
            learning_rate: args.lr,
            momentum: args.momentum,
            weight_decay: args.weight_decay,
            lr_schedule,
        },
        scheme,
        activation,
        seed: c.seed,
        eval_every: args.eval_every,
        freeze_slopes: args.freeze_slopes,
        ..TrainConfig::default()
    };
    config.optim.validate()?;
    let train_set = load_data(&args.data, c.seed, false)?;
    let val_set = args.val_data.as_deref().map(|v| load_data(v, c.seed, true)).transpose()?;
    let run = train(&spec, &train_set, val_set.as_ref(), &config)?;

    let mut csv = String::new();
    let mut extra = vec![
        ("data", args.data.clone()),
        ("epochs", args.epochs.to_string()),
        ("batch", args.batch.to_string()),
        ("lr", args.lr.to_string()),
        ("momentum", args.momentum.to_string()),
        ("weight_decay", args.weight_decay.to_string()),
        ("lr_steps", args.lr_steps.clone().unwrap_or_default()),
        ("act", activation.map(act_token).unwrap_or_else(|| "spec".into())),
        ("eval_every", args.eval_every.to_string()),
        ("freeze_slopes", args.freeze_slopes.to_string()),
    ];
    if let Some(v) = &args.val_data {
        extra.push(("val_data", v.clone()));
    }
    header(&mut csv, "train", c, &extra);
    csv += &run.to_csv();
    let _ = writeln!(csv, "# status={}", run.status.as_str());
    let _ = writeln!(csv, "# loss_improvement={}", run.loss_improvement());
    if let Some(frac) = run.slope_fraction_above_one {
        let _ = writeln!(csv, "# slope_fraction_above_one={frac}");
    }
    let last = run.final_train();
    let summary = format!(
        "status {} after {} epochs: train loss {:.6} (initial {:.6}), train top-1 error {:.4}\n",
        run.status.as_str(),
        run.epochs_completed(),
        last.loss,
        run.initial_train_loss(),
        last.top1
    );
    let code = match run.status {
        RunStatus::Completed => EXIT_OK,
        RunStatus::Diverged | RunStatus::Stalled => EXIT_DEGENERATE,
    };
    Ok(Outcome { csv, summary, code })
}

fn gradcheck(args: &GradcheckArgs) -> Result<Outcome, Failure> {
    let c = &args.common;
    let spec = load_spec(&c.spec, None)?;
    let fault = if args.corrupt_slope_grads {
        GradFault::DoubleSlopeGrads
    } else {
        GradFault::None
    };
    let scheme: InitScheme = c.scheme.parse()?;
    let report = grad_check_with(&spec, &scheme, c.seed, args.step, args.tolerance, fault)?;
    let mut csv = String::new();
    header(
        &mut csv,
        "gradcheck",
        c,
        &[
            ("step", args.step.to_string()),
            ("tolerance", args.tolerance.to_string()),
            ("corrupt_slope_grads", args.corrupt_slope_grads.to_string()),
        ],
    );
    csv += &report.to_csv();
    let summary = format!(
        "max relative error {:.3e} (tolerance {:.1e}): {}\n",
        report.max_rel_error(),
        args.tolerance,
        if report.passed() { "pass" } else { "FAIL" }
    );
    let outcome = Outcome { csv, summary, code: EXIT_OK };
    if report.passed() {
        Ok(outcome)
    } else {
        Err(Failure::Check(outcome))
    }
}

fn emit(csv: &str, path: Option<&Path>, out: &mut dyn Write) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, csv).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", p.display()))),
        None => out
            .write_all(csv.as_bytes())
            .map_err(|e| Failure::Usage(format!("cannot write output: {e}"))),
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(rendered.as_bytes())
            } else {
                err.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    let (result, out_path) = match &cli.command {
        Command::InitReport(a) => (init_report(a), a.common.out.as_deref()),
        Command::Probe(a) => (probe(a), a.common.out.as_deref()),
        Command::Train(a) => (train_cmd(a), a.common.out.as_deref()),
        Command::Gradcheck(a) => (gradcheck(a), a.common.out.as_deref()),
    };
    let outcome = result.and_then(|o| emit(&o.csv, out_path, out).map(|_| o));
    match outcome {
        Ok(o) => {
            let _ = err.write_all(o.summary.as_bytes());
            o.code
        }
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Check(o)) => {
            let _ = emit(&o.csv, out_path, out);
            let _ = err.write_all(o.summary.as_bytes());
            EXIT_CHECK_FAILED
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_tokens() {
        assert_eq!(parse_activation("relu").unwrap(), ActivationKind::Relu);
        assert_eq!(parse_activation("prelu:0.25").unwrap(), ActivationKind::PreluChannelWise(0.25));
        assert_eq!(parse_activation("prelu 0.25").unwrap(), ActivationKind::PreluChannelWise(0.25));
        assert_eq!(parse_activation("prelu-shared:0.1").unwrap(), ActivationKind::PreluShared(0.1));
        assert_eq!(parse_activation("lrelu:0.01").unwrap(), ActivationKind::LeakyRelu(0.01));
        assert!(parse_activation("prelu").is_err());
        assert!(parse_activation("relu:1").is_err());
        assert!(parse_activation("tanh").is_err());
        for k in [ActivationKind::Relu, ActivationKind::PreluShared(0.5), ActivationKind::LeakyRelu(0.1)] {
            assert_eq!(parse_activation(&act_token(k)).unwrap(), k);
        }
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run(["rectifier", "probe", "--spec", "x", "--bogus"], &mut o, &mut e);
        assert_eq!(code, EXIT_USAGE);
    }
}
