//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

use std::path::PathBuf;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rectifier::analysis::{monte_carlo_probe, predict_gains, stall_diagnostic};
use rectifier::data::GaussianClasses;
use rectifier::init::{Direction, InitScheme};
use rectifier::model::{count_extra_slope_params, parse_spec, ActivationKind, NetworkSpec, SlopeMode};
use rectifier::optim::OptimConfig;
use rectifier::train::{train, TrainConfig, TrainRun};

fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn spec_file(name: &str) -> String {
    repo_path(&format!("specs/{name}")).to_string_lossy().into_owned()
}

fn load_spec(name: &str) -> NetworkSpec {
    parse_spec(&std::fs::read_to_string(spec_file(name)).unwrap()).unwrap()
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rectifier")).args(args).output().expect("cli runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Data rows of a CSV (comment lines and header removed), split on commas.
fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn comment(csv: &str, key: &str) -> Option<f64> {
    csv.lines()
        .find_map(|l| l.strip_prefix(&format!("# {key}=")))
        .and_then(|v| v.parse().ok())
}

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Desk-task runs shared between criteria.
#[derive(Default)]
struct Shared {
    mlp14_relu: Option<TrainRun>,
}

fn desk_config(scheme: InitScheme, epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 128,
        optim: OptimConfig {
            learning_rate: lr,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_schedule: Vec::new(),
        },
        scheme,
        seed: 1,
        ..TrainConfig::default()
    }
}

fn desk_data(per_class: usize) -> rectifier::data::Dataset {
    GaussianClasses::new(10, 64, 6.0, 1).unwrap().sample(per_class, 1).unwrap()
}

fn std_table(_: &mut Shared) -> Verdict {
    let o = cli(&["init-report", "--spec", &spec_file("vgg-b.spec"), "--scheme", "he-bwd"]);
    ensure(o.status.success(), format!("exit {:?}", o.status.code()))?;
    let stds: Vec<String> = rows(&stdout(&o))
        .iter()
        .map(|r| format!("{:.3}", r[4].parse::<f64>().unwrap()))
        .collect();
    let expected = ["0.059", "0.059", "0.042", "0.042", "0.029", "0.029", "0.021", "0.021", "0.021", "0.021"];
    ensure(stds == expected, format!("stds {stds:?}"))?;
    Ok(format!("stds {}", stds.join(" ")))
}

fn attenuation(_: &mut Shared) -> Verdict {
    let o = cli(&["init-report", "--spec", &spec_file("vgg-b.spec"), "--scheme", "fixed:0.01"]);
    ensure(o.status.success(), format!("exit {:?}", o.status.code()))?;
    let recip = comment(&stdout(&o), "attenuation_reciprocal").ok_or("no attenuation line")?;
    let off = (recip / 1.7e4 - 1.0).abs();
    ensure(off <= 0.05, format!("reciprocal {recip:.1} is {:.1}% from 1.7e4", off * 100.0))?;
    Ok(format!("1/{recip:.0} ({:.1}% from 1.7e4)", off * 100.0))
}

#[derive(Debug, Clone)]
enum Stack {
    Conv(usize, Vec<(usize, usize, bool)>),
    Fc(usize, Vec<usize>),
}

fn stack_text(s: &Stack, act: &str) -> String {
    match s {
        Stack::Conv(c, layers) => {
            let (mut out, mut size, mut ch) = (format!("input {c}x8x8\n"), 8, *c);
            for &(k, d, pool) in layers {
                out += &format!("conv {k}x{k} {d} pad same\nact {act}\n");
                ch = d;
                if pool && size >= 2 {
                    out += "maxpool 2x2\n";
                    size /= 2;
                }
            }
            out + &format!("softmax {}\n", ch * size * size)
        }
        Stack::Fc(n, widths) => {
            let mut out = format!("input {n}x1x1\n");
            for w in widths {
                out += &format!("fc {w}\nact {act}\n");
            }
            out + &format!("softmax {}\n", widths.last().unwrap())
        }
    }
}

fn gain_identities(_: &mut Shared) -> Verdict {
    let strategy = (
        prop_oneof![
            (1usize..5, prop::collection::vec((1usize..4, 1usize..16, any::<bool>()), 2..10))
                .prop_map(|(c, l)| Stack::Conv(c, l)),
            (1usize..64, prop::collection::vec(1usize..64, 2..14)).prop_map(|(n, w)| Stack::Fc(n, w)),
        ],
        -0.95f64..0.95,
    );
    let mut runner = TestRunner::new(Config {
        cases: 100,
        failure_persistence: None,
        ..Config::default()
    });
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    runner
        .run(&strategy, |(stack, a)| {
            let relu = parse_spec(&stack_text(&stack, "relu")).unwrap();
            let fwd = predict_gains(&relu, &InitScheme::HeForward, 0.0).unwrap();
            prop_assert!(rel(fwd.forward_product, 1.0) <= 1e-12);
            let bwd = predict_gains(&relu, &InitScheme::HeBackward, 0.0).unwrap();
            prop_assert!(rel(bwd.backward_product, 1.0) <= 1e-12);
            let w: Vec<_> = relu.weighted_layers().collect();
            let c2 = match stack {
                Stack::Conv(..) => w[1].input.channels,
                Stack::Fc(..) => w[1].input.size(),
            } as f64;
            let d_last = w.last().unwrap().output.channels as f64;
            prop_assert!(rel(bwd.forward_product, c2 / d_last) <= 1e-12);
            let prelu = parse_spec(&stack_text(&stack, &format!("prelu {a}"))).unwrap();
            for direction in [Direction::Forward, Direction::Backward] {
                let r = predict_gains(&prelu, &InitScheme::PReluAware { a, direction }, a).unwrap();
                for l in &r.layers {
                    let g = if direction == Direction::Forward { l.gain_fwd } else { l.gain_bwd };
                    prop_assert!(rel(g, 1.0) <= 1e-12, "layer {} gain {}", l.index, g);
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("100 random specs, 4 identities each, rel tol 1e-12".into())
}

fn monte_carlo(_: &mut Shared) -> Verdict {
    let mut text = String::from("input 256x1x1\n");
    for _ in 0..20 {
        text += "fc 256\nact relu\n";
    }
    text += "softmax 256\n";
    let spec = parse_spec(&text).unwrap();
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for (scheme, expected) in [(InitScheme::HeForward, 1.0), (InitScheme::Xavier, 0.5)] {
        let r = monte_carlo_probe(&spec, &scheme, 50, 32, 7).map_err(|e| e.to_string())?;
        for (i, l) in r.layers.iter().enumerate() {
            let e = l.empirical.as_ref().unwrap();
            // Layer 1 sees the raw input, not a rectified signal: reported only.
            if i > 0 {
                let dev = (e.fwd / expected - 1.0).abs();
                ensure(dev <= 0.15, format!("{scheme} layer {} fwd {:.3}", l.index, e.fwd))?;
                worst = worst.max(dev);
            }
            let dev = (e.bwd / expected - 1.0).abs();
            ensure(dev <= 0.15, format!("{scheme} layer {} bwd {:.3}", l.index, e.bwd))?;
            worst = worst.max(dev);
        }
        notes.push(format!("{scheme} layer-1 fwd {:.2}", r.layers[0].empirical.as_ref().unwrap().fwd));
    }
    Ok(format!("max deviation {:.1}%; {}", worst * 100.0, notes.join(", ")))
}

fn convergence_dichotomy(_: &mut Shared) -> Verdict {
    let spec = load_spec("mlp-30.spec");
    ensure(spec.depth() == 30, format!("depth {}", spec.depth()))?;
    let data = desk_data(200);
    let he = train(&spec, &data, None, &desk_config(InitScheme::HeForward, 20, 0.001)).map_err(|e| e.to_string())?;
    let xavier = train(&spec, &data, None, &desk_config(InitScheme::Xavier, 20, 0.001)).map_err(|e| e.to_string())?;
    let best_he = he.records.iter().skip(1).map(|r| r.train.top1).fold(1.0, f64::min);
    ensure(best_he < 0.10, format!("he-fwd train error {best_he}"))?;
    let improvement = xavier.loss_improvement();
    ensure(improvement < 0.01, format!("xavier loss improved {:.3}%", improvement * 100.0))?;
    ensure(xavier.any_diminishing(), "xavier never flagged diminishing")?;
    let first = xavier
        .records
        .iter()
        .find(|r| r.stall == Some(rectifier::analysis::StallVerdict::Diminishing))
        .map(|r| r.epoch)
        .unwrap();
    Ok(format!(
        "he-fwd train error {:.3}; xavier loss {:.5} -> {:.5} ({:.3}%), diminishing from epoch {first}, status {}",
        best_he,
        xavier.initial_train_loss(),
        xavier.final_train().loss,
        improvement * 100.0,
        xavier.status.as_str()
    ))
}

const DESK_THRESHOLD: f64 = 0.5;

fn earlier_convergence(shared: &mut Shared) -> Verdict {
    let spec = load_spec("mlp-14.spec");
    ensure(spec.depth() == 14, format!("depth {}", spec.depth()))?;
    let data = desk_data(100);
    let he = train(&spec, &data, None, &desk_config(InitScheme::HeForward, 30, 0.01)).map_err(|e| e.to_string())?;
    let xavier = train(&spec, &data, None, &desk_config(InitScheme::Xavier, 30, 0.01)).map_err(|e| e.to_string())?;
    let e_he = he.epochs_to_loss(DESK_THRESHOLD).ok_or("he-fwd never reached the threshold")?;
    let e_x = xavier.epochs_to_loss(DESK_THRESHOLD).ok_or("xavier never reached the threshold")?;
    shared.mlp14_relu = Some(he);
    ensure(e_he <= e_x, format!("he-fwd {e_he} epochs vs xavier {e_x}"))?;
    Ok(format!("epochs to loss {DESK_THRESHOLD}: he-fwd {e_he}, xavier {e_x}"))
}

fn gradient_correctness(_: &mut Shared) -> Verdict {
    let spec = load_spec("gradcheck-small.spec");
    let kinds: Vec<String> = spec.layers().iter().map(|l| l.spec.to_string()).collect();
    for needle in ["conv", "maxpool", "act prelu ", "act prelu_shared", "fc", "softmax"] {
        ensure(kinds.iter().any(|k| k.starts_with(needle)), format!("spec lacks {needle}"))?;
    }
    let o = cli(&["gradcheck", "--spec", &spec_file("gradcheck-small.spec"), "--seed", "3"]);
    ensure(o.status.code() == Some(0), format!("exit {:?}", o.status.code()))?;
    let worst = rows(&stdout(&o)).iter().map(|r| r[4].parse::<f64>().unwrap()).fold(0.0, f64::max);
    ensure(worst <= 1e-5, format!("max relative error {worst:e}"))?;
    let bad = cli(&["gradcheck", "--spec", &spec_file("gradcheck-small.spec"), "--seed", "3", "--corrupt-slope-grads"]);
    ensure(bad.status.code() == Some(1), "corrupted slope gradients not detected")?;
    Ok(format!("max relative error {worst:.2e}; corrupted slopes flagged"))
}

fn slope_count(_: &mut Shared) -> Verdict {
    let spec = load_spec("table1-small.spec");
    let shared = count_extra_slope_params(&spec, SlopeMode::Shared);
    let channel = count_extra_slope_params(&spec, SlopeMode::ChannelWise);
    ensure(shared == 13, format!("shared count {shared}"))?;
    Ok(format!("shared {shared}, channel-wise {channel}"))
}

fn prelu_degeneracy(shared: &mut Shared) -> Verdict {
    let spec = load_spec("mlp-14.spec");
    let data = desk_data(100);
    let short = |activation, freeze| TrainConfig {
        activation: Some(activation),
        freeze_slopes: freeze,
        ..desk_config(InitScheme::HeForward, 3, 0.01)
    };
    let relu = train(&spec, &data, Some(&data), &short(ActivationKind::Relu, false)).map_err(|e| e.to_string())?;
    let frozen = train(&spec, &data, Some(&data), &short(ActivationKind::PreluChannelWise(0.0), true))
        .map_err(|e| e.to_string())?;
    for (a, b) in relu.records.iter().zip(&frozen.records) {
        ensure(
            a.train == b.train && a.val == b.val && a.grad_norms == b.grad_norms,
            format!("epoch {} differs", a.epoch),
        )?;
    }
    let relu_full = match shared.mlp14_relu.take() {
        Some(r) => r,
        None => train(&spec, &data, None, &desk_config(InitScheme::HeForward, 30, 0.01)).map_err(|e| e.to_string())?,
    };
    let prelu = train(
        &spec,
        &data,
        None,
        &TrainConfig {
            activation: Some(ActivationKind::PreluChannelWise(0.25)),
            ..desk_config(InitScheme::HeForward, 30, 0.01)
        },
    )
    .map_err(|e| e.to_string())?;
    let (lp, lr) = (prelu.final_train().loss, relu_full.final_train().loss);
    ensure(prelu.status == rectifier::train::RunStatus::Completed, "prelu run did not complete")?;
    ensure(lp <= lr + 0.02, format!("prelu loss {lp} vs relu {lr}"))?;
    let frac = prelu.slope_fraction_above_one.ok_or("no slopes reported")?;
    ensure(frac.is_finite(), "slope fraction not finite")?;
    Ok(format!(
        "frozen-0 matches relu over 3 epochs; final loss prelu {lp:.2e} vs relu {lr:.2e}; |a|>1 fraction {frac:.3}"
    ))
}

fn determinism(_: &mut Shared) -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("init-report", vec!["--spec".into(), spec_file("vgg-b.spec"), "--scheme".into(), "fixed:0.01".into()]),
        ("probe", vec!["--spec".into(), spec_file("mlp-14.spec"), "--scheme".into(), "xavier".into(), "--trials".into(), "8".into(), "--seed".into(), "4".into()]),
        ("gradcheck", vec!["--spec".into(), spec_file("gradcheck-small.spec"), "--seed".into(), "9".into()]),
        (
            "train",
            vec![
                "--spec".into(), spec_file("mlp-14.spec"), "--data".into(), "synth:10,30,64,6".into(),
                "--val-data".into(), "synth:10,10,64,6".into(), "--act".into(), "prelu:0.25".into(),
                "--epochs".into(), "2".into(), "--seed".into(), "11".into(),
            ],
        ),
    ];
    for (name, args) in &commands {
        let outputs: Vec<Vec<u8>> = (0..2)
            .map(|i| {
                let out = dir.path().join(format!("{name}-{i}.csv"));
                let mut full: Vec<&str> = vec![name];
                full.extend(args.iter().map(String::as_str));
                let out_s = out.to_string_lossy().into_owned();
                full.extend(["--out", &out_s]);
                let o = cli(&full);
                assert!(o.status.success(), "{name} exit {:?}", o.status.code());
                std::fs::read(out).unwrap()
            })
            .collect();
        ensure(outputs[0] == outputs[1], format!("{name} output differs between runs"))?;
        ensure(!outputs[0].is_empty(), format!("{name} wrote nothing"))?;
    }
    Ok("init-report, probe, gradcheck, train: byte-identical reruns".into())
}

fn stall_examples_hold() -> bool {
    // Guard that the diagnostic is wired as documented before relying on it.
    use rectifier::analysis::{LayerGradSample, StepGradients};
    let step = |g| StepGradients { layers: vec![LayerGradSample { loss_grad_norm: g, weight_norm: 1.0 }] };
    let decay_only: Vec<_> = (0..60).map(|_| step(0.0)).collect();
    stall_diagnostic(&decay_only, 0.0005).map(|v| v.as_str() == "diminishing").unwrap_or(false)
}

fn main() {
    type Criterion = fn(&mut Shared) -> Verdict;
    let criteria: [(&str, Duration, Criterion); 10] = [
        ("std table (vgg-b, he-bwd)", Duration::from_secs(1), std_table),
        ("attenuation factor (vgg-b, fixed 0.01)", Duration::from_secs(1), attenuation),
        ("exact gain identities", Duration::from_secs(5), gain_identities),
        ("monte-carlo agreement", Duration::from_secs(120), monte_carlo),
        ("convergence dichotomy (30 layers)", Duration::from_secs(1800), convergence_dichotomy),
        ("earlier convergence (14 layers)", Duration::from_secs(1200), earlier_convergence),
        ("gradient correctness", Duration::from_secs(60), gradient_correctness),
        ("prelu parameter count", Duration::from_secs(1), slope_count),
        ("prelu degeneracy and trend", Duration::from_secs(1200), prelu_degeneracy),
        ("determinism", Duration::from_secs(300), determinism),
    ];
    assert!(stall_examples_hold(), "stall diagnostic sanity check");
    let mut shared = Shared::default();
    let mut failures = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(&mut shared)))
            .unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = result.and_then(|msg| {
            if elapsed <= *budget {
                Ok(msg)
            } else {
                Err(format!("{msg}; took {elapsed:.1?}, budget {budget:?}"))
            }
        });
        match result {
            Ok(msg) => println!("criterion {:>2} PASS {name} [{elapsed:.2?}]: {msg}", i + 1),
            Err(msg) => {
                failures += 1;
                println!("criterion {:>2} FAIL {name} [{elapsed:.2?}]: {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
