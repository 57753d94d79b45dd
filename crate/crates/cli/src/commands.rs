//! The subcommands. Each returns a [`Report`] holding both the human text and
//! the `--json` document.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bmnn_core::backmatch::{
    apply_backmatch_scaling, exact_backmatch_conv, exact_backmatch_fc, layer_ratio, lenet_closed_form,
    whitened_batch, ORACLE_MAX_UNKNOWNS,
};
use bmnn_core::layers::{Conv2d, FullyConnected};
use bmnn_core::rng::{stream_rng, Stream};
use bmnn_core::tensor::{col2im, matmul};
use bmnn_core::trainer::{
    initial_network, paired_run, read_checkpoint, train, write_checkpoint, write_csv, write_jsonl, TrainOutcome,
};
use bmnn_core::{CifarVariant, ConvGeometry, Layer, Matrix, Network, Rule, Tensor};
use clap::{Args, ValueEnum};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{run_path, Overrides, Settings};
use crate::dataset;
use crate::error::CliError;

pub struct Report {
    pub text: String,
    pub json: Value,
}

fn io_err(path: &Path) -> impl Fn(bmnn_core::Error) -> CliError + '_ {
    move |e| match e {
        bmnn_core::Error::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => other.into(),
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct RunSummary {
    rule: Rule,
    learning_rate: f64,
    epochs: usize,
    steps: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    test_loss: Option<f64>,
    test_accuracy: Option<f64>,
    batch_digest: String,
    metrics_csv: Option<PathBuf>,
    metrics_jsonl: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    warnings: Vec<String>,
}

fn save_outputs(settings: &Settings, out: &TrainOutcome, tag: Option<&str>) -> Result<[Option<PathBuf>; 3], CliError> {
    let csv = settings.metrics_csv.as_deref().map(|p| run_path(p, tag));
    let jsonl = settings.metrics_jsonl.as_deref().map(|p| run_path(p, tag));
    let ckpt = settings.checkpoint.as_deref().map(|p| run_path(p, tag));
    if let Some(p) = &csv {
        write_csv(p, &out.rows).map_err(io_err(p))?;
    }
    if let Some(p) = &jsonl {
        write_jsonl(p, &out.rows).map_err(io_err(p))?;
    }
    if let Some(p) = &ckpt {
        write_checkpoint(p, &out.network).map_err(io_err(p))?;
    }
    Ok([csv, jsonl, ckpt])
}

pub fn cmd_train(flags: &Overrides) -> Result<Report, CliError> {
    let settings = Settings::from_flags(flags)?;
    let (data, summary) = dataset::load(&settings)?;
    let configs: Vec<_> = settings.optimizers().into_iter().map(|o| settings.train_config(o)).collect();
    let outcomes = if settings.pair_rule.is_some() {
        let p = paired_run(&configs[0], &configs[1], &data)?;
        vec![p.a, p.b]
    } else {
        configs.iter().map(|c| train(c, &data)).collect::<Result<Vec<_>, _>>()?
    };

    let mut runs = Vec::new();
    for (cfg, out) in configs.iter().zip(&outcomes) {
        let rule = cfg.optimizer.rule;
        let tag = if settings.pair_rule.is_some() {
            Some(rule.to_string())
        } else {
            settings.lr_pool.as_ref().map(|_| format!("lr{}", cfg.optimizer.learning_rate))
        };
        let [metrics_csv, metrics_jsonl, checkpoint] = save_outputs(&settings, out, tag.as_deref())?;
        runs.push(RunSummary {
            rule,
            learning_rate: cfg.optimizer.learning_rate,
            epochs: cfg.epochs,
            steps: out.rows.last().map_or(0, |r| r.step),
            initial_loss: out.initial_loss(),
            final_loss: out.final_loss(),
            test_loss: out.final_eval.map(|e| e.loss),
            test_accuracy: out.final_eval.map(|e| e.accuracy),
            batch_digest: out.batch_digest.clone(),
            metrics_csv,
            metrics_jsonl,
            checkpoint,
            warnings: out.warnings.clone(),
        });
    }

    let mut text = format!("data: {} ({} train, {} test, {} classes)\n", summary.source, summary.train, summary.test, summary.classes);
    for r in &runs {
        let _ = write!(
            text,
            "{} lr={}: loss {} -> {} over {} steps",
            r.rule,
            r.learning_rate,
            fmt_opt(r.initial_loss),
            fmt_opt(r.final_loss),
            r.steps
        );
        if let (Some(acc), Some(loss)) = (r.test_accuracy, r.test_loss) {
            let _ = write!(text, "; test loss {loss:.4}, accuracy {acc:.4}");
        }
        text.push('\n');
        for (what, p) in [("metrics", &r.metrics_csv), ("metrics", &r.metrics_jsonl), ("checkpoint", &r.checkpoint)] {
            if let Some(p) = p {
                let _ = writeln!(text, "  {what}: {}", p.display());
            }
        }
        for w in &r.warnings {
            let _ = writeln!(text, "  warning: {w}");
        }
    }
    let json = json!({ "command": "train", "settings": settings, "data": summary, "runs": runs });
    Ok(Report { text, json })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

// ---------------------------------------------------------------------------

pub fn cmd_eval(flags: &Overrides) -> Result<Report, CliError> {
    let settings = Settings::from_flags(flags)?;
    let path = settings
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Config("checkpoint: eval needs --checkpoint or a checkpoint key".into()))?;
    let (data, summary) = dataset::load(&settings)?;
    let mut network = initial_network(&settings.train_config(settings.optimizer()), &data)?;
    read_checkpoint(&path, &mut network).map_err(io_err(&path))?;
    let (split, ds) = match &data.test {
        Some(t) => ("test", t),
        None => ("train", &data.train),
    };
    let ev = network.evaluate(ds)?;
    let text = format!(
        "{}: {} split of {} ({} samples): loss {:.6}, accuracy {:.4}\n",
        path.display(),
        split,
        summary.source,
        ds.len(),
        ev.loss,
        ev.accuracy
    );
    let json = json!({
        "command": "eval",
        "checkpoint": path,
        "split": split,
        "samples": ds.len(),
        "loss": ev.loss,
        "accuracy": ev.accuracy,
    });
    Ok(Report { text, json })
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum InitKind {
    /// The architecture's usual random initialization
    #[default]
    Random,
    /// Identity matrices; every parametric layer must be a square fc
    Identity,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Samples in the probe batch used to obtain the BP gradients
    #[arg(long, default_value_t = 8)]
    pub probe_batch: usize,
    #[arg(long, value_enum, default_value_t = InitKind::Random)]
    pub init: InitKind,
}

#[derive(Debug, Serialize)]
struct FactorRow {
    layer: usize,
    kind: &'static str,
    sharing: f64,
    ratio: f64,
    m_output: f64,
    m_input: f64,
    scale: Option<f64>,
    measured: Option<f64>,
    closed_form: Option<f64>,
    relative_difference: Option<f64>,
}

fn probe_batch(shape: &[usize], batch: usize, seed: u64) -> Tensor {
    let mut rng = stream_rng(seed, Stream::Probe);
    let full: Vec<usize> = match shape {
        [f] => vec![*f, batch],
        _ => std::iter::once(batch).chain(shape.iter().copied()).collect(),
    };
    Tensor::from_fn(&full, |_| rng.sample(StandardNormal))
}

fn set_identity(network: &mut Network) -> Result<(), CliError> {
    for (i, layer) in network.layers_mut().iter_mut().enumerate() {
        match layer {
            Layer::FullyConnected(fc) if fc.in_dim() == fc.out_dim() => {
                let n = fc.in_dim();
                *fc = FullyConnected::new(Matrix::identity(n));
            }
            l if l.is_parametric() => {
                return Err(CliError::Config(format!(
                    "init: identity weights need square fc layers, layer {i} is {}",
                    l.kind()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn cmd_verify_factors(args: &VerifyArgs) -> Result<Report, CliError> {
    let settings = Settings::from_flags(&args.overrides)?;
    if args.probe_batch < 2 {
        return Err(CliError::Config("probe_batch: batch norm needs at least 2 samples".into()));
    }
    let (shape, classes) = settings.input_geometry();
    let mut network = Network::build(&settings.arch, &shape, classes, &mut stream_rng(settings.seed, Stream::Init))?;
    if args.init == InitKind::Identity {
        set_identity(&mut network)?;
    }
    let x = probe_batch(&shape, args.probe_batch, settings.seed);
    let labels: Vec<usize> = (0..args.probe_batch).map(|i| i % classes).collect();
    let bundle = network.forward_backward(&x, &labels)?;
    let scaled = apply_backmatch_scaling(&network, &bundle)?;
    let closed = lenet_closed_form(&network).ok();

    let rows: Vec<FactorRow> = scaled
        .trace
        .iter()
        .map(|step| {
            let measured = bundle.grad_for(step.layer).and_then(|raw| {
                let s = scaled.grads.iter().find(|g| g.layer == step.layer)?;
                (raw.norm() > 0.0).then(|| s.grad.norm() / raw.norm())
            });
            let closed_form = closed
                .as_ref()
                .and_then(|c| c.iter().find(|(l, _)| *l == step.layer).map(|(_, v)| *v));
            let relative_difference = step
                .scale
                .zip(closed_form)
                .map(|(s, c)| (s - c).abs() / c.abs());
            FactorRow {
                layer: step.layer,
                kind: step.kind,
                sharing: step.sharing,
                ratio: step.ratio,
                m_output: step.m_output,
                m_input: step.m_input,
                scale: step.scale,
                measured,
                closed_form,
                relative_difference,
            }
        })
        .collect();

    let mut text = format!(
        "{:>5} {:<8} {:>8} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>9}\n",
        "layer", "kind", "s", "r", "m", "1/(m s)", "scaled/BP", "closed form", "rel diff", ""
    );
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6e}"));
    for r in &rows {
        let _ = writeln!(
            text,
            "{:>5} {:<8} {:>8} {:>12.6e} {:>12.6e} {:>12} {:>12} {:>12} {:>12}",
            r.layer,
            r.kind,
            r.sharing,
            r.ratio,
            r.m_output,
            cell(r.scale),
            cell(r.measured),
            cell(r.closed_form),
            r.relative_difference.map_or_else(|| "-".to_string(), |v| format!("{v:.1e}")),
        );
    }
    if closed.is_some() {
        if let (Some(cv1), Some(cv2)) = (rows.iter().find(|r| r.layer == 0), rows.iter().find(|r| r.layer == 4)) {
            let _ = writeln!(
                text,
                "conv sharing: s_cv1 = {}, s_cv2 = {}; the cv1 closed form carries 196/196 * 1/25",
                cv1.sharing, cv2.sharing
            );
        }
    }
    let json = json!({
        "command": "verify-factors",
        "arch": settings.arch,
        "input_shape": shape,
        "classes": classes,
        "seed": settings.seed,
        "closed_form_available": closed.is_some(),
        "layers": rows,
    });
    Ok(Report { text, json })
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Fc,
    Conv,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    #[arg(long, value_enum, default_value_t = OracleKind::Fc)]
    pub kind: OracleKind,
    /// fc input features
    #[arg(long, default_value_t = 16)]
    pub inputs: usize,
    /// fc output features
    #[arg(long, default_value_t = 8)]
    pub outputs: usize,
    /// conv input channels
    #[arg(long, default_value_t = 2)]
    pub channels: usize,
    /// conv output channels
    #[arg(long, default_value_t = 3)]
    pub filters: usize,
    #[arg(long, default_value_t = 2)]
    pub kernel: usize,
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
    #[arg(long, default_value_t = 0)]
    pub padding: usize,
    /// conv input height and width
    #[arg(long, default_value_t = 6)]
    pub size: usize,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
}

#[derive(Debug, Serialize)]
struct OracleCase {
    case: &'static str,
    sharing: f64,
    ratio: f64,
    weight_error: f64,
    input_error: f64,
    weight_residual: f64,
    input_residual: f64,
}

fn rel(approx: &Tensor, exact: &Tensor) -> Result<f64, CliError> {
    let diff = approx.sub(exact)?.norm();
    let scale = exact.norm();
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn fc_case(name: &'static str, w: &Matrix, a: &Matrix, db: &Matrix, ridge: f64) -> Result<OracleCase, CliError> {
    let exact = exact_backmatch_fc(w, a, db, ridge)?;
    let batch = a.cols() as f64;
    let net = Network::from_layers(vec![Layer::FullyConnected(FullyConnected::new(w.clone()))], &[w.cols()], w.rows())?;
    let info = layer_ratio(&net, 0)?;
    // a lone output layer keeps its BP gradient; its input signal is divided by r
    let bp_w = matmul(db, &a.transpose())?.into_tensor().scale(1.0 / batch);
    let bp_a = matmul(&w.transpose(), db)?.into_tensor();
    Ok(OracleCase {
        case: name,
        sharing: info.sharing,
        ratio: info.ratio,
        weight_error: rel(&bp_w.scale(1.0 / info.sharing), &exact.delta_prime_w)?,
        input_error: rel(&bp_a.scale(1.0 / info.ratio), &exact.delta_prime_a)?,
        weight_residual: exact.weight_residual,
        input_residual: exact.input_residual,
    })
}

fn conv_case(name: &'static str, conv: &Conv2d, a: &Tensor, db: &Tensor, ridge: f64) -> Result<OracleCase, CliError> {
    let exact = exact_backmatch_conv(conv, a, db, ridge)?;
    let batch = a.shape()[0] as f64;
    let mut layer = Layer::Conv2d(conv.clone());
    layer.forward(a, true)?;
    let grads = layer.backward(db)?;
    let bp_w = grads.weights.expect("conv has weights").scale(1.0 / batch);
    let chw = [a.shape()[1], a.shape()[2], a.shape()[3]];
    let out = conv.output_shape(chw)?;
    // a flatten + fc tail gives the conv a place in a full network
    let mut rng = stream_rng(0, Stream::Probe);
    let tail = FullyConnected::new(Matrix::from_fn(2, out.iter().product(), |_, _| rng.random_range(-1.0..1.0)));
    let net = Network::from_layers(
        vec![
            Layer::Conv2d(conv.clone()),
            Layer::Flatten(bmnn_core::layers::Flatten::new()),
            Layer::FullyConnected(tail),
        ],
        &chw,
        2,
    )?;
    let info = layer_ratio(&net, 0)?;
    Ok(OracleCase {
        case: name,
        sharing: info.sharing,
        ratio: info.ratio,
        weight_error: rel(&bp_w.scale(1.0 / info.sharing), &exact.delta_prime_w)?,
        input_error: rel(&grads.input.scale(1.0 / info.ratio), &exact.delta_prime_a)?,
        weight_residual: exact.weight_residual,
        input_residual: exact.input_residual,
    })
}

pub fn cmd_compare_oracle(args: &OracleArgs) -> Result<Report, CliError> {
    let mut rng = stream_rng(args.seed, Stream::Probe);
    let mut cases = Vec::new();
    let mut notes = Vec::new();
    let geometry = match args.kind {
        OracleKind::Fc => {
            let (inp, out) = (args.inputs, args.outputs);
            let batch = args.batch.unwrap_or(64);
            if inp == 0 || out == 0 || batch == 0 {
                return Err(CliError::Config("inputs, outputs and batch must be positive".into()));
            }
            if inp > ORACLE_MAX_UNKNOWNS {
                return Err(CliError::Config(format!(
                    "inputs: {inp} unknowns per row exceeds the oracle limit of {ORACLE_MAX_UNKNOWNS}"
                )));
            }
            let w = Matrix::from_tensor(uniform(&mut rng, &[out, inp]))?;
            let db = Matrix::from_tensor(uniform(&mut rng, &[out, batch]))?;
            let a = Matrix::from_tensor(uniform(&mut rng, &[inp, batch]))?;
            cases.push(fc_case("random", &w, &a, &db, args.ridge)?);
            if batch >= inp {
                let white = whitened_batch(inp, batch, &mut rng)?;
                cases.push(fc_case("whitened", &w, &white, &db, args.ridge)?);
            } else {
                notes.push(format!("whitened case skipped: batch {batch} < inputs {inp}"));
            }
            let norms: Vec<f64> = (0..inp).map(|j| (0..out).map(|k| w.get(k, j).powi(2)).sum::<f64>().sqrt()).collect();
            let unit = Matrix::from_fn(out, inp, |k, j| w.get(k, j) / norms[j]);
            cases.push(fc_case("unit-columns", &unit, &a, &db, args.ridge)?);
            json!({ "inputs": inp, "outputs": out, "batch": batch })
        }
        OracleKind::Conv => {
            let batch = args.batch.unwrap_or(8);
            let (m, n, k, size) = (args.channels, args.filters, args.kernel, args.size);
            if m == 0 || n == 0 || k == 0 || size == 0 || batch == 0 || args.stride == 0 {
                return Err(CliError::Config("conv geometry entries must be positive".into()));
            }
            let g = ConvGeometry::square(k, args.stride, args.padding);
            let (q1, q2) = g.output_size(size, size).map_err(|e| CliError::Config(e.to_string()))?;
            let conv = Conv2d::new(uniform(&mut rng, &[n, m, k, k]), args.stride, args.padding)?;
            let db = uniform(&mut rng, &[batch, n, q1, q2]);
            let a = uniform(&mut rng, &[batch, m, size, size]);
            cases.push(conv_case("random", &conv, &a, &db, args.ridge)?);
            let (patch, locations) = (m * k * k, q1 * q2);
            if k == args.stride && args.padding == 0 && size == q1 * k && batch * locations >= patch {
                // non-overlapping patches: whiten im2col columns and scatter them back
                let white = whitened_batch(patch, batch * locations, &mut rng)?;
                let mut data = Vec::with_capacity(batch * m * size * size);
                for s in 0..batch {
                    let cols = Matrix::from_fn(patch, locations, |r, c| white.get(r, s * locations + c));
                    data.extend(col2im(&cols, [m, size, size], &g)?.into_data());
                }
                let a = Tensor::new(vec![batch, m, size, size], data)?;
                cases.push(conv_case("whitened", &conv, &a, &db, args.ridge)?);
            } else {
                notes.push("whitened case needs kernel == stride, no padding, and batch * locations >= patch size".into());
            }
            json!({
                "channels": m, "filters": n, "kernel": k, "stride": args.stride,
                "padding": args.padding, "size": size, "batch": batch,
            })
        }
    };

    let mut text = format!("{:<14} {:>8} {:>12} {:>12} {:>12} {:>14} {:>14}\n", "case", "s", "r", "dW' error", "da' error", "W residual", "a residual");
    for c in &cases {
        let _ = writeln!(
            text,
            "{:<14} {:>8} {:>12.6e} {:>12.3e} {:>12.3e} {:>14.6e} {:>14.6e}",
            c.case, c.sharing, c.ratio, c.weight_error, c.input_error, c.weight_residual, c.input_residual
        );
    }
    for n in &notes {
        let _ = writeln!(text, "note: {n}");
    }
    let json = json!({
        "command": "compare-oracle",
        "kind": args.kind,
        "seed": args.seed,
        "geometry": geometry,
        "cases": cases,
        "notes": notes,
    });
    Ok(Report { text, json })
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Cifar10,
    Cifar100,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory; the CIFAR subdirectory is created inside it
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantArg::Cifar10)]
    pub variant: VariantArg,
    /// Classes actually used (default: all of the variant's)
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, default_value_t = 5000)]
    pub count: usize,
    #[arg(long, default_value_t = 1000)]
    pub test_count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn cmd_make_synthetic(args: &SynthArgs) -> Result<Report, CliError> {
    let variant = match args.variant {
        VariantArg::Cifar10 => CifarVariant::Cifar10,
        VariantArg::Cifar100 => CifarVariant::Cifar100,
    };
    let classes = args.classes.unwrap_or(variant.classes());
    if classes < 2 {
        return Err(CliError::Config("classes: need at least 2".into()));
    }
    let files = dataset::write_synthetic_cifar(&args.out, variant, classes, args.count, args.test_count, args.seed)?;
    let mut text = String::new();
    for f in &files {
        let _ = writeln!(text, "{} ({} records)", f.path.display(), f.records);
    }
    let json = json!({
        "command": "make-synthetic",
        "variant": match variant { CifarVariant::Cifar10 => "cifar10", CifarVariant::Cifar100 => "cifar100" },
        "classes": classes,
        "train": args.count,
        "test": args.test_count,
        "seed": args.seed,
        "files": files,
    });
    Ok(Report { text, json })
}

