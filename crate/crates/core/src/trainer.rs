//! Training loop, paired A/B runs, metric logs and weight checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backmatch::factor_walk;
use crate::data::{batches, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::network::{ArchSpec, Evaluation, Network};
use crate::optim::{layer_factors, scheduled_rate, Optimizer, OptimizerConfig, Rule};
use crate::rng::{stream_rng, Stream};

/// Training loss above which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e4;
/// Rows attached to a divergence error.
pub const DIVERGENCE_HISTORY: usize = 10;

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch: BatchPlan,
    /// Evaluate on the test split every this many epochs (0 disables; the
    /// final epoch is always evaluated when a test split exists).
    #[serde(default = "default_one")]
    pub eval_every: usize,
    /// Record a metrics row every this many steps; the first step and the
    /// last step of each epoch are always recorded.
    #[serde(default = "default_one")]
    pub log_every: usize,
    pub seed: u64,
    #[serde(default)]
    pub metrics_csv: Option<PathBuf>,
    #[serde(default)]
    pub metrics_jsonl: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(arch: ArchSpec, optimizer: OptimizerConfig, epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            arch,
            optimizer,
            epochs,
            batch: BatchPlan::new(seed, batch_size),
            eval_every: 1,
            log_every: 1,
            seed,
            metrics_csv: None,
            metrics_jsonl: None,
            checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidArgument("log_every must be >= 1".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    /// 1-based count of optimizer steps taken, including this one.
    pub step: usize,
    pub learning_rate: f64,
    /// Mini-batch cross-entropy before the update, without any decay term.
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Frobenius norm of each parametric layer's raw gradient, bottom-up.
    pub grad_norms: Vec<f64>,
    /// `m * s` of each parametric layer from the pre-update weights, bottom-up.
    pub factors: Vec<f64>,
    pub seconds: f64,
}

impl MetricsRow {
    /// The row with its wall-clock field cleared, for determinism checks.
    pub fn without_timing(&self) -> MetricsRow {
        MetricsRow {
            seconds: 0.0,
            ..self.clone()
        }
    }
}

pub struct TrainData {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub network: Network,
    /// SHA-256 over every batch consumed, in order.
    pub batch_digest: String,
    pub final_eval: Option<Evaluation>,
    pub warnings: Vec<String>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.train_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.train_loss)
    }
}

/// The freshly initialized network a config trains from.
pub fn initial_network(config: &TrainConfig, data: &TrainData) -> Result<Network> {
    Network::build(
        &config.arch,
        data.train.sample_shape(),
        data.train.classes(),
        &mut stream_rng(config.seed, Stream::Init),
    )
}

pub fn train(config: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    let network = initial_network(config, data)?;
    train_from(config, data, network, &mut |_, _| {})
}

/// Trains `network` in place of a fresh initialization. `observe` sees every
/// recorded row together with the weights the row's factors were computed from.
pub fn train_from(
    config: &TrainConfig,
    data: &TrainData,
    mut network: Network,
    observe: &mut dyn FnMut(&Network, &MetricsRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut optimizer = Optimizer::new(config.optimizer.clone(), &network)?;
    let start = Instant::now();
    let mut hasher = Sha256::new();
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut warnings = Vec::new();
    let mut step = 0usize;
    let mut final_eval = None;
    let recent = |rows: &[MetricsRow]| rows[rows.len().saturating_sub(DIVERGENCE_HISTORY)..].to_vec();

    for epoch in 0..config.epochs {
        let epoch_batches: Vec<_> = batches(&data.train, &config.batch, epoch)?.collect();
        let last = epoch_batches.len() - 1;
        for (b, batch) in epoch_batches.into_iter().enumerate() {
            step += 1;
            for v in batch.images.data() {
                hasher.update(v.to_le_bytes());
            }
            for &y in &batch.labels {
                hasher.update((y as u64).to_le_bytes());
            }

            let bundle = network.forward_backward(&batch.images, &batch.labels)?;
            if !bundle.loss.is_finite() || bundle.loss > DIVERGENCE_LOSS {
                return Err(Error::Diverged {
                    step,
                    loss: bundle.loss,
                    recent: recent(&rows),
                });
            }
            let walk = match factor_walk(&network) {
                Ok(w) => Some(w),
                Err(e) if config.optimizer.rule == Rule::BackMatch => return Err(e),
                Err(_) => None,
            };
            let record = step == 1 || step % config.log_every == 0 || b == last;
            if record {
                let row = MetricsRow {
                    epoch,
                    step,
                    learning_rate: scheduled_rate(&config.optimizer, epoch),
                    train_loss: bundle.loss,
                    test_loss: None,
                    test_accuracy: None,
                    grad_norms: bundle.grads.iter().map(|g| g.grad.norm()).collect(),
                    factors: walk.as_deref().map(layer_factors).unwrap_or_default(),
                    seconds: start.elapsed().as_secs_f64(),
                };
                observe(&network, &row);
                rows.push(row);
            }
            let report = optimizer
                .step_with(&mut network, &bundle.grads, epoch, walk.as_deref())
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged {
                        step,
                        loss: bundle.loss,
                        recent: recent(&rows),
                    },
                    e => e,
                })?;
            warnings.extend(report.warnings.into_iter().map(|w| format!("step {step}: {w}")));
        }

        let due = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
        if let Some(test) = data.test.as_ref().filter(|_| due || epoch + 1 == config.epochs) {
            let eval = network.evaluate(test)?;
            if let Some(row) = rows.last_mut() {
                row.test_loss = Some(eval.loss);
                row.test_accuracy = Some(eval.accuracy);
            }
            final_eval = Some(eval);
        }
    }

    let outcome = TrainOutcome {
        rows,
        network,
        batch_digest: hex(&hasher.finalize()),
        final_eval,
        warnings,
    };
    if let Some(path) = &config.metrics_csv {
        write_csv(path, &outcome.rows)?;
    }
    if let Some(path) = &config.metrics_jsonl {
        write_jsonl(path, &outcome.rows)?;
    }
    if let Some(path) = &config.checkpoint {
        write_checkpoint(path, &outcome.network)?;
    }
    Ok(outcome)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct PairedOutcome {
    pub a: TrainOutcome,
    pub b: TrainOutcome,
}

/// Runs two configs from one shared initialization over one batch sequence.
/// Only the optimizer settings and output paths may differ.
pub fn paired_run(a: &TrainConfig, b: &TrainConfig, data: &TrainData) -> Result<PairedOutcome> {
    let mismatch = |field: &str| Err(Error::ConfigMismatch(format!("paired runs differ in {field}")));
    if a.seed != b.seed {
        return mismatch("seed");
    }
    if a.arch != b.arch {
        return mismatch("arch");
    }
    if a.batch != b.batch {
        return mismatch("batch plan");
    }
    if a.epochs != b.epochs {
        return mismatch("epochs");
    }
    let init = initial_network(a, data)?;
    let run_a = train_from(a, data, init.clone(), &mut |_, _| {})?;
    let run_b = train_from(b, data, init, &mut |_, _| {})?;
    if run_a.batch_digest != run_b.batch_digest {
        return Err(Error::ConfigMismatch(format!(
            "batch streams differ: {} vs {}",
            run_a.batch_digest, run_b.batch_digest
        )));
    }
    Ok(PairedOutcome { a: run_a, b: run_b })
}

// ---------------------------------------------------------------------------

pub const CSV_HEADER: &str =
    "epoch,step,learning_rate,train_loss,test_loss,test_accuracy,grad_norms,factors,seconds";

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn csv_string(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.step,
            r.learning_rate,
            r.train_loss,
            opt(r.test_loss),
            opt(r.test_accuracy),
            join(&r.grad_norms),
            join(&r.factors),
            r.seconds
        ));
    }
    out
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, csv_string(rows))?;
    Ok(())
}

pub fn write_jsonl(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(file, "{line}")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRow>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
        .collect()
}

// ---------------------------------------------------------------------------
//
// Checkpoint container, all little-endian:
//   magic "BMNNCKPT" | version u32 | entry count u32 |
//   per entry: tag u8 | layer u32 | rank u32 | dims u64 * rank | payload f64 * prod(dims)

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BMNNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum EntryKind {
    FcWeights = 1,
    ConvWeights = 2,
    BnRunningMean = 3,
    BnRunningVar = 4,
}

impl EntryKind {
    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            1 => EntryKind::FcWeights,
            2 => EntryKind::ConvWeights,
            3 => EntryKind::BnRunningMean,
            4 => EntryKind::BnRunningVar,
            t => return Err(Error::Format(format!("unknown checkpoint entry tag {t}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub kind: EntryKind,
    pub layer: usize,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn checkpoint_entries(network: &Network) -> Vec<CheckpointEntry> {
    let mut out = Vec::new();
    for (i, layer) in network.layers().iter().enumerate() {
        match layer {
            Layer::FullyConnected(l) => out.push(CheckpointEntry {
                kind: EntryKind::FcWeights,
                layer: i,
                shape: l.weights().shape().to_vec(),
                data: l.weights().data().to_vec(),
            }),
            Layer::Conv2d(l) => out.push(CheckpointEntry {
                kind: EntryKind::ConvWeights,
                layer: i,
                shape: l.weights().shape().to_vec(),
                data: l.weights().data().to_vec(),
            }),
            Layer::BatchNorm(l) => {
                for (kind, v) in [
                    (EntryKind::BnRunningMean, l.running_mean()),
                    (EntryKind::BnRunningVar, l.running_var()),
                ] {
                    out.push(CheckpointEntry {
                        kind,
                        layer: i,
                        shape: vec![v.len()],
                        data: v.to_vec(),
                    });
                }
            }
            _ => {}
        }
    }
    out
}

pub fn encode_checkpoint(network: &Network) -> Vec<u8> {
    let entries = checkpoint_entries(network);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.push(e.kind as u8);
        out.extend_from_slice(&(e.layer as u32).to_le_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for d in &e.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let kind = EntryKind::from_tag(r.take(1)?[0])?;
        let layer = r.u32()? as usize;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("checkpoint shape overflows".into()))?;
        let payload = r.take(len.checked_mul(8).ok_or_else(|| Error::Format("checkpoint shape overflows".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push(CheckpointEntry { kind, layer, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(entries)
}

/// Loads checkpointed weights and running statistics into a network of the
/// same architecture.
pub fn apply_checkpoint(network: &mut Network, bytes: &[u8]) -> Result<()> {
    let entries = decode_checkpoint(bytes)?;
    let expected = checkpoint_entries(network);
    if entries.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} entries, network needs {}",
            entries.len(),
            expected.len()
        )));
    }
    for (e, want) in entries.iter().zip(&expected) {
        if e.kind != want.kind || e.layer != want.layer || e.shape != want.shape {
            return Err(Error::Format(format!(
                "checkpoint entry {:?} layer {} shape {:?} does not match network ({:?} layer {} shape {:?})",
                e.kind, e.layer, e.shape, want.kind, want.layer, want.shape
            )));
        }
    }
    for e in &entries {
        match (&mut network.layers_mut()[e.layer], e.kind) {
            (l @ (Layer::FullyConnected(_) | Layer::Conv2d(_)), _) => {
                let w = l.weights_mut().expect("parametric");
                w.data_mut().copy_from_slice(&e.data);
            }
            (Layer::BatchNorm(bn), EntryKind::BnRunningMean) => {
                let var = bn.running_var().to_vec();
                bn.set_running_stats(e.data.clone(), var)?;
            }
            (Layer::BatchNorm(bn), _) => {
                let mean = bn.running_mean().to_vec();
                bn.set_running_stats(mean, e.data.clone())?;
            }
            _ => unreachable!("entries matched against the network"),
        }
    }
    Ok(())
}

pub fn write_checkpoint(path: &Path, network: &Network) -> Result<()> {
    fs::write(path, encode_checkpoint(network))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path, network: &mut Network) -> Result<()> {
    apply_checkpoint(network, &fs::read(path)?)
}
