//! Self-supervised training with on-the-fly defect synthesis, inference,
//! and model evaluation.
//!
//! Every training step draws a healthy skull, synthesizes a *fresh* defect
//! from a seed derived from `(base_seed, epoch, case_index)`, and optimizes
//! Soft Dice between the network output and the full healthy skull. Because
//! defects are regenerated each epoch, the effective training set grows with
//! every pass; defects are recovered from reconstructions afterwards by
//! morphological extraction.
//!
//! The whole train-evaluate pipeline is a pure function of [`TrainConfig`]:
//! rerunning with the same config yields bit-identical checkpoints.

pub mod checkpoint;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::config_hash;
use crate::metrics::{self, MetricsReport, MetricsSummary};
use crate::morphology;
use crate::net::model::{ModelConfig, ResUnet3d};
use crate::net::optim::{adamw_step, lr_at_epoch, OptimConfig, OptimState};
use crate::net::tape::Tape;
use crate::net::tensor::Tensor;
use crate::phantom::{generate_phantom, PhantomConfig};
use crate::seeds::{self, tag};
use crate::synth::{synthesize_case, CasePair, SynthConfig};
use crate::volume::{read_volume, VoxelGrid};

/// Where healthy skulls come from: a directory of volumes, or procedural
/// phantoms when no directory is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dataset_dir: Option<PathBuf>,
    pub phantom_count: usize,
    pub phantom: PhantomConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset_dir: None,
            phantom_count: 200,
            phantom: PhantomConfig::default(),
        }
    }
}

/// Defect-extraction and boundary-metric parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub bdsc_width_mm: f64,
    pub min_component_vox: usize,
    pub open_radius: u32,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            bdsc_width_mm: metrics::DEFAULT_BDSC_WIDTH_MM,
            min_component_vox: morphology::DEFAULT_EXTRACT_MIN_COMPONENT_VOX,
            open_radius: morphology::DEFAULT_EXTRACT_OPEN_RADIUS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub metrics: MetricsConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Binarization threshold applied to network probabilities.
    pub threshold: f64,
    /// Checkpoint every this many epochs (and always at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            metrics: MetricsConfig::default(),
            epochs: 50,
            batch_size: 1,
            seed: 42,
            threshold: 0.5,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold {} must be in (0, 1)",
                self.threshold
            )));
        }
        self.synth.validate()?;
        self.model.validate()?;
        self.optim.validate()?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub struct TrainOutcome {
    pub model: ResUnet3d<f64>,
    pub state: OptimState<f64>,
    pub log: Vec<EpochLog>,
    pub config_hash: String,
}

/// Loads the healthy-skull set named by a data config: every supported
/// volume in `dataset_dir` (sorted by file name), or `phantom_count` seeded
/// phantoms.
pub fn load_skulls(data: &DataConfig, base_seed: u64) -> Result<Vec<VoxelGrid>> {
    if let Some(dir) = &data.dataset_dir {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("mha") | Some("bin")
                )
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::EmptyVolume(format!(
                "no volumes found in {}",
                dir.display()
            )));
        }
        return paths.iter().map(|p| read_volume(p)).collect();
    }
    if data.phantom_count == 0 {
        return Err(Error::InvalidConfig("phantom_count must be >= 1".into()));
    }
    (0..data.phantom_count as u64)
        .map(|i| generate_phantom(&data.phantom, seeds::derive(base_seed, &[tag::PHANTOM_CASE, i])))
        .collect()
}

/// Converts an occupancy grid to a `(1, 1, d, h, w)` probability tensor
/// (z maps to depth, x to width).
pub fn grid_to_tensor(g: &VoxelGrid) -> Tensor<f64> {
    let [nx, ny, nz] = g.dims();
    let data = (0..g.len())
        .map(|i| if g.get_linear(i) { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec([1, 1, nz, ny, nx], data).expect("matching length")
}

fn stack_batch(tensors: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let first = tensors[0].shape();
    let mut data = Vec::with_capacity(tensors.len() * tensors[0].numel());
    for t in tensors {
        if t.shape() != first {
            return Err(Error::ShapeMismatch(format!(
                "cannot batch volumes of shapes {:?} and {:?}",
                first,
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec([tensors.len(), first[1], first[2], first[3], first[4]], data)
}

/// Binarizes a `(1, 1, d, h, w)` probability tensor back onto a grid's
/// geometry: probability >= threshold is foreground.
pub fn tensor_to_grid(t: &Tensor<f64>, like: &VoxelGrid, threshold: f64) -> Result<VoxelGrid> {
    let [nx, ny, nz] = like.dims();
    if t.shape() != [1, 1, nz, ny, nx] {
        return Err(Error::ShapeMismatch(format!(
            "tensor shape {:?} does not match grid dims {:?}",
            t.shape(),
            like.dims()
        )));
    }
    let data = t.data();
    VoxelGrid::from_fn(like.dims(), like.spacing(), like.origin(), |x, y, z| {
        data[(z * ny + y) * nx + x] >= threshold
    })
}

pub const SOFT_DICE_EPS: f64 = 1e-5;

/// Runs the training loop. When `out_dir` is given, periodic checkpoints
/// (`checkpoint_epoch{N}`), a final checkpoint (`checkpoint_final`), and a
/// JSONL training log (`train_log.jsonl`) are written there.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let skulls = load_skulls(&cfg.data, cfg.seed)?;
    if skulls.is_empty() {
        return Err(Error::EmptyVolume("training set".into()));
    }
    let hash = cfg.hash();

    let mut model = ResUnet3d::<f64>::new(&cfg.model, cfg.seed)?;
    let shapes: Vec<[usize; 5]> = model.params().iter().map(|p| p.value.shape()).collect();
    let mut state = OptimState::<f64>::new(cfg.optim.clone(), &shapes)?;

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut log_file = match out_dir {
        Some(dir) => Some(fs::File::create(dir.join("train_log.jsonl"))?),
        None => None,
    };

    let healthy_tensors: Vec<Tensor<f64>> = skulls.iter().map(grid_to_tensor).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = lr_at_epoch(&cfg.optim, epoch);
        let mut loss_sum = 0.0f64;

        let mut index = 0usize;
        while index < skulls.len() {
            let end = (index + cfg.batch_size).min(skulls.len());
            let mut inputs = Vec::with_capacity(end - index);
            let mut targets = Vec::with_capacity(end - index);
            for i in index..end {
                let case_seed =
                    seeds::derive(cfg.seed, &[tag::TRAIN_CASE, epoch as u64, i as u64]);
                let pair = synthesize_case(&skulls[i], &cfg.synth, case_seed)?;
                inputs.push(grid_to_tensor(&pair.defective));
                targets.push(healthy_tensors[i].clone());
            }
            let batch_items = end - index;
            let x = stack_batch(&inputs)?;
            let t = stack_batch(&targets)?;

            let mut tape = Tape::<f64>::new();
            let xid = tape.constant(x);
            let (out, param_nodes) = model.forward_on_tape(&mut tape, xid, true)?;
            let loss_node = tape.soft_dice_loss(out, t, SOFT_DICE_EPS)?;
            let loss = tape.value(loss_node).item()?;
            tape.backward(loss_node)?;

            let grads: Vec<Tensor<f64>> = param_nodes
                .iter()
                .enumerate()
                .map(|(i, &id)| {
                    tape.grad(id).cloned().ok_or_else(|| {
                        Error::NonFiniteGradient(format!(
                            "parameter {} received no gradient (epoch {epoch})",
                            model.params()[i].name
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            let mut values: Vec<Tensor<f64>> =
                model.params().iter().map(|p| p.value.clone()).collect();
            adamw_step(&mut values, &grads, &mut state, lr).map_err(|e| match e {
                Error::NonFiniteGradient(msg) => Error::NonFiniteGradient(format!(
                    "{msg} (epoch {epoch}, case index {index})"
                )),
                other => other,
            })?;
            for (p, v) in model.params_mut().iter_mut().zip(values) {
                p.value = v;
            }

            loss_sum += loss * batch_items as f64;
            index = end;
        }

        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / skulls.len() as f64,
            lr,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&entry)
                .map_err(|e| Error::FormatError(format!("log line: {e}")))?;
            writeln!(f, "{line}")?;
        }
        log.push(entry);

        if let Some(dir) = out_dir {
            let last = epoch + 1 == cfg.epochs;
            let periodic = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
            if periodic && !last {
                checkpoint::save_checkpoint(
                    &dir.join(format!("checkpoint_epoch{}", epoch + 1)),
                    &model,
                    &state,
                    epoch + 1,
                    cfg.seed,
                    &hash,
                )?;
            }
            if last {
                checkpoint::save_checkpoint(
                    &dir.join("checkpoint_final"),
                    &model,
                    &state,
                    epoch + 1,
                    cfg.seed,
                    &hash,
                )?;
            }
        }
    }

    Ok(TrainOutcome {
        model,
        state,
        log,
        config_hash: hash,
    })
}

/// Forward pass + thresholding; the reconstruction inherits the input grid's
/// geometry.
pub fn infer(model: &ResUnet3d<f64>, defective: &VoxelGrid, threshold: f64) -> Result<VoxelGrid> {
    let probs = model.predict(grid_to_tensor(defective))?;
    tensor_to_grid(&probs, defective, threshold)
}

/// A named evaluation case.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub case_id: String,
    pub pair: CasePair,
}

/// Per-case evaluation outcome; failures are recorded, not raised.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Runs inference + defect extraction + metrics on every case.
pub fn evaluate_model(
    model: &ResUnet3d<f64>,
    cases: &[EvalCase],
    mcfg: &MetricsConfig,
    threshold: f64,
) -> (Vec<CaseRecord>, MetricsSummary) {
    let records: Vec<CaseRecord> = cases
        .iter()
        .map(|case| {
            let run = || -> Result<MetricsReport> {
                let recon = infer(model, &case.pair.defective, threshold)?;
                let pred = morphology::extract_defect(
                    &recon,
                    &case.pair.defective,
                    mcfg.min_component_vox,
                    mcfg.open_radius,
                )?;
                let mut report = metrics::evaluate_case(
                    &pred,
                    &case.pair.defect_gt,
                    &case.case_id,
                    case.pair.seed,
                    &case.pair.config_hash,
                )?;
                report.bdsc = metrics::bdsc(&pred, &case.pair.defect_gt, mcfg.bdsc_width_mm)?;
                Ok(report)
            };
            match run() {
                Ok(report) => CaseRecord {
                    case_id: case.case_id.clone(),
                    report: Some(report),
                    error: None,
                },
                Err(e) => CaseRecord {
                    case_id: case.case_id.clone(),
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let reports: Vec<MetricsReport> = records.iter().filter_map(|r| r.report.clone()).collect();
    (records, metrics::summarize(&reports))
}

/// Builds held-out evaluation cases: phantoms (or dataset skulls) indexed
/// from `start_index`, each with a synthesized test defect.
pub fn make_eval_cases(
    data: &DataConfig,
    synth: &SynthConfig,
    base_seed: u64,
    start_index: u64,
    count: usize,
) -> Result<Vec<EvalCase>> {
    let mut cases = Vec::with_capacity(count);
    for k in 0..count as u64 {
        let idx = start_index + k;
        let skull = if data.dataset_dir.is_some() {
            let skulls = load_skulls(data, base_seed)?;
            skulls[(idx as usize) % skulls.len()].clone()
        } else {
            generate_phantom(&data.phantom, seeds::derive(base_seed, &[tag::PHANTOM_CASE, idx]))?
        };
        let case_seed = seeds::derive(base_seed, &[tag::EVAL_CASE, idx]);
        let pair = synthesize_case(&skull, synth, case_seed)?;
        cases.push(EvalCase {
            case_id: format!("case_{idx:04}"),
            pair,
        });
    }
    Ok(cases)
}
