//! Training orchestration: linear schedules, the stage-1 self-distilling
//! loop, pseudo-label export, stage-2 retraining on those labels, and the
//! checkpoint and run-log formats.
//!
//! Every random decision in a run comes from one ChaCha8 stream seeded by
//! the config: model initialization first, then per epoch the shuffle, and
//! per step the reference side followed by one flip draw per batch sample.
//! Two runs with the same config and dataset are bitwise identical.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{read_image, write_image, Sample};
use crate::error::{Error, Result};
use crate::gridcore::{Gradients, Grid};
use crate::losses::{iou_loss, total_loss, LossReport, LossWeights, ScalePair};
use crate::model::{forward_pass, ModelParams, SIDE_MULTIPLE};
use crate::textfmt::fmt17;
use crate::texture::Modality;

/// Everything a training run needs besides the dataset itself.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub main_side: usize,
    pub ref_sides: Vec<usize>,
    pub lr: f64,
    pub momentum: f64,
    /// Appearance contrast sharpness for the texture boundary loss.
    pub alpha: f64,
    pub weights: LossWeights,
    /// Texture window side, odd and >= 3.
    pub window: usize,
    pub seed: u64,
    pub modalities: Vec<Modality>,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch: 8,
            main_side: 64,
            ref_sides: vec![48, 96],
            lr: 0.1,
            momentum: 0.9,
            alpha: 200.0,
            weights: LossWeights::default(),
            window: 5,
            seed: 0,
            modalities: Vec::new(),
            stage2_epochs: 10,
            stage2_lr: 0.005,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs", "must be >= 1"));
        }
        if self.stage2_epochs == 0 {
            return Err(Error::param("stage2_epochs", "must be >= 1"));
        }
        if self.batch == 0 {
            return Err(Error::param("batch", "must be >= 1"));
        }
        for (name, side) in std::iter::once(("main_side", self.main_side))
            .chain(self.ref_sides.iter().map(|&s| ("ref_sides", s)))
        {
            if side == 0 || side % SIDE_MULTIPLE != 0 {
                return Err(Error::param(
                    name,
                    format!("side {side} must be a positive multiple of {SIDE_MULTIPLE}"),
                ));
            }
        }
        if self.ref_sides.is_empty() {
            return Err(Error::param("ref_sides", "need at least one reference side"));
        }
        for (name, v) in [("lr", self.lr), ("stage2_lr", self.stage2_lr)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(name, "must be finite and >= 0"));
            }
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::param("momentum", "must be in [0, 1)"));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::param("alpha", "must be finite and positive"));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::param("window", "must be odd and >= 3"));
        }
        self.weights.validate()
    }
}

// Schedules ------------------------------------------------------------------

fn check_schedule(step: usize, total_steps: usize) -> Result<()> {
    if total_steps == 0 {
        return Err(Error::param("total_steps", "must be >= 1"));
    }
    if step >= total_steps {
        return Err(Error::param(
            "step",
            format!("step {step} outside a schedule of {total_steps}"),
        ));
    }
    Ok(())
}

/// Curriculum position, linear from 0 at the first step to 1 at the last.
/// A one-step schedule sits at the end state.
pub fn rho_at(step: usize, total_steps: usize) -> Result<f64> {
    check_schedule(step, total_steps)?;
    if total_steps == 1 {
        return Ok(1.0);
    }
    Ok(step as f64 / (total_steps - 1) as f64)
}

/// Linearly decayed learning rate: `lr0 * (1 - step / total_steps)`.
pub fn lr_at(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    check_schedule(step, total_steps)?;
    Ok(lr0 * (1.0 - step as f64 / total_steps as f64))
}

// Run log --------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub rho: f64,
    pub lr: f64,
    pub report: LossReport,
}

#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    /// Mean total loss per epoch, in epoch order.
    pub epoch_mean_total: Vec<f64>,
    pub wall_seconds: f64,
}

/// One header line, then one comma-separated record per step with every
/// float at 17 significant digits.
pub fn write_runlog(log: &RunLog, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "step,rho,lr,csd_main,csd_ref,btm_main,btm_ref,ms,total")?;
    for s in &log.steps {
        let r = &s.report;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.step,
            fmt17(s.rho),
            fmt17(s.lr),
            fmt17(r.csd_main),
            fmt17(r.csd_ref),
            fmt17(r.btm_main),
            fmt17(r.btm_ref),
            fmt17(r.ms),
            fmt17(r.total),
        )?;
    }
    Ok(())
}

// Checkpoints ----------------------------------------------------------------

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SALC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Little-endian binary layout: magic, version, then per parameter in
/// canonical order a length-prefixed name, rank, dims, and raw f64 data;
/// a trailing step counter closes the file.
pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, grid) in params.grids() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&3u32.to_le_bytes());
        let (c, h, w) = grid.shape();
        for d in [c, h, w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in grid.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&params.step().to_le_bytes());
    out
}

struct ByteCursor<'a> {
    what: &'a str,
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            what: self.what.to_string(),
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let slice = self
            .data
            .get(self.pos..self.pos + n)
            .ok_or_else(|| self.err(format!("truncated while reading {what}")))?;
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], what: &str) -> Result<ModelParams> {
    let mut c = ByteCursor { what, data: bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        c.pos = 0;
        return Err(c.err("bad magic, expected SALC"));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(c.err(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = ModelParams::names().len();
    let mut parts = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| c.err("parameter name is not utf-8"))?
            .to_string();
        let rank = c.u32("rank")?;
        if rank != 3 {
            return Err(c.err(format!("rank {rank}, expected 3")));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = c.u32("dim")? as usize;
        }
        let len = dims.iter().product::<usize>();
        let raw = c.take(len * 8, "parameter data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let grid = Grid::new(dims[0], dims[1], dims[2], data).map_err(|e| c.err(e.to_string()))?;
        parts.push((name, grid));
    }
    let step = c.u64("step counter")?;
    if c.pos != bytes.len() {
        return Err(c.err(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    ModelParams::from_parts(parts, step)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

/// Content-derived checkpoint identity used in label provenance. FNV-1a
/// over the encoded bytes, so the id survives re-serialization but changes
/// with any parameter.
pub fn checkpoint_id(params: &ModelParams) -> String {
    let mut h = 0xcbf29ce484222325u64;
    for &b in &encode_checkpoint(params) {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}-step{}", params.step())
}

// Optimizer ------------------------------------------------------------------

struct Sgd {
    momentum: f64,
    velocity: Vec<(String, Grid)>,
}

impl Sgd {
    fn new(params: &ModelParams, momentum: f64) -> Sgd {
        Sgd {
            momentum,
            velocity: params
                .grids()
                .iter()
                .map(|(n, g)| {
                    let (c, h, w) = g.shape();
                    (n.clone(), Grid::zeros(c, h, w))
                })
                .collect(),
        }
    }

    /// `v <- momentum * v + g; p <- p - lr * v` for every parameter.
    fn apply(&mut self, params: &mut ModelParams, grads: &[(String, Grid)], lr: f64) -> Result<()> {
        let mu = self.momentum;
        for ((name, v), (gname, g)) in self.velocity.iter_mut().zip(grads) {
            debug_assert_eq!(name, gname);
            for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = mu * *vv + gv;
            }
            params.add_scaled(name, v, -lr)?;
        }
        Ok(())
    }
}

fn zero_like(params: &ModelParams) -> Vec<(String, Grid)> {
    params
        .grids()
        .iter()
        .map(|(n, g)| {
            let (c, h, w) = g.shape();
            (n.clone(), Grid::zeros(c, h, w))
        })
        .collect()
}

fn accumulate(acc: &mut [(String, Grid)], grads: &Gradients) {
    for (name, a) in acc {
        if let Some(g) = grads.get(name) {
            for (av, &gv) in a.data_mut().iter_mut().zip(g.data()) {
                *av += gv;
            }
        }
    }
}

fn scale(acc: &mut [(String, Grid)], factor: f64) {
    for (_, a) in acc {
        for v in a.data_mut() {
            *v *= factor;
        }
    }
}

fn check_sample_sides(dataset: &[Sample], side: usize) -> Result<()> {
    for s in dataset {
        let (h, w) = (s.stack.height(), s.stack.width());
        if h != side || w != side {
            return Err(Error::Sample {
                id: s.id.clone(),
                reason: format!("expected a {side}x{side} sample, got {h}x{w}"),
            });
        }
    }
    Ok(())
}

// Stage 1 --------------------------------------------------------------------

/// Stage-1 training without labels. See [`train_stage1_probed`].
pub fn train_stage1(config: &TrainConfig, dataset: &[Sample]) -> Result<(ModelParams, RunLog)> {
    train_stage1_probed(config, dataset, |_, _, _, _| ())
}

/// Stage-1 training with a probe that receives every per-sample prediction
/// pair as `(step, rho, main, reference)`. The probe exists so tests can
/// recompute logged losses from the raw predictions; the plain entry point
/// passes a no-op.
///
/// Each step draws a batch from the epoch's shuffled order, flips each
/// sample with probability one half, runs the model at the main side and at
/// one reference side drawn from the configured set, and applies one
/// batch-averaged momentum SGD update at the step's decayed learning rate.
pub fn train_stage1_probed(
    config: &TrainConfig,
    dataset: &[Sample],
    mut probe: impl FnMut(u64, f64, &Grid, &Grid),
) -> Result<(ModelParams, RunLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::param("dataset", "stage-1 training needs samples"));
    }
    check_sample_sides(dataset, config.main_side)?;

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(&mut rng);
    let mut sgd = Sgd::new(&params, config.momentum);
    let steps_per_epoch = dataset.len().div_ceil(config.batch);
    let total_steps = config.epochs * steps_per_epoch;
    let mut log = RunLog {
        steps: Vec::with_capacity(total_steps),
        ..RunLog::default()
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(config.batch) {
            let rho = rho_at(step, total_steps)?;
            let lr = lr_at(step, total_steps, config.lr)?;
            let ref_side = config.ref_sides[rng.gen_range(0..config.ref_sides.len())];
            let flips: Vec<bool> = batch.iter().map(|_| rng.gen_bool(0.5)).collect();

            let mut acc = zero_like(&params);
            let mut sums = [0.0f64; 5];
            for (&i, &flip) in batch.iter().zip(&flips) {
                let sample = &dataset[i];
                let stack = if flip { sample.stack.flipped() } else { sample.stack.clone() };
                let stack_ref = stack.resized(ref_side, ref_side)?;
                let mut fp_main = forward_pass(&params, &stack.rgb())?;
                let mut fp_ref = forward_pass(&params, &stack_ref.rgb())?;
                let (report, d_main, d_ref) = {
                    let pair = ScalePair {
                        pred_main: fp_main.output(),
                        pred_ref: fp_ref.output(),
                        stack_main: &stack,
                        stack_ref: &stack_ref,
                    };
                    total_loss(&pair, &config.weights, rho, config.window, config.alpha)?
                };
                if !report.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "stage-1 loss diverged at step {step} on sample {}: {report:?}",
                        sample.id
                    )));
                }
                probe(step as u64, rho, fp_main.output(), fp_ref.output());
                accumulate(&mut acc, &fp_main.backward(&d_main)?);
                accumulate(&mut acc, &fp_ref.backward(&d_ref)?);
                for (s, v) in sums.iter_mut().zip([
                    report.csd_main,
                    report.csd_ref,
                    report.btm_main,
                    report.btm_ref,
                    report.ms,
                ]) {
                    *s += v;
                }
            }
            let n = batch.len() as f64;
            scale(&mut acc, 1.0 / n);
            sgd.apply(&mut params, &acc, lr)?;

            let [csd_main, csd_ref, btm_main, btm_ref, ms] = sums.map(|s| s / n);
            let total = config.weights.lambda_c * (csd_main + csd_ref)
                + config.weights.lambda_b * (btm_main + btm_ref)
                + config.weights.lambda_m * ms;
            epoch_total += total;
            log.steps.push(StepRecord {
                step: step as u64,
                rho,
                lr,
                report: LossReport {
                    csd_main,
                    csd_ref,
                    btm_main,
                    btm_ref,
                    ms,
                    total,
                    rho,
                },
            });
            step += 1;
        }
        log.epoch_mean_total.push(epoch_total / steps_per_epoch as f64);
    }
    params.set_step(total_steps as u64);
    log.wall_seconds = start.elapsed().as_secs_f64();
    Ok((params, log))
}

// Pseudo-labels --------------------------------------------------------------

/// A binary label distilled from a stage-1 model, with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub id: String,
    pub grid: Grid,
    pub checkpoint_id: String,
}

fn binarize(g: &Grid) -> Grid {
    g.map(|v| if v > 0.5 { 1.0 } else { 0.0 })
        .expect("binarization outputs are finite")
}

/// One pass of 3x3 binary median smoothing. Windows clip at the border;
/// a tied window keeps the center value.
fn binary_median3(g: &Grid) -> Grid {
    let (_, h, w) = g.shape();
    Grid::from_fn(1, h, w, |_, y, x| {
        let mut ones = 0u32;
        let mut total = 0u32;
        for ny in y.saturating_sub(1)..(y + 2).min(h) {
            for nx in x.saturating_sub(1)..(x + 2).min(w) {
                total += 1;
                if g.at(0, ny, nx) == 1.0 {
                    ones += 1;
                }
            }
        }
        if 2 * ones > total {
            1.0
        } else if 2 * ones < total {
            0.0
        } else {
            g.at(0, y, x)
        }
    })
    .expect("median outputs are binary")
}

/// Runs the model over the dataset and distills each prediction into a
/// binary label: threshold at 0.5, then one 3x3 median pass.
pub fn generate_pseudo_labels(params: &ModelParams, dataset: &[Sample]) -> Result<Vec<PseudoLabel>> {
    if dataset.is_empty() {
        return Err(Error::param("dataset", "pseudo-labeling needs samples"));
    }
    let source = checkpoint_id(params);
    let mut labels = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let fp = forward_pass(params, &sample.stack.rgb()).map_err(|e| Error::Sample {
            id: sample.id.clone(),
            reason: e.to_string(),
        })?;
        labels.push(PseudoLabel {
            id: sample.id.clone(),
            grid: binary_median3(&binarize(fp.output())),
            checkpoint_id: source.clone(),
        });
    }
    Ok(labels)
}

/// Writes each label as `<id>_label.pgm` plus a `provenance.txt` of
/// `id<TAB>file<TAB>checkpoint` lines; returns the provenance path.
pub fn write_pseudo_labels(labels: &[PseudoLabel], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut provenance = String::new();
    for label in labels {
        let file = format!("{}_label.pgm", label.id);
        write_image(&label.grid, &dir.join(&file))?;
        provenance.push_str(&format!("{}\t{}\t{}\n", label.id, file, label.checkpoint_id));
    }
    let path = dir.join("provenance.txt");
    fs::write(&path, provenance).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_pseudo_labels(dir: &Path) -> Result<Vec<PseudoLabel>> {
    let path = dir.join("provenance.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let what = path.display().to_string();
    let mut labels = Vec::new();
    let mut offset = 0;
    for line in text.lines() {
        let line_offset = offset;
        offset += line.len() + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Format {
                what: what.clone(),
                offset: line_offset,
                reason: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let grid = read_image(&dir.join(fields[1]))?;
        if let Some(i) = grid.data().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Sample {
                id: fields[0].to_string(),
                reason: format!("label value {} at flat index {i} is not binary", grid.data()[i]),
            });
        }
        labels.push(PseudoLabel {
            id: fields[0].to_string(),
            grid,
            checkpoint_id: fields[2].to_string(),
        });
    }
    Ok(labels)
}

// Stage 2 --------------------------------------------------------------------

/// Seed salt for the retrained model so it draws a stream distinct from the
/// stage-1 model under the same config seed. ASCII "stage2".
const STAGE2_SEED_SALT: u64 = 0x0073_7461_6765_3200;

/// Retrains a fresh model against pseudo-labels with the overlap loss at a
/// single scale. Flips apply identically to image and label. Returns the
/// trained model and the mean loss per epoch.
pub fn train_stage2(
    config: &TrainConfig,
    dataset: &[Sample],
    labels: &[PseudoLabel],
) -> Result<(ModelParams, Vec<f64>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::param("dataset", "stage-2 training needs samples"));
    }
    check_sample_sides(dataset, config.main_side)?;
    let by_id: HashMap<&str, &PseudoLabel> = labels.iter().map(|l| (l.id.as_str(), l)).collect();
    let mut paired: Vec<(&Sample, &Grid)> = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let label = by_id.get(sample.id.as_str()).ok_or_else(|| Error::Sample {
            id: sample.id.clone(),
            reason: "no pseudo-label for this sample".into(),
        })?;
        if label.grid.shape() != (1, config.main_side, config.main_side) {
            return Err(Error::Sample {
                id: sample.id.clone(),
                reason: format!(
                    "label shape {} does not match the {side}x{side} training side",
                    label.grid.shape_str(),
                    side = config.main_side
                ),
            });
        }
        paired.push((sample, &label.grid));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ STAGE2_SEED_SALT);
    let mut params = ModelParams::init(&mut rng);
    let mut sgd = Sgd::new(&params, config.momentum);
    let steps_per_epoch = dataset.len().div_ceil(config.batch);
    let total_steps = config.stage2_epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.stage2_epochs);
    let mut step = 0usize;
    for _ in 0..config.stage2_epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(config.batch) {
            let lr = lr_at(step, total_steps, config.stage2_lr)?;
            let flips: Vec<bool> = batch.iter().map(|_| rng.gen_bool(0.5)).collect();
            let mut acc = zero_like(&params);
            let mut loss_sum = 0.0;
            for (&i, &flip) in batch.iter().zip(&flips) {
                let (sample, label) = paired[i];
                let (rgb, label) = if flip {
                    (sample.stack.flipped().rgb(), label.flip_horizontal())
                } else {
                    (sample.stack.rgb(), label.clone())
                };
                let mut fp = forward_pass(&params, &rgb)?;
                let (loss, d) = iou_loss(fp.output(), &label)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "stage-2 loss diverged at step {step} on sample {}",
                        sample.id
                    )));
                }
                accumulate(&mut acc, &fp.backward(&d)?);
                loss_sum += loss;
            }
            let n = batch.len() as f64;
            scale(&mut acc, 1.0 / n);
            sgd.apply(&mut params, &acc, lr)?;
            epoch_sum += loss_sum / n;
            step += 1;
        }
        epoch_losses.push(epoch_sum / steps_per_epoch as f64);
    }
    params.set_step(total_steps as u64);
    Ok((params, epoch_losses))
}
