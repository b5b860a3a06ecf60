//! Dataset loading, the training loop, evaluation, prediction export and
//! spike-activity inspection behind the command-line tool.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::events::{
    align_ground_truth, binocular_concat, format_grid, read_events, stack, DepthFrame, Event, Geometry, StackMode,
    StackedTensor,
};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::model::{Block, ForwardOutput, Model, SpikeStats};
use crate::objective::{loss_values, mde, subsample_frame, total_loss, LossConfig, SsiSign};
use crate::synth::{Manifest, WINDOW_US};
use crate::tensor::{ops, ParamStore, Tape, Tensor, Var};

/// Builds the network input for one window: left camera stacked alone, or
/// left and right concatenated when `right` is given.
pub fn stack_window(
    left: &[Event],
    right: Option<&[Event]>,
    window_start: u64,
    window_len: u64,
    steps: usize,
    mode: StackMode,
    geometry: Geometry,
) -> Result<StackedTensor> {
    fn slice(evs: &[Event], start: u64, len: u64) -> &[Event] {
        let a = evs.partition_point(|e| e.t < start);
        let b = evs.partition_point(|e| e.t < start + len);
        &evs[a..b.max(a)]
    }
    let l = stack(mode, slice(left, window_start, window_len), window_start, window_len, steps, geometry)?;
    match right {
        Some(r) => binocular_concat(&l, &stack(mode, slice(r, window_start, window_len), window_start, window_len, steps, geometry)?),
        None => Ok(l),
    }
}

/// A dataset directory loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub left: Vec<Event>,
    pub right: Option<Vec<Event>>,
    /// Ground truth aligned to each manifest window.
    pub frames: Vec<DepthFrame>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = Manifest::read(path)?;
        let left = read_events(&manifest.path(&manifest.events_left))?;
        let right = match &manifest.events_right {
            Some(r) => Some(read_events(&manifest.path(r))?),
            None => None,
        };
        let geometry = manifest.geometry;
        for e in left.iter().chain(right.iter().flatten()) {
            if e.x as usize >= geometry.width || e.y as usize >= geometry.height {
                return Err(Error::Bounds {
                    x: e.x,
                    y: e.y,
                    width: geometry.width,
                    height: geometry.height,
                });
            }
        }
        let mut all = Vec::with_capacity(manifest.windows.len());
        for w in &manifest.windows {
            let f = DepthFrame::read(&manifest.path(&w.gt))?;
            if f.geometry() != geometry {
                return Err(Error::Validation(format!(
                    "{}: ground truth is {}x{}, dataset is {}x{}",
                    w.gt.display(),
                    f.geometry().height,
                    f.geometry().width,
                    geometry.height,
                    geometry.width
                )));
            }
            all.push(f);
        }
        let frames = manifest
            .windows
            .iter()
            .map(|w| align_ground_truth(&all, w.start_us, w.len_us).cloned())
            .collect::<Result<_>>()?;
        Ok(Dataset {
            manifest,
            left,
            right,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn geometry(&self) -> Geometry {
        self.manifest.geometry
    }

    pub fn in_channels(&self, use_right: bool) -> usize {
        if use_right && self.right.is_some() {
            4
        } else {
            2
        }
    }

    pub fn input(&self, window: usize, steps: usize, mode: StackMode, in_channels: usize) -> Result<StackedTensor> {
        let w = &self.manifest.windows[window];
        let right = match (in_channels, &self.right) {
            (4, Some(r)) => Some(r.as_slice()),
            (4, None) => {
                return Err(Error::Validation(
                    "model expects binocular input but the dataset has no right-camera events".into(),
                ))
            }
            _ => None,
        };
        stack_window(&self.left, right, w.start_us, w.len_us, steps, mode, self.geometry())
    }

    /// All window inputs, stacked once; clamped to {0, 1} with `binarize`.
    pub fn inputs(&self, steps: usize, mode: StackMode, binarize: bool, in_channels: usize) -> Result<Vec<StackedTensor>> {
        (0..self.len())
            .map(|i| {
                let x = self.input(i, steps, mode, in_channels)?;
                Ok(if binarize { x.binarized() } else { x })
            })
            .collect()
    }

    /// Training and validation window indices; the last `val_fraction` of
    /// windows are held out.
    pub fn split(&self, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let n_val = ((n as f64) * val_fraction).floor() as usize;
        let n_val = n_val.min(n.saturating_sub(1));
        ((0..n - n_val).collect(), (n - n_val..n).collect())
    }
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub windows: usize,
    pub mde_cm: f64,
    pub loss_ssi: f64,
    pub loss_reg: f64,
    pub loss_total: f64,
    pub stats: SpikeStats,
    pub dense_macs: u64,
    /// Predicted depth per evaluated window.
    pub predictions: Vec<Tensor>,
}

impl EvalReport {
    /// The metrics report: one `key=value` line per metric.
    pub fn metrics_text(&self) -> String {
        let s = &self.stats;
        format!(
            "windows={}\nmde_cm={}\nloss_ssi={}\nloss_reg={}\nloss_total={}\n\
             firing_rate_encoder={}\nfiring_rate_residual={}\nfiring_rate_decoder={}\nfiring_rate_total={}\n",
            self.windows,
            self.mde_cm,
            self.loss_ssi,
            self.loss_reg,
            self.loss_total,
            s.rate(Block::Encoder),
            s.rate(Block::Residual),
            s.rate(Block::Decoder),
            s.total_rate(),
        )
    }

    /// Firing rates, per-layer detail, and AC versus dense-MAC counts.
    pub fn inspect_text(&self) -> String {
        let s = &self.stats;
        let mut out = String::new();
        for (name, b) in [
            ("encoder", Block::Encoder),
            ("residual", Block::Residual),
            ("decoder", Block::Decoder),
        ] {
            let (spikes, steps) = s.block_totals(b);
            out.push_str(&format!(
                "firing_rate_{name}={}\nspikes_{name}={spikes}\nneuron_steps_{name}={steps}\n",
                s.rate(b)
            ));
        }
        out.push_str(&format!("firing_rate_total={}\n", s.total_rate()));
        for l in &s.layers {
            out.push_str(&format!(
                "layer.{}.firing_rate={}\n",
                l.name,
                if l.neuron_steps == 0 { 0.0 } else { l.spikes / l.neuron_steps as f64 }
            ));
        }
        let ac = s.ac_ops();
        out.push_str(&format!("ac_ops={ac}\ndense_macs={}\n", self.dense_macs));
        let ratio = if self.dense_macs == 0 { 0.0 } else { ac / self.dense_macs as f64 };
        out.push_str(&format!("ac_to_mac_ratio={ratio}\nwindows={}\n", self.windows));
        out
    }
}

/// Forward pass over `windows` with fresh membranes per window; metrics are
/// means over windows, spike counts and MACs are totals.
pub fn evaluate(
    model: &mut Model,
    store: &ParamStore,
    inputs: &[StackedTensor],
    frames: &[DepthFrame],
    windows: &[usize],
    loss: &LossConfig,
) -> Result<EvalReport> {
    let mut r = EvalReport::default();
    for &i in windows {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let out = model.forward(&mut tape, &vars, &inputs[i])?;
        let pred = tape.value(out.depth).clone();
        let l = loss_values(&pred, &frames[i], loss)?;
        r.mde_cm += mde(&pred, &frames[i])?;
        r.loss_ssi += l.ssi;
        r.loss_reg += l.reg;
        r.loss_total += l.total;
        r.stats.merge(&out.stats);
        r.dense_macs += out.dense_macs;
        r.predictions.push(pred);
        r.windows += 1;
    }
    if r.windows > 0 {
        let n = r.windows as f64;
        r.mde_cm /= n;
        r.loss_ssi /= n;
        r.loss_reg /= n;
        r.loss_total /= n;
    }
    Ok(r)
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

/// Append-only log, mirrored to stdout unless quiet.
pub struct Logger {
    file: fs::File,
    path: PathBuf,
    echo: bool,
}

impl Logger {
    pub fn open(path: &Path, echo: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Logger {
            file,
            path: path.to_path_buf(),
            echo,
        })
    }

    pub fn line(&mut self, line: &str) -> Result<()> {
        if self.echo {
            println!("{line}");
        }
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub epochs: usize,
    /// MDE over the training windows with the final parameters.
    pub final_train_mde_cm: f64,
    /// MDE over every window with the final parameters.
    pub final_mde_cm: f64,
    pub best_val_mde_cm: f64,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

pub const LAST_CHECKPOINT: &str = "last.spkc";
pub const BEST_CHECKPOINT: &str = "best.spkc";
pub const TRAIN_LOG: &str = "train.log";

fn stack_mode_code(m: StackMode) -> f64 {
    match m {
        StackMode::Cumulative => 0.0,
        StackMode::Repeat => 1.0,
    }
}

fn train_scalars(cfg: &RunConfig, epoch: usize, step: usize, lr: f64, best: f64) -> Vec<(String, f64)> {
    vec![
        ("epoch".into(), epoch as f64),
        ("step".into(), step as f64),
        ("lr".into(), lr),
        ("best_val_mde_cm".into(), best),
        ("stack_mode".into(), stack_mode_code(cfg.stack_mode)),
        ("binarize".into(), f64::from(u8::from(cfg.binarize))),
        ("lambda_reg".into(), cfg.lambda_reg),
        ("ssi_plus".into(), f64::from(u8::from(cfg.ssi_sign == SsiSign::Plus))),
    ]
}

/// Input and loss settings a checkpoint was trained with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointSettings {
    pub stack_mode: StackMode,
    pub binarize: bool,
    pub loss: LossConfig,
}

pub fn checkpoint_settings(ck: &Checkpoint) -> CheckpointSettings {
    let stack_mode = if ck.train_value("stack_mode") == Some(1.0) {
        StackMode::Repeat
    } else {
        StackMode::Cumulative
    };
    let d = LossConfig::default();
    let loss = LossConfig {
        lambda_reg: ck.train_value("lambda_reg").unwrap_or(d.lambda_reg),
        ssi_sign: match ck.train_value("ssi_plus") {
            Some(v) if v == 1.0 => SsiSign::Plus,
            Some(_) => SsiSign::Minus,
            None => d.ssi_sign,
        },
    };
    CheckpointSettings {
        stack_mode,
        binarize: ck.train_value("binarize") == Some(1.0),
        loss,
    }
}

/// Loss of one window: the final prediction, plus every coarser decoder
/// membrane against subsampled ground truth when `multiscale` is set.
fn window_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    gt: &DepthFrame,
    loss: &LossConfig,
    multiscale: bool,
) -> Result<Var> {
    let mut terms = vec![(out.depth, gt.clone())];
    if multiscale {
        let l = out.activations.membranes.len();
        for (i, &m) in out.activations.membranes[..l - 1].iter().enumerate() {
            let factor = 1usize << (l - 1 - i);
            let sub = subsample_frame(gt, factor);
            let g = sub.geometry();
            let cropped = ops::crop2d(tape, m, g.height, g.width)?;
            terms.push((cropped, sub));
        }
    }
    let pairs: Vec<(Var, &DepthFrame)> = terms.iter().map(|(v, f)| (*v, f)).collect();
    total_loss(tape, &pairs, loss)
}

/// Runs the training loop described by `cfg` on `data`, writing the log and
/// checkpoints into `out_dir`. With `resume`, parameters, optimizer moments
/// and the epoch counter continue from that checkpoint.
pub fn train(cfg: &RunConfig, data: &Dataset, out_dir: &Path, resume: Option<&Path>, echo: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let in_channels = data.in_channels(cfg.use_right_camera);
    let model_cfg = cfg.model(in_channels, data.geometry());
    let loss_cfg = cfg.loss();

    let mut store = ParamStore::new();
    let mut model = Model::new(model_cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let (mut start_epoch, mut step, mut best) = (0usize, 0usize, f64::INFINITY);
    if let Some(path) = resume {
        let ck = load_checkpoint(path)?;
        if ck.config != model_cfg {
            return Err(Error::Validation(format!(
                "{}: checkpoint architecture differs from the run configuration",
                path.display()
            )));
        }
        store = ck.store.clone();
        start_epoch = ck.train_value("epoch").unwrap_or(0.0) as usize;
        step = ck.train_value("step").unwrap_or(0.0) as usize;
        best = ck.train_value("best_val_mde_cm").unwrap_or(f64::INFINITY);
    }

    let inputs = data.inputs(cfg.time_steps, cfg.stack_mode, cfg.binarize, in_channels)?;
    let (train_idx, val_idx) = data.split(cfg.val_fraction);
    let all_idx: Vec<usize> = (0..data.len()).collect();
    let mut log = Logger::open(&out_dir.join(TRAIN_LOG), echo)?;
    log.line(&format!(
        "start epochs={} train_windows={} val_windows={} params={} seed={}",
        cfg.epochs,
        train_idx.len(),
        val_idx.len(),
        store.scalar_count(),
        cfg.seed
    ))?;

    let last_path = out_dir.join(LAST_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let capped = |s: usize| cfg.max_steps > 0 && s >= cfg.max_steps;
    let mut epoch = start_epoch;
    while epoch < cfg.epochs && !capped(step) {
        let lr = cfg.learning_rate_at(epoch);
        let adam = cfg.adam(lr);
        let mut order = train_idx.clone();
        if cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch as u64 + 1);
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(cfg.windows_per_step) {
            if capped(step) {
                break;
            }
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let mut losses = Vec::with_capacity(chunk.len());
            let mut step_mde = 0.0;
            let mut stats = SpikeStats::default();
            for &w in chunk {
                let out = model.forward(&mut tape, &vars, &inputs[w])?;
                step_mde += mde(tape.value(out.depth), &data.frames[w])?;
                stats.merge(&out.stats);
                losses.push(window_loss(&mut tape, &out, &data.frames[w], &loss_cfg, cfg.multiscale_loss)?);
            }
            let mut loss = losses[0];
            for &l in &losses[1..] {
                loss = ops::add(&mut tape, loss, l)?;
            }
            if chunk.len() > 1 {
                loss = ops::scale(&mut tape, loss, 1.0 / chunk.len() as f64);
            }
            let value = tape.value(loss).item();
            step += 1;
            if !value.is_finite() {
                log.line(&format!("step={step} epoch={epoch} loss={value} error=non-finite loss"))?;
                return Err(Error::Numerical(format!(
                    "loss became {value} at step {step}; last good checkpoint kept at {}",
                    last_path.display()
                )));
            }
            tape.backward(loss)?;
            store.accumulate_grads(&tape, &vars);
            store.adam_step(&adam)?;
            store.zero_grad();
            log.line(&format!(
                "step={step} epoch={epoch} lr={lr} loss={value} mde_cm={} rate_encoder={} rate_residual={} rate_decoder={} rate_total={}",
                step_mde / chunk.len() as f64,
                stats.rate(Block::Encoder),
                stats.rate(Block::Residual),
                stats.rate(Block::Decoder),
                stats.total_rate()
            ))?;
        }
        epoch += 1;

        let train_eval = evaluate(&mut model, &store, &inputs, &data.frames, &train_idx, &loss_cfg)?;
        let val_mde = if val_idx.is_empty() {
            train_eval.mde_cm
        } else {
            evaluate(&mut model, &store, &inputs, &data.frames, &val_idx, &loss_cfg)?.mde_cm
        };
        let improved = val_mde < best;
        if improved {
            best = val_mde;
        }
        let scalars = train_scalars(cfg, epoch, step, lr, best);
        save_checkpoint(&last_path, &model_cfg, &store, &scalars)?;
        if improved {
            save_checkpoint(&best_path, &model_cfg, &store, &scalars)?;
        }
        log.line(&format!(
            "epoch={epoch} step={step} lr={lr} train_mde_cm={} val_mde_cm={val_mde} best_val_mde_cm={best}",
            train_eval.mde_cm
        ))?;
    }

    let train_eval = evaluate(&mut model, &store, &inputs, &data.frames, &train_idx, &loss_cfg)?;
    let all_eval = evaluate(&mut model, &store, &inputs, &data.frames, &all_idx, &loss_cfg)?;
    if !last_path.exists() {
        let scalars = train_scalars(cfg, epoch, step, cfg.learning_rate_at(epoch.saturating_sub(1)), best);
        save_checkpoint(&last_path, &model_cfg, &store, &scalars)?;
    }
    log.line(&format!(
        "done epochs={epoch} steps={step} final_train_mde_cm={} final_mde_cm={}",
        train_eval.mde_cm, all_eval.mde_cm
    ))?;
    Ok(TrainOutcome {
        steps: step,
        epochs: epoch,
        final_train_mde_cm: train_eval.mde_cm,
        final_mde_cm: all_eval.mde_cm,
        best_val_mde_cm: best,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
    })
}

/// Loads a checkpoint and evaluates it on every window of `data`.
pub fn evaluate_checkpoint(ck: &Checkpoint, data: &Dataset) -> Result<EvalReport> {
    let cfg = ck.config;
    if cfg.geometry != data.geometry() {
        return Err(Error::Validation(format!(
            "checkpoint geometry {}x{} does not match dataset {}x{}",
            cfg.geometry.height,
            cfg.geometry.width,
            data.geometry().height,
            data.geometry().width
        )));
    }
    let s = checkpoint_settings(ck);
    let inputs = data.inputs(cfg.time_steps, s.stack_mode, s.binarize, cfg.in_channels)?;
    let mut model = ck.model()?;
    let all: Vec<usize> = (0..data.len()).collect();
    evaluate(&mut model, &ck.store, &inputs, &data.frames, &all, &s.loss)
}

/// Predicts one window from raw event streams.
pub fn predict(ck: &Checkpoint, left: &[Event], right: Option<&[Event]>, window_start: u64) -> Result<Tensor> {
    let cfg = ck.config;
    let right = match (cfg.in_channels, right) {
        (4, None) => {
            return Err(Error::Validation(
                "model expects binocular input; pass right-camera events".into(),
            ))
        }
        (4, r) => r,
        _ => None,
    };
    let s = checkpoint_settings(ck);
    let mut input = stack_window(left, right, window_start, WINDOW_US, cfg.time_steps, s.stack_mode, cfg.geometry)?;
    if s.binarize {
        input = input.binarized();
    }
    let mut model = ck.model()?;
    let mut tape = Tape::new();
    let vars = ck.store.bind(&mut tape);
    let out = model.forward(&mut tape, &vars, &input)?;
    Ok(tape.value(out.depth).clone())
}

/// Raw text grid of a prediction, stamped with the window end.
pub fn prediction_text(depth: &Tensor, t: u64) -> String {
    format_grid(depth, None, t)
}

/// 8-bit ASCII PGM (`P2`), `depth / max_depth` clamped to `[0, 1]`.
pub fn prediction_pgm(depth: &Tensor, max_depth: f64) -> String {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let mut s = format!("P2\n{w} {h}\n255\n");
    for y in 0..h {
        let row: Vec<String> = (0..w)
            .map(|x| {
                let v = depth.data()[y * w + x] / max_depth;
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                ((v * 255.0).round() as u8).to_string()
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}
