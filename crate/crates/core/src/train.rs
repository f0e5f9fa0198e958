//! Rollout training of the graph dynamics model: recurrent multi-step
//! prediction loss with edge-length and rigidity regularizers, Adam, and
//! best-validation checkpointing.
//!
//! Gradients come from the rollout tape in `graph`; this module computes the
//! loss-side gradients w.r.t. predicted positions in closed form and hands
//! them to the tape. Regularizers compare each predicted frame against the
//! previous frame of the same rollout, so their gradients touch two frames.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::geom::{fit_rigid_transform, Vec3};
use crate::graph::{
    build_graph, rollout_traced, save_params, ControlGraph, DynGrads, DynModelParams, EdgeKind,
    HistorySource,
};
use crate::synth::Dataset;
use crate::{Error, Result};

/// How prediction error aggregates over vertices and coordinates. The horizon
/// dimension is always summed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over vertices and coordinates; keeps the regularizer weights
    /// comparable across object sizes.
    #[default]
    Mean,
    /// Raw sum of squared errors.
    Sum,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Rollout horizon per training window.
    pub tau: usize,
    /// Motion-history window of the model.
    pub k: usize,
    /// Message-passing steps.
    pub p: usize,
    pub hidden_dim: usize,
    /// Farthest-point sampling radius for control vertices, meters.
    pub d_v: f64,
    /// Edge connectivity radius, meters.
    pub d_e: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Optimizer steps per epoch; windows are drawn uniformly with
    /// replacement, so an epoch is a fixed compute budget rather than a sweep.
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub lambda_edge: f64,
    pub lambda_rigid: f64,
    /// Enables the rigidity term; meant for objects that are rigid or close
    /// to rigid (the deformable classes leave it off).
    pub rigid: bool,
    pub reduction: Reduction,
    /// Fraction of episodes held out for validation (at least one episode
    /// whenever there are two or more).
    pub val_fraction: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            tau: 5,
            k: 3,
            p: 3,
            hidden_dim: 64,
            d_v: 0.05,
            d_e: 0.10,
            lr: 1e-4,
            batch_size: 4,
            batches_per_epoch: 64,
            epochs: 20,
            lambda_edge: 0.1,
            lambda_rigid: 1.0,
            rigid: false,
            reduction: Reduction::Mean,
            val_fraction: 0.2,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::invalid("train config: tau must be >= 1"));
        }
        if self.k == 0 || self.p == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid("train config: k, p, hidden_dim must all be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("train config: lr must be > 0"));
        }
        if self.lambda_edge < 0.0 || self.lambda_rigid < 0.0 {
            return Err(Error::invalid("train config: lambda weights must be >= 0"));
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.epochs == 0 {
            return Err(Error::invalid(
                "train config: batch_size, batches_per_epoch, epochs must all be >= 1",
            ));
        }
        if !(self.d_v > 0.0) || !(self.d_e > 0.0) {
            return Err(Error::invalid("train config: d_v and d_e must be > 0"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("train config: val_fraction must be in (0, 1)"));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_edge: self.lambda_edge,
            lambda_rigid: self.lambda_rigid,
            rigid: self.rigid,
            reduction: self.reduction,
        }
    }
}

/// Sum over the horizon of the per-frame squared prediction error.
pub fn loss_pred(pred: &[Vec<Vec3>], truth: &[Vec<Vec3>], reduction: Reduction) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "loss_pred: {} predicted frames vs {} truth frames",
            pred.len(),
            truth.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() || p.is_empty() {
            return Err(Error::shape("loss_pred: frame vertex counts disagree or are empty"));
        }
        let sq: f64 = p.iter().zip(t).map(|(a, b)| a.dist_sq(*b)).sum();
        total += match reduction {
            Reduction::Mean => sq / (3.0 * p.len() as f64),
            Reduction::Sum => sq,
        };
    }
    Ok(total)
}

/// Mean over the given vertex pairs of the squared change in distance between
/// two frames. Pairs are undirected; passing both directions would simply
/// double-count.
pub fn loss_edge(pred: &[Vec3], prev: &[Vec3], pairs: &[(usize, usize)]) -> Result<f64> {
    if pred.len() != prev.len() {
        return Err(Error::shape("loss_edge: frame vertex counts disagree"));
    }
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &(a, b) in pairs {
        if a >= pred.len() || b >= pred.len() {
            return Err(Error::shape("loss_edge: pair index out of range"));
        }
        let d = pred[a].dist(pred[b]) - prev[a].dist(prev[b]);
        total += d * d;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean squared residual between `pred` and the best-fit rigid transform of
/// `prev`. Degenerate fits (too few or collinear points) contribute zero.
pub fn loss_rigid(pred: &[Vec3], prev: &[Vec3]) -> Result<f64> {
    if pred.len() != prev.len() {
        return Err(Error::shape("loss_rigid: frame vertex counts disagree"));
    }
    let fit = fit_rigid_transform(prev, pred)?;
    if fit.degenerate {
        log::warn!("loss_rigid: degenerate rigid fit ({} points), contributing 0", prev.len());
        return Ok(0.0);
    }
    let n = pred.len() as f64;
    Ok(prev
        .iter()
        .zip(pred)
        .map(|(s, d)| fit.transform.apply(*s).dist_sq(*d))
        .sum::<f64>()
        / n)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub pred: f64,
    pub edge: f64,
    pub rigid: f64,
}

impl LossBreakdown {
    pub fn total(&self, lambda_edge: f64, lambda_rigid: f64) -> f64 {
        self.pred + lambda_edge * self.edge + lambda_rigid * self.rigid
    }

    pub fn is_finite(&self) -> bool {
        self.pred.is_finite() && self.edge.is_finite() && self.rigid.is_finite()
    }

    fn accumulate(&mut self, o: &LossBreakdown) {
        self.pred += o.pred;
        self.edge += o.edge;
        self.rigid += o.rigid;
    }

    fn scale(&mut self, s: f64) {
        self.pred *= s;
        self.edge *= s;
        self.rigid *= s;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_edge: f64,
    pub lambda_rigid: f64,
    pub rigid: bool,
    pub reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            lambda_edge: 0.1,
            lambda_rigid: 1.0,
            rigid: false,
            reduction: Reduction::Mean,
        }
    }
}

/// Rollout loss for one training window. `truth[h]` holds the ground-truth
/// object vertex positions for output frame h (one entry per object vertex).
pub fn full_loss(
    params: &DynModelParams,
    graph0: &ControlGraph,
    actions: &[Vec3],
    truth: &[Vec<Vec3>],
    w: LossWeights,
) -> Result<LossBreakdown> {
    window_loss(params, graph0, actions, truth, w, false).map(|(b, _)| b)
}

/// As `full_loss`, also returning the gradient of the weighted total
/// (pred + λ_edge·edge + λ_rigid·rigid) w.r.t. every model parameter. The
/// breakdown itself stays unweighted.
pub fn full_loss_and_grad(
    params: &DynModelParams,
    graph0: &ControlGraph,
    actions: &[Vec3],
    truth: &[Vec<Vec3>],
    w: LossWeights,
) -> Result<(LossBreakdown, DynGrads)> {
    window_loss(params, graph0, actions, truth, w, true)
        .map(|(b, g)| (b, g.expect("gradients were requested")))
}

fn window_loss(
    params: &DynModelParams,
    graph0: &ControlGraph,
    actions: &[Vec3],
    truth: &[Vec<Vec3>],
    w: LossWeights,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<DynGrads>)> {
    let horizon = actions.len();
    let n_obj = graph0.num_object_vertices();
    if truth.len() != horizon {
        return Err(Error::shape(format!(
            "window loss: {} truth frames for {} actions",
            truth.len(),
            horizon
        )));
    }
    for t in truth {
        if t.len() != n_obj {
            return Err(Error::shape("window loss: truth frame has wrong vertex count"));
        }
    }

    let (outputs, tape) = rollout_traced(params, graph0, actions)?;
    // frames[0] is the observed start, frames[h+1] the prediction at step h.
    let mut frames: Vec<Vec<Vec3>> = Vec::with_capacity(horizon + 1);
    frames.push(graph0.object_positions().to_vec());
    for out in &outputs {
        frames.push(out[..n_obj].to_vec());
    }

    let mut breakdown = LossBreakdown::default();
    let mut grad_outputs = vec![vec![Vec3::ZERO; n_obj]; horizon];

    for h in 0..horizon {
        let pred = &frames[h + 1];
        let sq: f64 = pred.iter().zip(&truth[h]).map(|(a, b)| a.dist_sq(*b)).sum();
        // Same division as loss_pred so the two agree bitwise.
        let (term, gscale) = match w.reduction {
            Reduction::Mean => (sq / (3.0 * n_obj as f64), 2.0 / (3.0 * n_obj as f64)),
            Reduction::Sum => (sq, 2.0),
        };
        breakdown.pred += term;
        if with_grad {
            for (g, (a, b)) in grad_outputs[h].iter_mut().zip(pred.iter().zip(&truth[h])) {
                *g += (*a - *b) * gscale;
            }
        }
    }

    for h in 0..horizon {
        // Pairs the model saw when making step h: edges built from frame h
        // positions. Effector links are skipped; that distance is supposed
        // to change as the effector approaches.
        let pairs: Vec<(usize, usize)> = tape
            .step_edges(h)
            .iter()
            .filter(|e| e.kind == EdgeKind::ObjObj && e.from < e.to)
            .map(|e| (e.from, e.to))
            .collect();
        if w.lambda_edge > 0.0 && !pairs.is_empty() {
            let (prev, pred) = (&frames[h], &frames[h + 1]);
            let inv = 1.0 / pairs.len() as f64;
            let mut le = 0.0;
            for &(a, b) in &pairs {
                let lp = pred[a].dist(pred[b]);
                let lq = prev[a].dist(prev[b]);
                let d = lp - lq;
                le += d * d;
                if with_grad && lp > 1e-12 && lq > 1e-12 {
                    let coef = 2.0 * d * inv * w.lambda_edge;
                    let u = (pred[b] - pred[a]) * (1.0 / lp);
                    grad_outputs[h][b] += u * coef;
                    grad_outputs[h][a] -= u * coef;
                    if h >= 1 {
                        let v = (prev[b] - prev[a]) * (1.0 / lq);
                        grad_outputs[h - 1][b] -= v * coef;
                        grad_outputs[h - 1][a] += v * coef;
                    }
                }
            }
            breakdown.edge += le * inv;
        }
        if w.rigid && w.lambda_rigid > 0.0 {
            let (prev, pred) = (&frames[h], &frames[h + 1]);
            let fit = fit_rigid_transform(prev, pred)?;
            if fit.degenerate {
                log::warn!("rigidity term: degenerate fit at rollout step {h}, contributing 0");
            } else {
                let n = n_obj as f64;
                let mut lr = 0.0;
                let rt = fit.transform.rotation.transpose();
                for i in 0..n_obj {
                    let r = fit.transform.apply(prev[i]) - pred[i];
                    lr += r.norm_sq();
                    if with_grad {
                        // Envelope theorem: (R, t) minimizes the residual, so
                        // its dependence on the endpoints drops out.
                        let coef = 2.0 / n * w.lambda_rigid;
                        grad_outputs[h][i] -= r * coef;
                        if h >= 1 {
                            grad_outputs[h - 1][i] += rt.mul_vec(r) * coef;
                        }
                    }
                }
                breakdown.rigid += lr / n;
            }
        }
    }

    let grads = if with_grad { Some(tape.backward(params, &grad_outputs)?) } else { None };
    Ok((breakdown, grads))
}

/// Adam with bias correction over a flat parameter vector.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub train_total: f64,
    pub val: LossBreakdown,
    pub val_total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub wall_clock_s: f64,
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_total: f64,
}

impl TrainReport {
    /// One key=value line per epoch, plus a trailing summary block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&format!(
                "epoch={} train_pred={:.6e} train_edge={:.6e} train_rigid={:.6e} train_total={:.6e} \
                 val_pred={:.6e} val_edge={:.6e} val_rigid={:.6e} val_total={:.6e}\n",
                e.epoch,
                e.train.pred,
                e.train.edge,
                e.train.rigid,
                e.train_total,
                e.val.pred,
                e.val.edge,
                e.val.rigid,
                e.val_total,
            ));
        }
        s.push_str(&format!(
            "best_epoch={} best_val_total={:.6e} wall_clock_s={:.1} checkpoint={}\n",
            self.best_epoch,
            self.best_val_total,
            self.wall_clock_s,
            self.checkpoint.display()
        ));
        s
    }
}

/// One training window: an episode index and the start frame t. The rollout
/// covers transitions t -> t+1 .. t+tau with real history from t-k .. t.
#[derive(Clone, Copy, Debug)]
struct Window {
    episode: usize,
    t: usize,
}

fn window_loss_for(
    dataset: &Dataset,
    cfg: &TrainConfig,
    params: &DynModelParams,
    win: Window,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<DynGrads>)> {
    let seq = &dataset.episodes[win.episode].sequence;
    let t = win.t;
    let graph0 = build_graph(
        &seq.positions[t],
        seq.actions[t],
        cfg.d_v,
        cfg.d_e,
        cfg.k,
        seq.table_height,
        HistorySource {
            object: &seq.positions[t - cfg.k..t],
            effector: &seq.actions[t - cfg.k..t],
        },
    )?;
    let actions = &seq.actions[t + 1..t + 1 + cfg.tau];
    let truth: Vec<Vec<Vec3>> = (0..cfg.tau)
        .map(|h| {
            graph0
                .source_indices
                .iter()
                .map(|&src| seq.positions[t + 1 + h][src])
                .collect()
        })
        .collect();
    window_loss(params, &graph0, actions, &truth, cfg.weights(), with_grad)
}

/// Trains a model on the dataset, checkpointing whenever validation improves,
/// and returns the best parameters with the per-epoch report.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    checkpoint: &Path,
) -> Result<(DynModelParams, TrainReport)> {
    train_from(dataset, cfg, None, checkpoint)
}

/// As [`train`], but starting from `init` when given (resuming a checkpoint).
/// Optimizer moments start fresh either way; only the weights carry over.
pub fn train_from(
    dataset: &Dataset,
    cfg: &TrainConfig,
    init: Option<DynModelParams>,
    checkpoint: &Path,
) -> Result<(DynModelParams, TrainReport)> {
    cfg.validate()?;
    if let Some(p) = &init {
        if p.k != cfg.k || p.p != cfg.p || p.hidden_dim != cfg.hidden_dim {
            return Err(Error::shape(format!(
                "resume checkpoint was trained with k={} p={} hidden_dim={}, \
                 config asks for k={} p={} hidden_dim={}",
                p.k, p.p, p.hidden_dim, cfg.k, cfg.p, cfg.hidden_dim
            )));
        }
    }
    let start = Instant::now();

    let usable: Vec<usize> = dataset
        .episodes
        .iter()
        .enumerate()
        .filter(|(_, ep)| ep.sequence.positions.len() > cfg.tau + cfg.k)
        .map(|(i, _)| i)
        .collect();
    if usable.is_empty() {
        return Err(Error::invalid(format!(
            "training needs at least one episode longer than tau + k = {} frames",
            cfg.tau + cfg.k
        )));
    }

    // Episode-level split; a single-episode dataset reuses it for validation
    // (there is no disjoint choice), which is only fit for smoke tests.
    let (train_eps, val_eps): (Vec<usize>, Vec<usize>) = if usable.len() == 1 {
        log::warn!("single usable episode: validation reuses the training episode");
        (usable.clone(), usable.clone())
    } else {
        let n_val = ((usable.len() as f64 * cfg.val_fraction).round() as usize)
            .clamp(1, usable.len() - 1);
        let split = usable.len() - n_val;
        (usable[..split].to_vec(), usable[split..].to_vec())
    };

    let windows_of = |eps: &[usize]| -> Vec<Window> {
        let mut w = Vec::new();
        for &episode in eps {
            let frames = dataset.episodes[episode].sequence.positions.len();
            for t in cfg.k..=frames - 1 - cfg.tau {
                w.push(Window { episode, t });
            }
        }
        w
    };
    let train_windows = windows_of(&train_eps);
    let val_windows_all = windows_of(&val_eps);
    // Validation cost is capped by striding; the subset is deterministic.
    let stride = val_windows_all.len().div_ceil(256).max(1);
    let val_windows: Vec<Window> = val_windows_all.iter().step_by(stride).copied().collect();

    let mut params = match init {
        Some(p) => p,
        None => {
            let mut p = DynModelParams::init(cfg.k, cfg.p, cfg.hidden_dim, cfg.rng_seed)?;
            // Fresh runs start as the exact zero-motion model (residual-style
            // zero output layer). A random decoder predicts meter-scale
            // garbage that the closed-loop windows amplify; the optimizer
            // then spends most of its budget un-learning that transient, and
            // the leftover bias shows up as drift on quiet scenes.
            let last = p.decoder.layers.last_mut().expect("decoder has layers");
            for w in last.w.iter_mut() {
                *w = 0.0;
            }
            p
        }
    };
    let mut flat = params.flatten();
    let mut adam = Adam::new(cfg.lr, flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        wall_clock_s: 0.0,
        checkpoint: checkpoint.to_path_buf(),
        best_epoch: 0,
        best_val_total: f64::INFINITY,
    };
    let mut best_params = params.clone();

    for epoch in 0..cfg.epochs {
        let mut train_sum = LossBreakdown::default();
        let mut train_items = 0usize;
        for batch in 0..cfg.batches_per_epoch {
            let picks: Vec<Window> = (0..cfg.batch_size)
                .map(|_| train_windows[rng.random_range(0..train_windows.len())])
                .collect();
            // Items evaluate independently; the fold below accumulates in
            // index order so results do not depend on scheduling.
            let results: Vec<Result<(LossBreakdown, Option<DynGrads>)>> = picks
                .par_iter()
                .map(|&w| window_loss_for(dataset, cfg, &params, w, true))
                .collect();
            let mut grad_acc = vec![0.0; flat.len()];
            for (item, res) in results.into_iter().enumerate() {
                let (breakdown, grads) = res?;
                if !breakdown.is_finite() {
                    return Err(Error::numeric(format!(
                        "training diverged: non-finite loss at epoch {epoch}, batch {batch} \
                         (episode {}, start frame {}); lower the learning rate",
                        picks[item].episode, picks[item].t
                    )));
                }
                train_sum.accumulate(&breakdown);
                train_items += 1;
                for (a, g) in grad_acc.iter_mut().zip(grads.expect("grads requested").flatten()) {
                    *a += g;
                }
            }
            let inv = 1.0 / cfg.batch_size as f64;
            for g in grad_acc.iter_mut() {
                *g *= inv;
            }
            adam.step(&mut flat, &grad_acc);
            params.assign_flat(&flat)?;
        }
        train_sum.scale(1.0 / train_items as f64);

        let val_results: Vec<Result<LossBreakdown>> = val_windows
            .par_iter()
            .map(|&w| window_loss_for(dataset, cfg, &params, w, false).map(|(b, _)| b))
            .collect();
        let mut val_sum = LossBreakdown::default();
        for res in val_results {
            let b = res?;
            if !b.is_finite() {
                return Err(Error::numeric(format!(
                    "training diverged: non-finite validation loss at epoch {epoch}"
                )));
            }
            val_sum.accumulate(&b);
        }
        val_sum.scale(1.0 / val_windows.len() as f64);

        let stats = EpochStats {
            epoch,
            train: train_sum,
            train_total: train_sum.total(cfg.lambda_edge, cfg.lambda_rigid),
            val: val_sum,
            val_total: val_sum.total(cfg.lambda_edge, cfg.lambda_rigid),
        };
        log::info!(
            "epoch {}: train total {:.3e} (pred {:.3e}), val total {:.3e} (pred {:.3e})",
            epoch,
            stats.train_total,
            stats.train.pred,
            stats.val_total,
            stats.val.pred
        );
        if stats.val_total < report.best_val_total {
            report.best_val_total = stats.val_total;
            report.best_epoch = epoch;
            best_params = params.clone();
            save_params(&best_params, checkpoint)?;
        }
        report.epochs.push(stats);
    }

    report.wall_clock_s = start.elapsed().as_secs_f64();
    Ok((best_params, report))
}
