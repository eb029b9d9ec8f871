//! Optimization loop: AdamW with decoupled weight decay, global-norm
//! clipping, a running EMA of the weights, and deterministic data order.
//!
//! Every step derives its own random stream from `(seed, step)`, so a run
//! resumed from a checkpoint replays exactly the draws of an uninterrupted
//! run. Per-sample gradients may be computed in parallel; they are summed in
//! batch order, which keeps results independent of the thread count.

use std::time::Instant;

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{lr_at_step, TrainConfig};
use crate::error::{Error, Result};
use crate::flow::{draw_flow, interpolate, target_velocity, FlowDraw};
use crate::graph::{Graph, ParamStore, Real};
use crate::mmdit::Model;
use crate::synthdata::{balance_interleave, derive_seed, mask_modalities, EpochItem, TrainingSample};

const ADAM_EPS: f64 = 1e-8;
const EPOCH_STREAM: u64 = 0x0e90_c4;

/// First and second moment accumulators plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Real = f32> {
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.values().iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        OptimState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update with bias correction. Weight decay is multiplied by the
/// learning rate, so `lr = 0` leaves every parameter untouched.
pub fn adamw_update<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Array2<T>],
    opt: &mut OptimState<T>,
    lr: f64,
    cfg: &TrainConfig,
) {
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (tb1, tb2) = (T::c(b1), T::c(b2));
    let (lr_t, wd, eps) = (T::c(lr), T::c(cfg.weight_decay), T::c(ADAM_EPS));
    let (ic1, ic2) = (T::c(1.0 / c1), T::c(1.0 / c2));
    for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut opt.m).zip(&mut opt.v) {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = tb1 * *m + (T::one() - tb1) * g;
            *v = tb2 * *v + (T::one() - tb2) * g * g;
            let upd = (*m * ic1) / ((*v * ic2).sqrt() + eps);
            *p = *p - lr_t * (upd + wd * *p);
        });
    }
}

/// Global L2 norm over all tensors, accumulated in double precision.
pub fn global_norm<T: Real>(grads: &[Array2<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients to `max_norm` when their global norm exceeds it and
/// returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Array2<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::c(max_norm / norm);
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// Running exponential average of the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T: Real = f32> {
    pub shadow: ParamStore<T>,
    pub rel_width: f64,
}

impl<T: Real> EmaState<T> {
    pub fn new(params: &ParamStore<T>, rel_width: f64) -> Self {
        EmaState {
            shadow: params.clone(),
            rel_width,
        }
    }

    /// Per-step decay `1 - 1/W` with window `W = max(1, rel_width * total_steps)`;
    /// an EMA with that decay averages over roughly the last `W` steps.
    pub fn decay(&self, total_steps: u64) -> f64 {
        let w = (self.rel_width * total_steps as f64).max(1.0);
        1.0 - 1.0 / w
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &ParamStore<T>, decay: f64) {
        let (d, e) = (T::c(decay), T::c(1.0 - decay));
        for (s, p) in self.shadow.values_mut().iter_mut().zip(params.values()) {
            Zip::from(s).and(p).for_each(|s, &p| *s = d * *s + e * p);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub optim: OptimState<f32>,
    pub ema: EmaState<f32>,
}

impl TrainState {
    pub fn new(model: Model<f32>, cfg: &TrainConfig) -> Self {
        let optim = OptimState::new(&model.params);
        let ema = EmaState::new(&model.params, cfg.ema_rel_width);
        TrainState { model, optim, ema }
    }

    pub fn step(&self) -> u64 {
        self.optim.step
    }

    /// The model with EMA weights in place of the raw ones.
    pub fn ema_model(&self) -> Model<f32> {
        Model {
            net: self.model.net.clone(),
            params: self.ema.shadow.clone(),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl StepLog {
    pub fn to_json(&self) -> String {
        format!(
            "{{\"step\":{},\"lr\":{:e},\"loss\":{:e},\"grad_norm\":{:e},\"wall_ms\":{:.3}}}",
            self.step, self.lr, self.loss, self.grad_norm, self.wall_ms
        )
    }
}

/// Loss and parameter gradients of one sample at a given flow draw.
pub fn sample_loss_and_grads(
    model: &Model<f32>,
    sample: &TrainingSample,
    draw: &FlowDraw<f32>,
) -> Result<(f64, Vec<Array2<f32>>)> {
    let xt = interpolate(&draw.x0, &sample.x1, draw.t)?;
    let target = target_velocity(&draw.x0, &sample.x1)?;
    let mut g = Graph::new(&model.params);
    let pred = model.net.forward(&mut g, draw.t, &xt.data, &sample.cond)?;
    let tgt = g.constant(target.data);
    let loss = g.mse(pred, tgt);
    let value = g.value(loss)[[0, 0]].f64();
    Ok((value, g.backward(loss)))
}

/// One optimizer step on an already masked batch. Flow draws are taken
/// from `rng` in batch order before any gradient work.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &[TrainingSample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepLog> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let start = Instant::now();
    let step = state.optim.step + 1;
    let draws: Vec<FlowDraw<f32>> = batch.iter().map(|s| draw_flow(&s.x1, rng)).collect();
    let model = &state.model;
    let per_item: Vec<Result<(f64, Vec<Array2<f32>>)>> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(s, d)| sample_loss_and_grads(model, s, d))
        .collect();

    let scale = 1.0 / batch.len() as f32;
    let mut loss = 0.0;
    let mut grads: Option<Vec<Array2<f32>>> = None;
    for item in per_item {
        let (l, g) = item?;
        loss += l / batch.len() as f64;
        match grads.as_mut() {
            None => grads = Some(g.into_iter().map(|t| t * scale).collect()),
            Some(acc) => {
                for (a, t) in acc.iter_mut().zip(&g) {
                    a.scaled_add(scale, t);
                }
            }
        }
    }
    let mut grads = grads.expect("nonempty batch");
    if !loss.is_finite() {
        return Err(Error::non_finite(format!("step {step}: loss")));
    }
    for (id, g) in state.model.params.ids().zip(&grads) {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite(format!(
                "step {step}: gradient of {}",
                state.model.params.name(id)
            )));
        }
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
    let lr = lr_at_step(step, cfg);
    adamw_update(&mut state.model.params, &grads, &mut state.optim, lr, cfg);
    let decay = state.ema.decay(cfg.total_steps);
    state.ema.update(&state.model.params, decay);
    Ok(StepLog {
        step,
        lr,
        loss,
        grad_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Rendered training data: audio-visual(-text) samples and audio-text or
/// audio-only samples, balanced by duplication each epoch.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub av: Vec<TrainingSample>,
    pub at: Vec<TrainingSample>,
}

impl TrainData {
    pub fn epoch_len(&self, dup_factor: usize) -> usize {
        self.av.len() * dup_factor + self.at.len()
    }

    fn item(&self, e: EpochItem) -> &TrainingSample {
        match e {
            EpochItem::Av(i) => &self.av[i],
            EpochItem::At(i) => &self.at[i],
        }
    }

    /// Samples for 1-based `step`, masked with `rng`. Batch slot `b` of step
    /// `s` is position `(s - 1) * batch + b` of the endless epoch sequence.
    pub fn batch_for_step<R: Rng + ?Sized>(&self, step: u64, cfg: &TrainConfig, rng: &mut R) -> Result<Vec<TrainingSample>> {
        let len = self.epoch_len(cfg.dup_factor) as u64;
        if len == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        let first = (step - 1) * cfg.batch_size as u64;
        let mut out = Vec::with_capacity(cfg.batch_size);
        let mut cached: Option<(u64, Vec<EpochItem>)> = None;
        for pos in first..first + cfg.batch_size as u64 {
            let epoch = pos / len;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let seed = derive_seed(cfg.seed ^ EPOCH_STREAM, epoch);
                cached = Some((epoch, balance_interleave(self.av.len(), self.at.len(), cfg.dup_factor, seed)?));
            }
            let order = &cached.as_ref().expect("just filled").1;
            let s = self.item(order[(pos % len) as usize]);
            out.push(mask_modalities(s, cfg.mask_prob, rng));
        }
        Ok(out)
    }
}

/// Random stream for a 1-based step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, step))
}

/// Runs steps until `state` has taken `until_step` updates, calling `log`
/// after each one.
pub fn train_until(
    state: &mut TrainState,
    data: &TrainData,
    cfg: &TrainConfig,
    until_step: u64,
    mut log: impl FnMut(&StepLog),
) -> Result<()> {
    cfg.validate()?;
    while state.step() < until_step {
        let step = state.step() + 1;
        let mut rng = step_rng(cfg.seed, step);
        let batch = data.batch_for_step(step, cfg, &mut rng)?;
        let entry = train_step(state, &batch, cfg, &mut rng)?;
        log(&entry);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synthdata::{generate_scenes, SynthWorld};

    fn micro() -> ModelConfig {
        let mut c = ModelConfig::preset("tiny").unwrap();
        c.hidden_dim = 16;
        c.n_heads = 2;
        c.n_mm_blocks = 1;
        c.n_single_blocks = 1;
        c.visual_feat_dim = 8;
        c.text_feat_dim = 8;
        c.sync_feat_dim = 8;
        c.text_len = 4;
        c.time_freq_dim = 8;
        c
    }

    fn data(cfg: &ModelConfig, n: usize, dur: f64) -> TrainData {
        let world = SynthWorld::new(cfg, 4, 1).unwrap();
        let av = generate_scenes(n, 2, 4, dur)
            .iter()
            .map(|s| world.render_sample(s).unwrap())
            .collect();
        TrainData { av, at: Vec::new() }
    }

    fn tcfg() -> TrainConfig {
        TrainConfig {
            base_lr: 1e-3,
            warmup_steps: 2,
            total_steps: 100,
            batch_size: 2,
            dup_factor: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_gradients_only_apply_decay() {
        let model = Model::<f32>::new(&micro(), 0).unwrap();
        let mut params = model.params.clone();
        let mut opt = OptimState::new(&params);
        let zeros: Vec<Array2<f32>> = params.values().iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..tcfg()
        };
        adamw_update(&mut params, &zeros, &mut opt, 0.01, &cfg);
        for (a, b) in params.values().iter().zip(model.params.values()) {
            Zip::from(a).and(b).for_each(|&a, &b| assert!((a - b * (1.0 - 0.001)).abs() <= 1e-7 * b.abs().max(1.0)));
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let model = Model::<f32>::new(&micro(), 0).unwrap();
        let mut params = model.params.clone();
        let mut opt = OptimState::new(&params);
        let ones: Vec<Array2<f32>> = params.values().iter().map(|p| Array2::ones(p.raw_dim())).collect();
        adamw_update(&mut params, &ones, &mut opt, 0.0, &TrainConfig { weight_decay: 0.5, ..tcfg() });
        assert_eq!(params, model.params);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut ps = ParamStore::<f64>::new();
        ps.add("w", Array2::from_elem((1, 3), 1.0));
        let mut opt = OptimState::new(&ps);
        let g = vec![Array2::from_shape_vec((1, 3), vec![2.0, -0.5, 1e-3]).unwrap()];
        adamw_update(&mut ps, &g, &mut opt, 0.1, &TrainConfig { weight_decay: 0.0, ..tcfg() });
        let w = ps.values()[0].row(0).to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6 && (w[2] - 0.9).abs() < 1e-4);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Array2::from_elem((2, 2), 3.0f32), Array2::from_elem((1, 1), 4.0f32)];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 52f64.sqrt()).abs() < 1e-6);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
        let mut small = vec![Array2::from_elem((1, 1), 0.5f32)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][[0, 0]], 0.5);
    }

    #[test]
    fn ema_extremes_and_convergence() {
        let mut ps = ParamStore::<f64>::new();
        ps.add("w", Array2::from_elem((1, 2), 0.0));
        let mut ema = EmaState::new(&ps, 0.05);
        ps.values_mut()[0].fill(1.0);
        ema.update(&ps, 1.0);
        assert_eq!(ema.shadow.values()[0][[0, 0]], 0.0);
        ema.update(&ps, 0.0);
        assert_eq!(ema.shadow.values()[0][[0, 0]], 1.0);
        ema.shadow.values_mut()[0].fill(0.0);
        for k in 1..=50 {
            ema.update(&ps, 0.9);
            let want = 1.0 - 0.9f64.powi(k);
            assert!((ema.shadow.values()[0][[0, 0]] - want).abs() < 1e-12);
        }
        assert!((ema.decay(1000) - (1.0 - 1.0 / 50.0)).abs() < 1e-15);
    }

    #[test]
    fn batches_follow_the_balanced_epoch_order() {
        let cfg = micro();
        let d = data(&cfg, 3, 2.0);
        let t = TrainConfig {
            batch_size: 2,
            mask_prob: 0.0,
            ..tcfg()
        };
        let mut seen = Vec::new();
        for step in 1..=3 {
            let b = d.batch_for_step(step, &t, &mut step_rng(0, step)).unwrap();
            seen.extend(b.into_iter().map(|s| s.scene.seed));
        }
        let mut sorted = seen.clone();
        sorted.sort();
        let mut want: Vec<u64> = d.av.iter().map(|s| s.scene.seed).chain(d.av.iter().map(|s| s.scene.seed)).collect();
        want.sort();
        assert_eq!(sorted, want);
    }

    #[test]
    fn same_seed_gives_identical_loss_curves() {
        let cfg = micro();
        let d = data(&cfg, 4, 2.0);
        let t = tcfg();
        let run = || {
            let mut st = TrainState::new(Model::new(&cfg, 3).unwrap(), &t);
            let mut losses = Vec::new();
            train_until(&mut st, &d, &t, 6, |l| losses.push(l.loss)).unwrap();
            (losses, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(a.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn non_finite_inputs_abort_with_the_step() {
        let cfg = micro();
        let mut d = data(&cfg, 2, 2.0);
        d.av[0].x1.data[[0, 0]] = f32::NAN;
        d.av[1].x1.data[[0, 0]] = f32::NAN;
        let t = TrainConfig { mask_prob: 0.0, ..tcfg() };
        let mut st = TrainState::new(Model::new(&cfg, 0).unwrap(), &t);
        let err = train_until(&mut st, &d, &t, 1, |_| {}).unwrap_err();
        assert!(err.to_string().contains("step 1"), "{err}");
    }
}
