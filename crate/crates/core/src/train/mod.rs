//! Alternating optimisation of the six networks, schedules and checkpoints.
//!
//! Each step first updates both discriminators on real frames against
//! history-buffered fakes, then updates generators and predictors jointly on
//! the generator side of the objective with the discriminators frozen.

mod adam;
mod checkpoint;
mod config;
mod pool;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_triplets_with, TripletBatch, VideoStream};
use crate::error::{Error, Result};
use crate::losses::{adversarial_loss, total_objective, AdversarialMode, LossReport, Networks, Side, CSV_HEADER};
use crate::nn::{init_params, BoundNet, NetworkParams};
use crate::tensor::{Real, Tape, Tensor};

pub use adam::{adam_update, collect_grads, AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, TrainConfig};
pub use pool::FakePool;

/// One value per network role, in the fixed order
/// `g_x, g_y, d_x, d_y, p_x, p_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet<N> {
    pub g_x: N,
    pub g_y: N,
    pub d_x: N,
    pub d_y: N,
    pub p_x: N,
    pub p_y: N,
}

pub const ROLES: [&str; 6] = ["g_x", "g_y", "d_x", "d_y", "p_x", "p_y"];

impl<N> ModelSet<N> {
    pub fn get(&self, role: &str) -> Option<&N> {
        Some(match role {
            "g_x" => &self.g_x,
            "g_y" => &self.g_y,
            "d_x" => &self.d_x,
            "d_y" => &self.d_y,
            "p_x" => &self.p_x,
            "p_y" => &self.p_y,
            _ => return None,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &N)> {
        ROLES
            .into_iter()
            .zip([&self.g_x, &self.g_y, &self.d_x, &self.d_y, &self.p_x, &self.p_y])
    }

    pub fn map<M>(&self, mut f: impl FnMut(&'static str, &N) -> M) -> ModelSet<M> {
        ModelSet {
            g_x: f("g_x", &self.g_x),
            g_y: f("g_y", &self.g_y),
            d_x: f("d_x", &self.d_x),
            d_y: f("d_y", &self.d_y),
            p_x: f("p_x", &self.p_x),
            p_y: f("p_y", &self.p_y),
        }
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(&'static str) -> std::result::Result<N, E>) -> std::result::Result<Self, E> {
        Ok(ModelSet {
            g_x: f("g_x")?,
            g_y: f("g_y")?,
            d_x: f("d_x")?,
            d_y: f("d_y")?,
            p_x: f("p_x")?,
            p_y: f("p_y")?,
        })
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ModelSet<NetworkParams<f32>>,
    pub adam: ModelSet<AdamState<f32>>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub pool_x: FakePool<f32>,
    pub pool_y: FakePool<f32>,
}

impl TrainState {
    /// Fresh state; network seeds and the training stream are drawn from one
    /// generator seeded with `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (g, d, p) = (config.model.generator(), config.model.discriminator(), config.model.predictor()?);
        let params = ModelSet::try_from_fn(|role| {
            let arch = match &role[..1] {
                "g" => &g,
                "d" => &d,
                _ => &p,
            };
            init_params(arch, rng.gen())
        })?;
        let adam = params.map(|_, p| AdamState::new(p));
        Ok(Self {
            config,
            params,
            adam,
            step: 0,
            rng,
            pool_x: FakePool::new(config.pool_size),
            pool_y: FakePool::new(config.pool_size),
        })
    }

    fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.config.lr_at(self.step),
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.adam_eps,
        }
    }
}

fn numerical(state: &TrainState, what: &str) -> Error {
    Error::Numerical(format!("non-finite {what} at step {}", state.step))
}

/// Discriminator loss (sign convention: minimised) on a real and a fake batch.
pub fn discriminator_loss(
    params: &NetworkParams<f32>,
    reals: &Tensor<f32>,
    fakes: &Tensor<f32>,
    mode: AdversarialMode,
) -> Result<f64> {
    let mut tape = Tape::new();
    let d = params.bind(&mut tape, false);
    let (r, f) = (tape.constant(reals.clone()), tape.constant(fakes.clone()));
    let l = adversarial_loss(&mut tape, &d, Some(r), f, mode, Side::Discriminator)?;
    Ok(tape.scalar(l).map_or(f64::NAN, Real::as_f64))
}

/// Applies `g` to a batch without recording gradients for its parameters.
pub fn translate(params: &NetworkParams<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    use crate::nn::FrameMap;
    let mut tape = Tape::new();
    let g = params.bind(&mut tape, false);
    let v = tape.constant(x.clone());
    let y = g.apply(&mut tape, v)?;
    Ok(tape.value(y).clone())
}

/// Phase 1: one Adam step for each discriminator. Returns the unweighted
/// losses measured before the update.
pub fn update_discriminators(
    state: &mut TrainState,
    reals_x: &Tensor<f32>,
    fakes_x: &Tensor<f32>,
    reals_y: &Tensor<f32>,
    fakes_y: &Tensor<f32>,
) -> Result<(f64, f64)> {
    let cfg = state.config;
    let mut tape = Tape::new();
    let d_x = state.params.d_x.bind(&mut tape, true);
    let d_y = state.params.d_y.bind(&mut tape, true);
    let side = |tape: &mut Tape<f32>, d: &BoundNet, reals: &Tensor<f32>, fakes: &Tensor<f32>, w: f64| {
        let (r, f) = (tape.constant(reals.clone()), tape.constant(fakes.clone()));
        let l = adversarial_loss(tape, d, Some(r), f, cfg.adversarial, Side::Discriminator)?;
        let weighted = tape.scale(l, w as f32)?;
        Ok::<_, Error>((l, weighted))
    };
    let (lx, wx) = side(&mut tape, &d_x, reals_x, fakes_x, cfg.weights.lambda_adv_x)?;
    let (ly, wy) = side(&mut tape, &d_y, reals_y, fakes_y, cfg.weights.lambda_adv_y)?;
    let total = tape.add(wx, wy)?;
    let (vx, vy) = (
        tape.scalar(lx).map_or(f64::NAN, Real::as_f64),
        tape.scalar(ly).map_or(f64::NAN, Real::as_f64),
    );
    if !(vx.is_finite() && vy.is_finite()) {
        return Err(numerical(state, "discriminator loss"));
    }
    tape.backward(total)?;
    let (gx, gy) = (collect_grads(&tape, &d_x), collect_grads(&tape, &d_y));
    let adam = state.adam_config();
    adam_update("d_x", &mut state.params.d_x, &gx, &mut state.adam.d_x, &adam)?;
    adam_update("d_y", &mut state.params.d_y, &gy, &mut state.adam.d_y, &adam)?;
    Ok((vx, vy))
}

/// Phase 2: one joint Adam step for the generators and (when the loss mode
/// uses them) the predictors, discriminators frozen.
pub fn update_generators(state: &mut TrainState, batch_x: &TripletBatch<f32>, batch_y: &TripletBatch<f32>) -> Result<LossReport> {
    let objective = state.config.objective();
    let with_p = objective.mode.uses_recycle();
    let mut tape = Tape::new();
    let p = &state.params;
    let (g_x, g_y) = (p.g_x.bind(&mut tape, true), p.g_y.bind(&mut tape, true));
    let (d_x, d_y) = (p.d_x.bind(&mut tape, false), p.d_y.bind(&mut tape, false));
    let (p_x, p_y) = (p.p_x.bind(&mut tape, with_p), p.p_y.bind(&mut tape, with_p));
    let nets = Networks {
        g_x: &g_x,
        g_y: &g_y,
        d_x: &d_x,
        d_y: &d_y,
        p_x: &p_x,
        p_y: &p_y,
    };
    let (bx, by) = (batch_x.bind(&mut tape), batch_y.bind(&mut tape));
    let terms = total_objective(&mut tape, &nets, &bx, &by, &objective)?;
    let report = terms.report(&tape);
    if !report.is_finite() {
        return Err(numerical(state, "generator objective"));
    }
    tape.backward(terms.total)?;
    let adam = state.adam_config();
    let grads: Vec<_> = [&g_x, &g_y, &p_x, &p_y].iter().map(|n| collect_grads(&tape, n)).collect();
    let s = &mut *state;
    adam_update("g_x", &mut s.params.g_x, &grads[0], &mut s.adam.g_x, &adam)?;
    adam_update("g_y", &mut s.params.g_y, &grads[1], &mut s.adam.g_y, &adam)?;
    if with_p {
        adam_update("p_x", &mut s.params.p_x, &grads[2], &mut s.adam.p_x, &adam)?;
        adam_update("p_y", &mut s.params.p_y, &grads[3], &mut s.adam.p_y, &adam)?;
    }
    Ok(report)
}

/// One full training step on the given triplet batches.
pub fn train_step(state: &mut TrainState, batch_x: &TripletBatch<f32>, batch_y: &TripletBatch<f32>) -> Result<LossReport> {
    let fake_x = translate(&state.params.g_x, &batch_y.curr)?;
    let fake_y = translate(&state.params.g_y, &batch_x.curr)?;
    let pooled_x = state.pool_x.query(&fake_x, &mut state.rng)?;
    let pooled_y = state.pool_y.query(&fake_y, &mut state.rng)?;
    let (dx, dy) = update_discriminators(state, &batch_x.curr, &pooled_x, &batch_y.curr, &pooled_y)?;
    let mut report = update_generators(state, batch_x, batch_y)?;
    report.disc_x = Some(dx);
    report.disc_y = Some(dy);
    state.step += 1;
    Ok(report)
}

/// Where [`fit`] sends its by-products.
#[derive(Default)]
pub struct FitSinks<'a> {
    /// Receives the CSV header (on a fresh run) and one row per step.
    pub csv: Option<&'a mut dyn Write>,
    /// Directory for periodic `ckpt_%06d.rgan` files.
    pub checkpoint_dir: Option<&'a Path>,
    /// Stop after this step count instead of `config.steps`.
    pub stop_at: Option<u64>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.rgan")
}

/// Trains from `state.step` up to `config.steps` (or `sinks.stop_at`),
/// sampling fresh triplets from both streams every step.
pub fn fit(
    state: &mut TrainState,
    x: &VideoStream<f32>,
    y: &VideoStream<f32>,
    mut sinks: FitSinks<'_>,
) -> Result<Vec<LossReport>> {
    state.config.validate()?;
    for s in [x, y] {
        if s.frame_shape() != Some(&[state.config.model.channels, state.config.model.image_size, state.config.model.image_size][..]) {
            return Err(Error::Config(format!(
                "stream {}/{} has frames {:?}, the model expects [{}, {}, {}]",
                s.domain,
                s.stream_id,
                s.frame_shape(),
                state.config.model.channels,
                state.config.model.image_size,
                state.config.model.image_size
            )));
        }
    }
    let end = sinks.stop_at.unwrap_or(state.config.steps).min(state.config.steps);
    let io_err = |e| Error::io("loss csv", e);
    if state.step == 0 {
        if let Some(w) = sinks.csv.as_deref_mut() {
            writeln!(w, "{CSV_HEADER}").map_err(io_err)?;
        }
    }
    let mut reports = Vec::new();
    while state.step < end {
        let bs = state.config.batch_size;
        let bx = sample_triplets_with(x, bs, &mut state.rng)?;
        let by = sample_triplets_with(y, bs, &mut state.rng)?;
        let lr = state.config.lr_at(state.step);
        let report = train_step(state, &bx, &by).map_err(|e| match e {
            Error::Numerical(msg) => {
                let last = reports
                    .last()
                    .map_or_else(|| "none".to_string(), |r: &LossReport| r.csv_row(state.step - 1, lr));
                Error::Numerical(format!("{msg}; last finite report: {last}"))
            }
            other => other,
        })?;
        if let Some(w) = sinks.csv.as_deref_mut() {
            writeln!(w, "{}", report.csv_row(state.step - 1, lr)).map_err(io_err)?;
        }
        let interval = state.config.checkpoint_interval;
        if let Some(dir) = sinks.checkpoint_dir {
            if interval > 0 && state.step.is_multiple_of(interval) {
                save_checkpoint(state, &dir.join(checkpoint_name(state.step)))?;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_domains, sample_triplets, SyntheticSceneConfig};
    use crate::losses::{LossMode, LossWeights};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            steps: 6,
            batch_size: 1,
            pool_size: 2,
            decay_start: 3,
            checkpoint_interval: 0,
            model: ModelConfig {
                image_size: 16,
                channels: 3,
                gen_width: 2,
                gen_blocks: 1,
                disc_width: 2,
                disc_layers: 1,
                disc_padding: 0,
                pred_width: 2,
            },
            ..TrainConfig::default()
        }
    }

    fn streams() -> (VideoStream<f32>, VideoStream<f32>) {
        let cfg = SyntheticSceneConfig {
            image_size: 16,
            length: 12,
            ..SyntheticSceneConfig::default()
        };
        let d = generate_synthetic_domains(&cfg, 1, 2).unwrap();
        (d.x, d.y)
    }

    #[test]
    fn step_counter_and_report() {
        let (x, y) = streams();
        let mut s = TrainState::new(tiny_config()).unwrap();
        let (bx, by) = (sample_triplets(&x, 1, 0).unwrap(), sample_triplets(&y, 1, 1).unwrap());
        let r = train_step(&mut s, &bx, &by).unwrap();
        assert_eq!(s.step, 1);
        assert!(r.disc_x.is_some() && r.recycle_x.is_some() && r.cycle_x.is_none());
        assert!((r.total - r.weighted_total(&s.config.weights)).abs() < 1e-4 * r.total.abs().max(1.0));
        train_step(&mut s, &bx, &by).unwrap();
        assert_eq!(s.step, 2);
    }

    #[test]
    fn degenerate_weights_leave_parameters_unchanged() {
        let (x, y) = streams();
        let cfg = TrainConfig {
            weights: LossWeights::zero(),
            mode: LossMode::Combined,
            ..tiny_config()
        };
        let mut s = TrainState::new(cfg).unwrap();
        let before = s.params.clone();
        fit(&mut s, &x, &y, FitSinks::default()).unwrap();
        assert_eq!(s.params, before);
    }

    #[test]
    fn cycle_mode_leaves_predictors_alone() {
        let (x, y) = streams();
        let cfg = TrainConfig {
            mode: LossMode::Cycle,
            ..tiny_config()
        };
        let mut s = TrainState::new(cfg).unwrap();
        let before = s.params.clone();
        let reports = fit(&mut s, &x, &y, FitSinks::default()).unwrap();
        assert!(reports.iter().all(|r| r.recycle_x.is_none() && r.cycle_y.is_some()));
        assert_eq!(s.params.p_x, before.p_x);
        assert_eq!(s.params.p_y, before.p_y);
        assert_ne!(s.params.g_x, before.g_x);
    }

    #[test]
    fn phases_touch_only_their_networks() {
        let (x, y) = streams();
        let mut s = TrainState::new(tiny_config()).unwrap();
        let before = s.params.clone();
        let bx = sample_triplets(&x, 1, 3).unwrap();
        let by = sample_triplets(&y, 1, 4).unwrap();
        let fx = translate(&s.params.g_x, &by.curr).unwrap();
        let fy = translate(&s.params.g_y, &bx.curr).unwrap();
        update_discriminators(&mut s, &bx.curr, &fx, &by.curr, &fy).unwrap();
        for role in ["g_x", "g_y", "p_x", "p_y"] {
            assert_eq!(s.params.get(role), before.get(role), "{role}");
        }
        assert_ne!(s.params.d_x, before.d_x);
        let mid = s.params.clone();
        update_generators(&mut s, &bx, &by).unwrap();
        assert_eq!(s.params.d_x, mid.d_x);
        assert_eq!(s.params.d_y, mid.d_y);
        for role in ["g_x", "g_y", "p_x", "p_y"] {
            assert_ne!(s.params.get(role), mid.get(role), "{role}");
        }
    }

    #[test]
    fn fit_writes_one_row_per_step_and_is_deterministic() {
        let (x, y) = streams();
        let run = || {
            let mut s = TrainState::new(tiny_config()).unwrap();
            let mut csv = Vec::new();
            fit(
                &mut s,
                &x,
                &y,
                FitSinks {
                    csv: Some(&mut csv),
                    ..FitSinks::default()
                },
            )
            .unwrap();
            (s, String::from_utf8(csv).unwrap())
        };
        let (a, csv_a) = run();
        let (b, csv_b) = run();
        assert_eq!(csv_a, csv_b);
        assert_eq!(a, b);
        assert_eq!(csv_a.lines().count(), 1 + 6);
        assert_eq!(csv_a.lines().next().unwrap(), CSV_HEADER);
    }

    #[test]
    fn zero_steps_keep_the_initialisation() {
        let (x, y) = streams();
        let cfg = TrainConfig {
            steps: 0,
            decay_start: 0,
            ..tiny_config()
        };
        let mut s = TrainState::new(cfg).unwrap();
        let init = s.clone();
        assert!(fit(&mut s, &x, &y, FitSinks::default()).unwrap().is_empty());
        assert_eq!(s, init);
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let (x, y) = streams();
        let cfg = TrainConfig {
            model: ModelConfig {
                image_size: 32,
                ..tiny_config().model
            },
            ..tiny_config()
        };
        let mut s = TrainState::new(cfg).unwrap();
        assert!(fit(&mut s, &x, &y, FitSinks::default()).is_err());
    }
}
