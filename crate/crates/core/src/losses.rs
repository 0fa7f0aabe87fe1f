//! Objective terms: paired regression, adversarial (log and least-squares),
//! cycle, recurrent and recycle losses, and their weighted combination.
//!
//! Sums over time are realised as means over sampled triplets, and every
//! reconstruction distance is a mean over elements.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::{FrameMap, FramePredictor};
use crate::tensor::{self, Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversarialMode {
    /// `log D(real) + log(1 − D(fake))` on sigmoid patch probabilities.
    Log,
    /// Discriminator: `(D(real)−1)² + D(fake)²`; generator: `(D(fake)−1)²`.
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Discriminator,
    Generator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    L2,
    L1,
}

/// Which reconstruction constraints are active: cycle only, recycle +
/// recurrent only, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Cycle,
    Recycle,
    Combined,
}

impl LossMode {
    pub fn uses_cycle(self) -> bool {
        matches!(self, LossMode::Cycle | LossMode::Combined)
    }

    pub fn uses_recycle(self) -> bool {
        matches!(self, LossMode::Recycle | LossMode::Combined)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_rx: f64,
    pub lambda_ry: f64,
    pub lambda_tau_x: f64,
    pub lambda_tau_y: f64,
    pub lambda_cycle_x: f64,
    pub lambda_cycle_y: f64,
    pub lambda_adv_x: f64,
    pub lambda_adv_y: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rx: 10.0,
            lambda_ry: 10.0,
            lambda_tau_x: 10.0,
            lambda_tau_y: 10.0,
            lambda_cycle_x: 10.0,
            lambda_cycle_y: 10.0,
            lambda_adv_x: 1.0,
            lambda_adv_y: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_rx: 0.0,
            lambda_ry: 0.0,
            lambda_tau_x: 0.0,
            lambda_tau_y: 0.0,
            lambda_cycle_x: 0.0,
            lambda_cycle_y: 0.0,
            lambda_adv_x: 0.0,
            lambda_adv_y: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_rx,
            self.lambda_ry,
            self.lambda_tau_x,
            self.lambda_tau_y,
            self.lambda_cycle_x,
            self.lambda_cycle_y,
            self.lambda_adv_x,
            self.lambda_adv_y,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }

    /// The same weights with the X and Y roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            lambda_rx: self.lambda_ry,
            lambda_ry: self.lambda_rx,
            lambda_tau_x: self.lambda_tau_y,
            lambda_tau_y: self.lambda_tau_x,
            lambda_cycle_x: self.lambda_cycle_y,
            lambda_cycle_y: self.lambda_cycle_x,
            lambda_adv_x: self.lambda_adv_y,
            lambda_adv_y: self.lambda_adv_x,
        }
    }
}

/// Unweighted term values of one objective evaluation plus the weighted
/// total as composed on the tape. Inactive terms are `None`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub disc_x: Option<f64>,
    pub disc_y: Option<f64>,
    pub adv_x: f64,
    pub adv_y: f64,
    pub recycle_x: Option<f64>,
    pub recycle_y: Option<f64>,
    pub recurrent_x: Option<f64>,
    pub recurrent_y: Option<f64>,
    pub cycle_x: Option<f64>,
    pub cycle_y: Option<f64>,
    pub total: f64,
}

pub const CSV_HEADER: &str =
    "step,lr,disc_x,disc_y,adv_x,adv_y,recycle_x,recycle_y,recurrent_x,recurrent_y,cycle_x,cycle_y,total";

impl LossReport {
    /// Recomputes the weighted total from the stored parts in f64.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        let opt = |v: Option<f64>, l: f64| v.map_or(0.0, |v| l * v);
        w.lambda_adv_x * self.adv_x
            + w.lambda_adv_y * self.adv_y
            + opt(self.recycle_x, w.lambda_rx)
            + opt(self.recycle_y, w.lambda_ry)
            + opt(self.recurrent_x, w.lambda_tau_x)
            + opt(self.recurrent_y, w.lambda_tau_y)
            + opt(self.cycle_x, w.lambda_cycle_x)
            + opt(self.cycle_y, w.lambda_cycle_y)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.disc_x,
            self.disc_y,
            Some(self.adv_x),
            Some(self.adv_y),
            self.recycle_x,
            self.recycle_y,
            self.recurrent_x,
            self.recurrent_y,
            self.cycle_x,
            self.cycle_y,
            Some(self.total),
        ]
        .iter()
        .flatten()
        .all(|v| v.is_finite())
    }

    /// One CSV line (no trailing newline) matching [`CSV_HEADER`].
    pub fn csv_row(&self, step: u64, lr: f64) -> String {
        let mut s = format!("{step},{lr}");
        for v in [
            self.disc_x,
            self.disc_y,
            Some(self.adv_x),
            Some(self.adv_y),
            self.recycle_x,
            self.recycle_y,
            self.recurrent_x,
            self.recurrent_y,
            self.cycle_x,
            self.cycle_y,
            Some(self.total),
        ] {
            match v {
                Some(v) => write!(s, ",{v}").expect("string write"),
                None => s.push(','),
            }
        }
        s
    }
}

/// Three consecutive frames `(t−1, t, t+1)` of one stream, each `[N,C,H,W]`.
#[derive(Debug, Clone, Copy)]
pub struct TripletVars {
    pub prev: Var,
    pub curr: Var,
    pub next: Var,
}

fn reconstruction<T: Real>(tape: &mut Tape<T>, target: Var, pred: Var, d: Distance) -> tensor::Result<Var> {
    match d {
        Distance::L2 => tape.mse(target, pred),
        Distance::L1 => tape.mae(target, pred),
    }
}

/// Mean squared error between a prediction and its paired target.
pub fn regression_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> tensor::Result<Var> {
    tape.mse(target, pred)
}

/// Adversarial term, returned as a quantity to minimise for `side`.
///
/// For the discriminator side `reals` is required and `fakes` is detached
/// from whatever produced it.
pub fn adversarial_loss<T: Real>(
    tape: &mut Tape<T>,
    disc: &dyn FrameMap<T>,
    reals: Option<Var>,
    fakes: Var,
    mode: AdversarialMode,
    side: Side,
) -> tensor::Result<Var> {
    match side {
        Side::Discriminator => {
            let reals = reals.ok_or(TensorError::InvalidArgument {
                op: "adversarial_loss",
                detail: "discriminator side needs a non-empty batch of real samples".into(),
            })?;
            let fakes = tape.detach(fakes);
            let real_logits = disc.apply(tape, reals)?;
            let fake_logits = disc.apply(tape, fakes)?;
            match mode {
                AdversarialMode::LeastSquares => {
                    let a = squared_distance_to(tape, real_logits, T::one())?;
                    let b = squared_distance_to(tape, fake_logits, T::zero())?;
                    tape.add(a, b)
                }
                AdversarialMode::Log => {
                    let p_real = tape.sigmoid(real_logits)?;
                    let log_real = tape.log(p_real)?;
                    let a = tape.mean(log_real)?;
                    let b = mean_log_one_minus_sigmoid(tape, fake_logits)?;
                    let s = tape.add(a, b)?;
                    tape.scale(s, -T::one())
                }
            }
        }
        Side::Generator => {
            let fake_logits = disc.apply(tape, fakes)?;
            generator_side(tape, fake_logits, mode)
        }
    }
}

fn generator_side<T: Real>(tape: &mut Tape<T>, fake_logits: Var, mode: AdversarialMode) -> tensor::Result<Var> {
    match mode {
        AdversarialMode::LeastSquares => squared_distance_to(tape, fake_logits, T::one()),
        AdversarialMode::Log => mean_log_one_minus_sigmoid(tape, fake_logits),
    }
}

fn squared_distance_to<T: Real>(tape: &mut Tape<T>, x: Var, target: T) -> tensor::Result<Var> {
    let shape = tape.shape(x).to_vec();
    let t = tape.constant(Tensor::full(&shape, target)?);
    tape.mse(x, t)
}

fn mean_log_one_minus_sigmoid<T: Real>(tape: &mut Tape<T>, logits: Var) -> tensor::Result<Var> {
    let p = tape.sigmoid(logits)?;
    let neg = tape.scale(p, -T::one())?;
    let one_minus = tape.add_scalar(neg, T::one())?;
    let l = tape.log(one_minus)?;
    tape.mean(l)
}

/// `‖x − G_X(G_Y(x))‖` averaged over the batch.
pub fn cycle_loss<T: Real>(
    tape: &mut Tape<T>,
    g_x: &dyn FrameMap<T>,
    g_y: &dyn FrameMap<T>,
    batch_x: Var,
    distance: Distance,
) -> tensor::Result<Var> {
    let y = g_y.apply(tape, batch_x)?;
    let back = g_x.apply(tape, y)?;
    reconstruction(tape, batch_x, back, distance)
}

/// `‖x_{t+1} − P(x_{t−1}, x_t)‖`.
pub fn recurrent_loss<T: Real>(
    tape: &mut Tape<T>,
    predictor: &dyn FramePredictor<T>,
    triplets: &TripletVars,
    distance: Distance,
) -> tensor::Result<Var> {
    let pred = predictor.predict(tape, triplets.prev, triplets.curr)?;
    reconstruction(tape, triplets.next, pred, distance)
}

/// `‖x_{t+1} − G_X(P_Y(G_Y(x_{t−1}), G_Y(x_t)))‖`: translate two past frames,
/// predict the next frame in the other domain, translate back.
pub fn recycle_loss<T: Real>(
    tape: &mut Tape<T>,
    g_x: &dyn FrameMap<T>,
    g_y: &dyn FrameMap<T>,
    p_y: &dyn FramePredictor<T>,
    triplets_x: &TripletVars,
    distance: Distance,
) -> tensor::Result<Var> {
    let a = g_y.apply(tape, triplets_x.prev)?;
    let b = g_y.apply(tape, triplets_x.curr)?;
    recycle_from_translated(tape, g_x, p_y, a, b, triplets_x.next, distance)
}

fn recycle_from_translated<T: Real>(
    tape: &mut Tape<T>,
    g_back: &dyn FrameMap<T>,
    p_other: &dyn FramePredictor<T>,
    translated_prev: Var,
    translated_curr: Var,
    next: Var,
    distance: Distance,
) -> tensor::Result<Var> {
    let predicted = p_other.predict(tape, translated_prev, translated_curr)?;
    let back = g_back.apply(tape, predicted)?;
    reconstruction(tape, next, back, distance)
}

/// The six networks of the objective, by role. `g_x: Y → X`, `g_y: X → Y`;
/// `d_x` judges domain X; `p_x` predicts in domain X.
pub struct Networks<'a, T: Real> {
    pub g_x: &'a dyn FrameMap<T>,
    pub g_y: &'a dyn FrameMap<T>,
    pub d_x: &'a dyn FrameMap<T>,
    pub d_y: &'a dyn FrameMap<T>,
    pub p_x: &'a dyn FramePredictor<T>,
    pub p_y: &'a dyn FramePredictor<T>,
}

impl<'a, T: Real> Networks<'a, T> {
    pub fn swapped(&self) -> Networks<'a, T> {
        Networks {
            g_x: self.g_y,
            g_y: self.g_x,
            d_x: self.d_y,
            d_y: self.d_x,
            p_x: self.p_y,
            p_y: self.p_x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub adversarial: AdversarialMode,
    pub mode: LossMode,
    pub distance: Distance,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            adversarial: AdversarialMode::LeastSquares,
            mode: LossMode::Recycle,
            distance: Distance::L2,
        }
    }
}

/// Tape handles of every generator-side term.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub total: Var,
    pub adv_x: Var,
    pub adv_y: Var,
    pub recycle_x: Option<Var>,
    pub recycle_y: Option<Var>,
    pub recurrent_x: Option<Var>,
    pub recurrent_y: Option<Var>,
    pub cycle_x: Option<Var>,
    pub cycle_y: Option<Var>,
    /// `G_X(y_t)`, reusable as discriminator fakes.
    pub fake_x: Var,
    /// `G_Y(x_t)`.
    pub fake_y: Var,
}

impl ObjectiveTerms {
    pub fn report<T: Real>(&self, tape: &Tape<T>) -> LossReport {
        let get = |v: Var| tape.scalar(v).map_or(f64::NAN, Real::as_f64);
        LossReport {
            disc_x: None,
            disc_y: None,
            adv_x: get(self.adv_x),
            adv_y: get(self.adv_y),
            recycle_x: self.recycle_x.map(get),
            recycle_y: self.recycle_y.map(get),
            recurrent_x: self.recurrent_x.map(get),
            recurrent_y: self.recurrent_y.map(get),
            cycle_x: self.cycle_x.map(get),
            cycle_y: self.cycle_y.map(get),
            total: get(self.total),
        }
    }
}

/// Generator/predictor side of the min-max objective:
/// `L_g(G_X,D_X) + L_g(G_Y,D_Y) + λ_rx·L_r(G_X,G_Y,P_Y) + λ_ry·L_r(G_Y,G_X,P_X) + λ_τx·L_τ(P_X) + λ_τy·L_τ(P_Y)`
/// plus, when the mode includes it, the λ-weighted cycle terms of both
/// domains.
///
/// Translations of the current frames are computed once and shared between
/// the adversarial, cycle and recycle terms.
pub fn total_objective<T: Real>(
    tape: &mut Tape<T>,
    nets: &Networks<'_, T>,
    batch_x: &TripletVars,
    batch_y: &TripletVars,
    objective: &Objective,
) -> tensor::Result<ObjectiveTerms> {
    let w = &objective.weights;
    let dist = objective.distance;
    let fake_y = nets.g_y.apply(tape, batch_x.curr)?;
    let fake_x = nets.g_x.apply(tape, batch_y.curr)?;

    let logits_x = nets.d_x.apply(tape, fake_x)?;
    let adv_x = generator_side(tape, logits_x, objective.adversarial)?;
    let logits_y = nets.d_y.apply(tape, fake_y)?;
    let adv_y = generator_side(tape, logits_y, objective.adversarial)?;

    let mut weighted = Vec::new();
    weighted.push((adv_x, w.lambda_adv_x));
    weighted.push((adv_y, w.lambda_adv_y));

    let (mut recycle_x, mut recycle_y, mut recurrent_x, mut recurrent_y) = (None, None, None, None);
    if objective.mode.uses_recycle() {
        let prev_y = nets.g_y.apply(tape, batch_x.prev)?;
        let rx = recycle_from_translated(tape, nets.g_x, nets.p_y, prev_y, fake_y, batch_x.next, dist)?;
        let prev_x = nets.g_x.apply(tape, batch_y.prev)?;
        let ry = recycle_from_translated(tape, nets.g_y, nets.p_x, prev_x, fake_x, batch_y.next, dist)?;
        let tx = recurrent_loss(tape, nets.p_x, batch_x, dist)?;
        let ty = recurrent_loss(tape, nets.p_y, batch_y, dist)?;
        weighted.push((rx, w.lambda_rx));
        weighted.push((ry, w.lambda_ry));
        weighted.push((tx, w.lambda_tau_x));
        weighted.push((ty, w.lambda_tau_y));
        recycle_x = Some(rx);
        recycle_y = Some(ry);
        recurrent_x = Some(tx);
        recurrent_y = Some(ty);
    }

    let (mut cycle_x, mut cycle_y) = (None, None);
    if objective.mode.uses_cycle() {
        let back_x = nets.g_x.apply(tape, fake_y)?;
        let cx = reconstruction(tape, batch_x.curr, back_x, dist)?;
        let back_y = nets.g_y.apply(tape, fake_x)?;
        let cy = reconstruction(tape, batch_y.curr, back_y, dist)?;
        weighted.push((cx, w.lambda_cycle_x));
        weighted.push((cy, w.lambda_cycle_y));
        cycle_x = Some(cx);
        cycle_y = Some(cy);
    }

    let mut total: Option<Var> = None;
    for (term, lambda) in weighted {
        let scaled = tape.scale(term, T::lit(lambda))?;
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    Ok(ObjectiveTerms {
        total: total.expect("at least the adversarial terms"),
        adv_x,
        adv_y,
        recycle_x,
        recycle_y,
        recurrent_x,
        recurrent_y,
        cycle_x,
        cycle_y,
        fake_x,
        fake_y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(tape: &mut Tape<f64>, shape: &[usize], data: &[f64]) -> Var {
        tape.constant(Tensor::new(shape, data.to_vec()).unwrap())
    }

    fn val(tape: &Tape<f64>, v: Var) -> f64 {
        tape.scalar(v).unwrap()
    }

    fn identity(_: &mut Tape<f64>, x: Var) -> tensor::Result<Var> {
        Ok(x)
    }

    fn second(_: &mut Tape<f64>, _: Var, b: Var) -> tensor::Result<Var> {
        Ok(b)
    }

    fn average(tape: &mut Tape<f64>, a: Var, b: Var) -> tensor::Result<Var> {
        let s = tape.add(a, b)?;
        tape.scale(s, 0.5)
    }

    #[test]
    fn regression_examples() {
        let mut tape = Tape::new();
        let p = t(&mut tape, &[2], &[1.0, 0.0]);
        let q = t(&mut tape, &[2], &[2.0, 1.0]);
        let l = regression_loss(&mut tape, p, q).unwrap();
        assert_eq!(val(&tape, l), 1.0);
        let l0 = regression_loss(&mut tape, p, p).unwrap();
        assert_eq!(val(&tape, l0), 0.0);
        // scaling the residual by 3 scales the loss by 9
        let q3 = t(&mut tape, &[2], &[4.0, 3.0]);
        let l3 = regression_loss(&mut tape, p, q3).unwrap();
        assert_eq!(val(&tape, l3), 9.0);
        let bad = t(&mut tape, &[3], &[0.0; 3]);
        assert!(regression_loss(&mut tape, p, bad).is_err());
    }

    #[test]
    fn least_squares_discriminator_optimum_is_zero() {
        // D outputs its input: reals are 1, fakes are 0
        let mut tape = Tape::new();
        let reals = t(&mut tape, &[1, 1, 2, 2], &[1.0; 4]);
        let fakes = t(&mut tape, &[1, 1, 2, 2], &[0.0; 4]);
        let l = adversarial_loss(
            &mut tape,
            &identity,
            Some(reals),
            fakes,
            AdversarialMode::LeastSquares,
            Side::Discriminator,
        )
        .unwrap();
        assert_eq!(val(&tape, l), 0.0);
    }

    #[test]
    fn log_mode_at_even_odds() {
        let mut tape = Tape::new();
        let reals = t(&mut tape, &[1, 1, 1, 1], &[0.0]);
        let fakes = t(&mut tape, &[1, 1, 1, 1], &[0.0]);
        let l = adversarial_loss(&mut tape, &identity, Some(reals), fakes, AdversarialMode::Log, Side::Discriminator)
            .unwrap();
        assert!((val(&tape, l) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((val(&tape, l) - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn least_squares_generator_side() {
        let mut tape = Tape::new();
        let fakes = t(&mut tape, &[1, 1, 2, 2], &[0.5; 4]);
        let l = adversarial_loss(&mut tape, &identity, None, fakes, AdversarialMode::LeastSquares, Side::Generator)
            .unwrap();
        assert_eq!(val(&tape, l), 0.25);
    }

    #[test]
    fn discriminator_side_requires_reals() {
        let mut tape = Tape::new();
        let fakes = t(&mut tape, &[1, 1, 1, 1], &[0.5]);
        assert!(adversarial_loss(
            &mut tape,
            &identity,
            None,
            fakes,
            AdversarialMode::LeastSquares,
            Side::Discriminator
        )
        .is_err());
    }

    #[test]
    fn discriminator_side_detaches_fakes() {
        let mut tape = Tape::new();
        let source = tape.param(Tensor::full(&[1, 1, 1, 1], 0.3).unwrap());
        let fakes = tape.scale(source, 2.0).unwrap();
        let reals = t(&mut tape, &[1, 1, 1, 1], &[0.9]);
        let l = adversarial_loss(
            &mut tape,
            &identity,
            Some(reals),
            fakes,
            AdversarialMode::LeastSquares,
            Side::Discriminator,
        )
        .unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(source).unwrap(), &[0.0]);
    }

    #[test]
    fn cycle_examples() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1, 1, 1, 2], &[0.1, 0.2]);
        let l = cycle_loss(&mut tape, &identity, &identity, x, Distance::L2).unwrap();
        assert_eq!(val(&tape, l), 0.0);
        let double = |tape: &mut Tape<f64>, v: Var| tape.scale(v, 2.0);
        let half = |tape: &mut Tape<f64>, v: Var| tape.scale(v, 0.5);
        let l = cycle_loss(&mut tape, &half, &double, x, Distance::L2).unwrap();
        assert_eq!(val(&tape, l), 0.0);
        let plus_one = |tape: &mut Tape<f64>, v: Var| tape.add_scalar(v, 1.0);
        let l = cycle_loss(&mut tape, &identity, &plus_one, x, Distance::L2).unwrap();
        assert!((val(&tape, l) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn recurrent_examples() {
        let mut tape = Tape::new();
        let c = t(&mut tape, &[1, 1, 1, 2], &[0.4, -0.2]);
        let trip = TripletVars {
            prev: c,
            curr: c,
            next: c,
        };
        let l = recurrent_loss(&mut tape, &second, &trip, Distance::L2).unwrap();
        assert_eq!(val(&tape, l), 0.0);
        let ones = t(&mut tape, &[1, 1, 1, 2], &[1.0, 1.0]);
        let zero = |tape: &mut Tape<f64>, a: Var, _: Var| tape.scale(a, 0.0);
        let trip = TripletVars {
            prev: c,
            curr: c,
            next: ones,
        };
        let l = recurrent_loss(&mut tape, &zero, &trip, Distance::L2).unwrap();
        assert_eq!(val(&tape, l), 1.0);
    }

    #[test]
    fn recycle_examples() {
        let mut tape = Tape::new();
        let f0 = t(&mut tape, &[1, 1, 1, 1], &[0.0]);
        let f2 = t(&mut tape, &[1, 1, 1, 1], &[1.0]);
        let trip = TripletVars {
            prev: f0,
            curr: f0,
            next: f2,
        };
        let l = recycle_loss(&mut tape, &identity, &identity, &average, &trip, Distance::L2).unwrap();
        assert_eq!(val(&tape, l), 1.0);

        let c = t(&mut tape, &[1, 1, 1, 3], &[0.3, 0.1, -0.5]);
        let trip = TripletVars {
            prev: c,
            curr: c,
            next: c,
        };
        let l = recycle_loss(&mut tape, &identity, &identity, &second, &trip, Distance::L2).unwrap();
        assert_eq!(val(&tape, l), 0.0);
    }

    #[test]
    fn recycle_with_identity_generators_is_recurrent() {
        let mut tape = Tape::new();
        let prev = t(&mut tape, &[1, 1, 1, 3], &[0.1, 0.5, -0.3]);
        let curr = t(&mut tape, &[1, 1, 1, 3], &[0.2, 0.4, -0.1]);
        let next = t(&mut tape, &[1, 1, 1, 3], &[0.35, 0.2, 0.15]);
        let trip = TripletVars { prev, curr, next };
        let extrapolate = |tape: &mut Tape<f64>, a: Var, b: Var| {
            let d = tape.sub(b, a)?;
            let y = tape.add(b, d)?;
            tape.tanh(y)
        };
        let r = recycle_loss(&mut tape, &identity, &identity, &extrapolate, &trip, Distance::L2).unwrap();
        let q = recurrent_loss(&mut tape, &extrapolate, &trip, Distance::L2).unwrap();
        assert!((val(&tape, r) - val(&tape, q)).abs() < 1e-12);
    }

    #[test]
    fn csv_row_leaves_inactive_terms_empty() {
        let r = LossReport {
            adv_x: 0.5,
            adv_y: 0.25,
            cycle_x: Some(1.0),
            total: 2.0,
            ..Default::default()
        };
        assert_eq!(r.csv_row(3, 0.0002), "3,0.0002,,,0.5,0.25,,,,,1,,2");
        assert_eq!(CSV_HEADER.split(',').count(), r.csv_row(0, 0.0).split(',').count());
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            lambda_rx: -1.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
        let nan = LossWeights {
            lambda_tau_y: f64::NAN,
            ..LossWeights::default()
        };
        assert!(nan.validate().is_err());
    }

    struct Tiny {
        g_x: crate::nn::NetworkParams<f64>,
        g_y: crate::nn::NetworkParams<f64>,
        d_x: crate::nn::NetworkParams<f64>,
        d_y: crate::nn::NetworkParams<f64>,
        p_x: crate::nn::NetworkParams<f64>,
        p_y: crate::nn::NetworkParams<f64>,
    }

    fn tiny() -> Tiny {
        use crate::nn::{init_params, Architecture, DiscriminatorConfig, GeneratorConfig, UNetConfig};
        let g = Architecture::Generator(GeneratorConfig {
            input_channels: 3,
            base_width: 2,
            n_residual_blocks: 1,
            image_size: 16,
        });
        let d = Architecture::Discriminator(DiscriminatorConfig {
            input_channels: 3,
            base_width: 2,
            n_layers: 1,
            padding: 0,
        });
        let p = Architecture::UNet(UNetConfig::predictor(3, 2, 16).unwrap());
        Tiny {
            g_x: init_params(&g, 1).unwrap(),
            g_y: init_params(&g, 2).unwrap(),
            d_x: init_params(&d, 3).unwrap(),
            d_y: init_params(&d, 4).unwrap(),
            p_x: init_params(&p, 5).unwrap(),
            p_y: init_params(&p, 6).unwrap(),
        }
    }

    fn triplet(tape: &mut Tape<f64>, phase: f64) -> TripletVars {
        let mut frame = |k: f64| {
            tape.constant(
                Tensor::from_fn(&[2, 3, 16, 16], |i| 0.7 * ((i as f64) * 0.013 + phase + 0.2 * k).sin()).unwrap(),
            )
        };
        TripletVars {
            prev: frame(0.0),
            curr: frame(1.0),
            next: frame(2.0),
        }
    }

    fn evaluate(swap: bool, weights: LossWeights, mode: LossMode) -> LossReport {
        let nets = tiny();
        let mut tape = Tape::new();
        let bound: Vec<_> = [&nets.g_x, &nets.g_y, &nets.d_x, &nets.d_y, &nets.p_x, &nets.p_y]
            .iter()
            .map(|p| p.bind(&mut tape, true))
            .collect();
        let roles = Networks {
            g_x: &bound[0],
            g_y: &bound[1],
            d_x: &bound[2],
            d_y: &bound[3],
            p_x: &bound[4],
            p_y: &bound[5],
        };
        let bx = triplet(&mut tape, 0.0);
        let by = triplet(&mut tape, 1.3);
        let objective = Objective {
            weights,
            mode,
            ..Objective::default()
        };
        let terms = if swap {
            let objective = Objective {
                weights: weights.swapped(),
                ..objective
            };
            total_objective(&mut tape, &roles.swapped(), &by, &bx, &objective).unwrap()
        } else {
            total_objective(&mut tape, &roles, &bx, &by, &objective).unwrap()
        };
        terms.report(&tape)
    }

    #[test]
    fn total_matches_independent_recomputation() {
        let w = LossWeights {
            lambda_rx: 3.0,
            lambda_ry: 7.0,
            lambda_tau_x: 0.5,
            lambda_tau_y: 11.0,
            lambda_cycle_x: 2.0,
            lambda_cycle_y: 9.0,
            lambda_adv_x: 1.0,
            lambda_adv_y: 1.5,
        };
        for mode in [LossMode::Cycle, LossMode::Recycle, LossMode::Combined] {
            let r = evaluate(false, w, mode);
            assert!(r.is_finite());
            assert!((r.total - r.weighted_total(&w)).abs() < 1e-12, "{mode:?}: {r:?}");
            assert_eq!(r.cycle_x.is_some(), mode.uses_cycle());
            assert_eq!(r.recycle_y.is_some(), mode.uses_recycle());
        }
    }

    #[test]
    fn zero_weights_leave_the_adversarial_sum() {
        let w = LossWeights {
            lambda_adv_x: 1.0,
            lambda_adv_y: 1.0,
            ..LossWeights::zero()
        };
        let r = evaluate(false, w, LossMode::Combined);
        assert!((r.total - (r.adv_x + r.adv_y)).abs() < 1e-12);
    }

    #[test]
    fn swapping_domains_leaves_the_total_unchanged() {
        let w = LossWeights {
            lambda_rx: 2.0,
            lambda_tau_y: 4.0,
            ..LossWeights::default()
        };
        let a = evaluate(false, w, LossMode::Combined);
        let b = evaluate(true, w, LossMode::Combined);
        assert!((a.total - b.total).abs() < 1e-12 * a.total.abs().max(1.0));
        assert!((a.recycle_x.unwrap() - b.recycle_y.unwrap()).abs() < 1e-12);
        assert!((a.adv_y - b.adv_x).abs() < 1e-12);
    }

    #[test]
    fn least_squares_terms_are_non_negative() {
        let r = evaluate(false, LossWeights::default(), LossMode::Combined);
        for v in [r.adv_x, r.adv_y, r.recycle_x.unwrap(), r.recurrent_y.unwrap(), r.cycle_x.unwrap(), r.total] {
            assert!(v >= 0.0);
        }
    }
}
