//! 64-bit self-checks: finite-difference gradients of every primitive and
//! network, conv/transposed-conv adjointness, the discriminator patch size
//! and the loss identities.

use std::fmt;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{
    cycle_loss, recurrent_loss, recycle_loss, total_objective, AdversarialMode, Distance, LossMode, LossWeights,
    Networks, Objective, TripletVars,
};
use crate::nn::{
    discriminator_local_forward, segmenter_forward, Architecture, BoundNet, DiscriminatorConfig, FrameMap,
    FramePredictor, GeneratorConfig, ParamKind, UNetConfig,
};
use crate::tensor::{self, gradcheck::check_many_with, Tape, Tensor, Var};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ADJOINT_TOLERANCE: f64 = 1e-10;
pub const IDENTITY_TOLERANCE: f64 = 1e-12;
pub const EXPECTED_RECEPTIVE_FIELD: usize = 70;
pub const VERIFY_BUDGET: Duration = Duration::from_secs(300);
const FD_STEP: f64 = 1e-5;
/// Analytic-gradient scale applied to a corrupted check.
const CORRUPTION: f64 = 1.01;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub limit: f64,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<32} value={:.3e} limit={:.1e}", self.name, self.value, self.limit)?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub elapsed: Duration,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&c.to_string());
            s.push('\n');
        }
        let failed = self.failures().count();
        s.push_str(&format!(
            "{} checks, {} failed, {:.1}s\n",
            self.checks.len(),
            failed,
            self.elapsed.as_secs_f64()
        ));
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyOptions {
    /// Name of a gradient check whose analytic gradient is deliberately
    /// perturbed, to prove the suite can fail.
    pub corrupt: Option<String>,
    /// Only run checks whose name starts with this prefix.
    pub filter: Option<String>,
}

type LossFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> tensor::Result<Var>>;

struct GradCase {
    name: String,
    points: Vec<Tensor<f64>>,
    f: LossFn,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi)).expect("probe shape")
}

/// Values bounded away from zero, for ops with a kink there.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let u: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            u
        } else {
            -u
        }
    })
    .expect("probe shape")
}

/// Fixed pseudo-random projection `Σ wᵢ yᵢ` turning any output into a scalar.
fn project(tape: &mut Tape<f64>, y: Var) -> tensor::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i as f64 * 0.754_877_666_2 + 0.31).fract() - 0.5) * 2.0)?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn case(name: &str, points: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> tensor::Result<Var> + 'static) -> GradCase {
    GradCase {
        name: format!("grad/{name}"),
        points,
        f: Box::new(f),
    }
}

fn primitive_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let r = &mut rng;
    let img = [2, 3, 4, 4];
    let mut v = vec![
        case("add", vec![uniform(&img, -1.0, 1.0, r), uniform(&img, -1.0, 1.0, r)], |t, x| {
            let y = t.add(x[0], x[1])?;
            project(t, y)
        }),
        case("sub", vec![uniform(&img, -1.0, 1.0, r), uniform(&img, -1.0, 1.0, r)], |t, x| {
            let y = t.sub(x[0], x[1])?;
            project(t, y)
        }),
        case("mul", vec![uniform(&img, -1.0, 1.0, r), uniform(&img, -1.0, 1.0, r)], |t, x| {
            let y = t.mul(x[0], x[1])?;
            project(t, y)
        }),
        case("scale", vec![uniform(&img, -1.0, 1.0, r)], |t, x| {
            let y = t.scale(x[0], -1.7)?;
            project(t, y)
        }),
        case("add_scalar", vec![uniform(&img, -1.0, 1.0, r)], |t, x| {
            let y = t.add_scalar(x[0], 0.3)?;
            let y = t.mul(y, y)?;
            project(t, y)
        }),
        case("relu", vec![off_kink(&img, r)], |t, x| {
            let y = t.relu(x[0])?;
            project(t, y)
        }),
        case("leaky_relu", vec![off_kink(&img, r)], |t, x| {
            let y = t.leaky_relu(x[0], 0.2)?;
            project(t, y)
        }),
        case("tanh", vec![uniform(&img, -2.0, 2.0, r)], |t, x| {
            let y = t.tanh(x[0])?;
            project(t, y)
        }),
        case("sigmoid", vec![uniform(&img, -3.0, 3.0, r)], |t, x| {
            let y = t.sigmoid(x[0])?;
            project(t, y)
        }),
        case("log", vec![uniform(&img, 0.2, 2.0, r)], |t, x| {
            let y = t.log(x[0])?;
            project(t, y)
        }),
        case(
            "concat_channels",
            vec![uniform(&[2, 1, 3, 3], -1.0, 1.0, r), uniform(&[2, 2, 3, 3], -1.0, 1.0, r)],
            |t, x| {
                let y = t.concat_channels(&[x[0], x[1]])?;
                project(t, y)
            },
        ),
        case("upsample_nearest", vec![uniform(&[1, 2, 3, 3], -1.0, 1.0, r)], |t, x| {
            let y = t.upsample_nearest(x[0], 2)?;
            project(t, y)
        }),
        case("resize_bilinear", vec![uniform(&[1, 2, 3, 4], -1.0, 1.0, r)], |t, x| {
            let y = t.resize_bilinear(x[0], 5, 7)?;
            project(t, y)
        }),
        case(
            "instance_norm",
            vec![
                uniform(&img, -1.0, 1.0, r),
                uniform(&[3], 0.5, 1.5, r),
                uniform(&[3], -0.5, 0.5, r),
            ],
            |t, x| {
                let y = t.instance_norm(x[0], x[1], x[2])?;
                project(t, y)
            },
        ),
        case("mean", vec![uniform(&img, -1.0, 1.0, r)], |t, x| {
            let y = t.mul(x[0], x[0])?;
            t.mean(y)
        }),
        case("sum", vec![uniform(&img, -1.0, 1.0, r)], |t, x| {
            let y = t.tanh(x[0])?;
            t.sum(y)
        }),
        case("mse", vec![uniform(&img, -1.0, 1.0, r), uniform(&img, -1.0, 1.0, r)], |t, x| t.mse(x[0], x[1])),
    ];
    let a = uniform(&img, -1.0, 1.0, r);
    let offset = off_kink(&img, r);
    let b = a.zip_map(&offset, |p, q| p + q).expect("same shape");
    v.push(case("mae", vec![a, b], |t, x| t.mae(x[0], x[1])));
    v.push(case(
        "conv2d/s1p1+bias",
        vec![
            uniform(&[2, 2, 5, 5], -1.0, 1.0, r),
            uniform(&[3, 2, 3, 3], -1.0, 1.0, r),
            uniform(&[3], -1.0, 1.0, r),
        ],
        |t, x| {
            let y = t.conv2d(x[0], x[1], Some(x[2]), 1, 1)?;
            project(t, y)
        },
    ));
    v.push(case(
        "conv2d/s2p0",
        vec![uniform(&[1, 2, 7, 6], -1.0, 1.0, r), uniform(&[2, 2, 4, 4], -1.0, 1.0, r)],
        |t, x| {
            let y = t.conv2d(x[0], x[1], None, 2, 0)?;
            project(t, y)
        },
    ));
    v.push(case(
        "conv_transpose2d/s2p1+bias",
        vec![
            uniform(&[2, 3, 3, 3], -1.0, 1.0, r),
            uniform(&[3, 2, 4, 4], -1.0, 1.0, r),
            uniform(&[2], -1.0, 1.0, r),
        ],
        |t, x| {
            let y = t.conv_transpose2d(x[0], x[1], Some(x[2]), 2, 1)?;
            project(t, y)
        },
    ));
    v.push(case(
        "conv_transpose2d/s1p0",
        vec![uniform(&[1, 2, 3, 4], -1.0, 1.0, r), uniform(&[2, 1, 3, 2], -1.0, 1.0, r)],
        |t, x| {
            let y = t.conv_transpose2d(x[0], x[1], None, 1, 0)?;
            project(t, y)
        },
    ));
    let labels: Vec<usize> = (0..2 * 3 * 3).map(|i| (i * 7) % 4).collect();
    v.push(case("softmax_cross_entropy", vec![uniform(&[2, 4, 3, 3], -2.0, 2.0, r)], move |t, x| {
        t.softmax_cross_entropy(x[0], &labels)
    }));
    v
}

/// Parameter values for a gradient probe: kernels scaled by fan-in, gains
/// near one and biases near zero.
fn probe_params(arch: &Architecture, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor<f64>)> {
    arch.param_specs()
        .into_iter()
        .map(|s| {
            let t = match s.kind {
                ParamKind::Kernel => {
                    let fan: usize = s.shape[1..].iter().product();
                    let a = 1.5 / (fan as f64).sqrt();
                    uniform(&s.shape, -a, a, rng)
                }
                ParamKind::NormGain => uniform(&s.shape, 0.5, 1.5, rng),
                ParamKind::Bias | ParamKind::NormBias => uniform(&s.shape, -0.5, 0.5, rng),
            };
            (s.name, t)
        })
        .collect()
}

type NetHead = fn(&mut Tape<f64>, &BoundNet, &[Var]) -> tensor::Result<Var>;

/// Gradient of a projected network output with respect to its inputs and
/// every parameter.
fn network_case(name: &str, arch: Architecture, inputs: Vec<Tensor<f64>>, seed: u64, head: NetHead) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = probe_params(&arch, &mut rng);
    let n_in = inputs.len();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let mut points = inputs;
    points.extend(params.into_iter().map(|(_, t)| t));
    case(name, points, move |t, x| {
        let vars: IndexMap<String, Var> = names.iter().cloned().zip(x[n_in..].iter().copied()).collect();
        let net = BoundNet::from_vars(arch.clone(), vars);
        head(t, &net, &x[..n_in])
    })
}

fn network_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let generator = Architecture::Generator(GeneratorConfig {
        input_channels: 2,
        base_width: 2,
        n_residual_blocks: 1,
        image_size: 8,
    });
    let disc = |padding| {
        Architecture::Discriminator(DiscriminatorConfig {
            input_channels: 2,
            base_width: 2,
            n_layers: 1,
            padding,
        })
    };
    let predictor = Architecture::UNet(UNetConfig::predictor(2, 2, 8).expect("probe u-net"));
    let segmenter = Architecture::UNet(UNetConfig::segmenter(2, 3, 2, 8).expect("probe u-net"));
    let x8 = uniform(&[1, 2, 8, 8], -1.0, 1.0, &mut rng);
    let x16 = uniform(&[1, 2, 16, 16], -1.0, 1.0, &mut rng);
    vec![
        network_case("net/generator", generator, vec![x8.clone()], 1, |t, n, x| {
            let y = n.apply(t, x[0])?;
            project(t, y)
        }),
        network_case("net/discriminator", disc(0), vec![x16.clone()], 2, |t, n, x| {
            let y = n.apply(t, x[0])?;
            project(t, y)
        }),
        network_case("net/discriminator_padded", disc(1), vec![x16], 3, |t, n, x| {
            let y = n.apply(t, x[0])?;
            project(t, y)
        }),
        network_case(
            "net/predictor",
            predictor,
            vec![x8.clone(), uniform(&[1, 2, 8, 8], -1.0, 1.0, &mut rng)],
            4,
            |t, n, x| {
                let y = n.predict(t, x[0], x[1])?;
                project(t, y)
            },
        ),
        network_case("net/segmenter", segmenter, vec![x8], 5, |t, n, x| {
            let logits = segmenter_forward(t, n, x[0])?;
            let labels: Vec<usize> = (0..64).map(|i| (i / 3) % 3).collect();
            t.softmax_cross_entropy(logits, &labels)
        }),
    ]
}

/// Names of every gradient check, the valid targets of
/// [`VerifyOptions::corrupt`].
pub fn gradient_check_names() -> Vec<String> {
    primitive_cases()
        .into_iter()
        .chain(network_cases())
        .map(|c| c.name)
        .collect()
}

fn run_grad_case(c: &GradCase, corrupt: bool) -> CheckResult {
    let scale = if corrupt { CORRUPTION } else { 1.0 };
    match check_many_with(|t, v| (c.f)(t, v), &c.points, FD_STEP, scale) {
        Ok(r) => {
            let detail = match r.worst {
                Some((i, j)) => format!(
                    "{} coords; worst input {i} coord {j}: analytic {:.6e} numeric {:.6e}{}",
                    r.coordinates,
                    r.analytic_at_worst,
                    r.numeric_at_worst,
                    if r.non_finite { "; non-finite values" } else { "" }
                ),
                None => format!("{} coords", r.coordinates),
            };
            CheckResult {
                name: c.name.clone(),
                passed: r.passed(GRAD_TOLERANCE),
                value: if r.non_finite { f64::NAN } else { r.max_rel_error },
                limit: GRAD_TOLERANCE,
                detail,
            }
        }
        Err(e) => failed(&c.name, GRAD_TOLERANCE, e.to_string()),
    }
}

fn failed(name: &str, limit: f64, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: false,
        value: f64::NAN,
        limit,
        detail,
    }
}

fn within(name: &str, value: f64, limit: f64, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: value.is_finite() && value < limit,
        value,
        limit,
        detail,
    }
}

fn scalar(t: &Tape<f64>, v: Var) -> f64 {
    t.scalar(v).unwrap_or(f64::NAN)
}

/// `|⟨conv(x), y⟩ − ⟨x, convᵀ(y)⟩| / max(1, |⟨conv(x), y⟩|)` for one geometry.
fn adjoint_gap(c: usize, f: usize, (h, w): (usize, usize), k: usize, stride: usize, pad: usize, seed: u64) -> tensor::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tape::new();
    let x = t.constant(uniform(&[2, c, h, w], -1.0, 1.0, &mut rng));
    let kern = t.constant(uniform(&[f, c, k, k], -1.0, 1.0, &mut rng));
    let cx = t.conv2d(x, kern, None, stride, pad)?;
    let y = t.constant(uniform(t.shape(cx).to_vec().as_slice(), -1.0, 1.0, &mut rng));
    let ty = t.conv_transpose2d(y, kern, None, stride, pad)?;
    if t.shape(ty) != t.shape(x) {
        return Err(tensor::TensorError::ShapeMismatch {
            op: "adjointness",
            lhs: t.shape(x).to_vec(),
            rhs: t.shape(ty).to_vec(),
        });
    }
    let lhs = t.value(cx).dot(t.value(y))?;
    let rhs = t.value(x).dot(t.value(ty))?;
    Ok((lhs - rhs).abs() / lhs.abs().max(1.0))
}

fn adjoint_checks() -> Vec<CheckResult> {
    // (c, f, (h, w), k, stride, pad), sizes chosen so the transposed conv
    // restores the input shape
    let geometries = [
        (2, 3, (6, 7), 3, 1, 1),
        (3, 2, (8, 10), 4, 2, 1),
        (1, 2, (9, 5), 7, 1, 3),
        (2, 2, (10, 12), 4, 2, 0),
        (2, 4, (7, 9), 3, 2, 1),
    ];
    geometries
        .iter()
        .enumerate()
        .map(|(i, &(c, f, hw, k, s, p))| {
            let name = format!("adjoint/k{k}s{s}p{p}");
            match adjoint_gap(c, f, hw, k, s, p, 100 + i as u64) {
                Ok(gap) => within(&name, gap, ADJOINT_TOLERANCE, format!("{c}->{f} channels, {}x{} input", hw.0, hw.1)),
                Err(e) => failed(&name, ADJOINT_TOLERANCE, e.to_string()),
            }
        })
        .collect()
}

/// Side of the input region reaching one interior logit, measured from the
/// support of its gradient through the local conv path.
pub fn receptive_field_probe(cfg: &DiscriminatorConfig, input: usize, seed: u64) -> Result<(usize, usize)> {
    let arch = Architecture::Discriminator(*cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tape::new();
    let vars: IndexMap<String, Var> = probe_params(&arch, &mut rng)
        .into_iter()
        .map(|(n, v)| (n, t.constant(v)))
        .collect();
    let net = BoundNet::from_vars(arch, vars);
    let x = t.param(uniform(&[1, cfg.input_channels, input, input], -1.0, 1.0, &mut rng));
    let y = discriminator_local_forward(&mut t, &net, x)?;
    let [_, _, oh, ow] = t.value(y).dims4("receptive_field_probe")?;
    let mut pick = Tensor::zeros(&[1, 1, oh, ow])?;
    pick.data_mut()[(oh / 2) * ow + ow / 2] = 1.0;
    let pick = t.constant(pick);
    let s = t.mul(y, pick)?;
    let s = t.sum(s)?;
    t.backward(s)?;
    let g = t.grad(x).ok_or_else(|| Error::Numerical("receptive field probe produced no gradient".into()))?;
    let (mut rows, mut cols) = (Vec::new(), Vec::new());
    for (i, v) in g.iter().enumerate() {
        if *v != 0.0 {
            let p = i % (input * input);
            rows.push(p / input);
            cols.push(p % input);
        }
    }
    let extent = |v: &[usize]| v.iter().max().zip(v.iter().min()).map_or(0, |(a, b)| a - b + 1);
    Ok((extent(&rows), extent(&cols)))
}

fn receptive_field_checks() -> Vec<CheckResult> {
    [(0usize, 94usize), (1, 94)]
        .iter()
        .map(|&(padding, input)| {
            let cfg = DiscriminatorConfig {
                input_channels: 1,
                base_width: 1,
                n_layers: 3,
                padding,
            };
            let name = format!("receptive_field/p{padding}");
            match receptive_field_probe(&cfg, input, 7) {
                Ok((h, w)) => CheckResult {
                    name,
                    passed: h == EXPECTED_RECEPTIVE_FIELD && w == EXPECTED_RECEPTIVE_FIELD,
                    value: h.max(w) as f64,
                    limit: EXPECTED_RECEPTIVE_FIELD as f64,
                    detail: format!("support {h}x{w}, expected {0}x{0}", EXPECTED_RECEPTIVE_FIELD),
                },
                Err(e) => failed(&name, EXPECTED_RECEPTIVE_FIELD as f64, e.to_string()),
            }
        })
        .collect()
}

fn double(t: &mut Tape<f64>, x: Var) -> tensor::Result<Var> {
    t.scale(x, 2.0)
}

fn halve(t: &mut Tape<f64>, x: Var) -> tensor::Result<Var> {
    t.scale(x, 0.5)
}

fn identity(_: &mut Tape<f64>, x: Var) -> tensor::Result<Var> {
    Ok(x)
}

/// `2·curr − prev`, exact on linearly moving frames.
fn extrapolate(t: &mut Tape<f64>, prev: Var, curr: Var) -> tensor::Result<Var> {
    let c2 = t.scale(curr, 2.0)?;
    t.sub(c2, prev)
}

fn average(t: &mut Tape<f64>, a: Var, b: Var) -> tensor::Result<Var> {
    let s = t.add(a, b)?;
    t.scale(s, 0.5)
}

fn triplets(t: &mut Tape<f64>, rng: &mut ChaCha8Rng, linear: bool) -> TripletVars {
    let shape = [2, 3, 8, 8];
    // multiples of 1/8 keep the linear motion exact in floating point
    let grid = |rng: &mut ChaCha8Rng| Tensor::from_fn(&shape, |_| rng.gen_range(-8i32..=8) as f64 / 8.0).expect("shape");
    let prev = grid(rng);
    let curr = grid(rng);
    let next = if linear {
        curr.zip_map(&prev, |c, p| 2.0 * c - p).expect("shape")
    } else {
        grid(rng)
    };
    TripletVars {
        prev: t.constant(prev),
        curr: t.constant(curr),
        next: t.constant(next),
    }
}

fn identity_checks() -> tensor::Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut out = Vec::new();

    let mut t = Tape::new();
    let b = triplets(&mut t, &mut rng, false);
    let c = cycle_loss(&mut t, &halve, &double, b.curr, Distance::L2)?;
    let c1 = cycle_loss(&mut t, &halve, &double, b.curr, Distance::L1)?;
    let v = scalar(&t, c).abs().max(scalar(&t, c1).abs());
    out.push(within("identity/cycle_inverse_pair", v, IDENTITY_TOLERANCE, "G_X = G_Y⁻¹".into()));

    let b = triplets(&mut t, &mut rng, true);
    let r = recycle_loss(&mut t, &identity, &identity, &extrapolate, &b, Distance::L2)?;
    out.push(within(
        "identity/recycle_perfect_predictor",
        scalar(&t, r).abs(),
        IDENTITY_TOLERANCE,
        "identity generators, exact predictor".into(),
    ));

    let b = triplets(&mut t, &mut rng, false);
    let mut gap: f64 = 0.0;
    for d in [Distance::L2, Distance::L1] {
        let r = recycle_loss(&mut t, &identity, &identity, &average, &b, d)?;
        let q = recurrent_loss(&mut t, &average, &b, d)?;
        gap = gap.max((scalar(&t, r) - scalar(&t, q)).abs());
    }
    out.push(within(
        "identity/recycle_equals_recurrent",
        gap,
        IDENTITY_TOLERANCE,
        "identity generators".into(),
    ));

    out.push(linearity_check(&mut rng)?);
    Ok(out)
}

fn tanh_map(t: &mut Tape<f64>, x: Var) -> tensor::Result<Var> {
    let y = t.scale(x, 0.7)?;
    t.tanh(y)
}

fn patch_logits(t: &mut Tape<f64>, x: Var) -> tensor::Result<Var> {
    let y = t.mul(x, x)?;
    t.add_scalar(y, -0.3)
}

/// `total(α·w₁ + β·w₂) = α·total(w₁) + β·total(w₂)` over the full weight
/// vector, in every mode.
fn linearity_check(rng: &mut ChaCha8Rng) -> tensor::Result<CheckResult> {
    let nets = Networks {
        g_x: &tanh_map,
        g_y: &halve,
        d_x: &patch_logits,
        d_y: &tanh_map,
        p_x: &average,
        p_y: &extrapolate,
    };
    let draw = |rng: &mut ChaCha8Rng| LossWeights {
        lambda_rx: rng.gen_range(0.0..5.0),
        lambda_ry: rng.gen_range(0.0..5.0),
        lambda_tau_x: rng.gen_range(0.0..5.0),
        lambda_tau_y: rng.gen_range(0.0..5.0),
        lambda_cycle_x: rng.gen_range(0.0..5.0),
        lambda_cycle_y: rng.gen_range(0.0..5.0),
        lambda_adv_x: rng.gen_range(0.0..2.0),
        lambda_adv_y: rng.gen_range(0.0..2.0),
    };
    let (w1, w2) = (draw(rng), draw(rng));
    let (a, b) = (0.75, 1.5);
    let mix = LossWeights {
        lambda_rx: a * w1.lambda_rx + b * w2.lambda_rx,
        lambda_ry: a * w1.lambda_ry + b * w2.lambda_ry,
        lambda_tau_x: a * w1.lambda_tau_x + b * w2.lambda_tau_x,
        lambda_tau_y: a * w1.lambda_tau_y + b * w2.lambda_tau_y,
        lambda_cycle_x: a * w1.lambda_cycle_x + b * w2.lambda_cycle_x,
        lambda_cycle_y: a * w1.lambda_cycle_y + b * w2.lambda_cycle_y,
        lambda_adv_x: a * w1.lambda_adv_x + b * w2.lambda_adv_x,
        lambda_adv_y: a * w1.lambda_adv_y + b * w2.lambda_adv_y,
    };
    let mut t = Tape::new();
    let bx = triplets(&mut t, rng, false);
    let by = triplets(&mut t, rng, false);
    let mut worst: f64 = 0.0;
    for mode in [LossMode::Cycle, LossMode::Recycle, LossMode::Combined] {
        for adversarial in [AdversarialMode::LeastSquares, AdversarialMode::Log] {
            let mut total = |w: LossWeights| -> tensor::Result<f64> {
                let obj = Objective {
                    weights: w,
                    adversarial,
                    mode,
                    distance: Distance::L2,
                };
                let terms = total_objective(&mut t, &nets, &bx, &by, &obj)?;
                Ok(scalar(&t, terms.total))
            };
            let lhs = total(mix)?;
            let rhs = a * total(w1)? + b * total(w2)?;
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
        }
    }
    Ok(within(
        "identity/objective_linearity",
        worst,
        IDENTITY_TOLERANCE,
        "all modes, both adversarial forms".into(),
    ))
}

/// Runs the suite. Only an unknown corruption target is an error; every
/// check failure is reported in the result.
pub fn run_verification(opts: &VerifyOptions) -> Result<VerifyReport> {
    let start = Instant::now();
    let selected = |name: &str| opts.filter.as_deref().is_none_or(|f| name.starts_with(f));
    let group = |prefix: &str| opts.filter.as_deref().is_none_or(|f| prefix.starts_with(f) || f.starts_with(prefix));
    let cases: Vec<GradCase> = primitive_cases().into_iter().chain(network_cases()).collect();
    if let Some(target) = &opts.corrupt {
        if !cases.iter().any(|c| &c.name == target) {
            return Err(Error::Config(format!(
                "unknown gradient check {target:?}; known checks: {}",
                cases.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
    }
    let mut checks = Vec::new();
    for c in cases.iter().filter(|c| selected(&c.name)) {
        checks.push(run_grad_case(c, opts.corrupt.as_deref() == Some(c.name.as_str())));
    }
    checks.extend(adjoint_checks().into_iter().filter(|c| selected(&c.name)));
    if group("receptive_field/") {
        checks.extend(receptive_field_checks().into_iter().filter(|c| selected(&c.name)));
    }
    if group("identity/") {
        match identity_checks() {
            Ok(v) => checks.extend(v.into_iter().filter(|c| selected(&c.name))),
            Err(e) => checks.push(failed("identity", IDENTITY_TOLERANCE, e.to_string())),
        }
    }
    let elapsed = start.elapsed();
    checks.push(CheckResult {
        name: "budget/runtime".into(),
        passed: elapsed < VERIFY_BUDGET,
        value: elapsed.as_secs_f64(),
        limit: VERIFY_BUDGET.as_secs_f64(),
        detail: "seconds".into(),
    });
    Ok(VerifyReport { checks, elapsed })
}
