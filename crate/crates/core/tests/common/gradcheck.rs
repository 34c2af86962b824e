//! Gradient checks: engine gradients against central differences of the f64
//! reference implementations in the parent module.

use lumacurve::autodiff::{Tape, Tensor, Var};
use lumacurve::contrastive::ContrastiveConfig;
use lumacurve::model::{forward_on_tape, Architecture, ModelWeights};
use lumacurve::tone_curve::{curve_param_grad, CurveParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;
pub const MIN_POINTS: usize = 1000;

#[derive(Debug, Clone)]
pub struct Check {
    pub family: &'static str,
    pub points: usize,
    pub worst: f64,
    pub tol: f64,
}

impl Check {
    fn new(family: &'static str, tol: f64) -> Self {
        Self { family, points: 0, worst: 0.0, tol }
    }

    fn record(&mut self, analytic: &[f64], reference: &[f64]) {
        self.points += reference.len();
        self.worst = self.worst.max(rel_err(analytic, reference));
    }

    pub fn passed(&self) -> bool {
        self.points >= MIN_POINTS && self.worst <= self.tol
    }
}

fn leaf(tape: &mut Tape, shape: Vec<usize>, x: &[f64]) -> Var {
    tape.leaf(Tensor::new(shape, to32(x)).unwrap(), true).unwrap()
}

/// Runs `op` on tracked leaves, seeds the output with `r` and returns the
/// gradient of `r · op(inputs)` for every input.
fn engine_grads(inputs: &[(Vec<usize>, Vec<f64>)], r: &[f64], op: impl Fn(&mut Tape, &[Var]) -> Var) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(s, x)| leaf(&mut tape, s.clone(), x)).collect();
    let out = op(&mut tape, &vars);
    let seed = to32(r);
    let grads = tape.backward_seeded(&[(out, &seed)]).unwrap();
    vars.iter().map(|v| to64(grads.get(*v).unwrap())).collect()
}

/// Checks every input of a primitive. `reference` evaluates the op in f64.
fn check_primitive(
    check: &mut Check,
    inputs: &[(Vec<usize>, Vec<f64>)],
    out_len: usize,
    rng: &mut impl Rng,
    op: impl Fn(&mut Tape, &[Var]) -> Var,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) {
    let r = uniform(rng, out_len, -1.0, 1.0);
    let analytic = engine_grads(inputs, &r, op);
    let values: Vec<Vec<f64>> = inputs.iter().map(|(_, x)| x.clone()).collect();
    for (k, a) in analytic.iter().enumerate() {
        let fd = central_diff(&values[k], FD_STEP, |probe| {
            let mut args = values.clone();
            args[k] = probe.to_vec();
            dot(&r, &reference(&args))
        });
        check.record(a, &fd);
    }
}

pub fn conv2d_check(stride: usize, seed: u64) -> Check {
    let name = if stride == 1 { "conv2d stride 1" } else { "conv2d stride 2" };
    let mut check = Check::new(name, PRIMITIVE_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while check.points < MIN_POINTS {
        let (c, h, w, o) = (rng.gen_range(1..4), rng.gen_range(3..9), rng.gen_range(3..9), rng.gen_range(1..5));
        let x = uniform(&mut rng, c * h * w, -1.0, 1.0);
        let wt = uniform(&mut rng, o * c * 9, -1.0, 1.0);
        let b = uniform(&mut rng, o, -1.0, 1.0);
        let oh = (h - 1) / stride + 1;
        let ow = (w - 1) / stride + 1;
        check_primitive(
            &mut check,
            &[(vec![c, h, w], x), (vec![o, c, 3, 3], wt), (vec![o], b)],
            o * oh * ow,
            &mut rng,
            |t, v| t.conv2d(v[0], v[1], v[2], stride).unwrap(),
            |a| conv2d(&a[0], c, h, w, &a[1], &a[2], stride).0,
        );
    }
    check
}

pub fn relu_check(seed: u64) -> Check {
    let mut check = Check::new("relu", PRIMITIVE_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while check.points < MIN_POINTS {
        let x = away_from_zero(&mut rng, 200, 1e-3);
        check_primitive(&mut check, &[(vec![200], x)], 200, &mut rng, |t, v| t.relu(v[0]).unwrap(), |a| relu(&a[0]));
    }
    check
}

pub fn affine_check(seed: u64) -> Check {
    let mut check = Check::new("affine", PRIMITIVE_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while check.points < MIN_POINTS {
        let (o, i) = (rng.gen_range(1..17), rng.gen_range(1..33));
        let wt = uniform(&mut rng, o * i, -1.0, 1.0);
        let b = uniform(&mut rng, o, -1.0, 1.0);
        let x = uniform(&mut rng, i, -1.0, 1.0);
        check_primitive(
            &mut check,
            &[(vec![o, i], wt), (vec![o], b), (vec![i], x)],
            o,
            &mut rng,
            |t, v| t.affine(v[0], v[1], v[2]).unwrap(),
            |a| affine(&a[0], &a[1], &a[2]),
        );
    }
    check
}

pub fn mean_pool_check(seed: u64) -> Check {
    let mut check = Check::new("global_mean_pool", PRIMITIVE_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while check.points < MIN_POINTS {
        let (c, h, w) = (rng.gen_range(1..5), rng.gen_range(1..9), rng.gen_range(1..9));
        let x = uniform(&mut rng, c * h * w, -1.0, 1.0);
        check_primitive(
            &mut check,
            &[(vec![c, h, w], x)],
            c,
            &mut rng,
            |t, v| t.global_mean_pool(v[0]).unwrap(),
            |a| mean_pool(&a[0], c),
        );
    }
    check
}

pub fn elementwise_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut add = Check::new("add", PRIMITIVE_TOL);
    let mut mul = Check::new("mul", PRIMITIVE_TOL);
    let mut scale = Check::new("scale", PRIMITIVE_TOL);
    let mut clamp = Check::new("clamp", PRIMITIVE_TOL);
    while add.points < MIN_POINTS || clamp.points < MIN_POINTS {
        let n = 100;
        let a = uniform(&mut rng, n, -2.0, 2.0);
        let b = uniform(&mut rng, n, -2.0, 2.0);
        let pair = [(vec![n], a.clone()), (vec![n], b)];
        check_primitive(&mut add, &pair, n, &mut rng, |t, v| t.add(v[0], v[1]).unwrap(), |x| {
            x[0].iter().zip(&x[1]).map(|(p, q)| p + q).collect()
        });
        check_primitive(&mut mul, &pair, n, &mut rng, |t, v| t.mul(v[0], v[1]).unwrap(), |x| {
            x[0].iter().zip(&x[1]).map(|(p, q)| p * q).collect()
        });
        let k = rng.gen_range(-3.0f32..3.0);
        check_primitive(&mut scale, &pair[..1], n, &mut rng, |t, v| t.scale(v[0], k).unwrap(), |x| {
            x[0].iter().map(|p| p * k as f64).collect()
        });
        // keep samples clear of the clamp bounds
        let c: Vec<f64> = a.iter().filter(|v| (v.abs() - 0.5).abs() > 1e-3).copied().collect();
        let m = c.len();
        check_primitive(&mut clamp, &[(vec![m], c)], m, &mut rng, |t, v| t.clamp(v[0], -0.5, 0.5).unwrap(), |x| {
            x[0].iter().map(|p| p.clamp(-0.5, 0.5)).collect()
        });
    }
    vec![add, mul, scale, clamp]
}

pub fn vector_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut norm_check = Check::new("l2_normalize", PRIMITIVE_TOL);
    let mut dot_check = Check::new("dot", PRIMITIVE_TOL);
    let mut arccos = Check::new("arccos_loss", PRIMITIVE_TOL);
    while norm_check.points < MIN_POINTS || arccos.points < MIN_POINTS {
        let n = rng.gen_range(2..33);
        let x = uniform(&mut rng, n, -1.0, 1.0);
        let y = uniform(&mut rng, n, -1.0, 1.0);
        check_primitive(&mut norm_check, &[(vec![n], x.clone())], n, &mut rng, |t, v| t.l2_normalize(v[0]).unwrap(), |a| {
            l2_normalize(&a[0])
        });
        check_primitive(&mut dot_check, &[(vec![n], x), (vec![n], y)], 1, &mut rng, |t, v| t.dot(v[0], v[1]).unwrap(), |a| {
            vec![dot(&a[0], &a[1])]
        });
        // unit 3-vectors with the cosine well inside (-1, 1)
        let (p, q) = loop {
            let p = to64(&to32(&unit(&mut rng, 3)));
            let q = to64(&to32(&unit(&mut rng, 3)));
            if dot(&p, &q).abs() < 0.95 {
                break (p, q);
            }
        };
        check_primitive(
            &mut arccos,
            &[(vec![3], p), (vec![3], q)],
            1,
            &mut rng,
            |t, v| t.arccos_loss(v[0], v[1]).unwrap(),
            |a| vec![arccos_deg(&a[0], &a[1])],
        );
    }
    vec![norm_check, dot_check, arccos]
}

pub fn info_nce_check(seed: u64) -> Check {
    let mut check = Check::new("info_nce", COMPOSITE_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ContrastiveConfig::default();
    while check.points < MIN_POINTS {
        let (n, dim) = (rng.gen_range(2..7), 16);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> { (0..n).map(|_| to64(&to32(&unit(rng, dim)))).collect() };
        let z = draw(&mut rng);
        let zs = draw(&mut rng);

        let mut tape = Tape::new();
        let a: Vec<Var> = z.iter().map(|v| leaf(&mut tape, vec![dim], v)).collect();
        let b: Vec<Var> = zs.iter().map(|v| leaf(&mut tape, vec![dim], v)).collect();
        let loss = tape.info_nce(&a, &b, &cfg).unwrap();
        let grads = tape.backward(loss).unwrap();

        let mut flat = z.concat();
        flat.extend(zs.concat());
        let analytic: Vec<f64> = a.iter().chain(&b).flat_map(|v| to64(grads.get(*v).unwrap())).collect();
        let fd = central_diff(&flat, FD_STEP, |x| {
            let rows: Vec<Vec<f64>> = x.chunks(dim).map(|c| c.to_vec()).collect();
            info_nce(&rows[..n], &rows[n..], cfg.tau)
        });
        check.record(&analytic, &fd);
    }
    check
}

pub fn curve_check(seed: u64) -> Check {
    let mut check = Check::new("curve_param_grad", COMPOSITE_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while check.points < MIN_POINTS {
        let l = rng.gen_range(4..40);
        let theta: Vec<f64> = (0..l).map(|_| rng.gen_range(0.01..1.0)).collect();
        let params = CurveParams::new(theta.clone()).unwrap();
        let l_f = l as f64;
        let u = loop {
            let u: f64 = rng.gen();
            // stay off the segment knots where the ramp has a kink
            let frac = u * l_f - (u * l_f).floor();
            if frac > 1e-3 && frac < 1.0 - 1e-3 {
                break u;
            }
        };
        let analytic = curve_param_grad(u, &params).unwrap();
        let fd = central_diff(&theta, FD_STEP, |t| en_bright(u, t));
        check.record(&analytic, &fd);
    }
    check
}

/// Input gradient of `arccos(estimate, truth) + r · embedding` for the full
/// model at a small input size.
pub fn model_input_check(seed: u64) -> Check {
    let mut check = Check::new("model input gradient", COMPOSITE_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 32;
    let arch = Architecture::with_input_size(size);
    let mut trial = 0;
    while check.points < MIN_POINTS {
        let weights = ModelWeights::init(arch.clone(), seed + trial);
        trial += 1;
        let model = Model64 {
            tensors: weights.tensors().iter().map(|t| to64(t.data())).collect(),
            channels: arch.channels,
        };
        let x = uniform(&mut rng, 3 * size * size, 0.0, 1.0);
        let truth = to64(&to32(&unit(&mut rng, 3).iter().map(|v| v.abs()).collect::<Vec<_>>()));
        let r = uniform(&mut rng, arch.embedding_dim, -1.0, 1.0);

        let mut tape = Tape::new();
        let params = weights.register(&mut tape, false).unwrap();
        let input = leaf(&mut tape, vec![3, size, size], &x);
        let vars = forward_on_tape(&mut tape, &params, input).unwrap();
        let target = tape.constant(Tensor::vector(to32(&truth))).unwrap();
        let loss = tape.arccos_loss(vars.illuminant, target).unwrap();
        let r32 = to32(&r);
        let grads = tape.backward_seeded(&[(loss, &[1.0]), (vars.embedding, &r32)]).unwrap();
        let analytic = to64(grads.get(input).unwrap());

        let fd = central_diff(&x, FD_STEP, |probe| {
            let out = model.forward(probe, size);
            arccos_deg(&out.illuminant, &truth) + dot(&r, &out.embedding)
        });
        check.record(&analytic, &fd);
    }
    check
}

/// Every family, in a fixed order.
pub fn all_checks() -> Vec<Check> {
    let mut out = vec![
        curve_check(1),
        conv2d_check(1, 2),
        conv2d_check(2, 3),
        relu_check(4),
        affine_check(5),
        mean_pool_check(6),
    ];
    out.extend(elementwise_checks(7));
    out.extend(vector_checks(8));
    out.push(info_nce_check(9));
    out.push(model_input_check(10));
    out
}
