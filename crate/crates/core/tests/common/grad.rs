//! Finite-difference gradient checks shared by the gradcheck suite and the
//! acceptance run.

use super::{fd_grad, ragged_batch, random_tensor, rel_err, rel_err_floor, tiny_model};
use spd_core::kd::{layer_loss, soft_cross_entropy, task_cross_entropy, total_loss, KdConfig};
use spd_core::model::{attention, forward_parts, EncoderModel};
use spd_core::rng::Rng;
use spd_core::tape::{Tape, Var};
use spd_core::tensor::Tensor;
use spd_core::Result;

pub const SEEDS: u64 = 10;
pub const OP_TOL: f64 = 1e-5;
pub const END_TO_END_TOL: f64 = 1e-4;
/// Per-tensor errors are measured against at least this fraction of the
/// global gradient norm, so identically vanishing gradients compare
/// against finite-difference round-off rather than against zero.
pub const GRAD_FLOOR: f64 = 1e-3;

pub fn norm(ts: &[Tensor]) -> f64 {
    ts.iter()
        .flat_map(|t| t.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

pub type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub group: &'static str,
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Box<Build>,
}

fn case(
    group: &'static str,
    name: &'static str,
    shapes: &[&[usize]],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        group,
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// Every differentiable tape operation and loss term.
pub fn op_cases() -> Vec<OpCase> {
    let mut v = vec![
        case("elementwise", "add", &[&[3, 4], &[3, 4]], |t, v| {
            t.add(v[0], v[1])
        }),
        case("elementwise", "sub", &[&[3, 4], &[3, 4]], |t, v| {
            t.sub(v[0], v[1])
        }),
        case("elementwise", "mul", &[&[3, 4], &[3, 4]], |t, v| {
            t.mul(v[0], v[1])
        }),
        case("elementwise", "scale", &[&[5]], |t, v| {
            Ok(t.scale(v[0], -2.5))
        }),
        case("elementwise", "add_bias", &[&[2, 3, 4], &[4]], |t, v| {
            t.add_bias(v[0], v[1])
        }),
        case("elementwise", "gelu", &[&[4, 5]], |t, v| Ok(t.gelu(v[0]))),
        case("elementwise", "tanh", &[&[4, 5]], |t, v| Ok(t.tanh(v[0]))),
        case("layout", "matmul", &[&[3, 4], &[4, 2]], |t, v| {
            t.matmul(v[0], v[1])
        }),
        case(
            "layout",
            "batch_matmul",
            &[&[2, 3, 3, 4], &[2, 3, 4, 2]],
            |t, v| t.batch_matmul(v[0], v[1]),
        ),
        case("layout", "permute", &[&[2, 3, 4]], |t, v| {
            t.permute(v[0], &[2, 0, 1])
        }),
        case("layout", "transpose", &[&[2, 3, 4]], |t, v| {
            t.transpose(v[0])
        }),
        case("layout", "reshape", &[&[2, 6]], |t, v| {
            t.reshape(v[0], &[3, 4])
        }),
        case("layout", "narrow", &[&[3, 5]], |t, v| {
            t.narrow(v[0], 1, 1, 3)
        }),
        case("layout", "embedding", &[&[6, 3]], |t, v| {
            t.embedding(v[0], &[0, 5, 2, 2, 4])
        }),
        case("reduction", "sum", &[&[3, 4]], |t, v| Ok(t.sum(v[0]))),
        case("reduction", "mean", &[&[3, 4]], |t, v| Ok(t.mean(v[0]))),
        case("reduction", "mse", &[&[3, 4], &[3, 4]], |t, v| {
            t.mse(v[0], v[1])
        }),
        case("reduction", "softmax last", &[&[3, 5]], |t, v| {
            t.softmax(v[0], 1)
        }),
        case("reduction", "softmax first", &[&[3, 5]], |t, v| {
            t.softmax(v[0], 0)
        }),
        case("reduction", "log_softmax", &[&[3, 5]], |t, v| {
            t.log_softmax(v[0], 1)
        }),
        case("reduction", "pick", &[&[3, 4]], |t, v| {
            t.pick(v[0], &[3, 0, 2])
        }),
        case("reduction", "layer_norm", &[&[4, 6], &[6], &[6]], |t, v| {
            t.layer_norm(v[0], v[1], v[2])
        }),
    ];

    let mask = Tensor::new(
        vec![1, 2, 3, 3],
        (0..18)
            .map(|i| if i % 3 == 2 { -1e9 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    v.push(case(
        "attention",
        "attention",
        &[&[1, 2, 3, 4], &[1, 2, 3, 4], &[1, 2, 3, 4]],
        move |t, v| {
            let m = t.constant(mask.clone());
            let (z, a) = attention(t, v[0], v[1], v[2], Some(m))?;
            let zf = t.reshape(z, &[24])?;
            let af = t.reshape(a, &[18])?;
            let zs = t.sum(zf);
            let az = t.mul(af, af)?;
            let as_ = t.sum(az);
            t.add(zs, as_)
        },
    ));

    v.push(case("loss", "task_cross_entropy", &[&[3, 3]], |t, v| {
        task_cross_entropy(t, v[0], &[2, 0, 1])
    }));
    for (temp, sym) in [(1.0, false), (2.0, false), (3.0, true)] {
        let teacher = random_tensor(&[3, 4], &mut Rng::new(99)).map(|x| 3.0 * x);
        v.push(case(
            "loss",
            "soft_cross_entropy",
            &[&[3, 4]],
            move |t, v| soft_cross_entropy(t, &teacher, v[0], temp, sym),
        ));
    }
    v
}

/// Worst relative error over all inputs of `build`, contracted with a
/// fixed random cotangent so every output coordinate matters.
pub fn op_error(seed: u64, shapes: &[Vec<usize>], build: &Build) -> f64 {
    let mut rng = Rng::new(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let cot = random_tensor(tape.shape(out), &mut rng);
    let c = tape.constant(cot.clone());
    let prod = tape.mul(out, c).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs).unwrap();
        t.value(o)
            .data()
            .iter()
            .zip(cot.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad_tensor(*v);
        let numeric = fd_grad(inputs[i].data(), |x| {
            let mut xs = inputs.clone();
            xs[i] = Tensor::new(inputs[i].shape().to_vec(), x.to_vec()).unwrap();
            eval(&xs)
        });
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

/// Worst error of `case` over the seed range.
pub fn case_error(case: &OpCase) -> f64 {
    (0..SEEDS)
        .map(|s| op_error(s, &case.shapes, &*case.build))
        .fold(0.0, f64::max)
}

/// Distillation loss of `student` against `teacher`, on a fresh tape.
fn distill_value(student: &EncoderModel, teacher: &EncoderModel, cfg: &KdConfig, seed: u64) -> f64 {
    let batch = ragged_batch(seed);
    let target = teacher.trace(&batch).unwrap();
    let mut tape = Tape::new();
    let layers: Vec<_> = student.layers.iter().map(|l| (l, false)).collect();
    let f = forward_parts(&mut tape, student, &layers, false, &batch).unwrap();
    let (loss, _) = total_loss(&mut tape, &target, &f.trace, cfg, Some(&batch.labels)).unwrap();
    tape.value(loss).item()
}

/// The two loss settings the end-to-end check covers.
pub fn kd_configs() -> [KdConfig; 2] {
    [
        KdConfig::default(),
        KdConfig {
            lambda: Some(vec![0.5, 2.0, 1.5]),
            temperature: 2.0,
            symmetric_temp: true,
            label_ce: true,
        },
    ]
}

/// Worst per-tensor error of the full loss over every named parameter,
/// with the parameter name.
pub fn end_to_end_error(seed: u64, cfg: &KdConfig) -> (f64, String) {
    let teacher = tiny_model(1000 + seed);
    let student = tiny_model(seed);
    let batch = ragged_batch(seed);
    let target = teacher.trace(&batch).unwrap();

    let mut tape = Tape::new();
    let f = student.forward_trainable(&mut tape, &batch).unwrap();
    let (loss, _) = total_loss(&mut tape, &target, &f.trace, cfg, Some(&batch.labels)).unwrap();
    tape.backward(loss).unwrap();
    let mut analytic: Vec<Tensor> = f.embeddings.iter().map(|&v| tape.grad_tensor(v)).collect();
    for l in &f.layers {
        analytic.extend(l.grads(&tape));
    }
    analytic.extend(f.head.iter().map(|&v| tape.grad_tensor(v)));

    let names: Vec<String> = student.named_params().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), analytic.len());
    let floor = GRAD_FLOOR * norm(&analytic);
    let mut worst = (0.0, String::new());
    for (i, name) in names.iter().enumerate() {
        let base = student.named_params()[i].1.clone();
        let numeric = fd_grad(base.data(), |x| {
            let mut s = student.clone();
            let mut params = s.named_params_mut();
            *params[i].1 = Tensor::new(base.shape().to_vec(), x.to_vec()).unwrap();
            distill_value(&s, &teacher, cfg, seed)
        });
        let e = rel_err_floor(analytic[i].data(), &numeric, floor);
        if e > worst.0 {
            worst = (e, name.clone());
        }
    }
    worst
}

/// Error of the layer-`i` loss gradient with respect to the token table.
pub fn layer_loss_error(seed: u64, i: usize) -> f64 {
    let teacher = tiny_model(500 + seed);
    let student = tiny_model(seed);
    let batch = ragged_batch(seed);
    let target = teacher.trace(&batch).unwrap();
    let cfg = KdConfig::default();
    let mut tape = Tape::new();
    let f = student.forward_trainable(&mut tape, &batch).unwrap();
    let loss = layer_loss(&mut tape, i, &target, &f.trace, &cfg).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad_tensor(f.embeddings[0]);
    let base = student.embeddings.token.clone();
    let numeric = fd_grad(base.data(), |x| {
        let mut s = student.clone();
        s.embeddings.token = Tensor::new(base.shape().to_vec(), x.to_vec()).unwrap();
        let mut t = Tape::new();
        let layers: Vec<_> = s.layers.iter().map(|l| (l, false)).collect();
        let f = forward_parts(&mut t, &s, &layers, false, &batch).unwrap();
        let l = layer_loss(&mut t, i, &target, &f.trace, &cfg).unwrap();
        t.value(l).item()
    });
    rel_err_floor(
        analytic.data(),
        &numeric,
        GRAD_FLOOR * norm(std::slice::from_ref(&analytic)),
    )
}
