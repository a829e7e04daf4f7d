//! Central finite-difference oracle for tape operations.

use distillkit::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f32 = 1e-3;
pub const TOLERANCE: f32 = 1e-2;

pub type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Inputs the op differentiates; the rest (loss targets) are constants.
    pub differentiable: Vec<bool>,
    pub build: OpFn,
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
}

/// Scalar objective: the op output itself when scalar, otherwise its dot
/// product with a fixed random projection. Accumulated in f64.
fn objective(case: &OpCase, inputs: &[Tensor], proj: Option<&[f32]>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars).expect("op failed");
    let data = tape.data(out);
    match proj {
        None => data[0] as f64,
        Some(r) => data.iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum(),
    }
}

/// Max over inputs of `|analytic - numeric|_inf / max(|numeric|_inf, 1e-3)`.
pub fn max_relative_error(case: &OpCase, seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = case.shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(&case.differentiable)
        .map(|(t, &d)| if d { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let out = (case.build)(&mut tape, &vars).expect("op failed");
    let proj: Option<Vec<f32>> = if tape.value(out).is_scalar() {
        None
    } else {
        Some((0..tape.value(out).numel()).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    };
    let loss = match &proj {
        None => out,
        Some(r) => {
            let r = tape.constant(Tensor::new(tape.shape(out).to_vec(), r.clone()).unwrap());
            let prod = tape.mul(out, r).unwrap();
            tape.sum(prod)
        }
    };
    tape.backward(loss).unwrap();

    let mut worst = 0.0f32;
    for (i, var) in vars.iter().enumerate() {
        if !case.differentiable[i] {
            continue;
        }
        let analytic = tape.grad(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0f32; inputs[i].numel()];
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let fp = objective(case, &plus, proj.as_deref());
            let fm = objective(case, &minus, proj.as_deref());
            numeric[j] = ((fp - fm) / (2.0 * STEP as f64)) as f32;
        }
        let scale = numeric.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-3);
        let diff = analytic.iter().zip(&numeric).fold(0.0f32, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(diff / scale);
    }
    worst
}

/// Every differentiable tape operation, on small random inputs.
pub fn all_ops() -> Vec<OpCase> {
    fn case(name: &'static str, shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpCase {
        OpCase {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            differentiable: vec![true; shapes.len()],
            build: Box::new(f),
        }
    }
    fn loss(name: &'static str, shape: &[usize], f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpCase {
        OpCase {
            name,
            shapes: vec![shape.to_vec(), shape.to_vec()],
            differentiable: vec![true, false],
            build: Box::new(f),
        }
    }
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        case("matmul_batched", &[&[2, 3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1])),
        case("add", &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1])),
        case("sub", &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1])),
        case("scale", &[&[5]], |t, v| Ok(t.scale(v[0], -1.7))),
        case("add_tiled", &[&[3, 4], &[4]], |t, v| t.add_tiled(v[0], v[1])),
        case("sum", &[&[2, 3]], |t, v| Ok(t.sum(v[0]))),
        case("mean", &[&[2, 3]], |t, v| Ok(t.mean(v[0]))),
        case("reshape", &[&[2, 3]], |t, v| t.reshape(v[0], &[3, 2])),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        case("gelu", &[&[12]], |t, v| {
            let x = t.scale(v[0], 3.0);
            Ok(t.gelu(x))
        }),
        case("softmax_last", &[&[3, 5]], |t, v| t.softmax(v[0], 1)),
        case("softmax_first", &[&[3, 5]], |t, v| t.softmax(v[0], 0)),
        case("attention", &[&[2 * 3, 3 * 4]], |t, v| t.attention(v[0], 2, 3, 2)),
        loss("cosine_loss", &[3, 4], |t, v| t.cosine_loss(v[0], v[1], 1e-8)),
        loss("smooth_l1_loss", &[3, 4], |t, v| {
            // Scaled so both branches of the penalty are exercised.
            let p = t.scale(v[0], 2.0);
            t.smooth_l1_loss(p, v[1], 1.0)
        }),
        loss("mse_loss", &[3, 4], |t, v| t.mse_loss(v[0], v[1])),
        case("cross_entropy", &[&[4, 3]], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2])),
        case("bicubic_up", &[&[3, 3, 2]], |t, v| t.bicubic_resize(v[0], 5, 4)),
        case("bicubic_down_batched", &[&[2, 5, 4, 2]], |t, v| t.bicubic_resize(v[0], 3, 2)),
        case("select_rows", &[&[4, 3]], |t, v| t.select_rows(v[0], &[3, 0, 3])),
        case("concat_rows", &[&[2, 3], &[1, 3]], |t, v| t.concat_rows(v[0], v[1])),
        case("prepend_rows", &[&[2, 3], &[4, 3]], |t, v| t.prepend_rows(v[0], v[1], 2)),
    ]
}
