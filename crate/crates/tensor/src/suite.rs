//! The standard per-op gradient check suite.
//!
//! Each case builds a small random instance, projects the op output onto a
//! fixed random tensor and compares tape gradients with central differences.

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::ops::conv::Conv2dSpec;
use crate::ops::norm::BatchNormMode;
use crate::ops::pool::UpsampleMode;
use crate::rng::Rng;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Tolerance every op must meet.
pub const OP_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    pub kind: OpKind,
    pub report: GradCheckReport,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < OP_TOLERANCE
    }
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.uniform_tensor(shape, -1.0, 1.0)
}

/// Weighted sum against a fixed random tensor so every output coordinate
/// carries a distinct upstream gradient.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = Rng::new(seed).uniform_tensor(tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

struct Runner {
    cfg: GradCheckConfig,
    out: Vec<OpCheck>,
}

impl Runner {
    fn raw(&mut self, name: &str, kind: OpKind, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<()> {
        let report = grad_check(f, inputs, &self.cfg)?;
        self.out.push(OpCheck { name: name.to_string(), kind, report });
        Ok(())
    }

    fn check(&mut self, name: &str, kind: OpKind, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<()> {
        self.raw(name, kind, inputs, |t, v| {
            let y = f(t, v)?;
            project(t, y, 99)
        })
    }
}

/// Runs one check per differentiable op kind (several for ops with modes).
/// `fault` flips the sign of one backward rule, for testing the checker.
pub fn op_suite(fault: Option<OpKind>) -> Result<Vec<OpCheck>> {
    let mut r = Runner {
        cfg: GradCheckConfig { eps: 1e-5, max_coords: Some(48), per_input: None, skip_nonsmooth: false, seed: 3, fault },
        out: Vec::new(),
    };
    let mut rng = Rng::new(0);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[3, 4]);
    let bias = random(&mut rng, &[4]);
    r.check("add", OpKind::Add, &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]))?;
    r.check("sub", OpKind::Sub, &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]))?;
    r.check("mul", OpKind::Mul, &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]))?;
    r.check("add_bias", OpKind::AddBias, &[a.clone(), bias], |t, v| t.add_bias(v[0], v[1]))?;
    r.check("scale", OpKind::Scale, std::slice::from_ref(&a), |t, v| t.scale(v[0], -2.5))?;
    r.raw("sum_all", OpKind::SumAll, std::slice::from_ref(&a), |t, v| t.sum_all(v[0]))?;
    r.check("gelu", OpKind::Gelu, std::slice::from_ref(&a), |t, v| t.gelu(v[0]))?;
    r.check("sigmoid", OpKind::Sigmoid, std::slice::from_ref(&a), |t, v| t.sigmoid(v[0]))?;
    r.check("softmax_last", OpKind::Softmax, &[a.map(|x| 3.0 * x)], |t, v| t.softmax_last(v[0]))?;
    // keep relu inputs away from the kink
    let away = a.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
    r.check("relu", OpKind::Relu, &[away], |t, v| t.relu(v[0]))?;
    let x = random(&mut rng, &[4, 5]);
    r.check("dropout", OpKind::Dropout, &[x], |t, v| t.dropout(v[0], 0.3, &mut Rng::new(11)))?;

    let a = random(&mut rng, &[2, 3, 4]);
    let b = random(&mut rng, &[2, 4, 5]);
    let shared = random(&mut rng, &[4, 5]);
    r.check("matmul batched", OpKind::MatMul, &[a.clone(), b], |t, v| t.matmul(v[0], v[1]))?;
    r.check("matmul shared", OpKind::MatMul, &[a, shared], |t, v| t.matmul(v[0], v[1]))?;

    let x = random(&mut rng, &[2, 3, 6, 6]);
    let w = random(&mut rng, &[4, 3, 3, 3]);
    let b = random(&mut rng, &[4]);
    r.check("conv2d", OpKind::Conv2d, &[x.clone(), w, b.clone()], |t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(2, 1)))?;
    let wt = random(&mut rng, &[3, 4, 3, 3]);
    r.check("conv_transpose2d", OpKind::Conv2d, &[x, wt, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::transposed(2, 1, 1)))?;

    let x = random(&mut rng, &[3, 2, 3, 3]);
    let g = random(&mut rng, &[2]);
    let b = random(&mut rng, &[2]);
    r.check("batch_norm train", OpKind::BatchNorm, &[x.clone(), g.clone(), b.clone()], |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, 1e-5)?.0)
    })?;
    let (mean, var) = ([0.1, -0.2], [0.5, 2.0]);
    r.check("batch_norm eval", OpKind::BatchNorm, &[x, g, b], |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], BatchNormMode::Eval { mean: &mean, var: &var }, 1e-5)?.0)
    })?;
    let x = random(&mut rng, &[4, 6]);
    let g = random(&mut rng, &[6]);
    let b = random(&mut rng, &[6]);
    r.check("layer_norm", OpKind::LayerNorm, &[x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))?;

    let x = random(&mut rng, &[2, 4, 4]);
    r.check("max_pool", OpKind::MaxPool, std::slice::from_ref(&x), |t, v| t.max_pool(v[0], 2))?;
    r.check("upsample nearest", OpKind::Upsample, std::slice::from_ref(&x), |t, v| t.upsample(v[0], 2, UpsampleMode::Nearest))?;
    r.check("upsample bilinear", OpKind::Upsample, std::slice::from_ref(&x), |t, v| t.upsample(v[0], 3, UpsampleMode::Bilinear))?;
    r.check("reshape", OpKind::Reshape, std::slice::from_ref(&x), |t, v| t.reshape(v[0], &[8, 4]))?;
    r.check("permute", OpKind::Permute, std::slice::from_ref(&x), |t, v| t.permute(v[0], &[2, 0, 1]))?;
    r.check("narrow", OpKind::Narrow, std::slice::from_ref(&x), |t, v| t.narrow(v[0], 1, 1, 2))?;
    let y = random(&mut rng, &[2, 3, 4]);
    r.check("concat", OpKind::Concat, &[x, y], |t, v| t.concat(&[v[0], v[1]], 1))?;

    let pred = rng.uniform_tensor::<f64>(&[2, 3, 4, 4], 0.05, 0.95);
    let target = Tensor::from_fn(&[2, 3, 4, 4], |i| ((i * 7) % 3 == 0) as u8 as f64);
    r.raw("dice_loss", OpKind::Dice, &[pred], |t, v| t.dice_loss(v[0], &target, 1.0))?;
    Ok(r.out)
}
