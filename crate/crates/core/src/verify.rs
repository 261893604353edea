//! Whole-model finite-difference check on the tiny configuration.

use spatem_tensor::{grad_check, Bound, GradCheckConfig, GradCheckReport, Mode, OpKind, Rng, Tape, Tensor, TensorError, Var};

use crate::config::{ContextMode, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::model::Model;

/// Tolerance for the full model.
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Largest share of probed coordinates that may be skipped as non-smooth.
pub const MAX_SKIPPED: f64 = 0.1;

/// Whether a model check report meets both the error and the skip bound.
pub fn model_check_passed(report: &GradCheckReport) -> bool {
    let probed = report.coords_checked + report.coords_skipped;
    report.max_rel_error < MODEL_TOLERANCE && (report.coords_skipped as f64) <= MAX_SKIPPED * probed as f64
}

/// Dice-loss gradient of the tiny both-context model, in `f64`, checked at
/// `per_param` random coordinates of every trainable parameter.
pub fn model_grad_check(per_param: usize, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let config = ModelConfig::tiny(Variant::Uspatem, ContextMode::Both);
    let mut model = Model::<f64>::build(config.clone(), 7)?;
    let mut rng = Rng::new(8);
    // At init the projections are tiny and zero embeddings make context
    // tiles look alike, so attention gradients sit near round-off. Check at
    // a generic point instead.
    for q in model.params_mut().iter_mut().filter(|q| q.trainable && q.name.starts_with("transformer.")) {
        for v in q.value.data_mut() {
            *v += rng.uniform() - 0.5;
        }
    }
    let p = config.tile_size;
    let k = config.tile_indices().len();
    let tiles = rng.uniform_tensor::<f64>(&[1, k, 3, p, p], 0.0, 1.0);
    let target = Tensor::from_fn(&[1, config.classes, p, p], |_| rng.bernoulli(0.3) as u8 as f64);

    let params = model.params();
    let inputs: Vec<Tensor<f64>> = params.iter().filter(|q| q.trainable).map(|q| q.value.clone()).collect();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> spatem_tensor::Result<Var> {
        let mut next = vars.iter();
        let bound: Vec<Var> = params
            .iter()
            .map(|q| if q.trainable { *next.next().expect("one var per trainable") } else { tape.constant(q.value.clone()) })
            .collect();
        let bound = Bound::new(bound);
        let x = tape.constant(tiles.clone());
        let mut dropout_rng = Rng::new(9);
        let out = model.forward(tape, &bound, x, Mode::Train, Some(&mut dropout_rng)).map_err(into_tensor)?;
        tape.dice_loss(out.probs, &target, 1.0)
    };
    let cfg = GradCheckConfig { eps: 1e-5, max_coords: None, per_input: Some(per_param), skip_nonsmooth: true, seed: 10, fault };
    Ok(grad_check(f, &inputs, &cfg)?)
}

fn into_tensor(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::InvalidArgument { op: "model", msg: other.to_string() },
    }
}
