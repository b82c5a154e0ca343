//! Finite-difference check of every model parameter in float64.

use mmvt_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{MMModel, ModelConfig, ModelInputs, ParamKind};
use crate::model_spec::{parse_model_spec, EncoderDims, Modality};
use crate::rng;
use crate::trainer::two_head_loss;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_SMOOTHING: f64 = 0.1;
/// Denominator floor of the relative error. A loss near 4 is resolved to
/// about 1e-15, so differences of near-zero gradients carry ~1e-10 of
/// roundoff; the floor keeps that from reading as a relative error.
pub const GRADCHECK_FLOOR: f64 = 1e-5;

/// Two views of different modalities, hidden 16, two blocks each, one
/// fusion, 4 frames at 32×32.
pub fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::new(parse_model_spec("Ti/2:F+Ti/2:S").expect("valid spec"), 4, 32, 32);
    c.view_dims = Some(EncoderDims {
        layers: 2,
        heads: 2,
        hidden: 16,
        mlp_dim: 32,
    });
    c.global_dims = Some(EncoderDims {
        layers: 1,
        heads: 2,
        hidden: 16,
        mlp_dim: 32,
    });
    c.n_verbs = 5;
    c.n_nouns = 7;
    c
}

/// Parameters drawn well away from the trained-from-scratch init so that
/// biases, norms and position embeddings all carry non-trivial gradients.
pub fn randomized_model(config: ModelConfig, seed: u64) -> Result<MMModel<f64>> {
    let mut r = rng::stream(seed, "gradcheck-params", &[]);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    MMModel::build(config, &mut |kind, dims| {
        let fan_in = if kind == ParamKind::Weight { dims[1] } else { 1 };
        let (centre, std) = match kind {
            ParamKind::Weight => (0.0, 1.0 / (fan_in as f64).sqrt()),
            ParamKind::NormScale => (1.0, 0.2),
            _ => (0.0, 0.2),
        };
        Tensor::from_fn(dims.to_vec(), |_| centre + std * n.sample(&mut r))
    })
}

pub fn random_inputs(config: &ModelConfig, seed: u64) -> ModelInputs<f64> {
    let mut r = rng::stream(seed, "gradcheck-inputs", &[]);
    let mut gen = |dims: Vec<usize>| Tensor::from_fn(dims, |_| r.random_range(-1.0..1.0));
    let (f, h, w) = (config.frames, config.height, config.width);
    let mods = config.spec.modalities();
    ModelInputs {
        rgb: mods.contains(&Modality::Rgb).then(|| gen(vec![f, h, w, 3])),
        flow: mods.contains(&Modality::Flow).then(|| gen(vec![f, h, w, 2])),
        spec: mods.contains(&Modality::Spectrogram).then(|| gen(vec![f, 96, 64])),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked_scalars: usize,
    pub params: Vec<ParamReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn loss_on(t: &mut Tape<f64>, p: &[Var], model: &MMModel<f64>, inputs: &ModelInputs<f64>, verb: usize, noun: usize) -> Result<Var> {
    let l = model.forward(t, p, inputs, None)?;
    two_head_loss(t, l.verb, l.noun, &[verb], &[noun], GRADCHECK_SMOOTHING)
}

/// Compares the backward pass against central differences on every scalar
/// of every parameter (eval mode, smoothed two-head loss).
pub fn check_model(model: &MMModel<f64>, inputs: &ModelInputs<f64>, verb: usize, noun: usize) -> Result<GradcheckReport> {
    let mut t = Tape::new();
    let p = model.params.bind(&mut t);
    let loss = loss_on(&mut t, &p, model, inputs, verb, noun)?;
    let grads = t.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = p.iter().map(|&v| grads.get_or_zeros(&t, v)).collect();

    // one no-grad tape whose parameter leaves are perturbed in place
    let mut t = Tape::no_grad();
    let p = model.params.bind(&mut t);
    let bound = t.len();
    let eval = |t: &mut Tape<f64>| -> Result<f64> {
        let loss = loss_on(t, &p, model, inputs, verb, noun)?;
        let v = t.value(loss).item()?;
        t.truncate(bound);
        Ok(v)
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked_scalars: 0,
        params: Vec::new(),
    };
    for id in model.params.ids() {
        let name = model.params.name(id);
        let leaf = p[id.index()];
        let numel = model.params.get(id).numel();
        let mut worst = 0.0f64;
        for i in 0..numel {
            let orig = model.params.get(id).data()[i];
            t.leaf_value_mut(leaf)?.data_mut()[i] = orig + GRADCHECK_STEP;
            let plus = eval(&mut t)?;
            t.leaf_value_mut(leaf)?.data_mut()[i] = orig - GRADCHECK_STEP;
            let minus = eval(&mut t)?;
            t.leaf_value_mut(leaf)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
            let e = relative_error_with_floor(analytic[id.index()].data()[i], numeric, GRADCHECK_FLOOR);
            worst = worst.max(e);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst_param = name.to_string();
                report.worst_index = i;
            }
        }
        report.checked_scalars += numel;
        report.params.push(ParamReport {
            name: name.to_string(),
            numel,
            max_rel_error: worst,
        });
    }
    Ok(report)
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// The full suite on the tiny model.
pub fn run(seed: u64) -> Result<GradcheckReport> {
    let config = tiny_config();
    let inputs = random_inputs(&config, seed);
    let model = randomized_model(config, seed)?;
    check_model(&model, &inputs, 3, 4)
}
