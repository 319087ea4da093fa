//! Model registry: architecture cards, model construction and the memory probe.

mod layers;
mod models;

use serde::{Deserialize, Serialize};

use crate::hpo::{self, Assignment, Domain, ParamDef, SearchSpace, Value};
use crate::{CoreError, Result};

pub use layers::NormKind;
pub use models::{default_levels, fourier_modes, Family, Model, ModelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMechanism {
    Channels,
    Recurrent,
    Attention,
    Trunk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructorParam {
    pub name: String,
    pub default: Value,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub name: Family,
    pub description: String,
    pub constructor_params: Vec<ConstructorParam>,
    pub search_space: SearchSpace,
    pub supports_aux_bce: bool,
    pub temporal_mechanism: TemporalMechanism,
}

fn cp(name: &str, default: Value, note: &str) -> ConstructorParam {
    ConstructorParam {
        name: name.into(),
        default,
        note: note.into(),
    }
}

fn ints(v: &[i64]) -> Vec<Value> {
    v.iter().map(|&i| Value::Int(i)).collect()
}

fn common_space(with_norm: bool) -> Vec<ParamDef> {
    let mut p = vec![
        ParamDef {
            name: hpo::LR.into(),
            domain: Domain::LogUniform { lo: 1e-5, hi: 1e-2 },
        },
        ParamDef {
            name: hpo::WEIGHT_DECAY.into(),
            domain: Domain::LogUniform { lo: 1e-6, hi: 1e-3 },
        },
        ParamDef {
            name: hpo::BATCH_SIZE.into(),
            domain: Domain::Categorical { values: ints(&[1, 2, 4]) },
        },
        ParamDef {
            name: hpo::BASE_CHANNELS.into(),
            domain: Domain::Categorical {
                values: ints(&[8, 16, 32, 64]),
            },
        },
    ];
    if with_norm {
        p.push(ParamDef {
            name: hpo::NORM.into(),
            domain: Domain::Categorical {
                values: vec![Value::Text("group".into()), Value::Text("instance".into())],
            },
        });
    }
    p
}

fn card(family: Family) -> ModelCard {
    use Family::*;
    let with_norm = !matches!(family, FNO | UFNO);
    let mut params = common_space(with_norm);
    if family.supports_aux_bce() {
        params.push(ParamDef {
            name: hpo::LAMBDA_BCE.into(),
            domain: Domain::LogUniform { lo: 1e-4, hi: 0.1 },
        });
    }
    if family == CNNTransformer {
        params.push(ParamDef {
            name: hpo::LAYERS.into(),
            domain: Domain::IntUniform { lo: 1, hi: 3 },
        });
        params.push(ParamDef {
            name: hpo::HEADS.into(),
            domain: Domain::Categorical { values: ints(&[1, 2, 4]) },
        });
    }
    let levels = cp(
        "levels",
        Value::Text("auto".into()),
        "pooling levels: 2 in 2-D, up to 4 in 3-D",
    );
    let kernel = cp("kernel", Value::Int(3), "3x3 in 2-D, 3x3x3 in 3-D");
    let (description, mechanism, extra) = match family {
        UNet => (
            "Encoder-decoder with skip connections. Local convolutions plus multi-scale context; \
             reproduces sharp, localized fronts well. Timesteps are emitted as output channels.",
            TemporalMechanism::Channels,
            vec![levels, kernel],
        ),
        ResUNet => (
            "U-Net with residual blocks. Residual paths ease optimisation of deeper encoders and \
             suit smooth, spatially extended fields such as pressure as well as sharp plumes.",
            TemporalMechanism::Channels,
            vec![
                levels,
                kernel,
                cp("zero_init_residual", Value::Text("false".into()), "identity-initialised residual branches"),
            ],
        ),
        RecurrentRUNet => (
            "Residual U-Net encoder with a ConvLSTM bottleneck unrolled over time, decoded per step \
             with shared skips. Explicit recurrence for step-to-step temporal evolution.",
            TemporalMechanism::Recurrent,
            vec![levels, kernel],
        ),
        EDConvLSTM => (
            "Convolutional encoder with channel and spatial attention, a ConvLSTM over time and a \
             skip-free decoder. Suited to sequence-like transient dynamics at coarse resolution.",
            TemporalMechanism::Recurrent,
            vec![levels, kernel],
        ),
        CNNTransformer => (
            "U-Net features combined with a causal transformer over per-timestep latent tokens; \
             attention weights mix the spatial features for each timestep. Long-range temporal coupling.",
            TemporalMechanism::Attention,
            vec![levels, kernel, cp("d_model", Value::Text("4*bc".into()), "token width")],
        ),
        UDeepONet => (
            "Operator learner: a U-Net branch produces spatial basis fields and an MLP trunk over \
             normalised time produces coefficients. Smooth temporal interpolation.",
            TemporalMechanism::Trunk,
            vec![levels, kernel, cp("trunk_width", Value::Text("2*bc".into()), "trunk hidden width")],
        ),
        FNO => (
            "Fourier neural operator: global spectral convolutions with truncated modes plus pointwise \
             mixing. Strong on smooth, globally coupled fields; weaker on sharp localized fronts.",
            TemporalMechanism::Channels,
            vec![
                cp("fourier_layers", Value::Int(4), "spectral layers"),
                cp("modes", Value::Text("min(8, n/2) per axis".into()), "retained modes"),
            ],
        ),
        UFNO => (
            "U-FNO: Fourier layers augmented with a small U-Net path in the later layers, adding local \
             detail to the global spectral path for multiphase plume fields.",
            TemporalMechanism::Channels,
            vec![
                cp("fourier_layers", Value::Int(2), "plain spectral layers"),
                cp("u_fourier_layers", Value::Int(2), "spectral + U-Net layers"),
                cp("modes", Value::Text("min(8, n/2) per axis".into()), "retained modes"),
            ],
        ),
    };
    ModelCard {
        name: family,
        description: description.into(),
        constructor_params: extra,
        search_space: SearchSpace::new(params),
        supports_aux_bce: family.supports_aux_bce(),
        temporal_mechanism: mechanism,
    }
}

pub fn list_models() -> Vec<ModelCard> {
    Family::ALL.into_iter().map(card).collect()
}

pub fn model_card(family: Family) -> ModelCard {
    card(family)
}

/// Registry dump consumed by prompt builders.
pub fn zoo_json() -> serde_json::Value {
    serde_json::json!({ "models": list_models() })
}

fn int_param(hp: &Assignment, name: &str, default: i64) -> Result<i64> {
    match hp.get(name) {
        None => Ok(default),
        Some(v) => v
            .as_i64()
            .ok_or_else(|| CoreError::Parameter(format!("{name} must be an integer, got {v}"))),
    }
}

/// Resolves a hyperparameter assignment into a concrete model spec.
pub fn spec_from_assignment(family: Family, hp: &Assignment, dims: [usize; 3], timesteps: usize) -> Result<ModelSpec> {
    let bc = int_param(hp, hpo::BASE_CHANNELS, 16)?;
    if bc <= 0 {
        return Err(CoreError::Parameter(format!("base_channels must be positive, got {bc}")));
    }
    let mut spec = ModelSpec::new(family, dims, timesteps, bc as usize);
    if let Some(v) = hp.get(hpo::NORM) {
        spec.norm = v
            .as_str()
            .and_then(NormKind::parse)
            .ok_or_else(|| CoreError::Parameter(format!("unknown norm {v}")))?;
    }
    spec.layers = int_param(hp, hpo::LAYERS, 1)? as usize;
    spec.heads = int_param(hp, hpo::HEADS, 1)? as usize;
    spec.validate()?;
    Ok(spec)
}

pub fn build_model(family: Family, hp: &Assignment, dims: [usize; 3], timesteps: usize, seed: u64) -> Result<Model> {
    let spec = spec_from_assignment(family, hp, dims, timesteps)?;
    Model::build(&spec, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub param_count: usize,
    pub peak_activation_bytes: usize,
    /// Parameters, gradients and two optimiser moments at 4 bytes, plus activations.
    pub estimated_bytes: usize,
    pub budget_bytes: usize,
    pub feasible: bool,
    pub reason: Option<String>,
}

/// Shape-only forward probe at the true input dimensions, scaled to `batch`.
pub fn estimate_memory(
    family: Family,
    hp: &Assignment,
    dims: [usize; 3],
    timesteps: usize,
    batch: usize,
    budget_bytes: usize,
) -> MemoryEstimate {
    match build_model(family, hp, dims, timesteps, 0) {
        Ok(model) => {
            let param_count = model.param_count();
            let peak = model.activation_bytes_per_sample() * batch.max(1);
            let estimated = peak + 16 * param_count;
            MemoryEstimate {
                param_count,
                peak_activation_bytes: peak,
                estimated_bytes: estimated,
                budget_bytes,
                feasible: estimated <= budget_bytes,
                reason: (estimated > budget_bytes)
                    .then(|| format!("estimated {estimated} bytes exceeds budget {budget_bytes}")),
            }
        }
        Err(e) => MemoryEstimate {
            param_count: 0,
            peak_activation_bytes: 0,
            estimated_bytes: 0,
            budget_bytes,
            feasible: false,
            reason: Some(e.to_string()),
        },
    }
}

/// Deterministic preference order used by the scripted reasoner. Sparse,
/// front-dominated targets favour skip-connected convolutional families with
/// the auxiliary occupancy term; smooth targets favour residual U-Nets and
/// spectral operators.
pub fn scripted_ranking(fraction_near_zero: f64) -> Vec<Family> {
    use Family::*;
    if fraction_near_zero > 0.9 {
        vec![ResUNet, UNet, RecurrentRUNet, EDConvLSTM, UFNO, CNNTransformer, UDeepONet, FNO]
    } else {
        vec![ResUNet, UNet, UFNO, FNO, UDeepONet, CNNTransformer, RecurrentRUNet, EDConvLSTM]
    }
}
