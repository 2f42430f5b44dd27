//! Run configuration: one TOML file with sections for data, model,
//! training, sampling, and eval. Unknown keys are rejected. Command-line
//! flags override individual values, and every command that produces
//! outputs writes the fully resolved configuration next to them so a run
//! can be reproduced from its artifacts alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use meshgen_core::error::{Error, Result};
use meshgen_core::model::{CondConfig, HourglassConfig, TrainConfig};
use meshgen_core::procgen::{Family, GenSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub sampling: SamplingSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub quant_level: u32,
    /// Meshes to generate (gen-dataset).
    pub count: usize,
    /// Restrict procedural families; empty means all.
    pub families: Vec<String>,
    /// Points per sampled cloud.
    pub points: usize,
    pub noise_pos: f64,
    pub noise_normal: f64,
    pub p_zero_normals: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            quant_level: 128,
            count: 64,
            families: Vec::new(),
            points: 1024,
            noise_pos: 0.0,
            noise_normal: 0.0,
            p_zero_normals: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub depths: [usize; 3],
    pub channels: usize,
    pub head_channels: usize,
    pub ffn_hidden: usize,
    pub window: usize,
    pub rope_theta: f64,
    pub cross_attention_interval: usize,
    pub conditioned: bool,
    pub cond_latents: usize,
    pub cond_depth: usize,
    /// Weight-initialization seed.
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            depths: [2, 4, 4],
            channels: 48,
            head_channels: 16,
            ffn_hidden: 128,
            window: 1152,
            rope_theta: 1e6,
            cross_attention_interval: 4,
            conditioned: false,
            cond_latents: 16,
            cond_depth: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub window: usize,
    pub stride: usize,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let tc = TrainConfig::default();
        TrainingSection {
            steps: tc.steps,
            batch_size: tc.batch_size,
            lr_max: tc.lr_max,
            lr_min: tc.lr_min,
            warmup_steps: tc.warmup_steps,
            weight_decay: tc.weight_decay,
            beta1: tc.beta1,
            beta2: tc.beta2,
            eps: tc.eps,
            clip: tc.clip,
            window: tc.window,
            stride: tc.stride,
            seed: tc.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub temperature: f64,
    pub seed: u64,
    /// Requested face count; generation is capped at twice this value.
    pub faces: u64,
    pub quad_ratio: f64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            temperature: 0.7,
            seed: 0,
            faces: 50,
            quad_ratio: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Surface samples per mesh for Chamfer evaluation.
    pub samples: usize,
    /// Token length for long-context curves; multiple of 9.
    pub eval_length: usize,
    /// Window standing in for unlimited context; 0 = derived from
    /// eval_length.
    pub unlimited_window: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            samples: 2048,
            eval_length: 4608,
            unlimited_window: 0,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)?;
                toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn model_config(&self) -> Result<HourglassConfig> {
        let m = &self.model;
        let cfg = HourglassConfig {
            quant_level: self.data.quant_level,
            depths: (m.depths[0], m.depths[1], m.depths[2]),
            channels: m.channels,
            head_channels: m.head_channels,
            ffn_hidden: m.ffn_hidden,
            window: m.window,
            rope_theta: m.rope_theta,
            cross_attention_interval: m.cross_attention_interval,
            cond: if m.conditioned {
                Some(CondConfig {
                    latents: m.cond_latents,
                    enc_depth: m.cond_depth,
                })
            } else {
                None
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.training;
        let tc = TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            warmup_steps: t.warmup_steps,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            clip: t.clip,
            window: t.window,
            stride: t.stride,
            seed: t.seed,
        };
        tc.validate()?;
        Ok(tc)
    }

    pub fn gen_spec(&self) -> Result<GenSpec> {
        let mut spec = GenSpec::default();
        if !self.data.families.is_empty() {
            spec.families = self
                .data
                .families
                .iter()
                .map(|name| parse_family(name))
                .collect::<Result<Vec<_>>>()?;
        }
        Ok(spec)
    }
}

pub fn parse_family(name: &str) -> Result<Family> {
    match name {
        "box" => Ok(Family::Box),
        "cylinder" => Ok(Family::Cylinder),
        "icosphere" => Ok(Family::Icosphere),
        "extruded_polygon" => Ok(Family::ExtrudedPolygon),
        "union_of_boxes" => Ok(Family::UnionOfBoxes),
        "torus" => Ok(Family::Torus),
        other => Err(Error::Config(format!(
            "unknown family {other:?} (expected box, cylinder, icosphere, \
             extruded_polygon, union_of_boxes, or torus)"
        ))),
    }
}

/// The reproducibility artifact: the command, its flags, and the full
/// resolved configuration, written as TOML beside the command's outputs.
#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    flags: &'a BTreeMap<String, String>,
    #[serde(flatten)]
    config: &'a RunConfig,
}

pub fn write_resolved(
    dir: &Path,
    command: &str,
    flags: &BTreeMap<String, String>,
    cfg: &RunConfig,
) -> Result<()> {
    let record = RunRecord {
        command,
        flags,
        config: cfg,
    };
    let text = toml::to_string_pretty(&record)
        .map_err(|e| Error::Config(format!("serializing resolved config: {e}")))?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{command}-resolved.toml")), text)?;
    Ok(())
}
