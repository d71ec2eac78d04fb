//! The assembled segmenter: backbone with pruning stages, guidance lookup and
//! mask decoder.

use serde::{Deserialize, Serialize};

use crate::backbone::{self, TokenState, VitConfig};
use crate::error::{Error, Result};
use crate::maskdec::{self, decode_mask};
use crate::numerics::{Real, Tensor, Var};
use crate::params::{Graph, Init, ParamSpec};
use crate::prune::{self, apply_pruning_stage, blend_gated, merge_for_decoder, Mode, PruneSchedule};
use crate::synthdata::GUIDE_PARAM;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vit: VitConfig,
    /// Width `d` of the guidance embedding and both decoders.
    pub guide_dim: usize,
    pub decoder_ffn_mult: usize,
    pub num_tasks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vit: VitConfig::default(),
            guide_dim: 32,
            decoder_ffn_mult: 4,
            num_tasks: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.guide_dim == 0 || self.decoder_ffn_mult == 0 || self.num_tasks == 0 {
            return Err(Error::Config("guide_dim, decoder_ffn_mult and num_tasks must be positive".into()));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.vit.param_specs();
        specs.extend(prune::prune_decoder_specs(self.vit.embed_dim, self.guide_dim, self.decoder_ffn_mult));
        specs.extend(maskdec::mask_decoder_specs(&self.vit, self.guide_dim, self.decoder_ffn_mult));
        specs.push(ParamSpec::new(GUIDE_PARAM, &[self.num_tasks, self.guide_dim], Init::Uniform(1.0)));
        specs
    }
}

/// What one pruning stage decided.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTrace {
    /// Boundary layer the stage follows.
    pub layer: usize,
    pub scores: Vec<f32>,
    /// Tokens active in the following layers (all of them in train mode).
    pub active: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Soft gates per stage (train mode only).
    pub gates: Vec<Var>,
    pub stages: Vec<StageTrace>,
    /// The `N×D` tokens handed to the mask decoder.
    pub merged: Var,
}

/// Guidance row for `task` as a `1×d` node.
pub fn guidance<T: Real>(g: &mut Graph<T>, task: usize, cfg: &ModelConfig) -> Result<Var> {
    if task >= cfg.num_tasks {
        return Err(Error::UnknownTask(task));
    }
    let table = g.param(GUIDE_PARAM)?;
    g.tape.gather_rows(table, &[task])
}

/// Patch embedding followed by layers `0..layers`.
pub fn encode_prefix<T: Real>(g: &mut Graph<T>, image: &Tensor<T>, layers: usize, cfg: &ModelConfig) -> Result<Var> {
    let x = backbone::embed_patches(g, image, &cfg.vit)?;
    let state = TokenState::all_active(x, cfg.vit.n_tokens());
    Ok(backbone::run_stage(g, state, 0..layers, &cfg.vit)?.values)
}

pub fn forward<T: Real>(
    g: &mut Graph<T>,
    image: &Tensor<T>,
    task: usize,
    schedule: &PruneSchedule,
    mode: Mode,
    cfg: &ModelConfig,
) -> Result<ForwardOutput> {
    let x = backbone::embed_patches(g, image, &cfg.vit)?;
    forward_tokens(g, x, 0, task, schedule, mode, cfg)
}

/// Runs the model from token values that have already passed layers
/// `0..start_layer`, which must not lie beyond the first boundary.
pub fn forward_tokens<T: Real>(
    g: &mut Graph<T>,
    tokens: Var,
    start_layer: usize,
    task: usize,
    schedule: &PruneSchedule,
    mode: Mode,
    cfg: &ModelConfig,
) -> Result<ForwardOutput> {
    let ranges = schedule.stage_ranges(cfg.vit.num_layers)?;
    if start_layer > ranges[0].end {
        return Err(Error::Config(format!(
            "tokens start after layer {start_layer}, past the first boundary {}",
            ranges[0].end
        )));
    }
    let seg = guidance(g, task, cfg)?;
    let mut state = TokenState::all_active(tokens, cfg.vit.n_tokens());
    state = backbone::run_stage(g, state, start_layer..ranges[0].end, &cfg.vit)?;
    let mut gates = Vec::with_capacity(schedule.len());
    let mut stages = Vec::with_capacity(schedule.len());
    for (m, range) in ranges.iter().enumerate().skip(1) {
        state = apply_pruning_stage(g, state, seg, schedule, m - 1, mode)?;
        stages.push(StageTrace {
            layer: range.start,
            scores: state.scores.clone().unwrap_or_default(),
            active: state.active.clone(),
        });
        let before = state.values;
        state = backbone::run_stage(g, state, range.clone(), &cfg.vit)?;
        if let Some(gate) = state.gates.take() {
            state.values = blend_gated(&mut g.tape, gate, state.values, before)?;
            gates.push(gate);
        }
    }
    let merged = merge_for_decoder(&state);
    let logits = decode_mask(g, merged, seg, &cfg.vit)?;
    Ok(ForwardOutput {
        logits,
        gates,
        stages,
        merged,
    })
}
