//! The ViT encoder: patch embedding, positional embedding, pre-norm
//! transformer layers, and staged execution over a subset of active tokens.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, attention_specs, ffn_specs, linear_specs, norm_specs};
use crate::numerics::{Real, Tensor, Var};
use crate::params::{Graph, Init, ParamSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
}

impl Default for VitConfig {
    /// 32×32 images, 4×4 patches (64 tokens), width 64, 8 layers, 4 heads.
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            patch_size: 4,
            embed_dim: 64,
            num_layers: 8,
            num_heads: 4,
            ffn_mult: 4,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        patch_grid_length(self.image_height, self.image_width, self.patch_size)?;
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("num_layers and ffn_mult must be positive".into()));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn grid_width(&self) -> usize {
        self.image_width / self.patch_size
    }

    /// Length of one flattened patch, `3·P²`.
    pub fn patch_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.embed_dim;
        let mut specs = linear_specs("vit.patch", self.patch_len(), d);
        specs.push(ParamSpec::new("vit.pos", &[self.n_tokens(), d], Init::FanIn(d)));
        for i in 0..self.num_layers {
            let p = format!("vit.layer{i}");
            specs.extend(norm_specs(&format!("{p}.ln1"), d));
            specs.extend(attention_specs(&format!("{p}.attn"), d));
            specs.extend(norm_specs(&format!("{p}.ln2"), d));
            specs.extend(ffn_specs(&format!("{p}.ffn"), d, self.ffn_mult * d));
        }
        specs
    }
}

/// Number of patch tokens, `H·W / P²`.
pub fn patch_grid_length(height: usize, width: usize, patch: usize) -> Result<usize> {
    if patch == 0 || height == 0 || width == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Config(format!(
            "image {height}×{width} is not divisible into {patch}×{patch} patches"
        )));
    }
    Ok(height * width / (patch * patch))
}

/// Rearranges a `3×H×W` image into `N × 3P²` rows, one per patch in
/// row-major grid order. Within a row the layout is channel, then pixel row,
/// then pixel column.
pub fn patchify<T: Real>(img: &Tensor<T>, cfg: &VitConfig) -> Result<Tensor<T>> {
    let (h, w, p) = (cfg.image_height, cfg.image_width, cfg.patch_size);
    if img.shape() != [3, h, w] {
        return Err(Error::Dimension {
            op: "patchify",
            lhs: img.shape().to_vec(),
            rhs: vec![3, h, w],
        });
    }
    let gw = w / p;
    let n = cfg.n_tokens();
    let src = img.data();
    let mut out = Vec::with_capacity(n * cfg.patch_len());
    for idx in 0..n {
        let (pi, pj) = (idx / gw, idx % gw);
        for c in 0..3 {
            for y in 0..p {
                let row = c * h * w + (pi * p + y) * w + pj * p;
                out.extend_from_slice(&src[row..row + p]);
            }
        }
    }
    Tensor::new(vec![n, cfg.patch_len()], out)
}

/// Linear projection of every flattened patch plus the learned positional
/// embedding, giving `N×D` tokens.
pub fn embed_patches<T: Real>(g: &mut Graph<T>, img: &Tensor<T>, cfg: &VitConfig) -> Result<Var> {
    let patches = patchify(img, cfg)?;
    let x = g.input(patches);
    let proj = layers::linear(g, x, "vit.patch")?;
    let pos = g.param("vit.pos")?;
    g.tape.add(proj, pos)
}

/// `x' = x + MHSA(LN(x))`, then `x' + FFN(LN(x'))`.
pub fn vit_layer<T: Real>(g: &mut Graph<T>, tokens: Var, layer: usize, cfg: &VitConfig) -> Result<Var> {
    let p = format!("vit.layer{layer}");
    let h = layers::layer_norm(g, tokens, &format!("{p}.ln1"))?;
    let a = layers::attention(g, h, h, &format!("{p}.attn"), cfg.num_heads)?;
    let x = g.tape.add(tokens, a)?;
    let h = layers::layer_norm(g, x, &format!("{p}.ln2"))?;
    let f = layers::ffn(g, h, &format!("{p}.ffn"))?;
    g.tape.add(x, f)
}

/// Per-token activity over the full `N`-token sequence.
///
/// `values` always holds all `N` rows: active tokens carry their latest
/// layer output, frozen tokens the value they had when they were frozen.
#[derive(Clone, Debug)]
pub struct TokenState {
    pub active: Vec<bool>,
    pub values: Var,
    /// Relevance scores from the most recent pruning stage.
    pub scores: Option<Vec<f32>>,
    /// Soft gates from the most recent pruning stage (training only).
    pub gates: Option<Var>,
}

impl TokenState {
    pub fn all_active(values: Var, n_tokens: usize) -> Self {
        Self {
            active: vec![true; n_tokens],
            values,
            scores: None,
            gates: None,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.active.len()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.active.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect()
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Runs `layers` over the active tokens only. Active rows are gathered into a
/// compact sequence, transformed, and scattered back; frozen rows are copied
/// through untouched.
pub fn run_stage<T: Real>(g: &mut Graph<T>, state: TokenState, layers: Range<usize>, cfg: &VitConfig) -> Result<TokenState> {
    let idx = state.active_indices();
    if idx.is_empty() {
        return Err(Error::Config("run_stage: no active tokens".into()));
    }
    if layers.is_empty() {
        return Ok(state);
    }
    let all = idx.len() == state.n_tokens();
    let mut x = if all { state.values } else { g.tape.gather_rows(state.values, &idx)? };
    for layer in layers {
        x = vit_layer(g, x, layer, cfg)?;
    }
    let values = if all { x } else { g.tape.scatter_rows(state.values, x, &idx)? };
    Ok(TokenState { values, ..state })
}
