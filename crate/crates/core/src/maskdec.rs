//! A small guidance-conditioned mask decoder: tokens are projected to the
//! guidance width, exchange two rounds of cross-attention with the guidance
//! token, and each token is mapped to the `P×P` pixel logits of its patch.

use crate::backbone::VitConfig;
use crate::error::{Error, Result};
use crate::layers::{self, attention_specs, ffn_specs, linear_specs, norm_specs};
use crate::numerics::{Real, Var};
use crate::params::{Graph, ParamSpec};

pub const DEPTH: usize = 2;

pub fn mask_decoder_specs(vit: &VitConfig, guide_dim: usize, ffn_mult: usize) -> Vec<ParamSpec> {
    let d = guide_dim;
    let mut s = linear_specs("mdec.proj", vit.embed_dim, d);
    for r in 0..DEPTH {
        let p = format!("mdec.round{r}");
        for block in ["guide", "tokens"] {
            s.extend(norm_specs(&format!("{p}.{block}.ln_attn"), d));
            s.extend(attention_specs(&format!("{p}.{block}.attn"), d));
            s.extend(norm_specs(&format!("{p}.{block}.ln_ffn"), d));
            s.extend(ffn_specs(&format!("{p}.{block}.ffn"), d, ffn_mult * d));
        }
    }
    s.extend(norm_specs("mdec.ln_out", d));
    s.extend(linear_specs("mdec.head", d, vit.patch_size * vit.patch_size));
    s
}

/// Pre-norm cross-attention of `x` over `src`, then a pre-norm FFN, both
/// residual.
fn cross_block<T: Real>(g: &mut Graph<T>, x: Var, src: Var, name: &str) -> Result<Var> {
    let h = layers::layer_norm(g, x, &format!("{name}.ln_attn"))?;
    let a = layers::attention(g, h, src, &format!("{name}.attn"), 1)?;
    let x = g.tape.add(x, a)?;
    let h = layers::layer_norm(g, x, &format!("{name}.ln_ffn"))?;
    let f = layers::ffn(g, h, &format!("{name}.ffn"))?;
    g.tape.add(x, f)
}

pub fn decode_mask<T: Real>(g: &mut Graph<T>, tokens: Var, seg: Var, vit: &VitConfig) -> Result<Var> {
    decode_mask_with(g, tokens, seg, vit, true)
}

/// [`decode_mask`] with the cross-attention rounds optionally bypassed, which
/// leaves a purely per-token map from tokens to patch logits.
pub fn decode_mask_with<T: Real>(g: &mut Graph<T>, tokens: Var, seg: Var, vit: &VitConfig, cross_attention: bool) -> Result<Var> {
    let n = vit.n_tokens();
    if g.tape.shape(tokens) != [n, vit.embed_dim] {
        return Err(Error::Dimension {
            op: "decode_mask",
            lhs: g.tape.shape(tokens).to_vec(),
            rhs: vec![n, vit.embed_dim],
        });
    }
    let mut t = layers::linear(g, tokens, "mdec.proj")?;
    let d = g.tape.shape(t)[1];
    if g.tape.value(seg).len() != d {
        return Err(Error::Dimension {
            op: "decode_mask",
            lhs: g.tape.shape(seg).to_vec(),
            rhs: vec![1, d],
        });
    }
    if cross_attention {
        let mut q = g.tape.reshape(seg, &[1, d])?;
        for r in 0..DEPTH {
            q = cross_block(g, q, t, &format!("mdec.round{r}.guide"))?;
            t = cross_block(g, t, q, &format!("mdec.round{r}.tokens"))?;
        }
    }
    let t = layers::layer_norm(g, t, "mdec.ln_out")?;
    let patches = layers::linear(g, t, "mdec.head")?;
    patches_to_image(g, patches, vit)
}

/// Rearranges `N × P²` per-patch logits into the `H × W` image grid.
fn patches_to_image<T: Real>(g: &mut Graph<T>, patches: Var, vit: &VitConfig) -> Result<Var> {
    let (h, w, p) = (vit.image_height, vit.image_width, vit.patch_size);
    let gw = vit.grid_width();
    // Row `idx` of the flattened patch matrix (N·P rows of P values) holds
    // pixel row `y` of patch `tok`; gather them in image order.
    let rows = g.tape.reshape(patches, &[vit.n_tokens() * p, p])?;
    let mut order = Vec::with_capacity(h * gw);
    for y in 0..h {
        let (pi, yy) = (y / p, y % p);
        for pj in 0..gw {
            order.push((pi * gw + pj) * p + yy);
        }
    }
    let image_rows = g.tape.gather_rows(rows, &order)?;
    g.tape.reshape(image_rows, &[h, w])
}
