//! Building blocks shared by the encoder and both decoders.
//!
//! Parameter naming: a linear map `name` owns `name` (in×out) and
//! `name.bias`; a layer norm owns `name.gamma` and `name.beta`; attention
//! owns the projections `name.{q,k,v,o}`; an FFN owns `name.fc1`, `name.fc2`.

use crate::error::Result;
use crate::numerics::{Real, Var};
use crate::params::{Graph, Init, ParamSpec};

pub fn linear_specs(name: &str, d_in: usize, d_out: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(name, &[d_in, d_out], Init::FanIn(d_in)),
        ParamSpec::new(format!("{name}.bias"), &[d_out], Init::Zeros),
    ]
}

pub fn norm_specs(name: &str, dim: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{name}.gamma"), &[dim], Init::Ones),
        ParamSpec::new(format!("{name}.beta"), &[dim], Init::Zeros),
    ]
}

pub fn attention_specs(name: &str, dim: usize) -> Vec<ParamSpec> {
    ["q", "k", "v", "o"]
        .iter()
        .flat_map(|p| linear_specs(&format!("{name}.{p}"), dim, dim))
        .collect()
}

pub fn ffn_specs(name: &str, dim: usize, hidden: usize) -> Vec<ParamSpec> {
    let mut s = linear_specs(&format!("{name}.fc1"), dim, hidden);
    s.extend(linear_specs(&format!("{name}.fc2"), hidden, dim));
    s
}

pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
    let w = g.param(name)?;
    let b = g.param(&format!("{name}.bias"))?;
    let y = g.tape.matmul(x, w)?;
    g.tape.add_bias(y, b)
}

pub fn layer_norm<T: Real>(g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
    let gamma = g.param(&format!("{name}.gamma"))?;
    let beta = g.param(&format!("{name}.beta"))?;
    g.tape.layer_norm(x, gamma, beta)
}

pub fn ffn<T: Real>(g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
    let h = linear(g, x, &format!("{name}.fc1"))?;
    let h = g.tape.gelu(h)?;
    linear(g, h, &format!("{name}.fc2"))
}

/// Multi-head scaled dot-product attention of `queries` (M×D) over
/// `source` (S×D), output-projected back to D. Self-attention when both are
/// the same node.
pub fn attention<T: Real>(g: &mut Graph<T>, queries: Var, source: Var, name: &str, heads: usize) -> Result<Var> {
    let q = linear(g, queries, &format!("{name}.q"))?;
    let k = linear(g, source, &format!("{name}.k"))?;
    let v = linear(g, source, &format!("{name}.v"))?;
    let dim = g.tape.shape(q)[1];
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.tape.slice_cols(q, h * dh, dh)?,
                g.tape.slice_cols(k, h * dh, dh)?,
                g.tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = g.tape.transpose(kh)?;
        let scores = g.tape.matmul(qh, kt)?;
        let scores = g.tape.scale(scores, scale)?;
        let weights = g.tape.softmax(scores)?;
        outs.push(g.tape.matmul(weights, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { g.tape.concat_cols(&outs)? };
    linear(g, joined, &format!("{name}.o"))
}
