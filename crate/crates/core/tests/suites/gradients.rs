//! Central finite-difference checks of every differentiable tape op and of
//! the full training loss, at `f64`.
#![allow(dead_code)]

use crate::common::{central_diff, check_op, rel_err};
use vltp_core::backbone::{self, TokenState, VitConfig};
use vltp_core::maskdec::decode_mask;
use vltp_core::model::{self, guidance, ModelConfig};
use vltp_core::numerics::{Tape, Tensor, Var};
use vltp_core::objectives::{derive_gt_patch_labels, vltp_loss, DICE_EPS};
use vltp_core::params::{Graph, ParamStore, Trainable};
use vltp_core::prune::{self, blend_gated, prune_decoder_forward, soft_gate_with_threshold, Mode, PruneSchedule};
use vltp_core::rng::SplitMix64;
use vltp_core::Result;

const SEEDS: u64 = 100;
const OP_TOL: f64 = 1e-4;
const E2E_TOL: f64 = 1e-3;

fn rand(shape: &[usize], lo: f32, hi: f32, rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::<f32>::uniform(shape, lo, hi, rng).cast()
}

fn dims(rng: &mut SplitMix64) -> (usize, usize) {
    (rng.range(1, 5), rng.range(1, 5))
}

/// Runs `make` for every seed and asserts the worst error stays in budget.
fn sweep(name: &str, eps: f64, make: impl Fn(&mut SplitMix64) -> (Vec<Tensor<f64>>, Op)) {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = SplitMix64::indexed(seed, name, 0);
        let (inputs, op) = make(&mut rng);
        let check = check_op(&inputs, op, eps, &mut rng);
        worst = worst.max(check.rel_err());
    }
    assert!(worst < OP_TOL, "{name}: worst relative error {worst:e}");
}

type Op = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn op(f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Op {
    Box::new(f)
}

pub fn matmul() {
    sweep("matmul", 1e-3, |rng| {
        let (m, k) = dims(rng);
        let n = rng.range(1, 5);
        (vec![rand(&[m, k], -1.0, 1.0, rng), rand(&[k, n], -1.0, 1.0, rng)], op(|t, v| t.matmul(v[0], v[1])))
    });
}

pub fn transpose_and_reshape() {
    sweep("transpose", 1e-4, |rng| {
        let (m, n) = dims(rng);
        (vec![rand(&[m, n], -1.0, 1.0, rng)], op(|t, v| t.transpose(v[0])))
    });
    sweep("reshape", 1e-4, |rng| {
        let (m, n) = dims(rng);
        (vec![rand(&[m, n], -1.0, 1.0, rng)], op(move |t, v| t.reshape(v[0], &[n * m])))
    });
}

pub fn elementwise_binary() {
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        sweep(name, 1e-4, move |rng| {
            let (m, n) = dims(rng);
            let ins = vec![rand(&[m, n], -1.0, 1.0, rng), rand(&[m, n], -1.0, 1.0, rng)];
            (
                ins,
                op(move |t: &mut Tape<f64>, v: &[Var]| match which {
                    0 => t.add(v[0], v[1]),
                    1 => t.sub(v[0], v[1]),
                    _ => t.mul(v[0], v[1]),
                }),
            )
        });
    }
}

pub fn add_bias_and_scale_rows() {
    sweep("add_bias", 1e-4, |rng| {
        let (m, n) = dims(rng);
        (vec![rand(&[m, n], -1.0, 1.0, rng), rand(&[n], -1.0, 1.0, rng)], op(|t, v| t.add_bias(v[0], v[1])))
    });
    sweep("scale_rows", 1e-4, |rng| {
        let (m, n) = dims(rng);
        (vec![rand(&[m, n], -1.0, 1.0, rng), rand(&[m], -1.0, 1.0, rng)], op(|t, v| t.scale_rows(v[0], v[1])))
    });
}

pub fn scalar_affine() {
    sweep("scale", 1e-4, |rng| {
        let (m, n) = dims(rng);
        let s = rng.uniform(-3.0, 3.0) as f64;
        (vec![rand(&[m, n], -1.0, 1.0, rng)], op(move |t, v| t.scale(v[0], s)))
    });
    sweep("add_scalar", 1e-4, |rng| {
        let (m, n) = dims(rng);
        let s = rng.uniform(-3.0, 3.0) as f64;
        (vec![rand(&[m, n], -1.0, 1.0, rng)], op(move |t, v| t.add_scalar(v[0], s)))
    });
}

pub fn softmax() {
    sweep("softmax", 1e-4, |rng| {
        let (m, n) = dims(rng);
        (vec![rand(&[m, n], -3.0, 3.0, rng)], op(|t, v| t.softmax(v[0])))
    });
}

pub fn layer_norm() {
    sweep("layer_norm", 1e-4, |rng| {
        let m = rng.range(1, 4);
        let n = rng.range(2, 6);
        let ins = vec![rand(&[m, n], -2.0, 2.0, rng), rand(&[n], 0.5, 1.5, rng), rand(&[n], -0.5, 0.5, rng)];
        (ins, op(|t, v| t.layer_norm(v[0], v[1], v[2])))
    });
}

pub fn gelu_and_sigmoid() {
    sweep("gelu", 1e-4, |rng| {
        let (m, n) = dims(rng);
        (vec![rand(&[m, n], -3.0, 3.0, rng)], op(|t, v| t.gelu(v[0])))
    });
    sweep("sigmoid", 1e-4, |rng| {
        let (m, n) = dims(rng);
        (vec![rand(&[m, n], -4.0, 4.0, rng)], op(|t, v| t.sigmoid(v[0])))
    });
}

pub fn reductions() {
    sweep("sum", 1e-4, |rng| {
        let (m, n) = dims(rng);
        (vec![rand(&[m, n], -1.0, 1.0, rng)], op(|t, v| t.sum(v[0])))
    });
    sweep("mean", 1e-4, |rng| {
        let (m, n) = dims(rng);
        (vec![rand(&[m, n], -1.0, 1.0, rng)], op(|t, v| t.mean(v[0])))
    });
}

pub fn concatenation_and_slicing() {
    sweep("concat_rows", 1e-4, |rng| {
        let (m, n) = dims(rng);
        let m2 = rng.range(1, 4);
        (vec![rand(&[m, n], -1.0, 1.0, rng), rand(&[m2, n], -1.0, 1.0, rng)], op(|t, v| t.concat_rows(&[v[0], v[1]])))
    });
    sweep("concat_cols", 1e-4, |rng| {
        let (m, n) = dims(rng);
        let n2 = rng.range(1, 4);
        (vec![rand(&[m, n], -1.0, 1.0, rng), rand(&[m, n2], -1.0, 1.0, rng)], op(|t, v| t.concat_cols(&[v[0], v[1]])))
    });
    sweep("slice_rows", 1e-4, |rng| {
        let m = rng.range(2, 6);
        let n = rng.range(1, 4);
        let start = rng.below(m);
        let len = rng.range(1, m - start);
        (vec![rand(&[m, n], -1.0, 1.0, rng)], op(move |t, v| t.slice_rows(v[0], start, len)))
    });
    sweep("slice_cols", 1e-4, |rng| {
        let m = rng.range(1, 4);
        let n = rng.range(2, 6);
        let start = rng.below(n);
        let len = rng.range(1, n - start);
        (vec![rand(&[m, n], -1.0, 1.0, rng)], op(move |t, v| t.slice_cols(v[0], start, len)))
    });
}

pub fn gather_and_scatter() {
    sweep("gather_rows", 1e-4, |rng| {
        let m = rng.range(1, 6);
        let n = rng.range(1, 4);
        // Repeats are allowed, so gradients must accumulate.
        let idx: Vec<usize> = (0..rng.range(1, 6)).map(|_| rng.below(m)).collect();
        (vec![rand(&[m, n], -1.0, 1.0, rng)], op(move |t, v| t.gather_rows(v[0], &idx)))
    });
    sweep("scatter_rows", 1e-4, |rng| {
        let m = rng.range(1, 6);
        let n = rng.range(1, 4);
        let mut idx: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut idx);
        idx.truncate(rng.range(1, m));
        let k = idx.len();
        (
            vec![rand(&[m, n], -1.0, 1.0, rng), rand(&[k, n], -1.0, 1.0, rng)],
            op(move |t, v| t.scatter_rows(v[0], v[1], &idx)),
        )
    });
}

fn binary_target(len: usize, rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::vector((0..len).map(|_| (rng.below(2)) as f64).collect())
}

pub fn losses() {
    sweep("bce_with_logits", 1e-4, |rng| {
        let n = rng.range(1, 10);
        let target = binary_target(n, rng);
        (vec![rand(&[n], -4.0, 4.0, rng)], op(move |t, v| t.bce_with_logits(v[0], &target)))
    });
    sweep("bce_prob", 1e-4, |rng| {
        let n = rng.range(1, 10);
        let target = binary_target(n, rng);
        (vec![rand(&[n], 0.05, 0.95, rng)], op(move |t, v| t.bce_prob(v[0], &target)))
    });
    sweep("dice", 1e-4, |rng| {
        let n = rng.range(1, 10);
        let target = binary_target(n, rng);
        (vec![rand(&[n], 0.0, 1.0, rng)], op(move |t, v| t.dice(v[0], &target, DICE_EPS)))
    });
}

pub fn soft_gate_with_pinned_threshold() {
    sweep("soft_gate", 1e-5, |rng| {
        let n = rng.range(2, 12);
        let scores = rand(&[n], -1.0, 1.0, rng);
        let r = [0.25f32, 0.5, 0.8][rng.below(3)];
        let tau = prune::threshold(scores.data(), r).unwrap();
        (vec![scores], op(move |t, v| soft_gate_with_threshold(t, v[0], tau, 10.0)))
    });
}

pub fn soft_gate_passes_no_gradient_through_threshold() {
    let mut rng = SplitMix64::new(3);
    let scores = rand(&[9], -1.0, 1.0, &mut rng);
    let grad = |pinned: bool| {
        let mut t: Tape<f64> = Tape::new();
        let s = t.leaf(scores.clone(), true);
        let g = if pinned {
            let tau = prune::threshold(scores.data(), 0.5).unwrap();
            soft_gate_with_threshold(&mut t, s, tau, 10.0).unwrap()
        } else {
            prune::soft_gate(&mut t, s, 0.5, 10.0).unwrap()
        };
        let l = t.sum(g).unwrap();
        t.backward(l).unwrap().get(s).unwrap().data().to_vec()
    };
    assert_eq!(grad(false), grad(true));
}

fn tiny() -> ModelConfig {
    ModelConfig {
        vit: VitConfig {
            image_height: 8,
            image_width: 8,
            patch_size: 2,
            embed_dim: 8,
            num_layers: 4,
            num_heads: 2,
            ffn_mult: 2,
        },
        guide_dim: 4,
        decoder_ffn_mult: 2,
        num_tasks: 3,
    }
}

struct Sample {
    image: Tensor<f64>,
    mask: Tensor<f64>,
    labels: Tensor<f64>,
    task: usize,
}

fn random_sample(cfg: &ModelConfig, rng: &mut SplitMix64) -> Sample {
    let (h, w) = (cfg.vit.image_height, cfg.vit.image_width);
    let mask: Tensor = Tensor::new(vec![h, w], (0..h * w).map(|_| (rng.below(3) == 0) as u8 as f32).collect()).unwrap();
    Sample {
        image: rand(&[3, h, w], 0.0, 1.0, rng),
        labels: derive_gt_patch_labels(&mask, cfg.vit.patch_size).unwrap().cast(),
        mask: mask.cast(),
        task: rng.below(cfg.num_tasks),
    }
}

/// The train-mode forward pass and loss, assembled from the same building
/// blocks the model uses. Stage thresholds are taken from `taus` when given
/// and otherwise computed from the scores and appended to `found`.
fn pinned_loss(
    g: &mut Graph<f64>,
    cfg: &ModelConfig,
    s: &Sample,
    schedule: &PruneSchedule,
    taus: Option<&[f64]>,
    found: &mut Vec<f64>,
) -> Result<Var> {
    let ranges = schedule.stage_ranges(cfg.vit.num_layers)?;
    let x = backbone::embed_patches(g, &s.image, &cfg.vit)?;
    let seg = guidance(g, s.task, cfg)?;
    let mut state = TokenState::all_active(x, cfg.vit.n_tokens());
    state = backbone::run_stage(g, state, ranges[0].clone(), &cfg.vit)?;
    let mut gates = Vec::new();
    for (m, range) in ranges.iter().enumerate().skip(1) {
        let scores = prune_decoder_forward(g, state.values, seg)?;
        let tau = match taus {
            Some(t) => t[m - 1],
            None => prune::threshold(g.tape.value(scores).data(), schedule.rates[m - 1])?,
        };
        found.push(tau);
        let gate = soft_gate_with_threshold(&mut g.tape, scores, tau, schedule.alpha as f64)?;
        let before = state.values;
        state = backbone::run_stage(g, state, range.clone(), &cfg.vit)?;
        state.values = blend_gated(&mut g.tape, gate, state.values, before)?;
        gates.push(gate);
    }
    let logits = decode_mask(g, state.values, seg, &cfg.vit)?;
    Ok(vltp_loss(&mut g.tape, logits, &s.mask, &gates, Some(&s.labels))?.total)
}

fn random_schedule(layers: usize, rng: &mut SplitMix64) -> PruneSchedule {
    let m = rng.range(1, 2);
    let mut b: Vec<usize> = (1..layers).collect();
    rng.shuffle(&mut b);
    b.truncate(m);
    b.sort_unstable();
    let rates = (0..m).map(|_| [0.25f32, 0.5, 0.75][rng.below(3)]).collect();
    PruneSchedule::new(b, rates)
}

pub fn full_loss_matches_finite_differences() {
    let cfg = tiny();
    let specs = cfg.param_specs();
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = SplitMix64::indexed(seed, "e2e", 0);
        let params = ParamStore::init(&specs, seed);
        let sample = random_sample(&cfg, &mut rng);
        let schedule = random_schedule(cfg.vit.num_layers, &mut rng);

        // Reference pass through the model; its thresholds are pinned below.
        let mut g: Graph<f64> = Graph::new(&params, Trainable::All);
        let out = model::forward(&mut g, &sample.image, sample.task, &schedule, Mode::Train, &cfg).unwrap();
        let reference = vltp_loss(&mut g.tape, out.logits, &sample.mask, &out.gates, Some(&sample.labels)).unwrap();
        let loss_value = g.tape.value(reference.total).data()[0];
        let grads = g.backward(reference.total).unwrap();

        let mut taus = Vec::new();
        let mut g: Graph<f64> = Graph::new(&params, Trainable::None);
        let l = pinned_loss(&mut g, &cfg, &sample, &schedule, None, &mut taus).unwrap();
        let pinned_value = g.tape.value(l).data()[0];
        assert_eq!(pinned_value, loss_value, "pinned graph diverges from the model");

        // A random handful of coordinates per seed, across all tensors.
        let names: Vec<&String> = params.names().collect();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for _ in 0..6 {
            let name = names[rng.below(names.len())];
            let t = params.get(name).unwrap();
            let i = rng.below(t.len());
            analytic.push(grads.get(name.as_str()).map_or(0.0, |g| g.data()[i]));
            let eval = |x: &[f32]| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[i] = x[0];
                let mut g: Graph<f64> = Graph::new(&p, Trainable::None);
                let l = pinned_loss(&mut g, &cfg, &sample, &schedule, Some(&taus), &mut Vec::new()).unwrap();
                g.tape.value(l).data()[0]
            };
            numeric.extend(central_diff(eval, &[t.data()[i]], 1e-4));
        }
        worst = worst.max(rel_err(&analytic, &numeric, 1e-3));
    }
    assert!(worst < E2E_TOL, "end-to-end worst relative error {worst:e}");
}

/// Every check in this suite, by name.
pub const ALL: &[(&str, fn())] = &[
    ("matmul", matmul),
    ("transpose_and_reshape", transpose_and_reshape),
    ("elementwise_binary", elementwise_binary),
    ("add_bias_and_scale_rows", add_bias_and_scale_rows),
    ("scalar_affine", scalar_affine),
    ("softmax", softmax),
    ("layer_norm", layer_norm),
    ("gelu_and_sigmoid", gelu_and_sigmoid),
    ("reductions", reductions),
    ("concatenation_and_slicing", concatenation_and_slicing),
    ("gather_and_scatter", gather_and_scatter),
    ("losses", losses),
    ("soft_gate_with_pinned_threshold", soft_gate_with_pinned_threshold),
    ("soft_gate_passes_no_gradient_through_threshold", soft_gate_passes_no_gradient_through_threshold),
    ("full_loss_matches_finite_differences", full_loss_matches_finite_differences),
];
