//! Independent oracles for the backbone, pruning, labels and losses.
#![allow(dead_code)]

use crate::common::oracle::{self, from_flat, max_abs_diff};
use crate::common::scrambled;
use vltp_core::backbone::{self, embed_patches, run_stage, vit_layer, TokenState, VitConfig};
use vltp_core::model::{self, ModelConfig};
use vltp_core::numerics::{Tape, Tensor};
use vltp_core::objectives::{cross_entropy, derive_gt_patch_labels, dice_loss, DICE_EPS};
use vltp_core::params::{Graph, ParamStore, Trainable};
use vltp_core::prune::{self, prune_decoder_forward, retained_count, topk_prune_mask, Mode, PruneSchedule};
use vltp_core::rng::SplitMix64;
use vltp_core::synthdata::{generate, rasterize_mask, SceneConfig};

fn vit() -> VitConfig {
    VitConfig {
        image_height: 16,
        image_width: 16,
        patch_size: 4,
        embed_dim: 16,
        num_layers: 3,
        num_heads: 4,
        ffn_mult: 2,
    }
}

fn tokens(n: usize, d: usize, rng: &mut SplitMix64) -> Tensor {
    Tensor::uniform(&[n, d], -1.0, 1.0, rng)
}

pub fn vit_layer_matches_loop_oracle() {
    let cfg = vit();
    for seed in 0..10 {
        let params = scrambled(&ParamStore::init(&cfg.param_specs(), seed), 0.5, seed);
        let mut rng = SplitMix64::indexed(seed, "tokens", 0);
        let x = tokens(cfg.n_tokens(), cfg.embed_dim, &mut rng);
        let layer = seed as usize % cfg.num_layers;

        let mut g: Graph<f64> = Graph::new(&params, Trainable::None);
        let xv = g.input(x.cast());
        let y = vit_layer(&mut g, xv, layer, &cfg).unwrap();
        let expect = oracle::vit_layer(&params, &from_flat(x.data(), cfg.n_tokens(), cfg.embed_dim), layer, &cfg);
        let err = max_abs_diff(g.tape.value(y).data(), &oracle::flat(&expect));
        assert!(err < 1e-10, "seed {seed}: {err:e}");
    }
}

pub fn prune_decoder_matches_loop_oracle() {
    let (d_model, d) = (16, 8);
    for seed in 0..10 {
        let params = scrambled(&ParamStore::init(&prune::prune_decoder_specs(d_model, d, 2), seed), 0.5, seed);
        let mut rng = SplitMix64::indexed(seed, "tokens", 0);
        let x = tokens(12, d_model, &mut rng);
        let seg: Tensor = Tensor::uniform(&[1, d], -1.0, 1.0, &mut rng);

        let mut g: Graph<f64> = Graph::new(&params, Trainable::None);
        let (xv, sv) = (g.input(x.cast()), g.input(seg.cast()));
        let s = prune_decoder_forward(&mut g, xv, sv).unwrap();
        let seg64: Vec<f64> = seg.data().iter().map(|&v| v as f64).collect();
        let expect = oracle::prune_scores(&params, &from_flat(x.data(), 12, d_model), &seg64);
        let err = max_abs_diff(g.tape.value(s).data(), &expect);
        assert!(err < 1e-10, "seed {seed}: {err:e}");
    }
}

/// Running a stage over a partial active set equals running the same layers
/// on the active rows as a standalone sequence; frozen rows are untouched.
pub fn compacted_stage_equals_direct_subsequence() {
    let cfg = vit();
    let n = cfg.n_tokens();
    for seed in 0..20 {
        let params = scrambled(&ParamStore::init(&cfg.param_specs(), seed), 0.5, seed);
        let mut rng = SplitMix64::indexed(seed, "compact", 0);
        let x = tokens(n, cfg.embed_dim, &mut rng);
        let mut active: Vec<bool> = (0..n).map(|_| rng.below(2) == 0).collect();
        active[rng.below(n)] = true;

        let mut g: Graph<f32> = Graph::new(&params, Trainable::None);
        let xv = g.input(x.clone());
        let state = TokenState {
            active: active.clone(),
            ..TokenState::all_active(xv, n)
        };
        let out = run_stage(&mut g, state, 0..cfg.num_layers, &cfg).unwrap();
        let got = g.tape.value(out.values).clone();

        let idx: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
        let sub: Vec<f32> = idx.iter().flat_map(|&i| x.row(i).to_vec()).collect();
        let mut h: Graph<f32> = Graph::new(&params, Trainable::None);
        let mut y = h.input(Tensor::new(vec![idx.len(), cfg.embed_dim], sub).unwrap());
        for l in 0..cfg.num_layers {
            y = vit_layer(&mut h, y, l, &cfg).unwrap();
        }
        let direct = h.tape.value(y);
        for (r, &i) in idx.iter().enumerate() {
            let err = got.row(i).iter().zip(direct.row(r)).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
            assert!(err <= 1e-6, "seed {seed} row {i}: {err:e}");
        }
        for i in (0..n).filter(|&i| !active[i]) {
            assert_eq!(got.row(i), x.row(i), "frozen row {i} changed");
        }
    }
}

pub fn patch_embedding_is_permutation_equivariant() {
    let cfg = vit();
    let params = ParamStore::init(&cfg.param_specs(), 4);
    let mut rng = SplitMix64::new(9);
    let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
    // Swap patch (0, 1) with patch (2, 3) in pixel space.
    let mut swapped = img.clone();
    let p = cfg.patch_size;
    for c in 0..3 {
        for dy in 0..p {
            for dx in 0..p {
                let a = c * 256 + dy * 16 + (p + dx);
                let b = c * 256 + (2 * p + dy) * 16 + (3 * p + dx);
                swapped.data_mut().swap(a, b);
            }
        }
    }
    let embed = |im: &Tensor| {
        let mut g: Graph<f32> = Graph::new(&params, Trainable::None);
        let x = embed_patches(&mut g, im, &cfg).unwrap();
        g.tape.value(x).clone()
    };
    let (e, s) = (embed(&img), embed(&swapped));
    let pos = params.get("vit.pos").unwrap();
    let content = |t: &Tensor, i: usize| -> Vec<f32> { t.row(i).iter().zip(pos.row(i)).map(|(a, b)| a - b).collect() };
    let (i, j) = (1, 2 * 4 + 3);
    for (a, b) in content(&e, i).iter().zip(content(&s, j)) {
        assert!((a - b).abs() < 1e-5);
    }
    for k in (0..cfg.n_tokens()).filter(|&k| k != i && k != j) {
        assert_eq!(e.row(k), s.row(k));
    }
}

pub fn topk_matches_sort_oracle_with_ties() {
    let mut rng = SplitMix64::new(77);
    for trial in 0..1000 {
        let n = rng.range(1, 80);
        // Few distinct levels force many ties.
        let levels = rng.range(1, 6) as f32;
        let scores: Vec<f32> = (0..n).map(|_| (rng.uniform(0.0, levels)).floor() - 2.0).collect();
        let r = [0.0f32, 0.2, 0.25, 0.5, 0.7, 0.8, 0.9, 0.99][rng.below(8)];
        let k = retained_count(n, r).unwrap();
        assert_eq!(topk_prune_mask(&scores, r).unwrap(), oracle::sorted_keep(&scores, k), "trial {trial}");
    }
}

pub fn retained_count_is_ceiling_of_kept_fraction() {
    for n in 1..200usize {
        for pct in 0..100u32 {
            let r = pct as f32 / 100.0;
            let expect = ((100 - pct) as usize * n).div_ceil(100).max(1);
            assert_eq!(retained_count(n, r).unwrap(), expect, "n={n} r={r}");
        }
    }
}

pub fn patch_labels_exhaustive_4x4() {
    for bits in 0u32..1 << 16 {
        let mask: Vec<f32> = (0..16).map(|i| ((bits >> i) & 1) as f32).collect();
        let t = Tensor::new(vec![4, 4], mask.clone()).unwrap();
        assert_eq!(derive_gt_patch_labels(&t, 2).unwrap().data(), oracle::brute_labels(&mask, 4, 4, 2));
    }
}

pub fn patch_labels_random_32x32() {
    let mut rng = SplitMix64::new(5);
    for _ in 0..1000 {
        let density = rng.uniform(0.0, 0.05);
        let mask: Vec<f32> = (0..1024).map(|_| (rng.next_f32() < density) as u8 as f32).collect();
        let t = Tensor::new(vec![32, 32], mask.clone()).unwrap();
        assert_eq!(derive_gt_patch_labels(&t, 4).unwrap().data(), oracle::brute_labels(&mask, 32, 32, 4));
    }
}

pub fn losses_match_direct_formulas() {
    let mut rng = SplitMix64::new(13);
    for _ in 0..200 {
        let n = rng.range(1, 300);
        let logits: Vec<f32> = (0..n).map(|_| rng.uniform(-6.0, 6.0)).collect();
        let gt: Vec<f32> = (0..n).map(|_| rng.below(2) as f32).collect();
        let target = Tensor::vector(gt.clone());
        let mut t: Tape<f32> = Tape::new();
        let x = t.constant(Tensor::vector(logits.clone()));
        let ce = cross_entropy(&mut t, x, &target).unwrap();
        let p = t.sigmoid(x).unwrap();
        let dl = dice_loss(&mut t, p, &target, DICE_EPS).unwrap();

        let l64: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        let g64: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
        let p64: Vec<f64> = t.value(p).data().iter().map(|&v| v as f64).collect();
        assert!((t.value(ce).data()[0] as f64 - oracle::bce_logits(&l64, &g64)).abs() <= 1e-6);
        assert!((t.value(dl).data()[0] as f64 - oracle::dice(&p64, &g64, DICE_EPS)).abs() <= 1e-6);
    }
}

pub fn generated_masks_rerasterize_from_objects() {
    let cfg = SceneConfig::default();
    for s in generate(21, 200, 8, &cfg).unwrap() {
        assert_eq!(rasterize_mask(&s.objects, s.task_id, cfg.height, cfg.width).unwrap(), s.mask);
        assert_eq!(derive_gt_patch_labels(&s.mask, cfg.patch_size).unwrap(), s.labels);
        assert_eq!(oracle::brute_labels(s.mask.data(), cfg.height, cfg.width, cfg.patch_size), s.labels.data());
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        vit: VitConfig {
            num_layers: 4,
            ..vit()
        },
        guide_dim: 8,
        decoder_ffn_mult: 2,
        num_tasks: 4,
    }
}

/// At each stage the active set is the top-k of that stage's scores over all
/// `N` tokens, and the decoder receives all `N` rows.
pub fn inference_trace_follows_scores() {
    let cfg = small_model();
    let n = cfg.vit.n_tokens();
    for seed in 0..16 {
        let params = scrambled(&ParamStore::init(&cfg.param_specs(), seed), 0.5, seed);
        let mut rng = SplitMix64::indexed(seed, "trace", 0);
        let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let r1 = [0.25f32, 0.5, 0.75][rng.below(3)];
        let r2 = [0.25f32, 0.5, 0.75][rng.below(3)];
        let schedule = PruneSchedule::new(vec![1, 3], vec![r1, r2]);
        let mut g: Graph<f32> = Graph::new(&params, Trainable::None);
        let out = model::forward(&mut g, &img, rng.below(4), &schedule, Mode::Infer, &cfg).unwrap();
        assert_eq!(g.tape.shape(out.merged), &[n, cfg.vit.embed_dim]);
        for (st, &r) in out.stages.iter().zip(&schedule.rates) {
            assert_eq!(st.scores.len(), n);
            assert_eq!(st.active, topk_prune_mask(&st.scores, r).unwrap());
            assert_eq!(st.active.iter().filter(|&&a| a).count(), retained_count(n, r).unwrap());
        }
    }
}

/// The hard path equals the explicit gather → layers → scatter composition.
pub fn inference_equals_manual_composition() {
    let cfg = small_model();
    let n = cfg.vit.n_tokens();
    let params = scrambled(&ParamStore::init(&cfg.param_specs(), 8), 0.5, 8);
    let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut SplitMix64::new(8));
    let schedule = PruneSchedule::new(vec![2], vec![0.5]);
    let mut g: Graph<f32> = Graph::new(&params, Trainable::None);
    let out = model::forward(&mut g, &img, 1, &schedule, Mode::Infer, &cfg).unwrap();
    let merged = g.tape.value(out.merged).clone();

    let mut h: Graph<f32> = Graph::new(&params, Trainable::None);
    let x = embed_patches(&mut h, &img, &cfg.vit).unwrap();
    let x = backbone::run_stage(&mut h, TokenState::all_active(x, n), 0..2, &cfg.vit).unwrap().values;
    let keep: Vec<usize> = (0..n).filter(|&i| out.stages[0].active[i]).collect();
    let mut y = h.tape.gather_rows(x, &keep).unwrap();
    for l in 2..4 {
        y = vit_layer(&mut h, y, l, &cfg.vit).unwrap();
    }
    let y = h.tape.scatter_rows(x, y, &keep).unwrap();
    assert_eq!(h.tape.value(y), &merged);
}

/// Every check in this suite, by name.
pub const ALL: &[(&str, fn())] = &[
    ("vit_layer_matches_loop_oracle", vit_layer_matches_loop_oracle),
    ("prune_decoder_matches_loop_oracle", prune_decoder_matches_loop_oracle),
    ("compacted_stage_equals_direct_subsequence", compacted_stage_equals_direct_subsequence),
    ("patch_embedding_is_permutation_equivariant", patch_embedding_is_permutation_equivariant),
    ("topk_matches_sort_oracle_with_ties", topk_matches_sort_oracle_with_ties),
    ("retained_count_is_ceiling_of_kept_fraction", retained_count_is_ceiling_of_kept_fraction),
    ("patch_labels_exhaustive_4x4", patch_labels_exhaustive_4x4),
    ("patch_labels_random_32x32", patch_labels_random_32x32),
    ("losses_match_direct_formulas", losses_match_direct_formulas),
    ("generated_masks_rerasterize_from_objects", generated_masks_rerasterize_from_objects),
    ("inference_trace_follows_scores", inference_trace_follows_scores),
    ("inference_equals_manual_composition", inference_equals_manual_composition),
];
