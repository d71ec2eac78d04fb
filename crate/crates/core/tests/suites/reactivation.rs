//! Frozen tokens are re-scored at every later stage and can come back.
#![allow(dead_code)]

use vltp_core::backbone::{TokenState, VitConfig};
use vltp_core::model::{forward, ModelConfig};
use vltp_core::params::{Graph, ParamStore, Trainable};
use vltp_core::prune::{apply_pruning_stage, retained_count, Mode, PruneSchedule};
use vltp_core::rng::SplitMix64;
use vltp_core::Tensor;

pub fn small() -> ModelConfig {
    ModelConfig {
        vit: VitConfig {
            image_height: 16,
            image_width: 16,
            patch_size: 4,
            embed_dim: 16,
            num_layers: 6,
            num_heads: 2,
            ffn_mult: 2,
        },
        guide_dim: 8,
        decoder_ffn_mult: 2,
        num_tasks: 4,
    }
}

fn argmax(v: &[f32], pick_max: bool) -> usize {
    let mut best = 0;
    for (i, &s) in v.iter().enumerate() {
        if (pick_max && s > v[best]) || (!pick_max && s < v[best]) {
            best = i;
        }
    }
    best
}

/// Swapping two tokens' embeddings between stages swaps their scores, so the
/// weakest token of stage 1 is frozen there and active again at stage 2.
pub fn frozen_token_is_reactivated_when_scores_swap() {
    let cfg = small();
    let n = cfg.vit.n_tokens();
    let mut params = ParamStore::init(&cfg.param_specs(), 9);
    // At init the decoder's attention is nearly uniform and every token gets
    // the same score; unit-scale weights give a spread to rank.
    let names: Vec<String> = params.names().filter(|n| n.starts_with("prune.")).cloned().collect();
    let mut rng = SplitMix64::new(21);
    for name in names {
        for v in params.get_mut(&name).unwrap().data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
    }
    let schedule = PruneSchedule::new(vec![2, 4], vec![0.5, 0.5]);
    let x1 = Tensor::uniform(&[n, 16], -1.0, 1.0, &mut SplitMix64::new(4));

    let mut g: Graph<f32> = Graph::new(&params, Trainable::None);
    let seg = g.param("guide.table").and_then(|t| g.tape.gather_rows(t, &[1])).unwrap();
    let v1 = g.input(x1.clone());
    let s1 = apply_pruning_stage(&mut g, TokenState::all_active(v1, n), seg, &schedule, 0, Mode::Infer).unwrap();
    let scores1 = s1.scores.clone().unwrap();
    let (top, bottom) = (argmax(&scores1, true), argmax(&scores1, false));
    assert!(s1.active[top] && !s1.active[bottom]);

    let mut x2 = x1.clone();
    let (rt, rb) = (x1.row(top).to_vec(), x1.row(bottom).to_vec());
    x2.data_mut()[top * 16..(top + 1) * 16].copy_from_slice(&rb);
    x2.data_mut()[bottom * 16..(bottom + 1) * 16].copy_from_slice(&rt);
    let state = TokenState {
        values: g.input(x2),
        ..s1.clone()
    };
    let s2 = apply_pruning_stage(&mut g, state, seg, &schedule, 1, Mode::Infer).unwrap();
    let scores2 = s2.scores.unwrap();
    assert_eq!(scores2.len(), n);
    assert!((scores2[bottom] - scores1[top]).abs() < 1e-5);
    assert!((scores2[top] - scores1[bottom]).abs() < 1e-5);
    assert!(s2.active[bottom], "frozen token was not reactivated");
    assert!(!s2.active[top]);
}

/// Checks one forward pass in both modes: every stage scores all `N`
/// tokens, frozen or not, and infer mode keeps exactly the retained count.
pub fn check_stages(schedule: &PruneSchedule, seed: u64, task: usize) -> Result<(), String> {
    let cfg = small();
    let n = cfg.vit.n_tokens();
    let params = ParamStore::init(&cfg.param_specs(), seed);
    let image = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut SplitMix64::new(seed));
    for mode in [Mode::Infer, Mode::Train] {
        let mut g: Graph<f32> = Graph::new(&params, Trainable::None);
        let out = forward(&mut g, &image, task, schedule, mode, &cfg).map_err(|e| e.to_string())?;
        if out.stages.len() != schedule.len() || g.tape.shape(out.merged) != [n, 16] {
            return Err(format!("{schedule:?}: wrong stage count or merged shape"));
        }
        for (st, &r) in out.stages.iter().zip(&schedule.rates) {
            let active = st.active.iter().filter(|&&a| a).count();
            let expected = if mode == Mode::Infer { retained_count(n, r).unwrap() } else { n };
            if st.scores.len() != n || active != expected {
                return Err(format!("{schedule:?} {mode:?}: {} scores, {active} active", st.scores.len()));
            }
        }
    }
    Ok(())
}

/// `cases` random schedules over the six-layer model.
pub fn candidate_set_is_full(cases: u64) {
    for case in 0..cases {
        let mut rng = SplitMix64::indexed(5, "fuzz", case);
        let boundaries: Vec<usize> = (1..6).filter(|_| rng.below(2) == 1).collect();
        let boundaries = if boundaries.is_empty() { vec![1 + rng.below(5)] } else { boundaries };
        let rates = boundaries.iter().map(|_| rng.below(100) as f32 / 100.0).collect();
        let schedule = PruneSchedule::new(boundaries, rates);
        check_stages(&schedule, case, rng.below(4)).unwrap();
    }
}

pub const ALL: &[(&str, fn())] = &[
    ("frozen_token_is_reactivated_when_scores_swap", frozen_token_is_reactivated_when_scores_swap),
    ("candidate_set_is_full", || candidate_set_is_full(200)),
];
