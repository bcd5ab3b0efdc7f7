mod common;

use proptest::prelude::*;
use sparsity_forcing::grpo::{
    clip_active, clipped_surrogate, grpo_batch_loss, kl_estimate, kl_token, reference_log_probs, LossSettings, Trainer,
    TrainerConfig,
};
use sparsity_forcing::microlm::{sequence_log_probs, AttentionMode, Model, ModelDims, Slot};
use sparsity_forcing::numcore::{SplitRng, Tensor};
use sparsity_forcing::rollout::{compute_advantages, compute_rewards, sample_group, RolloutConfig, RolloutGroup, Sample};

const END: usize = 1;

fn micro() -> ModelDims {
    ModelDims { layers: 2, heads: 2, d_model: 8, vocab: 7, max_seq: 20, d_ff: 12 }
}

fn peaked(seed: u64) -> Model {
    let mut m = Model::init(micro(), seed).unwrap();
    for j in 0..2 {
        let idx = Model::layer_index(j, Slot::Wq);
        m.params_mut()[idx].data_mut().iter_mut().for_each(|v| *v *= 5.0);
    }
    m
}

fn rollout_cfg() -> RolloutConfig {
    let mut c = RolloutConfig::new(3, END);
    c.group_size = 2;
    c
}

fn prompt(seed: u64) -> Vec<usize> {
    let mut rng = SplitRng::new(seed);
    (0..16).map(|_| 2 + rng.below(5)).collect()
}

/// A group with hand-set advantages so the loss is non-trivial.
fn toy_group(model: &Model, seed: u64) -> RolloutGroup {
    let p = prompt(seed);
    let mut g = sample_group(model, 0, &p, &[3, END], &rollout_cfg(), seed).unwrap();
    for (r, a) in g.records.iter_mut().zip([0.9, -1.1]) {
        r.advantage = a;
    }
    g
}

fn references(model: &Model, groups: &[RolloutGroup]) -> Vec<Vec<f64>> {
    groups
        .iter()
        .flat_map(|g| {
            let resp: Vec<&[usize]> = g.records.iter().map(|r| r.response.as_slice()).collect();
            reference_log_probs(model, &g.prompt, &resp).unwrap()
        })
        .collect()
}

fn objective_with(model: &Model, params: &[Tensor], groups: &[RolloutGroup], refs: &[Vec<f64>], s: &LossSettings) -> f64 {
    let mut m = model.clone();
    m.params_mut().clone_from_slice(params);
    grpo_batch_loss(&m, groups, refs, s).unwrap().0.objective
}

#[test]
fn batch_loss_gradient_matches_finite_differences() {
    let policy = peaked(1);
    // a perturbed reference gives the KL term a non-zero gradient
    let mut reference = policy.clone();
    reference.params_mut()[0].data_mut().iter_mut().for_each(|v| *v += 0.05);
    let groups = vec![toy_group(&policy, 2)];
    let refs = references(&reference, &groups);
    // move the policy off the sampling point so ratios differ from 1
    let mut moved = policy.clone();
    let mut rng = SplitRng::new(3);
    for p in moved.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += 0.01 * rng.normal());
    }
    let s = LossSettings::new(0.2, 0.3);
    let (_, grads) = grpo_batch_loss(&moved, &groups, &refs, &s).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut params = moved.params().to_vec();
    for (t, g) in grads.iter().enumerate() {
        let mut fd = vec![0.0; g.numel()];
        for i in 0..g.numel() {
            let orig = params[t].data()[i];
            params[t].data_mut()[i] = orig + h;
            let up = objective_with(&moved, &params, &groups, &refs, &s);
            params[t].data_mut()[i] = orig - h;
            let down = objective_with(&moved, &params, &groups, &refs, &s);
            params[t].data_mut()[i] = orig;
            // gradients are of the loss, the negated objective
            fd[i] = -(up - down) / (2.0 * h);
        }
        let fd = Tensor::new(g.shape(), fd).unwrap();
        worst = worst.max(common::relative_error(g, &fd));
    }
    assert!(worst <= 1e-4, "relative error {worst}");
}

#[test]
fn on_policy_objective_is_the_mean_advantage() {
    let m = peaked(4);
    let groups = vec![toy_group(&m, 5), toy_group(&m, 6)];
    let refs = references(&m, &groups);
    let (terms, _) = grpo_batch_loss(&m, &groups, &refs, &LossSettings::new(0.2, 0.0)).unwrap();
    let recs: Vec<_> = groups.iter().flat_map(|g| &g.records).collect();
    let mean_adv = recs.iter().map(|r| r.advantage).sum::<f64>() / recs.len() as f64;
    assert!((terms.objective - mean_adv).abs() < 1e-9);
    for ratios in &terms.ratios {
        assert!(ratios.iter().all(|r| (r - 1.0).abs() < 1e-9));
    }
}

#[test]
fn on_policy_gradient_is_the_policy_gradient() {
    let m = peaked(7);
    let groups = vec![toy_group(&m, 8)];
    let refs = references(&m, &groups);
    let (_, grads) = grpo_batch_loss(&m, &groups, &refs, &LossSettings::new(0.2, 0.0)).unwrap();
    // plain estimator: −(1/R) Σ_n A_n · mean_t ∇ log π(o_t)
    let h = 1e-5;
    let g = &groups[0];
    let score = |params: &[Tensor]| {
        let mut mm = m.clone();
        mm.params_mut().clone_from_slice(params);
        g.records
            .iter()
            .map(|r| {
                let lp = sequence_log_probs(&mm, &g.prompt, &r.response, AttentionMode::Frozen(&r.selections)).unwrap();
                r.advantage * lp.iter().sum::<f64>() / lp.len() as f64
            })
            .sum::<f64>()
            / g.records.len() as f64
    };
    let mut params = m.params().to_vec();
    let t = m.params().len() - 1;
    for i in [0, 3, 11] {
        let orig = params[t].data()[i];
        params[t].data_mut()[i] = orig + h;
        let up = score(&params);
        params[t].data_mut()[i] = orig - h;
        let down = score(&params);
        params[t].data_mut()[i] = orig;
        let fd = -(up - down) / (2.0 * h);
        assert!((grads[t].data()[i] - fd).abs() < 1e-7 * (1.0 + fd.abs()));
    }
}

#[test]
fn zero_advantages_without_kl_give_zero_gradient() {
    let m = peaked(9);
    let mut groups = vec![toy_group(&m, 10)];
    for r in groups[0].records.iter_mut() {
        r.advantage = 0.0;
    }
    let refs = references(&m, &groups);
    let (_, grads) = grpo_batch_loss(&m, &groups, &refs, &LossSettings::new(0.2, 0.0)).unwrap();
    assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn missing_selections_are_a_contract_error() {
    let m = peaked(11);
    let mut groups = vec![toy_group(&m, 12)];
    let refs = references(&m, &groups);
    groups[0].records[0].selections.clear();
    let r = grpo_batch_loss(&m, &groups, &refs, &LossSettings::new(0.2, 0.04));
    assert!(matches!(r, Err(sparsity_forcing::Error::Contract(_))));
}

#[test]
fn groups_are_deterministic_and_consistent() {
    let m = peaked(13);
    let p = prompt(14);
    let mut cfg = rollout_cfg();
    cfg.group_size = 8;
    let a = sample_group(&m, 3, &p, &[3, END], &cfg, 99).unwrap();
    let b = sample_group(&m, 3, &p, &[3, END], &cfg, 99).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.gate, a.records.iter().any(|r| r.correct));
    for r in &a.records {
        assert!(cfg.variant.top_p_grid.contains(&r.policy.knob()));
        assert!(r.token_ratio > 0.0 && r.token_ratio <= 1.0);
        let expected = f64::from(u8::from(r.correct)) + if a.gate { 1.0 - r.token_ratio } else { 0.0 };
        assert_eq!(r.reward, expected);
    }
}

fn task_model_and_data() -> (Model, Vec<Sample>) {
    let m = peaked(15);
    let data = (0..3).map(|i| Sample { prompt: prompt(20 + i), gold: vec![3, END] }).collect();
    (m, data)
}

#[test]
fn reference_is_untouched_and_zero_lr_is_a_no_op() {
    let (m, data) = task_model_and_data();
    let mut cfg = TrainerConfig::new(rollout_cfg());
    cfg.batch_prompts = 2;
    let batch: Vec<(usize, &Sample)> = data.iter().enumerate().take(2).collect();

    let before = m.checksum();
    let mut t = Trainer::new(m.clone(), cfg.clone()).unwrap();
    for _ in 0..3 {
        t.train_step(&batch).unwrap();
    }
    assert_eq!(t.reference().checksum(), before);
    assert_eq!(t.reference(), &m);

    cfg.lr = 0.0;
    let mut t = Trainer::new(m.clone(), cfg).unwrap();
    for _ in 0..2 {
        t.train_step(&batch).unwrap();
    }
    assert_eq!(t.policy, m);
}

#[test]
fn objective_improves_on_a_fixed_batch() {
    // a fixed group re-scored after each update: the surrogate should rise
    let m = peaked(16);
    let mut groups = vec![toy_group(&m, 17), toy_group(&m, 18)];
    for g in groups.iter_mut() {
        for (r, a) in g.records.iter_mut().zip([1.0, -1.0]) {
            r.advantage = a;
        }
    }
    let refs = references(&m, &groups);
    let s = LossSettings::new(0.2, 0.04);
    let mut policy = m.clone();
    let mut opt = sparsity_forcing::grpo::Adam::new(1e-3);
    let mut last = f64::NEG_INFINITY;
    for _ in 0..10 {
        let (terms, grads) = grpo_batch_loss(&policy, &groups, &refs, &s).unwrap();
        assert!(terms.objective >= last - 1e-9);
        last = terms.objective;
        opt.step(policy.params_mut(), &grads).unwrap();
    }
}

proptest! {
    #[test]
    fn advantages_are_normalized(rewards in prop::collection::vec(0.0f64..2.0, 2..12)) {
        let a = compute_advantages(&rewards);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let spread = {
            let m = rewards.iter().sum::<f64>() / n;
            (rewards.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / n).sqrt()
        };
        if spread < 1e-8 {
            prop_assert!(a.iter().all(|&v| v == 0.0));
        } else {
            prop_assert!(mean.abs() < 1e-9);
            let std = (a.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            prop_assert!((std - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gate_and_ordering(correct in prop::collection::vec(any::<bool>(), 2..10), seed in 0u64..1000) {
        let mut rng = SplitRng::new(seed);
        let ratios: Vec<f64> = correct.iter().map(|_| 0.01 + 0.99 * rng.uniform()).collect();
        let (gate, r) = compute_rewards(&correct, &ratios);
        if !gate {
            prop_assert!(r.iter().all(|&v| v == 0.0));
            prop_assert!(compute_advantages(&r).iter().all(|&v| v == 0.0));
        }
        for i in 0..r.len() {
            for j in 0..r.len() {
                if correct[i] && correct[j] && ratios[i] < ratios[j] {
                    prop_assert!(r[i] > r[j]);
                }
            }
        }
    }

    #[test]
    fn kl_is_non_negative(p in -20.0f64..0.0, q in -20.0f64..0.0) {
        prop_assert!(kl_token(p, q) >= 0.0);
        prop_assert!(kl_estimate(&[p, q], &[q, p]) >= 0.0);
    }

    #[test]
    fn clip_branch_bounds_the_ratio(ratio in 0.01f64..5.0, adv in -3.0f64..3.0, eps in 0.05f64..0.5) {
        let s = clipped_surrogate(ratio, adv, eps);
        prop_assert!(s <= (ratio * adv).max(ratio.clamp(1.0 - eps, 1.0 + eps) * adv));
        if clip_active(ratio, adv, eps) {
            let effective = s / adv;
            prop_assert!(effective >= 1.0 - eps - 1e-12 && effective <= 1.0 + eps + 1e-12);
        } else {
            prop_assert_eq!(s, ratio * adv);
        }
        if adv >= 0.0 && ratio >= 1.0 {
            prop_assert!(s <= ratio * adv);
        }
    }
}
