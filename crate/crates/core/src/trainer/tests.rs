use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{grad_check_scaled, Tape};
use crate::nets::{Binder, Critic, WeightCopy};

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        tau: 0.05,
        ..TrainConfig::desk()
    }
}

fn small_net() -> NetConfig {
    NetConfig {
        token_hidden: 8,
        token_dim: 6,
        embed_dim: 4,
        value_feature_dim: 8,
        policy_feature_dim: 8,
        block_hidden: 8,
        ..NetConfig::default()
    }
}

fn kinds(greens: usize, reds: usize) -> Roster {
    let mut k = vec![AgentKind::Green; greens];
    k.extend(vec![AgentKind::Red; reds]);
    Roster::from_kinds(&k)
}

fn trainer(greens: usize, reds: usize, seed: u64) -> Trainer {
    Trainer::new(
        small_config(),
        Task::FindingHome,
        EnvConfig::default(),
        small_net(),
        kinds(greens, reds),
        seed,
    )
    .unwrap()
}

fn sample_batch(t: &Trainer, size: usize, seed: u64) -> Batch {
    let ts = t
        .buffer()
        .sample(size, &t.roster().tag(), &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap()
        .unwrap();
    Batch::from_transitions(&ts).unwrap()
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn clipped_double_q_examples() {
    assert_eq!(clipped_double_q(1.25, false, 0.0, 7.0, 9.0), 1.25);
    assert_eq!(clipped_double_q(1.25, true, 0.99, 7.0, 9.0), 1.25);
    assert!((clipped_double_q(1.0, false, 0.99, 2.0, 1.5) - 2.485).abs() < 1e-12);
}

proptest! {
    #[test]
    fn clipped_target_is_below_each_critic_target(r in -5.0..5.0f64, q1 in -50.0..50.0f64, q2 in -50.0..50.0f64, gamma in 0.01..1.0f64) {
        let y = clipped_double_q(r, false, gamma, q1, q2);
        prop_assert!(y <= r + gamma * q1 && y <= r + gamma * q2);
    }
}

#[test]
fn td_targets_use_the_smaller_critic() {
    let mut t = trainer(1, 1, 0);
    t.train(2).unwrap();
    let batch = sample_batch(&t, 8, 1);
    let noise = smoothing_noise(&[batch.rows(), NUM_ACTIONS], 0.2, 0.5, &mut ChaCha8Rng::seed_from_u64(2));
    assert!(noise.data().iter().all(|v| v.abs() <= 0.5));
    let next = target_actions(t.bundle(), &batch, 1.0, &noise).unwrap();
    for r in 0..batch.rows() {
        assert!((next.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let td = td_targets(t.bundle(), &batch, 0.99, &next).unwrap();
    for r in 0..batch.rows() {
        let rew = batch.rewards.data()[r];
        let y = td.y.data()[r];
        if batch.done.data()[r] == 0.0 {
            assert!(y <= rew + 0.99 * td.q1.data()[r] + 1e-12);
            assert!(y <= rew + 0.99 * td.q2.data()[r] + 1e-12);
        } else {
            assert_eq!(y, rew);
        }
    }
}

#[test]
fn update_cadence_over_1000_steps() {
    let mut t = trainer(1, 1, 3);
    let mut windows = Vec::new();
    for _ in 0..10 {
        let (c, a) = (t.critic_rounds(), t.actor_rounds());
        t.train(4).unwrap();
        windows.push((t.critic_rounds() - c, t.actor_rounds() - a));
    }
    assert_eq!(t.total_steps(), 1000);
    assert_eq!((t.critic_rounds(), t.actor_rounds()), (40, 20));
    assert!(windows.iter().all(|&w| w == (4, 2)));
}

#[test]
fn zero_episodes_gives_empty_metrics_and_valid_checkpoint() {
    let t = trainer(2, 2, 0);
    assert!(t.metrics().episodes.is_empty());
    let ck = t.checkpoint().unwrap();
    let back = Trainer::from_checkpoint(&Checkpoint::decode(&ck.encode()).unwrap()).unwrap();
    assert_eq!(back.bundle().params(), t.bundle().params());
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let mut t = trainer(1, 2, 4);
    t.train(3).unwrap();
    let bytes = t.checkpoint().unwrap().encode();
    let restored = Trainer::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
    assert_eq!(restored.checkpoint().unwrap().encode(), bytes);
    assert_eq!(restored.critic_rounds(), t.critic_rounds());
}

#[test]
fn same_seed_gives_identical_metrics_bytes() {
    let run = |seed| {
        let mut t = trainer(1, 1, seed);
        t.train(6).unwrap();
        let mut out = Vec::new();
        write_csv(&mut out, &t.metrics().episodes).unwrap();
        out
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
}

#[test]
fn few_shot_touches_only_the_joiner() {
    let mut t = trainer(1, 1, 5);
    t.train(4).unwrap();
    let before = t.bundle().params().clone();
    let added = t.join(&[(2, AgentKind::Green)], JoinMode::FewShot).unwrap();
    assert_eq!(added, 2 + 2 + 2 + small_net().embed_dim);
    // Segment for the new roster fills, then updates run.
    t.train(4).unwrap();
    assert!(t.critic_rounds() > 0);
    let after = t.bundle().params();
    let mut changed = BTreeSet::new();
    for (name, e) in after.iter() {
        match before.get(name) {
            Some(old) => {
                if bits(&old.online) != bits(&e.online) || bits(&old.target) != bits(&e.target) {
                    changed.insert(name.clone());
                }
            }
            None => {
                changed.insert(name.clone());
            }
        }
    }
    let joiner = after.names_in_group(crate::nets::ParamGroup::Agent(2));
    assert_eq!(changed, joiner);
    assert_eq!(after.scalar_count(&joiner), added);
}

#[test]
fn fine_tune_mode_returns_to_regular() {
    let mut t = Trainer::new(
        TrainConfig {
            fine_tune_after: 2,
            ..small_config()
        },
        Task::FindingHome,
        EnvConfig::default(),
        small_net(),
        kinds(1, 1),
        0,
    )
    .unwrap();
    t.join(&[(2, AgentKind::Red)], JoinMode::FewShotFineTune).unwrap();
    assert!(matches!(t.phase(), Phase::FewShot(_)));
    t.train(2).unwrap();
    assert_eq!(t.phase(), &Phase::Regular);
}

#[test]
fn from_scratch_reinitialises() {
    let mut t = trainer(1, 1, 0);
    t.train(4).unwrap();
    let old = t.bundle().shared_checksum();
    t.join(&[(2, AgentKind::Green)], JoinMode::FromScratch).unwrap();
    assert_ne!(t.bundle().shared_checksum(), old);
    assert_eq!(t.buffer().len(), 0);
    assert_eq!(t.bundle().live_ids(), vec![0, 1, 2]);
    assert!(t.join(&[(2, AgentKind::Green)], JoinMode::FewShot).is_err());
}

#[test]
fn drop_keeps_remaining_parameters_and_evaluates() {
    let mut t = trainer(2, 2, 6);
    t.train(4).unwrap();
    let before = t.bundle().params().clone();
    t.handle_drop(&[1]).unwrap();
    assert_eq!(t.bundle().params(), &before);
    let report = t.evaluate(2, 0).unwrap();
    assert_eq!(report.roster.0, vec![0, 2, 3]);
    t.train(2).unwrap();
    // The dropped agent's private parameters stay frozen while training continues.
    for name in t.bundle().params().names_in_group(crate::nets::ParamGroup::Agent(1)) {
        assert_eq!(t.bundle().params().get(&name), before.get(&name));
    }
    for n in [2usize, 3] {
        let mut t = trainer(n, 1, 0);
        t.handle_drop(&[0]).unwrap();
        t.evaluate(1, 0).unwrap();
    }
}

#[test]
fn evaluation_is_pure_and_seeded() {
    let mut t = trainer(1, 1, 2);
    t.train(2).unwrap();
    let sum = t.bundle().params().checksum(|_, _| true);
    let a = t.evaluate(3, 11).unwrap();
    let b = t.evaluate(3, 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(sum, t.bundle().params().checksum(|_, _| true));
    assert_eq!(a.rewards.len(), 3);
    let empty = t.evaluate(0, 11).unwrap();
    assert!(empty.rewards.is_empty());
}

#[test]
fn mixed_checkpoint_evaluation() {
    let roster = Roster::from_kinds(&[AgentKind::Predator, AgentKind::Predator, AgentKind::Prey]);
    let mk = |seed| {
        Trainer::new(small_config(), Task::PredatorPrey, EnvConfig::default(), small_net(), roster.clone(), seed).unwrap()
    };
    let (a, b) = (mk(1), mk(2));
    let mixed = evaluate(Task::PredatorPrey, a.env_config(), &roster, 2, 0, &|k| {
        if k == AgentKind::Prey {
            b.bundle()
        } else {
            a.bundle()
        }
    })
    .unwrap();
    assert_eq!(mixed.touches.len(), 2);
    let own = a.evaluate(2, 0).unwrap();
    assert_eq!(own.episodes, 2);
}

#[test]
fn frozen_phase_actor_update_leaves_shared_weights() {
    let mut t = trainer(1, 1, 7);
    t.train(4).unwrap();
    t.join(&[(2, AgentKind::Green)], JoinMode::FewShot).unwrap();
    t.train(2).unwrap();
    let shared = t.bundle().shared_checksum();
    let batch = sample_batch(&t, 8, 0);
    let trainable = t.bundle().trainable_set(t.phase()).unwrap();
    let ctx = UpdateContext {
        gamma: 0.99,
        temperature: 1.0,
        target_noise: 0.2,
        target_noise_clip: 0.5,
        logit_penalty: 1e-3,
        trainable: &trainable,
    };
    let mut bundle = t.bundle().clone();
    let mut opt = AdamState::new(AdamConfig::default());
    update::actor_update(&mut bundle, &mut opt, &batch, &ctx, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(bundle.shared_checksum(), shared);
    assert_ne!(bundle.params().get("policy/selector/2"), t.bundle().params().get("policy/selector/2"));
}

#[test]
fn actor_loss_of_one_agent_ignores_other_selectors() {
    let mut t = trainer(2, 1, 8);
    t.train(2).unwrap();
    let batch = sample_batch(&t, 6, 0);
    let bundle = t.bundle();
    let all = bundle.trainable_set(&Phase::Regular).unwrap();
    let noise = gumbel_noise(&[batch.rows(), NUM_ACTIONS], &mut ChaCha8Rng::seed_from_u64(1));
    let mut tape = Tape::new();
    let mut policy = bundle.binder(WeightCopy::Online, Some(&all));
    let mut critic = Binder::frozen(bundle.params(), WeightCopy::Online);
    let loss = actor_loss(&mut tape, &mut policy, &mut critic, bundle, &batch, &noise, 1.0, 0.0, Some(0)).unwrap();
    let grads = policy.gradients(&tape, &tape.backward(loss).unwrap());
    let zero = |n: &str| grads[n].data().iter().all(|v| *v == 0.0);
    assert!(zero("policy/selector/1") && zero("policy/selector/2"));
    assert!(!zero("policy/selector/0"));
}

#[test]
fn polyak_contracts_toward_online() {
    let mut t = trainer(1, 1, 1);
    t.train(4).unwrap();
    let reg = t.bundle().params().clone();
    let mut bundle = t.bundle().clone();
    bundle.polyak_update(0.3, None).unwrap();
    for (name, e) in bundle.params().iter() {
        let old = reg.get(name).unwrap();
        assert!(e.target.max_abs_diff(&e.online) <= old.target.max_abs_diff(&old.online));
    }
}

#[test]
fn full_losses_pass_gradient_check() {
    let mut t = trainer(2, 1, 4);
    t.train(2).unwrap();
    let batch = sample_batch(&t, 3, 0);
    let bundle = t.bundle();
    let noise = smoothing_noise(&[batch.rows(), NUM_ACTIONS], 0.2, 0.5, &mut ChaCha8Rng::seed_from_u64(0));
    let next = target_actions(bundle, &batch, 1.0, &noise).unwrap();
    let y = td_targets(bundle, &batch, 0.99, &next).unwrap().y;

    let critic_names = [
        "critic1/token1/w",
        "critic1/attn/wq",
        "critic1/attn/out/w",
        "critic1/block1/hidden/w",
        "critic1/selector/1",
        "embed/agent/0",
        "embed/landmark/1",
    ];
    let params: Vec<Tensor> = critic_names.iter().map(|n| bundle.params().get(n).unwrap().online.clone()).collect();
    let err = grad_check_scaled(
        |tape, vars| {
            let mut binder = Binder::frozen(bundle.params(), WeightCopy::Online);
            for (n, v) in critic_names.iter().zip(vars) {
                binder = binder.with_var(*n, *v);
            }
            critic_loss(tape, &mut binder, bundle, Critic::First, &batch, &y).map_err(|e| match e {
                TrainError::Diff(d) => d,
                other => crate::diffcore::DiffError::InvalidArgument(other.to_string()),
            })
        },
        &params,
        1e-6,
        1e-2,
    )
    .unwrap();
    assert!(err < 1e-4, "critic loss rel err {err}");

    let gumbel = gumbel_noise(&[batch.rows(), NUM_ACTIONS], &mut ChaCha8Rng::seed_from_u64(1));
    let policy_names = [
        "policy/token2/w",
        "policy/attn/wv",
        "policy/block0/out/b",
        "policy/selector/2",
        "embed/agent/1",
    ];
    let params: Vec<Tensor> = policy_names.iter().map(|n| bundle.params().get(n).unwrap().online.clone()).collect();
    let err = grad_check_scaled(
        |tape, vars| {
            let mut policy = Binder::frozen(bundle.params(), WeightCopy::Online);
            for (n, v) in policy_names.iter().zip(vars) {
                policy = policy.with_var(*n, *v);
            }
            let mut critic = Binder::frozen(bundle.params(), WeightCopy::Online);
            actor_loss(tape, &mut policy, &mut critic, bundle, &batch, &gumbel, 1.0, 1e-3, None).map_err(|e| match e {
                TrainError::Diff(d) => d,
                other => crate::diffcore::DiffError::InvalidArgument(other.to_string()),
            })
        },
        &params,
        1e-6,
        1e-2,
    )
    .unwrap();
    assert!(err < 1e-4, "actor loss rel err {err}");
}
