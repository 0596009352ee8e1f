use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn finding_home(greens: usize, reds: usize) -> Env {
    let mut kinds = vec![AgentKind::Green; greens];
    kinds.extend(vec![AgentKind::Red; reds]);
    Env::new(Task::FindingHome, EnvConfig::default(), Roster::from_kinds(&kinds)).unwrap()
}

fn predator_prey(predators: usize) -> Env {
    let mut kinds = vec![AgentKind::Predator; predators];
    kinds.push(AgentKind::Prey);
    Env::new(Task::PredatorPrey, EnvConfig::default(), Roster::from_kinds(&kinds)).unwrap()
}

fn agent(id: AgentId, kind: AgentKind, pos: [f64; 2]) -> AgentState {
    AgentState {
        id,
        kind,
        pos,
        vel: [0.0, 0.0],
    }
}

#[test]
fn reset_is_seed_deterministic() {
    let mut env = finding_home(2, 2);
    let a = env.reset(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let sa = env.state().unwrap().clone();
    let b = env.reset(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(&sa, env.state().unwrap());
    assert!(sa.agents.iter().all(|a| a.vel == [0.0, 0.0]));
    assert_eq!(sa.step, 0);
}

#[test]
fn entity_counts_per_task() {
    let mut env = finding_home(2, 2);
    env.reset(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let s = env.state().unwrap();
    assert_eq!((s.agents.len(), s.landmarks.len()), (4, 2));
    assert!(s.landmarks.iter().all(|l| matches!(l.kind, LandmarkKind::Home(_))));

    let mut env = predator_prey(3);
    env.reset(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let s = env.state().unwrap();
    assert_eq!((s.agents.len(), s.landmarks.len()), (4, 2));
    assert!(s.landmarks.iter().all(|l| l.kind == LandmarkKind::Obstacle));
}

#[test]
fn empty_roster_is_rejected() {
    let err = Env::new(Task::FindingHome, EnvConfig::default(), Roster::new()).unwrap_err();
    assert!(matches!(err, EnvError::EmptyRoster));
}

#[test]
fn all_stay_from_rest_keeps_positions() {
    let mut env = finding_home(2, 2);
    env.reset(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let before = env.state().unwrap().clone();
    env.step(&[DiscreteAction::STAY; 4]).unwrap();
    let after = env.state().unwrap();
    for (a, b) in before.agents.iter().zip(&after.agents) {
        assert_eq!(a.pos, b.pos);
    }
}

#[test]
fn integrator_example() {
    let mut env = Env::new(
        Task::FindingHome,
        EnvConfig::default(),
        Roster::from_kinds(&[AgentKind::Green]),
    )
    .unwrap();
    env.reset_to(WorldState {
        task: Task::FindingHome,
        agents: vec![agent(0, AgentKind::Green, [0.0, 0.0])],
        landmarks: vec![],
        step: 0,
    })
    .unwrap();
    env.step(&[DiscreteAction::RIGHT]).unwrap();
    let a = &env.state().unwrap().agents[0];
    assert!((a.vel[0] - 0.1).abs() < 1e-15 && a.vel[1] == 0.0);
    assert!((a.pos[0] - 0.01).abs() < 1e-15 && a.pos[1] == 0.0);
}

#[test]
fn episode_ends_at_step_25() {
    let mut env = predator_prey(3);
    env.reset(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for t in 1..=25 {
        let out = env.step(&[DiscreteAction::UP; 4]).unwrap();
        assert_eq!(out.done, t == 25);
    }
}

#[test]
fn wrong_action_count_is_an_error() {
    let mut env = finding_home(2, 2);
    assert!(matches!(env.step(&[DiscreteAction::STAY; 4]), Err(EnvError::NotReset)));
    env.reset(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(
        env.step(&[DiscreteAction::STAY; 3]),
        Err(EnvError::ActionCount { expected: 4, got: 3 })
    ));
    assert!(DiscreteAction::new(5).is_err());
}

fn homes() -> Vec<Landmark> {
    vec![
        Landmark {
            kind: LandmarkKind::Home(AgentKind::Green),
            pos: [0.0, 0.0],
        },
        Landmark {
            kind: LandmarkKind::Home(AgentKind::Red),
            pos: [0.0, 0.5],
        },
    ]
}

#[test]
fn finding_home_reward_examples() {
    let cfg = EnvConfig::default();
    let at_home = WorldState {
        task: Task::FindingHome,
        agents: vec![agent(0, AgentKind::Green, [0.0, 0.0]), agent(1, AgentKind::Red, [0.0, 0.5])],
        landmarks: homes(),
        step: 0,
    };
    assert_eq!(reward_finding_home(&at_home, &cfg), 0.0);

    let apart = WorldState {
        agents: vec![agent(0, AgentKind::Green, [0.5, 0.0]), agent(1, AgentKind::Red, [0.0, -1.0])],
        ..at_home
    };
    assert!((reward_finding_home(&apart, &cfg) + 2.0).abs() < 1e-12);
}

#[test]
fn finding_home_reward_with_one_collision_is_minus_three() {
    // Homes placed so the two agents overlap while 0.5 and 1.5 away from home.
    let cfg = EnvConfig::default();
    let s = WorldState {
        task: Task::FindingHome,
        agents: vec![agent(0, AgentKind::Green, [0.0, 0.0]), agent(1, AgentKind::Red, [0.0, 0.0])],
        landmarks: vec![
            Landmark {
                kind: LandmarkKind::Home(AgentKind::Green),
                pos: [0.5, 0.0],
            },
            Landmark {
                kind: LandmarkKind::Home(AgentKind::Red),
                pos: [-1.5, 0.0],
            },
        ],
        step: 0,
    };
    assert!((reward_finding_home(&s, &cfg) + 3.0).abs() < 1e-12);
}

#[test]
fn predator_prey_reward_examples() {
    let cfg = EnvConfig::default();
    let far = WorldState {
        task: Task::PredatorPrey,
        agents: vec![
            agent(0, AgentKind::Predator, [1.0, 0.0]),
            agent(1, AgentKind::Predator, [-1.0, 0.0]),
            agent(2, AgentKind::Prey, [0.0, 0.0]),
        ],
        landmarks: vec![],
        step: 0,
    };
    // distances 1.0 and 1.0 + the offset predator below
    let mut s = far.clone();
    s.agents[1].pos = [-2.0, 0.0];
    let r = reward_predator_prey(&s, &cfg);
    assert_eq!(r.touches, 0);
    assert!((r.predator + 3.0).abs() < 1e-12 && (r.prey - 3.0).abs() < 1e-12);

    let touch = WorldState {
        agents: vec![agent(0, AgentKind::Predator, [0.1, 0.0]), agent(1, AgentKind::Prey, [0.0, 0.0])],
        ..far
    };
    let r = reward_predator_prey(&touch, &cfg);
    assert_eq!(r.touches, 1);
    assert!((r.predator - 9.9).abs() < 1e-12);
    assert_eq!(r.predator + r.prey, 0.0);
}

#[test]
fn roster_change_updates_component_counts() {
    let mut env = finding_home(2, 2);
    let obs = env.reset(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!((obs[0].components.len(), obs[0].landmarks.len()), (4, 2));
    env.roster_change(&[(4, AgentKind::Green), (5, AgentKind::Red)], &[]).unwrap();
    let obs = env.reset(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(obs.len(), 6);
    assert_eq!((obs[0].components.len(), obs[0].landmarks.len()), (6, 2));

    let mut env = predator_prey(3);
    env.roster_change(&[(4, AgentKind::Predator), (5, AgentKind::Predator), (6, AgentKind::Predator)], &[])
        .unwrap();
    assert_eq!(env.roster().live_count(), 7);
}

#[test]
fn roster_change_round_trip_and_errors() {
    let mut env = finding_home(2, 2);
    let before = env.roster().tag();
    env.roster_change(&[(9, AgentKind::Red)], &[]).unwrap();
    env.roster_change(&[], &[9]).unwrap();
    assert_eq!(env.roster().tag(), before);
    assert!(env.roster_change(&[], &[42]).is_err());
    assert!(env.roster_change(&[(7, AgentKind::Prey)], &[]).is_err());
    // A failed change leaves the roster alone.
    assert_eq!(env.roster().tag(), before);
}

#[test]
fn trajectory_dump_is_ndjson() {
    let mut env = finding_home(1, 1);
    env.reset(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut w = TrajectoryWriter::new(Vec::new());
    for _ in 0..3 {
        let out = env.step(&[DiscreteAction::LEFT, DiscreteAction::UP]).unwrap();
        let rec = TrajectoryRecord::from_state(0, env.state().unwrap(), vec![0, 2], out.rewards);
        w.write(&rec).unwrap();
    }
    let text = String::from_utf8(w.into_inner()).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let back: TrajectoryRecord = serde_json::from_str(lines[2]).unwrap();
    assert_eq!(back.step, 3);
    assert_eq!(back.actions, vec![0, 2]);
}

fn run_episode(seed: u64) -> Vec<Vec<f64>> {
    let mut env = predator_prey(3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    env.reset(&mut rng).unwrap();
    let mut rewards = Vec::new();
    loop {
        let acts: Vec<_> = (0..4).map(|_| DiscreteAction::new(rng.random_range(0..5)).unwrap()).collect();
        let out = env.step(&acts).unwrap();
        rewards.push(out.rewards);
        if out.done {
            return rewards;
        }
    }
}

#[test]
fn episode_is_bit_reproducible() {
    let a = run_episode(11);
    let b = run_episode(11);
    assert_eq!(a.len(), 25);
    assert!(a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #[test]
    fn observation_antisymmetry_and_clamping(seed in any::<u64>(), greens in 1usize..4, reds in 1usize..4) {
        let mut env = finding_home(greens, reds);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        env.reset(&mut rng).unwrap();
        let n = greens + reds;
        for _ in 0..25 {
            let acts: Vec<_> = (0..n).map(|_| DiscreteAction::new(rng.random_range(0..5)).unwrap()).collect();
            let out = env.step(&acts).unwrap();
            let obs = &out.observations;
            for i in 0..n {
                prop_assert_eq!(obs[i].components.len(), n);
                prop_assert_eq!(obs[i].landmarks.len(), 2);
                for j in 0..n {
                    if i != j {
                        prop_assert_eq!(obs[i].components[j][0], -obs[j].components[i][0]);
                        prop_assert_eq!(obs[i].components[j][1], -obs[j].components[i][1]);
                    }
                }
            }
            let s = env.state().unwrap();
            prop_assert!(s.agents.iter().all(|a| a.pos.iter().all(|p| (-1.0..=1.0).contains(p))));
            let r1 = reward_finding_home(s, env.config());
            prop_assert_eq!(r1.to_bits(), reward_finding_home(s, env.config()).to_bits());
        }
    }

    #[test]
    fn predator_prey_is_zero_sum(seed in any::<u64>(), predators in 1usize..6) {
        let mut env = predator_prey(predators);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        env.reset(&mut rng).unwrap();
        let r = reward_predator_prey(env.state().unwrap(), env.config());
        prop_assert!((r.predator + r.prey).abs() <= 1e-12);
    }
}
