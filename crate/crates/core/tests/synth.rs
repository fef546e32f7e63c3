use polab::objectives::RunningBaseline;
use polab::policy::{Policy, PolicySpec, SamplerConfig, EOS};
use polab::synth::{
    build_final_responses, flow_experiment, flow_step, gen_pairs, gen_rollouts, AdvantageConfig, FlowDirection,
    FlowState, Sampler, SyntheticTask, TaskSpec,
};

fn task() -> SyntheticTask {
    SyntheticTask::new(TaskSpec { seed: 11, vocab_size: 6, prompt_len: 3, resp_len: 4, feature_dim: 4 }).unwrap()
}

fn behaviour() -> (Policy, polab::ParamVector) {
    let policy = Policy::new(PolicySpec::linear_softmax(6, 2, 3, 5)).unwrap();
    let params = policy.init_params(0.5);
    (policy, params)
}

const SAMPLER: SamplerConfig = SamplerConfig { temperature: 1.0, top_p: 0.95, max_len: 4 };

#[test]
fn pairs_are_strictly_ordered_and_reproducible() {
    let task = task();
    let (policy, params) = behaviour();
    let prompts = task.train_prompts(200);
    let sampler = Sampler { policy: &policy, params: &params, config: SAMPLER };
    let pairs = gen_pairs(&task, &prompts, sampler, 3).unwrap();
    assert_eq!(pairs.len(), 200);
    for p in &pairs {
        assert_ne!(p.y_plus, p.y_minus);
        assert!(task.hidden_reward(&p.x, &p.y_plus) > task.hidden_reward(&p.x, &p.y_minus));
    }
    assert_eq!(gen_pairs(&task, &prompts, sampler, 3).unwrap(), pairs);
    assert_ne!(gen_pairs(&task, &prompts, sampler, 4).unwrap(), pairs);
}

#[test]
fn rollouts_record_behaviour_log_probs() {
    let task = task();
    let (policy, params) = behaviour();
    let prompts = task.train_prompts(40);
    let sampler = Sampler { policy: &policy, params: &params, config: SAMPLER };
    let mut baseline = RunningBaseline::default();
    let rollouts =
        gen_rollouts(&task, &prompts, sampler, 9, AdvantageConfig::default(), Some(&mut baseline)).unwrap();
    for r in &rollouts {
        let again = policy.token_log_probs(&params, &r.x, &r.y).unwrap();
        for (a, b) in again.iter().zip(&r.old_logps) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(r.old_logps.iter().sum::<f64>().exp() <= 1.0);
        let (last, rest) = r.rewards.split_last().unwrap();
        assert!(rest.iter().all(|v| *v == 0.0));
        assert_eq!(*last, task.hidden_reward(&r.x, &r.y));
        assert_eq!(r.advantages.len(), r.y.len());
    }
    let adv: Vec<f64> = rollouts.iter().flat_map(|r| r.advantages.clone()).collect();
    let mean = adv.iter().sum::<f64>() / adv.len() as f64;
    assert!(mean.abs() < 1e-12);
}

#[test]
fn final_responses_are_greedy_and_reproducible() {
    let task = task();
    let (policy, params) = behaviour();
    let train = task.train_prompts(30);
    let held_out = task.eval_prompts(20, 0.0, &train).unwrap();
    assert!(held_out.iter().all(|p| !train.contains(p)));
    let in_dist = task.eval_prompts(20, 1.0, &train).unwrap();
    assert!(in_dist.iter().all(|p| train.contains(p)));

    let set = build_final_responses(&policy, &params, &held_out, 4, "ckpt_00000010.bin").unwrap();
    assert_eq!(set, build_final_responses(&policy, &params, &held_out, 4, "ckpt_00000010.bin").unwrap());
    for item in &set.items {
        assert!(item.y.ends_with_eos() || item.y.len() == 4);
        assert!(!item.y.0[..item.y.len() - 1].contains(&EOS));
        assert_eq!(item.y, policy.greedy_decode(&params, &item.x, 4).unwrap());
    }
}

#[test]
fn single_positive_step_oracle() {
    let s = FlowState::new(vec![0.5, 0.5], vec![0.8, 0.2]).unwrap();
    let (next, clamped) = flow_step(&s, FlowDirection::Positive, 0.1);
    assert!(!clamped);
    assert!((next.probs[0] - 0.53).abs() < 1e-15 && (next.probs[1] - 0.47).abs() < 1e-15);
}

#[test]
fn positive_flow_converges_to_reweighted_target() {
    let start = FlowState::new(vec![0.1, 0.3, 0.6], vec![0.5, 0.25, 0.25]).unwrap();
    for reweight in [None, Some(&[2.0, 1.0, 0.5][..])] {
        let traj = flow_experiment(&start, FlowDirection::Positive, reweight, 10_000, 0.1).unwrap();
        let reached = traj.distances.iter().position(|d| *d < 1e-6).expect("converged");
        for w in traj.distances[..=reached].windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(traj.boundary_step.is_none());
    }

    let p = FlowState::new(vec![0.9, 0.1], vec![0.5, 0.5]).unwrap();
    let traj = flow_experiment(&p, FlowDirection::Positive, Some(&[2.0, 1.0]), 10_000, 0.1).unwrap();
    assert!((traj.effective_target[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((traj.final_probs[0] - 2.0 / 3.0).abs() < 1e-9);
}

#[test]
fn negative_flow_diverges_until_the_boundary() {
    let target = vec![0.4, 0.35, 0.25];
    for (k, eps) in [1e-3, 1e-6, 1e-9].into_iter().enumerate() {
        let mut dir = vec![1.0, -1.0, 0.0];
        dir.rotate_right(k);
        let norm = 2f64.sqrt();
        let probs: Vec<f64> = target.iter().zip(&dir).map(|(t, d)| t + eps * d / norm).collect();
        let start = FlowState::new(probs, target.clone()).unwrap();
        let traj = flow_experiment(&start, FlowDirection::Negative, None, 10_000, 0.1).unwrap();
        let boundary = traj.boundary_step.expect("reaches the simplex boundary");
        for w in traj.distances[..boundary].windows(2) {
            assert!(w[1] > w[0]);
        }
    }
}
