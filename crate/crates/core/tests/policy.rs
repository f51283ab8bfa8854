use hgm_core::diffcore::LrSchedule;
use hgm_core::policy::*;
use hgm_core::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const OP_W: usize = 8;
const BG_W: usize = 11;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn observation(rng: &mut ChaCha8Rng, cfg: &PolicyConfig, tokens: usize) -> Observation {
    Observation {
        global_cloud: random(rng, cfg.n_points, 3),
        joint_state: (0..cfg.joint_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        operated_descriptors: random(rng, tokens, OP_W),
        background_descriptors: random(rng, tokens, BG_W),
    }
}

fn unit_stats(cfg: &PolicyConfig) -> ActionStats {
    ActionStats { min: vec![-1.0; cfg.action_dim], max: vec![1.0; cfg.action_dim] }
}

fn small_config() -> PolicyConfig {
    PolicyConfig {
        n_points: 16,
        cloud_hidden: vec![32],
        cloud_dim: 32,
        joint_hidden: vec![16],
        joint_embed_dim: 16,
        denoiser_hidden: vec![128, 128],
        batch_size: 32,
        lr: 1e-3,
        lr_warmup_steps: 10,
        ..Default::default()
    }
}

fn zero_denoiser(bundle: &mut PolicyBundle) {
    let last = *bundle.network.denoiser.layers.last().unwrap();
    last.zero(&mut bundle.store);
}

/// ᾱ_t straight from the squared-cosine formula, without going through β.
fn alpha_bar_closed_form(t: usize, t_train: usize) -> f64 {
    let s = 0.008;
    let f = |t: f64| (((t / t_train as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    f(t as f64) / f(0.0)
}

#[test]
fn condition_length_with_defaults() {
    let cfg = PolicyConfig::default();
    assert_eq!(cfg.condition_dim(), 3 * (64 + 32) + 64);
    let bundle = PolicyBundle::new(cfg.clone(), OP_W, BG_W, unit_stats(&cfg)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let window: Vec<Observation> = (0..3).map(|_| observation(&mut rng, &cfg, 16)).collect();
    assert_eq!(build_condition(&window, &bundle).unwrap().len(), 352);
}

#[test]
fn condition_rejects_wrong_window_length() {
    let cfg = small_config();
    let bundle = PolicyBundle::new(cfg.clone(), OP_W, BG_W, unit_stats(&cfg)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let window: Vec<Observation> = (0..2).map(|_| observation(&mut rng, &cfg, 4)).collect();
    assert!(build_condition(&window, &bundle).is_err());
}

#[test]
fn identical_windows_give_identical_conditions() {
    let cfg = small_config();
    let bundle = PolicyBundle::new(cfg.clone(), OP_W, BG_W, unit_stats(&cfg)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let window: Vec<Observation> = (0..3).map(|_| observation(&mut rng, &cfg, 4)).collect();
    let a = build_condition(&window, &bundle).unwrap();
    let b = build_condition(&window.clone(), &bundle).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn normalization_endpoints_and_passthrough() {
    let stats = ActionStats { min: vec![-2.0, 0.0, 5.0], max: vec![2.0, 1.0, 5.0] };
    let chunk = Tensor::from_rows(&[vec![-2.0, 0.0, 7.0], vec![2.0, 1.0, -3.0], vec![0.0, 0.5, 5.0]]).unwrap();
    let n = stats.normalize(&chunk);
    assert_eq!(n.row(0)[..2], [-1.0, -1.0]);
    assert_eq!(n.row(1)[..2], [1.0, 1.0]);
    assert_eq!(n.row(2)[..2], [0.0, 0.0]);
    let passthrough: Vec<f32> = (0..3).map(|i| n.row(i)[2]).collect();
    assert_eq!(passthrough, vec![7.0, -3.0, 5.0]);
}

#[test]
fn fitted_stats_cover_the_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let actions = random(&mut rng, 50, 4);
    let stats = ActionStats::fit(&actions).unwrap();
    let n = stats.normalize(&actions);
    assert!(n.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    for j in 0..4 {
        let col: Vec<f32> = (0..50).map(|i| n.at(i, j)).collect();
        assert_eq!(col.iter().copied().fold(f32::INFINITY, f32::min), -1.0);
        assert_eq!(col.iter().copied().fold(f32::NEG_INFINITY, f32::max), 1.0);
    }
}

#[test]
fn add_noise_endpoints() {
    let s = NoiseSchedule::squared_cosine(100);
    let x0 = [0.5f32, -1.0, 2.0];
    let eps = [0.3f32, 0.1, -0.7];
    assert_eq!(add_noise(&s, &x0, 0, &eps), x0.to_vec());
    let scaled = add_noise(&s, &x0, 40, &[0.0; 3]);
    for (a, b) in scaled.iter().zip(&x0) {
        assert!((a - s.alpha_bar(40).sqrt() as f32 * b).abs() < 1e-6);
    }
}

#[test]
fn add_noise_variance_matches_forward_process() {
    let s = NoiseSchedule::squared_cosine(100);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let x0: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let var = |v: &[f32]| {
        let m = v.iter().map(|x| *x as f64).sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (*x as f64 - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    for t in [10, 50, 90] {
        let eps: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let xt = add_noise(&s, &x0, t, &eps);
        let ab = alpha_bar_closed_form(t, 100);
        let expected = ab * var(&x0) + (1.0 - ab);
        let got = var(&xt);
        assert!((got - expected).abs() / expected < 0.05, "t={t}: {got} vs {expected}");
    }
}

#[test]
fn schedule_matches_closed_form_away_from_the_cap() {
    let s = NoiseSchedule::squared_cosine(100);
    for t in 0..=95 {
        let want = alpha_bar_closed_form(t, 100);
        assert!((s.alpha_bar(t) - want).abs() <= 1e-12 * want.max(1e-3), "t={t}");
    }
}

#[test]
fn zero_denoiser_loss_is_chunk_length() {
    let cfg = PolicyConfig { n_points: 8, ..small_config() };
    let mut bundle = PolicyBundle::new(cfg.clone(), OP_W, BG_W, unit_stats(&cfg)).unwrap();
    zero_denoiser(&mut bundle);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let windows: Vec<Vec<Observation>> =
        (0..16).map(|_| (0..3).map(|_| observation(&mut rng, &cfg, 2)).collect()).collect();
    let chunks: Vec<Tensor> = (0..16).map(|_| random(&mut rng, cfg.horizon, cfg.action_dim)).collect();
    let batch: Vec<TrainItem<'_>> =
        (0..1024).map(|i| TrainItem { window: &windows[i % 16], chunk: &chunks[i % 16] }).collect();
    let loss = evaluate_loss(&batch, &bundle, &mut rng).unwrap() as f64;
    let expected = (cfg.action_dim * cfg.horizon) as f64;
    assert!((loss - expected).abs() / expected < 0.05, "loss {loss}");
}

#[test]
fn zero_denoiser_sample_telescopes() {
    let cfg = small_config();
    let mut bundle = PolicyBundle::new(cfg.clone(), OP_W, BG_W, unit_stats(&cfg)).unwrap();
    zero_denoiser(&mut bundle);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let window: Vec<Observation> = (0..3).map(|_| observation(&mut rng, &cfg, 4)).collect();
    let cond = build_condition(&window, &bundle).unwrap();
    let x_t = initial_noise(cfg.chunk_len(), 11);
    let x0 = ddim_sample_normalized(&cond, &bundle, 10, 11).unwrap();
    let t_max = bundle.schedule.inference_timesteps(10)[0];
    let scale = alpha_bar_closed_form(t_max, 100).sqrt();
    for (a, b) in x0.iter().zip(&x_t) {
        assert!((a - b / scale).abs() < 1e-5, "{a} vs {}", b / scale);
    }
}

#[test]
fn exact_noise_oracle_recovers_the_clean_chunk() {
    let s = NoiseSchedule::squared_cosine(100);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let target: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let steps = s.inference_timesteps(10);
    let out = ddim_loop(&s, &steps, initial_noise(32, 3), |x, t| {
        let ab = s.alpha_bar(t);
        Ok(x.iter().zip(&target).map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt()).collect())
    })
    .unwrap();
    for (a, b) in out.iter().zip(&target) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn sampling_is_deterministic_in_seed() {
    let cfg = small_config();
    let bundle = PolicyBundle::new(cfg.clone(), OP_W, BG_W, unit_stats(&cfg)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let window: Vec<Observation> = (0..3).map(|_| observation(&mut rng, &cfg, 4)).collect();
    let cond = build_condition(&window, &bundle).unwrap();
    let a = ddim_sample(&cond, &bundle, 10, 5).unwrap();
    let b = ddim_sample(&cond, &bundle, 10, 5).unwrap();
    let c = ddim_sample(&cond, &bundle, 10, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.data.shape(), &[cfg.horizon, cfg.action_dim]);
}

fn toy_episodes(cfg: &PolicyConfig, demos: usize, seed: u64) -> Vec<EpisodeSamples> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..demos)
        .map(|_| {
            let len = 12;
            let goal: Vec<f32> = (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let observations = (0..len)
                .map(|t| {
                    let mut o = observation(&mut rng, cfg, 4);
                    o.joint_state = vec![goal[0], goal[1], goal[2], t as f32 / len as f32];
                    o
                })
                .collect();
            let actions = (0..len)
                .flat_map(|t| vec![goal[0] * 0.5, goal[1] * 0.5, goal[2] * 0.5, (t >= len / 2) as u8 as f32])
                .collect();
            EpisodeSamples { observations, actions: Tensor::new(vec![len, 4], actions).unwrap() }
        })
        .collect()
}

#[test]
fn training_reduces_loss() {
    let cfg = small_config();
    let mut first = 0.0;
    let mut last = 0.0;
    for seed in 0..3 {
        let data = TrainingSet::new(&toy_episodes(&cfg, 10, seed), &cfg).unwrap();
        let mut bundle = PolicyBundle::new(PolicyConfig { seed, ..cfg.clone() }, OP_W, BG_W, unit_stats(&cfg)).unwrap();
        let schedule = LrSchedule::new(cfg.lr, cfg.lr_warmup_steps, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut losses = Vec::new();
        for step in 0..200u64 {
            order.shuffle(&mut rng);
            let batch: Vec<TrainItem<'_>> = order[..cfg.batch_size].iter().map(|&i| data.item(i)).collect();
            losses.push(train_step(&batch, &mut bundle, &schedule, step, &mut rng).unwrap());
        }
        first += losses[0];
        last += losses[190..].iter().sum::<f32>() / 10.0;
    }
    assert!(last < first, "{last} vs {first}");
}

#[test]
fn training_is_bitwise_reproducible() {
    let cfg = PolicyConfig { batch_size: 16, ..small_config() };
    let run = || {
        let data = TrainingSet::new(&toy_episodes(&cfg, 3, 1), &cfg).unwrap();
        let mut bundle = PolicyBundle::new(cfg.clone(), OP_W, BG_W, unit_stats(&cfg)).unwrap();
        let mut losses = Vec::new();
        fit(&mut bundle, &data, 2, 9, |log| losses.push(log.loss.to_bits())).unwrap();
        let weights: Vec<u32> =
            bundle.store.named_values().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect();
        (losses, weights)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.len(), 2 * 3);
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn normalization_round_trip(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let min: Vec<f32> = (0..4).map(|_| rng.random_range(-3.0f32..0.0)).collect();
        let max: Vec<f32> = min.iter().map(|m| m + rng.random_range(0.01f32..3.0)).collect();
        let stats = ActionStats { min, max };
        let chunk = ActionChunk { data: random(&mut rng, 8, 4) };
        let back = denormalize_actions(&normalize_actions(&chunk, &stats), &stats);
        prop_assert!(back.data.max_abs_diff(&chunk.data) <= 1e-6);
    }

    #[test]
    fn global_cloud_permutation_invariance(seed in 0u64..10_000) {
        let cfg = small_config();
        let bundle = PolicyBundle::new(PolicyConfig { seed, ..cfg.clone() }, OP_W, BG_W, unit_stats(&cfg)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let window: Vec<Observation> = (0..3).map(|_| observation(&mut rng, &cfg, 4)).collect();
        let mut shuffled = window.clone();
        for o in &mut shuffled {
            let mut order: Vec<usize> = (0..cfg.n_points).collect();
            order.shuffle(&mut rng);
            o.global_cloud = o.global_cloud.gather_rows(&order);
        }
        let a = build_condition(&window, &bundle).unwrap();
        let b = build_condition(&shuffled, &bundle).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        prop_assert!(diff <= 1e-6, "diff {diff}");
    }
}
