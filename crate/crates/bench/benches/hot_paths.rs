//! Hot-path benchmarks: convolution forward/backward, the augmentation
//! sweep, sum-tree maintenance, and full agent update steps at training
//! shapes.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rqdia_core::augment::{Augmenter, AugmentSpec};
use rqdia_core::harness::run::{make_driver, Driver};
use rqdia_core::harness::RunConfig;
use rqdia_core::replay::SumTree;
use rqdia_core::rng::{derive, Stream};
use rqdia_core::tensor::{Tape, Tensor};

fn conv_forward_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x_data: Vec<f32> = (0..16 * 32 * 15 * 15).map(|_| rng.gen()).collect();
    let w_data: Vec<f32> = (0..32 * 32 * 3 * 3).map(|_| rng.gen::<f32>() * 0.1).collect();
    let x = Tensor::new(x_data, &[16, 32, 15, 15]);
    let w = Tensor::new(w_data, &[32, 32, 3, 3]);

    c.bench_function("conv2d_forward_16x32x15x15", |b| {
        b.iter(|| {
            let mut tape = Tape::inference();
            tape.conv2d(&x, &w, 1, 0).unwrap()
        })
    });

    c.bench_function("conv2d_forward_backward_16x32x15x15", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.var(&x);
            let wv = tape.var(&w);
            let y = tape.conv2d(&xv, &wv, 1, 0).unwrap();
            let loss = tape.mean_all(&y);
            tape.backward(&loss).unwrap()
        })
    });
}

fn matmul_training_shape(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a_data: Vec<f32> = (0..64 * 256).map(|_| rng.gen()).collect();
    let b_data: Vec<f32> = (0..256 * 256).map(|_| rng.gen::<f32>() * 0.1).collect();
    let a = Tensor::new(a_data, &[64, 256]);
    let b = Tensor::new(b_data, &[256, 256]);
    c.bench_function("matmul_64x256x256", |bch| {
        bch.iter(|| {
            let mut tape = Tape::inference();
            tape.matmul(&a, &b).unwrap()
        })
    });
}

fn augmentation_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f32> = (0..64 * 3 * 32 * 32).map(|_| rng.gen()).collect();
    let batch = Tensor::new(data, &[64, 3, 32, 32]);
    c.bench_function("random_shift_batch_64x3x32x32", |b| {
        let mut aug = Augmenter::new(AugmentSpec::default(), derive(3, Stream::Augment));
        b.iter(|| aug.apply_batch(&batch).unwrap())
    });
}

fn sum_tree_updates(c: &mut Criterion) {
    c.bench_function("sum_tree_update_100k_leaves", |b| {
        let mut tree = SumTree::new(100_000, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        b.iter(|| {
            let leaf = rng.gen_range(0..100_000);
            tree.update_from_td(leaf, rng.gen::<f64>(), 1e-6);
            tree.find(rng.gen::<f64>() * tree.total().max(1e-9))
        })
    });
}

fn full_train_steps(c: &mut Criterion) {
    let sac_cfg = RunConfig::from_text(
        "
[run]
agent = sac
seed = 5
[env]
kind = point_reach
frame_size = 32
max_episode_steps = 25
[replay]
capacity = 4000
min_fill = 300
[sac]
batch_size = 64
hidden_dim = 256
regularizer = rqdia
rqdia_action_subset = 16
",
    )
    .unwrap();
    let mut driver = make_driver(&sac_cfg).unwrap();
    prefill(driver.as_mut(), &sac_cfg, 400);
    c.bench_function("sac_rqdia_train_step_b64_f32px", |b| {
        let mut step = 400;
        b.iter(|| {
            step += 1;
            driver.update(step, 100_000).unwrap()
        })
    });

    let c51_cfg = RunConfig::from_text(
        "
[run]
agent = c51
seed = 6
[env]
kind = catch
frame_size = 24
max_episode_steps = 50
[replay]
capacity = 4000
min_fill = 300
[c51]
batch_size = 32
n_step = 3
rqdia_mode = mse
",
    )
    .unwrap();
    let mut driver = make_driver(&c51_cfg).unwrap();
    prefill(driver.as_mut(), &c51_cfg, 400);
    c.bench_function("c51_mse_train_step_b32_f24px", |b| {
        let mut step = 400;
        b.iter(|| {
            step += 1;
            driver.update(step, 100_000).unwrap()
        })
    });
}

fn prefill(driver: &mut dyn Driver, config: &RunConfig, steps: u64) {
    use rqdia_core::envs::Env;
    let mut env = Env::new(&config.env).unwrap();
    let mut env_rng = derive(config.run.seed, Stream::Env);
    let mut obs = env.reset(&mut env_rng);
    for step in 1..=steps {
        let action = driver.act_train(&obs, step).unwrap();
        let (next, reward, done) = env.step(&action).unwrap();
        driver.observe(&obs, &action, reward, &next, done);
        obs = if done { env.reset(&mut env_rng) } else { next };
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv_forward_backward, matmul_training_shape, augmentation_batch,
              sum_tree_updates, full_train_steps
}
criterion_main!(benches);
