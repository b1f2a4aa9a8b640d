use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenegate_core::diffcore::{Mlp, MlpSpec, Mode, ParamSet, Tape, Tensor2};
use scenegate_core::gating::match_candidates;
use scenegate_core::metrics::{min_ade_of, min_fde_of};
use scenegate_core::uncertainty::{gaussian_vertex_nll, LossConfig};
use scenegate_core::{CandidateSet, CovParams, StreamTag, Vec2};

fn random_traj(rng: &mut ChaCha8Rng) -> Vec<Vec2> {
    (0..6).map(|_| Vec2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0))).collect()
}

fn nll(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = LossConfig::default();
    let cases: Vec<_> = (0..1024)
        .map(|_| {
            let cov = CovParams::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0));
            (Vec2::new(rng.random(), rng.random()), cov, Vec2::new(rng.random(), rng.random()))
        })
        .collect();
    c.bench_function("gaussian_vertex_nll x1024", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for (mu, cov, t) in &cases {
                acc += gaussian_vertex_nll(*mu, cov, *t, &cfg).0;
            }
            black_box(acc)
        })
    });
}

fn mlp(c: &mut Criterion) {
    let mut params = ParamSet::new();
    let net = Mlp::new(MlpSpec::new(vec![8, 64, 64, 5], 1), &mut params, "bench").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor2::from_vec(256, 8, (0..256 * 8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let target = Tensor2::zeros(256, 5);
    c.bench_function("mlp 8-64-64-5 forward+backward, batch 256", |b| {
        b.iter_batched(
            || (x.clone(), target.clone()),
            |(x, t)| {
                let mut tape = Tape::new(&params);
                let input = tape.input(x);
                let out = net.forward(&mut tape, input, Mode::Eval).unwrap().output;
                let loss = tape.mse(out, t).unwrap();
                black_box(tape.backward(loss).unwrap())
            },
            BatchSize::SmallInput,
        )
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sets: Vec<(Vec<Vec<Vec2>>, Vec<Vec2>)> = (0..1000)
        .map(|_| ((0..6).map(|_| random_traj(&mut rng)).collect(), random_traj(&mut rng)))
        .collect();
    c.bench_function("minADE+minFDE x1000", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for (cands, gt) in &sets {
                acc += min_ade_of(cands, gt).unwrap() + min_fde_of(cands, gt).unwrap();
            }
            black_box(acc)
        })
    });

    let pairs: Vec<(CandidateSet, CandidateSet)> = sets
        .chunks(2)
        .map(|p| {
            (
                CandidateSet::new(p[0].0.clone(), StreamTag::Base).unwrap(),
                CandidateSet::new(p[1].0.clone(), StreamTag::Unc).unwrap(),
            )
        })
        .collect();
    c.bench_function("match_candidates x500", |b| {
        b.iter(|| {
            for (base, unc) in &pairs {
                black_box(match_candidates(base, unc).unwrap());
            }
        })
    });
}

criterion_group!(benches, nll, mlp, metrics);
criterion_main!(benches);
