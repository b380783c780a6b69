//! Forward-pass cost of the main blocks at the default width.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mamfusion_core::config::ModelConfig;
use mamfusion_core::gmmformer::{GaussianBlockConfig, GmmformerBlock};
use mamfusion_core::ssm::{MambaBlock, SsmConfig};
use mamfusion_core::tape::Tape;
use mamfusion_core::tensor::Tensor;
use mamfusion_core::video_encoder::Toggles;
use mamfusion_core::MamFusion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_blocks(criterion: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 64;

    let gmm = GmmformerBlock::<f32>::new(&mut rng, "g", &GaussianBlockConfig::new(d, 4)).unwrap();
    let x64 = random(&mut rng, vec![64, d]);
    criterion.bench_function("gmmformer_block_l64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x64.clone());
            black_box(gmm.forward(&mut tape, xv).unwrap());
        })
    });

    let mamba = MambaBlock::<f32>::new(&mut rng, "m", SsmConfig::new(d)).unwrap();
    criterion.bench_function("mamba_block_l64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x64.clone());
            black_box(mamba.forward(&mut tape, xv).unwrap());
        })
    });

    let config = ModelConfig {
        m_f_max: 64,
        ..ModelConfig::default()
    };
    let model = MamFusion::<f32>::new(config, 5).unwrap();
    let frames = random(&mut rng, vec![48, 3072]);
    criterion.bench_function("encode_video_48_frames", |b| {
        b.iter(|| black_box(model.encode_video(&frames, &Toggles::all()).unwrap()))
    });

    let words = random(&mut rng, vec![12, 1024]);
    let text = model.encode_text(&words).unwrap();
    let video = model.encode_video(&frames, &Toggles::all()).unwrap();
    let scorer = model.scorer(false, Toggles::all());
    criterion.bench_function("fuse_and_score_pair", |b| {
        b.iter(|| black_box(scorer.score_pair(&text, &video).unwrap()))
    });
}

criterion_group!(benches, bench_blocks);
criterion_main!(benches);
