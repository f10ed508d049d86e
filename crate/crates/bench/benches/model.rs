//! Throughput benchmarks for the hot paths: encoder forward, transducer
//! loss + backward, and minibatch planning.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctasr_core::config::{FusionMethod, MaskModeConfig, RunConfig};
use ctasr_core::fusion::{contextual_encode, pool_bn_states, ContextCache};
use ctasr_core::scheduler::{plan, Conversation, Manifest, ManifestUtterance};
use ctasr_core::tape::Tape;
use ctasr_core::tensor::Tensor;
use ctasr_core::trainer::{encoder_bn_states, init_params, utterance_loss};

fn bench_cfg(method: FusionMethod) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.blocks = 2;
    cfg.model.d_model = 32;
    cfg.model.n_heads = 4;
    cfg.model.conv_kernel = 7;
    cfg.model.predictor_units = 32;
    cfg.model.vocab = 16;
    cfg.model.input_dim = 40;
    cfg.model.subsample_channels = 4;
    cfg.model.joint_dim = 32;
    cfg.fusion.method = method;
    cfg.fusion.context_utterances = 2;
    if method == FusionMethod::Chunked {
        cfg.mask.mode = MaskModeConfig::Streaming;
        cfg.mask.chunk_size = 4;
    }
    cfg
}

fn encoder_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("encoder_forward");
    for frames in [64usize, 128] {
        let cfg = bench_cfg(FusionMethod::None);
        let params = init_params(&cfg, 1);
        let bn = encoder_bn_states(&cfg);
        let pool_bn = pool_bn_states(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats = Tensor::randn(&[frames, cfg.model.input_dim], 1.0, &mut rng);
        let cache = ContextCache::new(0);
        group.bench_with_input(BenchmarkId::from_parameter(frames), &frames, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let bp = params.bind(&mut tape);
                contextual_encode(
                    &mut tape, &bp, &cfg, &feats, &cache, false, &bn, &pool_bn,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn contextual_loss_and_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_backward");
    for method in [
        FusionMethod::None,
        FusionMethod::EmbedConcat,
        FusionMethod::Pooling,
        FusionMethod::Chunked,
    ] {
        let cfg = bench_cfg(method);
        let params = init_params(&cfg, 1);
        let bn = encoder_bn_states(&cfg);
        let pool_bn = pool_bn_states(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = Tensor::randn(&[64, cfg.model.input_dim], 1.0, &mut rng);
        let labels: Vec<usize> = (0..8).map(|_| 1 + rng.gen::<usize>() % cfg.model.vocab).collect();

        // one cached utterance from a baseline pass
        let mut cache = ContextCache::new(cfg.fusion.context_utterances);
        if method != FusionMethod::None {
            let prev = Tensor::randn(&[64, cfg.model.input_dim], 1.0, &mut rng);
            let mut base = cfg.clone();
            base.fusion.method = FusionMethod::None;
            let mut tape = Tape::new();
            let bp = params.bind(&mut tape);
            let enc = contextual_encode(
                &mut tape,
                &bp,
                &base,
                &prev,
                &ContextCache::new(0),
                false,
                &bn,
                &pool_bn,
            )
            .unwrap();
            cache.push(enc.to_cache_entry(&tape, &prev));
        }

        group.bench_function(format!("{method:?}"), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let bp = params.bind(&mut tape);
                let (loss, _) = utterance_loss(
                    &mut tape, &bp, &cfg, &feats, &labels, &cache, true, &bn, &pool_bn,
                )
                .unwrap();
                tape.backward(loss)
            })
        });
    }
    group.finish();
}

fn planner(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let conversations: Vec<Conversation> = (0..200)
        .map(|ci| Conversation {
            id: format!("c{ci}"),
            utterances: (0..20)
                .map(|u| ManifestUtterance {
                    utterance_id: format!("u{u}"),
                    frames: 10 + rng.gen::<usize>() % 90,
                    feature_path: String::new(),
                    labels: Vec::new(),
                })
                .collect(),
        })
        .collect();
    let manifest = Manifest { conversations };
    c.bench_function("plan_200x20", |b| {
        b.iter(|| plan(&manifest, 16, 120, true).unwrap())
    });
}

criterion_group!(benches, encoder_forward, contextual_loss_and_backward, planner);
criterion_main!(benches);
