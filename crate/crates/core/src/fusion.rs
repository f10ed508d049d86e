//! Cross-utterance context fusion: the per-conversation cache of previous
//! utterances and the four ways of feeding it to the encoder — input-feature
//! concatenation, per-layer embedding concatenation into keys/values,
//! attention-pooled low-rank summaries, and chunk-masked embedding access.
//!
//! Cached embeddings are always gradient-inert: they enter the tape as
//! stop-gradient constants, so backward passes never touch the pass that
//! produced them.

use std::collections::VecDeque;

use rand::Rng;

use crate::config::{FusionMethod, MaskModeConfig, RunConfig};
use crate::conformer::{encode, EncodeResult};
use crate::error::{Error, Result};
use crate::masks::{build_composed, build_current_mask, AttentionMask, KeySegment, SegmentId};
use crate::params::{BoundParams, ParamSet};
use crate::tape::{BnState, BnStats, Tape, Var};
use crate::tensor::{subsampled_len, Tensor};

/// One finished utterance retained for its successors: raw features plus the
/// per-layer encoder embeddings (index 0 = subsampler output).
#[derive(Debug, Clone)]
pub struct CachedUtterance {
    pub features: Tensor,
    pub layers: Vec<Tensor>,
    pub subsampled_length: usize,
}

/// FIFO ring of the most recent utterances of one conversation,
/// oldest → newest. Cleared at every recording boundary.
#[derive(Debug, Clone)]
pub struct ContextCache {
    capacity: usize,
    entries: VecDeque<CachedUtterance>,
}

impl ContextCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::new(),
        }
    }

    pub fn push(&mut self, entry: CachedUtterance) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn reset(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries oldest → newest.
    pub fn entries(&self) -> impl Iterator<Item = &CachedUtterance> {
        self.entries.iter()
    }

    pub fn prev_feature_frames(&self) -> usize {
        self.entries.iter().map(|e| e.features.rows()).sum()
    }

    pub fn prev_subsampled_lengths(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.subsampled_length).collect()
    }
}

/// Learnable pooling parameters: one low-rank projector plus BN affine per
/// block layer.
pub fn init_fusion_params<R: Rng>(cfg: &RunConfig, params: &mut ParamSet, rng: &mut R) {
    if cfg.fusion.method != FusionMethod::Pooling {
        return;
    }
    let l_rows = cfg.fusion.pooled_rows;
    let d = cfg.model.d_model;
    for l in 1..=cfg.model.blocks {
        params.insert(
            format!("pool{l}.e"),
            Tensor::randn(&[l_rows, d], 1.0 / (d as f64).sqrt(), rng),
        );
        params.insert(format!("pool{l}.bn_g"), Tensor::filled(&[l_rows], 1.0));
        params.insert(format!("pool{l}.bn_b"), Tensor::zeros(&[l_rows]));
    }
}

/// Running BN state for each block's pooling projector.
pub fn pool_bn_states(cfg: &RunConfig) -> Vec<BnState> {
    (0..cfg.model.blocks)
        .map(|_| BnState::new(cfg.fusion.pooled_rows))
        .collect()
}

pub struct PoolProjection {
    /// Pooled context, exactly `pooled_rows × d_model`.
    pub pooled: Var,
    /// Attention weights over the source frames; each row sums to 1.
    pub attention: Var,
    pub bn_stats: Option<BnStats>,
}

/// Attention-pool one cached utterance's layer embedding to a fixed number
/// of rows: softmax over time of BN(ReLU(E·Hᵀ)), applied to H. Both H
/// operands are stop-gradient; only E and the BN affine learn.
pub fn pool_project(
    tape: &mut Tape,
    bp: &BoundParams,
    layer: usize,
    h_prev: Var,
    training: bool,
    bn_state: &BnState,
) -> Result<PoolProjection> {
    let t = tape.value(h_prev).rows();
    if t == 0 {
        return Err(Error::Length("pool_project on empty context".into()));
    }
    let e = bp.var(&format!("pool{layer}.e"));
    let l_rows = tape.value(e).rows();
    let h = tape.sg(h_prev);
    let ht = tape.transpose(h)?;
    let scores = tape.matmul(e, ht)?;
    let scores = tape.relu(scores);
    // BN normalizes each of the L channels over the time axis
    let st = tape.transpose(scores)?;
    let (st, stats) = if training {
        let (v, s) = tape.batch_norm_train(
            st,
            bp.var(&format!("pool{layer}.bn_g")),
            bp.var(&format!("pool{layer}.bn_b")),
        )?;
        (v, Some(s))
    } else {
        let v = tape.batch_norm_eval(
            st,
            bp.var(&format!("pool{layer}.bn_g")),
            bp.var(&format!("pool{layer}.bn_b")),
            &bn_state.running_mean,
            &bn_state.running_var,
        )?;
        (v, None)
    };
    let scores = tape.transpose(st)?;
    let full = AttentionMask::all_true(
        l_rows,
        t,
        vec![KeySegment {
            id: SegmentId::Current,
            len: t,
        }],
    );
    let attention = tape.masked_softmax(scores, &full)?;
    let pooled = tape.matmul(attention, h)?;
    Ok(PoolProjection {
        pooled,
        attention,
        bn_stats: stats,
    })
}

/// Previous features spliced before the current ones along the time axis
/// (oldest first).
pub fn fuse_input_audio(features: &Tensor, cache: &ContextCache) -> Result<Tensor> {
    if cache.is_empty() {
        return Ok(features.clone());
    }
    let d = features.cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for entry in cache.entries() {
        if entry.features.cols() != d {
            return Err(Error::Shape(format!(
                "cached features have {} dims, current {}",
                entry.features.cols(),
                d
            )));
        }
        data.extend_from_slice(&entry.features.data);
        rows += entry.features.rows();
    }
    data.extend_from_slice(&features.data);
    rows += features.rows();
    Tensor::new(vec![rows, d], data)
}

/// Per-block stop-gradient context rows for the embedding-based methods,
/// oldest → newest; `None` for an empty cache.
pub fn assemble_block_contexts(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &RunConfig,
    cache: &ContextCache,
    training: bool,
    pool_bn: &[BnState],
) -> Result<(Vec<Option<Var>>, Vec<Vec<BnStats>>)> {
    let blocks = cfg.model.blocks;
    let d = cfg.model.d_model;
    let mut contexts = Vec::with_capacity(blocks);
    let mut pool_stats = vec![Vec::new(); blocks];
    for l in 1..=blocks {
        if cache.is_empty() {
            contexts.push(None);
            continue;
        }
        let mut parts = Vec::with_capacity(cache.len());
        for entry in cache.entries() {
            if entry.layers.len() != blocks + 1 || entry.layers[l].cols() != d {
                return Err(Error::Config(format!(
                    "cached embeddings incompatible with the model (layer {l})"
                )));
            }
            match cfg.fusion.method {
                FusionMethod::EmbedConcat | FusionMethod::Chunked => {
                    let c = tape.constant(entry.layers[l].clone());
                    parts.push(tape.sg(c));
                }
                FusionMethod::Pooling => {
                    let c = tape.constant(entry.layers[l].clone());
                    let proj = pool_project(tape, bp, l, c, training, &pool_bn[l - 1])?;
                    if let Some(s) = proj.bn_stats {
                        pool_stats[l - 1].push(s);
                    }
                    parts.push(proj.pooled);
                }
                FusionMethod::None | FusionMethod::InputConcat => {
                    return Err(Error::Config(
                        "assemble_block_contexts requires an embedding fusion method".into(),
                    ))
                }
            }
        }
        contexts.push(Some(tape.concat_rows(&parts)?));
    }
    Ok((contexts, pool_stats))
}

/// Full contextual forward pass for one utterance.
pub struct ContextualEncode {
    /// Per-layer embeddings restricted to the current utterance's span.
    pub layers: Vec<Var>,
    /// Last layer, current span: the transducer's encoder input.
    pub current: Var,
    /// Current utterance's subsampled frame count.
    pub t_current: usize,
    pub bn_stats: Vec<Option<BnStats>>,
    /// Pooling BN batch statistics per block (training mode, method C).
    pub pool_bn_stats: Vec<Vec<BnStats>>,
}

impl ContextualEncode {
    /// Snapshot this utterance for its successors' context.
    pub fn to_cache_entry(&self, tape: &Tape, features: &Tensor) -> CachedUtterance {
        CachedUtterance {
            features: features.clone(),
            layers: self.layers.iter().map(|&v| tape.value(v).clone()).collect(),
            subsampled_length: self.t_current,
        }
    }
}

/// Run the encoder for one utterance under the configured fusion method.
/// With an empty cache every method reduces exactly to the baseline.
#[allow(clippy::too_many_arguments)]
pub fn contextual_encode(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &RunConfig,
    features: &Tensor,
    cache: &ContextCache,
    training: bool,
    bn_states: &[BnState],
    pool_bn: &[BnState],
) -> Result<ContextualEncode> {
    let streaming = cfg.mask.mode == MaskModeConfig::Streaming;
    match cfg.fusion.method {
        FusionMethod::None | FusionMethod::InputConcat => {
            let cache_used = cfg.fusion.method == FusionMethod::InputConcat && !cache.is_empty();
            let fused = if cache_used {
                fuse_input_audio(features, cache)?
            } else {
                features.clone()
            };
            let spec = cfg.mask_spec(Vec::new());
            let t_total = subsampled_len(fused.rows());
            let mask = build_current_mask(&spec, t_total)?;
            let res = encode(
                tape, bp, &cfg.model, &fused, &mask, None, streaming, training, bn_states,
            )?;
            let start = if cache_used {
                subsampled_len(cache.prev_feature_frames())
            } else {
                0
            };
            finish(tape, res, start, Vec::new())
        }
        FusionMethod::EmbedConcat | FusionMethod::Pooling | FusionMethod::Chunked => {
            let (contexts, pool_stats) =
                assemble_block_contexts(tape, bp, cfg, cache, training, pool_bn)?;
            let prev_lengths: Vec<usize> = if cfg.fusion.method == FusionMethod::Pooling {
                vec![cfg.fusion.pooled_rows; cache.len()]
            } else {
                cache.prev_subsampled_lengths()
            };
            let spec = cfg.mask_spec(prev_lengths);
            let t_cur = subsampled_len(features.rows());
            let mask = build_composed(&spec, t_cur)?;
            let res = encode(
                tape,
                bp,
                &cfg.model,
                features,
                &mask,
                Some(&contexts),
                streaming,
                training,
                bn_states,
            )?;
            finish(tape, res, 0, pool_stats)
        }
    }
}

fn finish(
    tape: &mut Tape,
    res: EncodeResult,
    start: usize,
    pool_bn_stats: Vec<Vec<BnStats>>,
) -> Result<ContextualEncode> {
    let t_total = res.subsampled_length;
    let layers = if start == 0 {
        res.layers
    } else {
        let mut sliced = Vec::with_capacity(res.layers.len());
        for &l in &res.layers {
            sliced.push(tape.slice_rows(l, start, t_total)?);
        }
        sliced
    };
    let current = *layers.last().expect("encoder always yields layers");
    Ok(ContextualEncode {
        t_current: t_total - start,
        current,
        layers,
        bn_stats: res.bn_stats,
        pool_bn_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformer::init_encoder_params;
    use crate::gradcheck::{central_diff, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(method: FusionMethod) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.blocks = 2;
        cfg.model.d_model = 8;
        cfg.model.n_heads = 2;
        cfg.model.conv_kernel = 3;
        cfg.model.predictor_units = 6;
        cfg.model.vocab = 4;
        cfg.model.input_dim = 6;
        cfg.model.subsample_channels = 2;
        cfg.model.joint_dim = 6;
        cfg.fusion.method = method;
        cfg.fusion.context_utterances = 2;
        cfg.fusion.pooled_rows = 3;
        if method == FusionMethod::Chunked {
            cfg.mask.mode = MaskModeConfig::Streaming;
            cfg.mask.chunk_size = 2;
        }
        cfg
    }

    fn init(cfg: &RunConfig, seed: u64) -> (ParamSet, Vec<BnState>, Vec<BnState>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_encoder_params(&cfg.model, &mut params, &mut rng);
        init_fusion_params(cfg, &mut params, &mut rng);
        let bn = (0..cfg.model.blocks)
            .map(|_| BnState::new(cfg.model.d_model))
            .collect();
        (params, bn, pool_bn_states(cfg))
    }

    fn random_features(cfg: &RunConfig, t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[t, cfg.model.input_dim], 1.0, &mut rng)
    }

    /// Run a full pass and fill the cache with its own output.
    fn filled_cache(cfg: &RunConfig, params: &ParamSet, n: usize, seed: u64) -> ContextCache {
        let (_, bn, pool_bn) = init(cfg, 0);
        let mut cache = ContextCache::new(cfg.fusion.context_utterances);
        for i in 0..n {
            let feats = random_features(cfg, 8 + 4 * i, seed + i as u64);
            let mut tape = Tape::new();
            let bp = params.bind(&mut tape);
            let baseline = {
                let mut c = cfg.clone();
                c.fusion.method = FusionMethod::None;
                c
            };
            let res = contextual_encode(
                &mut tape, &bp, &baseline, &feats, &ContextCache::new(0), false, &bn, &pool_bn,
            )
            .unwrap();
            cache.push(res.to_cache_entry(&tape, &feats));
        }
        cache
    }

    #[test]
    fn cache_is_fifo_with_capacity() {
        let mut cache = ContextCache::new(2);
        for t in [4usize, 5, 6] {
            cache.push(CachedUtterance {
                features: Tensor::zeros(&[t, 3]),
                layers: vec![Tensor::zeros(&[t, 2]); 3],
                subsampled_length: t,
            });
        }
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.prev_subsampled_lengths(), vec![5, 6]);
        cache.reset();
        assert!(cache.is_empty());
    }

    #[test]
    fn input_concat_orders_oldest_first() {
        let cfg = tiny_cfg(FusionMethod::InputConcat);
        let mut cache = ContextCache::new(2);
        for (t, fill) in [(5usize, 1.0), (4, 2.0)] {
            cache.push(CachedUtterance {
                features: Tensor::filled(&[t, cfg.model.input_dim], fill),
                layers: vec![Tensor::zeros(&[1, cfg.model.d_model]); cfg.model.blocks + 1],
                subsampled_length: 1,
            });
        }
        let cur = Tensor::filled(&[7, cfg.model.input_dim], 3.0);
        let fused = fuse_input_audio(&cur, &cache).unwrap();
        assert_eq!(fused.rows(), 16);
        assert_eq!(fused.at(0, 0), 1.0);
        assert_eq!(fused.at(4, 0), 1.0);
        assert_eq!(fused.at(5, 0), 2.0);
        assert_eq!(fused.at(9, 0), 3.0);
    }

    #[test]
    fn empty_cache_reduces_to_baseline_bitwise() {
        for method in [
            FusionMethod::InputConcat,
            FusionMethod::EmbedConcat,
            FusionMethod::Pooling,
            FusionMethod::Chunked,
        ] {
            let cfg = tiny_cfg(method);
            let mut base_cfg = cfg.clone();
            base_cfg.fusion.method = FusionMethod::None;
            let (params, bn, pool_bn) = init(&cfg, 1);
            let feats = random_features(&cfg, 10, 2);
            let empty = ContextCache::new(cfg.fusion.context_utterances);
            let run = |c: &RunConfig| {
                let mut tape = Tape::new();
                let bp = params.bind(&mut tape);
                let res =
                    contextual_encode(&mut tape, &bp, c, &feats, &empty, false, &bn, &pool_bn)
                        .unwrap();
                tape.value(res.current).data.clone()
            };
            let with = run(&cfg);
            let without = run(&base_cfg);
            assert!(
                with.iter().zip(&without).all(|(a, b)| a.to_bits() == b.to_bits()),
                "{method:?} with empty cache deviates from baseline"
            );
        }
    }

    #[test]
    fn embed_concat_context_changes_output() {
        let cfg = tiny_cfg(FusionMethod::EmbedConcat);
        let (params, bn, pool_bn) = init(&cfg, 3);
        let cache = filled_cache(&cfg, &params, 2, 10);
        let feats = random_features(&cfg, 8, 4);
        let run = |cache: &ContextCache| {
            let mut tape = Tape::new();
            let bp = params.bind(&mut tape);
            let res =
                contextual_encode(&mut tape, &bp, &cfg, &feats, cache, false, &bn, &pool_bn)
                    .unwrap();
            (res.t_current, tape.value(res.current).data.clone())
        };
        let (t_with, with) = run(&cache);
        let (t_without, without) = run(&ContextCache::new(2));
        assert_eq!(t_with, t_without);
        assert!(with.iter().zip(&without).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn stop_gradient_isolates_cache_and_params() {
        // param grads must be bitwise-identical whether the cached context is
        // a differentiable leaf behind sg() or a plain constant, and the leaf
        // itself must accumulate exactly zero gradient
        let cfg = tiny_cfg(FusionMethod::EmbedConcat);
        let (params, bn, _pool_bn) = init(&cfg, 5);
        let cache = filled_cache(&cfg, &params, 1, 20);
        let feats = random_features(&cfg, 8, 6);

        let run = |as_leaf: bool| {
            let mut tape = Tape::new();
            let bp = params.bind(&mut tape);
            let mut leaves = Vec::new();
            let contexts: Vec<Option<Var>> = (1..=cfg.model.blocks)
                .map(|l| {
                    let t = cache.entries().next().unwrap().layers[l].clone();
                    let raw = if as_leaf {
                        let v = tape.leaf(t);
                        leaves.push(v);
                        v
                    } else {
                        tape.constant(t)
                    };
                    Some(tape.sg(raw))
                })
                .collect();
            let spec = cfg.mask_spec(cache.prev_subsampled_lengths());
            let t_cur = subsampled_len(feats.rows());
            let mask = build_composed(&spec, t_cur).unwrap();
            let res = encode(
                &mut tape, &bp, &cfg.model, &feats, &mask, Some(&contexts), false, true, &bn,
            )
            .unwrap();
            let out = *res.layers.last().unwrap();
            let loss = tape.sum_all(out);
            let grads = tape.backward(loss);
            for &leaf in &leaves {
                let g = grads.get_or_zeros(leaf, &tape.value(leaf).shape.clone());
                assert!(g.data.iter().all(|&v| v == 0.0), "cache leaked gradient");
            }
            bp.collect_grads(&params, &grads)
        };
        let leaf_grads = run(true);
        let const_grads = run(false);
        for (name, g) in leaf_grads.iter() {
            let h = const_grads.get(name).unwrap();
            assert!(
                g.data.iter().zip(&h.data).all(|(a, b)| a.to_bits() == b.to_bits()),
                "gradient of {name} depends on cache tape recording"
            );
        }
    }

    #[test]
    fn pooled_context_has_fixed_rows_and_normalized_attention() {
        let cfg = tiny_cfg(FusionMethod::Pooling);
        let (params, _, pool_bn) = init(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in [1usize, 4, 11] {
            let h = Tensor::randn(&[t, cfg.model.d_model], 1.0, &mut rng);
            let mut tape = Tape::new();
            let bp = params.bind(&mut tape);
            let hv = tape.constant(h.clone());
            let proj = pool_project(&mut tape, &bp, 1, hv, true, &pool_bn[0]).unwrap();
            let pooled = tape.value(proj.pooled);
            assert_eq!(pooled.shape, vec![cfg.fusion.pooled_rows, cfg.model.d_model]);
            let attn = tape.value(proj.attention);
            for r in 0..cfg.fusion.pooled_rows {
                let sum: f64 = (0..t).map(|k| attn.at(r, k)).sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
            if t == 1 {
                // single frame: every pooled row is a copy of it
                for r in 0..cfg.fusion.pooled_rows {
                    for j in 0..cfg.model.d_model {
                        assert_eq!(pooled.at(r, j), h.at(0, j));
                    }
                }
            }
        }
    }

    #[test]
    fn pooling_fusion_runs_end_to_end() {
        let cfg = tiny_cfg(FusionMethod::Pooling);
        let (params, bn, pool_bn) = init(&cfg, 9);
        let cache = filled_cache(&cfg, &params, 2, 30);
        let feats = random_features(&cfg, 8, 10);
        let mut tape = Tape::new();
        let bp = params.bind(&mut tape);
        let res = contextual_encode(&mut tape, &bp, &cfg, &feats, &cache, true, &bn, &pool_bn)
            .unwrap();
        // per-block pooling stats recorded for every cached utterance
        for stats in &res.pool_bn_stats {
            assert_eq!(stats.len(), 2);
        }
        assert_eq!(tape.value(res.current).rows(), res.t_current);
    }

    #[test]
    fn chunked_frame_cap_limits_context_keys() {
        let mut cfg = tiny_cfg(FusionMethod::Chunked);
        cfg.fusion.context_frames = 3;
        let spec = cfg.mask_spec(vec![4, 3]);
        let mask = build_composed(&spec, 4).unwrap();
        assert_eq!(mask.num_keys, 11);
        for q in 0..4 {
            let prev_allowed = (0..7).filter(|&k| mask.allowed(q, k)).count();
            assert_eq!(prev_allowed, 3, "query {q} sees wrong context span");
        }
        assert!(!mask.allowed(0, 3));
        assert!(mask.allowed(0, 4));
    }

    #[test]
    fn contextual_gradient_check_embed_concat() {
        // small contextual model, analytic vs finite differences
        let mut cfg = tiny_cfg(FusionMethod::EmbedConcat);
        cfg.model.blocks = 1;
        cfg.model.d_model = 4;
        cfg.model.n_heads = 2;
        cfg.model.input_dim = 4;
        let (params, bn, pool_bn) = init(&cfg, 11);
        let cache = filled_cache(&cfg, &params, 1, 40);
        let feats = random_features(&cfg, 6, 12);
        let mut wrng = ChaCha8Rng::seed_from_u64(13);
        let w = Tensor::randn(&[subsampled_len(6), cfg.model.d_model], 1.0, &mut wrng);

        let loss_of = |ps: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let bp = ps.bind(&mut tape);
            let res =
                contextual_encode(&mut tape, &bp, &cfg, &feats, &cache, true, &bn, &pool_bn)
                    .unwrap();
            tape.value(res.current)
                .data
                .iter()
                .zip(&w.data)
                .map(|(a, b)| a * b)
                .sum()
        };

        let mut tape = Tape::new();
        let bp = params.bind(&mut tape);
        let res =
            contextual_encode(&mut tape, &bp, &cfg, &feats, &cache, true, &bn, &pool_bn).unwrap();
        let wv = tape.constant(w.clone());
        let prod = tape.mul(res.current, wv).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);

        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let base = params.get(&name).unwrap().clone();
            let analytic = grads.get_or_zeros(bp.var(&name), &base.shape);
            let numeric = central_diff(
                |probe| {
                    let mut ps = params.clone();
                    ps.insert(name.clone(), probe.clone());
                    loss_of(&ps)
                },
                &base,
                1e-5,
            );
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-4, "parameter {name}: max rel err {err}");
        }
    }
}
