//! Deterministic full-batch training and decoding over a scheduled manifest:
//! plan the minibatch layout, walk each row's utterance stream with the
//! per-conversation context cache, sum transducer losses, and apply Adam.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::conformer::init_encoder_params;
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::fusion::{
    contextual_encode, init_fusion_params, pool_bn_states, ContextCache, ContextualEncode,
};
use crate::params::{Adam, BoundParams, ParamSet};
use crate::scheduler::{iterate, plan, Manifest};
use crate::tape::{BnState, Tape, Var};
use crate::tensor::Tensor;
use crate::transducer::{
    greedy_decode, init_transducer_params, joint_lattice, levenshtein, predict_sequence,
    transducer_loss,
};

/// All model parameters (encoder, transducer head, fusion) from one seed.
pub fn init_params(cfg: &RunConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    init_encoder_params(&cfg.model, &mut params, &mut rng);
    init_transducer_params(&cfg.model, &mut params, &mut rng);
    init_fusion_params(cfg, &mut params, &mut rng);
    params
}

pub fn encoder_bn_states(cfg: &RunConfig) -> Vec<BnState> {
    (0..cfg.model.blocks)
        .map(|_| BnState::new(cfg.model.d_model))
        .collect()
}

/// Transducer loss for one utterance under the configured fusion method.
#[allow(clippy::too_many_arguments)]
pub fn utterance_loss(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &RunConfig,
    features: &Tensor,
    labels: &[usize],
    cache: &ContextCache,
    training: bool,
    bn: &[BnState],
    pool_bn: &[BnState],
) -> Result<(Var, ContextualEncode)> {
    let enc = contextual_encode(tape, bp, cfg, features, cache, training, bn, pool_bn)?;
    let pred = predict_sequence(tape, bp, &cfg.model, labels)?;
    let lattice = joint_lattice(tape, bp, enc.current, pred)?;
    let loss = transducer_loss(tape, lattice, enc.t_current, labels)?;
    Ok((loss, enc))
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub bn_states: Vec<BnState>,
    pub pool_bn: Vec<BnState>,
    /// Mean per-utterance loss after each step.
    pub losses: Vec<f64>,
}

/// Full-batch training: every step walks the entire plan once (each row's
/// stream in order, caches reset at conversation starts), sums the utterance
/// losses, and takes one Adam step on the mean.
pub fn train(cfg: &RunConfig, manifest: &Manifest, store: &dyn FeatureStore) -> Result<TrainOutcome> {
    let mut params = init_params(cfg, cfg.training.seed);
    let mut bn = encoder_bn_states(cfg);
    let mut pool_bn = pool_bn_states(cfg);
    let mut opt = Adam::new(cfg.training.lr);
    let mut losses = Vec::with_capacity(cfg.training.steps);

    let batch_plan = plan(
        manifest,
        cfg.scheduler.rows,
        cfg.scheduler.capacity,
        cfg.scheduler.splicing,
    )?;
    let items = iterate(&batch_plan, manifest)?;
    let features: Vec<Tensor> = items
        .iter()
        .map(|i| store.load(&i.utterance.feature_path))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Ok(TrainOutcome {
            params,
            bn_states: bn,
            pool_bn,
            losses,
        });
    }

    for step in 0..cfg.training.steps {
        let mut tape = Tape::new();
        let bp = params.bind(&mut tape);
        let mut caches: HashMap<&str, ContextCache> = HashMap::new();
        let mut total: Option<Var> = None;
        let mut step_bn = bn.clone();
        let mut step_pool_bn = pool_bn.clone();
        for (item, feats) in items.iter().zip(&features) {
            let cache = caches
                .entry(item.conversation)
                .or_insert_with(|| ContextCache::new(cfg.fusion.context_utterances));
            if item.cache_reset {
                cache.reset();
            }
            let (loss, enc) = utterance_loss(
                &mut tape,
                &bp,
                cfg,
                feats,
                &item.utterance.labels,
                cache,
                true,
                &bn,
                &pool_bn,
            )?;
            let entry = enc.to_cache_entry(&tape, feats);
            caches.get_mut(item.conversation).unwrap().push(entry);
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });
            for (l, stats) in enc.bn_stats.iter().enumerate() {
                if let Some(s) = stats {
                    step_bn[l] = step_bn[l].updated(s);
                }
            }
            for (l, stats) in enc.pool_bn_stats.iter().enumerate() {
                for s in stats {
                    step_pool_bn[l] = step_pool_bn[l].updated(s);
                }
            }
        }
        let total = total.expect("non-empty plan");
        let mean = tape.scale(total, 1.0 / items.len() as f64);
        let loss_value = tape.value(mean).data[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        let grads = tape.backward(mean);
        let grad_set = bp.collect_grads(&params, &grads);
        opt.update(&mut params, &grad_set)?;
        bn = step_bn;
        pool_bn = step_pool_bn;
        losses.push(loss_value);
    }
    Ok(TrainOutcome {
        params,
        bn_states: bn,
        pool_bn,
        losses,
    })
}

/// Checkpoint layout: model parameters followed by BN running statistics
/// under a reserved `running.` prefix.
pub fn pack_state(params: &ParamSet, bn: &[BnState], pool_bn: &[BnState]) -> ParamSet {
    let mut out = params.clone();
    let stash = |out: &mut ParamSet, prefix: &str, states: &[BnState]| {
        for (l, s) in states.iter().enumerate() {
            out.insert(
                format!("running.{prefix}{l}.mean"),
                Tensor::new(vec![s.running_mean.len()], s.running_mean.clone()).unwrap(),
            );
            out.insert(
                format!("running.{prefix}{l}.var"),
                Tensor::new(vec![s.running_var.len()], s.running_var.clone()).unwrap(),
            );
        }
    };
    stash(&mut out, "bn", bn);
    stash(&mut out, "pool_bn", pool_bn);
    out
}

pub fn unpack_state(cfg: &RunConfig, packed: &ParamSet) -> Result<(ParamSet, Vec<BnState>, Vec<BnState>)> {
    let mut params = ParamSet::new();
    for (name, t) in packed.iter() {
        if !name.starts_with("running.") {
            params.insert(name, t.clone());
        }
    }
    let fetch = |prefix: &str, l: usize, channels: usize| -> Result<BnState> {
        let mean = packed
            .get(&format!("running.{prefix}{l}.mean"))
            .ok_or_else(|| Error::Checkpoint(format!("missing running.{prefix}{l}.mean")))?;
        let var = packed
            .get(&format!("running.{prefix}{l}.var"))
            .ok_or_else(|| Error::Checkpoint(format!("missing running.{prefix}{l}.var")))?;
        if mean.len() != channels || var.len() != channels {
            return Err(Error::Checkpoint(format!(
                "running stats for {prefix}{l} have {} channels, config expects {channels}",
                mean.len()
            )));
        }
        Ok(BnState {
            running_mean: mean.data.clone(),
            running_var: var.data.clone(),
            momentum: 0.1,
        })
    };
    let bn = (0..cfg.model.blocks)
        .map(|l| fetch("bn", l, cfg.model.d_model))
        .collect::<Result<Vec<_>>>()?;
    let pool_bn = (0..cfg.model.blocks)
        .map(|l| fetch("pool_bn", l, cfg.fusion.pooled_rows))
        .collect::<Result<Vec<_>>>()?;
    Ok((params, bn, pool_bn))
}

pub struct DecodedUtterance {
    pub conversation: String,
    pub utterance_id: String,
    pub hypothesis: Vec<usize>,
    pub reference: Vec<usize>,
}

pub struct DecodeReport {
    pub utterances: Vec<DecodedUtterance>,
    /// Corpus token error rate: total edit distance over total reference length.
    pub ter: f64,
}

/// Greedy-decode every utterance in manifest order, carrying the context
/// cache within each conversation (eval-mode normalization).
pub fn decode_corpus(
    cfg: &RunConfig,
    params: &ParamSet,
    bn: &[BnState],
    pool_bn: &[BnState],
    manifest: &Manifest,
    store: &dyn FeatureStore,
) -> Result<DecodeReport> {
    let mut utterances = Vec::new();
    let mut errors = 0usize;
    let mut ref_len = 0usize;
    for conv in &manifest.conversations {
        let mut cache = ContextCache::new(cfg.fusion.context_utterances);
        for utt in &conv.utterances {
            let feats = store.load(&utt.feature_path)?;
            let mut tape = Tape::new();
            let bp = params.bind(&mut tape);
            let enc = contextual_encode(&mut tape, &bp, cfg, &feats, &cache, false, bn, pool_bn)?;
            let hyp = greedy_decode(&mut tape, &bp, &cfg.model, enc.current)?;
            cache.push(enc.to_cache_entry(&tape, &feats));
            errors += levenshtein(&hyp, &utt.labels);
            ref_len += utt.labels.len();
            utterances.push(DecodedUtterance {
                conversation: conv.id.clone(),
                utterance_id: utt.utterance_id.clone(),
                hypothesis: hyp,
                reference: utt.labels.clone(),
            });
        }
    }
    Ok(DecodeReport {
        utterances,
        ter: errors as f64 / ref_len.max(1) as f64,
    })
}

/// Build an in-memory toy corpus: `conversations × utterances_each` random
/// utterances with short random label strings. Returns the manifest and store.
pub fn toy_corpus(
    cfg: &RunConfig,
    conversations: usize,
    utterances_each: usize,
    frames: usize,
    labels_len: usize,
    seed: u64,
) -> (Manifest, HashMap<String, Tensor>) {
    use crate::scheduler::{Conversation, ManifestUtterance};
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = Manifest::default();
    let mut store = HashMap::new();
    for c in 0..conversations {
        let id = format!("conv{c}");
        let mut utts = Vec::new();
        for u in 0..utterances_each {
            let path = format!("{id}/utt{u}.feat");
            let feats = Tensor::randn(&[frames, cfg.model.input_dim], 1.0, &mut rng);
            let labels: Vec<usize> = (0..labels_len)
                .map(|_| 1 + rng.gen::<usize>() % cfg.model.vocab)
                .collect();
            store.insert(path.clone(), feats);
            utts.push(ManifestUtterance {
                utterance_id: format!("utt{u}"),
                frames,
                feature_path: path,
                labels,
            });
        }
        manifest.conversations.push(Conversation {
            id,
            utterances: utts,
        });
    }
    (manifest, store)
}
