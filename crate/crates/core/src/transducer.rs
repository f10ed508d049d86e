//! Neural transducer head: LSTM predictor over label histories, additive
//! joint network, forward-backward loss over the time×label lattice, and
//! greedy (beam-1) decoding.
//!
//! Token id 0 is blank; real tokens are 1..=vocab.

use rand::Rng;

use crate::config::ModelSection;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;
const MAX_EMISSIONS_PER_FRAME: usize = 10;

pub fn init_transducer_params<R: Rng>(cfg: &ModelSection, params: &mut ParamSet, rng: &mut R) {
    let e = cfg.predictor_units;
    let h = cfg.predictor_units;
    let d = cfg.d_model;
    let j = cfg.joint_dim;
    let v1 = cfg.vocab + 1;
    let xavier = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

    params.insert("pred.embed", Tensor::randn(&[v1, e], xavier(e), rng));
    for gate in ["i", "f", "g", "o"] {
        params.insert(format!("pred.wx_{gate}"), Tensor::randn(&[e, h], xavier(e), rng));
        params.insert(format!("pred.wh_{gate}"), Tensor::randn(&[h, h], xavier(h), rng));
        params.insert(format!("pred.b_{gate}"), Tensor::zeros(&[h]));
    }
    params.insert("joint.enc_w", Tensor::randn(&[d, j], xavier(d), rng));
    params.insert("joint.enc_b", Tensor::zeros(&[j]));
    params.insert("joint.pred_w", Tensor::randn(&[h, j], xavier(h), rng));
    params.insert("joint.pred_b", Tensor::zeros(&[j]));
    params.insert("joint.out_w", Tensor::randn(&[j, v1], xavier(j), rng));
    params.insert("joint.out_b", Tensor::zeros(&[v1]));
}

/// Recurrent predictor state (hidden and cell vectors on the tape).
#[derive(Clone, Copy)]
pub struct PredictorState {
    pub h: Var,
    pub c: Var,
}

pub fn predictor_start(tape: &mut Tape, cfg: &ModelSection) -> PredictorState {
    let h = tape.constant(Tensor::zeros(&[1, cfg.predictor_units]));
    let c = tape.constant(Tensor::zeros(&[1, cfg.predictor_units]));
    PredictorState { h, c }
}

/// One recurrence step: consume `token`, return the new output F and state.
pub fn predictor_step(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &ModelSection,
    state: PredictorState,
    token: usize,
) -> Result<(Var, PredictorState)> {
    if token > cfg.vocab {
        return Err(Error::Vocab(token));
    }
    let x = tape.embed(bp.var("pred.embed"), &[token])?;
    let gate = |tape: &mut Tape, name: &str| -> Result<Var> {
        let a = tape.matmul(x, bp.var(&format!("pred.wx_{name}")))?;
        let b = tape.matmul(state.h, bp.var(&format!("pred.wh_{name}")))?;
        let s = tape.add(a, b)?;
        tape.add_bias(s, bp.var(&format!("pred.b_{name}")))
    };
    let i_g = gate(tape, "i")?;
    let i_g = tape.sigmoid(i_g);
    let f_g = gate(tape, "f")?;
    let f_g = tape.sigmoid(f_g);
    let g_g = gate(tape, "g")?;
    let g_g = tape.tanh(g_g);
    let o_g = gate(tape, "o")?;
    let o_g = tape.sigmoid(o_g);
    let fc = tape.mul(f_g, state.c)?;
    let ig = tape.mul(i_g, g_g)?;
    let c_new = tape.add(fc, ig)?;
    let c_tanh = tape.tanh(c_new);
    let h_new = tape.mul(o_g, c_tanh)?;
    Ok((
        h_new,
        PredictorState {
            h: h_new,
            c: c_new,
        },
    ))
}

/// Predictor outputs F_u for u = 0..=U: row u depends only on labels 1..u
/// (a start/blank context precedes the first label).
pub fn predict_sequence(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &ModelSection,
    labels: &[usize],
) -> Result<Var> {
    let mut state = predictor_start(tape, cfg);
    let mut outputs = Vec::with_capacity(labels.len() + 1);
    let mut token = BLANK;
    for u in 0..=labels.len() {
        let (f, next) = predictor_step(tape, bp, cfg, state, token)?;
        outputs.push(f);
        state = next;
        if u < labels.len() {
            token = labels[u];
        }
    }
    tape.concat_rows(&outputs)
}

/// Log-probability lattice over the whole (T' × U+1) grid:
/// row `t * (U+1) + u` holds log P(· | t, u) over V+1 tokens.
pub fn joint_lattice(
    tape: &mut Tape,
    bp: &BoundParams,
    encoder_out: Var,
    predictor_out: Var,
) -> Result<Var> {
    let t_len = tape.value(encoder_out).rows();
    let u1 = tape.value(predictor_out).rows();
    let enc = tape.matmul(encoder_out, bp.var("joint.enc_w"))?;
    let enc = tape.add_bias(enc, bp.var("joint.enc_b"))?;
    let pred = tape.matmul(predictor_out, bp.var("joint.pred_w"))?;
    let pred = tape.add_bias(pred, bp.var("joint.pred_b"))?;
    let enc_rep = tape.repeat_each_row(enc, u1)?;
    let pred_rep = tape.tile_rows(pred, t_len)?;
    let combined = tape.add(enc_rep, pred_rep)?;
    let act = tape.tanh(combined);
    let logits = tape.matmul(act, bp.var("joint.out_w"))?;
    let logits = tape.add_bias(logits, bp.var("joint.out_b"))?;
    tape.log_softmax_rows(logits)
}

/// Joint output for a single (encoder frame, predictor state) pair.
pub fn joint_step(
    tape: &mut Tape,
    bp: &BoundParams,
    enc_frame: Var,
    pred_out: Var,
) -> Result<Var> {
    joint_lattice(tape, bp, enc_frame, pred_out)
}

#[inline]
fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Transducer negative log-likelihood via forward-backward over the lattice.
///
/// `lattice` must come from [`joint_lattice`] (rows indexed t·(U+1)+u);
/// gradients flow back into it via alpha/beta occupancies.
pub fn transducer_loss(
    tape: &mut Tape,
    lattice: Var,
    t_len: usize,
    labels: &[usize],
) -> Result<Var> {
    if t_len == 0 {
        return Err(Error::Length("transducer loss needs T' >= 1".into()));
    }
    let z = tape.value(lattice).clone();
    let u_len = labels.len();
    let u1 = u_len + 1;
    let v1 = z.cols();
    if z.rows() != t_len * u1 {
        return Err(Error::Shape(format!(
            "lattice rows {} != T'({t_len}) * (U+1)({u1})",
            z.rows()
        )));
    }
    for &y in labels {
        if y == BLANK || y >= v1 {
            return Err(Error::Vocab(y));
        }
    }
    let labels = labels.to_vec();
    let zval = |t: usize, u: usize, k: usize| z.data[(t * u1 + u) * v1 + k];

    // forward
    let mut alpha = vec![f64::NEG_INFINITY; t_len * u1];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t > 0 {
                acc = logsumexp2(acc, alpha[(t - 1) * u1 + u] + zval(t - 1, u, BLANK));
            }
            if u > 0 {
                acc = logsumexp2(acc, alpha[t * u1 + u - 1] + zval(t, u - 1, labels[u - 1]));
            }
            alpha[t * u1 + u] = acc;
        }
    }
    let log_lik = alpha[(t_len - 1) * u1 + u_len] + zval(t_len - 1, u_len, BLANK);
    let loss = -log_lik;
    if !loss.is_finite() {
        return Err(Error::NonFinite("transducer loss".into()));
    }

    // backward pass for the gradient: beta(t,u) = log P(finishing from (t,u))
    let mut beta = vec![f64::NEG_INFINITY; t_len * u1];
    beta[(t_len - 1) * u1 + u_len] = zval(t_len - 1, u_len, BLANK);
    for t in (0..t_len).rev() {
        for u in (0..u1).rev() {
            if t == t_len - 1 && u == u_len {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t + 1 < t_len {
                acc = logsumexp2(acc, zval(t, u, BLANK) + beta[(t + 1) * u1 + u]);
            }
            if u < u_len {
                acc = logsumexp2(acc, zval(t, u, labels[u]) + beta[t * u1 + u + 1]);
            }
            beta[t * u1 + u] = acc;
        }
    }
    debug_assert!((beta[0] - log_lik).abs() < 1e-8);

    let shape = z.shape.clone();
    Ok(tape.push(
        Tensor::scalar(loss),
        Some(Box::new(move |g| {
            let gs = g.data[0];
            let mut dz = Tensor::zeros(&shape);
            let idx = |t: usize, u: usize, k: usize| (t * u1 + u) * v1 + k;
            for t in 0..t_len {
                for u in 0..u1 {
                    let a = alpha[t * u1 + u];
                    if a == f64::NEG_INFINITY {
                        continue;
                    }
                    // blank transition (termination at the top-right corner)
                    let blank_cont = if t + 1 < t_len {
                        beta[(t + 1) * u1 + u]
                    } else if u == u_len {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    };
                    if blank_cont != f64::NEG_INFINITY {
                        let occ = (a + z.data[idx(t, u, BLANK)] + blank_cont - log_lik).exp();
                        dz.data[idx(t, u, BLANK)] += -occ * gs;
                    }
                    if u < u_len {
                        let occ = (a + z.data[idx(t, u, labels[u])] + beta[t * u1 + u + 1]
                            - log_lik)
                            .exp();
                        dz.data[idx(t, u, labels[u])] += -occ * gs;
                    }
                }
            }
            vec![(lattice, dz)]
        })),
    ))
}

/// Standard transducer greedy loop: emit argmax tokens until blank, then
/// advance to the next frame. Emissions per frame are capped.
pub fn greedy_decode(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &ModelSection,
    encoder_out: Var,
) -> Result<Vec<usize>> {
    let t_len = tape.value(encoder_out).rows();
    let mut state = predictor_start(tape, cfg);
    let (mut f, mut pending_state) = predictor_step(tape, bp, cfg, state, BLANK)?;
    state = pending_state;
    let mut hyp = Vec::new();
    for t in 0..t_len {
        let frame = tape.slice_rows(encoder_out, t, t + 1)?;
        for _ in 0..MAX_EMISSIONS_PER_FRAME {
            let logp = joint_step(tape, bp, frame, f)?;
            let row = tape.value(logp);
            let best = row
                .data
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if best == BLANK {
                break;
            }
            hyp.push(best);
            (f, pending_state) = predictor_step(tape, bp, cfg, state, best)?;
            state = pending_state;
        }
    }
    Ok(hyp)
}

/// Edit distance between a hypothesis and a reference token sequence.
pub fn levenshtein(hyp: &[usize], reference: &[usize]) -> usize {
    let (n, m) = (reference.len(), hyp.len());
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    for i in 0..=n {
        dp[i * (m + 1)] = i;
    }
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[(i - 1) * (m + 1) + j - 1]
                + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = dp[(i - 1) * (m + 1) + j] + 1;
            let ins = dp[i * (m + 1) + j - 1] + 1;
            dp[i * (m + 1) + j] = sub.min(del).min(ins);
        }
    }
    dp[n * (m + 1) + m]
}

/// Levenshtein distance normalized by reference length.
pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> f64 {
    levenshtein(hyp, reference) as f64 / reference.len().max(1) as f64
}
