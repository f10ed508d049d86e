use crate::error::{Error, Result};
use crate::masks::AttentionMask;
use crate::tensor::Tensor;

use super::{Tape, Var};

impl Tape {
    /// Row softmax with masked entries forced to exactly 0.
    ///
    /// Shift-invariant per row (max-subtraction); errors on fully masked rows.
    pub fn masked_softmax(&mut self, logits: Var, mask: &AttentionMask) -> Result<Var> {
        let v = self.value(logits);
        if v.shape.len() != 2 || v.rows() != mask.num_queries || v.cols() != mask.num_keys {
            return Err(Error::Shape(format!(
                "masked_softmax: logits {:?} vs mask {}x{}",
                v.shape, mask.num_queries, mask.num_keys
            )));
        }
        let (q, k) = (v.rows(), v.cols());
        let mut out = Tensor::zeros(&[q, k]);
        let mut allow = vec![false; q * k];
        for i in 0..q {
            let mut max = f64::NEG_INFINITY;
            for j in 0..k {
                if mask.allowed(i, j) {
                    allow[i * k + j] = true;
                    max = max.max(v.at(i, j));
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: i });
            }
            let mut sum = 0.0;
            for j in 0..k {
                if allow[i * k + j] {
                    let e = (v.at(i, j) - max).exp();
                    out.data[i * k + j] = e;
                    sum += e;
                }
            }
            for j in 0..k {
                out.data[i * k + j] /= sum;
            }
        }
        let s = out.clone();
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                // ds_i = s_i (g_i - Σ_j g_j s_j), restricted to allowed entries
                let mut dl = Tensor::zeros(&[q, k]);
                for i in 0..q {
                    let mut dot = 0.0;
                    for j in 0..k {
                        dot += g.data[i * k + j] * s.data[i * k + j];
                    }
                    for j in 0..k {
                        if allow[i * k + j] {
                            dl.data[i * k + j] = s.data[i * k + j] * (g.data[i * k + j] - dot);
                        }
                    }
                }
                vec![(logits, dl)]
            })),
        ))
    }

    /// Row-wise log-softmax; each output row has logsumexp 0.
    pub fn log_softmax_rows(&mut self, logits: Var) -> Result<Var> {
        let v = self.value(logits);
        if v.shape.len() != 2 {
            return Err(Error::Shape(format!("log_softmax_rows: {:?}", v.shape)));
        }
        let (r, c) = (v.rows(), v.cols());
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = &v.data[i * c..(i + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                out.data[i * c + j] = row[j] - lse;
            }
        }
        let logp = out.clone();
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let mut dl = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let gsum: f64 = g.data[i * c..(i + 1) * c].iter().sum();
                    for j in 0..c {
                        dl.data[i * c + j] =
                            g.data[i * c + j] - logp.data[i * c + j].exp() * gsum;
                    }
                }
                vec![(logits, dl)]
            })),
        ))
    }
}
