use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Tape, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Batch statistics returned by a training-mode batch-norm pass, used by the
/// caller to update running statistics outside the tape.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Tape {
    /// Per-row layer normalization with affine gain/bias (epsilon 1e-5).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape.len() != 2 {
            return Err(Error::Shape(format!("layer_norm: {:?}", v.shape)));
        }
        let (t, d) = (v.rows(), v.cols());
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.shape != vec![d] || vb.shape != vec![d] {
            return Err(Error::Shape(format!(
                "layer_norm affine: gain {:?}, bias {:?}, d={}",
                vg.shape, vb.shape, d
            )));
        }
        let vx = v.clone();
        let vg = vg.clone();
        let mut out = Tensor::zeros(&[t, d]);
        let mut xhat = Tensor::zeros(&[t, d]);
        let mut inv_std = vec![0.0; t];
        for i in 0..t {
            let row = &vx.data[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat.data[i * d + j] = h;
                out.data[i * d + j] = h * vg.data[j] + self.value(bias).data[j];
            }
        }
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[t, d]);
                let mut dgain = Tensor::zeros(&[d]);
                let mut dbias = Tensor::zeros(&[d]);
                for i in 0..t {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_xh = 0.0;
                    for j in 0..d {
                        let gv = g.data[i * d + j];
                        let h = xhat.data[i * d + j];
                        dgain.data[j] += gv * h;
                        dbias.data[j] += gv;
                        let dh = gv * vg.data[j];
                        sum_dh += dh;
                        sum_dh_xh += dh * h;
                    }
                    let n = d as f64;
                    for j in 0..d {
                        let dh = g.data[i * d + j] * vg.data[j];
                        let h = xhat.data[i * d + j];
                        dx.data[i * d + j] =
                            inv_std[i] * (dh - sum_dh / n - h * sum_dh_xh / n);
                    }
                }
                vec![(x, dx), (gain, dgain), (bias, dbias)]
            })),
        ))
    }

    /// Training-mode batch norm over the rows of `[t × c]` (each column is a
    /// channel normalized across the t axis). Returns the batch statistics so
    /// the caller can fold them into running state (momentum handled outside).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
    ) -> Result<(Var, BnStats)> {
        let v = self.value(x);
        if v.shape.len() != 2 {
            return Err(Error::Shape(format!("batch_norm: {:?}", v.shape)));
        }
        let (t, c) = (v.rows(), v.cols());
        let (vg, vb) = (self.value(gain).clone(), self.value(bias));
        if vg.shape != vec![c] || vb.shape != vec![c] {
            return Err(Error::Shape(format!(
                "batch_norm affine: gain {:?}, bias {:?}, c={}",
                vg.shape, vb.shape, c
            )));
        }
        let vx = v.clone();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for j in 0..c {
            for i in 0..t {
                mean[j] += vx.data[i * c + j];
            }
            mean[j] /= t as f64;
            for i in 0..t {
                let d = vx.data[i * c + j] - mean[j];
                var[j] += d * d;
            }
            var[j] /= t as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut out = Tensor::zeros(&[t, c]);
        let mut xhat = Tensor::zeros(&[t, c]);
        for i in 0..t {
            for j in 0..c {
                let h = (vx.data[i * c + j] - mean[j]) * inv_std[j];
                xhat.data[i * c + j] = h;
                out.data[i * c + j] = h * vg.data[j] + vb.data[j];
            }
        }
        let stats = BnStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let var_out = self.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[t, c]);
                let mut dgain = Tensor::zeros(&[c]);
                let mut dbias = Tensor::zeros(&[c]);
                for j in 0..c {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_xh = 0.0;
                    for i in 0..t {
                        let gv = g.data[i * c + j];
                        let h = xhat.data[i * c + j];
                        dgain.data[j] += gv * h;
                        dbias.data[j] += gv;
                        let dh = gv * vg.data[j];
                        sum_dh += dh;
                        sum_dh_xh += dh * h;
                    }
                    let n = t as f64;
                    for i in 0..t {
                        let dh = g.data[i * c + j] * vg.data[j];
                        let h = xhat.data[i * c + j];
                        dx.data[i * c + j] =
                            inv_std[j] * (dh - sum_dh / n - h * sum_dh_xh / n);
                    }
                }
                vec![(x, dx), (gain, dgain), (bias, dbias)]
            })),
        );
        Ok((var_out, stats))
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let v = self.value(x);
        if v.shape.len() != 2 {
            return Err(Error::Shape(format!("batch_norm_eval: {:?}", v.shape)));
        }
        let (t, c) = (v.rows(), v.cols());
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm_eval stats length {} vs channels {}",
                running_mean.len(),
                c
            )));
        }
        let (vg, vb) = (self.value(gain).clone(), self.value(bias));
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|&v| 1.0 / (v + NORM_EPS).sqrt())
            .collect();
        let mean = running_mean.to_vec();
        let vx = v.clone();
        let mut out = Tensor::zeros(&[t, c]);
        let mut xhat = Tensor::zeros(&[t, c]);
        for i in 0..t {
            for j in 0..c {
                let h = (vx.data[i * c + j] - mean[j]) * inv_std[j];
                xhat.data[i * c + j] = h;
                out.data[i * c + j] = h * vg.data[j] + vb.data[j];
            }
        }
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[t, c]);
                let mut dgain = Tensor::zeros(&[c]);
                let mut dbias = Tensor::zeros(&[c]);
                for i in 0..t {
                    for j in 0..c {
                        let gv = g.data[i * c + j];
                        dgain.data[j] += gv * xhat.data[i * c + j];
                        dbias.data[j] += gv;
                        dx.data[i * c + j] = gv * vg.data[j] * inv_std[j];
                    }
                }
                vec![(x, dx), (gain, dgain), (bias, dbias)]
            })),
        ))
    }
}

/// Running-statistic state for one batch-norm instance (momentum 0.1).
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    /// Fold one batch's statistics in; returns the updated state.
    pub fn updated(&self, stats: &BnStats) -> Self {
        let m = self.momentum;
        Self {
            running_mean: self
                .running_mean
                .iter()
                .zip(&stats.mean)
                .map(|(r, b)| (1.0 - m) * r + m * b)
                .collect(),
            running_var: self
                .running_var
                .iter()
                .zip(&stats.var)
                .map(|(r, b)| (1.0 - m) * r + m * b)
                .collect(),
            momentum: m,
        }
    }
}
