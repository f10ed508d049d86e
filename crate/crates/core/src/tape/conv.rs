use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Tape, Var};

impl Tape {
    /// Per-channel 1-D convolution over `[t × d]` with kernel `[k × d]`.
    ///
    /// Symmetric padding requires an odd kernel; the causal variant pads
    /// left-only so output frame t depends on input frames ≤ t.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, causal: bool) -> Result<Var> {
        let vx = self.value(x).clone();
        let vk = self.value(kernel).clone();
        if vx.shape.len() != 2 || vk.shape.len() != 2 || vx.cols() != vk.cols() {
            return Err(Error::Shape(format!(
                "depthwise_conv1d: x {:?}, kernel {:?}",
                vx.shape, vk.shape
            )));
        }
        let (t, d) = (vx.rows(), vx.cols());
        let k = vk.rows();
        if !causal && k % 2 == 0 {
            return Err(Error::Shape(format!(
                "depthwise kernel size {} must be odd for symmetric padding",
                k
            )));
        }
        if t == 0 {
            return Err(Error::Length("depthwise_conv1d on empty input".into()));
        }
        let pad = if causal { k - 1 } else { k / 2 };
        let mut out = Tensor::zeros(&[t, d]);
        for i in 0..t {
            for j in 0..k {
                let src = i as isize + j as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                for c in 0..d {
                    out.data[i * d + c] += vx.data[src * d + c] * vk.data[j * d + c];
                }
            }
        }
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[t, d]);
                let mut dk = Tensor::zeros(&[k, d]);
                for i in 0..t {
                    for j in 0..k {
                        let src = i as isize + j as isize - pad as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..d {
                            let gv = g.data[i * d + c];
                            dx.data[src * d + c] += gv * vk.data[j * d + c];
                            dk.data[j * d + c] += gv * vx.data[src * d + c];
                        }
                    }
                }
                vec![(x, dx), (kernel, dk)]
            })),
        ))
    }

    /// Rearrange `[c × t × f]` to `[t × (c·f)]` so frames become rows.
    pub fn merge_channels(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape.len() != 3 {
            return Err(Error::Shape(format!("merge_channels: {:?}", vx.shape)));
        }
        let (c, t, f) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        let mut out = Tensor::zeros(&[t, c * f]);
        for ci in 0..c {
            for ti in 0..t {
                for fi in 0..f {
                    out.data[ti * c * f + ci * f + fi] = vx.data[ci * t * f + ti * f + fi];
                }
            }
        }
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[c, t, f]);
                for ci in 0..c {
                    for ti in 0..t {
                        for fi in 0..f {
                            dx.data[ci * t * f + ti * f + fi] =
                                g.data[ti * c * f + ci * f + fi];
                        }
                    }
                }
                vec![(x, dx)]
            })),
        ))
    }

    /// 2-D convolution with 3×3 kernels and stride 2 on both axes, used by
    /// the subsampling front-end. Input `[c_in × t × f]`, kernel
    /// `[c_out × c_in × 3 × 3]`, bias `[c_out]`. Time padding is (1,1)
    /// symmetric or (2,0) causal; frequency padding is symmetric (1,1).
    /// Output length on each axis is ceil(len/2).
    pub fn conv2d_stride2(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        causal_time: bool,
    ) -> Result<Var> {
        let vx = self.value(x).clone();
        let vk = self.value(kernel).clone();
        let vb = self.value(bias).clone();
        if vx.shape.len() != 3 || vk.shape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d_stride2: x {:?}, kernel {:?}",
                vx.shape, vk.shape
            )));
        }
        let (c_in, t, f) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        let (c_out, kc_in, kh, kw) = (vk.shape[0], vk.shape[1], vk.shape[2], vk.shape[3]);
        if kc_in != c_in || kh != 3 || kw != 3 || vb.shape != vec![c_out] {
            return Err(Error::Shape(format!(
                "conv2d_stride2: kernel {:?} incompatible with input channels {} / bias {:?}",
                vk.shape, c_in, vb.shape
            )));
        }
        if t < 1 || f < 1 {
            return Err(Error::Length("conv2d_stride2 on empty input".into()));
        }
        let pad_t = if causal_time { 2isize } else { 1isize };
        let t2 = t.div_ceil(2);
        let f2 = f.div_ceil(2);
        let mut out = Tensor::zeros(&[c_out, t2, f2]);
        for co in 0..c_out {
            for i2 in 0..t2 {
                for j2 in 0..f2 {
                    let mut acc = vb.data[co];
                    for ci in 0..c_in {
                        for dt in 0..3 {
                            let ti = 2 * i2 as isize + dt as isize - pad_t;
                            if ti < 0 || ti >= t as isize {
                                continue;
                            }
                            for df in 0..3 {
                                let fi = 2 * j2 as isize + df as isize - 1;
                                if fi < 0 || fi >= f as isize {
                                    continue;
                                }
                                acc += vx.data[ci * t * f + ti as usize * f + fi as usize]
                                    * vk.data[((co * c_in + ci) * 3 + dt) * 3 + df];
                            }
                        }
                    }
                    out.data[co * t2 * f2 + i2 * f2 + j2] = acc;
                }
            }
        }
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[c_in, t, f]);
                let mut dk = Tensor::zeros(&[c_out, c_in, 3, 3]);
                let mut db = Tensor::zeros(&[c_out]);
                for co in 0..c_out {
                    for i2 in 0..t2 {
                        for j2 in 0..f2 {
                            let gv = g.data[co * t2 * f2 + i2 * f2 + j2];
                            db.data[co] += gv;
                            for ci in 0..c_in {
                                for dt in 0..3 {
                                    let ti = 2 * i2 as isize + dt as isize - pad_t;
                                    if ti < 0 || ti >= t as isize {
                                        continue;
                                    }
                                    for df in 0..3 {
                                        let fi = 2 * j2 as isize + df as isize - 1;
                                        if fi < 0 || fi >= f as isize {
                                            continue;
                                        }
                                        let xi = ci * t * f + ti as usize * f + fi as usize;
                                        let ki = ((co * c_in + ci) * 3 + dt) * 3 + df;
                                        dx.data[xi] += gv * vk.data[ki];
                                        dk.data[ki] += gv * vx.data[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(x, dx), (kernel, dk), (bias, db)]
            })),
        ))
    }
}
