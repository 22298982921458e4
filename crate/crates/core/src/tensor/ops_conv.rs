//! 3D convolution and pooling kernels.
//!
//! conv3d is cross-correlation (no kernel flip) over N×C×D×H×W row-major
//! buffers, implemented as direct loops: the innermost loop runs over the W
//! axis so reads and writes stay contiguous, and output channels are
//! processed in small blocks so an input row is reused across several
//! kernels while it is hot.

use super::{Element, OpRecord, Result, Tape, Tensor, TensorError, TensorId};
use std::sync::Arc;

const CO_BLOCK: usize = 8;

/// Geometry of a conv3d call: cubic kernels are the common case but all
/// three axes are independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn cubic(kernel: usize, stride: usize, padding: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel: (kernel, kernel, kernel),
            stride: (stride, stride, stride),
            padding: (padding, padding, padding),
            in_channels,
            out_channels,
        }
    }

    fn validate(&self) -> Result<()> {
        let (kd, kh, kw) = self.kernel;
        let (sd, sh, sw) = self.stride;
        if kd < 1 || kh < 1 || kw < 1 || sd < 1 || sh < 1 || sw < 1 || self.in_channels < 1 || self.out_channels < 1 {
            return Err(TensorError::Geometry {
                op: "conv3d",
                detail: format!("all extents must be >= 1: {self:?}"),
            });
        }
        Ok(())
    }
}

/// `floor((in + 2p − k)/s) + 1`, or a geometry error when it collapses below 1.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(TensorError::Geometry {
            op: "conv3d",
            detail: format!("kernel {kernel} exceeds padded extent {padded}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Valid output range along one axis for a fixed kernel offset `k`:
/// indices `ow` with `0 <= ow*s + k - p < in`.
fn valid_out_range(out: usize, input: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let off = k as isize - pad as isize;
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(stride) };
    let hi_excl = (input as isize - off).max(0) as usize;
    let hi = hi_excl.div_ceil(stride).min(out);
    (lo.min(hi), hi)
}

impl<E: Element> Tape<E> {
    /// Cross-correlation plus per-channel bias.
    ///
    /// `x`: `[N, Cin, D, H, W]`, `w`: `[Cout, Cin, kd, kh, kw]`, `b`: `[Cout]`.
    pub fn conv3d(&mut self, x: TensorId, w: TensorId, b: TensorId, spec: &ConvSpec) -> Result<TensorId> {
        spec.validate()?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let (kd, kh, kw) = spec.kernel;
        if xs.len() != 5 || xs[1] != spec.in_channels {
            return Err(TensorError::DimensionMismatch {
                op: "conv3d",
                detail: format!("x {xs:?} does not match spec {spec:?}"),
            });
        }
        if ws != [spec.out_channels, spec.in_channels, kd, kh, kw] {
            return Err(TensorError::DimensionMismatch {
                op: "conv3d",
                detail: format!("w {ws:?} does not match spec {spec:?}"),
            });
        }
        if bs != [spec.out_channels] {
            return Err(TensorError::DimensionMismatch {
                op: "conv3d",
                detail: format!("b {bs:?} does not match spec {spec:?}"),
            });
        }
        let (n, cin, d, h, wid) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let od = conv_out_extent(d, kd, spec.stride.0, spec.padding.0)?;
        let oh = conv_out_extent(h, kh, spec.stride.1, spec.padding.1)?;
        let ow = conv_out_extent(wid, kw, spec.stride.2, spec.padding.2)?;
        let cout = spec.out_channels;

        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(b);
        let mut out = vec![E::ZERO; n * cout * od * oh * ow];

        let x_c = d * h * wid;
        let x_n = cin * x_c;
        let o_c = od * oh * ow;
        let o_n = cout * o_c;
        let w_ci = kd * kh * kw;
        let w_co = cin * w_ci;
        let (sd, sh, sw) = spec.stride;
        let (pd, ph, pw) = spec.padding;

        for ni in 0..n {
            for co0 in (0..cout).step_by(CO_BLOCK) {
                let co1 = (co0 + CO_BLOCK).min(cout);
                for co in co0..co1 {
                    out[ni * o_n + co * o_c..ni * o_n + (co + 1) * o_c].fill(bd[co]);
                }
                for ci in 0..cin {
                    for co in co0..co1 {
                        for kdi in 0..kd {
                            let (dlo, dhi) = valid_out_range(od, d, sd, kdi, pd);
                            for khi in 0..kh {
                                let (hlo, hhi) = valid_out_range(oh, h, sh, khi, ph);
                                for kwi in 0..kw {
                                    let (wlo, whi) = valid_out_range(ow, wid, sw, kwi, pw);
                                    let wval = wd[co * w_co + ci * w_ci + kdi * kh * kw + khi * kw + kwi];
                                    let woff = kwi as isize - pw as isize;
                                    for odi in dlo..dhi {
                                        let id = (odi * sd) as isize + kdi as isize - pd as isize;
                                        let xplane = ni * x_n + ci * x_c + id as usize * h * wid;
                                        let oplane = ni * o_n + co * o_c + odi * oh * ow;
                                        for ohi in hlo..hhi {
                                            let ih = (ohi * sh) as isize + khi as isize - ph as isize;
                                            let xrow = xplane + ih as usize * wid;
                                            let orow = oplane + ohi * ow;
                                            for owi in wlo..whi {
                                                let iw = (owi * sw) as isize + woff;
                                                out[orow + owi] += wval * xd[xrow + iw as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![n, cout, od, oh, ow], out)?;
        self.push_op(value, OpRecord::Conv3d { x, w, b, spec: *spec }, "conv3d")
    }

    /// Max pooling with per-axis window, stride and zero padding. Ties go to
    /// the first maximum in D-major scan order, and padded cells never
    /// participate (they are excluded, not treated as zeros).
    pub fn maxpool3d(
        &mut self,
        x: TensorId,
        window: (usize, usize, usize),
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(TensorError::DimensionMismatch {
                op: "maxpool3d",
                detail: format!("x must be 5-D, got {xs:?}"),
            });
        }
        let win = [window.0, window.1, window.2];
        let str_ = [stride.0, stride.1, stride.2];
        let pad = [padding.0, padding.1, padding.2];
        for ax in 0..3 {
            if win[ax] < 1 || str_[ax] < 1 {
                return Err(TensorError::Geometry {
                    op: "maxpool3d",
                    detail: "window and stride must be >= 1".into(),
                });
            }
            if pad[ax] >= win[ax] {
                return Err(TensorError::Geometry {
                    op: "maxpool3d",
                    detail: format!("padding {} must be smaller than window {}", pad[ax], win[ax]),
                });
            }
        }
        let (n, c, d, h, wid) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let ext = |input: usize, ax: usize| -> Result<usize> {
            let padded = input + 2 * pad[ax];
            if win[ax] > padded {
                return Err(TensorError::Geometry {
                    op: "maxpool3d",
                    detail: format!("window {} exceeds padded extent {padded}", win[ax]),
                });
            }
            Ok((padded - win[ax]) / str_[ax] + 1)
        };
        let (od, oh, ow) = (ext(d, 0)?, ext(h, 1)?, ext(wid, 2)?);
        let xd = self.data(x);
        let mut out = vec![E::ZERO; n * c * od * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        let x_plane = h * wid;
        let x_chan = d * x_plane;
        let mut oi = 0usize;
        for nc in 0..n * c {
            let base = nc * x_chan;
            for odi in 0..od {
                let d0 = odi * str_[0];
                for ohi in 0..oh {
                    let h0 = ohi * str_[1];
                    for owi in 0..ow {
                        let w0 = owi * str_[2];
                        let mut best = E::ZERO;
                        let mut best_idx = u32::MAX;
                        for kd in 0..win[0] {
                            let id = d0 + kd;
                            if id < pad[0] || id >= d + pad[0] {
                                continue;
                            }
                            let id = id - pad[0];
                            for kh in 0..win[1] {
                                let ih = h0 + kh;
                                if ih < pad[1] || ih >= h + pad[1] {
                                    continue;
                                }
                                let ih = ih - pad[1];
                                for kw in 0..win[2] {
                                    let iw = w0 + kw;
                                    if iw < pad[2] || iw >= wid + pad[2] {
                                        continue;
                                    }
                                    let iw = iw - pad[2];
                                    let idx = base + id * x_plane + ih * wid + iw;
                                    let v = xd[idx];
                                    if best_idx == u32::MAX || v > best {
                                        best = v;
                                        best_idx = idx as u32;
                                    }
                                }
                            }
                        }
                        out[oi] = best;
                        argmax[oi] = best_idx;
                        oi += 1;
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![n, c, od, oh, ow], out)?;
        self.push_op(value, OpRecord::MaxPool3d { x, argmax: Arc::new(argmax) }, "maxpool3d")
    }

    /// Cubic max pooling: same window, stride and padding on all three axes.
    pub fn maxpool3d_cubic(&mut self, x: TensorId, window: usize, stride: usize, padding: usize) -> Result<TensorId> {
        self.maxpool3d(x, (window, window, window), (stride, stride, stride), (padding, padding, padding))
    }

    /// Cubic average pooling without padding.
    pub fn avgpool3d(&mut self, x: TensorId, window: usize, stride: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(TensorError::DimensionMismatch {
                op: "avgpool3d",
                detail: format!("x must be 5-D, got {xs:?}"),
            });
        }
        let (n, c, d, h, wid) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let ext = |input: usize| -> Result<usize> {
            if window > input {
                return Err(TensorError::Geometry {
                    op: "avgpool3d",
                    detail: format!("window {window} exceeds extent {input}"),
                });
            }
            Ok((input - window) / stride + 1)
        };
        let (od, oh, ow) = (ext(d)?, ext(h)?, ext(wid)?);
        let inv = E::ONE / E::from_f64((window * window * window) as f64);
        let xd = self.data(x);
        let mut out = vec![E::ZERO; n * c * od * oh * ow];
        let x_plane = h * wid;
        let x_chan = d * x_plane;
        let mut oi = 0usize;
        for nc in 0..n * c {
            let base = nc * x_chan;
            for odi in 0..od {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut acc = E::ZERO;
                        for kd in 0..window {
                            for kh in 0..window {
                                let row = base + (odi * stride + kd) * x_plane + (ohi * stride + kh) * wid + owi * stride;
                                for kw in 0..window {
                                    acc += xd[row + kw];
                                }
                            }
                        }
                        out[oi] = acc * inv;
                        oi += 1;
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![n, c, od, oh, ow], out)?;
        self.push_op(
            value,
            OpRecord::AvgPool3d { x, window: (window, window, window), stride: (stride, stride, stride) },
            "avgpool3d",
        )
    }

    /// Mean over the three spatial axes: `[N, C, D, H, W] -> [N, C]`.
    pub fn global_avgpool(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(TensorError::DimensionMismatch {
                op: "global_avgpool",
                detail: format!("x must be 5-D, got {xs:?}"),
            });
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial = xs[2] * xs[3] * xs[4];
        let inv = E::ONE / E::from_f64(spatial as f64);
        let xd = self.data(x);
        let mut out = vec![E::ZERO; n * c];
        for (nc, slot) in out.iter_mut().enumerate() {
            let base = nc * spatial;
            let mut acc = E::ZERO;
            for &v in &xd[base..base + spatial] {
                acc += v;
            }
            *slot = acc * inv;
        }
        let value = Tensor::from_vec(vec![n, c], out)?;
        self.push_op(value, OpRecord::GlobalAvgPool { x }, "global_avgpool")
    }
}

pub(crate) fn conv3d_backward<E: Element>(
    tape: &Tape<E>,
    grad: &[E],
    x: TensorId,
    w: TensorId,
    b: TensorId,
    spec: &ConvSpec,
    grads: &mut [Option<Vec<E>>],
) {
    let xs = tape.shape(x).to_vec();
    let (n, cin, d, h, wid) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (kd, kh, kw) = spec.kernel;
    let (sd, sh, sw) = spec.stride;
    let (pd, ph, pw) = spec.padding;
    let cout = spec.out_channels;
    let od = conv_out_extent(d, kd, sd, pd).expect("validated in forward");
    let oh = conv_out_extent(h, kh, sh, ph).expect("validated in forward");
    let ow = conv_out_extent(wid, kw, sw, pw).expect("validated in forward");

    let x_c = d * h * wid;
    let x_n = cin * x_c;
    let o_c = od * oh * ow;
    let o_n = cout * o_c;
    let w_ci = kd * kh * kw;
    let w_co = cin * w_ci;

    if tape.requires_grad(b) {
        if grads[b].is_none() {
            grads[b] = Some(vec![E::ZERO; cout]);
        }
        let db = grads[b].as_mut().unwrap();
        for ni in 0..n {
            for (co, slot) in db.iter_mut().enumerate() {
                let base = ni * o_n + co * o_c;
                let mut acc = E::ZERO;
                for &g in &grad[base..base + o_c] {
                    acc += g;
                }
                *slot += acc;
            }
        }
    }

    let need_dx = tape.requires_grad(x);
    let need_dw = tape.requires_grad(w);
    if !need_dx && !need_dw {
        return;
    }
    if need_dx && grads[x].is_none() {
        grads[x] = Some(vec![E::ZERO; tape.value(x).numel()]);
    }
    if need_dw && grads[w].is_none() {
        grads[w] = Some(vec![E::ZERO; tape.value(w).numel()]);
    }
    let xd = tape.data(x);
    let wd = tape.data(w);
    // Split borrows: dx and dw live in different slots.
    debug_assert_ne!(x, w);
    let (dx_slot, dw_slot) = if x < w {
        let (lo, hi) = grads.split_at_mut(w);
        (&mut lo[x], &mut hi[0])
    } else {
        let (lo, hi) = grads.split_at_mut(x);
        (&mut hi[0], &mut lo[w])
    };
    let mut dx_buf: Option<&mut [E]> = if need_dx { dx_slot.as_mut().map(|v| v.as_mut_slice()) } else { None };
    let mut dw_buf: Option<&mut [E]> = if need_dw { dw_slot.as_mut().map(|v| v.as_mut_slice()) } else { None };

    for ni in 0..n {
        for co in 0..cout {
            for ci in 0..cin {
                for kdi in 0..kd {
                    let (dlo, dhi) = valid_out_range(od, d, sd, kdi, pd);
                    for khi in 0..kh {
                        let (hlo, hhi) = valid_out_range(oh, h, sh, khi, ph);
                        for kwi in 0..kw {
                            let (wlo, whi) = valid_out_range(ow, wid, sw, kwi, pw);
                            let widx = co * w_co + ci * w_ci + kdi * kh * kw + khi * kw + kwi;
                            let wval = wd[widx];
                            let woff = kwi as isize - pw as isize;
                            let mut dw_acc = E::ZERO;
                            for odi in dlo..dhi {
                                let id = (odi * sd) as isize + kdi as isize - pd as isize;
                                let xplane = ni * x_n + ci * x_c + id as usize * h * wid;
                                let oplane = ni * o_n + co * o_c + odi * oh * ow;
                                for ohi in hlo..hhi {
                                    let ih = (ohi * sh) as isize + khi as isize - ph as isize;
                                    let xrow = xplane + ih as usize * wid;
                                    let orow = oplane + ohi * ow;
                                    if let Some(dx) = dx_buf.as_deref_mut() {
                                        for owi in wlo..whi {
                                            let iw = (owi * sw) as isize + woff;
                                            let g = grad[orow + owi];
                                            dx[xrow + iw as usize] += g * wval;
                                            if need_dw {
                                                dw_acc += g * xd[xrow + iw as usize];
                                            }
                                        }
                                    } else {
                                        for owi in wlo..whi {
                                            let iw = (owi * sw) as isize + woff;
                                            dw_acc += grad[orow + owi] * xd[xrow + iw as usize];
                                        }
                                    }
                                }
                            }
                            if let Some(dw) = dw_buf.as_deref_mut() {
                                dw[widx] += dw_acc;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn maxpool_backward<E: Element>(buf: &mut [E], grad: &[E], argmax: &[u32]) {
    for (&g, &idx) in grad.iter().zip(argmax) {
        buf[idx as usize] += g;
    }
}

pub(crate) fn avgpool_backward<E: Element>(
    buf: &mut [E],
    grad: &[E],
    in_shape: &[usize],
    out_shape: &[usize],
    window: (usize, usize, usize),
    stride: (usize, usize, usize),
) {
    let (n, c, d, h, wid) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
    let (od, oh, ow) = (out_shape[2], out_shape[3], out_shape[4]);
    let (kw0, kw1, kw2) = window;
    let (s0, s1, s2) = stride;
    let inv = E::ONE / E::from_f64((kw0 * kw1 * kw2) as f64);
    let x_plane = h * wid;
    let x_chan = d * x_plane;
    let mut oi = 0usize;
    for nc in 0..n * c {
        let base = nc * x_chan;
        for odi in 0..od {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let g = grad[oi] * inv;
                    oi += 1;
                    for kd in 0..kw0 {
                        for kh in 0..kw1 {
                            let row = base + (odi * s0 + kd) * x_plane + (ohi * s1 + kh) * wid + owi * s2;
                            for kw in 0..kw2 {
                                buf[row + kw] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn global_avgpool_backward<E: Element>(buf: &mut [E], grad: &[E], in_shape: &[usize]) {
    let spatial = in_shape[2] * in_shape[3] * in_shape[4];
    let inv = E::ONE / E::from_f64(spatial as f64);
    for (nc, &g) in grad.iter().enumerate() {
        let gv = g * inv;
        for slot in &mut buf[nc * spatial..(nc + 1) * spatial] {
            *slot += gv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    /// Seven nested loops, no cleverness: the reference conv3d.
    fn conv3d_naive(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        spec: &ConvSpec,
    ) -> Vec<f64> {
        let xs = x.shape();
        let (n, cin, d, h, wid) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (kd, kh, kw) = spec.kernel;
        let (sd, sh, sw) = spec.stride;
        let (pd, ph, pw) = spec.padding;
        let cout = spec.out_channels;
        let od = conv_out_extent(d, kd, sd, pd).unwrap();
        let oh = conv_out_extent(h, kh, sh, ph).unwrap();
        let ow = conv_out_extent(wid, kw, sw, pw).unwrap();
        let xd = x.as_slice();
        let wd = w.as_slice();
        let bd = b.as_slice();
        let mut out = vec![0.0; n * cout * od * oh * ow];
        let mut oi = 0;
        for ni in 0..n {
            for co in 0..cout {
                for odi in 0..od {
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let mut acc = bd[co];
                            for ci in 0..cin {
                                for kdi in 0..kd {
                                    for khi in 0..kh {
                                        for kwi in 0..kw {
                                            let id = (odi * sd + kdi) as isize - pd as isize;
                                            let ih = (ohi * sh + khi) as isize - ph as isize;
                                            let iw = (owi * sw + kwi) as isize - pw as isize;
                                            if id < 0 || ih < 0 || iw < 0 {
                                                continue;
                                            }
                                            let (id, ih, iw) = (id as usize, ih as usize, iw as usize);
                                            if id >= d || ih >= h || iw >= wid {
                                                continue;
                                            }
                                            acc += xd[((ni * cin + ci) * d + id) * h * wid + ih * wid + iw]
                                                * wd[(((co * cin + ci) * kd + kdi) * kh + khi) * kw + kwi];
                                        }
                                    }
                                }
                            }
                            out[oi] = acc;
                            oi += 1;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_t(&mut rng, &[1, 1, 3, 3, 3]);
        let spec = ConvSpec::cubic(1, 1, 0, 1, 1);
        let mut tape = Tape::<f64>::new();
        let xid = tape.leaf(x.clone(), false);
        let w = tape.leaf(t(&[1, 1, 1, 1, 1], &[1.0]), false);
        let b = tape.leaf(t(&[1], &[0.0]), false);
        let y = tape.conv3d(xid, w, b, &spec).unwrap();
        assert_eq!(tape.value(y).as_slice(), x.as_slice());
    }

    #[test]
    fn all_ones_cube_sums_to_27() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 3, 3, 3], &[1.0; 27]), false);
        let w = tape.leaf(t(&[1, 1, 3, 3, 3], &[1.0; 27]), false);
        let b = tape.leaf(t(&[1], &[0.0]), false);
        let spec = ConvSpec::cubic(3, 1, 0, 1, 1);
        let y = tape.conv3d(x, w, b, &spec).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1, 1]);
        assert_eq!(tape.value(y).as_slice(), &[27.0]);
    }

    #[test]
    fn conv3d_matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&mut rng, &[1, 2, 4, 4, 4]);
        let w = rand_t(&mut rng, &[3, 2, 3, 3, 3]);
        let b = rand_t(&mut rng, &[3]);
        let spec = ConvSpec::cubic(3, 1, 1, 2, 3);
        let expect = conv3d_naive(&x, &w, &b, &spec);
        let mut tape = Tape::<f64>::new();
        let (xi, wi, bi) = (tape.leaf(x, false), tape.leaf(w, false), tape.leaf(b, false));
        let y = tape.conv3d(xi, wi, bi, &spec).unwrap();
        let got = tape.value(y).as_slice();
        assert_eq!(got.len(), expect.len());
        let max_diff = got.iter().zip(&expect).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max);
        assert!(max_diff < 1e-5, "max diff {max_diff}");
    }

    #[test]
    fn conv3d_strided_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_t(&mut rng, &[2, 1, 5, 6, 5]);
        let w = rand_t(&mut rng, &[2, 1, 3, 3, 3]);
        let b = rand_t(&mut rng, &[2]);
        let spec = ConvSpec::cubic(3, 2, 1, 1, 2);
        let expect = conv3d_naive(&x, &w, &b, &spec);
        let mut tape = Tape::<f64>::new();
        let (xi, wi, bi) = (tape.leaf(x, false), tape.leaf(w, false), tape.leaf(b, false));
        let y = tape.conv3d(xi, wi, bi, &spec).unwrap();
        let got = tape.value(y).as_slice();
        let max_diff = got.iter().zip(&expect).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max);
        assert!(max_diff < 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn conv3d_collapsed_output_is_geometry_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2, 2]), false);
        let w = tape.leaf(Tensor::zeros(vec![1, 1, 3, 3, 3]), false);
        let b = tape.leaf(Tensor::zeros(vec![1]), false);
        let spec = ConvSpec::cubic(3, 1, 0, 1, 1);
        assert!(matches!(tape.conv3d(x, w, b, &spec), Err(TensorError::Geometry { .. })));
    }

    #[test]
    fn maxpool_one_axis_pattern() {
        let mut tape = Tape::<f64>::new();
        // [1,3,2,4] along W, other axes size 1, window 2 stride 2 -> [3,4]
        let x = tape.leaf(t(&[1, 1, 1, 1, 4], &[1.0, 3.0, 2.0, 4.0]), false);
        let y = tape.maxpool3d(x, (1, 1, 2), (1, 1, 2), (0, 0, 0)).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[3.0, 4.0]);
        // a window exceeding the padded extent is a geometry error
        let x2 = tape.leaf(t(&[1, 1, 4, 1, 1], &[1.0, 3.0, 2.0, 4.0]), false);
        assert!(matches!(tape.maxpool3d_cubic(x2, 2, 2, 0), Err(TensorError::Geometry { .. })));
    }

    #[test]
    fn maxpool_constant_volume_is_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 4, 4, 4], 2.5), false);
        let y = tape.maxpool3d_cubic(x, 2, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2, 2]);
        assert!(tape.value(y).as_slice().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn maxpool_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_t(&mut rng, &[1, 1, 6, 6, 6]);
        let mut tape = Tape::<f64>::new();
        let xi = tape.leaf(x.clone(), false);
        let y = tape.maxpool3d_cubic(xi, 2, 2, 0).unwrap();
        let xd = x.as_slice();
        let mut oi = 0;
        for od in 0..3 {
            for oh in 0..3 {
                for ow in 0..3 {
                    let mut best = f64::NEG_INFINITY;
                    for kd in 0..2 {
                        for kh in 0..2 {
                            for kw in 0..2 {
                                best = best.max(xd[(od * 2 + kd) * 36 + (oh * 2 + kh) * 6 + ow * 2 + kw]);
                            }
                        }
                    }
                    assert_eq!(tape.value(y).as_slice()[oi], best);
                    oi += 1;
                }
            }
        }
    }

    #[test]
    fn maxpool_backward_routes_to_first_argmax() {
        let mut tape = Tape::<f64>::new();
        // two equal maxima; gradient must go to the first in scan order
        let x = tape.leaf(t(&[1, 1, 2, 2, 2], &[7.0, 7.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]), true);
        let y = tape.maxpool3d_cubic(x, 2, 2, 0).unwrap();
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_all_negative_with_padding_ignores_pad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 2, 2, 2], -3.0), false);
        let y = tape.maxpool3d_cubic(x, 3, 2, 1).unwrap();
        // padded cells are excluded, not treated as zeros
        assert!(tape.value(y).as_slice().iter().all(|&v| v == -3.0));
    }

    #[test]
    fn global_avgpool_constant_and_onehot() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![2, 3, 2, 2, 2], 4.25), false);
        let y = tape.global_avgpool(x).unwrap();
        assert_eq!(tape.shape(y), &[2, 3]);
        assert!(tape.value(y).as_slice().iter().all(|&v| v == 4.25));
        let mut one_hot = vec![0.0; 8];
        one_hot[5] = 3.0;
        let x2 = tape.leaf(t(&[1, 1, 2, 2, 2], &one_hot), false);
        let y2 = tape.global_avgpool(x2).unwrap();
        assert_eq!(tape.value(y2).as_slice(), &[3.0 / 8.0]);
    }

    #[test]
    fn global_avgpool_matches_direct_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_t(&mut rng, &[2, 2, 3, 3, 3]);
        let mut tape = Tape::<f64>::new();
        let xi = tape.leaf(x.clone(), false);
        let y = tape.global_avgpool(xi).unwrap();
        for nc in 0..4 {
            let mean: f64 = x.as_slice()[nc * 27..(nc + 1) * 27].iter().sum::<f64>() / 27.0;
            assert!((tape.value(y).as_slice()[nc] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn avgpool_halves_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, &[1, 2, 4, 4, 4]);
        let mut tape = Tape::<f64>::new();
        let xi = tape.leaf(x.clone(), false);
        let y = tape.avgpool3d(xi, 2, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2, 2, 2]);
        // spot-check one window
        let xd = x.as_slice();
        let mut acc = 0.0;
        for kd in 0..2 {
            for kh in 0..2 {
                for kw in 0..2 {
                    acc += xd[kd * 16 + kh * 4 + kw];
                }
            }
        }
        assert!((tape.value(y).as_slice()[0] - acc / 8.0).abs() < 1e-12);
    }
}
