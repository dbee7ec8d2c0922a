//! Direct 2-D convolution and its transpose over `[batch, channel, height, width]` tensors.
//!
//! Work is split across samples; per-sample weight gradients are reduced in
//! sample order so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            kernel: 3,
            stride: 2,
            padding: 1,
        }
    }
}

impl ConvSpec {
    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Transposed-convolution output extent for a given output padding.
    pub fn transpose_out_size(&self, input: usize, output_padding: usize) -> usize {
        (input - 1) * self.stride + self.kernel + output_padding - 2 * self.padding
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims {
    pub batch: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub h_out: usize,
    pub w_out: usize,
}

#[inline]
fn tap(o: usize, u: usize, spec: &ConvSpec, limit: usize) -> Option<usize> {
    let i = (o * spec.stride + u) as isize - spec.padding as isize;
    if i >= 0 && (i as usize) < limit {
        Some(i as usize)
    } else {
        None
    }
}

/// `y = conv(x, w) + b`; `w` is `[c_out, c_in, k, k]`.
pub(crate) fn conv_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], d: Dims, spec: &ConvSpec) -> Vec<T> {
    let k = spec.kernel;
    let in_len = d.c_in * d.h_in * d.w_in;
    let out_len = d.c_out * d.h_out * d.w_out;
    let mut y = vec![T::zero(); d.batch * out_len];
    y.par_chunks_mut(out_len.max(1))
        .enumerate()
        .for_each(|(s, ys)| {
            let xs = &x[s * in_len..(s + 1) * in_len];
            for co in 0..d.c_out {
                for oh in 0..d.h_out {
                    for ow in 0..d.w_out {
                        let mut acc = b[co];
                        for ci in 0..d.c_in {
                            let xc = &xs[ci * d.h_in * d.w_in..];
                            let wc = &w[(co * d.c_in + ci) * k * k..];
                            for u in 0..k {
                                let Some(ih) = tap(oh, u, spec, d.h_in) else { continue };
                                for v in 0..k {
                                    let Some(iw) = tap(ow, v, spec, d.w_in) else { continue };
                                    acc += wc[u * k + v] * xc[ih * d.w_in + iw];
                                }
                            }
                        }
                        ys[(co * d.h_out + oh) * d.w_out + ow] = acc;
                    }
                }
            }
        });
    y
}

/// Gradients of `conv_forward` given upstream `gy`. Returns `(dx, dw, db)`.
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    d: Dims,
    spec: &ConvSpec,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<(Vec<T>, Vec<T>)>) {
    let k = spec.kernel;
    let in_len = d.c_in * d.h_in * d.w_in;
    let out_len = d.c_out * d.h_out * d.w_out;
    let w_len = d.c_out * d.c_in * k * k;

    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); d.batch * in_len];
        dx.par_chunks_mut(in_len.max(1))
            .enumerate()
            .for_each(|(s, dxs)| {
                let gs = &gy[s * out_len..(s + 1) * out_len];
                for co in 0..d.c_out {
                    for oh in 0..d.h_out {
                        for ow in 0..d.w_out {
                            let g = gs[(co * d.h_out + oh) * d.w_out + ow];
                            if g == T::zero() {
                                continue;
                            }
                            for ci in 0..d.c_in {
                                let wc = &w[(co * d.c_in + ci) * k * k..];
                                for u in 0..k {
                                    let Some(ih) = tap(oh, u, spec, d.h_in) else { continue };
                                    for v in 0..k {
                                        let Some(iw) = tap(ow, v, spec, d.w_in) else { continue };
                                        dxs[(ci * d.h_in + ih) * d.w_in + iw] += g * wc[u * k + v];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        dx
    });

    let dwb = need_dw.then(|| {
        let partial: Vec<(Vec<T>, Vec<T>)> = (0..d.batch)
            .into_par_iter()
            .map(|s| {
                let xs = &x[s * in_len..(s + 1) * in_len];
                let gs = &gy[s * out_len..(s + 1) * out_len];
                let mut dw = vec![T::zero(); w_len];
                let mut db = vec![T::zero(); d.c_out];
                for co in 0..d.c_out {
                    for oh in 0..d.h_out {
                        for ow in 0..d.w_out {
                            let g = gs[(co * d.h_out + oh) * d.w_out + ow];
                            db[co] += g;
                            if g == T::zero() {
                                continue;
                            }
                            for ci in 0..d.c_in {
                                let xc = &xs[ci * d.h_in * d.w_in..];
                                let base = (co * d.c_in + ci) * k * k;
                                for u in 0..k {
                                    let Some(ih) = tap(oh, u, spec, d.h_in) else { continue };
                                    for v in 0..k {
                                        let Some(iw) = tap(ow, v, spec, d.w_in) else { continue };
                                        dw[base + u * k + v] += g * xc[ih * d.w_in + iw];
                                    }
                                }
                            }
                        }
                    }
                }
                (dw, db)
            })
            .collect();
        reduce_partials(partial, w_len, d.c_out)
    });
    (dx, dwb)
}

fn reduce_partials<T: Scalar>(partial: Vec<(Vec<T>, Vec<T>)>, w_len: usize, b_len: usize) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); w_len];
    let mut db = vec![T::zero(); b_len];
    for (pw, pb) in partial {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a += b;
        }
    }
    (dw, db)
}

/// Transposed convolution; `w` is `[c_in, c_out, k, k]`. Output extents come from `d`.
pub(crate) fn conv_t_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], d: Dims, spec: &ConvSpec) -> Vec<T> {
    let k = spec.kernel;
    let in_len = d.c_in * d.h_in * d.w_in;
    let out_len = d.c_out * d.h_out * d.w_out;
    let mut y = vec![T::zero(); d.batch * out_len];
    y.par_chunks_mut(out_len.max(1))
        .enumerate()
        .for_each(|(s, ys)| {
            for co in 0..d.c_out {
                ys[co * d.h_out * d.w_out..(co + 1) * d.h_out * d.w_out].fill(b[co]);
            }
            let xs = &x[s * in_len..(s + 1) * in_len];
            for ci in 0..d.c_in {
                for ih in 0..d.h_in {
                    for iw in 0..d.w_in {
                        let xv = xs[(ci * d.h_in + ih) * d.w_in + iw];
                        if xv == T::zero() {
                            continue;
                        }
                        for co in 0..d.c_out {
                            let wc = &w[(ci * d.c_out + co) * k * k..];
                            for u in 0..k {
                                let Some(oh) = tap(ih, u, spec, d.h_out) else { continue };
                                for v in 0..k {
                                    let Some(ow) = tap(iw, v, spec, d.w_out) else { continue };
                                    ys[(co * d.h_out + oh) * d.w_out + ow] += xv * wc[u * k + v];
                                }
                            }
                        }
                    }
                }
            }
        });
    y
}

pub(crate) fn conv_t_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    d: Dims,
    spec: &ConvSpec,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<(Vec<T>, Vec<T>)>) {
    let k = spec.kernel;
    let in_len = d.c_in * d.h_in * d.w_in;
    let out_len = d.c_out * d.h_out * d.w_out;
    let w_len = d.c_in * d.c_out * k * k;

    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); d.batch * in_len];
        dx.par_chunks_mut(in_len.max(1))
            .enumerate()
            .for_each(|(s, dxs)| {
                let gs = &gy[s * out_len..(s + 1) * out_len];
                for ci in 0..d.c_in {
                    for ih in 0..d.h_in {
                        for iw in 0..d.w_in {
                            let mut acc = T::zero();
                            for co in 0..d.c_out {
                                let wc = &w[(ci * d.c_out + co) * k * k..];
                                for u in 0..k {
                                    let Some(oh) = tap(ih, u, spec, d.h_out) else { continue };
                                    for v in 0..k {
                                        let Some(ow) = tap(iw, v, spec, d.w_out) else { continue };
                                        acc += gs[(co * d.h_out + oh) * d.w_out + ow] * wc[u * k + v];
                                    }
                                }
                            }
                            dxs[(ci * d.h_in + ih) * d.w_in + iw] = acc;
                        }
                    }
                }
            });
        dx
    });

    let dwb = need_dw.then(|| {
        let partial: Vec<(Vec<T>, Vec<T>)> = (0..d.batch)
            .into_par_iter()
            .map(|s| {
                let xs = &x[s * in_len..(s + 1) * in_len];
                let gs = &gy[s * out_len..(s + 1) * out_len];
                let mut dw = vec![T::zero(); w_len];
                let mut db = vec![T::zero(); d.c_out];
                for co in 0..d.c_out {
                    db[co] = gs[co * d.h_out * d.w_out..(co + 1) * d.h_out * d.w_out]
                        .iter()
                        .fold(T::zero(), |a, &b| a + b);
                }
                for ci in 0..d.c_in {
                    for ih in 0..d.h_in {
                        for iw in 0..d.w_in {
                            let xv = xs[(ci * d.h_in + ih) * d.w_in + iw];
                            if xv == T::zero() {
                                continue;
                            }
                            for co in 0..d.c_out {
                                let base = (ci * d.c_out + co) * k * k;
                                for u in 0..k {
                                    let Some(oh) = tap(ih, u, spec, d.h_out) else { continue };
                                    for v in 0..k {
                                        let Some(ow) = tap(iw, v, spec, d.w_out) else { continue };
                                        dw[base + u * k + v] += xv * gs[(co * d.h_out + oh) * d.w_out + ow];
                                    }
                                }
                            }
                        }
                    }
                }
                (dw, db)
            })
            .collect();
        reduce_partials(partial, w_len, d.c_out)
    });
    (dx, dwb)
}
