//! im2col / col2im lowering of 2-D convolution to matrix multiplication.

use super::array::Scalar;

/// Geometry of a grouped 2-D convolution over NCHW tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    /// (top, bottom, left, right)
    pub pad: (usize, usize, usize, usize),
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvGeom {
            stride: (stride, stride),
            pad: (pad, pad, pad, pad),
            groups: 1,
        }
    }

    /// "same" padding for stride 1; an even kernel puts the extra row/column
    /// at the bottom/right.
    pub fn same(kh: usize, kw: usize) -> Self {
        ConvGeom {
            stride: (1, 1),
            pad: ((kh - 1) / 2, kh / 2, (kw - 1) / 2, kw / 2),
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let (pt, pb, pl, pr) = self.pad;
        let hp = h + pt + pb;
        let wp = w + pl + pr;
        if hp < kh || wp < kw {
            return None;
        }
        Some(((hp - kh) / self.stride.0 + 1, (wp - kw) / self.stride.1 + 1))
    }
}

/// Shape bookkeeping for one conv call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }
    pub fn out_hw(&self) -> usize {
        self.ho * self.wo
    }
}

/// Fill `cols` ([cg*kh*kw, nb*ho*wo]) with patches of channels
/// `c0..c0+cg` from samples `n0..n0+nb` of `x` ([N, C, H, W]).
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    d: &ConvDims,
    geom: &ConvGeom,
    n0: usize,
    nb: usize,
    c0: usize,
    cg: usize,
    cols: &mut [T],
) {
    let (sh, sw) = geom.stride;
    let (pt, _, pl, _) = geom.pad;
    let ohw = d.out_hw();
    let ncols = nb * ohw;
    for c in 0..cg {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let r = (c * d.kh + ki) * d.kw + kj;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for nl in 0..nb {
                    let plane = &x[((n0 + nl) * d.c + c0 + c) * d.hw()..][..d.hw()];
                    let dst = &mut row[nl * ohw..(nl + 1) * ohw];
                    for oh in 0..d.ho {
                        let ih = (oh * sh + ki) as isize - pt as isize;
                        let out_row = &mut dst[oh * d.wo..(oh + 1) * d.wo];
                        if ih < 0 || ih >= d.h as isize {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                        for (ow, v) in out_row.iter_mut().enumerate() {
                            let iw = (ow * sw + kj) as isize - pl as isize;
                            *v = if iw < 0 || iw >= d.w as isize {
                                T::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add `cols` back into `dx`, the adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    d: &ConvDims,
    geom: &ConvGeom,
    n0: usize,
    nb: usize,
    c0: usize,
    cg: usize,
    dx: &mut [T],
) {
    let (sh, sw) = geom.stride;
    let (pt, _, pl, _) = geom.pad;
    let ohw = d.out_hw();
    let ncols = nb * ohw;
    for c in 0..cg {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let r = (c * d.kh + ki) * d.kw + kj;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for nl in 0..nb {
                    let plane = &mut dx[((n0 + nl) * d.c + c0 + c) * d.hw()..][..d.hw()];
                    let src = &row[nl * ohw..(nl + 1) * ohw];
                    for oh in 0..d.ho {
                        let ih = (oh * sh + ki) as isize - pt as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                        for ow in 0..d.wo {
                            let iw = (ow * sw + kj) as isize - pl as isize;
                            if iw >= 0 && iw < d.w as isize {
                                dst[iw as usize] = dst[iw as usize] + src[oh * d.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Number of samples per im2col chunk so the column buffer stays bounded.
pub(crate) fn chunk_size(rows: usize, out_hw: usize, n: usize) -> usize {
    const MAX_ELEMS: usize = 1 << 22;
    (MAX_ELEMS / (rows * out_hw).max(1)).clamp(1, n.max(1))
}
