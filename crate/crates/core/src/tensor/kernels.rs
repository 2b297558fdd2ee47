//! Raw slice kernels behind the differentiable operators.
//!
//! All loops run in a fixed order so results are bitwise reproducible.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Valid `ox` range for kernel column `kx` and the matching input start
    /// column, for stride 1.
    #[inline]
    fn col_span(&self, kx: usize) -> (usize, usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.ow);
        let ix0 = lo + kx - self.pad;
        (lo, hi.max(lo), ix0)
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    #[inline]
    fn in_col(&self, ox: usize, kx: usize) -> Option<usize> {
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        (ix >= 0 && (ix as usize) < self.w).then_some(ix as usize)
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T], out: &mut [T]) {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let kk = g.kh * g.kw;
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let out_plane = &mut out[(b * g.out_ch + o) * ohw..][..ohw];
            for c in 0..g.in_ch {
                let in_plane = &input[(b * g.in_ch + c) * hw..][..hw];
                let wk = &kernel[(o * g.in_ch + c) * kk..][..kk];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let out_row = &mut out_plane[oy * g.ow..][..g.ow];
                            let in_row = &in_plane[iy * g.w..][..g.w];
                            if g.stride == 1 {
                                let (lo, hi, ix0) = g.col_span(kx);
                                for (o_v, &i_v) in
                                    out_row[lo..hi].iter_mut().zip(&in_row[ix0..ix0 + hi - lo])
                                {
                                    *o_v += wv * i_v;
                                }
                            } else {
                                for (ox, o_v) in out_row.iter_mut().enumerate() {
                                    if let Some(ix) = g.in_col(ox, kx) {
                                        *o_v += wv * in_row[ix];
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

/// Accumulates the input adjoint of a convolution into `grad_in`.
pub fn conv2d_backward_input<T: Scalar>(
    g: &ConvGeom,
    grad_out: &[T],
    kernel: &[T],
    grad_in: &mut [T],
) {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let kk = g.kh * g.kw;
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let g_plane = &grad_out[(b * g.out_ch + o) * ohw..][..ohw];
            for c in 0..g.in_ch {
                let gi_plane = &mut grad_in[(b * g.in_ch + c) * hw..][..hw];
                let wk = &kernel[(o * g.in_ch + c) * kk..][..kk];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let g_row = &g_plane[oy * g.ow..][..g.ow];
                            let gi_row = &mut gi_plane[iy * g.w..][..g.w];
                            if g.stride == 1 {
                                let (lo, hi, ix0) = g.col_span(kx);
                                for (gi, &gv) in
                                    gi_row[ix0..ix0 + hi - lo].iter_mut().zip(&g_row[lo..hi])
                                {
                                    *gi += wv * gv;
                                }
                            } else {
                                for (ox, &gv) in g_row.iter().enumerate() {
                                    if let Some(ix) = g.in_col(ox, kx) {
                                        gi_row[ix] += wv * gv;
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

/// Accumulates the kernel adjoint of a convolution into `grad_k`.
pub fn conv2d_backward_kernel<T: Scalar>(
    g: &ConvGeom,
    grad_out: &[T],
    input: &[T],
    grad_k: &mut [T],
) {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let kk = g.kh * g.kw;
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let g_plane = &grad_out[(b * g.out_ch + o) * ohw..][..ohw];
            for c in 0..g.in_ch {
                let in_plane = &input[(b * g.in_ch + c) * hw..][..hw];
                let gk = &mut grad_k[(o * g.in_ch + c) * kk..][..kk];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let mut acc = T::zero();
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let g_row = &g_plane[oy * g.ow..][..g.ow];
                            let in_row = &in_plane[iy * g.w..][..g.w];
                            if g.stride == 1 {
                                let (lo, hi, ix0) = g.col_span(kx);
                                acc += g_row[lo..hi]
                                    .iter()
                                    .zip(&in_row[ix0..ix0 + hi - lo])
                                    .fold(T::zero(), |s, (&a, &b)| s + a * b);
                            } else {
                                for (ox, &gv) in g_row.iter().enumerate() {
                                    if let Some(ix) = g.in_col(ox, kx) {
                                        acc += gv * in_row[ix];
                                    }
                                }
                            }
                        }
                        gk[ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`.
pub fn matmul_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let out_row = &mut out[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(&b[p * n..][..n]) {
                *o += av * bv;
            }
        }
    }
}

pub fn transpose<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Flat-index map from a tensor of `shape` to the tensor with `axes`
/// removed (the reduction target).
pub fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    // Output stride contributed by each input axis (zero for reduced axes).
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        if !axes.contains(&i) {
            strides[i] = acc;
            acc *= shape[i];
        }
    }
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    (map, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_map_spatial() {
        let (map, out) = reduction_map(&[2, 3, 2, 2], &[2, 3]);
        assert_eq!(out, vec![2, 3]);
        for (i, &m) in map.iter().enumerate() {
            assert_eq!(m, i / 4);
        }
        let (map, out) = reduction_map(&[2, 3], &[0]);
        assert_eq!(out, vec![3]);
        assert_eq!(map, vec![0, 1, 2, 0, 1, 2]);
        let (map, out) = reduction_map(&[2, 3], &[0, 1]);
        assert!(out.is_empty());
        assert_eq!(map, vec![0; 6]);
    }
}
