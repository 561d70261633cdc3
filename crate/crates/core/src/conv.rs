//! Dense 3D convolution kernels on raw `(c, z, y, x)` buffers.
//!
//! Same-padded convolutions run on a zero-padded copy of the input: for each
//! of the `k³` kernel offsets the padded buffer, shifted by that offset, is a
//! plain strided matrix, so the convolution becomes `k³` accumulating sgemm
//! calls without an im2col buffer. Outputs are computed over the padded grid
//! and cropped.

use std::ops::Range;

use num_traits::Float;

/// Floating-point element type of the dense kernels.
pub trait Real: Float + Default + Send + Sync + std::fmt::Debug + 'static {
    /// `C ← α·A·B + β·C` on strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    unsafe fn gemm(m: usize, k: usize, n: usize, alpha: f32, a: *const f32, rsa: isize, csa: isize, b: *const f32, rsb: isize, csb: isize, beta: f32, c: *mut f32, rsc: isize, csc: isize) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: *const f64, rsa: isize, csa: isize, b: *const f64, rsb: isize, csb: isize, beta: f64, c: *mut f64, rsc: isize, csc: isize) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `(C, Z, Y, X)` shape of a dense buffer.
pub type Shape4 = [usize; 4];

/// Zero-padded geometry for a same-padded `k³` convolution.
struct Padded {
    dims: [usize; 3],
    r: usize,
    vox: usize,
    /// First and one-past-last padded flat index holding an interior voxel.
    span: Range<usize>,
}

impl Padded {
    fn new(shape: Shape4, k: usize) -> Self {
        let r = k / 2;
        let dims = [shape[1] + 2 * r, shape[2] + 2 * r, shape[3] + 2 * r];
        let vox = dims.iter().product();
        let first = (r * dims[1] + r) * dims[2] + r;
        let last = ((shape[1] - 1 + r) * dims[1] + shape[2] - 1 + r) * dims[2] + shape[3] - 1 + r;
        Self {
            dims,
            r,
            vox,
            span: first..last + 1,
        }
    }

    fn offset(&self, dz: usize, dy: usize, dx: usize) -> isize {
        let r = self.r as isize;
        ((dz as isize - r) * self.dims[1] as isize + dy as isize - r) * self.dims[2] as isize + dx as isize - r
    }

    fn pad<T: Real>(&self, data: &[T], shape: Shape4) -> Vec<T> {
        let [c_n, zn, yn, xn] = shape;
        let [pz, py, px] = self.dims;
        let r = self.r;
        let mut out = vec![T::zero(); c_n * self.vox];
        for c in 0..c_n {
            for z in 0..zn {
                for y in 0..yn {
                    let src = &data[((c * zn + z) * yn + y) * xn..][..xn];
                    out[((c * pz + z + r) * py + y + r) * px + r..][..xn].copy_from_slice(src);
                }
            }
        }
        out
    }

    fn crop<T: Real>(&self, padded: &[T], shape: Shape4) -> Vec<T> {
        let [c_n, zn, yn, xn] = shape;
        let [pz, py, px] = self.dims;
        let r = self.r;
        let mut out = Vec::with_capacity(c_n * zn * yn * xn);
        for c in 0..c_n {
            for z in 0..zn {
                for y in 0..yn {
                    out.extend_from_slice(&padded[((c * pz + z + r) * py + y + r) * px + r..][..xn]);
                }
            }
        }
        out
    }

    fn kernel_offsets(&self, k: usize) -> impl Iterator<Item = (usize, isize)> + '_ {
        (0..k * k * k).map(move |o| (o, self.offset(o / (k * k), (o / k) % k, o % k)))
    }
}

/// Same-padded stride-1 convolution. `weight` is `C_out × (C_in·k³)` in
/// `(c, z, y, x)` order; padding is zero. Returns `C_out × Z·Y·X`.
pub fn conv3d_forward<T: Real>(
    input: &[T],
    shape: Shape4,
    weight: &[T],
    c_out: usize,
    k: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let c_in = shape[0];
    let kk = k * k * k;
    assert_eq!(weight.len(), c_out * c_in * kk, "weight shape");
    assert_eq!(input.len(), shape.iter().product::<usize>(), "input shape");
    let geo = Padded::new(shape, k);
    let xp = geo.pad(input, shape);
    let mut out = vec![T::zero(); c_out * geo.vox];
    let n = geo.span.len();
    for (o, off) in geo.kernel_offsets(k) {
        unsafe {
            T::gemm(
                c_out,
                c_in,
                n,
                T::one(),
                weight.as_ptr().add(o),
                (c_in * kk) as isize,
                kk as isize,
                xp.as_ptr().offset(geo.span.start as isize + off),
                geo.vox as isize,
                1,
                T::one(),
                out.as_mut_ptr().add(geo.span.start),
                geo.vox as isize,
                1,
            );
        }
    }
    let mut out = geo.crop(&out, [c_out, shape[1], shape[2], shape[3]]);
    if let Some(b) = bias {
        let vox = shape[1] * shape[2] * shape[3];
        for (co, &bv) in b.iter().enumerate() {
            out[co * vox..(co + 1) * vox].iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    out
}

/// Gradients of [`conv3d_forward`]. Accumulates into `grad_w` (and
/// `grad_b`). When `input_channels` is given, returns the input gradient for
/// that channel range only (`len × Z·Y·X`).
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Real>(
    input: &[T],
    shape: Shape4,
    weight: &[T],
    c_out: usize,
    k: usize,
    grad_out: &[T],
    grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
    input_channels: Option<Range<usize>>,
) -> Option<Vec<T>> {
    let [c_in, zn, yn, xn] = shape;
    let kk = k * k * k;
    let vox = zn * yn * xn;
    if let Some(gb) = grad_b {
        for (co, g) in gb.iter_mut().enumerate() {
            *g = *g + T::of(grad_out[co * vox..(co + 1) * vox].iter().map(|&v| v.f64()).sum::<f64>());
        }
    }
    if grad_w.is_none() && input_channels.is_none() {
        return None;
    }
    let geo = Padded::new(shape, k);
    let n = geo.span.len();
    let gp = geo.pad(grad_out, [c_out, zn, yn, xn]);
    if let Some(gw) = grad_w {
        assert_eq!(gw.len(), c_out * c_in * kk);
        let xp = geo.pad(input, shape);
        for (o, off) in geo.kernel_offsets(k) {
            unsafe {
                T::gemm(
                    c_out,
                    n,
                    c_in,
                    T::one(),
                    gp.as_ptr().add(geo.span.start),
                    geo.vox as isize,
                    1,
                    xp.as_ptr().offset(geo.span.start as isize + off),
                    1,
                    geo.vox as isize,
                    T::one(),
                    gw.as_mut_ptr().add(o),
                    (c_in * kk) as isize,
                    kk as isize,
                );
            }
        }
    }
    let range = input_channels?;
    assert!(range.end <= c_in);
    let m = range.len();
    let mut gx = vec![T::zero(); m * geo.vox];
    if m > 0 {
        for (o, off) in geo.kernel_offsets(k) {
            unsafe {
                T::gemm(
                    m,
                    c_out,
                    n,
                    T::one(),
                    weight.as_ptr().add(range.start * kk + o),
                    kk as isize,
                    (c_in * kk) as isize,
                    gp.as_ptr().add(geo.span.start),
                    geo.vox as isize,
                    1,
                    T::one(),
                    gx.as_mut_ptr().offset(geo.span.start as isize + off),
                    geo.vox as isize,
                    1,
                );
            }
        }
    }
    Some(geo.crop(&gx, [m, zn, yn, xn]))
}

/// 2×2×2 stride-2 transposed convolution. `weight` is laid out
/// `[C_out][C_in][2][2][2]`. Output spatial extent doubles.
pub fn upconv2_forward<T: Real>(input: &[T], shape: Shape4, weight: &[T], c_out: usize, bias: &[T]) -> Vec<T> {
    let [c_in, zn, yn, xn] = shape;
    let n = zn * yn * xn;
    assert_eq!(weight.len(), c_out * c_in * 8);
    let (oz, oy, ox) = (2 * zn, 2 * yn, 2 * xn);
    let ovox = oz * oy * ox;
    let mut out = vec![T::zero(); c_out * ovox];
    let mut tmp = vec![T::zero(); c_out * n];
    for o in 0..8 {
        let (a, b, c) = (o >> 2, (o >> 1) & 1, o & 1);
        unsafe {
            T::gemm(
                c_out,
                c_in,
                n,
                T::one(),
                weight.as_ptr().add(o),
                (c_in * 8) as isize,
                8,
                input.as_ptr(),
                n as isize,
                1,
                T::zero(),
                tmp.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        for co in 0..c_out {
            let t = &tmp[co * n..(co + 1) * n];
            let dst = &mut out[co * ovox..(co + 1) * ovox];
            let bv = bias[co];
            for z in 0..zn {
                for y in 0..yn {
                    let base = ((2 * z + a) * oy + 2 * y + b) * ox + c;
                    let src = &t[(z * yn + y) * xn..][..xn];
                    for (x, &v) in src.iter().enumerate() {
                        dst[base + 2 * x] = v + bv;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`upconv2_forward`]; accumulates into `grad_w`/`grad_b`.
#[allow(clippy::too_many_arguments)]
pub fn upconv2_backward<T: Real>(
    input: &[T],
    shape: Shape4,
    weight: &[T],
    c_out: usize,
    grad_out: &[T],
    grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
    need_input: bool,
) -> Option<Vec<T>> {
    let [c_in, zn, yn, xn] = shape;
    let n = zn * yn * xn;
    let (oy, ox) = (2 * yn, 2 * xn);
    let ovox = 2 * zn * oy * ox;
    if let Some(gb) = grad_b {
        for (co, g) in gb.iter_mut().enumerate() {
            *g = *g + T::of(grad_out[co * ovox..(co + 1) * ovox].iter().map(|&v| v.f64()).sum::<f64>());
        }
    }
    let grad_w_ptr = grad_w.map(|g| g.as_mut_ptr());
    let mut grad_in = need_input.then(|| vec![T::zero(); input.len()]);
    if grad_w_ptr.is_none() && grad_in.is_none() {
        return None;
    }
    let mut gathered = vec![T::zero(); c_out * n];
    for o in 0..8 {
        let (a, b, c) = (o >> 2, (o >> 1) & 1, o & 1);
        for co in 0..c_out {
            let src = &grad_out[co * ovox..(co + 1) * ovox];
            let g = &mut gathered[co * n..(co + 1) * n];
            for z in 0..zn {
                for y in 0..yn {
                    let base = ((2 * z + a) * oy + 2 * y + b) * ox + c;
                    let d = &mut g[(z * yn + y) * xn..][..xn];
                    for (x, slot) in d.iter_mut().enumerate() {
                        *slot = src[base + 2 * x];
                    }
                }
            }
        }
        if let Some(gw) = grad_w_ptr {
            unsafe {
                T::gemm(
                    c_out,
                    n,
                    c_in,
                    T::one(),
                    gathered.as_ptr(),
                    n as isize,
                    1,
                    input.as_ptr(),
                    1,
                    n as isize,
                    T::one(),
                    gw.add(o),
                    (c_in * 8) as isize,
                    8,
                );
            }
        }
        if let Some(gi) = grad_in.as_mut() {
            unsafe {
                T::gemm(
                    c_in,
                    c_out,
                    n,
                    T::one(),
                    weight.as_ptr().add(o),
                    8,
                    (c_in * 8) as isize,
                    gathered.as_ptr(),
                    n as isize,
                    1,
                    T::one(),
                    gi.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    }
    grad_in
}

/// 2×2×2 stride-2 max pooling (floor). Returns the pooled buffer and, per
/// output element, the flat input index of its maximum (first wins on ties).
pub fn maxpool2_forward<T: Real>(input: &[T], shape: Shape4) -> (Vec<T>, Vec<u32>, Shape4) {
    let [c_n, zn, yn, xn] = shape;
    let (oz, oy, ox) = (zn / 2, yn / 2, xn / 2);
    let mut out = Vec::with_capacity(c_n * oz * oy * ox);
    let mut arg = Vec::with_capacity(out.capacity());
    for c in 0..c_n {
        let base = c * zn * yn * xn;
        for z in 0..oz {
            for y in 0..oy {
                for x in 0..ox {
                    let mut best = T::neg_infinity();
                    let mut at = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = base + ((2 * z + dz) * yn + 2 * y + dy) * xn + 2 * x + dx;
                                if input[i] > best {
                                    best = input[i];
                                    at = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(at as u32);
                }
            }
        }
    }
    (out, arg, [c_n, oz, oy, ox])
}

pub fn maxpool2_backward<T: Real>(grad_out: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut g = vec![T::zero(); input_len];
    for (&go, &i) in grad_out.iter().zip(argmax) {
        g[i as usize] = g[i as usize] + go;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    fn direct_conv(input: &[f32], shape: Shape4, w: &[f32], c_out: usize, k: usize) -> Vec<f32> {
        let [c_in, zn, yn, xn] = shape;
        let r = (k / 2) as isize;
        let mut out = vec![0f32; c_out * zn * yn * xn];
        for co in 0..c_out {
            for z in 0..zn {
                for y in 0..yn {
                    for x in 0..xn {
                        let mut acc = 0f64;
                        for ci in 0..c_in {
                            for dz in 0..k {
                                for dy in 0..k {
                                    for dx in 0..k {
                                        let (sz, sy, sx) = (
                                            z as isize + dz as isize - r,
                                            y as isize + dy as isize - r,
                                            x as isize + dx as isize - r,
                                        );
                                        if sz < 0 || sy < 0 || sx < 0 || sz >= zn as isize || sy >= yn as isize || sx >= xn as isize {
                                            continue;
                                        }
                                        let wi = (((co * c_in + ci) * k + dz) * k + dy) * k + dx;
                                        let ii = ((ci * zn + sz as usize) * yn + sy as usize) * xn + sx as usize;
                                        acc += w[wi] as f64 * input[ii] as f64;
                                    }
                                }
                            }
                        }
                        out[((co * zn + z) * yn + y) * xn + x] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (shape, c_out, k) in [([2, 5, 4, 6], 3, 3), ([1, 3, 3, 3], 2, 1), ([3, 4, 7, 5], 2, 5)] {
            let n: usize = shape.iter().product();
            let input = rand_vec(&mut rng, n);
            let w = rand_vec(&mut rng, c_out * shape[0] * k * k * k);
            let got = conv3d_forward(&input, shape, &w, c_out, k, None);
            let want = direct_conv(&input, shape, &w, c_out, k);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    /// `<A x, y> == <x, A^T y>` for the conv, upconv and pooling adjoints.
    #[test]
    fn backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = [2, 4, 6, 4];
        let n: usize = shape.iter().product();
        let x = rand_vec(&mut rng, n);
        let w = rand_vec(&mut rng, 3 * 2 * 27);
        let y = rand_vec(&mut rng, 3 * 96);
        let ax = conv3d_forward(&x, shape, &w, 3, 3, None);
        let aty = conv3d_backward(&x, shape, &w, 3, 3, &y, None, None, Some(0..2)).unwrap();
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
        let tail = conv3d_backward(&x, shape, &w, 3, 3, &y, None, None, Some(1..2)).unwrap();
        assert_eq!(tail.as_slice(), &aty[96..]);

        // weight gradient: d<conv(x;w), y>/dw = conv_backward grad_w
        let mut gw = vec![0f32; w.len()];
        conv3d_backward(&x, shape, &w, 3, 3, &y, Some(&mut gw), None, None);
        let lhs2: f64 = gw.iter().zip(&w).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs2 - lhs).abs() < 1e-3);

        let wu = rand_vec(&mut rng, 3 * 2 * 8);
        let zero = vec![0f32; 3];
        let ux = upconv2_forward(&x, shape, &wu, 3, &zero);
        let yu = rand_vec(&mut rng, ux.len());
        let uty = upconv2_backward(&x, shape, &wu, 3, &yu, None, None, true).unwrap();
        let lhs: f64 = ux.iter().zip(&yu).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.iter().zip(&uty).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-3);
        let mut guw = vec![0f32; wu.len()];
        upconv2_backward(&x, shape, &wu, 3, &yu, Some(&mut guw), None, false);
        let lhs2: f64 = guw.iter().zip(&wu).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs2 - lhs).abs() < 1e-3);
    }

    #[test]
    fn pooling_halves_and_routes_gradient() {
        let input: Vec<f32> = (0..2 * 4 * 4 * 5).map(|i| ((i * 37) % 23) as f32).collect();
        let (out, arg, s) = maxpool2_forward(&input, [2, 4, 4, 5]);
        assert_eq!(s, [2, 2, 2, 2]);
        for (o, &i) in out.iter().zip(&arg) {
            assert_eq!(*o, input[i as usize]);
        }
        let g = maxpool2_backward(&vec![1.0; out.len()], &arg, input.len());
        assert_eq!(g.iter().sum::<f32>(), out.len() as f32);
    }
}
