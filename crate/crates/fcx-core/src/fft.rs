//! 2-D FFT over a token grid with a channel vector per grid point.
//!
//! Buffers are planar re/im with layout `(h, w, d)`: the innermost `d` axis is
//! the embedding, so each butterfly operates on a contiguous chunk and the
//! spectrum exposes one contiguous `d`-vector per mode. Power-of-two lines use
//! iterative radix-2; anything else falls back to the O(n^2) DFT. Both
//! directions are scaled by `1/sqrt(h*w)` so the transform is unitary, which
//! keeps the adjoint used in backprop equal to the inverse.

use alloc::vec;

use crate::real::Real;

/// In-place 2-D transform of `(h, w, d)` planar complex data.
pub fn fft2<F: Real>(re: &mut [F], im: &mut [F], h: usize, w: usize, d: usize, inverse: bool) {
    debug_assert_eq!(re.len(), h * w * d);
    debug_assert_eq!(im.len(), h * w * d);
    let mut scratch_re = vec![F::zero(); h.max(w) * d];
    let mut scratch_im = vec![F::zero(); h.max(w) * d];

    // Rows: each row is already contiguous.
    for r in 0..h {
        let s = r * w * d;
        let e = s + w * d;
        transform_line(&mut re[s..e], &mut im[s..e], w, d, inverse, &mut scratch_re, &mut scratch_im);
    }
    // Columns: gather a column (stride w chunks) into scratch, transform, scatter.
    let mut col_re = vec![F::zero(); h * d];
    let mut col_im = vec![F::zero(); h * d];
    for c in 0..w {
        for r in 0..h {
            let src = (r * w + c) * d;
            col_re[r * d..(r + 1) * d].copy_from_slice(&re[src..src + d]);
            col_im[r * d..(r + 1) * d].copy_from_slice(&im[src..src + d]);
        }
        transform_line(&mut col_re, &mut col_im, h, d, inverse, &mut scratch_re, &mut scratch_im);
        for r in 0..h {
            let dst = (r * w + c) * d;
            re[dst..dst + d].copy_from_slice(&col_re[r * d..(r + 1) * d]);
            im[dst..dst + d].copy_from_slice(&col_im[r * d..(r + 1) * d]);
        }
    }
    // Unitary normalization, shared by both directions.
    let scale = F::of(1.0 / libm::sqrt((h * w) as f64));
    for v in re.iter_mut() {
        *v = *v * scale;
    }
    for v in im.iter_mut() {
        *v = *v * scale;
    }
}

/// Unnormalized 1-D transform of `n` contiguous chunks of width `d`.
fn transform_line<F: Real>(
    re: &mut [F],
    im: &mut [F],
    n: usize,
    d: usize,
    inverse: bool,
    scratch_re: &mut [F],
    scratch_im: &mut [F],
) {
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(re, im, n, d, inverse);
    } else {
        dft(re, im, n, d, inverse, scratch_re, scratch_im);
    }
}

fn twiddle<F: Real>(j: usize, n: usize, inverse: bool) -> (F, F) {
    let sign = if inverse { 1.0 } else { -1.0 };
    let ang = sign * 2.0 * core::f64::consts::PI * j as f64 / n as f64;
    (F::of(libm::cos(ang)), F::of(libm::sin(ang)))
}

fn radix2<F: Real>(re: &mut [F], im: &mut [F], n: usize, d: usize, inverse: bool) {
    // Bit-reversal permutation of chunks.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if i < j {
            for e in 0..d {
                re.swap(i * d + e, j * d + e);
                im.swap(i * d + e, j * d + e);
            }
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for j in 0..half {
            let (wr, wi) = twiddle::<F>(j, len, inverse);
            let mut start = 0;
            while start < n {
                let a = (start + j) * d;
                let b = (start + j + half) * d;
                for e in 0..d {
                    let br = re[b + e];
                    let bi = im[b + e];
                    let tr = wr * br - wi * bi;
                    let ti = wr * bi + wi * br;
                    let ar = re[a + e];
                    let ai = im[a + e];
                    re[b + e] = ar - tr;
                    im[b + e] = ai - ti;
                    re[a + e] = ar + tr;
                    im[a + e] = ai + ti;
                }
                start += len;
            }
        }
        len *= 2;
    }
}

fn dft<F: Real>(
    re: &mut [F],
    im: &mut [F],
    n: usize,
    d: usize,
    inverse: bool,
    scratch_re: &mut [F],
    scratch_im: &mut [F],
) {
    let out_re = &mut scratch_re[..n * d];
    let out_im = &mut scratch_im[..n * d];
    out_re.iter_mut().for_each(|v| *v = F::zero());
    out_im.iter_mut().for_each(|v| *v = F::zero());
    for k in 0..n {
        for t in 0..n {
            let (wr, wi) = twiddle::<F>((k * t) % n, n, inverse);
            for e in 0..d {
                let xr = re[t * d + e];
                let xi = im[t * d + e];
                out_re[k * d + e] = out_re[k * d + e] + wr * xr - wi * xi;
                out_im[k * d + e] = out_im[k * d + e] + wr * xi + wi * xr;
            }
        }
    }
    re[..n * d].copy_from_slice(out_re);
    im[..n * d].copy_from_slice(out_im);
}
