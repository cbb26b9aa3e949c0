//! Dense kernels on channel-major feature maps: same-size 2-D convolution,
//! 2x2 average pooling and nearest-neighbour upsampling, each with its
//! reverse-mode counterpart.

use super::{Padding, Real};

/// A `k x k` convolution from `in_ch` to `out_ch` channels, stride 1, output
/// the same size as the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            weight: vec![T::zero(); out_ch * in_ch * kernel * kernel],
            bias: vec![T::zero(); out_ch],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn radius(&self) -> usize {
        self.kernel / 2
    }

    /// Pads `input` (`in_ch x h x w`) by the kernel radius.
    pub fn pad(&self, input: &[T], h: usize, w: usize, padding: Padding) -> Vec<T> {
        pad(input, self.in_ch, h, w, self.radius(), padding)
    }

    /// Convolution of an already padded input.
    pub fn forward_padded(&self, padded: &[T], h: usize, w: usize) -> Vec<T> {
        let k = self.kernel;
        let pw = w + 2 * self.radius();
        let ph = h + 2 * self.radius();
        let mut out = vec![T::zero(); self.out_ch * h * w];
        for (o, out_plane) in out.chunks_exact_mut(h * w).enumerate() {
            out_plane.fill(self.bias[o]);
            for i in 0..self.in_ch {
                let plane = &padded[i * ph * pw..(i + 1) * ph * pw];
                let taps =
                    &self.weight[(o * self.in_ch + i) * k * k..(o * self.in_ch + i + 1) * k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = taps[ky * k + kx];
                        for y in 0..h {
                            let src = &plane[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                            let dst = &mut out_plane[y * w..(y + 1) * w];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `dw`, `db` and returns the
    /// gradient with respect to the padded input when `want_input` is set.
    pub fn backward_padded(
        &self,
        padded: &[T],
        grad_out: &[T],
        h: usize,
        w: usize,
        dw: &mut [T],
        db: &mut [T],
        want_input: bool,
    ) -> Option<Vec<T>> {
        let k = self.kernel;
        let pw = w + 2 * self.radius();
        let ph = h + 2 * self.radius();
        let mut dpad = want_input.then(|| vec![T::zero(); self.in_ch * ph * pw]);
        for (o, g_plane) in grad_out.chunks_exact(h * w).enumerate() {
            db[o] += g_plane.iter().fold(T::zero(), |acc, &g| acc + g);
            for i in 0..self.in_ch {
                let plane = &padded[i * ph * pw..(i + 1) * ph * pw];
                let base = (o * self.in_ch + i) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = T::zero();
                        for y in 0..h {
                            let src = &plane[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                            let g = &g_plane[y * w..(y + 1) * w];
                            for (&s, &gv) in src.iter().zip(g) {
                                acc += s * gv;
                            }
                        }
                        dw[base + ky * k + kx] += acc;
                        if let Some(dpad) = dpad.as_mut() {
                            let wv = self.weight[base + ky * k + kx];
                            let dplane = &mut dpad[i * ph * pw..(i + 1) * ph * pw];
                            for y in 0..h {
                                let dst = &mut dplane[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                                let g = &g_plane[y * w..(y + 1) * w];
                                for (d, &gv) in dst.iter_mut().zip(g) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        dpad
    }

    /// Folds a padded-input gradient back onto the unpadded input.
    pub fn unpad_grad(&self, dpad: &[T], h: usize, w: usize, padding: Padding) -> Vec<T> {
        unpad_grad(dpad, self.in_ch, h, w, self.radius(), padding)
    }
}

pub fn pad<T: Real>(
    input: &[T],
    ch: usize,
    h: usize,
    w: usize,
    r: usize,
    padding: Padding,
) -> Vec<T> {
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut out = vec![T::zero(); ch * ph * pw];
    for c in 0..ch {
        let src = &input[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * ph * pw..(c + 1) * ph * pw];
        match padding {
            Padding::Zero => {
                for y in 0..h {
                    dst[(y + r) * pw + r..(y + r) * pw + r + w]
                        .copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
            Padding::Periodic => {
                for py in 0..ph {
                    let y = (py + h * r - r) % h;
                    for px in 0..pw {
                        let x = (px + w * r - r) % w;
                        dst[py * pw + px] = src[y * w + x];
                    }
                }
            }
        }
    }
    out
}

pub fn unpad_grad<T: Real>(
    dpad: &[T],
    ch: usize,
    h: usize,
    w: usize,
    r: usize,
    padding: Padding,
) -> Vec<T> {
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut out = vec![T::zero(); ch * h * w];
    for c in 0..ch {
        let src = &dpad[c * ph * pw..(c + 1) * ph * pw];
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        match padding {
            Padding::Zero => {
                for y in 0..h {
                    dst[y * w..(y + 1) * w]
                        .copy_from_slice(&src[(y + r) * pw + r..(y + r) * pw + r + w]);
                }
            }
            Padding::Periodic => {
                for py in 0..ph {
                    let y = (py + h * r - r) % h;
                    for px in 0..pw {
                        let x = (px + w * r - r) % w;
                        dst[y * w + x] += src[py * pw + px];
                    }
                }
            }
        }
    }
    out
}

/// 2x2 mean pooling; `h` and `w` must be even.
pub fn avg_pool<T: Real>(input: &[T], ch: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); ch * oh * ow];
    for c in 0..ch {
        let src = &input[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * w + 2 * x;
                dst[y * ow + x] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Real>(grad_out: &[T], ch: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); ch * h * w];
    for c in 0..ch {
        let g = &grad_out[c * oh * ow..(c + 1) * oh * ow];
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = g[(y / 2) * ow + x / 2] * quarter;
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of a `ch x h x w` map.
pub fn upsample<T: Real>(input: &[T], ch: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); ch * oh * ow];
    for c in 0..ch {
        let src = &input[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

/// Gradient of [`upsample`]; `h`, `w` are the small (input) dimensions.
pub fn upsample_backward<T: Real>(grad_out: &[T], ch: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); ch * h * w];
    for c in 0..ch {
        let g = &grad_out[c * oh * ow..(c + 1) * oh * ow];
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += g[y * ow + x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct definition with bounds checks, independent of the padded path.
    fn conv_reference(layer: &Conv2d<f64>, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let r = (layer.kernel / 2) as isize;
        let k = layer.kernel;
        let mut out = vec![0.0; layer.out_ch * h * w];
        for o in 0..layer.out_ch {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = layer.bias[o];
                    for i in 0..layer.in_ch {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let (sy, sx) = (y + ky - r, x + kx - r);
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += layer.weight[((o * layer.in_ch + i) * k + ky as usize)
                                        * k
                                        + kx as usize]
                                        * input[(i * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    out[(o * h + y as usize) * w + x as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut layer = Conv2d::<f64>::zeros(2, 3, 3);
        layer.weight = random(layer.weight.len(), 1);
        layer.bias = random(3, 2);
        let input = random(2 * 5 * 6, 3);
        let padded = layer.pad(&input, 5, 6, Padding::Zero);
        let out = layer.forward_padded(&padded, 5, 6);
        let reference = conv_reference(&layer, &input, 5, 6);
        for (a, b) in out.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for padding in [Padding::Zero, Padding::Periodic] {
            let mut layer = Conv2d::<f64>::zeros(2, 2, 3);
            layer.weight = random(layer.weight.len(), 4);
            layer.bias = random(2, 5);
            let (h, w) = (4, 5);
            let input = random(2 * h * w, 6);
            let upstream = random(2 * h * w, 7);
            let loss = |l: &Conv2d<f64>, x: &[f64]| {
                let out = l.forward_padded(&l.pad(x, h, w, padding), h, w);
                out.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
            };
            let padded = layer.pad(&input, h, w, padding);
            let mut dw = vec![0.0; layer.weight.len()];
            let mut db = vec![0.0; 2];
            let dpad = layer
                .backward_padded(&padded, &upstream, h, w, &mut dw, &mut db, true)
                .unwrap();
            let dx = layer.unpad_grad(&dpad, h, w, padding);
            let eps = 1e-6;
            for j in 0..layer.weight.len() {
                let (mut p, mut m) = (layer.clone(), layer.clone());
                p.weight[j] += eps;
                m.weight[j] -= eps;
                let fd = (loss(&p, &input) - loss(&m, &input)) / (2.0 * eps);
                assert!((fd - dw[j]).abs() < 1e-7);
            }
            for j in 0..input.len() {
                let (mut p, mut m) = (input.clone(), input.clone());
                p[j] += eps;
                m[j] -= eps;
                let fd = (loss(&layer, &p) - loss(&layer, &m)) / (2.0 * eps);
                assert!((fd - dx[j]).abs() < 1e-7, "{padding:?} {j}");
            }
            let fd_b = upstream[..h * w].iter().sum::<f64>();
            assert!((db[0] - fd_b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let x = random(2 * 4 * 6, 8);
        let y = random(2 * 2 * 3, 9);
        // <pool(x), y> = <x, pool^T(y)>
        let lhs: f64 = avg_pool(&x, 2, 4, 6)
            .iter()
            .zip(&y)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .iter()
            .zip(avg_pool_backward(&y, 2, 4, 6))
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs: f64 = upsample(&y, 2, 2, 3)
            .iter()
            .zip(&x)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = y
            .iter()
            .zip(upsample_backward(&x, 2, 2, 3))
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
