//! Minimal CPU layers with hand-written backward passes.
//!
//! Convolutions go through im2col and a single `dgemm`, which is where
//! nearly all of the training time is spent.

use rand::Rng;

use crate::types::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Reflect,
}

/// Square-kernel 2-D convolution with `kernel / 2` padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    /// Row-major `(out, in, kernel, kernel)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients for one [`Conv2d`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrad {
    pub fn add_assign(&mut self, other: &ConvGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: Padding) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// Fan-in scaled uniform weights, zero bias.
    pub fn init_uniform<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, stride, padding);
        let bound = (6.0 / (in_channels * kernel * kernel) as f64).sqrt();
        for w in &mut conv.weight {
            *w = rng.random_range(-bound..bound);
        }
        conv
    }

    pub fn zero_grad(&self) -> ConvGrad {
        ConvGrad { weight: vec![0.0; self.weight.len()], bias: vec![0.0; self.bias.len()] }
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        (height.div_ceil(self.stride), width.div_ceil(self.stride))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn im2col(&self, input: &Tensor3) -> Vec<f64> {
        let (c, h, w) = input.shape();
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let p = ho * wo;
        let mut col = vec![0.0; c * k * k * p];
        for ci in 0..c {
            let src = input.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        let Some(iy) = self.resolve(iy, h) else { continue };
                        for ox in 0..wo {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if let Some(ix) = self.resolve(ix, w) {
                                row[oy * wo + ox] = src[iy * w + ix];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], channels: usize, h: usize, w: usize) -> Tensor3 {
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let p = ho * wo;
        let mut out = Tensor3::zeros(channels, h, w);
        for ci in 0..channels {
            let dst = out.channel_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        let Some(iy) = self.resolve(iy, h) else { continue };
                        for ox in 0..wo {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if let Some(ix) = self.resolve(ix, w) {
                                dst[iy * w + ix] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[inline]
    fn resolve(&self, i: isize, n: usize) -> Option<usize> {
        if i >= 0 && (i as usize) < n {
            return Some(i as usize);
        }
        match self.padding {
            Padding::Zero => None,
            Padding::Reflect => {
                if n == 1 {
                    return Some(0);
                }
                let r = if i < 0 { -i } else { 2 * (n as isize - 1) - i };
                Some(r.clamp(0, n as isize - 1) as usize)
            }
        }
    }

    /// Returns the output and the im2col buffer needed by [`Conv2d::backward`].
    pub fn forward(&self, input: &Tensor3) -> (Tensor3, Vec<f64>) {
        assert_eq!(input.channels(), self.in_channels, "conv input channels");
        let (h, w) = (input.height(), input.width());
        let (ho, wo) = self.output_size(h, w);
        let p = ho * wo;
        let kk = self.in_channels * self.kernel * self.kernel;
        let col = if self.is_pointwise() { Vec::new() } else { self.im2col(input) };
        let b: &[f64] = if self.is_pointwise() { input.data() } else { &col };
        let mut out = Tensor3::zeros(self.out_channels, ho, wo);
        for (o, bias) in self.bias.iter().enumerate() {
            out.channel_mut(o).fill(*bias);
        }
        unsafe {
            matrixmultiply::dgemm(
                self.out_channels,
                kk,
                p,
                1.0,
                self.weight.as_ptr(),
                kk as isize,
                1,
                b.as_ptr(),
                p as isize,
                1,
                1.0,
                out.data_mut().as_mut_ptr(),
                p as isize,
                1,
            );
        }
        (out, col)
    }

    /// Accumulates parameter gradients into `grad`; returns the input
    /// gradient when `need_input` is set.
    pub fn backward(
        &self,
        input: &Tensor3,
        col: &[f64],
        grad_out: &Tensor3,
        grad: &mut ConvGrad,
        need_input: bool,
    ) -> Option<Tensor3> {
        let (h, w) = (input.height(), input.width());
        let p = grad_out.plane();
        let kk = self.in_channels * self.kernel * self.kernel;
        let b: &[f64] = if self.is_pointwise() { input.data() } else { col };
        let go = grad_out.data();
        for (o, gb) in grad.bias.iter_mut().enumerate() {
            *gb += go[o * p..(o + 1) * p].iter().sum::<f64>();
        }
        unsafe {
            // dW += dOut · colᵀ
            matrixmultiply::dgemm(
                self.out_channels,
                p,
                kk,
                1.0,
                go.as_ptr(),
                p as isize,
                1,
                b.as_ptr(),
                1,
                p as isize,
                1.0,
                grad.weight.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
        if !need_input {
            return None;
        }
        let mut dcol = vec![0.0; kk * p];
        unsafe {
            // dcol = Wᵀ · dOut
            matrixmultiply::dgemm(
                kk,
                self.out_channels,
                p,
                1.0,
                self.weight.as_ptr(),
                1,
                kk as isize,
                go.as_ptr(),
                p as isize,
                1,
                0.0,
                dcol.as_mut_ptr(),
                p as isize,
                1,
            );
        }
        if self.is_pointwise() {
            Some(Tensor3::from_vec(self.in_channels, h, w, dcol).expect("pointwise shape"))
        } else {
            Some(self.col2im(&dcol, self.in_channels, h, w))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// `x · sigmoid(x)`; smooth, so finite differences see no kinks.
    Silu,
    Tanh,
}

impl Activation {
    pub fn apply(self, t: &mut Tensor3) {
        match self {
            Activation::Relu => t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Silu => t.data_mut().iter_mut().for_each(|v| *v = *v / (1.0 + (-*v).exp())),
            Activation::Tanh => t.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
        }
    }

    /// `grad ← grad ⊙ act'(pre)`.
    pub fn backward(self, pre: &Tensor3, grad: &mut Tensor3) {
        match self {
            Activation::Relu => {
                for (g, &x) in grad.data_mut().iter_mut().zip(pre.data()) {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Silu => {
                for (g, &x) in grad.data_mut().iter_mut().zip(pre.data()) {
                    let s = 1.0 / (1.0 + (-x).exp());
                    *g *= s * (1.0 + x * (1.0 - s));
                }
            }
            Activation::Tanh => {
                for (g, &x) in grad.data_mut().iter_mut().zip(pre.data()) {
                    let t = x.tanh();
                    *g *= 1.0 - t * t;
                }
            }
        }
    }
}

/// 2×2 average pooling, ceil mode; partial windows average what they cover.
pub fn avg_pool2(input: &Tensor3) -> Tensor3 {
    let (c, h, w) = input.shape();
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor3::zeros(c, ho, wo);
    for ch in 0..c {
        let src = input.channel(ch);
        let dst = out.channel_mut(ch);
        for oy in 0..ho {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            for ox in 0..wo {
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let n = (ys.len() * xs.len()) as f64;
                let mut s = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        s += src[y * w + x];
                    }
                }
                dst[oy * wo + ox] = s / n;
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &Tensor3, height: usize, width: usize) -> Tensor3 {
    let (c, ho, wo) = grad_out.shape();
    let mut out = Tensor3::zeros(c, height, width);
    for ch in 0..c {
        let g = grad_out.channel(ch);
        let dst = out.channel_mut(ch);
        for oy in 0..ho {
            let ys = 2 * oy..(2 * oy + 2).min(height);
            for ox in 0..wo {
                let xs = 2 * ox..(2 * ox + 2).min(width);
                let share = g[oy * wo + ox] / (ys.len() * xs.len()) as f64;
                for y in ys.clone() {
                    for x in xs.clone() {
                        dst[y * width + x] += share;
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling cropped to `(height, width)`.
pub fn upsample2(input: &Tensor3, height: usize, width: usize) -> Tensor3 {
    Tensor3::from_fn(input.channels(), height, width, |c, y, x| input.at(c, y / 2, x / 2))
}

pub fn upsample2_backward(grad_out: &Tensor3, height: usize, width: usize) -> Tensor3 {
    let (c, ho, wo) = grad_out.shape();
    let mut out = Tensor3::zeros(c, height, width);
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                *out.at_mut(ch, y / 2, x / 2) += grad_out.at(ch, y, x);
            }
        }
    }
    out
}

pub fn concat_channels(a: &Tensor3, b: &Tensor3) -> Tensor3 {
    assert_eq!((a.height(), a.width()), (b.height(), b.width()));
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor3::from_vec(a.channels() + b.channels(), a.height(), a.width(), data).expect("concat shape")
}

pub fn split_channels(t: &Tensor3, first: usize) -> (Tensor3, Tensor3) {
    let (c, h, w) = t.shape();
    let cut = first * h * w;
    (
        Tensor3::from_vec(first, h, w, t.data()[..cut].to_vec()).expect("split shape"),
        Tensor3::from_vec(c - first, h, w, t.data()[cut..].to_vec()).expect("split shape"),
    )
}

/// Backward of the pixel-wise softmax: given `M` and `∂L/∂M`, returns
/// `∂L/∂logits`.
pub fn softmax_backward(mask: &Tensor3, grad_mask: &Tensor3) -> Tensor3 {
    let (k, h, w) = mask.shape();
    let p = h * w;
    let m = mask.data();
    let g = grad_mask.data();
    let mut out = Tensor3::zeros(k, h, w);
    let o = out.data_mut();
    for u in 0..p {
        let mut dot = 0.0;
        for c in 0..k {
            dot += m[c * p + u] * g[c * p + u];
        }
        for c in 0..k {
            o[c * p + u] = m[c * p + u] * (g[c * p + u] - dot);
        }
    }
    out
}

/// Bilinear resize with half-pixel centres and edge clamping. Every output
/// value is a convex combination of inputs, so simplex masks stay simplex.
pub fn resize_bilinear(input: &Tensor3, height: usize, width: usize) -> Tensor3 {
    let (c, h, w) = input.shape();
    if (h, w) == (height, width) {
        return input.clone();
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, height), axis(w, width));
    Tensor3::from_fn(c, height, width, |ch, y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = input.at(ch, y0, x0) * (1.0 - fx) + input.at(ch, y0, x1) * fx;
        let bottom = input.at(ch, y1, x0) * (1.0 - fx) + input.at(ch, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor3 {
        Tensor3::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution used as an oracle for the im2col path.
    fn naive_conv(conv: &Conv2d, input: &Tensor3) -> Tensor3 {
        let (c, h, w) = input.shape();
        let (ho, wo) = conv.output_size(h, w);
        let k = conv.kernel;
        let pad = (k / 2) as isize;
        Tensor3::from_fn(conv.out_channels, ho, wo, |o, oy, ox| {
            let mut s = conv.bias[o];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride) as isize + ky as isize - pad;
                        let ix = (ox * conv.stride) as isize + kx as isize - pad;
                        let (Some(iy), Some(ix)) = (conv.resolve(iy, h), conv.resolve(ix, w)) else {
                            continue;
                        };
                        s += conv.weight[((o * c + ci) * k + ky) * k + kx] * input.at(ci, iy, ix);
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, pad) in [(3, 1, Padding::Zero), (3, 2, Padding::Reflect), (1, 1, Padding::Zero), (3, 2, Padding::Zero)] {
            let mut conv = Conv2d::init_uniform(3, 5, k, s, pad, &mut rng);
            conv.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
            let x = random_tensor(3, 7, 6, &mut rng);
            let (y, _) = conv.forward(&x);
            let oracle = naive_conv(&conv, &x);
            for (a, b) in y.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (k, s, pad) in [(3, 1, Padding::Zero), (3, 2, Padding::Reflect), (1, 1, Padding::Zero)] {
            let conv = Conv2d::init_uniform(2, 3, k, s, pad, &mut rng);
            let x = random_tensor(2, 5, 5, &mut rng);
            let (y, col) = conv.forward(&x);
            let r = random_tensor(y.channels(), y.height(), y.width(), &mut rng);
            let objective = |conv: &Conv2d, x: &Tensor3| -> f64 {
                conv.forward(x).0.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            let mut grad = conv.zero_grad();
            let dx = conv.backward(&x, &col, &r, &mut grad, true).unwrap();
            let h = 1e-5;
            for i in 0..x.data().len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * h);
                assert!((fd - dx.data()[i]).abs() < 1e-7, "input grad {i}");
            }
            for i in 0..conv.weight.len() {
                let mut cp = conv.clone();
                cp.weight[i] += h;
                let mut cm = conv.clone();
                cm.weight[i] -= h;
                let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * h);
                assert!((fd - grad.weight[i]).abs() < 1e-7, "weight grad {i}");
            }
        }
    }

    #[test]
    fn reflect_conv_of_constant_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Conv2d::init_uniform(3, 4, 3, 2, Padding::Reflect, &mut rng);
        let (y, _) = conv.forward(&Tensor3::filled(3, 9, 9, 0.4));
        for c in 0..4 {
            let first = y.channel(c)[0];
            assert!(y.channel(c).iter().all(|v| (v - first).abs() < 1e-12));
        }
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(2, 5, 7, &mut rng);
        let g = random_tensor(2, 3, 4, &mut rng);
        let lhs: f64 = avg_pool2(&x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(avg_pool2_backward(&g, 5, 7).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let small = random_tensor(2, 3, 4, &mut rng);
        let gb = random_tensor(2, 5, 7, &mut rng);
        let lhs: f64 = upsample2(&small, 5, 7).data().iter().zip(gb.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = small.data().iter().zip(upsample2_backward(&gb, 3, 4).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bilinear_resize_keeps_constants_and_doubles_linear_ramps() {
        let c = Tensor3::filled(2, 3, 5, 0.25);
        assert!(resize_bilinear(&c, 7, 4).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let ramp = Tensor3::from_fn(1, 1, 4, |_, _, x| x as f64);
        let up = resize_bilinear(&ramp, 1, 8);
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0]);
    }
}
