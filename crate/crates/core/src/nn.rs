//! Layers with hand-written backward passes.
//!
//! Layers own only parameters. Forward passes return whatever the backward pass
//! needs, so a network can be shared immutably (classifier pool entries, the
//! FIX classifier) while gradients flow through it.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{col2im, im2col, Real, Tensor};

fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R, std: f64) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::from_f64c(z * std)
}

/// Square-kernel convolution, stride 1, "same" zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// cout × (cin·k·k), row-major.
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct ConvGrad<T> {
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> ConvGrad<T> {
    pub fn zeros_like(conv: &Conv2d<T>) -> Self {
        Self {
            weight: vec![T::zero(); conv.weight.len()],
            bias: conv.bias.as_ref().map(|b| vec![T::zero(); b.len()]),
        }
    }
}

impl<T: Real> Conv2d<T> {
    /// He-normal weights (fan-in scaling); bias zero when present.
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            cin,
            cout,
            k,
            weight: (0..cout * fan_in).map(|_| normal(rng, std)).collect(),
            bias: bias.then(|| vec![T::zero(); cout]),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let cols = x.n * x.plane();
        let ckk = self.cin * self.k * self.k;
        let mut out = Tensor::zeros(self.cout, x.n, x.h, x.w);
        if self.k == 1 {
            T::gemm(
                self.cout,
                ckk,
                cols,
                &self.weight,
                false,
                &x.data,
                false,
                &mut out.data,
                false,
            );
        } else {
            let mut col = Vec::new();
            im2col(x, self.k, &mut col);
            T::gemm(
                self.cout,
                ckk,
                cols,
                &self.weight,
                false,
                &col,
                false,
                &mut out.data,
                false,
            );
        }
        if let Some(b) = &self.bias {
            for (c, &bc) in b.iter().enumerate() {
                out.channel_mut(c).iter_mut().for_each(|v| *v += bc);
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` (when given) and returns
    /// the input gradient when `need_dx`.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grad: Option<&mut ConvGrad<T>>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let cols = x.n * x.plane();
        let ckk = self.cin * self.k * self.k;
        let mut col_buf = Vec::new();
        let col: &[T] = if self.k == 1 {
            &x.data
        } else {
            im2col(x, self.k, &mut col_buf);
            &col_buf
        };
        if let Some(g) = grad {
            // dW += dY · colᵀ
            T::gemm(
                self.cout,
                cols,
                ckk,
                &dy.data,
                false,
                col,
                true,
                &mut g.weight,
                true,
            );
            if let Some(gb) = g.bias.as_mut() {
                for (c, v) in gb.iter_mut().enumerate() {
                    *v += dy.channel(c).iter().copied().sum::<T>();
                }
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(self.cin, x.n, x.h, x.w);
        if self.k == 1 {
            T::gemm(
                ckk,
                self.cout,
                cols,
                &self.weight,
                true,
                &dy.data,
                false,
                &mut dx.data,
                false,
            );
        } else {
            let mut dcol = vec![T::zero(); ckk * cols];
            T::gemm(
                ckk,
                self.cout,
                cols,
                &self.weight,
                true,
                &dy.data,
                false,
                &mut dcol,
                false,
            );
            col2im(&dcol, self.k, &mut dx);
        }
        Some(dx)
    }
}

/// Per-channel batch normalisation over (N, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

#[derive(Clone, Debug)]
pub struct BnGrad<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> BnGrad<T> {
    pub fn zeros(c: usize) -> Self {
        Self {
            gamma: vec![T::zero(); c],
            beta: vec![T::zero(); c],
        }
    }
}

impl<T: Real> BatchNorm<T> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Training mode normalises with batch statistics and updates the
    /// running estimates; inference mode uses the running estimates.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> (Tensor<T>, BnCache<T>) {
        if train {
            self.forward_train(x)
        } else {
            self.forward_eval(x)
        }
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        let eps = T::from_f64c(self.eps);
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.c);
        for c in 0..x.c {
            let is = T::one() / (self.running_var[c] + eps).sqrt();
            inv_std.push(is);
            let (m, g, b) = (self.running_mean[c], self.gamma[c], self.beta[c]);
            for (xh, o) in xhat.channel_mut(c).iter_mut().zip(out.channel_mut(c)) {
                *xh = (*xh - m) * is;
                *o = g * *xh + b;
            }
        }
        (
            out,
            BnCache {
                xhat,
                inv_std,
                train: false,
            },
        )
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        let eps = T::from_f64c(self.eps);
        let mom = T::from_f64c(self.momentum);
        let count = x.n * x.plane();
        let cnt = T::from_usize(count).unwrap();
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.c);
        for c in 0..x.c {
            let ch = x.channel(c);
            let mean = ch.iter().copied().sum::<T>() / cnt;
            let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let (g, b) = (self.gamma[c], self.beta[c]);
            for (xh, o) in xhat.channel_mut(c).iter_mut().zip(out.channel_mut(c)) {
                *xh = (*xh - mean) * is;
                *o = g * *xh + b;
            }
            let unbiased = if count > 1 {
                var * cnt / T::from_usize(count - 1).unwrap()
            } else {
                var
            };
            self.running_mean[c] = (T::one() - mom) * self.running_mean[c] + mom * mean;
            self.running_var[c] = (T::one() - mom) * self.running_var[c] + mom * unbiased;
        }
        (
            out,
            BnCache {
                xhat,
                inv_std,
                train: true,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
        grad: Option<&mut BnGrad<T>>,
    ) -> Tensor<T> {
        let mut dx = dy.clone();
        let count = dy.n * dy.plane();
        let cnt = T::from_usize(count).unwrap();
        let mut sums = Vec::with_capacity(dy.c);
        for c in 0..dy.c {
            let d = dy.channel(c);
            let xh = cache.xhat.channel(c);
            let sum_dy: T = d.iter().copied().sum();
            let sum_dy_xh: T = d.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            sums.push((sum_dy, sum_dy_xh));
            let scale = self.gamma[c] * cache.inv_std[c];
            let dxc = dx.channel_mut(c);
            if cache.train {
                let (mdy, mdyx) = (sum_dy / cnt, sum_dy_xh / cnt);
                for (v, &x) in dxc.iter_mut().zip(xh) {
                    *v = scale * (*v - mdy - x * mdyx);
                }
            } else {
                dxc.iter_mut().for_each(|v| *v *= scale);
            }
        }
        if let Some(g) = grad {
            for (c, (sdy, sdyx)) in sums.into_iter().enumerate() {
                g.beta[c] += sdy;
                g.gamma[c] += sdyx;
            }
        }
        dx
    }
}

/// Fully connected layer on row-major (N × in) features.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub fan_in: usize,
    pub fan_out: usize,
    /// fan_out × fan_in.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct LinearGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            fan_in,
            fan_out,
            weight: (0..fan_in * fan_out).map(|_| normal(rng, std)).collect(),
            bias: vec![T::zero(); fan_out],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[T], n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); n * self.fan_out];
        T::gemm(
            n,
            self.fan_in,
            self.fan_out,
            x,
            false,
            &self.weight,
            true,
            &mut out,
            false,
        );
        for row in out.chunks_mut(self.fan_out) {
            for (v, &b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        out
    }

    pub fn backward(
        &self,
        x: &[T],
        dy: &[T],
        n: usize,
        grad: Option<&mut LinearGrad<T>>,
    ) -> Vec<T> {
        if let Some(g) = grad {
            T::gemm(
                self.fan_out,
                n,
                self.fan_in,
                dy,
                true,
                x,
                false,
                &mut g.weight,
                true,
            );
            for row in dy.chunks(self.fan_out) {
                for (gb, &d) in g.bias.iter_mut().zip(row) {
                    *gb += d;
                }
            }
        }
        let mut dx = vec![T::zero(); n * self.fan_in];
        T::gemm(
            n,
            self.fan_out,
            self.fan_in,
            dy,
            false,
            &self.weight,
            false,
            &mut dx,
            false,
        );
        dx
    }
}

/// 2×2 average pooling, stride 2.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let quarter = T::from_f64c(0.25);
    let mut out = Tensor::zeros(x.c, x.n, h2, w2);
    for c in 0..x.c {
        for n in 0..x.n {
            let src = x.slice(c, n);
            let dst = out.slice_mut(c, n);
            for y in 0..h2 {
                let r0 = &src[2 * y * x.w..(2 * y + 1) * x.w];
                let r1 = &src[(2 * y + 1) * x.w..(2 * y + 2) * x.w];
                for (xx, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                    *d = (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]) * quarter;
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.upsample_nearest(2);
    let quarter = T::from_f64c(0.25);
    dx.data.iter_mut().for_each(|v| *v *= quarter);
    dx
}

/// 2×2 max pooling, stride 2. Also returns, per output, which of the four
/// inputs won (row-major within the window; first maximum on ties).
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, x.n, h2, w2);
    let mut arg = vec![0u8; out.len()];
    let plane2 = h2 * w2;
    for c in 0..x.c {
        for n in 0..x.n {
            let src = x.slice(c, n);
            let base = (c * x.n + n) * plane2;
            let dst = out.slice_mut(c, n);
            for y in 0..h2 {
                let r0 = &src[2 * y * x.w..(2 * y + 1) * x.w];
                let r1 = &src[(2 * y + 1) * x.w..(2 * y + 2) * x.w];
                for xx in 0..w2 {
                    let cand = [r0[2 * xx], r0[2 * xx + 1], r1[2 * xx], r1[2 * xx + 1]];
                    let mut best = 0;
                    for (i, &v) in cand.iter().enumerate().skip(1) {
                        if v > cand[best] {
                            best = i;
                        }
                    }
                    dst[y * w2 + xx] = cand[best];
                    arg[base + y * w2 + xx] = best as u8;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Real>(dy: &Tensor<T>, arg: &[u8]) -> Tensor<T> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Tensor::zeros(dy.c, dy.n, h, w);
    let plane2 = dy.plane();
    for c in 0..dy.c {
        for n in 0..dy.n {
            let base = (c * dy.n + n) * plane2;
            let g = dy.slice(c, n).to_vec();
            let dst = dx.slice_mut(c, n);
            for y in 0..dy.h {
                for xx in 0..dy.w {
                    let a = arg[base + y * dy.w + xx] as usize;
                    dst[(2 * y + a / 2) * w + 2 * xx + a % 2] = g[y * dy.w + xx];
                }
            }
        }
    }
    dx
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zeroes `dy` where the ReLU output was not positive.
pub fn relu_backward_inplace<T: Real>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    for (d, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

pub fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Adam with coupled L2 weight decay (gradient += decay · θ).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over parameter/gradient buffers given in a stable order.
    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: Vec<&[f32]>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient group count");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = (self.lr / bc1) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let wd = self.weight_decay as f32;
        let eps = self.eps as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len(), "parameter group {i} length");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j] + wd * p[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let denom = v[j].sqrt() / bc2_sqrt + eps;
                p[j] -= step_size * m[j] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check<F: FnMut(&[f64]) -> f64>(x: &[f64], analytic: &[f64], mut f: F) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let err = (num - analytic[i]).abs() / (num.abs().max(analytic[i].abs()).max(1e-6));
            assert!(
                err < 1e-5,
                "index {i}: numeric {num} analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new(2, 3, 3, true, &mut rng);
        let x = Tensor::from_vec(
            2,
            2,
            4,
            4,
            (0..64).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect(),
        );
        let probe: Vec<f64> = (0..3 * 2 * 16).map(|i| (i as f64 * 0.41).sin()).collect();
        let loss = |c: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
            c.forward(x)
                .data
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum()
        };
        let dy = Tensor::from_vec(3, 2, 4, 4, probe.clone());
        let mut g = ConvGrad::zeros_like(&conv);
        let dx = conv.backward(&x, &dy, Some(&mut g), true).unwrap();
        fd_check(&x.data, &dx.data, |v| {
            loss(&conv, &Tensor::from_vec(2, 2, 4, 4, v.to_vec()))
        });
        fd_check(&conv.weight, &g.weight, |w| {
            let mut c = conv.clone();
            c.weight = w.to_vec();
            loss(&c, &x)
        });
        fd_check(conv.bias.as_ref().unwrap(), g.bias.as_ref().unwrap(), |b| {
            let mut c = conv.clone();
            c.bias = Some(b.to_vec());
            loss(&c, &x)
        });
    }

    #[test]
    fn batchnorm_train_backward_matches_finite_differences() {
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma = vec![1.3, 0.7];
        bn.beta = vec![0.1, -0.2];
        let x = Tensor::from_vec(
            2,
            3,
            2,
            2,
            (0..24).map(|i| (i as f64 * 0.9).sin() * 2.0).collect(),
        );
        let probe: Vec<f64> = (0..24).map(|i| (i as f64 * 0.53).cos()).collect();
        let loss = |bn: &BatchNorm<f64>, x: &Tensor<f64>| -> f64 {
            let mut b = bn.clone();
            let (y, _) = b.forward(x, true);
            y.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let mut b = bn.clone();
        let (_, cache) = b.forward(&x, true);
        let mut g = BnGrad::zeros(2);
        let dx = bn.backward(
            &cache,
            &Tensor::from_vec(2, 3, 2, 2, probe.clone()),
            Some(&mut g),
        );
        fd_check(&x.data, &dx.data, |v| {
            loss(&bn, &Tensor::from_vec(2, 3, 2, 2, v.to_vec()))
        });
        fd_check(&bn.gamma, &g.gamma, |v| {
            let mut b = bn.clone();
            b.gamma = v.to_vec();
            loss(&b, &x)
        });
    }

    #[test]
    fn linear_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::<f64>::new(4, 3, 0.5, &mut rng);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let probe = [0.3, -0.2, 0.5, 0.1, 0.9, -0.4];
        let dx = lin.backward(&x, &probe, 2, None);
        fd_check(&x, &dx, |v| {
            lin.forward(v, 2)
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum()
        });

        let t = Tensor::from_vec(1, 1, 4, 4, (0..16).map(|i| i as f64).collect());
        let p = avg_pool2(&t);
        assert_eq!(p.data, vec![2.5, 4.5, 10.5, 12.5]);
        let d = avg_pool2_backward(&Tensor::from_vec(1, 1, 2, 2, vec![4.0, 8.0, 0.0, 4.0]));
        assert_eq!(d.data[0], 1.0);
        assert_eq!(d.data[3], 2.0);

        let (m, arg) = max_pool2(&t);
        assert_eq!(m.data, vec![5.0, 7.0, 13.0, 15.0]);
        let probe = Tensor::from_vec(1, 1, 2, 2, vec![0.5, -1.0, 2.0, 3.0]);
        let dm = max_pool2_backward(&probe, &arg);
        fd_check(&t.data, &dm.data, |v| {
            let tt = Tensor::from_vec(1, 1, 4, 4, v.to_vec());
            max_pool2(&tt)
                .0
                .data
                .iter()
                .zip(&probe.data)
                .map(|(a, b)| a * b)
                .sum()
        });
    }

    #[test]
    fn softmax_rows_normalise() {
        let p = softmax_rows(&[1.0f64, 2.0, 3.0, 1000.0, 1000.0, 1000.0], 3);
        assert!((p[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut opt = Adam::new(0.1, 0.0);
        let mut p = vec![3.0f32, -2.0];
        for _ in 0..500 {
            let g: Vec<f32> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(vec![&mut p[..]], vec![&g[..]]);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "{p:?}");
    }
}
