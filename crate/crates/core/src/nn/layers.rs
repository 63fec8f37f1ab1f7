use rand::Rng;
use serde::{Deserialize, Serialize};

use super::weights::{Record, RecordKind};
use super::{Float, Parameter, Tensor};
use crate::error::{Error, Result};

fn no_cache(layer: &str) -> Error {
    Error::State(format!("{layer}: backward called before a training forward pass"))
}

/// 2-D cross-correlation evaluated as im2col followed by one matrix product
/// over the whole batch.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub stride: usize,
    pub pad: usize,
    input: Option<Tensor<T>>,
}

impl<T: Float> Conv2d<T> {
    /// He-uniform weights, zero bias.
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(stride >= 1 && kernel >= 1, "conv needs stride and kernel ≥ 1");
        let bound = (6.0 / (cin * kernel * kernel) as f64).sqrt();
        let weight = Tensor::from_fn([cout, cin, kernel, kernel], |_| T::c(rng.random_range(-bound..bound)));
        Self::from_weights(weight, bias.then(|| Tensor::zeros([1, cout, 1, 1])), stride, pad)
    }

    pub fn from_weights(weight: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, pad: usize) -> Self {
        Self {
            weight: Parameter::new(weight),
            bias: bias.map(Parameter::new),
            stride,
            pad,
            input: None,
        }
    }

    pub fn cin(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn cout(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    fn out_dims(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let k = self.kernel();
        if x.c() != self.cin() {
            return Err(Error::Shape(format!(
                "conv input {:?} does not match weight {:?}",
                x.shape(),
                self.weight.value.shape()
            )));
        }
        let (hp, wp) = (x.h() + 2 * self.pad, x.w() + 2 * self.pad);
        // Output size rounds down, so a stride-2 3×3 conv halves an even input.
        if hp < k || wp < k {
            return Err(Error::Shape(format!(
                "conv input {:?} with weight {:?}, stride {}, pad {} is smaller than the kernel",
                x.shape(),
                self.weight.value.shape(),
                self.stride,
                self.pad
            )));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    fn im2col(&self, x: &Tensor<T>, ho: usize, wo: usize) -> Vec<T> {
        let k = self.kernel();
        let (n, cin, h, w) = (x.n(), x.c(), x.h(), x.w());
        let (s, pad) = (self.stride, self.pad as isize);
        let p = n * ho * wo;
        let mut cols = vec![T::zero(); cin * k * k * p];
        let src = x.data();
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                    for b in 0..n {
                        let plane = &src[(b * cin + ci) * h * w..][..h * w];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let line = &plane[iy as usize * w..][..w];
                            let dst = &mut row[(b * ho + oy) * wo..][..wo];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    *d = line[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], shape: [usize; 4], ho: usize, wo: usize) -> Tensor<T> {
        let k = self.kernel();
        let [n, cin, h, w] = shape;
        let (s, pad) = (self.stride, self.pad as isize);
        let p = n * ho * wo;
        let mut dx = Tensor::zeros(shape);
        let dst = dx.data_mut();
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                    for b in 0..n {
                        let plane = &mut dst[(b * cin + ci) * h * w..][..h * w];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let line = &mut plane[iy as usize * w..][..w];
                            let g = &row[(b * ho + oy) * wo..][..wo];
                            for (ox, &gv) in g.iter().enumerate() {
                                let ix = (ox * s + kx) as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    line[ix as usize] += gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Forward pass without caching.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (ho, wo) = self.out_dims(x)?;
        let (n, cout) = (x.n(), self.cout());
        let kk = self.cin() * self.kernel() * self.kernel();
        let hw = ho * wo;
        let p = n * hw;
        let cols = self.im2col(x, ho, wo);
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        if n == 1 {
            T::gemm(false, false, cout, kk, p, self.weight.value.data(), &cols, out.data_mut(), false);
        } else {
            let mut mat = vec![T::zero(); cout * p];
            T::gemm(false, false, cout, kk, p, self.weight.value.data(), &cols, &mut mat, false);
            let o = out.data_mut();
            for co in 0..cout {
                for b in 0..n {
                    o[(b * cout + co) * hw..][..hw].copy_from_slice(&mat[co * p + b * hw..][..hw]);
                }
            }
        }
        if let Some(bias) = &self.bias {
            let o = out.data_mut();
            for b in 0..n {
                for (co, &bv) in bias.value.data().iter().enumerate() {
                    o[(b * cout + co) * hw..][..hw].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| no_cache("conv2d"))?;
        let (ho, wo) = self.out_dims(&x)?;
        let (n, cout) = (x.n(), self.cout());
        if g.shape() != [n, cout, ho, wo] {
            return Err(Error::Shape(format!(
                "conv gradient {:?}, expected {:?}",
                g.shape(),
                [n, cout, ho, wo]
            )));
        }
        let kk = self.cin() * self.kernel() * self.kernel();
        let hw = ho * wo;
        let p = n * hw;
        let gmat: Vec<T> = if n == 1 {
            g.data().to_vec()
        } else {
            let mut m = vec![T::zero(); cout * p];
            for co in 0..cout {
                for b in 0..n {
                    m[co * p + b * hw..][..hw].copy_from_slice(g.plane(b, co));
                }
            }
            m
        };
        if let Some(bias) = &mut self.bias {
            for (co, bg) in bias.grad.data_mut().iter_mut().enumerate() {
                *bg += gmat[co * p..][..p].iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        let cols = self.im2col(&x, ho, wo);
        T::gemm(false, true, cout, p, kk, &gmat, &cols, self.weight.grad.data_mut(), true);
        let mut dcols = cols;
        T::gemm(true, false, kk, cout, p, self.weight.value.data(), &gmat, &mut dcols, false);
        Ok(self.col2im(&dcols, x.shape(), ho, wo))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn records(&self) -> Vec<Record> {
        let mut r = vec![Record::from_tensor(RecordKind::ConvWeight, &self.weight.value)];
        if let Some(b) = &self.bias {
            r.push(Record::new(RecordKind::ConvBias, vec![self.cout()], b.value.data()));
        }
        r
    }

    pub fn load_records(&mut self, it: &mut dyn Iterator<Item = Record>) -> Result<()> {
        let shape = self.weight.value.shape();
        let w = Record::take(it, RecordKind::ConvWeight, &shape)?;
        self.weight.value.data_mut().copy_from_slice(&w);
        if let Some(b) = &mut self.bias {
            let v = Record::take(it, RecordKind::ConvBias, &[shape[0]])?;
            b.value.data_mut().copy_from_slice(&v);
        }
        Ok(())
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// False until a training step or a weight load has set the running stats.
    pub stats_ready: bool,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Parameter::new(Tensor::full([1, c, 1, 1], T::one())),
            beta: Parameter::new(Tensor::zeros([1, c, 1, 1])),
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            stats_ready: false,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != self.channels() {
            return Err(Error::Shape(format!(
                "batchnorm over {} channels got {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(())
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Tensor<T>) {
        let hw = x.h() * x.w();
        let mut xhat = x.clone();
        let mut out = x.clone();
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for n in 0..x.n() {
            for c in 0..x.c() {
                let o = (n * x.c() + c) * hw;
                for i in o..o + hw {
                    let z = (x.data()[i] - mean[c]) * inv_std[c];
                    xhat.data_mut()[i] = z;
                    out.data_mut()[i] = g[c] * z + b[c];
                }
            }
        }
        (xhat, out)
    }

    fn eval_stats(&self) -> Result<Vec<T>> {
        if !self.stats_ready {
            return Err(Error::State(
                "batchnorm evaluated before any training step or weight load".into(),
            ));
        }
        let eps = T::c(BN_EPS);
        Ok(self.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect())
    }

    /// Eval-mode forward without caching.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let inv = self.eval_stats()?;
        Ok(self.normalize(x, &self.running_mean, &inv).1)
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        self.check(x)?;
        let (mean, inv_std) = if train {
            let (c, hw) = (x.c(), x.h() * x.w());
            let m = (x.n() * hw) as f64;
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = 0.0;
                for n in 0..x.n() {
                    s += x.plane(n, ch).iter().map(|v| v.f64()).sum::<f64>();
                }
                let mu = s / m;
                let mut q = 0.0;
                for n in 0..x.n() {
                    q += x.plane(n, ch).iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>();
                }
                mean[ch] = T::c(mu);
                var[ch] = T::c(q / m);
                let unbiased = if m > 1.0 { q / (m - 1.0) } else { 0.0 };
                let mo = T::c(BN_MOMENTUM);
                self.running_mean[ch] = mo * self.running_mean[ch] + (T::one() - mo) * T::c(mu);
                self.running_var[ch] = mo * self.running_var[ch] + (T::one() - mo) * T::c(unbiased);
            }
            self.stats_ready = true;
            let eps = T::c(BN_EPS);
            let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv)
        } else {
            (self.running_mean.clone(), self.eval_stats()?)
        };
        let (xhat, out) = self.normalize(x, &mean, &inv_std);
        self.cache = Some(BnCache { xhat, inv_std, train });
        Ok(out)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let BnCache { xhat, inv_std, train } = self.cache.take().ok_or_else(|| no_cache("batchnorm"))?;
        xhat.check_same(g, "batchnorm gradient")?;
        let (n, c, hw) = (g.n(), g.c(), g.h() * g.w());
        let m = T::c((n * hw) as f64);
        let gamma = self.gamma.value.data().to_vec();
        let mut dx = Tensor::zeros(g.shape());
        for ch in 0..c {
            let (mut sg, mut sgx) = (T::zero(), T::zero());
            for b in 0..n {
                for (&gv, &xv) in g.plane(b, ch).iter().zip(xhat.plane(b, ch)) {
                    sg += gv;
                    sgx += gv * xv;
                }
            }
            self.beta.grad.data_mut()[ch] += sg;
            self.gamma.grad.data_mut()[ch] += sgx;
            let k = gamma[ch] * inv_std[ch];
            for b in 0..n {
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    dx.data_mut()[i] = if train {
                        k * (g.data()[i] - sg / m - xhat.data()[i] * sgx / m)
                    } else {
                        k * g.data()[i]
                    };
                }
            }
        }
        Ok(dx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels()
    }

    pub fn records(&self) -> Vec<Record> {
        let mut data = Vec::with_capacity(4 * self.channels());
        data.extend_from_slice(self.gamma.value.data());
        data.extend_from_slice(self.beta.value.data());
        data.extend_from_slice(&self.running_mean);
        data.extend_from_slice(&self.running_var);
        vec![Record::new(RecordKind::BatchNorm, vec![4, self.channels()], &data)]
    }

    pub fn load_records(&mut self, it: &mut dyn Iterator<Item = Record>) -> Result<()> {
        let c = self.channels();
        let v = Record::take::<T>(it, RecordKind::BatchNorm, &[4, c])?;
        self.gamma.value.data_mut().copy_from_slice(&v[..c]);
        self.beta.value.data_mut().copy_from_slice(&v[c..2 * c]);
        self.running_mean.copy_from_slice(&v[2 * c..3 * c]);
        self.running_var.copy_from_slice(&v[3 * c..]);
        self.stats_ready = true;
        Ok(())
    }
}

/// Activation choice exposed in model configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Mish,
    LeakyRelu,
}

pub const LEAKY_SLOPE: f64 = 0.1;

#[inline]
pub fn softplus<T: Float>(x: T) -> T {
    if x > T::c(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn mish<T: Float>(x: T) -> T {
    x * softplus(x).tanh()
}

#[inline]
pub fn mish_grad<T: Float>(x: T) -> T {
    let t = softplus(x).tanh();
    t + x * (T::one() - t * t) * sigmoid(x)
}

#[inline]
pub fn leaky_relu<T: Float>(x: T, slope: T) -> T {
    if x > T::zero() {
        x
    } else {
        slope * x
    }
}

/// Elementwise activation layer.
#[derive(Clone, Debug)]
pub struct Activation<T> {
    pub kind: ActivationKind,
    input: Option<Tensor<T>>,
}

impl<T: Float> Activation<T> {
    pub fn new(kind: ActivationKind) -> Self {
        Self { kind, input: None }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let slope = T::c(LEAKY_SLOPE);
        match self.kind {
            ActivationKind::Mish => x.map(mish),
            ActivationKind::LeakyRelu => x.map(|v| leaky_relu(v, slope)),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = self.input.take().ok_or_else(|| no_cache("activation"))?;
        x.check_same(g, "activation gradient")?;
        let slope = T::c(LEAKY_SLOPE);
        for (xv, &gv) in x.data_mut().iter_mut().zip(g.data()) {
            let d = match self.kind {
                ActivationKind::Mish => mish_grad(*xv),
                ActivationKind::LeakyRelu => {
                    if *xv > T::zero() {
                        T::one()
                    } else {
                        slope
                    }
                }
            };
            *xv = d * gv;
        }
        Ok(x)
    }
}

/// Max pooling with a square window; the first maximum wins ties.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub size: usize,
    pub stride: usize,
    cache: Option<([usize; 4], Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(size: usize, stride: usize) -> Self {
        assert!(size >= 1 && stride >= 1);
        Self { size, stride, cache: None }
    }

    fn run<T: Float>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let [n, c, h, w] = x.shape();
        if h < self.size || w < self.size {
            return Err(Error::Shape(format!("maxpool {} on {:?}", self.size, x.shape())));
        }
        let (ho, wo) = ((h - self.size) / self.stride + 1, (w - self.size) / self.stride + 1);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let mut arg = Vec::with_capacity(n * c * ho * wo);
        let src = x.data();
        let mut k = 0;
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = base + oy * self.stride * w + ox * self.stride;
                        for dy in 0..self.size {
                            for dx in 0..self.size {
                                let i = base + (oy * self.stride + dy) * w + ox * self.stride + dx;
                                if src[i] > src[best] {
                                    best = i;
                                }
                            }
                        }
                        out.data_mut()[k] = src[best];
                        arg.push(best);
                        k += 1;
                    }
                }
            }
        }
        Ok((out, arg))
    }

    pub fn infer<T: Float>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x)?.0)
    }

    pub fn forward<T: Float>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, arg) = self.run(x)?;
        self.cache = Some((x.shape(), arg));
        Ok(out)
    }

    pub fn backward<T: Float>(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, arg) = self.cache.take().ok_or_else(|| no_cache("maxpool"))?;
        if arg.len() != g.len() {
            return Err(Error::Shape(format!("maxpool gradient {:?}", g.shape())));
        }
        let mut dx = Tensor::zeros(shape);
        for (&i, &gv) in arg.iter().zip(g.data()) {
            dx.data_mut()[i] += gv;
        }
        Ok(dx)
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Float>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let dst = out.data_mut();
    for p in 0..n * c {
        let src = &x.data()[p * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[(p * ho + oy) * wo + ox] = src[(oy / factor) * w + ox / factor];
            }
        }
    }
    out
}

/// Gradient of [`upsample_nearest`]: sums each factor×factor block.
pub fn upsample_nearest_backward<T: Float>(g: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, ho, wo] = g.shape();
    let (h, w) = (ho / factor, wo / factor);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let dst = dx.data_mut();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                dst[(p * h + oy / factor) * w + ox / factor] += g.data()[(p * ho + oy) * wo + ox];
            }
        }
    }
    dx
}

/// Convolution without bias, batch norm, activation.
#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub act: Activation<T>,
}

impl<T: Float> ConvBlock<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        act: ActivationKind,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, kernel, stride, kernel / 2, false, rng),
            bn: BatchNorm2d::new(cout),
            act: Activation::new(act),
        }
    }

    pub fn cout(&self) -> usize {
        self.conv.cout()
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.act.infer(&self.bn.infer(&self.conv.infer(x)?)?))
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let y = self.conv.forward(x)?;
        let y = self.bn.forward(&y, train)?;
        Ok(self.act.forward(&y))
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.act.backward(g)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.conv.params_mut();
        v.extend(self.bn.params_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }

    pub fn records(&self) -> Vec<Record> {
        let mut r = self.conv.records();
        r.extend(self.bn.records());
        r
    }

    pub fn load_records(&mut self, it: &mut dyn Iterator<Item = Record>) -> Result<()> {
        self.conv.load_records(it)?;
        self.bn.load_records(it)
    }
}
