//! Convolution, pooling and fully connected layers with hand-written backward passes.
//!
//! Layers do not own their weights; they hold indices into a [`ParamStore`] so the whole
//! model can be saved, updated and differentiated as one flat list of tensors.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A `C × H × W` activation, row-major within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Map {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_data(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "map data length");
        Map { c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn relu_in_place(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.max(0.0));
    }

    /// Zeroes `grad` wherever this (post-ReLU) activation is not positive.
    pub fn relu_mask(&self, grad: &mut Map) {
        for (g, &a) in grad.data.iter_mut().zip(&self.data) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Map) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.names.push(name.into());
        self.shapes.push(shape);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads(self.values.iter().map(|v| vec![0.0; v.len()]).collect())
    }
}

/// Gradients laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.0
            .iter_mut()
            .flat_map(|v| v.iter_mut())
            .for_each(|x| *x *= factor);
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// `C = A·B + beta·C` for row-major `A (m×k)`, `B (k×n)`, `C (m×n)`, with arbitrary strides
/// on the inputs.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index matrixmultiply touches in `a` and `c`;
    // callers pass `b` with the matching `k × n` extent.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv2d {
    /// Registers a convolution with weights drawn from `N(0, gain² · 2 / fan_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let w: Vec<f64> = (0..out_c * fan_in).map(|_| normal.sample(rng)).collect();
        let weight = store.add(format!("{name}.weight"), vec![out_c, in_c, kernel, kernel], w);
        let bias = store.add(format!("{name}.bias"), vec![out_c], vec![0.0; out_c]);
        Conv2d {
            weight,
            bias,
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            dilation,
        }
    }

    pub fn out_size(&self, size: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (size + 2 * self.pad - span) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds `x` into a `(in_c·k·k) × (oh·ow)` matrix.
    fn im2col(&self, x: &Map, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let n = oh * ow;
        let mut cols = vec![0.0; self.in_c * k * k * n];
        for c in 0..self.in_c {
            let plane = &x.data[c * x.h * x.w..(c + 1) * x.h * x.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * n;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix =
                                (ox * self.stride + kx * self.dilation) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Map {
        let k = self.kernel;
        let n = oh * ow;
        let mut out = Map::zeros(self.in_c, h, w);
        for c in 0..self.in_c {
            let plane = &mut out.data[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * n;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix =
                                (ox * self.stride + kx * self.dilation) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += cols[row + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, p: &ParamStore, x: &Map) -> Map {
        debug_assert_eq!(x.c, self.in_c);
        let (oh, ow) = (self.out_size(x.h), self.out_size(x.w));
        let n = oh * ow;
        let kk = self.in_c * self.kernel * self.kernel;
        let mut out = Map::zeros(self.out_c, oh, ow);
        let bias = &p.values[self.bias];
        for (o, chunk) in out.data.chunks_mut(n).enumerate() {
            chunk.fill(bias[o]);
        }
        let owned;
        let cols: &[f64] = if self.is_pointwise() {
            &x.data
        } else {
            owned = self.im2col(x, oh, ow);
            &owned
        };
        gemm(
            self.out_c,
            kk,
            n,
            &p.values[self.weight],
            (kk, 1),
            cols,
            (n, 1),
            1.0,
            &mut out.data,
        );
        out
    }

    /// Accumulates weight and bias gradients; returns the input gradient when asked.
    pub fn backward(
        &self,
        p: &ParamStore,
        x: &Map,
        dy: &Map,
        grads: &mut Grads,
        want_dx: bool,
    ) -> Option<Map> {
        let (oh, ow) = (dy.h, dy.w);
        let n = oh * ow;
        let kk = self.in_c * self.kernel * self.kernel;
        {
            let db = &mut grads.0[self.bias];
            for (o, chunk) in dy.data.chunks(n).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        let owned;
        let cols: &[f64] = if self.is_pointwise() {
            &x.data
        } else {
            owned = self.im2col(x, oh, ow);
            &owned
        };
        // dW (out_c × kk) += dY (out_c × n) · colsᵀ (n × kk)
        gemm(
            self.out_c,
            n,
            kk,
            &dy.data,
            (n, 1),
            cols,
            (1, n),
            1.0,
            &mut grads.0[self.weight],
        );
        if !want_dx {
            return None;
        }
        // dcols (kk × n) = Wᵀ (kk × out_c) · dY (out_c × n)
        let mut dcols = vec![0.0; kk * n];
        gemm(
            kk,
            self.out_c,
            n,
            &p.values[self.weight],
            (1, kk),
            &dy.data,
            (n, 1),
            0.0,
            &mut dcols,
        );
        if self.is_pointwise() {
            Some(Map::from_data(self.in_c, x.h, x.w, dcols))
        } else {
            Some(self.col2im(&dcols, x.h, x.w, oh, ow))
        }
    }
}

/// Unpadded max pooling.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
}

impl MaxPool2d {
    pub fn out_size(&self, size: usize) -> usize {
        (size - self.kernel) / self.stride + 1
    }

    /// Returns the pooled map and, per output element, the flat input index of its maximum.
    pub fn forward(&self, x: &Map) -> (Map, Vec<u32>) {
        let (oh, ow) = (self.out_size(x.h), self.out_size(x.w));
        let mut out = Map::zeros(x.c, oh, ow);
        let mut arg = vec![0u32; x.c * oh * ow];
        for c in 0..x.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let i = (c * x.h + oy * self.stride + ky) * x.w + ox * self.stride + kx;
                            if x.data[i] > best {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (c * oh + oy) * ow + ox;
                    out.data[o] = best;
                    arg[o] = best_i as u32;
                }
            }
        }
        (out, arg)
    }

    pub fn backward(&self, input_shape: [usize; 3], arg: &[u32], dy: &Map) -> Map {
        let [c, h, w] = input_shape;
        let mut dx = Map::zeros(c, h, w);
        for (g, &i) in dy.data.iter().zip(arg) {
            dx.data[i as usize] += g;
        }
        dx
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub in_f: usize,
    pub out_f: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_f: usize,
        out_f: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let std = gain * (2.0 / in_f as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let w: Vec<f64> = (0..in_f * out_f).map(|_| normal.sample(rng)).collect();
        let weight = store.add(format!("{name}.weight"), vec![out_f, in_f], w);
        let bias = store.add(format!("{name}.bias"), vec![out_f], vec![0.0; out_f]);
        Linear {
            weight,
            bias,
            in_f,
            out_f,
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = &p.values[self.weight];
        let b = &p.values[self.bias];
        (0..self.out_f)
            .map(|o| {
                b[o] + w[o * self.in_f..(o + 1) * self.in_f]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, p: &ParamStore, x: &[f64], dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let w = &p.values[self.weight];
        let mut dx = vec![0.0; self.in_f];
        for (o, &g) in dy.iter().enumerate() {
            grads.0[self.bias][o] += g;
            let row = o * self.in_f;
            for i in 0..self.in_f {
                grads.0[self.weight][row + i] += g * x[i];
                dx[i] += g * w[row + i];
            }
        }
        dx
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `logits` against class `target`, and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    (loss, grad)
}
