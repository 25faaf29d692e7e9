use std::collections::HashMap;

use ndarray::{Array1, Array2, Array4, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;

use super::Param;

pub type NamedTensors = Vec<(String, Vec<usize>, Vec<f32>)>;
pub type TensorMap = HashMap<String, (Vec<usize>, Vec<f32>)>;

fn push_tensor(out: &mut NamedTensors, name: String, shape: &[usize], values: &[f32]) {
    out.push((name, shape.to_vec(), values.to_vec()));
}

fn take_tensor(map: &TensorMap, name: &str) -> (Vec<usize>, Vec<f32>) {
    map.get(name).unwrap_or_else(|| panic!("missing tensor {name}")).clone()
}

fn load_param(p: &mut Param, map: &TensorMap, name: &str) {
    let (shape, values) = take_tensor(map, name);
    assert_eq!(p.value.shape(), shape.as_slice(), "shape mismatch for {name}");
    p.value = ndarray::ArrayD::from_shape_vec(IxDyn(&shape), values).expect("shape checked");
}

/// im2col: unfolds k x k patches into a `[C*k*k, N*Ho*Wo]` matrix so that the
/// convolution becomes one GEMM. Column index order is `n, oy, ox`.
fn im2col(x: &Array4<f32>, k: usize, stride: usize, pad: usize) -> (Array2<f32>, usize, usize) {
    let (n, c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<f32>::zeros((c * k * k, n * ho * wo));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ci * k * k + ky * k + kx;
                let mut out_row = cols.row_mut(row);
                let out_slice = out_row.as_slice_mut().expect("contiguous row");
                let mut idx = 0usize;
                for ni in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            idx += wo;
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                out_slice[idx] = x[(ni, ci, iy as usize, ix as usize)];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of im2col: scatters column gradients back onto the input grid.
fn col2im(
    cols: &Array2<f32>,
    in_shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f32> {
    let (n, c, h, w) = in_shape;
    let mut x = Array4::<f32>::zeros(in_shape);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row(ci * k * k + ky * k + kx);
                let row_slice = row.as_slice().expect("contiguous row");
                let mut idx = 0usize;
                for ni in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            idx += wo;
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                x[(ni, ci, iy as usize, ix as usize)] += row_slice[idx];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[Cout, N*Ho*Wo]` row-major product result into `[N, Cout, Ho, Wo]`.
fn cols_to_maps(y: Array2<f32>, n: usize, ho: usize, wo: usize) -> Array4<f32> {
    let cout = y.dim().0;
    let y = y.into_shape_with_order((cout, n, ho, wo)).expect("size preserved");
    let mut out = Array4::<f32>::zeros((n, cout, ho, wo));
    out.assign(&y.permuted_axes([1, 0, 2, 3]));
    out
}

/// Inverse of `cols_to_maps` for gradients.
fn maps_to_cols(g: &Array4<f32>) -> Array2<f32> {
    let (n, cout, ho, wo) = g.dim();
    let mut t = Array4::<f32>::zeros((cout, n, ho, wo));
    t.assign(&g.view().permuted_axes([1, 0, 2, 3]));
    t.into_shape_with_order((cout, n * ho * wo)).expect("size preserved")
}

pub struct Conv2d {
    pub w: Param, // [Cout, Cin*k*k]
    pub b: Param, // [Cout]
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
    cache: Option<(Array2<f32>, (usize, usize, usize, usize), usize, usize)>,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: Param::he(&[cout, cin * k * k], cin * k * k, rng),
            b: Param::zeros(&[cout]),
            k,
            stride,
            pad,
            cin,
            cout,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (n, c, _, _) = x.dim();
        assert_eq!(c, self.cin);
        let (cols, ho, wo) = im2col(x, self.k, self.stride, self.pad);
        let w2 = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut y = w2.dot(&cols);
        let b = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(b.iter()) {
            row += bv;
        }
        if train {
            self.cache = Some((cols, x.dim(), ho, wo));
        }
        cols_to_maps(y, n, ho, wo)
    }

    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let (cols, in_shape, ho, wo) = self.cache.take().expect("forward(train) before backward");
        let g2 = maps_to_cols(gy);
        let dw = g2.dot(&cols.t());
        let db = g2.sum_axis(Axis(1));
        self.w.grad += &dw.into_dyn();
        self.b.grad += &db.into_dyn();
        let w2 = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let dcols = w2.t().dot(&g2);
        col2im(&dcols, in_shape, self.k, self.stride, self.pad, ho, wo)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedTensors) {
        push_tensor(out, format!("{prefix}.w"), self.w.value.shape(), self.w.value.as_slice().unwrap());
        push_tensor(out, format!("{prefix}.b"), self.b.value.shape(), self.b.value.as_slice().unwrap());
    }

    pub fn load(&mut self, prefix: &str, map: &TensorMap) {
        load_param(&mut self.w, map, &format!("{prefix}.w"));
        load_param(&mut self.b, map, &format!("{prefix}.b"));
    }
}

pub struct BatchNorm2d {
    pub gamma: Param, // [C]
    pub beta: Param,  // [C]
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<(Array4<f32>, Array1<f32>)>, // (xhat, inv_std)
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ndarray::ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::zeros(&[channels]),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (_, c, _, _) = x.dim();
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        if train {
            let m = (x.len() / c) as f32;
            let mut mean = Array1::<f32>::zeros(c);
            let mut var = Array1::<f32>::zeros(c);
            for ci in 0..c {
                let ch = x.index_axis(Axis(1), ci);
                let mu = ch.sum() / m;
                mean[ci] = mu;
                var[ci] = ch.iter().map(|&v| (v - mu) * (v - mu)).sum::<f32>() / m;
            }
            let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
            let mut xhat = x.clone();
            for ci in 0..c {
                let mut ch = xhat.index_axis_mut(Axis(1), ci);
                ch.mapv_inplace(|v| (v - mean[ci]) * inv_std[ci]);
            }
            let mut y = xhat.clone();
            for ci in 0..c {
                let mut ch = y.index_axis_mut(Axis(1), ci);
                ch.mapv_inplace(|v| v * gamma[ci] + beta[ci]);
            }
            self.running_mean = &self.running_mean * (1.0 - self.momentum) + &mean * self.momentum;
            self.running_var = &self.running_var * (1.0 - self.momentum) + &var * self.momentum;
            self.cache = Some((xhat, inv_std));
            y
        } else {
            let mut y = x.clone();
            for ci in 0..c {
                let inv = 1.0 / (self.running_var[ci] + self.eps).sqrt();
                let mu = self.running_mean[ci];
                let mut ch = y.index_axis_mut(Axis(1), ci);
                ch.mapv_inplace(|v| (v - mu) * inv * gamma[ci] + beta[ci]);
            }
            y
        }
    }

    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let (xhat, inv_std) = self.cache.take().expect("forward(train) before backward");
        let (_, c, _, _) = gy.dim();
        let m = (gy.len() / c) as f32;
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut dgamma = Array1::<f32>::zeros(c);
        let mut dbeta = Array1::<f32>::zeros(c);
        let mut sum_dxhat = Array1::<f32>::zeros(c);
        let mut sum_dxhat_xhat = Array1::<f32>::zeros(c);
        for ci in 0..c {
            let g = gy.index_axis(Axis(1), ci);
            let xh = xhat.index_axis(Axis(1), ci);
            dbeta[ci] = g.sum();
            dgamma[ci] = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
            sum_dxhat[ci] = dbeta[ci] * gamma[ci];
            sum_dxhat_xhat[ci] = dgamma[ci] * gamma[ci];
        }
        let mut dx = gy.clone();
        for ci in 0..c {
            let k1 = sum_dxhat[ci] / m;
            let k2 = sum_dxhat_xhat[ci] / m;
            let xh = xhat.index_axis(Axis(1), ci);
            let mut ch = dx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut ch).and(&xh).for_each(|d, &x| {
                *d = (*d * gamma[ci] - k1 - x * k2) * inv_std[ci];
            });
        }
        self.gamma.grad += &dgamma.into_dyn();
        self.beta.grad += &dbeta.into_dyn();
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedTensors) {
        push_tensor(out, format!("{prefix}.gamma"), self.gamma.value.shape(), self.gamma.value.as_slice().unwrap());
        push_tensor(out, format!("{prefix}.beta"), self.beta.value.shape(), self.beta.value.as_slice().unwrap());
        push_tensor(out, format!("{prefix}.running_mean"), &[self.running_mean.len()], self.running_mean.as_slice().unwrap());
        push_tensor(out, format!("{prefix}.running_var"), &[self.running_var.len()], self.running_var.as_slice().unwrap());
    }

    pub fn load(&mut self, prefix: &str, map: &TensorMap) {
        load_param(&mut self.gamma, map, &format!("{prefix}.gamma"));
        load_param(&mut self.beta, map, &format!("{prefix}.beta"));
        self.running_mean = Array1::from(take_tensor(map, &format!("{prefix}.running_mean")).1);
        self.running_var = Array1::from(take_tensor(map, &format!("{prefix}.running_var")).1);
    }
}

pub struct Linear {
    pub w: Param, // [out, in]
    pub b: Param, // [out]
    cache: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { w: Param::he(&[output, input], input, rng), b: Param::zeros(&[output]), cache: None }
    }

    pub fn forward(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        let w = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &b;
        }
        if train {
            self.cache = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, gy: &Array2<f32>) -> Array2<f32> {
        let x = self.cache.take().expect("forward(train) before backward");
        let dw = gy.t().dot(&x);
        let db = gy.sum_axis(Axis(0));
        self.w.grad += &dw.into_dyn();
        self.b.grad += &db.into_dyn();
        let w = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        gy.dot(&w)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedTensors) {
        push_tensor(out, format!("{prefix}.w"), self.w.value.shape(), self.w.value.as_slice().unwrap());
        push_tensor(out, format!("{prefix}.b"), self.b.value.shape(), self.b.value.as_slice().unwrap());
    }

    pub fn load(&mut self, prefix: &str, map: &TensorMap) {
        load_param(&mut self.w, map, &format!("{prefix}.w"));
        load_param(&mut self.b, map, &format!("{prefix}.b"));
    }
}

/// Elementwise logistic squashing; caches its output for the backward pass.
pub struct Sigmoid {
    cache: Option<Array4<f32>>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let y = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        if train {
            self.cache = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let y = self.cache.take().expect("forward(train) before backward");
        let mut dx = gy.clone();
        ndarray::Zip::from(&mut dx).and(&y).for_each(|d, &yv| *d *= yv * (1.0 - yv));
        dx
    }
}

impl Default for Sigmoid {
    fn default() -> Self {
        Self::new()
    }
}

/// Nearest-neighbour 2x upsampling.
pub struct Upsample2x;

impl Upsample2x {
    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(ni, ci, y, xx)| x[(ni, ci, y / 2, xx / 2)])
    }

    pub fn backward(&self, gy: &Array4<f32>) -> Array4<f32> {
        let (n, c, h2, w2) = gy.dim();
        let mut dx = Array4::<f32>::zeros((n, c, h2 / 2, w2 / 2));
        for ((ni, ci, y, x), &g) in gy.indexed_iter() {
            dx[(ni, ci, y / 2, x / 2)] += g;
        }
        dx
    }
}

/// Basic residual block: two conv-bn-relu cascades plus a skip connection,
/// with a 1x1 projection on the skip when stride or channel count changes.
pub struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    skip: Option<(Conv2d, BatchNorm2d)>,
    relu1_mask: Option<Array4<f32>>,
    relu2_mask: Option<Array4<f32>>,
}

impl ResidualBlock {
    pub fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let skip = (cin != cout || stride != 1)
            .then(|| (Conv2d::new(cin, cout, 1, stride, 0, rng), BatchNorm2d::new(cout)));
        Self {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(cout),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(cout),
            skip,
            relu1_mask: None,
            relu2_mask: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let mut h = self.bn1.forward(&self.conv1.forward(x, train), train);
        let mask1 = h.mapv(|v| (v > 0.0) as u8 as f32);
        h *= &mask1;
        let h2 = self.bn2.forward(&self.conv2.forward(&h, train), train);
        let s = match &mut self.skip {
            Some((conv, bn)) => bn.forward(&conv.forward(x, train), train),
            None => x.clone(),
        };
        let mut y = h2 + s;
        let mask2 = y.mapv(|v| (v > 0.0) as u8 as f32);
        y *= &mask2;
        if train {
            self.relu1_mask = Some(mask1);
            self.relu2_mask = Some(mask2);
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let mask2 = self.relu2_mask.take().expect("forward(train) before backward");
        let g = gy * &mask2;
        let mut gh = self.conv2.backward(&self.bn2.backward(&g));
        gh *= &self.relu1_mask.take().expect("forward(train) before backward");
        let gx_main = self.conv1.backward(&self.bn1.backward(&gh));
        let gx_skip = match &mut self.skip {
            Some((conv, bn)) => conv.backward(&bn.backward(&g)),
            None => g,
        };
        gx_main + gx_skip
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.bn1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.bn2.params_mut());
        if let Some((conv, bn)) = &mut self.skip {
            p.extend(conv.params_mut());
            p.extend(bn.params_mut());
        }
        p
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedTensors) {
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.bn1.collect(&format!("{prefix}.bn1"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
        self.bn2.collect(&format!("{prefix}.bn2"), out);
        if let Some((conv, bn)) = &self.skip {
            conv.collect(&format!("{prefix}.skip_conv"), out);
            bn.collect(&format!("{prefix}.skip_bn"), out);
        }
    }

    pub fn load(&mut self, prefix: &str, map: &TensorMap) {
        self.conv1.load(&format!("{prefix}.conv1"), map);
        self.bn1.load(&format!("{prefix}.bn1"), map);
        self.conv2.load(&format!("{prefix}.conv2"), map);
        self.bn2.load(&format!("{prefix}.bn2"), map);
        if let Some((conv, bn)) = &mut self.skip {
            conv.load(&format!("{prefix}.skip_conv"), map);
            bn.load(&format!("{prefix}.skip_bn"), map);
        }
    }
}
