//! Layer implementations with exact backward passes.
//!
//! Convolutions run as im2col plus a GEMM per sample, parallel across the
//! batch; weight-gradient contributions are collected per sample and
//! summed in index order so results do not depend on thread scheduling.

use ndarray::{s, Array1, Array2, Array4, ArrayView3, Axis, Ix2, Ix4, Zip};
use rand::Rng;

use super::{Act, ForwardCtx, Mode, Param, Shape};

/// One network layer. Composite blocks (inception) nest further layers.
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    ReLU(ReLU),
    MaxPool2d(MaxPool2d),
    GlobalAvgPool(GlobalAvgPool),
    Dropout(Dropout),
    Flatten(Flatten),
    Linear(Linear),
    Inception(Box<Inception>),
}

impl Layer {
    pub fn forward(&mut self, x: Act, ctx: &mut ForwardCtx) -> Act {
        match self {
            Layer::Conv2d(l) => Act::Spatial(l.forward(x.into_spatial(), ctx)),
            Layer::BatchNorm2d(l) => Act::Spatial(l.forward(x.into_spatial(), ctx)),
            Layer::ReLU(l) => l.forward(x, ctx),
            Layer::MaxPool2d(l) => Act::Spatial(l.forward(x.into_spatial(), ctx)),
            Layer::GlobalAvgPool(l) => Act::Flat(l.forward(x.into_spatial(), ctx)),
            Layer::Dropout(l) => l.forward(x, ctx),
            Layer::Flatten(l) => Act::Flat(l.forward(x.into_spatial(), ctx)),
            Layer::Linear(l) => Act::Flat(l.forward(x.into_flat(), ctx)),
            Layer::Inception(l) => Act::Spatial(l.forward(x.into_spatial(), ctx)),
        }
    }

    pub fn backward(&mut self, dy: Act) -> Act {
        match self {
            Layer::Conv2d(l) => Act::Spatial(l.backward(dy.into_spatial())),
            Layer::BatchNorm2d(l) => Act::Spatial(l.backward(dy.into_spatial())),
            Layer::ReLU(l) => l.backward(dy),
            Layer::MaxPool2d(l) => Act::Spatial(l.backward(dy.into_spatial())),
            Layer::GlobalAvgPool(l) => Act::Spatial(l.backward(dy.into_flat())),
            Layer::Dropout(l) => l.backward(dy),
            Layer::Flatten(l) => Act::Spatial(l.backward(dy.into_flat())),
            Layer::Linear(l) => Act::Flat(l.backward(dy.into_flat())),
            Layer::Inception(l) => Act::Spatial(l.backward(dy.into_spatial())),
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Layer::Conv2d(l) => {
                f(&l.weight);
                f(&l.bias);
            }
            Layer::BatchNorm2d(l) => {
                f(&l.gamma);
                f(&l.beta);
            }
            Layer::Linear(l) => {
                f(&l.weight);
                f(&l.bias);
            }
            Layer::Inception(l) => {
                for b in l.branches() {
                    for layer in b {
                        layer.visit_params(f);
                    }
                }
            }
            _ => {}
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Layer::Conv2d(l) => {
                f(&mut l.weight);
                f(&mut l.bias);
            }
            Layer::BatchNorm2d(l) => {
                f(&mut l.gamma);
                f(&mut l.beta);
            }
            Layer::Linear(l) => {
                f(&mut l.weight);
                f(&mut l.bias);
            }
            Layer::Inception(l) => {
                for b in l.branches_mut() {
                    for layer in b {
                        layer.visit_params_mut(f);
                    }
                }
            }
            _ => {}
        }
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[f64])) {
        match self {
            Layer::BatchNorm2d(l) => {
                f(&l.running_mean_name, &l.running_mean);
                f(&l.running_var_name, &l.running_var);
            }
            Layer::Inception(l) => {
                for b in l.branches() {
                    for layer in b {
                        layer.visit_buffers(f);
                    }
                }
            }
            _ => {}
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            Layer::BatchNorm2d(l) => {
                f(&l.running_mean_name, &mut l.running_mean);
                f(&l.running_var_name, &mut l.running_var);
            }
            Layer::Inception(l) => {
                for b in l.branches_mut() {
                    for layer in b {
                        layer.visit_buffers_mut(f);
                    }
                }
            }
            _ => {}
        }
    }

    pub fn out_shape(&self, input: &Shape) -> Shape {
        match self {
            Layer::Conv2d(l) => {
                let (_, h, w) = expect_spatial(input);
                Shape::Spatial(
                    l.out_channels(),
                    conv_out(h, l.kernel, l.stride, l.pad, false),
                    conv_out(w, l.kernel, l.stride, l.pad, false),
                )
            }
            Layer::MaxPool2d(l) => {
                let (c, h, w) = expect_spatial(input);
                Shape::Spatial(
                    c,
                    conv_out(h, l.kernel, l.stride, l.pad, l.ceil_mode),
                    conv_out(w, l.kernel, l.stride, l.pad, l.ceil_mode),
                )
            }
            Layer::GlobalAvgPool(_) => {
                let (c, _, _) = expect_spatial(input);
                Shape::Flat(c)
            }
            Layer::Flatten(_) => {
                let (c, h, w) = expect_spatial(input);
                Shape::Flat(c * h * w)
            }
            Layer::Linear(l) => Shape::Flat(l.out_features()),
            Layer::Inception(l) => {
                let (_, h, w) = expect_spatial(input);
                Shape::Spatial(l.out_channels(), h, w)
            }
            _ => *input,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Layer::Conv2d(l) => format!(
                "conv {} {}x{} s{} p{}",
                l.weight.name, l.kernel, l.kernel, l.stride, l.pad
            ),
            Layer::BatchNorm2d(l) => format!("batchnorm {}", l.gamma.name),
            Layer::ReLU(_) => "relu".into(),
            Layer::MaxPool2d(l) => format!("maxpool {}x{} s{}", l.kernel, l.kernel, l.stride),
            Layer::GlobalAvgPool(_) => "avgpool global".into(),
            Layer::Dropout(l) => format!("dropout p={}", l.rate),
            Layer::Flatten(_) => "flatten".into(),
            Layer::Linear(l) => format!("linear {}", l.weight.name),
            Layer::Inception(l) => format!("inception {}", l.group),
        }
    }
}

fn expect_spatial(shape: &Shape) -> (usize, usize, usize) {
    match shape {
        Shape::Spatial(c, h, w) => (*c, *h, *w),
        Shape::Flat(_) => panic!("expected a spatial shape"),
    }
}

/// Output extent of a sliding window; ceil mode never lets a window start
/// at or past the padded end.
fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize, ceil_mode: bool) -> usize {
    let span = size + 2 * pad - kernel;
    let mut out = if ceil_mode {
        span.div_ceil(stride) + 1
    } else {
        span / stride + 1
    };
    if ceil_mode && (out - 1) * stride >= size + pad {
        out -= 1;
    }
    out
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

pub struct Conv2d {
    pub weight: Param, // (C_out, C_in, K, K)
    pub bias: Param,   // (C_out)
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache_input: Option<Array4<f64>>,
}

impl Conv2d {
    pub fn new(weight: Param, bias: Param, stride: usize, pad: usize) -> Self {
        let kernel = weight.values.shape()[2];
        assert_eq!(weight.values.shape()[2], weight.values.shape()[3]);
        Conv2d {
            weight,
            bias,
            kernel,
            stride,
            pad,
            cache_input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.values.shape()[0]
    }

    fn in_channels(&self) -> usize {
        self.weight.values.shape()[1]
    }

    fn forward(&mut self, x: Array4<f64>, ctx: &mut ForwardCtx) -> Array4<f64> {
        let (n, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.in_channels(), "conv input channel mismatch");
        let ho = conv_out(h, self.kernel, self.stride, self.pad, false);
        let wo = conv_out(w, self.kernel, self.stride, self.pad, false);
        let c_out = self.out_channels();
        let k = c_in * self.kernel * self.kernel;
        let w_mat = self
            .weight
            .values
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .into_shape_with_order((c_out, k))
            .unwrap();
        let bias = self.bias.values.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = Array4::zeros((n, c_out, ho, wo));
        let (kernel, stride, pad) = (self.kernel, self.stride, self.pad);
        Zip::from(out.outer_iter_mut())
            .and(x.outer_iter())
            .par_for_each(|mut o, xi| {
                let col = im2col(&xi, kernel, stride, pad, ho, wo);
                let y = w_mat.dot(&col); // (C_out, ho*wo)
                for c in 0..c_out {
                    let b = bias[c];
                    let mut oc = o.index_axis_mut(Axis(0), c);
                    let yc = y.index_axis(Axis(0), c);
                    for (dst, src) in oc.iter_mut().zip(yc.iter()) {
                        *dst = src + b;
                    }
                }
            });
        if ctx.record {
            self.cache_input = Some(x);
        }
        out
    }

    fn backward(&mut self, dy: Array4<f64>) -> Array4<f64> {
        use rayon::prelude::*;

        let x = self.cache_input.take().expect("conv backward without recorded forward");
        let (n, c_in, h, w) = x.dim();
        let (_, c_out, ho, wo) = dy.dim();
        let k = c_in * self.kernel * self.kernel;
        let w_mat = self
            .weight
            .values
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .into_shape_with_order((c_out, k))
            .unwrap()
            .to_owned();
        let (kernel, stride, pad) = (self.kernel, self.stride, self.pad);

        // per-sample weight contributions, reduced in index order afterwards
        let dw_parts: Vec<Array2<f64>> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let xi = x.index_axis(Axis(0), ni);
                let dy_mat = dy
                    .index_axis(Axis(0), ni)
                    .into_shape_with_order((c_out, ho * wo))
                    .unwrap();
                let col = im2col(&xi, kernel, stride, pad, ho, wo);
                dy_mat.dot(&col.t())
            })
            .collect();

        let mut dx = Array4::zeros((n, c_in, h, w));
        Zip::from(dx.outer_iter_mut())
            .and(dy.outer_iter())
            .par_for_each(|mut dxi, dyi| {
                let dy_mat = dyi.into_shape_with_order((c_out, ho * wo)).unwrap();
                let dcol = w_mat.t().dot(&dy_mat); // (k, ho*wo)
                col2im(&dcol, &mut dxi, kernel, stride, pad, ho, wo);
            });

        let dw_sum = {
            let mut acc = Array2::<f64>::zeros((c_out, k));
            for part in &dw_parts {
                acc += part;
            }
            acc
        };
        let db_sum = {
            let mut acc = Array1::<f64>::zeros(c_out);
            for ni in 0..n {
                for c in 0..c_out {
                    acc[c] += dy.slice(s![ni, c, .., ..]).sum();
                }
            }
            acc
        };
        {
            let gw = self.weight.grad_mut();
            let mut gw2 = gw.view_mut().into_shape_with_order((c_out, k)).unwrap();
            gw2 += &dw_sum;
        }
        {
            let gb = self.bias.grad_mut();
            for (g, d) in gb.iter_mut().zip(db_sum.iter()) {
                *g += d;
            }
        }
        dx
    }
}

fn im2col(
    x: &ArrayView3<f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let mut col = Array2::zeros((c_in * kernel * kernel, ho * wo));
    for c in 0..c_in {
        let xc = x.index_axis(Axis(0), c);
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let mut col_row = col.index_axis_mut(Axis(0), row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col_row[oy * wo + ox] = xc[(iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    dcol: &Array2<f64>,
    dx: &mut ndarray::ArrayViewMut3<f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (c_in, h, w) = dx.dim();
    for c in 0..c_in {
        let mut dxc = dx.index_axis_mut(Axis(0), c);
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let drow = dcol.index_axis(Axis(0), row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dxc[(iy as usize, ix as usize)] += drow[oy * wo + ox];
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub running_mean_name: String,
    pub running_var_name: String,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

struct BnCache {
    x_hat: Array4<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm2d {
    pub fn new(name: &str, group: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: super::const_param(&format!("{name}.gamma"), group, &[channels], 1.0),
            beta: super::const_param(&format!("{name}.beta"), group, &[channels], 0.0),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            running_mean_name: format!("{name}.running_mean"),
            running_var_name: format!("{name}.running_var"),
            momentum: 0.9,
            eps: 1e-5,
            cache: None,
        }
    }

    fn forward(&mut self, x: Array4<f64>, ctx: &mut ForwardCtx) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let mut out = Array4::zeros((n, c, h, w));
        let mut x_hat = if ctx.record {
            Array4::zeros((n, c, h, w))
        } else {
            Array4::zeros((0, 0, 0, 0))
        };
        let mut inv_stds = vec![0.0; c];
        for ci in 0..c {
            let (mean, var) = match ctx.mode {
                Mode::Train => {
                    assert!(n * h * w >= 2, "batch norm needs at least 2 values per channel");
                    let xc = x.slice(s![.., ci, .., ..]);
                    let mean = xc.sum() / m;
                    let var = xc.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
                    self.running_mean[ci] =
                        self.momentum * self.running_mean[ci] + (1.0 - self.momentum) * mean;
                    self.running_var[ci] =
                        self.momentum * self.running_var[ci] + (1.0 - self.momentum) * var;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean[ci], self.running_var[ci]),
            };
            let inv_std = 1.0 / (var + self.eps).sqrt();
            inv_stds[ci] = inv_std;
            let g = self.gamma.values[[ci]];
            let b = self.beta.values[[ci]];
            let xc = x.slice(s![.., ci, .., ..]);
            let mut oc = out.slice_mut(s![.., ci, .., ..]);
            if ctx.record {
                let mut hc = x_hat.slice_mut(s![.., ci, .., ..]);
                Zip::from(&mut oc).and(&mut hc).and(&xc).for_each(|o, hv, &v| {
                    let xh = (v - mean) * inv_std;
                    *hv = xh;
                    *o = g * xh + b;
                });
            } else {
                Zip::from(&mut oc).and(&xc).for_each(|o, &v| {
                    *o = g * ((v - mean) * inv_std) + b;
                });
            }
        }
        if ctx.record {
            self.cache = Some(BnCache {
                x_hat,
                inv_std: inv_stds,
                mode: ctx.mode,
            });
        }
        out
    }

    fn backward(&mut self, dy: Array4<f64>) -> Array4<f64> {
        let cache = self.cache.take().expect("batchnorm backward without recorded forward");
        let (n, c, h, w) = dy.dim();
        let m = (n * h * w) as f64;
        let mut dx = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let g = self.gamma.values[[ci]];
            let inv_std = cache.inv_std[ci];
            let dyc = dy.slice(s![.., ci, .., ..]);
            let hc = cache.x_hat.slice(s![.., ci, .., ..]);
            let sum_dy: f64 = dyc.sum();
            let sum_dy_xhat: f64 = Zip::from(&dyc).and(&hc).fold(0.0, |acc, &d, &xh| acc + d * xh);
            {
                let gg = self.gamma.grad_mut();
                gg[[ci]] += sum_dy_xhat;
            }
            {
                let gb = self.beta.grad_mut();
                gb[[ci]] += sum_dy;
            }
            let mut dxc = dx.slice_mut(s![.., ci, .., ..]);
            match cache.mode {
                Mode::Train => {
                    // gradient through the batch statistics
                    Zip::from(&mut dxc).and(&dyc).and(&hc).for_each(|o, &d, &xh| {
                        *o = g * inv_std * (d - sum_dy / m - xh * sum_dy_xhat / m);
                    });
                }
                Mode::Eval => {
                    Zip::from(&mut dxc).and(&dyc).for_each(|o, &d| {
                        *o = g * inv_std * d;
                    });
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// ReLU / Dropout / Flatten
// ---------------------------------------------------------------------------

#[derive(Default)]
pub struct ReLU {
    mask: Option<Vec<bool>>,
}

impl ReLU {
    pub fn new() -> Self {
        ReLU::default()
    }

    fn forward(&mut self, x: Act, ctx: &mut ForwardCtx) -> Act {
        let apply = |data: &mut [f64], mask: &mut Option<Vec<bool>>, record: bool| {
            if record {
                let mut m = vec![false; data.len()];
                for (v, mi) in data.iter_mut().zip(m.iter_mut()) {
                    *mi = *v > 0.0;
                    if !*mi {
                        *v = 0.0;
                    }
                }
                *mask = Some(m);
            } else {
                for v in data.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        };
        match x {
            Act::Spatial(mut a) => {
                apply(a.as_slice_mut().unwrap(), &mut self.mask, ctx.record);
                Act::Spatial(a)
            }
            Act::Flat(mut a) => {
                apply(a.as_slice_mut().unwrap(), &mut self.mask, ctx.record);
                Act::Flat(a)
            }
        }
    }

    fn backward(&mut self, dy: Act) -> Act {
        let mask = self.mask.take().expect("relu backward without recorded forward");
        let apply = |data: &mut [f64]| {
            for (v, &m) in data.iter_mut().zip(mask.iter()) {
                if !m {
                    *v = 0.0;
                }
            }
        };
        match dy {
            Act::Spatial(mut a) => {
                apply(a.as_slice_mut().unwrap());
                Act::Spatial(a)
            }
            Act::Flat(mut a) => {
                apply(a.as_slice_mut().unwrap());
                Act::Flat(a)
            }
        }
    }
}

pub struct Dropout {
    pub rate: f64,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        Dropout { rate, mask: None }
    }

    fn forward(&mut self, x: Act, ctx: &mut ForwardCtx) -> Act {
        if ctx.mode == Mode::Eval || self.rate == 0.0 {
            if ctx.record {
                self.mask = None;
            }
            return x;
        }
        let rng = ctx
            .rng
            .as_deref_mut()
            .expect("train-mode dropout requires an RNG");
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mut apply = |data: &mut [f64]| -> Vec<f64> {
            let mut mask = vec![0.0; data.len()];
            for (v, m) in data.iter_mut().zip(mask.iter_mut()) {
                let u: f64 = rng.random();
                if u < keep {
                    *m = scale;
                    *v *= scale;
                } else {
                    *m = 0.0;
                    *v = 0.0;
                }
            }
            mask
        };
        match x {
            Act::Spatial(mut a) => {
                let mask = apply(a.as_slice_mut().unwrap());
                if ctx.record {
                    self.mask = Some(mask);
                }
                Act::Spatial(a)
            }
            Act::Flat(mut a) => {
                let mask = apply(a.as_slice_mut().unwrap());
                if ctx.record {
                    self.mask = Some(mask);
                }
                Act::Flat(a)
            }
        }
    }

    fn backward(&mut self, dy: Act) -> Act {
        let mask = match self.mask.take() {
            Some(m) => m,
            None => return dy, // eval-mode pass-through
        };
        let apply = |data: &mut [f64]| {
            for (v, &m) in data.iter_mut().zip(mask.iter()) {
                *v *= m;
            }
        };
        match dy {
            Act::Spatial(mut a) => {
                apply(a.as_slice_mut().unwrap());
                Act::Spatial(a)
            }
            Act::Flat(mut a) => {
                apply(a.as_slice_mut().unwrap());
                Act::Flat(a)
            }
        }
    }
}

#[derive(Default)]
pub struct Flatten {
    in_dims: Option<(usize, usize, usize, usize)>,
}

impl Flatten {
    pub fn new() -> Self {
        Flatten::default()
    }

    fn forward(&mut self, x: Array4<f64>, ctx: &mut ForwardCtx) -> Array2<f64> {
        let dims = x.dim();
        if ctx.record {
            self.in_dims = Some(dims);
        }
        let (n, c, h, w) = dims;
        x.into_shape_with_order((n, c * h * w)).unwrap()
    }

    fn backward(&mut self, dy: Array2<f64>) -> Array4<f64> {
        let dims = self.in_dims.take().expect("flatten backward without recorded forward");
        dy.into_shape_with_order(dims).unwrap()
    }
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub ceil_mode: bool,
    cache: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize, ceil_mode: bool) -> Self {
        MaxPool2d {
            kernel,
            stride,
            pad,
            ceil_mode,
            cache: None,
        }
    }

    fn forward(&mut self, x: Array4<f64>, ctx: &mut ForwardCtx) -> Array4<f64> {
        use rayon::prelude::*;

        let (n, c, h, w) = x.dim();
        let ho = conv_out(h, self.kernel, self.stride, self.pad, self.ceil_mode);
        let wo = conv_out(w, self.kernel, self.stride, self.pad, self.ceil_mode);
        let mut out = Array4::zeros((n, c, ho, wo));
        let mut argmax = vec![0usize; n * c * ho * wo];
        let (kernel, stride, pad) = (self.kernel, self.stride, self.pad);
        let out_chunks: Vec<_> = out
            .as_slice_mut()
            .unwrap()
            .chunks_mut(c * ho * wo)
            .collect();
        let arg_chunks: Vec<_> = argmax.chunks_mut(c * ho * wo).collect();
        out_chunks
            .into_par_iter()
            .zip(arg_chunks.into_par_iter())
            .enumerate()
            .for_each(|(ni, (o_flat, amax))| {
                let xi = x.index_axis(Axis(0), ni);
                for ci in 0..c {
                    let xc = xi.index_axis(Axis(0), ci);
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for ky in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kernel {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let v = xc[(iy as usize, ix as usize)];
                                    if v > best {
                                        best = v;
                                        best_idx = iy as usize * w + ix as usize;
                                    }
                                }
                            }
                            o_flat[(ci * ho + oy) * wo + ox] = best;
                            amax[(ci * ho + oy) * wo + ox] = best_idx;
                        }
                    }
                }
            });
        if ctx.record {
            self.cache = Some((argmax, (n, c, h, w)));
        }
        out
    }

    fn backward(&mut self, dy: Array4<f64>) -> Array4<f64> {
        let (argmax, (n, c, h, w)) = self.cache.take().expect("maxpool backward without recorded forward");
        let (_, _, ho, wo) = dy.dim();
        let mut dx = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let dyc = dy.slice(s![ni, ci, .., ..]);
                let mut dxc = dx.slice_mut(s![ni, ci, .., ..]);
                let base = (ni * c + ci) * ho * wo;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let idx = argmax[base + oy * wo + ox];
                        dxc[(idx / w, idx % w)] += dyc[(oy, ox)];
                    }
                }
            }
        }
        dx
    }
}

#[derive(Default)]
pub struct GlobalAvgPool {
    in_dims: Option<(usize, usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool::default()
    }

    fn forward(&mut self, x: Array4<f64>, ctx: &mut ForwardCtx) -> Array2<f64> {
        let dims = x.dim();
        let (n, c, h, w) = dims;
        if ctx.record {
            self.in_dims = Some(dims);
        }
        let scale = 1.0 / (h * w) as f64;
        let mut out = Array2::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                out[(ni, ci)] = x.slice(s![ni, ci, .., ..]).sum() * scale;
            }
        }
        out
    }

    fn backward(&mut self, dy: Array2<f64>) -> Array4<f64> {
        let (n, c, h, w) = self.in_dims.take().expect("avgpool backward without recorded forward");
        let scale = 1.0 / (h * w) as f64;
        let mut dx = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let g = dy[(ni, ci)] * scale;
                dx.slice_mut(s![ni, ci, .., ..]).fill(g);
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

pub struct Linear {
    pub weight: Param, // (F_in, F_out)
    pub bias: Param,   // (F_out)
    cache_input: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(weight: Param, bias: Param) -> Self {
        Linear {
            weight,
            bias,
            cache_input: None,
        }
    }

    pub fn out_features(&self) -> usize {
        self.weight.values.shape()[1]
    }

    fn forward(&mut self, x: Array2<f64>, ctx: &mut ForwardCtx) -> Array2<f64> {
        let w = self.weight.values.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = x.dot(&w);
        let b = self.bias.values.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for mut row in y.outer_iter_mut() {
            row += &b;
        }
        if ctx.record {
            self.cache_input = Some(x);
        }
        y
    }

    fn backward(&mut self, dy: Array2<f64>) -> Array2<f64> {
        let x = self.cache_input.take().expect("linear backward without recorded forward");
        let w = self.weight.values.view().into_dimensionality::<Ix2>().unwrap();
        let dx = dy.dot(&w.t());
        let dw = x.t().dot(&dy);
        let db = dy.sum_axis(Axis(0));
        {
            let gw = self.weight.grad_mut();
            let mut gw2 = gw
                .view_mut()
                .into_dimensionality::<Ix2>()
                .unwrap();
            gw2 += &dw;
        }
        {
            let gb = self.bias.grad_mut();
            for (g, d) in gb.iter_mut().zip(db.iter()) {
                *g += d;
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Inception block
// ---------------------------------------------------------------------------

/// Four parallel branches concatenated along the channel axis:
/// 1x1, 1x1-3x3, 1x1-5x5 and pool-1x1.
pub struct Inception {
    pub group: String,
    branches: Vec<Vec<Layer>>,
    splits: Vec<usize>,
}

impl Inception {
    pub fn new(group: &str, branches: Vec<Vec<Layer>>) -> Self {
        let splits = branches
            .iter()
            .map(|b| {
                b.iter()
                    .rev()
                    .find_map(|l| match l {
                        Layer::Conv2d(c) => Some(c.out_channels()),
                        _ => None,
                    })
                    .expect("each inception branch ends in a conv")
            })
            .collect();
        Inception {
            group: group.to_string(),
            branches,
            splits,
        }
    }

    pub fn branches(&self) -> &[Vec<Layer>] {
        &self.branches
    }

    pub fn branches_mut(&mut self) -> &mut [Vec<Layer>] {
        &mut self.branches
    }

    pub fn out_channels(&self) -> usize {
        self.splits.iter().sum()
    }

    fn forward(&mut self, x: Array4<f64>, ctx: &mut ForwardCtx) -> Array4<f64> {
        let mut outs: Vec<Array4<f64>> = Vec::with_capacity(self.branches.len());
        for branch in &mut self.branches {
            let mut act = Act::Spatial(x.clone());
            for layer in branch {
                act = layer.forward(
                    act,
                    &mut ForwardCtx {
                        mode: ctx.mode,
                        rng: ctx.rng.as_deref_mut(),
                        record: ctx.record,
                    },
                );
            }
            outs.push(act.into_spatial());
        }
        let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
        ndarray::concatenate(Axis(1), &views).expect("inception concat")
    }

    fn backward(&mut self, dy: Array4<f64>) -> Array4<f64> {
        let mut dx: Option<Array4<f64>> = None;
        let mut offset = 0usize;
        for (branch, &chans) in self.branches.iter_mut().zip(&self.splits) {
            let slice = dy.slice(s![.., offset..offset + chans, .., ..]).to_owned();
            offset += chans;
            let mut grad = Act::Spatial(slice);
            for layer in branch.iter_mut().rev() {
                grad = layer.backward(grad);
            }
            let g = grad.into_spatial();
            match &mut dx {
                Some(acc) => *acc += &g,
                None => dx = Some(g),
            }
        }
        dx.expect("inception has branches")
    }
}
