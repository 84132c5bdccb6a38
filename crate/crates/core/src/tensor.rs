//! Dense 32-bit float tensors and forward/backward kernels for every layer
//! type the objectness networks use.
//!
//! Layout is row-major throughout; images and feature maps are channel-major
//! `C x H x W`. All arithmetic is `f32`; a few reductions whose consumers are
//! tolerance-sensitive (normalized cross-correlation, loss values) accumulate
//! in `f64`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::invalid(
                "Tensor::from_vec",
                format!(
                    "data length {} does not match shape {:?} (= {expected})",
                    data.len(),
                    shape
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Placeholder for layers that carry no trainable state.
    pub fn empty() -> Self {
        Tensor {
            shape: vec![0],
            data: Vec::new(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Reinterpret the buffer under a new shape of identical element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::invalid(
                "Tensor::reshaped",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::invalid(
                op,
                format!("expected a C x H x W tensor, got shape {other:?}"),
            )),
        }
    }

    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[o, c, h, w] => Ok((o, c, h, w)),
            other => Err(Error::invalid(
                op,
                format!("expected an O x C x KH x KW tensor, got shape {other:?}"),
            )),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// Configuration of a 2D convolution; stride is fixed at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub padding: Padding,
    pub stride: usize,
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel_h: usize, kernel_w: usize, padding: Padding) -> Self {
        ConvSpec {
            out_channels,
            kernel_h,
            kernel_w,
            padding,
            stride: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kernel_h < 1 || self.kernel_w < 1 {
            return Err(Error::invalid("conv2d", "kernel extents must be >= 1"));
        }
        if self.stride != 1 {
            return Err(Error::invalid("conv2d", "only stride 1 is supported"));
        }
        Ok(())
    }

    /// (top, bottom, left, right) zero-fill amounts.
    fn pad_amounts(&self) -> (usize, usize, usize, usize) {
        match self.padding {
            Padding::Valid => (0, 0, 0, 0),
            Padding::Same => {
                let pt = (self.kernel_h - 1) / 2;
                let pl = (self.kernel_w - 1) / 2;
                (pt, self.kernel_h - 1 - pt, pl, self.kernel_w - 1 - pl)
            }
        }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (pt, pb, pl, pr) = self.pad_amounts();
        let ph = h + pt + pb;
        let pw = w + pl + pr;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "{h}x{w} input produces an empty output for a {}x{} kernel",
                    self.kernel_h, self.kernel_w
                ),
            ));
        }
        Ok((ph - self.kernel_h + 1, pw - self.kernel_w + 1))
    }
}

/// Copy `input` into a zero-filled buffer with the spec's padding applied.
fn pad_input(input: &Tensor, c: usize, h: usize, w: usize, spec: &ConvSpec) -> (Vec<f32>, usize, usize) {
    let (pt, pb, pl, pr) = spec.pad_amounts();
    let ph = h + pt + pb;
    let pw = w + pl + pr;
    if ph == h && pw == w {
        return (input.data().to_vec(), ph, pw);
    }
    let mut padded = vec![0.0f32; c * ph * pw];
    let src = input.data();
    for ch in 0..c {
        for y in 0..h {
            let s = ch * h * w + y * w;
            let d = ch * ph * pw + (y + pt) * pw + pl;
            padded[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    (padded, ph, pw)
}

fn check_conv_shapes(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
) -> Result<(usize, usize, usize)> {
    spec.validate()?;
    let (c, h, w) = input.dims3("conv2d")?;
    let (o, wc, kh, kw) = weights.dims4("conv2d")?;
    if wc != c {
        return Err(Error::invalid(
            "conv2d",
            format!("input has {c} channels but weights expect {wc}"),
        ));
    }
    if o != spec.out_channels || kh != spec.kernel_h || kw != spec.kernel_w {
        return Err(Error::invalid(
            "conv2d",
            format!(
                "weights {:?} do not match spec Conv({}, {}x{})",
                weights.shape(),
                spec.out_channels,
                spec.kernel_h,
                spec.kernel_w
            ),
        ));
    }
    if bias.shape() != [o] {
        return Err(Error::invalid(
            "conv2d",
            format!("bias shape {:?} does not match {o} output channels", bias.shape()),
        ));
    }
    Ok((c, h, w))
}

/// 2D cross-correlation: `out[o] = bias[o] + sum_c input[c] * weights[o,c]`.
///
/// For a fixed output element the accumulation order is `(c, ki, kj)`, which
/// is exactly the row-major flattening order of a `C x KH x KW` block. The
/// dense layer below accumulates in the same order, so reshaping a dense
/// weight matrix into convolution filters reproduces its output bit for bit.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let (c, h, w) = check_conv_shapes(input, weights, bias, spec)?;
    let (oh, ow) = spec.output_extent(h, w)?;
    let (padded, _ph, pw) = pad_input(input, c, h, w, spec);
    let o = spec.out_channels;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);

    let mut out = vec![0.0f32; o * oh * ow];
    for oc in 0..o {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        plane.fill(bias.data()[oc]);
        for ic in 0..c {
            let in_plane = &padded[ic * _ph * pw..(ic + 1) * _ph * pw];
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = weights.data()[((oc * c + ic) * kh + ki) * kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..oh {
                        let irow = &in_plane[(y + ki) * pw + kj..(y + ki) * pw + kj + ow];
                        let orow = &mut plane[y * ow..(y + 1) * ow];
                        for (a, &b) in orow.iter_mut().zip(irow) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[o, oh, ow], out)
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weights, and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    spec.validate()?;
    let (c, h, w) = input.dims3("conv2d_backward")?;
    let (o, wc, kh, kw) = weights.dims4("conv2d_backward")?;
    if wc != c {
        return Err(Error::invalid(
            "conv2d_backward",
            format!("input has {c} channels but weights expect {wc}"),
        ));
    }
    let (oh, ow) = spec.output_extent(h, w)?;
    if grad_out.shape() != [o, oh, ow] {
        return Err(Error::invalid(
            "conv2d_backward",
            format!(
                "grad_out shape {:?} does not match forward output [{o}, {oh}, {ow}]",
                grad_out.shape()
            ),
        ));
    }

    let (padded, ph, pw) = pad_input(input, c, h, w, spec);
    let (pt, _, pl, _) = spec.pad_amounts();
    let go = grad_out.data();

    let mut grad_bias = vec![0.0f32; o];
    for oc in 0..o {
        let mut acc = 0.0f32;
        for &g in &go[oc * oh * ow..(oc + 1) * oh * ow] {
            acc += g;
        }
        grad_bias[oc] = acc;
    }

    let mut grad_weights = vec![0.0f32; o * c * kh * kw];
    for oc in 0..o {
        let gplane = &go[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..c {
            let in_plane = &padded[ic * ph * pw..(ic + 1) * ph * pw];
            for ki in 0..kh {
                for kj in 0..kw {
                    let mut acc = 0.0f32;
                    for y in 0..oh {
                        let irow = &in_plane[(y + ki) * pw + kj..(y + ki) * pw + kj + ow];
                        let grow = &gplane[y * ow..(y + 1) * ow];
                        acc += dot_f32(grow, irow);
                    }
                    grad_weights[((oc * c + ic) * kh + ki) * kw + kj] = acc;
                }
            }
        }
    }

    // Gradient w.r.t. the padded input, cropped back at the end.
    let mut gpad = vec![0.0f32; c * ph * pw];
    for oc in 0..o {
        let gplane = &go[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..c {
            let gin_plane = &mut gpad[ic * ph * pw..(ic + 1) * ph * pw];
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = weights.data()[((oc * c + ic) * kh + ki) * kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..oh {
                        let grow = &gplane[y * ow..(y + 1) * ow];
                        let start = (y + ki) * pw + kj;
                        let irow = &mut gin_plane[start..start + ow];
                        for (a, &g) in irow.iter_mut().zip(grow) {
                            *a += wv * g;
                        }
                    }
                }
            }
        }
    }
    let mut grad_input = vec![0.0f32; c * h * w];
    for ic in 0..c {
        for y in 0..h {
            let s = ic * ph * pw + (y + pt) * pw + pl;
            let d = ic * h * w + y * w;
            grad_input[d..d + w].copy_from_slice(&gpad[s..s + w]);
        }
    }

    Ok((
        Tensor::from_vec(&[c, h, w], grad_input)?,
        Tensor::from_vec(&[o, c, kh, kw], grad_weights)?,
        Tensor::from_vec(&[o], grad_bias)?,
    ))
}

/// Multi-accumulator f32 dot product; fixed association, vectorizes well.
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ca, cb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// f64-accumulating dot product of f32 slices, for correlation statistics.
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (ca, cb) = (&a[i * 4..i * 4 + 4], &b[i * 4..i * 4 + 4]);
        for l in 0..4 {
            acc[l] += ca[l] as f64 * cb[l] as f64;
        }
    }
    let mut tail = 0.0f64;
    for i in chunks * 4..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

/// Non-overlapping max pooling; inputs whose extents are not divisible by
/// `size` are cropped at the bottom/right. Ties resolve to the first element
/// in row-major window order. Returns the pooled map and the flat input
/// index of each selected maximum.
pub fn maxpool2d_forward(input: &Tensor, size: usize) -> Result<(Tensor, Vec<u32>)> {
    if size < 1 {
        return Err(Error::invalid("maxpool2d", "pool size must be >= 1"));
    }
    let (c, h, w) = input.dims3("maxpool2d")?;
    let oh = h / size;
    let ow = w / size;
    if oh == 0 || ow == 0 {
        return Err(Error::invalid(
            "maxpool2d",
            format!("{h}x{w} input is smaller than the {size}x{size} pool"),
        ));
    }
    let src = input.data();
    let mut out = vec![0.0f32; c * oh * ow];
    let mut argmax = vec![0u32; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..size {
                    let row = ch * h * w + (oy * size + dy) * w + ox * size;
                    for dx in 0..size {
                        let v = src[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                let oi = ch * oh * ow + oy * ow + ox;
                out[oi] = best;
                argmax[oi] = best_idx as u32;
            }
        }
    }
    Ok((Tensor::from_vec(&[c, oh, ow], out)?, argmax))
}

/// Routes each pooled gradient back to its stored argmax position.
pub fn maxpool2d_backward(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor,
) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::invalid(
            "maxpool2d_backward",
            "grad_out does not match the recorded argmax count",
        ));
    }
    let mut grad_input = Tensor::zeros(input_shape);
    let gi = grad_input.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gi[idx as usize] += g;
    }
    Ok(grad_input)
}

fn check_dense_shapes(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let (m, n) = match weights.shape() {
        &[m, n] => (m, n),
        other => {
            return Err(Error::invalid(
                "dense",
                format!("expected an M x N weight matrix, got {other:?}"),
            ))
        }
    };
    if input.len() != n {
        return Err(Error::invalid(
            "dense",
            format!("input length {} does not match weight columns {n}", input.len()),
        ));
    }
    if bias.shape() != [m] {
        return Err(Error::invalid(
            "dense",
            format!("bias shape {:?} does not match {m} outputs", bias.shape()),
        ));
    }
    Ok((m, n))
}

/// Fully connected layer over the flattened input: `out = W x + b`.
///
/// Accumulation runs in flat index order with a single f32 accumulator so
/// the result matches [`conv2d_forward`] after weight reshaping.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = check_dense_shapes(input, weights, bias)?;
    let x = input.data();
    let wd = weights.data();
    let mut out = vec![0.0f32; m];
    for i in 0..m {
        let row = &wd[i * n..(i + 1) * n];
        let mut acc = bias.data()[i];
        for j in 0..n {
            acc += row[j] * x[j];
        }
        out[i] = acc;
    }
    Tensor::from_vec(&[m], out)
}

pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (m, n) = match weights.shape() {
        &[m, n] => (m, n),
        other => {
            return Err(Error::invalid(
                "dense_backward",
                format!("expected an M x N weight matrix, got {other:?}"),
            ))
        }
    };
    if input.len() != n || grad_out.len() != m {
        return Err(Error::invalid(
            "dense_backward",
            format!(
                "shapes disagree: input {}, grad_out {}, weights {m}x{n}",
                input.len(),
                grad_out.len()
            ),
        ));
    }
    let x = input.data();
    let g = grad_out.data();
    let wd = weights.data();

    let mut grad_w = vec![0.0f32; m * n];
    let mut grad_in = vec![0.0f32; n];
    for i in 0..m {
        let gi = g[i];
        let wrow = &wd[i * n..(i + 1) * n];
        let grow = &mut grad_w[i * n..(i + 1) * n];
        if gi != 0.0 {
            for j in 0..n {
                grow[j] = gi * x[j];
                grad_in[j] += gi * wrow[j];
            }
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), grad_in)?,
        Tensor::from_vec(&[m, n], grad_w)?,
        Tensor::from_vec(&[m], g.to_vec())?,
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: input.shape().to_vec(),
        data,
    }
}

/// `d relu(x) = 1` for `x > 0`, else 0 (including at the kink).
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::invalid("relu_backward", "shape mismatch"));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor {
        shape: input.shape().to_vec(),
        data,
    })
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    // Clamped one ULP inside [0, 1] so scores stay strictly in (0, 1) even
    // when a logit saturates in f32.
    const HI: f32 = 1.0 - f32::EPSILON / 2.0;
    let data = input
        .data()
        .iter()
        .map(|&v| (1.0 / (1.0 + (-v).exp())).clamp(f32::MIN_POSITIVE, HI))
        .collect();
    Tensor {
        shape: input.shape().to_vec(),
        data,
    }
}

/// Backward pass given the forward *output* `y`: `dy/dx = y (1 - y)`.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if output.shape() != grad_out.shape() {
        return Err(Error::invalid("sigmoid_backward", "shape mismatch"));
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * y * (1.0 - y))
        .collect();
    Ok(Tensor {
        shape: output.shape().to_vec(),
        data,
    })
}

/// Corner-aligned bilinear interpolation of a single-channel map.
pub fn bilinear_resize(input: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3("bilinear_resize")?;
    if c != 1 {
        return Err(Error::invalid("bilinear_resize", "expected a single-channel map"));
    }
    if target_h < 1 || target_w < 1 {
        return Err(Error::invalid("bilinear_resize", "target extents must be >= 1"));
    }
    let src = input.data();
    let sy = if target_h > 1 {
        (h as f64 - 1.0) / (target_h as f64 - 1.0)
    } else {
        0.0
    };
    let sx = if target_w > 1 {
        (w as f64 - 1.0) / (target_w as f64 - 1.0)
    } else {
        0.0
    };
    let mut out = vec![0.0f32; target_h * target_w];
    for ty in 0..target_h {
        let fy = ty as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = (fy - y0 as f64) as f32;
        for tx in 0..target_w {
            let fx = tx as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = (fx - x0 as f64) as f32;
            let v00 = src[y0 * w + x0];
            let v01 = src[y0 * w + x1];
            let v10 = src[y1 * w + x0];
            let v11 = src[y1 * w + x1];
            let top = v00 + (v01 - v00) * wx;
            let bot = v10 + (v11 - v10) * wx;
            out[ty * target_w + tx] = top + (bot - top) * wy;
        }
    }
    Tensor::from_vec(&[1, target_h, target_w], out)
}

/// Zero-mean normalized cross-correlation of two equally sized patches.
/// Returns 0 when either patch has zero variance.
pub fn xcorr2d_normalized(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(
            "xcorr2d_normalized",
            format!("patch shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    if a.is_empty() {
        return Err(Error::invalid("xcorr2d_normalized", "empty patch"));
    }
    let n = a.len() as f64;
    let sum_a: f64 = a.data().iter().map(|&v| v as f64).sum();
    let sum_b: f64 = b.data().iter().map(|&v| v as f64).sum();
    let mean_a = sum_a / n;
    let mean_b = sum_b / n;
    let dot_ab = dot_f64(a.data(), b.data());
    let dot_aa = dot_f64(a.data(), a.data());
    let dot_bb = dot_f64(b.data(), b.data());
    let cov = dot_ab - n * mean_a * mean_b;
    let var_a = dot_aa - n * mean_a * mean_a;
    let var_b = dot_bb - n * mean_b * mean_b;
    if var_a <= 0.0 || var_b <= 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (var_a * var_b).sqrt()).clamp(-1.0, 1.0))
}

/// Mean squared error and its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(
            "mse_loss",
            format!("shapes {:?} and {:?} differ", pred.shape(), target.shape()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::invalid("mse_loss", "empty tensors"));
    }
    let n = pred.len() as f64;
    let mut acc = 0.0f64;
    let mut grad = vec![0.0f32; pred.len()];
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        let d = p - t;
        acc += (d as f64) * (d as f64);
        grad[i] = 2.0 * d / n as f32;
    }
    Ok((acc / n, Tensor::from_vec(pred.shape(), grad)?))
}
