use super::conv::{self, Geometry};
use super::{Element, GradFn, Tensor};
use crate::error::{Error, Result};

fn spatial5(op: &'static str, t: &Tensor<impl Element>) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(t.shape())
        .map_err(|_| Error::shape(op, format!("expected a 5-d [N, C, D, H, W] tensor, got {:?}", t.shape())))
}

fn check_stride(op: &'static str, stride: [usize; 3]) -> Result<()> {
    if stride.contains(&0) {
        return Err(Error::dim(op, format!("stride must be at least 1, got {stride:?}")));
    }
    Ok(())
}

fn check_bias(op: &'static str, bias: Option<&Tensor<impl Element>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(Error::shape(
            op,
            format!("bias must have shape [{channels}], got {:?}", b.shape()),
        )),
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// convolution

struct Conv3dBackward<T: Element> {
    input: Tensor<T>,
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
    geom: Geometry,
    batch: usize,
}

impl<T: Element> GradFn<T> for Conv3dBackward<T> {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        let mut v = vec![self.input.clone(), self.weight.clone()];
        v.extend(self.bias.clone());
        v
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T]) {
        let g = &self.geom;
        let (in_len, out_len) = (g.cin * g.in_vol(), g.cout * g.out_vol());
        let w = self.weight.data();
        self.input.with_grad_mut(|gi| {
            for n in 0..self.batch {
                conv::transposed(
                    &grad[n * out_len..(n + 1) * out_len],
                    g,
                    &w,
                    &mut gi[n * in_len..(n + 1) * in_len],
                );
            }
        });
        let x = self.input.data();
        self.weight.with_grad_mut(|gw| {
            for n in 0..self.batch {
                conv::weight_grad(&x[n * in_len..(n + 1) * in_len], g, &grad[n * out_len..(n + 1) * out_len], gw);
            }
        });
        if let Some(bias) = &self.bias {
            bias.with_grad_mut(|gb| channel_sums(grad, self.batch, g.cout, g.out_vol(), gb));
        }
    }
}

fn channel_sums<T: Element>(grad: &[T], batch: usize, channels: usize, vol: usize, acc: &mut [T]) {
    for n in 0..batch {
        for (c, a) in acc.iter_mut().enumerate().take(channels) {
            let start = (n * channels + c) * vol;
            *a = *a + grad[start..start + vol].iter().copied().sum::<T>();
        }
    }
}

/// Strided, zero-padded 3D cross-correlation.
///
/// `input` is `[N, C_in, D, H, W]`, `weight` is `[C_out, C_in, kD, kH, kW]`
/// and the optional `bias` is `[C_out]`. Each output extent is
/// `floor((in + 2 pad - k) / stride) + 1`.
pub fn conv3d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor<T>> {
    const OP: &str = "conv3d";
    let [n, cin, d, h, w] = spatial5(OP, input)?;
    let [cout, wcin, kd, kh, kw] = spatial5(OP, weight)?;
    if wcin != cin {
        return Err(Error::shape(
            OP,
            format!("input has {cin} channels but weight expects {wcin} (weight shape {:?})", weight.shape()),
        ));
    }
    check_stride(OP, stride)?;
    check_bias(OP, bias, cout)?;
    let (input_ext, kernel) = ([d, h, w], [kd, kh, kw]);
    let mut output = [0; 3];
    for ax in 0..3 {
        output[ax] = conv::output_extent(input_ext[ax], kernel[ax], stride[ax], padding[ax]).ok_or_else(|| {
            Error::dim(
                OP,
                format!(
                    "kernel {kernel:?} larger than padded input {:?} (padding {padding:?})",
                    [d + 2 * padding[0], h + 2 * padding[1], w + 2 * padding[2]]
                ),
            )
        })?;
    }
    let geom = Geometry {
        cin,
        input: input_ext,
        cout,
        kernel,
        stride,
        pad: padding,
        output,
    };
    let (in_len, out_len) = (cin * geom.in_vol(), cout * geom.out_vol());
    let mut out = vec![T::zero(); n * out_len];
    {
        let (x, wd) = (input.data(), weight.data());
        let bd = bias.map(|b| b.data());
        for b in 0..n {
            conv::forward(
                &x[b * in_len..(b + 1) * in_len],
                &geom,
                &wd,
                bd.as_deref(),
                &mut out[b * out_len..(b + 1) * out_len],
            );
        }
    }
    let shape = vec![n, cout, output[0], output[1], output[2]];
    Ok(Tensor::from_op(
        shape,
        out,
        Conv3dBackward {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
            geom,
            batch: n,
        },
    ))
}

struct ConvTransposedBackward<T: Element> {
    input: Tensor<T>,
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
    /// Geometry of the forward convolution this operation is the adjoint of.
    geom: Geometry,
    batch: usize,
}

impl<T: Element> GradFn<T> for ConvTransposedBackward<T> {
    fn name(&self) -> &'static str {
        "conv3d_transposed"
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        let mut v = vec![self.input.clone(), self.weight.clone()];
        v.extend(self.bias.clone());
        v
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T]) {
        let g = &self.geom;
        // The transposed op maps the adjoint geometry's output grid onto its
        // input grid, so its input gradient is the plain convolution.
        let (small, large) = (g.cout * g.out_vol(), g.cin * g.in_vol());
        let w = self.weight.data();
        if self.input.requires_grad() {
            let mut tmp = vec![T::zero(); small];
            self.input.with_grad_mut(|gi| {
                for n in 0..self.batch {
                    conv::forward(&grad[n * large..(n + 1) * large], g, &w, None, &mut tmp);
                    for (a, &b) in gi[n * small..(n + 1) * small].iter_mut().zip(&tmp) {
                        *a = *a + b;
                    }
                }
            });
        }
        let x = self.input.data();
        self.weight.with_grad_mut(|gw| {
            for n in 0..self.batch {
                conv::weight_grad(&grad[n * large..(n + 1) * large], g, &x[n * small..(n + 1) * small], gw);
            }
        });
        if let Some(bias) = &self.bias {
            bias.with_grad_mut(|gb| channel_sums(grad, self.batch, g.cin, g.in_vol(), gb));
        }
    }
}

/// Transposed ("up") convolution, the adjoint of an unpadded [`conv3d`] with
/// the same weight and stride.
///
/// `input` is `[N, C_in, D, H, W]` and `weight` is `[C_in, C_out, kD, kH, kW]`.
/// Each output extent is `(in - 1) * stride + k`.
pub fn conv3d_transposed<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: [usize; 3],
) -> Result<Tensor<T>> {
    const OP: &str = "conv3d_transposed";
    let [n, cin, d, h, w] = spatial5(OP, input)?;
    let [wcin, cout, kd, kh, kw] = spatial5(OP, weight)?;
    if wcin != cin {
        return Err(Error::shape(
            OP,
            format!("input has {cin} channels but weight expects {wcin} (weight shape {:?})", weight.shape()),
        ));
    }
    check_stride(OP, stride)?;
    check_bias(OP, bias, cout)?;
    let small = [d, h, w];
    let kernel = [kd, kh, kw];
    let large: [usize; 3] = std::array::from_fn(|ax| (small[ax] - 1) * stride[ax] + kernel[ax]);
    let geom = Geometry {
        cin: cout,
        input: large,
        cout: cin,
        kernel,
        stride,
        pad: [0; 3],
        output: small,
    };
    let (small_len, large_len) = (cin * geom.out_vol(), cout * geom.in_vol());
    let mut out = vec![T::zero(); n * large_len];
    {
        let (x, wd) = (input.data(), weight.data());
        for b in 0..n {
            let dst = &mut out[b * large_len..(b + 1) * large_len];
            conv::transposed(&x[b * small_len..(b + 1) * small_len], &geom, &wd, dst);
            if let Some(bias) = bias {
                for (row, &bv) in dst.chunks_exact_mut(geom.in_vol()).zip(bias.data().iter()) {
                    row.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        }
    }
    let shape = vec![n, cout, large[0], large[1], large[2]];
    Ok(Tensor::from_op(
        shape,
        out,
        ConvTransposedBackward {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
            geom,
            batch: n,
        },
    ))
}

// ---------------------------------------------------------------------------
// pooling

struct MaxPoolBackward<T: Element> {
    input: Tensor<T>,
    argmax: Vec<usize>,
}

impl<T: Element> GradFn<T> for MaxPoolBackward<T> {
    fn name(&self) -> &'static str {
        "maxpool3d"
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T]) {
        self.input.with_grad_mut(|gi| {
            for (&src, &g) in self.argmax.iter().zip(grad) {
                gi[src] = gi[src] + g;
            }
        });
    }
}

/// Max pooling over `kernel`-sized windows placed every `stride` voxels.
///
/// Returns the pooled tensor and, for every output voxel, the linear index
/// into `input` of the element that won. Ties go to the lowest linear index,
/// and the backward pass routes gradient only to those winners.
pub fn maxpool3d<T: Element>(input: &Tensor<T>, kernel: [usize; 3], stride: [usize; 3]) -> Result<(Tensor<T>, Vec<usize>)> {
    const OP: &str = "maxpool3d";
    let [n, c, d, h, w] = spatial5(OP, input)?;
    check_stride(OP, stride)?;
    let ext = [d, h, w];
    let mut out_ext = [0; 3];
    for ax in 0..3 {
        out_ext[ax] = conv::output_extent(ext[ax], kernel[ax], stride[ax], 0)
            .filter(|_| kernel[ax] > 0)
            .ok_or_else(|| Error::dim(OP, format!("input extents {ext:?} smaller than window {kernel:?}")))?;
    }
    let [od_n, oh_n, ow_n] = out_ext;
    let total = n * c * od_n * oh_n * ow_n;
    let mut out = Vec::with_capacity(total);
    let mut argmax = Vec::with_capacity(total);
    {
        let x = input.data();
        for plane in 0..n * c {
            let base = plane * d * h * w;
            for od in 0..od_n {
                for oh in 0..oh_n {
                    for ow in 0..ow_n {
                        let mut best = base + ((od * stride[0]) * h + oh * stride[1]) * w + ow * stride[2];
                        for a in 0..kernel[0] {
                            for b in 0..kernel[1] {
                                let row = base + ((od * stride[0] + a) * h + oh * stride[1] + b) * w + ow * stride[2];
                                for i in row..row + kernel[2] {
                                    if x[i] > x[best] {
                                        best = i;
                                    }
                                }
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best);
                    }
                }
            }
        }
    }
    let t = Tensor::from_op(
        vec![n, c, od_n, oh_n, ow_n],
        out,
        MaxPoolBackward {
            input: input.clone(),
            argmax: argmax.clone(),
        },
    );
    Ok((t, argmax))
}

// ---------------------------------------------------------------------------
// spatial padding and cropping

/// Copies the overlapping box of two `[N, C, D, H, W]` grids anchored at the
/// origin. `add` accumulates instead of overwriting.
fn copy_box<T: Element>(src: &[T], src_ext: [usize; 3], dst: &mut [T], dst_ext: [usize; 3], planes: usize, add: bool) {
    let box_ext: [usize; 3] = std::array::from_fn(|i| src_ext[i].min(dst_ext[i]));
    let (svol, dvol) = (src_ext.iter().product::<usize>(), dst_ext.iter().product::<usize>());
    for p in 0..planes {
        for z in 0..box_ext[0] {
            for y in 0..box_ext[1] {
                let s = p * svol + (z * src_ext[1] + y) * src_ext[2];
                let d = p * dvol + (z * dst_ext[1] + y) * dst_ext[2];
                let (s, d) = (&src[s..s + box_ext[2]], &mut dst[d..d + box_ext[2]]);
                if add {
                    d.iter_mut().zip(s).for_each(|(a, &b)| *a = *a + b);
                } else {
                    d.copy_from_slice(s);
                }
            }
        }
    }
}

struct BoxBackward<T: Element> {
    input: Tensor<T>,
    name: &'static str,
}

impl<T: Element> GradFn<T> for BoxBackward<T> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }

    fn backward(&self, out: &Tensor<T>, grad: &[T]) {
        let s = self.input.shape();
        let o = out.shape();
        self.input.with_grad_mut(|gi| {
            copy_box(grad, [o[2], o[3], o[4]], gi, [s[2], s[3], s[4]], s[0] * s[1], true);
        });
    }
}

fn resize_box<T: Element>(op: &'static str, x: &Tensor<T>, target: [usize; 3], grow: bool) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = spatial5(op, x)?;
    let ext = [d, h, w];
    for ax in 0..3 {
        let ok = if grow { target[ax] >= ext[ax] } else { target[ax] <= ext[ax] && target[ax] > 0 };
        if !ok {
            return Err(Error::dim(op, format!("cannot map spatial extents {ext:?} to {target:?}")));
        }
    }
    if target == ext {
        return Ok(x.clone());
    }
    let mut out = vec![T::zero(); n * c * target.iter().product::<usize>()];
    copy_box(&x.data(), ext, &mut out, target, n * c, false);
    Ok(Tensor::from_op(
        vec![n, c, target[0], target[1], target[2]],
        out,
        BoxBackward { input: x.clone(), name: op },
    ))
}

/// Zero-pads the high end of each spatial axis up to `target`.
pub fn pad_spatial<T: Element>(x: &Tensor<T>, target: [usize; 3]) -> Result<Tensor<T>> {
    resize_box("pad_spatial", x, target, true)
}

/// Keeps the low corner of each spatial axis, down to `target`.
pub fn crop_spatial<T: Element>(x: &Tensor<T>, target: [usize; 3]) -> Result<Tensor<T>> {
    resize_box("crop_spatial", x, target, false)
}

// ---------------------------------------------------------------------------
// channel concatenation

struct ConcatBackward<T: Element> {
    a: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Element> GradFn<T> for ConcatBackward<T> {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.a.clone(), self.b.clone()]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T]) {
        let n = self.a.shape()[0];
        let (la, lb) = (self.a.numel() / n, self.b.numel() / n);
        self.a.with_grad_mut(|ga| {
            for i in 0..n {
                add_into(&mut ga[i * la..(i + 1) * la], &grad[i * (la + lb)..i * (la + lb) + la]);
            }
        });
        self.b.with_grad_mut(|gb| {
            for i in 0..n {
                add_into(&mut gb[i * lb..(i + 1) * lb], &grad[i * (la + lb) + la..(i + 1) * (la + lb)]);
            }
        });
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
}

/// Concatenates along the channel axis (axis 1). Every other extent must
/// agree.
pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::shape(
            "concat_channels",
            format!("all extents except channels must match, got {sa:?} and {sb:?}"),
        ));
    }
    let n = sa[0];
    let (la, lb) = (a.numel() / n, b.numel() / n);
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    {
        let (da, db) = (a.data(), b.data());
        for i in 0..n {
            out.extend_from_slice(&da[i * la..(i + 1) * la]);
            out.extend_from_slice(&db[i * lb..(i + 1) * lb]);
        }
    }
    let mut shape = sa.to_vec();
    shape[1] += sb[1];
    Ok(Tensor::from_op(shape, out, ConcatBackward { a: a.clone(), b: b.clone() }))
}

// ---------------------------------------------------------------------------
// elementwise

#[derive(Clone, Copy)]
enum UnaryKind {
    Relu,
    Sigmoid,
}

struct Unary<T: Element> {
    input: Tensor<T>,
    kind: UnaryKind,
}

impl<T: Element> GradFn<T> for Unary<T> {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
        }
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }

    fn backward(&self, out: &Tensor<T>, grad: &[T]) {
        let kind = self.kind;
        self.input.with_grad_mut(|gi| match kind {
            UnaryKind::Relu => {
                let x = self.input.data();
                for ((g, &up), &x) in gi.iter_mut().zip(grad).zip(x.iter()) {
                    if x > T::zero() {
                        *g = *g + up;
                    }
                }
            }
            UnaryKind::Sigmoid => {
                let y = out.data();
                for ((g, &up), &y) in gi.iter_mut().zip(grad).zip(y.iter()) {
                    *g = *g + up * (y * (T::one() - y));
                }
            }
        });
    }
}

pub(crate) fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let out = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_op(x.shape().to_vec(), out, Unary { input: x.clone(), kind: UnaryKind::Relu })
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub(crate) fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let out = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor::from_op(x.shape().to_vec(), out, Unary { input: x.clone(), kind: UnaryKind::Sigmoid })
}

struct Scale<T: Element> {
    input: Tensor<T>,
    factor: T,
}

impl<T: Element> GradFn<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "mul_scalar"
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T]) {
        self.input.with_grad_mut(|gi| {
            gi.iter_mut().zip(grad).for_each(|(a, &g)| *a = *a + g * self.factor);
        });
    }
}

pub(crate) fn mul_scalar<T: Element>(x: &Tensor<T>, s: T) -> Tensor<T> {
    let out = x.data().iter().map(|&v| v * s).collect();
    Tensor::from_op(x.shape().to_vec(), out, Scale { input: x.clone(), factor: s })
}

struct AddBackward<T: Element> {
    a: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Element> GradFn<T> for AddBackward<T> {
    fn name(&self) -> &'static str {
        "add"
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.a.clone(), self.b.clone()]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T]) {
        self.a.accumulate_grad(grad);
        self.b.accumulate_grad(grad);
    }
}

pub(crate) fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let out = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), out, AddBackward { a: a.clone(), b: b.clone() }))
}

struct MeanBackward<T: Element> {
    input: Tensor<T>,
}

impl<T: Element> GradFn<T> for MeanBackward<T> {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T]) {
        let g = grad[0] / T::from_f64_lossy(self.input.numel() as f64);
        self.input.with_grad_mut(|gi| gi.iter_mut().for_each(|a| *a = *a + g));
    }
}

pub(crate) fn mean<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s: T = x.data().iter().copied().sum();
    let m = s / T::from_f64_lossy(x.numel() as f64);
    Tensor::from_op(vec![1], vec![m], MeanBackward { input: x.clone() })
}

pub(crate) struct Reshape<T: Element> {
    pub input: Tensor<T>,
}

impl<T: Element> GradFn<T> for Reshape<T> {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T]) {
        self.input.accumulate_grad(grad);
    }
}
