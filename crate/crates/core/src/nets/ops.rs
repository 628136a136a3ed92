//! Tensor primitives on `N×H×W×C` activations.
//!
//! 3×3 convolutions go through an explicit im2col custom op followed by a
//! matmul; candle's native conv backward is several times slower on CPU for
//! the small channel counts used here.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Result, Shape, Tensor, D};

fn im2col_kernel<T: Copy + Default>(x: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::default(); b * h * w * 9 * c];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * 9 * c;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (dy * 3 + dx) * c;
                        out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

fn col2im_kernel<T: Copy + Default + std::ops::AddAssign>(
    col: &[T],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Vec<T> {
    let mut out = vec![T::default(); b * h * w * c];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * 9 * c;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (dy * 3 + dx) * c;
                        for k in 0..c {
                            out[dst + k] += col[src + k];
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

/// `N×H×W×C → N×(H·W)×(9·C)` with zero padding 1; columns ordered `(dy, dx, c)`.
struct Im2Col;

/// Adjoint of [`Im2Col`] for an `h×w` grid.
struct Col2Im {
    h: usize,
    w: usize,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = layout.shape().dims4()?;
        let out_shape = Shape::from((b, h * w, 9 * c));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_kernel(contiguous_slice(v, layout)?, b, h, w, c)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_kernel(contiguous_slice(v, layout)?, b, h, w, c)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, out_shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let (_, h, w, _) = arg.dims4()?;
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im { h, w })?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, hw, c9) = layout.shape().dims3()?;
        if hw != self.h * self.w || c9 % 9 != 0 {
            candle_core::bail!("col2im: shape {:?} does not match {}x{}", layout.shape(), self.h, self.w);
        }
        let c = c9 / 9;
        let out_shape = Shape::from((b, self.h, self.w, c));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_kernel(contiguous_slice(v, layout)?, b, self.h, self.w, c)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_kernel(contiguous_slice(v, layout)?, b, self.h, self.w, c)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, out_shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col)?))
    }
}

/// 3×3 patches of an NHWC tensor: `N×(H·W)×(9·C)`.
pub fn im2col3x3(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Im2Col)
}

/// `x + bias` with `bias` broadcast along the last dim.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&bias.contiguous()?, BiasAdd)
}

struct BiasAdd;

/// Column sums of an `R×C` gradient, giving the bias gradient.
struct ColumnSum;

fn bias_add_kernel<T: Scalar>(x: &[T], b: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(b.len()) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
    out
}

fn column_sum_kernel<T: Scalar>(g: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::default(); c];
    for row in g.chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias_add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let c = l1.shape().dims().last().copied().unwrap_or(0);
        if l2.shape().dims() != [c] {
            candle_core::bail!("bias add: {:?} vs {:?}", l1.shape(), l2.shape());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => {
                CpuStorage::F32(bias_add_kernel(contiguous_slice(x, l1)?, contiguous_slice(b, l2)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(b)) => {
                CpuStorage::F64(bias_add_kernel(contiguous_slice(x, l1)?, contiguous_slice(b, l2)?))
            }
            (a, b) => candle_core::bail!("bias add: unsupported dtypes {:?}/{:?}", a.dtype(), b.dtype()),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, _b: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        Ok((Some(grad.clone()), Some(grad.contiguous()?.apply_op1(ColumnSum)?)))
    }
}

impl CustomOp1 for ColumnSum {
    fn name(&self) -> &'static str {
        "column_sum"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let c = match layout.shape().dims().last() {
            Some(&c) if c > 0 => c,
            _ => candle_core::bail!("column sum: bad shape {:?}", layout.shape()),
        };
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(column_sum_kernel(contiguous_slice(v, layout)?, c)),
            CpuStorage::F64(v) => CpuStorage::F64(column_sum_kernel(contiguous_slice(v, layout)?, c)),
            other => candle_core::bail!("column sum: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from(c)))
    }
}

/// Dense 3×3 convolution, stride 1, zero padding 1. `weight` is `(9·Cin)×Cout`.
pub fn conv3x3(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let cols = im2col3x3(x)?.reshape((b * h * w, 9 * c))?;
    let mut y = cols.matmul(weight)?;
    if let Some(bias) = bias {
        y = add_bias(&y, bias)?;
    }
    y.reshape((b, h, w, ()))
}

/// Pointwise convolution. `weight` is `Cin×Cout`.
pub fn conv1x1(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let mut y = x.reshape((b * h * w, c))?.matmul(weight)?;
    if let Some(bias) = bias {
        y = add_bias(&y, bias)?;
    }
    y.reshape((b, h, w, ()))
}

/// Depthwise 3×3 convolution. `weight` is `9×C`.
pub fn depthwise3x3(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = x.contiguous()?.apply_op2(&weight.contiguous()?, Depthwise)?;
    match bias {
        Some(bias) => add_bias(&y, bias),
        None => Ok(y),
    }
}

trait Scalar: Copy + Default + std::ops::Mul<Output = Self> + std::ops::AddAssign {}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Visits every in-bounds `(output offset, input offset, tap)` triple of a
/// 3×3 stencil with zero padding, one pixel row of `c` channels at a time.
fn for_each_tap(b: usize, h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize)) {
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let dst = ((bi * h + y) * w + xx) * c;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        f(dst, ((bi * h + sy as usize) * w + sx as usize) * c, dy * 3 + dx);
                    }
                }
            }
        }
    }
}

enum DepthwiseKernel {
    /// `y[p] = Σ_k w[k]·x[p + k]`.
    Forward,
    /// Adjoint in the input: `x[p + k] += w[k]·g[p]`.
    InputGrad,
    /// `∂w[k] = Σ_p x[p + k]·g[p]`.
    WeightGrad,
}

fn depthwise_kernel<T: Scalar>(kind: &DepthwiseKernel, a: &[T], b2: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (b, h, w, c) = dims;
    match kind {
        DepthwiseKernel::Forward => {
            let mut out = vec![T::default(); b * h * w * c];
            for_each_tap(b, h, w, c, |dst, src, k| {
                let wk = &b2[k * c..(k + 1) * c];
                for ch in 0..c {
                    out[dst + ch] += wk[ch] * a[src + ch];
                }
            });
            out
        }
        DepthwiseKernel::InputGrad => {
            let mut out = vec![T::default(); b * h * w * c];
            for_each_tap(b, h, w, c, |dst, src, k| {
                let wk = &b2[k * c..(k + 1) * c];
                for ch in 0..c {
                    out[src + ch] += wk[ch] * a[dst + ch];
                }
            });
            out
        }
        DepthwiseKernel::WeightGrad => {
            let mut out = vec![T::default(); 9 * c];
            for_each_tap(b, h, w, c, |dst, src, k| {
                let gk = &mut out[k * c..(k + 1) * c];
                for ch in 0..c {
                    gk[ch] += a[src + ch] * b2[dst + ch];
                }
            });
            out
        }
    }
}

fn apply_depthwise(
    kind: DepthwiseKernel,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    dims: (usize, usize, usize, usize),
) -> Result<CpuStorage> {
    Ok(match (s1, s2) {
        (CpuStorage::F32(a), CpuStorage::F32(b)) => {
            CpuStorage::F32(depthwise_kernel(&kind, contiguous_slice(a, l1)?, contiguous_slice(b, l2)?, dims))
        }
        (CpuStorage::F64(a), CpuStorage::F64(b)) => {
            CpuStorage::F64(depthwise_kernel(&kind, contiguous_slice(a, l1)?, contiguous_slice(b, l2)?, dims))
        }
        (a, b) => candle_core::bail!("depthwise: unsupported dtypes {:?}/{:?}", a.dtype(), b.dtype()),
    })
}

/// Depthwise 3×3 convolution of `N×H×W×C` by a `9×C` kernel.
struct Depthwise;

/// Input gradient of [`Depthwise`]: arguments are the output gradient and
/// the kernel.
struct DepthwiseInputGrad;

/// Kernel gradient of [`Depthwise`]: arguments are the input and the
/// output gradient.
struct DepthwiseWeightGrad;

fn check_kernel(layout: &Layout, c: usize) -> Result<()> {
    if layout.shape().dims() != [9, c] {
        candle_core::bail!("depthwise kernel {:?} does not match {c} channels", layout.shape());
    }
    Ok(())
}

impl CustomOp2 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise3x3"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        check_kernel(l2, dims.3)?;
        Ok((apply_depthwise(DepthwiseKernel::Forward, s1, l1, s2, l2, dims)?, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, weight: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2(weight, DepthwiseInputGrad)?;
        let gw = x.apply_op2(&grad, DepthwiseWeightGrad)?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for DepthwiseInputGrad {
    fn name(&self) -> &'static str {
        "depthwise3x3_input_grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        check_kernel(l2, dims.3)?;
        Ok((apply_depthwise(DepthwiseKernel::InputGrad, s1, l1, s2, l2, dims)?, l1.shape().clone()))
    }
}

impl CustomOp2 for DepthwiseWeightGrad {
    fn name(&self) -> &'static str {
        "depthwise3x3_weight_grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        if l2.shape() != l1.shape() {
            candle_core::bail!("depthwise weight grad: {:?} vs {:?}", l1.shape(), l2.shape());
        }
        Ok((apply_depthwise(DepthwiseKernel::WeightGrad, s1, l1, s2, l2, dims)?, Shape::from((9, dims.3))))
    }
}

/// `N×H×W×C → N×(H/f)×(W/f)×(f²·C)`.
pub fn pixel_unshuffle(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % factor != 0 || w % factor != 0 {
        candle_core::bail!("pixel_unshuffle: {h}x{w} not divisible by {factor}");
    }
    x.reshape((b, h / factor, factor, w / factor, factor, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h / factor, w / factor, factor * factor * c))
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if c % (factor * factor) != 0 {
        candle_core::bail!("pixel_shuffle: {c} channels not divisible by {}", factor * factor);
    }
    let oc = c / (factor * factor);
    x.reshape((b, h, w, factor, factor, oc))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h * factor, w * factor, oc))
}

/// 2×2 max pooling.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    x.reshape((b, h / 2, 2, w / 2, 2, c))?.max(4)?.max(2)
}

/// Mean over the spatial dims: `N×H×W×C → N×C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    x.reshape((b, h * w, c))?.mean(1)
}

/// Layer norm over the channel (last) dim.
pub fn channel_layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    x.contiguous()?
        .apply_op3(&weight.contiguous()?, &bias.contiguous()?, LayerNormLast { eps })
}

trait Real: Scalar + std::ops::Add<Output = Self> + std::ops::Sub<Output = Self> {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn tanh(self) -> Self;
}

impl Real for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn tanh(self) -> Self {
        // libm tanhf is several times slower than expf here.
        1.0 - 2.0 / ((2.0 * self.clamp(-15.0, 15.0)).exp() + 1.0)
    }
}

impl Real for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// `w ⊙ (x − mean) / sqrt(var + eps) + b` over the last dim.
struct LayerNormLast {
    eps: f64,
}

/// Gradients of [`LayerNormLast`] for arguments `(x, w, g)`, packed as the
/// input gradient followed by the weight and bias gradients.
struct LayerNormLastGrad {
    eps: f64,
}

fn row_stats<T: Real>(row: &[T], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn layer_norm_kernel<T: Real>(x: &[T], w: &[T], b: &[T], eps: f64) -> Vec<T> {
    let c = w.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let (mean, rstd) = row_stats(row, eps);
        let (mean, rstd) = (T::from_f64(mean), T::from_f64(rstd));
        out.extend(row.iter().zip(w).zip(b).map(|((&v, &wv), &bv)| (v - mean) * rstd * wv + bv));
    }
    out
}

fn layer_norm_grad_kernel<T: Real>(x: &[T], w: &[T], g: &[T], eps: f64) -> Vec<T> {
    let c = w.len();
    let mut out = vec![T::default(); x.len() + 2 * c];
    let (gx, gwb) = out.split_at_mut(x.len());
    let (gw, gb) = gwb.split_at_mut(c);
    let mut y = vec![0.0; c];
    let mut gy = vec![0.0; c];
    for ((row, grow), gxrow) in x.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
        let (mean, rstd) = row_stats(row, eps);
        let mut gy_mean = 0.0;
        let mut gyy_mean = 0.0;
        for k in 0..c {
            y[k] = (row[k].to_f64() - mean) * rstd;
            gy[k] = grow[k].to_f64() * w[k].to_f64();
            gy_mean += gy[k];
            gyy_mean += gy[k] * y[k];
            gw[k] += T::from_f64(grow[k].to_f64() * y[k]);
            gb[k] += grow[k];
        }
        gy_mean /= c as f64;
        gyy_mean /= c as f64;
        for k in 0..c {
            gxrow[k] = T::from_f64(rstd * (gy[k] - gy_mean - y[k] * gyy_mean));
        }
    }
    out
}

fn check_norm_args(lx: &Layout, lw: &Layout, other: &Layout, other_is_x: bool) -> Result<usize> {
    let c = match lx.shape().dims().last() {
        Some(&c) if c > 0 => c,
        _ => candle_core::bail!("layer norm: bad input shape {:?}", lx.shape()),
    };
    let other_ok = if other_is_x { other.shape() == lx.shape() } else { other.shape().dims() == [c] };
    if lw.shape().dims() != [c] || !other_ok {
        candle_core::bail!("layer norm: shapes {:?}, {:?}, {:?}", lx.shape(), lw.shape(), other.shape());
    }
    Ok(c)
}

impl CustomOp3 for LayerNormLast {
    fn name(&self) -> &'static str {
        "layer_norm_last"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        check_norm_args(l1, l2, l3, false)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => CpuStorage::F32(layer_norm_kernel(
                contiguous_slice(x, l1)?,
                contiguous_slice(w, l2)?,
                contiguous_slice(b, l3)?,
                self.eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => CpuStorage::F64(layer_norm_kernel(
                contiguous_slice(x, l1)?,
                contiguous_slice(w, l2)?,
                contiguous_slice(b, l3)?,
                self.eps,
            )),
            _ => candle_core::bail!("layer norm: unsupported or mixed dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let n = x.elem_count();
        let c = w.elem_count();
        let packed = x.apply_op3(w, &grad.contiguous()?, LayerNormLastGrad { eps: self.eps })?;
        Ok((
            Some(packed.narrow(0, 0, n)?.reshape(x.shape())?),
            Some(packed.narrow(0, n, c)?),
            Some(packed.narrow(0, n + c, c)?),
        ))
    }
}

impl CustomOp3 for LayerNormLastGrad {
    fn name(&self) -> &'static str {
        "layer_norm_last_grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let c = check_norm_args(l1, l2, l3, true)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(g)) => CpuStorage::F32(layer_norm_grad_kernel(
                contiguous_slice(x, l1)?,
                contiguous_slice(w, l2)?,
                contiguous_slice(g, l3)?,
                self.eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(g)) => CpuStorage::F64(layer_norm_grad_kernel(
                contiguous_slice(x, l1)?,
                contiguous_slice(w, l2)?,
                contiguous_slice(g, l3)?,
                self.eps,
            )),
            _ => candle_core::bail!("layer norm grad: unsupported or mixed dtypes"),
        };
        Ok((out, Shape::from(l1.shape().elem_count() + 2 * c)))
    }
}

/// Tanh-approximated GELU and its derivative.
fn gelu_and_slope<T: Real>(a: T) -> (T, T) {
    let k = T::from_f64(0.797_884_560_802_865_4);
    let c = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let one = T::from_f64(1.0);
    let three = T::from_f64(3.0);
    let t = (k * (a + c * a * a * a)).tanh();
    let value = half * a * (one + t);
    let slope = half * (one + t) + half * a * (one - t * t) * k * (one + three * c * a * a);
    (value, slope)
}

/// `gelu(a) ⊙ b` for two tensors of equal shape.
pub fn gelu_gate(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.contiguous()?.apply_op2(&b.contiguous()?, GeluGate)
}

struct GeluGate;

/// Gradients of [`GeluGate`] packed along a new leading axis of size 2;
/// the arguments are `cat([a, b])` and the output gradient.
struct GeluGateGrad;

fn gelu_gate_kernel<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| gelu_and_slope(x).0 * y).collect()
}

fn gelu_gate_grad_kernel<T: Real>(ab: &[T], g: &[T]) -> Vec<T> {
    let (a, b) = ab.split_at(g.len());
    let mut out = Vec::with_capacity(2 * g.len());
    out.extend(a.iter().zip(b).zip(g).map(|((&x, &y), &gv)| gelu_and_slope(x).1 * y * gv));
    out.extend(a.iter().zip(g).map(|(&x, &gv)| gelu_and_slope(x).0 * gv));
    out
}

impl CustomOp2 for GeluGate {
    fn name(&self) -> &'static str {
        "gelu_gate"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        if l1.shape() != l2.shape() {
            candle_core::bail!("gelu gate: {:?} vs {:?}", l1.shape(), l2.shape());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32(gelu_gate_kernel(contiguous_slice(a, l1)?, contiguous_slice(b, l2)?))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64(gelu_gate_kernel(contiguous_slice(a, l1)?, contiguous_slice(b, l2)?))
            }
            (a, b) => candle_core::bail!("gelu gate: unsupported dtypes {:?}/{:?}", a.dtype(), b.dtype()),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, a: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let packed = Tensor::stack(&[a, b], 0)?.apply_op2(&grad.contiguous()?, GeluGateGrad)?;
        Ok((Some(packed.get(0)?), Some(packed.get(1)?)))
    }
}

impl CustomOp2 for GeluGateGrad {
    fn name(&self) -> &'static str {
        "gelu_gate_grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        if l1.shape().elem_count() != 2 * l2.shape().elem_count() {
            candle_core::bail!("gelu gate grad: {:?} vs {:?}", l1.shape(), l2.shape());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(ab), CpuStorage::F32(g)) => {
                CpuStorage::F32(gelu_gate_grad_kernel(contiguous_slice(ab, l1)?, contiguous_slice(g, l2)?))
            }
            (CpuStorage::F64(ab), CpuStorage::F64(g)) => {
                CpuStorage::F64(gelu_gate_grad_kernel(contiguous_slice(ab, l1)?, contiguous_slice(g, l2)?))
            }
            (a, b) => candle_core::bail!("gelu gate grad: unsupported dtypes {:?}/{:?}", a.dtype(), b.dtype()),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// `logit(clamp(x, eps, 1 − eps))`, mapping images into an unbounded space.
pub fn logit(x: &Tensor, eps: f64) -> Result<Tensor> {
    let x = x.clamp(eps, 1.0 - eps)?;
    let one_minus = x.affine(-1.0, 1.0)?;
    (x / one_minus)?.log()
}

/// Mean absolute difference over all elements.
pub fn l1_mean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    (a - b)?.abs()?.mean_all()
}

/// Soft-target cross entropy per row: `−Σ_c y_c log softmax(z)_c`, `N×K → N`.
pub fn soft_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    (targets * log_probs)?.sum(D::Minus1)?.neg()
}

pub fn dtype_eps(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-12,
        _ => 1e-6,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn reference_conv(x: &[f64], w: &[f64], b: usize, h: usize, wd: usize, ci: usize, co: usize) -> Vec<f64> {
        let mut out = vec![0.0; b * h * wd * co];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..wd {
                    for o in 0..co {
                        let mut s = 0.0;
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let sy = y as isize + dy as isize - 1;
                                let sx = xx as isize + dx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                for i in 0..ci {
                                    let xv = x[((bi * h + sy as usize) * wd + sx as usize) * ci + i];
                                    s += xv * w[((dy * 3 + dx) * ci + i) * co + o];
                                }
                            }
                        }
                        out[((bi * h + y) * wd + xx) * co + o] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3x3_matches_direct_sum() {
        let dev = Device::Cpu;
        let (b, h, w, ci, co) = (2, 5, 4, 3, 2);
        let xs: Vec<f64> = (0..b * h * w * ci).map(|i| ((i * 37) % 11) as f64 / 7.0 - 0.5).collect();
        let ws: Vec<f64> = (0..9 * ci * co).map(|i| ((i * 13) % 7) as f64 / 5.0 - 0.6).collect();
        let x = Tensor::from_vec(xs.clone(), (b, h, w, ci), &dev).unwrap();
        let wt = Tensor::from_vec(ws.clone(), (9 * ci, co), &dev).unwrap();
        let y: Vec<f64> = conv3x3(&x, &wt, None).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let r = reference_conv(&xs, &ws, b, h, w, ci, co);
        for (a, e) in y.iter().zip(&r) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn depthwise_matches_patch_formulation_with_gradients() {
        let dev = Device::Cpu;
        let x = Var::rand(-1.0f64, 1.0, (2, 5, 4, 3), &dev).unwrap();
        let w = Var::rand(-1.0f64, 1.0, (9, 3), &dev).unwrap();
        let g = Tensor::rand(-1.0f64, 1.0, (2, 5, 4, 3), &dev).unwrap();
        let patches = |x: &Tensor, w: &Tensor| {
            im2col3x3(x).unwrap().reshape((2, 20, 9, 3)).unwrap().broadcast_mul(w).unwrap().sum(2).unwrap().reshape((2, 5, 4, 3)).unwrap()
        };
        let fast = depthwise3x3(x.as_tensor(), w.as_tensor(), None).unwrap();
        let slow = patches(x.as_tensor(), w.as_tensor());
        let diff = (&fast - &slow).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
        let gf = (fast * &g).unwrap().sum_all().unwrap().backward().unwrap();
        let gs = (slow * &g).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w] {
            let a = gf.get(v.as_tensor()).unwrap();
            let b = gs.get(v.as_tensor()).unwrap();
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-12);
        }
    }

    /// Gradients of `Σ g ⊙ f(inputs)` for a custom op and its plain
    /// composition agree.
    fn assert_same_grads(fast: &Tensor, slow: &Tensor, g: &Tensor, vars: &[&Var]) {
        let d = (fast - slow).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-10, "forward differs by {d}");
        let gf = (fast * g).unwrap().sum_all().unwrap().backward().unwrap();
        let gs = (slow * g).unwrap().sum_all().unwrap().backward().unwrap();
        for v in vars {
            let a = gf.get(v.as_tensor()).unwrap();
            let b = gs.get(v.as_tensor()).unwrap();
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-10, "gradient differs by {d}");
        }
    }

    #[test]
    fn layer_norm_matches_composition() {
        let dev = Device::Cpu;
        let x = Var::rand(-2.0f64, 2.0, (2, 3, 4, 5), &dev).unwrap();
        let w = Var::rand(0.5f64, 1.5, 5, &dev).unwrap();
        let b = Var::rand(-0.5f64, 0.5, 5, &dev).unwrap();
        let g = Tensor::rand(-1.0f64, 1.0, (2, 3, 4, 5), &dev).unwrap();
        let fast = channel_layer_norm(x.as_tensor(), w.as_tensor(), b.as_tensor(), 1e-5).unwrap();
        let xt = x.as_tensor();
        let mean = xt.mean_keepdim(D::Minus1).unwrap();
        let centered = xt.broadcast_sub(&mean).unwrap();
        let var = centered.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        let slow = centered
            .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(w.as_tensor())
            .unwrap()
            .broadcast_add(b.as_tensor())
            .unwrap();
        assert_same_grads(&fast, &slow, &g, &[&x, &w, &b]);
    }

    #[test]
    fn gelu_gate_matches_composition() {
        let dev = Device::Cpu;
        let a = Var::rand(-3.0f64, 3.0, (2, 3, 4, 5), &dev).unwrap();
        let b = Var::rand(-1.0f64, 1.0, (2, 3, 4, 5), &dev).unwrap();
        let g = Tensor::rand(-1.0f64, 1.0, (2, 3, 4, 5), &dev).unwrap();
        let fast = gelu_gate(a.as_tensor(), b.as_tensor()).unwrap();
        let slow = (a.as_tensor().gelu().unwrap() * b.as_tensor()).unwrap();
        let d = (&fast - &slow).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
        let grads = (fast * &g).unwrap().sum_all().unwrap().backward().unwrap();
        let ga: Vec<f64> = grads.get(a.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let gb: Vec<f64> = grads.get(b.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let av: Vec<f64> = a.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let bv: Vec<f64> = b.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let gv: Vec<f64> = g.flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for i in 0..av.len() {
            let (fp, _) = gelu_and_slope(av[i] + h);
            let (fm, _) = gelu_and_slope(av[i] - h);
            let (f0, _) = gelu_and_slope(av[i]);
            assert!((ga[i] - gv[i] * bv[i] * (fp - fm) / (2.0 * h)).abs() < 1e-8);
            assert!((gb[i] - gv[i] * f0).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_add_matches_broadcast() {
        let dev = Device::Cpu;
        let x = Var::rand(-1.0f64, 1.0, (2, 3, 4), &dev).unwrap();
        let b = Var::rand(-1.0f64, 1.0, 4, &dev).unwrap();
        let g = Tensor::rand(-1.0f64, 1.0, (2, 3, 4), &dev).unwrap();
        let fast = add_bias(x.as_tensor(), b.as_tensor()).unwrap();
        let slow = x.as_tensor().broadcast_add(b.as_tensor()).unwrap();
        assert_same_grads(&fast, &slow, &g, &[&x, &b]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), g> == <x, col2im(g)>
        let dev = Device::Cpu;
        let x = Tensor::rand(-1.0f64, 1.0, (2, 3, 4, 2), &dev).unwrap();
        let g = Tensor::rand(-1.0f64, 1.0, (2, 12, 18), &dev).unwrap();
        let lhs = (im2col3x3(&x).unwrap() * &g).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let back = g.apply_op1(Col2Im { h: 3, w: 4 }).unwrap();
        let rhs = (x * back).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_gradient_matches_finite_difference() {
        let dev = Device::Cpu;
        let x = Var::rand(-1.0f64, 1.0, (1, 4, 4, 2), &dev).unwrap();
        let w = Tensor::rand(-1.0f64, 1.0, (18, 3), &dev).unwrap();
        let loss = |t: &Tensor| conv3x3(t, &w, None).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss(x.as_tensor()).backward().unwrap();
        let g: Vec<f64> = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = x.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        for idx in [0usize, 5, 17, 31] {
            let eps = 1e-6;
            let mut plus = base.clone();
            plus[idx] += eps;
            let mut minus = base.clone();
            minus[idx] -= eps;
            let f = |v: Vec<f64>| {
                loss(&Tensor::from_vec(v, (1, 4, 4, 2), &dev).unwrap()).to_scalar::<f64>().unwrap()
            };
            let fd = (f(plus) - f(minus)) / (2.0 * eps);
            assert!((fd - g[idx]).abs() <= 1e-6 * fd.abs().max(1.0), "idx {idx}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn shuffle_round_trip() {
        let dev = Device::Cpu;
        let x = Tensor::rand(0f32, 1.0, (2, 4, 6, 3), &dev).unwrap();
        let y = pixel_shuffle(&pixel_unshuffle(&x, 2).unwrap(), 2).unwrap();
        let d = (x - y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn soft_ce_one_hot_perfect_is_zero() {
        let dev = Device::Cpu;
        let logits = Tensor::new(&[[1000.0f64, 0.0]], &dev).unwrap();
        let t = Tensor::new(&[[1.0f64, 0.0]], &dev).unwrap();
        let l = soft_cross_entropy(&logits, &t).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(l[0], 0.0);
    }
}
