//! Stride-1 "same" convolution with zero padding.
//!
//! Inputs are copied into zero-padded planes whose width is rounded up to a
//! whole number of column tiles, so the inner loops run without bounds or
//! border checks. The forward pass and the input gradient share one
//! register-tiled direct kernel (the input gradient is the forward
//! convolution of the output gradient with flipped, transposed weights).
//! On x86-64 the kernels are compiled a second time with AVX2 enabled and
//! picked at run time; both builds perform the same IEEE operations in the
//! same order, so results do not depend on the path taken.

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Output columns per register tile.
const CW: usize = 16;
/// Padded row widths are a multiple of this (and of `CW`).
const ROW_ALIGN: usize = 32;
/// Output channels per register tile.
const OB: usize = 4;
/// Independent lanes of the weight-gradient accumulators; enough to hide
/// the latency of the add chain.
const GW: usize = 32;

/// Padded-plane geometry shared by every buffer of one convolution.
#[derive(Clone, Copy, Debug)]
struct Layout {
    height: usize,
    width: usize,
    kernel: usize,
    pad: usize,
    /// Width rounded up to a multiple of `ROW_ALIGN`.
    cols: usize,
    /// Row stride of a padded plane.
    stride: usize,
    plane: usize,
}

impl Layout {
    fn new(height: usize, width: usize, kernel: usize) -> Self {
        let pad = kernel / 2;
        let cols = width.div_ceil(ROW_ALIGN) * ROW_ALIGN;
        let stride = cols + 2 * pad;
        Self {
            height,
            width,
            kernel,
            pad,
            cols,
            stride,
            plane: (height + 2 * pad) * stride,
        }
    }
}

/// Copies `channels` planes of `src` into zero-padded planes.
fn pad_planes<T: Float>(src: &[T], channels: usize, l: &Layout) -> Vec<T> {
    let (h, w) = (l.height, l.width);
    let mut out = vec![T::zero(); channels * l.plane];
    for c in 0..channels {
        for r in 0..h {
            let dst = c * l.plane + (r + l.pad) * l.stride + l.pad;
            out[dst..dst + w].copy_from_slice(&src[(c * h + r) * w..(c * h + r + 1) * w]);
        }
    }
    out
}

/// Packs weights as `[block][in][ki][kj][OB]`, zero-filling the lanes past
/// the last output channel.
fn pack_weights<T: Float>(
    outputs: usize,
    inputs: usize,
    k: usize,
    get: impl Fn(usize, usize, usize, usize) -> T,
) -> Vec<T> {
    let blocks = outputs.div_ceil(OB);
    let mut packed = vec![T::zero(); blocks * inputs * k * k * OB];
    for oc in 0..outputs {
        let (b, ob) = (oc / OB, oc % OB);
        for ic in 0..inputs {
            for ki in 0..k {
                for kj in 0..k {
                    packed[(((b * inputs + ic) * k + ki) * k + kj) * OB + ob] = get(oc, ic, ki, kj);
                }
            }
        }
    }
    packed
}

/// `out[o][r][c] = bias[o] + Σ w[o][i][ki][kj] · xp[i][r + ki][c + kj]`
/// for every output channel, with `xp` in padded layout and `out` plain.
#[inline(always)]
fn direct_conv<T: Float>(
    xp: &[T],
    inputs: usize,
    l: &Layout,
    packed: &[T],
    outputs: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (h, w, k) = (l.height, l.width, l.kernel);
    let taps = inputs * k * k;
    for b in 0..outputs.div_ceil(OB) {
        let wb = &packed[b * taps * OB..(b + 1) * taps * OB];
        let live = OB.min(outputs - b * OB);
        for r in 0..h {
            for col0 in (0..w).step_by(CW) {
                let mut acc = [[T::zero(); CW]; OB];
                for ic in 0..inputs {
                    for ki in 0..k {
                        let base = ic * l.plane + (r + ki) * l.stride + col0;
                        for kj in 0..k {
                            let xs: &[T; CW] = xp[base + kj..base + kj + CW].try_into().unwrap();
                            let t = ((ic * k + ki) * k + kj) * OB;
                            let wv: &[T; OB] = wb[t..t + OB].try_into().unwrap();
                            for ob in 0..OB {
                                for lane in 0..CW {
                                    acc[ob][lane] = acc[ob][lane] + wv[ob] * xs[lane];
                                }
                            }
                        }
                    }
                }
                let n = CW.min(w - col0);
                for (ob, row) in acc.iter().enumerate().take(live) {
                    let oc = b * OB + ob;
                    let shift = bias.map_or(T::zero(), |bs| bs[oc]);
                    let dst = &mut out[(oc * h + r) * w + col0..][..n];
                    for (d, &a) in dst.iter_mut().zip(row) {
                        *d = a + shift;
                    }
                }
            }
        }
    }
}

/// Accumulates per-lane partial sums of
/// `dw[o][i][ki][kj] = Σ dy[o][r][c] · xp[i][r + ki][c + kj]` into `acc`,
/// laid out as `[o][i][ki][kj][GW]`.
#[inline(always)]
fn weight_grad<T: Float>(
    xp: &[T],
    inputs: usize,
    dyp: &[T],
    outputs: usize,
    l: &Layout,
    acc: &mut [T],
) {
    let k = l.kernel;
    for r in 0..l.height {
        for oc in 0..outputs {
            let start = oc * l.plane + (r + l.pad) * l.stride + l.pad;
            let dyrow = &dyp[start..start + l.cols];
            for ic in 0..inputs {
                for ki in 0..k {
                    let base = ic * l.plane + (r + ki) * l.stride;
                    for kj in 0..k {
                        let xrow = &xp[base + kj..base + kj + l.cols];
                        let at = (((oc * inputs + ic) * k + ki) * k + kj) * GW;
                        let slot: &mut [T; GW] = (&mut acc[at..at + GW]).try_into().unwrap();
                        let mut a = *slot;
                        for (xs, ds) in xrow.chunks_exact(GW).zip(dyrow.chunks_exact(GW)) {
                            let xs: &[T; GW] = xs.try_into().unwrap();
                            let ds: &[T; GW] = ds.try_into().unwrap();
                            for lane in 0..GW {
                                a[lane] = a[lane] + ds[lane] * xs[lane];
                            }
                        }
                        *slot = a;
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn direct_conv_avx2<T: Float>(
    xp: &[T],
    inputs: usize,
    l: &Layout,
    packed: &[T],
    outputs: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    direct_conv(xp, inputs, l, packed, outputs, bias, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn weight_grad_avx2<T: Float>(
    xp: &[T],
    inputs: usize,
    dyp: &[T],
    outputs: usize,
    l: &Layout,
    acc: &mut [T],
) {
    weight_grad(xp, inputs, dyp, outputs, l, acc)
}

fn run_conv<T: Float>(
    xp: &[T],
    inputs: usize,
    l: &Layout,
    packed: &[T],
    outputs: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the running CPU supports AVX2.
        unsafe { direct_conv_avx2(xp, inputs, l, packed, outputs, bias, out) };
        return;
    }
    direct_conv(xp, inputs, l, packed, outputs, bias, out)
}

fn run_weight_grad<T: Float>(
    xp: &[T],
    inputs: usize,
    dyp: &[T],
    outputs: usize,
    l: &Layout,
    acc: &mut [T],
) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the running CPU supports AVX2.
        unsafe { weight_grad_avx2(xp, inputs, dyp, outputs, l, acc) };
        return;
    }
    weight_grad(xp, inputs, dyp, outputs, l, acc)
}

/// 2-D convolution (cross-correlation) with an odd square kernel, stride 1
/// and zero "same" padding, so the output keeps the input's spatial size.
///
/// `input` is N×C×H×W, `weight` is O×C×k×k and `bias` has O elements.
pub fn conv2d<T: Float>(input: &Var<T>, weight: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = input.value().dims4()?;
    let (o, wc, kh, kw) = weight.value().dims4()?;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::UnsupportedKernel(if kh != kw { kh.max(kw) } else { kh }));
    }
    if wc != c {
        return Err(Error::Shape(format!(
            "conv weight expects {} input channels, input has {}",
            wc, c
        )));
    }
    if bias.value().len() != o {
        return Err(Error::Shape(format!(
            "conv bias has {} entries for {} output channels",
            bias.value().len(),
            o
        )));
    }
    let k = kh;
    let l = Layout::new(h, w, k);
    let hw = h * w;
    let x = input.value().data();
    let wt = weight.value().data();
    let packed = pack_weights(o, c, k, |oc, ic, ki, kj| wt[((oc * c + ic) * k + ki) * k + kj]);

    let mut out = vec![T::zero(); n * o * hw];
    for s in 0..n {
        let xp = pad_planes(&x[s * c * hw..(s + 1) * c * hw], c, &l);
        let ys = &mut out[s * o * hw..(s + 1) * o * hw];
        run_conv(&xp, c, &l, &packed, o, Some(bias.value().data()), ys);
    }
    let out = Tensor::new(&[n, o, h, w], out)?;

    Ok(Var::from_op(
        "conv2d",
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |parents, _, grad| conv2d_backward(parents, grad, l, n, c, o)),
    ))
}

fn conv2d_backward<T: Float>(
    parents: &[Var<T>],
    grad: &Tensor<T>,
    l: Layout,
    n: usize,
    c: usize,
    o: usize,
) -> Result<Vec<Option<Tensor<T>>>> {
    let (h, w, k) = (l.height, l.width, l.kernel);
    let hw = h * w;
    let x = parents[0].value().data();
    let wt = parents[1].value().data();
    let dy = grad.data();
    let want_dx = parents[0].requires_grad();
    let want_dw = parents[1].requires_grad();
    let want_db = parents[2].requires_grad();

    let mut db = vec![T::zero(); o];
    if want_db {
        for s in 0..n {
            for (oc, plane) in dy[s * o * hw..(s + 1) * o * hw].chunks(hw).enumerate() {
                db[oc] = db[oc] + plane.iter().copied().sum::<T>();
            }
        }
    }

    // Input gradient: flipped kernels with input and output roles swapped.
    let flipped = want_dx.then(|| {
        pack_weights(c, o, k, |ic, oc, ki, kj| {
            wt[((oc * c + ic) * k + (k - 1 - ki)) * k + (k - 1 - kj)]
        })
    });
    let mut dx = want_dx.then(|| vec![T::zero(); n * c * hw]);
    let mut acc = if want_dw {
        vec![T::zero(); o * c * k * k * GW]
    } else {
        Vec::new()
    };
    if want_dx || want_dw {
        for s in 0..n {
            let dyp = pad_planes(&dy[s * o * hw..(s + 1) * o * hw], o, &l);
            if want_dw {
                let xp = pad_planes(&x[s * c * hw..(s + 1) * c * hw], c, &l);
                run_weight_grad(&xp, c, &dyp, o, &l, &mut acc);
            }
            if let (Some(dx), Some(flipped)) = (dx.as_mut(), flipped.as_ref()) {
                run_conv(&dyp, o, &l, flipped, c, None, &mut dx[s * c * hw..(s + 1) * c * hw]);
            }
        }
    }

    let dw = want_dw
        .then(|| {
            let mut dw = vec![T::zero(); o * c * k * k];
            for (d, lanes) in dw.iter_mut().zip(acc.chunks_exact(GW)) {
                *d = lanes.iter().copied().sum();
            }
            Tensor::new(&[o, c, k, k], dw)
        })
        .transpose()?;
    let dx = dx.map(|d| Tensor::new(&[n, c, h, w], d)).transpose()?;
    let db = want_db.then(|| Tensor::new(&[o], db)).transpose()?;
    Ok(vec![dx, dw, db])
}
