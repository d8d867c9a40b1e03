use rand::Rng;

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Whether layers use batch statistics and stochastic dropout (training) or
/// running statistics and identity dropout (inference).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}

/// 2×2 max pooling with stride 2. Ties resolve to the first position in
/// row-major order, which also receives the whole gradient.
pub fn max_pool2x2<T: Float>(x: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max pooling needs even spatial dims, got {}×{}",
            h, w
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.value().data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let r0 = base + 2 * i * w + 2 * j;
                let mut best = r0;
                for idx in [r0 + 1, r0 + w, r0 + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best as u32);
            }
        }
    }
    let out = Tensor::new(&[n, c, oh, ow], out)?;
    let len = n * c * h * w;
    Ok(Var::from_op(
        "max_pool2x2",
        out,
        vec![x.clone()],
        Box::new(move |parents, _, grad| {
            let mut gx = vec![T::zero(); len];
            for (&idx, &g) in argmax.iter().zip(grad.data()) {
                gx[idx as usize] = gx[idx as usize] + g;
            }
            Ok(vec![Some(Tensor::new(parents[0].shape(), gx)?)])
        }),
    ))
}

/// Nearest-neighbour 2× upsampling: every value fills a 2×2 block.
pub fn upsample2x<T: Float>(x: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let src = x.value().data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..h {
            let row = &mut d[2 * i * ow..(2 * i + 1) * ow];
            for j in 0..w {
                let v = s[i * w + j];
                row[2 * j] = v;
                row[2 * j + 1] = v;
            }
            d.copy_within(2 * i * ow..(2 * i + 1) * ow, (2 * i + 1) * ow);
        }
    }
    let out = Tensor::new(&[n, c, oh, ow], out)?;
    Ok(Var::from_op(
        "upsample2x",
        out,
        vec![x.clone()],
        Box::new(move |_, _, grad| {
            let g = grad.data();
            let mut gx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                let gs = &g[p * oh * ow..(p + 1) * oh * ow];
                let d = &mut gx[p * h * w..(p + 1) * h * w];
                for i in 0..h {
                    for j in 0..w {
                        let a = 2 * i * ow + 2 * j;
                        d[i * w + j] = gs[a] + gs[a + 1] + gs[a + ow] + gs[a + ow + 1];
                    }
                }
            }
            Ok(vec![Some(Tensor::new(&[n, c, h, w], gx)?)])
        }),
    ))
}

/// Concatenates 4-D tensors along the channel axis.
pub fn concat_channels<T: Float>(parts: &[Var<T>]) -> Result<Var<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let (n, _, h, w) = first.value().dims4()?;
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let (pn, pc, ph, pw) = p.value().dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                p.shape(),
                first.shape()
            )));
        }
        channels.push(pc);
    }
    let total: usize = channels.iter().sum();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for s in 0..n {
        for (p, &pc) in parts.iter().zip(&channels) {
            out.extend_from_slice(&p.value().data()[s * pc * plane..(s + 1) * pc * plane]);
        }
    }
    let out = Tensor::new(&[n, total, h, w], out)?;
    Ok(Var::from_op(
        "concat",
        out,
        parts.to_vec(),
        Box::new(move |parents, _, grad| {
            let g = grad.data();
            let mut grads = Vec::with_capacity(parents.len());
            let mut offset = 0;
            for (p, &pc) in parents.iter().zip(&channels) {
                if p.requires_grad() {
                    let mut d = Vec::with_capacity(n * pc * plane);
                    for s in 0..n {
                        let start = (s * total + offset) * plane;
                        d.extend_from_slice(&g[start..start + pc * plane]);
                    }
                    grads.push(Some(Tensor::new(&[n, pc, h, w], d)?));
                } else {
                    grads.push(None);
                }
                offset += pc;
            }
            Ok(grads)
        }),
    ))
}

/// Inverted dropout: survivors are scaled by `1 / (1 - p)` so the expected
/// activation is unchanged. Inference mode returns the input unchanged.
pub fn dropout<T: Float, R: Rng + ?Sized>(
    x: &Var<T>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!(
            "dropout probability must lie in [0, 1), got {}",
            p
        )));
    }
    if mode == Mode::Infer || p == 0.0 {
        return Ok(x.clone());
    }
    let keep_scale = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.value().len())
        .map(|_| {
            if rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let data = x
        .value()
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| v * m)
        .collect();
    let out = Tensor::new(x.shape(), data)?;
    Ok(Var::from_op(
        "dropout",
        out,
        vec![x.clone()],
        Box::new(move |parents, _, grad| {
            let d = grad
                .data()
                .iter()
                .zip(&mask)
                .map(|(&g, &m)| g * m)
                .collect();
            Ok(vec![Some(Tensor::new(parents[0].shape(), d)?)])
        }),
    ))
}

/// Running statistics and constants of one batch-normalisation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    /// Weight of the old running value in the exponential average.
    pub momentum: f64,
}

impl<T: Float> BatchNormState<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.99;

    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Per-channel batch normalisation over N×H×W.
///
/// Training mode normalises with the biased batch variance and folds the
/// batch mean and unbiased variance into the running statistics. Inference
/// mode uses the running statistics and leaves `state` untouched.
pub fn batch_norm<T: Float>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    if gamma.value().len() != c || beta.value().len() != c || state.channels() != c {
        return Err(Error::Shape(format!(
            "batch norm over {} channels got gamma {}, beta {}, running stats {}",
            c,
            gamma.value().len(),
            beta.value().len(),
            state.channels()
        )));
    }
    let m = n * h * w;
    if m == 0 {
        return Err(Error::DegenerateBatch(format!(
            "no elements per channel in {:?}",
            x.shape()
        )));
    }
    let plane = h * w;
    let src = x.value().data();
    let eps = T::from_f64(state.eps);

    let (mean, inv_std) = match mode {
        Mode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for (ch, (mu, var)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                let mut acc = 0.0f64;
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    acc += src[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu64 = acc / m as f64;
                let mut sq = 0.0f64;
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    sq += src[base..base + plane]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mu64;
                            d * d
                        })
                        .sum::<f64>();
                }
                *mu = T::from_f64(mu64);
                *var = T::from_f64(sq / m as f64);
            }
            let momentum = T::from_f64(state.momentum);
            let fresh = T::one() - momentum;
            let bessel = if m > 1 {
                T::from_f64(m as f64 / (m as f64 - 1.0))
            } else {
                T::one()
            };
            for ch in 0..c {
                state.running_mean[ch] = momentum * state.running_mean[ch] + fresh * mean[ch];
                state.running_var[ch] =
                    momentum * state.running_var[ch] + fresh * var[ch] * bessel;
            }
            let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv)
        }
        Mode::Infer => {
            let inv = state
                .running_var
                .iter()
                .map(|&v| T::one() / (v + eps).sqrt())
                .collect();
            (state.running_mean.clone(), inv)
        }
    };

    let gm = gamma.value().data();
    let bt = beta.value().data();
    let mut out = vec![T::zero(); src.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gm[ch], bt[ch]);
            for (o, &v) in out[base..base + plane].iter_mut().zip(&src[base..base + plane]) {
                *o = g * ((v - mu) * is) + b;
            }
        }
    }
    let out = Tensor::new(&[n, c, h, w], out)?;

    Ok(Var::from_op(
        "batch_norm",
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |parents, _, grad| {
            let x = parents[0].value().data();
            let gm = parents[1].value().data();
            let dy = grad.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = parents[0].requires_grad().then(|| vec![T::zero(); x.len()]);
            let count = T::from_f64(m as f64);
            for ch in 0..c {
                let (mu, is) = (mean[ch], inv_std[ch]);
                let mut sum_dy = T::zero();
                let mut sum_dy_xhat = T::zero();
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for (&g, &v) in dy[base..base + plane].iter().zip(&x[base..base + plane]) {
                        sum_dy = sum_dy + g;
                        sum_dy_xhat = sum_dy_xhat + g * (v - mu) * is;
                    }
                }
                dgamma[ch] = sum_dy_xhat;
                dbeta[ch] = sum_dy;
                let Some(dx) = dx.as_mut() else { continue };
                let g = gm[ch];
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    let rows = dx[base..base + plane]
                        .iter_mut()
                        .zip(&dy[base..base + plane])
                        .zip(&x[base..base + plane]);
                    match mode {
                        Mode::Train => {
                            for ((d, &gy), &v) in rows {
                                let xhat = (v - mu) * is;
                                *d = g * is / count
                                    * (count * gy - sum_dy - xhat * sum_dy_xhat);
                            }
                        }
                        Mode::Infer => {
                            for ((d, &gy), _) in rows {
                                *d = g * is * gy;
                            }
                        }
                    }
                }
            }
            Ok(vec![
                dx.map(|d| Tensor::new(&[n, c, h, w], d)).transpose()?,
                Some(Tensor::new(&[c], dgamma)?),
                Some(Tensor::new(&[c], dbeta)?),
            ])
        }),
    ))
}
