//! Elementwise maps, reductions, and the fixed-kernel filters used by the
//! image-quality losses.

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

fn unary<T: Float>(
    op: &'static str,
    x: &Var<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Var<T> {
    let out = x.value().map(f);
    Var::from_op(
        op,
        out,
        vec![x.clone()],
        Box::new(move |parents, out, grad| {
            let x = parents[0].value();
            let data = x
                .data()
                .iter()
                .zip(out.data())
                .zip(grad.data())
                .map(|((&xv, &yv), &g)| g * df(xv, yv))
                .collect();
            Ok(vec![Some(Tensor::new(x.shape(), data)?)])
        }),
    )
}

pub fn add<T: Float>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let out = a.value().zip_map(b.value(), |x, y| x + y)?;
    Ok(Var::from_op(
        "add",
        out,
        vec![a.clone(), b.clone()],
        Box::new(|_, _, grad| Ok(vec![Some(grad.clone()), Some(grad.clone())])),
    ))
}

pub fn sub<T: Float>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let out = a.value().zip_map(b.value(), |x, y| x - y)?;
    Ok(Var::from_op(
        "sub",
        out,
        vec![a.clone(), b.clone()],
        Box::new(|_, _, grad| Ok(vec![Some(grad.clone()), Some(grad.map(|g| -g))])),
    ))
}

pub fn mul<T: Float>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let out = a.value().zip_map(b.value(), |x, y| x * y)?;
    Ok(Var::from_op(
        "mul",
        out,
        vec![a.clone(), b.clone()],
        Box::new(|parents, _, grad| {
            let (a, b) = (parents[0].value(), parents[1].value());
            let ga = parents[0]
                .requires_grad()
                .then(|| grad.zip_map(b, |g, y| g * y))
                .transpose()?;
            let gb = parents[1]
                .requires_grad()
                .then(|| grad.zip_map(a, |g, x| g * x))
                .transpose()?;
            Ok(vec![ga, gb])
        }),
    ))
}

pub fn div<T: Float>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let out = a.value().zip_map(b.value(), |x, y| x / y)?;
    Ok(Var::from_op(
        "div",
        out,
        vec![a.clone(), b.clone()],
        Box::new(|parents, out, grad| {
            let b = parents[1].value();
            let ga = parents[0]
                .requires_grad()
                .then(|| grad.zip_map(b, |g, y| g / y))
                .transpose()?;
            let gb = if parents[1].requires_grad() {
                let q = grad.zip_map(out, |g, o| g * o)?;
                Some(q.zip_map(b, |go, y| -go / y)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }),
    ))
}

pub fn scale<T: Float>(x: &Var<T>, factor: f64) -> Var<T> {
    let k = T::from_f64(factor);
    unary("scale", x, move |v| v * k, move |_, _| k)
}

pub fn add_scalar<T: Float>(x: &Var<T>, offset: f64) -> Var<T> {
    let c = T::from_f64(offset);
    unary("add_scalar", x, move |v| v + c, |_, _| T::one())
}

/// Subgradient 0 at the origin.
pub fn abs<T: Float>(x: &Var<T>) -> Var<T> {
    unary(
        "abs",
        x,
        |v| v.abs(),
        |v, _| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        },
    )
}

/// `x^p` for strictly positive `x`.
pub fn pow_scalar<T: Float>(x: &Var<T>, exponent: f64) -> Var<T> {
    let p = T::from_f64(exponent);
    unary("pow", x, move |v| v.powf(p), move |v, _| p * v.powf(p - T::one()))
}

/// `max(x, floor)`; the gradient is zero wherever the floor is active.
pub fn clamp_min<T: Float>(x: &Var<T>, floor: f64) -> Var<T> {
    let lo = T::from_f64(floor);
    unary(
        "clamp_min",
        x,
        move |v| if v < lo { lo } else { v },
        move |v, _| if v < lo { T::zero() } else { T::one() },
    )
}

pub fn relu<T: Float>(x: &Var<T>) -> Var<T> {
    unary(
        "relu",
        x,
        |v| if v > T::zero() { v } else { T::zero() },
        |v, _| if v > T::zero() { T::one() } else { T::zero() },
    )
}

/// Logistic sigmoid, clamped so the result stays inside the open unit
/// interval even when `exp` saturates.
pub fn sigmoid<T: Float>(x: &Var<T>) -> Var<T> {
    let lo = T::min_positive_value();
    let hi = T::one() - T::epsilon() / T::from_f64(2.0);
    unary(
        "sigmoid",
        x,
        move |v| {
            let s = if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            };
            s.max(lo).min(hi)
        },
        |_, y| y * (T::one() - y),
    )
}

pub fn sum<T: Float>(x: &Var<T>) -> Var<T> {
    let out = Tensor::scalar(x.value().sum());
    Var::from_op(
        "sum",
        out,
        vec![x.clone()],
        Box::new(|parents, _, grad| {
            Ok(vec![Some(Tensor::full(parents[0].shape(), grad.data()[0]))])
        }),
    )
}

pub fn mean<T: Float>(x: &Var<T>) -> Var<T> {
    let n = T::from_f64(x.value().len() as f64);
    let out = Tensor::scalar(x.value().sum() / n);
    Var::from_op(
        "mean",
        out,
        vec![x.clone()],
        Box::new(move |parents, _, grad| {
            Ok(vec![Some(Tensor::full(parents[0].shape(), grad.data()[0] / n))])
        }),
    )
}

/// Mean over every axis but the first: `[N, ...] -> [N]`.
pub fn mean_per_sample<T: Float>(x: &Var<T>) -> Result<Var<T>> {
    let shape = x.shape().to_vec();
    let n = *shape
        .first()
        .ok_or_else(|| Error::Shape("mean_per_sample needs rank >= 1".into()))?;
    let per = if n == 0 { 0 } else { x.value().len() / n };
    if per == 0 {
        return Err(Error::Shape(format!("mean_per_sample over empty samples {:?}", shape)));
    }
    let count = T::from_f64(per as f64);
    let data = x
        .value()
        .data()
        .chunks(per)
        .map(|c| c.iter().copied().sum::<T>() / count)
        .collect();
    let out = Tensor::new(&[n], data)?;
    Ok(Var::from_op(
        "mean_per_sample",
        out,
        vec![x.clone()],
        Box::new(move |parents, _, grad| {
            let mut g = Vec::with_capacity(n * per);
            for &gv in grad.data() {
                g.extend(std::iter::repeat(gv / count).take(per));
            }
            Ok(vec![Some(Tensor::new(parents[0].shape(), g)?)])
        }),
    ))
}

/// 2×2 mean pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avg_pool2x2<T: Float>(x: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("cannot average-pool {}×{}", h, w)));
    }
    let quarter = T::from_f64(0.25);
    let src = x.value().data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let s = &src[p * h * w..];
        let o = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let r0 = 2 * i * w + 2 * j;
                let r1 = r0 + w;
                o[i * ow + j] = (s[r0] + s[r0 + 1] + s[r1] + s[r1 + 1]) * quarter;
            }
        }
    }
    let out = Tensor::new(&[n, c, oh, ow], out)?;
    Ok(Var::from_op(
        "avg_pool2x2",
        out,
        vec![x.clone()],
        Box::new(move |_, _, grad| {
            let g = grad.data();
            let mut gx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                let go = &g[p * oh * ow..(p + 1) * oh * ow];
                let gi = &mut gx[p * h * w..(p + 1) * h * w];
                for i in 0..oh {
                    for j in 0..ow {
                        let v = go[i * ow + j] * quarter;
                        let r0 = 2 * i * w + 2 * j;
                        gi[r0] = v;
                        gi[r0 + 1] = v;
                        gi[r0 + w] = v;
                        gi[r0 + w + 1] = v;
                    }
                }
            }
            Ok(vec![Some(Tensor::new(&[n, c, h, w], gx)?)])
        }),
    ))
}

/// Separable depthwise filtering with a fixed symmetric 1-D kernel, keeping
/// only positions where the window lies entirely inside the image.
pub fn gaussian_filter_valid<T: Float>(x: &Var<T>, kernel: &[T]) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    let k = kernel.len();
    if k == 0 || k % 2 == 0 {
        return Err(Error::UnsupportedKernel(k));
    }
    if h < k || w < k {
        return Err(Error::TooSmall(format!(
            "{}×{} image for a {}-tap window",
            h, w, k
        )));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let kernel = kernel.to_vec();
    let planes = n * c;

    let src = x.value().data();
    let mut horiz = vec![T::zero(); planes * h * ow];
    for p in 0..planes {
        for r in 0..h {
            let row = &src[(p * h + r) * w..(p * h + r + 1) * w];
            let dst = &mut horiz[(p * h + r) * ow..(p * h + r + 1) * ow];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = kernel
                    .iter()
                    .zip(&row[j..j + k])
                    .map(|(&kv, &xv)| kv * xv)
                    .sum();
            }
        }
    }
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let hp = &horiz[p * h * ow..(p + 1) * h * ow];
        let op = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            let dst = &mut op[i * ow..(i + 1) * ow];
            for (t, &kv) in kernel.iter().enumerate() {
                let srow = &hp[(i + t) * ow..(i + t + 1) * ow];
                for (d, &s) in dst.iter_mut().zip(srow) {
                    *d = *d + kv * s;
                }
            }
        }
    }
    let out = Tensor::new(&[n, c, oh, ow], out)?;
    Ok(Var::from_op(
        "gaussian_filter",
        out,
        vec![x.clone()],
        Box::new(move |_, _, grad| {
            let g = grad.data();
            let mut gh = vec![T::zero(); planes * h * ow];
            for p in 0..planes {
                let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                let hp = &mut gh[p * h * ow..(p + 1) * h * ow];
                for i in 0..oh {
                    let srow = &gp[i * ow..(i + 1) * ow];
                    for (t, &kv) in kernel.iter().enumerate() {
                        let drow = &mut hp[(i + t) * ow..(i + t + 1) * ow];
                        for (d, &s) in drow.iter_mut().zip(srow) {
                            *d = *d + kv * s;
                        }
                    }
                }
            }
            let mut gx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                for r in 0..h {
                    let srow = &gh[(p * h + r) * ow..(p * h + r + 1) * ow];
                    let drow = &mut gx[(p * h + r) * w..(p * h + r + 1) * w];
                    for (j, &s) in srow.iter().enumerate() {
                        for (t, &kv) in kernel.iter().enumerate() {
                            drow[j + t] = drow[j + t] + kv * s;
                        }
                    }
                }
            }
            Ok(vec![Some(Tensor::new(&[n, c, h, w], gx)?)])
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(shape: &[usize], data: &[f64]) -> Var<f64> {
        Var::parameter(Tensor::new(shape, data.to_vec()).unwrap())
    }

    #[test]
    fn relu_clips_negatives() {
        let y = relu(&var(&[2], &[-1.0, 2.0]));
        assert_eq!(y.value().data(), &[0.0, 2.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let y = sigmoid(&var(&[1], &[0.0]));
        assert_eq!(y.item(), 0.5);
    }

    #[test]
    fn sigmoid_stays_in_open_interval_when_saturated() {
        let x = Var::constant(Tensor::<f32>::new(&[2], vec![60.0, -200.0]).unwrap());
        let y = sigmoid(&x);
        for &v in y.value().data() {
            assert!(v > 0.0 && v < 1.0, "{v}");
        }
    }

    #[test]
    fn avg_pool_of_constant_is_constant() {
        let x = Var::constant(Tensor::<f64>::full(&[1, 2, 4, 6], 0.3));
        let y = avg_pool2x2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 3]);
        assert!(y.value().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn gaussian_filter_matches_direct_2d_sum() {
        let kernel = [0.25, 0.5, 0.25];
        let x = Tensor::<f64>::from_fn(&[1, 1, 5, 6], |i| ((i * 7) % 11) as f64);
        let y = gaussian_filter_valid(&Var::constant(x.clone()), &kernel).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 4]);
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        acc += kernel[a] * kernel[b] * x.data()[(i + a) * 6 + j + b];
                    }
                }
                assert!((y.value().data()[i * 4 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_filter_rejects_small_images() {
        let x = Var::constant(Tensor::<f64>::zeros(&[1, 1, 4, 20]));
        assert!(matches!(
            gaussian_filter_valid(&x, &[1.0; 5]),
            Err(Error::TooSmall(_))
        ));
    }

    #[test]
    fn mean_per_sample_reduces_trailing_axes() {
        let x = var(&[2, 1, 1, 2], &[1.0, 3.0, 5.0, 9.0]);
        let m = mean_per_sample(&x).unwrap();
        assert_eq!(m.value().data(), &[2.0, 7.0]);
        sum(&m).backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.5; 4]);
    }

    #[test]
    fn div_gradient_matches_quotient_rule() {
        let a = var(&[1], &[3.0]);
        let b = var(&[1], &[2.0]);
        div(&a, &b).unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[0.5]);
        assert_eq!(b.grad().unwrap().data(), &[-0.75]);
    }
}
