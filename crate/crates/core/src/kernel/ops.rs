//! Forward primitives and the matching backward rules.
//!
//! Image stacks are `[N, C, H, W]`, matrices are row-major `[rows, cols]`.
//! Every function here is pure; the recording of what ran lives in
//! [`super::graph`].

use rand::Rng;

use super::tensor::{gemm, Real, Tensor, Trans};
use crate::error::{Error, Result};

/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the logarithm.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Geometry of a stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernels: &[usize], bias_len: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernels.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects 4-d input and kernels, got {input:?} and {kernels:?}"
            )));
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, kcin, kh, kw) = (kernels[0], kernels[1], kernels[2], kernels[3]);
        if kcin != cin {
            return Err(Error::Dimension(format!(
                "kernel expects {kcin} input maps but input has {cin}"
            )));
        }
        if bias_len != cout {
            return Err(Error::Dimension(format!(
                "bias has {bias_len} entries for {cout} output maps"
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Dimension(format!(
                "kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(ConvGeom { n, cin, h, w, cout, kh, kw, pad, ho: h + 2 * pad - kh + 1, wo: w + 2 * pad - kw + 1 })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one image `[cin, h, w]` into `[cin*kh*kw, ho*wo]`.
fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.cin {
        let chan = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::ZERO } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.cin {
        let chan = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Stride-1 convolution (cross-correlation) with zero padding.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    conv2d_forward_cols(input, kernels, bias, padding).map(|(y, _, _)| y)
}

/// Forward convolution that also returns the unfolded input, which the
/// kernel gradient needs.
pub(crate) fn conv2d_forward_cols<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<(Tensor<T>, Vec<T>, ConvGeom)> {
    let g = ConvGeom::new(input.shape(), kernels.shape(), bias.len(), padding)?;
    let (k, plane) = (g.patch_len(), g.out_plane());
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * plane;
    let mut cols = vec![T::ZERO; g.n * k * plane];
    let mut out = vec![T::ZERO; g.n * out_img];
    for i in 0..g.n {
        let c = &mut cols[i * k * plane..(i + 1) * k * plane];
        im2col(&input.data()[i * in_img..(i + 1) * in_img], &g, c);
        let y = &mut out[i * out_img..(i + 1) * out_img];
        for (o, &b) in bias.data().iter().enumerate() {
            y[o * plane..(o + 1) * plane].fill(b);
        }
        gemm(g.cout, k, plane, kernels.data(), Trans::No, c, Trans::No, T::ONE, y);
    }
    let y = Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)?;
    Ok((y, cols, g))
}

/// Gradients of a convolution with respect to input (optional), kernels and bias.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    cols: &[T],
    kernels: &Tensor<T>,
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (k, plane) = (g.patch_len(), g.out_plane());
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * plane;
    let mut dk = vec![T::ZERO; g.cout * k];
    let mut db = vec![T::ZERO; g.cout];
    let mut dx = need_dx.then(|| vec![T::ZERO; g.n * in_img]);
    let mut dcols = vec![T::ZERO; if need_dx { k * plane } else { 0 }];
    for i in 0..g.n {
        let dyi = &dy[i * out_img..(i + 1) * out_img];
        let c = &cols[i * k * plane..(i + 1) * k * plane];
        gemm(g.cout, plane, k, dyi, Trans::No, c, Trans::Yes, T::ONE, &mut dk);
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dyi[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
        }
        if let Some(dx) = dx.as_mut() {
            gemm(k, g.cout, plane, kernels.data(), Trans::Yes, dyi, Trans::No, T::ZERO, &mut dcols);
            col2im(&dcols, g, &mut dx[i * in_img..(i + 1) * in_img]);
        }
    }
    (dx, dk, db)
}

/// 2x2 max pooling with stride 2. Returns the pooled stack and, for every
/// output cell, the flat input index of the winning element (first in
/// row-major order on ties).
pub fn maxpool2x2_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("maxpool expects a 4-d stack, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!("maxpool needs even extents, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}

/// Affine map on each row: `y = x·Wᵀ + b` for `x: [N, in]` (or a bare
/// `in`-vector), `W: [out, in]`, `b: [out]`.
pub fn dense_forward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let ws = weights.shape();
    if ws.len() != 2 {
        return Err(Error::Dimension(format!("dense weights must be 2-d, got {ws:?}")));
    }
    let (out_dim, in_dim) = (ws[0], ws[1]);
    if bias.len() != out_dim {
        return Err(Error::Dimension(format!("bias has {} entries for {out_dim} outputs", bias.len())));
    }
    let (rows, vector) = match input.shape() {
        [n] if *n == in_dim => (1, true),
        [r, n] if *n == in_dim => (*r, false),
        other => {
            return Err(Error::Dimension(format!(
                "dense input {other:?} does not have {in_dim} columns"
            )))
        }
    };
    let mut out = Vec::with_capacity(rows * out_dim);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    gemm(rows, in_dim, out_dim, input.data(), Trans::No, weights.data(), Trans::Yes, T::ONE, &mut out);
    if vector {
        Tensor::new(&[out_dim], out)
    } else {
        Tensor::new(&[rows, out_dim], out)
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

pub fn activation_forward<T: Real>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => input.map(|x| if x > T::ZERO { x } else { T::ZERO }),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

/// Row `word_id` of an embedding table `[V, d]`.
pub fn embedding_lookup<T: Real>(table: &Tensor<T>, word_id: usize) -> Result<Tensor<T>> {
    let s = table.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("embedding table must be 2-d, got {s:?}")));
    }
    if word_id >= s[0] {
        return Err(Error::Index(format!("word id {word_id} outside vocabulary of {}", s[0])));
    }
    Tensor::new(&[s[1]], table.row(word_id).to_vec())
}

/// Draws an inverted-dropout multiplier mask: each entry is `0` with
/// probability `p`, else `1/(1-p)`.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < p { T::ZERO } else { keep })
        .collect())
}

/// Inverted dropout; the identity in evaluation mode.
pub fn dropout_apply<T: Real, R: Rng + ?Sized>(
    input: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
    }
    match mode {
        Mode::Eval => Ok(input.clone()),
        Mode::Train => {
            let mask = dropout_mask::<T, R>(input.len(), p, rng)?;
            let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            Tensor::new(input.shape(), data)
        }
    }
}

fn clamp_prob<T: Real>(p: T) -> T {
    let lo = T::from_f64(BCE_EPS);
    let hi = T::from_f64(1.0 - BCE_EPS);
    if p < lo {
        lo
    } else if p > hi {
        hi
    } else {
        p
    }
}

/// Binary cross-entropy of one prediction against a 0/1 label.
pub fn bce_loss<T: Real>(prediction: T, label: bool) -> T {
    let p = clamp_prob(prediction);
    if label {
        -p.ln()
    } else {
        -(T::ONE - p).ln()
    }
}

/// Derivative of [`bce_loss`] with respect to the prediction, evaluated
/// at the clamped value.
pub fn bce_grad<T: Real>(prediction: T, label: bool) -> T {
    let p = clamp_prob(prediction);
    if label {
        -T::ONE / p
    } else {
        T::ONE / (T::ONE - p)
    }
}

/// Mean BCE over a batch.
pub fn bce_mean<T: Real>(predictions: &[T], labels: &[bool]) -> Result<T> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let total: T = predictions.iter().zip(labels).map(|(&p, &l)| bce_loss(p, l)).sum();
    Ok(total / T::from_f64(predictions.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn degenerate_convolution() {
        let y = conv2d_forward(&t(&[1, 1, 1, 1], &[3.0]), &t(&[1, 1, 1, 1], &[2.0]), &t(&[1], &[0.5]), 0).unwrap();
        assert_eq!(y.data(), &[6.5]);
    }

    #[test]
    fn zero_input_passes_bias() {
        let k = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0);
        let y = conv2d_forward(&Tensor::zeros(&[1, 1, 3, 3]), &k, &t(&[1], &[0.7]), 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn conv_output_extent() {
        let y = conv2d_forward(
            &Tensor::<f32>::zeros(&[2, 3, 6, 5]),
            &Tensor::zeros(&[4, 3, 3, 2]),
            &Tensor::zeros(&[4]),
            0,
        )
        .unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
    }

    #[test]
    fn conv_shape_errors_name_extents() {
        let err = conv2d_forward(
            &Tensor::<f32>::zeros(&[1, 2, 4, 4]),
            &Tensor::zeros(&[1, 3, 3, 3]),
            &Tensor::zeros(&[1]),
            1,
        )
        .unwrap_err();
        assert!(matches!(&err, Error::Dimension(m) if m.contains('3') && m.contains('2')), "{err}");
        let err = conv2d_forward(
            &Tensor::<f32>::zeros(&[1, 1, 2, 2]),
            &Tensor::zeros(&[1, 1, 5, 5]),
            &Tensor::zeros(&[1]),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn pool_single_window_and_constant() {
        let (y, arg) = maxpool2x2_forward(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let (y, _) = maxpool2x2_forward(&Tensor::full(&[1, 2, 4, 6], 1.5)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn pool_ties_pick_first_row_major() {
        let (_, arg) = maxpool2x2_forward(&t(&[1, 1, 2, 2], &[1.0, 5.0, 5.0, 5.0])).unwrap();
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn pool_rejects_odd() {
        assert!(matches!(maxpool2x2_forward(&Tensor::<f32>::zeros(&[1, 1, 3, 4])), Err(Error::Dimension(_))));
    }

    #[test]
    fn dense_identity_and_bias() {
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let x = t(&[3], &[1.0, -2.0, 3.5]);
        assert_eq!(dense_forward(&x, &eye, &Tensor::zeros(&[3])).unwrap().data(), x.data());
        let b = t(&[2], &[0.25, -1.0]);
        assert_eq!(dense_forward(&x, &Tensor::zeros(&[2, 3]), &b).unwrap().data(), b.data());
        assert!(matches!(
            dense_forward(&t(&[2], &[1.0, 2.0]), &eye, &Tensor::zeros(&[3])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn activations() {
        let y = activation_forward(&t(&[2], &[-1.0, 2.0]), Activation::Relu);
        assert_eq!(y.data(), &[0.0, 2.0]);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(30.0f64) - 1.0).abs() < 1e-9);
        assert!(sigmoid(-30.0f64) > 0.0);
    }

    #[test]
    fn embedding_rows() {
        let table = Tensor::from_fn(&[10, 64], |i| if i / 64 == i % 64 { 1.0f32 } else { 0.0 });
        let v = embedding_lookup(&table, 3).unwrap();
        assert_eq!(v.shape(), &[64]);
        for (j, &x) in v.data().iter().enumerate() {
            assert_eq!(x, if j == 3 { 1.0 } else { 0.0 });
        }
        assert_eq!(embedding_lookup(&table, 3).unwrap(), v);
        assert!(matches!(embedding_lookup(&table, 10), Err(Error::Index(_))));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[50], |i| i as f32 + 1.0);
        assert_eq!(dropout_apply(&x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(dropout_apply(&x, 0.5, Mode::Eval, &mut rng).unwrap(), x);
        assert!(matches!(dropout_apply(&x, 1.0, Mode::Train, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn dropout_rate_within_binomial_band() {
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_fn(&[n], |i| 1.0 + (i % 13) as f64);
        let y = dropout_apply(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((zeros - 5000.0).abs() <= 3.0 * sigma, "zeros={zeros}");
        for (&a, &b) in x.data().iter().zip(y.data()) {
            assert!(b == 0.0 || b == 2.0 * a);
        }
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.5f64, true) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(0.9f64, true) - 0.105_360_515_657_826_3).abs() < 1e-12);
        let sat = bce_loss(1.0f64, true);
        assert!(sat >= 0.0 && sat <= -(1.0f64 - 1e-7).ln() + 1e-15);
        assert!(bce_loss(0.0f32, true).is_finite());
        assert!(bce_loss(1.0f32, false).is_finite());
        let m = bce_mean(&[0.5f64, 0.5], &[true, false]).unwrap();
        assert!((m - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
