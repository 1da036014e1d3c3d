//! Weak and strong stochastic augmentation for feature vectors and images.
//!
//! Every call takes its randomness from an explicit [`ChaCha8Rng`]. The
//! trainer derives one stream per (step, batch slot, branch) with
//! [`aug_rng`], so the two strong views of a sample are independent yet the
//! whole run replays bit for bit.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datakit::InputShape;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which view of a sample an RNG stream feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    LabeledWeak = 0,
    UnlabeledWeak = 1,
    StrongI = 2,
    StrongJ = 3,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based stream for one (step, slot, branch) triple.
pub fn aug_rng(seed: u64, step: u64, slot: u64, branch: Branch, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(step ^ (stream_id << 56))));
    rng.set_stream((slot << 3) | branch as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    Weak,
    Strong,
}

/// One named op with the range its magnitude is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpSpec {
    pub name: String,
    pub magnitude: (f64, f64),
}

impl OpSpec {
    pub fn new(name: &str, lo: f64, hi: f64) -> Self {
        Self {
            name: name.to_string(),
            magnitude: (lo, hi),
        }
    }

    pub fn fixed(name: &str, m: f64) -> Self {
        Self::new(name, m, m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    pub kind: AugKind,
    pub ops: Vec<OpSpec>,
    pub n_ops_per_call: usize,
    #[serde(default)]
    pub rng_stream_id: u64,
    /// Cutout side as a fraction of the shorter image side; `(0, 0)` disables.
    #[serde(default)]
    pub cutout: (f64, f64),
}

/// Ops a strong image policy may name.
pub const IMAGE_OPS: [&str; 12] = [
    "identity",
    "auto_contrast",
    "brightness",
    "contrast",
    "sharpness",
    "solarize",
    "posterize",
    "rotate",
    "shear_x",
    "shear_y",
    "translate_x",
    "translate_y",
];

/// Ops a vector policy may name.
pub const VECTOR_OPS: [&str; 3] = ["scale", "noise", "mask"];

impl AugPolicy {
    pub fn weak_image() -> Self {
        Self {
            kind: AugKind::Weak,
            ops: vec![OpSpec::fixed("flip", 0.5), OpSpec::fixed("shift", 0.125)],
            n_ops_per_call: 2,
            rng_stream_id: 0,
            cutout: (0.0, 0.0),
        }
    }

    /// Two ops per call from the full image pool, magnitudes uniform, then
    /// cutout of up to half the side.
    pub fn strong_image() -> Self {
        Self {
            kind: AugKind::Strong,
            ops: IMAGE_OPS.iter().map(|n| OpSpec::new(n, 0.0, 1.0)).collect(),
            n_ops_per_call: 2,
            rng_stream_id: 1,
            cutout: (0.0, 0.5),
        }
    }

    pub fn weak_vector(sigma: f64) -> Self {
        Self {
            kind: AugKind::Weak,
            ops: vec![OpSpec::fixed("noise", sigma)],
            n_ops_per_call: 1,
            rng_stream_id: 0,
            cutout: (0.0, 0.0),
        }
    }

    /// Random scaling, then Gaussian noise, then coordinate masking.
    pub fn strong_vector(sigma: f64, p_mask: f64, scale: f64) -> Self {
        Self {
            kind: AugKind::Strong,
            ops: vec![
                OpSpec::fixed("scale", scale),
                OpSpec::fixed("noise", sigma),
                OpSpec::fixed("mask", p_mask),
            ],
            n_ops_per_call: 3,
            rng_stream_id: 1,
            cutout: (0.0, 0.0),
        }
    }

    /// Default vector policies scaled by the dataset's feature spread:
    /// weak σ = 0.05·std, strong σ = 0.25·std, mask probability 0.1.
    pub fn vector_defaults(feature_std: f64) -> (Self, Self) {
        (
            Self::weak_vector(0.05 * feature_std),
            Self::strong_vector(0.25 * feature_std, 0.1, 0.2),
        )
    }

    pub fn defaults_for(shape: InputShape, feature_std: f64) -> (Self, Self) {
        match shape {
            InputShape::Vector(_) => Self::vector_defaults(feature_std),
            InputShape::Image { .. } => (Self::weak_image(), Self::strong_image()),
        }
    }

    /// Checks op names against the registry for `shape` and the weak/strong
    /// structural rules.
    pub fn validate(&self, shape: InputShape) -> Result<()> {
        let allowed: &[&str] = match (self.kind, shape) {
            (AugKind::Weak, InputShape::Vector(_)) => &["noise"],
            (AugKind::Weak, InputShape::Image { .. }) => &["flip", "shift"],
            (AugKind::Strong, InputShape::Vector(_)) => &VECTOR_OPS,
            (AugKind::Strong, InputShape::Image { .. }) => &IMAGE_OPS,
        };
        for op in &self.ops {
            if !allowed.contains(&op.name.as_str()) {
                return Err(Error::UnknownOp(op.name.clone()));
            }
            let (lo, hi) = op.magnitude;
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(format!(
                    "magnitude range of `{}` must be finite and ordered",
                    op.name
                )));
            }
        }
        if self.kind == AugKind::Strong && (self.n_ops_per_call == 0 || self.n_ops_per_call > self.ops.len()) {
            return Err(Error::invalid(
                "strong policy must draw between 1 and ops.len() ops per call",
            ));
        }
        Ok(())
    }
}

fn sample_magnitude<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn random_sign<R: Rng>(rng: &mut R) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

/// Weak view α(x): Gaussian noise for vectors, flip + reflect-padded shift
/// for images.
pub fn weak_augment<T: Scalar, R: Rng>(
    x: &[T],
    shape: InputShape,
    policy: &AugPolicy,
    rng: &mut R,
) -> Result<Vec<T>> {
    if policy.kind != AugKind::Weak {
        return Err(Error::invalid("weak_augment needs a weak policy"));
    }
    check_len(x, shape)?;
    let mut out = x.to_vec();
    match shape {
        InputShape::Vector(_) => {
            for op in &policy.ops {
                match op.name.as_str() {
                    "noise" => {
                        let sigma = sample_magnitude(rng, op.magnitude);
                        add_noise(&mut out, sigma, rng);
                    }
                    other => return Err(Error::UnknownOp(other.to_string())),
                }
            }
        }
        InputShape::Image {
            height,
            width,
            channels,
        } => {
            let img = ImageDims {
                h: height,
                w: width,
                c: channels,
            };
            for op in &policy.ops {
                match op.name.as_str() {
                    "flip" => {
                        let p = sample_magnitude(rng, op.magnitude);
                        if rng.random_bool(p.clamp(0.0, 1.0)) {
                            out = flip_horizontal(&out, img);
                        }
                    }
                    "shift" => {
                        let frac = sample_magnitude(rng, op.magnitude);
                        let pad_x = (frac * width as f64).round() as i64;
                        let pad_y = (frac * height as f64).round() as i64;
                        let dx = if pad_x > 0 {
                            rng.random_range(-pad_x..=pad_x)
                        } else {
                            0
                        };
                        let dy = if pad_y > 0 {
                            rng.random_range(-pad_y..=pad_y)
                        } else {
                            0
                        };
                        out = shift_reflect(&out, img, dx, dy);
                    }
                    other => return Err(Error::UnknownOp(other.to_string())),
                }
            }
        }
    }
    Ok(out)
}

/// Strong view A(x). Draws `n_ops_per_call` distinct ops from the policy and
/// applies them in policy order, then cutout for images.
pub fn strong_augment<T: Scalar, R: Rng>(
    x: &[T],
    shape: InputShape,
    policy: &AugPolicy,
    rng: &mut R,
) -> Result<Vec<T>> {
    if policy.kind != AugKind::Strong {
        return Err(Error::invalid("strong_augment needs a strong policy"));
    }
    policy.validate(shape)?;
    check_len(x, shape)?;
    let mut chosen = index::sample(rng, policy.ops.len(), policy.n_ops_per_call).into_vec();
    chosen.sort_unstable();
    let mut out = x.to_vec();
    match shape {
        InputShape::Vector(_) => {
            for &i in &chosen {
                let op = &policy.ops[i];
                let m = sample_magnitude(rng, op.magnitude);
                apply_vector_op(&mut out, &op.name, m, rng)?;
            }
        }
        InputShape::Image {
            height,
            width,
            channels,
        } => {
            let img = ImageDims {
                h: height,
                w: width,
                c: channels,
            };
            for &i in &chosen {
                let op = &policy.ops[i];
                let m = sample_magnitude(rng, op.magnitude);
                let sign = random_sign(rng);
                out = apply_image_op(&out, img, &op.name, m, sign)?;
            }
            let frac = sample_magnitude(rng, policy.cutout);
            if frac > 0.0 {
                cutout(&mut out, img, frac, rng);
            }
        }
    }
    Ok(out)
}

/// Applies a policy to every row of a batch. Row `r` uses the stream for
/// `(step, r, branch)`.
pub fn augment_batch<T: Scalar>(
    inputs: &Tensor<T>,
    shape: InputShape,
    policy: &AugPolicy,
    seed: u64,
    step: u64,
    branch: Branch,
) -> Result<Tensor<T>> {
    let mut out = Vec::with_capacity(inputs.len());
    for (r, row) in inputs.iter_rows().enumerate() {
        let mut rng = aug_rng(seed, step, r as u64, branch, policy.rng_stream_id);
        let v = match policy.kind {
            AugKind::Weak => weak_augment(row, shape, policy, &mut rng)?,
            AugKind::Strong => strong_augment(row, shape, policy, &mut rng)?,
        };
        out.extend(v);
    }
    Ok(Tensor::from_vec(inputs.rows(), inputs.cols(), out))
}

fn check_len<T>(x: &[T], shape: InputShape) -> Result<()> {
    if x.len() != shape.numel() {
        return Err(Error::ShapeMismatch {
            context: "augmentation input".into(),
            expected: shape.numel().to_string(),
            found: x.len().to_string(),
        });
    }
    Ok(())
}

fn add_noise<T: Scalar, R: Rng>(x: &mut [T], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    for v in x.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = *v + T::lit(sigma * z);
    }
}

fn apply_vector_op<T: Scalar, R: Rng>(x: &mut [T], name: &str, m: f64, rng: &mut R) -> Result<()> {
    match name {
        "scale" => {
            let f = if m > 0.0 {
                rng.random_range(1.0 - m..1.0 + m)
            } else {
                1.0
            };
            let f = T::lit(f);
            for v in x.iter_mut() {
                *v = *v * f;
            }
        }
        "noise" => add_noise(x, m, rng),
        "mask" => {
            let p = m.clamp(0.0, 1.0);
            for v in x.iter_mut() {
                if rng.random_bool(p) {
                    *v = T::zero();
                }
            }
        }
        other => return Err(Error::UnknownOp(other.to_string())),
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct ImageDims {
    h: usize,
    w: usize,
    c: usize,
}

impl ImageDims {
    #[inline]
    fn at(self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }
}

const FILL: f64 = 0.5;

fn flip_horizontal<T: Scalar>(x: &[T], d: ImageDims) -> Vec<T> {
    let mut out = x.to_vec();
    for y in 0..d.h {
        for xx in 0..d.w {
            for ch in 0..d.c {
                out[d.at(y, xx, ch)] = x[d.at(y, d.w - 1 - xx, ch)];
            }
        }
    }
    out
}

/// Reflect (mirror without repeating the edge) an index into `0..n`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// `out(y, x) = in(y + dy, x + dx)` with reflect padding.
fn shift_reflect<T: Scalar>(x: &[T], d: ImageDims, dx: i64, dy: i64) -> Vec<T> {
    let mut out = x.to_vec();
    for y in 0..d.h {
        let sy = reflect(y as i64 + dy, d.h);
        for xx in 0..d.w {
            let sx = reflect(xx as i64 + dx, d.w);
            for ch in 0..d.c {
                out[d.at(y, xx, ch)] = x[d.at(sy, sx, ch)];
            }
        }
    }
    out
}

/// Inverse-mapped affine warp about the image center, nearest neighbour,
/// gray fill outside the source.
fn warp<T: Scalar>(x: &[T], d: ImageDims, inv: [[f64; 2]; 2], offset: (f64, f64)) -> Vec<T> {
    let cy = (d.h as f64 - 1.0) / 2.0;
    let cx = (d.w as f64 - 1.0) / 2.0;
    let mut out = vec![T::lit(FILL); x.len()];
    for y in 0..d.h {
        for xx in 0..d.w {
            let (py, px) = (y as f64 - cy - offset.0, xx as f64 - cx - offset.1);
            let sx = inv[0][0] * px + inv[0][1] * py + cx;
            let sy = inv[1][0] * px + inv[1][1] * py + cy;
            let (rx, ry) = (sx.round(), sy.round());
            if rx >= 0.0 && ry >= 0.0 && (rx as usize) < d.w && (ry as usize) < d.h {
                for ch in 0..d.c {
                    out[d.at(y, xx, ch)] = x[d.at(ry as usize, rx as usize, ch)];
                }
            }
        }
    }
    out
}

fn channel_mean<T: Scalar>(x: &[T]) -> T {
    if x.is_empty() {
        return T::zero();
    }
    x.iter().copied().sum::<T>() / T::from_usize(x.len()).expect("length fits")
}

fn box_blur<T: Scalar>(x: &[T], d: ImageDims) -> Vec<T> {
    let mut out = x.to_vec();
    for y in 0..d.h {
        for xx in 0..d.w {
            for ch in 0..d.c {
                let mut acc = T::zero();
                let mut n = 0usize;
                for oy in -1i64..=1 {
                    for ox in -1i64..=1 {
                        let (ny, nx) = (y as i64 + oy, xx as i64 + ox);
                        if ny >= 0 && nx >= 0 && (ny as usize) < d.h && (nx as usize) < d.w {
                            acc = acc + x[d.at(ny as usize, nx as usize, ch)];
                            n += 1;
                        }
                    }
                }
                out[d.at(y, xx, ch)] = acc / T::from_usize(n).expect("count fits");
            }
        }
    }
    out
}

/// Magnitude `m` is op-specific; `sign` flips the direction of signed ops.
/// Every op is the identity at `m = 0` except `auto_contrast`.
fn apply_image_op<T: Scalar>(x: &[T], d: ImageDims, name: &str, m: f64, sign: f64) -> Result<Vec<T>> {
    if m == 0.0 && name != "auto_contrast" && IMAGE_OPS.contains(&name) {
        return Ok(x.to_vec());
    }
    let out = match name {
        "identity" => x.to_vec(),
        "auto_contrast" => {
            let mut out = x.to_vec();
            for ch in 0..d.c {
                let vals = (0..d.h * d.w).map(|p| x[p * d.c + ch]);
                let lo = vals.clone().fold(T::infinity(), T::min);
                let hi = vals.fold(T::neg_infinity(), T::max);
                if hi > lo {
                    for p in 0..d.h * d.w {
                        out[p * d.c + ch] = (x[p * d.c + ch] - lo) / (hi - lo);
                    }
                }
            }
            out
        }
        "brightness" => {
            let f = T::lit(1.0 + sign * 0.9 * m);
            x.iter().map(|&v| v * f).collect()
        }
        "contrast" => {
            let f = T::lit(1.0 + sign * 0.9 * m);
            let mean = channel_mean(x);
            x.iter().map(|&v| mean + (v - mean) * f).collect()
        }
        "sharpness" => {
            let blur = box_blur(x, d);
            let f = T::lit(sign * 0.9 * m);
            x.iter().zip(&blur).map(|(&v, &b)| v + (v - b) * f).collect()
        }
        "solarize" => {
            let t = T::lit(1.0 - m);
            x.iter()
                .map(|&v| if v > t { T::one() - v } else { v })
                .collect()
        }
        "posterize" => {
            let bits = 8 - (m * 4.0).round() as i32;
            if bits >= 8 {
                x.to_vec()
            } else {
                let levels = T::lit(((1u32 << bits) - 1) as f64);
                x.iter().map(|&v| (v * levels).floor() / levels).collect()
            }
        }
        "rotate" => {
            let a = sign * m * 30f64.to_radians();
            let (s, c) = a.sin_cos();
            warp(x, d, [[c, s], [-s, c]], (0.0, 0.0))
        }
        "shear_x" => warp(x, d, [[1.0, -sign * 0.3 * m], [0.0, 1.0]], (0.0, 0.0)),
        "shear_y" => warp(x, d, [[1.0, 0.0], [-sign * 0.3 * m, 1.0]], (0.0, 0.0)),
        "translate_x" => {
            let t = (sign * 0.3 * m * d.w as f64).round();
            warp(x, d, [[1.0, 0.0], [0.0, 1.0]], (0.0, t))
        }
        "translate_y" => {
            let t = (sign * 0.3 * m * d.h as f64).round();
            warp(x, d, [[1.0, 0.0], [0.0, 1.0]], (t, 0.0))
        }
        other => return Err(Error::UnknownOp(other.to_string())),
    };
    Ok(out)
}

fn cutout<T: Scalar, R: Rng>(x: &mut [T], d: ImageDims, frac: f64, rng: &mut R) {
    let side = ((frac * d.h.min(d.w) as f64).round() as usize).max(1);
    let cy = rng.random_range(0..d.h) as i64;
    let cx = rng.random_range(0..d.w) as i64;
    let half = side as i64 / 2;
    for y in (cy - half).max(0)..(cy - half + side as i64).min(d.h as i64) {
        for xx in (cx - half).max(0)..(cx - half + side as i64).min(d.w as i64) {
            for ch in 0..d.c {
                x[d.at(y as usize, xx as usize, ch)] = T::lit(FILL);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize) -> (Vec<f64>, InputShape) {
        let data = (0..h * w).map(|i| i as f64 / (h * w) as f64).collect();
        (
            data,
            InputShape::Image {
                height: h,
                width: w,
                channels: 1,
            },
        )
    }

    #[test]
    fn weak_identity_limits() {
        let (x, shape) = img(8, 8);
        let policy = AugPolicy {
            ops: vec![OpSpec::fixed("flip", 0.0), OpSpec::fixed("shift", 0.0)],
            ..AugPolicy::weak_image()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(weak_augment(&x, shape, &policy, &mut rng).unwrap(), x);
    }

    #[test]
    fn weak_vector_replays() {
        let x = vec![0.3f64, -1.0, 2.0, 0.5];
        let policy = AugPolicy::weak_vector(0.1);
        let a = weak_augment(&x, InputShape::Vector(4), &policy, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        // re-simulate the same noise draws directly
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let expected: Vec<f64> = x
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + 0.1 * z
            })
            .collect();
        assert_eq!(a, expected);
        assert!(a != x);
    }

    #[test]
    fn max_shift_mirrors_interior() {
        let (x, shape) = img(8, 8);
        let d = ImageDims { h: 8, w: 8, c: 1 };
        let shifted = shift_reflect(&x, d, -1, 0);
        // column 0 reads source column -1, which reflects to column 1
        for y in 0..8 {
            assert_eq!(shifted[d.at(y, 0, 0)], x[d.at(y, 1, 0)]);
            assert_eq!(shifted[d.at(y, 3, 0)], x[d.at(y, 2, 0)]);
        }
        let _ = shape;
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn zero_magnitude_ops_are_identity() {
        let (x, shape) = img(6, 7);
        for name in IMAGE_OPS.iter().filter(|n| **n != "auto_contrast") {
            let policy = AugPolicy {
                kind: AugKind::Strong,
                ops: vec![OpSpec::fixed(name, 0.0)],
                n_ops_per_call: 1,
                rng_stream_id: 1,
                cutout: (0.0, 0.0),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            assert_eq!(strong_augment(&x, shape, &policy, &mut rng).unwrap(), x, "{name}");
        }
    }

    #[test]
    fn unknown_op_rejected() {
        let policy = AugPolicy {
            ops: vec![OpSpec::fixed("warp_drive", 1.0)],
            n_ops_per_call: 1,
            ..AugPolicy::strong_image()
        };
        let (x, shape) = img(4, 4);
        let err = strong_augment(&x, shape, &policy, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::UnknownOp(ref n) if n == "warp_drive"));
    }

    #[test]
    fn full_mask_zeroes_vector() {
        let policy = AugPolicy::strong_vector(0.5, 1.0, 0.2);
        let x = vec![1.0f64, -2.0, 3.0];
        let out = strong_augment(&x, InputShape::Vector(3), &policy, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn independent_streams_differ() {
        let policy = AugPolicy::strong_vector(0.25, 0.3, 0.2);
        let x = vec![0.5f64; 16];
        let a = strong_augment(&x, InputShape::Vector(16), &policy, &mut aug_rng(1, 0, 0, Branch::StrongI, 1))
            .unwrap();
        let b = strong_augment(&x, InputShape::Vector(16), &policy, &mut aug_rng(1, 0, 0, Branch::StrongJ, 1))
            .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn strong_image_preserves_shape_and_replays() {
        let shape = InputShape::Image {
            height: 8,
            width: 8,
            channels: 3,
        };
        let x: Vec<f32> = (0..192).map(|i| (i % 17) as f32 / 17.0).collect();
        let policy = AugPolicy::strong_image();
        for seed in 0..20 {
            let a = strong_augment(&x, shape, &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = strong_augment(&x, shape, &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a.len(), x.len());
            assert_eq!(a, b);
            assert!(a.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn weak_policy_rejects_strong_ops() {
        let policy = AugPolicy {
            ops: vec![OpSpec::fixed("rotate", 0.5)],
            ..AugPolicy::weak_image()
        };
        assert!(policy
            .validate(InputShape::Image {
                height: 4,
                width: 4,
                channels: 1
            })
            .is_err());
    }
}
