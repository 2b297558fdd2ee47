//! Per-channel style statistics and the operators built on them: instance
//! normalization, AdaIN, Gram matrices and image-level style randomization.
//!
//! Statistics are always taken over the two trailing (spatial) axes with the
//! population variance, `σ = sqrt(mean((x - μ)²) + ε)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Scalar, EPSILON};
use crate::tensor::{Graph, Tensor, Var};

/// Per-instance, per-channel mean and standard deviation.
///
/// `mean` and `std` are laid out `[batch][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleStats<T> {
    pub batch: usize,
    pub channels: usize,
    pub mean: Vec<T>,
    pub std: Vec<T>,
    pub epsilon: T,
}

impl<T: Scalar> StyleStats<T> {
    pub fn mean_at(&self, b: usize, c: usize) -> T {
        self.mean[b * self.channels + c]
    }

    pub fn std_at(&self, b: usize, c: usize) -> T {
        self.std[b * self.channels + c]
    }
}

/// Splits a `[C,H,W]` or `[B,C,H,W]` shape into `(B, C, H·W)`.
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = match *shape {
        [c, h, w] => (1, c, h, w),
        [b, c, h, w] => (b, c, h, w),
        _ => {
            return Err(Error::shape(format!(
                "expected [C,H,W] or [B,C,H,W], got {shape:?}"
            )))
        }
    };
    if h * w == 0 {
        return Err(Error::shape(format!("empty spatial extent in {shape:?}")));
    }
    Ok((b, c, h * w))
}

fn spatial_axes(ndim: usize) -> [usize; 2] {
    [ndim - 2, ndim - 1]
}

pub fn channel_stats<T: Scalar>(x: &Tensor<T>, epsilon: T) -> Result<StyleStats<T>> {
    if epsilon <= T::zero() {
        return Err(Error::config("epsilon must be positive"));
    }
    let (b, c, hw) = layout(x.shape())?;
    let n = T::lit(hw as f64);
    let mut mean = Vec::with_capacity(b * c);
    let mut std = Vec::with_capacity(b * c);
    for plane in x.data().chunks_exact(hw) {
        let mu = plane.iter().copied().sum::<T>() / n;
        let var = plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        mean.push(mu);
        std.push((var + epsilon).sqrt());
    }
    Ok(StyleStats {
        batch: b,
        channels: c,
        mean,
        std,
        epsilon,
    })
}

/// Recorded per-channel `(μ, σ)` of a `[..,C,H,W]` value, each shaped like
/// the input with the spatial axes removed.
pub fn channel_stats_graph<T: Scalar>(g: &mut Graph<T>, x: Var, epsilon: T) -> Result<(Var, Var)> {
    layout(g.shape(x))?;
    let shape = g.shape(x).to_vec();
    let axes = spatial_axes(shape.len());
    let mu = g.mean(x, &axes)?;
    let mu_e = g.expand(mu, &shape, &axes)?;
    let centered = g.sub(x, mu_e)?;
    let sq = g.square(centered)?;
    let var = g.mean(sq, &axes)?;
    let var_eps = g.add_scalar(var, epsilon)?;
    let sigma = g.sqrt(var_eps)?;
    Ok((mu, sigma))
}

/// `(x - μ(x)) / σ(x)` per instance and channel.
pub fn normalize_graph<T: Scalar>(g: &mut Graph<T>, x: Var, epsilon: T) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let axes = spatial_axes(shape.len());
    let (mu, sigma) = channel_stats_graph(g, x, epsilon)?;
    let mu_e = g.expand(mu, &shape, &axes)?;
    let sigma_e = g.expand(sigma, &shape, &axes)?;
    let centered = g.sub(x, mu_e)?;
    g.div(centered, sigma_e)
}

/// Broadcasts a per-channel vector `[C]` across a `[..,C,H,W]` shape.
pub fn broadcast_channels<T: Scalar>(g: &mut Graph<T>, v: Var, shape: &[usize]) -> Result<Var> {
    let nd = shape.len();
    if nd < 3 || g.shape(v) != [shape[nd - 3]] {
        return Err(Error::shape(format!(
            "per-channel vector {:?} does not match {:?}",
            g.shape(v),
            shape
        )));
    }
    let axes: Vec<usize> = (0..nd).filter(|&a| a != nd - 3).collect();
    g.expand(v, shape, &axes)
}

/// Instance normalization with per-channel affine `gamma`, `beta` (`[C]`).
pub fn instance_norm_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    epsilon: T,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (_, c, _) = layout(&shape)?;
    if g.shape(gamma) != [c] || g.shape(beta) != [c] {
        return Err(Error::shape(format!(
            "instance_norm: affine vectors {:?}/{:?} do not match {} channels",
            g.shape(gamma),
            g.shape(beta),
            c
        )));
    }
    let n = normalize_graph(g, x, epsilon)?;
    let ge = broadcast_channels(g, gamma, &shape)?;
    let be = broadcast_channels(g, beta, &shape)?;
    let scaled = g.mul(n, ge)?;
    g.add(scaled, be)
}

pub fn instance_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    epsilon: T,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gv = g.constant(gamma.clone());
    let bv = g.constant(beta.clone());
    let out = instance_norm_graph(&mut g, xv, gv, bv, epsilon)?;
    Ok(g.value(out).clone())
}

/// AdaIN: re-styles `content` with the channel statistics of `reference`.
/// Spatial extents may differ; batch and channel extents must agree.
pub fn adain_graph<T: Scalar>(
    g: &mut Graph<T>,
    content: Var,
    reference: Var,
    epsilon: T,
) -> Result<Var> {
    let shape = g.shape(content).to_vec();
    let (bc, cc, _) = layout(&shape)?;
    let (br, cr, _) = layout(g.shape(reference))?;
    if bc != br || cc != cr {
        return Err(Error::shape(format!(
            "adain: content {:?} and reference {:?} disagree in batch/channels",
            shape,
            g.shape(reference)
        )));
    }
    let axes = spatial_axes(shape.len());
    let n = normalize_graph(g, content, epsilon)?;
    let (mu_r, sigma_r) = channel_stats_graph(g, reference, epsilon)?;
    let mu_e = g.expand(mu_r, &shape, &axes)?;
    let sigma_e = g.expand(sigma_r, &shape, &axes)?;
    let scaled = g.mul(n, sigma_e)?;
    g.add(scaled, mu_e)
}

pub fn adain<T: Scalar>(
    content: &Tensor<T>,
    reference: &Tensor<T>,
    epsilon: T,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let c = g.constant(content.clone());
    let r = g.constant(reference.clone());
    let out = adain_graph(&mut g, c, r, epsilon)?;
    Ok(g.value(out).clone())
}

/// Gram matrix `(1/HW)·M·Mᵀ` of a single `[C,H,W]` instance.
pub fn gram_graph<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "gram matrix needs [C,H,W], got {shape:?}"
        )));
    }
    let (_, c, hw) = layout(&shape)?;
    let m = g.reshape(x, &[c, hw])?;
    let mt = g.transpose(m)?;
    let mmt = g.matmul(m, mt)?;
    g.mul_scalar(mmt, T::one() / T::lit(hw as f64))
}

pub fn gram_matrix<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = gram_graph(&mut g, v)?;
    Ok(g.value(out).clone())
}

/// Sampling range of the image-level style randomizer, on the raw
/// intensity scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrmIlConfig {
    pub x_min: f64,
    pub x_max: f64,
    /// Lower bound of the sampled standard deviation.
    pub sigma_floor: f64,
    pub rng_seed: u64,
}

impl Default for SrmIlConfig {
    fn default() -> Self {
        Self {
            x_min: 0.0,
            x_max: 255.0,
            sigma_floor: 1.0,
            rng_seed: 0,
        }
    }
}

impl SrmIlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_min < self.x_max) {
            return Err(Error::config("srm_il: x_min must be below x_max"));
        }
        if !(self.sigma_floor > 0.0) || self.sigma_floor >= self.x_max {
            return Err(Error::config("srm_il: sigma_floor must lie in (0, x_max)"));
        }
        Ok(())
    }

    /// Draws `(μ(S), σ(S))` independently and uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let mu = rng.gen_range(self.x_min..=self.x_max);
        let sigma = rng.gen_range(self.sigma_floor..=self.x_max);
        (mu, sigma)
    }
}

/// Image-level style randomization of a `[1,H,W]` raw-scale image with a
/// freshly sampled target style. Returns the stylized image and the
/// sampled statistics.
pub fn srm_il<T: Scalar, R: Rng + ?Sized>(
    image: &Tensor<T>,
    cfg: &SrmIlConfig,
    rng: &mut R,
) -> Result<(Tensor<T>, StyleStats<T>)> {
    cfg.validate()?;
    let (mu, sigma) = cfg.sample(rng);
    let out = srm_il_with(image, T::lit(mu), T::lit(sigma), T::lit(EPSILON))?;
    let stats = StyleStats {
        batch: 1,
        channels: 1,
        mean: vec![T::lit(mu)],
        std: vec![T::lit(sigma)],
        epsilon: T::lit(EPSILON),
    };
    Ok((out, stats))
}

/// `σ_t · (I - μ(I)) / σ(I) + μ_t` on a single-channel image; no clamping.
pub fn srm_il_with<T: Scalar>(
    image: &Tensor<T>,
    mu_t: T,
    sigma_t: T,
    epsilon: T,
) -> Result<Tensor<T>> {
    let (b, c, _) = layout(image.shape())?;
    if b != 1 || c != 1 || image.ndim() != 3 {
        return Err(Error::shape(format!(
            "srm_il expects a [1,H,W] image, got {:?}",
            image.shape()
        )));
    }
    let stats = channel_stats(image, epsilon)?;
    let (mu, sd) = (stats.mean[0], stats.std[0]);
    Ok(image.map(|v| sigma_t * (v - mu) / sd + mu_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square() -> Tensor<f64> {
        Tensor::from_f64(&[1, 2, 2], &[1.0, 3.0, 5.0, 7.0]).unwrap()
    }

    #[test]
    fn channel_stats_examples() {
        let s = channel_stats(&square(), 1e-5).unwrap();
        assert_eq!(s.mean, vec![4.0]);
        assert_abs_diff_eq!(s.std[0], 5.00001f64.sqrt(), epsilon = 1e-15);

        let c = channel_stats(&Tensor::full(&[1, 3, 3], 7.0), 1e-5).unwrap();
        assert_eq!(c.mean[0], 7.0);
        assert_abs_diff_eq!(c.std[0], 1e-5f64.sqrt(), epsilon = 1e-15);

        let z = channel_stats(&Tensor::<f64>::zeros(&[2, 3, 2, 2]), 1e-5).unwrap();
        assert_eq!(z.mean.len(), 6);
        assert!(z.std.iter().all(|&s| (s - 1e-5f64.sqrt()).abs() < 1e-15));

        assert!(channel_stats(&Tensor::<f64>::zeros(&[1, 0, 2]), 1e-5).is_err());
    }

    #[test]
    fn instance_norm_examples() {
        let x = square();
        let sd = 5.00001f64.sqrt();
        let out = instance_norm(
            &x,
            &Tensor::from_f64(&[1], &[2.0]).unwrap(),
            &Tensor::from_f64(&[1], &[1.0]).unwrap(),
            1e-5,
        )
        .unwrap();
        for (o, c) in out.data().iter().zip([-3.0, -1.0, 1.0, 3.0]) {
            assert_abs_diff_eq!(*o, 2.0 * c / sd + 1.0, epsilon = 1e-12);
        }

        let flat = instance_norm(
            &x,
            &Tensor::from_f64(&[1], &[0.0]).unwrap(),
            &Tensor::from_f64(&[1], &[5.0]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(flat.data().iter().all(|&v| v == 5.0));

        let unit = instance_norm(
            &Tensor::from_fn(&[2, 8, 8], |i| ((i * 37) % 11) as f64),
            &Tensor::full(&[2], 1.0),
            &Tensor::full(&[2], 0.0),
            1e-5,
        )
        .unwrap();
        let s = channel_stats(&unit, 1e-5).unwrap();
        for c in 0..2 {
            assert_abs_diff_eq!(s.mean[c], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(s.std[c], 1.0, epsilon = 1e-5);
        }

        let err = instance_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::full(&[2], 0.0), 1e-5);
        assert!(err.is_err());
    }

    #[test]
    fn adain_examples() {
        let x = square();
        let same = adain(&x, &x, 1e-5).unwrap();
        assert!(same.max_abs_diff(&x) < 1e-5 * 7.0);

        let r = Tensor::from_f64(&[1, 2, 2], &[0.0, 2.0, 4.0, 6.0]).unwrap();
        let out = adain(&x, &r, 1e-5).unwrap();
        let so = channel_stats(&out, 1e-5).unwrap();
        let sr = channel_stats(&r, 1e-5).unwrap();
        assert_abs_diff_eq!(so.mean[0], 3.0, epsilon = 1e-12);
        assert!((so.std[0] - sr.std[0]).abs() / sr.std[0] < 1e-5);

        let c = Tensor::full(&[1, 2, 2], 9.0);
        let out = adain(&x, &c, 1e-5).unwrap();
        let so = channel_stats(&out, 1e-5).unwrap();
        assert_abs_diff_eq!(so.mean[0], 9.0, epsilon = 1e-12);
        // The reference carries σ = √ε, so deviations shrink to √ε·normalized.
        let sd = 5.00001f64.sqrt();
        for (o, c) in out.data().iter().zip([-3.0, -1.0, 1.0, 3.0]) {
            assert_abs_diff_eq!(*o - 9.0, 1e-5f64.sqrt() * c / sd, epsilon = 1e-12);
        }

        let two = Tensor::<f64>::zeros(&[2, 2, 2]);
        assert!(adain(&x, &two, 1e-5).is_err());
    }

    #[test]
    fn gram_examples() {
        let x = Tensor::<f64>::from_f64(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let gm = gram_matrix(&x).unwrap();
        assert_eq!(gm.shape(), &[2, 2]);
        assert_eq!(gm.data(), &[0.5, 0.0, 0.0, 0.5]);

        let z = gram_matrix(&Tensor::<f64>::zeros(&[3, 2, 2])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(gram_matrix(&Tensor::<f64>::zeros(&[3, 0, 2])).is_err());
    }

    #[test]
    fn srm_il_examples() {
        let x = square();
        let s = channel_stats(&x, 1e-5).unwrap();
        let same = srm_il_with(&x, s.mean[0], s.std[0], 1e-5).unwrap();
        assert!(same.max_abs_diff(&x) < 1e-12);

        let unit = srm_il_with(&x, 0.0, 1.0, 1e-5).unwrap();
        let sd = 5.00001f64.sqrt();
        for (o, c) in unit.data().iter().zip([-3.0, -1.0, 1.0, 3.0]) {
            assert_abs_diff_eq!(*o, c / sd, epsilon = 1e-12);
        }

        let cfg = SrmIlConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let (_, st) = srm_il(&x, &cfg, &mut rng).unwrap();
            assert!((0.0..=255.0).contains(&st.mean[0]));
            assert!((1.0..=255.0).contains(&st.std[0]));
        }

        let flat = Tensor::<f64>::full(&[1, 2, 2], 3.0);
        let out = srm_il_with(&flat, 10.0, 5.0, 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 10.0));
    }

    #[test]
    fn srm_il_config_validation() {
        let bad = SrmIlConfig {
            x_min: 5.0,
            x_max: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SrmIlConfig {
            sigma_floor: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
