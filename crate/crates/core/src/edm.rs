//! Noise-level parameterized diffusion: preconditioning, loss weighting,
//! training-noise sampling and the deterministic Heun sampler.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::conditioning::ConditionBatch;
use crate::error::{Error, Result};
use crate::rng::{normal, normals, Rng};
use crate::tensor::Tensor;

/// Noise-scale configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SigmaParams {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for SigmaParams {
    fn default() -> Self {
        Self {
            sigma_data: 0.5,
            p_mean: -1.2,
            p_std: 1.2,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
        }
    }
}

impl SigmaParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma_data", self.sigma_data),
            ("sigma_min", self.sigma_min),
            ("sigma_max", self.sigma_max),
            ("rho", self.rho),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.p_std >= 0.0 && self.p_std.is_finite()) || !self.p_mean.is_finite() {
            return Err(Error::Config("p_mean must be finite and p_std non-negative".into()));
        }
        if self.sigma_min >= self.sigma_max {
            return Err(Error::Config(format!(
                "sigma_min ({}) must be below sigma_max ({})",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma > 0.0 && sigma.is_finite() {
            Ok(Self(sigma))
        } else {
            Err(Error::Domain(format!("noise level must be positive and finite, got {sigma}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecondCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precond_coeffs(sigma: NoiseLevel, params: &SigmaParams) -> PrecondCoeffs {
    let s = sigma.0;
    let sd = params.sigma_data;
    let total = s * s + sd * sd;
    PrecondCoeffs {
        c_skip: sd * sd / total,
        c_out: s * sd / total.sqrt(),
        c_in: 1.0 / total.sqrt(),
        c_noise: s.ln() / 4.0,
    }
}

/// `λ(σ) = (σ² + σ_data²) / (σ·σ_data)²`, the reciprocal of `c_out²`.
pub fn loss_weight(sigma: NoiseLevel, params: &SigmaParams) -> f64 {
    let s = sigma.0;
    let sd = params.sigma_data;
    (s * s + sd * sd) / (s * sd).powi(2)
}

/// Draws `ln σ ~ N(p_mean, p_std²)`.
pub fn sample_training_sigma(rng: &mut Rng, params: &SigmaParams) -> NoiseLevel {
    let z = normal(rng);
    NoiseLevel((params.p_mean + params.p_std * z).exp())
}

/// `σ_i = (σ_max^{1/ρ} + i/(n−1)·(σ_min^{1/ρ} − σ_max^{1/ρ}))^ρ`.
pub fn karras_schedule(n_steps: usize, params: &SigmaParams) -> Result<Vec<NoiseLevel>> {
    if n_steps < 2 {
        return Err(Error::Domain(format!("schedule needs at least 2 steps, got {n_steps}")));
    }
    let inv = 1.0 / params.rho;
    let (hi, lo) = (params.sigma_max.powf(inv), params.sigma_min.powf(inv));
    let last = n_steps - 1;
    Ok((0..n_steps)
        .map(|i| {
            let s = match i {
                0 => params.sigma_max,
                i if i == last => params.sigma_min,
                _ => (hi + i as f64 / last as f64 * (lo - hi)).powf(params.rho),
            };
            NoiseLevel(s)
        })
        .collect())
}

/// The raw network `F_θ`. Receives the `c_in`-scaled noisy image and one
/// `c_noise` value per batch item and returns a `[B, 3, H, W]` output.
pub trait Network {
    fn raw(&self, g: &Graph, scaled_x: &Tensor, c_noise: &[f64], cond: &ConditionBatch) -> Result<Var>;
}

fn check_congruent(x: &Tensor, cond: &ConditionBatch) -> Result<()> {
    if x.shape() != cond.image_shape() {
        return Err(Error::Contract(format!(
            "image {:?} not aligned with conditions {:?}",
            x.shape(),
            cond.image_shape()
        )));
    }
    Ok(())
}

/// Records `D_θ(x; σ) = c_skip·x + c_out·F_θ(c_in·x; c_noise)` on `g`.
pub fn denoise_on<N: Network + ?Sized>(
    g: &Graph,
    net: &N,
    x: &Tensor,
    sigmas: &[NoiseLevel],
    cond: &ConditionBatch,
    params: &SigmaParams,
) -> Result<Var> {
    check_congruent(x, cond)?;
    let b = x.shape()[0];
    if sigmas.len() != b {
        return Err(Error::Contract(format!("{} noise levels for batch of {b}", sigmas.len())));
    }
    let coeffs: Vec<PrecondCoeffs> = sigmas.iter().map(|&s| precond_coeffs(s, params)).collect();
    let per = x.numel() / b;
    let mut scaled = x.clone();
    let mut skip = x.clone();
    for (i, (sv, kv)) in scaled
        .data_mut()
        .iter_mut()
        .zip(skip.data_mut().iter_mut())
        .enumerate()
    {
        let c = &coeffs[i / per];
        *sv *= c.c_in;
        *kv *= c.c_skip;
    }
    let c_noise: Vec<f64> = coeffs.iter().map(|c| c.c_noise).collect();
    let c_out: Vec<f64> = coeffs.iter().map(|c| c.c_out).collect();
    let f = net.raw(g, &scaled, &c_noise, cond)?;
    if g.shape(f) != x.shape() {
        return Err(Error::Contract(format!(
            "network output {:?} does not match input {:?}",
            g.shape(f),
            x.shape()
        )));
    }
    let out = g.scale_items(f, &c_out)?;
    let skip = g.constant(skip);
    g.add(out, skip)
}

/// Evaluates the denoiser without recording gradients.
pub fn denoise<N: Network + ?Sized>(
    net: &N,
    x: &Tensor,
    sigma: NoiseLevel,
    cond: &ConditionBatch,
    params: &SigmaParams,
) -> Result<Tensor> {
    let g = Graph::inference();
    let sigmas = vec![sigma; x.shape().first().copied().unwrap_or(0)];
    let d = denoise_on(&g, net, x, &sigmas, cond, params)?;
    let out = (*g.value(d)).clone();
    Ok(out)
}

/// Records `mean_b λ(σ_b)·MSE(D(y_b + n_b; σ_b), y_b)` on `g`.
#[allow(clippy::too_many_arguments)]
pub fn training_loss_on<N: Network + ?Sized>(
    g: &Graph,
    net: &N,
    y: &Tensor,
    n: &Tensor,
    sigmas: &[NoiseLevel],
    cond: &ConditionBatch,
    params: &SigmaParams,
) -> Result<Var> {
    if y.shape() != n.shape() {
        return Err(Error::Contract(format!(
            "clean {:?} and noise {:?} shapes differ",
            y.shape(),
            n.shape()
        )));
    }
    if !y.is_finite() || !n.is_finite() {
        return Err(Error::Numeric("non-finite training input".into()));
    }
    let mut x = y.clone();
    x.add_assign(n);
    let d = denoise_on(g, net, &x, sigmas, cond, params)?;
    let weights: Vec<f64> = sigmas.iter().map(|&s| loss_weight(s, params)).collect();
    g.weighted_mse(d, y, &weights)
}

pub fn training_loss<N: Network + ?Sized>(
    net: &N,
    y: &Tensor,
    n: &Tensor,
    sigmas: &[NoiseLevel],
    cond: &ConditionBatch,
    params: &SigmaParams,
) -> Result<f64> {
    let g = Graph::inference();
    let l = training_loss_on(&g, net, y, n, sigmas, cond, params)?;
    let v = g.value(l).data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("training loss is {v}")));
    }
    Ok(v)
}

/// Anything that maps `(x, σ, conditions)` to a denoised estimate of `x`.
pub trait Denoiser {
    fn denoise(&self, x: &Tensor, sigma: NoiseLevel, cond: &ConditionBatch) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, NoiseLevel, &ConditionBatch) -> Result<Tensor>,
{
    fn denoise(&self, x: &Tensor, sigma: NoiseLevel, cond: &ConditionBatch) -> Result<Tensor> {
        self(x, sigma, cond)
    }
}

/// Wraps a raw network with preconditioning.
pub struct Preconditioned<'a, N: Network + ?Sized> {
    pub net: &'a N,
    pub params: SigmaParams,
}

impl<N: Network + ?Sized> Denoiser for Preconditioned<'_, N> {
    fn denoise(&self, x: &Tensor, sigma: NoiseLevel, cond: &ConditionBatch) -> Result<Tensor> {
        denoise(self.net, x, sigma, cond, &self.params)
    }
}

fn checked<D: Denoiser + ?Sized>(d: &D, x: &Tensor, s: NoiseLevel, cond: &ConditionBatch, step: usize) -> Result<Tensor> {
    let out = d.denoise(x, s, cond)?;
    if out.shape() != x.shape() {
        return Err(Error::Contract(format!(
            "denoiser returned {:?} for input {:?}",
            out.shape(),
            x.shape()
        )));
    }
    if !out.is_finite() {
        return Err(Error::Numeric(format!(
            "denoiser produced non-finite values at step {step} (sigma={})",
            s.get()
        )));
    }
    Ok(out)
}

/// Deterministic second-order (Heun) integration of the probability-flow ODE
/// along the Karras schedule, followed by a final denoise at `σ_min`.
pub fn heun_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: &ConditionBatch,
    n_steps: usize,
    params: &SigmaParams,
    rng: &mut Rng,
) -> Result<Tensor> {
    let sched = karras_schedule(n_steps, params)?;
    let shape = cond.image_shape();
    let n: usize = shape.iter().product();
    let mut x = Tensor::from_vec(&shape, normals(rng, n))?.scale(sched[0].get());
    for i in 0..sched.len() - 1 {
        let (s_cur, s_next) = (sched[i], sched[i + 1]);
        let d_cur = checked(denoiser, &x, s_cur, cond, i)?;
        let slope: Vec<f64> = x
            .data()
            .iter()
            .zip(d_cur.data())
            .map(|(xi, di)| (xi - di) / s_cur.get())
            .collect();
        let h = s_next.get() - s_cur.get();
        let euler: Vec<f64> = x.data().iter().zip(&slope).map(|(xi, d)| xi + h * d).collect();
        let x_euler = Tensor::from_vec(&shape, euler)?;
        // s_next is always positive here; the correction is never skipped.
        let d_next = checked(denoiser, &x_euler, s_next, cond, i)?;
        let corrected: Vec<f64> = x
            .data()
            .iter()
            .zip(&slope)
            .zip(x_euler.data().iter().zip(d_next.data()))
            .map(|((xi, d), (xe, dn))| {
                let d2 = (xe - dn) / s_next.get();
                xi + h * 0.5 * (d + d2)
            })
            .collect();
        x = Tensor::from_vec(&shape, corrected)?;
    }
    let last = *sched.last().expect("schedule non-empty");
    checked(denoiser, &x, last, cond, sched.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{encode_mask, ConditionSet};
    use crate::image::{ChangeMask, Image};
    use crate::rng::seeded;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn coefficients_at_sigma_data() {
        let p = SigmaParams::default();
        let c = precond_coeffs(NoiseLevel::new(0.5).unwrap(), &p);
        assert!(close(c.c_skip, 0.5, 1e-15));
        assert!(close(c.c_out, 0.353_553_390_593_273_8, 1e-15));
        assert!(close(c.c_in, std::f64::consts::SQRT_2, 1e-15));
        assert!(close(c.c_noise, 0.5f64.ln() / 4.0, 1e-15));
        assert!(close(c.c_noise, -0.17329, 1e-5));
    }

    #[test]
    fn coefficient_limits() {
        let p = SigmaParams::default();
        let tiny = precond_coeffs(NoiseLevel::new(1e-9).unwrap(), &p);
        assert!(close(tiny.c_skip, 1.0, 1e-12));
        assert!(tiny.c_out < 1e-8);
        assert!(close(tiny.c_in, 1.0 / p.sigma_data, 1e-12));
        let huge = precond_coeffs(NoiseLevel::new(1e9).unwrap(), &p);
        assert!(huge.c_skip < 1e-12);
    }

    #[test]
    fn non_positive_sigma_is_a_domain_error() {
        assert!(matches!(NoiseLevel::new(0.0), Err(Error::Domain(_))));
        assert!(matches!(NoiseLevel::new(-1.0), Err(Error::Domain(_))));
        assert!(matches!(NoiseLevel::new(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn loss_weight_values() {
        let p = SigmaParams::default();
        assert!(close(loss_weight(NoiseLevel(0.5), &p), 8.0, 1e-12));
        let unit = SigmaParams {
            sigma_data: 1.0,
            ..p
        };
        assert!(close(loss_weight(NoiseLevel(1.0), &unit), 2.0, 1e-12));
        for s in [1e-3, 0.3, 7.0, 900.0] {
            let c = precond_coeffs(NoiseLevel(s), &p);
            assert!(close(loss_weight(NoiseLevel(s), &p) * c.c_out * c.c_out, 1.0, 1e-12));
        }
    }

    #[test]
    fn training_sigma_distribution() {
        let degenerate = SigmaParams {
            p_std: 0.0,
            ..SigmaParams::default()
        };
        let mut rng = seeded(1);
        for _ in 0..10 {
            let s = sample_training_sigma(&mut rng, &degenerate).get();
            assert!(close(s, (-1.2f64).exp(), 1e-15));
            assert!(close(s, 0.30119, 1e-5));
        }
        let p = SigmaParams::default();
        let a = sample_training_sigma(&mut seeded(9), &p);
        let b = sample_training_sigma(&mut seeded(9), &p);
        assert_eq!(a, b);
        let mut rng = seeded(2);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_training_sigma(&mut rng, &p).get().ln()).sum::<f64>() / n as f64;
        assert!((mean + 1.2).abs() < 0.02, "mean ln sigma {mean}");
    }

    #[test]
    fn schedule_shapes() {
        let p = SigmaParams::default();
        let two = karras_schedule(2, &p).unwrap();
        assert_eq!(two.iter().map(|s| s.get()).collect::<Vec<_>>(), vec![80.0, 0.002]);
        let linear = SigmaParams { rho: 1.0, ..p };
        let three = karras_schedule(3, &linear).unwrap();
        assert!(close(three[1].get(), 40.001, 1e-12));
        let s = karras_schedule(18, &p).unwrap();
        assert_eq!(s.len(), 18);
        assert_eq!(s[0].get(), 80.0);
        assert_eq!(s[17].get(), 0.002);
        for w in s.windows(2) {
            assert!(w[0].get() > w[1].get());
        }
        assert!(matches!(karras_schedule(1, &p), Err(Error::Domain(_))));
    }

    fn cond_batch(h: usize, w: usize) -> ConditionBatch {
        let set = ConditionSet::new(
            Image::zeros(h, w, 3),
            Image::zeros(h, w, 3),
            encode_mask(&ChangeMask::zeros(h, w), 2).unwrap(),
        )
        .unwrap();
        ConditionBatch::from_sets(&[&set]).unwrap()
    }

    struct Zero;
    impl Network for Zero {
        fn raw(&self, g: &Graph, x: &Tensor, _: &[f64], _: &ConditionBatch) -> Result<Var> {
            Ok(g.constant(Tensor::zeros(x.shape())))
        }
    }

    /// `F(u) = w·u` with a single hand-set weight.
    struct Scalar(f64);
    impl Network for Scalar {
        fn raw(&self, g: &Graph, x: &Tensor, _: &[f64], _: &ConditionBatch) -> Result<Var> {
            Ok(g.constant(x.scale(self.0)))
        }
    }

    fn ramp(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn zero_network_denoiser_is_skip_scaled_input() {
        let p = SigmaParams::default();
        let cond = cond_batch(2, 3);
        let x = ramp(&[1, 3, 2, 3]);
        let s = NoiseLevel(1.3);
        let d = denoise(&Zero, &x, s, &cond, &p).unwrap();
        let c = precond_coeffs(s, &p);
        for (a, b) in d.data().iter().zip(x.data()) {
            assert_eq!(*a, c.c_skip * b);
        }
        let zero = Tensor::zeros(&[1, 3, 2, 3]);
        assert!(denoise(&Zero, &zero, s, &cond, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_network_matches_hand_evaluation() {
        let p = SigmaParams::default();
        let cond = cond_batch(1, 1);
        let x = Tensor::from_vec(&[1, 3, 1, 1], vec![0.8, -0.2, 1.5]).unwrap();
        let sigma = 2.0;
        let d = denoise(&Scalar(0.7), &x, NoiseLevel(sigma), &cond, &p).unwrap();
        let total: f64 = sigma * sigma + 0.25;
        let (c_skip, c_out, c_in) = (0.25 / total, sigma * 0.5 / total.sqrt(), 1.0 / total.sqrt());
        for (got, xi) in d.data().iter().zip(x.data()) {
            let want = c_skip * xi + c_out * 0.7 * c_in * xi;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn misaligned_conditions_are_rejected() {
        let p = SigmaParams::default();
        let x = Tensor::zeros(&[1, 3, 2, 2]);
        assert!(matches!(denoise(&Zero, &x, NoiseLevel(1.0), &cond_batch(2, 3), &p), Err(Error::Contract(_))));
    }

    #[test]
    fn training_loss_cases() {
        let p = SigmaParams::default();
        let cond = cond_batch(2, 2);
        let y = ramp(&[1, 3, 2, 2]);
        let n = ramp(&[1, 3, 2, 2]).scale(0.3);
        let s = NoiseLevel(0.5);
        let lam = loss_weight(s, &p);
        let l = training_loss(&Zero, &y, &n, &[s], &cond, &p).unwrap();
        let c = precond_coeffs(s, &p);
        let want = lam
            * y.data()
                .iter()
                .zip(n.data())
                .map(|(yy, nn)| (c.c_skip * (yy + nn) - yy).powi(2))
                .sum::<f64>()
            / 12.0;
        assert!((l - want).abs() < 1e-12);

        // A denoiser that returns y + 0.1 everywhere: F chosen so D = y + c.
        struct Offset(Tensor, f64, SigmaParams);
        impl Network for Offset {
            fn raw(&self, g: &Graph, x_scaled: &Tensor, c_noise: &[f64], _: &ConditionBatch) -> Result<Var> {
                let sigma = (c_noise[0] * 4.0).exp();
                let c = precond_coeffs(NoiseLevel(sigma), &self.2);
                let x = x_scaled.scale(1.0 / c.c_in);
                let f: Vec<f64> = self
                    .0
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(yy, xx)| (yy + self.1 - c.c_skip * xx) / c.c_out)
                    .collect();
                Ok(g.constant(Tensor::from_vec(x.shape(), f)?))
            }
        }
        let l = training_loss(&Offset(y.clone(), 0.1, p), &y, &n, &[s], &cond, &p).unwrap();
        assert!((l - lam * 0.01).abs() < 1e-10);
        let l0 = training_loss(&Offset(y.clone(), 0.0, p), &y, &n, &[s], &cond, &p).unwrap();
        assert!(l0.abs() < 1e-20);

        let mut bad = n.clone();
        bad.data_mut()[0] = f64::NAN;
        assert!(matches!(training_loss(&Zero, &y, &bad, &[s], &cond, &p), Err(Error::Numeric(_))));
    }

    #[test]
    fn training_loss_is_permutation_invariant() {
        let p = SigmaParams::default();
        let y = ramp(&[1, 3, 2, 2]);
        let n = ramp(&[1, 3, 2, 2]).scale(-0.4);
        let perm = [3, 0, 2, 1];
        let permute = |t: &Tensor| {
            let mut out = t.clone();
            for c in 0..3 {
                for (dst, &src) in perm.iter().enumerate() {
                    out.data_mut()[c * 4 + dst] = t.data()[c * 4 + src];
                }
            }
            out
        };
        let cond = cond_batch(2, 2);
        let s = [NoiseLevel(0.9)];
        let a = training_loss(&Zero, &y, &n, &s, &cond, &p).unwrap();
        let b = training_loss(&Zero, &permute(&y), &permute(&n), &s, &cond, &p).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn heun_recovers_oracle_target() {
        let p = SigmaParams::default();
        let cond = cond_batch(3, 2);
        let target = ramp(&[1, 3, 3, 2]);
        let oracle = |_: &Tensor, _: NoiseLevel, _: &ConditionBatch| Ok(target.clone());
        for n in [2, 3, 8, 18, 32] {
            let out = heun_sample(&oracle, &cond, n, &p, &mut seeded(5)).unwrap();
            assert!(out.max_abs_diff(&target) <= 1e-5, "n={n}");
        }
    }

    #[test]
    fn heun_is_deterministic_and_checks_finiteness() {
        let p = SigmaParams::default();
        let cond = cond_batch(2, 2);
        let half = |x: &Tensor, _: NoiseLevel, _: &ConditionBatch| Ok(x.scale(0.5));
        let a = heun_sample(&half, &cond, 6, &p, &mut seeded(3)).unwrap();
        let b = heun_sample(&half, &cond, 6, &p, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        let nan = |x: &Tensor, _: NoiseLevel, _: &ConditionBatch| Ok(Tensor::full(x.shape(), f64::NAN));
        assert!(matches!(heun_sample(&nan, &cond, 4, &p, &mut seeded(3)), Err(Error::Numeric(_))));
    }

    #[test]
    fn preconditioning_identities_hold_across_range() {
        let p = SigmaParams::default();
        let mut rng = seeded(77);
        for _ in 0..1000 {
            let s = 10f64.powf(crate::rng::uniform(&mut rng, -3.0, 3.0));
            let c = precond_coeffs(NoiseLevel(s), &p);
            let total = s * s + p.sigma_data * p.sigma_data;
            assert!((c.c_in * c.c_in * total - 1.0).abs() < 1e-9);
            assert!((loss_weight(NoiseLevel(s), &p) * c.c_out * c.c_out - 1.0).abs() < 1e-9);
            assert!((c.c_skip * total - p.sigma_data * p.sigma_data).abs() < 1e-9 * p.sigma_data.powi(2));
        }
    }
}
