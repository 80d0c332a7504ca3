//! Forward-process mathematics.
//!
//! A monotone base curve of signal-retention coefficients (alpha-bar) is
//! reflected about the trajectory midpoint so that the effective noise level
//! is zero at both `t = 0` and `t = T` and maximal at `T / 2`. The noise-free
//! component of the trajectory (the clean path) is the identity for
//! segmentation and a convex pre/post interpolation for change detection, so
//! `t = T` lands exactly on the task endpoint.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Float, Tensor};
use crate::{Error, Result, Task};

/// Smallest alpha-bar value a curve may hold; keeps the cosine family's
/// terminal entry strictly positive.
pub const ALPHA_BAR_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    /// DDPM/DDIM forward curve: cumulative product of `1 - beta` with beta
    /// linearly spaced.
    LinearBeta,
    /// Squared-cosine curve (stands in for the PNDM family).
    Cosine,
    /// `alpha_bar = linspace(1, sqrt(terminal), S)^2`.
    Quadratic,
}

/// Serializable schedule settings as they appear under `[schedule]` in an
/// experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: CurveKind,
    pub base_steps: usize,
    #[serde(rename = "T")]
    pub total_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub cosine_offset: f64,
    pub terminal_alpha_bar: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: CurveKind::LinearBeta,
            base_steps: 1000,
            total_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            cosine_offset: 0.008,
            terminal_alpha_bar: 1e-6,
        }
    }
}

/// Family parameters for [`make_alpha_bar_curve`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CurveParams {
    LinearBeta { beta_min: f64, beta_max: f64 },
    Cosine { offset: f64 },
    Quadratic { terminal: f64 },
}

impl CurveParams {
    pub fn kind(&self) -> CurveKind {
        match self {
            CurveParams::LinearBeta { .. } => CurveKind::LinearBeta,
            CurveParams::Cosine { .. } => CurveKind::Cosine,
            CurveParams::Quadratic { .. } => CurveKind::Quadratic,
        }
    }

    pub fn defaults(kind: CurveKind) -> Self {
        Self::from_spec(&ScheduleSpec {
            kind,
            ..ScheduleSpec::default()
        })
    }

    pub fn from_spec(spec: &ScheduleSpec) -> Self {
        match spec.kind {
            CurveKind::LinearBeta => CurveParams::LinearBeta {
                beta_min: spec.beta_min,
                beta_max: spec.beta_max,
            },
            CurveKind::Cosine => CurveParams::Cosine {
                offset: spec.cosine_offset,
            },
            CurveKind::Quadratic => CurveParams::Quadratic {
                terminal: spec.terminal_alpha_bar,
            },
        }
    }
}

/// Discretized alpha-bar over base indices `0..=base_steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaBarCurve {
    kind: CurveKind,
    values: Vec<f64>,
}

impl AlphaBarCurve {
    pub fn kind(&self) -> CurveKind {
        self.kind
    }

    pub fn base_steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, index: usize) -> f64 {
        self.values[index]
    }
}

pub fn make_alpha_bar_curve(params: CurveParams, base_steps: usize) -> Result<AlphaBarCurve> {
    if base_steps < 1 {
        return Err(Error::Param("base_steps must be at least 1".into()));
    }
    let s_total = base_steps as f64;
    let mut values = Vec::with_capacity(base_steps + 1);
    match params {
        CurveParams::LinearBeta { beta_min, beta_max } => {
            if !(beta_min > 0.0) {
                return Err(Error::Param(format!("beta_min = {beta_min} must be > 0")));
            }
            if !(beta_max < 1.0) {
                return Err(Error::Param(format!("beta_max = {beta_max} must be < 1")));
            }
            if !(beta_min < beta_max) {
                return Err(Error::Param(format!(
                    "beta_min = {beta_min} must be < beta_max = {beta_max}"
                )));
            }
            let mut prod = 1.0;
            values.push(1.0);
            for j in 0..base_steps {
                let frac = if base_steps == 1 {
                    0.0
                } else {
                    j as f64 / (base_steps - 1) as f64
                };
                prod *= 1.0 - (beta_min + (beta_max - beta_min) * frac);
                values.push(prod);
            }
        }
        CurveParams::Cosine { offset } => {
            if !(offset >= 0.0) || !offset.is_finite() {
                return Err(Error::Param(format!("cosine offset = {offset} must be >= 0")));
            }
            let f = |s: f64| (((s / s_total) + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            let f0 = f(0.0);
            values.push(1.0);
            for s in 1..=base_steps {
                values.push((f(s as f64) / f0).clamp(ALPHA_BAR_FLOOR, 1.0));
            }
        }
        CurveParams::Quadratic { terminal } => {
            if !(terminal > 0.0 && terminal < 1.0) {
                return Err(Error::Param(format!(
                    "terminal alpha_bar = {terminal} must lie in (0, 1)"
                )));
            }
            let end = terminal.sqrt();
            values.push(1.0);
            for s in 1..=base_steps {
                let root = 1.0 + (end - 1.0) * (s as f64 / s_total);
                values.push(root * root);
            }
        }
    }
    Ok(AlphaBarCurve {
        kind: params.kind(),
        values,
    })
}

/// Reflects a trajectory timestep onto the base curve: `0` and `T` map to
/// index 0, `T / 2` maps to `base_steps`.
pub fn fold_timestep(t: usize, total_steps: usize, base_steps: usize) -> Result<usize> {
    if t > total_steps {
        return Err(Error::Range(format!("timestep {t} outside [0, {total_steps}]")));
    }
    let folded = if 2 * t <= total_steps {
        2 * t
    } else {
        2 * (total_steps - t)
    } as u128;
    let (s, tt) = (base_steps as u128, total_steps as u128);
    // round(s * folded / T), halves rounded up
    Ok(((2 * s * folded + tt) / (2 * tt)) as usize)
}

/// Runtime schedule: the trajectory length, the cached base curve, and the task
/// whose clean path it follows.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    total_steps: usize,
    curve: AlphaBarCurve,
    task: Task,
}

impl ScheduleConfig {
    pub fn new(total_steps: usize, curve: AlphaBarCurve, task: Task) -> Result<Self> {
        if total_steps < 2 {
            return Err(Error::Param(format!("T = {total_steps} must be at least 2")));
        }
        Ok(Self {
            total_steps,
            curve,
            task,
        })
    }

    pub fn from_spec(spec: &ScheduleSpec, task: Task) -> Result<Self> {
        let curve = make_alpha_bar_curve(CurveParams::from_spec(spec), spec.base_steps)?;
        Self::new(spec.total_steps, curve, task)
    }

    /// Reference setup: linear-beta curve, 1000 base steps, `T = 1000`.
    pub fn reference(task: Task) -> Self {
        Self::from_spec(&ScheduleSpec::default(), task).expect("default schedule is valid")
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn curve(&self) -> &AlphaBarCurve {
        &self.curve
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn with_task(&self, task: Task) -> Self {
        Self { task, ..self.clone() }
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.total_steps {
            return Err(Error::Range(format!(
                "timestep {t} outside [0, {}]",
                self.total_steps
            )));
        }
        Ok(())
    }

    /// Folded alpha-bar used by the task forward process; exactly 1 at `t = 0`
    /// and `t = T`.
    pub fn effective_alpha_bar(&self, t: usize) -> Result<f64> {
        let s = fold_timestep(t, self.total_steps, self.curve.base_steps())?;
        Ok(self.curve.at(s))
    }

    /// Unfolded alpha-bar (standard DDPM indexing), used for denoising pretraining.
    pub fn monotone_alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        let (s, tt) = (self.curve.base_steps() as u128, self.total_steps as u128);
        let idx = (2 * s * t as u128 + tt) / (2 * tt);
        Ok(self.curve.at(idx as usize))
    }

    /// Deterministic noise-free trajectory value at `t`.
    pub fn clean_path<F: Float>(&self, x0: &Tensor<F>, t: usize) -> Result<Tensor<F>> {
        self.check_timestep(t)?;
        match self.task {
            Task::Ss => Ok(x0.clone()),
            Task::Cd => {
                let swapped = swap_pair(x0)?;
                let tt = self.total_steps as f64;
                let keep = F::from_f64_lossy((self.total_steps - t) as f64 / tt);
                let toward = F::from_f64_lossy(t as f64 / tt);
                let mut out = x0.clone();
                for (o, &s) in out.data_mut().iter_mut().zip(swapped.data()) {
                    *o = keep * *o + toward * s;
                }
                Ok(out)
            }
        }
    }

    /// Draws one noised input `x_t = sqrt(ab) * clean_t + sqrt(1 - ab) * eps`.
    pub fn forward_sample<F: Float, R: Rng + ?Sized>(
        &self,
        x0: &Tensor<F>,
        t: usize,
        rng: &mut R,
    ) -> Result<ForwardSample<F>> {
        if !x0.all_finite() {
            return Err(Error::Data("forward process input contains non-finite values".into()));
        }
        let alpha_bar = self.effective_alpha_bar(t)?;
        let clean = self.clean_path(x0, t)?;
        let noise = standard_normal_like(x0.shape(), rng);
        let x_t = mix(&clean, &noise, alpha_bar);
        Ok(ForwardSample {
            x_t,
            t,
            clean_t: clean,
            noise,
            alpha_bar_eff: alpha_bar,
        })
    }
}

/// A noised model input together with the pieces it was assembled from.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardSample<F> {
    pub x_t: Tensor<F>,
    pub t: usize,
    pub clean_t: Tensor<F>,
    pub noise: Tensor<F>,
    pub alpha_bar_eff: f64,
}

/// `sqrt(ab) * clean + sqrt(1 - ab) * noise`, elementwise.
pub fn mix<F: Float>(clean: &Tensor<F>, noise: &Tensor<F>, alpha_bar: f64) -> Tensor<F> {
    let a = F::from_f64_lossy(alpha_bar.sqrt());
    let b = F::from_f64_lossy((1.0 - alpha_bar).max(0.0).sqrt());
    let mut out = clean.clone();
    for (o, &n) in out.data_mut().iter_mut().zip(noise.data()) {
        *o = a * *o + b * n;
    }
    out
}

pub fn standard_normal_like<F: Float, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            F::from_f64_lossy(v)
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Exchanges the first and second halves of the channel axis of `[2C, H, W]`.
pub fn swap_pair<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[0] % 2 != 0 {
        return Err(Error::Shape(format!(
            "change-detection input must be [2C, H, W], got {shape:?}"
        )));
    }
    let half = shape[0] / 2 * shape[1] * shape[2];
    let mut data = Vec::with_capacity(x.numel());
    data.extend_from_slice(&x.data()[half..]);
    data.extend_from_slice(&x.data()[..half]);
    Ok(Tensor::from_vec(shape, data))
}
