//! Conditional flow matching: the linear noise-to-data path, its velocity,
//! the regression objective, Euler integration and guidance.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::Real;

/// Audio latents, one row per latent frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeq<T = f32> {
    pub data: Array2<T>,
    pub fps: f64,
}

impl<T: Real> LatentSeq<T> {
    pub fn new(data: Array2<T>, fps: f64) -> Self {
        LatentSeq { data, fps }
    }

    pub fn zeros(len: usize, channels: usize, fps: f64) -> Self {
        LatentSeq::new(Array2::zeros((len, channels)), fps)
    }

    /// Standard-normal draw of the given geometry.
    pub fn noise<R: Rng + ?Sized>(len: usize, channels: usize, fps: f64, rng: &mut R) -> Self {
        let data = Array2::from_shape_simple_fn((len, channels), || {
            T::c(rng.sample::<f64, _>(StandardNormal))
        });
        LatentSeq::new(data, fps)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn duration_sec(&self) -> f64 {
        self.len() as f64 / self.fps
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> LatentSeq<U> {
        LatentSeq::new(self.data.mapv(|v| U::c(v.f64())), self.fps)
    }
}

/// Flow time in `[0, 1]`: 0 is pure noise, 1 is data.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct FlowTime(f64);

impl FlowTime {
    pub fn new(t: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&t) {
            Ok(FlowTime(t))
        } else {
            Err(Error::Config(format!("flow time {t} outside [0, 1]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// A time-dependent conditional velocity field `v(t, C, x)`.
pub trait VelocityEvaluator<T: Real = f32> {
    type Cond: ?Sized;

    fn velocity(&self, t: FlowTime, cond: &Self::Cond, x: &LatentSeq<T>) -> Result<LatentSeq<T>>;
}

fn same_shape<T: Real>(stage: &str, a: &LatentSeq<T>, b: &LatentSeq<T>) -> Result<()> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::shape(
            stage,
            format!("{:?} vs {:?}", a.data.dim(), b.data.dim()),
        ));
    }
    Ok(())
}

/// `t * x1 + (1 - t) * x0`.
pub fn interpolate<T: Real>(x0: &LatentSeq<T>, x1: &LatentSeq<T>, t: FlowTime) -> Result<LatentSeq<T>> {
    same_shape("interpolate", x0, x1)?;
    let t = T::c(t.get());
    let one_minus = T::one() - t;
    let data = Zip::from(&x0.data)
        .and(&x1.data)
        .map_collect(|&a, &b| t * b + one_minus * a);
    Ok(LatentSeq::new(data, x1.fps))
}

/// Velocity of the linear path, `x1 - x0` (independent of t).
pub fn target_velocity<T: Real>(x0: &LatentSeq<T>, x1: &LatentSeq<T>) -> Result<LatentSeq<T>> {
    same_shape("target_velocity", x0, x1)?;
    Ok(LatentSeq::new(&x1.data - &x0.data, x1.fps))
}

/// One Monte-Carlo draw of the objective's randomness for one item.
#[derive(Debug, Clone)]
pub struct FlowDraw<T> {
    pub t: FlowTime,
    pub x0: LatentSeq<T>,
}

/// Draws `t ~ U[0, 1]` then `x0 ~ N(0, I)` shaped like `x1`.
pub fn draw_flow<T: Real, R: Rng + ?Sized>(x1: &LatentSeq<T>, rng: &mut R) -> FlowDraw<T> {
    let t = FlowTime(rng.gen::<f64>());
    let x0 = LatentSeq::noise(x1.len(), x1.channels(), x1.fps, rng);
    FlowDraw { t, x0 }
}

/// Per-element mean squared error between two sequences.
pub fn mean_squared_error<T: Real>(a: &LatentSeq<T>, b: &LatentSeq<T>) -> Result<f64> {
    same_shape("mse", a, b)?;
    let sum = Zip::from(&a.data)
        .and(&b.data)
        .fold(0.0f64, |acc, &x, &y| acc + (x - y).f64().powi(2));
    Ok(sum / a.data.len() as f64)
}

/// Flow-matching objective averaged over a batch.
///
/// For each item, draws `(t, x0)` from `rng` in batch order, builds `x_t`
/// and regresses the model's output onto `x1 - x0`.
pub fn cfm_loss<T, E, R>(model: &E, batch: &[(LatentSeq<T>, &E::Cond)], rng: &mut R) -> Result<f64>
where
    T: Real,
    E: VelocityEvaluator<T>,
    R: Rng + ?Sized,
{
    if batch.is_empty() {
        return Err(Error::Config("cfm_loss needs a nonempty batch".into()));
    }
    let mut total = 0.0;
    for (i, (x1, cond)) in batch.iter().enumerate() {
        let draw = draw_flow(x1, rng);
        let xt = interpolate(&draw.x0, x1, draw.t)?;
        let target = target_velocity(&draw.x0, x1)?;
        let pred = model.velocity(draw.t, cond, &xt)?;
        if !pred.is_finite() {
            return Err(Error::non_finite(format!("model output for batch item {i}")));
        }
        total += mean_squared_error(&pred, &target)?;
    }
    Ok(total / batch.len() as f64)
}

/// Explicit Euler from t=0 to t=1 with left-endpoint evaluation.
pub fn euler_integrate<T, E>(
    field: &E,
    x0: &LatentSeq<T>,
    cond: &E::Cond,
    n_steps: usize,
) -> Result<LatentSeq<T>>
where
    T: Real,
    E: VelocityEvaluator<T>,
{
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be at least 1".into()));
    }
    let dt = T::c(1.0 / n_steps as f64);
    let mut x = x0.clone();
    for k in 0..n_steps {
        let t = FlowTime(k as f64 / n_steps as f64);
        let v = field.velocity(t, cond, &x)?;
        same_shape("euler_integrate", &x, &v)?;
        x.data.scaled_add(dt, &v.data);
        if !x.is_finite() {
            return Err(Error::non_finite(format!("Euler state after step {k}")));
        }
    }
    Ok(x)
}

/// Classifier-free guidance: `v_uncond + w * (v_cond - v_uncond)`.
pub fn cfg_velocity<T: Real>(v_cond: &LatentSeq<T>, v_uncond: &LatentSeq<T>, w: f64) -> Result<LatentSeq<T>> {
    same_shape("cfg_velocity", v_cond, v_uncond)?;
    let w = T::c(w);
    let data = Zip::from(&v_cond.data)
        .and(&v_uncond.data)
        .map_collect(|&c, &u| u + w * (c - u));
    Ok(LatentSeq::new(data, v_cond.fps))
}
