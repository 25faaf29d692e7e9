//! Minimal CPU neural-network building blocks with explicit forward/backward
//! passes. Feature maps are `[N, C, H, W]` f32 arrays; convolutions go through
//! im2col so the inner loop is a single matrix product.

mod layers;

pub use layers::{BatchNorm2d, Conv2d, Linear, NamedTensors, ResidualBlock, Sigmoid, TensorMap, Upsample2x};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A trainable tensor with its gradient and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    m: ArrayD<f32>,
    v: ArrayD<f32>,
}

impl Param {
    pub fn new(value: ArrayD<f32>) -> Self {
        let zeros = ArrayD::zeros(value.raw_dim());
        Self { value, grad: zeros.clone(), m: zeros.clone(), v: zeros }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    /// He-normal initialization with the given fan-in.
    pub fn he(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / fan_in as f32).sqrt();
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| {
            // Box-Muller from two uniforms keeps us on the one RNG stream.
            let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
            let u2: f32 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
        });
        Self::new(value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Adam moment buffers, exposed for optimizer checkpointing.
    pub fn moments(&self) -> (&ArrayD<f32>, &ArrayD<f32>) {
        (&self.m, &self.v)
    }

    pub fn set_moments(&mut self, m: ArrayD<f32>, v: ArrayD<f32>) {
        assert_eq!(m.shape(), self.value.shape());
        assert_eq!(v.shape(), self.value.shape());
        self.m = m;
        self.v = v;
    }
}

/// Adam optimizer; one `step` call updates every parameter and advances the
/// shared timestep.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 }
    }

    pub fn timestep(&self) -> i32 {
        self.t
    }

    pub fn set_timestep(&mut self, t: i32) {
        self.t = t;
    }

    pub fn step(&mut self, params: Vec<&mut Param>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for p in params {
            azip_update(p, self.lr, self.beta1, self.beta2, self.eps, bc1, bc2);
        }
    }
}

fn azip_update(p: &mut Param, lr: f32, b1: f32, b2: f32, eps: f32, bc1: f32, bc2: f32) {
    let (value, grad, m, v) = (&mut p.value, &p.grad, &mut p.m, &mut p.v);
    ndarray::Zip::from(value).and(grad).and(m).and(v).for_each(|w, &g, m, v| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *w -= lr * mhat / (vhat.sqrt() + eps);
    });
}
