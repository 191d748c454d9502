//! Network layers over the tape: linear, convolution, layer norm, and the
//! factorized-noise linear layer used for exploration in the discrete agent.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::Grads;
use super::{Element, Tape, Tensor, TensorError};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Whether a forward pass registers parameters as differentiable leaves or
/// treats them as constants (target networks, the frozen critic inside the
/// actor update).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

/// A named parameter tensor with an optional gradient of identical shape.
#[derive(Clone, Debug)]
pub struct LayerParams<E: Element> {
    id: u64,
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Option<Vec<E>>,
}

impl<E: Element> LayerParams<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        LayerParams {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Register on the tape (or pass through frozen) and return the tensor
    /// to compute with.
    pub fn on(&self, tape: &mut Tape<E>, mode: ParamMode) -> Tensor<E> {
        match mode {
            ParamMode::Trainable => tape.param_leaf(self.id, &self.value),
            ParamMode::Frozen => self.value.detach(),
        }
    }

    /// Pull this parameter's gradient out of a backward result. Parameters
    /// that were registered but received no gradient get zeros.
    pub fn store_grad(&mut self, grads: &Grads<E>) {
        if let Some(g) = grads.param_grad(self.id) {
            debug_assert_eq!(g.len(), self.value.numel());
            match &mut self.grad {
                Some(buf) => {
                    for (d, v) in buf.iter_mut().zip(g) {
                        *d = *d + *v;
                    }
                }
                None => self.grad = Some(g.to_vec()),
            }
        } else if grads.has_param(self.id) || self.grad.is_none() {
            self.grad = Some(vec![E::zero(); self.value.numel()]);
        }
    }

    pub fn set_value(&mut self, value: Tensor<E>) {
        assert_eq!(self.value.shape(), value.shape(), "parameter shape change");
        self.value = value;
    }
}

/// Draw a random matrix with orthonormal rows (rows <= cols) or orthonormal
/// columns (rows > cols), times `gain`. Modified Gram-Schmidt on the smaller
/// side, accumulated in f64.
pub fn orthogonal<E: Element>(
    rng: &mut impl Rng,
    rows: usize,
    cols: usize,
    gain: f64,
) -> Tensor<E> {
    let (nvec, dim, transpose) = if rows <= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(nvec);
    while basis.len() < nvec {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // degenerate draw, redo
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        basis.push(v);
    }
    let mut data = vec![E::zero(); rows * cols];
    for (i, v) in basis.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            let (r, c) = if transpose { (j, i) } else { (i, j) };
            data[r * cols + c] = E::of_f64(x * gain);
        }
    }
    Tensor::new(data, &[rows, cols])
}

/// Fully connected layer, weight stored [in, out] so the forward pass is a
/// plain row-major matmul.
#[derive(Clone, Debug)]
pub struct Linear<E: Element> {
    pub weight: LayerParams<E>,
    pub bias: LayerParams<E>,
}

impl<E: Element> Linear<E> {
    /// Orthogonal weight init, zero bias.
    pub fn new(name: &str, in_dim: usize, out_dim: usize, gain: f64, rng: &mut impl Rng) -> Self {
        // Orthogonalize in [out, in] orientation, store transposed.
        let w_oi = orthogonal::<E>(rng, out_dim, in_dim, gain);
        let mut data = vec![E::zero(); in_dim * out_dim];
        for o in 0..out_dim {
            for i in 0..in_dim {
                data[i * out_dim + o] = w_oi.data()[o * in_dim + i];
            }
        }
        Linear {
            weight: LayerParams::new(format!("{name}.weight"), Tensor::new(data, &[in_dim, out_dim])),
            bias: LayerParams::new(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        x: &Tensor<E>,
        mode: ParamMode,
    ) -> Result<Tensor<E>, TensorError> {
        let w = self.weight.on(tape, mode);
        let b = self.bias.on(tape, mode);
        let y = tape.matmul(x, &w)?;
        tape.add_row_bias(&y, &b)
    }

    pub fn params(&self) -> Vec<&LayerParams<E>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut LayerParams<E>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Factorized-Gaussian noisy linear layer. Noise is sampled explicitly via
/// [`NoisyLinear::resample_noise`] and shared by every forward pass until the
/// next resample; evaluation uses the mu parameters only.
#[derive(Clone, Debug)]
pub struct NoisyLinear<E: Element> {
    pub mu_w: LayerParams<E>,
    pub sigma_w: LayerParams<E>,
    pub mu_b: LayerParams<E>,
    pub sigma_b: LayerParams<E>,
    eps_w: Tensor<E>,
    eps_b: Tensor<E>,
    in_dim: usize,
    out_dim: usize,
}

impl<E: Element> NoisyLinear<E> {
    pub fn new(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        sigma0: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mu: Vec<E> = (0..in_dim * out_dim)
            .map(|_| E::of_f64(rng.gen_range(-bound..bound)))
            .collect();
        let mu_b: Vec<E> = (0..out_dim)
            .map(|_| E::of_f64(rng.gen_range(-bound..bound)))
            .collect();
        let sigma_init = E::of_f64(sigma0 / (in_dim as f64).sqrt());
        NoisyLinear {
            mu_w: LayerParams::new(format!("{name}.mu_w"), Tensor::new(mu, &[in_dim, out_dim])),
            sigma_w: LayerParams::new(
                format!("{name}.sigma_w"),
                Tensor::full(&[in_dim, out_dim], sigma_init),
            ),
            mu_b: LayerParams::new(format!("{name}.mu_b"), Tensor::new(mu_b, &[out_dim])),
            sigma_b: LayerParams::new(
                format!("{name}.sigma_b"),
                Tensor::full(&[out_dim], sigma_init),
            ),
            eps_w: Tensor::zeros(&[in_dim, out_dim]),
            eps_b: Tensor::zeros(&[out_dim]),
            in_dim,
            out_dim,
        }
    }

    /// Draw fresh factorized noise: eps_w[i,j] = f(e_i) f(e_j), eps_b = f(e_j),
    /// f(x) = sign(x) sqrt(|x|).
    pub fn resample_noise(&mut self, rng: &mut impl Rng) {
        fn f(x: f64) -> f64 {
            x.signum() * x.abs().sqrt()
        }
        let ein: Vec<f64> = (0..self.in_dim)
            .map(|_| f(StandardNormal.sample(rng)))
            .collect();
        let eout: Vec<f64> = (0..self.out_dim)
            .map(|_| f(StandardNormal.sample(rng)))
            .collect();
        let mut w = vec![E::zero(); self.in_dim * self.out_dim];
        for i in 0..self.in_dim {
            for j in 0..self.out_dim {
                w[i * self.out_dim + j] = E::of_f64(ein[i] * eout[j]);
            }
        }
        self.eps_w = Tensor::new(w, &[self.in_dim, self.out_dim]);
        self.eps_b = Tensor::new(eout.iter().map(|&v| E::of_f64(v)).collect(), &[self.out_dim]);
    }

    pub fn zero_noise(&mut self) {
        self.eps_w = Tensor::zeros(&[self.in_dim, self.out_dim]);
        self.eps_b = Tensor::zeros(&[self.out_dim]);
    }

    /// y = x (mu_w + sigma_w * eps_w) + mu_b + sigma_b * eps_b
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        x: &Tensor<E>,
        mode: ParamMode,
    ) -> Result<Tensor<E>, TensorError> {
        let mu_w = self.mu_w.on(tape, mode);
        let sigma_w = self.sigma_w.on(tape, mode);
        let mu_b = self.mu_b.on(tape, mode);
        let sigma_b = self.sigma_b.on(tape, mode);
        let nw = tape.mul(&sigma_w, &self.eps_w)?;
        let w = tape.add(&mu_w, &nw)?;
        let nb = tape.mul(&sigma_b, &self.eps_b)?;
        let b = tape.add(&mu_b, &nb)?;
        let y = tape.matmul(x, &w)?;
        tape.add_row_bias(&y, &b)
    }

    pub fn params(&self) -> Vec<&LayerParams<E>> {
        vec![&self.mu_w, &self.sigma_w, &self.mu_b, &self.sigma_b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut LayerParams<E>> {
        vec![
            &mut self.mu_w,
            &mut self.sigma_w,
            &mut self.mu_b,
            &mut self.sigma_b,
        ]
    }
}

/// Convolution layer with bias, NCHW.
#[derive(Clone, Debug)]
pub struct Conv2dLayer<E: Element> {
    pub weight: LayerParams<E>,
    pub bias: LayerParams<E>,
    pub stride: usize,
    pub pad: usize,
}

impl<E: Element> Conv2dLayer<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let flat = orthogonal::<E>(rng, out_c, in_c * k * k, gain);
        let weight = Tensor::new(flat.data().to_vec(), &[out_c, in_c, k, k]);
        Conv2dLayer {
            weight: LayerParams::new(format!("{name}.weight"), weight),
            bias: LayerParams::new(format!("{name}.bias"), Tensor::zeros(&[out_c])),
            stride,
            pad,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        x: &Tensor<E>,
        mode: ParamMode,
    ) -> Result<Tensor<E>, TensorError> {
        let w = self.weight.on(tape, mode);
        let b = self.bias.on(tape, mode);
        let y = tape.conv2d(x, &w, self.stride, self.pad)?;
        tape.add_channel_bias(&y, &b)
    }

    pub fn params(&self) -> Vec<&LayerParams<E>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut LayerParams<E>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Layer normalization over the last dimension with learnable gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm<E: Element> {
    pub gamma: LayerParams<E>,
    pub beta: LayerParams<E>,
    pub eps: E,
}

impl<E: Element> LayerNorm<E> {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: LayerParams::new(format!("{name}.gamma"), Tensor::full(&[dim], E::one())),
            beta: LayerParams::new(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: E::of_f64(1e-5),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        x: &Tensor<E>,
        mode: ParamMode,
    ) -> Result<Tensor<E>, TensorError> {
        let gamma = self.gamma.on(tape, mode);
        let beta = self.beta.on(tape, mode);
        tape.layer_norm(x, &gamma, &beta, self.eps)
    }

    pub fn params(&self) -> Vec<&LayerParams<E>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut LayerParams<E>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Copy values from `online` into `target` parameters pairwise:
/// target <- rho * target + (1 - rho) * online.
pub fn polyak_update<E: Element>(
    online: &[&LayerParams<E>],
    target: &mut [&mut LayerParams<E>],
    rho: E,
) -> Result<(), TensorError> {
    if online.len() != target.len() {
        return Err(TensorError::ShapeMismatch {
            op: "polyak_update",
            lhs: vec![online.len()],
            rhs: vec![target.len()],
        });
    }
    for (o, t) in online.iter().zip(target.iter_mut()) {
        if o.value.shape() != t.value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "polyak_update",
                lhs: o.value.shape().to_vec(),
                rhs: t.value.shape().to_vec(),
            });
        }
        let mixed: Vec<E> = t
            .value
            .data()
            .iter()
            .zip(o.value.data())
            .map(|(&tv, &ov)| rho * tv + (E::one() - rho) * ov)
            .collect();
        t.value = Tensor::new(mixed, o.value.shape());
    }
    Ok(())
}

/// Hard copy online values into target parameters.
pub fn hard_update<E: Element>(online: &[&LayerParams<E>], target: &mut [&mut LayerParams<E>]) {
    for (o, t) in online.iter().zip(target.iter_mut()) {
        t.value = o.value.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = orthogonal::<f64>(&mut rng, 4, 10, 1.0);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..10)
                    .map(|k| w.data()[i * 10 + k] * w.data()[j * 10 + k])
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "rows {i},{j}: {dot}");
            }
        }
    }

    #[test]
    fn noisy_linear_with_zero_sigma_matches_plain_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = NoisyLinear::<f32>::new("t", 4, 3, 0.0, &mut rng);
        layer.resample_noise(&mut rng);
        let x = Tensor::new(vec![0.5, -1.0, 2.0, 0.25], &[1, 4]);
        let mut tape = Tape::inference();
        let noisy = layer.forward(&mut tape, &x, ParamMode::Frozen).unwrap();
        layer.zero_noise();
        let plain = layer.forward(&mut tape, &x, ParamMode::Frozen).unwrap();
        assert_eq!(noisy.data(), plain.data());
    }

    #[test]
    fn polyak_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let online = Linear::<f32>::new("o", 2, 2, 1.0, &mut rng);
        let mut target = Linear::<f32>::new("t", 2, 2, 1.0, &mut rng);
        let before = target.weight.value.data().to_vec();
        polyak_update(&online.params(), &mut target.params_mut(), 1.0).unwrap();
        assert_eq!(target.weight.value.data(), &before[..]);
        polyak_update(&online.params(), &mut target.params_mut(), 0.0).unwrap();
        assert_eq!(target.weight.value.data(), online.weight.value.data());
    }

    #[test]
    fn polyak_scalar_formula() {
        let online = LayerParams::new("o", Tensor::<f32>::scalar(1.0));
        let mut target = LayerParams::new("t", Tensor::<f32>::scalar(0.0));
        polyak_update(&[&online], &mut [&mut target], 0.99).unwrap();
        assert!((target.value.item() - 0.01).abs() < 1e-7);
    }
}
