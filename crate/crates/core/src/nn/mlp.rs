//! Dense layer stack with hand-derived gradients.
//!
//! Layer `l` owns two tensors, `l{l}.w` with shape `[in, out]` and `l{l}.b`
//! with shape `[out]`. Every hidden layer is followed by a rectifier whose
//! derivative at exactly zero is taken to be zero. Inputs and outputs are
//! row-major `(batch, features)` buffers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{fold, ParameterSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config(format!("all layer widths must be >= 1, got {self:?}")));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.num_layers());
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    pub fn num_tensors(&self) -> usize {
        2 * self.num_layers()
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet {
        let mut set = ParameterSet::new();
        for (l, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            let b = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            set.push(Tensor::new(format!("l{l}.w"), vec![fan_in, fan_out], w).expect("init shape"));
            set.push(Tensor::new(format!("l{l}.b"), vec![fan_out], b).expect("init shape"));
        }
        set
    }

    pub fn zeros(&self) -> ParameterSet {
        let mut set = ParameterSet::new();
        for (l, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            set.push(Tensor::zeros(format!("l{l}.w"), vec![fan_in, fan_out]));
            set.push(Tensor::zeros(format!("l{l}.b"), vec![fan_out]));
        }
        set
    }

    pub(crate) fn check_tensors(&self, tensors: &[Tensor]) -> Result<()> {
        if tensors.len() != self.num_tensors() {
            return Err(Error::shape("<mlp tensors>", self.num_tensors(), tensors.len()));
        }
        for (l, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            let w = &tensors[2 * l];
            let b = &tensors[2 * l + 1];
            if w.shape() != [fan_in, fan_out] {
                return Err(Error::shape(w.name(), format!("[{fan_in}, {fan_out}]"), format!("{:?}", w.shape())));
            }
            if b.shape() != [fan_out] {
                return Err(Error::shape(b.name(), format!("[{fan_out}]"), format!("{:?}", b.shape())));
            }
        }
        Ok(())
    }

    pub fn check(&self, params: &ParameterSet) -> Result<()> {
        self.check_tensors(params.tensors())
    }
}

/// Activations recorded by a forward pass, consumed by the matching backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    input: Vec<f64>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Rectified outputs of each hidden layer (the next layer's input).
    post: Vec<Vec<f64>>,
    fingerprint: u64,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

fn slice_fingerprint(tensors: &[Tensor]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for t in tensors {
        h = fold(h, t.len() as u64);
        for v in t.data() {
            h = fold(h, v.to_bits());
        }
    }
    h
}

/// `out[b, :] = bias + x[b, :] · W`, skipping zero inputs.
fn affine(x: &[f64], batch: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let mut out = Vec::with_capacity(batch * fan_out);
    for row in x.chunks_exact(fan_in).take(batch) {
        let start = out.len();
        out.extend_from_slice(b.data());
        let dst = &mut out[start..];
        for (i, &xi) in row.iter().enumerate() {
            if xi != 0.0 {
                let wr = &wd[i * fan_out..(i + 1) * fan_out];
                for (d, &wv) in dst.iter_mut().zip(wr) {
                    *d += xi * wv;
                }
            }
        }
    }
    out
}

fn check_input(spec: &MlpSpec, input: &[f64], batch: usize) -> Result<()> {
    if batch == 0 || input.len() != batch * spec.input_dim {
        return Err(Error::shape("<mlp input>", format!("{batch} x {}", spec.input_dim), input.len()));
    }
    Ok(())
}

pub(crate) fn forward_tensors(
    spec: &MlpSpec,
    tensors: &[Tensor],
    input: &[f64],
    batch: usize,
) -> Result<(Vec<f64>, ForwardCache)> {
    spec.check_tensors(tensors)?;
    check_input(spec, input, batch)?;
    let n_hidden = spec.hidden_dims.len();
    let mut pre = Vec::with_capacity(n_hidden);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(n_hidden);
    for l in 0..n_hidden {
        let x = if l == 0 { input } else { &post[l - 1] };
        let z = affine(x, batch, &tensors[2 * l], &tensors[2 * l + 1]);
        let a = z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        pre.push(z);
        post.push(a);
    }
    let x = if n_hidden == 0 { input } else { &post[n_hidden - 1] };
    let out = affine(x, batch, &tensors[2 * n_hidden], &tensors[2 * n_hidden + 1]);
    let cache = ForwardCache {
        batch,
        input: input.to_vec(),
        pre,
        post,
        fingerprint: slice_fingerprint(tensors),
    };
    Ok((out, cache))
}

/// Forward pass without recording activations.
pub(crate) fn predict_tensors(spec: &MlpSpec, tensors: &[Tensor], input: &[f64], batch: usize) -> Result<Vec<f64>> {
    spec.check_tensors(tensors)?;
    check_input(spec, input, batch)?;
    let mut x = std::borrow::Cow::Borrowed(input);
    let n_hidden = spec.hidden_dims.len();
    for l in 0..n_hidden {
        let mut z = affine(&x, batch, &tensors[2 * l], &tensors[2 * l + 1]);
        z.iter_mut().for_each(|v| {
            if *v <= 0.0 {
                *v = 0.0
            }
        });
        x = std::borrow::Cow::Owned(z);
    }
    Ok(affine(&x, batch, &tensors[2 * n_hidden], &tensors[2 * n_hidden + 1]))
}

/// Accumulates parameter gradients into `grads` (same layout as `tensors`).
/// Returns the input gradient when `want_input_grad` is set.
pub(crate) fn backward_tensors_into(
    spec: &MlpSpec,
    tensors: &[Tensor],
    cache: &ForwardCache,
    upstream: &[f64],
    grads: &mut [Tensor],
    want_input_grad: bool,
) -> Result<Option<Vec<f64>>> {
    spec.check_tensors(tensors)?;
    let batch = cache.batch;
    if cache.fingerprint != slice_fingerprint(tensors)
        || cache.pre.len() != spec.hidden_dims.len()
        || cache.input.len() != batch * spec.input_dim
    {
        return Err(Error::Contract(
            "activation cache does not belong to these parameters (stale or mismatched forward pass)".into(),
        ));
    }
    if upstream.len() != batch * spec.output_dim {
        return Err(Error::shape("<mlp upstream>", format!("{batch} x {}", spec.output_dim), upstream.len()));
    }
    let layers = spec.layer_dims();
    let mut delta = upstream.to_vec();
    for l in (0..layers.len()).rev() {
        let (fan_in, fan_out) = layers[l];
        let x: &[f64] = if l == 0 { &cache.input } else { &cache.post[l - 1] };
        {
            let (gw_slot, rest) = grads[2 * l..].split_at_mut(1);
            let gw = gw_slot[0].data_mut();
            let gb = rest[0].data_mut();
            for (xr, dr) in x.chunks_exact(fan_in).zip(delta.chunks_exact(fan_out)) {
                for (g, &d) in gb.iter_mut().zip(dr) {
                    *g += d;
                }
                for (i, &xi) in xr.iter().enumerate() {
                    if xi != 0.0 {
                        let row = &mut gw[i * fan_out..(i + 1) * fan_out];
                        for (g, &d) in row.iter_mut().zip(dr) {
                            *g += xi * d;
                        }
                    }
                }
            }
        }
        if l == 0 && !want_input_grad {
            return Ok(None);
        }
        let wd = tensors[2 * l].data();
        let mut dx = vec![0.0; batch * fan_in];
        for (dxr, dr) in dx.chunks_exact_mut(fan_in).zip(delta.chunks_exact(fan_out)) {
            for (i, v) in dxr.iter_mut().enumerate() {
                let wr = &wd[i * fan_out..(i + 1) * fan_out];
                *v = wr.iter().zip(dr).map(|(w, d)| w * d).sum();
            }
        }
        if l > 0 {
            for (v, &z) in dx.iter_mut().zip(&cache.pre[l - 1]) {
                if z <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        delta = dx;
    }
    Ok(Some(delta))
}

/// Single-sample forward pass.
pub fn mlp_forward(spec: &MlpSpec, params: &ParameterSet, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    forward_tensors(spec, params.tensors(), input, 1)
}

/// Batched forward pass over `batch` rows of `input`.
pub fn mlp_forward_batch(
    spec: &MlpSpec,
    params: &ParameterSet,
    input: &[f64],
    batch: usize,
) -> Result<(Vec<f64>, ForwardCache)> {
    forward_tensors(spec, params.tensors(), input, batch)
}

pub fn mlp_predict(spec: &MlpSpec, params: &ParameterSet, input: &[f64]) -> Result<Vec<f64>> {
    predict_tensors(spec, params.tensors(), input, 1)
}

pub fn mlp_predict_batch(spec: &MlpSpec, params: &ParameterSet, input: &[f64], batch: usize) -> Result<Vec<f64>> {
    predict_tensors(spec, params.tensors(), input, batch)
}

/// Gradients of `upstream · output` with respect to the parameters and the input.
/// Works for single-sample and batched caches alike; batch gradients are summed.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &ParameterSet,
    cache: &ForwardCache,
    upstream: &[f64],
) -> Result<(ParameterSet, Vec<f64>)> {
    let mut grads = params.zeros_like();
    let input_grad = backward_tensors_into(spec, params.tensors(), cache, upstream, grads.tensors_mut(), true)?
        .expect("input gradient requested");
    Ok((grads, input_grad))
}

/// Accumulating variant of [`mlp_backward`] that skips the input gradient.
pub fn mlp_backward_accumulate(
    spec: &MlpSpec,
    params: &ParameterSet,
    cache: &ForwardCache,
    upstream: &[f64],
    grads: &mut ParameterSet,
) -> Result<()> {
    params.check_layout(grads)?;
    backward_tensors_into(spec, params.tensors(), cache, upstream, grads.tensors_mut(), false)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference_grad, gradcheck_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Plain matrix-chain reference used as an oracle for the forward pass.
    fn reference_forward(spec: &MlpSpec, params: &ParameterSet, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let dims = spec.layer_dims();
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = params.tensors()[2 * l].data();
            let b = params.tensors()[2 * l + 1].data();
            let mut out = vec![0.0; fan_out];
            for (o, v) in out.iter_mut().enumerate() {
                let mut acc = b[o];
                for i in 0..fan_in {
                    acc += w[i * fan_out + o] * h[i];
                }
                *v = if l + 1 < dims.len() { acc.max(0.0) } else { acc };
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_weights_yield_bias() {
        let spec = MlpSpec::new(3, vec![4], 2).unwrap();
        let mut p = spec.zeros();
        p.tensors_mut()[3].data_mut().copy_from_slice(&[0.25, -7.0]);
        let (out, _) = mlp_forward(&spec, &p, &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.25, -7.0]);
    }

    #[test]
    fn single_linear_layer() {
        let spec = MlpSpec::new(1, vec![], 1).unwrap();
        let p = ParameterSet::from_tensors(vec![
            Tensor::new("l0.w", vec![1, 1], vec![2.0]).unwrap(),
            Tensor::new("l0.b", vec![1], vec![1.0]).unwrap(),
        ]);
        let (out, _) = mlp_forward(&spec, &p, &[3.0]).unwrap();
        assert_eq!(out, vec![7.0]);
    }

    #[test]
    fn square_loss_input_gradient() {
        // identity layer followed by loss y^2: d/dx at 3 is 6
        let spec = MlpSpec::new(1, vec![], 1).unwrap();
        let p = ParameterSet::from_tensors(vec![
            Tensor::new("l0.w", vec![1, 1], vec![1.0]).unwrap(),
            Tensor::new("l0.b", vec![1], vec![0.0]).unwrap(),
        ]);
        let (y, cache) = mlp_forward(&spec, &p, &[3.0]).unwrap();
        let (_, dx) = mlp_backward(&spec, &p, &cache, &[2.0 * y[0]]).unwrap();
        assert!((dx[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let spec = MlpSpec::new(4, vec![5, 3], 2).unwrap();
        let p = spec.init(&mut ChaCha8Rng::seed_from_u64(1));
        let (_, cache) = mlp_forward(&spec, &p, &[0.1, -0.3, 0.7, 1.2]).unwrap();
        let (g, dx) = mlp_backward(&spec, &p, &cache, &[0.0, 0.0]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_matches_reference_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let spec = MlpSpec::new(2 + trial % 5, vec![3 + trial % 4, 6], 1 + trial % 3).unwrap();
            let p = spec.init(&mut rng);
            let x: Vec<f64> = (0..spec.input_dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (out, _) = mlp_forward(&spec, &p, &x).unwrap();
            let expected = reference_forward(&spec, &p, &x);
            for (a, b) in out.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn batched_rows_match_single_rows() {
        let spec = MlpSpec::new(3, vec![8, 8], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = spec.init(&mut rng);
        let x: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (out, _) = mlp_forward_batch(&spec, &p, &x, 5).unwrap();
        for b in 0..5 {
            let single = mlp_predict(&spec, &p, &x[b * 3..b * 3 + 3]).unwrap();
            assert_eq!(&out[b * 4..b * 4 + 4], &single[..]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let spec = MlpSpec::new(4, vec![6, 5], 3).unwrap();
            let p = spec.init(&mut rng);
            let batch = 3;
            let x: Vec<f64> = (0..batch * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let u: Vec<f64> = (0..batch * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, cache) = mlp_forward_batch(&spec, &p, &x, batch).unwrap();
            let mut g = p.zeros_like();
            mlp_backward_accumulate(&spec, &p, &cache, &u, &mut g).unwrap();
            let fd = finite_difference_grad(
                |q| {
                    let out = mlp_predict_batch(&spec, q, &x, batch).unwrap();
                    out.iter().zip(&u).map(|(a, b)| a * b).sum()
                },
                &p,
                1e-6,
            )
            .unwrap();
            assert!(gradcheck_error(&g, &fd) < 1e-5);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let spec = MlpSpec::new(2, vec![3], 1).unwrap();
        let mut p = spec.init(&mut ChaCha8Rng::seed_from_u64(5));
        let (_, cache) = mlp_forward(&spec, &p, &[1.0, 2.0]).unwrap();
        p.set_scalar(0, 0.123);
        assert!(matches!(mlp_backward(&spec, &p, &cache, &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors_name_the_tensor() {
        let spec = MlpSpec::new(2, vec![3], 1).unwrap();
        let other = MlpSpec::new(2, vec![4], 1).unwrap();
        let p = other.init(&mut ChaCha8Rng::seed_from_u64(5));
        match mlp_forward(&spec, &p, &[1.0, 2.0]) {
            Err(Error::Shape { tensor, .. }) => assert_eq!(tensor, "l0.w"),
            other => panic!("unexpected {other:?}"),
        }
        let p = spec.init(&mut ChaCha8Rng::seed_from_u64(5));
        assert!(mlp_forward(&spec, &p, &[1.0]).is_err());
    }

    #[test]
    fn rectifier_derivative_at_zero_is_zero() {
        // hidden unit pre-activation exactly 0 → no gradient passes through
        let spec = MlpSpec::new(1, vec![1], 1).unwrap();
        let p = ParameterSet::from_tensors(vec![
            Tensor::new("l0.w", vec![1, 1], vec![1.0]).unwrap(),
            Tensor::new("l0.b", vec![1], vec![-2.0]).unwrap(),
            Tensor::new("l1.w", vec![1, 1], vec![3.0]).unwrap(),
            Tensor::new("l1.b", vec![1], vec![0.0]).unwrap(),
        ]);
        let (_, cache) = mlp_forward(&spec, &p, &[2.0]).unwrap();
        let (g, dx) = mlp_backward(&spec, &p, &cache, &[1.0]).unwrap();
        assert_eq!(dx, vec![0.0]);
        assert_eq!(g.get("l0.w").unwrap().data(), &[0.0]);
        assert_eq!(g.get("l1.b").unwrap().data(), &[1.0]);
    }
}
