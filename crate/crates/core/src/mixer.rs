//! Value-factorization mixers: VDN summation and QMIX monotone hypernetwork
//! mixing, each with exact partial derivatives.
//!
//! QMIX layout per sample, with `E` the embedding width:
//!
//! ```text
//! W1 = |hyper_w1(s)|        (N x E)     b1 = hyper_b1(s)      (E)
//! h  = elu(q · W1 + b1)     (E)
//! wf = |hyper_wf(s)|        (E)         v  = hyper_v(s)       (1)
//! q_tot = h · wf + v
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{backward_tensors_into, forward_tensors, ForwardCache, MlpSpec, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Vdn,
    Qmix,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixerSpec {
    pub kind: MixerKind,
    pub n_agents: usize,
    pub state_dim: usize,
    pub embed_dim: usize,
    pub hypernet_hidden: usize,
}

const HYPER_NETS: [&str; 4] = ["hyper_w1", "hyper_b1", "hyper_wf", "hyper_v"];

impl MixerSpec {
    pub fn vdn(n_agents: usize) -> Self {
        Self {
            kind: MixerKind::Vdn,
            n_agents,
            state_dim: 0,
            embed_dim: 0,
            hypernet_hidden: 0,
        }
    }

    pub fn qmix(n_agents: usize, state_dim: usize, embed_dim: usize, hypernet_hidden: usize) -> Self {
        Self {
            kind: MixerKind::Qmix,
            n_agents,
            state_dim,
            embed_dim,
            hypernet_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::Config("mixer needs at least one agent".into()));
        }
        if self.kind == MixerKind::Qmix && (self.state_dim == 0 || self.embed_dim == 0 || self.hypernet_hidden == 0) {
            return Err(Error::Config(format!("qmix dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Specs of the four hypernetworks, in parameter order.
    fn hypernets(&self) -> [MlpSpec; 4] {
        let s = self.state_dim;
        let mk = |hidden: Vec<usize>, out: usize| MlpSpec {
            input_dim: s,
            hidden_dims: hidden,
            output_dim: out,
            activation: Default::default(),
        };
        [
            mk(vec![self.hypernet_hidden], self.n_agents * self.embed_dim),
            mk(vec![], self.embed_dim),
            mk(vec![self.hypernet_hidden], self.embed_dim),
            mk(vec![self.embed_dim], 1),
        ]
    }

    /// Tensor index ranges of each hypernetwork inside φ.
    fn ranges(&self) -> [std::ops::Range<usize>; 4] {
        let nets = self.hypernets();
        let mut start = 0;
        std::array::from_fn(|k| {
            let r = start..start + nets[k].num_tensors();
            start = r.end;
            r
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet {
        match self.kind {
            MixerKind::Vdn => ParameterSet::new(),
            MixerKind::Qmix => {
                let nets = self.hypernets();
                let parts = HYPER_NETS.iter().zip(nets.iter()).map(|(name, spec)| (*name, spec.init(rng))).collect();
                ParameterSet::concat_prefixed(parts)
            }
        }
    }

    pub fn check(&self, phi: &ParameterSet) -> Result<()> {
        match self.kind {
            MixerKind::Vdn => {
                if !phi.is_empty() {
                    return Err(Error::shape("<vdn mixer params>", 0, phi.len()));
                }
            }
            MixerKind::Qmix => {
                let nets = self.hypernets();
                let total: usize = nets.iter().map(MlpSpec::num_tensors).sum();
                if phi.len() != total {
                    return Err(Error::shape("<qmix mixer params>", total, phi.len()));
                }
                for (spec, range) in nets.iter().zip(self.ranges()) {
                    spec.check_tensors(&phi.tensors()[range])?;
                }
            }
        }
        Ok(())
    }
}

/// Intermediate values of a batched mixing pass.
#[derive(Debug, Clone)]
pub struct MixCache {
    batch: usize,
    qs: Vec<f64>,
    fingerprint: u64,
    qmix: Option<QmixCache>,
}

#[derive(Debug, Clone)]
struct QmixCache {
    hyper: [ForwardCache; 4],
    /// Raw (pre-|·|) hypernet outputs: B x N*E and B x E.
    w1_raw: Vec<f64>,
    wf_raw: Vec<f64>,
    /// Hidden pre-activations and activations: B x E.
    h_pre: Vec<f64>,
    h: Vec<f64>,
}

impl MixCache {
    /// Smallest distance of any piecewise-linear kink input (hypernet rectifier
    /// pre-activations and the |·| arguments) from zero.
    pub fn min_kink_distance(&self) -> f64 {
        let Some(c) = &self.qmix else {
            return f64::INFINITY;
        };
        let mut m = f64::INFINITY;
        for cache in &c.hyper {
            for layer in cache.pre_activations() {
                m = layer.iter().fold(m, |m, v| m.min(v.abs()));
            }
        }
        m = c.w1_raw.iter().fold(m, |m, v| m.min(v.abs()));
        c.wf_raw.iter().fold(m, |m, v| m.min(v.abs()))
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Sign with the kink convention `d|x|/dx = 0` at zero.
fn abs_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Batched mixing. `qs` is `B x N`, `states` is `B x state_dim`.
pub fn mix_forward_batch(
    spec: &MixerSpec,
    phi: &ParameterSet,
    qs: &[f64],
    states: &[f64],
    batch: usize,
) -> Result<(Vec<f64>, MixCache)> {
    spec.check(phi)?;
    let n = spec.n_agents;
    if batch == 0 || qs.len() != batch * n {
        return Err(Error::shape("<mixer qs>", format!("{batch} x {n}"), qs.len()));
    }
    match spec.kind {
        MixerKind::Vdn => {
            let q_tot = qs.chunks_exact(n).map(|row| row.iter().sum()).collect();
            let cache = MixCache {
                batch,
                qs: qs.to_vec(),
                fingerprint: 0,
                qmix: None,
            };
            Ok((q_tot, cache))
        }
        MixerKind::Qmix => {
            if states.len() != batch * spec.state_dim {
                return Err(Error::shape("<mixer state>", format!("{batch} x {}", spec.state_dim), states.len()));
            }
            let nets = spec.hypernets();
            let ranges = spec.ranges();
            let t = phi.tensors();
            let (w1_raw, c0) = forward_tensors(&nets[0], &t[ranges[0].clone()], states, batch)?;
            let (b1, c1) = forward_tensors(&nets[1], &t[ranges[1].clone()], states, batch)?;
            let (wf_raw, c2) = forward_tensors(&nets[2], &t[ranges[2].clone()], states, batch)?;
            let (v, c3) = forward_tensors(&nets[3], &t[ranges[3].clone()], states, batch)?;
            let e = spec.embed_dim;
            let mut h_pre = vec![0.0; batch * e];
            let mut h = vec![0.0; batch * e];
            let mut q_tot = Vec::with_capacity(batch);
            for b in 0..batch {
                let q = &qs[b * n..(b + 1) * n];
                let w1 = &w1_raw[b * n * e..(b + 1) * n * e];
                let hp = &mut h_pre[b * e..(b + 1) * e];
                hp.copy_from_slice(&b1[b * e..(b + 1) * e]);
                for (i, &qi) in q.iter().enumerate() {
                    for (k, slot) in hp.iter_mut().enumerate() {
                        *slot += qi * w1[i * e + k].abs();
                    }
                }
                let hb = &mut h[b * e..(b + 1) * e];
                let mut total = v[b];
                for k in 0..e {
                    hb[k] = elu(hp[k]);
                    total += hb[k] * wf_raw[b * e + k].abs();
                }
                q_tot.push(total);
            }
            let cache = MixCache {
                batch,
                qs: qs.to_vec(),
                fingerprint: phi.fingerprint(),
                qmix: Some(QmixCache {
                    hyper: [c0, c1, c2, c3],
                    w1_raw,
                    wf_raw,
                    h_pre,
                    h,
                }),
            };
            Ok((q_tot, cache))
        }
    }
}

/// Single-sample mixing.
pub fn mix_forward(spec: &MixerSpec, phi: &ParameterSet, qs: &[f64], state: &[f64]) -> Result<(f64, MixCache)> {
    let (q, cache) = mix_forward_batch(spec, phi, qs, state, 1)?;
    Ok((q[0], cache))
}

/// Mixing without a cache (used for bootstrap targets).
pub fn mix_predict_batch(spec: &MixerSpec, phi: &ParameterSet, qs: &[f64], states: &[f64], batch: usize) -> Result<Vec<f64>> {
    if spec.kind == MixerKind::Vdn {
        spec.check(phi)?;
        if qs.len() != batch * spec.n_agents {
            return Err(Error::shape("<mixer qs>", format!("{batch} x {}", spec.n_agents), qs.len()));
        }
        return Ok(qs.chunks_exact(spec.n_agents).map(|r| r.iter().sum()).collect());
    }
    mix_forward_batch(spec, phi, qs, states, batch).map(|(q, _)| q)
}

/// Weighted partial derivatives: with `upstream[b]` the weight on sample `b`,
/// returns `dq[b, i] = upstream[b] · ∂q_tot_b/∂q_i` (`B x N`) and
/// `dφ = Σ_b upstream[b] · ∂q_tot_b/∂φ`.
pub fn mix_backward(
    spec: &MixerSpec,
    phi: &ParameterSet,
    cache: &MixCache,
    upstream: &[f64],
) -> Result<(Vec<f64>, ParameterSet)> {
    let batch = cache.batch;
    let n = spec.n_agents;
    if upstream.len() != batch {
        return Err(Error::shape("<mixer upstream>", batch, upstream.len()));
    }
    if cache.qs.len() != batch * n {
        return Err(Error::Contract("mixer cache was produced for a different agent count".into()));
    }
    let Some(c) = &cache.qmix else {
        if spec.kind != MixerKind::Vdn {
            return Err(Error::Contract("vdn cache passed to a qmix mixer".into()));
        }
        let dq = upstream.iter().flat_map(|&g| std::iter::repeat_n(g, n)).collect();
        return Ok((dq, ParameterSet::new()));
    };
    if spec.kind != MixerKind::Qmix || cache.fingerprint != phi.fingerprint() {
        return Err(Error::Contract("mixer cache does not belong to these parameters".into()));
    }
    let e = spec.embed_dim;
    let mut dq = vec![0.0; batch * n];
    let mut d_w1 = vec![0.0; batch * n * e];
    let mut d_b1 = vec![0.0; batch * e];
    let mut d_wf = vec![0.0; batch * e];
    let d_v = upstream.to_vec();
    for b in 0..batch {
        let g = upstream[b];
        let q = &cache.qs[b * n..(b + 1) * n];
        let w1 = &c.w1_raw[b * n * e..(b + 1) * n * e];
        let mut dh_pre = vec![0.0; e];
        for k in 0..e {
            let wf = c.wf_raw[b * e + k];
            d_wf[b * e + k] = g * c.h[b * e + k] * abs_grad(wf);
            dh_pre[k] = g * wf.abs() * elu_grad(c.h_pre[b * e + k]);
        }
        d_b1[b * e..(b + 1) * e].copy_from_slice(&dh_pre);
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..e {
                let raw = w1[i * e + k];
                acc += raw.abs() * dh_pre[k];
                d_w1[b * n * e + i * e + k] = q[i] * dh_pre[k] * abs_grad(raw);
            }
            dq[b * n + i] = acc;
        }
    }
    let nets = spec.hypernets();
    let ranges = spec.ranges();
    let mut grads = phi.zeros_like();
    let uppers = [d_w1, d_b1, d_wf, d_v];
    for k in 0..4 {
        let r = ranges[k].clone();
        backward_tensors_into(
            &nets[k],
            &phi.tensors()[r.clone()],
            &c.hyper[k],
            &uppers[k],
            &mut grads.tensors_mut()[r],
            false,
        )?;
    }
    Ok((dq, grads))
}

/// `∂q_tot/∂q_i` and `∂q_tot/∂φ` for a single-sample cache.
pub fn mix_partials(spec: &MixerSpec, phi: &ParameterSet, cache: &MixCache) -> Result<(Vec<f64>, ParameterSet)> {
    if cache.batch != 1 {
        return Err(Error::Contract("mix_partials expects a single-sample cache".into()));
    }
    mix_backward(spec, phi, cache, &[1.0])
}

/// Zeroes the generators of the mixing weights (`hyper_w1`), leaving only the
/// state-conditioned bias path.
pub fn zero_weight_generators(spec: &MixerSpec, phi: &mut ParameterSet) {
    if spec.kind != MixerKind::Qmix {
        return;
    }
    let r = spec.ranges()[0].clone();
    for t in &mut phi.tensors_mut()[r] {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}
