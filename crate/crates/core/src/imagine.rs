//! Parameter-free viewpoint switching.
//!
//! Given agent `i`'s observation and a visible neighbour `j`, rebuild the
//! observation `j` would have, using only what `i` sees: every relative block
//! is re-centred on `j`, distances and visibility are recomputed against the
//! sight radius, and anything `i` cannot see stays zero. Health/speed scalars
//! are copied unchanged.

use crate::env::{ObsLayout, BLOCK_DIM, SELF_DIM};
use crate::error::{Error, Result};

/// Agents visible in an observation, in ascending index order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SurroundingSet(Vec<usize>);

impl SurroundingSet {
    pub fn agents(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.binary_search(&j).is_ok()
    }
}

pub fn surrounding_set(layout: &ObsLayout, obs: &[f64]) -> SurroundingSet {
    SurroundingSet((0..layout.n_agents).filter(|&j| layout.visible(obs, j)).collect())
}

/// Agent `j`'s observation as imagined by agent `i` from `obs_i`.
pub fn imagine_observation(layout: &ObsLayout, obs_i: &[f64], i: usize, j: usize, sight_radius: f64) -> Result<Vec<f64>> {
    layout.check(obs_i)?;
    if i >= layout.n_agents || j >= layout.n_agents {
        return Err(Error::Contract(format!("agent index out of range (i={i}, j={j})")));
    }
    if j == i {
        return Ok(obs_i.to_vec());
    }
    if !layout.visible(obs_i, j) {
        return Err(Error::Contract(format!("agent {j} is not visible to agent {i}")));
    }
    let bj = layout.block(obs_i, j);
    let (jx, jy) = (bj[1], bj[2]);

    let mut out = vec![0.0; layout.dim()];
    out[0] = obs_i[0] + jx;
    out[1] = obs_i[1] + jy;
    out[2] = bj[4];

    let mut place = |entity: usize, dx: f64, dy: f64, scalar: f64| {
        let dist = (dx * dx + dy * dy).sqrt();
        if dist <= sight_radius {
            let o = layout.block_offset(entity);
            out[o..o + BLOCK_DIM].copy_from_slice(&[1.0, dx, dy, dist, scalar]);
            out[layout.mask_offset(entity)] = 1.0;
        }
    };
    // i itself, seen from j
    place(i, -jx, -jy, obs_i[SELF_DIM - 1]);
    for e in 0..layout.n_entities() {
        if e == i || e == j || !layout.visible(obs_i, e) {
            continue;
        }
        let b = layout.block(obs_i, e);
        place(e, b[1] - jx, b[2] - jy, b[4]);
    }
    Ok(out)
}
