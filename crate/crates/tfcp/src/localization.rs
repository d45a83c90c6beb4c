//! Domain localization for high-dimensional states: partition the state
//! into interior blocks, extend each block by a radius, run any local
//! analysis solver per extended block, and write the interior updates back
//! into the global state vector.

use rayon::prelude::*;

use crate::core::ensemble::Ensemble;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    Periodic,
    Bounded,
}

/// One local block: the interior indices it owns, the extended indices it
/// reads, and the observation indices assigned to it.
#[derive(Clone, Debug)]
pub struct Block {
    pub interior: Vec<usize>,
    pub extended: Vec<usize>,
    pub obs: Vec<usize>,
}

/// A full partition of the state into blocks with extended regions.
#[derive(Clone, Debug)]
pub struct BlockLayout {
    pub blocks: Vec<Block>,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub radius: usize,
    pub topology: Topology,
}

impl BlockLayout {
    /// Check that the interiors partition the state exactly.
    fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.state_dim];
        for block in &self.blocks {
            for &i in &block.interior {
                if i >= self.state_dim || seen[i] {
                    return Err(Error::InvalidParameter(format!(
                        "block interiors must partition the state; index {i} repeated or out of range"
                    )));
                }
                seen[i] = true;
            }
            let ext: std::collections::BTreeSet<usize> = block.extended.iter().cloned().collect();
            if !block.interior.iter().all(|i| ext.contains(i)) {
                return Err(Error::InvalidParameter(
                    "every interior index must belong to its extended set".into(),
                ));
            }
        }
        if !seen.iter().all(|s| *s) {
            return Err(Error::InvalidParameter(
                "block interiors must cover every state index".into(),
            ));
        }
        Ok(())
    }
}

/// Contiguous interior blocks of `block_size` dilated by `r_loc`, with each
/// observation assigned to every block whose extended set contains its
/// observed state coordinate. `obs_coords[j]` names the state index that
/// observation `j` measures.
pub fn build_blocks(
    n: usize,
    block_size: usize,
    r_loc: usize,
    obs_coords: &[usize],
    topology: Topology,
) -> Result<BlockLayout> {
    if n == 0 {
        return Err(Error::InvalidParameter("state dimension must be positive".into()));
    }
    if block_size == 0 || block_size > n {
        return Err(Error::InvalidParameter(format!(
            "block size must be in 1..={n}, got {block_size}"
        )));
    }
    if topology == Topology::Periodic && r_loc >= n {
        return Err(Error::InvalidParameter(format!(
            "localization radius {r_loc} wraps the whole periodic state of dimension {n}"
        )));
    }
    if let Some(&bad) = obs_coords.iter().find(|&&c| c >= n) {
        return Err(Error::InvalidParameter(format!(
            "observed coordinate {bad} out of range for state dimension {n}"
        )));
    }

    let mut blocks = Vec::new();
    let mut start = 0usize;
    while start < n {
        let end = (start + block_size).min(n);
        let interior: Vec<usize> = (start..end).collect();
        let extended: Vec<usize> = match topology {
            Topology::Bounded => {
                let lo = start.saturating_sub(r_loc);
                let hi = (end + r_loc).min(n);
                (lo..hi).collect()
            }
            Topology::Periodic => {
                let width = (end - start) + 2 * r_loc;
                if width >= n {
                    (0..n).collect()
                } else {
                    let mut idx: Vec<usize> = (0..width)
                        .map(|k| (start + n - r_loc + k) % n)
                        .collect();
                    idx.sort_unstable();
                    idx
                }
            }
        };
        let ext_set: std::collections::BTreeSet<usize> = extended.iter().cloned().collect();
        let obs: Vec<usize> = obs_coords
            .iter()
            .enumerate()
            .filter(|(_, &c)| ext_set.contains(&c))
            .map(|(j, _)| j)
            .collect();
        blocks.push(Block {
            interior,
            extended,
            obs,
        });
        start = end;
    }

    let layout = BlockLayout {
        blocks,
        state_dim: n,
        obs_dim: obs_coords.len(),
        radius: r_loc,
        topology,
    };
    layout.validate()?;
    Ok(layout)
}

/// Run a local analysis per extended block and rearrange the interior
/// updates into the global state. The solver receives the block index, the
/// ensemble restricted to the extended set, and the observation values
/// assigned to the block; it must return an ensemble of the same shape.
pub fn localized_analysis<F>(
    prior: &Ensemble,
    y_obs: &[f64],
    layout: &BlockLayout,
    local_solver: F,
) -> Result<Ensemble>
where
    F: Fn(usize, &Ensemble, &[f64]) -> Result<Ensemble> + Sync,
{
    let order: Vec<usize> = (0..layout.blocks.len()).collect();
    localized_analysis_ordered(prior, y_obs, layout, &order, local_solver)
}

/// [`localized_analysis`] with an explicit processing order; output is
/// bit-identical for any order because blocks write disjoint interiors.
pub fn localized_analysis_ordered<F>(
    prior: &Ensemble,
    y_obs: &[f64],
    layout: &BlockLayout,
    order: &[usize],
    local_solver: F,
) -> Result<Ensemble>
where
    F: Fn(usize, &Ensemble, &[f64]) -> Result<Ensemble> + Sync,
{
    if prior.dim() != layout.state_dim {
        return Err(Error::DimensionMismatch {
            context: "localized analysis state dimension",
            expected: layout.state_dim,
            actual: prior.dim(),
        });
    }
    if y_obs.len() != layout.obs_dim {
        return Err(Error::DimensionMismatch {
            context: "localized analysis observation dimension",
            expected: layout.obs_dim,
            actual: y_obs.len(),
        });
    }

    let results: Vec<(usize, Result<Ensemble>)> = order
        .par_iter()
        .map(|&b| {
            let block = &layout.blocks[b];
            let sub_prior = match Ensemble::new(prior.members().select_columns(&block.extended)) {
                Ok(e) => e,
                Err(e) => return (b, Err(e)),
            };
            let sub_obs: Vec<f64> = block.obs.iter().map(|&j| y_obs[j]).collect();
            let out = local_solver(b, &sub_prior, &sub_obs).and_then(|post| {
                if post.size() != prior.size() || post.dim() != block.extended.len() {
                    Err(Error::DimensionMismatch {
                        context: "local solver output",
                        expected: block.extended.len(),
                        actual: post.dim(),
                    })
                } else {
                    Ok(post)
                }
            });
            (b, out)
        })
        .collect();

    let mut global = prior.members().clone();
    let mut written = vec![false; layout.state_dim];
    for (b, result) in results {
        let block = &layout.blocks[b];
        let local = result.map_err(|e| Error::BlockFailed {
            block: b,
            source: Box::new(e),
        })?;
        for &g in &block.interior {
            let pos = block
                .extended
                .iter()
                .position(|&e| e == g)
                .expect("interior inside extended");
            if written[g] {
                return Err(Error::InvalidParameter(format!(
                    "state index {g} written twice during rearrange"
                )));
            }
            written[g] = true;
            for i in 0..prior.size() {
                global.row_mut(i)[g] = local.member(i)[pos];
            }
        }
    }
    if !written.iter().all(|w| *w) {
        return Err(Error::InvalidParameter(
            "rearrange left state indices unwritten".into(),
        ));
    }
    Ensemble::new(global)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::rng::RngStream;

    #[test]
    fn periodic_single_component_blocks() {
        let obs: Vec<usize> = (0..40).step_by(2).collect();
        let layout = build_blocks(40, 1, 1, &obs, Topology::Periodic).unwrap();
        assert_eq!(layout.blocks.len(), 40);
        for (i, block) in layout.blocks.iter().enumerate() {
            assert_eq!(block.interior, vec![i]);
            let mut expected = vec![(i + 39) % 40, i, (i + 1) % 40];
            expected.sort_unstable();
            assert_eq!(block.extended, expected);
            assert!(
                (1..=2).contains(&block.obs.len()),
                "block {i} has {} observations",
                block.obs.len()
            );
        }
    }

    #[test]
    fn zero_radius_extends_nothing() {
        let layout = build_blocks(10, 2, 0, &[0, 5], Topology::Bounded).unwrap();
        for block in &layout.blocks {
            assert_eq!(block.interior, block.extended);
        }
    }

    #[test]
    fn bounded_blocks_hand_enumerated() {
        let layout = build_blocks(5, 2, 1, &[0, 2, 4], Topology::Bounded).unwrap();
        let interiors: Vec<Vec<usize>> = layout.blocks.iter().map(|b| b.interior.clone()).collect();
        assert_eq!(interiors, vec![vec![0, 1], vec![2, 3], vec![4]]);
        let extendeds: Vec<Vec<usize>> = layout.blocks.iter().map(|b| b.extended.clone()).collect();
        assert_eq!(extendeds, vec![vec![0, 1, 2], vec![1, 2, 3, 4], vec![3, 4]]);
    }

    #[test]
    fn periodic_radius_too_large_errors() {
        assert!(build_blocks(6, 1, 6, &[0], Topology::Periodic).is_err());
    }

    #[test]
    fn identity_solver_returns_prior() {
        let mut rng = RngStream::from_seed(1);
        let prior = Ensemble::gaussian(6, &[0.0; 8], &[1.0; 8], &mut rng).unwrap();
        let layout = build_blocks(8, 2, 1, &[1, 4, 7], Topology::Periodic).unwrap();
        let out = localized_analysis(&prior, &[0.2, -0.1, 0.5], &layout, |_, sub, _| {
            Ok(sub.clone())
        })
        .unwrap();
        assert_eq!(out, prior);
    }

    #[test]
    fn single_global_block_equals_direct_call() {
        let mut rng = RngStream::from_seed(2);
        let prior = Ensemble::gaussian(5, &[0.0; 4], &[1.0; 4], &mut rng).unwrap();
        let layout = build_blocks(4, 4, 0, &[0, 1, 2, 3], Topology::Bounded).unwrap();
        let solver = |_b: usize, sub: &Ensemble, obs: &[f64]| {
            let mut m = sub.members().clone();
            for i in 0..m.rows() {
                for (c, v) in m.row_mut(i).iter_mut().enumerate() {
                    *v += obs[c];
                }
            }
            Ensemble::new(m)
        };
        let y = [0.1, 0.2, 0.3, 0.4];
        let via_layout = localized_analysis(&prior, &y, &layout, solver).unwrap();
        let direct = solver(0, &prior, &y).unwrap();
        assert_eq!(via_layout, direct);
    }

    #[test]
    fn block_order_is_irrelevant_bitwise() {
        let mut rng = RngStream::from_seed(3);
        let prior = Ensemble::gaussian(8, &[0.0; 12], &[1.0; 12], &mut rng).unwrap();
        let obs_coords: Vec<usize> = (0..12).step_by(3).collect();
        let layout = build_blocks(12, 3, 2, &obs_coords, Topology::Periodic).unwrap();
        let y = [0.5, -0.2, 0.9, 1.4];
        // A solver with block-dependent nonlinear output.
        let solver = |b: usize, sub: &Ensemble, obs: &[f64]| {
            let mut m = sub.members().clone();
            let shift: f64 = obs.iter().sum::<f64>() * (b as f64 + 1.0);
            for i in 0..m.rows() {
                for v in m.row_mut(i) {
                    *v = (*v + shift).sin();
                }
            }
            Ensemble::new(m)
        };
        let forward_order: Vec<usize> = (0..layout.blocks.len()).collect();
        let reverse_order: Vec<usize> = forward_order.iter().rev().cloned().collect();
        let a = localized_analysis_ordered(&prior, &y, &layout, &forward_order, solver).unwrap();
        let b = localized_analysis_ordered(&prior, &y, &layout, &reverse_order, solver).unwrap();
        for i in 0..a.size() {
            for (x, y) in a.member(i).iter().zip(b.member(i)) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn solver_failures_name_the_block() {
        let mut rng = RngStream::from_seed(4);
        let prior = Ensemble::gaussian(4, &[0.0; 6], &[1.0; 6], &mut rng).unwrap();
        let layout = build_blocks(6, 2, 1, &[0, 3], Topology::Bounded).unwrap();
        let err = localized_analysis(&prior, &[0.0, 0.0], &layout, |b, sub, _| {
            if b == 1 {
                Err(Error::ParticleDegeneracy)
            } else {
                Ok(sub.clone())
            }
        })
        .unwrap_err();
        match err {
            Error::BlockFailed { block, .. } => assert_eq!(block, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn locality_of_observation_changes() {
        // Changing an observation must only touch blocks whose extended
        // sets contain the observed coordinate.
        let mut rng = RngStream::from_seed(5);
        let prior = Ensemble::gaussian(6, &[0.0; 9], &[1.0; 9], &mut rng).unwrap();
        let obs_coords = [1usize, 4, 7];
        let layout = build_blocks(9, 1, 1, &obs_coords, Topology::Bounded).unwrap();
        let solver = |_b: usize, sub: &Ensemble, obs: &[f64]| {
            let mut m = sub.members().clone();
            let shift: f64 = obs.iter().sum();
            for i in 0..m.rows() {
                for v in m.row_mut(i) {
                    *v += shift;
                }
            }
            Ensemble::new(m)
        };
        let base = localized_analysis(&prior, &[0.1, 0.2, 0.3], &layout, solver).unwrap();
        let tweaked = localized_analysis(&prior, &[0.1, 5.2, 0.3], &layout, solver).unwrap();
        // Observation 1 observes coordinate 4; with radius 1, exactly the
        // blocks owning interiors 3, 4, 5 see it.
        for i in 0..prior.size() {
            for c in 0..9 {
                let changed = base.member(i)[c].to_bits() != tweaked.member(i)[c].to_bits();
                let expected = (3..=5).contains(&c);
                assert_eq!(changed, expected, "member {i} coord {c}");
            }
        }
    }
}
