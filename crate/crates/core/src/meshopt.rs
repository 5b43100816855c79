//! Keeping coarse-mesh updates physical.
//!
//! A coordinate update can push a vertex across the opposite edge of a
//! triangle, reversing its winding. [`project_update`] zeroes the update rows
//! of every vertex of such an element and repeats until nothing flips.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::mesh::{orientation, Point};

#[derive(Debug, Error, PartialEq)]
pub enum MeshOptError {
    #[error("element {0} has zero orientation before the update")]
    DegenerateElement(usize),
    #[error("delta has {delta} rows but the mesh has {nodes} nodes")]
    ShapeMismatch { delta: usize, nodes: usize },
}

/// Result of projecting a coordinate update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateProjection {
    pub projected: Vec<Point>,
    /// Nodes whose update rows were zeroed, including pinned nodes.
    pub frozen_nodes: BTreeSet<usize>,
    /// Number of flip checks performed; 1 means the input was already safe.
    pub rounds: usize,
    /// Flipped elements found across all rounds.
    pub flipped_elements: usize,
}

fn moved(p: Point, d: Point) -> Point {
    [p[0] + d[0], p[1] + d[1]]
}

/// Elements whose orientation sign differs between `nodes` and
/// `nodes + delta`. A zero orientation after the update counts as a flip.
pub fn detect_flips(
    nodes: &[Point],
    delta: &[Point],
    elements: &[[usize; 3]],
) -> Result<BTreeSet<usize>, MeshOptError> {
    if delta.len() != nodes.len() {
        return Err(MeshOptError::ShapeMismatch {
            delta: delta.len(),
            nodes: nodes.len(),
        });
    }
    let mut flipped = BTreeSet::new();
    for (e, &[i, j, k]) in elements.iter().enumerate() {
        let before = orientation(nodes[i], nodes[j], nodes[k]);
        if before == 0.0 {
            return Err(MeshOptError::DegenerateElement(e));
        }
        let after = orientation(
            moved(nodes[i], delta[i]),
            moved(nodes[j], delta[j]),
            moved(nodes[k], delta[k]),
        );
        if after == 0.0 || after.signum() != before.signum() {
            flipped.insert(e);
        }
    }
    Ok(flipped)
}

/// Zero the update rows of flipped elements until no element flips.
pub fn project_update(
    nodes: &[Point],
    delta: &[Point],
    elements: &[[usize; 3]],
) -> Result<UpdateProjection, MeshOptError> {
    project_update_pinned(nodes, delta, elements, &BTreeSet::new())
}

/// As [`project_update`], with `pinned` nodes frozen from the start.
pub fn project_update_pinned(
    nodes: &[Point],
    delta: &[Point],
    elements: &[[usize; 3]],
    pinned: &BTreeSet<usize>,
) -> Result<UpdateProjection, MeshOptError> {
    let mut projected = delta.to_vec();
    let mut frozen_nodes = BTreeSet::new();
    for &n in pinned {
        if n < projected.len() {
            projected[n] = [0.0, 0.0];
            frozen_nodes.insert(n);
        }
    }
    let mut rounds = 0;
    let mut flipped_elements = 0;
    loop {
        rounds += 1;
        let flipped = detect_flips(nodes, &projected, elements)?;
        if flipped.is_empty() {
            break;
        }
        flipped_elements += flipped.len();
        for e in flipped {
            for &v in &elements[e] {
                projected[v] = [0.0, 0.0];
                frozen_nodes.insert(v);
            }
        }
    }
    Ok(UpdateProjection {
        projected,
        frozen_nodes,
        rounds,
        flipped_elements,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TRI: [Point; 3] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];

    #[test]
    fn single_triangle_flip() {
        // (0, 1) -> (0.5, -0.5) gives -0.5; (0, 1) -> (0.5, -0.75) gives -0.75
        for (target, expected) in [([0.5, -0.5], -0.5), ([0.5, -0.75], -0.75)] {
            let delta = [[0.0, 0.0], [0.0, 0.0], [target[0], target[1] - 1.0]];
            let after: Vec<Point> = TRI.iter().zip(&delta).map(|(p, d)| moved(*p, *d)).collect();
            assert_eq!(orientation(TRI[0], TRI[1], TRI[2]), 1.0);
            assert_eq!(orientation(after[0], after[1], after[2]), expected);
            let f = detect_flips(&TRI, &delta, &[[0, 1, 2]]).unwrap();
            assert_eq!(f, BTreeSet::from([0]));

            let p = project_update(&TRI, &delta, &[[0, 1, 2]]).unwrap();
            assert_eq!(p.projected, vec![[0.0, 0.0]; 3]);
            assert_eq!(p.frozen_nodes, BTreeSet::from([0, 1, 2]));
            assert_eq!(p.rounds, 2);
        }
    }

    #[test]
    fn no_flip_cases() {
        let zero = [[0.0, 0.0]; 3];
        assert!(detect_flips(&TRI, &zero, &[[0, 1, 2]]).unwrap().is_empty());
        let shift = [[3.0, -2.0]; 3];
        assert!(detect_flips(&TRI, &shift, &[[0, 1, 2]]).unwrap().is_empty());

        let small = [[0.01, 0.0], [0.0, 0.02], [-0.01, 0.01]];
        let p = project_update(&TRI, &small, &[[0, 1, 2]]).unwrap();
        assert_eq!(p.projected, small.to_vec());
        assert!(p.frozen_nodes.is_empty());
        assert_eq!(p.rounds, 1);
    }

    #[test]
    fn collapse_counts_as_flip() {
        // moves vertex 2 onto the line through 0 and 1
        let delta = [[0.0, 0.0], [0.0, 0.0], [0.0, -1.0]];
        assert_eq!(
            detect_flips(&TRI, &delta, &[[0, 1, 2]]).unwrap(),
            BTreeSet::from([0])
        );
    }

    #[test]
    fn degenerate_input_rejected() {
        let line = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        assert_eq!(
            detect_flips(&line, &[[0.0; 2]; 3], &[[0, 1, 2]]),
            Err(MeshOptError::DegenerateElement(0))
        );
    }

    /// Two triangles sharing edge (1, 2); search small perturbations until
    /// zeroing the first flipped triangle makes the second one flip.
    #[test]
    fn cascade_needs_multiple_rounds() {
        let nodes = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let elements = [[0, 1, 2], [1, 3, 2]];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut found = None;
        for _ in 0..200_000 {
            let delta: Vec<Point> = (0..4)
                .map(|_| [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)])
                .collect();
            let first = detect_flips(&nodes, &delta, &elements).unwrap();
            if first.len() != 1 {
                continue;
            }
            let p = project_update(&nodes, &delta, &elements).unwrap();
            if p.rounds >= 3 {
                found = Some((delta, p));
                break;
            }
        }
        let (delta, p) = found.expect("a cascading case exists");
        assert!(p.rounds >= 2);
        assert_eq!(p.frozen_nodes, BTreeSet::from([0, 1, 2, 3]));
        assert!(detect_flips(&nodes, &p.projected, &elements).unwrap().is_empty());
        assert_eq!(detect_flips(&nodes, &delta, &elements).unwrap().len(), 1);
    }
}
