use std::cmp::Ordering;

use super::{Mesh, MeshError, Point};
use crate::par;

/// `(x_j - x_i) × (x_k - x_i)`; positive for counter-clockwise winding.
#[inline]
pub fn orientation(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Signed doubled area of each triangle.
pub fn element_orientations(nodes: &[Point], elements: &[[usize; 3]]) -> Vec<f64> {
    elements
        .iter()
        .map(|&[i, j, k]| orientation(nodes[i], nodes[j], nodes[k]))
        .collect()
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    d[0].hypot(d[1])
}

/// Distance from each query point to the polyline of marker `marker_tag`.
///
/// Every node of an external-flow mesh lies outside the body, so the value
/// returned is the unsigned distance to the marker segments.
pub fn signed_distance(query: &[Point], mesh: &Mesh, marker_tag: &str) -> Result<Vec<f64>, MeshError> {
    let marker = mesh.marker(marker_tag)?;
    let segs: Vec<(Point, Point)> = marker
        .segments
        .iter()
        .map(|&[a, b]| (mesh.nodes[a], mesh.nodes[b]))
        .collect();
    Ok(par::map(query, |&p| {
        segs.iter()
            .map(|&(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }))
}

/// One k-NN hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

fn cmp_neighbor(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.dist2.total_cmp(&b.dist2).then_with(|| a.index.cmp(&b.index))
}

/// The `k` nearest reference points of every query, ascending by squared
/// distance with ties going to the lower index.
pub fn knn(query: &[Point], reference: &[Point], k: usize) -> Result<Vec<Vec<Neighbor>>, MeshError> {
    if k > reference.len() {
        return Err(MeshError::TooFewPoints {
            k,
            available: reference.len(),
        });
    }
    Ok(par::map(query, |&q| {
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        for (index, r) in reference.iter().enumerate() {
            let dx = q[0] - r[0];
            let dy = q[1] - r[1];
            let cand = Neighbor {
                index,
                dist2: dx * dx + dy * dy,
            };
            if best.len() == k {
                if k == 0 || cmp_neighbor(&cand, &best[k - 1]) != Ordering::Less {
                    continue;
                }
                best.pop();
            }
            let at = best
                .binary_search_by(|b| cmp_neighbor(b, &cand))
                .unwrap_or_else(|e| e);
            best.insert(at, cand);
        }
        best
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{Element, Marker};
    use proptest::prelude::*;

    fn segment_mesh() -> Mesh {
        Mesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![Element::Triangle([0, 1, 2])],
            vec![Marker::new("airfoil", vec![[0, 1]])],
        )
        .unwrap()
    }

    #[test]
    fn distances() {
        let m = segment_mesh();
        let d = signed_distance(&[[0.5, 0.0], [0.0, 2.0], [2.0, 2.0]], &m, "airfoil").unwrap();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 2.0);
        assert!((d[2] - 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(
            signed_distance(&[[0.0, 0.0]], &m, "wing"),
            Err(MeshError::UnknownMarker("wing".into()))
        );
    }

    #[test]
    fn orientation_signs() {
        let n = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [2.0, 0.0]];
        let o = element_orientations(&n, &[[0, 1, 2], [0, 2, 1], [0, 1, 3]]);
        assert_eq!(o, vec![1.0, -1.0, 0.0]);
    }

    #[test]
    fn knn_basics() {
        let r = [[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        let hit = knn(&[[2.0, 0.0]], &r, 1).unwrap();
        assert_eq!(hit[0], vec![Neighbor { index: 1, dist2: 0.0 }]);
        let two = knn(&[[0.0, 0.0]], &r, 2).unwrap();
        assert_eq!(two[0].iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 1]);
        let tie = knn(&[[0.0, 0.0]], &[[0.0, 1.0], [1.0, 0.0]], 1).unwrap();
        assert_eq!(tie[0][0].index, 0);
        let tie_rev = knn(&[[0.0, 0.0]], &[[5.0, 5.0], [1.0, 0.0], [0.0, 1.0]], 1).unwrap();
        assert_eq!(tie_rev[0][0].index, 1);
        assert!(matches!(
            knn(&[[0.0, 0.0]], &r, 4),
            Err(MeshError::TooFewPoints { k: 4, available: 3 })
        ));
    }

    fn pt() -> impl Strategy<Value = Point> {
        (-10.0f64..10.0, -10.0f64..10.0).prop_map(|(x, y)| [x, y])
    }

    proptest! {
        #[test]
        fn knn_permutation_consistent(
            refs in prop::collection::vec(pt(), 3..20),
            q in pt(),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..refs.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<Point> = perm.iter().map(|&i| refs[i]).collect();
            let a = knn(&[q], &refs, 3).unwrap();
            let b = knn(&[q], &permuted, 3).unwrap();
            let da: Vec<f64> = a[0].iter().map(|n| n.dist2).collect();
            let db: Vec<f64> = b[0].iter().map(|n| n.dist2).collect();
            prop_assert_eq!(da, db);
            // distinct distances map to the same underlying points
            let distinct = a[0].windows(2).all(|w| w[0].dist2 < w[1].dist2);
            if distinct {
                let ia: Vec<usize> = a[0].iter().map(|n| n.index).collect();
                let ib: Vec<usize> = b[0].iter().map(|n| perm[n.index]).collect();
                prop_assert_eq!(ia, ib);
            }
        }

        #[test]
        fn sdf_is_lipschitz(p in pt(), q in pt()) {
            let m = Mesh::new(
                vec![[0.0, 0.0], [1.0, 0.2], [0.5, -1.0]],
                vec![Element::Triangle([0, 2, 1])],
                vec![Marker::new("airfoil", vec![[0, 1], [1, 2], [2, 0]])],
            ).unwrap();
            let d = signed_distance(&[p, q], &m, "airfoil").unwrap();
            let dist = (p[0] - q[0]).hypot(p[1] - q[1]);
            prop_assert!((d[0] - d[1]).abs() <= dist + 1e-12);
        }

        #[test]
        fn orientation_translation_and_swap(a in pt(), b in pt(), c in pt(), t in pt()) {
            let o = orientation(a, b, c);
            let sh = |p: Point| [p[0] + t[0], p[1] + t[1]];
            let ot = orientation(sh(a), sh(b), sh(c));
            prop_assert!((o - ot).abs() <= 1e-9 * (1.0 + o.abs()));
            prop_assert_eq!(orientation(a, c, b), -o);
        }
    }
}
