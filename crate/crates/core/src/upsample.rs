//! Coarse-to-fine interpolation by inverse squared distance over the `k`
//! nearest coarse nodes.
//!
//! A fine node that coincides with a coarse node (squared distance below
//! [`SNAP_DIST2`]) copies that node's value and contributes no position
//! gradient.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::mesh::{knn, MeshError, Point};

pub const DEFAULT_K: usize = 3;
pub const SNAP_DIST2: f64 = 1e-24;

#[derive(Debug, Error, PartialEq)]
pub enum UpsampleError {
    #[error(transparent)]
    Neighbors(#[from] MeshError),
    #[error("plan was built without recorded distances; position gradients unavailable")]
    NotRecorded,
    #[error("{what}: expected {expected} rows, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Stencil {
    neighbors: Vec<usize>,
    weights: Vec<f64>,
    snapped: bool,
}

/// Offsets `fine - coarse` and squared distances per stencil entry.
#[derive(Debug, Clone, PartialEq)]
struct Recorded {
    offsets: Vec<Vec<Point>>,
    dist2: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpsamplePlan {
    num_coarse: usize,
    stencils: Vec<Stencil>,
    recorded: Option<Recorded>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpsampleGrads {
    pub values: Array2<f64>,
    pub positions: Vec<Point>,
}

fn plan(fine: &[Point], coarse: &[Point], k: usize, record: bool) -> Result<UpsamplePlan, UpsampleError> {
    let hits = knn(fine, coarse, k)?;
    let mut stencils = Vec::with_capacity(fine.len());
    let mut rec = record.then(|| Recorded {
        offsets: Vec::with_capacity(fine.len()),
        dist2: Vec::with_capacity(fine.len()),
    });
    for (j, h) in hits.iter().enumerate() {
        let neighbors: Vec<usize> = h.iter().map(|n| n.index).collect();
        let snapped = h[0].dist2 < SNAP_DIST2;
        let weights = if snapped {
            let mut w = vec![0.0; h.len()];
            w[0] = 1.0;
            w
        } else {
            let inv: Vec<f64> = h.iter().map(|n| 1.0 / n.dist2).collect();
            let total: f64 = inv.iter().sum();
            let mut w: Vec<f64> = inv.iter().map(|w| w / total).collect();
            // the coefficient `apply` gives the nearest node
            w[0] = w[1..].iter().fold(1.0, |acc, x| acc - x);
            w
        };
        if let Some(r) = rec.as_mut() {
            let p = fine[j];
            r.offsets.push(
                neighbors
                    .iter()
                    .map(|&c| [p[0] - coarse[c][0], p[1] - coarse[c][1]])
                    .collect(),
            );
            r.dist2.push(h.iter().map(|n| n.dist2).collect());
        }
        stencils.push(Stencil {
            neighbors,
            weights,
            snapped,
        });
    }
    Ok(UpsamplePlan {
        num_coarse: coarse.len(),
        stencils,
        recorded: rec,
    })
}

/// Plan that supports position gradients.
pub fn build_plan(fine: &[Point], coarse: &[Point], k: usize) -> Result<UpsamplePlan, UpsampleError> {
    plan(fine, coarse, k, true)
}

/// Plan for inference only; [`UpsamplePlan::apply_backward`] will fail.
pub fn build_plan_inference(
    fine: &[Point],
    coarse: &[Point],
    k: usize,
) -> Result<UpsamplePlan, UpsampleError> {
    plan(fine, coarse, k, false)
}

impl UpsamplePlan {
    pub fn num_fine(&self) -> usize {
        self.stencils.len()
    }

    pub fn num_coarse(&self) -> usize {
        self.num_coarse
    }

    /// Neighbor indices and weights of fine node `j`.
    pub fn stencil(&self, j: usize) -> (&[usize], &[f64]) {
        let s = &self.stencils[j];
        (&s.neighbors, &s.weights)
    }

    fn check_values(&self, values: &ArrayView2<f64>) -> Result<(), UpsampleError> {
        if values.nrows() != self.num_coarse {
            return Err(UpsampleError::ShapeMismatch {
                what: "coarse values",
                expected: self.num_coarse,
                got: values.nrows(),
            });
        }
        Ok(())
    }

    pub fn apply(&self, values: ArrayView2<f64>) -> Result<Array2<f64>, UpsampleError> {
        self.check_values(&values)?;
        let mut out = Array2::zeros((self.num_fine(), values.ncols()));
        for (j, s) in self.stencils.iter().enumerate() {
            // offsets from the nearest node, so constant fields come out exact
            let anchor = values.row(s.neighbors[0]);
            let mut row = out.row_mut(j);
            row.assign(&anchor);
            for (&c, &w) in s.neighbors.iter().zip(&s.weights).skip(1) {
                for ((o, &v), &a) in row.iter_mut().zip(values.row(c)).zip(anchor) {
                    *o += w * (v - a);
                }
            }
        }
        Ok(out)
    }

    /// Gradients of `<cotangent, apply(values)>` with respect to the coarse
    /// values and the coarse node positions.
    pub fn apply_backward(
        &self,
        values: ArrayView2<f64>,
        cotangent: ArrayView2<f64>,
    ) -> Result<UpsampleGrads, UpsampleError> {
        let rec = self.recorded.as_ref().ok_or(UpsampleError::NotRecorded)?;
        self.check_values(&values)?;
        if cotangent.nrows() != self.num_fine() || cotangent.ncols() != values.ncols() {
            return Err(UpsampleError::ShapeMismatch {
                what: "fine cotangent",
                expected: self.num_fine(),
                got: cotangent.nrows(),
            });
        }
        let up = self.apply(values)?;
        let mut vbar = Array2::zeros(values.dim());
        let mut xbar = vec![[0.0; 2]; self.num_coarse];
        for (j, s) in self.stencils.iter().enumerate() {
            let ub = cotangent.row(j);
            for (&c, &w) in s.neighbors.iter().zip(&s.weights) {
                vbar.row_mut(c).scaled_add(w, &ub);
            }
            if s.snapped {
                continue;
            }
            let total: f64 = rec.dist2[j].iter().map(|d| 1.0 / d).sum();
            for (t, &c) in s.neighbors.iter().enumerate() {
                let d2 = rec.dist2[j][t];
                let dot: f64 = ub
                    .iter()
                    .zip(values.row(c).iter().zip(up.row(j).iter()))
                    .map(|(b, (d, u))| b * (d - u))
                    .sum();
                let scale = dot / total * 2.0 / (d2 * d2);
                let r = rec.offsets[j][t];
                xbar[c][0] += scale * r[0];
                xbar[c][1] += scale * r[1];
            }
        }
        Ok(UpsampleGrads {
            values: vbar,
            positions: xbar,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, compare};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn coarse() -> Vec<Point> {
        vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.4, 0.6]]
    }

    #[test]
    fn coincident_nodes_copy_exactly() {
        let c = coarse();
        let vals = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64 + 0.5);
        let plan = build_plan(&c, &c, 3).unwrap();
        assert_eq!(plan.apply(vals.view()).unwrap(), vals);
        assert_eq!(plan.stencil(2), (&[2usize, 4, 0][..], &[1.0, 0.0, 0.0][..]));
    }

    #[test]
    fn two_point_weights() {
        let c = [[0.0, 0.0], [2.0, 0.0]];
        let mid = build_plan(&[[1.0, 0.0]], &c, 2).unwrap();
        assert_eq!(mid.stencil(0).1, &[0.5, 0.5]);
        let v = Array2::from_shape_vec((2, 1), vec![1.0, 3.0]).unwrap();
        assert_eq!(mid.apply(v.view()).unwrap()[[0, 0]], 2.0);

        let c = [[0.0, 0.0], [3.0, 0.0]];
        let p = build_plan(&[[1.0, 0.0]], &c, 2).unwrap();
        let (n, w) = p.stencil(0);
        assert_eq!(n, &[0, 1]);
        assert!((w[0] - 0.8).abs() < 1e-15 && (w[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn equidistant_neighbors_average() {
        let c = vec![[-1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [9.0, 9.0]];
        let vals = Array2::from_shape_vec((4, 1), vec![1.0, 2.0, 6.0, 100.0]).unwrap();
        let plan = build_plan(&[[0.0, 0.0]], &c, 3).unwrap();
        let out = plan.apply(vals.view()).unwrap();
        assert!((out[[0, 0]] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn one_hot_reads_out_weights() {
        let c = coarse();
        let fine = [[0.2, 0.1], [0.9, 0.7], [0.5, 0.5]];
        let plan = build_plan(&fine, &c, 3).unwrap();
        for hot in 0..c.len() {
            let mut v = Array2::zeros((c.len(), 1));
            v[[hot, 0]] = 1.0;
            let out = plan.apply(v.view()).unwrap();
            for j in 0..fine.len() {
                let (n, w) = plan.stencil(j);
                let expect = n.iter().position(|&i| i == hot).map_or(0.0, |t| w[t]);
                assert_eq!(out[[j, 0]], expect);
            }
        }
    }

    #[test]
    fn errors() {
        let c = coarse();
        assert!(matches!(
            build_plan(&[[0.0, 0.0]], &c, 6),
            Err(UpsampleError::Neighbors(MeshError::TooFewPoints { .. }))
        ));
        let plan = build_plan_inference(&[[0.3, 0.3]], &c, 3).unwrap();
        let v = Array2::zeros((5, 3));
        assert!(plan.apply(v.view()).is_ok());
        assert_eq!(
            plan.apply_backward(v.view(), Array2::zeros((1, 3)).view()),
            Err(UpsampleError::NotRecorded)
        );
        assert!(plan.apply(Array2::zeros((4, 3)).view()).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let c = coarse();
        let plan = build_plan(&[[0.3, 0.3], [0.8, 0.1]], &c, 3).unwrap();
        let v = Array2::from_elem((5, 3), 2.0);
        let g = plan
            .apply_backward(v.view(), Array2::zeros((2, 3)).view())
            .unwrap();
        assert!(g.values.iter().all(|&x| x == 0.0));
        assert!(g.positions.iter().all(|p| p == &[0.0, 0.0]));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = coarse();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fine: Vec<Point> = (0..7)
            .map(|_| [rng.gen_range(-0.2..1.2), rng.gen_range(-0.2..1.2)])
            .chain([[1.0, 0.0]])
            .collect();
        let vals = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let cot = Array2::from_shape_fn((fine.len(), 3), |_| rng.gen_range(-1.0..1.0));
        let plan = build_plan(&fine, &c, 3).unwrap();
        let g = plan.apply_backward(vals.view(), cot.view()).unwrap();

        let loss_pos = |x: &[f64]| {
            let pts: Vec<Point> = (0..5).map(|i| [x[2 * i], x[2 * i + 1]]).collect();
            let p = build_plan(&fine, &pts, 3).unwrap();
            // the probe must not change any neighbor set
            for j in 0..fine.len() {
                let used = if plan.stencils[j].snapped { 1 } else { 3 };
                assert_eq!(p.stencil(j).0[..used], plan.stencil(j).0[..used]);
            }
            (p.apply(vals.view()).unwrap() * &cot).sum()
        };
        let x: Vec<f64> = c.iter().flat_map(|p| [p[0], p[1]]).collect();
        let fd = central_difference(loss_pos, &x, 1e-6);
        let an: Vec<f64> = g.positions.iter().flat_map(|p| [p[0], p[1]]).collect();
        let r = compare(&an, &fd, 1e-3);
        assert!(r.passes(1e-5), "{r:?}");

        let loss_val = |v: &[f64]| {
            let vv = Array2::from_shape_vec((5, 3), v.to_vec()).unwrap();
            (plan.apply(vv.view()).unwrap() * &cot).sum()
        };
        // linear map: a unit step is exact up to rounding
        let fd = central_difference(loss_val, vals.as_slice().unwrap(), 1.0);
        let r = compare(g.values.as_slice().unwrap(), &fd, 1e-3);
        assert!(r.passes(1e-8), "{r:?}");
    }

    fn pt() -> impl Strategy<Value = Point> {
        (-5.0f64..5.0, -5.0f64..5.0).prop_map(|(x, y)| [x, y])
    }

    proptest! {
        #[test]
        fn interpolation_properties(
            c in prop::collection::vec(pt(), 3..15),
            f in prop::collection::vec(pt(), 1..10),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((c.len(), 2), |_| rng.gen_range(-3.0..3.0));
            let b = Array2::from_shape_fn((c.len(), 2), |_| rng.gen_range(-3.0..3.0));
            let plan = build_plan(&f, &c, 3).unwrap();
            let out = plan.apply(a.view()).unwrap();
            for j in 0..f.len() {
                let (n, w) = plan.stencil(j);
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(w.iter().all(|&x| x >= 0.0));
                for ch in 0..2 {
                    let lo = n.iter().map(|&i| a[[i, ch]]).fold(f64::INFINITY, f64::min);
                    let hi = n.iter().map(|&i| a[[i, ch]]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(out[[j, ch]] >= lo - 1e-12 && out[[j, ch]] <= hi + 1e-12);
                }
            }
            let c5 = Array2::from_elem((c.len(), 2), 0.3);
            prop_assert!(plan.apply(c5.view()).unwrap().iter().all(|&v| v == 0.3));
            let (al, be) = (1.7, -0.4);
            let lhs = plan.apply((&a * al + &b * be).view()).unwrap();
            let rhs = &out * al + plan.apply(b.view()).unwrap() * be;
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
