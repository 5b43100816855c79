//! Reverse sweep over the recorded pseudo-time iterates.

use ndarray::ArrayView2;

use super::flux::{self, Cons};
use super::{freestream_state, freestream_vjp, FaceKind, ForwardRecord, Geometry, Solver, SolverError};
use crate::mesh::Point;

/// Gradients of a scalar loss with respect to solver inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverGradients {
    pub nodes: Vec<Point>,
    /// Per degree of angle of attack.
    pub aoa: f64,
    pub mach: f64,
}

#[derive(Default)]
struct GeometryBar {
    normals: Vec<[f64; 2]>,
    perimeters: Vec<f64>,
    areas: Vec<f64>,
}

impl Solver {
    /// Pull `cotangent` (one `(vx, vy, p)` row per node) back through the
    /// recorded solve.
    pub fn backward(
        &self,
        record: &ForwardRecord,
        cotangent: ArrayView2<f64>,
    ) -> Result<SolverGradients, SolverError> {
        if cotangent.nrows() != self.num_nodes() || cotangent.ncols() != 3 {
            return Err(SolverError::ShapeMismatch {
                expected: self.num_nodes(),
                got: cotangent.nrows(),
            });
        }
        if record.states.iter().any(|s| s.len() != self.num_cells()) {
            return Err(SolverError::RecordMismatch("cell count differs".into()));
        }
        let geom = self.geometry(&record.nodes)?;
        let spec = record.spec;
        let gamma = spec.gamma;
        let ghost = freestream_state(&spec);
        let cells = self.num_cells();
        let mut gbar = GeometryBar {
            normals: vec![[0.0; 2]; self.faces.len()],
            perimeters: vec![0.0; cells],
            areas: vec![0.0; cells],
        };
        let last = record.states.last().expect("at least the initial state");
        let mut ubar = self.nodes_from_cells_vjp(&geom, last, gamma, cotangent, &mut gbar.areas);
        let mut ghost_bar: Cons = [0.0; 4];

        let mut res = vec![[0.0; 4]; cells];
        let mut rbar = vec![[0.0; 4]; cells];
        for k in (0..record.iterations()).rev() {
            let state = &record.states[k];
            self.residual_into(&geom, state, &spec, k, &mut res)?;
            let mut next = ubar.clone();
            for c in 0..cells {
                let u = &state[c];
                let lam = flux::cell_speed(u, gamma);
                let tau = record.cfl / (lam * geom.perimeters[c]);
                let mut tau_bar = 0.0;
                for i in 0..4 {
                    rbar[c][i] = -tau * ubar[c][i];
                    tau_bar -= ubar[c][i] * res[c][i];
                }
                let lam_bar = -tau_bar * tau / lam;
                gbar.perimeters[c] -= tau_bar * tau / geom.perimeters[c];
                let us = flux::cell_speed_vjp(u, gamma, lam_bar);
                for i in 0..4 {
                    next[c][i] += us[i];
                }
            }
            for (f, face) in self.faces.iter().enumerate() {
                let nv = geom.normals[f];
                let ul = &state[face.left];
                let mut g = rbar[face.left];
                let (bl, nb) = match face.kind {
                    FaceKind::Interior(r) => {
                        for i in 0..4 {
                            g[i] -= rbar[r][i];
                        }
                        let (bl, br, nb) = flux::llf_flux_vjp(ul, &state[r], nv, gamma, &g);
                        for i in 0..4 {
                            next[r][i] += br[i];
                        }
                        (bl, nb)
                    }
                    FaceKind::Farfield => {
                        let (bl, bg, nb) = flux::llf_flux_vjp(ul, &ghost, nv, gamma, &g);
                        for i in 0..4 {
                            ghost_bar[i] += bg[i];
                        }
                        (bl, nb)
                    }
                    FaceKind::Wall => flux::wall_flux_vjp(ul, nv, gamma, &g),
                };
                for i in 0..4 {
                    next[face.left][i] += bl[i];
                }
                gbar.normals[f][0] += nb[0];
                gbar.normals[f][1] += nb[1];
            }
            ubar = next;
        }

        // initial state is the freestream everywhere
        for u in &ubar {
            for i in 0..4 {
                ghost_bar[i] += u[i];
            }
        }
        let (aoa, mach) = freestream_vjp(&spec, &ghost_bar);
        let nodes = self.geometry_vjp(&record.nodes, &gbar);
        Ok(SolverGradients { nodes, aoa, mach })
    }

    fn nodes_from_cells_vjp(
        &self,
        geom: &Geometry,
        state: &[Cons],
        gamma: f64,
        cot: ArrayView2<f64>,
        area_bar: &mut [f64],
    ) -> Vec<Cons> {
        let prims: Vec<[f64; 4]> = state.iter().map(|u| flux::primitive(u, gamma)).collect();
        let mut wbar = vec![[0.0; 4]; state.len()];
        for (n, cells) in self.node_cells.iter().enumerate() {
            let weight: f64 = cells.iter().map(|&c| geom.areas[c]).sum();
            if weight <= 0.0 {
                continue;
            }
            let mut avg = [0.0; 3];
            for &c in cells {
                for i in 0..3 {
                    avg[i] += geom.areas[c] * prims[c][i + 1];
                }
            }
            for v in &mut avg {
                *v /= weight;
            }
            for &c in cells {
                for i in 0..3 {
                    let o = cot[[n, i]];
                    wbar[c][i + 1] += geom.areas[c] * o / weight;
                    area_bar[c] += o * (prims[c][i + 1] - avg[i]) / weight;
                }
            }
        }
        state
            .iter()
            .zip(&wbar)
            .map(|(u, wb)| flux::primitive_vjp(u, gamma, wb))
            .collect()
    }

    fn geometry_vjp(&self, nodes: &[Point], gbar: &GeometryBar) -> Vec<Point> {
        let mut xbar = vec![[0.0; 2]; nodes.len()];
        for (f, face) in self.faces.iter().enumerate() {
            // N = (y_b - y_a, -(x_b - x_a))
            let nb = gbar.normals[f];
            xbar[face.a][0] += nb[1];
            xbar[face.b][0] -= nb[1];
            xbar[face.b][1] += nb[0];
            xbar[face.a][1] -= nb[0];
        }
        for (c, tri) in self.triangles.iter().enumerate() {
            let pb = gbar.perimeters[c];
            let ab = gbar.areas[c];
            for s in 0..3 {
                let (i, j, prev) = (tri[s], tri[(s + 1) % 3], tri[(s + 2) % 3]);
                let (p, q) = (nodes[i], nodes[j]);
                let len = (q[0] - p[0]).hypot(q[1] - p[1]);
                let d = [(q[0] - p[0]) / len, (q[1] - p[1]) / len];
                xbar[j][0] += pb * d[0];
                xbar[j][1] += pb * d[1];
                xbar[i][0] -= pb * d[0];
                xbar[i][1] -= pb * d[1];
                // dA/dx_i = (y_next - y_prev) / 2, dA/dy_i = (x_prev - x_next) / 2
                let r = nodes[prev];
                xbar[i][0] += 0.5 * ab * (q[1] - r[1]);
                xbar[i][1] += 0.5 * ab * (r[0] - q[0]);
            }
        }
        xbar
    }
}
