//! Steady 2-D compressible Euler on triangles, differentiable end to end.
//!
//! First-order cell-centered finite volumes with a local Lax–Friedrichs flux,
//! slip walls on the airfoil and freestream ghost states on the farfield.
//! Pseudo-time marching uses a per-cell step `dt = CFL · A / ((|v| + a) · P)`
//! with `P` the cell perimeter. Nondimensionalization: `rho_inf = 1`,
//! `a_inf = 1`, so `p_inf = 1 / gamma`.
//!
//! [`Solver::solve_recorded`] keeps every iterate, and [`Solver::backward`]
//! sweeps them in reverse to produce exact gradients of the truncated
//! fixed-iteration map with respect to node coordinates, AoA and Mach.

mod adjoint;
pub mod flux;

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use thiserror::Error;

use crate::mesh::{Mesh, Point};
use flux::Cons;

pub use adjoint::SolverGradients;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("invalid freestream: {0}")]
    InvalidFreestream(String),
    #[error("mesh is not purely triangular (element {0})")]
    NotTriangular(usize),
    #[error("element {0} has non-positive area")]
    InvertedElement(usize),
    #[error("boundary edge ({0}, {1}) is not on any marker")]
    UnmarkedBoundary(usize, usize),
    #[error("marker `{0}` has no boundary role; alias it to airfoil or farfield")]
    UnknownBoundaryRole(String),
    #[error("nonphysical state in cell {cell} at iteration {iteration}")]
    Nonphysical { iteration: usize, cell: usize },
    #[error("max_iters must be at least 1")]
    ZeroIterations,
    #[error("forward record does not match: {0}")]
    RecordMismatch(String),
    #[error("expected {expected} rows, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
}

/// Freestream conditions. AoA in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreestreamSpec {
    pub aoa: f64,
    pub mach: f64,
    pub gamma: f64,
}

impl FreestreamSpec {
    pub fn new(aoa: f64, mach: f64) -> Result<Self, SolverError> {
        Self::with_gamma(aoa, mach, 1.4)
    }

    pub fn with_gamma(aoa: f64, mach: f64, gamma: f64) -> Result<Self, SolverError> {
        if !(mach > 0.0 && mach.is_finite()) {
            return Err(SolverError::InvalidFreestream(format!(
                "mach must be > 0, got {mach}"
            )));
        }
        if !(aoa > -90.0 && aoa < 90.0) {
            return Err(SolverError::InvalidFreestream(format!(
                "aoa must lie in (-90, 90) degrees, got {aoa}"
            )));
        }
        if !(gamma > 1.0) {
            return Err(SolverError::InvalidFreestream(format!(
                "gamma must be > 1, got {gamma}"
            )));
        }
        Ok(Self { aoa, mach, gamma })
    }

    pub fn velocity(&self) -> [f64; 2] {
        let a = self.aoa.to_radians();
        [self.mach * a.cos(), self.mach * a.sin()]
    }
}

/// Conservative freestream state: `rho = 1`, `p = 1 / gamma`.
pub fn freestream_state(spec: &FreestreamSpec) -> Cons {
    let [u, v] = spec.velocity();
    flux::conservative(&[1.0, u, v, 1.0 / spec.gamma], spec.gamma)
}

/// Cotangents `(d/d aoa_degrees, d/d mach)` of the freestream state.
fn freestream_vjp(spec: &FreestreamSpec, ub: &Cons) -> (f64, f64) {
    let a = spec.aoa.to_radians();
    let m = spec.mach;
    // rho = 1, rho u = M cos a, rho v = M sin a, E = p/(g-1) + M^2 / 2
    let d_mach = ub[1] * a.cos() + ub[2] * a.sin() + ub[3] * m;
    let d_rad = -ub[1] * m * a.sin() + ub[2] * m * a.cos();
    (d_rad * std::f64::consts::PI / 180.0, d_mach)
}

/// Per-cell conservative variables.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub cells: Vec<Cons>,
}

impl FlowState {
    pub fn uniform(cells: usize, u: Cons) -> Self {
        Self {
            cells: vec![u; cells],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryKind {
    Wall,
    Farfield,
}

/// Maps marker tags to boundary treatments.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryRoles(BTreeMap<String, BoundaryKind>);

impl Default for BoundaryRoles {
    fn default() -> Self {
        Self(BTreeMap::from([
            ("airfoil".to_string(), BoundaryKind::Wall),
            ("farfield".to_string(), BoundaryKind::Farfield),
        ]))
    }
}

impl BoundaryRoles {
    pub fn alias(mut self, tag: impl Into<String>, kind: BoundaryKind) -> Self {
        self.0.insert(tag.into(), kind);
        self
    }

    pub fn kind(&self, tag: &str) -> Option<BoundaryKind> {
        self.0.get(tag).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub max_iters: usize,
    /// Stop once the residual norm drops below this; 0 runs the full budget.
    pub residual_tol: f64,
    pub cfl: f64,
}

impl SolveOptions {
    /// Fixed budget, no early exit.
    pub fn fixed(max_iters: usize) -> Self {
        Self {
            max_iters,
            residual_tol: 0.0,
            cfl: 0.8,
        }
    }

    /// Settings for ground-truth solves.
    pub fn converged() -> Self {
        Self {
            max_iters: 20_000,
            residual_tol: 1e-8,
            cfl: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOutput {
    /// `(vx, vy, p)` per node.
    pub node_fields: Array2<f64>,
    pub iterations_run: usize,
    pub final_residual_norm: f64,
}

/// Everything the reverse pass needs from a forward solve.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub(crate) nodes: Vec<Point>,
    pub(crate) spec: FreestreamSpec,
    pub(crate) cfl: f64,
    /// Iterates `U^0 ..= U^n`.
    pub(crate) states: Vec<Vec<Cons>>,
}

impl ForwardRecord {
    pub fn iterations(&self) -> usize {
        self.states.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum FaceKind {
    Interior(usize),
    Wall,
    Farfield,
}

/// Edge `a -> b` follows the counter-clockwise winding of `left`, so
/// `(y_b - y_a, -(x_b - x_a))` points out of `left`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Face {
    pub a: usize,
    pub b: usize,
    pub left: usize,
    pub kind: FaceKind,
}

#[derive(Debug, Clone)]
pub(crate) struct Geometry {
    pub normals: Vec<[f64; 2]>,
    pub perimeters: Vec<f64>,
    pub areas: Vec<f64>,
}

/// One face's flux contribution, added to `left` and subtracted from `right`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceFlux {
    pub left: usize,
    pub right: Option<usize>,
    pub flux: Cons,
}

/// Mesh topology prepared for the solver. Independent of node coordinates,
/// so one instance serves every coordinate update of a coarse mesh.
#[derive(Debug, Clone)]
pub struct Solver {
    num_nodes: usize,
    pub(crate) triangles: Vec<[usize; 3]>,
    pub(crate) faces: Vec<Face>,
    pub(crate) node_cells: Vec<Vec<usize>>,
}

impl Solver {
    pub fn new(mesh: &Mesh) -> Result<Self, SolverError> {
        Self::with_roles(mesh, &BoundaryRoles::default())
    }

    pub fn with_roles(mesh: &Mesh, roles: &BoundaryRoles) -> Result<Self, SolverError> {
        let triangles = mesh.triangles().map_err(|_| {
            let bad = mesh
                .elements
                .iter()
                .position(|e| e.vertices().len() != 3)
                .unwrap_or(0);
            SolverError::NotTriangular(bad)
        })?;

        let mut boundary_kind: HashMap<(usize, usize), BoundaryKind> = HashMap::new();
        for m in &mesh.markers {
            let kind = roles.kind(&m.tag);
            for &[a, b] in &m.segments {
                match kind {
                    Some(k) => {
                        boundary_kind.insert((a.min(b), a.max(b)), k);
                    }
                    None => return Err(SolverError::UnknownBoundaryRole(m.tag.clone())),
                }
            }
        }

        // half-edges keyed by the undirected pair
        let mut owner: HashMap<(usize, usize), (usize, usize, usize)> = HashMap::new();
        let mut faces = Vec::new();
        for (c, &[i, j, k]) in triangles.iter().enumerate() {
            for (a, b) in [(i, j), (j, k), (k, i)] {
                let key = (a.min(b), a.max(b));
                match owner.remove(&key) {
                    Some((left, fa, fb)) => faces.push(Face {
                        a: fa,
                        b: fb,
                        left,
                        kind: FaceKind::Interior(c),
                    }),
                    None => {
                        owner.insert(key, (c, a, b));
                    }
                }
            }
        }
        let mut open: Vec<_> = owner.into_iter().collect();
        open.sort_unstable_by_key(|&(key, (left, _, _))| (left, key));
        for (key, (left, a, b)) in open {
            let kind = match boundary_kind.get(&key) {
                Some(BoundaryKind::Wall) => FaceKind::Wall,
                Some(BoundaryKind::Farfield) => FaceKind::Farfield,
                None => return Err(SolverError::UnmarkedBoundary(key.0, key.1)),
            };
            faces.push(Face { a, b, left, kind });
        }

        let mut node_cells = vec![Vec::new(); mesh.num_nodes()];
        for (c, t) in triangles.iter().enumerate() {
            for &v in t {
                node_cells[v].push(c);
            }
        }
        Ok(Self {
            num_nodes: mesh.num_nodes(),
            triangles,
            faces,
            node_cells,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_cells(&self) -> usize {
        self.triangles.len()
    }

    pub(crate) fn geometry(&self, nodes: &[Point]) -> Result<Geometry, SolverError> {
        if nodes.len() != self.num_nodes {
            return Err(SolverError::ShapeMismatch {
                expected: self.num_nodes,
                got: nodes.len(),
            });
        }
        let normals = self
            .faces
            .iter()
            .map(|f| {
                let (pa, pb) = (nodes[f.a], nodes[f.b]);
                [pb[1] - pa[1], -(pb[0] - pa[0])]
            })
            .collect();
        let mut perimeters = Vec::with_capacity(self.triangles.len());
        let mut areas = Vec::with_capacity(self.triangles.len());
        for (c, &[i, j, k]) in self.triangles.iter().enumerate() {
            let (p, q, r) = (nodes[i], nodes[j], nodes[k]);
            let area = 0.5 * crate::mesh::orientation(p, q, r);
            if !(area > 0.0) {
                return Err(SolverError::InvertedElement(c));
            }
            areas.push(area);
            perimeters.push(
                (q[0] - p[0]).hypot(q[1] - p[1])
                    + (r[0] - q[0]).hypot(r[1] - q[1])
                    + (p[0] - r[0]).hypot(p[1] - r[1]),
            );
        }
        Ok(Geometry {
            normals,
            perimeters,
            areas,
        })
    }

    fn check_state(state: &[Cons], gamma: f64, iteration: usize) -> Result<(), SolverError> {
        for (cell, u) in state.iter().enumerate() {
            let p = flux::pressure(u, gamma);
            if !(u[0] > 0.0 && p > 0.0) {
                return Err(SolverError::Nonphysical { iteration, cell });
            }
        }
        Ok(())
    }

    pub(crate) fn face_flux(
        &self,
        f: usize,
        normal: [f64; 2],
        state: &[Cons],
        ghost: &Cons,
        gamma: f64,
    ) -> Cons {
        let face = &self.faces[f];
        let ul = &state[face.left];
        match face.kind {
            FaceKind::Interior(r) => flux::llf_flux(ul, &state[r], normal, gamma),
            FaceKind::Farfield => flux::llf_flux(ul, ghost, normal, gamma),
            FaceKind::Wall => flux::wall_flux(ul, normal, gamma),
        }
    }

    /// Accumulate per-cell flux balances into `out`.
    pub(crate) fn residual_into(
        &self,
        geom: &Geometry,
        state: &[Cons],
        spec: &FreestreamSpec,
        iteration: usize,
        out: &mut [Cons],
    ) -> Result<(), SolverError> {
        Self::check_state(state, spec.gamma, iteration)?;
        let ghost = freestream_state(spec);
        out.iter_mut().for_each(|r| *r = [0.0; 4]);
        for (f, face) in self.faces.iter().enumerate() {
            let g = self.face_flux(f, geom.normals[f], state, &ghost, spec.gamma);
            let rl = &mut out[face.left];
            for i in 0..4 {
                rl[i] += g[i];
            }
            if let FaceKind::Interior(r) = face.kind {
                let rr = &mut out[r];
                for i in 0..4 {
                    rr[i] -= g[i];
                }
            }
        }
        Ok(())
    }

    /// Per-face flux contributions for `state` at `nodes`.
    pub fn face_fluxes(
        &self,
        nodes: &[Point],
        state: &FlowState,
        spec: &FreestreamSpec,
    ) -> Result<Vec<FaceFlux>, SolverError> {
        let geom = self.geometry(nodes)?;
        Self::check_state(&state.cells, spec.gamma, 0)?;
        let ghost = freestream_state(spec);
        Ok(self
            .faces
            .iter()
            .enumerate()
            .map(|(f, face)| FaceFlux {
                left: face.left,
                right: match face.kind {
                    FaceKind::Interior(r) => Some(r),
                    _ => None,
                },
                flux: self.face_flux(f, geom.normals[f], &state.cells, &ghost, spec.gamma),
            })
            .collect())
    }

    /// Flux balance of every cell.
    pub fn residual(
        &self,
        nodes: &[Point],
        state: &FlowState,
        spec: &FreestreamSpec,
    ) -> Result<Vec<Cons>, SolverError> {
        let geom = self.geometry(nodes)?;
        let mut out = vec![[0.0; 4]; self.num_cells()];
        self.residual_into(&geom, &state.cells, spec, 0, &mut out)?;
        Ok(out)
    }

    fn residual_norm(geom: &Geometry, res: &[Cons]) -> f64 {
        let sum: f64 = res
            .iter()
            .zip(&geom.areas)
            .map(|(r, a)| r.iter().map(|x| (x / a) * (x / a)).sum::<f64>())
            .sum();
        (sum / (4 * res.len().max(1)) as f64).sqrt()
    }

    /// Local pseudo-time factor `dt / A`.
    #[inline]
    pub(crate) fn step_factor(u: &Cons, perimeter: f64, gamma: f64, cfl: f64) -> f64 {
        cfl / (flux::cell_speed(u, gamma) * perimeter)
    }

    fn run(
        &self,
        nodes: &[Point],
        spec: &FreestreamSpec,
        opts: &SolveOptions,
        record: bool,
    ) -> Result<(SolverOutput, Option<ForwardRecord>), SolverError> {
        if opts.max_iters == 0 {
            return Err(SolverError::ZeroIterations);
        }
        let geom = self.geometry(nodes)?;
        let gamma = spec.gamma;
        let mut state = vec![freestream_state(spec); self.num_cells()];
        let mut res = vec![[0.0; 4]; self.num_cells()];
        let mut states = Vec::new();
        let mut iterations = 0;
        let norm = loop {
            self.residual_into(&geom, &state, spec, iterations, &mut res)?;
            let norm = Self::residual_norm(&geom, &res);
            if norm < opts.residual_tol || iterations == opts.max_iters {
                break norm;
            }
            if record {
                states.push(state.clone());
            }
            for (c, u) in state.iter_mut().enumerate() {
                let tau = Self::step_factor(u, geom.perimeters[c], gamma, opts.cfl);
                for i in 0..4 {
                    u[i] -= tau * res[c][i];
                }
            }
            iterations += 1;
        };
        Self::check_state(&state, gamma, iterations)?;
        let node_fields = self.nodes_from_cells(&geom, &state, gamma);
        let out = SolverOutput {
            node_fields,
            iterations_run: iterations,
            final_residual_norm: norm,
        };
        let rec = record.then(|| {
            states.push(state);
            ForwardRecord {
                nodes: nodes.to_vec(),
                spec: *spec,
                cfl: opts.cfl,
                states,
            }
        });
        Ok((out, rec))
    }

    pub fn solve(
        &self,
        nodes: &[Point],
        spec: &FreestreamSpec,
        opts: &SolveOptions,
    ) -> Result<SolverOutput, SolverError> {
        Ok(self.run(nodes, spec, opts, false)?.0)
    }

    /// Solve and keep the iterates for [`Solver::backward`].
    pub fn solve_recorded(
        &self,
        nodes: &[Point],
        spec: &FreestreamSpec,
        opts: &SolveOptions,
    ) -> Result<(SolverOutput, ForwardRecord), SolverError> {
        let (out, rec) = self.run(nodes, spec, opts, true)?;
        Ok((out, rec.expect("recording requested")))
    }

    pub(crate) fn nodes_from_cells(&self, geom: &Geometry, state: &[Cons], gamma: f64) -> Array2<f64> {
        let mut out = Array2::zeros((self.num_nodes, 3));
        for (n, cells) in self.node_cells.iter().enumerate() {
            let mut acc = [0.0; 3];
            let mut weight = 0.0;
            for &c in cells {
                let w = flux::primitive(&state[c], gamma);
                let a = geom.areas[c];
                acc[0] += a * w[1];
                acc[1] += a * w[2];
                acc[2] += a * w[3];
                weight += a;
            }
            if weight > 0.0 {
                for i in 0..3 {
                    out[[n, i]] = acc[i] / weight;
                }
            }
        }
        out
    }

    /// Area-weighted node averages of `(vx, vy, p)`.
    pub fn cells_to_nodes(
        &self,
        nodes: &[Point],
        state: &FlowState,
        gamma: f64,
    ) -> Result<Array2<f64>, SolverError> {
        let geom = self.geometry(nodes)?;
        Ok(self.nodes_from_cells(&geom, &state.cells, gamma))
    }
}

/// Convenience wrapper: default boundary roles, mesh coordinates.
pub fn solve(
    mesh: &Mesh,
    spec: &FreestreamSpec,
    max_iters: usize,
    residual_tol: f64,
) -> Result<SolverOutput, SolverError> {
    let opts = SolveOptions {
        max_iters,
        residual_tol,
        ..SolveOptions::fixed(max_iters)
    };
    Solver::new(mesh)?.solve(&mesh.nodes, spec, &opts)
}

/// Per-cell flux balance with default boundary roles.
pub fn euler_residual(
    mesh: &Mesh,
    state: &FlowState,
    spec: &FreestreamSpec,
) -> Result<Vec<Cons>, SolverError> {
    Solver::new(mesh)?.residual(&mesh.nodes, state, spec)
}

/// Area-weighted node averages with default boundary roles.
pub fn cells_to_nodes(mesh: &Mesh, state: &FlowState, gamma: f64) -> Result<Array2<f64>, SolverError> {
    Solver::new(mesh)?.cells_to_nodes(&mesh.nodes, state, gamma)
}
