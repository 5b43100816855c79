//! Structured O-grids around NACA four-digit sections, and rectangular
//! farfield-only grids.
//!
//! These produce the desk-scale meshes shipped under `meshes/`. Nodes are
//! numbered `layer * surface_points + i`, with layer 0 on the airfoil and the
//! last layer on the farfield circle.

use std::f64::consts::PI;

use crate::mesh::{Element, Marker, Mesh, Point};

/// NACA four-digit section, e.g. `Naca4::parse("0012")`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Naca4 {
    pub max_camber: f64,
    pub camber_pos: f64,
    pub thickness: f64,
}

impl Naca4 {
    pub fn parse(digits: &str) -> Option<Self> {
        let d: Vec<u32> = digits.chars().map(|c| c.to_digit(10)).collect::<Option<_>>()?;
        if d.len() != 4 {
            return None;
        }
        Some(Self {
            max_camber: d[0] as f64 / 100.0,
            camber_pos: d[1] as f64 / 10.0,
            thickness: (d[2] * 10 + d[3]) as f64 / 100.0,
        })
    }

    /// Half thickness with a closed trailing edge.
    fn half_thickness(&self, x: f64) -> f64 {
        5.0 * self.thickness
            * (0.2969 * x.sqrt() - 0.1260 * x - 0.3516 * x * x + 0.2843 * x.powi(3) - 0.1036 * x.powi(4))
    }

    fn camber(&self, x: f64) -> (f64, f64) {
        let (m, p) = (self.max_camber, self.camber_pos);
        if m == 0.0 || p == 0.0 {
            return (0.0, 0.0);
        }
        if x < p {
            (m / (p * p) * (2.0 * p * x - x * x), 2.0 * m / (p * p) * (p - x))
        } else {
            (
                m / ((1.0 - p) * (1.0 - p)) * (1.0 - 2.0 * p + 2.0 * p * x - x * x),
                2.0 * m / ((1.0 - p) * (1.0 - p)) * (p - x),
            )
        }
    }

    /// Surface point at chord station `x`, upper or lower side.
    pub fn surface(&self, x: f64, upper: bool) -> Point {
        let yt = self.half_thickness(x);
        let (yc, slope) = self.camber(x);
        let th = slope.atan();
        let s = if upper { 1.0 } else { -1.0 };
        [x - s * yt * th.sin(), yc + s * yt * th.cos()]
    }
}

/// How O-grid cells are emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellStyle {
    Quads,
    /// Triangles whose diagonals mirror across the chord line, so a
    /// symmetric section yields a mirror-symmetric mesh.
    SymmetricTriangles,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OGrid {
    pub section: Naca4,
    /// Points around the airfoil; must be even.
    pub surface_points: usize,
    /// Node rings including airfoil and farfield; at least 2.
    pub layers: usize,
    pub farfield_radius: f64,
    /// Ratio between consecutive radial spacings.
    pub stretch: f64,
    pub cells: CellStyle,
}

impl OGrid {
    pub fn build(&self) -> Mesh {
        let ns = self.surface_points;
        let nl = self.layers;
        assert!(ns >= 4 && ns % 2 == 0, "surface_points must be even and >= 4");
        assert!(nl >= 2, "need at least two layers");
        let center = [0.5, 0.0];
        let blend: Vec<f64> = (0..nl)
            .map(|j| {
                if (self.stretch - 1.0).abs() < 1e-12 {
                    j as f64 / (nl - 1) as f64
                } else {
                    (self.stretch.powi(j as i32) - 1.0) / (self.stretch.powi(nl as i32 - 1) - 1.0)
                }
            })
            .collect();

        let mut nodes = Vec::with_capacity(ns * nl);
        for &t in &blend {
            for i in 0..ns {
                // angles taken from the upper-side index so mirrored nodes are bit-exact
                let upper = 2 * i <= ns;
                let sign = if upper { 1.0 } else { -1.0 };
                let phi = 2.0 * PI * i.min(ns - i) as f64 / ns as f64;
                let x = 0.5 * (1.0 + phi.cos());
                let mut s = if self.section.max_camber == 0.0 {
                    let u = self.section.surface(x, true);
                    [u[0], sign * u[1]]
                } else {
                    self.section.surface(x, upper)
                };
                let mut c = [
                    center[0] + self.farfield_radius * phi.cos(),
                    center[1] + sign * self.farfield_radius * phi.sin(),
                ];
                if i == 0 {
                    s = [1.0, 0.0];
                } else if 2 * i == ns {
                    s = [0.0, 0.0];
                    c[1] = 0.0;
                }
                nodes.push([(1.0 - t) * s[0] + t * c[0], (1.0 - t) * s[1] + t * c[1]]);
            }
        }

        let id = |i: usize, j: usize| j * ns + (i % ns);
        let mut elements = Vec::new();
        for j in 0..nl - 1 {
            for i in 0..ns {
                let a = id(i, j);
                let b = id(i, j + 1);
                let c = id(i + 1, j + 1);
                let d = id(i + 1, j);
                match self.cells {
                    CellStyle::Quads => elements.push(Element::Quad([a, b, c, d])),
                    CellStyle::SymmetricTriangles => {
                        if i < ns / 2 {
                            elements.push(Element::Triangle([a, b, c]));
                            elements.push(Element::Triangle([a, c, d]));
                        } else {
                            elements.push(Element::Triangle([a, b, d]));
                            elements.push(Element::Triangle([b, c, d]));
                        }
                    }
                }
            }
        }

        let ring = |j: usize| (0..ns).map(|i| [id(i, j), id(i + 1, j)]).collect();
        let markers = vec![
            Marker::new("airfoil", ring(0)),
            Marker::new("farfield", ring(nl - 1)),
        ];
        Mesh::new(nodes, elements, markers).expect("generated mesh is valid")
    }
}

/// Index of the mirror image of node `n` across the chord line.
pub fn mirror_node(grid: &OGrid, n: usize) -> usize {
    let ns = grid.surface_points;
    let (j, i) = (n / ns, n % ns);
    j * ns + (ns - i) % ns
}

/// `nx` by `ny` cells over `[x0, x0 + w] × [y0, y0 + h]`, each split into two
/// triangles, with the whole outer boundary tagged `tag`.
pub fn rectangle(nx: usize, ny: usize, origin: Point, w: f64, h: f64, tag: &str) -> Mesh {
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            nodes.push([
                origin[0] + w * i as f64 / nx as f64,
                origin[1] + h * j as f64 / ny as f64,
            ]);
        }
    }
    let mut elements = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            elements.push(Element::Triangle([a, b, c]));
            elements.push(Element::Triangle([a, c, d]));
        }
    }
    let mut segs = Vec::new();
    for i in 0..nx {
        segs.push([id(i, 0), id(i + 1, 0)]);
        segs.push([id(i + 1, ny), id(i, ny)]);
    }
    for j in 0..ny {
        segs.push([id(nx, j), id(nx, j + 1)]);
        segs.push([id(0, j + 1), id(0, j)]);
    }
    Mesh::new(nodes, elements, vec![Marker::new(tag, segs)]).expect("generated mesh is valid")
}

/// Shipped fine mesh: 48 × 13 rings clustered at the wall, mirror-symmetric
/// triangles.
pub fn desk_fine(section: Naca4) -> OGrid {
    OGrid {
        section,
        surface_points: 48,
        layers: 13,
        farfield_radius: 8.0,
        stretch: 1.5,
        cells: CellStyle::SymmetricTriangles,
    }
}

/// Shipped coarse mesh: 16 × 5 rings of quads.
pub fn desk_coarse(section: Naca4) -> OGrid {
    OGrid {
        section,
        surface_points: 16,
        layers: 5,
        farfield_radius: 8.0,
        stretch: 2.5,
        cells: CellStyle::Quads,
    }
}

/// Gradient-check sized grid: `surface_points × layers` nodes.
pub fn tiny(section: Naca4, surface_points: usize, layers: usize) -> OGrid {
    OGrid {
        section,
        surface_points,
        layers,
        farfield_radius: 4.0,
        stretch: 2.0,
        cells: CellStyle::Quads,
    }
}
