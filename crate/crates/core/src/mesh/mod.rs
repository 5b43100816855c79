//! Unstructured 2-D meshes: storage, SU2 I/O, triangulation and graph
//! extraction, plus the geometric queries the rest of the crate needs.

mod geometry;
mod su2;

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use geometry::{element_orientations, knn, orientation, signed_distance, Neighbor};
pub use su2::{parse_su2, write_su2};

pub type Point = [f64; 2];

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing required section {0}")]
    MissingSection(&'static str),
    #[error("element {element}: node index {index} out of range (N = {num_nodes})")]
    NodeOutOfRange {
        element: usize,
        index: usize,
        num_nodes: usize,
    },
    #[error("element {0} repeats a vertex")]
    DegenerateElement(usize),
    #[error("element {0} is not a triangle; triangulate the mesh first")]
    NotTriangular(usize),
    #[error("unknown marker tag `{0}`")]
    UnknownMarker(String),
    #[error("k = {k} exceeds the {available} reference points")]
    TooFewPoints { k: usize, available: usize },
}

/// A single mesh element as stored in the file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Element {
    Triangle([usize; 3]),
    Quad([usize; 4]),
}

impl Element {
    pub fn vertices(&self) -> &[usize] {
        match self {
            Element::Triangle(v) => v,
            Element::Quad(v) => v,
        }
    }

    /// SU2 VTK type code.
    pub fn type_code(&self) -> u32 {
        match self {
            Element::Triangle(_) => 5,
            Element::Quad(_) => 9,
        }
    }
}

/// A named boundary made of line segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Marker {
    pub tag: String,
    pub segments: Vec<[usize; 2]>,
}

impl Marker {
    pub fn new(tag: impl Into<String>, segments: Vec<[usize; 2]>) -> Self {
        Self {
            tag: tag.into(),
            segments,
        }
    }

    /// Distinct node indices touched by the marker, ascending.
    pub fn nodes(&self) -> BTreeSet<usize> {
        self.segments.iter().flatten().copied().collect()
    }
}

/// Nodes, elements and tagged boundary segments of a 2-D mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<Point>,
    pub elements: Vec<Element>,
    pub markers: Vec<Marker>,
}

impl Mesh {
    /// Build a mesh and check the index invariants.
    pub fn new(nodes: Vec<Point>, elements: Vec<Element>, markers: Vec<Marker>) -> Result<Self, MeshError> {
        let mesh = Self {
            nodes,
            elements,
            markers,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        let n = self.nodes.len();
        for (e, el) in self.elements.iter().enumerate() {
            let v = el.vertices();
            if let Some(&index) = v.iter().find(|&&i| i >= n) {
                return Err(MeshError::NodeOutOfRange {
                    element: e,
                    index,
                    num_nodes: n,
                });
            }
            for a in 0..v.len() {
                for b in a + 1..v.len() {
                    if v[a] == v[b] {
                        return Err(MeshError::DegenerateElement(e));
                    }
                }
            }
        }
        for m in &self.markers {
            for (s, seg) in m.segments.iter().enumerate() {
                if let Some(&index) = seg.iter().find(|&&i| i >= n) {
                    return Err(MeshError::NodeOutOfRange {
                        element: s,
                        index,
                        num_nodes: n,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn marker(&self, tag: &str) -> Result<&Marker, MeshError> {
        self.markers
            .iter()
            .find(|m| m.tag == tag)
            .ok_or_else(|| MeshError::UnknownMarker(tag.to_string()))
    }

    pub fn is_triangular(&self) -> bool {
        self.elements.iter().all(|e| matches!(e, Element::Triangle(_)))
    }

    /// Element list as triangles; fails on the first quadrilateral.
    pub fn triangles(&self) -> Result<Vec<[usize; 3]>, MeshError> {
        self.elements
            .iter()
            .enumerate()
            .map(|(i, e)| match e {
                Element::Triangle(t) => Ok(*t),
                Element::Quad(_) => Err(MeshError::NotTriangular(i)),
            })
            .collect()
    }

    /// Copy of this mesh with node coordinates replaced.
    pub fn with_nodes(&self, nodes: Vec<Point>) -> Mesh {
        assert_eq!(nodes.len(), self.nodes.len(), "node count must not change");
        Mesh {
            nodes,
            elements: self.elements.clone(),
            markers: self.markers.clone(),
        }
    }

    /// SHA-256 of the canonical SU2 text, hex encoded.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(write_su2(self).as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Split every quad `(a, b, c, d)` into `(a, b, c)` and `(a, c, d)`.
pub fn triangulate(mesh: &Mesh) -> Result<Mesh, MeshError> {
    let mut elements = Vec::with_capacity(mesh.elements.len() * 2);
    for (i, el) in mesh.elements.iter().enumerate() {
        match *el {
            Element::Triangle(t) => elements.push(Element::Triangle(t)),
            Element::Quad([a, b, c, d]) => {
                let v = [a, b, c, d];
                if (0..4).any(|x| (x + 1..4).any(|y| v[x] == v[y])) {
                    return Err(MeshError::DegenerateElement(i));
                }
                elements.push(Element::Triangle([a, b, c]));
                elements.push(Element::Triangle([a, c, d]));
            }
        }
    }
    Ok(Mesh {
        nodes: mesh.nodes.clone(),
        elements,
        markers: mesh.markers.clone(),
    })
}

/// Undirected node graph of a mesh.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    pub num_nodes: usize,
    /// Sorted `(i, j)` pairs with `i < j`.
    pub edges: Vec<(usize, usize)>,
}

impl Graph {
    /// Neighbor lists, each sorted ascending.
    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }
}

/// Edges are the deduplicated sides of every triangle.
pub fn build_graph(mesh: &Mesh) -> Result<Graph, MeshError> {
    let tris = mesh.triangles()?;
    let mut set = BTreeSet::new();
    for [a, b, c] in tris {
        for (p, q) in [(a, b), (b, c), (c, a)] {
            set.insert((p.min(q), p.max(q)));
        }
    }
    Ok(Graph {
        num_nodes: mesh.num_nodes(),
        edges: set.into_iter().collect(),
    })
}
