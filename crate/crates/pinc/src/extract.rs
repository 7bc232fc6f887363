//! Dense grid evaluation and marching-cubes surface extraction.
//!
//! The scalar head is sampled on a uniform cell-corner lattice over the
//! training box; the zero level set is triangulated with the classic
//! 256-case lookup and linear edge interpolation. Vertices are deduplicated
//! per grid edge, so closed level sets away from the boundary come out
//! watertight. Triangles are wound so their normals point toward decreasing
//! u — outward, under the interior-positive sign convention.

#[path = "extract_tables.rs"]
mod tables;

use std::collections::HashMap;

use rayon::prelude::*;
use tables::{CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE};

use crate::net::Params;
use crate::sampler::Affine;
use crate::{Error, Result};

/// Scalar samples on an n³ corner lattice over a cube.
#[derive(Clone, Debug)]
pub struct ScalarGrid {
    pub resolution: usize,
    pub lo: f64,
    pub hi: f64,
    /// Corner values indexed x-fastest: `ix + n*(iy + n*iz)`.
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn position(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        let n = self.resolution;
        let step = (self.hi - self.lo) / (n - 1) as f64;
        [
            self.lo + ix as f64 * step,
            self.lo + iy as f64 * step,
            self.lo + iz as f64 * step,
        ]
    }

    #[inline]
    pub fn value(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        let n = self.resolution;
        self.values[ix + n * (iy + n * iz)]
    }

    pub fn cell_size(&self) -> f64 {
        (self.hi - self.lo) / (self.resolution - 1) as f64
    }
}

/// Sample an arbitrary scalar field on the lattice, parallel over z-slabs.
pub fn evaluate_grid(
    field: impl Fn([f64; 3]) -> f64 + Sync,
    resolution: usize,
    bounds: (f64, f64),
) -> Result<ScalarGrid> {
    if resolution < 2 {
        return Err(Error::Config("grid resolution must be at least 2".into()));
    }
    let (lo, hi) = bounds;
    if !(hi > lo) {
        return Err(Error::Config("grid bounds must satisfy lo < hi".into()));
    }
    let n = resolution;
    let step = (hi - lo) / (n - 1) as f64;
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|iz| {
            let z = lo + iz as f64 * step;
            let mut slab = Vec::with_capacity(n * n);
            for iy in 0..n {
                let y = lo + iy as f64 * step;
                for ix in 0..n {
                    let x = lo + ix as f64 * step;
                    slab.push(field([x, y, z]));
                }
            }
            slab
        })
        .collect();
    Ok(ScalarGrid {
        resolution: n,
        lo,
        hi,
        values,
    })
}

/// Sample the network's scalar head on the lattice (batched evaluation).
pub fn evaluate_grid_net(
    params: &Params,
    resolution: usize,
    bounds: (f64, f64),
) -> Result<ScalarGrid> {
    if resolution < 2 {
        return Err(Error::Config("grid resolution must be at least 2".into()));
    }
    let (lo, hi) = bounds;
    let n = resolution;
    let step = (hi - lo) / (n - 1) as f64;
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|iz| {
            let z = lo + iz as f64 * step;
            let mut pts = Vec::with_capacity(n * n);
            for iy in 0..n {
                let y = lo + iy as f64 * step;
                for ix in 0..n {
                    pts.push([lo + ix as f64 * step, y, z]);
                }
            }
            let mut vals = Vec::with_capacity(pts.len());
            for chunk in pts.chunks(crate::net::CHUNK) {
                let (out, _) = crate::net::forward_chunk::<1>(params, chunk, false);
                vals.extend_from_slice(&out[..chunk.len()]);
            }
            vals
        })
        .collect();
    Ok(ScalarGrid {
        resolution: n,
        lo,
        hi,
        values,
    })
}

/// Indexed triangle mesh.
#[derive(Clone, Debug, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (a, b, c) = (
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        );
        let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let ac = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cx = [
            ab[1] * ac[2] - ab[2] * ac[1],
            ab[2] * ac[0] - ab[0] * ac[2],
            ab[0] * ac[1] - ab[1] * ac[0],
        ];
        0.5 * (cx[0] * cx[0] + cx[1] * cx[1] + cx[2] * cx[2]).sqrt()
    }
}

/// Classic marching cubes at the given iso value. Returns an empty mesh when
/// the iso value is never crossed.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> TriangleMesh {
    let n = grid.resolution;
    let step = grid.cell_size();
    let mut mesh = TriangleMesh::default();
    // vertex key: (corner lattice index, edge axis 0/1/2)
    let mut edge_vertex: HashMap<(u32, u8), u32> = HashMap::new();

    let corner_index = |ix: usize, iy: usize, iz: usize| -> u32 {
        (ix + n * (iy + n * iz)) as u32
    };

    for iz in 0..n - 1 {
        for iy in 0..n - 1 {
            for ix in 0..n - 1 {
                let mut vals = [0.0; 8];
                let mut idxs = [0u32; 8];
                for (c, off) in CORNER_OFFSETS.iter().enumerate() {
                    let (cx, cy, cz) = (ix + off[0], iy + off[1], iz + off[2]);
                    vals[c] = grid.value(cx, cy, cz);
                    idxs[c] = corner_index(cx, cy, cz);
                }
                let mut cube = 0usize;
                for (c, &v) in vals.iter().enumerate() {
                    if v < iso {
                        cube |= 1 << c;
                    }
                }
                let edges = EDGE_TABLE[cube];
                if edges == 0 {
                    continue;
                }
                let mut everts = [u32::MAX; 12];
                for (e, corners) in EDGE_CORNERS.iter().enumerate() {
                    if edges & (1 << e) == 0 {
                        continue;
                    }
                    let (a, b) = (corners[0], corners[1]);
                    // canonical key: lower corner index + axis of the edge
                    let ka = idxs[a].min(idxs[b]);
                    let axis = {
                        let oa = CORNER_OFFSETS[a];
                        let ob = CORNER_OFFSETS[b];
                        if oa[0] != ob[0] {
                            0u8
                        } else if oa[1] != ob[1] {
                            1
                        } else {
                            2
                        }
                    };
                    let key = (ka, axis);
                    let vid = *edge_vertex.entry(key).or_insert_with(|| {
                        let (va, vb) = (vals[a], vals[b]);
                        let t = if (vb - va).abs() < 1e-300 {
                            0.5
                        } else {
                            ((iso - va) / (vb - va)).clamp(0.0, 1.0)
                        };
                        let oa = CORNER_OFFSETS[a];
                        let ob = CORNER_OFFSETS[b];
                        let p = grid.position(ix + oa[0], iy + oa[1], iz + oa[2]);
                        let q: [f64; 3] = std::array::from_fn(|i| {
                            p[i] + t * (ob[i] as f64 - oa[i] as f64) * step
                        });
                        mesh.vertices.push(q);
                        (mesh.vertices.len() - 1) as u32
                    });
                    everts[e] = vid;
                }
                let row = &TRI_TABLE[cube];
                let mut i = 0;
                while row[i] >= 0 {
                    // winding flipped versus the table so normals point
                    // toward decreasing field values (outward when the
                    // interior is positive)
                    let (a, c, b) = (
                        everts[row[i] as usize],
                        everts[row[i + 1] as usize],
                        everts[row[i + 2] as usize],
                    );
                    // skip degenerate triangles from iso values landing
                    // exactly on corners
                    if a != b && b != c && a != c {
                        mesh.triangles.push([a, b, c]);
                    }
                    i += 3;
                }
            }
        }
    }
    // drop zero-area slivers
    let mut filtered = Vec::with_capacity(mesh.triangles.len());
    for t in 0..mesh.triangles.len() {
        if mesh.triangle_area(t) > 1e-12 {
            filtered.push(mesh.triangles[t]);
        }
    }
    mesh.triangles = filtered;
    mesh
}

/// Map mesh vertices back to the coordinates of the raw input cloud.
pub fn de_normalize(mesh: &TriangleMesh, affine: &Affine) -> TriangleMesh {
    TriangleMesh {
        vertices: mesh
            .vertices
            .iter()
            .map(|&v| affine.to_original(v))
            .collect(),
        triangles: mesh.triangles.clone(),
    }
}

/// Flip triangle winding (for the opposite sign convention).
pub fn flip_orientation(mesh: &mut TriangleMesh) {
    for t in mesh.triangles.iter_mut() {
        t.swap(1, 2);
    }
}
