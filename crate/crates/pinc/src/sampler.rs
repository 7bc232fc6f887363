//! Point clouds, normalization, nearest neighbors, and batch sampling.
//!
//! Input clouds are shifted to a zero centroid and scaled to unit maximum
//! norm; the affine record allows mapping extracted meshes back. Collocation
//! points come in two flavors: local points, obtained by perturbing each
//! surface-batch point with a Gaussian whose std is that point's distance to
//! its 50th nearest neighbor, and global points drawn uniformly from the
//! enclosing box.
//!
//! Nearest-neighbor queries run on a uniform spatial grid with an expanding
//! ring search. The search is exact — after finishing ring `r`, any unseen
//! point is at least `r·cell` away — so the fast path agrees with the O(N²)
//! oracle to the bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

pub const NN_K: usize = 50;

/// Translation + uniform scale mapping normalized coordinates back to the
/// original frame: `original = normalized * scale + center`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Affine {
    pub fn identity() -> Self {
        Affine {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn to_original(&self, x: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| x[i] * self.scale + self.center[i])
    }

    pub fn to_normalized(&self, x: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| (x[i] - self.center[i]) / self.scale)
    }
}

/// A normalized cloud with optional unit normals and per-point 50th-NN
/// distances (empty until [`precompute_nn50`] runs).
#[derive(Clone, Debug)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub normals: Option<Vec<[f64; 3]>>,
    pub nn50: Vec<f64>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Center at zero, scale to unit maximum norm. Returns the cloud and the
/// affine record that undoes the transform. Normal directions are unaffected
/// by translation and uniform scaling; they are re-unitized defensively.
pub fn normalize(
    raw_points: Vec<[f64; 3]>,
    normals: Option<Vec<[f64; 3]>>,
) -> Result<(PointCloud, Affine)> {
    let n = raw_points.len();
    if n == 0 {
        return Err(Error::Input("cannot normalize an empty point cloud".into()));
    }
    if let Some(ns) = &normals {
        if ns.len() != n {
            return Err(Error::Input(format!(
                "normal count {} does not match point count {n}",
                ns.len()
            )));
        }
    }
    let mut center = [0.0; 3];
    for p in &raw_points {
        for i in 0..3 {
            center[i] += p[i];
        }
    }
    for c in center.iter_mut() {
        *c /= n as f64;
    }
    let mut max_norm: f64 = 0.0;
    for p in &raw_points {
        let mut s = 0.0;
        for i in 0..3 {
            let d = p[i] - center[i];
            s += d * d;
        }
        max_norm = max_norm.max(s.sqrt());
    }
    // degenerate single-point or coincident clouds keep a unit scale guard
    let scale = max_norm.max(1e-9);
    let points = raw_points
        .iter()
        .map(|p| std::array::from_fn(|i| (p[i] - center[i]) / scale))
        .collect();
    let normals = match normals {
        None => None,
        Some(ns) => {
            let mut unit = Vec::with_capacity(ns.len());
            for (i, v) in ns.iter().enumerate() {
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if len < 1e-12 {
                    return Err(Error::Input(format!("zero-length normal at point {i}")));
                }
                unit.push(std::array::from_fn(|k| v[k] / len));
            }
            Some(unit)
        }
    };
    Ok((
        PointCloud {
            points,
            normals,
            nn50: Vec::new(),
        },
        Affine { center, scale },
    ))
}

// ---------------------------------------------------------------------------
// Exact nearest neighbors on a uniform grid
// ---------------------------------------------------------------------------

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub struct SpatialGrid {
    points: Vec<[f64; 3]>,
    origin: [f64; 3],
    cell: f64,
    dims: [i64; 3],
    starts: Vec<u32>,
    order: Vec<u32>,
}

impl SpatialGrid {
    pub fn build(points: &[[f64; 3]]) -> Self {
        assert!(!points.is_empty(), "grid needs at least one point");
        let n = points.len();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let extent: [f64; 3] = std::array::from_fn(|i| (hi[i] - lo[i]).max(1e-12));
        let max_extent = extent[0].max(extent[1]).max(extent[2]);
        // cells sized off the largest extent so degenerate (flat or
        // collinear) clouds cannot produce sliver cells, which would make the
        // ring-search termination bound useless
        let per_axis = ((2.0 * n as f64).cbrt().ceil() as i64).clamp(1, 128);
        let cell = (max_extent / per_axis as f64).max(1e-12);
        let dims: [i64; 3] = std::array::from_fn(|i| (extent[i] / cell).ceil() as i64 + 1);
        let ncells = (dims[0] * dims[1] * dims[2]) as usize;
        let cell_of = |p: &[f64; 3]| -> usize {
            let mut idx = 0i64;
            for i in 0..3 {
                let c = (((p[i] - lo[i]) / cell) as i64).clamp(0, dims[i] - 1);
                idx = idx * dims[i] + c;
            }
            idx as usize
        };
        let mut counts = vec![0u32; ncells + 1];
        for p in points {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut order = vec![0u32; n];
        let mut cursor = counts.clone();
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p);
            order[cursor[c] as usize] = i as u32;
            cursor[c] += 1;
        }
        SpatialGrid {
            points: points.to_vec(),
            origin: lo,
            cell,
            dims,
            starts: counts,
            order,
        }
    }

    #[inline]
    fn cell_coord(&self, p: &[f64; 3]) -> [i64; 3] {
        std::array::from_fn(|i| ((p[i] - self.origin[i]) / self.cell).floor() as i64)
    }

    fn scan_cell(&self, c: [i64; 3], mut visit: impl FnMut(u32, &[f64; 3])) {
        for i in 0..3 {
            if c[i] < 0 || c[i] >= self.dims[i] {
                return;
            }
        }
        let idx = ((c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]) as usize;
        let (a, b) = (self.starts[idx] as usize, self.starts[idx + 1] as usize);
        for &pi in &self.order[a..b] {
            visit(pi, &self.points[pi as usize]);
        }
    }

    /// Visit every in-range grid cell at Chebyshev ring `r` around `c0`,
    /// walking only the six faces of the shell (clamped against the grid).
    fn scan_ring(&self, c0: [i64; 3], r: i64, visit: &mut impl FnMut(u32, &[f64; 3])) {
        if r == 0 {
            self.scan_cell(c0, &mut *visit);
            return;
        }
        let lo: [i64; 3] = std::array::from_fn(|i| (c0[i] - r).max(0));
        let hi: [i64; 3] = std::array::from_fn(|i| (c0[i] + r).min(self.dims[i] - 1));
        // x faces span full y/z
        for &cx in &[c0[0] - r, c0[0] + r] {
            if cx < 0 || cx >= self.dims[0] {
                continue;
            }
            for cy in lo[1]..=hi[1] {
                for cz in lo[2]..=hi[2] {
                    self.scan_cell([cx, cy, cz], &mut *visit);
                }
            }
        }
        // y faces exclude the x rims already visited
        let xlo = (c0[0] - r + 1).max(0);
        let xhi = (c0[0] + r - 1).min(self.dims[0] - 1);
        for &cy in &[c0[1] - r, c0[1] + r] {
            if cy < 0 || cy >= self.dims[1] {
                continue;
            }
            for cx in xlo..=xhi {
                for cz in lo[2]..=hi[2] {
                    self.scan_cell([cx, cy, cz], &mut *visit);
                }
            }
        }
        // z faces exclude both rims
        let ylo = (c0[1] - r + 1).max(0);
        let yhi = (c0[1] + r - 1).min(self.dims[1] - 1);
        for &cz in &[c0[2] - r, c0[2] + r] {
            if cz < 0 || cz >= self.dims[2] {
                continue;
            }
            for cx in xlo..=xhi {
                for cy in ylo..=yhi {
                    self.scan_cell([cx, cy, cz], &mut *visit);
                }
            }
        }
    }

    fn max_ring(&self, c0: [i64; 3]) -> i64 {
        let mut m = 0i64;
        for i in 0..3 {
            m = m.max((c0[i]).abs().max((self.dims[i] - 1 - c0[i]).abs()));
        }
        m + 1
    }

    /// First ring that intersects the grid box at all (queries far outside
    /// the cloud would otherwise walk millions of empty rings).
    fn first_ring(&self, c0: [i64; 3]) -> i64 {
        let mut r = 0i64;
        for i in 0..3 {
            r = r.max(-c0[i]).max(c0[i] - (self.dims[i] - 1));
        }
        r.max(0)
    }

    /// Index and squared distance of the nearest point to `q`.
    pub fn nearest(&self, q: &[f64; 3]) -> (u32, f64) {
        let c0 = self.cell_coord(q);
        let mut best = (u32::MAX, f64::INFINITY);
        let max_r = self.max_ring(c0);
        for r in self.first_ring(c0)..=max_r {
            self.scan_ring(c0, r, &mut |pi, p| {
                let d = dist2(q, p);
                if d < best.1 {
                    best = (pi, d);
                }
            });
            // once rings 0..=r are done, any unseen point sits at least
            // r*cell away
            if best.1.is_finite() {
                let bound = r as f64 * self.cell;
                if best.1 <= bound * bound {
                    break;
                }
            }
        }
        best
    }

    /// Distance to the k-th nearest neighbor of `q` (1-based k), optionally
    /// excluding one index (the query point itself). k is clamped to the
    /// number of available points.
    pub fn kth_nearest_dist(&self, q: &[f64; 3], k: usize, exclude: Option<u32>) -> f64 {
        let avail = self.points.len() - usize::from(exclude.is_some());
        if avail == 0 {
            return 0.0;
        }
        let k = k.clamp(1, avail);
        // bounded max-heap of the k smallest squared distances
        let mut heap: Vec<f64> = Vec::with_capacity(k);
        let c0 = self.cell_coord(q);
        let max_r = self.max_ring(c0);
        for r in self.first_ring(c0)..=max_r {
            self.scan_ring(c0, r, &mut |pi, p| {
                if Some(pi) == exclude {
                    return;
                }
                let d = dist2(q, p);
                if heap.len() < k {
                    heap.push(d);
                    heap_sift_up(&mut heap);
                } else if d < heap[0] {
                    heap[0] = d;
                    heap_sift_down(&mut heap);
                }
            });
            if heap.len() == k {
                let bound = r as f64 * self.cell;
                if heap[0] <= bound * bound {
                    break;
                }
            }
        }
        heap[0].sqrt()
    }
}

fn heap_sift_up(h: &mut [f64]) {
    let mut i = h.len() - 1;
    while i > 0 {
        let parent = (i - 1) / 2;
        if h[parent] >= h[i] {
            break;
        }
        h.swap(parent, i);
        i = parent;
    }
}

fn heap_sift_down(h: &mut [f64]) {
    let n = h.len();
    let mut i = 0;
    loop {
        let (l, r) = (2 * i + 1, 2 * i + 2);
        let mut largest = i;
        if l < n && h[l] > h[largest] {
            largest = l;
        }
        if r < n && h[r] > h[largest] {
            largest = r;
        }
        if largest == i {
            break;
        }
        h.swap(i, largest);
        i = largest;
    }
}

/// Per-point distance to the 50th nearest neighbor (k clamps to n−1 for
/// small clouds; a single-point cloud gets zero). Exact.
pub fn precompute_nn50(cloud: &mut PointCloud) {
    let n = cloud.points.len();
    if n <= 1 {
        cloud.nn50 = vec![0.0; n];
        return;
    }
    let k = NN_K.min(n - 1);
    let grid = SpatialGrid::build(&cloud.points);
    use rayon::prelude::*;
    cloud.nn50 = cloud
        .points
        .par_iter()
        .enumerate()
        .map(|(i, p)| grid.kth_nearest_dist(p, k, Some(i as u32)))
        .collect();
}

/// Brute-force oracle for the k-th neighbor distance, used by tests.
pub fn nn_k_brute(points: &[[f64; 3]], i: usize, k: usize) -> f64 {
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, p)| dist2(&points[i], p))
        .collect();
    if d.is_empty() {
        return 0.0;
    }
    let k = k.clamp(1, d.len());
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d[k - 1].sqrt()
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

/// Volumetric sample points for one iteration.
#[derive(Clone, Debug)]
pub struct CollocationBatch {
    pub local: Vec<[f64; 3]>,
    pub global_pts: Vec<[f64; 3]>,
}

impl CollocationBatch {
    pub fn all_points(&self) -> Vec<[f64; 3]> {
        let mut v = Vec::with_capacity(self.local.len() + self.global_pts.len());
        v.extend_from_slice(&self.local);
        v.extend_from_slice(&self.global_pts);
        v
    }
}

/// Uniform draw (with replacement) of surface-batch indices. The batch size
/// clamps to the cloud size.
pub fn sample_surface_batch(cloud: &PointCloud, batch: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let n = cloud.len();
    let count = batch.min(n);
    (0..count).map(|_| rng.gen_range(0..n) as u32).collect()
}

/// Local points perturb each surface-batch point with its own 50th-NN std;
/// global points are uniform in the enclosing box [−eta, eta]³.
pub fn sample_collocation(
    cloud: &PointCloud,
    surface_batch: &[u32],
    n_global: usize,
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CollocationBatch> {
    if cloud.nn50.len() != cloud.len() {
        return Err(Error::Usage(
            "sample_collocation requires precompute_nn50 to have run".into(),
        ));
    }
    let mut local = Vec::with_capacity(surface_batch.len());
    for &idx in surface_batch {
        let p = cloud.points[idx as usize];
        let sigma = cloud.nn50[idx as usize];
        let d: [f64; 3] = std::array::from_fn(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        });
        local.push([p[0] + d[0], p[1] + d[1], p[2] + d[2]]);
    }
    let global_pts = (0..n_global)
        .map(|_| std::array::from_fn(|_| rng.gen_range(-eta..eta)))
        .collect();
    Ok(CollocationBatch { local, global_pts })
}

/// Additive Gaussian displacement of every point; normals are kept and the
/// neighbor distances are recomputed when they were present.
pub fn add_noise(cloud: &PointCloud, sigma: f64, rng: &mut ChaCha8Rng) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .map(|p| {
            std::array::from_fn(|i| {
                let z: f64 = StandardNormal.sample(rng);
                p[i] + sigma * z
            })
        })
        .collect();
    let mut out = PointCloud {
        points,
        normals: cloud.normals.clone(),
        nn50: Vec::new(),
    };
    if cloud.nn50.len() == cloud.len() {
        precompute_nn50(&mut out);
    }
    out
}
