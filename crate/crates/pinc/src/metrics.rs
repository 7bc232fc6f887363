//! Quantitative evaluation: Chamfer and Hausdorff distances, normal
//! consistency of the learned gradient field, scalar-field MSE between
//! checkpoints, and area-weighted surface sampling of meshes.
//!
//! Nearest-neighbor queries reuse the exact spatial grid, so the fast paths
//! agree with the O(N·M) brute-force definitions to the bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::extract::TriangleMesh;
use crate::net::Params;
use crate::sampler::{dist2, SpatialGrid};
use crate::{Error, Result};

/// One-sided and symmetric distances between two point sets. The symmetric
/// Hausdorff is the maximum of the one-sided values; `d_h_sum` keeps the
/// one-sided sum variant for table matching.
#[derive(Clone, Copy, Debug, Default)]
pub struct DistanceReport {
    pub d_c_one_sided_xy: f64,
    pub d_c_one_sided_yx: f64,
    pub d_c: f64,
    pub d_h_one_sided_xy: f64,
    pub d_h_one_sided_yx: f64,
    pub d_h: f64,
    pub d_h_sum: f64,
}

fn one_sided(x: &[[f64; 3]], grid_y: &SpatialGrid) -> (f64, f64) {
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for p in x {
        let (_, d2) = grid_y.nearest(p);
        let d = d2.sqrt();
        sum += d;
        max = max.max(d);
    }
    (sum / x.len() as f64, max)
}

/// Mean over X of the Euclidean distance to the nearest point of Y.
pub fn chamfer_one_sided(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Usage("chamfer: empty point set".into()));
    }
    let grid = SpatialGrid::build(y);
    Ok(one_sided(x, &grid).0)
}

/// Symmetric Chamfer distance (mean of the two one-sided values).
pub fn chamfer(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<f64> {
    Ok(distance_report(x, y)?.d_c)
}

/// Symmetric Hausdorff distance (max of the two one-sided maxima).
pub fn hausdorff(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<f64> {
    Ok(distance_report(x, y)?.d_h)
}

/// All distances in one pass (each side's grid built once).
pub fn distance_report(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<DistanceReport> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Usage("distance_report: empty point set".into()));
    }
    let gy = SpatialGrid::build(y);
    let gx = SpatialGrid::build(x);
    let (c_xy, h_xy) = one_sided(x, &gy);
    let (c_yx, h_yx) = one_sided(y, &gx);
    Ok(DistanceReport {
        d_c_one_sided_xy: c_xy,
        d_c_one_sided_yx: c_yx,
        d_c: 0.5 * (c_xy + c_yx),
        d_h_one_sided_xy: h_xy,
        d_h_one_sided_yx: h_yx,
        d_h: h_xy.max(h_yx),
        d_h_sum: h_xy + h_yx,
    })
}

/// Brute-force oracle for the full report, O(|X|·|Y|).
pub fn distance_report_brute(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<DistanceReport> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Usage("distance_report: empty point set".into()));
    }
    let side = |a: &[[f64; 3]], b: &[[f64; 3]]| -> (f64, f64) {
        let mut sum = 0.0;
        let mut max: f64 = 0.0;
        for p in a {
            let mut best = f64::INFINITY;
            for q in b {
                let d = dist2(p, q);
                if d < best {
                    best = d;
                }
            }
            let d = best.sqrt();
            sum += d;
            max = max.max(d);
        }
        (sum / a.len() as f64, max)
    };
    let (c_xy, h_xy) = side(x, y);
    let (c_yx, h_yx) = side(y, x);
    Ok(DistanceReport {
        d_c_one_sided_xy: c_xy,
        d_c_one_sided_yx: c_yx,
        d_c: 0.5 * (c_xy + c_yx),
        d_h_one_sided_xy: h_xy,
        d_h_one_sided_yx: h_yx,
        d_h: h_xy.max(h_yx),
        d_h_sum: h_xy + h_yx,
    })
}

/// Mean absolute dot product between a learned gradient field and unit
/// reference normals.
pub fn normal_consistency(g_values: &[[f64; 3]], normals: &[[f64; 3]]) -> Result<f64> {
    if g_values.len() != normals.len() {
        return Err(Error::Usage(format!(
            "normal_consistency: {} field values vs {} normals",
            g_values.len(),
            normals.len()
        )));
    }
    if g_values.is_empty() {
        return Err(Error::Usage("normal_consistency: empty input".into()));
    }
    let mut acc = 0.0;
    for (g, n) in g_values.iter().zip(normals) {
        acc += (g[0] * n[0] + g[1] * n[1] + g[2] * n[2]).abs();
    }
    Ok(acc / g_values.len() as f64)
}

/// Uniform surface sampling: triangles selected with probability proportional
/// to area, then uniform barycentric placement.
pub fn sample_mesh_surface(
    mesh: &TriangleMesh,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<[f64; 3]>> {
    if mesh.is_empty() {
        return Err(Error::Usage("sample_mesh_surface: empty mesh".into()));
    }
    let mut cum = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cum.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::Usage("sample_mesh_surface: zero total area".into()));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let r = rng.gen_range(0.0..total);
        let t = cum.partition_point(|&c| c <= r).min(cum.len() - 1);
        let [a, b, c] = mesh.triangles[t];
        let (pa, pb, pc) = (
            mesh.vertices[a as usize],
            mesh.vertices[b as usize],
            mesh.vertices[c as usize],
        );
        let mut u: f64 = rng.gen_range(0.0..1.0);
        let mut v: f64 = rng.gen_range(0.0..1.0);
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        out.push(std::array::from_fn(|i| {
            pa[i] + u * (pb[i] - pa[i]) + v * (pc[i] - pa[i])
        }));
    }
    Ok(out)
}

/// Mean squared difference of the two scalar heads over a uniform lattice.
pub fn field_mse(
    params_a: &Params,
    params_b: &Params,
    resolution: usize,
    bounds: (f64, f64),
) -> Result<f64> {
    use rayon::prelude::*;
    if resolution < 2 {
        return Err(Error::Config("field_mse resolution must be at least 2".into()));
    }
    let (lo, hi) = bounds;
    let n = resolution;
    let step = (hi - lo) / (n - 1) as f64;
    let sum: f64 = (0..n)
        .into_par_iter()
        .map(|iz| {
            let z = lo + iz as f64 * step;
            let mut pts = Vec::with_capacity(n * n);
            for iy in 0..n {
                let y = lo + iy as f64 * step;
                for ix in 0..n {
                    pts.push([lo + ix as f64 * step, y, z]);
                }
            }
            let mut acc = 0.0;
            for chunk in pts.chunks(crate::net::CHUNK) {
                let (ua, _) = crate::net::forward_chunk::<1>(params_a, chunk, false);
                let (ub, _) = crate::net::forward_chunk::<1>(params_b, chunk, false);
                for i in 0..chunk.len() {
                    let d = ua[i] - ub[i];
                    acc += d * d;
                }
            }
            acc
        })
        .sum();
    Ok(sum / (n * n * n) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, StreamId};

    fn rng(counter: u64) -> ChaCha8Rng {
        stream_rng(777, StreamId::Audit, counter)
    }

    fn random_set(n: usize, counter: u64) -> Vec<[f64; 3]> {
        let mut r = rng(counter);
        (0..n)
            .map(|_| std::array::from_fn(|_| r.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn chamfer_examples() {
        let x = vec![[0.0, 0.0, 0.0]];
        let y = vec![[1.0, 0.0, 0.0]];
        assert_eq!(chamfer_one_sided(&x, &x).unwrap(), 0.0);
        assert_eq!(chamfer_one_sided(&x, &y).unwrap(), 1.0);
        let x2 = vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let y2 = vec![[0.0, 0.0, 0.0]];
        assert_eq!(chamfer_one_sided(&x2, &y2).unwrap(), 1.0);
        assert_eq!(chamfer(&x, &y).unwrap(), 1.0);
        assert!(chamfer_one_sided(&[], &y).is_err());
    }

    #[test]
    fn chamfer_is_symmetric() {
        let x = random_set(40, 0);
        let y = random_set(55, 1);
        let a = chamfer(&x, &y).unwrap();
        let b = chamfer(&y, &x).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(chamfer(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn hausdorff_examples() {
        let x = vec![[0.0, 0.0, 0.0]];
        let y = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(hausdorff(&x, &x).unwrap(), 0.0);
        let r = distance_report(&x, &y).unwrap();
        assert_eq!(r.d_h_one_sided_xy, 0.0);
        assert_eq!(r.d_h_one_sided_yx, 1.0);
        assert_eq!(r.d_h, 1.0);
        assert_eq!(r.d_h_sum, 1.0);
        assert!(r.d_h >= r.d_h_one_sided_xy && r.d_h >= r.d_h_one_sided_yx);
    }

    #[test]
    fn fast_paths_match_brute_force_exactly() {
        for trial in 0..12u64 {
            let x = random_set(120 + 17 * trial as usize, 2 * trial);
            let y = random_set(90 + 11 * trial as usize, 2 * trial + 1);
            let fast = distance_report(&x, &y).unwrap();
            let brute = distance_report_brute(&x, &y).unwrap();
            assert_eq!(fast.d_c.to_bits(), brute.d_c.to_bits());
            assert_eq!(fast.d_h.to_bits(), brute.d_h.to_bits());
            assert_eq!(
                fast.d_c_one_sided_xy.to_bits(),
                brute.d_c_one_sided_xy.to_bits()
            );
            assert_eq!(
                fast.d_h_one_sided_yx.to_bits(),
                brute.d_h_one_sided_yx.to_bits()
            );
        }
    }

    #[test]
    fn hausdorff_triangle_inequality() {
        for trial in 0..8u64 {
            let x = random_set(30, 100 + trial);
            let y = random_set(25, 200 + trial);
            let z = random_set(35, 300 + trial);
            let xy = hausdorff(&x, &y).unwrap();
            let yz = hausdorff(&y, &z).unwrap();
            let xz = hausdorff(&x, &z).unwrap();
            assert!(xz <= xy + yz + 1e-12);
        }
    }

    #[test]
    fn normal_consistency_examples() {
        let n = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(normal_consistency(&n, &n).unwrap(), 1.0);
        let neg: Vec<[f64; 3]> = n.iter().map(|v| [-v[0], -v[1], -v[2]]).collect();
        assert_eq!(normal_consistency(&neg, &n).unwrap(), 1.0);
        let perp = vec![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]];
        assert_eq!(normal_consistency(&perp, &n).unwrap(), 0.0);
        // bounded by 1 for unit-or-shorter fields
        let short = vec![[0.5, 0.0, 0.0], [0.0, 0.3, 0.0]];
        let nc = normal_consistency(&short, &n).unwrap();
        assert!((0.0..=1.0).contains(&nc));
    }

    #[test]
    fn mesh_sampling_is_area_weighted_and_in_plane() {
        // two parallel triangles, area ratio 1:3, separated along z
        let s = 3.0_f64.sqrt();
        let mesh = TriangleMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
                [s, 0.0, 1.0],
                [0.0, s, 1.0],
            ],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
        };
        let a0 = mesh.triangle_area(0);
        let a1 = mesh.triangle_area(1);
        let ratio = a1 / a0;
        assert!((ratio - 3.0).abs() < 1e-12);
        let mut r = rng(5);
        let pts = sample_mesh_surface(&mesh, 20_000, &mut r).unwrap();
        for p in &pts {
            assert!(p[2] == 0.0 || p[2] == 1.0);
        }
        let in_big = pts.iter().filter(|p| p[2] == 1.0).count() as f64;
        let frac = in_big / pts.len() as f64;
        let expect = ratio / (1.0 + ratio);
        // 3-sigma binomial band
        let sigma = (expect * (1.0 - expect) / pts.len() as f64).sqrt();
        assert!(
            (frac - expect).abs() < 3.0 * sigma + 0.01,
            "area weighting off: {frac} vs {expect}"
        );
        // determinism
        let again = sample_mesh_surface(&mesh, 100, &mut rng(5)).unwrap();
        let first = sample_mesh_surface(&mesh, 100, &mut rng(5)).unwrap();
        assert_eq!(again, first);
    }

    #[test]
    fn single_triangle_samples_stay_inside() {
        let mesh = TriangleMesh {
            vertices: vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        let pts = sample_mesh_surface(&mesh, 500, &mut rng(6)).unwrap();
        for p in pts {
            assert!(p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn field_mse_examples() {
        use crate::net::{init_geometric, MlpConfig};
        let cfg = MlpConfig {
            depth: 2,
            width: 8,
            skip_layer: 1,
            ..MlpConfig::desk()
        };
        let a = init_geometric(cfg, 3, 0.5).unwrap();
        assert_eq!(field_mse(&a, &a, 10, (-1.1, 1.1)).unwrap(), 0.0);
        // shifting the scalar-output bias by c shifts u by exactly c
        let mut b = a.clone();
        let last = b.shapes().len() - 1;
        b.biases_mut(last)[0] += 0.25;
        let mse = field_mse(&a, &b, 10, (-1.1, 1.1)).unwrap();
        assert!((mse - 0.0625).abs() < 1e-12, "mse {mse}");
        // resolution refinement stays consistent for smooth fields
        let m50 = field_mse(&a, &b, 50, (-1.1, 1.1)).unwrap();
        let m100 = field_mse(&a, &b, 100, (-1.1, 1.1)).unwrap();
        assert!((m50 - m100).abs() <= 0.1 * m100.max(1e-12));
    }
}
