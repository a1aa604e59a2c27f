//! Sparse voxel convolution over active voxels only.
//!
//! A [`Rulebook`] lists, per kernel offset, the `(input voxel, output voxel)`
//! pairs that offset connects. Submanifold 3×3×3 convolutions keep the active
//! set; strided 2×2×2 convolutions map every voxel to its parent cell one
//! level coarser.

use std::collections::BTreeMap;

use super::layers::{he_bound, join, Module, Param};
use crate::geometry::{voxelize, GeometryError, PointCloud};
use crate::rng::Rng;
use crate::tensor::{gemm, Mat, Real};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rulebook {
    pub n_in: usize,
    pub n_out: usize,
    /// Pairs per kernel offset.
    pub groups: Vec<Vec<(u32, u32)>>,
    /// Offset whose pairs are exactly `(i, i)` for every voxel.
    pub identity: Option<usize>,
}

/// Index of a 3×3×3 offset with components in `{-1, 0, 1}`.
fn offset_index(d: [i64; 3]) -> usize {
    ((d[0] + 1) * 9 + (d[1] + 1) * 3 + (d[2] + 1)) as usize
}

const CENTER: usize = 13;

/// Neighborhood rulebook of a submanifold convolution on `coords`, which must
/// be strictly increasing (voxelization and [`downsample`] produce them so).
///
/// Neighbors sharing `x + dx, y + dy` are contiguous in sorted order and
/// their position only moves forward, so nine cursors replace any lookup.
pub fn submanifold_rulebook(coords: &[[i64; 3]]) -> Rulebook {
    assert!(coords.windows(2).all(|w| w[0] < w[1]), "voxel coordinates must be sorted and unique");
    let mut groups = vec![Vec::new(); 27];
    let mut cursor = [0usize; 9];
    for (out, c) in coords.iter().enumerate() {
        for (col, start) in cursor.iter_mut().enumerate() {
            let (dx, dy) = (col as i64 / 3 - 1, col as i64 % 3 - 1);
            let lo = [c[0] + dx, c[1] + dy, c[2] - 1];
            while *start < coords.len() && coords[*start] < lo {
                *start += 1;
            }
            for (inp, n) in coords.iter().enumerate().skip(*start).take(3) {
                if n[0] != lo[0] || n[1] != lo[1] || n[2] > c[2] + 1 {
                    break;
                }
                groups[offset_index([dx, dy, n[2] - c[2]])].push((inp as u32, out as u32));
            }
        }
    }
    Rulebook { n_in: coords.len(), n_out: coords.len(), groups, identity: Some(CENTER) }
}

/// Parent coordinates one level coarser, the child→parent map, and the
/// stride-2 rulebook grouped by the child's parity within its parent.
pub fn downsample(coords: &[[i64; 3]]) -> (Vec<[i64; 3]>, Vec<u32>, Rulebook) {
    let parent_of = |c: &[i64; 3]| c.map(|v| v.div_euclid(2));
    let mut parents: BTreeMap<[i64; 3], u32> = coords.iter().map(|c| (parent_of(c), 0)).collect();
    for (i, v) in parents.values_mut().enumerate() {
        *v = i as u32;
    }
    let mut groups = vec![Vec::new(); 8];
    let mut parent = Vec::with_capacity(coords.len());
    for (i, c) in coords.iter().enumerate() {
        let p = parents[&parent_of(c)];
        let k = (c[0].rem_euclid(2) * 4 + c[1].rem_euclid(2) * 2 + c[2].rem_euclid(2)) as usize;
        groups[k].push((i as u32, p));
        parent.push(p);
    }
    let rb = Rulebook { n_in: coords.len(), n_out: parents.len(), groups, identity: None };
    (parents.into_keys().collect(), parent, rb)
}

/// Voxel structure of one point cloud at every level of the 3D stream.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelHierarchy {
    /// Level-0 voxel of every point.
    pub point_voxel: Vec<u32>,
    /// Number of points in every level-0 voxel.
    pub voxel_counts: Vec<u32>,
    pub coords: Vec<Vec<[i64; 3]>>,
    pub subm: Vec<Rulebook>,
    /// `down[l]` maps level `l` to level `l + 1`.
    pub down: Vec<Rulebook>,
    /// `parent[l][v]`: index at level `l + 1` of voxel `v` of level `l`.
    pub parent: Vec<Vec<u32>>,
}

impl VoxelHierarchy {
    pub fn build(cloud: &PointCloud, resolution: f64, levels: usize) -> Result<Self, GeometryError> {
        let grid = voxelize(cloud, resolution)?;
        let mut point_voxel = vec![0u32; cloud.len()];
        let mut voxel_counts = Vec::with_capacity(grid.len());
        let mut coords0 = Vec::with_capacity(grid.len());
        for (v, (c, pts)) in grid.cells.iter().enumerate() {
            coords0.push(*c);
            voxel_counts.push(pts.len() as u32);
            for &p in pts {
                point_voxel[p] = v as u32;
            }
        }
        let mut coords = vec![coords0];
        let mut subm = vec![submanifold_rulebook(&coords[0])];
        let mut down = Vec::new();
        let mut parent = Vec::new();
        for l in 0..levels {
            let (next, par, rb) = downsample(&coords[l]);
            subm.push(submanifold_rulebook(&next));
            coords.push(next);
            parent.push(par);
            down.push(rb);
        }
        Ok(Self { point_voxel, voxel_counts, coords, subm, down, parent })
    }

    pub fn num_voxels(&self, level: usize) -> usize {
        self.coords[level].len()
    }

    /// Disjoint union of several hierarchies with the same depth, so that one
    /// pass of the 3D stream covers a whole batch. Voxel and point indices of
    /// later parts are shifted past the earlier ones; coordinates of
    /// different parts may coincide and must not be looked up again.
    pub fn concat(parts: &[&VoxelHierarchy]) -> VoxelHierarchy {
        assert!(!parts.is_empty(), "nothing to concatenate");
        let levels = parts[0].coords.len();
        assert!(parts.iter().all(|h| h.coords.len() == levels), "hierarchy depth mismatch");
        let mut out = VoxelHierarchy {
            point_voxel: Vec::new(),
            voxel_counts: Vec::new(),
            coords: vec![Vec::new(); levels],
            subm: (0..levels).map(|l| empty_rulebook(parts[0].subm[l].groups.len(), parts[0].subm[l].identity)).collect(),
            down: (0..levels - 1).map(|l| empty_rulebook(parts[0].down[l].groups.len(), None)).collect(),
            parent: vec![Vec::new(); levels - 1],
        };
        for h in parts {
            let base: Vec<u32> = out.coords.iter().map(|c| c.len() as u32).collect();
            out.point_voxel.extend(h.point_voxel.iter().map(|&v| v + base[0]));
            out.voxel_counts.extend_from_slice(&h.voxel_counts);
            for l in 0..levels {
                out.coords[l].extend_from_slice(&h.coords[l]);
                append_rules(&mut out.subm[l], &h.subm[l], base[l], base[l]);
            }
            for l in 0..levels - 1 {
                append_rules(&mut out.down[l], &h.down[l], base[l], base[l + 1]);
                out.parent[l].extend(h.parent[l].iter().map(|&p| p + base[l + 1]));
            }
        }
        out
    }
}

fn empty_rulebook(kvol: usize, identity: Option<usize>) -> Rulebook {
    Rulebook { n_in: 0, n_out: 0, groups: vec![Vec::new(); kvol], identity }
}

fn append_rules(dst: &mut Rulebook, src: &Rulebook, in_base: u32, out_base: u32) {
    assert_eq!(dst.groups.len(), src.groups.len(), "kernel volume mismatch");
    assert_eq!(dst.identity, src.identity, "identity offset mismatch");
    dst.n_in += src.n_in;
    dst.n_out += src.n_out;
    for (d, s) in dst.groups.iter_mut().zip(&src.groups) {
        d.extend(s.iter().map(|&(i, o)| (i + in_base, o + out_base)));
    }
}

/// Average of point features per level-0 voxel.
pub fn pool_points<T: Real>(h: &VoxelHierarchy, x: &Mat<T>) -> Mat<T> {
    let mut y = Mat::zeros(h.voxel_counts.len(), x.cols);
    for (i, &v) in h.point_voxel.iter().enumerate() {
        for (d, &s) in y.row_mut(v as usize).iter_mut().zip(x.row(i)) {
            *d += s;
        }
    }
    for (v, &n) in h.voxel_counts.iter().enumerate() {
        let inv = T::one() / T::lit(n as f64);
        y.row_mut(v).iter_mut().for_each(|d| *d *= inv);
    }
    y
}

pub fn pool_points_backward<T: Real>(h: &VoxelHierarchy, dy: &Mat<T>) -> Mat<T> {
    let mut dx = Mat::zeros(h.point_voxel.len(), dy.cols);
    for (i, &v) in h.point_voxel.iter().enumerate() {
        let inv = T::one() / T::lit(h.voxel_counts[v as usize] as f64);
        for (d, &g) in dx.row_mut(i).iter_mut().zip(dy.row(v as usize)) {
            *d = g * inv;
        }
    }
    dx
}

/// Copies row `index[i]` of `x` into row `i`.
pub fn gather_rows<T: Real>(x: &Mat<T>, index: &[u32]) -> Mat<T> {
    let mut data = Vec::with_capacity(index.len() * x.cols);
    for &j in index {
        data.extend_from_slice(x.row(j as usize));
    }
    Mat::from_vec(index.len(), x.cols, data)
}

/// Adjoint of [`gather_rows`].
pub fn scatter_rows<T: Real>(dy: &Mat<T>, index: &[u32], rows: usize) -> Mat<T> {
    let mut dx = Mat::zeros(rows, dy.cols);
    for (i, &j) in index.iter().enumerate() {
        for (d, &g) in dx.row_mut(j as usize).iter_mut().zip(dy.row(i)) {
            *d += g;
        }
    }
    dx
}

/// Rows `side(pair)` of `x`, one per pair, into `out`.
fn gather_pairs<T: Real>(x: &Mat<T>, pairs: &[(u32, u32)], side: impl Fn(&(u32, u32)) -> u32, out: &mut Vec<T>) {
    out.clear();
    for p in pairs {
        out.extend_from_slice(x.row(side(p) as usize));
    }
}

/// Kernel offsets with fewer active pairs than this skip the gather/GEMM path.
const DIRECT_PAIRS: usize = 8;

/// Sparse convolution with one `cin × cout` matrix per kernel offset.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseConv<T> {
    pub kvol: usize,
    pub cin: usize,
    pub cout: usize,
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Real> SparseConv<T> {
    pub fn new(kvol: usize, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        // Active neighborhoods are sparse, so scale by the center tap's fan-in.
        Self {
            kvol,
            cin,
            cout,
            w: Param::uniform(&[kvol, cin, cout], he_bound(cin), rng),
            b: Param::zeros(&[cout]),
        }
    }

    fn weight(&self, k: usize) -> &[T] {
        let s = self.cin * self.cout;
        &self.w.value[k * s..(k + 1) * s]
    }

    pub fn forward(&self, x: &Mat<T>, rb: &Rulebook) -> Mat<T> {
        assert_eq!(rb.groups.len(), self.kvol, "rulebook kernel volume");
        assert_eq!((x.rows, x.cols), (rb.n_in, self.cin), "sparse conv input shape");
        let mut y = Mat::from_vec(rb.n_out, self.cout, self.b.value.repeat(rb.n_out));
        let (mut a, mut t) = (Vec::new(), Vec::new());
        for (k, pairs) in rb.groups.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            if rb.identity == Some(k) {
                gemm(x.rows, self.cin, self.cout, &x.data, false, self.weight(k), false, &mut y.data, true);
                continue;
            }
            if pairs.len() < DIRECT_PAIRS {
                let wk = self.weight(k);
                for &(i, o) in pairs {
                    let yo = &mut y.data[o as usize * self.cout..(o as usize + 1) * self.cout];
                    for (a, &xa) in x.row(i as usize).iter().enumerate() {
                        if xa == T::zero() {
                            continue;
                        }
                        for (d, &wv) in yo.iter_mut().zip(&wk[a * self.cout..(a + 1) * self.cout]) {
                            *d += xa * wv;
                        }
                    }
                }
                continue;
            }
            gather_pairs(x, pairs, |p| p.0, &mut a);
            t.resize(pairs.len() * self.cout, T::zero());
            gemm(pairs.len(), self.cin, self.cout, &a, false, self.weight(k), false, &mut t, false);
            for (tr, &(_, o)) in t.chunks_exact(self.cout).zip(pairs) {
                for (d, &v) in y.row_mut(o as usize).iter_mut().zip(tr) {
                    *d += v;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Mat<T>, rb: &Rulebook, dy: &Mat<T>) -> Mat<T> {
        let s = self.cin * self.cout;
        for r in 0..dy.rows {
            for (g, &d) in self.b.grad.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        let mut dx = Mat::zeros(x.rows, self.cin);
        let (mut a, mut g, mut da) = (Vec::new(), Vec::new(), Vec::new());
        for (k, pairs) in rb.groups.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let (wk, gk) = (k * s, (k + 1) * s);
            if rb.identity == Some(k) {
                gemm(self.cin, x.rows, self.cout, &x.data, true, &dy.data, false, &mut self.w.grad[wk..gk], true);
                gemm(x.rows, self.cout, self.cin, &dy.data, false, &self.w.value[wk..gk], true, &mut dx.data, true);
                continue;
            }
            if pairs.len() < DIRECT_PAIRS {
                let (cin, cout) = (self.cin, self.cout);
                for &(i, o) in pairs {
                    let go = dy.row(o as usize);
                    let xi = &x.data[i as usize * cin..(i as usize + 1) * cin];
                    let dxi = &mut dx.data[i as usize * cin..(i as usize + 1) * cin];
                    for a in 0..cin {
                        let wrow = &self.w.value[wk + a * cout..wk + (a + 1) * cout];
                        let mut acc = T::zero();
                        for (&wv, &g) in wrow.iter().zip(go) {
                            acc += wv * g;
                        }
                        dxi[a] += acc;
                        let xa = xi[a];
                        if xa != T::zero() {
                            let grow = &mut self.w.grad[wk + a * cout..wk + (a + 1) * cout];
                            for (gw, &g) in grow.iter_mut().zip(go) {
                                *gw += xa * g;
                            }
                        }
                    }
                }
                continue;
            }
            gather_pairs(x, pairs, |p| p.0, &mut a);
            gather_pairs(dy, pairs, |p| p.1, &mut g);
            gemm(self.cin, pairs.len(), self.cout, &a, true, &g, false, &mut self.w.grad[wk..gk], true);
            da.resize(pairs.len() * self.cin, T::zero());
            gemm(pairs.len(), self.cout, self.cin, &g, false, &self.w.value[wk..gk], true, &mut da, false);
            for (dr, &(inp, _)) in da.chunks_exact(self.cin).zip(pairs) {
                for (d, &v) in dx.row_mut(inp as usize).iter_mut().zip(dr) {
                    *d += v;
                }
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for SparseConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}
