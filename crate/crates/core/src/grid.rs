//! Meshes on the positive part of the unit sphere.
//!
//! The transfer operator is discretized on a fixed node set with an
//! interpolation rule that writes a point mass at an off-grid point as a
//! convex combination of nearby nodes:
//!
//! * d = 1: the sphere is the single point {1}; one node.
//! * d = 2: uniform angular mesh theta_k = (k + 1/2) h, h = (pi/2) / K,
//!   with interpolation linear in angle between the two bracketing nodes.
//! * d = 3: geodesic triangulation of the positive octant by barycentric
//!   subdivision of the corner triangle (e1, e2, e3); interpolation uses
//!   barycentric weights in the flattened chart, three nodes per point.
//! * d >= 4: low-discrepancy scatter with nearest-node projection, an
//!   explicitly lower-accuracy fallback.

use std::f64::consts::FRAC_PI_2;

/// Interpolation weights for one point: at most four (node, weight) pairs
/// with nonnegative weights summing to one.
#[derive(Debug, Clone, Copy)]
pub struct InterpWeights {
    idx: [usize; 4],
    w: [f64; 4],
    len: usize,
}

impl InterpWeights {
    fn single(i: usize) -> Self {
        InterpWeights {
            idx: [i, 0, 0, 0],
            w: [1.0, 0.0, 0.0, 0.0],
            len: 1,
        }
    }

    pub fn pairs(&self) -> &[usize] {
        &self.idx[..self.len]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(move |k| (self.idx[k], self.w[k]))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone)]
enum GridKind {
    /// d = 1
    Point,
    /// d = 2: uniform in angle
    Angular { h: f64 },
    /// d = 3: barycentric lattice of frequency f on the octant triangle
    Octant { freq: usize },
    /// d >= 4: nearest node
    Scatter,
}

/// Node set with quadrature weights and an interpolation rule.
#[derive(Debug, Clone)]
pub struct SphereGrid {
    dim: usize,
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
    kind: GridKind,
}

impl SphereGrid {
    /// Build a mesh with about `k` nodes (exactly `k` for d = 2).
    pub fn new(dim: usize, k: usize) -> Self {
        assert!(dim >= 1, "dimension must be positive");
        match dim {
            1 => SphereGrid {
                dim,
                nodes: vec![vec![1.0]],
                weights: vec![1.0],
                kind: GridKind::Point,
            },
            2 => {
                let k = k.max(2);
                let h = FRAC_PI_2 / k as f64;
                let nodes = (0..k)
                    .map(|j| {
                        let theta = (j as f64 + 0.5) * h;
                        vec![theta.cos(), theta.sin()]
                    })
                    .collect();
                SphereGrid {
                    dim,
                    nodes,
                    weights: vec![h; k],
                    kind: GridKind::Angular { h },
                }
            }
            3 => {
                // (f+1)(f+2)/2 nodes; pick f to land near k
                let mut f = 1usize;
                while (f + 1) * (f + 2) / 2 < k {
                    f += 1;
                }
                let mut nodes = Vec::with_capacity((f + 1) * (f + 2) / 2);
                for i in 0..=f {
                    for j in 0..=(f - i) {
                        let l = f - i - j;
                        let v = [i as f64, j as f64, l as f64];
                        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                        nodes.push(vec![v[0] / n, v[1] / n, v[2] / n]);
                    }
                }
                let octant_area = 4.0 * std::f64::consts::PI / 8.0;
                let w = octant_area / nodes.len() as f64;
                let weights = vec![w; nodes.len()];
                SphereGrid {
                    dim,
                    nodes,
                    weights,
                    kind: GridKind::Octant { freq: f },
                }
            }
            _ => {
                // Halton points mapped through exponentials and normalized:
                // a deterministic covering of the positive sphere
                let k = k.max(dim);
                let bases = [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
                let mut nodes = Vec::with_capacity(k);
                for n in 0..k {
                    let mut v: Vec<f64> = (0..dim)
                        .map(|c| {
                            let u = radical_inverse(n as u64 + 1, bases[c % bases.len()]);
                            (-(1.0 - u).ln()).max(1e-12)
                        })
                        .collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    for x in v.iter_mut() {
                        *x /= norm;
                    }
                    nodes.push(v);
                }
                let w = 1.0 / k as f64;
                SphereGrid {
                    dim,
                    nodes,
                    weights: vec![w; k],
                    kind: GridKind::Scatter,
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i]
    }

    /// Quadrature weights; they sum to the surface measure of the positive
    /// sphere part (arc length pi/2 for d = 2) except for the scatter
    /// fallback, where they sum to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Write a unit point as a convex combination of nodes.
    pub fn interpolate(&self, p: &[f64]) -> InterpWeights {
        debug_assert_eq!(p.len(), self.dim);
        match &self.kind {
            GridKind::Point => InterpWeights::single(0),
            GridKind::Angular { h } => {
                let k = self.nodes.len();
                let theta = p[1].atan2(p[0]).clamp(0.0, FRAC_PI_2);
                let u = theta / h - 0.5;
                if u <= 0.0 {
                    return InterpWeights::single(0);
                }
                if u >= (k - 1) as f64 {
                    return InterpWeights::single(k - 1);
                }
                let j = u.floor() as usize;
                let frac = u - j as f64;
                InterpWeights {
                    idx: [j, j + 1, 0, 0],
                    w: [1.0 - frac, frac, 0.0, 0.0],
                    len: 2,
                }
            }
            GridKind::Octant { freq } => {
                let f = *freq;
                let sum = p[0] + p[1] + p[2];
                debug_assert!(sum > 0.0);
                let u = (p[0] / sum * f as f64).clamp(0.0, f as f64);
                let v = (p[1] / sum * f as f64).clamp(0.0, f as f64);
                let mut a = (u.floor() as usize).min(f.saturating_sub(1));
                let mut b = (v.floor() as usize).min(f.saturating_sub(1));
                if a + b > f - 1 {
                    // clamp into the lattice along the hypotenuse
                    let over = a + b - (f - 1);
                    let shrink_a = over.min(a);
                    a -= shrink_a;
                    b -= over - shrink_a;
                }
                let fu = (u - a as f64).clamp(0.0, 1.0);
                let fv = (v - b as f64).clamp(0.0, 1.0);
                let vert = |i: usize, j: usize| self.octant_index(f, i, j);
                if fu + fv <= 1.0 {
                    InterpWeights {
                        idx: [vert(a, b), vert(a + 1, b), vert(a, b + 1), 0],
                        w: [1.0 - fu - fv, fu, fv, 0.0],
                        len: 3,
                    }
                } else {
                    InterpWeights {
                        idx: [vert(a + 1, b + 1), vert(a, b + 1), vert(a + 1, b), 0],
                        w: [fu + fv - 1.0, 1.0 - fu, 1.0 - fv, 0.0],
                        len: 3,
                    }
                }
            }
            GridKind::Scatter => {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (i, node) in self.nodes.iter().enumerate() {
                    let d: f64 = node
                        .iter()
                        .zip(p)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                InterpWeights::single(best)
            }
        }
    }

    /// Evaluate grid-sampled values at an arbitrary unit point.
    pub fn eval(&self, values: &[f64], p: &[f64]) -> f64 {
        self.interpolate(p)
            .iter()
            .map(|(j, w)| w * values[j])
            .sum()
    }

    fn octant_index(&self, f: usize, i: usize, j: usize) -> usize {
        debug_assert!(i + j <= f, "barycentric index out of lattice");
        // nodes stored as i = 0..=f, j = 0..=(f-i): rows of length f+1-i
        let offset: usize = (0..i).map(|r| f + 1 - r).sum();
        offset + j
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_grid_is_a_point() {
        let g = SphereGrid::new(1, 64);
        assert_eq!(g.len(), 1);
        assert_eq!(g.node(0), &[1.0]);
        let w = g.interpolate(&[1.0]);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn angular_grid_interpolates_linearly() {
        let g = SphereGrid::new(2, 8);
        // point exactly on node 3
        let n3 = g.node(3).to_vec();
        let w = g.interpolate(&n3);
        let total: f64 = w.iter().map(|(_, wj)| wj).sum();
        assert!((total - 1.0).abs() < 1e-14);
        let val = g.eval(&(0..8).map(|i| i as f64).collect::<Vec<_>>(), &n3);
        assert!((val - 3.0).abs() < 1e-10);
        // midpoint between nodes 2 and 3 gets weight 1/2 each
        let h = FRAC_PI_2 / 8.0;
        let theta = 3.0 * h;
        let mid = [theta.cos(), theta.sin()];
        let val = g.eval(&(0..8).map(|i| i as f64).collect::<Vec<_>>(), &mid);
        assert!((val - 2.5).abs() < 1e-10);
    }

    #[test]
    fn angular_endpoints_clamp() {
        let g = SphereGrid::new(2, 8);
        let w = g.interpolate(&[1.0, 0.0]);
        assert_eq!(w.pairs(), &[0]);
        let w = g.interpolate(&[0.0, 1.0]);
        assert_eq!(w.pairs(), &[7]);
    }

    #[test]
    fn octant_grid_reproduces_nodes_and_linear_functions() {
        let g = SphereGrid::new(3, 60);
        assert!(g.len() >= 60);
        for (i, node) in g.nodes().iter().enumerate().step_by(7) {
            let w = g.interpolate(node);
            let total: f64 = w.iter().map(|(_, wj)| wj).sum();
            assert!((total - 1.0).abs() < 1e-12);
            // the node itself carries all the weight
            let mass_on_i: f64 = w
                .iter()
                .filter(|(j, _)| *j == i)
                .map(|(_, wj)| wj)
                .sum();
            assert!(mass_on_i > 1.0 - 1e-9, "node {i}: {mass_on_i}");
        }
        // linear function of simplex coordinates is reproduced exactly
        let vals: Vec<f64> = g
            .nodes()
            .iter()
            .map(|n| {
                let s = n[0] + n[1] + n[2];
                n[0] / s
            })
            .collect();
        let p = [0.53, 0.31, 0.16f64];
        let norm = (p.iter().map(|x| x * x).sum::<f64>()).sqrt();
        let p: Vec<f64> = p.iter().map(|x| x / norm).collect();
        let s = p[0] + p[1] + p[2];
        let interpolated = g.eval(&vals, &p);
        assert!((interpolated - p[0] / s).abs() < 1e-12);
    }

    #[test]
    fn scatter_grid_covers_positive_sphere() {
        let g = SphereGrid::new(5, 100);
        assert_eq!(g.len(), 100);
        for node in g.nodes() {
            let n: f64 = node.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
            assert!(node.iter().all(|&x| x > 0.0));
        }
        // nearest-node projection returns the node itself
        let w = g.interpolate(g.node(17));
        assert_eq!(w.pairs(), &[17]);
    }
}

fn radical_inverse(mut n: u64, base: u64) -> f64 {
    let mut inv = 0.0;
    let mut denom = 1.0;
    while n > 0 {
        denom *= base as f64;
        inv += (n % base) as f64 / denom;
        n /= base;
    }
    inv
}
