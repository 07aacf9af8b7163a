//! Icosahedral sphere tessellations with quadrature weights.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::sh::{basis_matrix, n_coeffs};
use crate::geometry::{Rotation, UnitVector, Vec3};

/// Largest subdivision level accepted by [`tessellate_sphere`] (655362 vertices).
pub const MAX_LEVEL: u32 = 8;

/// Directions on the sphere with solid-angle weights and a neighbor graph.
#[derive(Debug, Clone)]
pub struct OrientationSet {
    directions: Vec<UnitVector>,
    weights: Vec<f64>,
    antipodes: Option<Vec<usize>>,
    neighbors: Vec<Vec<usize>>,
}

impl OrientationSet {
    /// Builds a set from arbitrary directions.
    ///
    /// Weights start uniform and are corrected so that even harmonics up to
    /// the highest degree the point count supports integrate exactly.
    /// Neighbors are the six nearest directions (made symmetric).
    pub fn from_directions(directions: Vec<UnitVector>) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::invalid("empty orientation set"));
        }
        let n = directions.len();
        let antipodes = find_antipodes(&directions);
        let mut weights = vec![4.0 * std::f64::consts::PI / n as f64; n];
        if let Some(a) = &antipodes {
            moment_correct(&directions, &mut weights);
            symmetrize(a, &mut weights);
        }
        let neighbors = nearest_neighbors(&directions, 6);
        Ok(Self {
            directions,
            weights,
            antipodes,
            neighbors,
        })
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[UnitVector] {
        &self.directions
    }

    pub fn direction(&self, i: usize) -> &UnitVector {
        &self.directions[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn antipodally_symmetric(&self) -> bool {
        self.antipodes.is_some()
    }

    /// Index of `-n_i`, if the set is antipodally symmetric.
    pub fn antipode(&self, i: usize) -> Option<usize> {
        self.antipodes.as_ref().map(|a| a[i])
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// One representative per antipodal pair: the member with the lower index.
    pub fn half_indices(&self) -> Result<Vec<usize>> {
        let a = self
            .antipodes
            .as_ref()
            .ok_or_else(|| Error::invalid("orientation set is not antipodally symmetric"))?;
        Ok((0..self.len()).filter(|&i| i < a[i]).collect())
    }

    /// Index of the direction with the largest dot product with `n`.
    pub fn nearest(&self, n: &UnitVector) -> usize {
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (i, d) in self.directions.iter().enumerate() {
            let c = d.dot(n);
            if c > best_dot {
                best_dot = c;
                best = i;
            }
        }
        best
    }

    /// Smallest angle between any two distinct directions.
    pub fn min_separation(&self) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                min = min.min(self.directions[i].angle_to(&self.directions[j]));
            }
        }
        min
    }

    /// The set with every direction rotated by `r`. Weights and graph carry over.
    pub fn rotated(&self, r: &Rotation) -> OrientationSet {
        OrientationSet {
            directions: self.directions.iter().map(|d| r.rotate(d)).collect(),
            ..self.clone()
        }
    }
}

/// Subdivided icosahedron projected onto the sphere.
///
/// Level `L` has `10·4^L + 2` vertices. The set is antipodally symmetric and
/// its weights sum to 4π.
pub fn tessellate_sphere(level: u32) -> Result<OrientationSet> {
    if level > MAX_LEVEL {
        return Err(Error::Capacity(format!(
            "tessellation level {level} exceeds the limit of {MAX_LEVEL}"
        )));
    }
    static CACHE: OnceLock<Mutex<HashMap<u32, Arc<OrientationSet>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(t) = cache.lock().unwrap().get(&level) {
        return Ok(OrientationSet::clone(t));
    }
    let t = Arc::new(build_icosphere(level));
    cache.lock().unwrap().insert(level, t.clone());
    Ok(OrientationSet::clone(&t))
}

fn build_icosphere(level: u32) -> OrientationSet {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ];
    let mut verts: Vec<Vec3> = raw
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut mid = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                // Sum in canonical order so antipodal edges give exactly
                // negated midpoints.
                verts.push((verts[key.0] + verts[key.1]).normalize());
                verts.len() - 1
            })
        };
        for &[a, b, c] in &faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }

    let n = verts.len();
    let mut weights = vec![0.0; n];
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &[a, b, c] in &faces {
        let area = spherical_triangle_area(&verts[a], &verts[b], &verts[c]);
        for (v, (p, q)) in [(a, (b, c)), (b, (c, a)), (c, (a, b))] {
            weights[v] += area / 3.0;
            adjacency[v].push(p);
            adjacency[v].push(q);
        }
    }
    for adj in &mut adjacency {
        adj.sort_unstable();
        adj.dedup();
    }
    let directions: Vec<UnitVector> = verts.into_iter().map(UnitVector::new_unchecked).collect();
    let antipodes = find_antipodes(&directions).expect("icosphere is antipodally closed");
    moment_correct(&directions, &mut weights);
    symmetrize(&antipodes, &mut weights);
    OrientationSet {
        directions,
        weights,
        antipodes: Some(antipodes),
        neighbors: adjacency,
    }
}

/// Solid angle of the spherical triangle with unit vertices `a`, `b`, `c`.
fn spherical_triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let num = a.dot(&b.cross(c)).abs();
    let den = 1.0 + a.dot(b) + b.dot(c) + c.dot(a);
    2.0 * num.atan2(den)
}

fn find_antipodes(dirs: &[UnitVector]) -> Option<Vec<usize>> {
    let key = |v: &Vec3| {
        // Quantize to absorb rounding in externally supplied directions.
        let q = |x: f64| (x * 1e9).round() as i64;
        (q(v.x), q(v.y), q(v.z))
    };
    let lookup: HashMap<_, usize> = dirs
        .iter()
        .enumerate()
        .map(|(i, d)| (key(d.as_vec()), i))
        .collect();
    dirs.iter()
        .map(|d| lookup.get(&key(&-d.as_vec())).copied())
        .collect()
}

fn nearest_neighbors(dirs: &[UnitVector], k: usize) -> Vec<Vec<usize>> {
    let n = dirs.len();
    let mut nb: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            idx.sort_by(|&a, &b| dirs[i].dot(&dirs[b]).total_cmp(&dirs[i].dot(&dirs[a])));
            idx.truncate(k);
            idx
        })
        .collect();
    for i in 0..n {
        for j in nb[i].clone() {
            if !nb[j].contains(&i) {
                nb[j].push(i);
            }
        }
    }
    for v in &mut nb {
        v.sort_unstable();
    }
    nb
}

/// Highest even degree whose harmonics are integrated exactly after
/// correction, given the number of directions.
fn correction_degree(n: usize) -> Option<u32> {
    // Limit the number of moment constraints to a quarter of the points and
    // keep the dense solve cheap.
    let mut best = None;
    let mut l = 2;
    while l <= 24 {
        let k = n_coeffs(l);
        if k * 4 > n || (n as f64) * (k * k) as f64 > 4e8 {
            break;
        }
        best = Some(l);
        l += 2;
    }
    best
}

/// Minimal relative change of `weights` that makes all even harmonics up to
/// the correction degree integrate exactly. The correction is discarded if
/// it would make any weight non-positive.
fn moment_correct(dirs: &[UnitVector], weights: &mut [f64]) {
    let Some(mut degree) = correction_degree(dirs.len()) else {
        rescale_to_sphere(weights);
        return;
    };
    loop {
        if let Some(w) = try_moment_correct(dirs, weights, degree) {
            weights.copy_from_slice(&w);
            return;
        }
        if degree <= 2 {
            break;
        }
        degree -= 2;
    }
    rescale_to_sphere(weights);
}

fn try_moment_correct(dirs: &[UnitVector], weights: &[f64], degree: u32) -> Option<Vec<f64>> {
    let b = basis_matrix(degree, dirs).ok()?;
    let k = b.ncols();
    let w = DVector::from_column_slice(weights);
    let mut target = DVector::zeros(k);
    target[0] = (4.0 * std::f64::consts::PI).sqrt();
    let residual = target - b.tr_mul(&w);
    // Minimize Σ δ_i² / w_i subject to Bᵀ(w + δ) = target:
    // δ = W B (Bᵀ W B)⁻¹ r.
    let mut wb = b.clone();
    for (i, mut row) in wb.row_iter_mut().enumerate() {
        row *= weights[i];
    }
    let gram: DMatrix<f64> = b.tr_mul(&wb);
    let lam = gram.cholesky()?.solve(&residual);
    let delta = wb * lam;
    let out: Vec<f64> = weights.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
    out.iter().all(|v| *v > 0.0).then_some(out)
}

fn symmetrize(antipodes: &[usize], weights: &mut [f64]) {
    for i in 0..weights.len() {
        let j = antipodes[i];
        if i < j {
            let m = 0.5 * (weights[i] + weights[j]);
            weights[i] = m;
            weights[j] = m;
        }
    }
}

fn rescale_to_sphere(weights: &mut [f64]) {
    let s: f64 = weights.iter().sum();
    let f = 4.0 * std::f64::consts::PI / s;
    weights.iter_mut().for_each(|w| *w *= f);
}
