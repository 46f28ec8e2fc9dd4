//! Source-panel potential flow on closed triangle meshes.
//!
//! Piecewise-constant source density `σ` on flat triangles, collocation at
//! centroids, kernel `κ(r) = 1/(4π‖r‖)`. The no-penetration condition
//! `v∞·n_i − ½σ_i + Σ_j σ_j n_i·∫_{T_j} ∇_x κ(x_i − y) dy = 0` gives a dense system
//! solved directly; surface velocities and pressure coefficients follow.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Provenance, SampleSet};
use crate::geometry::{build_neighbor_lists, default_k, PointCloud};
use crate::quadrature::triangle_degree5;
use crate::{Error, Result};

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// Meshes.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<V3>,
    pub triangles: Vec<[usize; 3]>,
    pub centroids: Vec<V3>,
    pub areas: Vec<f64>,
    /// Outward unit normals.
    pub normals: Vec<V3>,
    /// Every edge is shared by exactly two triangles.
    pub watertight: bool,
    /// Neighboring triangles traverse shared edges in opposite directions.
    pub consistently_oriented: bool,
    /// The input orientation was reversed to make the signed volume positive.
    pub flipped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeshFormat {
    Obj,
    StlAscii,
}

impl MeshFormat {
    /// Format from the file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
            Some("obj") => Ok(MeshFormat::Obj),
            Some("stl") => Ok(MeshFormat::StlAscii),
            _ => Err(Error::invalid(format!("cannot infer mesh format of {}", path.display()))),
        }
    }
}

impl TriMesh {
    /// Validate a raw mesh, compute facet data and orient it outward.
    pub fn new(vertices: Vec<V3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::invalid("mesh has no triangles"));
        }
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&v| v >= vertices.len())) {
            return Err(Error::invalid(format!("triangle {t:?} references a missing vertex")));
        }
        let (lo, hi) = bbox(&vertices);
        let diag2 = dot(sub(hi, lo), sub(hi, lo));
        let mut mesh = TriMesh {
            vertices,
            triangles,
            centroids: Vec::new(),
            areas: Vec::new(),
            normals: Vec::new(),
            watertight: false,
            consistently_oriented: false,
            flipped: false,
        };
        mesh.compute_facets();
        if let Some(k) = mesh.areas.iter().position(|&a| a < 1e-12 * diag2) {
            return Err(Error::invalid(format!("triangle {k} is degenerate (area {:.3e})", mesh.areas[k])));
        }
        let (watertight, oriented) = edge_checks(&mesh.triangles);
        mesh.watertight = watertight;
        mesh.consistently_oriented = oriented;
        if mesh.signed_volume() < 0.0 {
            for t in &mut mesh.triangles {
                t.swap(1, 2);
            }
            mesh.flipped = true;
            mesh.compute_facets();
        }
        Ok(mesh)
    }

    fn compute_facets(&mut self) {
        let n = self.triangles.len();
        self.centroids = Vec::with_capacity(n);
        self.areas = Vec::with_capacity(n);
        self.normals = Vec::with_capacity(n);
        for t in &self.triangles {
            let [a, b, c] = t.map(|v| self.vertices[v]);
            let cr = cross(sub(b, a), sub(c, a));
            let len = norm(cr);
            self.centroids.push(scale(add(add(a, b), c), 1.0 / 3.0));
            self.areas.push(0.5 * len);
            self.normals.push(if len > 0.0 { scale(cr, 1.0 / len) } else { [0.0; 3] });
        }
    }

    pub fn n_faces(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_edges(&self) -> usize {
        let mut edges: Vec<(usize, usize)> = self.triangles.iter().flat_map(|t| tri_edges(t).map(undirected)).collect();
        edges.sort_unstable();
        edges.dedup();
        edges.len()
    }

    /// `V − E + F`.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.n_edges() as i64 + self.n_faces() as i64
    }

    /// Volume enclosed with the current orientation (positive when outward).
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|v| self.vertices[v]);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    /// Area-weighted mean of the centroids.
    pub fn center(&self) -> V3 {
        let a = self.total_area();
        self.centroids.iter().zip(&self.areas).fold([0.0; 3], |acc, (c, &w)| add(acc, scale(*c, w / a)))
    }

    fn diameter(&self, j: usize) -> f64 {
        let [a, b, c] = self.triangles[j].map(|v| self.vertices[v]);
        norm(sub(a, b)).max(norm(sub(b, c))).max(norm(sub(c, a)))
    }

    /// Apply `f` to every vertex.
    pub fn map_vertices(&self, f: impl Fn(V3) -> V3) -> Result<Self> {
        TriMesh::new(self.vertices.iter().map(|&v| f(v)).collect(), self.triangles.clone())
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {:?} {:?} {:?}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    /// Point cloud of facet centroids, outward normals and areas.
    pub fn to_cloud(&self) -> Result<PointCloud> {
        let cloud = PointCloud::from_facets(
            self.centroids.iter().flatten().copied().collect(),
            self.normals.iter().flatten().copied().collect(),
            self.areas.clone(),
        )?;
        build_neighbor_lists(&cloud, default_k(3))
    }
}

fn bbox(v: &[V3]) -> (V3, V3) {
    v.iter().fold(([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]), |(lo, hi), p| {
        ([lo[0].min(p[0]), lo[1].min(p[1]), lo[2].min(p[2])], [hi[0].max(p[0]), hi[1].max(p[1]), hi[2].max(p[2])])
    })
}

fn tri_edges(t: &[usize; 3]) -> [(usize, usize); 3] {
    [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])]
}

fn undirected((a, b): (usize, usize)) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// `(watertight, consistently oriented)`.
fn edge_checks(tris: &[[usize; 3]]) -> (bool, bool) {
    let mut count: HashMap<(usize, usize), usize> = HashMap::new();
    let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
    for t in tris {
        for e in tri_edges(t) {
            *count.entry(undirected(e)).or_default() += 1;
            *directed.entry(e).or_default() += 1;
        }
    }
    let watertight = count.values().all(|&c| c == 2);
    let oriented = directed.values().all(|&c| c == 1);
    (watertight, oriented)
}

fn parse_f64(tok: Option<&str>, line: usize) -> Result<f64> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Format(format!("line {line}: expected a number")))
}

/// Wavefront OBJ: `v x y z` and `f i j k ...` (1-based, negative indices relative,
/// `i/t/n` forms accepted, polygons fan-triangulated).
pub fn parse_obj(text: &str) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                vertices.push([parse_f64(it.next(), line_no)?, parse_f64(it.next(), line_no)?, parse_f64(it.next(), line_no)?]);
            }
            Some("f") => {
                let idx = it
                    .map(|tok| {
                        let head = tok.split('/').next().unwrap_or("");
                        let i: i64 = head.parse().map_err(|_| Error::Format(format!("line {line_no}: bad face index {tok:?}")))?;
                        let n = vertices.len() as i64;
                        let k = if i > 0 { i - 1 } else { n + i };
                        if i == 0 || k < 0 || k >= n {
                            return Err(Error::Format(format!("line {line_no}: face index {i} out of range")));
                        }
                        Ok(k as usize)
                    })
                    .collect::<Result<Vec<_>>>()?;
                if idx.len() < 3 {
                    return Err(Error::Format(format!("line {line_no}: face needs at least 3 vertices")));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, triangles)
}

/// ASCII STL; vertices with identical coordinates are merged.
pub fn parse_stl_ascii(text: &str) -> Result<TriMesh> {
    let mut vertices: Vec<V3> = Vec::new();
    let mut index: HashMap<[u64; 3], usize> = HashMap::new();
    let mut triangles = Vec::new();
    let mut current = Vec::with_capacity(3);
    let mut seen_solid = false;
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("solid") => seen_solid = true,
            Some("vertex") => {
                let v = [parse_f64(it.next(), line_no)?, parse_f64(it.next(), line_no)?, parse_f64(it.next(), line_no)?];
                let key = v.map(|x| (x + 0.0).to_bits());
                let k = *index.entry(key).or_insert_with(|| {
                    vertices.push(v);
                    vertices.len() - 1
                });
                current.push(k);
            }
            Some("endloop") => {
                if current.len() != 3 {
                    return Err(Error::Format(format!("line {line_no}: facet has {} vertices", current.len())));
                }
                triangles.push([current[0], current[1], current[2]]);
                current.clear();
            }
            _ => {}
        }
    }
    if !seen_solid {
        return Err(Error::Format("missing `solid` header".into()));
    }
    TriMesh::new(vertices, triangles)
}

pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<TriMesh> {
    let text = std::fs::read_to_string(path)?;
    match format {
        MeshFormat::Obj => parse_obj(&text),
        MeshFormat::StlAscii => parse_stl_ascii(&text),
    }
}

/// Unit icosphere: an icosahedron with `level` rounds of 4-way subdivision,
/// giving `20·4^level` faces.
pub fn icosphere(level: usize) -> Result<TriMesh> {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<V3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|&p| scale(p, 1.0 / norm(p)))
    .collect();
    let mut f: Vec<[usize; 3]> = vec![
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
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, v: &mut Vec<V3>| {
            *mid.entry(undirected((a, b))).or_insert_with(|| {
                let m = scale(add(v[a], v[b]), 0.5);
                v.push(scale(m, 1.0 / norm(m)));
                v.len() - 1
            })
        };
        let mut next = Vec::with_capacity(4 * f.len());
        for &[a, b, c] in &f {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = next;
    }
    TriMesh::new(v, f)
}

// ---------------------------------------------------------------------------
// Panel influence.

/// `∇_x κ(x − y) = −(x − y) / (4π‖x − y‖³)`.
fn grad_kernel(x: V3, y: V3) -> V3 {
    let r = sub(x, y);
    let d = norm(r);
    scale(r, -1.0 / (4.0 * PI * d * d * d))
}

/// Quadrature of `∇_x κ(x − y)` over the triangle `(a, b, c)` with `levels` rounds
/// of 4-way subdivision.
fn triangle_gradient(x: V3, a: V3, b: V3, c: V3, levels: usize) -> V3 {
    if levels > 0 {
        let (ab, bc, ca) = (scale(add(a, b), 0.5), scale(add(b, c), 0.5), scale(add(c, a), 0.5));
        return [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
            .iter()
            .fold([0.0; 3], |acc, &(p, q, r)| add(acc, triangle_gradient(x, p, q, r, levels - 1)));
    }
    let area = 0.5 * norm(cross(sub(b, a), sub(c, a)));
    triangle_degree5().iter().fold([0.0; 3], |acc, &(l, w)| {
        let y = add(add(scale(a, l[0]), scale(b, l[1])), scale(c, l[2]));
        add(acc, scale(grad_kernel(x, y), w * area))
    })
}

/// Principal value of `∫_T ∇_x κ(x − y) dy` for `x` inside the flat triangle `T`.
///
/// In the plane, `∇_x κ = −(1/4π) ∇_y (1/‖y − x‖)`, so the integral reduces to
/// `−(1/4π) ∮ ν / ‖y − x‖ ds` over the edges with outward in-plane normals `ν`.
/// The normal component vanishes.
fn self_gradient_pv(x: V3, tri: [V3; 3], normal: V3) -> V3 {
    let mut acc = [0.0; 3];
    for k in 0..3 {
        let (p, q) = (tri[k], tri[(k + 1) % 3]);
        let e = sub(q, p);
        let len = norm(e);
        let t = scale(e, 1.0 / len);
        let nu = cross(t, normal);
        let s0 = dot(sub(x, p), t);
        let h = dot(sub(p, x), nu);
        let line = ((len - s0) / h).asinh() + (s0 / h).asinh();
        acc = add(acc, scale(nu, line));
    }
    scale(acc, -1.0 / (4.0 * PI))
}

/// Subdivision levels used for panel `j` seen from centroid `i`.
fn levels_for(mesh: &TriMesh, diam: &[f64], i: usize, j: usize) -> usize {
    let d = norm(sub(mesh.centroids[i], mesh.centroids[j]));
    if d < 2.0 * diam[i].max(diam[j]) {
        1
    } else {
        0
    }
}

/// `∫_{T_j} ∇_x κ(x − y) dy` at a point off `T_j` with `levels` rounds of subdivision.
pub fn panel_gradient(mesh: &TriMesh, x: V3, j: usize, levels: usize) -> V3 {
    let [a, b, c] = mesh.triangles[j].map(|v| mesh.vertices[v]);
    triangle_gradient(x, a, b, c, levels)
}

/// Influence vectors `G[i][j] = ∫_{T_j} ∇_x κ(x_i − y) dy`, row-major `T × T` of 3-vectors.
/// The diagonal holds the in-plane principal value.
pub fn assemble_gradient_matrix(mesh: &TriMesh) -> Vec<V3> {
    let n = mesh.n_faces();
    let diam: Vec<f64> = (0..n).map(|j| mesh.diameter(j)).collect();
    let mut out = vec![[0.0; 3]; n * n];
    crate::par::for_each_row(&mut out, n, |i, row| {
        let x = mesh.centroids[i];
        for (j, g) in row.iter_mut().enumerate() {
            *g = if i == j {
                self_gradient_pv(x, mesh.triangles[j].map(|v| mesh.vertices[v]), mesh.normals[j])
            } else {
                panel_gradient(mesh, x, j, levels_for(mesh, &diam, i, j))
            };
        }
    });
    out
}

/// `A[i][j] = n_i · G[i][j]` off the diagonal, `A[i][i] = −½`.
pub fn flow_matrix_from_gradients(mesh: &TriMesh, g: &[V3]) -> DMatrix<f64> {
    let n = mesh.n_faces();
    DMatrix::from_fn(n, n, |i, j| if i == j { -0.5 } else { dot(mesh.normals[i], g[i * n + j]) })
}

pub fn assemble_flow_matrix(mesh: &TriMesh) -> DMatrix<f64> {
    flow_matrix_from_gradients(mesh, &assemble_gradient_matrix(mesh))
}

/// `Σ_j ∫_{T_j} ∂κ(x − y)/∂n_y dy` at a point off the surface: −1 inside, 0 outside.
pub fn gauss_integral(mesh: &TriMesh, x: V3, levels: usize) -> f64 {
    // ∇_y κ(x − y) = −∇_x κ(x − y).
    (0..mesh.n_faces()).map(|j| -dot(panel_gradient(mesh, x, j, levels), mesh.normals[j])).sum()
}

// ---------------------------------------------------------------------------
// Flow solution.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSolution {
    pub v_inf: V3,
    pub sigma: Vec<f64>,
    pub velocity: Vec<V3>,
    pub cp: Vec<f64>,
}

impl FlowSolution {
    /// `Σ σ_j area_j`, zero for a closed body in uniform flow.
    pub fn net_source(&self, mesh: &TriMesh) -> f64 {
        self.sigma.iter().zip(&mesh.areas).map(|(s, a)| s * a).sum()
    }

    /// CSV with columns `face, cx, cy, cz, cp`.
    pub fn to_csv(&self, mesh: &TriMesh) -> String {
        let mut s = String::from("face,cx,cy,cz,cp\n");
        for (k, (c, cp)) in mesh.centroids.iter().zip(&self.cp).enumerate() {
            let _ = writeln!(s, "{k},{:.12e},{:.12e},{:.12e},{:.12e}", c[0], c[1], c[2], cp);
        }
        s
    }
}

/// Solve for the source density and evaluate exterior surface velocity and `C_p`.
pub fn solve_potential_flow(mesh: &TriMesh, v_inf: V3) -> Result<FlowSolution> {
    let speed2 = dot(v_inf, v_inf);
    if !(speed2 > 0.0 && speed2.is_finite()) {
        return Err(Error::invalid("free-stream velocity must be nonzero and finite"));
    }
    let n = mesh.n_faces();
    let g = assemble_gradient_matrix(mesh);
    let a = flow_matrix_from_gradients(mesh, &g);
    let rhs = DVector::from_iterator(n, mesh.normals.iter().map(|nr| -dot(v_inf, *nr)));
    let sigma = crate::linalg::lu_solve(a, &rhs)?;
    let sigma: Vec<f64> = sigma.iter().copied().collect();
    let velocity: Vec<V3> = crate::par::map_range(n, |i| {
        // Exterior limit: the normal jump −½σ n cancels the normal flux of the solve.
        let mut v = add(v_inf, scale(mesh.normals[i], -0.5 * sigma[i]));
        for j in 0..n {
            v = add(v, scale(g[i * n + j], sigma[j]));
        }
        v
    });
    let cp = velocity.iter().map(|v| 1.0 - dot(*v, *v) / speed2).collect::<Vec<_>>();
    if cp.iter().any(|c| !c.is_finite()) {
        return Err(Error::numerical("non-finite surface velocity"));
    }
    Ok(FlowSolution { v_inf, sigma, velocity, cp })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpReport {
    pub n_faces: usize,
    pub max_abs_err: f64,
    pub mean_abs_err: f64,
    pub rms_err: f64,
    pub cp_max: f64,
    pub cp_min: f64,
}

impl CpReport {
    pub fn csv_header() -> &'static str {
        "n_faces,max_abs_err,mean_abs_err,rms_err,cp_max,cp_min"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
            self.n_faces, self.max_abs_err, self.mean_abs_err, self.rms_err, self.cp_max, self.cp_min
        )
    }
}

/// Potential-flow `C_p = 1 − (9/4) sin²θ` on a sphere at each centroid, with `θ`
/// measured from the free-stream direction about the mesh center.
pub fn sphere_cp_exact(mesh: &TriMesh, v_inf: V3) -> Vec<f64> {
    let c = mesh.center();
    let dir = scale(v_inf, 1.0 / norm(v_inf));
    mesh.centroids
        .iter()
        .map(|&x| {
            let r = sub(x, c);
            let cos = dot(r, dir) / norm(r);
            1.0 - 2.25 * (1.0 - cos * cos)
        })
        .collect()
}

/// Compare a `C_p` field against the analytic sphere profile.
pub fn cp_report(mesh: &TriMesh, v_inf: V3, cp: &[f64]) -> Result<CpReport> {
    if cp.len() != mesh.n_faces() {
        return Err(Error::invalid("cp field does not match the mesh"));
    }
    let exact = sphere_cp_exact(mesh, v_inf);
    let err: Vec<f64> = cp.iter().zip(&exact).map(|(a, b)| (a - b).abs()).collect();
    let n = err.len() as f64;
    Ok(CpReport {
        n_faces: mesh.n_faces(),
        max_abs_err: err.iter().copied().fold(0.0, f64::max),
        mean_abs_err: err.iter().sum::<f64>() / n,
        rms_err: (err.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        cp_max: cp.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        cp_min: cp.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// Solve the flow and compare with the analytic sphere profile.
pub fn sphere_cp_report(mesh: &TriMesh, v_inf: V3) -> Result<CpReport> {
    let sol = solve_potential_flow(mesh, v_inf)?;
    cp_report(mesh, v_inf, &sol.cp)
}

// ---------------------------------------------------------------------------
// Learning data.

#[derive(Serialize)]
struct FlowProvenance<'a> {
    task: &'a str,
    v_inf: V3,
    n_max: usize,
    faces: Vec<usize>,
    mesh_hashes: Vec<String>,
}

/// One sample per mesh: `a` is `v∞` broadcast to every facet, `u` is `C_p`.
pub fn flow_dataset(meshes: &[TriMesh], v_inf: V3, n_max: usize) -> Result<SampleSet> {
    if meshes.is_empty() {
        return Err(Error::invalid("no meshes"));
    }
    let n_max = n_max.max(meshes.iter().map(|m| m.n_faces()).max().unwrap_or(0));
    let prov = FlowProvenance {
        task: "potential_flow",
        v_inf,
        n_max,
        faces: meshes.iter().map(|m| m.n_faces()).collect(),
        mesh_hashes: meshes.iter().map(|m| crate::dataset::sha256_hex(m.to_obj().as_bytes())).collect(),
    };
    let mut set = SampleSet::new(3, 3, 1, n_max, Provenance::from_config(&prov)?);
    for mesh in meshes {
        let sol = solve_potential_flow(mesh, v_inf)?;
        let cloud = mesh.to_cloud()?;
        let a: Vec<f64> = (0..mesh.n_faces()).flat_map(|_| v_inf).collect();
        set.push(&cloud, &a, &sol.cp)?;
    }
    Ok(set)
}
