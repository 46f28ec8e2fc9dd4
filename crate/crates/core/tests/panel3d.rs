use pcno::panel3d::*;
use std::f64::consts::PI;

const CUBE: &str = "\
# unit cube scaled by 2
v 0 0 0
v 2 0 0
v 2 2 0
v 0 2 0
v 0 0 2
v 2 0 2
v 2 2 2
v 0 2 2
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
";

fn rotation(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|a| a / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn apply(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

#[test]
fn icosphere_combinatorics() {
    let m = icosphere(3).unwrap();
    assert_eq!((m.vertices.len(), m.n_faces()), (642, 1280));
    assert_eq!(m.euler_characteristic(), 2);
    assert!(m.watertight && m.consistently_oriented && !m.flipped);
    assert!((m.total_area() - 4.0 * PI).abs() < 0.05 * 4.0 * PI);
    let again = parse_obj(&m.to_obj()).unwrap();
    assert_eq!(again.triangles, m.triangles);
}

#[test]
fn bundled_icosphere_matches_the_generator() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/icosphere_1280.obj");
    let m = load_mesh(std::path::Path::new(path), MeshFormat::Obj).unwrap();
    assert_eq!(m.n_faces(), 1280);
    assert_eq!(m.euler_characteristic(), 2);
}

#[test]
fn cube_volume_and_orientation() {
    let cube = parse_obj(CUBE).unwrap();
    assert_eq!(cube.n_faces(), 12);
    assert!((cube.signed_volume() - 8.0).abs() < 1e-12);
    assert!(cube.watertight && cube.consistently_oriented && !cube.flipped);
    for (n, c) in cube.normals.iter().zip(&cube.centroids) {
        let out = [c[0] - 1.0, c[1] - 1.0, c[2] - 1.0];
        assert!(n[0] * out[0] + n[1] * out[1] + n[2] * out[2] > 0.0);
    }

    let reversed: String = CUBE
        .lines()
        .map(|l| match l.strip_prefix("f ") {
            Some(rest) => {
                let v: Vec<&str> = rest.split_whitespace().collect();
                format!("f {} {} {}\n", v[0], v[2], v[1])
            }
            None => format!("{l}\n"),
        })
        .collect();
    let flipped = parse_obj(&reversed).unwrap();
    assert!(flipped.flipped);
    assert!((flipped.signed_volume() - 8.0).abs() < 1e-12);
    for (a, b) in flipped.normals.iter().zip(&cube.normals) {
        assert!((0..3).all(|k| (a[k] - b[k]).abs() < 1e-15));
    }
}

#[test]
fn obj_variants_and_stl() {
    let quad = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nv 0 0 1\nf 1/1/1 2/2/2 3/3/3 4/4/4\nf -5 -1 -4\nf 2 5 3\nf 3 5 4\nf 4 5 1\n";
    let m = parse_obj(quad).unwrap();
    assert_eq!(m.n_faces(), 6);
    assert!(m.watertight);
    assert!((m.signed_volume() - 1.0 / 3.0).abs() < 1e-12);

    let mut stl = String::from("solid cube\n");
    let cube = parse_obj(CUBE).unwrap();
    for t in &cube.triangles {
        stl.push_str("facet normal 0 0 0\nouter loop\n");
        for &v in t {
            let p = cube.vertices[v];
            stl.push_str(&format!("vertex {} {} {}\n", p[0], p[1], p[2]));
        }
        stl.push_str("endloop\nendfacet\n");
    }
    stl.push_str("endsolid cube\n");
    let s = parse_stl_ascii(&stl).unwrap();
    assert_eq!(s.vertices.len(), 8);
    assert!(s.watertight);
    assert!((s.signed_volume() - 8.0).abs() < 1e-12);

    assert!(parse_obj("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n").is_err());
    assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
    assert!(MeshFormat::from_path(std::path::Path::new("a.ply")).is_err());
}

#[test]
fn gauss_identity_inside_and_outside() {
    let m = icosphere(3).unwrap();
    for x in [[0.0, 0.0, 0.0], [0.2, -0.1, 0.3], [-0.4, 0.3, 0.1]] {
        let g = gauss_integral(&m, x, 0);
        assert!((g + 1.0).abs() < 1e-3, "{x:?}: {g}");
    }
    assert!(gauss_integral(&m, [2.0, 0.5, 0.0], 0).abs() < 1e-3);
}

#[test]
fn mirror_symmetric_meshes_give_equal_matrices() {
    let m = icosphere(2).unwrap();
    let mirrored = m.map_vertices(|v| [-v[0], v[1], v[2]]).unwrap();
    assert!(mirrored.flipped);
    let (a, b) = (assemble_flow_matrix(&m), assemble_flow_matrix(&mirrored));
    let worst = (a - b).abs().max();
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn refining_quadrature_barely_changes_separated_entries() {
    let m = icosphere(2).unwrap();
    let diam = |j: usize| {
        let [a, b, c] = m.triangles[j].map(|v| m.vertices[v]);
        let d = |p: [f64; 3], q: [f64; 3]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
        d(a, b).max(d(b, c)).max(d(c, a))
    };
    let mut worst: f64 = 0.0;
    for i in (0..m.n_faces()).step_by(7) {
        for j in 0..m.n_faces() {
            let c = m.centroids[i];
            let e = m.centroids[j];
            let dist = ((c[0] - e[0]).powi(2) + (c[1] - e[1]).powi(2) + (c[2] - e[2]).powi(2)).sqrt();
            if i == j || dist < 2.0 * diam(i).max(diam(j)) {
                continue;
            }
            let g0 = panel_gradient(&m, c, j, 0);
            let g1 = panel_gradient(&m, c, j, 1);
            worst = worst.max((0..3).map(|k| (g0[k] - g1[k]).abs()).fold(0.0, f64::max));
        }
    }
    assert!(worst <= 1e-5, "{worst}");
}

#[test]
fn sphere_flow_matches_the_analytic_profile() {
    let m = icosphere(3).unwrap();
    let sol = solve_potential_flow(&m, [1.0, 0.0, 0.0]).unwrap();
    let stag = (0..m.n_faces()).max_by(|&a, &b| m.centroids[a][0].abs().total_cmp(&m.centroids[b][0].abs())).unwrap();
    assert!((0.93..=1.0).contains(&sol.cp[stag]), "{}", sol.cp[stag]);
    let min = sol.cp.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!((-1.35..=-1.15).contains(&min), "{min}");
    assert!(sol.cp.iter().all(|&c| c <= 1.0 + 1e-9));

    let total: f64 = sol.sigma.iter().zip(&m.areas).map(|(s, a)| s.abs() * a).sum();
    assert!(sol.net_source(&m).abs() <= 1e-3 * total);

    let report = cp_report(&m, [1.0, 0.0, 0.0], &sol.cp).unwrap();
    assert!(report.max_abs_err <= 0.05, "{report:?}");

    // Normal velocity vanishes on the body.
    for (v, n) in sol.velocity.iter().zip(&m.normals) {
        assert!((v[0] * n[0] + v[1] * n[1] + v[2] * n[2]).abs() < 1e-9);
    }
}

#[test]
fn cp_is_invariant_under_inflow_scaling() {
    let m = icosphere(2).unwrap();
    let a = solve_potential_flow(&m, [1.0, 0.0, 0.0]).unwrap();
    let b = solve_potential_flow(&m, [2.0, 0.0, 0.0]).unwrap();
    let worst = a.cp.iter().zip(&b.cp).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-12, "{worst}");
    assert!(solve_potential_flow(&m, [0.0; 3]).is_err());
}

#[test]
fn cp_is_invariant_under_rotation() {
    let m = icosphere(2).unwrap().map_vertices(|v| [1.3 * v[0], v[1], 0.8 * v[2]]).unwrap();
    let r = rotation([0.3, -1.0, 0.7], 0.9);
    let rotated = m.map_vertices(|v| apply(&r, v)).unwrap();
    let v_inf = [1.0, 0.4, -0.2];
    let a = solve_potential_flow(&m, v_inf).unwrap();
    let b = solve_potential_flow(&rotated, apply(&r, v_inf)).unwrap();
    let worst = a.cp.iter().zip(&b.cp).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-10, "{worst}");
}

#[test]
fn refinement_reduces_the_sphere_error() {
    let coarse = sphere_cp_report(&icosphere(2).unwrap(), [1.0, 0.0, 0.0]).unwrap();
    let fine = sphere_cp_report(&icosphere(3).unwrap(), [1.0, 0.0, 0.0]).unwrap();
    assert!(fine.max_abs_err < coarse.max_abs_err, "{coarse:?} {fine:?}");
    assert_eq!(CpReport::csv_header().split(',').count(), fine.csv_row().split(',').count());
}

#[test]
fn exact_field_has_zero_report_error() {
    let m = icosphere(2).unwrap();
    let exact = sphere_cp_exact(&m, [0.0, 3.0, 0.0]);
    let r = cp_report(&m, [0.0, 3.0, 0.0], &exact).unwrap();
    assert_eq!(r.max_abs_err, 0.0);
    assert_eq!(r.rms_err, 0.0);
}

#[test]
fn flow_dataset_samples() {
    let m = icosphere(2).unwrap();
    let one = flow_dataset(std::slice::from_ref(&m), [1.0, 0.0, 0.0], 0).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!((one.dims, one.d_a, one.d_u), (3, 3, 1));
    assert!(one.samples[0].u.iter().all(|&c| (-1.35..=1.0).contains(&c)));

    let two = flow_dataset(&[m.clone(), m.clone()], [1.0, 0.0, 0.0], 400).unwrap();
    assert_eq!(two.samples[0], two.samples[1]);
    assert_eq!(two.n_max, 400);
    assert!(two.samples.iter().all(|s| s.cloud.mask.iter().filter(|&&b| b).count() == m.n_faces()));
    assert!(flow_dataset(&[], [1.0, 0.0, 0.0], 0).is_err());
}
