use morphprint_core::flatten::{
    beltrami_coefficient, extract_boundary, harmonic_map, linear_beltrami_solver,
    rectangle_boundary_from_corners, BoundaryCondition, PlanarMap, Vec2,
};
use morphprint_core::mesh::{
    cotangent_laplacian, dirichlet_energy, inflate_surface, project_to_sphere, shapes, TriMesh,
    Vec3,
};
use morphprint_core::model::{margin_loss_value, nt_xent_value};
use morphprint_core::raster::{AugmentPolicy, FeatureImage, PartitionSet};
use morphprint_core::train::{similarity_matrix, topk_accuracy, SimilarityMatrix};
use proptest::prelude::*;

/// Sort each row by distance with the self entry placed after every tie.
fn brute_topk(m: &[Vec<f64>], k: usize) -> f64 {
    let n = m.len();
    let hits = (0..n)
        .filter(|&i| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                m[i][a]
                    .partial_cmp(&m[i][b])
                    .unwrap()
                    .then((a == i).cmp(&(b == i)))
            });
            order.iter().position(|&j| j == i).unwrap() < k
        })
        .count();
    hits as f64 / n as f64
}

fn matrix_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, bool)> {
    (2usize..=30, any::<bool>()).prop_flat_map(|(n, ties)| {
        let cell = if ties {
            (0u8..4).prop_map(f64::from).boxed()
        } else {
            (0.0f64..10.0).boxed()
        };
        (
            proptest::collection::vec(proptest::collection::vec(cell, n), n),
            Just(ties),
        )
    })
}

/// Planar grid with jittered interior vertices.
fn jittered_grid(n: usize, jitter: &[(f64, f64)]) -> TriMesh {
    let g = shapes::planar_grid(n, n, 1.0, 1.0);
    let h = 0.3 / n as f64;
    let v: Vec<Vec3> = g
        .vertices()
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let interior = p.x > 1e-9 && p.x < 1.0 - 1e-9 && p.y > 1e-9 && p.y < 1.0 - 1e-9;
            let (dx, dy) = jitter[k % jitter.len()];
            if interior {
                Vec3::new(p.x + h * dx, p.y + h * dy, p.z)
            } else {
                *p
            }
        })
        .collect();
    g.with_vertices(v)
}

fn grid_bc(mesh: &TriMesh, n: usize) -> BoundaryCondition {
    let lp = extract_boundary(mesh).unwrap();
    rectangle_boundary_from_corners(&lp, mesh.vertices(), [0, n, 2 * n, 3 * n], 1.0, 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn topk_matches_brute_force((m, _ties) in matrix_strategy()) {
        let sm = SimilarityMatrix::from_data(m.len(), m.len(), m.concat()).unwrap();
        let n = m.len();
        for k in [1usize, 5, n] {
            prop_assert_eq!(topk_accuracy(&sm, k).unwrap(), brute_topk(&m, k));
        }
        prop_assert!(topk_accuracy(&sm, 1).unwrap() <= topk_accuracy(&sm, 5).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn self_similarity_is_symmetric_with_zero_diagonal(
        rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 6), 2..12)
    ) {
        let m = similarity_matrix(&rows, &rows).unwrap();
        let (n, _) = m.shape();
        for i in 0..n {
            prop_assert_eq!(m.get(i, i), 0.0);
            for j in 0..n {
                prop_assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }

    #[test]
    fn laplacian_annihilates_constants(jitter in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 7)) {
        let mesh = jittered_grid(6, &jitter);
        let l = cotangent_laplacian(&mesh);
        let y = l.mul_vec(&vec![1.0; mesh.n_vertices()]);
        prop_assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn beltrami_ignores_similarities_of_the_image(
        jitter in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 5),
        angle in -3.0f64..3.0,
        scale in 0.2f64..5.0,
        shift in (-2.0f64..2.0, -2.0f64..2.0),
    ) {
        let mesh = jittered_grid(5, &jitter);
        let map = harmonic_map(&mesh, &grid_bc(&shapes::planar_grid(5, 5, 1.0, 1.0), 5)).unwrap();
        let (c, s) = (angle.cos(), angle.sin());
        let moved = PlanarMap {
            uv: map.uv.iter().map(|p| Vec2::new(scale * (c * p.x - s * p.y) + shift.0, scale * (s * p.x + c * p.y) + shift.1)).collect(),
        };
        let a = beltrami_coefficient(&mesh, &map).unwrap();
        let b = beltrami_coefficient(&mesh, &moved).unwrap();
        for (x, y) in a.mu.iter().zip(&b.mu) {
            prop_assert!((x - y).norm() < 1e-10);
        }
    }

    #[test]
    fn lbs_reproduces_the_coefficient_of_its_output(
        jitter in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 5),
        amp in -0.08f64..0.08,
    ) {
        // smooth interior warp that fixes the boundary, so the square bc is compatible
        let grid = shapes::planar_grid(6, 6, 1.0, 1.0);
        let target = PlanarMap {
            uv: grid
                .vertices()
                .iter()
                .map(|p| {
                    let b = (std::f64::consts::PI * p.x).sin() * (std::f64::consts::PI * p.y).sin();
                    Vec2::new(p.x + amp * b, p.y - 0.5 * amp * b)
                })
                .collect(),
        };
        let mesh = jittered_grid(6, &jitter);
        let bc = grid_bc(&grid, 6);
        let mu = beltrami_coefficient(&mesh, &target).unwrap();
        let rebuilt = linear_beltrami_solver(&mesh, &mu, &bc).unwrap();
        let err = rebuilt.uv.iter().zip(&target.uv).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        prop_assert!(err < 1e-6, "vertex error {}", err);
        let again = beltrami_coefficient(&mesh, &rebuilt).unwrap();
        for (x, y) in again.mu.iter().zip(&mu.mu) {
            prop_assert!((x - y).norm() < 1e-4);
        }
    }

    #[test]
    fn inflation_lowers_dirichlet_energy(
        radii in proptest::collection::vec(0.8f64..1.2, 42),
        step in 0.05f64..0.95,
    ) {
        let s = shapes::icosphere(1, 1.0);
        let bumpy = s.with_vertices(s.vertices().iter().zip(&radii).map(|(v, r)| v * *r).collect());
        let out = inflate_surface(&bumpy, 1, step).unwrap();
        prop_assert!(dirichlet_energy(&out.mesh) < dirichlet_energy(&bumpy));
    }

    #[test]
    fn sphere_projection_has_unit_norms(radii in proptest::collection::vec(0.5f64..2.0, 162)) {
        let s = shapes::icosphere(2, 1.0);
        let bumpy = s.with_vertices(s.vertices().iter().zip(&radii).map(|(v, r)| v * *r).collect());
        let p = project_to_sphere(&bumpy).unwrap();
        prop_assert!(p.vertices().iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn margin_loss_is_nonnegative_and_zero_only_when_satisfied(
        d in proptest::collection::vec(0.0f64..3.0, 1..12),
        labels in proptest::collection::vec(0u8..2, 12),
        m in 0.1f64..2.0,
    ) {
        let labels = &labels[..d.len()];
        let l = margin_loss_value(&d, labels, m).unwrap();
        prop_assert!(l >= 0.0);
        let satisfied = d.iter().zip(labels).all(|(&x, &y)| if y == 0 { x == 0.0 } else { x >= m });
        prop_assert_eq!(l == 0.0, satisfied);
    }

    #[test]
    fn nt_xent_falls_when_a_positive_moves_closer(
        d in proptest::collection::vec(proptest::collection::vec(0.1f64..3.0, 5), 5),
        i in 0usize..5,
        shrink in 0.05f64..0.95,
        tau in 0.1f64..2.0,
    ) {
        let mut closer = d.clone();
        closer[i][i] *= shrink;
        prop_assert!(nt_xent_value(&closer, tau).unwrap() < nt_xent_value(&d, tau).unwrap());
    }

    #[test]
    fn augmentation_keeps_shape_and_finiteness(
        seed in any::<u64>(),
        rot in 0.0f64..45.0,
        noise in 0.0f64..0.2,
        blur in 0.0f64..2.0,
        shared in any::<bool>(),
    ) {
        let set = PartitionSet::new(std::array::from_fn(|p| {
            let data = (0..3 * 12 * 10).map(|k| ((k + 7 * p) as f64 * 0.21).cos()).collect();
            let mask = (0..120).map(|k| (k / 10 + k % 10) % 7 != 0).collect();
            FeatureImage::from_parts(3, 12, 10, data, mask).unwrap()
        }))
        .unwrap();
        let policy = AugmentPolicy {
            max_rotation_deg: rot,
            noise_sigma: (0.0, noise),
            blur_sigma: (0.0, blur),
            shared_across_partitions: shared,
        };
        let out = policy.apply(&set, seed);
        prop_assert_eq!(out.shape(), set.shape());
        prop_assert!(out.images.iter().all(|im| im.is_finite()));
        prop_assert_eq!(AugmentPolicy::identity().apply(&set, seed), set);
    }
}
