mod common;

use bubblegan_core::graph::shortest_path_matrix;
use bubblegan_core::metrics::{compatibility_partial, frechet_distance, rects_adjacent, ADJACENCY_GAP};
use bubblegan_core::synth::Rect;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

#[test]
fn shortest_paths_match_floyd_warshall() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let d = random_diagram(&mut rng, 10);
        assert_eq!(shortest_path_matrix(&d).entries(), floyd_warshall(&d).as_slice(), "{d:?}");
    }
}

#[test]
fn adjacency_rule_matches_pixel_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..300 {
        let (a, b) = (random_rect(&mut rng), random_rect(&mut rng));
        assert_eq!(rects_adjacent(&a, &b), pixel_adjacent(&a, &b, ADJACENCY_GAP), "{a} {b}");
    }
    // just-touching and just-too-far neighbours
    let a = Rect::new(0, 0, 10, 10).unwrap();
    for (x0, expected) in [(10, true), (12, true), (13, false)] {
        let b = Rect::new(x0, 5, x0 + 4, 20).unwrap();
        assert_eq!(rects_adjacent(&a, &b), expected);
        assert_eq!(pixel_adjacent(&a, &b, ADJACENCY_GAP), expected);
    }
}

#[test]
fn compatibility_matches_exhaustive_edit_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let d = random_diagram(&mut rng, 6);
        let rects: Vec<Option<Rect>> = (0..d.num_rooms())
            .map(|_| rng.random_bool(0.9).then(|| random_rect(&mut rng)))
            .collect();
        assert_eq!(compatibility_partial(&d, &rects).unwrap(), compatibility_oracle(&d, &rects, ADJACENCY_GAP));
    }
}

fn to_na(mu: &[f64], c: &Mat) -> (DVector<f64>, DMatrix<f64>) {
    let n = mu.len();
    (DVector::from_column_slice(mu), DMatrix::from_fn(n, n, |i, j| c[i][j]))
}

#[test]
fn frechet_matches_jacobi_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let mu1: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mu2: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (c1, c2) = (random_spd(&mut rng, 4), random_spd(&mut rng, 4));
        let (m1, s1) = to_na(&mu1, &c1);
        let (m2, s2) = to_na(&mu2, &c2);
        let got = frechet_distance(&m1, &s1, &m2, &s2).unwrap();
        let want = frechet_oracle(&mu1, &c1, &mu2, &c2);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        let swapped = frechet_distance(&m2, &s2, &m1, &s1).unwrap();
        assert!((got - swapped).abs() < 1e-6);
    }
}

#[test]
fn frechet_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mu: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = random_spd(&mut rng, 4);
    let (m, s) = to_na(&mu, &c);
    assert!(frechet_distance(&m, &s, &m, &s).unwrap().abs() < 1e-6);
    let shift = DVector::from_column_slice(&[1.0, -2.0, 0.5, 3.0]);
    let d = frechet_distance(&m, &s, &(&m + &shift), &s).unwrap();
    assert!((d - shift.norm_squared()).abs() < 1e-6);
}
