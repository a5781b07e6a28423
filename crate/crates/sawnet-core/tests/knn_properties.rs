//! Property tests pinning the neighbor search to the full-sort oracle.

use proptest::prelude::*;
use sawnet_core::graph::{knn, knn_by_full_sort};
use sawnet_core::tensor::Tensor;

fn rows_match(pts: &Tensor<f64>, n: usize, k: usize) -> Result<(), TestCaseError> {
    let got = knn(pts, k).unwrap();
    let want = knn_by_full_sort(pts, k).unwrap();
    let gi = got.indices();
    let rows = gi.len() / k;
    for row in 0..rows {
        let mut a: Vec<usize> = gi[row * k..(row + 1) * k].to_vec();
        let mut b: Vec<usize> = want[row * k..(row + 1) * k].to_vec();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b, "row {} of {} (n={}, k={})", row, rows, n, k);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn neighborhoods_match_the_oracle(
        (n, k, pts) in (2usize..28).prop_flat_map(|n| {
            (Just(n), 1..n, prop::collection::vec(-1.0f64..1.0, n * 3))
        })
    ) {
        let x = Tensor::new(&[1, n, 3], pts).unwrap();
        rows_match(&x, n, k)?;
    }

    // Coordinates on a coarse grid force many exact distance ties; set
    // agreement then proves both sides break ties the same way.
    #[test]
    fn tie_breaking_matches_the_oracle(
        (n, k, pts) in (3usize..20).prop_flat_map(|n| {
            (
                Just(n),
                1..n,
                prop::collection::vec(prop::sample::select(vec![-0.5f64, 0.0, 0.5]), n * 3),
            )
        })
    ) {
        let x = Tensor::new(&[1, n, 3], pts).unwrap();
        rows_match(&x, n, k)?;
    }

    #[test]
    fn batched_clouds_match_solo_clouds(
        (n, k, pts) in (2usize..16).prop_flat_map(|n| {
            (Just(n), 1..n, prop::collection::vec(-1.0f64..1.0, 2 * n * 3))
        })
    ) {
        let both = Tensor::new(&[2, n, 3], pts.clone()).unwrap();
        let batched = knn(&both, k).unwrap();
        for b in 0..2 {
            let solo = Tensor::new(&[1, n, 3], pts[b * n * 3..(b + 1) * n * 3].to_vec()).unwrap();
            let alone = knn(&solo, k).unwrap();
            let lo = b * n * k;
            prop_assert_eq!(
                &batched.indices()[lo..lo + n * k],
                alone.indices(),
                "cloud {} diverges when batched", b
            );
        }
    }
}

#[test]
fn self_is_never_its_own_neighbor() {
    let pts: Vec<f64> = (0..12 * 3).map(|i| (i as f64 * 0.7).cos()).collect();
    let x = Tensor::new(&[1, 12, 3], pts).unwrap();
    let g = knn(&x, 5).unwrap();
    for (row, chunk) in g.indices().chunks(5).enumerate() {
        assert!(!chunk.contains(&row), "point {row} listed itself");
    }
}
