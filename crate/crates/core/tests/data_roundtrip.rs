//! Standardization followed by its inverse recovers the data.

use braids::data::{standardize, Covariate, Dataset, Propensity};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn dataset() -> impl Strategy<Value = Dataset> {
    (3usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-1e3f64..1e3, n),
            prop::collection::vec(-50.0f64..50.0, n),
            prop::collection::vec(0u8..3, n),
            1e-3f64..1e3,
        )
            .prop_filter_map("needs spread in y and x1", move |(y, x1, f, scale)| {
                let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { x1[i] * scale } else { f64::from(f[i]) });
                let a = (0..n).map(|i| (i % 2) as u8).collect();
                let cols = vec![Covariate::continuous("x1"), Covariate::categorical("f", 3)];
                let d = Dataset::new(y, a, x, cols, Propensity::Constant(0.5)).ok()?;
                standardize(&d).ok().map(|_| d)
            })
    })
}

proptest! {
    #[test]
    fn invert_undoes_standardize(d in dataset()) {
        let (s, recipe) = standardize(&d).unwrap();
        let back = recipe.invert(&s);
        for (a, b) in d.y().iter().zip(back.y()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        for (a, b) in d.x().iter().zip(back.x().iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        prop_assert_eq!(back.treatment(), d.treatment());
        // Categorical codes pass through untouched.
        prop_assert_eq!(s.x().column(1), d.x().column(1));
    }
}
