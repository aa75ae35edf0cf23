use std::time::Instant;

use proptest::prelude::*;
use rand::Rng;
use zia_core::edgecost::{quantize, quantize_value, QUANT_SCALE};
use zia_core::matrix::Matrix;
use zia_core::rng;

// Nearest representable code by exhaustive search over every code.
fn nearest_code(w: f64) -> i8 {
    (-127i8..=127)
        .min_by(|&a, &b| {
            let da = (a as f64 * QUANT_SCALE - w).abs();
            let db = (b as f64 * QUANT_SCALE - w).abs();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap()
}

#[test]
fn million_weight_round_trip_stays_under_half_a_step() {
    let start = Instant::now();
    let mut r = rng::stream(1, "quant.sweep");
    let data: Vec<f64> = (0..1_000_000).map(|_| r.gen_range(-0.99..=0.99)).collect();
    let w = Matrix::from_vec(1000, 1000, data).unwrap();
    let q = quantize(&w);
    let back = q.dequantize::<f64>();
    let bound = 2f64.powi(-8);
    let errs: Vec<f64> = w
        .as_slice()
        .iter()
        .zip(back.as_slice())
        .map(|(a, b)| (a - b).abs())
        .collect();
    let max = errs.iter().copied().fold(0.0, f64::max);
    let violations = errs.iter().filter(|&&e| e >= bound).count();
    assert_eq!(q.saturated, 0);
    assert_eq!(violations, 0);
    assert!(max < bound, "max error {max}");
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn out_of_range_values_saturate() {
    assert_eq!(quantize_value(1.5), (127, true));
    assert_eq!(quantize_value(-2.0), (-127, true));
    assert_eq!(quantize_value(f64::NAN), (0, true));
}

proptest! {
    #[test]
    fn code_is_the_nearest_representable_value(w in -0.99f64..0.99) {
        let (c, sat) = quantize_value(w);
        prop_assert!(!sat);
        let oracle = nearest_code(w);
        let tie = ((w / QUANT_SCALE).fract().abs() - 0.5).abs() < 1e-12;
        prop_assert!(c == oracle || tie, "w {} code {} oracle {}", w, c, oracle);
        prop_assert!((c as f64 * QUANT_SCALE - w).abs() <= QUANT_SCALE / 2.0);
    }
}
