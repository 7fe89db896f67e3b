mod common;

use proptest::prelude::*;
use ptloop_core::dosing::{lt_signal, DoseSchedule, Medication, SECONDS_PER_DAY};
use ptloop_core::{ModelParameters, Variant};

#[test]
fn multi_dose_signal_is_sum_of_single_doses() {
    common::dose_superposition().unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn scaling_a_schedule_scales_the_signal(doses in prop::collection::vec(0.0f64..200.0, 1..10), t in 0.0f64..12.0, k in 0.0f64..2.0) {
        let p = ModelParameters::for_variant(Variant::Hypo);
        let base = lt_signal(&DoseSchedule::new(Medication::Lt4, doses.clone()).unwrap(), &p).unwrap();
        let scaled_doses: Vec<f64> = doses.iter().map(|d| (d * k).min(400.0)).collect();
        prop_assume!(scaled_doses.iter().zip(&doses).all(|(s, d)| (s - d * k).abs() < 1e-12));
        let scaled = lt_signal(&DoseSchedule::new(Medication::Lt4, scaled_doses).unwrap(), &p).unwrap();
        let t = t * SECONDS_PER_DAY;
        let (a, b) = (scaled.eval(t), k * base.eval(t));
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300));
    }
}
