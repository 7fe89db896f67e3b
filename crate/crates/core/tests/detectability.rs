mod common;

use ptloop_core::detectability::{sample_pairs, verify_pairs, IossCertificate};
use ptloop_core::integrator::IntegratorConfig;
use ptloop_core::sampling::Scheme;
use ptloop_core::{ModelParameters, Variant};

#[test]
fn recursive_and_direct_bounds_agree() {
    common::iioss_recursion_agreement().unwrap();
}

#[test]
fn published_certificates_hold_on_a_small_sample() {
    for variant in [Variant::Hypo, Variant::Hyper] {
        let p = ModelParameters::for_variant(variant);
        let pairs = sample_pairs(42, 12, variant, 90, &p, &IntegratorConfig::default()).unwrap();
        for scheme in Scheme::ALL {
            let cert = IossCertificate::published(variant, scheme);
            let report = verify_pairs(&pairs, &cert, scheme, IossCertificate::default_start(variant), 42).unwrap();
            assert_eq!(report.violations, 0, "{variant} {scheme}: worst ratio {}", report.max_ratio);
            assert_eq!(report.seeds.len(), 12);
        }
    }
}
