mod common;

use perfinline::features::{extract_callsite_features, extract_function_features, CalleeFeatureVector};
use perfinline::perf_oracle::CostModel;
use perfinline::progmodel::{apply_inline, generate_program, GenConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn extraction_is_pure(m in common::module()) {
        let cm = CostModel::default();
        for f in m.functions.keys() {
            let a = extract_function_features(&m, f).unwrap();
            let b = extract_function_features(&m.clone(), f).unwrap();
            prop_assert_eq!(a, b);
        }
        for cs in m.call_sites() {
            prop_assert_eq!(
                extract_callsite_features(&m, &cs, &cm).unwrap(),
                extract_callsite_features(&m, &cs, &cm).unwrap()
            );
        }
    }

    #[test]
    fn caller_call_count_tracks_inlining(m in common::module()) {
        for cs in m.call_sites().into_iter().filter(|c| !c.is_direct_recursion()) {
            let before = extract_function_features(&m, &cs.caller).unwrap().calls_no;
            let out = apply_inline(&m, cs.id).unwrap();
            let after = extract_function_features(&out, &cs.caller).unwrap().calls_no;
            let cloned = m.functions[&cs.callee].calls().count() as f64;
            prop_assert_eq!(after - before, cloned - 1.0);
        }
    }

    #[test]
    fn sibling_sites_differ_only_in_location(m in common::module()) {
        let cm = CostModel::default();
        let sites = m.call_sites();
        let site_specific = ["CallSiteBlockFreq", "CallSiteLoopLevel", "NrConstantParams"];
        for a in &sites {
            for b in sites.iter().filter(|b| b.id > a.id && b.caller == a.caller && b.callee == a.callee) {
                let fa = extract_callsite_features(&m, a, &cm).unwrap().to_array();
                let fb = extract_callsite_features(&m, b, &cm).unwrap().to_array();
                for (i, name) in CalleeFeatureVector::NAMES.iter().enumerate() {
                    if !site_specific.contains(name) {
                        prop_assert_eq!(fa[i], fb[i], "{}", name);
                    }
                }
            }
        }
    }
}

#[test]
fn features_are_finite_over_ten_thousand_modules() {
    let cm = CostModel::default();
    for seed in 0..10_000u64 {
        let cfg = GenConfig {
            seed,
            n_functions: 1 + (seed % 7) as usize,
            recursion_probability: if seed % 3 == 0 { 0.2 } else { 0.0 },
            callsite_density: 0.1 * (seed % 6) as f64,
            ..GenConfig::default()
        };
        let m = generate_program(&cfg).unwrap();
        for f in m.functions.keys() {
            let v = extract_function_features(&m, f).unwrap();
            assert!(v.is_valid(), "seed {seed} function {f}: {v:?}");
        }
        for cs in m.call_sites() {
            let v = extract_callsite_features(&m, &cs, &cm).unwrap();
            assert!(v.is_valid(), "seed {seed} site {}: {v:?}", cs.id);
        }
    }
}
