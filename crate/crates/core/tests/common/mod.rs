#![allow(dead_code)]

use perfinline::progmodel::{generate_program, GenConfig, Module};
use proptest::prelude::*;

/// Generator knobs spanning the shapes the pipeline meets, recursion
/// included.
pub fn gen_config() -> impl Strategy<Value = GenConfig> {
    (
        any::<u64>(),
        1usize..8,
        0.0f64..0.6,
        0.0f64..0.5,
        0.0f64..0.5,
        0.0f64..0.3,
        0.0f64..1.0,
    )
        .prop_map(|(seed, n, density, lp, bp, rec, arith)| GenConfig {
            seed,
            n_functions: n,
            callsite_density: density,
            loop_probability: lp,
            branch_probability: bp,
            recursion_probability: rec,
            arith_fraction: arith,
            ..GenConfig::default()
        })
}

pub fn acyclic_config() -> impl Strategy<Value = GenConfig> {
    gen_config().prop_map(|c| GenConfig {
        recursion_probability: 0.0,
        ..c
    })
}

pub fn module() -> impl Strategy<Value = Module> {
    gen_config().prop_map(|c| generate_program(&c).expect("valid knobs"))
}

pub fn acyclic_module() -> impl Strategy<Value = Module> {
    acyclic_config().prop_map(|c| generate_program(&c).expect("valid knobs"))
}
