//! Scenario files shipped with the crate.

use crate::error::{Error, Result};
use crate::scenario::{parse_scenario, Scenario};

pub const BUNDLED: &[(&str, &str)] = &[
    ("case1_explicit", include_str!("../../../scenarios/case1_explicit.toml")),
    ("case1_implicit", include_str!("../../../scenarios/case1_implicit.toml")),
    ("case2_cross_forming", include_str!("../../../scenarios/case2_cross_forming.toml")),
    ("case2_limiter_va", include_str!("../../../scenarios/case2_limiter_va.toml")),
    ("case2_adaptive_vi", include_str!("../../../scenarios/case2_adaptive_vi.toml")),
    ("case2_current_forming", include_str!("../../../scenarios/case2_current_forming.toml")),
    ("case3_mode1", include_str!("../../../scenarios/case3_mode1.toml")),
    ("case3_mode2", include_str!("../../../scenarios/case3_mode2.toml")),
    ("case3_mode3", include_str!("../../../scenarios/case3_mode3.toml")),
    ("case3_mode4", include_str!("../../../scenarios/case3_mode4.toml")),
    ("case4a", include_str!("../../../scenarios/case4a.toml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

pub fn source(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn load(name: &str) -> Result<Scenario> {
    let text = source(name).ok_or_else(|| {
        Error::config(format!(
            "no bundled scenario \"{name}\" (available: {})",
            names().collect::<Vec<_>>().join(", ")
        ))
    })?;
    parse_scenario(text)
}
