use super::{ExperimentConfig, Scheme};
use crate::lattice::LatticeKind;
use crate::{Error, Result};

pub const PRESETS: [&str; 5] = ["local-steps", "antennas", "devices", "scale", "lattices"];

/// Laptop-sized base: overlapping 3-class blobs, softmax model, 10 devices,
/// 50 rounds, 10 seeds.
pub fn desk_scale() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seeds: (0..10).collect(),
        ..Default::default()
    };
    c.channel.devices = 10;
    c.training.rounds = 50;
    c.dataset.blobs.train_samples = 2000;
    c.dataset.blobs.test_samples = 1000;
    c.dataset.blobs.separation = 0.3;
    c
}

/// Named sweep applied on top of `base`; each entry is `(label, config)`.
pub fn preset(name: &str, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    let vary = |label: String, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (label, c)
    };
    let out = match name {
        "local-steps" => [1usize, 2, 3, 4]
            .iter()
            .map(|&tau| vary(format!("tau{tau}"), &|c| c.training.local_steps = tau))
            .collect(),
        "antennas" => [5usize, 15, 30]
            .iter()
            .map(|&m| vary(format!("m{m}"), &|c| c.channel.antennas = m))
            .collect(),
        "devices" => [5usize, 10, 20]
            .iter()
            .map(|&k| vary(format!("k{k}"), &|c| c.channel.devices = k))
            .collect(),
        "scale" => [0.25f64, 0.5, 1.0]
            .iter()
            .map(|&rho| vary(format!("rho{rho}"), &|c| c.lattice.scale = rho))
            .collect(),
        "lattices" => {
            let mut v: Vec<_> = [LatticeKind::Identity, LatticeKind::Hexagonal, LatticeKind::E8]
                .iter()
                .map(|&kind| vary(kind.name().to_string(), &|c| c.lattice.kind = kind))
                .collect();
            v.push(vary("ideal".into(), &|c| c.scheme = Scheme::IdealFedavg));
            v
        }
        other => {
            return Err(Error::config(format!(
                "unknown preset '{other}' (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_expand_and_validate() {
        let base = desk_scale();
        base.validate().unwrap();
        for name in PRESETS {
            let v = preset(name, &base).unwrap();
            assert!(v.len() >= 3);
            for (_, c) in v {
                c.validate().unwrap();
            }
        }
        assert!(preset("nope", &base).is_err());
    }
}
