#![allow(dead_code)]

use std::collections::BTreeMap;

use nextloc::config::ModelConfig;
use nextloc::data::{DataConfig, MultiCityCorpus};
use nextloc::synth::{
    default_archetypes, generate, Archetype, CitySpec, Site, SynthOutput, SynthSpec,
};

pub fn city(rows: usize, cols: usize, users: usize, mixing: &[f64]) -> CitySpec {
    CitySpec {
        rows,
        cols,
        users,
        mixing: mixing.to_vec(),
        days: None,
        center: (30.0, 120.0),
    }
}

pub fn spec(
    seed: u64,
    days: u32,
    archetypes: Vec<Archetype>,
    cities: &[(&str, CitySpec)],
) -> SynthSpec {
    SynthSpec {
        seed,
        days,
        stay_mean: 3.0,
        cell_size_m: 500.0,
        archetypes,
        cities: cities
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect::<BTreeMap<_, _>>(),
    }
}

pub fn corpus(s: &SynthSpec) -> MultiCityCorpus {
    generate(s).unwrap().corpus(&DataConfig::default()).unwrap()
}

pub fn synth(s: &SynthSpec) -> SynthOutput {
    generate(s).unwrap()
}

/// Home, work, a fixed point, and back home; every day restarts at home.
pub fn routine() -> Archetype {
    Archetype {
        name: "routine".into(),
        sites: vec![Site::Home, Site::Work, Site::Point { x: 0.5, y: 0.5 }],
        transitions: vec![
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
        ],
        start: 0,
        daily_reset: Some(0),
    }
}

/// Every stay uniform over the whole city.
pub fn wanderer() -> Archetype {
    Archetype {
        name: "wanderer".into(),
        sites: vec![Site::Explore { radius: 2.0 }],
        transitions: vec![vec![1.0]],
        start: 0,
        daily_reset: None,
    }
}

/// Four fixed points with a uniform successor among them.
pub fn uniform4() -> Archetype {
    let p = |x, y| Site::Point { x, y };
    Archetype {
        name: "uniform4".into(),
        sites: vec![p(0.1, 0.1), p(0.9, 0.1), p(0.1, 0.9), p(0.9, 0.9)],
        transitions: vec![vec![0.25; 4]; 4],
        start: 0,
        daily_reset: None,
    }
}

/// Small two-city corpus with the default archetypes.
pub fn small_corpus(seed: u64) -> MultiCityCorpus {
    let m = [0.25; 4];
    corpus(&spec(
        seed,
        3,
        default_archetypes(),
        &[("a", city(4, 4, 12, &m)), ("b", city(3, 5, 10, &m))],
    ))
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        experts: 2,
        top_k: 1,
        ..ModelConfig::default()
    }
}
