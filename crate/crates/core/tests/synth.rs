mod common;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use common::*;
use nextloc::data::{DataConfig, MultiCityCorpus};
use nextloc::synth::{default_archetypes, markov_oracle, SynthSpec};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// `(archetype, site sequence)` per user, read back from the sites file.
fn read_sites(path: &Path) -> Vec<(usize, Vec<usize>)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (
                f[1].parse().unwrap(),
                f[2].split(',').map(|s| s.parse().unwrap()).collect(),
            )
        })
        .collect()
}

fn written(
    s: &SynthSpec,
) -> (
    tempfile::TempDir,
    BTreeMap<String, Vec<(usize, Vec<usize>)>>,
) {
    let dir = tempfile::tempdir().unwrap();
    synth(s).write(dir.path()).unwrap();
    let sites = s
        .cities
        .keys()
        .map(|c| (c.clone(), read_sites(&dir.path().join(c).join("sites.tsv"))))
        .collect();
    (dir, sites)
}

/// Pearson chi-square statistic and degrees of freedom for a 2-row table,
/// ignoring all-zero columns.
fn chi2_two_rows(a: &[f64], b: &[f64]) -> (f64, usize) {
    let (ta, tb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let total = ta + tb;
    let mut stat = 0.0;
    let mut cols = 0usize;
    for (x, y) in a.iter().zip(b) {
        let col = x + y;
        if col == 0.0 {
            continue;
        }
        cols += 1;
        for (obs, row) in [(x, ta), (y, tb)] {
            let exp = row * col / total;
            stat += (obs - exp).powi(2) / exp;
        }
    }
    (stat, cols.saturating_sub(1))
}

#[test]
fn identical_mixing_gives_matching_transition_statistics() {
    let m = [0.4, 0.3, 0.2, 0.1];
    let s = spec(
        21,
        7,
        default_archetypes(),
        &[("p", city(8, 8, 400, &m)), ("q", city(12, 10, 400, &m))],
    );
    let (_dir, sites) = written(&s);
    let (p, q) = (&sites["p"], &sites["q"]);

    // users choose archetypes independently
    let arch = |u: &[(usize, Vec<usize>)]| {
        let mut c = vec![0.0; 4];
        u.iter().for_each(|(a, _)| c[*a] += 1.0);
        c
    };
    let (mut stat, mut df) = chi2_two_rows(&arch(p), &arch(q));

    // given archetype and current site, successive sites are independent draws
    let succ = |u: &[(usize, Vec<usize>)]| {
        let mut c: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for (a, seq) in u {
            for w in seq.windows(2) {
                c.entry((*a, w[0])).or_insert_with(|| vec![0.0; 4])[w[1]] += 1.0;
            }
        }
        c
    };
    let (sp, sq) = (succ(p), succ(q));
    for (k, row) in &sp {
        if let Some(other) = sq.get(k) {
            let (s, d) = chi2_two_rows(row, other);
            stat += s;
            df += d;
        }
    }
    let crit = ChiSquared::new(df as f64).unwrap().inverse_cdf(0.999);
    assert!(stat < crit, "chi2 {stat} on {df} df exceeds {crit}");
}

fn tvd(a: &HashMap<(usize, usize, usize), f64>, b: &HashMap<(usize, usize, usize), f64>) -> f64 {
    let (ta, tb): (f64, f64) = (a.values().sum(), b.values().sum());
    let keys: std::collections::HashSet<_> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .map(|k| (a.get(k).unwrap_or(&0.0) / ta - b.get(k).unwrap_or(&0.0) / tb).abs())
        .sum::<f64>()
        / 2.0
}

fn transition_hist(users: &[(usize, Vec<usize>)]) -> HashMap<(usize, usize, usize), f64> {
    let mut h = HashMap::new();
    for (a, seq) in users {
        for w in seq.windows(2) {
            *h.entry((*a, w[0], w[1])).or_insert(0.0) += 1.0;
        }
    }
    h
}

#[test]
fn more_sharing_means_closer_transition_statistics() {
    let base = [1.0, 0.0, 0.0, 0.0];
    for seed in [1, 2, 3] {
        let mut last = f64::INFINITY;
        for share in [0.0, 0.5, 1.0] {
            let mix: Vec<f64> = (0..4)
                .map(|i| share * base[i] + (1.0 - share) * if i == 0 { 0.0 } else { 1.0 / 3.0 })
                .collect();
            let s = spec(
                seed,
                5,
                default_archetypes(),
                &[
                    ("p", city(8, 8, 150, &base)),
                    ("q", city(10, 10, 150, &mix)),
                ],
            );
            let (_dir, sites) = written(&s);
            let d = tvd(&transition_hist(&sites["p"]), &transition_hist(&sites["q"]));
            assert!(
                d < last,
                "seed {seed}: share {share} gives tvd {d}, previous {last}"
            );
            last = d;
        }
    }
}

#[test]
fn same_spec_writes_identical_bytes() {
    let s = spec(
        5,
        3,
        default_archetypes(),
        &[("x", city(6, 6, 15, &[0.25; 4]))],
    );
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(&s).write(a.path()).unwrap();
    synth(&s).write(b.path()).unwrap();
    for f in [
        "synth.toml",
        "x/locations.csv",
        "x/trajectories.tsv",
        "x/users.tsv",
        "x/sites.tsv",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let loaded = MultiCityCorpus::load(a.path(), &DataConfig::default()).unwrap();
    assert_eq!(loaded, synth(&s).corpus(&DataConfig::default()).unwrap());
}

#[test]
fn uniform_successor_oracle_is_a_quarter() {
    let c = corpus(&spec(
        8,
        7,
        vec![uniform4()],
        &[("u", city(6, 6, 120, &[1.0]))],
    ));
    let o = markov_oracle(&c, "u").unwrap();
    let n = (o.seen + o.unseen) as f64;
    let sigma = (0.25 * 0.75 / n).sqrt();
    assert_eq!(o.unseen, 0);
    assert!(
        (o.acc1() - 0.25).abs() < 3.0 * sigma,
        "{} over {n}",
        o.acc1()
    );
}

/// Brute-force count over the written split files, sharing no code with the library.
fn count_from_files(dir: &Path) -> f64 {
    let pairs = |name: &str| -> Vec<(usize, usize)> {
        let text = std::fs::read_to_string(dir.join(name)).unwrap();
        let mut out = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let stays: Vec<usize> = line
                .split('\t')
                .nth(1)
                .unwrap()
                .split(',')
                .map(|s| s.rsplit(':').next().unwrap().parse().unwrap())
                .collect();
            out.extend(stays.windows(2).map(|w| (w[0], w[1])));
        }
        out
    };
    let train = pairs("train.tsv");
    let mut table: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    let mut dest: HashMap<usize, usize> = HashMap::new();
    for &(a, b) in &train {
        *table.entry(a).or_default().entry(b).or_default() += 1;
        *dest.entry(b).or_default() += 1;
    }
    let best = |m: &HashMap<usize, usize>| {
        let top = *m.values().max().unwrap();
        *m.iter()
            .filter(|(_, &v)| v == top)
            .map(|(k, _)| k)
            .min()
            .unwrap()
    };
    let test = pairs("test.tsv");
    let hits = test
        .iter()
        .filter(|&&(a, b)| table.get(&a).map_or(best(&dest), best) == b)
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn mixed_kernel_oracle_matches_brute_force_count() {
    let s = spec(
        13,
        7,
        default_archetypes(),
        &[("m", city(6, 8, 80, &[0.3, 0.3, 0.2, 0.2]))],
    );
    let c = corpus(&s);
    let dir = tempfile::tempdir().unwrap();
    c.write(dir.path()).unwrap();
    let o = markov_oracle(&c, "m").unwrap();
    assert_eq!(o.acc1(), count_from_files(&dir.path().join("m")));
    assert!(o.unseen > 0 || o.seen > 0);
    assert!(o.context_max_prob.values().all(|&p| p > 0.0 && p <= 1.0));
}
