//! Seeded synthetic multi-city mobility.
//!
//! Users follow archetype kernels: Markov chains over abstract sites (the
//! user's home, the user's workplace, fixed points of the unit square, or
//! exploration around the current cell). The abstract square is projected
//! onto each city's grid, so cities mixing the same archetypes share
//! movement patterns in feature space while having different grids.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{
    preprocess, CityData, DataConfig, MultiCityCorpus, Stay, Trajectory, LOCATIONS_FILE, RAW_FILE,
};
use crate::error::{Error, Result};
use crate::geo::{CityGeometry, LocationRecord, LocationTable, POI_CATEGORIES};
use crate::rng::{stream, Rng};

pub const DAY_START_SLOT: u8 = 14;
pub const DAY_END_SLOT: u8 = 46;
pub const MIN_LOCATIONS: usize = 8;
pub const USERS_FILE: &str = "users.tsv";
pub const SITES_FILE: &str = "sites.tsv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Site {
    Home,
    Work,
    /// Fixed point of the unit square.
    Point {
        x: f64,
        y: f64,
    },
    /// Uniform over cells within `radius` (unit-square distance) of the
    /// current cell, excluding it; `radius >= 1.5` covers the whole city.
    Explore {
        radius: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Archetype {
    pub name: String,
    pub sites: Vec<Site>,
    /// Row-stochastic site transition matrix.
    pub transitions: Vec<Vec<f64>>,
    #[serde(default)]
    pub start: usize,
    /// Site every day after the first starts from; the chain runs on overnight when absent.
    #[serde(default)]
    pub daily_reset: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CitySpec {
    pub rows: usize,
    pub cols: usize,
    pub users: usize,
    /// Weights over archetypes, in archetype order.
    pub mixing: Vec<f64>,
    /// Overrides the global day count.
    #[serde(default)]
    pub days: Option<u32>,
    #[serde(default = "default_center")]
    pub center: (f64, f64),
}

fn default_center() -> (f64, f64) {
    (30.0, 120.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    #[serde(default = "default_days")]
    pub days: u32,
    /// Mean stay length in slots; stays last `1 + Poisson(mean - 1)` slots.
    #[serde(default = "default_stay_mean")]
    pub stay_mean: f64,
    #[serde(default = "default_cell_size")]
    pub cell_size_m: f64,
    #[serde(default = "default_archetypes", rename = "archetype")]
    pub archetypes: Vec<Archetype>,
    pub cities: BTreeMap<String, CitySpec>,
}

fn default_days() -> u32 {
    7
}

fn default_stay_mean() -> f64 {
    3.0
}

fn default_cell_size() -> f64 {
    500.0
}

fn point(x: f64, y: f64) -> Site {
    Site::Point { x, y }
}

/// Four shared daily routines.
pub fn default_archetypes() -> Vec<Archetype> {
    use Site::*;
    vec![
        Archetype {
            name: "commuter".into(),
            sites: vec![Home, Work, point(0.5, 0.5), Explore { radius: 0.15 }],
            transitions: vec![
                vec![0.0, 0.8, 0.0, 0.2],
                vec![0.5, 0.0, 0.3, 0.2],
                vec![0.7, 0.0, 0.0, 0.3],
                vec![0.6, 0.2, 0.2, 0.0],
            ],
            start: 0,
            daily_reset: Some(0),
        },
        Archetype {
            name: "homebody".into(),
            sites: vec![Home, Explore { radius: 0.1 }, point(0.3, 0.7)],
            transitions: vec![
                vec![0.0, 0.6, 0.4],
                vec![0.7, 0.0, 0.3],
                vec![0.8, 0.2, 0.0],
            ],
            start: 0,
            daily_reset: Some(0),
        },
        Archetype {
            name: "shift".into(),
            sites: vec![Home, Work, point(0.75, 0.25), point(0.2, 0.2)],
            transitions: vec![
                vec![0.0, 0.7, 0.3, 0.0],
                vec![0.2, 0.0, 0.4, 0.4],
                vec![0.6, 0.4, 0.0, 0.0],
                vec![0.5, 0.5, 0.0, 0.0],
            ],
            start: 0,
            daily_reset: None,
        },
        Archetype {
            name: "explorer".into(),
            sites: vec![Home, Explore { radius: 0.3 }, Explore { radius: 2.0 }],
            transitions: vec![
                vec![0.0, 0.5, 0.5],
                vec![0.4, 0.3, 0.3],
                vec![0.5, 0.3, 0.2],
            ],
            start: 0,
            daily_reset: Some(0),
        },
    ]
}

impl Default for SynthSpec {
    /// Three cities of 64, 192 and 400 cells sharing the default archetypes.
    fn default() -> Self {
        let city = |rows, cols, users, mixing: &[f64]| CitySpec {
            rows,
            cols,
            users,
            mixing: mixing.to_vec(),
            days: None,
            center: default_center(),
        };
        SynthSpec {
            seed: 0,
            days: default_days(),
            stay_mean: default_stay_mean(),
            cell_size_m: default_cell_size(),
            archetypes: default_archetypes(),
            cities: BTreeMap::from([
                ("alpha".to_string(), city(8, 8, 200, &[0.4, 0.2, 0.2, 0.2])),
                ("beta".to_string(), city(12, 16, 800, &[0.3, 0.3, 0.2, 0.2])),
                (
                    "gamma".to_string(),
                    city(20, 20, 1200, &[0.25, 0.25, 0.25, 0.25]),
                ),
            ]),
        }
    }
}

fn cell_of(x: f64, y: f64, rows: usize, cols: usize) -> usize {
    let r = ((y * rows as f64) as usize).min(rows - 1);
    let c = ((x * cols as f64) as usize).min(cols - 1);
    r * cols + c
}

fn abstract_xy(cell: usize, rows: usize, cols: usize) -> (f64, f64) {
    (
        ((cell % cols) as f64 + 0.5) / cols as f64,
        ((cell / cols) as f64 + 0.5) / rows as f64,
    )
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("synth spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("synth spec: {m}")));
        if self.cities.is_empty() {
            return err("no cities".into());
        }
        if self.archetypes.is_empty() {
            return err("no archetypes".into());
        }
        if !(self.stay_mean >= 1.0 && self.stay_mean.is_finite()) {
            return err(format!("stay_mean must be >= 1, got {}", self.stay_mean));
        }
        if !(self.cell_size_m > 0.0) {
            return err("cell_size_m must be positive".into());
        }
        for a in &self.archetypes {
            let n = a.sites.len();
            if n == 0 {
                return err(format!("archetype {} has no sites", a.name));
            }
            if a.transitions.len() != n || a.transitions.iter().any(|r| r.len() != n) {
                return err(format!("archetype {}: transitions must be {n}x{n}", a.name));
            }
            for (i, row) in a.transitions.iter().enumerate() {
                let s: f64 = row.iter().sum();
                if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                    return err(format!(
                        "archetype {}: transition row {i} is not a distribution",
                        a.name
                    ));
                }
            }
            if a.start >= n || a.daily_reset.is_some_and(|r| r >= n) {
                return err(format!(
                    "archetype {}: start/daily_reset out of range",
                    a.name
                ));
            }
            for s in &a.sites {
                match *s {
                    Site::Point { x, y }
                        if !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)) =>
                    {
                        return err(format!(
                            "archetype {}: point ({x}, {y}) outside the unit square",
                            a.name
                        ));
                    }
                    Site::Explore { radius } if !(radius > 0.0) => {
                        return err(format!(
                            "archetype {}: explore radius must be positive",
                            a.name
                        ));
                    }
                    _ => {}
                }
            }
        }
        for (id, c) in &self.cities {
            let n = c.rows * c.cols;
            if n < MIN_LOCATIONS {
                return err(format!(
                    "city {id}: {n} locations, need at least {MIN_LOCATIONS}"
                ));
            }
            if c.users == 0 || c.days.unwrap_or(self.days) == 0 {
                return err(format!("city {id}: needs at least one user and one day"));
            }
            if c.mixing.len() != self.archetypes.len() {
                return err(format!(
                    "city {id}: {} mixing weights for {} archetypes",
                    c.mixing.len(),
                    self.archetypes.len()
                ));
            }
            let s: f64 = c.mixing.iter().sum();
            if c.mixing.iter().any(|&w| !(w >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return err(format!("city {id}: mixing weights must lie on the simplex"));
            }
            for (a, &w) in self.archetypes.iter().zip(&c.mixing) {
                if w == 0.0 {
                    continue;
                }
                let mut fixed: Vec<usize> = a
                    .sites
                    .iter()
                    .filter_map(|s| match *s {
                        Site::Point { x, y } => Some(cell_of(x, y, c.rows, c.cols)),
                        _ => None,
                    })
                    .collect();
                fixed.sort_unstable();
                fixed.dedup();
                let anchors =
                    a.sites.contains(&Site::Home) as usize + a.sites.contains(&Site::Work) as usize;
                if fixed.len() + anchors > n {
                    return err(format!(
                        "city {id}: archetype {} needs {} distinct cells but the grid has {n}",
                        a.name,
                        fixed.len() + anchors
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Ground truth for one generated user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserTruth {
    pub user_id: String,
    pub archetype: usize,
    pub home: usize,
    pub work: usize,
    /// Archetype site index of every stay.
    pub sites: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCity {
    pub id: String,
    pub table: LocationTable,
    pub raw: Vec<Trajectory>,
    pub truth: Vec<UserTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub spec: SynthSpec,
    pub cities: Vec<SynthCity>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Zone {
    Commercial,
    Mixed,
    Residential,
}

/// Mean POI counts per category by zone.
fn zone_rates(z: Zone) -> [f64; POI_CATEGORIES] {
    match z {
        Zone::Commercial => [
            1.0, 1.5, 0.5, 0.2, 6.0, 7.0, 3.0, 1.5, 1.0, 2.0, 0.8, 5.0, 1.0, 0.8,
        ],
        Zone::Mixed => [
            0.8, 0.5, 0.8, 0.4, 3.0, 2.5, 3.0, 1.5, 1.5, 1.0, 0.3, 1.5, 0.6, 1.5,
        ],
        Zone::Residential => [
            0.3, 0.1, 0.6, 0.5, 1.0, 0.8, 3.5, 1.0, 1.5, 0.3, 0.1, 0.3, 0.3, 2.0,
        ],
    }
}

struct Grid {
    rows: usize,
    cols: usize,
    xy: Vec<(f64, f64)>,
}

impl Grid {
    fn n(&self) -> usize {
        self.rows * self.cols
    }

    fn explore(&self, from: usize, radius: f64, rng: &mut Rng) -> usize {
        if radius >= 1.5 {
            return rng.random_range(0..self.n());
        }
        let (fx, fy) = self.xy[from];
        let near: Vec<usize> = (0..self.n())
            .filter(|&c| {
                c != from
                    && ((self.xy[c].0 - fx).powi(2) + (self.xy[c].1 - fy).powi(2)).sqrt() <= radius
            })
            .collect();
        if near.is_empty() {
            from
        } else {
            near[rng.random_range(0..near.len())]
        }
    }
}

fn stay_length(mean: f64, rng: &mut Rng) -> u8 {
    if mean <= 1.0 {
        return 1;
    }
    let extra = Poisson::new(mean - 1.0).expect("positive mean").sample(rng);
    1 + extra.min(40.0) as u8
}

#[allow(clippy::too_many_arguments)]
fn generate_user(
    spec: &SynthSpec,
    city: &str,
    c: &CitySpec,
    grid: &Grid,
    homes: &[usize],
    works: &[usize],
    u: usize,
    mixing: &WeightedIndex<f64>,
) -> (Trajectory, UserTruth) {
    let user_id = format!("u{u:05}");
    let mut rng = stream(spec.seed, &format!("synth/{city}/user/{u}"));
    let archetype = mixing.sample(&mut rng);
    let a = &spec.archetypes[archetype];
    let home = homes[rng.random_range(0..homes.len())];
    let work = loop {
        let w = works[rng.random_range(0..works.len())];
        if w != home {
            break w;
        }
    };
    let rows: Vec<WeightedIndex<f64>> = a
        .transitions
        .iter()
        .map(|r| WeightedIndex::new(r).expect("validated distribution"))
        .collect();
    let resolve = |site: usize, cur: usize, rng: &mut Rng| match a.sites[site] {
        Site::Home => home,
        Site::Work => work,
        Site::Point { x, y } => cell_of(x, y, grid.rows, grid.cols),
        Site::Explore { radius } => grid.explore(cur, radius, rng),
    };
    let mut site = a.start;
    let mut cell = resolve(site, home, &mut rng);
    let mut points = Vec::new();
    let mut sites = Vec::new();
    for day in 0..c.days.unwrap_or(spec.days) {
        if let (Some(r), true) = (a.daily_reset, day > 0) {
            site = r;
            cell = resolve(site, cell, &mut rng);
        }
        let mut slot = DAY_START_SLOT + rng.random_range(0..3u8);
        while slot < DAY_END_SLOT {
            points.push(Stay {
                day,
                slot,
                loc: cell,
            });
            sites.push(site);
            slot = slot.saturating_add(stay_length(spec.stay_mean, &mut rng));
            site = rows[site].sample(&mut rng);
            cell = resolve(site, cell, &mut rng);
        }
    }
    (
        Trajectory {
            user_id: user_id.clone(),
            city_id: city.to_string(),
            points,
        },
        UserTruth {
            user_id,
            archetype,
            home,
            work,
            sites,
        },
    )
}

fn generate_city(spec: &SynthSpec, id: &str, c: &CitySpec) -> Result<SynthCity> {
    let geom = CityGeometry::from_grid(id, c.center, c.rows, c.cols, spec.cell_size_m)?;
    let n = c.rows * c.cols;
    let grid = Grid {
        rows: c.rows,
        cols: c.cols,
        xy: (0..n).map(|i| abstract_xy(i, c.rows, c.cols)).collect(),
    };
    let mut rng = stream(spec.seed, &format!("synth/{id}/layout"));
    let zones: Vec<Zone> = grid
        .xy
        .iter()
        .map(|&(x, y)| {
            let r = ((x - 0.5).powi(2) + (y - 0.5).powi(2)).sqrt();
            let z = if r < 0.2 {
                Zone::Commercial
            } else if r < 0.35 {
                Zone::Mixed
            } else {
                Zone::Residential
            };
            if rng.random_bool(0.1) {
                [Zone::Commercial, Zone::Mixed, Zone::Residential][rng.random_range(0..3)]
            } else {
                z
            }
        })
        .collect();
    let pick = |keep: &dyn Fn(Zone) -> bool| -> Vec<usize> {
        let v: Vec<usize> = (0..n).filter(|&i| keep(zones[i])).collect();
        if v.len() < 2 {
            (0..n).collect()
        } else {
            v
        }
    };
    let homes = pick(&|z| z != Zone::Commercial);
    let works = pick(&|z| z != Zone::Residential);

    // POI hotspots at every fixed point, each with its own signature category
    let mut hotspot = vec![None; n];
    let mut k = 0;
    for a in &spec.archetypes {
        for s in &a.sites {
            if let Site::Point { x, y } = *s {
                let cell = cell_of(x, y, c.rows, c.cols);
                hotspot[cell].get_or_insert(7 + k % 7);
                k += 1;
            }
        }
    }
    let mut poi = Vec::with_capacity(n);
    for i in 0..n {
        let mut rates = zone_rates(zones[i]);
        if let Some(cat) = hotspot[i] {
            rates[cat] += 10.0;
        }
        let counts: [i64; POI_CATEGORIES] = std::array::from_fn(|j| {
            Poisson::new(rates[j])
                .expect("positive rate")
                .sample(&mut rng) as i64
        });
        poi.push(counts);
    }

    let mixing =
        WeightedIndex::new(&c.mixing).map_err(|e| Error::Config(format!("city {id}: {e}")))?;
    let mut raw = Vec::with_capacity(c.users);
    let mut truth = Vec::with_capacity(c.users);
    for u in 0..c.users {
        let (t, g) = generate_user(spec, id, c, &grid, &homes, &works, u, &mixing);
        raw.push(t);
        truth.push(g);
    }
    let mut visits = vec![0u64; n];
    for t in &raw {
        for p in &t.points {
            visits[p.loc] += 1;
        }
    }
    let records = (0..n)
        .map(|i| {
            let (lat, lon) = geom.cell_centroid(i);
            LocationRecord {
                location_id: i,
                lat,
                lon,
                poi_counts: poi[i],
                visits: visits[i],
            }
        })
        .collect();
    Ok(SynthCity {
        id: id.to_string(),
        table: LocationTable::new(records)?,
        raw,
        truth,
    })
}

/// Generates every city of `spec`. Output depends only on the spec.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let cities = spec
        .cities
        .iter()
        .map(|(id, c)| generate_city(spec, id, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthOutput {
        spec: spec.clone(),
        cities,
    })
}

impl SynthOutput {
    /// Windows and splits every city's raw trajectories.
    pub fn corpus(&self, cfg: &DataConfig) -> Result<MultiCityCorpus> {
        let cities = self
            .cities
            .iter()
            .map(|c| CityData::new(c.id.clone(), c.table.clone(), preprocess(&c.raw, cfg)?))
            .collect::<Result<Vec<_>>>()?;
        MultiCityCorpus::new(cities)
    }

    /// Raw layout: per city the location table, raw trajectories, user
    /// ground truth and per-stay archetype sites; plus the spec at the root.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let spec_path = dir.join("synth.toml");
        std::fs::write(&spec_path, self.spec.to_toml()?).map_err(|e| Error::io(spec_path, e))?;
        for c in &self.cities {
            let cdir = dir.join(&c.id);
            std::fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
            c.table.write(&cdir.join(LOCATIONS_FILE))?;
            crate::data::write_trajectories(&cdir.join(RAW_FILE), &c.raw)?;
            let mut users = String::from("user_id\tarchetype\thome\twork\n");
            let mut sites = String::new();
            for g in &c.truth {
                users.push_str(&format!(
                    "{}\t{}\t{}\t{}\n",
                    g.user_id, self.spec.archetypes[g.archetype].name, g.home, g.work
                ));
                let s: Vec<String> = g.sites.iter().map(usize::to_string).collect();
                sites.push_str(&format!(
                    "{}\t{}\t{}\n",
                    g.user_id,
                    g.archetype,
                    s.join(",")
                ));
            }
            for (name, text) in [(USERS_FILE, users), (SITES_FILE, sites)] {
                let p = cdir.join(name);
                std::fs::write(&p, text).map_err(|e| Error::io(p, e))?;
            }
        }
        Ok(())
    }
}

/// Best first-order predictor of a city's test transitions, fitted by
/// exhaustive counting on its train transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovOracle {
    /// Highest empirical transition probability per seen context.
    pub context_max_prob: BTreeMap<usize, f64>,
    /// Most frequent train destination, used for unseen contexts.
    pub fallback: usize,
    /// Test transitions from contexts seen in training, and hits among them.
    pub seen: usize,
    pub seen_hits: usize,
    /// Test transitions from unseen contexts, and fallback hits among them.
    pub unseen: usize,
    pub unseen_hits: usize,
}

impl MarkovOracle {
    /// Acc@1 over all test transitions.
    pub fn acc1(&self) -> f64 {
        (self.seen_hits + self.unseen_hits) as f64 / (self.seen + self.unseen).max(1) as f64
    }

    /// Acc@1 over test transitions whose context was seen in training.
    pub fn seen_acc1(&self) -> f64 {
        self.seen_hits as f64 / self.seen.max(1) as f64
    }
}

fn transitions(trajs: &[Trajectory]) -> impl Iterator<Item = (usize, usize)> + '_ {
    trajs
        .iter()
        .flat_map(|t| t.points.windows(2).map(|w| (w[0].loc, w[1].loc)))
}

fn argmax_lowest(counts: &BTreeMap<usize, u64>) -> (usize, u64) {
    // BTreeMap iterates ids ascending, so strict > keeps the lowest id on ties
    let mut best = (usize::MAX, 0);
    for (&id, &n) in counts {
        if n > best.1 {
            best = (id, n);
        }
    }
    best
}

pub fn markov_oracle(corpus: &MultiCityCorpus, city: &str) -> Result<MarkovOracle> {
    let c = corpus
        .city(city)
        .ok_or_else(|| Error::Data(format!("unknown city {city}")))?;
    let mut by_ctx: BTreeMap<usize, BTreeMap<usize, u64>> = BTreeMap::new();
    let mut dest: BTreeMap<usize, u64> = BTreeMap::new();
    for (a, b) in transitions(&c.splits.train) {
        *by_ctx.entry(a).or_default().entry(b).or_default() += 1;
        *dest.entry(b).or_default() += 1;
    }
    if dest.is_empty() {
        return Err(Error::Data(format!("city {city} has no train transitions")));
    }
    let fallback = argmax_lowest(&dest).0;
    let best: BTreeMap<usize, (usize, f64)> = by_ctx
        .iter()
        .map(|(&ctx, counts)| {
            let (id, n) = argmax_lowest(counts);
            (ctx, (id, n as f64 / counts.values().sum::<u64>() as f64))
        })
        .collect();
    let mut o = MarkovOracle {
        context_max_prob: best.iter().map(|(&k, &(_, p))| (k, p)).collect(),
        fallback,
        seen: 0,
        seen_hits: 0,
        unseen: 0,
        unseen_hits: 0,
    };
    for (a, b) in transitions(&c.splits.test) {
        match best.get(&a) {
            Some(&(pred, _)) => {
                o.seen += 1;
                o.seen_hits += (pred == b) as usize;
            }
            None => {
                o.unseen += 1;
                o.unseen_hits += (fallback == b) as usize;
            }
        }
    }
    Ok(o)
}
