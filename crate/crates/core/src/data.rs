//! Trajectories, preprocessing, padded batches and the multi-city corpus.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geo::{LocationFeatures, LocationTable, POI_DIM};
use crate::rng;

/// Half-hour slots per day.
pub const SLOTS_PER_DAY: usize = 48;
const SLOT_SECONDS: u32 = 1800;

/// Nearest half-hour boundary of a time of day, wrapping midnight to slot 0.
/// Exact half-way points round up.
pub fn time_slot(seconds_of_day: u32) -> Result<u8> {
    if seconds_of_day >= 86_400 {
        return Err(Error::Data(format!(
            "time of day {seconds_of_day}s outside [0, 86400)"
        )));
    }
    let nearest = (seconds_of_day + SLOT_SECONDS / 2) / SLOT_SECONDS;
    Ok((nearest % SLOTS_PER_DAY as u32) as u8)
}

/// One stay: arrival day, arrival slot and location.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Stay {
    pub day: u32,
    pub slot: u8,
    pub loc: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    pub user_id: String,
    pub city_id: String,
    pub points: Vec<Stay>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks slot range, chronology and vocabulary membership.
    pub fn validate(&self, n_locations: usize) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p.slot as usize >= SLOTS_PER_DAY {
                return Err(Error::Data(format!(
                    "user {}: slot {} out of range",
                    self.user_id, p.slot
                )));
            }
            if p.loc >= n_locations {
                return Err(Error::Data(format!(
                    "user {}: location {} not in city {} ({} locations)",
                    self.user_id, p.loc, self.city_id, n_locations
                )));
            }
            if i > 0 {
                let q = self.points[i - 1];
                if (p.day, p.slot) < (q.day, q.slot) {
                    return Err(Error::Data(format!(
                        "user {}: points out of chronological order at index {i}",
                        self.user_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// `user_id<TAB>day:slot:loc,...`
    pub fn to_line(&self) -> String {
        let mut s = format!("{}\t", self.user_id);
        for (i, p) in self.points.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}:{}:{}", p.day, p.slot, p.loc);
        }
        s
    }

    pub fn parse_line(line: &str, city_id: &str) -> Result<Self> {
        let (user, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("trajectory line without tab: `{line}`")))?;
        let mut points = Vec::new();
        for tok in rest.split(',').filter(|t| !t.is_empty()) {
            let bad = || Error::Data(format!("user {user}: malformed stay `{tok}`"));
            let mut it = tok.split(':');
            let (Some(d), Some(s), Some(l), None) = (it.next(), it.next(), it.next(), it.next())
            else {
                return Err(bad());
            };
            points.push(Stay {
                day: d.trim().parse().map_err(|_| bad())?,
                slot: s.trim().parse().map_err(|_| bad())?,
                loc: l.trim().parse().map_err(|_| bad())?,
            });
        }
        Ok(Trajectory {
            user_id: user.to_string(),
            city_id: city_id.to_string(),
            points,
        })
    }
}

pub fn read_trajectories(path: &Path, city_id: &str) -> Result<Vec<Trajectory>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Trajectory::parse_line(l, city_id))
        .collect()
}

pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut s = String::new();
    for t in trajs {
        s.push_str(&t.to_line());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Sliding windows of `window_days` days, advancing one day at a time from
/// the first to the last day of the trajectory. A trajectory spanning fewer
/// days yields a single window. Windows with fewer than `min_points` stays
/// are dropped.
pub fn window_split(traj: &Trajectory, window_days: u32, min_points: usize) -> Vec<Trajectory> {
    let (Some(first), Some(last)) = (traj.points.first(), traj.points.last()) else {
        return Vec::new();
    };
    let window_days = window_days.max(1);
    let (d0, d1) = (first.day, last.day);
    let last_start = if d1 + 1 >= d0 + window_days {
        d1 + 1 - window_days
    } else {
        d0
    };
    (d0..=last_start)
        .filter_map(|start| {
            let points: Vec<Stay> = traj
                .points
                .iter()
                .filter(|p| p.day >= start && p.day < start + window_days)
                .copied()
                .collect();
            (points.len() >= min_points).then(|| Trajectory {
                user_id: traj.user_id.clone(),
                city_id: traj.city_id.clone(),
                points,
            })
        })
        .collect()
}

/// Token channel values. `Eos` and `Pad` carry the reserved codes 1 and 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum TokenKind {
    Pad = 0,
    Eos = 1,
    Real = 2,
}

/// Same-city trajectories padded to a fixed length `t`.
///
/// Every per-position vector is row-major `[batch, t]`. Each row is a prefix
/// of real stays, one EOS, then PAD.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub city_id: String,
    pub batch: usize,
    pub t: usize,
    /// Location id at real positions, 0 elsewhere.
    pub loc_ids: Vec<usize>,
    /// Time slot at real positions, 0 elsewhere.
    pub time_slots: Vec<usize>,
    pub tokens: Vec<TokenKind>,
    /// Next location for every real position but the last.
    pub targets: Vec<Option<usize>>,
    pub mask: Vec<bool>,
}

impl PaddedBatch {
    pub fn positions(&self) -> usize {
        self.batch * self.t
    }

    pub fn supervised(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }

    /// Recovers the original `(location, slot)` sequences.
    pub fn unpad(&self) -> Vec<Vec<(usize, u8)>> {
        (0..self.batch)
            .map(|b| {
                (0..self.t)
                    .map(|j| b * self.t + j)
                    .take_while(|&i| self.tokens[i] == TokenKind::Real)
                    .map(|i| (self.loc_ids[i], self.time_slots[i] as u8))
                    .collect()
            })
            .collect()
    }

    /// Per-position `(P, G, R)` features for real positions; zeros elsewhere.
    pub fn gather_features(
        &self,
        features: &LocationFeatures,
    ) -> (Vec<[f64; POI_DIM]>, Vec<[f64; 2]>, Vec<u8>) {
        let mut p = vec![[0.0; POI_DIM]; self.positions()];
        let mut g = vec![[0.0; 2]; self.positions()];
        let mut r = vec![0u8; self.positions()];
        for i in 0..self.positions() {
            if self.mask[i] {
                let l = self.loc_ids[i];
                p[i] = features.poi[l];
                g[i] = features.geo[l];
                r[i] = features.rank[l];
            }
        }
        (p, g, r)
    }
}

/// Pads same-city trajectories to capacity `t`; each needs room for its EOS.
pub fn pad_batch(trajs: &[&Trajectory], t: usize) -> Result<PaddedBatch> {
    let first = trajs
        .first()
        .ok_or_else(|| Error::Data("cannot pad an empty batch".into()))?;
    let city = &first.city_id;
    let b = trajs.len();
    let n = b * t;
    let mut batch = PaddedBatch {
        city_id: city.clone(),
        batch: b,
        t,
        loc_ids: vec![0; n],
        time_slots: vec![0; n],
        tokens: vec![TokenKind::Pad; n],
        targets: vec![None; n],
        mask: vec![false; n],
    };
    for (bi, tr) in trajs.iter().enumerate() {
        if &tr.city_id != city {
            return Err(Error::Data(format!(
                "batch mixes cities {city} and {}",
                tr.city_id
            )));
        }
        if tr.is_empty() {
            return Err(Error::Data(format!(
                "user {}: empty trajectory",
                tr.user_id
            )));
        }
        if tr.len() + 1 > t {
            return Err(Error::Data(format!(
                "user {}: trajectory of length {} does not fit capacity {t} with its end token; \
                 truncate to at most {} stays before batching",
                tr.user_id,
                tr.len(),
                t.saturating_sub(1)
            )));
        }
        let row = bi * t;
        for (j, p) in tr.points.iter().enumerate() {
            batch.loc_ids[row + j] = p.loc;
            batch.time_slots[row + j] = p.slot as usize;
            batch.tokens[row + j] = TokenKind::Real;
            batch.mask[row + j] = true;
            if j + 1 < tr.len() {
                batch.targets[row + j] = Some(tr.points[j + 1].loc);
            }
        }
        batch.tokens[row + tr.len()] = TokenKind::Eos;
    }
    Ok(batch)
}

/// Preprocessing settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub window_days: u32,
    pub min_points: usize,
    /// Padded length, including the end token.
    pub max_seq_len: usize,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            window_days: 3,
            min_points: 5,
            max_seq_len: 48,
            split_seed: 0,
        }
    }
}

/// Splits users 6:2:2 into train/validation/test after a seeded shuffle.
pub fn split_users(users: &BTreeSet<String>, seed: u64) -> [BTreeSet<String>; 3] {
    let mut list: Vec<&String> = users.iter().collect();
    list.shuffle(&mut rng::stream(seed, "split"));
    let n = list.len();
    let (a, b) = (n * 6 / 10, n * 8 / 10);
    let take = |r: std::ops::Range<usize>| list[r].iter().map(|s| (*s).clone()).collect();
    [take(0..a), take(a..b), take(b..n)]
}

/// Train, validation and test trajectories.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl Splits {
    pub fn get(&self, split: Split) -> &[Trajectory] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Windows, filters, truncates and user-splits raw per-user trajectories.
pub fn preprocess(raw: &[Trajectory], cfg: &DataConfig) -> Result<Splits> {
    if cfg.max_seq_len < 2 {
        return Err(Error::Config("max_seq_len must be at least 2".into()));
    }
    let users: BTreeSet<String> = raw.iter().map(|t| t.user_id.clone()).collect();
    let [train_u, val_u, test_u] = split_users(&users, cfg.split_seed);
    let mut out = Splits::default();
    for tr in raw {
        let dest = if train_u.contains(&tr.user_id) {
            &mut out.train
        } else if val_u.contains(&tr.user_id) {
            &mut out.val
        } else {
            debug_assert!(test_u.contains(&tr.user_id));
            &mut out.test
        };
        for mut w in window_split(tr, cfg.window_days, cfg.min_points) {
            w.points.truncate(cfg.max_seq_len - 1);
            dest.push(w);
        }
    }
    Ok(out)
}

/// One city's locations, features and splits.
#[derive(Clone, Debug, PartialEq)]
pub struct CityData {
    pub id: String,
    pub table: LocationTable,
    pub features: LocationFeatures,
    pub splits: Splits,
}

impl CityData {
    pub fn new(id: impl Into<String>, table: LocationTable, splits: Splits) -> Result<Self> {
        let id = id.into();
        let features = LocationFeatures::from_table(&table)?;
        for t in splits.train.iter().chain(&splits.val).chain(&splits.test) {
            t.validate(table.len())?;
            if t.city_id != id {
                return Err(Error::Data(format!(
                    "trajectory of city {} filed under {id}",
                    t.city_id
                )));
            }
        }
        Ok(CityData {
            id,
            table,
            features,
            splits,
        })
    }

    pub fn n_locations(&self) -> usize {
        self.table.len()
    }
}

/// Named per-city datasets, ordered by city id.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiCityCorpus {
    pub cities: Vec<CityData>,
}

pub const LOCATIONS_FILE: &str = "locations.csv";
pub const RAW_FILE: &str = "trajectories.tsv";

impl MultiCityCorpus {
    pub fn new(mut cities: Vec<CityData>) -> Result<Self> {
        if cities.is_empty() {
            return Err(Error::Data("corpus has no cities".into()));
        }
        cities.sort_by(|a, b| a.id.cmp(&b.id));
        for w in cities.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Data(format!("duplicate city {}", w[0].id)));
            }
        }
        Ok(MultiCityCorpus { cities })
    }

    pub fn city(&self, id: &str) -> Option<&CityData> {
        self.cities.iter().find(|c| c.id == id)
    }

    pub fn city_index(&self, id: &str) -> Option<usize> {
        self.cities.iter().position(|c| c.id == id)
    }

    /// Corpus restricted to the named cities.
    pub fn subset(&self, ids: &[&str]) -> Result<Self> {
        let cities = ids
            .iter()
            .map(|id| {
                self.city(id)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("unknown city {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cities)
    }

    /// Loads every sub-directory holding a locations file. Cities with
    /// `train.tsv`/`val.tsv`/`test.tsv` are taken as preprocessed; otherwise
    /// the raw trajectories file is windowed and split with `cfg`.
    pub fn load(dir: &Path, cfg: &DataConfig) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut cities = Vec::new();
        let mut names: Vec<String> = Vec::new();
        for e in entries {
            let e = e.map_err(|e| Error::io(dir, e))?;
            if e.path().join(LOCATIONS_FILE).is_file() {
                names.push(e.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        for name in names {
            let cdir = dir.join(&name);
            let table = LocationTable::read(&cdir.join(LOCATIONS_FILE))?;
            let splits = if cdir.join("train.tsv").is_file() {
                Splits {
                    train: read_trajectories(&cdir.join("train.tsv"), &name)?,
                    val: read_trajectories(&cdir.join("val.tsv"), &name)?,
                    test: read_trajectories(&cdir.join("test.tsv"), &name)?,
                }
            } else {
                let raw = read_trajectories(&cdir.join(RAW_FILE), &name)?;
                for t in &raw {
                    t.validate(table.len())?;
                }
                preprocess(&raw, cfg)?
            };
            cities.push(CityData::new(name, table, splits)?);
        }
        if cities.is_empty() {
            return Err(Error::Data(format!(
                "no city directories with {LOCATIONS_FILE} under {}",
                dir.display()
            )));
        }
        Self::new(cities)
    }

    /// Writes the preprocessed layout read back by [`MultiCityCorpus::load`].
    pub fn write(&self, dir: &Path) -> Result<()> {
        for c in &self.cities {
            let cdir = dir.join(&c.id);
            std::fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
            c.table.write(&cdir.join(LOCATIONS_FILE))?;
            for split in [Split::Train, Split::Val, Split::Test] {
                write_trajectories(
                    &cdir.join(format!("{}.tsv", split.name())),
                    c.splits.get(split),
                )?;
            }
        }
        Ok(())
    }

    /// Content hash of locations and splits.
    pub fn manifest_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for c in &self.cities {
            h.update(c.id.as_bytes());
            h.update(c.table.to_csv().as_bytes());
            for split in [Split::Train, Split::Val, Split::Test] {
                h.update(split.name().as_bytes());
                for t in c.splits.get(split) {
                    h.update(t.to_line().as_bytes());
                    h.update(b"\n");
                }
            }
        }
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
    }
}

/// One scheduled mini-batch: a city index and trajectory indices into its train split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchRef {
    pub city: usize,
    pub indices: Vec<usize>,
}

/// Shuffled epoch of city-homogeneous batches covering every train
/// trajectory once, so each city appears in proportion to its data.
pub fn sample_schedule(
    corpus: &MultiCityCorpus,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<BatchRef> {
    let mut rng = rng::stream(seed, &format!("schedule/{epoch}"));
    let batch_size = batch_size.max(1);
    let mut out = Vec::new();
    for (ci, c) in corpus.cities.iter().enumerate() {
        let mut idx: Vec<usize> = (0..c.splits.train.len()).collect();
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(batch_size) {
            out.push(BatchRef {
                city: ci,
                indices: chunk.to_vec(),
            });
        }
    }
    out.shuffle(&mut rng);
    out
}
