//! Location tower: feature encoder and deep & cross network.
//!
//! Nothing here is indexed by city or by location id, so one parameter set
//! embeds the locations of any city from their features alone.

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::ModelConfig;
use crate::data::{PaddedBatch, TokenKind};
use crate::error::{Error, Result};
use crate::geo::{LocationFeatures, POI_CATEGORIES, POI_DIM, RANK_BUCKETS};
use crate::nn::{normal, uniform, Bound, Linear, ParamId, ParamStore, TABLE_INIT_STD};
use crate::rng::Rng;

/// Encoder input tensors for a set of locations.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInputs {
    /// `[N, 28]`: `ln(1 + count)` for the count channels, fractions as-is.
    pub poi: Tensor,
    /// `[N, 2]`
    pub geo: Tensor,
    pub rank: Vec<usize>,
}

impl EncoderInputs {
    pub fn from_features(f: &LocationFeatures) -> Result<Self> {
        if f.is_empty() {
            return Err(Error::Data("location table is empty".into()));
        }
        let n = f.len();
        let mut poi = Vec::with_capacity(n * POI_DIM);
        for p in &f.poi {
            poi.extend(p[..POI_CATEGORIES].iter().map(|c| c.ln_1p()));
            poi.extend_from_slice(&p[POI_CATEGORIES..]);
        }
        Ok(EncoderInputs {
            poi: Tensor::new(vec![n, POI_DIM], poi)?,
            geo: Tensor::new(vec![n, 2], f.geo.iter().flatten().copied().collect())?,
            rank: f.rank.iter().map(|&r| r as usize).collect(),
        })
    }
}

/// `E_l = concat(E_p, E_g, E_r)` with widths d/2, d/4, d/4, plus two
/// learned rows standing in for the end and padding tokens.
#[derive(Clone, Debug)]
pub struct LocationEncoder {
    pub d: usize,
    pub poi: Linear,
    pub geo: Linear,
    pub rank: ParamId,
    /// `[2, d]`: row 0 is the end token, row 1 padding.
    pub special: ParamId,
}

impl LocationEncoder {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut Rng) -> Result<Self> {
        if d == 0 || !d.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "encoder width {d} is not a positive multiple of 4"
            )));
        }
        Ok(LocationEncoder {
            d,
            poi: Linear::new(store, "loc.enc.poi", POI_DIM, d / 2, rng),
            geo: Linear::new(store, "loc.enc.geo", 2, d / 4, rng),
            rank: store.add(
                "loc.enc.rank",
                normal(&[RANK_BUCKETS, d / 4], TABLE_INIT_STD, rng),
            ),
            special: store.add("loc.enc.special", normal(&[2, d], TABLE_INIT_STD, rng)),
        })
    }

    /// `[N, d]` embeddings of every location described by `inputs`.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, inputs: &EncoderInputs) -> Result<Var> {
        let n = inputs.rank.len();
        let poi = tape.constant(inputs.poi.clone());
        let geo = tape.constant(inputs.geo.clone());
        let ep = self.poi.forward(tape, p, poi)?;
        let eg = self.geo.forward(tape, p, geo)?;
        let er = tape.embedding(p.var(self.rank), &inputs.rank, &[n])?;
        tape.concat(&[ep, eg, er], 1)
    }

    /// `[B, T, d]` embeddings of batch positions: real positions take their
    /// location's row of `city_emb`, end and padding positions the reserved rows.
    pub fn encode_positions(
        &self,
        tape: &mut Tape,
        p: &Bound,
        city_emb: Var,
        batch: &PaddedBatch,
    ) -> Result<Var> {
        let n = tape.shape(city_emb)[0];
        let table = tape.concat(&[city_emb, p.var(self.special)], 0)?;
        let idx: Vec<usize> = batch
            .tokens
            .iter()
            .zip(&batch.loc_ids)
            .map(|(k, &l)| match k {
                TokenKind::Real => l,
                TokenKind::Eos => n,
                TokenKind::Pad => n + 1,
            })
            .collect();
        tape.embedding(table, &idx, &[batch.batch, batch.t])
    }
}

/// One cross layer: `x0 * (x . w) + b + x`, where `x . w` is a scalar per row.
pub fn cross_layer(tape: &mut Tape, x0: Var, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.mul(x, w)?;
    let s = tape.sum_last(xw);
    let cross = tape.mul(x0, s)?;
    let shifted = tape.add(cross, b)?;
    tape.add(shifted, x)
}

/// Deep & cross network mapping `E_l` to candidate embeddings `L`.
#[derive(Clone, Debug)]
pub struct DeepCross {
    pub cross: Vec<(ParamId, ParamId)>,
    pub deep_in: Linear,
    pub deep_out: Linear,
    /// Projects `concat(E_cross, E_deep)` from 2d back to d.
    pub proj: Linear,
}

impl DeepCross {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        let cross = (0..cfg.cross_layers)
            .map(|i| {
                (
                    store.add(format!("loc.cross{i}.w"), uniform(&[d], bound, rng)),
                    store.add(format!("loc.cross{i}.b"), uniform(&[d], bound, rng)),
                )
            })
            .collect();
        DeepCross {
            cross,
            deep_in: Linear::new(store, "loc.deep.in", d, cfg.deep_hidden(), rng),
            deep_out: Linear::new(store, "loc.deep.out", cfg.deep_hidden(), d, rng),
            proj: Linear::new(store, "loc.proj", 2 * d, d, rng),
        }
    }

    pub fn cross_stack(&self, tape: &mut Tape, p: &Bound, e_l: Var) -> Result<Var> {
        let mut x = e_l;
        for &(w, b) in &self.cross {
            x = cross_layer(tape, e_l, x, p.var(w), p.var(b))?;
        }
        Ok(x)
    }

    /// `GELU(E_l W1 + b1) W2 + b2`
    pub fn deep_branch(&self, tape: &mut Tape, p: &Bound, e_l: Var) -> Result<Var> {
        let h = self.deep_in.forward(tape, p, e_l)?;
        let h = tape.gelu(h);
        self.deep_out.forward(tape, p, h)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, e_l: Var) -> Result<Var> {
        let c = self.cross_stack(tape, p, e_l)?;
        let d = self.deep_branch(tape, p, e_l)?;
        let cat = tape.concat(&[c, d], 1)?;
        self.proj.forward(tape, p, cat)
    }
}

#[derive(Clone, Debug)]
pub struct LocationTower {
    pub encoder: LocationEncoder,
    pub dcn: DeepCross,
}

/// Outputs of the location tower for one city.
#[derive(Clone, Copy, Debug)]
pub struct TowerOutput {
    /// `[N, d]` encoder output.
    pub encoded: Var,
    /// `[N, d]` candidate embeddings.
    pub candidates: Var,
}

impl LocationTower {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        Ok(LocationTower {
            encoder: LocationEncoder::new(store, cfg.d_model, rng)?,
            dcn: DeepCross::new(store, cfg, rng),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        inputs: &EncoderInputs,
    ) -> Result<TowerOutput> {
        let encoded = self.encoder.encode(tape, p, inputs)?;
        let candidates = self.dcn.forward(tape, p, encoded)?;
        Ok(TowerOutput {
            encoded,
            candidates,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::rng::stream;

    fn features(n: usize, seed: u64) -> LocationFeatures {
        use rand::Rng as _;
        let mut rng = stream(seed, "feat");
        LocationFeatures {
            poi: (0..n)
                .map(|_| {
                    let counts: Vec<i64> = (0..14).map(|_| rng.random_range(0..6)).collect();
                    crate::geo::poi_vector(&counts).unwrap()
                })
                .collect(),
            geo: (0..n)
                .map(|_| [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)])
                .collect(),
            rank: (0..n).map(|_| rng.random_range(0..8)).collect(),
        }
    }

    fn cfg(d: usize) -> ModelConfig {
        ModelConfig {
            d_model: d,
            ..ModelConfig::default()
        }
    }

    fn build(d: usize) -> (LocationTower, ParamStore) {
        let mut store = ParamStore::new();
        let tower = LocationTower::new(&mut store, &cfg(d), &mut stream(1, "init")).unwrap();
        (tower, store)
    }

    #[test]
    fn width_must_divide_by_four() {
        let mut store = ParamStore::new();
        assert!(LocationEncoder::new(&mut store, 18, &mut stream(1, "x")).is_err());
    }

    #[test]
    fn encoder_block_layout() {
        let (tower, store) = build(16);
        let f = features(5, 2);
        let inputs = EncoderInputs::from_features(&f).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let e = tower.encoder.encode(&mut tape, &p, &inputs).unwrap();
        assert_eq!(tape.shape(e), &[5, 16]);
        let poi = tape.constant(inputs.poi.clone());
        let ep = tower.encoder.poi.forward(&mut tape, &p, poi).unwrap();
        let geo = tape.constant(inputs.geo.clone());
        let eg = tower.encoder.geo.forward(&mut tape, &p, geo).unwrap();
        let rank_tab = store.get(tower.encoder.rank);
        for n in 0..5 {
            let row = tape.value(e).row(n);
            assert_eq!(&row[..8], tape.value(ep).row(n));
            assert_eq!(&row[8..12], tape.value(eg).row(n));
            assert_eq!(&row[12..], rank_tab.row(inputs.rank[n]));
        }
    }

    #[test]
    fn zero_projections_give_bias_vector() {
        let (tower, mut store) = build(8);
        store.get_mut(tower.encoder.poi.w).data_mut().fill(0.0);
        store.get_mut(tower.encoder.geo.w).data_mut().fill(0.0);
        let mut f = features(1, 3);
        f.poi[0] = [0.0; 28];
        f.geo[0] = [0.0, 0.0];
        let inputs = EncoderInputs::from_features(&f).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let e = tower.encoder.encode(&mut tape, &p, &inputs).unwrap();
        let row = tape.value(e).row(0);
        assert_eq!(&row[..4], store.get(tower.encoder.poi.b).data());
        assert_eq!(&row[4..6], store.get(tower.encoder.geo.b).data());
    }

    #[test]
    fn rank_only_changes_last_block() {
        let (tower, store) = build(16);
        let mut f = features(2, 4);
        f.poi[1] = f.poi[0];
        f.geo[1] = f.geo[0];
        f.rank = vec![1, 6];
        let inputs = EncoderInputs::from_features(&f).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let e = tower.encoder.encode(&mut tape, &p, &inputs).unwrap();
        let (a, b) = (tape.value(e).row(0), tape.value(e).row(1));
        assert_eq!(&a[..12], &b[..12]);
        assert!(a[12..].iter().zip(&b[12..]).all(|(x, y)| x != y));
    }

    #[test]
    fn special_positions_use_reserved_rows() {
        let (tower, store) = build(8);
        let f = features(4, 5);
        let inputs = EncoderInputs::from_features(&f).unwrap();
        let tr = crate::data::Trajectory {
            user_id: "u".into(),
            city_id: "c".into(),
            points: vec![
                crate::data::Stay {
                    day: 0,
                    slot: 3,
                    loc: 2,
                },
                crate::data::Stay {
                    day: 0,
                    slot: 4,
                    loc: 0,
                },
            ],
        };
        let batch = crate::data::pad_batch(&[&tr], 4).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let e = tower.encoder.encode(&mut tape, &p, &inputs).unwrap();
        let pos = tower
            .encoder
            .encode_positions(&mut tape, &p, e, &batch)
            .unwrap();
        let v = tape.value(pos);
        assert_eq!(v.shape(), &[1, 4, 8]);
        assert_eq!(v.row(0), tape.value(e).row(2));
        assert_eq!(v.row(1), tape.value(e).row(0));
        assert_eq!(v.row(2), store.get(tower.encoder.special).row(0));
        assert_eq!(v.row(3), store.get(tower.encoder.special).row(1));
    }

    fn run_cross(x0: &[f64], x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let d = w.len();
        let rows = x.len() / d;
        let mut tape = Tape::new();
        let v = |t: &mut Tape, data: &[f64], shape: Vec<usize>| {
            t.constant(Tensor::new(shape, data.to_vec()).unwrap())
        };
        let (x0v, xv) = (
            v(&mut tape, x0, vec![rows, d]),
            v(&mut tape, x, vec![rows, d]),
        );
        let (wv, bv) = (v(&mut tape, w, vec![d]), v(&mut tape, b, vec![d]));
        let y = cross_layer(&mut tape, x0v, xv, wv, bv).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn cross_layer_closed_forms() {
        let x = [0.3, -1.2, 2.0, 0.7];
        assert_eq!(run_cross(&x, &x, &[0.0; 4], &[0.0; 4]), x.to_vec());
        let d = 6;
        let ones = vec![1.0; d];
        assert_eq!(
            run_cross(&ones, &ones, &ones, &vec![0.0; d]),
            vec![(d + 1) as f64; d]
        );
    }

    #[test]
    fn cross_layer_matches_scalar_loop() {
        use rand::Rng as _;
        let mut rng = stream(9, "cross");
        let mut r = |n: usize| {
            (0..n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let (x0, x, w, b) = (r(8), r(8), r(4), r(4));
        let got = run_cross(&x0, &x, &w, &b);
        for row in 0..2 {
            let xs = &x[row * 4..row * 4 + 4];
            let mut dot = 0.0;
            for j in 0..4 {
                dot += xs[j] * w[j];
            }
            for j in 0..4 {
                let expect = x0[row * 4 + j] * dot + b[j] + xs[j];
                assert!((got[row * 4 + j] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn deep_branch_cases() {
        let (tower, mut store) = build(8);
        let f = features(3, 6);
        let inputs = EncoderInputs::from_features(&f).unwrap();

        // reference loop on the current random parameters
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let e = tower.encoder.encode(&mut tape, &p, &inputs).unwrap();
        let out = tower.dcn.deep_branch(&mut tape, &p, e).unwrap();
        let (w1, b1) = (
            store.get(tower.dcn.deep_in.w),
            store.get(tower.dcn.deep_in.b),
        );
        let (w2, b2) = (
            store.get(tower.dcn.deep_out.w),
            store.get(tower.dcn.deep_out.b),
        );
        let (d, h) = (8, 16);
        let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()));
        for n in 0..3 {
            let x = tape.value(e).row(n);
            let mut hid = vec![0.0; h];
            for j in 0..h {
                let mut s = b1.data()[j];
                for i in 0..d {
                    s += x[i] * w1.data()[i * h + j];
                }
                hid[j] = gelu(s);
            }
            for o in 0..d {
                let mut s = b2.data()[o];
                for j in 0..h {
                    s += hid[j] * w2.data()[j * d + o];
                }
                assert!((tape.value(out).row(n)[o] - s).abs() < 1e-12);
            }
        }
        assert_eq!(gelu(0.0), 0.0);

        store.get_mut(tower.dcn.deep_in.w).data_mut().fill(0.0);
        store.get_mut(tower.dcn.deep_out.w).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let e = tower.encoder.encode(&mut tape, &p, &inputs).unwrap();
        let out = tower.dcn.deep_branch(&mut tape, &p, e).unwrap();
        for n in 0..3 {
            assert_eq!(
                tape.value(out).row(n),
                store.get(tower.dcn.deep_out.b).data()
            );
        }
    }

    fn tower_rows(tower: &LocationTower, store: &ParamStore, f: &LocationFeatures) -> Tensor {
        let inputs = EncoderInputs::from_features(f).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let out = tower.forward(&mut tape, &p, &inputs).unwrap();
        tape.value(out.candidates).clone()
    }

    #[test]
    fn tower_shapes_permutation_and_row_purity() {
        let (tower, store) = build(8);
        let one = tower_rows(&tower, &store, &features(1, 7));
        assert_eq!(one.shape(), &[1, 8]);

        let f = features(6, 8);
        let base = tower_rows(&tower, &store, &f);
        let perm = [3, 0, 5, 1, 4, 2];
        let permuted = tower_rows(&tower, &store, &f.select(&perm));
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(permuted.row(i), base.row(src));
        }

        let mut g = f.clone();
        g.poi[4] = features(1, 99).poi[0];
        g.rank[4] = (g.rank[4] + 3) % 8;
        let changed = tower_rows(&tower, &store, &g);
        for n in (0..6).filter(|&n| n != 4) {
            assert_eq!(changed.row(n), base.row(n));
        }
        assert_ne!(changed.row(4), base.row(4));

        assert!(EncoderInputs::from_features(&features(0, 1)).is_err());
    }

    #[test]
    fn parameter_count_independent_of_location_count() {
        let (_, a) = build(16);
        let (_, b) = build(16);
        assert_eq!(a.count(), b.count());
        // nothing is sized by N: the same store serves 1 and 50 locations
        let (tower, store) = build(16);
        assert_eq!(
            tower_rows(&tower, &store, &features(50, 1)).shape(),
            &[50, 16]
        );
        assert_eq!(
            tower_rows(&tower, &store, &features(1, 1)).shape(),
            &[1, 16]
        );
    }

    #[test]
    fn tower_gradient_wrt_cross_weights() {
        let (tower, store) = build(8);
        let inputs = EncoderInputs::from_features(&features(4, 10)).unwrap();
        let ids: Vec<ParamId> = tower.dcn.cross.iter().flat_map(|&(w, b)| [w, b]).collect();
        let probe: Vec<Tensor> = ids.iter().map(|&i| store.get(i).clone()).collect();
        let rep = check_gradients(&probe, 1e-5, |tape, vars| {
            let mut all: Vec<Var> = store
                .tensors()
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect();
            for (&id, &v) in ids.iter().zip(vars) {
                all[id.index()] = v;
            }
            let p = Bound::from_vars(all);
            let out = tower.forward(tape, &p, &inputs)?;
            let sq = tape.mul(out.candidates, out.candidates)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
