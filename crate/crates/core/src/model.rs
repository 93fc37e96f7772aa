//! Two-tower model: candidate embeddings from the location tower, intents
//! from the trajectory tower, and inner-product scores between them.

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::data::PaddedBatch;
use crate::error::{Error, Result};
use crate::loctower::{EncoderInputs, LocationTower};
use crate::nn::{Bound, ParamStore};
use crate::rng::{stream, Rng};
use crate::trajtower::{RoutingStats, TrajectoryTower};

/// `logits[..., n] = sum_i I[..., i] L[n, i]`.
pub fn score(tape: &mut Tape, intents: Var, candidates: Var) -> Result<Var> {
    let (si, sl) = (
        tape.shape(intents).to_vec(),
        tape.shape(candidates).to_vec(),
    );
    if sl.len() != 2 || si.last() != sl.last() {
        return Err(Error::shape("score", &si, &sl));
    }
    let lt = tape.transpose(candidates)?;
    tape.matmul(intents, lt)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits: [M, N]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Data("batch has no supervised positions".into()));
    }
    let s = tape.shape(logits).to_vec();
    let rows = s[..s.len() - 1].iter().product::<usize>();
    if rows != targets.len() {
        return Err(Error::shape("cross_entropy", &s, &[targets.len()]));
    }
    let lp = tape.log_softmax(logits);
    let entries: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
    let picked = tape.pick(lp, &entries)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// Loss over full `[B, T, N]` logits, counting only positions with a target.
pub fn loss(tape: &mut Tape, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let n = *s.last().expect("logits have a class axis");
    let flat = tape.reshape(logits, &[targets.len(), n])?;
    let rows: Vec<usize> = (0..targets.len())
        .filter(|&i| targets[i].is_some())
        .collect();
    if rows.is_empty() {
        return Err(Error::Data("batch has no supervised positions".into()));
    }
    let picked = tape.embedding(flat, &rows, &[rows.len()])?;
    let t: Vec<usize> = rows
        .iter()
        .map(|&r| targets[r].expect("filtered"))
        .collect();
    cross_entropy(tape, picked, &t)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub loc: LocationTower,
    pub traj: TrajectoryTower,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[N, d]` encoder output for the batch city.
    pub encoded: Var,
    /// `[N, d]` candidate embeddings.
    pub candidates: Var,
    /// `[B, T, d]`
    pub intents: Var,
    /// `[S, N]` scores at the supervised positions.
    pub logits: Var,
    pub targets: Vec<usize>,
}

impl Model {
    /// Fresh parameters drawn from the `init` stream of `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, "init");
        let mut store = ParamStore::new();
        let loc = LocationTower::new(&mut store, &cfg, &mut rng)?;
        let traj = TrajectoryTower::new(&mut store, &cfg, &mut rng);
        Ok(Model {
            cfg,
            store,
            loc,
            traj,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        inputs: &EncoderInputs,
        batch: &PaddedBatch,
        noise: Option<&mut Rng>,
        stats: Option<&mut RoutingStats>,
    ) -> Result<Forward> {
        let tower = self.loc.forward(tape, p, inputs)?;
        let pos = self
            .loc
            .encoder
            .encode_positions(tape, p, tower.encoded, batch)?;
        let intents =
            self.traj
                .forward(tape, p, pos, &batch.time_slots, &batch.mask, noise, stats)?;
        let d = self.cfg.d_model;
        let rows: Vec<usize> = (0..batch.positions())
            .filter(|&i| batch.targets[i].is_some())
            .collect();
        if rows.is_empty() {
            return Err(Error::Data("batch has no supervised positions".into()));
        }
        let flat = tape.reshape(intents, &[batch.positions(), d])?;
        let sup = tape.embedding(flat, &rows, &[rows.len()])?;
        let logits = score(tape, sup, tower.candidates)?;
        Ok(Forward {
            encoded: tower.encoded,
            candidates: tower.candidates,
            intents,
            logits,
            targets: rows
                .iter()
                .map(|&r| batch.targets[r].expect("filtered"))
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::nn::normal;

    fn t(shape: &[usize], seed: u64) -> Tensor {
        normal(shape, 1.0, &mut stream(seed, "t"))
    }

    #[test]
    fn score_cases() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 3, 4], 1));
        let eye = tape.constant(Tensor::from_fn(&[4, 4], |k| {
            if k / 4 == k % 4 {
                1.0
            } else {
                0.0
            }
        }));
        let s = score(&mut tape, i, eye).unwrap();
        assert_eq!(tape.value(s), tape.value(i));

        let z = tape.constant(Tensor::zeros(&[1, 4]));
        let l = tape.constant(t(&[5, 4], 2));
        let s = score(&mut tape, z, l).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));

        let s = score(&mut tape, i, l).unwrap();
        let (iv, lv) = (tape.value(i), tape.value(l));
        assert_eq!(tape.value(s).shape(), &[2, 3, 5]);
        for b in 0..2 {
            for p in 0..3 {
                for n in 0..5 {
                    let mut acc = 0.0;
                    for k in 0..4 {
                        acc += iv.at(&[b, p, k]) * lv.at(&[n, k]);
                    }
                    assert!((tape.value(s).at(&[b, p, n]) - acc).abs() < 1e-12);
                }
            }
        }
        let bad = tape.constant(t(&[5, 3], 3));
        assert!(score(&mut tape, i, bad).is_err());
    }

    #[test]
    fn loss_cases() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::full(&[1, 2, 7], 0.3));
        let l = loss(&mut tape, u, &[Some(2), None]).unwrap();
        assert!((tape.value(l).item() - 7f64.ln()).abs() < 1e-12);

        let mut big = vec![0.0; 7];
        big[4] = 800.0;
        let b = tape.constant(Tensor::new(vec![1, 7], big).unwrap());
        let l = cross_entropy(&mut tape, b, &[4]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-300);

        let none = loss(&mut tape, u, &[None, None]);
        assert!(none.is_err());

        let x = t(&[2, 3, 5], 4);
        let targets = [Some(1), Some(4), None, Some(0), None, None];
        let xv = tape.constant(x.clone());
        let l = loss(&mut tape, xv, &targets).unwrap();
        let mut total = 0.0;
        let mut n = 0.0;
        for (r, tg) in targets.iter().enumerate() {
            if let Some(tg) = tg {
                let row = x.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[*tg];
                n += 1.0;
            }
        }
        assert!((tape.value(l).item() - total / n).abs() < 1e-12);
    }
}
