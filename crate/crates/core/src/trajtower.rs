//! Trajectory tower: masked multi-head attention and noisy top-k MoE blocks.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::ModelConfig;
use crate::data::SLOTS_PER_DAY;
use crate::error::{Error, Result};
use crate::nn::{normal, uniform, Bound, LayerNorm, Linear, ParamId, ParamStore, TABLE_INIT_STD};
use crate::rng::Rng;

/// Multi-head scaled dot-product attention restricted to earlier real keys.
#[derive(Clone, Debug)]
pub struct Attention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

/// Disallowed-key mask for `[B, T, T]` logits: query `i` may see key `j`
/// only if `j <= i` and position `j` is real.
pub fn attention_mask(batch: usize, t: usize, real: &[bool]) -> Vec<bool> {
    let mut out = vec![true; batch * t * t];
    for b in 0..batch {
        for i in 0..t {
            for j in 0..=i {
                out[(b * t + i) * t + j] = !real[b * t + j];
            }
        }
    }
    out
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Self {
        Attention {
            heads,
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
        }
    }

    /// `x` is `[B, T, d]`; `real` flags real positions row-major over `[B, T]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, real: &[bool]) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || real.len() != s[0] * s[1] {
            return Err(Error::shape("attention", &s, &[real.len()]));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, x)?;
        let v = self.v.forward(tape, p, x)?;
        let blocked = attention_mask(b, t, real);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 2, h * dh, dh)?;
            let kh = tape.slice(k, 2, h * dh, dh)?;
            let vh = tape.slice(v, 2, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, scale);
            let logits = tape.masked_fill(logits, &blocked, f64::NEG_INFINITY)?;
            let att = tape.softmax(logits);
            outs.push(tape.matmul(att, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 2)?
        };
        self.o.forward(tape, p, cat)
    }
}

/// Noisy top-k gating network.
#[derive(Clone, Debug)]
pub struct Gate {
    pub w_g: ParamId,
    pub w_n: ParamId,
    pub top_k: usize,
}

/// Keeps the top `k` logits per row and softmaxes over them.
pub fn gate_weights(tape: &mut Tape, logits: Var, k: usize) -> Result<(Var, Vec<Vec<usize>>)> {
    let (masked, selected) = tape.topk_mask(logits, k)?;
    Ok((tape.softmax(masked), selected))
}

impl Gate {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        experts: usize,
        top_k: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Gate {
            w_g: store.add(format!("{name}.w_g"), uniform(&[d, experts], bound, rng)),
            w_n: store.add(format!("{name}.w_n"), uniform(&[d, experts], bound, rng)),
            top_k,
        }
    }

    /// Raw gate logits for `x: [M, d]`; noise is added only when `noise` is given.
    pub fn logits(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        noise: Option<&mut Rng>,
    ) -> Result<Var> {
        let clean = tape.matmul(x, p.var(self.w_g))?;
        let Some(rng) = noise else {
            return Ok(clean);
        };
        let raw = tape.matmul(x, p.var(self.w_n))?;
        let spread = tape.softplus(raw);
        let shape = tape.shape(clean).to_vec();
        let n = Tensor::from_fn(&shape, |_| StandardNormal.sample(rng));
        let n = tape.constant(n);
        let jitter = tape.mul(n, spread)?;
        tape.add(clean, jitter)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        noise: Option<&mut Rng>,
    ) -> Result<(Var, Vec<Vec<usize>>)> {
        let logits = self.logits(tape, p, x, noise)?;
        gate_weights(tape, logits, self.top_k)
    }
}

/// Two-layer GELU feedforward expert.
#[derive(Clone, Debug)]
pub struct Expert {
    pub up: Linear,
    pub down: Linear,
}

impl Expert {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut Rng) -> Self {
        Expert {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, p, h)
    }
}

/// Sums of gate weights per layer and expert, with token counts per layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingStats {
    pub weight_sum: Vec<Vec<f64>>,
    pub tokens: Vec<usize>,
}

impl RoutingStats {
    pub fn new(layers: usize, experts: usize) -> Self {
        RoutingStats {
            weight_sum: vec![vec![0.0; experts]; layers],
            tokens: vec![0; layers],
        }
    }

    fn record(&mut self, layer: usize, weights: &Tensor) {
        let e = weights.last_dim();
        for r in 0..weights.rows() {
            for (acc, w) in self.weight_sum[layer].iter_mut().zip(weights.row(r)) {
                *acc += w;
            }
        }
        self.tokens[layer] += weights.numel() / e;
    }

    /// Mean gate weight per expert for `layer`; zeros before any token is seen.
    pub fn mean(&self, layer: usize) -> Vec<f64> {
        let n = self.tokens[layer].max(1) as f64;
        self.weight_sum[layer].iter().map(|s| s / n).collect()
    }

    pub fn merge(&mut self, other: &RoutingStats) {
        for (a, b) in self.weight_sum.iter_mut().zip(&other.weight_sum) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.tokens.iter_mut().zip(&other.tokens) {
            *a += b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub gate: Gate,
    pub experts: Vec<Expert>,
}

impl MoeLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        MoeLayer {
            gate: Gate::new(
                store,
                &format!("{name}.gate"),
                d,
                cfg.experts,
                cfg.top_k,
                rng,
            ),
            experts: (0..cfg.experts)
                .map(|e| {
                    Expert::new(
                        store,
                        &format!("{name}.expert{e}"),
                        d,
                        cfg.expert_hidden(),
                        rng,
                    )
                })
                .collect(),
        }
    }

    /// `x: [M, d]`. Each expert runs only on the rows routed to it. Returns the
    /// output and the gate weights `[M, E]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        noise: Option<&mut Rng>,
    ) -> Result<(Var, Var)> {
        let m = tape.shape(x)[0];
        let (weights, selected) = self.gate.forward(tape, p, x, noise)?;
        let mut total: Option<Var> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..m).filter(|&r| selected[r].contains(&e)).collect();
            if rows.is_empty() {
                continue;
            }
            let xe = tape.embedding(x, &rows, &[rows.len()])?;
            let ye = expert.forward(tape, p, xe)?;
            let entries: Vec<(usize, usize)> = rows.iter().map(|&r| (r, e)).collect();
            let w = tape.pick(weights, &entries)?;
            let w = tape.reshape(w, &[rows.len(), 1])?;
            let ye = tape.mul(ye, w)?;
            let ye = tape.scatter_rows(ye, &rows, m)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, ye)?,
                None => ye,
            });
        }
        Ok((
            total.expect("every row selects at least one expert"),
            weights,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm_attn: LayerNorm,
    pub attn: Attention,
    pub norm_moe: LayerNorm,
    pub moe: MoeLayer,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        Block {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, cfg.heads, rng),
            norm_moe: LayerNorm::new(store, &format!("{name}.ln_moe"), d),
            moe: MoeLayer::new(store, &format!("{name}.moe"), cfg, rng),
        }
    }

    /// Pre-norm attention and MoE sublayers with residuals. Only real
    /// positions are routed through the MoE; the others pass through.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        real: &[bool],
        noise: Option<&mut Rng>,
    ) -> Result<(Var, Option<Tensor>)> {
        let s = tape.shape(x).to_vec();
        let n = self.norm_attn.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, n, real)?;
        let h = tape.add(x, a)?;

        let rows: Vec<usize> = (0..real.len()).filter(|&i| real[i]).collect();
        if rows.is_empty() {
            return Ok((h, None));
        }
        let n = self.norm_moe.forward(tape, p, h)?;
        let flat = tape.reshape(n, &[s[0] * s[1], s[2]])?;
        let tokens = tape.embedding(flat, &rows, &[rows.len()])?;
        let (m, weights) = self.moe.forward(tape, p, tokens, noise)?;
        let m = tape.scatter_rows(m, &rows, s[0] * s[1])?;
        let m = tape.reshape(m, &s)?;
        let out = tape.add(h, m)?;
        Ok((out, Some(tape.value(weights).clone())))
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryTower {
    pub time: ParamId,
    pub blocks: Vec<Block>,
}

impl TrajectoryTower {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        TrajectoryTower {
            time: store.add(
                "traj.time",
                normal(&[SLOTS_PER_DAY, cfg.d_model], TABLE_INIT_STD, rng),
            ),
            blocks: (0..cfg.layers)
                .map(|l| Block::new(store, &format!("traj.block{l}"), cfg, rng))
                .collect(),
        }
    }

    /// `I = Blocks(E_l + E_t)` for position embeddings `e_l: [B, T, d]`.
    /// Gate noise is drawn from `noise` when given (training).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        e_l: Var,
        time_slots: &[usize],
        real: &[bool],
        mut noise: Option<&mut Rng>,
        mut stats: Option<&mut RoutingStats>,
    ) -> Result<Var> {
        let s = tape.shape(e_l).to_vec();
        if s.len() != 3 || time_slots.len() != s[0] * s[1] || real.len() != time_slots.len() {
            return Err(Error::shape(
                "trajectory_tower",
                &s,
                &[time_slots.len(), real.len()],
            ));
        }
        let e_t = tape.embedding(p.var(self.time), time_slots, &s[..2])?;
        let mut x = tape.add(e_l, e_t)?;
        for (l, block) in self.blocks.iter().enumerate() {
            let (y, weights) = block.forward(tape, p, x, real, noise.as_deref_mut())?;
            if let (Some(st), Some(w)) = (stats.as_deref_mut(), weights) {
                st.record(l, &w);
            }
            x = y;
        }
        Ok(x)
    }
}
