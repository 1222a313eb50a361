//! Multi-object alignment network: per-object cross-attention encoders with
//! shared weights, joint self-attention over all latents, per-object
//! mean-pool decode to 11 raw outputs.

use std::f64::consts::FRAC_PI_4;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff_engine::{Checkpoint, Graph, NamedTensor, NodeId, ParamId, ParamStore, Real, Scalar, Tensor, TrainState};
use crate::error::{Error, Result};
use crate::geometry::{PoseDelta, Quat, Vec3};
use crate::sparse_input::{Batch, C_INPUT};

/// Raw outputs per slot: `[t_d, t_phi, t_theta, q0, q1, q2, q3, s_x, s_y, s_z, c]`.
pub const N_OUT: usize = 11;

/// Bound on per-step angle updates.
pub const ANGLE_BOUND: f64 = FRAC_PI_4;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub n_mul: usize,
    pub n_latent: usize,
    pub c_latent: usize,
    pub n_blocks: usize,
    pub n_self_per_block: usize,
    pub heads: usize,
    /// Hidden width of the per-row input embedding.
    pub embed_hidden: usize,
    /// Hidden width of the feed-forward sublayers.
    pub ff_hidden: usize,
    /// Hidden width of the decode MLP.
    pub decode_hidden: usize,
    pub activation: Activation,
    pub ln_eps: f64,
}

impl NetConfig {
    pub fn paper() -> NetConfig {
        NetConfig::with_sizes(5, 80, 256, 8)
    }

    pub fn desk() -> NetConfig {
        NetConfig::with_sizes(3, 32, 64, 4)
    }

    pub fn tiny() -> NetConfig {
        NetConfig::with_sizes(2, 4, 8, 2)
    }

    pub fn with_sizes(n_mul: usize, n_latent: usize, c_latent: usize, heads: usize) -> NetConfig {
        NetConfig {
            n_mul,
            n_latent,
            c_latent,
            n_blocks: 3,
            n_self_per_block: 2,
            heads,
            embed_hidden: c_latent,
            ff_hidden: 2 * c_latent,
            decode_hidden: c_latent,
            activation: Activation::Gelu,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.n_mul,
            self.n_latent,
            self.c_latent,
            self.n_blocks,
            self.heads,
            self.embed_hidden,
            self.ff_hidden,
            self.decode_hidden,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config(format!("network sizes must be positive: {self:?}")));
        }
        if !self.c_latent.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("c_latent {} not divisible by {} heads", self.c_latent, self.heads)));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::desk()
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    ln_q: Norm,
    ln_kv: Option<Norm>,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    out: Dense,
    ln_ff: Norm,
    ff1: Dense,
    ff2: Dense,
}

#[derive(Clone, Debug)]
struct BlockIds {
    cross: AttnIds,
    selfs: Vec<AttnIds>,
}

#[derive(Clone, Debug)]
struct NetIds {
    latents: ParamId,
    embed1: Dense,
    embed2: Dense,
    blocks: Vec<BlockIds>,
    dec_ln: Norm,
    dec1: Dense,
    dec2: Dense,
}

struct Init<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl<T: Scalar> Init<'_, T> {
    fn trunc_normal(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        let data = (0..rows * cols)
            .map(|_| loop {
                let v = self.normal.sample(&mut self.rng);
                if v.abs() <= 2.0 * INIT_STD {
                    break T::of(v);
                }
            })
            .collect();
        Tensor { rows, cols, data }
    }

    fn weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let t = self.trunc_normal(rows, cols);
        self.store.add(name, t)
    }

    fn dense(&mut self, name: &str, i: usize, o: usize) -> Result<Dense> {
        Ok(Dense { w: self.weight(&format!("{name}.w"), i, o)?, b: self.store.add(&format!("{name}.b"), Tensor::zeros(1, o))? })
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<Norm> {
        Ok(Norm {
            g: self.store.add(&format!("{name}.g"), Tensor::filled(1, c, T::one()))?,
            b: self.store.add(&format!("{name}.b"), Tensor::zeros(1, c))?,
        })
    }

    fn attn(&mut self, name: &str, cfg: &NetConfig, cross: bool) -> Result<AttnIds> {
        let c = cfg.c_latent;
        Ok(AttnIds {
            ln_q: self.norm(&format!("{name}.ln_q"), c)?,
            ln_kv: if cross { Some(self.norm(&format!("{name}.ln_kv"), c)?) } else { None },
            wq: self.weight(&format!("{name}.wq"), c, c)?,
            wk: self.weight(&format!("{name}.wk"), c, c)?,
            wv: self.weight(&format!("{name}.wv"), c, c)?,
            out: self.dense(&format!("{name}.out"), c, c)?,
            ln_ff: self.norm(&format!("{name}.ln_ff"), c)?,
            ff1: self.dense(&format!("{name}.ff1"), c, cfg.ff_hidden)?,
            ff2: self.dense(&format!("{name}.ff2"), cfg.ff_hidden, c)?,
        })
    }
}

/// Network parameters and their structure.
pub struct AlignNet<T: Scalar> {
    pub config: NetConfig,
    pub params: ParamStore<T>,
    ids: NetIds,
    forwards: AtomicU64,
}

impl<T: Scalar> Clone for AlignNet<T> {
    fn clone(&self) -> Self {
        AlignNet {
            config: self.config.clone(),
            params: self.params.clone(),
            ids: self.ids.clone(),
            forwards: AtomicU64::new(self.forward_count()),
        }
    }
}

/// Output of one forward pass over a batch.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[active_count, 11]` raw outputs for the active slots, in slot order.
    pub raw: Vec<[f64; N_OUT]>,
    pub deltas: Vec<PoseDelta>,
}

impl<T: Scalar> AlignNet<T> {
    pub fn new(config: NetConfig, seed: u64) -> Result<AlignNet<T>> {
        config.validate()?;
        let mut store = ParamStore::new();
        let ids = build_params(&config, &mut store, seed)?;
        Ok(AlignNet { config, params: store, ids, forwards: AtomicU64::new(0) })
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Forward passes run through [`AlignNet::predict`] so far.
    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed)
    }

    /// Records the network on `g` for a flattened input `[n_mul * rows, 13]`;
    /// returns the `[n_mul, 11]` raw output node.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let cfg = &self.config;
        let [n, cols] = g.shape(x);
        if cols != C_INPUT || n % cfg.n_mul != 0 || n == 0 {
            return Err(Error::Shape(format!("input {n}x{cols} does not split into {} slots of {C_INPUT}-wide rows", cfg.n_mul)));
        }
        let ids = &self.ids;
        let p = &self.params;
        let h = self.dense(g, x, ids.embed1)?;
        let h = self.act(g, h)?;
        let h = self.dense(g, h, ids.embed2)?;
        let lat0 = g.param(p, ids.latents);
        let mut lat = g.repeat_rows(lat0, cfg.n_mul)?;
        for block in &ids.blocks {
            lat = self.attn_layer(g, lat, Some(h), &block.cross, cfg.n_mul)?;
            for s in &block.selfs {
                lat = self.attn_layer(g, lat, None, s, 1)?;
            }
        }
        let pooled = g.mean_rows(lat, cfg.n_mul)?;
        let d = self.norm(g, pooled, ids.dec_ln)?;
        let d = self.dense(g, d, ids.dec1)?;
        let d = self.act(g, d)?;
        self.dense(g, d, ids.dec2)
    }

    /// Runs one forward pass over `batch` and decodes every active slot.
    pub fn predict(&self, batch: &Batch) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let raw = self.forward_batch(&mut g, batch)?;
        let out = g.value(raw);
        let raw: Vec<[f64; N_OUT]> = (0..out.rows).map(|r| std::array::from_fn(|c| out.at(r, c).f64())).collect();
        let deltas = raw.iter().map(raw_to_delta).collect();
        Ok(ForwardOutput { raw, deltas })
    }

    /// Records the network over `batch` and slices the active slots:
    /// returns a `[active_count, 11]` node.
    pub fn forward_batch(&self, g: &mut Graph<T>, batch: &Batch) -> Result<NodeId> {
        let x = self.batch_input(batch)?;
        let xi = g.input(x);
        let out = self.forward_graph(g, xi)?;
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let active = active_slots(batch)?;
        g.slice_rows(out, 0, active)
    }

    fn batch_input(&self, batch: &Batch) -> Result<Tensor<T>> {
        if batch.n_mul() != self.config.n_mul {
            return Err(Error::Shape(format!("batch has {} slots, network expects {}", batch.n_mul(), self.config.n_mul)));
        }
        let rows = batch.rows_per_slot();
        if rows == 0 || batch.active().any(|b| b.rows.len() != rows) {
            return Err(Error::Shape("active slots must share a nonzero row count".into()));
        }
        let data = batch.flatten().into_iter().map(|v| T::of(v as f64)).collect();
        Tensor::from_vec(batch.n_mul() * rows, C_INPUT, data)
    }

    fn dense(&self, g: &mut Graph<T>, x: NodeId, d: Dense) -> Result<NodeId> {
        let w = g.param(&self.params, d.w);
        let b = g.param(&self.params, d.b);
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph<T>, x: NodeId, n: Norm) -> Result<NodeId> {
        let gamma = g.param(&self.params, n.g);
        let beta = g.param(&self.params, n.b);
        g.layer_norm(x, gamma, beta, self.config.ln_eps)
    }

    fn act(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        match self.config.activation {
            Activation::Gelu => g.gelu(x),
            Activation::Relu => g.relu(x),
        }
    }

    /// Pre-norm attention sublayer plus feed-forward sublayer, both residual.
    /// Cross-attention reads keys/values from `kv`; self-attention from `lat`.
    fn attn_layer(&self, g: &mut Graph<T>, lat: NodeId, kv: Option<NodeId>, a: &AttnIds, groups: usize) -> Result<NodeId> {
        let p = &self.params;
        let qn = self.norm(g, lat, a.ln_q)?;
        let kvn = match (kv, a.ln_kv) {
            (Some(h), Some(n)) => self.norm(g, h, n)?,
            _ => qn,
        };
        let wq = g.param(p, a.wq);
        let wk = g.param(p, a.wk);
        let wv = g.param(p, a.wv);
        let q = g.matmul(qn, wq)?;
        let k = g.matmul(kvn, wk)?;
        let v = g.matmul(kvn, wv)?;
        let att = g.attention(q, k, v, self.config.heads, groups)?;
        let o = self.dense(g, att, a.out)?;
        let lat = g.add(lat, o)?;
        let f = self.norm(g, lat, a.ln_ff)?;
        let f = self.dense(g, f, a.ff1)?;
        let f = self.act(g, f)?;
        let f = self.dense(g, f, a.ff2)?;
        g.add(lat, f)
    }

    /// Serializes the parameters (and optional optimizer state) with the config.
    pub fn to_checkpoint(&self, state: Option<&OptimizerState<T>>) -> Result<Checkpoint> {
        let params = self.params.ids().map(|id| NamedTensor::from_tensor(self.params.name(id), self.params.value(id))).collect();
        let state = state.map(|s| s.to_train_state(&self.params)).transpose()?;
        Ok(Checkpoint { config: serde_json::to_string(&self.config)?, params, state })
    }

    /// Rebuilds a network from a checkpoint, validating every parameter
    /// name and shape against the structure implied by its config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(AlignNet<T>, Option<OptimizerState<T>>)> {
        let config: NetConfig =
            serde_json::from_str(&ckpt.config).map_err(|e| Error::Checkpoint(format!("network config: {e}")))?;
        let mut net = AlignNet::new(config, 0)?;
        if ckpt.params.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, config implies {}",
                ckpt.params.len(),
                net.params.len()
            )));
        }
        for id in net.params.ids().collect::<Vec<_>>() {
            let name = net.params.name(id).to_string();
            let nt = ckpt.param(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let t: Tensor<T> = nt.to_tensor()?;
            if t.shape() != net.params.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    net.params.value(id).shape()
                )));
            }
            *net.params.value_mut(id) = t;
        }
        let state = ckpt.state.as_ref().map(|s| OptimizerState::from_train_state(s, &net.params)).transpose()?;
        Ok((net, state))
    }

    pub fn save(&self, path: &std::path::Path, state: Option<&OptimizerState<T>>) -> Result<()> {
        crate::diff_engine::write_checkpoint(path, &self.to_checkpoint(state)?)
    }

    pub fn load(path: &std::path::Path) -> Result<(AlignNet<T>, Option<OptimizerState<T>>)> {
        AlignNet::from_checkpoint(&crate::diff_engine::read_checkpoint(path)?)
    }

    /// Copy with another element type.
    pub fn cast<U: Scalar>(&self) -> AlignNet<U> {
        AlignNet { config: self.config.clone(), params: self.params.cast(), ids: self.ids.clone(), forwards: AtomicU64::new(0) }
    }
}

fn active_slots(batch: &Batch) -> Result<usize> {
    let active = batch.slots.iter().take_while(|s| s.is_some()).count();
    if active != batch.active_count || batch.slots[active..].iter().any(|s| s.is_some()) {
        return Err(Error::Shape(format!("active slots must be a prefix of length active_count = {}", batch.active_count)));
    }
    if active == 0 {
        return Err(Error::Shape("batch has no active slot".into()));
    }
    Ok(active)
}

fn build_params<T: Scalar>(cfg: &NetConfig, store: &mut ParamStore<T>, seed: u64) -> Result<NetIds> {
    let normal = Normal::new(0.0, INIT_STD).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut init = Init { store, rng: ChaCha8Rng::seed_from_u64(seed), normal };
    let c = cfg.c_latent;
    let latents = init.weight("latents", cfg.n_latent, c)?;
    let embed1 = init.dense("embed.0", C_INPUT, cfg.embed_hidden)?;
    let embed2 = init.dense("embed.1", cfg.embed_hidden, c)?;
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let cross = init.attn(&format!("block{b}.cross"), cfg, true)?;
        let selfs =
            (0..cfg.n_self_per_block).map(|s| init.attn(&format!("block{b}.self{s}"), cfg, false)).collect::<Result<_>>()?;
        blocks.push(BlockIds { cross, selfs });
    }
    let dec_ln = init.norm("decode.ln", c)?;
    let dec1 = init.dense("decode.0", c, cfg.decode_hidden)?;
    let dec2 = init.dense("decode.1", cfg.decode_hidden, N_OUT)?;
    Ok(NetIds { latents, embed1, embed2, blocks, dec_ln, dec1, dec2 })
}

/// Decoded update components, generic so the mapping can be differentiated
/// with dual numbers.
#[derive(Clone, Copy, Debug)]
pub struct DeltaParts<R> {
    pub dd: R,
    pub dphi: R,
    pub dtheta: R,
    /// `(w, x, y, z)`
    pub dq: [R; 4],
    pub ds: [R; 3],
    pub sigma: R,
}

pub fn sigmoid_r<R: Real>(x: R) -> R {
    let one = R::cst(1.0);
    if x.val() >= 0.0 {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

const QUAT_GUARD: f64 = 1e-6;

pub fn decode_raw<R: Real>(raw: &[R; N_OUT]) -> DeltaParts<R> {
    let two = R::cst(2.0);
    let alpha = R::cst(ANGLE_BOUND);
    let qw = R::cst(1.0) + raw[3];
    let q = [qw, raw[4], raw[5], raw[6]];
    let n2 = q.iter().fold(R::cst(0.0), |a, &v| a + v * v);
    let dq = if n2.val().sqrt() < QUAT_GUARD {
        [R::cst(1.0), R::cst(0.0), R::cst(0.0), R::cst(0.0)]
    } else {
        let n = n2.sqrt();
        q.map(|v| v / n)
    };
    DeltaParts {
        dd: two * sigmoid_r(raw[0]),
        dphi: alpha * raw[1].tanh(),
        dtheta: alpha * raw[2].tanh(),
        dq,
        ds: [two * sigmoid_r(raw[7]), two * sigmoid_r(raw[8]), two * sigmoid_r(raw[9])],
        sigma: sigmoid_r(raw[10]),
    }
}

/// Maps 11 raw network outputs to a [`PoseDelta`].
pub fn raw_to_delta(raw: &[f64; N_OUT]) -> PoseDelta {
    let p = decode_raw(raw);
    PoseDelta {
        dd: p.dd,
        dphi: p.dphi,
        dtheta: p.dtheta,
        dq: Quat::new(p.dq[0], p.dq[1], p.dq[2], p.dq[3]),
        ds: Vec3::new(p.ds[0], p.ds[1], p.ds[2]),
        sigma: p.sigma,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lamb,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Lamb, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-6, weight_decay: 0.0 }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Some gradient entry was NaN or infinite; parameters and state untouched.
    SkippedNonFinite,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> OptimizerState<T> {
        let zeros = || {
            params
                .ids()
                .map(|id| {
                    let s = params.value(id).shape();
                    Tensor::zeros(s[0], s[1])
                })
                .collect()
        };
        OptimizerState { step: 0, m: zeros(), v: zeros() }
    }

    fn to_train_state(&self, params: &ParamStore<T>) -> Result<TrainState> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        let mut tensors = Vec::with_capacity(2 * params.len());
        for (i, id) in params.ids().enumerate() {
            tensors.push(NamedTensor::from_tensor(&format!("m/{}", params.name(id)), &self.m[i]));
            tensors.push(NamedTensor::from_tensor(&format!("v/{}", params.name(id)), &self.v[i]));
        }
        Ok(TrainState { step: self.step, meta: "{}".into(), tensors })
    }

    fn from_train_state(ts: &TrainState, params: &ParamStore<T>) -> Result<OptimizerState<T>> {
        let find = |key: String, shape: [usize; 2]| -> Result<Tensor<T>> {
            let nt = ts
                .tensors
                .iter()
                .find(|t| t.name == key)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
            let t: Tensor<T> = nt.to_tensor()?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!("optimizer tensor {key} has shape {:?}", t.shape())));
            }
            Ok(t)
        };
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for id in params.ids() {
            let shape = params.value(id).shape();
            m.push(find(format!("m/{}", params.name(id)), shape)?);
            v.push(find(format!("v/{}", params.name(id)), shape)?);
        }
        Ok(OptimizerState { step: ts.step, m, v })
    }
}

/// One Lamb (or Adam) step from the gradients accumulated in `params`.
/// Lamb scales each parameter tensor's update by the trust ratio
/// `‖w‖ / ‖u‖`, taken as 1 when either norm is zero.
pub fn optimizer_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    cfg: &OptimizerConfig,
) -> Result<StepOutcome> {
    if state.m.len() != params.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    if params.ids().any(|id| !params.grad(id).is_finite()) {
        return Ok(StepOutcome::SkippedNonFinite);
    }
    let step = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(step.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step.min(i32::MAX as u64) as i32);
    let ids: Vec<ParamId> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let grad = params.grad(id).clone();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let w = params.value(id);
        let mut update = Vec::with_capacity(w.len());
        for k in 0..w.len() {
            let gk = grad.data[k].f64();
            let mk = cfg.beta1 * m.data[k].f64() + (1.0 - cfg.beta1) * gk;
            let vk = cfg.beta2 * v.data[k].f64() + (1.0 - cfg.beta2) * gk * gk;
            m.data[k] = T::of(mk);
            v.data[k] = T::of(vk);
            let u = (mk / bc1) / ((vk / bc2).sqrt() + cfg.eps) + cfg.weight_decay * w.data[k].f64();
            update.push(u);
        }
        let ratio = match cfg.kind {
            OptimizerKind::Adam => 1.0,
            OptimizerKind::Lamb => {
                let wn = w.norm();
                let un = update.iter().map(|u| u * u).sum::<f64>().sqrt();
                if wn > 0.0 && un > 0.0 {
                    wn / un
                } else {
                    1.0
                }
            }
        };
        let scale = cfg.lr * ratio;
        let w = params.value_mut(id);
        for (wk, u) in w.data.iter_mut().zip(update) {
            *wk -= T::of(scale * u);
        }
    }
    state.step = step;
    Ok(StepOutcome::Applied)
}

/// Draws a random finite raw-output vector; used by property tests and examples.
pub fn random_raw<R: Rng>(rng: &mut R, spread: f64) -> [f64; N_OUT] {
    std::array::from_fn(|_| rng.random_range(-spread..spread))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff_engine::grad_check_params;
    use crate::geometry::Pose;
    use crate::sparse_input::{assemble_batch, InputBlock, InputVector};
    use crate::synthscene::{BBox, Detection};

    fn block(seed: u64, rows: usize) -> InputBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..rows)
            .map(|i| InputVector {
                rgb: [rng.random(), rng.random(), rng.random()],
                normal: [rng.random(), rng.random(), rng.random()],
                depth: rng.random_range(1.0..5.0),
                mask: (rng.random::<f32>() > 0.5) as u8 as f32,
                bearing: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0],
                tau: (i % 2) as u8,
                det_id: 0,
            })
            .collect();
        let pose = Pose::from_translation(Vec3::new(0.1, 0.0, 3.0), Quat::IDENTITY, Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let bbox = BBox { x0: 10.0, y0: 10.0, x1: 40.0, y1: 40.0 };
        let detection = Detection {
            bbox,
            category: crate::synthscene::Category::Cube,
            object_id: seed as usize,
            gt_visible_fraction: 1.0,
            confidence: 1.0,
        };
        InputBlock { rows, detection, current_pose: pose }
    }

    fn batch(blocks: Vec<InputBlock>, n_mul: usize) -> Batch {
        assemble_batch(blocks, n_mul).remove(0)
    }

    #[test]
    fn zero_raw_is_identity() {
        let d = raw_to_delta(&[0.0; N_OUT]);
        assert_eq!(d, PoseDelta::identity());
        assert!((raw_to_delta(&[40.0; N_OUT]).dd - 2.0).abs() < 1e-12);
        assert!(raw_to_delta(&[-40.0; N_OUT]).dd < 1e-12);
        let mut r = [0.0; N_OUT];
        r[3] = -1.0;
        r[4] = 1e-9;
        assert_eq!(raw_to_delta(&r).dq, Quat::IDENTITY);
    }

    #[test]
    fn decoded_deltas_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let d = raw_to_delta(&random_raw(&mut rng, 30.0));
            assert!(d.is_valid(), "{d:?}");
        }
    }

    #[test]
    fn active_count_matches_outputs() {
        let net = AlignNet::<f32>::new(NetConfig::tiny(), 1).unwrap();
        for k in 1..=2 {
            let b = batch((0..k).map(|i| block(i as u64, 20)).collect(), 2);
            assert_eq!(net.predict(&b).unwrap().deltas.len(), k);
        }
        assert_eq!(net.forward_count(), 2);
        let wrong = batch(vec![block(0, 20)], 3);
        assert!(matches!(net.predict(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn permuting_slots_permutes_outputs() {
        let net = AlignNet::<f64>::new(NetConfig::with_sizes(3, 4, 8, 2), 9).unwrap();
        let blocks: Vec<_> = (0..3).map(|i| block(10 + i, 24)).collect();
        let a = net.predict(&batch(blocks.clone(), 3)).unwrap();
        let perm = [2, 0, 1];
        // det_id follows the object, so restamp consistently after assembly
        let mut pb = batch(perm.iter().map(|&i| blocks[i].clone()).collect(), 3);
        for (slot, &i) in pb.slots.iter_mut().zip(&perm) {
            slot.as_mut().unwrap().stamp(i as u32 + 1);
        }
        let b = net.predict(&pb).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            for c in 0..N_OUT {
                assert!((a.raw[i][c] - b.raw[j][c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn duplicate_slots_agree_at_init() {
        let net = AlignNet::<f32>::new(NetConfig::tiny(), 4).unwrap();
        let b = block(5, 20);
        let mut same = batch(vec![b.clone(), b.clone()], 2);
        same.slots.iter_mut().for_each(|s| s.as_mut().unwrap().stamp(1));
        let out = net.predict(&same).unwrap();
        assert_eq!(out.raw[0], out.raw[1]);
        // distinct det_id stamps are the only asymmetry; measured max gap 2.6e-4
        let out = net.predict(&batch(vec![b.clone(), b], 2)).unwrap();
        for c in 0..N_OUT {
            assert!((out.raw[0][c] - out.raw[1][c]).abs() < 1e-3);
        }
    }

    #[test]
    fn bias_only_network_is_input_independent() {
        let mut net = AlignNet::<f64>::new(NetConfig::tiny(), 2).unwrap();
        let bias = net.ids.dec2.b;
        for id in net.params.ids().collect::<Vec<_>>() {
            let v = net.params.value_mut(id);
            if id == bias {
                v.data.iter_mut().enumerate().for_each(|(i, x)| *x = 0.1 * i as f64 - 0.4);
            } else {
                v.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let out = net.predict(&batch(vec![block(1, 20), block(2, 20)], 2)).unwrap();
        assert_eq!(out.deltas[0], out.deltas[1]);
    }

    #[test]
    fn network_gradients_match_differences() {
        let net = AlignNet::<f64>::new(NetConfig::tiny(), 6).unwrap();
        let b = batch(vec![block(7, 20), block(8, 20)], 2);
        let x = net.batch_input(&b).unwrap();
        let err = grad_check_params(
            &net.params,
            |g, store| {
                let mut n = net.clone();
                n.params = store.clone();
                let xi = g.input(x.clone());
                let out = n.forward_graph(g, xi)?;
                let t = g.tanh(out)?;
                g.sum(t)
            },
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn optimizer_basics() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(1.0)).unwrap();
        let mut st = OptimizerState::new(&store);
        let cfg = OptimizerConfig::default();
        assert_eq!(optimizer_step(&mut store, &mut st, &cfg).unwrap(), StepOutcome::Applied);
        assert_eq!(store.value(id).item(), 1.0);
        let mut last = 1.0;
        for _ in 0..5 {
            store.grad_mut(id).data[0] = 0.5;
            optimizer_step(&mut store, &mut st, &cfg).unwrap();
            let now = store.value(id).item();
            assert!(now < last);
            last = now;
        }
        assert_eq!(st.step, 6);
        store.grad_mut(id).data[0] = f64::NAN;
        assert_eq!(optimizer_step(&mut store, &mut st, &cfg).unwrap(), StepOutcome::SkippedNonFinite);
        assert_eq!(store.value(id).item(), last);
        assert_eq!(st.step, 6);
    }

    #[test]
    fn checkpoint_round_trip_gives_identical_step() {
        let mut net = AlignNet::<f32>::new(NetConfig::tiny(), 11).unwrap();
        let mut st = OptimizerState::new(&net.params);
        let cfg = OptimizerConfig::default();
        let fill = |net: &mut AlignNet<f32>| {
            for (j, id) in net.params.ids().collect::<Vec<_>>().into_iter().enumerate() {
                net.params.grad_mut(id).data.iter_mut().enumerate().for_each(|(i, g)| *g = ((i + j) as f32 * 0.37).sin());
            }
        };
        fill(&mut net);
        optimizer_step(&mut net.params, &mut st, &cfg).unwrap();
        let bytes = net.to_checkpoint(Some(&st)).unwrap().encode();
        let (mut net2, st2) = AlignNet::<f32>::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
        let mut st2 = st2.unwrap();
        assert_eq!(st, st2);
        fill(&mut net);
        fill(&mut net2);
        optimizer_step(&mut net.params, &mut st, &cfg).unwrap();
        optimizer_step(&mut net2.params, &mut st2, &cfg).unwrap();
        for id in net.params.ids() {
            let a: Vec<u32> = net.params.value(id).data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = net2.params.value(id).data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn checkpoint_rejects_mismatched_config() {
        let net = AlignNet::<f32>::new(NetConfig::tiny(), 1).unwrap();
        let mut ck = net.to_checkpoint(None).unwrap();
        let mut cfg = NetConfig::tiny();
        cfg.c_latent = 12;
        ck.config = serde_json::to_string(&cfg).unwrap();
        assert!(matches!(AlignNet::<f32>::from_checkpoint(&ck), Err(Error::Checkpoint(_))));
    }
}
