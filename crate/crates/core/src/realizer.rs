//! Command-conditioned motion realizer.
//!
//! A scene encoder maps agent histories and lane features to per-agent
//! latents `Z`; an intention encoder maps commands to embeddings `C`; the
//! decoder attends across agents and emits `T_f` clamped controls per agent.
//! Training differentiates through the decoder, the bicycle rollout of the
//! decoded controls and the three low-level losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::command::{Command, Maneuver};
use crate::context::{lane_contexts, LaneContext};
use crate::error::{Error, Result};
use crate::expert::RecoveryTarget;
use crate::network::Point;
use crate::scene::{integrate_bicycle, wrap_angle, AgentState, Control, ControlBounds, SceneHistory, SceneState};

pub const HIST_FEATURES: usize = 6;
pub const MAP_FEATURES: usize = 8;
pub const EDGE_FEATURES: usize = 8;
/// Raw decoder outputs are scaled by these before clamping.
const ACCEL_SCALE: f64 = 2.0;
const STEER_SCALE: f64 = 0.25;
/// Clearance added to the summed disc radii in the collision loss.
pub const SAFETY_MARGIN: f64 = 0.5;
const EDGE_POS_CAP: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RealizerDims {
    pub d_z: usize,
    pub d_c: usize,
    pub t_h: usize,
    pub t_f: usize,
    pub waypoints: usize,
}

impl Default for RealizerDims {
    fn default() -> Self {
        Self {
            d_z: 32,
            d_c: 16,
            t_h: 10,
            t_f: 8,
            waypoints: 4,
        }
    }
}

impl RealizerDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_z == 0 || self.d_c == 0 || self.t_h == 0 || self.t_f == 0 {
            return Err(Error::InvalidInput("realizer dimensions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnOffsets {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    ek: usize,
    ev: usize,
}

/// Offsets of every weight block in the flat parameter vector. The output
/// head comes last so horizons can be truncated by column selection.
#[derive(Debug, Clone)]
struct Layout {
    hist_w: usize,
    hist_b: usize,
    pool_q: usize,
    map_w: usize,
    map_b: usize,
    enc: AttnOffsets,
    table: usize,
    wp: usize,
    in_w: usize,
    in_b: usize,
    cross: AttnOffsets,
    selfa: AttnOffsets,
    ff_w: usize,
    ff_b: usize,
    out_w: usize,
    out_b: usize,
    total: usize,
    blocks: Vec<Block>,
}

/// A named weight block; `fan_in == 0` marks a bias.
#[derive(Debug, Clone)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    fan_in: usize,
}

impl Layout {
    fn new(d: &RealizerDims) -> Self {
        let mut a = Alloc::default();
        let z = d.d_z;
        let hist_w = a.take("enc.hist_w", HIST_FEATURES, z, HIST_FEATURES);
        let hist_b = a.take("enc.hist_b", 1, z, 0);
        let pool_q = a.take("enc.pool_q", z, 1, z);
        let map_w = a.take("enc.map_w", MAP_FEATURES, z, MAP_FEATURES);
        let map_b = a.take("enc.map_b", 1, z, 0);
        let enc = a.attn("enc.attn", z);
        let table = a.take("intent.table", Maneuver::COUNT, d.d_c, 1);
        let wp = a.take("intent.wp", 2 * d.waypoints, d.d_c, 2 * d.waypoints.max(1));
        let in_w = a.take("dec.in_w", d.d_c, z, d.d_c);
        let in_b = a.take("dec.in_b", 1, z, 0);
        let cross = a.attn("dec.cross", z);
        let selfa = a.attn("dec.self", z);
        let ff_w = a.take("dec.ff_w", z, z, z);
        let ff_b = a.take("dec.ff_b", 1, z, 0);
        let out_w = a.take("dec.out_w", z, 2 * d.t_f, z);
        let out_b = a.take("dec.out_b", 1, 2 * d.t_f, 0);
        Self {
            hist_w,
            hist_b,
            pool_q,
            map_w,
            map_b,
            enc,
            table,
            wp,
            in_w,
            in_b,
            cross,
            selfa,
            ff_w,
            ff_b,
            out_w,
            out_b,
            total: a.next,
            blocks: a.blocks,
        }
    }
}

#[derive(Default)]
struct Alloc {
    next: usize,
    blocks: Vec<Block>,
}

impl Alloc {
    fn take(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> usize {
        let offset = self.next;
        self.next += rows * cols;
        self.blocks.push(Block {
            name: name.to_string(),
            offset,
            rows,
            cols,
            fan_in,
        });
        offset
    }

    fn attn(&mut self, prefix: &str, z: usize) -> AttnOffsets {
        AttnOffsets {
            q: self.take(&format!("{prefix}.q"), z, z, z),
            k: self.take(&format!("{prefix}.k"), z, z, z),
            v: self.take(&format!("{prefix}.v"), z, z, z),
            o: self.take(&format!("{prefix}.o"), z, z, z),
            ek: self.take(&format!("{prefix}.ek"), EDGE_FEATURES, z, EDGE_FEATURES),
            ev: self.take(&format!("{prefix}.ev"), EDGE_FEATURES, z, EDGE_FEATURES),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealizerParams {
    pub dims: RealizerDims,
    pub values: Vec<f64>,
}

impl RealizerParams {
    pub fn zeros(dims: RealizerDims) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.param_count()],
        }
    }

    /// Uniform fan-in scaled weights, zero biases and a small output head.
    pub fn init(dims: RealizerDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims);
        let layout = Layout::new(&dims);
        for b in &layout.blocks {
            if b.fan_in == 0 {
                continue;
            }
            let mut s = 1.0 / (b.fan_in as f64).sqrt();
            if b.offset == layout.out_w {
                s *= 0.1;
            }
            for v in &mut p.values[b.offset..b.offset + b.rows * b.cols] {
                *v = rng.gen_range(-s..s);
            }
        }
        p
    }

    /// Starting point for training: [`init`](Self::init) with a zero output
    /// head, so an untrained realizer coasts.
    pub fn fresh(dims: RealizerDims, seed: u64) -> Self {
        let mut p = Self::init(dims, seed);
        p.zero_output_head();
        p
    }

    pub fn from_values(dims: RealizerDims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.param_count() {
            return Err(Error::Arity {
                expected: dims.param_count(),
                got: values.len(),
            });
        }
        Ok(Self { dims, values })
    }

    pub fn blocks(&self) -> Vec<Block> {
        Layout::new(&self.dims).blocks
    }

    fn block_mut(&mut self, name: &str) -> &mut [f64] {
        let b = self
            .blocks()
            .into_iter()
            .find(|b| b.name == name)
            .unwrap_or_else(|| panic!("no parameter block {name}"));
        &mut self.values[b.offset..b.offset + b.rows * b.cols]
    }

    /// Zeroes the maneuver table and waypoint projection.
    pub fn zero_intent_encoder(&mut self) {
        self.block_mut("intent.table").fill(0.0);
        self.block_mut("intent.wp").fill(0.0);
    }

    /// Zeroes the output head.
    pub fn zero_output_head(&mut self) {
        self.block_mut("dec.out_w").fill(0.0);
        self.block_mut("dec.out_b").fill(0.0);
    }

    /// Zeroes head columns for steps `from..t_f`.
    pub fn zero_head_beyond(&mut self, from: usize) {
        let cols = 2 * self.dims.t_f;
        let z = self.dims.d_z;
        let w = self.block_mut("dec.out_w");
        for r in 0..z {
            w[r * cols + 2 * from..(r + 1) * cols].fill(0.0);
        }
        self.block_mut("dec.out_b")[2 * from..].fill(0.0);
    }

    /// The same network with the output head cut to the first `t_f` steps.
    pub fn with_horizon(&self, t_f: usize) -> Result<Self> {
        if t_f == 0 || t_f > self.dims.t_f {
            return Err(Error::InvalidInput(format!(
                "cannot cut horizon {} to {t_f}",
                self.dims.t_f
            )));
        }
        let old = Layout::new(&self.dims);
        let dims = RealizerDims { t_f, ..self.dims };
        let mut values = self.values[..old.out_w].to_vec();
        let cols = 2 * self.dims.t_f;
        for r in 0..self.dims.d_z {
            let row = old.out_w + r * cols;
            values.extend_from_slice(&self.values[row..row + 2 * t_f]);
        }
        values.extend_from_slice(&self.values[old.out_b..old.out_b + 2 * t_f]);
        Self::from_values(dims, values)
    }
}

/// Per-agent latents plus the pairwise edge features the decoder reuses.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLatent {
    /// `N x d_z`
    pub z: Mat,
    /// `N*N x EDGE_FEATURES`, row `i*N + j` describes `j` in `i`'s frame.
    pub edges: Mat,
}

impl SceneLatent {
    pub fn len(&self) -> usize {
        self.z.rows
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlRollout {
    /// Per agent, `T_f` controls.
    pub controls: Vec<Vec<Control>>,
}

impl ControlRollout {
    pub fn first(&self) -> Vec<Control> {
        self.controls.iter().map(|c| c[0]).collect()
    }

    pub fn horizon(&self) -> usize {
        self.controls.first().map_or(0, Vec::len)
    }
}

/// Encoder inputs derived from a scene history.
#[derive(Debug, Clone)]
pub struct SceneFeatures {
    pub n: usize,
    pub t_h: usize,
    /// `N*T_h x HIST_FEATURES`, oldest step first within each agent block.
    pub hist: Mat,
    pub map: Mat,
    pub edges: Mat,
}

impl SceneFeatures {
    pub fn new(history: &SceneHistory, t_h: usize) -> Result<Self> {
        let scene = history
            .latest()
            .ok_or_else(|| Error::InvalidInput("scene history is empty".into()))?;
        Self::with_contexts(history, t_h, &lane_contexts(scene))
    }

    pub fn with_contexts(history: &SceneHistory, t_h: usize, ctx: &[LaneContext]) -> Result<Self> {
        let scene = history
            .latest()
            .ok_or_else(|| Error::InvalidInput("scene history is empty".into()))?;
        let agents = &scene.agents;
        let n = agents.len();
        let past: Vec<&SceneState> = history.iter().rev().take(t_h).collect();
        let mut hist = Mat::zeros(n * t_h, HIST_FEATURES);
        for (i, a) in agents.iter().enumerate() {
            let (c, s) = (a.heading.cos(), a.heading.sin());
            for (k, snap) in past.iter().enumerate() {
                let Some(j) = snap.index_of(a.id) else { continue };
                let b = &snap.agents[j];
                let (dx, dy) = (b.x - a.x, b.y - a.y);
                let dh = wrap_angle(b.heading - a.heading);
                let row = (i * t_h + t_h - 1 - k) * HIST_FEATURES;
                hist.data[row..row + HIST_FEATURES].copy_from_slice(&[
                    (c * dx + s * dy) / 10.0,
                    (-s * dx + c * dy) / 10.0,
                    dh.cos(),
                    dh.sin(),
                    b.speed / 10.0,
                    1.0,
                ]);
            }
        }
        let mut map = Mat::zeros(n, MAP_FEATURES);
        for (i, a) in agents.iter().enumerate() {
            let cx = &ctx[i];
            map.data[i * MAP_FEATURES..(i + 1) * MAP_FEATURES].copy_from_slice(&[
                cx.projection.lateral / 2.0,
                cx.heading_error,
                a.speed / 10.0,
                cx.speed_limit / 10.0,
                LaneContext::proximity(cx.red_stop),
                LaneContext::proximity(cx.leader.map(|l| l.gap)),
                cx.leader.map_or(0.0, |l| (a.speed - l.speed) / 10.0),
                LaneContext::proximity(cx.conflict),
            ]);
        }
        let edges = edge_features(agents);
        let f = Self {
            n,
            t_h,
            hist,
            map,
            edges,
        };
        if [&f.hist, &f.map, &f.edges]
            .iter()
            .any(|m| m.data.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidInput("non-finite scene features".into()));
        }
        Ok(f)
    }
}

fn edge_features(agents: &[AgentState]) -> Mat {
    let n = agents.len();
    let mut e = Mat::zeros(n * n, EDGE_FEATURES);
    for (i, a) in agents.iter().enumerate() {
        let (c, s) = (a.heading.cos(), a.heading.sin());
        let va = a.velocity();
        for (j, b) in agents.iter().enumerate() {
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let vb = b.velocity();
            let (dvx, dvy) = (vb[0] - va[0], vb[1] - va[1]);
            let dh = wrap_angle(b.heading - a.heading);
            let row = (i * n + j) * EDGE_FEATURES;
            e.data[row..row + EDGE_FEATURES].copy_from_slice(&[
                ((c * dx + s * dy) / 20.0).clamp(-EDGE_POS_CAP, EDGE_POS_CAP),
                ((-s * dx + c * dy) / 20.0).clamp(-EDGE_POS_CAP, EDGE_POS_CAP),
                (c * dvx + s * dvy) / 10.0,
                (-s * dvx + c * dvy) / 10.0,
                dh.cos(),
                dh.sin(),
                (-dx.hypot(dy) / 10.0).exp(),
                if i == j { 1.0 } else { 0.0 },
            ]);
        }
    }
    e
}

/// Intention encoder inputs: maneuver one-hots and waypoints in each
/// agent's own frame.
#[derive(Debug, Clone)]
pub struct IntentFeatures {
    pub onehot: Mat,
    pub waypoints: Mat,
}

impl IntentFeatures {
    pub fn new(agents: &[AgentState], commands: &[Command], k: usize) -> Result<Self> {
        if commands.len() != agents.len() {
            return Err(Error::Arity {
                expected: agents.len(),
                got: commands.len(),
            });
        }
        let n = agents.len();
        let mut onehot = Mat::zeros(n, Maneuver::COUNT);
        let mut waypoints = Mat::zeros(n, 2 * k);
        for (i, (a, cmd)) in agents.iter().zip(commands).enumerate() {
            if cmd.waypoints.len() != k {
                return Err(Error::Arity {
                    expected: k,
                    got: cmd.waypoints.len(),
                });
            }
            onehot.data[i * Maneuver::COUNT + cmd.maneuver.index()] = 1.0;
            let (c, s) = (a.heading.cos(), a.heading.sin());
            for (w, p) in cmd.waypoints.iter().enumerate() {
                let (dx, dy) = (p[0] - a.x, p[1] - a.y);
                waypoints.data[i * 2 * k + 2 * w] = (c * dx + s * dy) / 10.0;
                waypoints.data[i * 2 * k + 2 * w + 1] = (-s * dx + c * dy) / 10.0;
            }
        }
        if waypoints.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite waypoints".into()));
        }
        Ok(Self { onehot, waypoints })
    }
}

fn attention(t: &mut Tape, p: &[f64], o: &AttnOffsets, d: usize, xq: Var, xkv: Var, edges: Var, n: usize) -> Var {
    let wq = t.param(p, o.q, d, d);
    let wk = t.param(p, o.k, d, d);
    let wv = t.param(p, o.v, d, d);
    let q = t.matmul(xq, wq);
    let k = t.matmul(xkv, wk);
    let v = t.matmul(xkv, wv);
    let ek = t.param(p, o.ek, EDGE_FEATURES, d);
    let ev = t.param(p, o.ev, EDGE_FEATURES, d);
    let ke = t.matmul(edges, ek);
    let ve = t.matmul(edges, ev);
    let inv = 1.0 / (d as f64).sqrt();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let ki = t.slice_rows(ke, i * n, n);
        let ki = t.add(k, ki);
        let qi = t.slice_rows(q, i, 1);
        let sc = t.matmul_nt(qi, ki);
        let sc = t.scale(sc, inv);
        let a = t.softmax_rows(sc);
        let vi = t.slice_rows(ve, i * n, n);
        let vi = t.add(v, vi);
        rows.push(t.matmul(a, vi));
    }
    let cat = t.concat_rows(&rows);
    let wo = t.param(p, o.o, d, d);
    t.matmul(cat, wo)
}

struct Net<'a> {
    p: &'a [f64],
    l: Layout,
    d: RealizerDims,
}

impl<'a> Net<'a> {
    fn new(params: &'a RealizerParams) -> Self {
        Self {
            p: &params.values,
            l: Layout::new(&params.dims),
            d: params.dims,
        }
    }

    fn encode(&self, t: &mut Tape, f: &SceneFeatures) -> Result<(Var, Var)> {
        if f.t_h != self.d.t_h {
            return Err(Error::Shape(format!("history window {} != T_h {}", f.t_h, self.d.t_h)));
        }
        let (p, l, z, th, n) = (self.p, &self.l, self.d.d_z, self.d.t_h, f.n);
        let x = t.constant(f.hist.clone());
        let wh = t.param(p, l.hist_w, HIST_FEATURES, z);
        let bh = t.param(p, l.hist_b, 1, z);
        let h = t.matmul(x, wh);
        let h = t.add_row(h, bh);
        let h = t.tanh(h);
        let q = t.param(p, l.pool_q, z, 1);
        let sc = t.matmul(h, q);
        let sc = t.transpose(sc);
        let mut pooled = Vec::with_capacity(n);
        for i in 0..n {
            let s = t.slice_cols(sc, i * th, th);
            let w = t.softmax_rows(s);
            let hi = t.slice_rows(h, i * th, th);
            pooled.push(t.matmul(w, hi));
        }
        let pooled = t.concat_rows(&pooled);
        let m = t.constant(f.map.clone());
        let wm = t.param(p, l.map_w, MAP_FEATURES, z);
        let bm = t.param(p, l.map_b, 1, z);
        let m = t.matmul(m, wm);
        let m = t.add_row(m, bm);
        let m = t.tanh(m);
        let e0 = t.add(pooled, m);
        let edges = t.constant(f.edges.clone());
        let att = attention(t, p, &l.enc, z, e0, e0, edges, n);
        let att = t.tanh(att);
        Ok((t.add(e0, att), edges))
    }

    fn intent(&self, t: &mut Tape, f: &IntentFeatures) -> Result<Var> {
        if f.waypoints.cols != 2 * self.d.waypoints {
            return Err(Error::Shape(format!(
                "{} waypoint coordinates, expected {}",
                f.waypoints.cols,
                2 * self.d.waypoints
            )));
        }
        let oh = t.constant(f.onehot.clone());
        let table = t.param(self.p, self.l.table, Maneuver::COUNT, self.d.d_c);
        let wp = t.constant(f.waypoints.clone());
        let wwp = t.param(self.p, self.l.wp, 2 * self.d.waypoints, self.d.d_c);
        let a = t.matmul(oh, table);
        let b = t.matmul(wp, wwp);
        Ok(t.add(a, b))
    }

    /// Decoded accel and steer columns, one `N x 1` pair per step.
    fn decode(
        &self,
        t: &mut Tape,
        z: Var,
        c: Var,
        edges: Var,
        n: usize,
        bounds: &ControlBounds,
    ) -> (Vec<Var>, Vec<Var>) {
        let (p, l, d) = (self.p, &self.l, self.d.d_z);
        let win = t.param(p, l.in_w, self.d.d_c, d);
        let bin = t.param(p, l.in_b, 1, d);
        let s = t.matmul(c, win);
        let s = t.add_row(s, bin);
        let s = t.tanh(s);
        let s0 = t.add(z, s);
        let a = attention(t, p, &l.cross, d, s0, z, edges, n);
        let a = t.tanh(a);
        let s1 = t.add(s0, a);
        let a = attention(t, p, &l.selfa, d, s1, s1, edges, n);
        let a = t.tanh(a);
        let s2 = t.add(s1, a);
        let wf = t.param(p, l.ff_w, d, d);
        let bf = t.param(p, l.ff_b, 1, d);
        let f = t.matmul(s2, wf);
        let f = t.add_row(f, bf);
        let f = t.tanh(f);
        let s3 = t.add(s2, f);
        let wo = t.param(p, l.out_w, d, 2 * self.d.t_f);
        let bo = t.param(p, l.out_b, 1, 2 * self.d.t_f);
        let raw = t.matmul(s3, wo);
        let raw = t.add_row(raw, bo);
        let mut accel = Vec::with_capacity(self.d.t_f);
        let mut steer = Vec::with_capacity(self.d.t_f);
        for k in 0..self.d.t_f {
            let ac = t.slice_cols(raw, 2 * k, 1);
            let ac = t.scale(ac, ACCEL_SCALE);
            accel.push(t.clamp_st(ac, bounds.accel_min, bounds.accel_max));
            let st = t.slice_cols(raw, 2 * k + 1, 1);
            let st = t.scale(st, STEER_SCALE);
            steer.push(t.clamp_st(st, -bounds.steer_max, bounds.steer_max));
        }
        (accel, steer)
    }
}

fn read_rollout(t: &Tape, accel: &[Var], steer: &[Var], n: usize) -> ControlRollout {
    let controls = (0..n)
        .map(|i| {
            accel
                .iter()
                .zip(steer)
                .map(|(&a, &s)| Control::new(t.value(a).data[i], t.value(s).data[i]))
                .collect()
        })
        .collect();
    ControlRollout { controls }
}

/// `Z = f_enc(X, M)`.
pub fn encode_scene(history: &SceneHistory, params: &RealizerParams) -> Result<SceneLatent> {
    let f = SceneFeatures::new(history, params.dims.t_h)?;
    encode_features(&f, params)
}

pub fn encode_features(f: &SceneFeatures, params: &RealizerParams) -> Result<SceneLatent> {
    if f.n == 0 {
        return Ok(SceneLatent {
            z: Mat::zeros(0, params.dims.d_z),
            edges: Mat::zeros(0, EDGE_FEATURES),
        });
    }
    let mut t = Tape::new();
    let (z, _) = Net::new(params).encode(&mut t, f)?;
    Ok(SceneLatent {
        z: t.value(z).clone(),
        edges: f.edges.clone(),
    })
}

/// Intention embeddings, `N x d_c`.
pub fn encode_intent(agents: &[AgentState], commands: &[Command], params: &RealizerParams) -> Result<Mat> {
    let f = IntentFeatures::new(agents, commands, params.dims.waypoints)?;
    if f.onehot.rows == 0 {
        return Ok(Mat::zeros(0, params.dims.d_c));
    }
    let mut t = Tape::new();
    let c = Net::new(params).intent(&mut t, &f)?;
    Ok(t.value(c).clone())
}

/// `U = f_dec(Z, C)`; controls are clamped to `bounds`.
pub fn decode_controls(
    latent: &SceneLatent,
    intents: &Mat,
    params: &RealizerParams,
    bounds: &ControlBounds,
) -> Result<ControlRollout> {
    let n = latent.len();
    if intents.rows != n || intents.cols != params.dims.d_c {
        return Err(Error::Shape(format!(
            "intents {}x{} for {n} agents and d_c {}",
            intents.rows, intents.cols, params.dims.d_c
        )));
    }
    if n == 0 {
        return Ok(ControlRollout { controls: vec![] });
    }
    let mut t = Tape::new();
    let z = t.constant(latent.z.clone());
    let c = t.constant(intents.clone());
    let e = t.constant(latent.edges.clone());
    let (a, s) = Net::new(params).decode(&mut t, z, c, e, n, bounds);
    Ok(read_rollout(&t, &a, &s, n))
}

/// Encode, embed and decode in one pass. `intent = None` is the passive
/// (zero-intention) mode.
pub fn plan(
    scene: &SceneFeatures,
    intent: Option<&IntentFeatures>,
    params: &RealizerParams,
    bounds: &ControlBounds,
) -> Result<ControlRollout> {
    let n = scene.n;
    if n == 0 {
        return Ok(ControlRollout { controls: vec![] });
    }
    let net = Net::new(params);
    let mut t = Tape::new();
    let (z, e) = net.encode(&mut t, scene)?;
    let c = match intent {
        Some(f) => net.intent(&mut t, f)?,
        None => t.constant(Mat::zeros(n, params.dims.d_c)),
    };
    let (a, s) = net.decode(&mut t, z, c, e, n, bounds);
    Ok(read_rollout(&t, &a, &s, n))
}

/// Positions after each step of executing `rollout` from `agents`.
pub fn rollout_positions(agents: &[AgentState], rollout: &ControlRollout, dt: f64) -> Result<Vec<Vec<Point>>> {
    if rollout.controls.len() != agents.len() {
        return Err(Error::Arity {
            expected: agents.len(),
            got: rollout.controls.len(),
        });
    }
    agents
        .iter()
        .zip(&rollout.controls)
        .map(|(a, us)| {
            let mut s = *a;
            us.iter()
                .map(|&u| {
                    s = integrate_bicycle(&s, u, dt)?;
                    Ok(s.position())
                })
                .collect()
        })
        .collect()
}

/// Gate-weighted mean squared position error over agents and steps.
pub fn loss_traj(pred: &[Vec<Point>], target: &RecoveryTarget, gates: &[f64]) -> Result<f64> {
    let n = pred.len();
    if target.positions.len() != n || gates.len() != n {
        return Err(Error::Shape(format!(
            "{n} predicted agents, {} targets, {} gates",
            target.positions.len(),
            gates.len()
        )));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let t_f = pred[0].len();
    let mut total = 0.0;
    for ((p, y), g) in pred.iter().zip(&target.positions).zip(gates) {
        if p.len() != t_f || y.len() != t_f {
            return Err(Error::Shape("trajectory lengths differ".into()));
        }
        for (a, b) in p.iter().zip(y) {
            total += g * ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2));
        }
    }
    Ok(total / (n * t_f) as f64)
}

/// Mean squared control change between consecutive steps.
pub fn loss_smooth(rollout: &ControlRollout) -> f64 {
    let n = rollout.controls.len();
    let t_f = rollout.horizon();
    if n == 0 || t_f < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for us in &rollout.controls {
        for w in us.windows(2) {
            total += (w[1].accel - w[0].accel).powi(2) + (w[1].steer - w[0].steer).powi(2);
        }
    }
    total / (n * (t_f - 1)) as f64
}

/// Squared intrusion into the safety distance, summed over pairs and steps.
pub fn loss_coll(pred: &[Vec<Point>], radii: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            let d_safe = radii[i] + radii[j] + SAFETY_MARGIN;
            for (a, b) in pred[i].iter().zip(&pred[j]) {
                let d = (a[0] - b[0]).hypot(a[1] - b[1]);
                total += (d_safe - d).max(0.0).powi(2);
            }
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub traj: f64,
    pub smooth: f64,
    pub coll: f64,
    pub total: f64,
}

pub fn loss_low(traj: f64, smooth: f64, coll: f64, lambda_smooth: f64, lambda_coll: f64) -> f64 {
    traj + lambda_smooth * smooth + lambda_coll * coll
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_smooth: f64,
    pub lambda_coll: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_smooth: 0.1,
            lambda_coll: 1.0,
        }
    }
}

/// One supervised example: encoder inputs, commands, initial states, expert
/// target and per-agent reconstruction weights.
#[derive(Debug, Clone)]
pub struct RealizerSample {
    pub scene: SceneFeatures,
    pub intent: Option<IntentFeatures>,
    pub agents: Vec<AgentState>,
    pub target: RecoveryTarget,
    pub gates: Vec<f64>,
}

impl RealizerSample {
    pub fn new(
        history: &SceneHistory,
        commands: Option<&[Command]>,
        target: RecoveryTarget,
        gates: Vec<f64>,
        dims: &RealizerDims,
    ) -> Result<Self> {
        let scene = SceneFeatures::new(history, dims.t_h)?;
        let agents = history.latest().map(|s| s.agents.clone()).unwrap_or_default();
        let intent = commands
            .map(|c| IntentFeatures::new(&agents, c, dims.waypoints))
            .transpose()?;
        Self::from_parts(scene, intent, agents, target, gates, dims)
    }

    pub fn from_parts(
        scene: SceneFeatures,
        intent: Option<IntentFeatures>,
        agents: Vec<AgentState>,
        target: RecoveryTarget,
        gates: Vec<f64>,
        dims: &RealizerDims,
    ) -> Result<Self> {
        let n = agents.len();
        if scene.n != n || target.positions.len() != n || gates.len() != n {
            return Err(Error::Shape("sample agent counts differ".into()));
        }
        if n > 0 && target.horizon() != dims.t_f {
            return Err(Error::Shape(format!(
                "target horizon {} != T_f {}",
                target.horizon(),
                dims.t_f
            )));
        }
        Ok(Self {
            scene,
            intent,
            agents,
            target,
            gates,
        })
    }
}

/// Loss settings for one evaluation of the realizer objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowObjective {
    pub weights: LossWeights,
    pub bounds: ControlBounds,
    pub dt: f64,
}

fn col(t: &mut Tape, v: impl Iterator<Item = f64>) -> Var {
    let v: Vec<f64> = v.collect();
    t.constant(Mat::column(&v))
}

fn build_loss(t: &mut Tape, params: &RealizerParams, sample: &RealizerSample, obj: &LowObjective) -> Result<[Var; 4]> {
    let n = sample.agents.len();
    let t_f = params.dims.t_f;
    let net = Net::new(params);
    let (z, e) = net.encode(t, &sample.scene)?;
    let c = match &sample.intent {
        Some(f) => net.intent(t, f)?,
        None => t.constant(Mat::zeros(n, params.dims.d_c)),
    };
    let (accel, steer) = net.decode(t, z, c, e, n, &obj.bounds);
    let ag = &sample.agents;
    let mut x = col(t, ag.iter().map(|a| a.x));
    let mut y = col(t, ag.iter().map(|a| a.y));
    let mut h = col(t, ag.iter().map(|a| a.heading));
    let mut v = col(t, ag.iter().map(|a| a.speed));
    let wb = col(t, ag.iter().map(|a| a.wheelbase));
    let gates = col(t, sample.gates.iter().copied());
    let ones = t.constant(Mat::filled(n, 1, 1.0));
    let eye = t.constant({
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    });
    let radii: Vec<f64> = ag.iter().map(|a| a.disc_radius()).collect();
    // zero on and below the diagonal so only i < j pairs can be positive
    let d_safe = t.constant({
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                m.data[i * n + j] = radii[i] + radii[j] + SAFETY_MARGIN;
            }
        }
        m
    });
    let mut traj_terms = Vec::with_capacity(t_f);
    let mut coll_terms = Vec::with_capacity(t_f);
    for k in 0..t_f {
        let c = t.cos(h);
        let s = t.sin(h);
        let vx = t.mul(v, c);
        let vx = t.scale(vx, obj.dt);
        let vy = t.mul(v, s);
        let vy = t.scale(vy, obj.dt);
        let tn = t.tan(steer[k]);
        let w = t.mul(v, tn);
        let w = t.div(w, wb);
        let w = t.scale(w, obj.dt);
        let dv = t.scale(accel[k], obj.dt);
        x = t.add(x, vx);
        y = t.add(y, vy);
        let hn = t.add(h, w);
        h = t.wrap_angle(hn);
        let vn = t.add(v, dv);
        v = t.floor_zero(vn);

        let tx = col(t, sample.target.positions.iter().map(|p| p[k][0]));
        let ty = col(t, sample.target.positions.iter().map(|p| p[k][1]));
        let ex = t.sub(x, tx);
        let ex = t.square(ex);
        let ey = t.sub(y, ty);
        let ey = t.square(ey);
        let e2 = t.add(ex, ey);
        let e2 = t.mul(e2, gates);
        traj_terms.push(t.sum(e2));

        if n >= 2 {
            let xi = t.matmul_nt(x, ones);
            let xj = t.matmul_nt(ones, x);
            let dx = t.sub(xi, xj);
            let dx = t.square(dx);
            let yi = t.matmul_nt(y, ones);
            let yj = t.matmul_nt(ones, y);
            let dy = t.sub(yi, yj);
            let dy = t.square(dy);
            let d2 = t.add(dx, dy);
            let d2 = t.add(d2, eye);
            let d = t.sqrt(d2);
            let gap = t.sub(d_safe, d);
            let gap = t.floor_zero(gap);
            let gap = t.square(gap);
            coll_terms.push(t.sum(gap));
        }
    }
    let zero = t.constant(Mat::zeros(1, 1));
    let sum_all = |t: &mut Tape, terms: &[Var]| terms.iter().fold(zero, |acc, &v| t.add(acc, v));
    let traj = sum_all(t, &traj_terms);
    let traj = t.scale(traj, 1.0 / (n * t_f) as f64);
    let coll = sum_all(t, &coll_terms);
    let smooth = if t_f >= 2 {
        let mut terms = Vec::with_capacity(2 * (t_f - 1));
        for seq in [&accel, &steer] {
            for k in 0..t_f - 1 {
                let d = t.sub(seq[k + 1], seq[k]);
                let d = t.square(d);
                terms.push(t.sum(d));
            }
        }
        let s = sum_all(t, &terms);
        t.scale(s, 1.0 / (n * (t_f - 1)) as f64)
    } else {
        zero
    };
    let ws = t.scale(smooth, obj.weights.lambda_smooth);
    let wc = t.scale(coll, obj.weights.lambda_coll);
    let total = t.add(traj, ws);
    let total = t.add(total, wc);
    Ok([traj, smooth, coll, total])
}

fn parts(t: &Tape, v: &[Var; 4]) -> LossParts {
    LossParts {
        traj: t.scalar(v[0]),
        smooth: t.scalar(v[1]),
        coll: t.scalar(v[2]),
        total: t.scalar(v[3]),
    }
}

/// Low-level loss of one sample.
pub fn sample_loss(params: &RealizerParams, sample: &RealizerSample, obj: &LowObjective) -> Result<LossParts> {
    if sample.agents.is_empty() {
        return Ok(LossParts::default());
    }
    let mut t = Tape::new();
    let v = build_loss(&mut t, params, sample, obj)?;
    Ok(parts(&t, &v))
}

/// Loss and its gradient with respect to every realizer parameter.
pub fn grad_low(params: &RealizerParams, sample: &RealizerSample, obj: &LowObjective) -> Result<(LossParts, Vec<f64>)> {
    let np = params.values.len();
    if sample.agents.is_empty() {
        return Ok((LossParts::default(), vec![0.0; np]));
    }
    let mut t = Tape::new();
    let v = build_loss(&mut t, params, sample, obj)?;
    let g = t.backward(v[3], np);
    let lp = parts(&t, &v);
    if !lp.total.is_finite() || g.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence("non-finite realizer gradient".into()));
    }
    Ok((lp, g))
}

/// Mean loss and gradient over a batch; samples are evaluated in parallel
/// and reduced in input order.
pub fn batch_grad(params: &RealizerParams, samples: &[RealizerSample], obj: &LowObjective) -> Result<(f64, Vec<f64>)> {
    let np = params.values.len();
    if samples.is_empty() {
        return Ok((0.0, vec![0.0; np]));
    }
    let per: Vec<(LossParts, Vec<f64>)> = samples
        .par_iter()
        .map(|s| grad_low(params, s, obj))
        .collect::<Result<_>>()?;
    let k = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    let mut g = vec![0.0; np];
    for (lp, gi) in &per {
        loss += lp.total * k;
        for (a, b) in g.iter_mut().zip(gi) {
            *a += b * k;
        }
    }
    Ok((loss, g))
}

/// Mean loss over a batch without gradients.
pub fn batch_loss(params: &RealizerParams, samples: &[RealizerSample], obj: &LowObjective) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let per: Vec<f64> = samples
        .par_iter()
        .map(|s| sample_loss(params, s, obj).map(|l| l.total))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / samples.len() as f64)
}

pub fn sgd_step(params: &RealizerParams, grad: &[f64], step: f64) -> Result<RealizerParams> {
    if grad.len() != params.values.len() {
        return Err(Error::Arity {
            expected: params.values.len(),
            got: grad.len(),
        });
    }
    let values = params.values.iter().zip(grad).map(|(p, g)| p - step * g).collect();
    Ok(RealizerParams {
        dims: params.dims,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        let d = RealizerDims::default();
        let blocks = Layout::new(&d).blocks;
        let mut next = 0;
        for b in &blocks {
            assert_eq!(b.offset, next, "{}", b.name);
            next += b.rows * b.cols;
        }
        assert_eq!(next, d.param_count());
        assert_eq!(blocks.last().unwrap().name, "dec.out_b");
    }

    #[test]
    fn loss_low_arithmetic() {
        assert_eq!(loss_low(1.0, 2.0, 3.0, 0.0, 0.0), 1.0);
        assert_eq!(loss_low(0.0, 0.0, 0.0, 0.1, 1.0), 0.0);
        assert!((loss_low(1.0, 2.0, 3.0, 0.5, 0.1) - 2.3).abs() < 1e-15);
    }

    #[test]
    fn loss_examples() {
        let pred = vec![vec![[0.0, 0.0], [1.0, 0.0]]];
        let target = RecoveryTarget {
            positions: vec![vec![[1.0, 0.0], [2.0, 0.0]]],
        };
        assert_eq!(loss_traj(&pred, &target, &[1.0]).unwrap(), 1.0);
        assert_eq!(loss_traj(&pred, &target, &[0.0]).unwrap(), 0.0);
        assert_eq!(loss_traj(&target.positions, &target, &[1.0]).unwrap(), 0.0);
        let r = ControlRollout {
            controls: vec![vec![Control::new(0.0, 0.2), Control::new(1.0, 0.2)]],
        };
        assert_eq!(loss_smooth(&r), 1.0);
        assert_eq!(loss_coll(&pred, &[1.0]), 0.0);
        let two = vec![vec![[0.0, 0.0]], vec![[2.0, 0.0]]];
        assert_eq!(loss_coll(&two, &[1.25, 1.25]), 1.0);
    }

    #[test]
    fn truncated_horizon_keeps_leading_columns() {
        let d = RealizerDims {
            d_z: 4,
            d_c: 3,
            t_h: 2,
            t_f: 3,
            waypoints: 2,
        };
        let p = RealizerParams::init(d, 1);
        let q = p.with_horizon(1).unwrap();
        assert_eq!(q.values.len(), RealizerDims { t_f: 1, ..d }.param_count());
        let l = Layout::new(&d);
        assert_eq!(q.values[..l.out_w], p.values[..l.out_w]);
        assert_eq!(q.values[l.out_w + 2], p.values[l.out_w + 6]);
    }
}
