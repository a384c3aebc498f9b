//! Graph transformer on canonicalized neighbourhoods.
//!
//! Every node of an ego subgraph is expressed in the ego's frame before the
//! trunk sees it, so the policy is equivariant and the barrier value invariant
//! under the symmetry group for any weights. With `equivariant = false` the
//! features are only translated (world axes kept), which is the ablation.

use std::io::{Read, Write};

use egcbf_autodiff::{Tape, Tensor, Var};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{Control, ModelParams, System, SQUASH_EPS, STATE_DIM};
use crate::graph::{GraphSnapshot, NodeKind, Subgraph, FEATURE_DIM};
use crate::liegroup::{rot_z, yaw_of, GroupElement};
use crate::safectrl::{nominal_control, NominalGains};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EGCBFNET";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub head_hidden: usize,
    /// Canonicalize into the ego frame; `false` gives the translation-only ablation.
    pub equivariant: bool,
    /// Canonical target offsets longer than this are shortened to it.
    pub target_clip: f64,
    /// Policy outputs a bounded correction to the nominal controller instead of
    /// the whole control.
    pub residual: bool,
    /// Canonical positions and velocities are multiplied by these before the embedding.
    pub position_scale: f64,
    pub velocity_scale: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { d_model: 64, d_ff: 128, layers: 2, head_hidden: 64, equivariant: true, target_clip: 1.0, residual: true, position_scale: 10.0, velocity_scale: 2.0, seed: 0 }
    }
}

/// Flat named parameter arrays of one trunk plus its head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f64>>,
    layers: usize,
}

const PER_LAYER: usize = 7;

impl Network {
    fn init(prefix: &str, cfg: &NetConfig, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let (d, f, h) = (cfg.d_model, cfg.d_ff, cfg.head_hidden);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: String, rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng| {
            let t = if rows == 1 && gain == 0.0 {
                Tensor::zeros(rows, cols)
            } else {
                let bound = gain * (6.0 / (rows + cols) as f64).sqrt();
                Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
            };
            names.push(format!("{prefix}.{name}"));
            tensors.push(t);
        };
        push("embed.w".into(), FEATURE_DIM, d, 1.0, rng);
        push("embed.b".into(), 1, d, 0.0, rng);
        for l in 0..cfg.layers {
            push(format!("layer{l}.wq"), d, d, 1.0, rng);
            push(format!("layer{l}.wk"), d, d, 1.0, rng);
            push(format!("layer{l}.wv"), d, d, 1.0, rng);
            push(format!("layer{l}.ff1.w"), d, f, 1.0, rng);
            push(format!("layer{l}.ff1.b"), 1, f, 0.0, rng);
            push(format!("layer{l}.ff2.w"), f, d, 1.0, rng);
            push(format!("layer{l}.ff2.b"), 1, d, 0.0, rng);
        }
        push("head1.w".into(), d, h, 1.0, rng);
        push("head1.b".into(), 1, h, 0.0, rng);
        push("head2.w".into(), h, out_dim, 0.1, rng);
        push("head2.b".into(), 1, out_dim, 0.0, rng);
        Self { names, tensors, layers: cfg.layers }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zero_out(&mut self) {
        for t in &mut self.tensors {
            t.scale_assign(0.0);
        }
    }

    /// Records every tensor as a leaf.
    pub fn load(&self, tape: &mut Tape<f64>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Trunk plus head on an `n x FEATURE_DIM` input; returns the `1 x out` head output.
    pub fn forward(&self, tape: &mut Tape<f64>, vars: &[Var], x: Var, mask: &[bool]) -> Var {
        const SHAPES: &str = "shapes fixed at construction";
        let d = self.tensors[0].cols();
        let scale = 1.0 / (d as f64).sqrt();
        let xw = tape.matmul(x, vars[0]).expect(SHAPES);
        let mut h = tape.add_row(xw, vars[1]).expect(SHAPES);
        for l in 0..self.layers {
            let w = &vars[2 + PER_LAYER * l..2 + PER_LAYER * (l + 1)];
            let q = tape.matmul(h, w[0]).expect(SHAPES);
            let k = tape.matmul(h, w[1]).expect(SHAPES);
            let v = tape.matmul(h, w[2]).expect(SHAPES);
            let kt = tape.transpose(k);
            let s = tape.matmul(q, kt).expect(SHAPES);
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s, Some(mask)).expect(SHAPES);
            let att = tape.matmul(a, v).expect(SHAPES);
            let f = tape.add(h, att).expect(SHAPES);
            let z = tape.matmul(f, w[3]).expect(SHAPES);
            let z = tape.add_row(z, w[4]).expect(SHAPES);
            let z = tape.tanh(z);
            let z = tape.matmul(z, w[5]).expect(SHAPES);
            h = tape.add_row(z, w[6]).expect(SHAPES);
        }
        let base = 2 + PER_LAYER * self.layers;
        let ego = tape.slice_rows(h, 0, 1).expect(SHAPES);
        let z = tape.matmul(ego, vars[base]).expect(SHAPES);
        let z = tape.add_row(z, vars[base + 1]).expect(SHAPES);
        let z = tape.tanh(z);
        let z = tape.matmul(z, vars[base + 2]).expect(SHAPES);
        tape.add_row(z, vars[base + 3]).expect(SHAPES)
    }
}

/// Policy network `theta` and barrier network `phi`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub config: NetConfig,
    pub system: System,
    pub policy: Network,
    pub cbf: Network,
}

impl NetParams {
    pub fn new(config: NetConfig, system: System) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let policy = Network::init("policy", &config, system.control_dim(), &mut rng);
        let cbf = Network::init("cbf", &config, 1, &mut rng);
        let out = Self { config, system, policy, cbf };
        log::info!(
            "network built: {} policy + {} barrier parameters",
            out.policy.num_parameters(),
            out.cbf.num_parameters()
        );
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.policy.num_parameters() + self.cbf.num_parameters()
    }

    pub fn arrays(&self) -> impl Iterator<Item = (&String, &Tensor<f64>)> {
        let p = self.policy.names.iter().zip(&self.policy.tensors);
        p.chain(self.cbf.names.iter().zip(&self.cbf.tensors))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f, &[])?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(Self::read_from(&mut f)?.0)
    }

    /// Writes the network plus any `extra` arrays (e.g. optimizer moments).
    pub fn write_to(&self, w: &mut impl Write, extra: &[(String, &Tensor<f64>)]) -> Result<(), CheckpointError> {
        let meta = serde_json::to_string(&CheckpointMeta { config: self.config.clone(), system: self.system })
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let arrays: Vec<(&str, &Tensor<f64>)> =
            self.arrays().map(|(n, t)| (n.as_str(), t)).chain(extra.iter().map(|(n, t)| (n.as_str(), *t))).collect();
        write_checkpoint(w, &meta, &arrays)
    }

    /// Returns the network and every array that is not part of it.
    pub fn read_from(r: &mut impl Read) -> Result<(Self, Vec<(String, Tensor<f64>)>), CheckpointError> {
        let (meta, arrays) = read_checkpoint(r)?;
        let meta: CheckpointMeta = serde_json::from_str(&meta).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut net = NetParams::new(meta.config, meta.system);
        let mut rest = Vec::new();
        let mut seen = 0;
        for (name, t) in arrays {
            let slot = net
                .policy
                .names
                .iter()
                .position(|n| *n == name)
                .map(|k| &mut net.policy.tensors[k])
                .or_else(|| net.cbf.names.iter().position(|n| *n == name).map(|k| &mut net.cbf.tensors[k]));
            match slot {
                Some(s) if s.shape() == t.shape() => {
                    *s = t;
                    seen += 1;
                }
                Some(s) => {
                    return Err(CheckpointError::Corrupt(format!(
                        "array {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        s.shape()
                    )))
                }
                None => rest.push((name, t)),
            }
        }
        let expected = net.policy.tensors.len() + net.cbf.tensors.len();
        if seen != expected {
            return Err(CheckpointError::Corrupt(format!("found {seen} of {expected} network arrays")));
        }
        Ok((net, rest))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: NetConfig,
    system: System,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Layout (all integers little-endian): magic, `u32` version, `u32` metadata
/// length and UTF-8 JSON metadata, `u32` array count, then per array a `u32`
/// name length, the name, `u64` rows, `u64` cols and `rows * cols` `f64` values.
pub fn write_checkpoint(w: &mut impl Write, meta: &str, arrays: &[(&str, &Tensor<f64>)]) -> Result<(), CheckpointError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, t) in arrays {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(String, Vec<(String, Tensor<f64>)>), CheckpointError> {
    fn u32_of(r: &mut impl Read) -> Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64_of(r: &mut impl Read) -> Result<u64, CheckpointError> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn string_of(r: &mut impl Read, len: usize) -> Result<String, CheckpointError> {
        let mut b = vec![0u8; len];
        r.read_exact(&mut b)?;
        String::from_utf8(b).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32_of(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let meta_len = u32_of(r)? as usize;
    let meta = string_of(r, meta_len)?;
    let count = u32_of(r)?;
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u32_of(r)? as usize;
        let name = string_of(r, name_len)?;
        let (rows, cols) = (u64_of(r)? as usize, u64_of(r)? as usize);
        let n = rows.checked_mul(cols).filter(|&n| n <= 1 << 28).ok_or_else(|| CheckpointError::Corrupt(format!("array {name} too large")))?;
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        arrays.push((name, Tensor::new(rows, cols, data)));
    }
    Ok((meta, arrays))
}

/// The map from world coordinates to the ego's canonical coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoFrame {
    pub yaw: f64,
    pub origin: Vector3<f64>,
    /// `Rz(-yaw)`, or the identity in the ablation.
    pub to_local: Matrix3<f64>,
    pub equivariant: bool,
}

impl EgoFrame {
    pub fn of(ego: &crate::dynamics::AgentState<f64>, equivariant: bool) -> Self {
        let yaw = if equivariant { yaw_of(&ego.rotation) } else { 0.0 };
        Self { yaw, origin: ego.position, to_local: rot_z(-yaw), equivariant }
    }

    pub fn group_element(&self) -> GroupElement<f64> {
        GroupElement::new(self.yaw, self.origin)
    }

    /// `d to_local / d yaw`.
    fn to_local_dyaw(&self) -> Matrix3<f64> {
        if !self.equivariant {
            return Matrix3::zeros();
        }
        let (s, c) = self.yaw.sin_cos();
        Matrix3::new(-s, c, 0.0, -c, -s, 0.0, 0.0, 0.0, 0.0)
    }

    /// Rotates a canonical control back into the world.
    pub fn decanonicalize(&self, u: &Control<f64>) -> Control<f64> {
        match u {
            Control::Quadrotor { .. } => *u,
            Control::Accel(a) => Control::Accel(self.to_local.transpose() * a),
        }
    }
}

fn clip_norm(y: Vector3<f64>, c: f64) -> Vector3<f64> {
    let n = y.norm();
    if n > c {
        y * (c / n)
    } else {
        y
    }
}

/// Canonical feature row of one node.
pub fn canonical_row(kind: NodeKind, state: &crate::dynamics::AgentState<f64>, frame: &EgoFrame, cfg: &NetConfig) -> [f64; FEATURE_DIM] {
    let a = &frame.to_local;
    let mut f = [0.0; FEATURE_DIM];
    f[..3].copy_from_slice(&kind.one_hot());
    let mut p = a * (state.position - frame.origin);
    if kind == NodeKind::Target {
        p = clip_norm(p, cfg.target_clip);
    }
    f[3..6].copy_from_slice((p * cfg.position_scale).as_slice());
    match kind {
        NodeKind::Agent => {
            let r = a * state.rotation;
            for i in 0..3 {
                for j in 0..3 {
                    f[6 + 3 * i + j] = r[(i, j)];
                }
            }
            f[15..18].copy_from_slice((a * state.velocity * cfg.velocity_scale).as_slice());
            f[18..21].copy_from_slice(state.angular_velocity.as_slice());
        }
        NodeKind::Lidar | NodeKind::Target => {
            f[6] = 1.0;
            f[10] = 1.0;
            f[14] = 1.0;
        }
    }
    f
}

/// `n x FEATURE_DIM` canonical features of a subgraph, rows in node order.
pub fn canonicalize(sub: &Subgraph, cfg: &NetConfig) -> (Tensor<f64>, EgoFrame) {
    let frame = EgoFrame::of(&sub.nodes[0].state, cfg.equivariant);
    let mut data = Vec::with_capacity(sub.len() * FEATURE_DIM);
    for node in &sub.nodes {
        data.extend_from_slice(&canonical_row(node.kind, &node.state, &frame, cfg));
    }
    (Tensor::new(sub.len(), FEATURE_DIM, data), frame)
}

/// Chains `dh/d(canonical features)` back to the raw node states, yielding one
/// gradient per subgraph node in the `AgentState::to_array` layout.
pub fn chain_to_raw(sub: &Subgraph, frame: &EgoFrame, gx: &Tensor<f64>, cfg: &NetConfig) -> Vec<[f64; STATE_DIM]> {
    let target_clip = cfg.target_clip;
    let a = frame.to_local;
    let at = a.transpose();
    let da = frame.to_local_dyaw();
    let mut out = vec![[0.0; STATE_DIM]; sub.len()];
    let mut d_origin = Vector3::zeros();
    let mut d_yaw = 0.0;
    for (j, node) in sub.nodes.iter().enumerate() {
        let row = gx.row_slice(j);
        let mut gp = Vector3::new(row[3], row[4], row[5]) * cfg.position_scale;
        let rel = node.state.position - frame.origin;
        if node.kind == NodeKind::Target {
            let y = a * rel;
            let n = y.norm();
            if n > target_clip {
                let u = y / n;
                gp = (gp - u * u.dot(&gp)) * (target_clip / n);
            }
        }
        let dp = at * gp;
        out[j][0] += dp.x;
        out[j][1] += dp.y;
        out[j][2] += dp.z;
        d_origin -= dp;
        d_yaw += gp.dot(&(da * rel));
        if node.kind == NodeKind::Agent {
            let gr = Matrix3::from_row_slice(&row[6..15]);
            let dr = at * gr;
            for i in 0..3 {
                for k in 0..3 {
                    out[j][3 + 3 * i + k] += dr[(i, k)];
                }
            }
            d_yaw += (gr.component_mul(&(da * node.state.rotation))).sum();
            let gv = Vector3::new(row[15], row[16], row[17]) * cfg.velocity_scale;
            let dv = at * gv;
            out[j][12] += dv.x;
            out[j][13] += dv.y;
            out[j][14] += dv.z;
            d_yaw += gv.dot(&(da * node.state.velocity));
            out[j][15] += row[18];
            out[j][16] += row[19];
            out[j][17] += row[20];
        }
    }
    out[0][0] += d_origin.x;
    out[0][1] += d_origin.y;
    out[0][2] += d_origin.z;
    if frame.equivariant {
        let r = &sub.nodes[0].state.rotation;
        let (c0x, c0y) = (r[(0, 0)], r[(1, 0)]);
        let n2 = c0x * c0x + c0y * c0y;
        if n2.sqrt() > 1e-9 {
            out[0][3] += d_yaw * (-c0y / n2);
            out[0][3 + 3] += d_yaw * (c0x / n2);
        } else {
            let (x, y) = (r[(1, 1)], -r[(0, 1)]);
            let m2 = x * x + y * y;
            out[0][3 + 1] += d_yaw * (-x / m2);
            out[0][3 + 4] += d_yaw * (-y / m2);
        }
    }
    out
}

/// Smooth map of a `1 x m` raw head output into the control set, on the tape.
pub fn squash_on_tape(tape: &mut Tape<f64>, raw: Var, model: &ModelParams<f64>) -> Var {
    const SHAPES: &str = "squash shapes";
    match model.system {
        System::Quadrotor => {
            let half = model.max_thrust / 2.0;
            let t = tape.slice_cols(raw, 0, 3).expect(SHAPES);
            let t = tape.tanh(t);
            let t = tape.scale(t, model.max_torque);
            let f = tape.slice_cols(raw, 3, 1).expect(SHAPES);
            let f = tape.tanh(f);
            let f = tape.scale(f, half);
            let f = tape.offset(f, half);
            tape.concat_cols(&[t, f]).expect(SHAPES)
        }
        System::DoubleIntegrator => {
            let xy = tape.slice_cols(raw, 0, 2).expect(SHAPES);
            let sq = tape.square(xy);
            let n2 = tape.sum(sq);
            let n2 = tape.offset(n2, SQUASH_EPS);
            let n = tape.sqrt(n2);
            let tn = tape.tanh(n);
            let k = tape.div(tn, n).expect(SHAPES);
            let xy = tape.scale_by(k, xy).expect(SHAPES);
            let xy = tape.scale(xy, model.max_accel);
            let z = tape.slice_cols(raw, 2, 1).expect(SHAPES);
            let z = tape.tanh(z);
            let z = tape.scale(z, model.max_accel_z);
            tape.concat_cols(&[xy, z]).expect(SHAPES)
        }
    }
}

/// Rotates a `1 x 3` canonical acceleration into the world on the tape; the
/// quadrotor's body-frame command passes through.
pub fn decanonicalize_on_tape(tape: &mut Tape<f64>, u: Var, frame: &EgoFrame, system: System) -> Var {
    match system {
        System::Quadrotor => u,
        System::DoubleIntegrator => {
            // row vector times to_local gives (to_local^T u^T)^T
            let m = tape.leaf(Tensor::new(3, 3, frame.to_local.transpose().iter().copied().collect()));
            tape.matmul(u, m).expect("1x3 by 3x3")
        }
    }
}

/// `pi_theta` on an ego subgraph, in world coordinates.
/// `v` clamped to `[lo, hi]` elementwise, on the tape.
fn clamp_on_tape(tape: &mut Tape<f64>, v: Var, lo: f64, hi: f64) -> Var {
    let above = tape.offset(v, -hi);
    let above = tape.relu(above);
    let below = tape.scale(v, -1.0);
    let below = tape.offset(below, lo);
    let below = tape.relu(below);
    let v = tape.sub(v, above).expect("same shape");
    tape.add(v, below).expect("same shape")
}

/// Euclidean projection of a `1 x m` control onto the control set, on the tape.
pub fn project_on_tape(tape: &mut Tape<f64>, u: Var, model: &ModelParams<f64>) -> Var {
    const SHAPES: &str = "projection shapes";
    match model.system {
        System::Quadrotor => {
            let t = tape.slice_cols(u, 0, 3).expect(SHAPES);
            let t = clamp_on_tape(tape, t, -model.max_torque, model.max_torque);
            let f = tape.slice_cols(u, 3, 1).expect(SHAPES);
            let f = clamp_on_tape(tape, f, 0.0, model.max_thrust);
            tape.concat_cols(&[t, f]).expect(SHAPES)
        }
        System::DoubleIntegrator => {
            let xy = tape.slice_cols(u, 0, 2).expect(SHAPES);
            let sq = tape.square(xy);
            let n2 = tape.sum(sq);
            let n2 = tape.offset(n2, SQUASH_EPS);
            let n = tape.sqrt(n2);
            let excess = tape.offset(n, -model.max_accel);
            let excess = tape.relu(excess);
            let shrink = tape.div(excess, n).expect(SHAPES);
            let k = tape.scale(shrink, -1.0);
            let k = tape.offset(k, 1.0);
            let xy = tape.scale_by(k, xy).expect(SHAPES);
            let z = tape.slice_cols(u, 2, 1).expect(SHAPES);
            let z = clamp_on_tape(tape, z, -model.max_accel_z, model.max_accel_z);
            tape.concat_cols(&[xy, z]).expect(SHAPES)
        }
    }
}

/// Bounded, zero-centred correction for the residual policy.
fn correction_on_tape(tape: &mut Tape<f64>, raw: Var, model: &ModelParams<f64>) -> Var {
    match model.system {
        System::DoubleIntegrator => squash_on_tape(tape, raw, model),
        System::Quadrotor => {
            let t = tape.tanh(raw);
            let scale = tape.leaf(Tensor::row(vec![model.max_torque, model.max_torque, model.max_torque, model.max_thrust]));
            tape.mul(t, scale).expect("1x4")
        }
    }
}

/// World-frame policy output for one ego subgraph, given its canonical input
/// `x` (already on the tape) and frame.
#[allow(clippy::too_many_arguments)]
pub fn policy_on_tape(
    tape: &mut Tape<f64>,
    params: &NetParams,
    vars: &[Var],
    x: Var,
    frame: &EgoFrame,
    sub: &Subgraph,
    model: &ModelParams<f64>,
    gains: &NominalGains,
) -> Var {
    let raw = params.policy.forward(tape, vars, x, &sub.attention_mask());
    if !params.config.residual {
        let u = squash_on_tape(tape, raw, model);
        return decanonicalize_on_tape(tape, u, frame, model.system);
    }
    let du = correction_on_tape(tape, raw, model);
    let du = decanonicalize_on_tape(tape, du, frame, model.system);
    let target = sub.nodes.last().filter(|n| n.kind == NodeKind::Target).expect("subgraph ends with its target");
    let nominal = nominal_control(model, gains, &sub.nodes[0].state, &target.state.position);
    let nominal = tape.leaf(Tensor::row(nominal.to_vec()));
    let u = tape.add(nominal, du).expect("1 x m");
    project_on_tape(tape, u, model)
}

pub fn forward_policy(params: &NetParams, model: &ModelParams<f64>, gains: &NominalGains, sub: &Subgraph) -> Control<f64> {
    let (x, frame) = canonicalize(sub, &params.config);
    let mut tape = Tape::new();
    let vars = params.policy.load(&mut tape);
    let xv = tape.leaf(x);
    let u = policy_on_tape(&mut tape, params, &vars, xv, &frame, sub, model, gains);
    Control::from_slice(model.system, tape.value(u).data())
}

/// `h_phi` on an ego subgraph.
pub fn forward_cbf(params: &NetParams, sub: &Subgraph) -> f64 {
    let (x, _) = canonicalize(sub, &params.config);
    let mut tape = Tape::new();
    let vars = params.cbf.load(&mut tape);
    let xv = tape.leaf(x);
    let h = params.cbf.forward(&mut tape, &vars, xv, &sub.attention_mask());
    tape.value(h).item()
}

/// `h_phi` and its gradient with respect to every subgraph node's raw state.
pub fn cbf_with_gradients(params: &NetParams, sub: &Subgraph) -> (f64, Vec<[f64; STATE_DIM]>) {
    let (x, frame) = canonicalize(sub, &params.config);
    let mut tape = Tape::new();
    let vars = params.cbf.load(&mut tape);
    let xv = tape.leaf(x);
    let h = params.cbf.forward(&mut tape, &vars, xv, &sub.attention_mask());
    let gx = tape.grad(h, &[xv]).expect("scalar output, leaf input").remove(0);
    (tape.value(h).item(), chain_to_raw(sub, &frame, &gx, &params.config))
}

/// Barrier value of one ego and its gradient over the whole graph's nodes
/// (exactly zero outside the ego's subgraph).
#[derive(Clone, Debug, PartialEq)]
pub struct EgoGradient {
    pub ego: usize,
    pub h: f64,
    /// `(graph node id, d h / d raw state)` for the subgraph's nodes.
    pub grads: Vec<(usize, [f64; STATE_DIM])>,
}

impl EgoGradient {
    pub fn dense(&self, num_nodes: usize) -> Vec<[f64; STATE_DIM]> {
        let mut out = vec![[0.0; STATE_DIM]; num_nodes];
        for (id, g) in &self.grads {
            for (o, x) in out[*id].iter_mut().zip(g) {
                *o += x;
            }
        }
        out
    }
}

pub fn cbf_input_gradients(params: &NetParams, graph: &GraphSnapshot) -> Vec<EgoGradient> {
    graph
        .subgraphs()
        .into_iter()
        .map(|sub| {
            let (h, g) = cbf_with_gradients(params, &sub);
            EgoGradient { ego: sub.ego, h, grads: sub.parent_ids.iter().copied().zip(g).collect() }
        })
        .collect()
}

/// Monte-Carlo average of `h_raw` over rotations about z:
/// `(1/K) sum_k h_raw(Rz(theta_k) . sub)`. Stratified draws put one angle in
/// each of `K` equal arcs.
pub fn haar_average(
    h_raw: impl Fn(&Subgraph) -> f64,
    sub: &Subgraph,
    samples: usize,
    stratified: bool,
    rng: &mut impl Rng,
) -> f64 {
    assert!(samples >= 1, "at least one Haar sample");
    let pi = std::f64::consts::PI;
    let total: f64 = (0..samples)
        .map(|k| {
            let theta = if stratified {
                -pi + 2.0 * pi * (k as f64 + rng.gen::<f64>()) / samples as f64
            } else {
                rng.gen_range(-pi..pi)
            };
            h_raw(&sub.transformed(&GroupElement::rotation(theta)))
        })
        .sum();
    total / samples as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::AgentState;
    use crate::graph::build_graph_from;
    use crate::world::LidarScan;

    fn small() -> NetConfig {
        NetConfig { d_model: 8, d_ff: 12, head_hidden: 8, ..NetConfig::default() }
    }

    fn pair(yaw: f64) -> Subgraph {
        let states = vec![AgentState::at_rest(Vector3::zeros(), yaw), AgentState::at_rest(Vector3::new(0.0, 1.0, 0.2), 0.0)];
        let targets = vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0)];
        let scans = vec![LidarScan { hits: vec![] }, LidarScan { hits: vec![] }];
        build_graph_from(&states, &targets, &scans, 1.5).unwrap().ego_subgraph(0).unwrap()
    }

    #[test]
    fn ego_row_is_at_the_origin() {
        let sub = pair(0.9);
        let (x, _) = canonicalize(&sub, &small());
        assert_eq!(&x.row_slice(0)[3..6], &[0.0, 0.0, 0.0]);
        let r = Matrix3::from_row_slice(&x.row_slice(0)[6..15]);
        assert!(yaw_of(&r).abs() < 1e-15);
    }

    #[test]
    fn neighbour_north_of_ego_facing_north_is_ahead() {
        let sub = pair(std::f64::consts::FRAC_PI_2);
        let (x, _) = canonicalize(&sub, &small());
        let k = small().position_scale;
        let p = &x.row_slice(1)[3..6];
        assert!((p[0] - k).abs() < 1e-13 && p[1].abs() < 1e-13 && (p[2] - 0.2 * k).abs() < 1e-13);
    }

    #[test]
    fn zero_network_outputs_set_centre() {
        let mut net = NetParams::new(NetConfig { residual: false, ..small() }, System::Quadrotor);
        net.policy.zero_out();
        let m = ModelParams::quadrotor();
        assert_eq!(forward_policy(&net, &m, &NominalGains::default(), &pair(0.3)), m.squash(&[0.0; 4]));
    }

    #[test]
    fn zero_residual_is_the_nominal_controller() {
        let mut net = NetParams::new(small(), System::Quadrotor);
        net.policy.zero_out();
        let m = ModelParams::quadrotor();
        let gains = NominalGains::default();
        let sub = pair(0.3);
        let target = sub.nodes.last().unwrap().state.position;
        let nominal = nominal_control(&m, &gains, &sub.nodes[0].state, &target);
        let u = forward_policy(&net, &m, &gains, &sub).to_vec();
        for (a, b) in u.iter().zip(m.bounds().project(&nominal.to_vec())) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_node_subgraph_is_finite() {
        let net = NetParams::new(small(), System::DoubleIntegrator);
        let mut sub = pair(0.0);
        sub.nodes.truncate(1);
        sub.parent_ids.truncate(1);
        sub.edges.clear();
        assert!(forward_cbf(&net, &sub).is_finite());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = NetParams::new(small(), System::Quadrotor);
        let mut buf = Vec::new();
        net.write_to(&mut buf, &[]).unwrap();
        let (back, rest) = NetParams::read_from(&mut buf.as_slice()).unwrap();
        assert!(rest.is_empty());
        assert_eq!(back, net);
        buf[8] = 9;
        assert!(matches!(NetParams::read_from(&mut buf.as_slice()), Err(CheckpointError::Version { found: 9, .. })));
        assert!(matches!(NetParams::read_from(&mut &b"nonsense"[..]), Err(CheckpointError::BadMagic)));
    }
}
