use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::language::LanguageEncoding;
use super::tape::{GatherMap, Scalar, SparseMap, Tape, Var};
use super::{PolicyConfig, QPrediction};
use crate::action_codec::RotationBins;
use crate::error::{invalid, Result};
use crate::voxelizer::{VoxelGrid, NUM_CHANNELS};

pub const PROPRIO_DIM: usize = 4;

/// Named parameter arrays in a fixed order determined by the config.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn from_parts(names: Vec<String>, values: Vec<Array2<F>>) -> Self {
        assert_eq!(names.len(), values.len());
        Self { names, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<F>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<F>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.values[i])
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| G::of(x.to_f64_lossy()))).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    FanIn(usize),
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnProj {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    norm: Norm,
    up: Lin,
    down: Lin,
}

#[derive(Debug, Clone)]
struct Layout {
    voxel_in: Lin,
    proprio: Lin,
    patch: Lin,
    lang: Lin,
    pos: usize,
    latents: usize,
    enc_norm_q: Norm,
    enc_norm_kv: Norm,
    enc_attn: AttnProj,
    enc_ff: FeedForward,
    layers: Vec<(Norm, AttnProj, FeedForward)>,
    dec_norm_q: Norm,
    dec_norm_kv: Norm,
    dec_attn: AttnProj,
    up_conv: Lin,
    reduce: Lin,
    q_trans: Lin,
    rot: Lin,
    open: Lin,
    collide: Lin,
}

struct SpecBuilder {
    specs: Vec<(String, [usize; 2], Init)>,
}

impl SpecBuilder {
    fn raw(&mut self, name: String, shape: [usize; 2], init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn lin(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Lin {
        let w = self.raw(format!("{name}.weight"), [fan_in, fan_out], Init::FanIn(fan_in));
        let b = self.raw(format!("{name}.bias"), [1, fan_out], Init::Zeros);
        Lin { w, b }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        let g = self.raw(format!("{name}.gamma"), [1, dim], Init::Ones);
        let b = self.raw(format!("{name}.beta"), [1, dim], Init::Zeros);
        Norm { g, b }
    }

    fn attn(&mut self, name: &str, q_in: usize, kv_in: usize, inner: usize, out: usize) -> AttnProj {
        AttnProj {
            q: self.lin(&format!("{name}.q"), q_in, inner),
            k: self.lin(&format!("{name}.k"), kv_in, inner),
            v: self.lin(&format!("{name}.v"), kv_in, inner),
            o: self.lin(&format!("{name}.o"), inner, out),
        }
    }

    fn ff(&mut self, name: &str, dim: usize, mult: usize) -> FeedForward {
        FeedForward {
            norm: self.norm(&format!("{name}.norm"), dim),
            up: self.lin(&format!("{name}.up"), dim, mult * dim),
            down: self.lin(&format!("{name}.down"), mult * dim, dim),
        }
    }
}

fn build_spec(c: &PolicyConfig) -> (Vec<(String, [usize; 2], Init)>, Layout) {
    let mut b = SpecBuilder { specs: Vec::new() };
    let (cv, e, dl) = (c.voxel_feature_dim, c.embed_dim, c.latent_dim);
    let bins = c.rotation_bins().map(|r| r.count()).unwrap_or(0);
    let layout = Layout {
        voxel_in: b.lin("voxel_in", NUM_CHANNELS, cv),
        proprio: b.lin("proprio", PROPRIO_DIM, cv),
        patch: b.lin("patchify", c.patch_size.pow(3) * cv, cv),
        lang: b.lin("lang_proj", c.lang_feature_dim, e),
        pos: b.raw("pos_embedding".into(), [c.seq_len(), e], Init::Normal(0.1)),
        latents: b.raw("latents".into(), [c.num_latents, dl], Init::Normal(1.0)),
        enc_norm_q: b.norm("encoder.norm_latents", dl),
        enc_norm_kv: b.norm("encoder.norm_input", e),
        enc_attn: b.attn("encoder.cross_attn", dl, e, dl, dl),
        enc_ff: b.ff("encoder.ff", dl, c.ff_mult),
        layers: (0..c.num_self_attn_layers)
            .map(|i| {
                let norm = b.norm(&format!("layer{i}.norm"), dl);
                let attn = b.attn(&format!("layer{i}.self_attn"), dl, dl, dl, dl);
                let ff = b.ff(&format!("layer{i}.ff"), dl, c.ff_mult);
                (norm, attn, ff)
            })
            .collect(),
        dec_norm_q: b.norm("decoder.norm_queries", e),
        dec_norm_kv: b.norm("decoder.norm_latents", dl),
        dec_attn: b.attn("decoder.cross_attn", e, dl, dl, e),
        up_conv: b.lin("upsample_conv", 27 * e, cv),
        reduce: b.lin("skip_reduce", 2 * cv, cv),
        q_trans: b.lin("head.trans", cv, 1),
        rot: b.lin("head.rot", cv, 3 * bins),
        open: b.lin("head.open", cv, 2),
        collide: b.lin("head.collide", cv, 2),
    };
    (b.specs, layout)
}

impl PolicyConfig {
    /// Number of scalar parameters implied by this configuration.
    pub fn param_count(&self) -> usize {
        build_spec(self).0.iter().map(|(_, s, _)| s[0] * s[1]).sum()
    }
}

/// Index structures shared by every forward pass.
#[derive(Debug)]
struct Maps {
    patchify: Arc<GatherMap>,
    conv3: Arc<GatherMap>,
    upsample: Arc<SparseMap>,
}

fn cube_coords(n: usize) -> impl Iterator<Item = [usize; 3]> {
    (0..n).flat_map(move |x| (0..n).flat_map(move |y| (0..n).map(move |z| [x, y, z])))
}

fn patchify_map(grid: usize, patch: usize) -> GatherMap {
    let g = grid / patch;
    let mut index = Vec::with_capacity(grid.pow(3));
    for [a, b, c] in cube_coords(g) {
        for [dx, dy, dz] in cube_coords(patch) {
            let (x, y, z) = (a * patch + dx, b * patch + dy, c * patch + dz);
            index.push(((x * grid + y) * grid + z) as u32);
        }
    }
    GatherMap { out_rows: g.pow(3), slots: patch.pow(3), index }
}

/// 3x3x3 neighborhood gather with zero padding (im2col for a same-size conv).
fn conv3_map(g: usize) -> GatherMap {
    let mut index = Vec::with_capacity(27 * g.pow(3));
    for [a, b, c] in cube_coords(g) {
        for [dx, dy, dz] in cube_coords(3) {
            let n = [a as isize + dx as isize - 1, b as isize + dy as isize - 1, c as isize + dz as isize - 1];
            if n.iter().all(|v| *v >= 0 && (*v as usize) < g) {
                let [x, y, z] = n.map(|v| v as usize);
                index.push(((x * g + y) * g + z) as u32);
            } else {
                index.push(GatherMap::PAD);
            }
        }
    }
    GatherMap { out_rows: g.pow(3), slots: 27, index }
}

/// Per-axis linear interpolation weights with half-pixel centers and edge
/// clamping (trilinear upsampling by an integer factor).
fn axis_weights(out_n: usize, in_n: usize) -> Vec<Vec<(usize, f64)>> {
    let factor = out_n as f64 / in_n as f64;
    (0..out_n)
        .map(|x| {
            let s = ((x as f64 + 0.5) / factor - 0.5).clamp(0.0, (in_n - 1) as f64);
            let i0 = (s.floor() as usize).min(in_n - 1);
            let i1 = (i0 + 1).min(in_n - 1);
            let w1 = s - i0 as f64;
            if i0 == i1 || w1 == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - w1), (i1, w1)]
            }
        })
        .collect()
}

fn upsample_map(grid: usize, lattice: usize) -> SparseMap {
    let w = axis_weights(grid, lattice);
    let mut offsets = vec![0];
    let mut cols = Vec::new();
    let mut weights = Vec::new();
    for [x, y, z] in cube_coords(grid) {
        for &(i, wi) in &w[x] {
            for &(j, wj) in &w[y] {
                for &(k, wk) in &w[z] {
                    cols.push(((i * lattice + j) * lattice + k) as u32);
                    weights.push(wi * wj * wk);
                }
            }
        }
        offsets.push(cols.len());
    }
    SparseMap { in_rows: lattice.pow(3), offsets, cols, weights }
}

/// Inputs for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a> {
    pub voxels: &'a VoxelGrid,
    /// Gripper open, left finger, right finger, normalized timestep.
    pub proprio: [f32; 4],
    pub lang: &'a LanguageEncoding,
}

/// Handles into a recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub params: Vec<Var>,
    pub sequence: Var,
    pub q_trans: Var,
    pub q_rot: Var,
    pub q_open: Var,
    pub q_collide: Var,
}

/// The policy network with its parameters.
#[derive(Debug, Clone)]
pub struct Policy<F: Scalar> {
    config: PolicyConfig,
    bins: RotationBins,
    params: ParamStore<F>,
    layout: Layout,
    maps: Arc<Maps>,
}

impl<F: Scalar> Policy<F> {
    /// Fresh parameters: fan-in scaled Gaussian weights from a seeded generator.
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, _) = build_spec(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut values = Vec::with_capacity(specs.len());
        for (name, [r, c], init) in specs {
            let std = match init {
                Init::FanIn(fan) => Some(1.0 / (fan as f64).sqrt()),
                Init::Normal(s) => Some(s),
                Init::Zeros | Init::Ones => None,
            };
            let v = match (init, std) {
                (Init::Ones, _) => Array2::from_elem((r, c), F::one()),
                (_, Some(std)) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    Array2::from_shape_simple_fn((r, c), || F::of(dist.sample(&mut rng)))
                }
                _ => Array2::zeros((r, c)),
            };
            names.push(name);
            values.push(v);
        }
        Self::with_params(config, ParamStore { names, values })
    }

    /// Wrap existing parameters, checking names and shapes against the config.
    pub fn with_params(config: PolicyConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = build_spec(&config);
        if specs.len() != params.len() {
            return Err(invalid(format!(
                "parameter count mismatch: config expects {} arrays, found {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (pname, v)) in specs.iter().zip(params.names.iter().zip(&params.values)) {
            if name != pname || v.shape() != shape {
                return Err(invalid(format!(
                    "parameter {pname} {:?} does not match expected {name} {shape:?}",
                    v.shape()
                )));
            }
        }
        let g = config.patches_per_axis();
        let maps = Maps {
            patchify: Arc::new(patchify_map(config.grid_size, config.patch_size)),
            conv3: Arc::new(conv3_map(g)),
            upsample: Arc::new(upsample_map(config.grid_size, g)),
        };
        Ok(Self { bins: config.rotation_bins()?, config, params, layout, maps: Arc::new(maps) })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<F> {
        self.params
    }

    fn check_input(&self, input: &PolicyInput) -> Result<()> {
        let n = self.config.grid_size;
        if input.voxels.shape() != [n, n, n, NUM_CHANNELS] {
            return Err(invalid(format!(
                "voxel grid shape {:?} does not match configured grid {n}",
                input.voxels.shape()
            )));
        }
        let t = input.lang.tokens.shape();
        if t != [self.config.num_lang_tokens, self.config.lang_feature_dim] {
            return Err(invalid(format!(
                "language encoding shape {t:?} does not match config ({}, {})",
                self.config.num_lang_tokens, self.config.lang_feature_dim
            )));
        }
        if input.proprio.iter().any(|v| !v.is_finite()) {
            return Err(invalid("proprioception must be finite"));
        }
        Ok(())
    }

    /// Record a full forward pass on `tape`.
    pub fn forward_trace(&self, tape: &mut Tape<F>, input: &PolicyInput) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let c = &self.config;
        let l = &self.layout;
        let params: Vec<Var> = self.params.values.iter().map(|v| tape.leaf(v.clone())).collect();
        let p = |i: usize| params[i];
        let lin = |t: &mut Tape<F>, x: Var, w: Lin| t.linear(x, p(w.w), p(w.b));
        let norm = |t: &mut Tape<F>, x: Var, n: Norm| t.layer_norm(x, p(n.g), p(n.b));

        let voxels = Array2::from_shape_vec(
            (c.num_voxels(), NUM_CHANNELS),
            input.voxels.as_rows().iter().map(|v| F::of(f64::from(*v))).collect(),
        )
        .expect("grid shape checked");
        let voxels = tape.leaf(voxels);
        let proprio = tape.leaf(Array2::from_shape_fn((1, PROPRIO_DIM), |(_, j)| F::of(f64::from(input.proprio[j]))));
        let lang = tape.leaf(input.lang.tokens.mapv(|v| F::of(f64::from(v))));

        // Encoder: per-voxel lift, patchify, proprio tiling, language tokens.
        let h = lin(tape, voxels, l.voxel_in);
        let skip = tape.gelu(h);
        let patches = tape.gather(skip, self.maps.patchify.clone());
        let h = lin(tape, patches, l.patch);
        let patch_feats = tape.gelu(h);
        let h = lin(tape, proprio, l.proprio);
        let prop = tape.gelu(h);
        let prop = tape.tile_rows(prop, c.num_voxel_tokens());
        let voxel_tokens = tape.concat_cols(&[patch_feats, prop]);
        let lang_tokens = lin(tape, lang, l.lang);
        let seq = tape.concat_rows(&[voxel_tokens, lang_tokens]);
        let seq = tape.add(seq, p(l.pos));

        // Latent bottleneck.
        let heads = c.num_attention_heads;
        let attend = |t: &mut Tape<F>, qn: Var, kvn: Var, a: AttnProj| {
            let q = lin(t, qn, a.q);
            let k = lin(t, kvn, a.k);
            let v = lin(t, kvn, a.v);
            let o = t.attention(q, k, v, heads);
            lin(t, o, a.o)
        };
        let feed_forward = |t: &mut Tape<F>, x: Var, f: FeedForward| {
            let n = norm(t, x, f.norm);
            let u = lin(t, n, f.up);
            let u = t.gelu(u);
            let d = lin(t, u, f.down);
            t.add(x, d)
        };
        let lat_n = norm(tape, p(l.latents), l.enc_norm_q);
        let seq_n = norm(tape, seq, l.enc_norm_kv);
        let a = attend(tape, lat_n, seq_n, l.enc_attn);
        let mut lat = tape.add(p(l.latents), a);
        lat = feed_forward(tape, lat, l.enc_ff);
        for (n, attn, ff) in &l.layers {
            let x = norm(tape, lat, *n);
            let a = attend(tape, x, x, *attn);
            lat = tape.add(lat, a);
            lat = feed_forward(tape, lat, *ff);
        }
        let q_n = norm(tape, seq, l.dec_norm_q);
        let lat_n = norm(tape, lat, l.dec_norm_kv);
        let a = attend(tape, q_n, lat_n, l.dec_attn);
        let out = tape.add(seq, a);

        // Decoder: only voxel tokens are mapped back onto the grid.
        let vox_out = tape.slice_rows(out, 0, c.num_voxel_tokens());
        let cols = tape.gather(vox_out, self.maps.conv3.clone());
        let h = lin(tape, cols, l.up_conv);
        let h = tape.gelu(h);
        let up = tape.sparse_mix(h, self.maps.upsample.clone());
        let cat = tape.concat_cols(&[up, skip]);
        let h = lin(tape, cat, l.reduce);
        let feats = tape.gelu(h);
        let q_trans = lin(tape, feats, l.q_trans);
        let pooled = tape.max_pool_rows(feats);
        let q_rot = lin(tape, pooled, l.rot);
        let q_open = lin(tape, pooled, l.open);
        let q_collide = lin(tape, pooled, l.collide);
        Ok(ForwardTrace { params, sequence: seq, q_trans, q_rot, q_open, q_collide })
    }

    /// Read the Q-functions out of a recorded pass.
    pub fn q_prediction(&self, tape: &Tape<F>, trace: &ForwardTrace) -> QPrediction {
        let n = self.config.grid_size;
        let bins = self.bins.count();
        let q_trans = Array3::from_shape_vec(
            (n, n, n),
            tape.value(trace.q_trans).iter().map(|v| v.to_f64_lossy()).collect(),
        )
        .expect("translation head shape");
        let rot = tape.value(trace.q_rot);
        let q_rot = Array2::from_shape_fn((bins, 3), |(b, axis)| rot[[0, axis * bins + b]].to_f64_lossy());
        let pair = |v: Var| {
            let a = tape.value(v);
            [a[[0, 0]].to_f64_lossy(), a[[0, 1]].to_f64_lossy()]
        };
        QPrediction { q_trans, q_rot, q_open: pair(trace.q_open), q_collide: pair(trace.q_collide) }
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, input: &PolicyInput) -> Result<QPrediction> {
        let mut tape = Tape::new(false);
        let trace = self.forward_trace(&mut tape, input)?;
        Ok(self.q_prediction(&tape, &trace))
    }

    /// Parameter gradients given the gradient of a scalar objective with
    /// respect to each Q-function.
    pub fn backward(&self, tape: &Tape<F>, trace: &ForwardTrace, dq: &QPrediction) -> Vec<Array2<F>> {
        let n = self.config.num_voxels();
        let bins = self.bins.count();
        let cast = |v: f64| F::of(v);
        let d_trans = Array2::from_shape_vec((n, 1), dq.q_trans.iter().map(|v| cast(*v)).collect())
            .expect("translation gradient shape");
        let d_rot = Array2::from_shape_fn((1, 3 * bins), |(_, j)| cast(dq.q_rot[[j % bins, j / bins]]));
        let pair = |p: [f64; 2]| Array2::from_shape_vec((1, 2), vec![cast(p[0]), cast(p[1])]).expect("pair");
        let mut grads = tape.backward(vec![
            (trace.q_trans, d_trans),
            (trace.q_rot, d_rot),
            (trace.q_open, pair(dq.q_open)),
            (trace.q_collide, pair(dq.q_collide)),
        ]);
        trace
            .params
            .iter()
            .zip(&self.params.values)
            .map(|(v, value)| grads.take(*v).unwrap_or_else(|| Array2::zeros(value.raw_dim())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_weights_partition_unity() {
        let m = upsample_map(8, 2);
        assert_eq!(m.out_rows(), 512);
        for i in 0..m.out_rows() {
            let s: f64 = m.weights[m.offsets[i]..m.offsets[i + 1]].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn axis_weights_match_half_pixel_rule() {
        let w = axis_weights(4, 2);
        assert_eq!(w[0], vec![(0, 1.0)]);
        assert_eq!(w[1], vec![(0, 0.75), (1, 0.25)]);
        assert_eq!(w[2], vec![(0, 0.25), (1, 0.75)]);
        assert_eq!(w[3], vec![(1, 1.0)]);
    }

    #[test]
    fn patchify_covers_each_voxel_once() {
        let m = patchify_map(8, 4);
        let mut seen = vec![0; 512];
        for i in &m.index {
            seen[*i as usize] += 1;
        }
        assert!(seen.iter().all(|c| *c == 1));
        // First patch, second slot is voxel (0, 0, 1).
        assert_eq!(m.index[1], 1);
    }

    #[test]
    fn conv3_center_slot_is_identity() {
        let m = conv3_map(3);
        for cell in 0..27 {
            assert_eq!(m.index[cell * 27 + 13], cell as u32);
        }
        assert_eq!(m.index[0], GatherMap::PAD);
    }

    #[test]
    fn param_count_is_pure() {
        let c = PolicyConfig::tiny();
        let p = Policy::<f64>::new(c.clone(), 1).unwrap();
        let q = Policy::<f64>::new(c.clone(), 2).unwrap();
        assert_eq!(p.params().num_scalars(), c.param_count());
        assert_eq!(q.params().num_scalars(), c.param_count());
        assert_ne!(p.params(), q.params());
    }

    #[test]
    fn with_params_rejects_mismatch() {
        let p = Policy::<f64>::new(PolicyConfig::tiny(), 1).unwrap();
        let other = PolicyConfig { voxel_feature_dim: 8, embed_dim: 16, ..PolicyConfig::tiny() };
        assert!(Policy::with_params(other, p.params().clone()).is_err());
    }
}
