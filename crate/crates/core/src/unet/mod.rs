//! Untrained encoder-decoder network with one skip connection per level.
//!
//! The depth-1 layout (the production configuration) is eight convolutions
//! and one concatenation:
//!
//! ```text
//! conv3(1->32)  conv3(32->32)[skip]  pool2
//! conv3(32->64) conv3(64->64)
//! up2 conv3(64->32)  concat(skip)  conv3(64->32) conv3(32->32)  conv1(32->1)
//! ```
//!
//! Every 3x3x3 convolution is stride 1 / zero-pad 1 and is followed by
//! instance normalization (eps 1e-5, learnable affine; toggleable) and ReLU;
//! the final 1x1x1 convolution is linear. Deeper configurations repeat the
//! encoder/decoder pattern, doubling channels per level; input grids must be
//! divisible by `2^depth`.
//!
//! The backward pass is hand-derived per layer and exact; max-pool routes to
//! the recorded argmax (first index on ties), upsampling backward sum-pools,
//! and instance norm backpropagates through its own statistics.

mod layers;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

pub(crate) use layers::FeatureMap;

use crate::error::{Error, Result};
use crate::rng::NormalSource;
use crate::volume::ScalarVolume;
use crate::Real;

use layers::*;

const NORM_EPS: Real = 1e-5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Number of pooling levels (1 for the production network, 4 for the
    /// heavy-weight comparison variant).
    pub depth: usize,
    /// Channels at the finest level; doubled per level.
    pub base_channels: usize,
    /// Weight-initialization seed.
    pub seed: u64,
    /// Instance normalization after every 3x3x3 convolution.
    pub norm_enabled: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { depth: 1, base_channels: 32, seed: 0, norm_enabled: true }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidConfig("network depth must be at least 1".into()));
        }
        if self.base_channels < 1 {
            return Err(Error::InvalidConfig("base_channels must be at least 1".into()));
        }
        Ok(())
    }

    fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// One named tensor of the parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<Real>,
}

/// All learnable tensors in forward order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn zeros_like(other: &ParameterSet) -> ParameterSet {
        ParameterSet {
            tensors: other
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    values: alloc::vec![0.0; t.values.len()],
                })
                .collect(),
        }
    }
}

/// Parameter gradients share the tensor layout of the parameters they
/// correspond to.
pub type ParamGrads = ParameterSet;

/// Static description of one convolution in execution order.
#[derive(Debug, Clone)]
struct ConvSpec {
    name: String,
    c_in: usize,
    c_out: usize,
    k1: bool,
    norm: bool,
    /// Index of this conv's first tensor within the parameter list.
    param_at: usize,
}

impl ConvSpec {
    fn weight_len(&self) -> usize {
        let k = if self.k1 { 1 } else { 27 };
        k * self.c_in * self.c_out
    }

    fn param_count(&self) -> usize {
        self.weight_len() + self.c_out + if self.norm { 2 * self.c_out } else { 0 }
    }
}

/// Convolutions in execution order, with parameter offsets.
fn plan(cfg: &NetworkConfig) -> Vec<ConvSpec> {
    let d = cfg.depth;
    let mut convs = Vec::new();
    let mut param_at = 0usize;
    let mut push = |name: String, c_in: usize, c_out: usize, k1: bool, norm: bool| {
        let spec = ConvSpec { name, c_in, c_out, k1, norm, param_at };
        param_at += 2 + if norm { 2 } else { 0 };
        convs.push(spec);
    };
    let norm = cfg.norm_enabled;
    // encoder, level 0 at full resolution down to the bottom at level d
    for l in 0..=d {
        let c_in = if l == 0 { 1 } else { cfg.channels_at(l - 1) };
        let c = cfg.channels_at(l);
        push(format!("enc{l}_conv0"), c_in, c, false, norm);
        push(format!("enc{l}_conv1"), c, c, false, norm);
    }
    // decoder from the bottom back to full resolution
    for l in (1..=d).rev() {
        let c_hi = cfg.channels_at(l);
        let c_lo = cfg.channels_at(l - 1);
        push(format!("dec{l}_up"), c_hi, c_lo, false, norm);
        push(format!("dec{l}_conv0"), c_hi, c_lo, false, norm);
        push(format!("dec{l}_conv1"), c_lo, c_lo, false, norm);
    }
    push("out".into(), cfg.base_channels, 1, true, false);
    convs
}

/// Closed-form parameter count; no tensor is materialized.
pub fn count_params(cfg: &NetworkConfig) -> usize {
    plan(cfg).iter().map(|c| c.param_count()).sum()
}

/// Verify that a parameter set structurally matches a layer plan.
fn check_params_match(convs: &[ConvSpec], params: &ParameterSet) -> Result<()> {
    let expected_tensors: usize = convs.iter().map(|c| if c.norm { 4 } else { 2 }).sum();
    if params.tensors.len() != expected_tensors {
        return Err(Error::ShapeMismatch { context: "params do not match network config" });
    }
    for spec in convs {
        let ok = params.tensors[spec.param_at].values.len() == spec.weight_len()
            && params.tensors[spec.param_at + 1].values.len() == spec.c_out
            && (!spec.norm
                || (params.tensors[spec.param_at + 2].values.len() == spec.c_out
                    && params.tensors[spec.param_at + 3].values.len() == spec.c_out));
        if !ok {
            return Err(Error::ShapeMismatch { context: "params do not match network config" });
        }
    }
    Ok(())
}

/// Fan-in-scaled Gaussian weights (std `sqrt(2/fan_in)`), zero biases, unit
/// normalization scales and zero shifts; fully deterministic in `cfg.seed`.
pub fn init_params(cfg: &NetworkConfig) -> ParameterSet {
    let mut normals = NormalSource::new(cfg.seed);
    let mut tensors = Vec::new();
    for spec in plan(cfg) {
        let k = if spec.k1 { 1usize } else { 3 };
        let fan_in = k * k * k * spec.c_in;
        let std = crate::fmath::sqrt(2.0 as Real / fan_in as Real) as f64;
        let mut w = alloc::vec![0.0 as Real; spec.weight_len()];
        normals.fill(&mut w, 0.0, std);
        tensors.push(Tensor {
            name: format!("{}_weight", spec.name),
            shape: alloc::vec![spec.c_out, spec.c_in, k, k, k],
            values: w,
        });
        tensors.push(Tensor {
            name: format!("{}_bias", spec.name),
            shape: alloc::vec![spec.c_out],
            values: alloc::vec![0.0; spec.c_out],
        });
        if spec.norm {
            tensors.push(Tensor {
                name: format!("{}_norm_scale", spec.name),
                shape: alloc::vec![spec.c_out],
                values: alloc::vec![1.0; spec.c_out],
            });
            tensors.push(Tensor {
                name: format!("{}_norm_shift", spec.name),
                shape: alloc::vec![spec.c_out],
                values: alloc::vec![0.0; spec.c_out],
            });
        }
    }
    ParameterSet { tensors }
}

/// Activations saved by [`forward`] for the matching [`backward`] call.
pub struct ForwardCache {
    input: FeatureMap,
    blocks: Vec<BlockCache>,
    pools: Vec<PoolCache>,
    ups: Vec<FeatureMap>,
    concats: Vec<FeatureMap>,
    dims: [usize; 3],
}

struct BlockCache {
    /// Normalized pre-affine values (only when norm is enabled).
    xhat: Option<FeatureMap>,
    inv_std: Vec<Real>,
    /// Post-activation output; doubles as the next layer's input and as the
    /// ReLU gate.
    out: FeatureMap,
}

struct PoolCache {
    argmax: Vec<u32>,
    in_dims: [usize; 3],
    out: FeatureMap,
}

fn conv_block(
    inp: &FeatureMap,
    spec: &ConvSpec,
    params: &ParameterSet,
) -> BlockCache {
    let w = &params.tensors[spec.param_at];
    let b = &params.tensors[spec.param_at + 1];
    debug_assert!(w.name.starts_with(spec.name.as_str()));
    let mut y = conv3_forward(inp, &w.values, Some(&b.values), spec.c_out);
    if spec.norm {
        let scale = &params.tensors[spec.param_at + 2].values;
        let shift = &params.tensors[spec.param_at + 3].values;
        let (mut out, xhat, inv_std) = instance_norm_forward(&y, scale, shift, NORM_EPS);
        relu_forward(&mut out);
        BlockCache { xhat: Some(xhat), inv_std, out }
    } else {
        relu_forward(&mut y);
        BlockCache { xhat: None, inv_std: Vec::new(), out: y }
    }
}

/// Gradient of one conv block. Consumes the upstream gradient and the
/// block's cache; returns the gradient w.r.t. the block input (skipped for
/// the very first layer) and writes parameter gradients in place.
#[allow(clippy::too_many_arguments)]
fn conv_block_backward(
    mut dout: FeatureMap,
    cache: BlockCache,
    inp: &FeatureMap,
    spec: &ConvSpec,
    params: &ParameterSet,
    grads: &mut ParamGrads,
    need_din: bool,
) -> Option<FeatureMap> {
    relu_backward(&mut dout, &cache.out);
    drop(cache.out);
    let dy = if spec.norm {
        let scale = &params.tensors[spec.param_at + 2].values;
        let xhat = cache.xhat.expect("norm cache");
        let (dy, dscale, dshift) =
            instance_norm_backward(&dout, &xhat, &cache.inv_std, scale);
        grads.tensors[spec.param_at + 2].values = dscale;
        grads.tensors[spec.param_at + 3].values = dshift;
        dy
    } else {
        dout
    };
    let w = &params.tensors[spec.param_at].values;
    let (dw, db) = conv3_backward_weights(inp, &dy);
    grads.tensors[spec.param_at].values = dw;
    grads.tensors[spec.param_at + 1].values = db;
    if need_din {
        Some(conv3_backward_input(&dy, w, spec.c_in))
    } else {
        None
    }
}

/// Run the network on a local-field (or noise) volume; returns the interim
/// susceptibility estimate and the cache for [`backward`].
pub fn forward(
    phi_in: &ScalarVolume,
    params: &ParameterSet,
    cfg: &NetworkConfig,
) -> Result<(ScalarVolume, ForwardCache)> {
    cfg.validate()?;
    let dims = phi_in.grid().matrix();
    if !phi_in.grid().divisible_by(1 << cfg.depth) {
        return Err(Error::InvalidConfig(format!(
            "grid {:?} not divisible by 2^depth = {}",
            dims,
            1 << cfg.depth
        )));
    }
    if dims[0] > layers::MAX_ROW {
        return Err(Error::InvalidConfig(format!(
            "x dimension {} exceeds the supported row length {}",
            dims[0],
            layers::MAX_ROW
        )));
    }
    let convs = plan(cfg);
    check_params_match(&convs, params)?;

    let input = FeatureMap {
        channels: 1,
        dims,
        data: phi_in.data().to_vec(),
    };
    let d = cfg.depth;
    let mut blocks: Vec<BlockCache> = Vec::with_capacity(convs.len());
    let mut pools: Vec<PoolCache> = Vec::with_capacity(d);
    let mut ups: Vec<FeatureMap> = Vec::with_capacity(d);
    let mut concats: Vec<FeatureMap> = Vec::with_capacity(d);
    let mut conv_idx = 0usize;

    // encoder; skip_block[l] indexes enc{l}_conv1's cache entry
    let mut skip_block: Vec<usize> = Vec::with_capacity(d);
    for l in 0..=d {
        if l > 0 {
            let prev = &blocks[blocks.len() - 1].out;
            let in_dims = prev.dims;
            let (pooled, argmax) = maxpool2_forward(prev);
            pools.push(PoolCache { argmax, in_dims, out: pooled });
        }
        let first_in: &FeatureMap =
            if l == 0 { &input } else { &pools[pools.len() - 1].out };
        blocks.push(conv_block(first_in, &convs[conv_idx], params));
        conv_idx += 1;
        blocks.push(conv_block(&blocks[blocks.len() - 1].out, &convs[conv_idx], params));
        conv_idx += 1;
        if l < d {
            skip_block.push(blocks.len() - 1);
        }
    }

    // decoder
    for l in (1..=d).rev() {
        ups.push(upsample2_forward(&blocks[blocks.len() - 1].out));
        blocks.push(conv_block(&ups[ups.len() - 1], &convs[conv_idx], params));
        conv_idx += 1;
        concats.push(concat(
            &blocks[skip_block[l - 1]].out,
            &blocks[blocks.len() - 1].out,
        ));
        blocks.push(conv_block(&concats[concats.len() - 1], &convs[conv_idx], params));
        conv_idx += 1;
        blocks.push(conv_block(&blocks[blocks.len() - 1].out, &convs[conv_idx], params));
        conv_idx += 1;
    }

    // final linear 1x1x1 projection
    let spec = &convs[conv_idx];
    let w = &params.tensors[spec.param_at];
    let b = &params.tensors[spec.param_at + 1];
    let out_fm = conv1_forward(&blocks[blocks.len() - 1].out, &w.values, &b.values, 1);

    let chi0 = ScalarVolume::same_data_grid(phi_in.grid(), out_fm.data.clone());
    Ok((chi0, ForwardCache { input, blocks, pools, ups, concats, dims }))
}

/// Exact reverse-mode gradients for every parameter, consuming the cache of
/// the forward pass that produced `grad_chi0`'s evaluation point.
pub fn backward(
    grad_chi0: &ScalarVolume,
    cache: ForwardCache,
    params: &ParameterSet,
    cfg: &NetworkConfig,
) -> Result<ParamGrads> {
    cfg.validate()?;
    if grad_chi0.grid().matrix() != cache.dims {
        return Err(Error::ShapeMismatch { context: "backward: gradient grid" });
    }
    let convs = plan(cfg);
    check_params_match(&convs, params)?;
    let mut grads = ParamGrads::zeros_like(params);
    let d = cfg.depth;

    let ForwardCache { input, mut blocks, mut pools, mut ups, mut concats, dims } = cache;

    // final 1x1x1 conv
    let dout = FeatureMap { channels: 1, dims, data: grad_chi0.data().to_vec() };
    let mut conv_idx = convs.len() - 1;
    let spec = &convs[conv_idx];
    let last_in = &blocks.last().expect("cache").out;
    let (mut dcur, dw, db) =
        conv1_backward(last_in, &dout, &params.tensors[spec.param_at].values);
    grads.tensors[spec.param_at].values = dw;
    grads.tensors[spec.param_at + 1].values = db;

    // gradient accumulators for the skip branches, by level
    let mut skip_grads: Vec<Option<FeatureMap>> = (0..d).map(|_| None).collect();

    // decoder levels were executed for l = d..1; unwind in reverse
    for l in 1..=d {
        conv_idx -= 1; // dec{l}_conv1
        let b1 = blocks.pop().expect("cache");
        let b1_in = &blocks.last().expect("cache").out;
        dcur = conv_block_backward(dcur, b1, b1_in, &convs[conv_idx], params, &mut grads, true)
            .expect("din");

        conv_idx -= 1; // dec{l}_conv0 (post-concat)
        let b0 = blocks.pop().expect("cache");
        let cat = concats.pop().expect("cache");
        dcur = conv_block_backward(dcur, b0, &cat, &convs[conv_idx], params, &mut grads, true)
            .expect("din");
        drop(cat);
        let c_skip = convs[conv_idx].c_out; // skip carries the level's low width
        let (dskip, dup_branch) = split_grad(&dcur, c_skip);
        skip_grads[l - 1] = Some(dskip);

        conv_idx -= 1; // dec{l}_up
        let bu = blocks.pop().expect("cache");
        let up_in = ups.pop().expect("cache");
        let dup = conv_block_backward(
            dup_branch,
            bu,
            &up_in,
            &convs[conv_idx],
            params,
            &mut grads,
            true,
        )
        .expect("din");
        drop(up_in);
        dcur = upsample2_backward(&dup);
    }

    // encoder levels were executed for l = 0..=d; unwind from the bottom
    for l in (0..=d).rev() {
        conv_idx -= 1; // enc{l}_conv1
        let b1 = blocks.pop().expect("cache");
        let b1_in = &blocks.last().expect("cache").out;
        let mut d1 = dcur;
        // join the skip branch gradient flowing into enc{l}_conv1's output
        if l < d {
            if let Some(ds) = skip_grads[l].take() {
                for (a, b) in d1.data.iter_mut().zip(ds.data.iter()) {
                    *a += b;
                }
            }
        }
        d1 = conv_block_backward(d1, b1, b1_in, &convs[conv_idx], params, &mut grads, true)
            .expect("din");

        conv_idx -= 1; // enc{l}_conv0
        let b0 = blocks.pop().expect("cache");
        let (b0_in, need_din): (&FeatureMap, bool) = if l == 0 {
            (&input, false)
        } else {
            (&pools.last().expect("cache").out, true)
        };
        let din = conv_block_backward(d1, b0, b0_in, &convs[conv_idx], params, &mut grads, need_din);

        if l == 0 {
            break;
        }
        let pool = pools.pop().expect("cache");
        dcur = maxpool2_backward(&din.expect("din"), &pool.argmax, pool.in_dims);
    }

    debug_assert_eq!(conv_idx, 0);
    Ok(grads)
}
