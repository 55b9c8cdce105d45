//! Shared network-building blocks: parameter registration, tape binding,
//! and the three layer recipes (mask-head CNN, merging net, effect net) used
//! by the segmentation and dynamics levels.

use crate::diffcore::{Array4, BnMode, Grads, ParameterSet, Tape, Var};
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BN_EPS: f32 = 1e-5;
/// Running-stat blend factor: `running = m*running + (1-m)*batch`.
const BN_MOMENTUM: f32 = 0.9;

// ── Initialization ───────────────────────────────────────────────────────

fn he_uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], fan_in: usize) -> Array4 {
    let limit = (6.0 / fan_in as f32).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-limit..limit)).collect();
    Array4::from_vec(shape, data).unwrap()
}

/// Register one conv + batch-norm block (`{prefix}.w/.b/.g/.beta` plus frozen
/// running stats).
fn register_conv_bn(
    params: &mut ParameterSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) -> Result<()> {
    params.insert(&format!("{prefix}.w"), he_uniform(rng, [c_out, c_in, k, k], c_in * k * k), true)?;
    params.insert(&format!("{prefix}.b"), Array4::zeros([1, c_out, 1, 1]), true)?;
    params.insert(&format!("{prefix}.g"), Array4::filled([1, c_out, 1, 1], 1.0), true)?;
    params.insert(&format!("{prefix}.beta"), Array4::zeros([1, c_out, 1, 1]), true)?;
    params.insert(&format!("{prefix}.rm"), Array4::zeros([1, c_out, 1, 1]), false)?;
    params.insert(&format!("{prefix}.rv"), Array4::filled([1, c_out, 1, 1], 1.0), false)?;
    Ok(())
}

fn register_dense(
    params: &mut ParameterSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    k_in: usize,
    k_out: usize,
) -> Result<()> {
    params.insert(&format!("{prefix}.w"), he_uniform(rng, [k_out, k_in, 1, 1], k_in), true)?;
    params.insert(&format!("{prefix}.b"), Array4::zeros([1, k_out, 1, 1]), true)?;
    Ok(())
}

// ── Tape binding ─────────────────────────────────────────────────────────

/// Binds parameters onto a tape once each and remembers the mapping, so a
/// training step can pull gradients back out in parameter order. In eval mode
/// everything binds as constants.
pub struct Binder {
    by_param: Vec<Option<Var>>,
    pub train: bool,
    /// `(mean_name, var_name, bn_node)` for running-stat updates.
    bn_nodes: Vec<(String, String, Var)>,
}

impl Binder {
    pub fn new(params: &ParameterSet, train: bool) -> Self {
        Binder { by_param: vec![None; params.len()], train, bn_nodes: Vec::new() }
    }

    pub fn bind(&mut self, tape: &mut Tape, params: &ParameterSet, name: &str) -> Result<Var> {
        let idx = params
            .index_of(name)
            .ok_or_else(|| crate::Error::Config(format!("unregistered parameter {name:?}")))?;
        if let Some(v) = self.by_param[idx] {
            return Ok(v);
        }
        let p = params.by_index(idx);
        let v = if self.train && p.trainable {
            tape.trainable(p.value.clone())
        } else {
            tape.constant(p.value.clone())
        };
        self.by_param[idx] = Some(v);
        Ok(v)
    }

    /// Gradient slots aligned with the parameter order, for the optimizer.
    pub fn collect_grads(&self, params: &ParameterSet, grads: &Grads) -> Vec<Option<Vec<f32>>> {
        (0..params.len())
            .map(|i| {
                let p = params.by_index(i);
                if !p.trainable {
                    return None;
                }
                match self.by_param[i] {
                    Some(v) => match grads.get(v) {
                        Some(g) => Some(g.to_vec()),
                        // Bound but untouched by the loss: zero gradient.
                        None => Some(vec![0.0; p.value.len()]),
                    },
                    // Never bound in this step: zero gradient.
                    None => Some(vec![0.0; p.value.len()]),
                }
            })
            .collect()
    }

    /// Fold freshly computed batch statistics into the frozen running stats.
    pub fn apply_bn_updates(&self, tape: &Tape, params: &mut ParameterSet) -> Result<()> {
        for (mean_name, var_name, node) in &self.bn_nodes {
            let (bm, bv) = tape
                .bn_batch_stats(*node)
                .ok_or_else(|| crate::Error::Numeric("missing batch-norm stats".into()))?;
            let (bm, bv) = (bm.to_vec(), bv.to_vec());
            let rm = params.get_mut(mean_name)?;
            for (r, b) in rm.data_mut().iter_mut().zip(&bm) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            let rv = params.get_mut(var_name)?;
            for (r, b) in rv.data_mut().iter_mut().zip(&bv) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
        Ok(())
    }

    /// `ReLU(BN(Conv(...)))` block (ReLU optional for final layers).
    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &mut self,
        tape: &mut Tape,
        params: &ParameterSet,
        prefix: &str,
        x: Var,
        stride: usize,
        pad: usize,
        relu: bool,
    ) -> Result<Var> {
        let w = self.bind(tape, params, &format!("{prefix}.w"))?;
        let b = self.bind(tape, params, &format!("{prefix}.b"))?;
        let g = self.bind(tape, params, &format!("{prefix}.g"))?;
        let beta = self.bind(tape, params, &format!("{prefix}.beta"))?;
        let y = tape.conv2d(x, w, b, stride, pad)?;
        let bn = if self.train {
            let bn = tape.batch_norm(y, g, beta, None, BnMode::Train, BN_EPS)?;
            self.bn_nodes.push((format!("{prefix}.rm"), format!("{prefix}.rv"), bn));
            bn
        } else {
            let rm = params.get(&format!("{prefix}.rm"))?.data().to_vec();
            let rv = params.get(&format!("{prefix}.rv"))?.data().to_vec();
            tape.batch_norm(y, g, beta, Some((&rm, &rv)), BnMode::Eval, BN_EPS)?
        };
        Ok(if relu { tape.relu(bn) } else { bn })
    }
}

// ── Mask-head CNN (object detector / instance splitter) ─────────────────

/// Trunk recipe: Conv(32,3,1), Conv(32,3,1), Conv(16,3,2), Conv(16,3,2),
/// Conv(32,1,1), each ReLU(BN(..)); then one BN(Conv(1,3,1)) head per output
/// channel whose strided-resolution logits are bilinearly upsampled back to
/// the input size before the channel softmax.
pub fn register_mask_head(
    params: &mut ParameterSet,
    seed: u64,
    prefix: &str,
    c_in: usize,
    n_heads: usize,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    register_conv_bn(params, &mut rng, &format!("{prefix}.t1"), c_in, 32, 3)?;
    register_conv_bn(params, &mut rng, &format!("{prefix}.t2"), 32, 32, 3)?;
    register_conv_bn(params, &mut rng, &format!("{prefix}.t3"), 32, 16, 3)?;
    register_conv_bn(params, &mut rng, &format!("{prefix}.t4"), 16, 16, 3)?;
    register_conv_bn(params, &mut rng, &format!("{prefix}.t5"), 16, 32, 1)?;
    for h in 0..n_heads {
        register_conv_bn(params, &mut rng, &format!("{prefix}.h{h}"), 32, 1, 3)?;
    }
    Ok(())
}

/// Forward pass of a mask head; returns `(logits, softmax_masks)`, both
/// `[n, n_heads, H, W]`.
#[allow(clippy::too_many_arguments)]
pub fn mask_head_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &ParameterSet,
    prefix: &str,
    x: Var,
    n_heads: usize,
) -> Result<(Var, Var)> {
    let (h, w) = (tape.value(x).h(), tape.value(x).w());
    let t1 = binder.conv_bn(tape, params, &format!("{prefix}.t1"), x, 1, 1, true)?;
    let t2 = binder.conv_bn(tape, params, &format!("{prefix}.t2"), t1, 1, 1, true)?;
    let t3 = binder.conv_bn(tape, params, &format!("{prefix}.t3"), t2, 2, 1, true)?;
    let t4 = binder.conv_bn(tape, params, &format!("{prefix}.t4"), t3, 2, 1, true)?;
    let t5 = binder.conv_bn(tape, params, &format!("{prefix}.t5"), t4, 1, 0, true)?;
    let mut heads = Vec::with_capacity(n_heads);
    for hi in 0..n_heads {
        let logit = binder.conv_bn(tape, params, &format!("{prefix}.h{hi}"), t5, 1, 1, false)?;
        heads.push(tape.upsample(logit, h, w));
    }
    let logits = tape.concat_c(&heads);
    let masks = tape.channel_softmax(logits)?;
    Ok((logits, masks))
}

// ── Merging net ──────────────────────────────────────────────────────────

/// Two 1x1-kernel stride-1 layers per merged output channel:
/// `R(BN(Conv(32,1,1)))`, `R(BN(Conv(1,1,1)))`.
pub fn register_merging(
    params: &mut ParameterSet,
    seed: u64,
    prefix: &str,
    n_candidates: usize,
    n_merged: usize,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for d in 0..n_merged {
        register_conv_bn(params, &mut rng, &format!("{prefix}.m{d}a"), n_candidates, 32, 1)?;
        register_conv_bn(params, &mut rng, &format!("{prefix}.m{d}b"), 32, 1, 1)?;
    }
    Ok(())
}

/// Forward: candidate channels `[n, n_candidates, H, W]` to merged logits
/// `[n, n_merged, H, W]`.
pub fn merging_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &ParameterSet,
    prefix: &str,
    candidates: Var,
    n_merged: usize,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(n_merged);
    for d in 0..n_merged {
        let a = binder.conv_bn(tape, params, &format!("{prefix}.m{d}a"), candidates, 1, 0, true)?;
        let b = binder.conv_bn(tape, params, &format!("{prefix}.m{d}b"), a, 1, 0, true)?;
        outs.push(b);
    }
    Ok(tape.concat_c(&outs))
}

// ── Effect net (relation / inertia) ──────────────────────────────────────

/// Four stride-2 `R(BN(Conv(16,3,2)))` stages, then dense 64 and a `2*n_a`
/// head read as a 2 x n_a effect matrix.
pub fn register_effect_net(
    params: &mut ParameterSet,
    seed: u64,
    prefix: &str,
    c_in: usize,
    window: usize,
    n_actions: usize,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    register_conv_bn(params, &mut rng, &format!("{prefix}.c1"), c_in, 16, 3)?;
    register_conv_bn(params, &mut rng, &format!("{prefix}.c2"), 16, 16, 3)?;
    register_conv_bn(params, &mut rng, &format!("{prefix}.c3"), 16, 16, 3)?;
    register_conv_bn(params, &mut rng, &format!("{prefix}.c4"), 16, 16, 3)?;
    let mut side = window;
    for _ in 0..4 {
        side = (side + 2 - 3) / 2 + 1;
    }
    register_dense(params, &mut rng, &format!("{prefix}.fc1"), 16 * side * side, 64)?;
    register_dense(params, &mut rng, &format!("{prefix}.fc2"), 64, 2 * n_actions)?;
    Ok(())
}

/// Forward: `[k, c_in, w, w]` crops to `[k, 2*n_actions, 1, 1]` effects.
pub fn effect_net_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &ParameterSet,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let c1 = binder.conv_bn(tape, params, &format!("{prefix}.c1"), x, 2, 1, true)?;
    let c2 = binder.conv_bn(tape, params, &format!("{prefix}.c2"), c1, 2, 1, true)?;
    let c3 = binder.conv_bn(tape, params, &format!("{prefix}.c3"), c2, 2, 1, true)?;
    let c4 = binder.conv_bn(tape, params, &format!("{prefix}.c4"), c3, 2, 1, true)?;
    // Flatten: [k, 16, s, s] reads as [k, 16*s*s, 1, 1] in row-major order.
    let [k, c, sh, sw] = tape.value(c4).shape();
    let flat_var = tape.reshape(c4, [k, c * sh * sw, 1, 1]);
    let fw1 = binder.bind(tape, params, &format!("{prefix}.fc1.w"))?;
    let fb1 = binder.bind(tape, params, &format!("{prefix}.fc1.b"))?;
    let h1 = tape.dense(flat_var, fw1, fb1)?;
    let h1 = tape.relu(h1);
    let fw2 = binder.bind(tape, params, &format!("{prefix}.fc2.w"))?;
    let fb2 = binder.bind(tape, params, &format!("{prefix}.fc2.b"))?;
    tape.dense(h1, fw2, fb2)
}

/// Normalized coordinate meshgrid channels (Xmap, Ymap in [-1, 1]) for a
/// square window, as a `[1, 2, w, w]` constant.
pub fn meshgrid(window: usize) -> Array4 {
    let mut m = Array4::zeros([1, 2, window, window]);
    for i in 0..window {
        for j in 0..window {
            let ramp = |t: usize| {
                if window == 1 {
                    0.0
                } else {
                    2.0 * t as f32 / (window as f32 - 1.0) - 1.0
                }
            };
            m.set(0, 0, i, j, ramp(j)); // Xmap varies along columns
            m.set(0, 1, i, j, ramp(i)); // Ymap varies along rows
        }
    }
    m
}
