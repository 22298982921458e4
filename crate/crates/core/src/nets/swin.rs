//! Shifted-window attention transformer over 3D patch grids.
//!
//! Volumes are cut into p³ patches and linearly embedded; stages alternate
//! regular and half-window-shifted window attention with an MLP, merging
//! 2³ patch neighborhoods between stages. Token grids that do not divide
//! evenly by the window (or by two, at merging) are padded with masked
//! tokens that are cropped away again after each block.

use super::{init::Init, NetError, Plan, Result};
use crate::tensor::{Element, Tape, Tensor, TensorId};
use std::collections::BTreeMap;
use std::sync::Arc;

const MLP_RATIO: usize = 4;
const MASK_NEG: f64 = -1e9;
const PAD_REGION: usize = usize::MAX;

/// Partition a token grid `[N, D, H, W, C]` into non-overlapping cubic
/// windows `[N·nw, w³, C]`. The inverse of [`window_unpartition`], exactly.
pub fn window_partition<E: Element>(tape: &mut Tape<E>, x: TensorId, window: usize) -> crate::tensor::Result<TensorId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 5 || !s[1].is_multiple_of(window) || !s[2].is_multiple_of(window) || !s[3].is_multiple_of(window) {
        return Err(crate::tensor::TensorError::DimensionMismatch {
            op: "window_partition",
            detail: format!("grid {s:?} not divisible by window {window}"),
        });
    }
    let (n, d, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
    let (gd, gh, gw) = (d / window, h / window, w / window);
    let r = tape.reshape(x, vec![n, gd, window, gh, window, gw, window, c])?;
    let p = tape.permute(r, &[0, 1, 3, 5, 2, 4, 6, 7])?;
    tape.reshape(p, vec![n * gd * gh * gw, window * window * window, c])
}

/// Reassemble windows `[N·nw, w³, C]` into the grid `[N, D, H, W, C]`.
pub fn window_unpartition<E: Element>(
    tape: &mut Tape<E>,
    wins: TensorId,
    window: usize,
    n: usize,
    grid: (usize, usize, usize),
) -> crate::tensor::Result<TensorId> {
    let (d, h, w) = grid;
    let (gd, gh, gw) = (d / window, h / window, w / window);
    let c = *tape.shape(wins).last().unwrap();
    let r = tape.reshape(wins, vec![n, gd, gh, gw, window, window, window, c])?;
    let p = tape.permute(r, &[0, 1, 4, 2, 5, 3, 6, 7])?;
    tape.reshape(p, vec![n, d, h, w, c])
}

/// Additive attention mask for a cyclically shifted window partition over a
/// fully valid grid: token pairs originating from different pre-shift
/// regions get a large negative value so softmax zeroes them. Shape
/// `[nw, 1, w³, w³]`; shift 0 yields an all-zero mask.
pub fn shifted_attention_mask<E: Element>(
    grid: (usize, usize, usize),
    window: usize,
    shift: usize,
) -> crate::tensor::Result<Tensor<E>> {
    mask_with_pad(grid, grid, window, shift)
}

/// Like [`shifted_attention_mask`] but for a padded grid: cells at or past
/// the valid extents are pad tokens, masked against every valid token (pads
/// still attend among themselves so their softmax rows stay finite).
fn mask_with_pad<E: Element>(
    padded: (usize, usize, usize),
    valid: (usize, usize, usize),
    window: usize,
    shift: usize,
) -> crate::tensor::Result<Tensor<E>> {
    let (pd, ph, pw) = padded;
    if pd % window != 0 || ph % window != 0 || pw % window != 0 {
        return Err(crate::tensor::TensorError::DimensionMismatch {
            op: "shifted_attention_mask",
            detail: format!("grid {padded:?} not divisible by window {window}"),
        });
    }
    // region of one axis coordinate under the standard three-slice split
    let region = |coord: usize, extent: usize| -> usize {
        if shift == 0 || coord < extent - window {
            0
        } else if coord < extent - shift {
            1
        } else {
            2
        }
    };
    // region ids on the unshifted padded grid
    let mut ids = vec![0usize; pd * ph * pw];
    for d in 0..pd {
        for h in 0..ph {
            for w in 0..pw {
                ids[(d * ph + h) * pw + w] = if d >= valid.0 || h >= valid.1 || w >= valid.2 {
                    PAD_REGION
                } else {
                    (region(d, pd) * 3 + region(h, ph)) * 3 + region(w, pw)
                };
            }
        }
    }
    // cyclic shift by -shift on every axis, then partition
    let (gd, gh, gw) = (pd / window, ph / window, pw / window);
    let nw = gd * gh * gw;
    let wcube = window * window * window;
    let mut win_ids = vec![0usize; nw * wcube];
    for d in 0..pd {
        for h in 0..ph {
            for w in 0..pw {
                let sd = (d + shift) % pd; // source coordinate after roll(-shift)
                let sh = (h + shift) % ph;
                let sw = (w + shift) % pw;
                let win = ((d / window) * gh + h / window) * gw + w / window;
                let slot = ((d % window) * window + h % window) * window + w % window;
                win_ids[win * wcube + slot] = ids[(sd * ph + sh) * pw + sw];
            }
        }
    }
    let mut mask = vec![E::ZERO; nw * wcube * wcube];
    for win in 0..nw {
        let base = win * wcube;
        for i in 0..wcube {
            for j in 0..wcube {
                if win_ids[base + i] != win_ids[base + j] {
                    mask[(win * wcube + i) * wcube + j] = E::from_f64(MASK_NEG);
                }
            }
        }
    }
    Tensor::from_vec(vec![nw, 1, wcube, wcube], mask)
}

/// Precomputed relative-position lookup for one window size: entry `(i, j)`
/// is the row of the bias table for token pair `(i, j)`, a table of
/// `(2w−1)³` rows.
#[derive(Debug, Clone)]
pub struct RelPosIndex {
    pub window: usize,
    pub indices: Arc<Vec<u32>>,
}

impl RelPosIndex {
    pub fn new(window: usize) -> Self {
        let span = 2 * window - 1;
        let wcube = window * window * window;
        let coord = |t: usize| ((t / (window * window)), (t / window) % window, t % window);
        let mut indices = Vec::with_capacity(wcube * wcube);
        for i in 0..wcube {
            let (di, hi, wi) = coord(i);
            for j in 0..wcube {
                let (dj, hj, wj) = coord(j);
                let dd = di + window - 1 - dj;
                let dh = hi + window - 1 - hj;
                let dw = wi + window - 1 - wj;
                indices.push(((dd * span + dh) * span + dw) as u32);
            }
        }
        Self { window, indices: Arc::new(indices) }
    }

    pub fn table_rows(&self) -> usize {
        let span = 2 * self.window - 1;
        span * span * span
    }
}

pub(super) fn plan(
    input_extent: usize,
    patch: usize,
    window: usize,
    depths: &[usize],
    dims: &[usize],
    heads: &[usize],
) -> Result<Plan> {
    if patch < 1 || window < 1 {
        return Err(NetError::Config("patch and window must be >= 1".into()));
    }
    if !input_extent.is_multiple_of(patch) {
        return Err(NetError::Geometry(format!(
            "input extent {input_extent} not divisible by patch {patch}"
        )));
    }
    if depths.is_empty() || depths.len() != dims.len() || depths.len() != heads.len() {
        return Err(NetError::Config("depths, dims and heads must have equal non-zero length".into()));
    }
    for (s, (&c, &h)) in dims.iter().zip(heads).enumerate() {
        if h == 0 || c % h != 0 {
            return Err(NetError::Config(format!("stage {s}: dim {c} not divisible by heads {h}")));
        }
    }
    let mut grid = input_extent / patch;
    let mut plan = Plan::new();
    plan.linear_tn("patch_embed", dims[0], patch * patch * patch);
    let bias_rows = (2 * window - 1) * (2 * window - 1) * (2 * window - 1);
    for (s, &depth) in depths.iter().enumerate() {
        if grid == 0 {
            return Err(NetError::Geometry(format!("token grid collapsed at stage {s}")));
        }
        let c = dims[s];
        for b in 0..depth {
            let prefix = format!("stage{}.block{}", s + 1, b + 1);
            plan.param(format!("{prefix}.norm1.gamma"), vec![c], Init::Ones);
            plan.param(format!("{prefix}.norm1.beta"), vec![c], Init::Zeros);
            // key bias is omitted: softmax is invariant to the constant
            // per-query shift it would produce
            plan.param(format!("{prefix}.attn.qkv.weight"), vec![3 * c, c], Init::TruncNormal { std: 0.02 });
            plan.param(format!("{prefix}.attn.q_bias"), vec![c], Init::Zeros);
            plan.param(format!("{prefix}.attn.v_bias"), vec![c], Init::Zeros);
            plan.linear_tn(&format!("{prefix}.attn.proj"), c, c);
            plan.param(format!("{prefix}.attn.rel_bias"), vec![bias_rows, heads[s]], Init::TruncNormal { std: 0.02 });
            plan.param(format!("{prefix}.norm2.gamma"), vec![c], Init::Ones);
            plan.param(format!("{prefix}.norm2.beta"), vec![c], Init::Zeros);
            plan.linear_tn(&format!("{prefix}.mlp.fc1"), MLP_RATIO * c, c);
            plan.linear_tn(&format!("{prefix}.mlp.fc2"), c, MLP_RATIO * c);
        }
        if s + 1 < depths.len() {
            plan.linear_tn(&format!("merge{}", s + 1), dims[s + 1], 8 * c);
            grid = grid.div_ceil(2);
        }
    }
    let c_last = *dims.last().unwrap();
    plan.param("final_norm.gamma".to_string(), vec![c_last], Init::Ones);
    plan.param("final_norm.beta".to_string(), vec![c_last], Init::Zeros);
    plan.linear("head", 1, c_last);
    Ok(plan)
}

/// Window multi-head self-attention with relative position bias and an
/// optional additive mask of shape `[nw, 1, w³, w³]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn window_attention<E: Element>(
    tape: &mut Tape<E>,
    wins: TensorId,
    qkv_w: TensorId,
    qkv_b: TensorId,
    proj_w: TensorId,
    proj_b: TensorId,
    bias_table: TensorId,
    rel: &RelPosIndex,
    heads: usize,
    batch_n: usize,
    mask: Option<TensorId>,
) -> crate::tensor::Result<TensorId> {
    let s = tape.shape(wins).to_vec();
    let (bw, tokens, c) = (s[0], s[1], s[2]);
    let hd = c / heads;
    let qkv = tape.linear(wins, qkv_w, qkv_b)?;
    let split = |tape: &mut Tape<E>, part: usize| -> crate::tensor::Result<TensorId> {
        let nar = tape.narrow(qkv, 2, part * c, c)?;
        let r = tape.reshape(nar, vec![bw, tokens, heads, hd])?;
        tape.permute(r, &[0, 2, 1, 3])
    };
    let q = split(tape, 0)?;
    let k = split(tape, 1)?;
    let v = split(tape, 2)?;
    let scale = E::from_f64(1.0 / (hd as f64).sqrt());
    let qs = tape.scale(q, scale)?;
    let mut attn = tape.bmm(qs, k, true)?; // [bw, heads, tokens, tokens]

    let bias_rows = tape.gather_rows(bias_table, &rel.indices)?; // [tokens², heads]
    let bias3 = tape.reshape(bias_rows, vec![tokens, tokens, heads])?;
    let bias = tape.permute(bias3, &[2, 0, 1])?; // [heads, tokens, tokens]
    attn = tape.add_bcast(attn, bias)?;

    if let Some(mask_id) = mask {
        let nw = bw / batch_n;
        let a5 = tape.reshape(attn, vec![batch_n, nw, heads, tokens, tokens])?;
        let masked = tape.add_bcast(a5, mask_id)?;
        attn = tape.reshape(masked, vec![bw, heads, tokens, tokens])?;
    }
    attn = tape.softmax(attn, 3)?;
    let out = tape.bmm(attn, v, false)?; // [bw, heads, tokens, hd]
    let merged = tape.permute(out, &[0, 2, 1, 3])?;
    let flat = tape.reshape(merged, vec![bw, tokens, c])?;
    tape.linear(flat, proj_w, proj_b)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn forward<E: Element>(
    tape: &mut Tape<E>,
    x: TensorId,
    ids: &BTreeMap<String, TensorId>,
    patch: &usize,
    window: &usize,
    depths: &[usize],
    dims: &[usize],
    heads: &[usize],
) -> Result<TensorId> {
    let (patch, window) = (*patch, *window);
    let xs = tape.shape(x).to_vec();
    let n = xs[0];
    let g0 = xs[2] / patch;
    let eps = E::from_f64(1e-5);
    let rel = RelPosIndex::new(window);

    // patch embedding: [N,1,D,H,W] -> [N, g, g, g, p³] -> linear
    let r = tape.reshape(x, vec![n, 1, g0, patch, g0, patch, g0, patch])?;
    let p = tape.permute(r, &[0, 2, 4, 6, 1, 3, 5, 7])?;
    let tokens = tape.reshape(p, vec![n, g0, g0, g0, patch * patch * patch])?;
    let mut h = tape.linear(tokens, ids["patch_embed.weight"], ids["patch_embed.bias"])?;

    let mut grid = g0;
    for (s, &depth) in depths.iter().enumerate() {
        let c = dims[s];
        let padded = grid.next_multiple_of(window);
        let pad = padded - grid;
        // per-shift masks, shared by the blocks of this stage
        let mut masks: [Option<TensorId>; 2] = [None, None];
        for b in 0..depth {
            let shift = if b % 2 == 1 { window / 2 } else { 0 };
            let needs_mask = shift > 0 || pad > 0;
            let mask = if needs_mask {
                let slot = usize::from(shift > 0);
                if masks[slot].is_none() {
                    let m = mask_with_pad::<E>((padded, padded, padded), (grid, grid, grid), window, shift)?;
                    masks[slot] = Some(tape.constant(m));
                }
                masks[slot]
            } else {
                None
            };
            let prefix = format!("stage{}.block{}", s + 1, b + 1);
            let shortcut = h;
            let mut t = tape.layernorm(h, ids[&format!("{prefix}.norm1.gamma")], ids[&format!("{prefix}.norm1.beta")], eps)?;
            if pad > 0 {
                t = tape.pad_zero(t, 1, 0, pad)?;
                t = tape.pad_zero(t, 2, 0, pad)?;
                t = tape.pad_zero(t, 3, 0, pad)?;
            }
            if shift > 0 {
                let sh = -(shift as isize);
                t = tape.roll(t, &[0, sh, sh, sh, 0])?;
            }
            let wins = window_partition(tape, t, window)?;
            let zero_k = tape.constant(Tensor::zeros(vec![c]));
            let qkv_bias = tape.concat(&[ids[&format!("{prefix}.attn.q_bias")], zero_k, ids[&format!("{prefix}.attn.v_bias")]], 0)?;
            let att = window_attention(
                tape,
                wins,
                ids[&format!("{prefix}.attn.qkv.weight")],
                qkv_bias,
                ids[&format!("{prefix}.attn.proj.weight")],
                ids[&format!("{prefix}.attn.proj.bias")],
                ids[&format!("{prefix}.attn.rel_bias")],
                &rel,
                heads[s],
                n,
                mask,
            )?;
            let mut back = window_unpartition(tape, att, window, n, (padded, padded, padded))?;
            if shift > 0 {
                let sh = shift as isize;
                back = tape.roll(back, &[0, sh, sh, sh, 0])?;
            }
            if pad > 0 {
                back = tape.narrow(back, 1, 0, grid)?;
                back = tape.narrow(back, 2, 0, grid)?;
                back = tape.narrow(back, 3, 0, grid)?;
            }
            h = tape.add(shortcut, back)?;

            let shortcut2 = h;
            let mut m = tape.layernorm(h, ids[&format!("{prefix}.norm2.gamma")], ids[&format!("{prefix}.norm2.beta")], eps)?;
            m = tape.linear(m, ids[&format!("{prefix}.mlp.fc1.weight")], ids[&format!("{prefix}.mlp.fc1.bias")])?;
            m = tape.gelu(m)?;
            m = tape.linear(m, ids[&format!("{prefix}.mlp.fc2.weight")], ids[&format!("{prefix}.mlp.fc2.bias")])?;
            h = tape.add(shortcut2, m)?;
        }
        if s + 1 < depths.len() {
            // patch merging: pad odd grids, gather 2³ neighborhoods, project
            let even = grid.next_multiple_of(2);
            if even != grid {
                h = tape.pad_zero(h, 1, 0, even - grid)?;
                h = tape.pad_zero(h, 2, 0, even - grid)?;
                h = tape.pad_zero(h, 3, 0, even - grid)?;
            }
            let half = even / 2;
            let r = tape.reshape(h, vec![n, half, 2, half, 2, half, 2, c])?;
            let p = tape.permute(r, &[0, 1, 3, 5, 2, 4, 6, 7])?;
            let gathered = tape.reshape(p, vec![n, half, half, half, 8 * c])?;
            h = tape.linear(gathered, ids[&format!("merge{}.weight", s + 1)], ids[&format!("merge{}.bias", s + 1)])?;
            grid = half;
        }
    }
    let c_last = *dims.last().unwrap();
    let normed = tape.layernorm(h, ids["final_norm.gamma"], ids["final_norm.beta"], eps)?;
    let flat = tape.reshape(normed, vec![n, grid * grid * grid, c_last])?;
    let pooled = tape.mean_axis(flat, 1)?;
    let out = tape.linear(pooled, ids["head.weight"], ids["head.bias"])?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{NetConfig, Network, Task};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    fn tiny() -> NetConfig {
        NetConfig::Swin3d {
            input_extent: 32,
            patch: 2,
            window: 4,
            depths: vec![2, 2],
            dims: vec![8, 16],
            heads: vec![1, 2],
            task: Task::Sex,
        }
    }

    #[test]
    fn tiny_forward_shape_contract() {
        let mut net = Network::<f32>::build(tiny(), 42).unwrap();
        let x = Tensor::full(vec![1, 1, 32, 32, 32], 0.3);
        let out = net.predict(x).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn window_partition_counts_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&mut rng, &[1, 4, 4, 4, 3]);
        let mut tape = Tape::<f64>::new();
        let xid = tape.leaf(x.clone(), false);
        let wins = window_partition(&mut tape, xid, 2).unwrap();
        assert_eq!(tape.shape(wins), &[8, 8, 3]);
        let back = window_unpartition(&mut tape, wins, 2, 1, (4, 4, 4)).unwrap();
        assert_eq!(tape.value(back).as_slice(), x.as_slice());
    }

    #[test]
    fn window_partition_token_placement() {
        // token (d,h,w)=(3,0,1) in a 4³ grid with w=2 lands in window
        // (1,0,0), slot (1,0,1)
        let mut marker = vec![0.0f64; 64];
        marker[(3 * 4 + 0) * 4 + 1] = 7.0;
        let x = Tensor::from_vec(vec![1, 4, 4, 4, 1], marker).unwrap();
        let mut tape = Tape::<f64>::new();
        let xid = tape.leaf(x, false);
        let wins = window_partition(&mut tape, xid, 2).unwrap();
        let win_idx = (1 * 2 + 0) * 2 + 0; // (1,0,0)
        let slot = (1 * 2 + 0) * 2 + 1; // (1,0,1)
        let v = tape.value(wins).as_slice()[(win_idx * 8 + slot) * 1];
        assert_eq!(v, 7.0);
    }

    #[test]
    fn zero_shift_mask_is_all_zero() {
        let m: Tensor<f64> = shifted_attention_mask((4, 4, 4), 2, 0).unwrap();
        assert!(m.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shifted_mask_blocks_wrapped_pairs() {
        // length-4 axes, w=2, shift 1: the wrapped window mixes pre-shift
        // coordinates 3 and 0 -> masked pair
        let m: Tensor<f64> = shifted_attention_mask((4, 4, 4), 2, 1).unwrap();
        // after roll(-1), rolled position (3,3,2) holds pre-shift (0,0,3)
        // and rolled (3,3,3) holds pre-shift (0,0,0): window (1,1,1)
        let win = (1 * 2 + 1) * 2 + 1;
        let slot_a = (1 * 2 + 1) * 2 + 0; // rolled (3,3,2)
        let slot_b = (1 * 2 + 1) * 2 + 1; // rolled (3,3,3)
        let wcube = 8;
        let v = m.as_slice()[(win * wcube + slot_a) * wcube + slot_b];
        assert!(v < -1e8, "cross-region pair must be masked, got {v}");
        // diagonal stays unmasked
        let diag = m.as_slice()[(win * wcube + slot_a) * wcube + slot_a];
        assert_eq!(diag, 0.0);
    }

    #[test]
    fn masked_attention_equals_per_region_attention_oracle() {
        // With q=k=v given directly, masked softmax must equal attention
        // restricted to each token's own pre-shift region.
        let grid = (2, 2, 4);
        let window = 2;
        let shift = 1;
        let mask: Tensor<f64> = shifted_attention_mask(grid, window, shift).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let wcube = 8;
        let nw = (2 / 2) * (2 / 2) * (4 / 2);
        let x = rand_t(&mut rng, &[nw, wcube, 4]);

        // tape path: softmax(x·xᵀ + mask)·x per window
        let mut tape = Tape::<f64>::new();
        let xid = tape.leaf(x.clone(), false);
        let attn = tape.bmm(xid, xid, true).unwrap();
        let a5 = tape.reshape(attn, vec![1, nw, 1, wcube, wcube]).unwrap();
        let mid = tape.constant(mask.clone());
        let masked = tape.add_bcast(a5, mid).unwrap();
        let flat = tape.reshape(masked, vec![nw, wcube, wcube]).unwrap();
        let sm = tape.softmax(flat, 2).unwrap();
        let got_id = tape.bmm(sm, xid, false).unwrap();
        let got = tape.value(got_id).as_slice().to_vec();

        // oracle: per token, softmax over same-region tokens only
        let md = mask.as_slice();
        let xd = x.as_slice();
        for win in 0..nw {
            for i in 0..wcube {
                let mut weights = vec![0.0f64; wcube];
                let mut denom = 0.0;
                for j in 0..wcube {
                    if md[(win * wcube + i) * wcube + j] == 0.0 {
                        let mut dot = 0.0;
                        for f in 0..4 {
                            dot += xd[(win * wcube + i) * 4 + f] * xd[(win * wcube + j) * 4 + f];
                        }
                        weights[j] = dot.exp();
                        denom += weights[j];
                    }
                }
                for f in 0..4 {
                    let mut acc = 0.0;
                    for j in 0..wcube {
                        acc += weights[j] / denom * xd[(win * wcube + j) * 4 + f];
                    }
                    let gotv = got[(win * wcube + i) * 4 + f];
                    assert!((gotv - acc).abs() < 1e-10, "win {win} token {i} feer {f}: {gotv} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn rel_pos_index_exhaustive_w2() {
        let rel = RelPosIndex::new(2);
        assert_eq!(rel.table_rows(), 27);
        let coord = |t: usize| (t / 4, (t / 2) % 2, t % 2);
        for i in 0..8 {
            for j in 0..8 {
                let (di, hi, wi) = coord(i);
                let (dj, hj, wj) = coord(j);
                let expect = ((di + 1 - dj) * 3 + (hi + 1 - hj)) * 3 + (wi + 1 - wj);
                assert_eq!(rel.indices[i * 8 + j] as usize, expect, "pair ({i},{j})");
            }
        }
        // all indices in range, extremes hit
        assert!(rel.indices.iter().all(|&v| (v as usize) < 27));
        assert!(rel.indices.contains(&0));
        assert!(rel.indices.contains(&26));
    }

    #[test]
    fn single_window_attention_equals_dense_attention_oracle() {
        // window covering the whole grid, zero shift: window MSA must equal
        // full MSA over all tokens, bias included.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tokens = 27; // 3³ window
        let c = 6;
        let heads = 2;
        let hd = c / heads;
        let rel = RelPosIndex::new(3);
        let x = rand_t(&mut rng, &[1, tokens, c]);
        let qkv_w = rand_t(&mut rng, &[3 * c, c]);
        let qkv_b = rand_t(&mut rng, &[3 * c]);
        let proj_w = rand_t(&mut rng, &[c, c]);
        let proj_b = rand_t(&mut rng, &[c]);
        let table = rand_t(&mut rng, &[rel.table_rows(), heads]);

        let mut tape = Tape::<f64>::new();
        let xid = tape.leaf(x.clone(), false);
        let ids: Vec<TensorId> = [&qkv_w, &qkv_b, &proj_w, &proj_b, &table]
            .iter()
            .map(|t| tape.leaf((*t).clone(), false))
            .collect();
        let got_id = window_attention(&mut tape, xid, ids[0], ids[1], ids[2], ids[3], ids[4], &rel, heads, 1, None).unwrap();
        let got = tape.value(got_id).as_slice().to_vec();

        // naive dense attention oracle
        let xd = x.as_slice();
        let mut qkv = vec![0.0f64; tokens * 3 * c];
        for t in 0..tokens {
            for o in 0..3 * c {
                let mut acc = qkv_b.as_slice()[o];
                for f in 0..c {
                    acc += xd[t * c + f] * qkv_w.as_slice()[o * c + f];
                }
                qkv[t * 3 * c + o] = acc;
            }
        }
        let scale = 1.0 / (hd as f64).sqrt();
        let mut ctx = vec![0.0f64; tokens * c];
        for h in 0..heads {
            for i in 0..tokens {
                let mut scores = vec![0.0f64; tokens];
                let mut denom = 0.0;
                let mut maxs = f64::NEG_INFINITY;
                for j in 0..tokens {
                    let mut dot = 0.0;
                    for f in 0..hd {
                        let qi = qkv[i * 3 * c + h * hd + f];
                        let kj = qkv[j * 3 * c + c + h * hd + f];
                        dot += qi * kj;
                    }
                    let bias = table.as_slice()[rel.indices[i * tokens + j] as usize * heads + h];
                    scores[j] = dot * scale + bias;
                    maxs = maxs.max(scores[j]);
                }
                for j in 0..tokens {
                    scores[j] = (scores[j] - maxs).exp();
                    denom += scores[j];
                }
                for f in 0..hd {
                    let mut acc = 0.0;
                    for j in 0..tokens {
                        acc += scores[j] / denom * qkv[j * 3 * c + 2 * c + h * hd + f];
                    }
                    ctx[i * c + h * hd + f] = acc;
                }
            }
        }
        let mut expect = vec![0.0f64; tokens * c];
        for t in 0..tokens {
            for o in 0..c {
                let mut acc = proj_b.as_slice()[o];
                for f in 0..c {
                    acc += ctx[t * c + f] * proj_w.as_slice()[o * c + f];
                }
                expect[t * c + o] = acc;
            }
        }
        let max_diff = got.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_diff < 1e-5, "max diff {max_diff}");
    }

    #[test]
    fn non_divisible_grid_uses_padding_and_still_runs() {
        // input 24, patch 2 -> grid 12; window 5 pads to 15; merging pads
        // 12 -> 12 (even) then grid 6 -> window pads to 10
        let cfg = NetConfig::Swin3d {
            input_extent: 24,
            patch: 2,
            window: 5,
            depths: vec![2, 2],
            dims: vec![4, 8],
            heads: vec![1, 2],
            task: Task::Age,
        };
        let mut net = Network::<f32>::build(cfg, 7).unwrap();
        let x = Tensor::full(vec![1, 1, 24, 24, 24], 0.1);
        let out = net.predict(x).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].is_finite());
    }

    #[test]
    fn full_scale_config_builds() {
        let net = Network::<f32>::build(NetConfig::swin_full(Task::Sex), 0).unwrap();
        assert!(net.param_count() > 1_000_000);
    }
}
