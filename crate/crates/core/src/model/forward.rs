//! Forward pass, loss and exact backward pass.
//!
//! The input is `[image-unit prefix] ++ [BOS] ++ target`. Prefix positions
//! attend to each other bidirectionally and never to the output segment;
//! output positions attend to the whole prefix and causally to earlier
//! output positions. The loss is the mean negative log-likelihood of the
//! next token at every output position, the last of which predicts EOS.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::Specials;
use super::params::{ModelParams, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::units::UnitSequence;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// One training pair: a flattened image-unit grid and its target sequence.
/// Trailing PAD ids in `target` are dropped and contribute no loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub grid: Vec<u32>,
    pub target: Vec<u32>,
}

impl Example {
    pub fn new(grid: &UnitSequence, target: &UnitSequence) -> Self {
        Example {
            grid: grid.tokens().to_vec(),
            target: target.tokens().to_vec(),
        }
    }
}

/// Validates an example and returns its target with trailing PAD removed.
pub(crate) fn checked_target<'a>(p: &ModelParams, grid: &[u32], target: &'a [u32]) -> Result<&'a [u32]> {
    let cfg = &p.config;
    if grid.len() != cfg.max_image_tokens() {
        return Err(Error::DimensionMismatch {
            expected: cfg.max_image_tokens(),
            found: grid.len(),
        });
    }
    if let Some(&bad) = grid.iter().find(|&&t| t as usize >= cfg.image_vocab) {
        return Err(Error::OutOfRange {
            what: "image unit",
            value: bad.into(),
            limit: cfg.image_vocab as u64,
        });
    }
    let pad = Specials::for_base(p.base_vocab()).pad;
    let end = target.iter().rposition(|&t| t != pad).map_or(0, |i| i + 1);
    let target = &target[..end];
    if target.len() > cfg.max_unit_len {
        return Err(Error::invalid(format!(
            "target length {} exceeds max_unit_len {}",
            target.len(),
            cfg.max_unit_len
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= p.base_vocab()) {
        return Err(Error::OutOfRange {
            what: "target token",
            value: bad.into(),
            limit: p.base_vocab() as u64,
        });
    }
    Ok(target)
}

struct LnCache {
    xhat: Tensor,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, LnCache) {
    let mean = x.mean_axis(Axis(1)).expect("nonempty rows");
    let centered = x - &mean.insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).expect("nonempty rows");
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * inv_std.view().insert_axis(Axis(1));
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Tensor,
    cache: &LnCache,
    gain: &Tensor,
    dgain: &mut Tensor,
    dbias: &mut Tensor,
) -> Tensor {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let d = dy.ncols() as f64;
    let dxhat = dy * gain;
    let sum_dxhat = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
    let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
    let dx = dxhat * d - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat;
    dx * cache.inv_std.view().insert_axis(Axis(1)) / d
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Whether query position `i` may attend to key position `j`.
fn allowed(i: usize, j: usize, prefix: usize) -> bool {
    j < prefix || (i >= prefix && j <= i)
}

fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rate: f64) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn((rows, cols), || if rng.gen::<f64>() < rate { 0.0 } else { keep })
}

struct BlockCache {
    ln1: LnCache,
    a: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    ctx: Tensor,
    attn_mask: Option<Tensor>,
    ln2: LnCache,
    b: Tensor,
    ff_pre: Tensor,
    ff_act: Tensor,
    ff_mask: Option<Tensor>,
}

/// Activations of one example, kept for the backward pass.
pub(crate) struct Trace {
    prefix: usize,
    grid: Vec<u32>,
    /// BOS followed by the target.
    inputs: Vec<u32>,
    /// The target followed by EOS.
    labels: Vec<u32>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    final_out: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
    pub nll: Vec<f64>,
}

/// Runs the network on one example. `target` must already be validated.
pub(crate) fn run(p: &ModelParams, grid: &[u32], target: &[u32], mut dropout: Option<&mut ChaCha8Rng>) -> Trace {
    let cfg = &p.config;
    let t = &p.tensors;
    let specials = Specials::for_base(p.base_vocab());
    let d = cfg.d_model;
    let prefix = grid.len();
    let mut inputs = Vec::with_capacity(target.len() + 1);
    inputs.push(specials.bos);
    inputs.extend_from_slice(target);
    let mut labels = target.to_vec();
    labels.push(specials.eos);
    let len = prefix + inputs.len();

    let mut x = Array2::<f64>::zeros((len, d));
    for (i, &tok) in grid.iter().enumerate() {
        let mut row = x.row_mut(i);
        row += &t.image_embed.row(tok as usize);
        row += &t.grid_row_pos.row(i / cfg.grid_w);
        row += &t.grid_col_pos.row(i % cfg.grid_w);
    }
    for (j, &tok) in inputs.iter().enumerate() {
        let mut row = x.row_mut(prefix + j);
        row += &t.token_embed.row(tok as usize);
        row += &t.out_pos.row(j);
    }

    let rate = cfg.dropout;
    let n_heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for bp in &t.blocks {
        let (a, ln1) = layer_norm(&x, &bp.ln1_gain, &bp.ln1_bias);
        let q = a.dot(&bp.w_q) + &bp.b_q;
        let k = a.dot(&bp.w_k) + &bp.b_k;
        let v = a.dot(&bp.w_v) + &bp.b_v;
        let mut ctx = Array2::<f64>::zeros((len, d));
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                let mut max = f64::NEG_INFINITY;
                for (j, s) in row.iter().enumerate() {
                    if allowed(i, j, prefix) && *s > max {
                        max = *s;
                    }
                }
                let mut sum = 0.0;
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if allowed(i, j, prefix) { (*s - max).exp() } else { 0.0 };
                    sum += *s;
                }
                row /= sum;
            }
            ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let mut attn_out = ctx.dot(&bp.w_o) + &bp.b_o;
        let attn_mask = match (rate > 0.0, dropout.as_deref_mut()) {
            (true, Some(rng)) => Some(dropout_mask(rng, len, d, rate)),
            _ => None,
        };
        if let Some(m) = &attn_mask {
            attn_out *= m;
        }
        x += &attn_out;

        let (b, ln2) = layer_norm(&x, &bp.ln2_gain, &bp.ln2_bias);
        let ff_pre = b.dot(&bp.w_ff1) + &bp.b_ff1;
        let ff_act = ff_pre.mapv(gelu);
        let mut ff_out = ff_act.dot(&bp.w_ff2) + &bp.b_ff2;
        let ff_mask = match (rate > 0.0, dropout.as_deref_mut()) {
            (true, Some(rng)) => Some(dropout_mask(rng, len, d, rate)),
            _ => None,
        };
        if let Some(m) = &ff_mask {
            ff_out *= m;
        }
        x += &ff_out;

        blocks.push(BlockCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            attn_mask,
            ln2,
            b,
            ff_pre,
            ff_act,
            ff_mask,
        });
    }

    let out_rows = x.slice(s![prefix.., ..]).to_owned();
    let (final_out, final_ln) = layer_norm(&out_rows, &t.final_gain, &t.final_bias);
    let logits = final_out.dot(&t.head_w) + &t.head_b;
    let mut probs = logits.clone();
    let mut nll = Vec::with_capacity(labels.len());
    for (mut row, &label) in probs.rows_mut().into_iter().zip(&labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
        nll.push(-(row[label as usize].ln()));
    }

    Trace {
        prefix,
        grid: grid.to_vec(),
        inputs,
        labels,
        blocks,
        final_ln,
        final_out,
        logits,
        probs,
        nll,
    }
}

/// Adds `weight · d(sum of this example's NLL)/dθ` into `grads`.
pub(crate) fn backward_into(p: &ModelParams, tr: &Trace, weight: f64, grads: &mut ParamSet) {
    let cfg = &p.config;
    let t = &p.tensors;
    let d = cfg.d_model;
    let prefix = tr.prefix;
    let len = prefix + tr.inputs.len();
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut dlogits = tr.probs.clone();
    for (i, &label) in tr.labels.iter().enumerate() {
        dlogits[[i, label as usize]] -= 1.0;
    }
    dlogits *= weight;

    grads.head_w += &tr.final_out.t().dot(&dlogits);
    grads.head_b += &dlogits.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dfinal = dlogits.dot(&t.head_w.t());
    let dout_rows = layer_norm_backward(
        &dfinal,
        &tr.final_ln,
        &t.final_gain,
        &mut grads.final_gain,
        &mut grads.final_bias,
    );
    let mut dx = Array2::<f64>::zeros((len, d));
    dx.slice_mut(s![prefix.., ..]).assign(&dout_rows);

    for (li, (bp, cache)) in t.blocks.iter().zip(&tr.blocks).enumerate().rev() {
        let g = &mut grads.blocks[li];

        // feed-forward branch
        let mut dff_out = dx.clone();
        if let Some(m) = &cache.ff_mask {
            dff_out *= m;
        }
        g.w_ff2 += &cache.ff_act.t().dot(&dff_out);
        g.b_ff2 += &dff_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut dpre = dff_out.dot(&bp.w_ff2.t());
        dpre.zip_mut_with(&cache.ff_pre, |g, &x| *g *= gelu_grad(x));
        g.w_ff1 += &cache.b.t().dot(&dpre);
        g.b_ff1 += &dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
        let db = dpre.dot(&bp.w_ff1.t());
        dx += &layer_norm_backward(&db, &cache.ln2, &bp.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);

        // attention branch
        let mut dattn = dx.clone();
        if let Some(m) = &cache.attn_mask {
            dattn *= m;
        }
        g.w_o += &cache.ctx.t().dot(&dattn);
        g.b_o += &dattn.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dctx = dattn.dot(&bp.w_o.t());
        let mut dq = Array2::<f64>::zeros((len, d));
        let mut dk = Array2::<f64>::zeros((len, d));
        let mut dv = Array2::<f64>::zeros((len, d));
        for (h, probs) in cache.probs.iter().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let dctx_h = dctx.slice(cols);
            let dprobs = dctx_h.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
            let row_dot = (&dprobs * probs).sum_axis(Axis(1)).insert_axis(Axis(1));
            let dscores = probs * &(dprobs - &row_dot) * scale;
            dq.slice_mut(cols).assign(&dscores.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&dscores.t().dot(&cache.q.slice(cols)));
        }
        let at = cache.a.t();
        g.w_q += &at.dot(&dq);
        g.w_k += &at.dot(&dk);
        g.w_v += &at.dot(&dv);
        g.b_q += &dq.sum_axis(Axis(0)).insert_axis(Axis(0));
        g.b_k += &dk.sum_axis(Axis(0)).insert_axis(Axis(0));
        g.b_v += &dv.sum_axis(Axis(0)).insert_axis(Axis(0));
        let da = dq.dot(&bp.w_q.t()) + dk.dot(&bp.w_k.t()) + dv.dot(&bp.w_v.t());
        dx += &layer_norm_backward(&da, &cache.ln1, &bp.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    }

    for (i, &tok) in tr.grid.iter().enumerate() {
        let row = dx.row(i);
        let mut e = grads.image_embed.row_mut(tok as usize);
        e += &row;
        let mut r = grads.grid_row_pos.row_mut(i / cfg.grid_w);
        r += &row;
        let mut c = grads.grid_col_pos.row_mut(i % cfg.grid_w);
        c += &row;
    }
    for (j, &tok) in tr.inputs.iter().enumerate() {
        let row = dx.row(prefix + j);
        let mut e = grads.token_embed.row_mut(tok as usize);
        e += &row;
        let mut pos = grads.out_pos.row_mut(j);
        pos += &row;
    }
}

/// Mean per-position loss of one example and its logits (one row per
/// output position: BOS, then each target token).
pub fn forward_loss(p: &ModelParams, grid: &UnitSequence, target: &UnitSequence) -> Result<(f64, Tensor)> {
    let target = checked_target(p, grid.tokens(), target.tokens())?;
    let tr = run(p, grid.tokens(), target, None);
    let loss = tr.nll.iter().sum::<f64>() / tr.nll.len() as f64;
    Ok((loss, tr.logits))
}

/// Loss averaged over every output position in the batch.
pub fn batch_loss(p: &ModelParams, batch: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in batch {
        let target = checked_target(p, &ex.grid, &ex.target)?;
        let tr = run(p, &ex.grid, target, None);
        total += tr.nll.iter().sum::<f64>();
        count += tr.nll.len();
    }
    if count == 0 {
        return Err(Error::invalid("empty batch"));
    }
    Ok(total / count as f64)
}

/// Batch loss and its exact gradient. Frozen tensors get zero gradient.
pub fn loss_and_grads(p: &ModelParams, batch: &[Example]) -> Result<(f64, ParamSet)> {
    loss_and_grads_impl(p, batch, None)
}

pub(crate) fn loss_and_grads_impl(
    p: &ModelParams,
    batch: &[Example],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, ParamSet)> {
    let targets = batch
        .iter()
        .map(|ex| checked_target(p, &ex.grid, &ex.target))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = targets.iter().map(|t| t.len() + 1).sum();
    if count == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let weight = 1.0 / count as f64;
    let mut grads = p.tensors.zeros_like();
    let mut total = 0.0;
    for (ex, target) in batch.iter().zip(targets) {
        let tr = run(p, &ex.grid, target, dropout.as_deref_mut());
        total += tr.nll.iter().sum::<f64>();
        backward_into(p, &tr, weight, &mut grads);
    }
    for (name, g) in grads.named_mut() {
        if !p.is_trainable(&name) {
            g.fill(0.0);
        }
    }
    Ok((total / count as f64, grads))
}

/// Fraction of output positions (EOS included) whose argmax prediction under
/// teacher forcing equals the true next token.
pub fn teacher_forced_accuracy(p: &ModelParams, batch: &[Example]) -> Result<f64> {
    let mut hits = 0usize;
    let mut count = 0usize;
    for ex in batch {
        let target = checked_target(p, &ex.grid, &ex.target)?;
        let tr = run(p, &ex.grid, target, None);
        for (row, &label) in tr.logits.rows().into_iter().zip(&tr.labels) {
            if argmax(row.iter().copied()) == label as usize {
                hits += 1;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("empty batch"));
    }
    Ok(hits as f64 / count as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Log-probabilities of the token following BOS + `prefix`.
pub fn next_token_log_probs(p: &ModelParams, grid: &[u32], prefix: &[u32]) -> Result<Array1<f64>> {
    let prefix = checked_target(p, grid, prefix)?;
    let tr = run(p, grid, prefix, None);
    let last = tr.probs.row(tr.probs.nrows() - 1);
    Ok(last.mapv(f64::ln))
}
