use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::ops::{self, LnCache};
use super::{Block, EncoderConfig, EncoderParams};
use crate::corpus::{TokenSequence, PAD};
use crate::error::{CvibError, Result};
use crate::scalar::Scalar;

/// Padded batch of token sequences, stored row-major as `(batch · seq_len)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub seq_len: usize,
    pub aspect_spans: Vec<Range<usize>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(seqs: &[&TokenSequence], labels: &[usize]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(CvibError::Validation("empty batch".into()));
        }
        if seqs.len() != labels.len() {
            return Err(CvibError::Shape(format!(
                "{} sequences but {} labels",
                seqs.len(),
                labels.len()
            )));
        }
        let seq_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; seqs.len() * seq_len];
        for (b, seq) in seqs.iter().enumerate() {
            ids[b * seq_len..b * seq_len + seq.len()].copy_from_slice(&seq.ids);
        }
        Ok(Batch {
            ids,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            seq_len,
            aspect_spans: seqs.iter().map(|s| s.aspect_span.clone()).collect(),
            labels: labels.to_vec(),
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    fn rows(&self, b: usize) -> Range<usize> {
        b * self.seq_len..(b + 1) * self.seq_len
    }
}

/// Per-layer hidden states of one sequence, after masking when masks apply.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStates<F> {
    pub layers: Vec<Array2<F>>,
    /// Normalized last layer, the input to pooling.
    pub output: Array2<F>,
}

/// `concat(CLS state, mean of aspect states)` of the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalRep<F>(pub Array1<F>);

struct BlockCache<F> {
    ln_attn: LnCache<F>,
    attn_in: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
    ln_ffn: LnCache<F>,
    ffn_in: Array2<F>,
    pre_act: Array2<F>,
    act: Array2<F>,
    /// Block output before the mask is applied.
    unmasked: Array2<F>,
}

struct HeadCache<F> {
    final_ln: LnCache<F>,
    hidden: Array2<F>,
}

/// Output of a batched forward pass, optionally retaining what backward needs.
pub struct Forward<F> {
    /// Masked outputs of every layer, `(batch · seq_len, d)`.
    pub states: Vec<Array2<F>>,
    /// Last layer after the final normalization.
    pub output: Array2<F>,
    pub rep: Array2<F>,
    pub logits: Array2<F>,
    masks: Option<Vec<Array2<F>>>,
    cache: Option<(Vec<BlockCache<F>>, HeadCache<F>)>,
}

impl<F: Scalar> Forward<F> {
    pub fn probs(&self) -> Array2<F> {
        ops::softmax_rows(&self.logits.view())
    }

    pub fn log_probs(&self) -> Array2<F> {
        ops::log_softmax_rows(&self.logits.view())
    }
}

/// Gradients of one backward pass: parameter gradients plus the gradient
/// with respect to each layer's mask, `(batch, d)` per layer.
pub struct NetworkGrads<F> {
    pub params: EncoderParams<F>,
    pub masks: Option<Vec<Array2<F>>>,
}

fn check_batch<F: Scalar>(cfg: &EncoderConfig, batch: &Batch, masks: Option<&[Array2<F>]>) -> Result<()> {
    if batch.seq_len > cfg.max_len {
        return Err(CvibError::Validation(format!(
            "sequence length {} exceeds max_len {}",
            batch.seq_len, cfg.max_len
        )));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(CvibError::Validation(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    for (b, span) in batch.aspect_spans.iter().enumerate() {
        if span.is_empty() || span.end > batch.lengths[b] {
            return Err(CvibError::Validation(format!(
                "aspect span {span:?} invalid for sequence of length {}",
                batch.lengths[b]
            )));
        }
    }
    if let Some(m) = masks {
        if m.len() != cfg.n_layers
            || m.iter().any(|z| z.dim() != (batch.size(), cfg.hidden_dim))
        {
            return Err(CvibError::Shape(format!(
                "expected {} masks of shape ({}, {})",
                cfg.n_layers,
                batch.size(),
                cfg.hidden_dim
            )));
        }
    }
    Ok(())
}

fn embed<F: Scalar>(params: &EncoderParams<F>, batch: &Batch) -> Array2<F> {
    let d = params.token_emb.ncols();
    let mut x = Array2::zeros((batch.ids.len(), d));
    for (r, mut row) in x.rows_mut().into_iter().enumerate() {
        let t = r % batch.seq_len;
        row.assign(&params.token_emb.row(batch.ids[r]));
        row += &params.pos_emb.row(t);
    }
    x
}

fn block_forward<F: Scalar>(
    block: &Block<F>,
    cfg: &EncoderConfig,
    batch: &Batch,
    x: &ArrayView2<F>,
) -> (Array2<F>, BlockCache<F>) {
    let (attn_in, ln_attn) = ops::layer_norm(x, &block.ln_attn);
    let q = ops::linear(&attn_in.view(), &block.query);
    let k = ops::linear(&attn_in.view(), &block.key);
    let v = ops::linear(&attn_in.view(), &block.value);
    let dh = cfg.head_dim();
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut ctx = Array2::zeros(q.dim());
    let mut probs = Vec::with_capacity(batch.size() * cfg.n_heads);
    for b in 0..batch.size() {
        let rows = batch.rows(b);
        let len = batch.lengths[b];
        for h in 0..cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![rows.clone(), cols.clone()]);
            let kh = k.slice(s![rows.clone(), cols.clone()]);
            let vh = v.slice(s![rows.clone(), cols.clone()]);
            let mut scores = qh.dot(&kh.t()) * scale;
            scores
                .slice_mut(s![.., len..])
                .fill(F::neg_infinity());
            let p = ops::softmax_rows(&scores.view());
            ctx.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vh));
            probs.push(p);
        }
    }
    let mut hidden = ops::linear(&ctx.view(), &block.attn_out);
    hidden += x;
    let (ffn_in, ln_ffn) = ops::layer_norm(&hidden.view(), &block.ln_ffn);
    let pre_act = ops::linear(&ffn_in.view(), &block.ffn_in);
    let act = pre_act.mapv(ops::gelu);
    let mut out = ops::linear(&act.view(), &block.ffn_out);
    out += &hidden;
    let cache = BlockCache {
        ln_attn,
        attn_in,
        q,
        k,
        v,
        probs,
        ctx,
        ln_ffn,
        ffn_in,
        pre_act,
        act,
        unmasked: out.clone(),
    };
    (out, cache)
}

/// Runs the encoder and head on a batch. `masks`, when given, hold one
/// `(batch, d)` matrix per layer that multiplies that layer's output before
/// the next layer (or the head) consumes it.
pub fn forward<F: Scalar>(
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    batch: &Batch,
    masks: Option<&[Array2<F>]>,
    keep_cache: bool,
) -> Result<Forward<F>> {
    check_batch(cfg, batch, masks)?;
    let mut x = embed(params, batch);
    let mut states = Vec::with_capacity(cfg.n_layers);
    let mut caches = Vec::with_capacity(cfg.n_layers);
    for (l, block) in params.blocks.iter().enumerate() {
        let (mut out, cache) = block_forward(block, cfg, batch, &x.view());
        if let Some(m) = masks {
            for b in 0..batch.size() {
                let z = m[l].row(b);
                out.slice_mut(s![batch.rows(b), ..])
                    .axis_iter_mut(Axis(0))
                    .for_each(|mut row| row *= &z);
            }
        }
        if keep_cache {
            caches.push(cache);
        }
        states.push(out.clone());
        x = out;
    }
    let (output, final_ln) = ops::layer_norm(&x.view(), &params.final_norm);
    let rep = pool_rows(&output, batch, cfg.hidden_dim);
    let hidden = ops::linear(&rep.view(), &params.head.hidden).mapv(|v| v.tanh());
    let logits = ops::linear(&hidden.view(), &params.head.out);
    Ok(Forward {
        states,
        output,
        rep,
        logits,
        masks: if keep_cache { masks.map(|m| m.to_vec()) } else { None },
        cache: keep_cache.then(|| (caches, HeadCache { final_ln, hidden })),
    })
}

fn pool_rows<F: Scalar>(last: &Array2<F>, batch: &Batch, d: usize) -> Array2<F> {
    let mut rep = Array2::zeros((batch.size(), 2 * d));
    for b in 0..batch.size() {
        let base = b * batch.seq_len;
        rep.slice_mut(s![b, ..d]).assign(&last.row(base));
        let span = &batch.aspect_spans[b];
        let rows = last.slice(s![base + span.start..base + span.end, ..]);
        let mean = rows.sum_axis(Axis(0)) / F::of(span.len() as f64);
        rep.slice_mut(s![b, d..]).assign(&mean);
    }
    rep
}

fn block_backward<F: Scalar>(
    block: &Block<F>,
    grad: &mut Block<F>,
    cfg: &EncoderConfig,
    batch: &Batch,
    cache: &BlockCache<F>,
    dout: Array2<F>,
) -> Array2<F> {
    // feed-forward sublayer
    let dact = ops::linear_backward(&cache.act.view(), &dout.view(), &block.ffn_out, &mut grad.ffn_out);
    let mut dpre = dact;
    ndarray::Zip::from(&mut dpre)
        .and(&cache.pre_act)
        .for_each(|g, &u| *g *= ops::gelu_grad(u));
    let dffn_in = ops::linear_backward(&cache.ffn_in.view(), &dpre.view(), &block.ffn_in, &mut grad.ffn_in);
    let mut dhidden = ops::layer_norm_backward(&dffn_in.view(), &cache.ln_ffn, &block.ln_ffn, &mut grad.ln_ffn);
    dhidden += &dout;

    // attention sublayer
    let dctx = ops::linear_backward(&cache.ctx.view(), &dhidden.view(), &block.attn_out, &mut grad.attn_out);
    let dh = cfg.head_dim();
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for b in 0..batch.size() {
        let rows = batch.rows(b);
        for h in 0..cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &cache.probs[b * cfg.n_heads + h];
            let qh = cache.q.slice(s![rows.clone(), cols.clone()]);
            let kh = cache.k.slice(s![rows.clone(), cols.clone()]);
            let vh = cache.v.slice(s![rows.clone(), cols.clone()]);
            let dch = dctx.slice(s![rows.clone(), cols.clone()]);
            let dp = dch.dot(&vh.t());
            dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&dch));
            let mut ds = dp;
            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let inner = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<F>();
                ndarray::Zip::from(&mut drow)
                    .and(&prow)
                    .for_each(|g, &pv| *g = pv * (*g - inner) * scale);
            }
            dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
            dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
        }
    }
    let a = cache.attn_in.view();
    let mut dattn_in = ops::linear_backward(&a, &dq.view(), &block.query, &mut grad.query);
    dattn_in += &ops::linear_backward(&a, &dk.view(), &block.key, &mut grad.key);
    dattn_in += &ops::linear_backward(&a, &dv.view(), &block.value, &mut grad.value);
    let mut dx = ops::layer_norm_backward(&dattn_in.view(), &cache.ln_attn, &block.ln_attn, &mut grad.ln_attn);
    dx += &dhidden;
    dx
}

/// Reverse pass. `dlogits` is the loss gradient with respect to the logits,
/// `drep` an extra gradient arriving directly at the final representation
/// (the contrastive term). Either may be absent.
pub fn backward<F: Scalar>(
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    batch: &Batch,
    fwd: &Forward<F>,
    dlogits: Option<&Array2<F>>,
    drep: Option<&Array2<F>>,
) -> NetworkGrads<F> {
    let (caches, head_cache) = fwd
        .cache
        .as_ref()
        .expect("backward requires a forward pass with keep_cache");
    let mut grads = params.zeros_like();
    let d = cfg.hidden_dim;
    let mut drep_total = match drep {
        Some(g) => g.clone(),
        None => Array2::zeros(fwd.rep.dim()),
    };
    if let Some(dl) = dlogits {
        let dhidden = ops::linear_backward(&head_cache.hidden.view(), &dl.view(), &params.head.out, &mut grads.head.out);
        let mut dpre = dhidden;
        ndarray::Zip::from(&mut dpre)
            .and(&head_cache.hidden)
            .for_each(|g, &h| *g *= F::one() - h * h);
        drep_total += &ops::linear_backward(&fwd.rep.view(), &dpre.view(), &params.head.hidden, &mut grads.head.hidden);
    }

    let mut dstate = Array2::zeros((batch.ids.len(), d));
    for b in 0..batch.size() {
        let base = b * batch.seq_len;
        let mut cls = dstate.row_mut(base);
        cls += &drep_total.slice(s![b, ..d]);
        let span = &batch.aspect_spans[b];
        let share = drep_total.slice(s![b, d..]).to_owned() / F::of(span.len() as f64);
        for r in base + span.start..base + span.end {
            let mut row = dstate.row_mut(r);
            row += &share;
        }
    }

    let mut dstate = ops::layer_norm_backward(&dstate.view(), &head_cache.final_ln, &params.final_norm, &mut grads.final_norm);

    let mut dmasks = fwd.masks.as_ref().map(|m| vec![Array2::zeros((batch.size(), d)); m.len()]);
    for l in (0..cfg.n_layers).rev() {
        let cache = &caches[l];
        if let (Some(masks), Some(dm)) = (fwd.masks.as_ref(), dmasks.as_mut()) {
            for b in 0..batch.size() {
                let rows = batch.rows(b);
                let g = (&dstate.slice(s![rows.clone(), ..]) * &cache.unmasked.slice(s![rows.clone(), ..]))
                    .sum_axis(Axis(0));
                dm[l].row_mut(b).assign(&g);
                let z = masks[l].row(b);
                dstate
                    .slice_mut(s![rows, ..])
                    .axis_iter_mut(Axis(0))
                    .for_each(|mut row| row *= &z);
            }
        }
        dstate = block_backward(&params.blocks[l], &mut grads.blocks[l], cfg, batch, cache, dstate);
    }

    for (r, row) in dstate.rows().into_iter().enumerate() {
        let mut tok = grads.token_emb.row_mut(batch.ids[r]);
        tok += &row;
        let mut pos = grads.pos_emb.row_mut(r % batch.seq_len);
        pos += &row;
    }
    NetworkGrads {
        params: grads,
        masks: dmasks,
    }
}

/// Layer states of a single sequence; `masks` holds one length-`d` vector per layer.
pub fn encode<F: Scalar>(
    tokens: &TokenSequence,
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    masks: Option<&[Array1<F>]>,
) -> Result<LayerStates<F>> {
    let batch = Batch::new(&[tokens], &[0])?;
    let masks: Option<Vec<Array2<F>>> = masks.map(|m| {
        m.iter()
            .map(|z| z.clone().insert_axis(Axis(0)))
            .collect()
    });
    let fwd = forward(params, cfg, &batch, masks.as_deref(), false)?;
    Ok(LayerStates {
        layers: fwd.states,
        output: fwd.output,
    })
}

/// Final representation from layer states: the CLS row concatenated with the
/// mean of the normalized last layer over `aspect_span`.
pub fn pool_final<F: Scalar>(states: &LayerStates<F>, aspect_span: Range<usize>) -> Result<FinalRep<F>> {
    if states.layers.is_empty() {
        return Err(CvibError::Validation("no layer states".into()));
    }
    let last = &states.output;
    if aspect_span.is_empty() {
        return Err(CvibError::Validation("empty aspect span".into()));
    }
    if aspect_span.end > last.nrows() {
        return Err(CvibError::Validation(format!(
            "aspect span {aspect_span:?} beyond sequence of length {}",
            last.nrows()
        )));
    }
    let d = last.ncols();
    let batch = Batch {
        ids: vec![0; last.nrows()],
        lengths: vec![last.nrows()],
        seq_len: last.nrows(),
        aspect_spans: vec![aspect_span],
        labels: vec![0],
    };
    Ok(FinalRep(pool_rows(last, &batch, d).row(0).to_owned()))
}

/// Class distribution `softmax(W_o · tanh(W_h · rep + b_h) + b_o)`.
pub fn classify<F: Scalar>(rep: &FinalRep<F>, params: &EncoderParams<F>) -> Result<Array1<F>> {
    if rep.0.iter().any(|v| !v.is_finite()) {
        return Err(CvibError::NonFinite("final representation".into()));
    }
    if rep.0.len() != params.head.hidden.w.nrows() {
        return Err(CvibError::Shape(format!(
            "representation of dimension {} for head expecting {}",
            rep.0.len(),
            params.head.hidden.w.nrows()
        )));
    }
    let x = rep.0.view().insert_axis(Axis(0));
    let hidden = ops::linear(&x, &params.head.hidden).mapv(|v| v.tanh());
    let logits = ops::linear(&hidden.view(), &params.head.out);
    Ok(ops::softmax_rows(&logits.view()).row(0).to_owned())
}
