//! Toy vision–language model: an image tower, a text tower, a bilinear
//! matching head and a fusion head for masked-token prediction.
//!
//! Both towers end in L2 normalization, so embeddings live on the unit sphere
//! and in-batch similarities are cosines. The training objective is the sum
//! of three losses:
//!
//! * ITC: symmetric InfoNCE over in-batch image→text and text→image logits
//!   `cos / temperature`, with label-smoothed targets.
//! * ITM: binary cross-entropy of the matching head on each positive pair and
//!   on the hardest in-batch negative in both directions.
//! * MLM: cross-entropy of masked token predictions, conditioned on the paired
//!   image embedding and a mean-pooled summary of the unmasked tokens.
//!
//! All gradients are analytic. Reductions iterate in batch order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, sigmoid, softplus, Matrix};
use crate::optim::ParamSet;
use crate::synthworld::{Pair, SemanticUniverse};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_img: usize,
    pub d_emb: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub k_text: usize,
    pub temperature: f64,
    pub label_smoothing: f64,
}

impl ModelConfig {
    pub fn for_world(u: &SemanticUniverse, d_emb: usize, hidden: usize) -> Self {
        ModelConfig {
            d_img: u.config.d_img,
            d_emb,
            hidden,
            vocab: u.config.vocab,
            k_text: u.config.k_text,
            temperature: 0.07,
            label_smoothing: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_img, self.d_emb, self.hidden, self.vocab, self.k_text];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("model.temperature must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("model.label_smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub img_w1: Matrix,
    pub img_b1: Matrix,
    pub img_w2: Matrix,
    pub img_b2: Matrix,
    pub tok_emb: Matrix,
    pub txt_w1: Matrix,
    pub txt_b1: Matrix,
    pub txt_w2: Matrix,
    pub txt_b2: Matrix,
    pub itm_bilinear: Matrix,
    pub itm_w_img: Matrix,
    pub itm_w_txt: Matrix,
    pub itm_bias: Matrix,
    pub fus_w1: Matrix,
    pub fus_b1: Matrix,
    pub fus_w2: Matrix,
    pub fus_b2: Matrix,
}

impl ParamSet for ModelParams {
    fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("img_w1", &self.img_w1),
            ("img_b1", &self.img_b1),
            ("img_w2", &self.img_w2),
            ("img_b2", &self.img_b2),
            ("tok_emb", &self.tok_emb),
            ("txt_w1", &self.txt_w1),
            ("txt_b1", &self.txt_b1),
            ("txt_w2", &self.txt_w2),
            ("txt_b2", &self.txt_b2),
            ("itm_bilinear", &self.itm_bilinear),
            ("itm_w_img", &self.itm_w_img),
            ("itm_w_txt", &self.itm_w_txt),
            ("itm_bias", &self.itm_bias),
            ("fus_w1", &self.fus_w1),
            ("fus_b1", &self.fus_b1),
            ("fus_w2", &self.fus_w2),
            ("fus_b2", &self.fus_b2),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("img_w1", &mut self.img_w1),
            ("img_b1", &mut self.img_b1),
            ("img_w2", &mut self.img_w2),
            ("img_b2", &mut self.img_b2),
            ("tok_emb", &mut self.tok_emb),
            ("txt_w1", &mut self.txt_w1),
            ("txt_b1", &mut self.txt_b1),
            ("txt_w2", &mut self.txt_w2),
            ("txt_b2", &mut self.txt_b2),
            ("itm_bilinear", &mut self.itm_bilinear),
            ("itm_w_img", &mut self.itm_w_img),
            ("itm_w_txt", &mut self.itm_w_txt),
            ("itm_bias", &mut self.itm_bias),
            ("fus_w1", &mut self.fus_w1),
            ("fus_b1", &mut self.fus_b1),
            ("fus_w2", &mut self.fus_w2),
            ("fus_b2", &mut self.fus_b2),
        ]
    }
}

impl ModelParams {
    /// Scaled Gaussian init (fan-in), zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let (d, h, e) = (cfg.d_img, cfg.hidden, cfg.d_emb);
        let out = cfg.k_text * cfg.vocab;
        ModelParams {
            img_w1: Matrix::randn(d, h, fan(d), rng),
            img_b1: Matrix::zeros(1, h),
            img_w2: Matrix::randn(h, e, fan(h), rng),
            img_b2: Matrix::zeros(1, e),
            tok_emb: Matrix::randn(cfg.vocab, e, 1.0, rng),
            txt_w1: Matrix::randn(e, h, fan(e), rng),
            txt_b1: Matrix::zeros(1, h),
            txt_w2: Matrix::randn(h, e, fan(h), rng),
            txt_b2: Matrix::zeros(1, e),
            itm_bilinear: Matrix::randn(e, e, fan(e), rng),
            itm_w_img: Matrix::zeros(1, e),
            itm_w_txt: Matrix::zeros(1, e),
            itm_bias: Matrix::zeros(1, 1),
            fus_w1: Matrix::randn(2 * e, h, fan(2 * e), rng),
            fus_b1: Matrix::zeros(1, h),
            fus_w2: Matrix::randn(h, out, fan(h), rng),
            fus_b2: Matrix::zeros(1, out),
        }
    }
}

/// Image features and token sequences of a batch of labeled pairs; row `i`
/// of `images` is paired with `tokens[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Matrix,
    pub tokens: Vec<Vec<u32>>,
}

impl Batch {
    pub fn from_pairs(u: &SemanticUniverse, pairs: &[Pair]) -> Self {
        let d = u.config.d_img;
        let mut images = Matrix::zeros(pairs.len(), d);
        for (r, p) in pairs.iter().enumerate() {
            images.row_mut(r).copy_from_slice(&u.images[p.image].feature);
        }
        Batch {
            images,
            tokens: pairs.iter().map(|p| u.texts[p.text].tokens.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Which token positions are hidden from the fusion head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPattern {
    pub p_mask: f64,
    pub masked: Vec<Vec<bool>>,
}

impl MaskPattern {
    pub fn sample<R: Rng + ?Sized>(batch: &Batch, p_mask: f64, rng: &mut R) -> Self {
        let masked = batch
            .tokens
            .iter()
            .map(|t| t.iter().map(|_| rng.gen::<f64>() < p_mask).collect())
            .collect();
        MaskPattern { p_mask, masked }
    }

    pub fn none(batch: &Batch) -> Self {
        MaskPattern {
            p_mask: 0.0,
            masked: batch.tokens.iter().map(|t| vec![false; t.len()]).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.masked.iter().flatten().filter(|&&m| m).count()
    }

    fn check(&self, batch: &Batch) -> Result<()> {
        let ok = self.masked.len() == batch.len()
            && self.masked.iter().zip(&batch.tokens).all(|(m, t)| m.len() == t.len());
        if ok {
            Ok(())
        } else {
            Err(Error::Contract("mask dimensions do not match the batch texts".into()))
        }
    }
}

/// Unit-norm image and text embeddings, one row per batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub img: Matrix,
    pub txt: Matrix,
}

impl Embeddings {
    /// `sim[i][j] = cos(img_i, txt_j)`.
    pub fn i2t(&self) -> Matrix {
        self.img.matmul_t(&self.txt)
    }
}

#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grads: ModelParams,
}

#[derive(Clone, Debug)]
pub struct VlpLoss {
    pub itc: f64,
    pub itm: f64,
    pub mlm: f64,
    pub total: f64,
    pub grads: ModelParams,
}

struct TowerCache {
    input: Matrix,
    hidden: Matrix,
    raw: Matrix,
    norms: Vec<f64>,
    out: Matrix,
}

fn tower_forward(input: Matrix, w1: &Matrix, b1: &Matrix, w2: &Matrix, b2: &Matrix) -> TowerCache {
    let mut z1 = input.matmul(w1);
    z1.add_row_vector(b1.as_slice());
    let hidden = z1.map(f64::tanh);
    let mut raw = hidden.matmul(w2);
    raw.add_row_vector(b2.as_slice());
    let mut out = raw.clone();
    let mut norms = Vec::with_capacity(raw.rows());
    for r in 0..raw.rows() {
        let n = dot(raw.row(r), raw.row(r)).sqrt().max(1e-12);
        norms.push(n);
        out.row_mut(r).iter_mut().for_each(|x| *x /= n);
    }
    TowerCache {
        input,
        hidden,
        raw,
        norms,
        out,
    }
}

/// Backprop `d_out` through normalization and the two layers; returns the
/// gradient w.r.t. the tower input.
fn tower_backward(
    c: &TowerCache,
    d_out: &Matrix,
    w1: &Matrix,
    w2: &Matrix,
    g: [&mut Matrix; 4],
) -> Matrix {
    let [gw1, gb1, gw2, gb2] = g;
    let mut d_raw = Matrix::zeros(c.raw.rows(), c.raw.cols());
    for r in 0..c.raw.rows() {
        let e = c.out.row(r);
        let de = d_out.row(r);
        let proj = dot(e, de);
        for ((dz, &ei), &dei) in d_raw.row_mut(r).iter_mut().zip(e).zip(de) {
            *dz = (dei - ei * proj) / c.norms[r];
        }
    }
    gw2.add_assign(&c.hidden.t_matmul(&d_raw));
    add_to_row(gb2, &d_raw.col_sums());
    let mut d_hidden = d_raw.matmul_t(w2);
    for (dh, h) in d_hidden.as_mut_slice().iter_mut().zip(c.hidden.as_slice()) {
        *dh *= 1.0 - h * h;
    }
    gw1.add_assign(&c.input.t_matmul(&d_hidden));
    add_to_row(gb1, &d_hidden.col_sums());
    d_hidden.matmul_t(w1)
}

fn add_to_row(m: &mut Matrix, v: &[f64]) {
    for (a, b) in m.as_mut_slice().iter_mut().zip(v) {
        *a += b;
    }
}

fn mean_pool(tok_emb: &Matrix, tokens: &[Vec<u32>]) -> Matrix {
    let mut pooled = Matrix::zeros(tokens.len(), tok_emb.cols());
    for (r, seq) in tokens.iter().enumerate() {
        let inv = 1.0 / seq.len() as f64;
        let row = pooled.row_mut(r);
        for &t in seq {
            for (p, e) in row.iter_mut().zip(tok_emb.row(t as usize)) {
                *p += inv * e;
            }
        }
    }
    pooled
}

fn image_forward(p: &ModelParams, batch: &Batch) -> TowerCache {
    tower_forward(batch.images.clone(), &p.img_w1, &p.img_b1, &p.img_w2, &p.img_b2)
}

fn text_forward(p: &ModelParams, batch: &Batch) -> TowerCache {
    let pooled = mean_pool(&p.tok_emb, &batch.tokens);
    tower_forward(pooled, &p.txt_w1, &p.txt_b1, &p.txt_w2, &p.txt_b2)
}

fn image_backward(p: &ModelParams, c: &TowerCache, d: &Matrix, g: &mut ModelParams) {
    tower_backward(
        c,
        d,
        &p.img_w1,
        &p.img_w2,
        [&mut g.img_w1, &mut g.img_b1, &mut g.img_w2, &mut g.img_b2],
    );
}

fn text_backward(p: &ModelParams, c: &TowerCache, d: &Matrix, batch: &Batch, g: &mut ModelParams) {
    let d_pooled = tower_backward(
        c,
        d,
        &p.txt_w1,
        &p.txt_w2,
        [&mut g.txt_w1, &mut g.txt_b1, &mut g.txt_w2, &mut g.txt_b2],
    );
    for (r, seq) in batch.tokens.iter().enumerate() {
        let inv = 1.0 / seq.len() as f64;
        for &t in seq {
            for (ge, dp) in g.tok_emb.row_mut(t as usize).iter_mut().zip(d_pooled.row(r)) {
                *ge += inv * dp;
            }
        }
    }
}

/// Unit-norm image embeddings for raw feature rows.
pub fn embed_images(p: &ModelParams, features: &Matrix) -> Matrix {
    tower_forward(features.clone(), &p.img_w1, &p.img_b1, &p.img_w2, &p.img_b2).out
}

/// Unit-norm text embeddings for token sequences.
pub fn embed_texts(p: &ModelParams, tokens: &[Vec<u32>]) -> Matrix {
    let pooled = mean_pool(&p.tok_emb, tokens);
    tower_forward(pooled, &p.txt_w1, &p.txt_b1, &p.txt_w2, &p.txt_b2).out
}

pub fn embed(p: &ModelParams, batch: &Batch) -> Embeddings {
    Embeddings {
        img: image_forward(p, batch).out,
        txt: text_forward(p, batch).out,
    }
}

fn require_pairs(batch: &Batch, what: &str) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::Contract(format!(
            "{what} needs at least 2 items in the batch, got {}",
            batch.len()
        )));
    }
    Ok(())
}

/// Symmetric label-smoothed InfoNCE on given embeddings. Returns the loss and
/// its gradients w.r.t. the image and text embedding rows.
pub fn itc_on_embeddings(emb: &Embeddings, temperature: f64, smoothing: f64) -> (f64, Matrix, Matrix) {
    let n = emb.img.rows();
    let sim = emb.i2t();
    let logits = sim.map(|s| s / temperature);
    let off = smoothing / n as f64;
    let target = |i: usize, j: usize| if i == j { 1.0 - smoothing + off } else { off };
    let mut d_logits = Matrix::zeros(n, n);
    let mut loss_i2t = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        for j in 0..n {
            let logp = row[j] - lse;
            loss_i2t -= target(i, j) * logp;
            let upd = d_logits.get(i, j) + (logp.exp() - target(i, j)) / (2.0 * n as f64);
            d_logits.set(i, j, upd);
        }
    }
    let mut loss_t2i = 0.0;
    let mut col = vec![0.0; n];
    for j in 0..n {
        for (i, c) in col.iter_mut().enumerate() {
            *c = logits.get(i, j);
        }
        let lse = log_sum_exp(&col);
        for i in 0..n {
            let logp = col[i] - lse;
            loss_t2i -= target(j, i) * logp;
            let upd = d_logits.get(i, j) + (logp.exp() - target(j, i)) / (2.0 * n as f64);
            d_logits.set(i, j, upd);
        }
    }
    let loss = 0.5 * (loss_i2t + loss_t2i) / n as f64;
    let d_sim = d_logits.map(|d| d / temperature);
    let d_img = d_sim.matmul(&emb.txt);
    let d_txt = d_sim.t_matmul(&emb.img);
    (loss, d_img, d_txt)
}

/// Hardest in-batch negative per anchor: for image anchor `i`, the text `j ≠ i`
/// maximizing `sim[i][j]`; for text anchor `i`, the image `k ≠ i` maximizing
/// `sim[k][i]`. Ties go to the lowest index.
pub fn hardest_negatives(sim: &Matrix) -> (Vec<usize>, Vec<usize>) {
    let n = sim.rows();
    let argmax = |vals: &mut dyn Iterator<Item = (usize, f64)>| {
        let mut best: Option<(usize, f64)> = None;
        for (j, v) in vals {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        best.map(|(j, _)| j).expect("at least one candidate")
    };
    let neg_txt = (0..n)
        .map(|i| argmax(&mut (0..n).filter(|&j| j != i).map(|j| (j, sim.get(i, j)))))
        .collect();
    let neg_img = (0..n)
        .map(|i| argmax(&mut (0..n).filter(|&k| k != i).map(|k| (k, sim.get(k, i)))))
        .collect();
    (neg_txt, neg_img)
}

fn itm_score(p: &ModelParams, u: &[f64], v: &[f64]) -> f64 {
    let av = p.itm_bilinear.matmul_t(&Matrix::from_vec(1, v.len(), v.to_vec()));
    dot(u, av.as_slice()) + dot(&p.itm_w_img.as_slice()[..u.len()], u) + dot(p.itm_w_txt.as_slice(), v)
        + p.itm_bias.as_slice()[0]
}

/// Matching-head BCE on the given embeddings with negatives mined from `sim`.
/// Head gradients accumulate into `g`; embedding gradients are returned.
pub fn itm_on_embeddings(
    p: &ModelParams,
    emb: &Embeddings,
    sim: &Matrix,
    g: &mut ModelParams,
) -> (f64, Matrix, Matrix) {
    let n = emb.img.rows();
    let (neg_txt, neg_img) = hardest_negatives(sim);
    let mut triples: Vec<(usize, usize, f64)> = Vec::with_capacity(3 * n);
    for i in 0..n {
        triples.push((i, i, 1.0));
        triples.push((i, neg_txt[i], 0.0));
        triples.push((neg_img[i], i, 0.0));
    }
    let scale = 1.0 / triples.len() as f64;
    let mut d_img = Matrix::zeros(n, emb.img.cols());
    let mut d_txt = Matrix::zeros(n, emb.txt.cols());
    let mut loss = 0.0;
    for &(a, b, y) in &triples {
        let u = emb.img.row(a);
        let v = emb.txt.row(b);
        let s = itm_score(p, u, v);
        loss += softplus(s) - y * s;
        let ds = (sigmoid(s) - y) * scale;
        let e = u.len();
        for r in 0..e {
            for c in 0..e {
                let cur = g.itm_bilinear.get(r, c);
                g.itm_bilinear.set(r, c, cur + ds * u[r] * v[c]);
            }
        }
        for r in 0..e {
            g.itm_w_img.as_mut_slice()[r] += ds * u[r];
            g.itm_w_txt.as_mut_slice()[r] += ds * v[r];
        }
        g.itm_bias.as_mut_slice()[0] += ds;
        let du = d_img.row_mut(a);
        for r in 0..e {
            du[r] += ds * (dot(p.itm_bilinear.row(r), v) + p.itm_w_img.as_slice()[r]);
        }
        let dv = d_txt.row_mut(b);
        for c in 0..e {
            let mut acc = p.itm_w_txt.as_slice()[c];
            for r in 0..e {
                acc += p.itm_bilinear.get(r, c) * u[r];
            }
            dv[c] += ds * acc;
        }
    }
    (loss * scale, d_img, d_txt)
}

/// Masked-token cross-entropy given the image embeddings. Fusion-head and
/// token-table gradients accumulate into `g`; the image-embedding gradient is
/// returned.
pub fn mlm_on_embeddings(
    p: &ModelParams,
    batch: &Batch,
    img_emb: &Matrix,
    mask: &MaskPattern,
    g: &mut ModelParams,
) -> (f64, Matrix) {
    let n = batch.len();
    let e = p.tok_emb.cols();
    let vocab = p.tok_emb.rows();
    let total_masked = mask.count();
    let mut d_img = Matrix::zeros(n, img_emb.cols());
    if total_masked == 0 {
        return (0.0, d_img);
    }
    let scale = 1.0 / total_masked as f64;

    // Fusion input: [image embedding ; mean of unmasked token embeddings].
    let mut input = Matrix::zeros(n, 2 * e);
    let mut kept: Vec<usize> = Vec::with_capacity(n);
    for r in 0..n {
        input.row_mut(r)[..e].copy_from_slice(img_emb.row(r));
        let seq = &batch.tokens[r];
        let visible = mask.masked[r].iter().filter(|&&m| !m).count();
        kept.push(visible);
        if visible > 0 {
            let inv = 1.0 / visible as f64;
            for (pos, &t) in seq.iter().enumerate() {
                if !mask.masked[r][pos] {
                    for (x, w) in input.row_mut(r)[e..].iter_mut().zip(p.tok_emb.row(t as usize)) {
                        *x += inv * w;
                    }
                }
            }
        }
    }
    let mut z1 = input.matmul(&p.fus_w1);
    z1.add_row_vector(p.fus_b1.as_slice());
    let hidden = z1.map(f64::tanh);
    let mut logits = hidden.matmul(&p.fus_w2);
    logits.add_row_vector(p.fus_b2.as_slice());

    let mut d_logits = Matrix::zeros(n, logits.cols());
    let mut loss = 0.0;
    for r in 0..n {
        for (pos, &tok) in batch.tokens[r].iter().enumerate() {
            if !mask.masked[r][pos] {
                continue;
            }
            let span = pos * vocab..(pos + 1) * vocab;
            let slot = &logits.row(r)[span.clone()];
            let lse = log_sum_exp(slot);
            loss += lse - slot[tok as usize];
            let d = &mut d_logits.row_mut(r)[span];
            for (k, dk) in d.iter_mut().enumerate() {
                *dk += scale * ((slot[k] - lse).exp() - if k == tok as usize { 1.0 } else { 0.0 });
            }
        }
    }
    g.fus_w2.add_assign(&hidden.t_matmul(&d_logits));
    add_to_row(&mut g.fus_b2, &d_logits.col_sums());
    let mut d_hidden = d_logits.matmul_t(&p.fus_w2);
    for (dh, h) in d_hidden.as_mut_slice().iter_mut().zip(hidden.as_slice()) {
        *dh *= 1.0 - h * h;
    }
    g.fus_w1.add_assign(&input.t_matmul(&d_hidden));
    add_to_row(&mut g.fus_b1, &d_hidden.col_sums());
    let d_input = d_hidden.matmul_t(&p.fus_w1);
    for r in 0..n {
        d_img.row_mut(r).copy_from_slice(&d_input.row(r)[..e]);
        if kept[r] == 0 {
            continue;
        }
        let inv = 1.0 / kept[r] as f64;
        for (pos, &t) in batch.tokens[r].iter().enumerate() {
            if !mask.masked[r][pos] {
                for (ge, d) in g.tok_emb.row_mut(t as usize).iter_mut().zip(&d_input.row(r)[e..]) {
                    *ge += inv * d;
                }
            }
        }
    }
    (loss * scale, d_img)
}

pub fn loss_itc(p: &ModelParams, cfg: &ModelConfig, batch: &Batch) -> Result<LossGrad> {
    require_pairs(batch, "ITC loss")?;
    let ic = image_forward(p, batch);
    let tc = text_forward(p, batch);
    let emb = Embeddings {
        img: ic.out.clone(),
        txt: tc.out.clone(),
    };
    let (value, d_img, d_txt) = itc_on_embeddings(&emb, cfg.temperature, cfg.label_smoothing);
    let mut grads = p.zeros_like();
    image_backward(p, &ic, &d_img, &mut grads);
    text_backward(p, &tc, &d_txt, batch, &mut grads);
    Ok(LossGrad { value, grads })
}

/// ITM loss with hardest negatives chosen from `sim` (the in-batch I2T cosine
/// matrix of the current embeddings).
pub fn loss_itm(p: &ModelParams, batch: &Batch, sim: &Matrix) -> Result<LossGrad> {
    require_pairs(batch, "ITM loss")?;
    if sim.shape() != (batch.len(), batch.len()) {
        return Err(Error::Contract("similarity matrix does not match batch size".into()));
    }
    let ic = image_forward(p, batch);
    let tc = text_forward(p, batch);
    let emb = Embeddings {
        img: ic.out.clone(),
        txt: tc.out.clone(),
    };
    let mut grads = p.zeros_like();
    let (value, d_img, d_txt) = itm_on_embeddings(p, &emb, sim, &mut grads);
    image_backward(p, &ic, &d_img, &mut grads);
    text_backward(p, &tc, &d_txt, batch, &mut grads);
    Ok(LossGrad { value, grads })
}

pub fn loss_mlm(p: &ModelParams, batch: &Batch, mask: &MaskPattern) -> Result<LossGrad> {
    mask.check(batch)?;
    let ic = image_forward(p, batch);
    let mut grads = p.zeros_like();
    let (value, d_img) = mlm_on_embeddings(p, batch, &ic.out, mask, &mut grads);
    if mask.count() > 0 {
        image_backward(p, &ic, &d_img, &mut grads);
    }
    Ok(LossGrad { value, grads })
}

/// Value of the MLM loss only.
pub fn mlm_value(p: &ModelParams, batch: &Batch, mask: &MaskPattern) -> Result<f64> {
    mask.check(batch)?;
    let ic = image_forward(p, batch);
    let mut scratch = p.zeros_like();
    Ok(mlm_on_embeddings(p, batch, &ic.out, mask, &mut scratch).0)
}

/// `L_ITC + L_ITM + L_MLM` and its gradient, sharing one tower pass.
pub fn loss_vlp(p: &ModelParams, cfg: &ModelConfig, batch: &Batch, mask: &MaskPattern) -> Result<VlpLoss> {
    require_pairs(batch, "VLP loss")?;
    mask.check(batch)?;
    let ic = image_forward(p, batch);
    let tc = text_forward(p, batch);
    let emb = Embeddings {
        img: ic.out.clone(),
        txt: tc.out.clone(),
    };
    let sim = emb.i2t();
    let mut grads = p.zeros_like();
    let (itc, mut d_img, mut d_txt) = itc_on_embeddings(&emb, cfg.temperature, cfg.label_smoothing);
    let (itm, di, dt) = itm_on_embeddings(p, &emb, &sim, &mut grads);
    d_img.add_assign(&di);
    d_txt.add_assign(&dt);
    let (mlm, di) = mlm_on_embeddings(p, batch, &emb.img, mask, &mut grads);
    d_img.add_assign(&di);
    image_backward(p, &ic, &d_img, &mut grads);
    text_backward(p, &tc, &d_txt, batch, &mut grads);
    let total = itc + itm + mlm;
    for (name, v) in [("itc", itc), ("itm", itm), ("mlm", mlm)] {
        if !v.is_finite() {
            return Err(Error::numerical(name, format!("loss evaluated to {v}")));
        }
    }
    Ok(VlpLoss {
        itc,
        itm,
        mlm,
        total,
        grads,
    })
}
