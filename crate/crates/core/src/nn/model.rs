use ndarray::{s, Array1, Array2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::ops::{
    bce_with_logit, dropout_mask, layer_norm, layer_norm_backward, linear, linear_backward,
    log_softmax, position_encoding, sigmoid, softmax_backward, softmax_rows, LayerNormCache,
};
use super::params::ParamSet;
use super::{NetConfig, NetError};
use crate::encoder::{FeatureLayout, InputSequence, RowKind, N_CLASSES};

/// One supervised training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: InputSequence,
    /// One class per current-turn slot.
    pub targets: Vec<usize>,
    /// One 0/1 entry per domain index.
    pub domain_targets: Vec<u8>,
}

pub type Batch<'a> = [&'a Example];

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `n_t × 6`, aligned with the input's current-turn slots.
    pub slot_logits: Array2<f64>,
    pub domain_logits: Array1<f64>,
}

impl ForwardOutput {
    pub fn slot_probs(&self) -> Array2<f64> {
        let mut p = self.slot_logits.clone();
        softmax_rows(&mut p);
        p
    }

    pub fn domain_probs(&self) -> Array1<f64> {
        self.domain_logits.mapv(sigmoid)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub slot_loss: f64,
    pub domain_loss: f64,
}

#[derive(Clone, Debug)]
struct LayerIds {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Clone, Debug)]
struct Ids {
    in_w: usize,
    in_b: usize,
    cls: usize,
    sep: usize,
    layers: Vec<LayerIds>,
    out_w: usize,
    out_b: usize,
    dom_w: usize,
    dom_b: usize,
}

/// The network: input projection, learned CLS/SEP embeddings, sinusoidal
/// positions, post-norm transformer encoder layers, slot and domain heads.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetConfig,
    pub layout: FeatureLayout,
    pub params: ParamSet,
    ids: Ids,
}

struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention probabilities per (segment, head), before dropout.
    probs: Vec<Array2<f64>>,
    prob_masks: Vec<Option<Array2<f64>>>,
    o: Array2<f64>,
    drop1: Option<Array2<f64>>,
    ln1: LayerNormCache,
    h1: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    ff_mask: Option<Array2<f64>>,
    drop2: Option<Array2<f64>>,
    ln2: LayerNormCache,
}

struct Cache {
    x_in: Array2<f64>,
    segments: Vec<(usize, usize)>,
    kinds: Vec<RowKind>,
    emb_mask: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    h: Array2<f64>,
}

fn build_param_set(config: &NetConfig, width: usize) -> (ParamSet, Ids) {
    let d = config.d_model;
    let mut p = ParamSet::new();
    let in_w = p.add("input.weight", &[width, d]);
    let in_b = p.add("input.bias", &[d]);
    let cls = p.add("embed.cls", &[d]);
    let sep = p.add("embed.sep", &[d]);
    let mut layers = Vec::new();
    for l in 0..config.n_layers {
        let name = |n: &str| format!("layer{l}.{n}");
        layers.push(LayerIds {
            wq: p.add(name("attn.wq"), &[d, d]),
            bq: p.add(name("attn.bq"), &[d]),
            wk: p.add(name("attn.wk"), &[d, d]),
            bk: p.add(name("attn.bk"), &[d]),
            wv: p.add(name("attn.wv"), &[d, d]),
            bv: p.add(name("attn.bv"), &[d]),
            wo: p.add(name("attn.wo"), &[d, d]),
            bo: p.add(name("attn.bo"), &[d]),
            ln1_g: p.add(name("norm1.gamma"), &[d]),
            ln1_b: p.add(name("norm1.beta"), &[d]),
            w1: p.add(name("ff.w1"), &[d, config.ff_dim]),
            b1: p.add(name("ff.b1"), &[config.ff_dim]),
            w2: p.add(name("ff.w2"), &[config.ff_dim, d]),
            b2: p.add(name("ff.b2"), &[d]),
            ln2_g: p.add(name("norm2.gamma"), &[d]),
            ln2_b: p.add(name("norm2.beta"), &[d]),
        });
    }
    let out_w = p.add("slot_head.weight", &[d, config.slot_classes]);
    let out_b = p.add("slot_head.bias", &[config.slot_classes]);
    let dom_w = p.add("domain_head.weight", &[d, config.domain_head_dim]);
    let dom_b = p.add("domain_head.bias", &[config.domain_head_dim]);
    let ids = Ids {
        in_w,
        in_b,
        cls,
        sep,
        layers,
        out_w,
        out_b,
        dom_w,
        dom_b,
    };
    (p, ids)
}

/// Per-example loss from logits; returns (slot term, domain term).
pub fn example_loss(
    slot_logits: &Array2<f64>,
    targets: &[usize],
    domain_logits: &Array1<f64>,
    domain_targets: &[u8],
) -> Result<(f64, f64), NetError> {
    if targets.len() != slot_logits.nrows() {
        return Err(NetError::TargetCount {
            expected: slot_logits.nrows(),
            found: targets.len(),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= N_CLASSES) {
        return Err(NetError::Target(bad));
    }
    if domain_targets.len() != domain_logits.len() {
        return Err(NetError::TargetCount {
            expected: domain_logits.len(),
            found: domain_targets.len(),
        });
    }
    let slot = if targets.is_empty() {
        0.0
    } else {
        -targets
            .iter()
            .enumerate()
            .map(|(i, &t)| log_softmax(&slot_logits.row(i))[t])
            .sum::<f64>()
            / targets.len() as f64
    };
    let domain = domain_logits
        .iter()
        .zip(domain_targets)
        .map(|(&z, &y)| bce_with_logit(z, y as f64))
        .sum::<f64>()
        / domain_logits.len().max(1) as f64;
    Ok((slot, domain))
}

impl Network {
    pub fn new(config: NetConfig, layout: FeatureLayout) -> Result<Self, NetError> {
        config.validate()?;
        if config.domain_head_dim != layout.l_d {
            return Err(NetError::Config(format!(
                "domain head size {} differs from l_d {}",
                config.domain_head_dim, layout.l_d
            )));
        }
        let (mut params, ids) = build_param_set(&config, layout.width());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let linear_init = |p: &mut ParamSet, w: usize, rng: &mut ChaCha8Rng| {
            let fan_in = p.specs[w].shape[0] as f64;
            p.fill_uniform(w, 1.0 / fan_in.sqrt(), rng);
        };
        linear_init(&mut params, ids.in_w, &mut rng);
        params.fill_uniform(ids.cls, 0.1, &mut rng);
        params.fill_uniform(ids.sep, 0.1, &mut rng);
        for l in &ids.layers {
            for w in [l.wq, l.wk, l.wv, l.wo, l.w1, l.w2] {
                linear_init(&mut params, w, &mut rng);
            }
            params.fill(l.ln1_g, 1.0);
            params.fill(l.ln2_g, 1.0);
        }
        linear_init(&mut params, ids.out_w, &mut rng);
        linear_init(&mut params, ids.dom_w, &mut rng);
        Ok(Self {
            config,
            layout,
            params,
            ids,
        })
    }

    /// Rebuilds a network around stored parameters; shapes must match.
    pub fn from_params(
        config: NetConfig,
        layout: FeatureLayout,
        params: ParamSet,
    ) -> Result<Self, NetError> {
        config.validate()?;
        let (expected, ids) = build_param_set(&config, layout.width());
        if expected.specs != params.specs || expected.data.len() != params.data.len() {
            return Err(NetError::Format(
                "tensor names or shapes do not match the configuration".into(),
            ));
        }
        Ok(Self {
            config,
            layout,
            params,
            ids,
        })
    }

    pub fn width(&self) -> usize {
        self.layout.width()
    }

    fn check_width(&self, seq: &InputSequence) -> Result<(), NetError> {
        if seq.width != self.width() {
            return Err(NetError::Width {
                expected: self.width(),
                found: seq.width,
            });
        }
        Ok(())
    }

    /// Eval-mode forward pass of one sequence.
    pub fn forward(&self, seq: &InputSequence) -> Result<ForwardOutput, NetError> {
        self.check_width(seq)?;
        let (mut out, _) = self.forward_packed(&[seq], None::<&mut ChaCha8Rng>);
        Ok(out.pop().expect("one output per sequence"))
    }

    /// Eval-mode forward pass of several sequences at once.
    pub fn forward_many(&self, seqs: &[&InputSequence]) -> Result<Vec<ForwardOutput>, NetError> {
        for s in seqs {
            self.check_width(s)?;
        }
        Ok(self.forward_packed(seqs, None::<&mut ChaCha8Rng>).0)
    }

    /// Forward pass over sequences packed row-wise. Attention never crosses
    /// sequence boundaries, which is what a padding mask achieves. Dropout
    /// is active iff `rng` is given.
    fn forward_packed<R: Rng>(
        &self,
        seqs: &[&InputSequence],
        mut rng: Option<&mut R>,
    ) -> (Vec<ForwardOutput>, Cache) {
        let d = self.config.d_model;
        let width = self.width();
        let p = &self.params;
        let drop = self.config.dropout;
        let train = rng.is_some() && drop > 0.0;

        let n: usize = seqs.iter().map(|s| s.len()).sum();
        let mut x_in = Array2::zeros((n, width));
        let mut segments = Vec::with_capacity(seqs.len());
        let mut kinds = Vec::with_capacity(n);
        let mut start = 0;
        for seq in seqs {
            let view = ndarray::ArrayView2::from_shape((seq.len(), width), &seq.features)
                .expect("feature matrix shape");
            x_in.slice_mut(s![start..start + seq.len(), ..])
                .assign(&view);
            segments.push((start, seq.len()));
            kinds.extend_from_slice(&seq.kinds);
            start += seq.len();
        }

        let mut h = linear(&x_in.view(), &p.mat(self.ids.in_w), &p.vec(self.ids.in_b));
        for (&(start, len), _) in segments.iter().zip(seqs) {
            for pos in 0..len {
                let row = start + pos;
                let mut target = h.row_mut(row);
                match kinds[row] {
                    RowKind::Cls => target.assign(&p.vec(self.ids.cls)),
                    RowKind::Sep => target.assign(&p.vec(self.ids.sep)),
                    RowKind::Slot => {}
                }
                target += &position_encoding(pos, d);
            }
        }
        let emb_mask = if train {
            let m = dropout_mask(n, d, drop, rng.as_deref_mut().expect("train"));
            h *= &m;
            Some(m)
        } else {
            None
        };

        let n_heads = self.config.n_heads;
        let dk = d / n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut layers = Vec::with_capacity(self.ids.layers.len());
        for ids in &self.ids.layers {
            let x = h;
            let q = linear(&x.view(), &p.mat(ids.wq), &p.vec(ids.bq));
            let k = linear(&x.view(), &p.mat(ids.wk), &p.vec(ids.bk));
            let v = linear(&x.view(), &p.mat(ids.wv), &p.vec(ids.bv));
            let mut o = Array2::zeros((n, d));
            let mut probs = Vec::with_capacity(segments.len() * n_heads);
            let mut prob_masks = Vec::with_capacity(segments.len() * n_heads);
            for &(start, len) in &segments {
                for head in 0..n_heads {
                    let cols = head * dk..(head + 1) * dk;
                    let rows = start..start + len;
                    let qs = q.slice(s![rows.clone(), cols.clone()]);
                    let ks = k.slice(s![rows.clone(), cols.clone()]);
                    let vs = v.slice(s![rows.clone(), cols.clone()]);
                    let mut sc = qs.dot(&ks.t());
                    sc *= scale;
                    softmax_rows(&mut sc);
                    let mask = train
                        .then(|| dropout_mask(len, len, drop, rng.as_deref_mut().expect("train")));
                    let out = match &mask {
                        Some(m) => (&sc * m).dot(&vs),
                        None => sc.dot(&vs),
                    };
                    o.slice_mut(s![rows, cols]).assign(&out);
                    probs.push(sc);
                    prob_masks.push(mask);
                }
            }
            let mut a = linear(&o.view(), &p.mat(ids.wo), &p.vec(ids.bo));
            let drop1 = train.then(|| dropout_mask(n, d, drop, rng.as_deref_mut().expect("train")));
            if let Some(m) = &drop1 {
                a *= m;
            }
            a += &x;
            let (h1, ln1) = layer_norm(&a, &p.vec(ids.ln1_g), &p.vec(ids.ln1_b));
            let z1 = linear(&h1.view(), &p.mat(ids.w1), &p.vec(ids.b1));
            let mut a1 = z1.mapv(|v| v.max(0.0));
            let ff_mask = train.then(|| {
                dropout_mask(
                    n,
                    self.config.ff_dim,
                    drop,
                    rng.as_deref_mut().expect("train"),
                )
            });
            if let Some(m) = &ff_mask {
                a1 *= m;
            }
            let mut f = linear(&a1.view(), &p.mat(ids.w2), &p.vec(ids.b2));
            let drop2 = train.then(|| dropout_mask(n, d, drop, rng.as_deref_mut().expect("train")));
            if let Some(m) = &drop2 {
                f *= m;
            }
            f += &h1;
            let (h2, ln2) = layer_norm(&f, &p.vec(ids.ln2_g), &p.vec(ids.ln2_b));
            layers.push(LayerCache {
                x,
                q,
                k,
                v,
                probs,
                prob_masks,
                o,
                drop1,
                ln1,
                h1,
                z1,
                a1,
                ff_mask,
                drop2,
                ln2,
            });
            h = h2;
        }

        let out_w = p.mat(self.ids.out_w);
        let out_b = p.vec(self.ids.out_b);
        let dom_w = p.mat(self.ids.dom_w);
        let dom_b = p.vec(self.ids.dom_b);
        let outputs = seqs
            .iter()
            .zip(&segments)
            .map(|(seq, &(start, _))| {
                let rows: Vec<usize> = seq.current.iter().map(|r| start + r).collect();
                let hc = h.select(Axis(0), &rows);
                let slot_logits = linear(&hc.view(), &out_w, &out_b);
                let cls = h.row(start);
                let mut domain_logits = cls.dot(&dom_w);
                domain_logits += &dom_b;
                ForwardOutput {
                    slot_logits,
                    domain_logits,
                }
            })
            .collect();
        let cache = Cache {
            x_in,
            segments,
            kinds,
            emb_mask,
            layers,
            h,
        };
        (outputs, cache)
    }

    fn backward(
        &self,
        seqs: &[&InputSequence],
        cache: Cache,
        d_slot: &[Array2<f64>],
        d_domain: &[Array1<f64>],
        grads: &mut ParamSet,
    ) {
        let p = &self.params;
        let ids = &self.ids;
        let n = cache.h.nrows();
        let d = self.config.d_model;
        let mut dh = Array2::<f64>::zeros((n, d));

        for (i, (seq, &(start, _))) in seqs.iter().zip(&cache.segments).enumerate() {
            let rows: Vec<usize> = seq.current.iter().map(|r| start + r).collect();
            let hc = cache.h.select(Axis(0), &rows);
            let dhc = {
                let (gw, gb) = two_mut(grads, ids.out_w, ids.out_b);
                linear_backward(&hc.view(), &p.mat(ids.out_w), &d_slot[i].view(), gw, gb)
            };
            for (k, &r) in rows.iter().enumerate() {
                let mut row = dh.row_mut(r);
                row += &dhc.row(k);
            }
            let cls = cache.h.row(start).insert_axis(Axis(0)).to_owned();
            let dd = d_domain[i].view().insert_axis(Axis(0)).to_owned();
            let dcls = {
                let (gw, gb) = two_mut(grads, ids.dom_w, ids.dom_b);
                linear_backward(&cls.view(), &p.mat(ids.dom_w), &dd.view(), gw, gb)
            };
            let mut row = dh.row_mut(start);
            row += &dcls.row(0);
        }

        let n_heads = self.config.n_heads;
        let dk = d / n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        for (lc, lid) in cache.layers.iter().zip(&ids.layers).rev() {
            // Second sublayer.
            let dr2 = {
                let (gg, gb) = norm_mut(grads, lid.ln2_g, lid.ln2_b);
                layer_norm_backward(&dh, &lc.ln2, &p.vec(lid.ln2_g), gg, gb)
            };
            let mut df = dr2.clone();
            if let Some(m) = &lc.drop2 {
                df *= m;
            }
            let mut da1 = {
                let (gw, gb) = two_mut(grads, lid.w2, lid.b2);
                linear_backward(&lc.a1.view(), &p.mat(lid.w2), &df.view(), gw, gb)
            };
            if let Some(m) = &lc.ff_mask {
                da1 *= m;
            }
            da1.zip_mut_with(&lc.z1, |g, &z| {
                if z <= 0.0 {
                    *g = 0.0
                }
            });
            let mut dh1 = {
                let (gw, gb) = two_mut(grads, lid.w1, lid.b1);
                linear_backward(&lc.h1.view(), &p.mat(lid.w1), &da1.view(), gw, gb)
            };
            dh1 += &dr2;

            // First sublayer.
            let dr1 = {
                let (gg, gb) = norm_mut(grads, lid.ln1_g, lid.ln1_b);
                layer_norm_backward(&dh1, &lc.ln1, &p.vec(lid.ln1_g), gg, gb)
            };
            let mut da = dr1.clone();
            if let Some(m) = &lc.drop1 {
                da *= m;
            }
            let d_o = {
                let (gw, gb) = two_mut(grads, lid.wo, lid.bo);
                linear_backward(&lc.o.view(), &p.mat(lid.wo), &da.view(), gw, gb)
            };
            let mut dq = Array2::<f64>::zeros((n, d));
            let mut dkm = Array2::<f64>::zeros((n, d));
            let mut dv = Array2::<f64>::zeros((n, d));
            let mut idx = 0;
            for &(start, len) in &cache.segments {
                for head in 0..n_heads {
                    let cols = head * dk..(head + 1) * dk;
                    let rows = start..start + len;
                    let qs = lc.q.slice(s![rows.clone(), cols.clone()]);
                    let ks = lc.k.slice(s![rows.clone(), cols.clone()]);
                    let vs = lc.v.slice(s![rows.clone(), cols.clone()]);
                    let dos = d_o.slice(s![rows.clone(), cols.clone()]);
                    let probs = &lc.probs[idx];
                    let mask = &lc.prob_masks[idx];
                    idx += 1;
                    let pd = match mask {
                        Some(m) => probs * m,
                        None => probs.clone(),
                    };
                    dv.slice_mut(s![rows.clone(), cols.clone()])
                        .assign(&pd.t().dot(&dos));
                    let mut dp = dos.dot(&vs.t());
                    if let Some(m) = mask {
                        dp *= m;
                    }
                    let mut dsc = softmax_backward(probs, &dp);
                    dsc *= scale;
                    dq.slice_mut(s![rows.clone(), cols.clone()])
                        .assign(&dsc.dot(&ks));
                    dkm.slice_mut(s![rows, cols]).assign(&dsc.t().dot(&qs));
                }
            }
            let mut dx = dr1;
            for (w, b, g) in [
                (lid.wq, lid.bq, &dq),
                (lid.wk, lid.bk, &dkm),
                (lid.wv, lid.bv, &dv),
            ] {
                let (gw, gb) = two_mut(grads, w, b);
                dx += &linear_backward(&lc.x.view(), &p.mat(w), &g.view(), gw, gb);
            }
            dh = dx;
        }

        if let Some(m) = &cache.emb_mask {
            dh *= m;
        }
        for (row, kind) in cache.kinds.iter().enumerate() {
            let target = match kind {
                RowKind::Cls => ids.cls,
                RowKind::Sep => ids.sep,
                RowKind::Slot => continue,
            };
            let mut g = grads.vec_mut(target);
            g += &dh.row(row);
            dh.row_mut(row).fill(0.0);
        }
        let gw = cache.x_in.t().dot(&dh);
        let mut gwv = grads.mat_mut(ids.in_w);
        gwv += &gw;
        let gb = dh.sum_axis(Axis(0));
        let mut gbv = grads.vec_mut(ids.in_b);
        gbv += &gb;
    }

    /// Batch loss (mean over examples) and its gradient. Dropout is active
    /// iff `rng` is given.
    pub fn loss_and_grad<R: Rng>(
        &self,
        batch: &Batch,
        rng: Option<&mut R>,
    ) -> Result<(StepStats, ParamSet), NetError> {
        let seqs: Vec<&InputSequence> = batch.iter().map(|e| &e.input).collect();
        for s in &seqs {
            self.check_width(s)?;
        }
        let (outputs, cache) = self.forward_packed(&seqs, rng);
        let b = batch.len().max(1) as f64;
        let mut stats = StepStats::default();
        let mut d_slot = Vec::with_capacity(batch.len());
        let mut d_domain = Vec::with_capacity(batch.len());
        for (ex, out) in batch.iter().zip(&outputs) {
            let (sl, dl) = example_loss(
                &out.slot_logits,
                &ex.targets,
                &out.domain_logits,
                &ex.domain_targets,
            )?;
            stats.slot_loss += sl / b;
            stats.domain_loss += dl / b;
            let mut ds = out.slot_probs();
            let n_t = ex.targets.len().max(1) as f64;
            for (i, &t) in ex.targets.iter().enumerate() {
                ds[[i, t]] -= 1.0;
            }
            ds /= n_t * b;
            d_slot.push(ds);
            let l_d = out.domain_logits.len().max(1) as f64;
            let dd = if self.config.domain_loss {
                Array1::from_shape_fn(out.domain_logits.len(), |j| {
                    (sigmoid(out.domain_logits[j]) - ex.domain_targets[j] as f64) / (l_d * b)
                })
            } else {
                Array1::zeros(out.domain_logits.len())
            };
            d_domain.push(dd);
        }
        stats.loss = stats.slot_loss
            + if self.config.domain_loss {
                stats.domain_loss
            } else {
                0.0
            };
        let mut grads = self.params.zeros_like();
        self.backward(&seqs, cache, &d_slot, &d_domain, &mut grads);
        Ok((stats, grads))
    }

    /// Batch loss without gradients, eval mode.
    pub fn loss(&self, batch: &Batch) -> Result<StepStats, NetError> {
        let seqs: Vec<&InputSequence> = batch.iter().map(|e| &e.input).collect();
        let outputs = self.forward_many(&seqs)?;
        let b = batch.len().max(1) as f64;
        let mut stats = StepStats::default();
        for (ex, out) in batch.iter().zip(&outputs) {
            let (sl, dl) = example_loss(
                &out.slot_logits,
                &ex.targets,
                &out.domain_logits,
                &ex.domain_targets,
            )?;
            stats.slot_loss += sl / b;
            stats.domain_loss += dl / b;
        }
        stats.loss = stats.slot_loss
            + if self.config.domain_loss {
                stats.domain_loss
            } else {
                0.0
            };
        Ok(stats)
    }

    /// One optimizer step on a batch with dropout active.
    pub fn train_step<R: Rng>(
        &mut self,
        batch: &Batch,
        adam: &mut Adam,
        rng: &mut R,
    ) -> Result<StepStats, NetError> {
        let (stats, grads) = self.loss_and_grad(batch, Some(rng))?;
        if !stats.loss.is_finite() || !grads.all_finite() {
            return Err(NetError::NonFinite {
                loss: stats.loss,
                step: adam.step_count(),
                detail: format!(
                    "slot term {}, domain term {}, first non-finite gradient in {:?}",
                    stats.slot_loss,
                    stats.domain_loss,
                    grads.first_non_finite()
                ),
            });
        }
        adam.update(&mut self.params, &grads, self.config.learning_rate);
        if let Some(name) = self.params.first_non_finite() {
            return Err(NetError::NonFinite {
                loss: stats.loss,
                step: adam.step_count(),
                detail: format!("parameter {name} became non-finite"),
            });
        }
        Ok(stats)
    }
}

/// Mutable slices of two tensors stored back to back.
fn adjacent_mut(grads: &mut ParamSet, first: usize, second: usize) -> (&mut [f64], &mut [f64]) {
    let a = grads.specs[first].range();
    let b = grads.specs[second].range();
    assert_eq!(a.end, b.start, "tensors are not adjacent");
    let (left, right) = grads.data.split_at_mut(a.end);
    (&mut left[a], &mut right[..b.len()])
}

fn two_mut(
    grads: &mut ParamSet,
    w: usize,
    b: usize,
) -> (ArrayViewMut2<'_, f64>, ArrayViewMut1<'_, f64>) {
    let shape = (grads.specs[w].shape[0], grads.specs[w].shape[1]);
    let (ws, bs) = adjacent_mut(grads, w, b);
    (
        ArrayViewMut2::from_shape(shape, ws).expect("matrix"),
        ArrayViewMut1::from(bs),
    )
}

fn norm_mut(
    grads: &mut ParamSet,
    g: usize,
    b: usize,
) -> (ArrayViewMut1<'_, f64>, ArrayViewMut1<'_, f64>) {
    let (gs, bs) = adjacent_mut(grads, g, b);
    (ArrayViewMut1::from(gs), ArrayViewMut1::from(bs))
}
