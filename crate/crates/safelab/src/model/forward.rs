//! Forward pass: batched training path with a full activation cache, plus an
//! incremental key/value-cached path for decoding.
//!
//! Both paths share per-row arithmetic (same accumulation order), so the
//! logits they produce for the same prefix agree bitwise.

use super::math::{self, Scalar};
use super::{ActivationRequest, Model, ModelError};
use crate::corpus::{TokenId, Vocab};

pub(crate) const RMS_EPS: f64 = 1e-5;

/// Everything the backward pass needs, laid out as flat row-major tensors.
/// Rows index `(batch, position)` as `b * t + pos`.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    pub b: usize,
    pub t: usize,
    pub ids: Vec<TokenId>,
    /// Input embeddings, `[B*T, D]`.
    pub x0: Vec<S>,
    pub layers: Vec<LayerCache<S>>,
    /// Residual stream after the final block, `[B*T, D]`.
    pub resid_final: Vec<S>,
    /// Per-row `1/rms` for the final norm, `[B*T]`.
    pub lnf_inv: Vec<S>,
    /// Normalized final residual, `[B*T, D]`.
    pub xhat_f: Vec<S>,
    /// `[B*T, V]`.
    pub logits: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct LayerCache<S> {
    /// Residual entering the block, `[B*T, D]`.
    pub resid_in: Vec<S>,
    pub ln1_inv: Vec<S>, // [B*T]
    pub xhat1: Vec<S>,   // [B*T, D]
    pub q: Vec<S>,       // [B*T, D], post-rotary
    pub k: Vec<S>,       // [B*T, D], post-rotary
    pub v: Vec<S>,       // [B*T, D]
    /// Attention probabilities `[B, H, T, T]`; zero above the diagonal.
    pub probs: Vec<S>,
    /// Attention mix before the output projection, `[B*T, D]`.
    pub ctx: Vec<S>,
    /// Residual after attention (input to the MLP norm), `[B*T, D]`.
    pub resid_mid: Vec<S>,
    pub ln2_inv: Vec<S>, // [B*T]
    pub xhat2: Vec<S>,   // [B*T, D]
    pub gate_pre: Vec<S>, // [B*T, F]
    pub up: Vec<S>,       // [B*T, F]
    pub act: Vec<S>,      // [B*T, F], silu(gate_pre) * up
}

impl<S: Scalar> ForwardCache<S> {
    /// Residual-stream vector after (1-based) block `layer` at `position`
    /// within batch item `item`.
    pub fn residual_after(&self, layer: usize, item: usize, position: usize) -> &[S] {
        let d = self.x0.len() / (self.b * self.t);
        let row = item * self.t + position;
        let src = if layer == self.layers.len() {
            &self.resid_final
        } else {
            &self.layers[layer].resid_in
        };
        &src[row * d..(row + 1) * d]
    }
}

/// Per-row RMS statistics: returns `1 / sqrt(mean(x^2) + eps)`.
fn rms_inv<S: Scalar>(x: &[S]) -> S {
    let d = S::from_f64_c(x.len() as f64);
    let mut ss = S::zero();
    for &v in x {
        ss += v * v;
    }
    S::one() / (ss / d + S::from_f64_c(RMS_EPS)).sqrt()
}

fn rms_norm_row<S: Scalar>(out: &mut [S], x: &[S], w: &[S], inv: S) {
    for i in 0..x.len() {
        out[i] = x[i] * w[i] * inv;
    }
}

/// cos/sin tables for rotary positions: `[positions, head_dim/2]` pairs.
pub(crate) fn rotary_tables<S: Scalar>(start: usize, len: usize, head_dim: usize) -> (Vec<S>, Vec<S>) {
    let half = head_dim / 2;
    let mut cos = vec![S::zero(); len * half];
    let mut sin = vec![S::zero(); len * half];
    for p in 0..len {
        for i in 0..half {
            let freq = 10000f64.powf(-((2 * i) as f64) / head_dim as f64);
            let angle = (start + p) as f64 * freq;
            cos[p * half + i] = S::from_f64_c(angle.cos());
            sin[p * half + i] = S::from_f64_c(angle.sin());
        }
    }
    (cos, sin)
}

/// Rotate interleaved pairs of one `[D]` row in place. `cos`/`sin` hold the
/// `head_dim/2` values for this row's position.
pub(crate) fn rotate_row<S: Scalar>(row: &mut [S], cos: &[S], sin: &[S], n_head: usize) {
    let head_dim = row.len() / n_head;
    let half = head_dim / 2;
    for h in 0..n_head {
        let base = h * head_dim;
        for i in 0..half {
            let a = row[base + 2 * i];
            let b = row[base + 2 * i + 1];
            row[base + 2 * i] = a * cos[i] - b * sin[i];
            row[base + 2 * i + 1] = a * sin[i] + b * cos[i];
        }
    }
}

impl<S: Scalar> Model<S> {
    /// Run the full forward pass over `b` packed sequences of length `t`,
    /// keeping every intermediate needed by [`Model::backward`].
    ///
    /// Logits at a position depend only on that position's prefix, bitwise:
    /// every op is per-row except attention, which reads keys/values at
    /// positions `<=` the query position in a fixed order.
    pub fn forward(&self, ids: &[TokenId], b: usize, t: usize) -> Result<ForwardCache<S>, ModelError> {
        let cfg = &self.config;
        if b == 0 || t == 0 {
            return Err(ModelError::EmptyInput);
        }
        if ids.len() != b * t {
            return Err(ModelError::InvalidConfig(format!(
                "ids length {} != batch {} * seq {}",
                ids.len(),
                b,
                t
            )));
        }
        if t > cfg.context_len {
            return Err(ModelError::ContextOverflow { len: t, max: cfg.context_len });
        }
        if let Some(&bad) = ids.iter().find(|&&id| (id as usize) >= cfg.vocab_size) {
            return Err(ModelError::BadToken(bad));
        }

        let (d, f, v, h) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_head);
        let hd = cfg.head_dim();
        let rows = b * t;
        let scale = S::from_f64_c(1.0 / (hd as f64).sqrt());
        let (cos_tab, sin_tab) = rotary_tables::<S>(0, t, hd);
        let half = hd / 2;

        let mut x0 = vec![S::zero(); rows * d];
        for (r, &id) in ids.iter().enumerate() {
            let e = &self.params.emb[id as usize * d..(id as usize + 1) * d];
            x0[r * d..(r + 1) * d].copy_from_slice(e);
        }
        let mut resid = x0.clone();
        let mut layers = Vec::with_capacity(cfg.n_layer);

        for layer in &self.params.layers {
            let resid_in = resid.clone();
            let mut ln1_inv = vec![S::zero(); rows];
            let mut xhat1 = vec![S::zero(); rows * d];
            for r in 0..rows {
                let x = &resid_in[r * d..(r + 1) * d];
                let inv = rms_inv(x);
                ln1_inv[r] = inv;
                rms_norm_row(&mut xhat1[r * d..(r + 1) * d], x, &layer.ln1, inv);
            }

            let mut q = vec![S::zero(); rows * d];
            let mut k = vec![S::zero(); rows * d];
            let mut vv = vec![S::zero(); rows * d];
            math::matmul(&mut q, &xhat1, &layer.wq, rows, d, d);
            math::matmul(&mut k, &xhat1, &layer.wk, rows, d, d);
            math::matmul(&mut vv, &xhat1, &layer.wv, rows, d, d);
            for r in 0..rows {
                let pos = r % t;
                let (c, s) = (&cos_tab[pos * half..(pos + 1) * half], &sin_tab[pos * half..(pos + 1) * half]);
                rotate_row(&mut q[r * d..(r + 1) * d], c, s, h);
                rotate_row(&mut k[r * d..(r + 1) * d], c, s, h);
            }

            let mut probs = vec![S::zero(); b * h * t * t];
            let mut ctx = vec![S::zero(); rows * d];
            let mut scores = vec![S::zero(); t];
            for bi in 0..b {
                for hi in 0..h {
                    let col = hi * hd;
                    for tq in 0..t {
                        let qrow = &q[(bi * t + tq) * d + col..(bi * t + tq) * d + col + hd];
                        for tu in 0..=tq {
                            let krow = &k[(bi * t + tu) * d + col..(bi * t + tu) * d + col + hd];
                            let mut dot = S::zero();
                            for i in 0..hd {
                                dot += qrow[i] * krow[i];
                            }
                            scores[tu] = dot * scale;
                        }
                        math::softmax_row(&mut scores[..=tq]);
                        let prow = &mut probs[((bi * h + hi) * t + tq) * t..((bi * h + hi) * t + tq + 1) * t];
                        prow[..=tq].copy_from_slice(&scores[..=tq]);
                        let crow = &mut ctx[(bi * t + tq) * d + col..(bi * t + tq) * d + col + hd];
                        for tu in 0..=tq {
                            let p = prow[tu];
                            let vrow = &vv[(bi * t + tu) * d + col..(bi * t + tu) * d + col + hd];
                            for i in 0..hd {
                                crow[i] += p * vrow[i];
                            }
                        }
                    }
                }
            }

            // Project, then add: same summation order as the incremental
            // path, so the two paths stay bitwise identical.
            let mut attn_out = vec![S::zero(); rows * d];
            math::matmul(&mut attn_out, &ctx, &layer.wo, rows, d, d);
            let mut resid_mid = resid_in.clone();
            for i in 0..rows * d {
                resid_mid[i] += attn_out[i];
            }

            let mut ln2_inv = vec![S::zero(); rows];
            let mut xhat2 = vec![S::zero(); rows * d];
            for r in 0..rows {
                let x = &resid_mid[r * d..(r + 1) * d];
                let inv = rms_inv(x);
                ln2_inv[r] = inv;
                rms_norm_row(&mut xhat2[r * d..(r + 1) * d], x, &layer.ln2, inv);
            }

            let mut gate_pre = vec![S::zero(); rows * f];
            let mut up = vec![S::zero(); rows * f];
            math::matmul(&mut gate_pre, &xhat2, &layer.wg, rows, d, f);
            math::matmul(&mut up, &xhat2, &layer.wu, rows, d, f);
            let mut act = vec![S::zero(); rows * f];
            for i in 0..rows * f {
                act[i] = math::silu(gate_pre[i]) * up[i];
            }

            let mut mlp_out = vec![S::zero(); rows * d];
            math::matmul(&mut mlp_out, &act, &layer.wd, rows, f, d);
            let mut resid_out = resid_mid.clone();
            for i in 0..rows * d {
                resid_out[i] += mlp_out[i];
            }

            layers.push(LayerCache {
                resid_in,
                ln1_inv,
                xhat1,
                q,
                k,
                v: vv,
                probs,
                ctx,
                resid_mid,
                ln2_inv,
                xhat2,
                gate_pre,
                up,
                act,
            });
            resid = resid_out;
        }

        let resid_final = resid;
        let mut lnf_inv = vec![S::zero(); rows];
        let mut xhat_f = vec![S::zero(); rows * d];
        for r in 0..rows {
            let x = &resid_final[r * d..(r + 1) * d];
            let inv = rms_inv(x);
            lnf_inv[r] = inv;
            rms_norm_row(&mut xhat_f[r * d..(r + 1) * d], x, &self.params.lnf, inv);
        }
        let mut logits = vec![S::zero(); rows * v];
        math::matmul_transb(&mut logits, &xhat_f, &self.params.emb, rows, d, v);

        Ok(ForwardCache {
            b,
            t,
            ids: ids.to_vec(),
            x0,
            layers,
            resid_final,
            lnf_inv,
            xhat_f,
            logits,
        })
    }

    /// Convenience: logits `[T, V]` for one sequence.
    pub fn logits_only(&self, ids: &[TokenId]) -> Result<Vec<S>, ModelError> {
        Ok(self.forward(ids, 1, ids.len())?.logits)
    }

    /// Residual-stream activation for one sequence. `request.position = None`
    /// selects the last non-pad position.
    pub fn activation(&self, ids: &[TokenId], request: ActivationRequest) -> Result<Vec<S>, ModelError> {
        let layer = request.layer.resolve(&self.config)?;
        let t = ids.len();
        let pos = match request.position {
            Some(p) => {
                if p >= t {
                    return Err(ModelError::BadPosition(p, t));
                }
                p
            }
            None => ids
                .iter()
                .rposition(|&id| id != Vocab::PAD)
                .ok_or(ModelError::BadPosition(0, t))?,
        };
        let cache = self.forward(ids, 1, t)?;
        Ok(cache.residual_after(layer, 0, pos).to_vec())
    }

    /// Feed a whole prompt through the incremental path, returning the cache
    /// and the logits for the next token.
    pub fn prefill(&self, ids: &[TokenId]) -> Result<(KvCache<S>, Vec<S>), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let mut cache = KvCache::new(self.config.n_layer);
        let mut logits = Vec::new();
        for &id in ids {
            logits = self.step(&mut cache, id)?;
        }
        Ok((cache, logits))
    }

    /// Append one token to `cache` and return next-token logits `[V]`.
    pub fn step(&self, cache: &mut KvCache<S>, token: TokenId) -> Result<Vec<S>, ModelError> {
        let cfg = &self.config;
        if (token as usize) >= cfg.vocab_size {
            return Err(ModelError::BadToken(token));
        }
        let pos = cache.len;
        if pos >= cfg.context_len {
            return Err(ModelError::ContextOverflow { len: pos + 1, max: cfg.context_len });
        }
        let (d, f, v, h) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_head);
        let hd = cfg.head_dim();
        let half = hd / 2;
        let scale = S::from_f64_c(1.0 / (hd as f64).sqrt());
        let (cos_tab, sin_tab) = rotary_tables::<S>(pos, 1, hd);

        let mut x = self.params.emb[token as usize * d..(token as usize + 1) * d].to_vec();
        for (layer, kv) in self.params.layers.iter().zip(cache.layers.iter_mut()) {
            let inv = rms_inv(&x);
            let mut xhat = vec![S::zero(); d];
            rms_norm_row(&mut xhat, &x, &layer.ln1, inv);

            let mut q = math::vecmat(&xhat, &layer.wq, d, d);
            let mut k = math::vecmat(&xhat, &layer.wk, d, d);
            let vv = math::vecmat(&xhat, &layer.wv, d, d);
            rotate_row(&mut q, &cos_tab[..half], &sin_tab[..half], h);
            rotate_row(&mut k, &cos_tab[..half], &sin_tab[..half], h);
            kv.k.extend_from_slice(&k);
            kv.v.extend_from_slice(&vv);

            let mut ctx = vec![S::zero(); d];
            let mut scores = vec![S::zero(); pos + 1];
            for hi in 0..h {
                let col = hi * hd;
                let qrow = &q[col..col + hd];
                for (tu, score) in scores.iter_mut().enumerate().take(pos + 1) {
                    let krow = &kv.k[tu * d + col..tu * d + col + hd];
                    let mut dot = S::zero();
                    for i in 0..hd {
                        dot += qrow[i] * krow[i];
                    }
                    *score = dot * scale;
                }
                math::softmax_row(&mut scores);
                let crow = &mut ctx[col..col + hd];
                for (tu, &p) in scores.iter().enumerate().take(pos + 1) {
                    let vrow = &kv.v[tu * d + col..tu * d + col + hd];
                    for i in 0..hd {
                        crow[i] += p * vrow[i];
                    }
                }
            }
            let attn_out = math::vecmat(&ctx, &layer.wo, d, d);
            for i in 0..d {
                x[i] += attn_out[i];
            }

            let inv2 = rms_inv(&x);
            let mut xhat2 = vec![S::zero(); d];
            rms_norm_row(&mut xhat2, &x, &layer.ln2, inv2);
            let gate_pre = math::vecmat(&xhat2, &layer.wg, d, f);
            let up = math::vecmat(&xhat2, &layer.wu, d, f);
            let mut act = vec![S::zero(); f];
            for i in 0..f {
                act[i] = math::silu(gate_pre[i]) * up[i];
            }
            let mlp_out = math::vecmat(&act, &layer.wd, f, d);
            for i in 0..d {
                x[i] += mlp_out[i];
            }
        }

        let inv = rms_inv(&x);
        let mut xhat = vec![S::zero(); d];
        rms_norm_row(&mut xhat, &x, &self.params.lnf, inv);
        let mut logits = vec![S::zero(); v];
        for (vi, logit) in logits.iter_mut().enumerate() {
            let e = &self.params.emb[vi * d..(vi + 1) * d];
            let mut dot = S::zero();
            for i in 0..d {
                dot += xhat[i] * e[i];
            }
            *logit = dot;
        }
        cache.len += 1;
        Ok(logits)
    }
}

/// Per-layer key/value history for incremental decoding. Cloning forks the
/// stream, which is how beam candidates branch.
#[derive(Debug, Clone)]
pub struct KvCache<S> {
    pub len: usize,
    pub layers: Vec<LayerKv<S>>,
}

#[derive(Debug, Clone)]
pub struct LayerKv<S> {
    pub k: Vec<S>,
    pub v: Vec<S>,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(n_layer: usize) -> Self {
        KvCache {
            len: 0,
            layers: (0..n_layer)
                .map(|_| LayerKv { k: Vec::new(), v: Vec::new() })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::*;

    fn tiny_model() -> Model<f32> {
        Model::init(tiny_config(11)).unwrap()
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let m = tiny_model();
        let ids: Vec<TokenId> = vec![10, 20, 30, 40, 50, 60];
        let a = m.forward(&ids, 2, 3).unwrap();
        let b = m.forward(&ids, 2, 3).unwrap();
        assert_eq!(a.logits.len(), 6 * m.config.vocab_size);
        assert_eq!(a.logits, b.logits);
        assert!(a.logits.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn logits_depend_only_on_prefix_bitwise() {
        let m = tiny_model();
        let a = m.logits_only(&[5, 6, 7, 8]).unwrap();
        let b = m.logits_only(&[5, 6, 7, 200]).unwrap();
        let v = m.config.vocab_size;
        // Positions 0..=2 share a prefix: identical logits, bit for bit.
        assert_eq!(a[..3 * v], b[..3 * v]);
        // Position 3 sees different tokens.
        assert_ne!(a[3 * v..], b[3 * v..]);
    }

    #[test]
    fn rotary_positions_make_token_order_matter() {
        // Same bag of context tokens, same query token: without positional
        // information the attention mix would be order-invariant.
        let m = tiny_model();
        let v = m.config.vocab_size;
        let ab = m.logits_only(&[10, 20, 30]).unwrap();
        let ba = m.logits_only(&[20, 10, 30]).unwrap();
        assert_ne!(ab[2 * v..], ba[2 * v..]);
    }

    #[test]
    fn batch_items_are_independent() {
        let m = tiny_model();
        let joint = m.forward(&[1, 2, 3, 4, 9, 9, 9, 9], 2, 4).unwrap();
        let solo = m.forward(&[1, 2, 3, 4], 1, 4).unwrap();
        let v = m.config.vocab_size;
        assert_eq!(joint.logits[..4 * v], solo.logits[..]);
    }

    #[test]
    fn incremental_path_matches_batched_forward_bitwise() {
        let m = tiny_model();
        let ids: Vec<TokenId> = vec![3, 1, 4, 1, 5, 92];
        let full = m.logits_only(&ids).unwrap();
        let v = m.config.vocab_size;

        let (mut cache, last) = m.prefill(&ids[..3]).unwrap();
        assert_eq!(last, full[2 * v..3 * v]);
        let mut out = Vec::new();
        for &id in &ids[3..] {
            out = m.step(&mut cache, id).unwrap();
        }
        assert_eq!(out, full[5 * v..6 * v]);
        assert_eq!(cache.len, 6);
    }

    #[test]
    fn kv_cache_clone_forks_independently() {
        let m = tiny_model();
        let (cache, _) = m.prefill(&[7, 8, 9]).unwrap();
        let mut a = cache.clone();
        let mut b = cache;
        let la = m.step(&mut a, 100).unwrap();
        let lb = m.step(&mut b, 101).unwrap();
        assert_ne!(la, lb);
        // Same continuation from the fork point gives identical logits.
        let (fresh, _) = m.prefill(&[7, 8, 9]).unwrap();
        let mut c = fresh.clone();
        assert_eq!(m.step(&mut c, 100).unwrap(), la);
    }

    #[test]
    fn context_overflow_and_bad_tokens_are_rejected() {
        let m = tiny_model();
        let long: Vec<TokenId> = vec![1; m.config.context_len + 1];
        assert!(matches!(
            m.forward(&long, 1, long.len()),
            Err(ModelError::ContextOverflow { .. })
        ));
        assert_eq!(m.logits_only(&[1, 999]), Err(ModelError::BadToken(999)));
        assert_eq!(m.prefill(&[]).err(), Some(ModelError::EmptyInput));
    }

    #[test]
    fn activation_positions_and_layers() {
        let m = tiny_model();
        let ids: Vec<TokenId> = vec![10, 11, 12, Vocab::PAD, Vocab::PAD];
        let last = m
            .activation(&ids, ActivationRequest { layer: crate::model::LayerSelect::Final, position: None })
            .unwrap();
        let explicit = m
            .activation(&ids, ActivationRequest { layer: crate::model::LayerSelect::Final, position: Some(2) })
            .unwrap();
        assert_eq!(last, explicit);
        assert_eq!(last.len(), m.config.d_model);
        assert!(matches!(
            m.activation(&ids, ActivationRequest { layer: crate::model::LayerSelect::Final, position: Some(5) }),
            Err(ModelError::BadPosition(5, 5))
        ));
        // First-layer activation differs from final-layer activation.
        let first = m
            .activation(&ids, ActivationRequest { layer: crate::model::LayerSelect::First, position: None })
            .unwrap();
        assert_ne!(first, last);
    }
}
