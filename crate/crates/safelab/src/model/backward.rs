//! Reverse-mode gradients for every parameter tensor, written against the
//! explicit [`ForwardCache`]. No autodiff framework: each block's backward
//! rule is spelled out so it can be audited against finite differences.

use super::forward::ForwardCache;
use super::math::{self, Scalar};
use super::{loss, Model, ModelError, ParamSet};
use crate::corpus::TokenId;

/// Gradients of the loss with respect to parameters and input embeddings.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    pub params: ParamSet<S>,
    /// `dL/d(embedded input row)`, shape `[B*T, D]`. Input for
    /// embedding-space attacks; already folded into `params.emb` as well.
    pub d_x0: Vec<S>,
}

/// RMS-norm backward for one row: accumulates into `d_x` and `dw`.
fn rms_backward_row<S: Scalar>(d_x: &mut [S], dw: &mut [S], dy: &[S], x: &[S], w: &[S], inv: S) {
    let n = S::from_f64_c(x.len() as f64);
    let mut s = S::zero();
    for i in 0..x.len() {
        s += dy[i] * w[i] * x[i];
    }
    let inv3 = inv * inv * inv;
    for i in 0..x.len() {
        dw[i] += dy[i] * x[i] * inv;
        d_x[i] += dy[i] * w[i] * inv - x[i] * inv3 * s / n;
    }
}

/// Undo one row's rotary rotation (transpose of the forward rotation).
fn rotate_row_inverse<S: Scalar>(row: &mut [S], cos: &[S], sin: &[S], n_head: usize) {
    let head_dim = row.len() / n_head;
    let half = head_dim / 2;
    for h in 0..n_head {
        let base = h * head_dim;
        for i in 0..half {
            let a = row[base + 2 * i];
            let b = row[base + 2 * i + 1];
            row[base + 2 * i] = a * cos[i] + b * sin[i];
            row[base + 2 * i + 1] = -a * sin[i] + b * cos[i];
        }
    }
}

impl<S: Scalar> Model<S> {
    /// Mean cross-entropy over unmasked positions and its gradients.
    ///
    /// `targets[r]` is the label for row `r` of the cache (already shifted by
    /// the caller); `mask[r] == 0` excludes a position from the loss.
    pub fn backward(
        &self,
        cache: &ForwardCache<S>,
        targets: &[TokenId],
        mask: &[u8],
    ) -> Result<(S, Gradients<S>), ModelError> {
        let cfg = &self.config;
        let (d, f, v, h) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_head);
        let hd = cfg.head_dim();
        let (b, t) = (cache.b, cache.t);
        let rows = b * t;
        if targets.len() != rows || mask.len() != rows {
            return Err(ModelError::InvalidConfig(format!(
                "targets/mask length {}/{} != rows {}",
                targets.len(),
                mask.len(),
                rows
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&id| (id as usize) >= v) {
            return Err(ModelError::BadToken(bad));
        }
        let scale = S::from_f64_c(1.0 / (hd as f64).sqrt());
        let (cos_tab, sin_tab) = super::forward::rotary_tables::<S>(0, t, hd);
        let half = hd / 2;

        let loss_val = loss(&cache.logits, targets, mask, v);
        let count = mask.iter().filter(|&&m| m != 0).count();
        let mut grads = ParamSet::<S>::zeros_like_config(cfg);

        // d(mean CE)/d(logits): softmax minus one-hot, scaled by 1/count.
        let mut dlogits = vec![S::zero(); rows * v];
        if count > 0 {
            let inv_count = S::from_f64_c(1.0 / count as f64);
            for r in 0..rows {
                if mask[r] == 0 {
                    continue;
                }
                let row = &mut dlogits[r * v..(r + 1) * v];
                row.copy_from_slice(&cache.logits[r * v..(r + 1) * v]);
                math::softmax_row(row);
                row[targets[r] as usize] -= S::one();
                for x in row.iter_mut() {
                    *x *= inv_count;
                }
            }
        }

        // Tied output head: logits = xhat_f · emb^T.
        let mut d_xhat_f = vec![S::zero(); rows * d];
        math::matmul(&mut d_xhat_f, &dlogits, &self.params.emb, rows, v, d);
        math::matmul_transa_acc(&mut grads.emb, &dlogits, &cache.xhat_f, rows, v, d);

        // Final norm.
        let mut d_resid = vec![S::zero(); rows * d];
        for r in 0..rows {
            rms_backward_row(
                &mut d_resid[r * d..(r + 1) * d],
                &mut grads.lnf,
                &d_xhat_f[r * d..(r + 1) * d],
                &cache.resid_final[r * d..(r + 1) * d],
                &self.params.lnf,
                cache.lnf_inv[r],
            );
        }

        for li in (0..cfg.n_layer).rev() {
            let lc = &cache.layers[li];
            let lw = &self.params.layers[li];
            let lg = &mut grads.layers[li];

            // MLP: resid_out = resid_mid + silu(xhat2·wg)*(xhat2·wu)·wd.
            let mut dact = vec![S::zero(); rows * f];
            math::matmul_transb(&mut dact, &d_resid, &lw.wd, rows, d, f);
            math::matmul_transa_acc(&mut lg.wd, &lc.act, &d_resid, rows, f, d);
            let mut dg = vec![S::zero(); rows * f];
            let mut du = vec![S::zero(); rows * f];
            for i in 0..rows * f {
                dg[i] = dact[i] * lc.up[i] * math::silu_grad(lc.gate_pre[i]);
                du[i] = dact[i] * math::silu(lc.gate_pre[i]);
            }
            math::matmul_transa_acc(&mut lg.wg, &lc.xhat2, &dg, rows, d, f);
            math::matmul_transa_acc(&mut lg.wu, &lc.xhat2, &du, rows, d, f);
            let mut d_xhat2 = vec![S::zero(); rows * d];
            math::matmul_transb(&mut d_xhat2, &dg, &lw.wg, rows, f, d);
            math::matmul_transb_acc(&mut d_xhat2, &du, &lw.wu, rows, f, d);

            // Through ln2 into the post-attention residual; the residual
            // passthrough keeps d_resid as-is.
            let mut d_resid_mid = d_resid;
            for r in 0..rows {
                let dy = &d_xhat2[r * d..(r + 1) * d];
                rms_backward_row(
                    &mut d_resid_mid[r * d..(r + 1) * d],
                    &mut lg.ln2,
                    dy,
                    &lc.resid_mid[r * d..(r + 1) * d],
                    &lw.ln2,
                    lc.ln2_inv[r],
                );
            }

            // Attention output projection.
            let mut d_ctx = vec![S::zero(); rows * d];
            math::matmul_transb(&mut d_ctx, &d_resid_mid, &lw.wo, rows, d, d);
            math::matmul_transa_acc(&mut lg.wo, &lc.ctx, &d_resid_mid, rows, d, d);

            // Attention core, per (batch, head, query).
            let mut dq = vec![S::zero(); rows * d];
            let mut dk = vec![S::zero(); rows * d];
            let mut dv = vec![S::zero(); rows * d];
            let mut dp = vec![S::zero(); t];
            let mut ds = vec![S::zero(); t];
            for bi in 0..b {
                for hi in 0..h {
                    let col = hi * hd;
                    for tq in 0..t {
                        let dctx_h = &d_ctx[(bi * t + tq) * d + col..(bi * t + tq) * d + col + hd];
                        let prow = &lc.probs[((bi * h + hi) * t + tq) * t..((bi * h + hi) * t + tq + 1) * t];
                        for tu in 0..=tq {
                            let vrow = &lc.v[(bi * t + tu) * d + col..(bi * t + tu) * d + col + hd];
                            let mut dot = S::zero();
                            for i in 0..hd {
                                dot += dctx_h[i] * vrow[i];
                            }
                            dp[tu] = dot;
                            let dvrow = &mut dv[(bi * t + tu) * d + col..(bi * t + tu) * d + col + hd];
                            for i in 0..hd {
                                dvrow[i] += prow[tu] * dctx_h[i];
                            }
                        }
                        // Softmax backward.
                        let mut inner = S::zero();
                        for tu in 0..=tq {
                            inner += prow[tu] * dp[tu];
                        }
                        for tu in 0..=tq {
                            ds[tu] = prow[tu] * (dp[tu] - inner);
                        }
                        let dqrow_base = (bi * t + tq) * d + col;
                        for tu in 0..=tq {
                            let s_scaled = ds[tu] * scale;
                            let krow = &lc.k[(bi * t + tu) * d + col..(bi * t + tu) * d + col + hd];
                            let qrow = &lc.q[(bi * t + tq) * d + col..(bi * t + tq) * d + col + hd];
                            for i in 0..hd {
                                dq[dqrow_base + i] += s_scaled * krow[i];
                            }
                            let dkrow = &mut dk[(bi * t + tu) * d + col..(bi * t + tu) * d + col + hd];
                            for i in 0..hd {
                                dkrow[i] += s_scaled * qrow[i];
                            }
                        }
                    }
                }
            }

            // Undo rotary on dq/dk, then project back through wq/wk/wv.
            for r in 0..rows {
                let pos = r % t;
                let (c, s) = (&cos_tab[pos * half..(pos + 1) * half], &sin_tab[pos * half..(pos + 1) * half]);
                rotate_row_inverse(&mut dq[r * d..(r + 1) * d], c, s, h);
                rotate_row_inverse(&mut dk[r * d..(r + 1) * d], c, s, h);
            }
            math::matmul_transa_acc(&mut lg.wq, &lc.xhat1, &dq, rows, d, d);
            math::matmul_transa_acc(&mut lg.wk, &lc.xhat1, &dk, rows, d, d);
            math::matmul_transa_acc(&mut lg.wv, &lc.xhat1, &dv, rows, d, d);
            let mut d_xhat1 = vec![S::zero(); rows * d];
            math::matmul_transb(&mut d_xhat1, &dq, &lw.wq, rows, d, d);
            math::matmul_transb_acc(&mut d_xhat1, &dk, &lw.wk, rows, d, d);
            math::matmul_transb_acc(&mut d_xhat1, &dv, &lw.wv, rows, d, d);

            // Through ln1 into the block's input residual.
            let mut d_resid_in = d_resid_mid;
            for r in 0..rows {
                let dy = &d_xhat1[r * d..(r + 1) * d];
                rms_backward_row(
                    &mut d_resid_in[r * d..(r + 1) * d],
                    &mut lg.ln1,
                    dy,
                    &lc.resid_in[r * d..(r + 1) * d],
                    &lw.ln1,
                    lc.ln1_inv[r],
                );
            }
            d_resid = d_resid_in;
        }

        // Input embeddings (tied with the head, so this accumulates).
        let d_x0 = d_resid;
        for (r, &id) in cache.ids.iter().enumerate() {
            let row = &d_x0[r * d..(r + 1) * d];
            let erow = &mut grads.emb[id as usize * d..(id as usize + 1) * d];
            for i in 0..d {
                erow[i] += row[i];
            }
        }

        if let Err(name) = grads.all_finite() {
            return Err(ModelError::NonFiniteGradient(name));
        }
        Ok((loss_val, Gradients { params: grads, d_x0 }))
    }
}
