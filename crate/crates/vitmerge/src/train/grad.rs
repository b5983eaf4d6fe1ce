//! Loss and reverse-mode gradients for the ViT.
//!
//! The backward pass consumes the [`ForwardTrace`] recorded by the forward
//! pass and walks it in reverse: classifier, final norm, then each block
//! (MLP residual, second norm, attention residual, first norm), finally the
//! patch embedding. Every matrix product reuses the deterministic f64
//! kernels, so gradients are bit-reproducible for a given batch.

use crate::numkit::{gemm_a_bt, gemm_at_b, Tensor};
use crate::vit::{forward_trace, gelu_prime, ViTParams};
use crate::{Error, Result};

/// Adds the column sums of `src` (`rows x c`) into `dst` (`c`).
fn add_colsum(src: &Tensor, dst: &mut Tensor) {
    let c = dst.len();
    for row in src.data().chunks(c) {
        for (d, &v) in dst.data_mut().iter_mut().zip(row) {
            *d += v;
        }
    }
}

/// Backward through a row-wise layer norm.
///
/// Accumulates scale/shift gradients and returns the gradient with respect
/// to the norm's input. `xhat` and `invstd` come from the forward trace.
fn ln_backward(
    dy: &Tensor,
    xhat: &Tensor,
    invstd: &[f64],
    scale: &Tensor,
    dscale: &mut Tensor,
    dshift: &mut Tensor,
) -> Tensor {
    let (rows, d) = (dy.shape()[0], dy.shape()[1]);
    let mut dx = Tensor::zeros(&[rows, d]);
    let sc = scale.data();
    for r in 0..rows {
        let dy_row = dy.row(r);
        let xh_row = xhat.row(r);
        for i in 0..d {
            dscale.data_mut()[i] += dy_row[i] * xh_row[i];
            dshift.data_mut()[i] += dy_row[i];
        }
        // a = dy * scale; dx = invstd * (a - mean(a) - xhat * mean(a*xhat))
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..d {
            let a = dy_row[i] * sc[i];
            m1 += a;
            m2 += a * xh_row[i];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let dst = &mut dx.data_mut()[r * d..(r + 1) * d];
        for i in 0..d {
            let a = dy_row[i] * sc[i];
            dst[i] = invstd[r] * (a - m1 - xh_row[i] * m2);
        }
    }
    dx
}

/// Mean cross-entropy over the batch plus an L2 weight-decay term, with
/// gradients for every parameter tensor.
///
/// The loss is `mean_i CE(logits_i, labels_i) + 0.5 * weight_decay * sum(w^2)`
/// where the decay sum runs over every parameter (weights, biases, norms,
/// embeddings, classifier). Label values must lie inside the classifier's
/// range; the batch must be non-empty.
pub fn loss_and_grads(
    params: &ViTParams,
    images: &Tensor,
    labels: &[usize],
    weight_decay: f64,
) -> Result<(f64, ViTParams)> {
    let cfg = &params.config;
    let b = images.shape()[0];
    if labels.len() != b {
        return Err(Error::Data(format!("{} labels for a batch of {b} images", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {} classes",
            cfg.num_classes
        )));
    }

    let (logits, trace) = forward_trace(params, images)?;
    let (d, t, kcls) = (cfg.dim, cfg.tokens(), cfg.num_classes);
    let (heads, hd) = (cfg.heads, cfg.dim / cfg.heads);
    let rows = b * t;
    let scale = 1.0 / (hd as f64).sqrt();

    // Cross-entropy via log-sum-exp; dlogits = (softmax - onehot) / batch.
    let mut dlogits = Tensor::zeros(&[b, kcls]);
    let mut loss = 0.0;
    for bi in 0..b {
        let row = logits.row(bi);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[labels[bi]];
        let dst = &mut dlogits.data_mut()[bi * kcls..(bi + 1) * kcls];
        for (j, &z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            dst[j] = (p - if j == labels[bi] { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    loss /= b as f64;

    let mut grads = params.zeros_like();

    // Classifier head.
    gemm_at_b(
        b,
        d,
        kcls,
        trace.cls_repr.data(),
        dlogits.data(),
        grads.classifier_w.data_mut(),
        true,
    );
    add_colsum(&dlogits, &mut grads.classifier_b);
    let mut dcls = Tensor::zeros(&[b, d]);
    gemm_a_bt(b, kcls, d, dlogits.data(), params.classifier_w.data(), dcls.data_mut(), false);

    // Final norm sees gradient only on the class-token rows.
    let mut dy_f = Tensor::zeros(&[rows, d]);
    for bi in 0..b {
        dy_f.data_mut()[bi * t * d..bi * t * d + d].copy_from_slice(dcls.row(bi));
    }
    let mut dx = ln_backward(
        &dy_f,
        &trace.xhat_f,
        &trace.invstd_f,
        &params.final_scale,
        &mut grads.final_scale,
        &mut grads.final_shift,
    );

    for blk_i in (0..cfg.depth).rev() {
        let bt = &trace.blocks[blk_i];
        let bp = &params.blocks[blk_i];
        let bg = &mut grads.blocks[blk_i];
        let hid = cfg.hidden();

        // Block output = h + fc2(gelu(fc1(LN2(h)))); dx is d(out).
        gemm_at_b(rows, hid, d, bt.g1.data(), dx.data(), bg.fc2_w.data_mut(), true);
        add_colsum(&dx, &mut bg.fc2_b);
        let mut da1 = Tensor::zeros(&[rows, hid]);
        gemm_a_bt(rows, d, hid, dx.data(), bp.fc2_w.data(), da1.data_mut(), false);
        for (v, &a) in da1.data_mut().iter_mut().zip(bt.a1.data()) {
            *v *= gelu_prime(a);
        }
        gemm_at_b(rows, d, hid, bt.y2.data(), da1.data(), bg.fc1_w.data_mut(), true);
        add_colsum(&da1, &mut bg.fc1_b);
        let mut dy2 = Tensor::zeros(&[rows, d]);
        gemm_a_bt(rows, hid, d, da1.data(), bp.fc1_w.data(), dy2.data_mut(), false);
        let dh_ln = ln_backward(
            &dy2,
            &bt.xhat2,
            &bt.invstd2,
            &bp.norm2_scale,
            &mut bg.norm2_scale,
            &mut bg.norm2_shift,
        );

        // h = x_in + attn(LN1(x_in)); total gradient at h.
        let mut dh = dx;
        for (v, &a) in dh.data_mut().iter_mut().zip(dh_ln.data()) {
            *v += a;
        }

        // Output projection.
        gemm_at_b(rows, d, d, bt.ctx.data(), dh.data(), bg.wo.data_mut(), true);
        add_colsum(&dh, &mut bg.bo);
        let mut dctx = Tensor::zeros(&[rows, d]);
        gemm_a_bt(rows, d, d, dh.data(), bp.wo.data(), dctx.data_mut(), false);

        // Attention mix + softmax + scores, per sample and head.
        let mut dq = Tensor::zeros(&[rows, d]);
        let mut dk = Tensor::zeros(&[rows, d]);
        let mut dv = Tensor::zeros(&[rows, d]);
        let mut dprobs_row = vec![0.0; t];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * hd;
                for ti in 0..t {
                    let prow = &bt.probs.data()[((bi * heads + h) * t + ti) * t..][..t];
                    let dctx_row = &dctx.data()[(bi * t + ti) * d + off..][..hd];

                    // dprobs[tj] = dctx . v_tj ; dv_tj += probs[tj] * dctx
                    for tj in 0..t {
                        let v_row = &bt.v.data()[(bi * t + tj) * d + off..][..hd];
                        let mut acc = 0.0;
                        for (x, y) in dctx_row.iter().zip(v_row) {
                            acc += x * y;
                        }
                        dprobs_row[tj] = acc;
                        let dv_row = &mut dv.data_mut()[(bi * t + tj) * d + off..][..hd];
                        for (o, &g) in dv_row.iter_mut().zip(dctx_row) {
                            *o += prow[tj] * g;
                        }
                    }
                    // Softmax backward: ds = p * (dp - sum(dp * p)).
                    let dot: f64 =
                        dprobs_row.iter().zip(prow).map(|(dp, p)| dp * p).sum();
                    // dq_ti += sum_tj ds[tj] * k_tj * scale ; dk_tj += ds[tj] * q_ti * scale
                    let q_row = &bt.q.data()[(bi * t + ti) * d + off..][..hd];
                    let dq_base = (bi * t + ti) * d + off;
                    for tj in 0..t {
                        let ds = prow[tj] * (dprobs_row[tj] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let k_row = &bt.k.data()[(bi * t + tj) * d + off..][..hd];
                        for i in 0..hd {
                            dq.data_mut()[dq_base + i] += ds * k_row[i];
                        }
                        let dk_row = &mut dk.data_mut()[(bi * t + tj) * d + off..][..hd];
                        for (o, &qv) in dk_row.iter_mut().zip(q_row) {
                            *o += ds * qv;
                        }
                    }
                }
            }
        }

        // Q/K/V projections share the same input y1.
        gemm_at_b(rows, d, d, bt.y1.data(), dq.data(), bg.wq.data_mut(), true);
        add_colsum(&dq, &mut bg.bq);
        gemm_at_b(rows, d, d, bt.y1.data(), dk.data(), bg.wk.data_mut(), true);
        add_colsum(&dk, &mut bg.bk);
        gemm_at_b(rows, d, d, bt.y1.data(), dv.data(), bg.wv.data_mut(), true);
        add_colsum(&dv, &mut bg.bv);
        let mut dy1 = Tensor::zeros(&[rows, d]);
        gemm_a_bt(rows, d, d, dq.data(), bp.wq.data(), dy1.data_mut(), true);
        gemm_a_bt(rows, d, d, dk.data(), bp.wk.data(), dy1.data_mut(), true);
        gemm_a_bt(rows, d, d, dv.data(), bp.wv.data(), dy1.data_mut(), true);

        let dx_ln = ln_backward(
            &dy1,
            &bt.xhat1,
            &bt.invstd1,
            &bp.norm1_scale,
            &mut bg.norm1_scale,
            &mut bg.norm1_shift,
        );
        // x_in feeds both the residual and LN1.
        for (v, &a) in dh.data_mut().iter_mut().zip(dx_ln.data()) {
            *v += a;
        }
        dx = dh;
    }

    // Embedding: class token, positional table, patch projection.
    let p = cfg.patches();
    let pd = cfg.patch_dim();
    for bi in 0..b {
        for (i, g) in grads.cls_token.data_mut().iter_mut().enumerate() {
            *g += dx.data()[bi * t * d + i];
        }
        for tok in 0..t {
            let src = (bi * t + tok) * d;
            let dst = tok * d;
            for i in 0..d {
                grads.pos_embed.data_mut()[dst + i] += dx.data()[src + i];
            }
        }
    }
    let mut dproj = Tensor::zeros(&[b * p, d]);
    for bi in 0..b {
        for tok in 0..p {
            let src = (bi * t + tok + 1) * d;
            let dst = (bi * p + tok) * d;
            dproj.data_mut()[dst..dst + d].copy_from_slice(&dx.data()[src..src + d]);
        }
    }
    gemm_at_b(b * p, pd, d, trace.patches.data(), dproj.data(), grads.embed_w.data_mut(), true);
    add_colsum(&dproj, &mut grads.embed_b);

    if weight_decay != 0.0 {
        let mut sq = 0.0;
        for ((_, _, g), (_, _, w)) in grads.named_mut().into_iter().zip(params.named()) {
            for (gv, &wv) in g.data_mut().iter_mut().zip(w.data()) {
                sq += wv * wv;
                *gv += weight_decay * wv;
            }
        }
        loss += 0.5 * weight_decay * sq;
    }

    Ok((loss, grads))
}
