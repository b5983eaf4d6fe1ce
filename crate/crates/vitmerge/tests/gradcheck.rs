//! Finite-difference check of the backward pass.
//!
//! The loss here is recomputed from `forward` plus a test-side cross-entropy,
//! so the check verifies that `loss_and_grads` differentiates exactly the
//! function the forward pass computes. Coordinates are sampled from every
//! parameter group so no part of the backward graph goes untested.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vitmerge::train::{generate, loss_and_grads, Family, Split, SyntheticTaskSpec};
use vitmerge::vit::forward;
use vitmerge::{Group, Tensor, ViTConfig, ViTParams};

/// Mean cross-entropy plus the quadratic weight penalty, no gradients.
fn loss_ref(params: &ViTParams, images: &Tensor, labels: &[usize], wd: f64) -> f64 {
    let logits = forward(params, images).expect("forward");
    let k = logits.cols();
    let mut ce = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        ce += max + sum.ln() - row[label];
        assert!(label < k);
    }
    let mut penalty = 0.0;
    for (_, _, t) in params.named() {
        penalty += t.data().iter().map(|&v| v * v).sum::<f64>();
    }
    ce / labels.len() as f64 + 0.5 * wd * penalty
}

#[test]
fn analytic_gradients_match_central_differences() {
    let config = ViTConfig::desk_default(3);
    let params = ViTParams::init(&config, 99).expect("init");
    let task = SyntheticTaskSpec {
        task_id: 1,
        num_classes: 3,
        family: Family::Rings,
        noise_std: 0.05,
        seed: 7,
    };
    let data = generate(&task, Split::Train, 4, config.channels, config.image_size).unwrap();
    let (images, labels) = data.batch(&[0, 1, 2, 3]);
    let wd = 1e-4;

    let (loss, grads) = loss_and_grads(&params, &images, &labels, wd).expect("grads");
    assert!((loss - loss_ref(&params, &images, &labels, wd)).abs() <= 1e-12 * loss.abs());

    // 50 coordinates from each parameter group.
    let groups = [Group::Embedding, Group::Norm, Group::Attention(0), Group::Mlp(0), Group::Classifier];
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut coords: Vec<(usize, usize)> = Vec::new();
    let named = params.named();
    for want in groups {
        let same_kind = |g: Group| -> bool {
            matches!(
                (want, g),
                (Group::Embedding, Group::Embedding)
                    | (Group::Norm, Group::Norm)
                    | (Group::Attention(_), Group::Attention(_))
                    | (Group::Mlp(_), Group::Mlp(_))
                    | (Group::Classifier, Group::Classifier)
            )
        };
        let pool: Vec<(usize, usize)> = named
            .iter()
            .enumerate()
            .filter(|(_, (_, g, _))| same_kind(*g))
            .map(|(i, (_, _, t))| (i, t.len()))
            .collect();
        assert!(!pool.is_empty(), "no tensors in group {want:?}");
        let total: usize = pool.iter().map(|(_, l)| l).sum();
        for _ in 0..50 {
            let mut pick = rng.gen_range(0..total);
            for &(ti, len) in &pool {
                if pick < len {
                    coords.push((ti, pick));
                    break;
                }
                pick -= len;
            }
        }
    }
    assert!(coords.len() >= 200);

    let h = 1e-4;
    let mut worst: (f64, String) = (0.0, String::new());
    let mut probe = params.clone();
    for (ti, ei) in coords {
        let name = named[ti].0.clone();
        let analytic = grads.named()[ti].2.data()[ei];
        let base = probe.named()[ti].2.data()[ei];

        probe.named_mut()[ti].2.data_mut()[ei] = base + h;
        let up = loss_ref(&probe, &images, &labels, wd);
        probe.named_mut()[ti].2.data_mut()[ei] = base - h;
        let down = loss_ref(&probe, &images, &labels, wd);
        probe.named_mut()[ti].2.data_mut()[ei] = base;

        let fd = (up - down) / (2.0 * h);
        let err = (analytic - fd).abs();
        let allowed = (1e-4 * analytic.abs().max(fd.abs())).max(1e-6);
        assert!(
            err <= allowed,
            "{name}[{ei}]: analytic {analytic:.9e} vs fd {fd:.9e} (err {err:.2e})"
        );
        let rel = err / analytic.abs().max(fd.abs()).max(1e-12);
        if rel > worst.0 {
            worst = (rel, format!("{name}[{ei}]"));
        }
    }
    println!("worst relative disagreement: {:.3e} at {}", worst.0, worst.1);
}
