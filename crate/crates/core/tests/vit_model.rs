mod common;

use common::{lively_params, random_image, reference_forward};
use histovit::checkpoint::{load_checkpoint, save_checkpoint};
use histovit::vit::{forward, init_params, patchify, ForwardOptions};
use histovit::{Tensor, ViTConfig};

fn logits(p: &histovit::ViTParams, img: &Tensor) -> Vec<f64> {
    forward(p, img, &ForwardOptions::default()).unwrap().logits.into_data()
}

#[test]
fn logits_match_plain_loop_recomposition() {
    let mut linear_head = ViTConfig::tiny();
    linear_head.head_hidden = 0;
    for cfg in [ViTConfig::tiny(), linear_head] {
        for seed in 0..5 {
            let p = lively_params(&cfg, seed);
            let img = random_image(&cfg.image_shape(), 50 + seed);
            let got = logits(&p, &img);
            let want = reference_forward(&p, &img, None).logits;
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "seed {seed}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn attention_matches_reference_and_rows_sum_to_one() {
    let cfg = ViTConfig::tiny();
    let p = lively_params(&cfg, 3);
    let img = random_image(&cfg.image_shape(), 4);
    let opts = ForwardOptions {
        retain_attention: true,
        ..Default::default()
    };
    let att = forward(&p, &img, &opts).unwrap().attention.unwrap();
    let reference = reference_forward(&p, &img, None).attention;
    let t = cfg.num_tokens();
    for (b, block) in att.iter().enumerate() {
        assert_eq!(block.shape(), &[cfg.heads, t, t]);
        for (r, row) in block.data().chunks(t).enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let (h, i) = (r / t, r % t);
            for (j, v) in row.iter().enumerate() {
                assert!((v - reference[b][h][i][j]).abs() < 1e-12);
            }
        }
    }
}

fn swap_patches(img: &Tensor, cfg: &ViTConfig, a: usize, b: usize) -> Tensor {
    let (s, ps, grid) = (cfg.image_size, cfg.patch_size, cfg.grid());
    let mut out = img.clone();
    for c in 0..cfg.channels {
        for y in 0..ps {
            for x in 0..ps {
                let at = |k: usize| c * s * s + ((k / grid) * ps + y) * s + (k % grid) * ps + x;
                out.data_mut()[at(a)] = img.data()[at(b)];
                out.data_mut()[at(b)] = img.data()[at(a)];
            }
        }
    }
    out
}

#[test]
fn swapping_patches_with_their_positions_keeps_logits() {
    let cfg = ViTConfig::tiny();
    let d = cfg.embed_dim;
    for seed in 0..10u64 {
        let p = lively_params(&cfg, seed);
        let img = random_image(&cfg.image_shape(), seed + 1000);
        let (a, b) = ((seed as usize) % 16, (seed as usize * 7 + 3) % 16);
        let swapped = swap_patches(&img, &cfg, a, b);
        let mut q = p.clone();
        for k in 0..d {
            q.pos_embed.data_mut().swap((a + 1) * d + k, (b + 1) * d + k);
        }
        let before = logits(&p, &img);
        let after = logits(&q, &swapped);
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-10);
        }
        if a != b {
            // without moving the positions the output generally changes
            let moved = logits(&p, &swapped);
            assert!(before.iter().zip(&moved).any(|(x, y)| (x - y).abs() > 1e-9));
        }
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let cfg = ViTConfig::tiny();
    let p = lively_params(&cfg, 11);
    let img = random_image(&cfg.image_shape(), 12);
    assert_eq!(logits(&p, &img), logits(&p, &img));
}

#[test]
fn patchify_round_trip() {
    let img = random_image(&[3, 32, 32], 2);
    let m = patchify(&img, 8).unwrap();
    assert_eq!(m.shape(), &[16, 192]);
    let mut back = vec![f64::NAN; 3 * 32 * 32];
    for k in 0..16 {
        let (gy, gx) = (k / 4, k % 4);
        for (e, v) in m.data()[k * 192..(k + 1) * 192].iter().enumerate() {
            let (c, y, x) = (e / 64, (e / 8) % 8, e % 8);
            back[c * 1024 + (gy * 8 + y) * 32 + gx * 8 + x] = *v;
        }
    }
    assert_eq!(back, img.data());
    let single = random_image(&[3, 16, 16], 3);
    assert_eq!(patchify(&single, 16).unwrap().data(), single.data());
}

#[test]
fn checkpoint_files_round_trip_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = init_params(&ViTConfig::tiny(), 21).unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&p, &a).unwrap();
    let (loaded, cfg) = load_checkpoint(&a).unwrap();
    assert_eq!(cfg, ViTConfig::tiny());
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded.checksum(), p.checksum());
}

#[test]
fn geometry_mismatch_is_rejected() {
    let p = init_params(&ViTConfig::tiny(), 1).unwrap();
    assert!(forward(&p, &Tensor::zeros(&[3, 16, 16]), &ForwardOptions::default()).is_err());
}
