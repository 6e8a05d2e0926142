//! Library metrics and losses against the loop-based references in `common`.

mod common;

use atfuse::image::GrayImage;
use atfuse::loss::{importance_map, partition_masks, segmented_pixel_loss, sobel_grad_mag, texture_loss, total_loss, LossConfig};
use atfuse::metrics::{avg_gradient, entropy, qabf, spatial_frequency, std_dev};
use common::random_image;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

#[test]
fn metrics_match_reference_on_random_8x8() {
    for i in 0..20 {
        let f = random_image(8, 8, 3 * i);
        let a = random_image(8, 8, 3 * i + 1);
        let b = random_image(8, 8, 3 * i + 2);
        assert!(close(avg_gradient(&f), common::ag(&f), 1e-9), "ag {i}");
        assert!(close(entropy(&f), common::en(&f), 1e-9), "en {i}");
        assert!(close(std_dev(&f), common::sd(&f), 1e-9), "sd {i}");
        assert!(close(spatial_frequency(&f), common::sf(&f), 1e-9), "sf {i}");
        assert!(close(qabf(&f, &a, &b).unwrap(), common::qabf(&f, &a, &b), 1e-9), "qabf {i}");
    }
}

#[test]
fn sobel_magnitude_matches_reference_exactly_on_5x5() {
    let img = random_image(5, 5, 99);
    let lib = sobel_grad_mag(&img);
    let reference: Vec<f64> = common::grad_l1(&common::grid(&img)).into_iter().flatten().collect();
    assert_eq!(lib, reference);
}

#[test]
fn importance_matches_reference() {
    let img = random_image(4, 4, 5);
    let reference: Vec<f64> = common::importance(&img).into_iter().flatten().collect();
    for (a, b) in importance_map(&img).iter().zip(&reference) {
        assert!(close(*a, *b, 1e-12));
    }
}

#[test]
fn texture_loss_matches_reference_on_4x4() {
    for s in 0..5 {
        let (f, a, b) = (random_image(4, 4, s), random_image(4, 4, s + 10), random_image(4, 4, s + 20));
        assert!(close(texture_loss(&f, &a, &b).unwrap(), common::texture(&f, &a, &b), 1e-12));
    }
}

#[test]
fn segmented_loss_matches_reference_at_alpha_50() {
    for s in 0..5 {
        let (f, a, b) = (random_image(4, 4, s), random_image(4, 4, s + 10), random_image(4, 4, s + 20));
        let masks = partition_masks(&a, &b, 50.0).unwrap();
        assert_eq!(masks.part1, common::part1(&a, &b, 50.0));
        let (p1, p2, total) = segmented_pixel_loss(&f, &a, &b, &masks).unwrap();
        let (r1, r2) = common::segmented(&f, &a, &b, &masks.part1);
        assert!(close(p1, r1, 1e-12) && close(p2, r2, 1e-12));
        assert!(close(total, r1 + r2, 1e-12));
    }
}

#[test]
fn top_quarter_is_union_of_each_top_four() {
    // distinct importance values so the ranks are unambiguous
    for s in 0..10 {
        let (a, b) = (random_image(4, 4, 100 + s), random_image(4, 4, 200 + s));
        let masks = partition_masks(&a, &b, 25.0).unwrap();
        let top4 = |img: &GrayImage| {
            let pi = importance_map(img);
            let mut idx: Vec<usize> = (0..16).collect();
            idx.sort_by(|&i, &j| pi[j].total_cmp(&pi[i]));
            idx.truncate(4);
            idx
        };
        let mut expect = [false; 16];
        for i in top4(&a).into_iter().chain(top4(&b)) {
            expect[i] = true;
        }
        assert_eq!(masks.part1, expect);
    }
}

#[test]
fn average_constraint_arithmetic() {
    let ir = GrayImage::constant(4, 4, 0.0).unwrap();
    let vi = GrayImage::constant(4, 4, 1.0).unwrap();
    let f = GrayImage::constant(4, 4, 0.5).unwrap();
    let masks = partition_masks(&ir, &vi, 0.0).unwrap();
    let (p1, p2, _) = segmented_pixel_loss(&f, &ir, &vi, &masks).unwrap();
    assert_eq!((p1, p2), (0.0, 0.5));
}

#[test]
fn total_loss_identities() {
    let (f, a, b) = (random_image(6, 6, 1), random_image(6, 6, 2), random_image(6, 6, 3));
    let r = total_loss(&f, &a, &b, &LossConfig { alpha: 20.0, gamma: 0.0 }).unwrap();
    assert_eq!(r.total, r.l_pixel);
    let r = total_loss(&f, &a, &b, &LossConfig { alpha: 20.0, gamma: 0.7 }).unwrap();
    assert!(close(r.total, r.l_pixel + 0.7 * r.l_texture, 1e-12));
    assert!(close(r.l_pixel, r.l_part1 + r.l_part2, 1e-12));
    let same = total_loss(&a, &a, &a, &LossConfig { alpha: 37.0, gamma: 2.0 }).unwrap();
    assert_eq!(same.total, 0.0);
}
