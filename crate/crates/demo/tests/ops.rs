use stegattack_demo::{compare_images, schedule_table, transfer_loss_value};

#[test]
fn identical_and_noisy_copies() {
    let c = compare_images(3, 32, 0.0, 0.0).unwrap();
    assert_eq!(c.psnr_db(), f64::INFINITY);
    assert_eq!(c.ssim(), 1.0);
    assert_eq!(c.tv_original(), c.tv_distorted());
    assert_eq!(c.original_rgba().len(), 32 * 32 * 4);

    let noisy = compare_images(3, 32, 0.0, 0.2).unwrap();
    assert!(noisy.psnr_db().is_finite() && noisy.ssim() < 1.0);
    assert!(noisy.tv_distorted() > noisy.tv_original());
}

#[test]
fn rejects_tiny_images() {
    assert!(compare_images(0, 8, 0.0, 0.0).is_err());
}

#[test]
fn schedule_is_monotone() {
    let t = schedule_table(0.1, 0.9, 12, 4, 10, 20).unwrap();
    assert_eq!(t.len(), 40);
    assert_eq!((t[0], t[1]), (0.1, 12.0));
    assert_eq!(t[39], 4.0);
    for e in 1..20 {
        assert!(t[2 * e] <= t[2 * e - 2]);
        assert!(t[2 * e + 1] <= t[2 * e - 1]);
    }
    assert!(schedule_table(0.1, 1.5, 12, 4, 10, 5).is_err());
}

#[test]
fn half_scores_give_minus_two_ln_two() {
    let Ok(v) = transfer_loss_value(vec![0.5; 3], vec![0.5; 5]) else {
        panic!("valid scores rejected");
    };
    assert!((v + 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
}
