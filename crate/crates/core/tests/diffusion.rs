use pmtk::pmd::*;
use pmtk::{dwt2, Tensor};
use proptest::prelude::*;

fn field(max: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1usize..=max / 2, 1usize..=max / 2).prop_flat_map(|(h, w)| {
        prop::collection::vec(-2.0f64..2.0, 4 * h * w)
            .prop_map(move |v| Tensor::new(&[1, 2 * h, 2 * w], v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fd_conserves_mean(u in field(24), dt in 0.01f64..=FD_MAX_DT, k in 0.05f64..5.0) {
        let v = pmd_step_fd(&u, &DiffusionConfig::fd(k, 1, dt)).unwrap();
        let (m0, m1) = (u.mean(), v.mean());
        prop_assert!((m1 - m0).abs() <= 1e-5 * m0.abs().max(1.0));
    }

    #[test]
    fn fd_extremum_principle(u in field(24), dt in 0.01f64..=FD_MAX_DT, k in 0.05f64..5.0) {
        let v = pmd_step_fd(&u, &DiffusionConfig::fd(k, 1, dt)).unwrap();
        let max = |t: &Tensor<f64>| t.data().iter().cloned().fold(f64::MIN, f64::max);
        let min = |t: &Tensor<f64>| t.data().iter().cloned().fold(f64::MAX, f64::min);
        prop_assert!(max(&v) <= max(&u) + 1e-6);
        prop_assert!(min(&v) >= min(&u) - 1e-6);
    }

    #[test]
    fn attenuate_shrinks_detail_and_keeps_ll(u in field(32), k in 0.05f64..5.0) {
        let v = pmd_step_dwt(&u, &DiffusionConfig::dwt(k, 1, DwtMode::Attenuate)).unwrap();
        let (a, b) = (dwt2(&u).unwrap(), dwt2(&v).unwrap());
        prop_assert!(b.detail_energy() <= a.detail_energy() * (1.0 + 1e-12) + 1e-12);
        prop_assert!(a.ll.max_abs_diff(&b.ll) <= 1e-12);
    }

    #[test]
    fn diffusivity_in_unit_interval(m in prop::collection::vec(0.0f64..1e3, 1..64), k in 1e-3f64..1e3) {
        let g = diffusivity(&Tensor::new(&[m.len()], m).unwrap(), k).unwrap();
        prop_assert!(g.data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }
}

#[test]
fn diffusivity_reference_points() {
    for k in [0.5, 1.0, 2.0, 7.0] {
        let m = Tensor::<f64>::new(&[3], vec![0.0, k, 3.0 * k]).unwrap();
        assert_eq!(diffusivity(&m, k).unwrap().data(), &[1.0, 0.5, 0.1]);
    }
}

#[test]
fn fd_rejects_unstable_steps() {
    let u = Tensor::<f64>::zeros(&[1, 4, 4]);
    assert!(matches!(pmd_step_fd(&u, &DiffusionConfig::fd(1.0, 1, 0.26)), Err(pmtk::Error::Config(_))));
}

#[test]
fn trace_starts_at_input_and_smooths() {
    let (u, _) = two_region_field(32, 0.1, 3);
    let u = u.map(|v| (0.25 + 0.5 * v).clamp(0.0, 1.0));
    let (out, rows) = denoise_trace(&u, Scheme::Fd, 0.5, 0.2, 5).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), [0, 1, 2, 3, 4, 5]);
    assert!(rows[5].flat_variance < rows[0].flat_variance);
    assert!(rows[0].edge_contrast > 0.3);
    let (same, rows0) = denoise_trace(&u, Scheme::DwtAttenuate, 1.0, 1.0, 0).unwrap();
    assert_eq!(same, u);
    assert_eq!(rows0.len(), 1);
    assert_ne!(out, u);
}

#[test]
fn blur_control_hits_the_target() {
    let (u, fg) = two_region_field(32, 0.15, 1);
    let (sigma, b) = blur_matching(&u, &fg, 0.3).unwrap();
    assert!(sigma > 0.0);
    let r = edge_report(u.data(), b.data(), &fg).unwrap();
    assert!((r.std_reduction - 0.3).abs() < 1e-6, "{r:?}");
}
