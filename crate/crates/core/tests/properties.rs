use proptest::prelude::*;

use topogate::model::gate::{gate_alpha, GateParams};
use topogate::nifti::{decode_nifti, encode_nifti};
use topogate::quality::{q_reg, quality_vector, ssim_slice, QualityConfig, QualityVector};
use topogate::synth::{generate_cohort, CohortSpec, PseudoChange};
use topogate::topology::{bottleneck_distance, sublevel_persistence_h0, PersistenceDiagram};
use topogate::train::{auroc, brier};
use topogate::volume::{resample_isotropic, temporal_difference, CasePair, Volume};

fn volume(dims: [usize; 3], data: Vec<f64>) -> Volume {
    Volume::new(dims, [1.0; 3], [0.0; 3], data).unwrap()
}

fn diagram() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-50.0f64..50.0, 0.01f64..30.0).prop_map(|(b, p)| (b, b + p)), 0..6)
}

fn hu_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1000.0f64..400.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn nifti_round_trip(dims in (1usize..7, 1usize..7, 1usize..7), seed in any::<u64>()) {
        let n = dims.0 * dims.1 * dims.2;
        let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 1) % 100_000) as f32 / 7.0 - 5000.0) as f64).collect();
        let v = Volume::new([dims.0, dims.1, dims.2], [0.5, 1.25, 2.0], [1.5, -3.0, 7.25], data).unwrap();
        prop_assert_eq!(decode_nifti(&encode_nifti(&v)).unwrap(), v);
    }

    #[test]
    fn difference_with_itself_is_zero(vals in hu_values(64)) {
        let v = volume([4; 3], vals);
        prop_assert!(temporal_difference(&v, &v).unwrap().data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn resampling_reproduces_affine_fields(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0, d in -100.0f64..100.0) {
        let v = Volume::new([5, 4, 3], [1.0, 1.5, 2.0], [0.0; 3], vec![0.0; 60]).unwrap();
        let f = |p: [f64; 3]| a * p[0] + b * p[1] + c * p[2] + d;
        let data: Vec<f64> = (0..60).map(|i| f(v.voxel_to_mm([i % 5, (i / 5) % 4, i / 20]))).collect();
        let v = v.with_data(data).unwrap();
        let r = resample_isotropic(&v, 0.5).unwrap();
        let [nx, ny, nz] = r.dims();
        for z in 0..nz { for y in 0..ny { for x in 0..nx {
            let want = f(r.voxel_to_mm([x, y, z]));
            let got = r.get(x, y, z);
            // Points beyond the last source sample are clamped; only check inside the source extent.
            let p = r.voxel_to_mm([x, y, z]);
            if p[0] <= 4.0 && p[1] <= 4.5 && p[2] <= 4.0 {
                prop_assert!((got - want).abs() <= 1e-5 * want.abs().max(1.0), "{got} vs {want}");
            }
        }}}
    }

    #[test]
    fn quality_components_stay_in_range(fu in hu_values(216), bl in hu_values(216), tau in 0.01f64..10.0, kappa in 1e-4f64..10.0) {
        let cfg = QualityConfig { tau, kappa_ct: kappa, ..QualityConfig::default() };
        let pair = CasePair::new("c", "p", volume([6; 3], fu), volume([6; 3], bl), [0.0; 3], 0).unwrap();
        let q = quality_vector(&pair, &cfg).unwrap();
        prop_assert!((0.0..1.0).contains(&q.q_ct));
        prop_assert!((0.0..=1.0).contains(&q.q_reg));
        prop_assert!(q.q_topo > 0.0 && q.q_topo <= 1.0);
    }

    #[test]
    fn ssim_is_symmetric(a in prop::collection::vec(0.0f64..1.0, 16), b in prop::collection::vec(0.0f64..1.0, 16)) {
        let cfg = QualityConfig::default();
        prop_assert_eq!(ssim_slice(&a, &b, &cfg).unwrap(), ssim_slice(&b, &a, &cfg).unwrap());
    }

    #[test]
    fn self_registration_is_perfect(vals in hu_values(64)) {
        let v = volume([4; 3], vals);
        let r = q_reg(&v, &v, &QualityConfig::default()).unwrap();
        prop_assume!(r.used_slices > 0);
        prop_assert_eq!(r.q_reg, 1.0);
    }

    #[test]
    fn diagram_points_are_ordered(vals in prop::collection::vec(-10.0f64..10.0, 1..60)) {
        let n = vals.len();
        let d = sublevel_persistence_h0(&volume([n, 1, 1], vals));
        prop_assert!(d.points.iter().all(|p| p.death >= p.birth));
    }

    #[test]
    fn bottleneck_is_a_metric(a in diagram(), b in diagram(), c in diagram()) {
        let (da, db, dc) = (PersistenceDiagram::new(a.clone()), PersistenceDiagram::new(b.clone()), PersistenceDiagram::new(c));
        let ab = bottleneck_distance(&da, &db);
        prop_assert_eq!(ab, bottleneck_distance(&db, &da));
        prop_assert!(bottleneck_distance(&da, &dc) <= ab + bottleneck_distance(&db, &dc) + 1e-9);
        prop_assert_eq!(bottleneck_distance(&da, &da), 0.0);
        if da.sorted() != db.sorted() {
            prop_assert!(ab > 0.0);
        }
    }

    #[test]
    fn gate_is_bounded_and_monotone(theta in prop::array::uniform3(-6.0f64..6.0), bias in -4.0f64..4.0, q in prop::array::uniform3(0.0f64..1.0), dq in 0.01f64..0.5) {
        let g = GateParams { theta, bias };
        prop_assert!(g.weights().iter().all(|&w| w >= 0.0));
        let alpha = |q: [f64; 3]| gate_alpha(&g, &QualityVector::new(q[0], q[1], q[2]));
        let a = alpha(q);
        prop_assert!(a > 0.0 && a < 1.0);
        let bump = |k: usize| { let mut r = q; r[k] += dq; r };
        prop_assert!(alpha(bump(0)) >= a);
        prop_assert!(alpha(bump(1)) <= a);
        prop_assert!(alpha(bump(2)) >= a);
    }

    #[test]
    fn auroc_ignores_monotone_transforms(s in prop::collection::vec(-3.0f64..3.0, 4..80), seed in any::<u64>(), k in 0.1f64..4.0) {
        let mut y: Vec<u8> = (0..s.len()).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
        y[0] = 0;
        y[1] = 1;
        let a = auroc(&s, &y).unwrap();
        let t: Vec<f64> = s.iter().map(|v| (k * v).tanh() * 3.0 + 1.0).collect();
        prop_assert!((auroc(&t, &y).unwrap() - a).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn prevalence_scores_respect_base_rate_bound(y in prop::collection::vec(0u8..2, 1..200)) {
        let prev = y.iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64;
        let b = brier(&vec![prev; y.len()], &y).unwrap();
        prop_assert!(b <= 0.25 + 1e-12);
        prop_assert!((b - prev * (1.0 - prev)).abs() < 1e-12);
    }
}

#[test]
fn registration_signal_separates_pseudo_misregistration() {
    let spec = CohortSpec {
        noise_sigma_hu: 0.0,
        corrupt_fraction: 0.0,
        misreg_mm: 8.0,
        seed: 3,
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(&spec).unwrap();
    let cfg = QualityConfig::default();
    let mean_q = |keep: &dyn Fn(&topogate::synth::ManifestRow) -> bool| {
        let qs: Vec<f64> = cohort
            .iter()
            .filter(|c| keep(&c.meta))
            .map(|c| q_reg(&c.pair.fu_roi, &c.pair.bl_roi, &cfg).unwrap().q_reg)
            .collect();
        qs.iter().sum::<f64>() / qs.len() as f64
    };
    let median_t = {
        let mut t: Vec<f64> = cohort.iter().map(|c| c.meta.translation_mm).collect();
        t.sort_by(f64::total_cmp);
        t[t.len() / 2]
    };
    let low_misreg = mean_q(&|m| m.pseudo_change != PseudoChange::Misregistration && m.translation_mm < median_t);
    let pseudo = mean_q(&|m| m.pseudo_change == PseudoChange::Misregistration);
    assert!(low_misreg > pseudo, "{low_misreg} vs {pseudo}");
}

#[test]
fn corrupted_pairs_have_lower_registration_quality() {
    let spec = CohortSpec {
        n_pairs: 200,
        n_patients: 160,
        corrupt_fraction: 0.15,
        seed: 11,
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(&spec).unwrap();
    assert_eq!(cohort.iter().filter(|c| c.meta.corrupt).count(), 30);
    let cfg = QualityConfig::default();
    let median = |corrupt: bool| {
        let mut q: Vec<f64> = cohort
            .iter()
            .filter(|c| c.meta.corrupt == corrupt)
            .map(|c| q_reg(&c.pair.fu_roi, &c.pair.bl_roi, &cfg).unwrap().q_reg)
            .collect();
        q.sort_by(f64::total_cmp);
        q[q.len() / 2]
    };
    assert!(median(true) < median(false));
}
