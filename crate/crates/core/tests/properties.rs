use lvseg::eval::{ef_class, rmse, EfBands};
use lvseg::ingest::{parse_nifti, NiftiDatatype, NiftiVolume, NiftiWriter};
use lvseg::postproc::{filter_by_center, Connectivity};
use lvseg::volume::{ensemble_majority, integrate, IntegrationMode};
use lvseg::{Image, Mask};
use proptest::prelude::*;

fn stack() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..15).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..5000.0, n),
            prop::collection::vec(0.1f64..20.0, n),
        )
            .prop_map(|(areas, gaps)| {
                let locs = gaps
                    .iter()
                    .scan(0.0, |z, g| {
                        *z += g;
                        Some(*z)
                    })
                    .collect();
                (areas, locs)
            })
    })
}

fn mask(rows: usize, cols: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(prop::bool::weighted(0.4), rows * cols)
        .prop_map(move |v| Image::from_vec(rows, cols, v.into_iter().map(u8::from).collect()))
}

proptest! {
    #[test]
    fn integration_ignores_slice_order((areas, locs) in stack()) {
        for mode in [IntegrationMode::ArithmeticMean, IntegrationMode::TruncatedCone] {
            let fwd = integrate(&areas, &locs, mode).unwrap();
            let ra: Vec<f64> = areas.iter().rev().copied().collect();
            let rl: Vec<f64> = locs.iter().rev().copied().collect();
            let rev = integrate(&ra, &rl, mode).unwrap();
            prop_assert!((fwd - rev).abs() <= 1e-9 * fwd.abs().max(1.0));
        }
    }

    #[test]
    fn mean_rule_bounds_cone_rule((areas, locs) in stack()) {
        let am = integrate(&areas, &locs, IntegrationMode::ArithmeticMean).unwrap();
        let tc = integrate(&areas, &locs, IntegrationMode::TruncatedCone).unwrap();
        prop_assert!(am >= tc - 1e-9 * am.max(1.0));
        prop_assert!(tc >= 0.0);
    }

    #[test]
    fn integration_scales_with_area((areas, locs) in stack(), k in 0.1f64..10.0) {
        let scaled: Vec<f64> = areas.iter().map(|a| a * k).collect();
        for mode in [IntegrationMode::ArithmeticMean, IntegrationMode::TruncatedCone] {
            let v = integrate(&areas, &locs, mode).unwrap();
            let s = integrate(&scaled, &locs, mode).unwrap();
            prop_assert!((s - k * v).abs() <= 1e-9 * s.abs().max(1.0));
        }
    }

    #[test]
    fn rmse_is_symmetric_and_zero_on_equal(v in prop::collection::vec(-100.0f64..100.0, 1..30), shift in -5.0f64..5.0) {
        let w: Vec<f64> = v.iter().map(|x| x + shift).collect();
        prop_assert_eq!(rmse(&v, &v).unwrap(), 0.0);
        let a = rmse(&v, &w).unwrap();
        prop_assert!((a - rmse(&w, &v).unwrap()).abs() < 1e-12);
        prop_assert!((a - shift.abs()).abs() < 1e-9);
    }

    #[test]
    fn ef_bands_are_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let bands = EfBands::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(ef_class(lo, &bands).unwrap() <= ef_class(hi, &bands).unwrap());
    }

    #[test]
    fn center_filter_keeps_a_subset(m in mask(12, 10), r in 0.0f64..11.0, c in 0.0f64..9.0) {
        let out = filter_by_center(&m, (r, c), Connectivity::Eight);
        prop_assert!(out.data().iter().zip(m.data()).all(|(o, i)| o <= i));
        prop_assert_eq!(filter_by_center(&out, (r, c), Connectivity::Eight), out);
    }

    #[test]
    fn majority_of_copies_is_identity(m in mask(6, 7), k in 1usize..6) {
        let copies = vec![m.clone(); k];
        prop_assert_eq!(ensemble_majority(&copies).unwrap(), m);
    }

    #[test]
    fn transpose_is_an_involution(m in mask(5, 9)) {
        prop_assert_eq!(m.transpose().transpose(), m);
    }

    #[test]
    fn nifti_round_trip(values in prop::collection::vec(0u16..=u16::MAX, 2 * 3 * 4 * 5)) {
        let vol = NiftiVolume {
            slices: 2,
            frames: 3,
            rows: 4,
            cols: 5,
            spacing: [1.0, 1.5, 10.0],
            datatype: NiftiDatatype::U16,
            data: values.iter().map(|&v| f32::from(v)).collect(),
        };
        let back = parse_nifti(&NiftiWriter::new(NiftiDatatype::U16).write(&vol)).unwrap();
        prop_assert_eq!(back.data, vol.data);
        prop_assert_eq!(back.spacing, vol.spacing);
    }
}
