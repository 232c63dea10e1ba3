use duplo::sits::{
    compute_ndvi, gapfill_linear, generate_synthetic, normalize_minmax, object_split, NormalizationStats, SitsCube,
    SplitPart, SyntheticSpec,
};
use proptest::prelude::*;

fn two_band(red: Vec<f32>, nir: Vec<f32>) -> SitsCube {
    let n = red.len();
    let mut data = red;
    data.extend(nir);
    SitsCube::new(vec![0], vec!["B4".into(), "B8".into()], 1, n, data, None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ndvi_stays_in_unit_interval(
        pairs in prop::collection::vec((0.0f32..2.0, 0.0f32..2.0), 1..40),
    ) {
        let (red, nir): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
        let n = red.len();
        let out = compute_ndvi(&two_band(red, nir)).unwrap();
        prop_assert_eq!(out.bands.last().map(String::as_str), Some("NDVI"));
        for &v in &out.data[2 * n..] {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn gapfill_keeps_observations_and_stays_in_their_hull(
        obs in prop::collection::vec((0.0f32..1.0, any::<bool>()), 2..12),
    ) {
        let t = obs.len();
        let mut valid: Vec<bool> = obs.iter().map(|o| o.1).collect();
        valid[t / 2] = true;
        let vals: Vec<f32> = obs.iter().map(|o| o.0).collect();
        let days: Vec<i64> = (0..t as i64).map(|k| 3 * k + k * k).collect();
        let cube = SitsCube::new(days, vec!["B".into()], 1, 1, vals.clone(), Some(valid.clone())).unwrap();
        let filled = gapfill_linear(&cube).unwrap();
        let seen: Vec<f32> = vals.iter().zip(&valid).filter(|p| *p.1).map(|p| *p.0).collect();
        let lo = seen.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = seen.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        for k in 0..t {
            if valid[k] {
                prop_assert_eq!(filled.data[k], vals[k]);
            } else {
                prop_assert!(filled.data[k] >= lo - 1e-6 && filled.data[k] <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn minmax_output_spans_unit_interval(values in prop::collection::vec(-5.0f32..5.0, 2..50)) {
        prop_assume!(values.iter().any(|&v| v != values[0]));
        let n = values.len();
        let cube = SitsCube::new(vec![0], vec!["B".into()], 1, n, values, None).unwrap();
        let stats = NormalizationStats::compute(&cube, None).unwrap();
        let out = normalize_minmax(&cube, &stats).unwrap();
        prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(out.data.contains(&0.0) && out.data.contains(&1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn split_never_straddles_objects(seed in any::<u64>()) {
        let spec = SyntheticSpec { height: 32, width: 32, objects_per_class: 5, object_size: (2, 3), timestamps: 2, ..SyntheticSpec::default() };
        let (_, labels) = generate_synthetic(&spec).unwrap();
        let split = object_split(&labels, [0.3, 0.2, 0.5], seed).unwrap();
        let masks: Vec<Vec<bool>> = SplitPart::ALL.iter().map(|&p| split.pixel_mask(&labels, p)).collect();
        for (i, &l) in labels.labels.iter().enumerate() {
            let hits = masks.iter().filter(|m| m[i]).count();
            prop_assert_eq!(hits, usize::from(l != 0));
        }
        for part in SplitPart::ALL {
            prop_assert!(split.objects(part).next().is_some());
        }
    }
}
