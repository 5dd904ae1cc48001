use proptest::prelude::*;

use reg2rg::region::{
    apply_mask, bounding_box, crop, prepare_geometry_input, prepare_sample, prepare_texture_input, resample,
    resample_mask, Interpolation, RegionConfig,
};
use reg2rg::synth::{synthesize_samples, translated_twins, SynthConfig};
use reg2rg::volume::{Area, RegionMask, Volume};

#[test]
fn source_box_matches_organ_geometry() {
    let cfg = SynthConfig {
        samples: 6,
        regions_per_sample: 4,
        ..SynthConfig::default()
    };
    let samples = synthesize_samples(&cfg, 5).unwrap();
    for margin in [0, 2] {
        let rc = RegionConfig {
            margin,
            ..RegionConfig::default()
        };
        for s in &samples {
            for (m, organ) in s.masks.iter().zip(&s.truth.organs) {
                assert_eq!(m.area(), organ.area);
                let (lo, hi) = organ.bounds();
                let t = prepare_texture_input(&s.volume, m, &rc).unwrap();
                for a in 0..3 {
                    assert_eq!(t.source_box.lo[a], lo[a].saturating_sub(margin));
                    assert_eq!(t.source_box.hi[a], (hi[a] + margin).min(cfg.dims[a]));
                }
            }
        }
    }
}

#[test]
fn translated_twins_decouple_texture_from_position() {
    let rc = RegionConfig::default();
    let (v, a, b) = translated_twins([32, 32, 16], Area::Abdomen, [7, 7, 4], [5.0, 4.0, 2.5], [16, 15, 7]).unwrap();
    let ta = prepare_texture_input(&v, &a, &rc).unwrap();
    let tb = prepare_texture_input(&v, &b, &rc).unwrap();
    assert_eq!(ta.grid, tb.grid);
    assert_ne!(ta.source_box, tb.source_box);
    let ga = prepare_geometry_input(&a, &rc).unwrap();
    let gb = prepare_geometry_input(&b, &rc).unwrap();
    assert_ne!(ga.grid, gb.grid);
    assert_eq!(ga.grid.count(), gb.grid.count());
}

#[test]
fn prepared_sample_shapes() {
    let rc = RegionConfig {
        texture_input_dims: [16, 16, 8],
        geometry_input_dims: [8, 8, 4],
        ..RegionConfig::default()
    };
    let s = &synthesize_samples(&SynthConfig::default(), 1).unwrap()[0];
    let p = prepare_sample(&s.sample_id, &s.volume, &s.masks, &rc).unwrap();
    assert_eq!(p.areas(), s.masks.iter().map(|m| m.area()).collect::<Vec<_>>());
    assert_eq!(p.global.dims(), [16, 16, 8]);
    for r in &p.regions {
        assert_eq!(r.texture.grid.dims(), [16, 16, 8]);
        assert_eq!(r.geometry.grid.dims(), [8, 8, 4]);
        assert_eq!(r.masked.dims(), [16, 16, 8]);
        assert!(r.texture.grid.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

fn volume_and_mask() -> impl Strategy<Value = (Volume, RegionMask)> {
    ([1usize..7, 1usize..7, 1usize..5]).prop_flat_map(|dims| {
        let n = dims.iter().product::<usize>();
        (
            proptest::collection::vec(-2000.0f32..2000.0, n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(vals, bits)| {
                let v = Volume::new(dims, [1.0; 3], vals).unwrap();
                let m = RegionMask::new(dims, Area::Heart, bits.iter().map(|&b| b as u8).collect()).unwrap();
                (v, m)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tight_box_holds_every_masked_voxel((v, m) in volume_and_mask()) {
        prop_assume!(!m.is_empty());
        let masked = apply_mask(&v, &m).unwrap();
        let b = bounding_box(&m, 0).unwrap();
        let c = crop(&masked, &b).unwrap();
        let d = v.dims();
        for x in 0..d[0] {
            for y in 0..d[1] {
                for z in 0..d[2] {
                    if m.get(x, y, z) != 0 {
                        prop_assert!(b.contains([x, y, z]));
                        prop_assert_eq!(c.get(x - b.lo[0], y - b.lo[1], z - b.lo[2]), masked.get(x, y, z));
                    }
                }
            }
        }
        // Tight: every face touches the mask.
        for a in 0..3 {
            let on_face = |coord: usize| {
                (0..d[0]).any(|x| (0..d[1]).any(|y| (0..d[2]).any(|z| {
                    [x, y, z][a] == coord && m.get(x, y, z) != 0
                })))
            };
            prop_assert!(on_face(b.lo[a]) && on_face(b.hi[a] - 1));
        }
    }

    #[test]
    fn masking_twice_changes_nothing((v, m) in volume_and_mask()) {
        let once = apply_mask(&v, &m).unwrap();
        prop_assert_eq!(apply_mask(&once, &m).unwrap(), once);
    }

    #[test]
    fn resampling_keeps_constants_and_binary_masks(
        c in -1000.0f32..1000.0,
        (v, m) in volume_and_mask(),
        target in [1usize..9, 1usize..9, 1usize..6],
    ) {
        let flat = Volume::filled(v.dims(), c);
        for mode in [Interpolation::Trilinear, Interpolation::Nearest] {
            let r = resample(&flat, target, mode).unwrap();
            prop_assert_eq!(r.dims(), target);
            prop_assert!(r.data().iter().all(|&x| (x - c).abs() <= 1e-3 * c.abs().max(1.0)));
        }
        let rm = resample_mask(&m, target).unwrap();
        prop_assert!(rm.data().iter().all(|&b| b <= 1));
    }
}
