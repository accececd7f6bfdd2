//! Property tests over the geometry, tensor shape formulas, normalization,
//! and exchange formats.

use nodule_cad::ct::{
    encode_raw, parse_mhd, read_annotations, read_candidates, write_annotations, write_candidates,
    write_mhd_header, Annotation, Candidate, CandidateSource, CtVolume, ElementType,
};
use nodule_cad::fpr::normalize_hu;
use nodule_cad::geom::{decode_box, encode_box, generate_anchors, iou, nms, BBox};
use nodule_cad::tensor::{ops, Tensor};
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = BBox> {
    (
        -50.0..50.0f64,
        -50.0..50.0f64,
        0.1..40.0f64,
        0.1..40.0f64,
    )
        .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_is_symmetric_bounded_and_identity(a in arb_box(), b in arb_box()) {
        let ab = iou(&a, &b);
        let ba = iou(&b, &a);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_round_trips(anchor in arb_box(), gt in arb_box()) {
        let delta = encode_box(&anchor, &gt).unwrap();
        let back = decode_box(&anchor, &delta);
        prop_assert!((back.cx - gt.cx).abs() < 1e-9);
        prop_assert!((back.cy - gt.cy).abs() < 1e-9);
        prop_assert!((back.w - gt.w).abs() < 1e-9);
        prop_assert!((back.h - gt.h).abs() < 1e-9);
    }

    #[test]
    fn nms_output_is_an_antichain(
        boxes in proptest::collection::vec(arb_box(), 1..40),
        seed in 0u64..1000,
        thresh in 0.05..0.95f64,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = boxes.iter().map(|_| rng.gen()).collect();
        let kept = nms(&boxes, &scores, thresh).unwrap();
        // Kept indices descend in score; no kept box overlaps an
        // earlier-kept (higher-scored) one above the threshold.
        for w in kept.windows(2) {
            prop_assert!(scores[w[0]] >= scores[w[1]]);
        }
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                prop_assert!(iou(&boxes[a], &boxes[b]) <= thresh);
            }
        }
    }

    #[test]
    fn anchor_counts_and_centers_match_closed_form(
        h in 1usize..12,
        w in 1usize..12,
        stride in 1.0..20.0f64,
        n_sizes in 1usize..7,
    ) {
        let sizes: Vec<f64> = (0..n_sizes).map(|i| 4.0 + 2.0 * i as f64).collect();
        let set = generate_anchors((h, w), stride, &sizes).unwrap();
        prop_assert_eq!(set.len(), h * w * n_sizes);
        for (i, b) in set.boxes().iter().enumerate() {
            let (r, c, s) = set.cell_of(i);
            prop_assert!((b.cx - (c as f64 + 0.5) * stride).abs() < 1e-12);
            prop_assert!((b.cy - (r as f64 + 0.5) * stride).abs() < 1e-12);
            prop_assert_eq!(b.w, sizes[s]);
        }
    }

    #[test]
    fn conv_shape_formula_is_total(
        ext in 1usize..14,
        k in 1usize..6,
        stride in 1usize..4,
        pad in 0usize..3,
    ) {
        prop_assume!(k <= ext + 2 * pad);
        let want = (ext + 2 * pad - k) / stride + 1;
        let x = Tensor::ones(&[1, ext, ext]);
        let kr = Tensor::ones(&[1, 1, k, k]);
        let y = ops::conv2d(&x, &kr, stride, pad).unwrap();
        prop_assert_eq!(y.shape(), &[1, want, want]);
    }

    #[test]
    fn deconv_shape_formula_is_total(
        ext in 1usize..12,
        k in 1usize..6,
        stride in 1usize..5,
        pad in 0usize..3,
    ) {
        prop_assume!(pad < k);
        prop_assume!((ext - 1) * stride + k > 2 * pad);
        let want = (ext - 1) * stride + k - 2 * pad;
        let x = Tensor::ones(&[1, ext, ext]);
        let kr = Tensor::ones(&[1, 1, k, k]);
        let y = ops::transposed_conv2d(&x, &kr, stride, pad).unwrap();
        prop_assert_eq!(y.shape(), &[1, want, want]);
    }

    #[test]
    fn normalization_is_affine(a in -2000.0..2000.0f64, b in -2000.0..2000.0f64) {
        let lhs = normalize_hu(a, -600.0, 300.0) - normalize_hu(b, -600.0, 300.0);
        prop_assert!((lhs - (a - b) / 300.0).abs() < 1e-12);
    }

    #[test]
    fn world_voxel_transforms_invert(
        spacing in proptest::array::uniform3(0.1..5.0f64),
        origin in proptest::array::uniform3(-500.0..500.0f64),
        p in proptest::array::uniform3(-800.0..800.0f64),
    ) {
        let vol = CtVolume::new("v", (2, 2, 2), spacing, origin, vec![0.0; 8]).unwrap();
        let back = vol.voxel_to_world(vol.world_to_voxel(p));
        for i in 0..3 {
            prop_assert!((back[i] - p[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn annotation_csv_write_read_write_is_byte_identical(
        rows in proptest::collection::vec(
            (proptest::array::uniform3(-1000.0..1000.0f64), 0.1..60.0f64, 0usize..5),
            0..20,
        )
    ) {
        let annos: Vec<Annotation> = rows
            .iter()
            .map(|(c, d, uid)| Annotation {
                series_uid: format!("scan-{uid}"),
                center: *c,
                diameter_mm: *d,
            })
            .collect();
        let text1 = write_annotations(&annos);
        let back = read_annotations(&text1).unwrap();
        let text2 = write_annotations(&back);
        prop_assert_eq!(text1, text2);
        prop_assert_eq!(back, annos);
    }

    #[test]
    fn candidate_csv_write_read_write_is_byte_identical(
        rows in proptest::collection::vec(
            (proptest::array::uniform3(-1000.0..1000.0f64), 0.0..=1.0f64, 0usize..5),
            0..20,
        )
    ) {
        let cands: Vec<Candidate> = rows
            .iter()
            .map(|(c, p, uid)| Candidate {
                series_uid: format!("scan-{uid}"),
                center: *c,
                probability: *p,
                source: CandidateSource::Detector,
            })
            .collect();
        let text1 = write_candidates(&cands);
        let back = read_candidates(&text1).unwrap();
        let text2 = write_candidates(&back);
        prop_assert_eq!(text1, text2);
    }

    #[test]
    fn mhd_write_read_write_is_byte_identical(
        seed in 0u64..5000,
        nx in 1usize..6,
        ny in 1usize..6,
        nz in 1usize..6,
        as_short in proptest::bool::ANY,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let etype = if as_short { ElementType::Short } else { ElementType::Float };
        let data: Vec<f64> = (0..nx * ny * nz)
            .map(|_| {
                if as_short {
                    rng.gen_range(-1024i32..3072) as f64
                } else {
                    rng.gen_range(-1024.0f32..3072.0) as f64
                }
            })
            .collect();
        let vol = CtVolume::new(
            "rt",
            (nx, ny, nz),
            [
                rng.gen_range(0.2..3.0),
                rng.gen_range(0.2..3.0),
                rng.gen_range(0.2..5.0),
            ],
            [rng.gen_range(-300.0..300.0), 0.25, -7.5],
            data,
        )
        .unwrap();
        let header1 = write_mhd_header(&vol, etype, "rt.raw");
        let raw1 = encode_raw(&vol, etype);
        let back = parse_mhd(&header1, &raw1, "rt").unwrap();
        let header2 = write_mhd_header(&back, etype, "rt.raw");
        let raw2 = encode_raw(&back, etype);
        prop_assert_eq!(header1, header2);
        prop_assert_eq!(raw1, raw2);
        prop_assert_eq!(back, vol);
    }
}
