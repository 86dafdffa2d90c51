mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use recist3d::metrics::{dsc, nsd};
use recist3d::model::{Liere, ModelWeights};
use recist3d::postprocess::{class_presence, combine_labels, guarantee_presence, LogitVolume, OffsetSchedule};
use recist3d::prompt::RecistSphere;
use recist3d::tensor::{conv3d, crop, max_pool_downscale, pad, pad_to_multiple, trilinear_resize, Kernel, PadSpec, Tensor4};
use recist3d::volume::{Geometry, LabelVolume};
use recist3d::ModelConfig;

fn tensor(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    let a = common::Arr::random(&mut ChaCha8Rng::seed_from_u64(seed), shape[0], shape[1], shape[2], shape[3]);
    Tensor4::new(shape, a.v).unwrap()
}

fn spatial() -> impl Strategy<Value = [usize; 3]> {
    [1usize..10, 1usize..10, 1usize..10]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn crop_undoes_pad(s in spatial(), before in [0usize..4, 0usize..4, 0usize..4], after in [0usize..4, 0usize..4, 0usize..4], seed: u64) {
        let x = tensor([2, s[0], s[1], s[2]], seed);
        let spec = PadSpec { before, after };
        let p = pad(&x, &spec);
        prop_assert_eq!(p.spatial(), spec.padded(s));
        prop_assert_eq!(crop(&p, &spec).unwrap(), x);
    }

    #[test]
    fn pad_to_multiple_yields_multiples(d in 1usize..64, h in 1usize..64, w in 1usize..20, m in 1usize..9) {
        let x = Tensor4::<f32>::filled([1, d, h, w], 1.0);
        let (p, spec) = pad_to_multiple(&x, m).unwrap();
        for a in 0..3 {
            prop_assert_eq!(p.spatial()[a] % m, 0);
            prop_assert!(spec.after[a] < m);
        }
        let sum: f32 = p.data().iter().sum();
        prop_assert_eq!(sum as usize, d * h * w);
    }

    #[test]
    fn pooling_commutes_with_monotone_maps(s in spatial(), f in [1usize..4, 1usize..4, 1usize..4], seed: u64) {
        let x = tensor([1, s[0], s[1], s[2]], seed);
        let g = |v: f64| 3.0 * v + v.powi(3) - 1.0;
        let a = max_pool_downscale(&x.map(g), f).unwrap();
        let b = max_pool_downscale(&x, f).unwrap().map(g);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pooling_matches_reference(s in spatial(), f in [1usize..4, 1usize..4, 1usize..4], seed: u64) {
        let x = tensor([2, s[0], s[1], s[2]], seed);
        let arr = common::Arr { c: 2, d: s[0], h: s[1], w: s[2], v: x.data().to_vec() };
        let expected = common::max_pool(&arr, f);
        let got = max_pool_downscale(&x, f).unwrap();
        prop_assert_eq!(got.shape(), expected.shape());
        prop_assert_eq!(got.data(), &expected.v[..]);
    }

    #[test]
    fn resize_stays_within_input_range(s in spatial(), t in spatial(), seed: u64) {
        let x = tensor([1, s[0], s[1], s[2]], seed);
        let lo = x.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let y = trilinear_resize(&x, t).unwrap();
        prop_assert!(y.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn resize_preserves_constants(s in spatial(), t in spatial(), c in -50.0f64..50.0) {
        let x = Tensor4::filled([1, s[0], s[1], s[2]], c);
        let y = trilinear_resize(&x, t).unwrap();
        prop_assert!(y.data().iter().all(|&v| v == c));
    }

    #[test]
    fn convolution_is_linear(s in spatial(), k in prop_oneof![Just(1usize), Just(3)], stride in 1usize..3, seed: u64, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let x = tensor([2, s[0], s[1], s[2]], seed);
        let y = tensor([2, s[0], s[1], s[2]], seed ^ 1);
        let w = tensor([3, 2, k, k * k], seed ^ 2).into_data();
        let kern = Kernel::new(3, 2, k, w, vec![0.0; 3]).unwrap();
        let pad = k / 2;
        let combo = Tensor4::new(x.shape(), x.data().iter().zip(y.data()).map(|(&p, &q)| a * p + b * q).collect()).unwrap();
        let lhs = conv3d(&combo, &kern, stride, pad).unwrap();
        let cx = conv3d(&x, &kern, stride, pad).unwrap();
        let cy = conv3d(&y, &kern, stride, pad).unwrap();
        for ((&l, &p), &q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((l - (a * p + b * q)).abs() < 1e-10);
        }
    }

    #[test]
    fn liere_depends_only_on_displacement(seed: u64, p in [0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0], q in [0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0], t in [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0]) {
        let rates = common::Arr::random(&mut ChaCha8Rng::seed_from_u64(seed), 1, 1, 8, 3).v;
        let rates: Vec<[f64; 3]> = rates.chunks(3).map(|c| [c[0] * 4.0, c[1] * 4.0, c[2] * 4.0]).collect();
        let l = Liere::new(rates);
        let n = l.dim();
        let gram = |p: [f64; 3], q: [f64; 3]| {
            let a = l.matrix::<f64>(p);
            let b = l.matrix::<f64>(q);
            let mut g = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    g[i * n + j] = (0..n).map(|k| a[k * n + i] * b[k * n + j]).sum();
                }
            }
            g
        };
        let shifted = |v: [f64; 3]| [v[0] + t[0], v[1] + t[1], v[2] + t[2]];
        let d = common::max_abs_diff(&gram(p, q), &gram(shifted(p), shifted(q)));
        prop_assert!(d < 1e-9, "shift changed R(p)^T R(q) by {}", d);
    }

    #[test]
    fn class_presence_matches_sorting(s in spatial(), seed in 0u16..8, m in prop::collection::vec(0u16..12, 1..6)) {
        let n: usize = s.iter().product();
        let mask: Vec<u16> = (0..n).map(|i| ((i as u16).wrapping_mul(31).wrapping_add(seed)) % 14).collect();
        let counts = class_presence(&mask, &m);
        let oracle = common::sorted_counts(&mask, &m);
        for (&l, &c) in m.iter().zip(&oracle) {
            prop_assert_eq!(counts.count(l), c);
        }
        let missing: Vec<u16> = counts.missing(&m).collect();
        let expect: Vec<u16> = m.iter().copied().zip(&oracle).filter(|(_, &c)| c == 0).map(|(l, _)| l).collect();
        prop_assert_eq!(missing, expect);
    }

    #[test]
    fn combined_labels_come_from_positive_logits(s in spatial(), prompts in 1usize..5, seed: u64) {
        let g = Geometry::new(s, [1.0; 3]).unwrap();
        let n = g.voxel_count();
        let vols: Vec<LogitVolume<f64>> = (0..prompts)
            .map(|p| LogitVolume::new(p as u16 + 1, s, tensor([1, s[0], s[1], s[2]], seed ^ p as u64).into_data()).unwrap())
            .collect();
        let out = combine_labels(&vols, &g).unwrap();
        for i in 0..n {
            let best = vols.iter().map(|v| v.data[i]).fold(f64::NEG_INFINITY, f64::max);
            match out.data[i] {
                0 => prop_assert!(best <= 0.0),
                l => {
                    let v = vols[l as usize - 1].data[i];
                    prop_assert!(v > 0.0 && v == best);
                    prop_assert!(vols[..l as usize - 1].iter().all(|o| o.data[i] < v));
                }
            }
        }
    }

    #[test]
    fn presence_guarantee_touches_only_the_sphere(
        s in [4usize..14, 4usize..14, 4usize..14],
        c in [0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0],
        r in 1.5f64..4.0,
        shift in -40.0f64..0.0,
        seed: u64,
    ) {
        let center = [c[0] * (s[0] - 1) as f64, c[1] * (s[1] - 1) as f64, c[2] * (s[2] - 1) as f64];
        let sphere = RecistSphere { center, radius_vox: r };
        let data: Vec<f64> = tensor([1, s[0], s[1], s[2]], seed).data().iter().map(|v| v.abs() * -3.0 + shift).collect();
        let mut logits = LogitVolume::new(1, s, data.clone()).unwrap();
        guarantee_presence(&mut logits, &sphere, &OffsetSchedule::default()).unwrap();
        prop_assert!(logits.data.iter().any(|&v| v > 0.0));
        for z in 0..s[0] {
            for y in 0..s[1] {
                for x in 0..s[2] {
                    let i = (z * s[1] + y) * s[2] + x;
                    if !sphere.contains([z as f64, y as f64, x as f64]) {
                        prop_assert_eq!(logits.data[i].to_bits(), data[i].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn overlap_metrics_are_symmetric(s in [2usize..10, 2usize..10, 2usize..10], sp in [0.5f32..3.0, 0.5f32..3.0, 0.5f32..3.0], seed in any::<u64>()) {
        let g = Geometry::new(s, sp).unwrap();
        let t = tensor([2, s[0], s[1], s[2]], seed);
        let n = g.voxel_count();
        let a = LabelVolume::new(g.clone(), t.data()[..n].iter().map(|&v| (v > 0.2) as u16).collect()).unwrap();
        let b = LabelVolume::new(g.clone(), t.data()[n..].iter().map(|&v| (v > 0.1) as u16).collect()).unwrap();
        prop_assert_eq!(dsc(&a, &b, 1).unwrap(), dsc(&b, &a, 1).unwrap());
        let ab = nsd(&a, &b, 1, 1.5).unwrap();
        let ba = nsd(&b, &a, 1, 1.5).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn nsd_matches_all_pairs_oracle(s in [2usize..9, 2usize..9, 2usize..9], sp in [0.5f32..3.0, 0.5f32..3.0, 0.5f32..3.0], tol in 0.0f64..4.0, seed: u64) {
        let g = Geometry::new(s, sp).unwrap();
        let t = tensor([2, s[0], s[1], s[2]], seed);
        let n = g.voxel_count();
        let pa: Vec<bool> = t.data()[..n].iter().map(|&v| v > 0.0).collect();
        let pb: Vec<bool> = t.data()[n..].iter().map(|&v| v > -0.2).collect();
        let a = LabelVolume::new(g.clone(), pa.iter().map(|&v| v as u16).collect()).unwrap();
        let b = LabelVolume::new(g.clone(), pb.iter().map(|&v| v as u16).collect()).unwrap();
        let spacing = [sp[0] as f64, sp[1] as f64, sp[2] as f64];
        let expected = common::nsd_all_pairs(&pa, &pb, s, spacing, tol);
        let got = nsd(&a, &b, 1, tol).unwrap();
        prop_assert!((got - expected).abs() < 1e-9, "nsd {} vs oracle {}", got, expected);
    }

    #[test]
    fn lens_round_trip_is_bit_exact(width in 1usize..4, seed: u64) {
        let cfg = ModelConfig::tiny(2 * width);
        let w = ModelWeights::random(&cfg, seed).unwrap();
        let bytes = w.to_lens_bytes();
        let back = ModelWeights::read_lens(&bytes[..]).unwrap();
        prop_assert_eq!(back.len(), w.len());
        for (name, t) in w.iter() {
            let u = back.get(name).unwrap();
            prop_assert_eq!(&u.shape, &t.shape);
            prop_assert!(u.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        prop_assert_eq!(back.fingerprint(), w.fingerprint());
    }
}

