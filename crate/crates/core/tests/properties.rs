use std::collections::HashSet;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use augseg::adapters::{count_params, forward_aug, forward_slora, forward_vanilla, AdapterSet, AdapterVariant, SiteDims};
use augseg::image::Mask;
use augseg::io;
use augseg::metrics::{aa, f1, fm, ft, iou, mae, AccuracyMatrix};
use augseg::model::{make_heatmap, sample_prompts, PromptSet, SiteId, SiteKind};
use augseg::selector::{per_task_bytes, storage_report, EmbeddingBuffer};
use augseg::synth::{generate_sample, DomainKind, DomainSpec, Split};
use augseg::{Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mask_strategy(side: usize) -> impl Strategy<Value = Mask> {
    proptest::collection::vec(any::<bool>(), side * side).prop_map(move |d| Mask::new(side, side, d).unwrap())
}

/// Random continual matrix: filled lower triangle plus the superdiagonal.
fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<Option<f64>>>> {
    (1usize..7).prop_flat_map(|t| {
        proptest::collection::vec(0.0f64..1.0, t * t).prop_map(move |v| {
            (0..t)
                .map(|i| (0..t).map(|j| (j <= i + 1).then_some(v[i * t + j])).collect())
                .collect()
        })
    })
}

fn sites_strategy() -> impl Strategy<Value = (Vec<SiteDims>, usize, usize)> {
    (1usize..5, 1usize..12, 1usize..5).prop_flat_map(|(blocks, d, r)| {
        proptest::collection::vec((any::<bool>(), any::<bool>(), any::<bool>(), 1usize..20), blocks).prop_map(move |per| {
            let mut sites = Vec::new();
            for (b, (q, v, m, out)) in per.into_iter().enumerate() {
                for (on, kind) in [(q, SiteKind::AttnQuery), (v, SiteKind::AttnValue), (m, SiteKind::MlpIn)] {
                    if on {
                        sites.push(SiteDims {
                            site: SiteId { block: b, kind },
                            d_in: d,
                            d_out: out,
                        });
                    }
                }
            }
            (sites, d, r)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reduction_chain_holds(seed in any::<u64>(), d_in in 1usize..16, d_out in 1usize..16, r in 1usize..6, n in 1usize..8) {
        let mut g = rng(seed);
        let w = Tensor::randn(&[d_out, d_in], 1.0, &mut g);
        let x = Tensor::randn(&[n, d_in], 1.0, &mut g);
        let a = Tensor::randn(&[r, d_in], 1.0, &mut g);
        let b = Tensor::randn(&[d_out, r], 1.0, &mut g);
        let aug = forward_aug(&w, &x, &a, &b, &Tensor::eye(r), &Tensor::zeros(&[n, r])).unwrap();
        let s = forward_slora(&w, &x, &a, &b).unwrap();
        let v = forward_vanilla(&w, &x, &a, &b).unwrap();
        prop_assert!(aug.max_rel_diff(&s).unwrap() < 1e-12);
        prop_assert!(s.max_rel_diff(&v).unwrap() < 1e-12);
    }

    #[test]
    fn zero_b_leaves_base_output(seed in any::<u64>(), d in 1usize..10, r in 1usize..5, n in 1usize..6) {
        let mut g = rng(seed);
        let w = Tensor::randn(&[d, d], 1.0, &mut g);
        let x = Tensor::randn(&[n, d], 1.0, &mut g);
        let a = Tensor::randn(&[r, d], 1.0, &mut g);
        let c = Tensor::randn(&[r, r], 1.0, &mut g);
        let p = Tensor::randn(&[n, r], 1.0, &mut g);
        let y = forward_aug(&w, &x, &a, &Tensor::zeros(&[d, r]), &c, &p).unwrap();
        prop_assert!(y.bit_eq(&x.matmul(&w.transpose().unwrap()).unwrap()));
    }

    #[test]
    fn closed_form_counts_match_tensors((sites, _d, r) in sites_strategy(), seed in any::<u64>()) {
        for variant in AdapterVariant::ALL {
            let set = AdapterSet::new(3, variant, r, 0, &sites, &mut rng(seed)).unwrap();
            let c = count_params(variant, &sites, r).unwrap();
            let trainable: usize = set.tensors().iter().filter(|t| t.2).map(|t| t.1.len()).sum();
            let stored: usize = set.tensors().iter().map(|t| t.1.len()).sum();
            prop_assert_eq!(c.trainable_count, trainable);
            prop_assert_eq!(c.stored_count, stored);
            prop_assert_eq!(c.stored_bytes, 8 * stored);
            prop_assert!(c.trainable_count <= c.stored_count);
        }
    }

    #[test]
    fn adapter_bytes_round_trip((sites, _d, r) in sites_strategy(), seed in any::<u64>(), vi in 0usize..4) {
        let variant = AdapterVariant::ALL[vi];
        let mut g = rng(seed);
        let mut set = AdapterSet::new(9, variant, r, 0, &sites, &mut g).unwrap();
        for s in &mut set.sites {
            s.b = Tensor::randn(s.b.shape(), 1.0, &mut g);
        }
        let bytes = io::encode_adapter(&set).unwrap();
        let back = io::decode_adapter(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &set);
        prop_assert_eq!(io::encode_adapter(&back).unwrap(), bytes);
    }

    #[test]
    fn summaries_match_loops(rows in matrix_strategy()) {
        let t = rows.len();
        let m = AccuracyMatrix::from_rows(rows.clone()).unwrap();
        let last = &rows[t - 1];
        let mut total = 0.0;
        for v in last {
            total += v.unwrap();
        }
        prop_assert!((aa(&m).unwrap() - total / t as f64).abs() < 1e-12);
        let mut drop = 0.0;
        for j in (0..t).rev() {
            drop += rows[j][j].unwrap() - last[j].unwrap();
        }
        prop_assert!((fm(&m).unwrap() - drop / t as f64).abs() < 1e-12);
        if t >= 2 {
            let fwd: f64 = (1..t).map(|j| rows[j - 1][j].unwrap()).sum();
            prop_assert!((ft(&m).unwrap() - fwd / (t - 1) as f64).abs() < 1e-12);
        } else {
            prop_assert!(ft(&m).is_err());
        }
    }

    #[test]
    fn mask_metric_identities(p in mask_strategy(6), g in mask_strategy(6)) {
        let i = iou(&p, &g).unwrap();
        let f = f1(&p, &g).unwrap();
        prop_assert_eq!(i, iou(&g, &p).unwrap());
        prop_assert_eq!(f, f1(&g, &p).unwrap());
        prop_assert!((f - 2.0 * i / (1.0 + i)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&i) && i <= f + 1e-15);
        prop_assert_eq!(iou(&g, &g).unwrap(), 1.0);
    }

    #[test]
    fn mae_is_complement_symmetric(g in mask_strategy(5), probs in proptest::collection::vec(0.0f64..=1.0, 25)) {
        let flipped = Mask::new(5, 5, g.data.iter().map(|b| !b).collect()).unwrap();
        let inv: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
        let a = mae(&probs, &g).unwrap();
        prop_assert!((a - mae(&inv, &flipped).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn matmul_identity_and_associativity(seed in any::<u64>(), m in 1usize..7, k in 1usize..7, n in 1usize..7, q in 1usize..7) {
        let mut g = rng(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut g);
        let b = Tensor::randn(&[k, n], 1.0, &mut g);
        let c = Tensor::randn(&[n, q], 1.0, &mut g);
        prop_assert!(a.matmul(&Tensor::eye(k)).unwrap().bit_eq(&a));
        prop_assert!(Tensor::eye(m).matmul(&a).unwrap().bit_eq(&a));
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_rel_diff(&right).unwrap() < 1e-12);
    }

    #[test]
    fn backward_is_deterministic(seed in any::<u64>(), n in 1usize..6, d in 2usize..8) {
        let mut g = rng(seed);
        let x = Tensor::randn(&[n, d], 1.0, &mut g);
        let w = Tensor::randn(&[d, d], 1.0, &mut g);
        let grads = || {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(w.clone(), true);
            let y = tape.matmul_t(xv, wv).unwrap();
            let y = tape.gelu(y);
            let y = tape.softmax_rows(y).unwrap();
            let y = tape.mul(y, y).unwrap();
            let s = tape.sum(y);
            let gr = tape.backward(s).unwrap();
            (gr.wrt(xv), gr.wrt(wv))
        };
        let (a1, b1) = grads();
        let (a2, b2) = grads();
        prop_assert!(a1.bit_eq(&a2) && b1.bit_eq(&b2));
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), n in 1usize..6, d in 1usize..9, scale in 0.1f64..50.0) {
        let x = Tensor::randn(&[n, d], scale, &mut rng(seed));
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let s = tape.softmax_rows(v).unwrap();
        for row in tape.value(s).data().chunks(d) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn mean_pool_matches_loop(seed in any::<u64>(), b in 1usize..3, h in 1usize..5, w in 1usize..5, c in 1usize..5) {
        let x = Tensor::randn(&[b, h, w, c], 1.0, &mut rng(seed));
        let pooled = x.mean_pool_hw().unwrap();
        prop_assert_eq!(pooled.shape(), &[b, c][..]);
        for bi in 0..b {
            for ci in 0..c {
                let mut s = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        s += x.data()[((bi * h + y) * w + xx) * c + ci];
                    }
                }
                prop_assert!((pooled.data()[bi * c + ci] - s / (h * w) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heatmap_peaks_at_prompt_cells(points in proptest::collection::vec((0usize..32, 0usize..32), 1..5), sigma in 0.3f64..3.0) {
        let h = make_heatmap(&PromptSet { points: points.clone() }, 32, 8, sigma).unwrap();
        prop_assert_eq!(h.values.len(), 64);
        prop_assert!(h.values.iter().all(|&v| v > 0.0 && v <= 1.0));
        for &(r, c) in &points {
            prop_assert_eq!(h.values[(r / 4) * 8 + c / 4], 1.0);
        }
        let max = h.values.iter().cloned().fold(0.0, f64::max);
        prop_assert_eq!(max, 1.0);
    }

    #[test]
    fn prompts_land_on_foreground(g in mask_strategy(8), k in 1usize..4, seed in any::<u64>()) {
        prop_assume!(g.area() >= k);
        let p = sample_prompts(&g, k, seed).unwrap();
        prop_assert_eq!(p.points.len(), k);
        prop_assert!(p.points.iter().all(|&(r, c)| g.get(r, c)));
        prop_assert_eq!(p.points.iter().collect::<HashSet<_>>().len(), k);
        prop_assert_eq!(p, sample_prompts(&g, k, seed).unwrap());
    }

    #[test]
    fn buffer_keeps_at_most_cap_distinct_candidates(n in 1usize..40, cap in 1usize..30, seed in any::<u64>()) {
        let mut g = rng(seed);
        let cands: Vec<Tensor> = (0..n).map(|_| Tensor::randn(&[4], 1.0, &mut g)).collect();
        let mut buf = EmbeddingBuffer::new(cap, 4).unwrap();
        buf.add(0, &cands, seed).unwrap();
        buf.add(1, &cands[..n.div_ceil(2)], seed).unwrap();
        prop_assert_eq!(buf.tasks[0].vectors.len(), cap.min(n));
        prop_assert_eq!(buf.tasks[1].vectors.len(), cap.min(n.div_ceil(2)));
        let picked: HashSet<Vec<u64>> = buf.tasks[0].vectors.iter().map(|v| v.data().iter().map(|x| x.to_bits()).collect()).collect();
        prop_assert_eq!(picked.len(), cap.min(n));
        prop_assert!(buf.tasks[0].vectors.iter().all(|v| cands.iter().any(|c| c.bit_eq(v))));
        prop_assert_eq!(storage_report(&buf, None, (3, 8, 8, 1), 8).buffer_bytes, buf.len() * 4 * 8);
    }

    #[test]
    fn per_task_storage_is_linear_and_monotone(m in 1usize..1000, d in 1usize..1024, b in 1usize..9) {
        prop_assert_eq!(per_task_bytes(m, d, b), m * d * b);
        prop_assert!(per_task_bytes(m + 1, d, b) > per_task_bytes(m, d, b));
        prop_assert!(per_task_bytes(m, d + 1, b) > per_task_bytes(m, d, b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthetic_samples_are_deterministic_and_in_range(kind in 0usize..6, seed in any::<u64>(), index in 0usize..50) {
        let kinds = [DomainKind::Base, DomainKind::BrightBlob, DomainKind::CamouflageTexture, DomainKind::ShadowRegion, DomainKind::NoisyLesion, DomainKind::LowContrastTexture];
        let spec = DomainSpec::default_for(kinds[kind]);
        let a = generate_sample(&spec, 32, 3, seed, Split::Train, index).unwrap();
        let b = generate_sample(&spec, 32, 3, seed, Split::Train, index).unwrap();
        prop_assert_eq!(&a.image.data, &b.image.data);
        prop_assert_eq!(&a.mask, &b.mask);
        let f = a.mask.area_fraction();
        prop_assert!(f > spec.area_range.0 && f < spec.area_range.1, "area {}", f);
        prop_assert!(a.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(a.prompts.points.iter().all(|&(r, c)| a.mask.get(r, c)));
        let other = generate_sample(&spec, 32, 3, seed, Split::Test, index).unwrap();
        prop_assert_ne!(&a.image.data, &other.image.data);
    }
}
