mod common;

use common::{max_abs_diff, rng};
use l3doc::backbone::{self, Head};
use l3doc::datasets::{farthest_point_sampling, normalize_unit_sphere, PointCloud};
use l3doc::factorization::{reconstruct_kernel, FactorSpec, KnowledgeBase, TaskFactors};
use l3doc::mam::attention_scores;
use l3doc::metrics::{apa, cfr, ppa, sc, PpaMode};
use l3doc::ops;
use l3doc::trainer::kernels_for;
use l3doc::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn cloud(max_pts: usize) -> impl Strategy<Value = PointCloud> {
    (1..=max_pts).prop_flat_map(|n| {
        prop::collection::vec(-1.0f64..1.0, 3 * n).prop_map(|c| PointCloud::new(3, c).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn channel_contract_matches_oracle(
        (c, d) in (1usize..6, 1usize..6, 1usize..6)
            .prop_flat_map(|(n, a, b)| (tensor(vec![1, 1, n]), tensor(vec![n, a, b])))
    ) {
        let out = ops::channel_contract(&c, &d).unwrap();
        prop_assert!(max_abs_diff(out.data(), &common::contract_oracle(&c, &d)) <= 1e-12);
    }

    #[test]
    fn deconv_matches_oracle(
        (x, k) in (1usize..6, 1usize..6, 1usize..4, 1usize..4, 1usize..4)
            .prop_flat_map(|(h, w, ci, co, s)| (tensor(vec![h, w, ci]), tensor(vec![s, s, co, ci])))
    ) {
        let out = ops::transposed_conv2d(&x, &k).unwrap();
        prop_assert_eq!(out.shape(), &[x.shape()[0], x.shape()[1], k.shape()[2]]);
        prop_assert!(max_abs_diff(out.data(), &common::deconv_oracle(&x, &k)) <= 1e-12);
    }

    #[test]
    fn reconstruction_is_linear_in_contraction(
        (l, k, c1, c2) in (1usize..5, 1usize..5, 1usize..4, 1usize..4, 1usize..3)
            .prop_flat_map(|(n, wi, lo, wo, s)| (
                tensor(vec![n, wi, lo]),
                tensor(vec![s, s, wo, lo]),
                tensor(vec![1, 1, n]),
                tensor(vec![1, 1, n]),
            )),
        a in -2.0f64..2.0,
    ) {
        let sum: Vec<f64> = c1.data().iter().zip(c2.data()).map(|(x, y)| x + a * y).collect();
        let c = Tensor::new(c1.shape().to_vec(), sum).unwrap();
        let w = reconstruct_kernel(&l, &k, &c).unwrap();
        let w1 = reconstruct_kernel(&l, &k, &c1).unwrap();
        let w2 = reconstruct_kernel(&l, &k, &c2).unwrap();
        let expect: Vec<f64> = w1.data().iter().zip(w2.data()).map(|(x, y)| x + a * y).collect();
        prop_assert!(max_abs_diff(w.data(), &expect) <= 1e-10);
        prop_assert!(max_abs_diff(w.data(), &common::reconstruct_oracle(&l, &k, &c)) <= 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant(v in prop::collection::vec(-30.0f64..30.0, 1..12), shift in -100.0f64..100.0) {
        let p = ops::softmax(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let q = ops::softmax(&shifted).unwrap();
        prop_assert!(max_abs_diff(&p, &q) <= 1e-12);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn max_pool_is_permutation_invariant(
        (f, perm_seed) in (1usize..20, 1usize..6).prop_flat_map(|(n, c)| (tensor(vec![n, c]), any::<u64>()))
    ) {
        let n = f.shape()[0];
        let c = f.shape()[1];
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng(perm_seed));
        let permuted: Vec<f64> = idx.iter().flat_map(|&i| f.data()[i * c..(i + 1) * c].to_vec()).collect();
        let g = Tensor::new(vec![n, c], permuted).unwrap();
        let a = ops::max_pool_points(&f).unwrap();
        let b = ops::max_pool_points(&g).unwrap();
        prop_assert_eq!(a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                        b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn fps_matches_oracle(c in cloud(40), k_frac in 0.0f64..1.0, start_frac in 0.0f64..1.0) {
        let n = c.len();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let start = ((n - 1) as f64 * start_frac) as usize;
        let got = farthest_point_sampling(&c, k, start).unwrap();
        prop_assert_eq!(&got, &common::fps_oracle(&c, k, start));
        let mut uniq = got.clone();
        uniq.sort();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), k);
    }

    #[test]
    fn fps_follows_point_permutation(c in cloud(30), seed in any::<u64>()) {
        // distinct random points: no distance ties, so the selected points
        // (not indices) must be the same after relabelling
        let n = c.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng(seed));
        let shuffled = c.select(&perm);
        let k = n.min(8);
        let a = farthest_point_sampling(&c, k, perm[0]).unwrap();
        let b = farthest_point_sampling(&shuffled, k, 0).unwrap();
        let mapped: Vec<usize> = b.iter().map(|&i| perm[i]).collect();
        prop_assert_eq!(a, mapped);
    }

    #[test]
    fn normalized_clouds_fit_unit_sphere(c in cloud(30)) {
        prop_assume!(c.max_radius() > 1e-6);
        if let Ok(u) = normalize_unit_sphere(&c) {
            prop_assert!((u.max_radius() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_scores_sum_to_inverse_depth(
        gaps in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0), 1..8),
        l_max in 1usize..7,
    ) {
        let k: Vec<f64> = gaps.iter().map(|g| g.0).collect();
        let c: Vec<f64> = gaps.iter().map(|g| g.1).collect();
        let s = attention_scores(&k, &c, l_max).unwrap();
        let target = 1.0 / l_max as f64;
        prop_assert!((s.deconv.iter().sum::<f64>() - target).abs() <= 1e-12);
        prop_assert!((s.contraction.iter().sum::<f64>() - target).abs() <= 1e-12);
        prop_assert!(s.deconv.iter().chain(&s.contraction).all(|&x| x >= 0.0));
    }

    #[test]
    fn metrics_stay_in_range(
        trace in prop::collection::vec(0.0f64..=1.0, 1..80),
        seen in prop::collection::vec(0.01f64..=1.0, 1..10),
    ) {
        let top = ppa(&trace, PpaMode::TopFraction).unwrap();
        let max = ppa(&trace, PpaMode::Max).unwrap();
        prop_assert!(top <= max + 1e-15);
        prop_assert!((0.0..=1.0).contains(&apa(&seen).unwrap()));
        prop_assert!((cfr(&seen, &seen).unwrap() - 1.0).abs() < 1e-12);
        let epoch = sc(&trace).unwrap();
        prop_assert!(epoch >= 1 && epoch <= trace.len());
    }
}

#[test]
fn forward_is_point_permutation_invariant() {
    let spec = FactorSpec::new(2, 2, 2, vec![3, 4, 8]).unwrap();
    let mut r = rng(9);
    for trial in 0..20 {
        let kb = KnowledgeBase::init(&spec, &mut r);
        let tf = TaskFactors::init(1, &spec, Head::init(8, &[6], 3, &mut r), &mut r);
        let kernels = kernels_for(kb.layers(), &tf).unwrap();
        let biases: Vec<Tensor> = tf.layers.iter().map(|l| l.bias.clone()).collect();
        let c = common::random_cloud(16 + trial, &mut r);
        let mut perm: Vec<usize> = (0..c.len()).collect();
        perm.shuffle(&mut r);
        let p = c.select(&perm);
        let run = |cl: &PointCloud| {
            let pts = Tensor::new(vec![cl.len(), 3], cl.coords().to_vec()).unwrap();
            backbone::predict(&pts, cl.len(), &kernels, &biases, &tf.head)
                .unwrap()
                .scores
        };
        let (a, b) = (run(&c), run(&p));
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
