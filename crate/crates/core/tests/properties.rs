use lair_core::data::{generate_dataset, load_dataset, write_dataset, SplitRatios, WorldSpec};
use lair_core::dtformer::SelectionMask;
use lair_core::numerics::{gumbel_softmax, gumbel_softmax_node, grad_check, sample_gumbel, Graph, Init, NodeId, NoiseKey, ParamStore, Tensor};
use lair_core::train::average_precision;
use lair_core::Result;
use proptest::prelude::*;

fn close(report_entries: &[lair_core::numerics::GradEntry], tol: f64) -> bool {
    report_entries
        .iter()
        .all(|e| (e.analytic - e.numeric).abs() <= tol * e.analytic.abs().max(e.numeric.abs()).max(1.0))
}

fn store_with(name: &str, rows: usize, cols: usize, data: Vec<f64>) -> ParamStore {
    let mut s = ParamStore::new(0, 0.1);
    s.insert(name, Tensor::matrix(rows, cols, data).unwrap()).unwrap();
    s
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(x in vals(12)) {
        let mut g = Graph::new();
        let n = g.constant(Tensor::matrix(3, 4, x).unwrap());
        let s = g.softmax(n, None).unwrap();
        for r in 0..3 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn binary_weights_match_masked_softmax(x in vals(12), bits in prop::collection::vec(any::<bool>(), 4)) {
        prop_assume!(bits.iter().any(|&b| b));
        let mut g = Graph::new();
        let n = g.constant(Tensor::matrix(3, 4, x).unwrap());
        let w = g.constant(Tensor::vector(bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()));
        let a = g.weighted_softmax(n, w).unwrap();
        let mask: Vec<bool> = (0..3).flat_map(|_| bits.iter().copied()).collect();
        let b = g.softmax(n, Some(mask)).unwrap();
        for (p, q) in g.value(a).data().iter().zip(g.value(b).data()) {
            prop_assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_norm_statistics(x in vals(16)) {
        prop_assume!(x.chunks(8).all(|r| r.iter().any(|&v| (v - r[0]).abs() > 1e-3)));
        let mut g = Graph::new();
        let n = g.constant(Tensor::matrix(2, 8, x).unwrap());
        let y = g.layer_norm(n, 1e-9);
        for r in 0..2 {
            let row = g.value(y).row(r);
            let m = row.iter().sum::<f64>() / 8.0;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(m.abs() <= 1e-9);
            prop_assert!((v - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn composed_chain_gradients(a in vals(6), b in vals(6)) {
        let mut s = store_with("a", 2, 3, a);
        s.insert("b", Tensor::matrix(3, 2, b).unwrap()).unwrap();
        let report = grad_check(
            |g: &mut Graph, st: &ParamStore| -> Result<NodeId> {
                let a = g.param(st, st.id("a").unwrap());
                let b = g.param(st, st.id("b").unwrap());
                let m = g.matmul(a, b)?;
                let h = g.gelu(m);
                let sm = g.log_softmax(h, None)?;
                let sig = g.sigmoid(sm);
                Ok(g.mean(sig))
            },
            &s,
            1e-5,
        ).unwrap();
        prop_assert!(close(&report.entries, 1e-6), "{:?}", report.worst());
    }

    #[test]
    fn layer_norm_and_pool_gradients(x in vals(12), w in prop::collection::vec(0.1f64..1.0, 4)) {
        prop_assume!(x.chunks(4).all(|r| r.iter().any(|&v| (v - r[0]).abs() > 0.05)));
        let s = store_with("x", 3, 4, x);
        let wsum: f64 = w.iter().sum();
        let weights: Vec<f64> = w.iter().take(3).map(|v| v / wsum).collect();
        let report = grad_check(
            |g: &mut Graph, st: &ParamStore| -> Result<NodeId> {
                let x = g.param(st, st.id("x").unwrap());
                let y = g.layer_norm(x, 1e-9);
                let c = g.constant(Tensor::matrix(1, 3, weights.clone()).unwrap());
                let p = g.sorted_pool(y, c)?;
                let q = g.row_normalize(p)?;
                let e = g.exp(q);
                Ok(g.sum(e))
            },
            &s,
            1e-5,
        ).unwrap();
        prop_assert!(close(&report.entries, 1e-6), "{:?}", report.worst());
    }

    #[test]
    fn weighted_softmax_gradients(x in vals(9), w in prop::collection::vec(0.2f64..1.0, 3), c in vals(9)) {
        let mut s = store_with("x", 3, 3, x);
        s.insert("w", Tensor::vector(w)).unwrap();
        let report = grad_check(
            |g: &mut Graph, st: &ParamStore| -> Result<NodeId> {
                let x = g.param(st, st.id("x").unwrap());
                let w = g.param(st, st.id("w").unwrap());
                let a = g.weighted_softmax(x, w)?;
                let k = g.constant(Tensor::matrix(3, 3, c.clone()).unwrap());
                let m = g.mul(a, k)?;
                let sq = g.mul(m, m)?;
                Ok(g.sum(sq))
            },
            &s,
            1e-5,
        ).unwrap();
        prop_assert!(close(&report.entries, 1e-6), "{:?}", report.worst());
    }

    #[test]
    fn gumbel_noise_is_reproducible(seed in any::<u64>(), site in 0u64..1000, step in 0u64..1000) {
        let a = sample_gumbel(&mut NoiseKey::new(seed, site, step).rng(), 8);
        let b = sample_gumbel(&mut NoiseKey::new(seed, site, step).rng(), 8);
        prop_assert_eq!(&a, &b);
        let c = sample_gumbel(&mut NoiseKey::new(seed, site, step + 1).rng(), 8);
        prop_assert_ne!(a, c);
    }

    #[test]
    fn hard_sample_is_one_hot(logits in vals(5), seed in any::<u64>()) {
        let h = gumbel_softmax(&logits, 0.5, true, &mut NoiseKey::new(seed, 0, 0).rng()).unwrap();
        prop_assert_eq!(h.iter().filter(|&&v| v == 1.0).count(), 1);
        prop_assert_eq!(h.iter().filter(|&&v| v == 0.0).count(), 4);
    }

    #[test]
    fn straight_through_matches_soft_gradient(logits in vals(6), coef in vals(6), seed in any::<u64>(), tau in 0.2f64..3.0) {
        let noise = Tensor::matrix(2, 3, sample_gumbel(&mut NoiseKey::new(seed, 1, 2).rng(), 6)).unwrap();
        let grad = |hard: bool| {
            let mut s = ParamStore::new(0, 0.1);
            let id = s.insert("l", Tensor::matrix(2, 3, logits.clone()).unwrap()).unwrap();
            let mut g = Graph::new();
            let l = g.param(&s, id);
            let y = gumbel_softmax_node(&mut g, l, &noise, tau, hard).unwrap();
            let c = g.constant(Tensor::matrix(2, 3, coef.clone()).unwrap());
            let m = g.mul(y, c).unwrap();
            let loss = g.sum(m);
            g.backward(loss).unwrap().param_grads(&s).remove(0)
        };
        let (h, s) = (grad(true), grad(false));
        prop_assert_eq!(h.data(), s.data());
    }

    #[test]
    fn mask_algebra(t in prop::collection::vec(any::<bool>(), 3), s in prop::collection::vec(any::<bool>(), 6), v in prop::collection::vec(any::<bool>(), 6)) {
        let f = |b: bool| if b { 1.0 } else { 0.0 };
        let temporal: Vec<f64> = (0..6).map(|i| f(t[i / 2])).collect();
        let spatial: Vec<f64> = s.iter().map(|&b| f(b)).collect();
        let m = SelectionMask::compose(3, 2, temporal.clone(), spatial.clone(), &v).unwrap();
        for i in 0..6 {
            prop_assert!(m.combined[i] <= temporal[i]);
            prop_assert!(m.combined[i] <= spatial[i]);
            prop_assert!(m.combined[i] <= f(v[i]));
        }
        prop_assert_eq!(m.num_retained, m.combined.iter().sum::<f64>());
    }

    #[test]
    fn average_precision_bounds(scores in vals(6), pos in prop::collection::vec(any::<bool>(), 6)) {
        match average_precision(&scores, &pos) {
            None => prop_assert!(pos.iter().all(|&p| !p)),
            Some(ap) => prop_assert!((0.0..=1.0).contains(&ap)),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn dataset_round_trip(seed in any::<u64>(), noise in 0.0f64..0.5, multi in any::<bool>()) {
        let spec = WorldSpec { seed, noise, multi_label: multi, num_classes: 4, d_visual: 4, d_union: 4, ..WorldSpec::default() };
        let data = generate_dataset(&spec, 12, SplitRatios::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let (meta, samples) = load_dataset(dir.path()).unwrap();
        prop_assert_eq!(meta, data.meta);
        prop_assert_eq!(samples, data.samples);
    }
}

#[test]
fn init_kinds_are_applied() {
    let mut s = ParamStore::new(3, 0.5);
    let z = s.add("z", &[2, 2], Init::Zeros).unwrap();
    let n = s.add("n", &[50, 2], Init::TruncNormal(0.5)).unwrap();
    assert!(s.get(z).data().iter().all(|&v| v == 0.0));
    assert!(s.get(n).data().iter().all(|&v| v.abs() <= 1.0));
}
