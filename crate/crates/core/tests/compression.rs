use compressive::attention::AttentionParams;
use compressive::compression::{
    attention_reconstruction_loss, auto_encoding_loss, compress, most_used_indices, most_used_select,
    CompressionLossReport, CompressionSpec, Compressor, Objective, Variant,
};
use compressive::{Error, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn spec(variant: Variant, rate: usize) -> CompressionSpec {
    CompressionSpec {
        variant,
        rate,
        objective: Objective::None,
    }
}

fn run_compress(variant: Variant, rate: usize, x: &Tensor<f64>, usage: Option<&[f64]>) -> compressive::Result<Tensor<f64>> {
    let s = spec(variant, rate);
    let c = Compressor::<f64>::new(s, 1, x.cols())?;
    let mut g = Graph::new();
    let bound = c.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = compress(&mut g, &s, &bound.layers[0], xv, usage)?;
    Ok(g.value(y).clone())
}

#[test]
fn mean_pool_example_and_identity_at_rate_one() {
    let x = Tensor::new([2, 1], vec![2.0, 4.0]).unwrap();
    assert_eq!(run_compress(Variant::MeanPool, 2, &x, None).unwrap().data(), &[3.0]);
    let x = rand_t(&[6, 4], 1);
    let usage = vec![1.0; 6];
    for v in Variant::ALL {
        let y = run_compress(v, 1, &x, Some(&usage)).unwrap();
        assert_eq!(y, x, "{v} at c = 1");
    }
}

#[test]
fn output_row_count_is_floor_for_every_variant() {
    for v in Variant::ALL {
        for rate in 1..=4 {
            for n in rate..=11 {
                let x = rand_t(&[n, 3], (n * 10 + rate) as u64);
                let usage: Vec<f64> = (0..n).map(|i| (i * 7 % 5) as f64).collect();
                let y = run_compress(v, rate, &x, Some(&usage)).unwrap();
                assert_eq!(y.rows(), n / rate, "{v}, n = {n}, c = {rate}");
            }
        }
        let x = rand_t(&[2, 3], 99);
        assert!(matches!(
            run_compress(v, 3, &x, Some(&[0.0, 0.0])),
            Err(Error::DegenerateInput { .. })
        ));
    }
}

#[test]
fn pooling_folds_trailing_rows_into_last_window() {
    let x = Tensor::new([7, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 9.0]).unwrap();
    let y = run_compress(Variant::MeanPool, 3, &x, None).unwrap();
    assert_eq!(y.data(), &[2.0, 6.0]);
    let y = run_compress(Variant::MaxPool, 3, &x, None).unwrap();
    assert_eq!(y.data(), &[3.0, 9.0]);
}

#[test]
fn conv_matches_direct_convolution() {
    let (n, d, c) = (7, 3, 3);
    let s = spec(Variant::Conv, c);
    let mut comp = Compressor::<f64>::new(s, 1, d).unwrap();
    let kernel = rand_t(&[c, d, d], 5);
    comp.params_mut().get_mut(0).value = kernel.clone();
    let x = rand_t(&[n, d], 6);
    let mut g = Graph::new();
    let bound = comp.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = compress(&mut g, &s, &bound.layers[0], xv, None).unwrap();
    let y = g.value(y);
    for t in 0..n / c {
        for o in 0..d {
            let mut want = 0.0;
            for j in 0..c {
                for i in 0..d {
                    want += x.at(t * c + j, i) * kernel.data()[j * d * d + i * d + o];
                }
            }
            assert!((y.at(t, o) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn learnable_variants_start_at_mean_pooling() {
    let x = rand_t(&[9, 4], 7);
    let mean = run_compress(Variant::MeanPool, 3, &x, None).unwrap();
    for v in [Variant::Conv, Variant::DilatedConv] {
        let y = run_compress(v, 3, &x, None).unwrap();
        for (a, b) in y.data().iter().zip(mean.data()) {
            assert!((a - b).abs() < 1e-12, "{v}");
        }
    }
}

#[test]
fn most_used_examples() {
    assert_eq!(most_used_indices(&[0.5, 0.1, 0.4], 1), vec![0]);
    assert_eq!(most_used_indices(&[0.2, 0.2, 0.2], 2), vec![0, 1]);
    assert_eq!(most_used_indices(&[0.1, 0.9, 0.3, 0.9], 3), vec![1, 2, 3]);
    let x = rand_t(&[3, 2], 8);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = most_used_select(&mut g, xv, &[0.5, 0.1, 0.4], 1).unwrap();
    assert_eq!(g.value(y).data(), x.row(0));
    assert!(most_used_select(&mut g, xv, &[0.5, 0.1, 0.4], 4).is_err());
}

proptest! {
    #[test]
    fn most_used_matches_sort_oracle(usage in proptest::collection::vec(0u8..6, 1..20), k_frac in 0.0f64..1.0) {
        let usage: Vec<f64> = usage.into_iter().map(f64::from).collect();
        let k = ((usage.len() as f64) * k_frac) as usize;
        // oracle: stable sort by descending usage keeps older rows first among ties
        let mut order: Vec<usize> = (0..usage.len()).collect();
        order.sort_by(|&a, &b| usage[b].partial_cmp(&usage[a]).unwrap());
        let mut want: Vec<usize> = order[..k].to_vec();
        want.sort();
        prop_assert_eq!(most_used_indices(&usage, k), want);
    }
}

#[test]
fn auto_encoding_examples() {
    let mut g = Graph::<f64>::new();
    let old = g.constant(Tensor::full([1, 1], 3.0));
    let cm = g.constant(Tensor::full([1, 1], 1.0));
    let dec = g.constant(Tensor::full([1, 1, 1], 1.0));
    let l = auto_encoding_loss(&mut g, old, cm, dec, 1).unwrap();
    assert_eq!(g.value(l).item(), 2.0);

    let zero = g.constant(Tensor::zeros([4, 2]));
    let cm = g.constant(Tensor::zeros([2, 2]));
    let dec = g.constant(rand_t(&[2, 2, 2], 9));
    let l = auto_encoding_loss(&mut g, zero, cm, dec, 2).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    // c = 1: identity compressor and identity decoder reconstruct exactly
    let s = CompressionSpec {
        variant: Variant::Conv,
        rate: 1,
        objective: Objective::AutoEncoding,
    };
    let comp = Compressor::<f64>::new(s, 1, 3).unwrap();
    let b = comp.bind(&mut g, true);
    let old = g.constant(rand_t(&[5, 3], 10));
    let cm = compress(&mut g, &s, &b.layers[0], old, None).unwrap();
    let l = auto_encoding_loss(&mut g, old, cm, b.layers[0].decoder.unwrap(), 1).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

fn attn_params(g: &mut Graph<f64>, d: usize, seed: u64) -> AttentionParams {
    let mut v = |s: u64, shape: &[usize]| g.variable(rand_t(shape, seed * 10 + s));
    AttentionParams {
        query: v(1, &[d, d]),
        key: v(2, &[d, d]),
        value: v(3, &[d, d]),
        output: v(4, &[d, d]),
        position: v(5, &[d, d]),
        content_bias: v(6, &[d]),
        position_bias: v(7, &[d]),
    }
}

#[test]
fn attention_reconstruction_is_zero_for_identity_and_matches_scalar_case() {
    for v in [Variant::Conv, Variant::DilatedConv] {
        let s = CompressionSpec {
            variant: v,
            rate: 1,
            objective: Objective::AttentionReconstruction,
        };
        let comp = Compressor::<f64>::new(s, 1, 4).unwrap();
        let mut g = Graph::new();
        let b = comp.bind(&mut g, true);
        let p = attn_params(&mut g, 4, 1);
        let h = g.variable(rand_t(&[5, 4], 11));
        let old = g.variable(rand_t(&[5, 4], 12));
        let l = attention_reconstruction_loss(&mut g, h, old, &p, &s, &b.layers[0], None).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    // d = 1, one evicted row compressed by a scalar kernel k: the single-key
    // softmax is 1, so the loss is |m·V − k·m·V|.
    let s = CompressionSpec {
        variant: Variant::Conv,
        rate: 1,
        objective: Objective::AttentionReconstruction,
    };
    let mut comp = Compressor::<f64>::new(s, 1, 1).unwrap();
    comp.params_mut().get_mut(0).value = Tensor::full([1, 1, 1], 0.25);
    let mut g = Graph::new();
    let b = comp.bind(&mut g, true);
    let p = AttentionParams {
        query: g.constant(Tensor::full([1, 1], 0.3)),
        key: g.constant(Tensor::full([1, 1], -1.2)),
        value: g.constant(Tensor::full([1, 1], 2.0)),
        output: g.constant(Tensor::full([1, 1], 1.0)),
        position: g.constant(Tensor::full([1, 1], 1.0)),
        content_bias: g.constant(Tensor::zeros([1])),
        position_bias: g.constant(Tensor::zeros([1])),
    };
    let h = g.constant(Tensor::full([1, 1], 0.7));
    let old = g.constant(Tensor::full([1, 1], 1.5));
    let l = attention_reconstruction_loss(&mut g, h, old, &p, &s, &b.layers[0], None).unwrap();
    let want = (1.5f64 * 2.0 - 0.25 * 1.5 * 2.0).abs();
    assert!((g.value(l).item() - want).abs() < 1e-12);
}

#[test]
fn attention_reconstruction_only_reaches_compression_parameters() {
    let s = CompressionSpec {
        variant: Variant::Conv,
        rate: 2,
        objective: Objective::AttentionReconstruction,
    };
    let comp = Compressor::<f64>::new(s, 1, 4).unwrap();
    let mut g = Graph::new();
    let b = comp.bind(&mut g, true);
    let p = attn_params(&mut g, 4, 2);
    let h = g.variable(rand_t(&[4, 4], 13));
    let old = g.variable(rand_t(&[4, 4], 14));
    let l = attention_reconstruction_loss(&mut g, h, old, &p, &s, &b.layers[0], None).unwrap();
    assert!(g.value(l).item() > 0.0);
    g.backward(l).unwrap();
    let blocked: [Var; 5] = [p.query, p.key, p.value, h, old];
    for v in blocked {
        assert!(g.grad(v).is_none());
    }
    let kg = g.grad(b.layers[0].kernels[0]).unwrap();
    assert!(kg.data().iter().any(|&x| x != 0.0));
}

#[test]
fn auxiliary_objectives_need_learnable_compressor() {
    for v in [Variant::MaxPool, Variant::MeanPool, Variant::MostUsed] {
        let s = CompressionSpec {
            variant: v,
            rate: 2,
            objective: Objective::AutoEncoding,
        };
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }
    assert!(spec(Variant::Conv, 0).validate().is_err());
}

#[test]
fn loss_report_csv() {
    let r = CompressionLossReport {
        step: 12,
        variant: Variant::Conv,
        losses: vec![0.5, 0.25],
    };
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "layer,step,variant,loss");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("1,12,conv,"));
}
