use super::layers::*;
use super::*;
use crate::csi::AntennaGeometry;
use crate::imaging::{CsiImage, Dataset, LabeledImage, NormalizationSpec, Provenance, Site};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn conv_spec(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_ch,
        out_ch,
        kernel,
        stride,
        pad,
    }
}

/// Direct nested-loop convolution.
fn conv_oracle(x: &Tensor<f64>, w: &[f64], b: &[f64], spec: &LayerSpec) -> Tensor<f64> {
    let LayerSpec::Conv2d {
        in_ch,
        out_ch,
        kernel: k,
        stride,
        pad,
    } = *spec
    else {
        unreachable!()
    };
    let (bn, h, wd) = (x.shape[0], x.shape[2], x.shape[3]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut y = Tensor::zeros(&[bn, out_ch, ho, wo]);
    for s in 0..bn {
        for p in 0..out_ch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[p];
                    for d in 0..in_ch {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[((p * in_ch + d) * k + i) * k + j]
                                    * x.data[((s * in_ch + d) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    y.data[((s * out_ch + p) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    y
}

#[test]
fn conv_identity_kernel() {
    let spec = conv_spec(1, 1, 1, 1, 0);
    let x = random_tensor(&[2, 1, 4, 5], 1);
    let y = conv_forward(&x, &spec, &[1.0], &[0.0]);
    assert_eq!(y, x);
}

#[test]
fn conv_all_ones_sums_window() {
    let spec = conv_spec(1, 1, 3, 1, 0);
    let x = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0f64; 9]);
    let y = conv_forward(&x, &spec, &[1.0; 9], &[0.0]);
    assert_eq!(y.shape, vec![1, 1, 1, 1]);
    assert_eq!(y.data, vec![9.0]);
}

#[test]
fn conv_matches_direct_oracle() {
    for (i, &(cin, cout, k, stride, pad, h, w)) in [(2, 3, 3, 1, 1, 6, 5), (3, 2, 3, 2, 0, 7, 7), (1, 4, 1, 1, 0, 3, 3), (2, 2, 3, 2, 1, 5, 6)]
        .iter()
        .enumerate()
    {
        let spec = conv_spec(cin, cout, k, stride, pad);
        let x = random_tensor(&[2, cin, h, w], 10 + i as u64);
        let wt = random_tensor(&[cout * cin * k * k], 20 + i as u64).data;
        let b = random_tensor(&[cout], 30 + i as u64).data;
        let got = conv_forward(&x, &spec, &wt, &b);
        let want = conv_oracle(&x, &wt, &b, &spec);
        assert_eq!(got.shape, want.shape);
        for (g, w) in got.data.iter().zip(&want.data) {
            assert!((g - w).abs() <= 1e-5 * w.abs().max(1e-3), "{g} vs {w}");
        }
        // single precision path against the same oracle
        let got32 = conv_forward(&x.cast::<f32>(), &spec, &Tensor::from_vec(&[wt.len()], wt.clone()).cast::<f32>().data, &Tensor::from_vec(&[b.len()], b.clone()).cast::<f32>().data);
        for (g, w) in got32.data.iter().zip(&want.data) {
            assert!((*g as f64 - w).abs() <= 1e-5 * w.abs().max(1.0), "{g} vs {w}");
        }
    }
}

#[test]
fn relu_and_pool_examples() {
    let x = Tensor::from_vec(&[1, 2], vec![-1.0f64, 2.0]);
    assert_eq!(relu(&x).data, vec![0.0, 2.0]);
    let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
    assert_eq!(maxpool_forward(&x, 2).0.data, vec![4.0]);
    let odd = Tensor::<f32>::zeros(&[1, 2, 45, 45]);
    assert_eq!(maxpool_forward(&odd, 2).0.shape, vec![1, 2, 22, 22]);
}

#[test]
fn pooled_values_dominate_their_windows() {
    let x = random_tensor(&[2, 3, 7, 6], 5);
    let (y, _) = maxpool_forward(&x, 2);
    for plane in 0..6 {
        for oy in 0..3 {
            for ox in 0..3 {
                let v = y.data[(plane * 3 + oy) * 3 + ox];
                let mut found = false;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let m = x.data[plane * 42 + (2 * oy + dy) * 6 + 2 * ox + dx];
                        assert!(v >= m);
                        found |= v == m;
                    }
                }
                assert!(found);
            }
        }
    }
}

#[test]
fn se_gate_examples() {
    let spec = LayerSpec::Se { channels: 4, reduction: 2 };
    let x = random_tensor(&[2, 4, 3, 3], 7);
    let w1 = random_tensor(&[8], 8).data;
    let (y, _) = se_forward(&x, &spec, &w1, &[0.0; 8]);
    for (a, b) in y.data.iter().zip(&x.data) {
        assert_eq!(*a, b / 2.0);
    }
    // hidden units pinned at 1 through a positive squeeze, then a large W2 saturates the gate
    let xpos = Tensor::from_vec(&x.shape, x.data.iter().map(|v| v.abs() + 0.5).collect());
    let w1 = vec![0.25; 8];
    let (y, _) = se_forward(&xpos, &spec, &w1, &[100.0; 8]);
    for (a, b) in y.data.iter().zip(&xpos.data) {
        assert!((a - b).abs() <= 1e-4 * b.abs());
    }
}

#[test]
fn se_matches_direct_oracle() {
    let (c, r, hw) = (8, 4, 5 * 4);
    let spec = LayerSpec::Se { channels: c, reduction: r };
    let x = random_tensor(&[3, c, 5, 4], 11);
    let w1 = random_tensor(&[c / r * c], 12).data;
    let w2 = random_tensor(&[c * (c / r)], 13).data;
    let (y, _) = se_forward(&x, &spec, &w1, &w2);
    for b in 0..3 {
        let z: Vec<f64> = (0..c).map(|ch| x.data[(b * c + ch) * hw..][..hw].iter().sum::<f64>() / hw as f64).collect();
        let h: Vec<f64> = (0..c / r)
            .map(|j| (0..c).map(|ch| w1[j * c + ch] * z[ch]).sum::<f64>().max(0.0))
            .collect();
        for ch in 0..c {
            let a: f64 = (0..c / r).map(|j| w2[ch * (c / r) + j] * h[j]).sum();
            let s = 1.0 / (1.0 + (-a).exp());
            for i in 0..hw {
                let idx = (b * c + ch) * hw + i;
                assert!((y.data[idx] - s * x.data[idx]).abs() <= 1e-5 * x.data[idx].abs().max(1e-3));
            }
        }
    }
}

#[test]
fn cross_entropy_examples() {
    assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1), 0.0);
    assert!((cross_entropy(&[1.0 / 3.0; 3], 0) - 1.0986122886681098).abs() < 1e-15);
    assert!((cross_entropy(&[1.0 / 16.0; 16], 5) - 2.772588722239781).abs() < 1e-15);
    assert!((cross_entropy(&[0.7, 0.2, 0.1], 0) - 0.35667494393873238).abs() < 1e-15);
    // floor keeps a zero probability finite
    assert!((cross_entropy(&[1.0, 0.0], 1) - 27.631021115928547).abs() < 1e-9);
}

// ---- gradient checks (double precision) ----

use super::gradcheck::{check_stack, rel_err, spread_input, step_for};

#[test]
fn gradient_conv2d() {
    let e = check_stack(&[conv_spec(3, 4, 3, 1, 1)], random_tensor(&[2, 3, 5, 6], 1), 2);
    assert!(e < 1e-3, "conv relative error {e}");
    let e = check_stack(&[conv_spec(2, 3, 3, 2, 0)], random_tensor(&[2, 2, 6, 6], 3), 4);
    assert!(e < 1e-3, "strided conv relative error {e}");
}

#[test]
fn gradient_batchnorm() {
    let spec = LayerSpec::BatchNorm {
        channels: 4,
        eps: 1e-5,
        momentum: 0.1,
    };
    let e = check_stack(&[spec], random_tensor(&[3, 4, 4, 4], 5), 6);
    assert!(e < 1e-3, "batch norm relative error {e}");
    let spec = LayerSpec::BatchNorm {
        channels: 6,
        eps: 1e-5,
        momentum: 0.1,
    };
    let e = check_stack(&[spec], random_tensor(&[4, 6], 7), 8);
    assert!(e < 1e-3, "1-d batch norm relative error {e}");
}

#[test]
fn gradient_relu_and_maxpool() {
    let e = check_stack(&[LayerSpec::Relu], spread_input(&[2, 3, 4, 4], 9), 10);
    assert!(e < 1e-3, "relu relative error {e}");
    let e = check_stack(&[LayerSpec::MaxPool { size: 2 }], spread_input(&[2, 4, 5, 6], 11), 12);
    assert!(e < 1e-3, "max pool relative error {e}");
}

#[test]
fn gradient_se() {
    let spec = LayerSpec::Se { channels: 4, reduction: 2 };
    let e = check_stack(&[spec], random_tensor(&[3, 4, 5, 5], 13), 14);
    assert!(e < 1e-3, "SE relative error {e}");
}

#[test]
fn gradient_dense_flatten_dropout() {
    let specs = [
        LayerSpec::Flatten,
        LayerSpec::Dense {
            in_features: 24,
            out_features: 5,
        },
        LayerSpec::Dropout { p: 0.3 },
    ];
    let e = check_stack(&specs, random_tensor(&[3, 2, 3, 4], 15), 16);
    assert!(e < 1e-3, "dense relative error {e}");
}

#[test]
fn gradient_softmax_layer() {
    let e = check_stack(&[LayerSpec::Softmax], random_tensor(&[3, 6], 17), 18);
    assert!(e < 1e-3, "softmax relative error {e}");
}

#[test]
fn gradient_softmax_cross_entropy() {
    let logits = random_tensor(&[4, 5], 19);
    let targets = [0, 3, 4, 1];
    let (_, grad, _) = softmax_cross_entropy(&logits, &targets);
    let h = step_for(&logits.data);
    for i in 0..logits.len() {
        let mut p = logits.clone();
        p.data[i] += h;
        let mut m = logits.clone();
        m.data[i] -= h;
        let n = (softmax_cross_entropy(&p, &targets).0 - softmax_cross_entropy(&m, &targets).0) / (2.0 * h);
        assert!(rel_err(grad.data[i], n) < 1e-3);
    }
}

#[test]
fn gradient_small_network() {
    let cfg = NetworkConfig {
        block_channels: vec![4],
        composite_channels: vec![4],
        se_reduction: 2,
        dense_hidden: 6,
        dropout: 0.25,
        ..NetworkConfig::default()
    };
    let mut arch = cfg.architecture([3, 6, 6], 3).unwrap();
    arch.pop();
    arch.push(LayerSpec::Softmax);
    let e = check_stack(&arch, random_tensor(&[2, 3, 6, 6], 21), 22);
    assert!(e < 1e-3, "network relative error {e}");
}

// ---- properties ----

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let p = softmax_f64(&v);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let t = Tensor::from_vec(&[1, v.len()], v.iter().map(|&x| x as f32).collect());
        let p32 = softmax(&t);
        prop_assert!((p32.data.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn flipping_twice_is_identity(h in 1usize..7, w in 1usize..7, fh: bool, fv: bool, seed: u64) {
        let mut r = rng(seed);
        let orig: Vec<f32> = (0..3 * h * w).map(|_| r.random()).collect();
        let mut data = orig.clone();
        flip_sample(&mut data, 3, h, w, fh, fv);
        prop_assert_eq!(data.len(), orig.len());
        if fh && !fv && w > 1 {
            prop_assert_eq!(data[0], orig[w - 1]);
        }
        flip_sample(&mut data, 3, h, w, fh, fv);
        prop_assert_eq!(data, orig);
    }
}

#[test]
fn batchnorm_inference_is_per_channel_affine() {
    let spec = LayerSpec::BatchNorm {
        channels: 3,
        eps: 1e-5,
        momentum: 0.1,
    };
    let mut w = LayerWeights::<f64>::init(spec, &mut rng(1));
    w.params[0].data = vec![0.5, -2.0, 1.5];
    w.params[1].data = vec![0.1, 0.2, -0.3];
    w.state[0].data = vec![0.3, -0.1, 2.0];
    w.state[1].data = vec![1.2, 0.4, 3.0];
    let x1 = random_tensor(&[2, 3, 2, 2], 3);
    let (a, b) = ([2.0, -0.5, 3.0], [1.0, 0.25, -4.0]);
    let x2 = Tensor::from_vec(&x1.shape, x1.data.iter().enumerate().map(|(i, &v)| a[(i / 4) % 3] * v + b[(i / 4) % 3]).collect());
    let (y1, y2) = (w.infer(&x1), w.infer(&x2));
    for c in 0..3 {
        let g = w.params[0].data[c] / (w.state[1].data[c] + 1e-5).sqrt();
        for i in (0..y1.len()).filter(|i| (i / 4) % 3 == c) {
            // y2 = a·y1 + (g·b + (1 − a)·(β − g·μ))
            let want = a[c] * y1.data[i] + g * b[c] + (1.0 - a[c]) * (w.params[1].data[c] - g * w.state[0].data[c]);
            assert!((y2.data[i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn default_architecture_shapes() {
    let arch = NetworkConfig::default().architecture([3, 90, 90], 16).unwrap();
    let mut shape = vec![3, 90, 90];
    let mut shapes = Vec::new();
    for l in &arch {
        shape = l.output_shape(&shape).unwrap();
        shapes.push(shape.clone());
    }
    assert!(shapes.contains(&vec![32, 45, 45]));
    assert!(shapes.contains(&vec![64, 22, 22]));
    assert!(shapes.contains(&vec![128, 11, 11]));
    assert!(shapes.contains(&vec![128 * 11 * 11]));
    assert_eq!(shape, vec![16]);
    assert_eq!(arch.iter().filter(|l| matches!(l, LayerSpec::Se { reduction: 16, .. })).count(), 3);
    assert!(matches!(arch.last(), Some(LayerSpec::Softmax)));

    let bad = NetworkConfig {
        se_reduction: 5,
        ..NetworkConfig::default()
    };
    assert!(matches!(bad.architecture([3, 90, 90], 16), Err(NetError::Config(_))));
}

#[test]
fn adamw_step_decreases_single_sample_loss() {
    let cfg = NetworkConfig {
        block_channels: vec![4],
        composite_channels: vec![],
        se_reduction: 2,
        dense_hidden: 8,
        dropout: 0.0,
        ..NetworkConfig::default()
    };
    let arch = cfg.architecture([3, 6, 6], 3).unwrap();
    for seed in 0..5 {
        let mut net = Network::<f64>::new(&arch, [3, 6, 6], &mut rng(seed)).unwrap();
        let x = random_tensor(&[1, 3, 6, 6], 100 + seed);
        let target = [seed as usize % 3];
        let loss_of = |net: &mut Network<f64>| {
            let logits = net.forward_train(x.clone(), &mut rng(0)).unwrap();
            softmax_cross_entropy(&logits, &target)
        };
        let (before, grad, _) = loss_of(&mut net);
        net.backward(grad);
        let mut opt = AdamW::new(1e-5, 0.0);
        opt.step(&mut net);
        net.zero_grad();
        let (after, _, _) = loss_of(&mut net);
        assert!(after < before, "seed {seed}: {after} ≥ {before}");
    }
}

// ---- training ----

fn tiny_dataset(sites: usize, per_site: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let prototypes: Vec<Vec<f32>> = (0..sites).map(|_| (0..3 * 8 * 8).map(|_| r.random()).collect()).collect();
    let mut images = Vec::new();
    for (s, proto) in prototypes.iter().enumerate() {
        for _ in 0..per_site {
            let pixels = proto.iter().map(|&p| (p + 0.1 * r.random::<f32>()).min(1.0)).collect();
            images.push(LabeledImage {
                image: CsiImage {
                    height: 8,
                    width: 8,
                    pixels,
                },
                site_id: s as u32,
                coords: [s as f64 * 1.5, 0.0],
            });
        }
    }
    Dataset {
        images,
        sites: (0..sites)
            .map(|s| Site {
                site_id: s as u32,
                coords: [s as f64 * 1.5, 0.0],
            })
            .collect(),
        normalization: NormalizationSpec::new(0.0, 1.0).unwrap(),
        geometry: AntennaGeometry::default(),
        provenance: Provenance {
            source: "simulator".into(),
            seed: Some(seed),
        },
    }
}

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        block_channels: vec![4],
        composite_channels: vec![4],
        se_reduction: 2,
        dense_hidden: 8,
        dropout: 0.0,
        ..NetworkConfig::default()
    }
}

#[test]
fn overfits_two_sites() {
    let data = tiny_dataset(2, 4, 3);
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 4,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let model = train(&data, Some(&data), &tiny_net(), &cfg).unwrap();
    assert_eq!(model.metadata.val_accuracy, 1.0);
    for img in &data.images {
        let p = predict_probs(&model, &img.image).unwrap();
        assert_eq!(super::train::argmax(&p), img.site_id as usize);
    }
}

#[test]
fn training_is_deterministic() {
    let data = tiny_dataset(3, 5, 4);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let net = NetworkConfig {
        dropout: 0.5,
        ..tiny_net()
    };
    let a = train(&data, None, &net, &cfg).unwrap();
    let b = train(&data, None, &net, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
}

#[test]
fn zero_epochs_returns_initialization() {
    let data = tiny_dataset(4, 3, 5);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let model = train(&data, Some(&data), &tiny_net(), &cfg).unwrap();
    assert_eq!(model.metadata.epoch, 0);
    assert!(model.metadata.history.is_empty());
    let arch = tiny_net().architecture([3, 8, 8], 4).unwrap();
    let init = Network::<f32>::new(&arch, [3, 8, 8], &mut crate::rng::child_rng(cfg.seed, crate::rng::domain::INIT, 0)).unwrap();
    assert_eq!(model.layers, init.weights());
}

#[test]
fn predictions_are_distributions_and_pure() {
    let data = tiny_dataset(3, 2, 6);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let model = train(&data, None, &tiny_net(), &cfg).unwrap();
    for img in &data.images {
        let p = model.predict_probs(&img.image).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(p, model.predict_probs(&img.image).unwrap());
    }
    let wrong = CsiImage::zeros(9, 8);
    assert!(matches!(model.predict_probs(&wrong), Err(NetError::Shape(_))));
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let data = tiny_dataset(2, 2, 7);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let model = train(&data, None, &tiny_net(), &cfg).unwrap();
    let bytes = model.to_bytes().unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    assert_eq!(ModelCheckpoint::from_bytes(&bytes).unwrap(), model);

    let mut bad = bytes.clone();
    bad[0] = b'x';
    assert!(matches!(ModelCheckpoint::from_bytes(&bad), Err(NetError::BadMagic)));
    let mut bad = bytes.clone();
    bad[8] = 7;
    assert!(matches!(
        ModelCheckpoint::from_bytes(&bad),
        Err(NetError::UnsupportedVersion { found: 7, .. })
    ));
    assert!(matches!(
        ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 1]),
        Err(NetError::Truncated(_))
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(ModelCheckpoint::from_bytes(&long), Err(NetError::Shape(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    assert_eq!(ModelCheckpoint::load(&path).unwrap(), model);
}
