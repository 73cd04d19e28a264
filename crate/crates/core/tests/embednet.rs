use midlevel_core::datamodel::{generate_synthetic_dataset, LabelSpec, Mode, Split, SynthConfig};
use midlevel_core::embednet::*;
use midlevel_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_arch(outputs: usize) -> NetArch {
    NetArch {
        outputs,
        ..NetArch::default()
    }
}

fn random_input(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0.0..1.0)).collect()
}

fn inputs(arch: &NetArch, seed: u64) -> (Vec<f64>, Vec<f64>) {
    (random_input(arch.patch_input_len(), seed), random_input(arch.context_input_len(), seed + 1000))
}

// Straight-line reference forward pass written independently of the crate's
// layer code: explicit index arithmetic over the documented parameter layout.
fn reference_forward(arch: &NetArch, params: &[f64], patch: &[f64], context: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut offset = 0usize;
    let run_stream = |specs: &[ConvSpec], side0: usize, input: &[f64], offset: &mut usize| -> Vec<f64> {
        let mut x = input.to_vec();
        let mut c_in = arch.in_channels;
        let mut side = side0;
        for s in specs {
            let k = s.kernel;
            let cs = (side - k) / s.stride + 1;
            let w0 = *offset;
            let b0 = w0 + s.out_channels * c_in * k * k;
            *offset = b0 + s.out_channels;
            let mut y = vec![0.0; s.out_channels * cs * cs];
            for o in 0..s.out_channels {
                for i in 0..cs {
                    for j in 0..cs {
                        let mut acc = params[b0 + o];
                        for c in 0..c_in {
                            for u in 0..k {
                                for v in 0..k {
                                    acc += params[w0 + ((o * c_in + c) * k + u) * k + v]
                                        * x[(c * side + i * s.stride + u) * side + j * s.stride + v];
                                }
                            }
                        }
                        y[(o * cs + i) * cs + j] = if acc > 0.0 { acc } else { 0.0 };
                    }
                }
            }
            let mut out_side = cs;
            if s.pool {
                out_side = cs / 2;
                let mut p = vec![0.0; s.out_channels * out_side * out_side];
                for o in 0..s.out_channels {
                    for i in 0..out_side {
                        for j in 0..out_side {
                            let mut m = f64::NEG_INFINITY;
                            for a in 0..2 {
                                for b in 0..2 {
                                    m = m.max(y[(o * cs + 2 * i + a) * cs + 2 * j + b]);
                                }
                            }
                            p[(o * out_side + i) * out_side + j] = m;
                        }
                    }
                }
                y = p;
            }
            x = y;
            c_in = s.out_channels;
            side = out_side;
        }
        x
    };
    let mut h = run_stream(&arch.patch_stream, arch.patch_side, patch, &mut offset);
    h.extend(run_stream(&arch.context_stream, arch.context_side, context, &mut offset));
    let widths: Vec<usize> = arch.hidden.iter().copied().chain([arch.outputs]).collect();
    let mut embedding = Vec::new();
    for (li, &w) in widths.iter().enumerate() {
        let n_in = h.len();
        let b0 = offset + w * n_in;
        let mut y = vec![0.0; w];
        for o in 0..w {
            let mut acc = params[b0 + o];
            for i in 0..n_in {
                acc += params[offset + o * n_in + i] * h[i];
            }
            y[o] = if li + 1 < widths.len() { acc.max(0.0) } else { acc };
        }
        offset = b0 + w;
        if li == arch.embed_layer {
            embedding = y.clone();
        }
        h = y;
    }
    assert_eq!(offset, params.len());
    (h, embedding)
}

#[test]
fn init_is_deterministic() {
    let arch = small_arch(5);
    let a = EmbedNetwork::init(&arch, 7).unwrap();
    let b = EmbedNetwork::init(&arch, 7).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), EmbedNetwork::init(&arch, 8).unwrap().params());
    let layout = a.layout();
    for l in layout.patch.iter().chain(&layout.context) {
        assert!(a.params()[l.bias.clone()].iter().all(|&b| b == 0.0));
    }
}

#[test]
fn head_without_hidden_layer_is_rejected() {
    let arch = NetArch {
        hidden: vec![],
        ..small_arch(3)
    };
    assert!(matches!(EmbedNetwork::init(&arch, 0), Err(Error::Config { .. })));
}

#[test]
fn parameter_count_follows_shape_arithmetic() {
    let arch = NetArch {
        in_channels: 1,
        patch_side: 16,
        context_side: 32,
        patch_stream: vec![ConvSpec::new(3, 4, 1, false)],
        context_stream: vec![ConvSpec::new(3, 4, 1, false)],
        hidden: vec![10],
        outputs: 3,
        embed_layer: 0,
    };
    let net = EmbedNetwork::init(&arch, 0).unwrap();
    // streams: 2 * (3*3*1*4 + 4); concat = 14*14*4 + 30*30*4 = 4384
    let concat = 14 * 14 * 4 + 30 * 30 * 4;
    let head = (concat * 10 + 10) + (10 * 3 + 3);
    assert_eq!(net.param_count(), 2 * (3 * 3 * 4 + 4) + head);
    assert_eq!(net.layout().concat_dim(), concat);
}

#[test]
fn zero_network_outputs_zero() {
    let arch = small_arch(4);
    let n = EmbedNetwork::init(&arch, 1).unwrap().param_count();
    let net = EmbedNetwork::from_parts(arch.clone(), vec![0.0; n], 0).unwrap();
    let (p, c) = inputs(&arch, 3);
    let out = net.forward(&p, &c).unwrap();
    assert!(out.logits.iter().all(|&v| v == 0.0));
    assert!(out.embedding.iter().all(|&v| v == 0.0));
}

#[test]
fn doubling_final_weights_doubles_logits() {
    let arch = small_arch(4);
    let net = EmbedNetwork::init(&arch, 2).unwrap();
    let mut doubled = net.clone();
    let w = net.layout().final_layer().weights.clone();
    for p in &mut doubled.params_mut()[w] {
        *p *= 2.0;
    }
    let (p, c) = inputs(&arch, 5);
    let a = net.forward(&p, &c).unwrap();
    let b = doubled.forward(&p, &c).unwrap();
    assert_eq!(a.embedding, b.embedding);
    for (x, y) in a.logits.iter().zip(&b.logits) {
        assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
    }
}

#[test]
fn forward_matches_reference_implementation() {
    for arch in [
        small_arch(6),
        NetArch {
            in_channels: 2,
            patch_side: 11,
            context_side: 20,
            patch_stream: vec![ConvSpec::new(3, 3, 2, false), ConvSpec::new(2, 5, 1, true)],
            context_stream: vec![ConvSpec::new(5, 4, 1, true)],
            hidden: vec![7, 5],
            outputs: 3,
            embed_layer: 1,
        },
    ] {
        let net = EmbedNetwork::init(&arch, 0).unwrap();
        let (p, c) = inputs(&arch, 11);
        let out = net.forward(&p, &c).unwrap();
        let (logits, emb) = reference_forward(&arch, net.params(), &p, &c);
        for (a, b) in out.logits.iter().zip(&logits) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        for (a, b) in out.embedding.iter().zip(&emb) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn forward_rejects_wrong_shapes() {
    let arch = small_arch(2);
    let net = EmbedNetwork::init(&arch, 0).unwrap();
    let (p, c) = inputs(&arch, 0);
    assert!(matches!(net.forward(&p[1..], &c), Err(Error::Shape(_))));
    assert!(matches!(net.forward(&p, &c[1..]), Err(Error::Shape(_))));
}

fn one_example_set<'a>(p: &'a [f64], c: &'a [f64], target: Target) -> TrainingSet<'a> {
    TrainingSet {
        contexts: vec![c],
        examples: vec![Example { patch: p, context: 0, target }],
    }
}

#[test]
fn single_sample_is_memorized() {
    let arch = small_arch(4);
    let mut net = EmbedNetwork::init(&arch, 3).unwrap();
    let (p, c) = inputs(&arch, 9);
    let set = one_example_set(&p, &c, Target::Class(2));
    let cfg = TrainConfig {
        learning_rate: 0.05,
        batch_size: 1,
        epochs: 200,
        ..TrainConfig::default()
    };
    train(&mut net, &set, &cfg).unwrap();
    assert!(mean_loss(&net, &set).unwrap() < 1e-2);
}

#[test]
fn all_unspecified_targets_are_rejected() {
    let arch = small_arch(3);
    let mut net = EmbedNetwork::init(&arch, 3).unwrap();
    let (p, c) = inputs(&arch, 9);
    let set = one_example_set(&p, &c, Target::from_signed(&[0, 0, 0], 0.5));
    let cfg = TrainConfig {
        loss: LossKind::PerClassCrossEntropy,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&mut net, &set, &cfg), Err(Error::State(_))));
}

#[test]
fn zero_learning_rate_leaves_weights() {
    let arch = small_arch(3);
    let net0 = EmbedNetwork::init(&arch, 3).unwrap();
    let mut net = net0.clone();
    let (p, c) = inputs(&arch, 9);
    let set = one_example_set(&p, &c, Target::Class(1));
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 5,
        ..TrainConfig::default()
    };
    train(&mut net, &set, &cfg).unwrap();
    assert_eq!(net.params(), net0.params());
}

#[test]
fn final_layer_only_training_does_not_increase_loss() {
    let arch = small_arch(3);
    let mut net = EmbedNetwork::init(&arch, 4).unwrap();
    let data: Vec<(Vec<f64>, Vec<f64>)> = (0..12).map(|i| inputs(&arch, 100 + i)).collect();
    let set = TrainingSet {
        contexts: data.iter().map(|d| d.1.as_slice()).collect(),
        examples: data
            .iter()
            .enumerate()
            .map(|(i, d)| Example {
                patch: &d.0,
                context: i,
                target: Target::Class(i % 3),
            })
            .collect(),
    };
    let before = mean_loss(&net, &set).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.01,
        batch_size: 4,
        epochs: 20,
        final_layer_only: true,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let frozen = net.params()[..net.layout().final_layer().weights.start].to_vec();
    train(&mut net, &set, &cfg).unwrap();
    assert!(mean_loss(&net, &set).unwrap() <= before);
    assert_eq!(&net.params()[..frozen.len()], frozen.as_slice());
}

#[test]
fn divergence_is_reported_with_epoch() {
    let arch = small_arch(3);
    let mut net = EmbedNetwork::init(&arch, 4).unwrap();
    let (p, c) = inputs(&arch, 1);
    let set = one_example_set(&p, &c, Target::Class(0));
    let cfg = TrainConfig {
        learning_rate: 1e200,
        batch_size: 1,
        epochs: 10,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&mut net, &set, &cfg), Err(Error::Divergence { .. })));
}

#[test]
fn extraction_agrees_with_forward_and_is_order_equivariant() {
    let arch = small_arch(3);
    let net = EmbedNetwork::init(&arch, 6).unwrap();
    let data: Vec<(Vec<f64>, Vec<f64>)> = (0..5).map(|i| inputs(&arch, 40 + i)).collect();
    let mut inp = EmbedInputs {
        contexts: vec![data[0].1.as_slice(), data[1].1.as_slice()],
        items: data.iter().enumerate().map(|(i, d)| (i as u32, d.0.as_slice(), i % 2)).collect(),
    };
    let fm = extract_embeddings(&net, &inp).unwrap();
    assert_eq!(fm.rows(), 5);
    for (i, d) in data.iter().enumerate() {
        let single = net.forward(&d.0, &data[i % 2].1).unwrap().embedding;
        for (a, b) in fm.row(i).iter().zip(&single) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
    let one = EmbedInputs {
        contexts: vec![data[0].1.as_slice()],
        items: vec![(9u32, data[3].0.as_slice(), 0)],
    };
    let fm1 = extract_embeddings(&net, &one).unwrap();
    assert_eq!(fm1.row(0), net.forward(&data[3].0, &data[0].1).unwrap().embedding.as_slice());
    inp.items.reverse();
    let rev = extract_embeddings(&net, &inp).unwrap();
    for i in 0..5 {
        assert_eq!(rev.row(i), fm.row(4 - i));
    }
}

#[test]
fn gradient_check_both_losses() {
    let arch = small_arch(5);
    let net = EmbedNetwork::init(&arch, 12).unwrap();
    let (p, c) = inputs(&arch, 21);
    let soft = gradient_check(&net, &p, &c, &Target::Class(3), 1e-5, 400, 1).unwrap();
    assert!(soft <= 1e-4, "softmax gradient error {soft}");
    let multi = Target::from_signed(&[1, -1, 0, 1, -1], 0.5);
    let bce = gradient_check(&net, &p, &c, &multi, 1e-5, 400, 2).unwrap();
    assert!(bce <= 1e-4, "cross-entropy gradient error {bce}");
}

#[test]
fn gradient_check_per_layer() {
    let arch = small_arch(4);
    let net = EmbedNetwork::init(&arch, 13).unwrap();
    let (p, c) = inputs(&arch, 22);
    let target = Target::Class(1);
    let (_, grad) = net.loss_and_gradient(&p, &c, &target).unwrap();
    let layout = net.layout();
    let ranges = layout
        .conv_ranges()
        .into_iter()
        .chain(layout.head.iter().flat_map(|l| [l.weights.clone(), l.bias.clone()]));
    for r in ranges {
        let idx: Vec<usize> = r.clone().step_by((r.len() / 50).max(1)).collect();
        let err = compare_with_finite_differences(&net, &p, &c, &target, &grad, &idx, 1e-5).unwrap();
        assert!(err <= 1e-4, "range {r:?}: {err}");
    }
}

#[test]
fn sign_flipped_conv_gradient_is_caught() {
    let arch = small_arch(4);
    let net = EmbedNetwork::init(&arch, 14).unwrap();
    let (p, c) = inputs(&arch, 23);
    let target = Target::Class(0);
    let (_, mut grad) = net.loss_and_gradient(&p, &c, &target).unwrap();
    let conv: Vec<usize> = net.layout().conv_ranges().into_iter().flatten().collect();
    for &i in &conv {
        grad[i] = -grad[i];
    }
    let idx: Vec<usize> = conv.iter().copied().step_by(7).collect();
    let err = compare_with_finite_differences(&net, &p, &c, &target, &grad, &idx, 1e-5).unwrap();
    assert!((err - 2.0).abs() < 0.05, "{err}");
}

#[test]
fn zero_input_output_bias_gradient_is_exact() {
    let arch = small_arch(4);
    let net = EmbedNetwork::init(&arch, 15).unwrap();
    let p = vec![0.0; arch.patch_input_len()];
    let c = vec![0.0; arch.context_input_len()];
    let target = Target::Class(2);
    let (_, grad) = net.loss_and_gradient(&p, &c, &target).unwrap();
    let bias = net.layout().final_layer().bias.clone();
    for i in bias {
        let mut up = net.clone();
        up.params_mut()[i] += 1e-5;
        let mut down = net.clone();
        down.params_mut()[i] -= 1e-5;
        let fd = (up.loss(&p, &c, &target).unwrap() - down.loss(&p, &c, &target).unwrap()) / 2e-5;
        assert!((fd - grad[i]).abs() <= 1e-10, "{fd} vs {}", grad[i]);
    }
}

#[test]
fn zeroed_context_stream_isolates_patch_pixels() {
    let arch = small_arch(3);
    let mut net = EmbedNetwork::init(&arch, 16).unwrap();
    let ctx_ranges: Vec<_> = net.layout().context.iter().flat_map(|l| [l.weights.clone(), l.bias.clone()]).collect();
    for r in ctx_ranges {
        net.params_mut()[r].fill(0.0);
    }
    let (p, c) = inputs(&arch, 30);
    let (_, c2) = inputs(&arch, 31);
    let a = net.forward(&p, &c).unwrap();
    let b = net.forward(&p, &c2).unwrap();
    assert_eq!(a, b);
    let (p2, _) = inputs(&arch, 32);
    assert_ne!(a.logits, net.forward(&p2, &c).unwrap().logits);

    // and the other way round
    let mut net = EmbedNetwork::init(&arch, 16).unwrap();
    let patch_ranges: Vec<_> = net.layout().patch.iter().flat_map(|l| [l.weights.clone(), l.bias.clone()]).collect();
    for r in patch_ranges {
        net.params_mut()[r].fill(0.0);
    }
    assert_eq!(net.forward(&p, &c).unwrap(), net.forward(&p2, &c).unwrap());
    assert_ne!(net.forward(&p, &c).unwrap(), net.forward(&p, &c2).unwrap());
}

#[test]
fn unspecified_targets_do_not_affect_loss_or_gradient() {
    let arch = small_arch(4);
    let net = EmbedNetwork::init(&arch, 17).unwrap();
    let (p, c) = inputs(&arch, 33);
    let a = Target::from_signed(&[1, 0, -1, 0], 0.5);
    let b = match &a {
        Target::Multi { values, mask } => {
            let mut v = values.clone();
            v[1] = 123.0;
            v[3] = f64::NAN;
            Target::Multi { values: v, mask: mask.clone() }
        }
        _ => unreachable!(),
    };
    let (la, ga) = net.loss_and_gradient(&p, &c, &a).unwrap();
    let (lb, gb) = net.loss_and_gradient(&p, &c, &b).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn training_is_bit_deterministic() {
    let arch = small_arch(3);
    let data: Vec<(Vec<f64>, Vec<f64>)> = (0..9).map(|i| inputs(&arch, 200 + i)).collect();
    let set = TrainingSet {
        contexts: data.iter().map(|d| d.1.as_slice()).collect(),
        examples: data
            .iter()
            .enumerate()
            .map(|(i, d)| Example {
                patch: &d.0,
                context: i / 3,
                target: Target::Class(i % 3),
            })
            .collect(),
    };
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 3,
        ..TrainConfig::from_scratch()
    };
    let mut a = EmbedNetwork::init(&arch, 1).unwrap();
    let mut b = a.clone();
    let ha = train(&mut a, &set, &cfg).unwrap();
    let hb = train(&mut b, &set, &cfg).unwrap();
    assert_eq!(ha, hb);
    assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn holistic_network_beats_chance_and_is_deterministic() {
    let spec = LabelSpec::numbered(Mode::Action, 4).unwrap();
    let synth = SynthConfig {
        seed: 5,
        ..SynthConfig::default()
    };
    let (samples, _) = generate_synthetic_dataset(&synth, &spec).unwrap();
    let cfg = HolisticConfig::default();
    let net = train_initial_holistic(&samples, &spec, &cfg).unwrap();
    let again = train_initial_holistic(&samples, &spec, &cfg).unwrap();
    assert_eq!(net.params(), again.params());
    let arch = net.arch().clone();
    let holdout: Vec<_> = samples.iter().filter(|s| s.split != Split::Train).collect();
    let correct = holdout
        .iter()
        .filter(|s| {
            let (p, c) = image_inputs(&s.image, &arch).unwrap();
            let logits = net.forward(&p, &c).unwrap().logits;
            let best = (0..logits.len()).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
            Some(best) == s.action_label()
        })
        .count();
    let acc = correct as f64 / holdout.len() as f64;
    assert!(acc > 0.25, "holdout accuracy {acc}");
}

#[test]
fn soft_target_matches_mixture_of_class_losses() {
    let arch = small_arch(4);
    let net = EmbedNetwork::init(&arch, 15).unwrap();
    let (p, c) = inputs(&arch, 24);
    let q = vec![0.1, 0.2, 0.3, 0.4];
    let soft = net.loss(&p, &c, &Target::Soft(q.clone())).unwrap();
    let mixed: f64 = (0..4).map(|k| q[k] * net.loss(&p, &c, &Target::Class(k)).unwrap()).sum();
    assert!((soft - mixed).abs() <= 1e-12);
    let err = gradient_check(&net, &p, &c, &Target::Soft(q), 1e-5, 400, 3).unwrap();
    assert!(err <= 1e-4, "soft target gradient error {err}");
    assert!(net.loss(&p, &c, &Target::Soft(vec![0.5, 0.5, 0.5, 0.0])).is_err());
    assert!(net.loss(&p, &c, &Target::Soft(vec![1.0, 0.0])).is_err());
}

#[test]
fn synthetic_generation_is_seed_deterministic() {
    let spec = LabelSpec::numbered(Mode::Action, 4).unwrap();
    let cfg = SynthConfig { n_train: 8, n_val: 4, n_test: 4, ..SynthConfig::default() };
    let a = generate_synthetic_dataset(&cfg, &spec).unwrap();
    let b = generate_synthetic_dataset(&cfg, &spec).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic_dataset(&SynthConfig { seed: cfg.seed + 1, ..cfg }, &spec).unwrap();
    assert_ne!(a.0, c.0);
}
