use super::*;
use crate::autodiff::grad_check_many;
use crate::rng::substream;
use rand::Rng;

fn rand_mat(rows: usize, cols: usize, rng: &mut StreamRng) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn rand_graph(n: usize, rng: &mut StreamRng) -> Tensor {
    let mut t = Tensor::matrix(
        n,
        n,
        (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    for i in 0..n {
        t.data_mut()[i * n + i] = 0.0;
    }
    t
}

fn small(d: usize, blocks: usize) -> EncoderConfig {
    EncoderConfig {
        blocks,
        hidden: d,
        ..EncoderConfig::default()
    }
}

fn build(cfg: &EncoderConfig, d_in: usize, classes: usize, seed: u64) -> (ParamStore, Encoder) {
    let mut store = ParamStore::new();
    let mut rng = substream(seed, "encoder-test");
    let enc = Encoder::new(&mut store, cfg, d_in, classes, &mut rng).unwrap();
    (store, enc)
}

fn graph_vars(tape: &mut Tape, g: &Tensor) -> WindowGraph {
    let a = tape.constant(g.clone());
    WindowGraph {
        adjacency: a,
        phi: a,
    }
}

#[test]
fn mask_counts_round_half_away() {
    let cfg = EncoderConfig::default();
    assert_eq!(cfg.mask_count(19), 3);
    assert_eq!(cfg.mask_count(8), 1);
    let zero = EncoderConfig {
        mask_ratio: 0.0,
        ..cfg
    };
    assert_eq!(zero.mask_count(19), 0);
    assert!(EncoderConfig {
        mask_ratio: 1.0,
        ..EncoderConfig::default()
    }
    .validate()
    .is_err());
    assert!(EncoderConfig {
        hidden: 6,
        heads: 4,
        ..EncoderConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn mask_draw_is_seeded_and_sized() {
    let a = MaskSpec::draw(12, 19, 3, &mut substream(5, "mask"));
    let b = MaskSpec::draw(12, 19, 3, &mut substream(5, "mask"));
    assert_eq!(a, b);
    assert!(a
        .windows
        .iter()
        .all(|w| w.len() == 3 && w.windows(2).all(|p| p[0] < p[1])));
    assert_ne!(a, MaskSpec::draw(12, 19, 3, &mut substream(6, "mask")));
    let none = MaskSpec::draw(4, 19, 0, &mut substream(5, "mask"));
    assert!(none.is_empty());
}

#[test]
fn masking_touches_only_selected_rows() {
    let (n, d) = (5, 4);
    let mut rng = substream(1, "mask-apply");
    for mode in [MaskMode::LearnedToken, MaskMode::ZeroVector] {
        let cfg = EncoderConfig {
            mask_mode: mode,
            ..small(d, 1)
        };
        let (store, enc) = build(&cfg, 3, 2, 1);
        let z = rand_mat(n, d, &mut rng);
        let spec = MaskSpec {
            windows: vec![vec![1, 3]],
        };
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| false);
        let zv = tape.constant(z.clone());
        let out = enc.apply_mask(&mut tape, &p, &[zv], &spec).unwrap();
        let m = tape.value(out[0]);
        let token = store.get(enc.mask_token).data();
        for i in 0..n {
            if [1, 3].contains(&i) {
                let want: &[f64] = if mode == MaskMode::ZeroVector {
                    &[0.0; 4]
                } else {
                    token
                };
                assert_eq!(m.row(i), want);
            } else {
                assert_eq!(m.row(i), z.row(i));
            }
        }
        let empty = MaskSpec {
            windows: vec![vec![]],
        };
        let same = enc.apply_mask(&mut tape, &p, &[zv], &empty).unwrap();
        assert_eq!(tape.value(same[0]).data(), z.data());
    }
}

/// Row-wise standardization with unit gain and zero bias.
fn layer_norm_rows(x: &Tensor, eps: f64) -> Tensor {
    let (n, d) = x.dims2();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let r = x.row(i);
        let mu = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        out.extend(r.iter().map(|v| (v - mu) / (var + eps).sqrt()));
    }
    Tensor::matrix(n, d, out).unwrap()
}

#[test]
fn zeroed_block_is_double_layer_norm() {
    let (n, d) = (4, 6);
    let cfg = small(d, 1);
    let (mut store, enc) = build(&cfg, 3, 2, 2);
    let b = &enc.blocks[0];
    for id in b
        .gcn1
        .params()
        .into_iter()
        .chain(b.gcn2.params())
        .chain(b.heads.iter().map(|h| h.wv))
    {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut rng = substream(3, "block");
    let h = rand_mat(n, d, &mut rng);
    let g = rand_graph(n, &mut rng);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |_| false);
    let hv = tape.constant(h.clone());
    let gv = graph_vars(&mut tape, &g);
    let out = enc.block(&mut tape, &p, 0, hv, &gv).unwrap();
    let want = layer_norm_rows(&layer_norm_rows(&h, 1e-5), 1e-5);
    let got = tape.value(out);
    assert_eq!(got.shape(), &[n, d]);
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn stacked_blocks_preserve_shape_and_check_window_count() {
    let (n, d) = (5, 8);
    let (store, enc) = build(&small(d, 3), 3, 2, 4);
    let mut rng = substream(4, "stack");
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |_| false);
    let z: Vec<Var> = (0..2)
        .map(|_| tape.constant(rand_mat(n, d, &mut rng)))
        .collect();
    let graphs: Vec<WindowGraph> = (0..2)
        .map(|_| graph_vars(&mut tape, &rand_graph(n, &mut rng)))
        .collect();
    let h = enc.encode(&mut tape, &p, &z, &graphs).unwrap();
    assert!(h
        .iter()
        .all(|v| tape.value(*v).shape() == [n, d] && tape.value(*v).is_finite()));
    assert!(matches!(
        enc.encode(&mut tape, &p, &z, &graphs[..1]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn block_gradient_matches_finite_differences() {
    let (n, d) = (4, 8);
    for heads in [1, 2] {
        let cfg = EncoderConfig {
            heads,
            ..small(d, 1)
        };
        let (store, enc) = build(&cfg, 3, 2, 5);
        let mut rng = substream(6, "block-grad");
        let mut inputs = vec![rand_mat(n, d, &mut rng), rand_graph(n, &mut rng)];
        inputs.extend(store.iter().map(|(_, _, t)| t.clone()));
        let w = rand_mat(n, d, &mut rng);
        let err = grad_check_many(
            |tape, vars| {
                let p = Bound::from_vars(vars[2..].to_vec());
                let g = WindowGraph {
                    adjacency: vars[1],
                    phi: vars[1],
                };
                let out = enc.block(tape, &p, 0, vars[0], &g)?;
                let wv = tape.constant(w.clone());
                let y = tape.mul(out, wv)?;
                Ok(tape.sum(y))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "heads {heads}: relative error {err}");
    }
}

#[test]
fn encode_is_permutation_equivariant() {
    let (n, d) = (5, 8);
    let (store, enc) = build(&small(d, 2), 3, 2, 7);
    let mut rng = substream(8, "equivariance");
    let z = rand_mat(n, d, &mut rng);
    let g = rand_graph(n, &mut rng);
    let perm = [2, 4, 0, 1, 3];
    let permute_rows = |t: &Tensor| {
        Tensor::from_rows(&perm.iter().map(|&r| t.row(r)).collect::<Vec<_>>()).unwrap()
    };
    let conj = Tensor::matrix(
        n,
        n,
        (0..n * n).map(|k| g.at(perm[k / n], perm[k % n])).collect(),
    )
    .unwrap();
    let run = |z: &Tensor, g: &Tensor| {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| false);
        let zv = tape.constant(z.clone());
        let gv = graph_vars(&mut tape, g);
        let h = enc.encode(&mut tape, &p, &[zv], &[gv]).unwrap();
        tape.value(h[0]).clone()
    };
    let base = run(&z, &g);
    let moved = run(&permute_rows(&z), &conj);
    for (a, b) in moved.data().iter().zip(permute_rows(&base).data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

fn recon_value(xhat: &Tensor, x: &[Tensor], mask: &MaskSpec) -> f64 {
    let mut tape = Tape::new();
    let xh = tape.constant(xhat.clone());
    let xs: Vec<Var> = x.iter().map(|t| tape.constant(t.clone())).collect();
    let l = recon_loss(&mut tape, xh, &xs, mask).unwrap();
    tape.scalar_value(l)
}

#[test]
fn reconstruction_loss_cases() {
    let mut rng = substream(9, "recon");
    let x = vec![rand_mat(4, 3, &mut rng), rand_mat(4, 3, &mut rng)];
    let mask = MaskSpec {
        windows: vec![vec![0, 2], vec![3]],
    };
    let exact = Tensor::from_rows(&[x[0].row(0), x[0].row(2), x[1].row(3)]).unwrap();
    assert_eq!(recon_value(&exact, &x, &mask), 0.0);

    let single = MaskSpec {
        windows: vec![vec![1], vec![]],
    };
    let mut xh = Tensor::from_rows(&[x[0].row(1)]).unwrap();
    xh.data_mut()[0] += 0.3;
    assert!((recon_value(&xh, &x, &single) - 0.09).abs() < 1e-15);

    let guess = rand_mat(3, 3, &mut rng);
    let rows = [(0, 0), (0, 2), (1, 3)];
    let mut want = 0.0;
    for (r, &(t, i)) in rows.iter().enumerate() {
        for c in 0..3 {
            let e = guess.at(r, c) - x[t].at(i, c);
            want += e * e;
        }
    }
    assert!((recon_value(&guess, &x, &mask) - want / 3.0).abs() < 1e-14);
}

#[test]
fn reconstruction_ignores_unmasked_targets() {
    let mut rng = substream(10, "recon-grad");
    let mut tape = Tape::new();
    let x = tape.param(rand_mat(4, 3, &mut rng));
    let xh = tape.constant(rand_mat(2, 3, &mut rng));
    let mask = MaskSpec {
        windows: vec![vec![1, 2]],
    };
    let l = recon_loss(&mut tape, xh, &[x], &mask).unwrap();
    tape.backward(l).unwrap();
    let g = tape.grad(x).unwrap();
    for i in [0, 3] {
        assert!(g[i * 3..(i + 1) * 3].iter().all(|v| *v == 0.0));
    }
    assert!(g[3..9].iter().any(|v| *v != 0.0));
}

#[test]
fn empty_mask_cannot_be_decoded() {
    let (store, enc) = build(&small(4, 1), 3, 2, 11);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |_| false);
    let h = tape.constant(Tensor::zeros(&[3, 4]));
    let empty = MaskSpec {
        windows: vec![vec![]],
    };
    assert!(matches!(
        enc.decode(&mut tape, &p, &[h], &empty),
        Err(Error::Contract(_))
    ));
    let one = MaskSpec {
        windows: vec![vec![2]],
    };
    let out = enc.decode(&mut tape, &p, &[h], &one).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 3]);
}

#[test]
fn classification_head_symmetries() {
    let (n, d) = (5, 4);
    let (store, enc) = build(&small(d, 1), 3, 3, 12);
    let mut rng = substream(13, "classify");
    let h: Vec<Tensor> = (0..3).map(|_| rand_mat(n, d, &mut rng)).collect();
    let logits = |store: &ParamStore, h: &[Tensor]| {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| false);
        let hv: Vec<Var> = h.iter().map(|t| tape.constant(t.clone())).collect();
        let l = enc.classify(&mut tape, &p, &hv).unwrap();
        tape.value(l).data().to_vec()
    };
    // zero-initialized output layer
    let uniform = logits(&store, &h);
    assert!(uniform.iter().all(|v| *v == 0.0));
    assert_eq!(argmax(&uniform), 0);

    let mut trained = store.clone();
    let w = rand_mat(d, 3, &mut rng);
    trained
        .assign("head.output.weight", &[d, 3], w.into_data())
        .unwrap();
    let base = logits(&trained, &h);
    let rev: Vec<Tensor> = h.iter().rev().cloned().collect();
    let perm = [4, 2, 0, 3, 1];
    let node_perm: Vec<Tensor> = h
        .iter()
        .map(|t| Tensor::from_rows(&perm.iter().map(|&r| t.row(r)).collect::<Vec<_>>()).unwrap())
        .collect();
    for other in [logits(&trained, &rev), logits(&trained, &node_perm)] {
        for (a, b) in base.iter().zip(&other) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
