use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::features::FeatureSequence;
use crate::numerics::{finite_difference_check, Graph, ParamStore, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

fn tiny(output: OutputMode) -> ModelConfig {
    ModelConfig {
        d_mel: 4,
        d_aux: 2,
        encoder_units: 8,
        prenet_units: 8,
        attn_units: 8,
        attn_filters: 2,
        attn_kernel: 3,
        attn_v_dim: 8,
        decoder_units: 8,
        postnet_kernels: 3,
        postnet_channels: 4,
        output,
        ..ModelConfig::default()
    }
}

fn source(rng: &mut ChaCha8Rng, cfg: &ModelConfig, frames: usize) -> FeatureSequence {
    random_tensor(rng, frames, cfg.d_mel + cfg.d_aux, 1.0).into()
}

fn zeroed(params: &ParamStore) -> ParamStore {
    let mut p = params.clone();
    let names: Vec<String> = p.names().map(str::to_string).collect();
    for n in names {
        p.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    p
}

#[test]
fn location_code_values() {
    assert_eq!(location_code(0, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
    let c = location_code(1, 4).unwrap();
    let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
    for (a, b) in c.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((c[0] - 0.84147).abs() < 1e-5 && (c[3] - 0.99995).abs() < 1e-5);
    for n in [0, 17, 1000, 999_999, 1_000_000] {
        assert!(location_code(n, 64).unwrap().iter().all(|v| v.abs() <= 1.0));
    }
    assert!(location_code(3, 5).is_err());
}

#[test]
fn encoder_length_law() {
    let cfg = tiny(OutputMode::Mse);
    let params = init_params(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (t_x, t_h) in [(8, 2), (9, 3), (1, 1), (4, 1), (5, 2)] {
        let h = encode(&cfg, &params, &source(&mut rng, &cfg, t_x)).unwrap();
        assert_eq!(h.rows(), t_h, "T_x = {t_x}");
    }
    for t_x in 1..=100 {
        let h = encode(&cfg, &params, &source(&mut rng, &cfg, t_x)).unwrap();
        assert_eq!(h.rows(), t_x.div_ceil(4));
    }
}

#[test]
fn zero_encoder_emits_bare_location_codes() {
    let cfg = tiny(OutputMode::Mse);
    let params = zeroed(&init_params(&cfg, 1).unwrap());
    let x = FeatureSequence::zeros(11, cfg.d_mel + cfg.d_aux);
    let h = encode(&cfg, &params, &x).unwrap();
    for n in 0..h.rows() {
        let code = location_code(n, cfg.encoder_dims()).unwrap();
        for (a, b) in h.row(n).iter().zip(&code) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

/// Scores by direct summation over filter taps and hidden units.
fn scores_oracle(q: &Tensor, h: &Tensor, prev: &[f64], p: &ParamStore, width: usize) -> Vec<f64> {
    let (w, f, u, b, v) = (
        p.get("att.W").unwrap(),
        p.get("att.F").unwrap(),
        p.get("att.U").unwrap(),
        p.get("att.b").unwrap(),
        p.get("att.v").unwrap(),
    );
    let t_h = h.rows();
    let left = (width - 1) / 2;
    (0..t_h)
        .map(|n| {
            let mut content = 0.0;
            for i in 0..q.cols() {
                for j in 0..h.cols() {
                    content += q.get(0, i) * w.get(i, j) * h.get(n, j);
                }
            }
            let feats: Vec<f64> = (0..f.cols())
                .map(|k| {
                    (0..width)
                        .filter_map(|tap| {
                            let src = n as isize + tap as isize - left as isize;
                            (0..t_h as isize).contains(&src).then(|| f.get(tap, k) * prev[src as usize])
                        })
                        .sum()
                })
                .collect();
            let location: f64 = (0..v.rows())
                .map(|d| {
                    let pre: f64 = b.get(0, d) + (0..feats.len()).map(|k| u.get(k, d) * feats[k]).sum::<f64>();
                    v.get(d, 0) * pre.tanh()
                })
                .sum();
            content + location
        })
        .collect()
}

fn scores(cfg: &ModelConfig, p: &ParamStore, q: &Tensor, h: &Tensor, prev: &[f64]) -> Vec<f64> {
    let mut g = Graph::new(p);
    let hv = g.input(h.clone());
    let h_t = g.transpose(hv).unwrap();
    let enc = EncoderStates {
        h: hv,
        h_t,
        t_h: h.rows(),
        t_x: h.rows() * 4,
    };
    let qv = g.input(q.clone());
    let pv = g.input(Tensor::row_vector(prev.to_vec()));
    let e = attention_scores(&mut g, cfg, qv, &enc, pv).unwrap();
    g.value(e).data().to_vec()
}

fn attention_params(rng: &mut ChaCha8Rng, a: usize, dh: usize, k: usize, l: usize, vd: usize) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("att.W", random_tensor(rng, a, dh, 1.0)).unwrap();
    p.insert("att.F", random_tensor(rng, l, k, 1.0)).unwrap();
    p.insert("att.U", random_tensor(rng, k, vd, 1.0)).unwrap();
    p.insert("att.b", random_tensor(rng, 1, vd, 1.0)).unwrap();
    p.insert("att.v", random_tensor(rng, vd, 1, 1.0)).unwrap();
    p
}

#[test]
fn attention_scores_match_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ModelConfig {
        attn_filters: 2,
        attn_kernel: 3,
        ..tiny(OutputMode::Mse)
    };
    let p = attention_params(&mut rng, 4, 6, 2, 3, 5);
    let q = random_tensor(&mut rng, 1, 4, 1.0);
    let h = random_tensor(&mut rng, 5, 6, 1.0);
    let prev = [0.1, 0.4, 0.3, 0.2, 0.0];
    let got = scores(&cfg, &p, &q, &h, &prev);
    let want = scores_oracle(&q, &h, &prev, &p, 3);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-10, "{got:?} vs {want:?}");
    }
}

#[test]
fn attention_scores_degenerate_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ModelConfig {
        attn_filters: 2,
        attn_kernel: 3,
        ..tiny(OutputMode::Mse)
    };
    let q = random_tensor(&mut rng, 1, 4, 1.0);
    let h = random_tensor(&mut rng, 5, 6, 1.0);
    let prev = [0.5, 0.5, 0.0, 0.0, 0.0];

    let mut p = attention_params(&mut rng, 4, 6, 2, 3, 5);
    p.get_mut("att.W").unwrap().data_mut().fill(0.0);
    p.get_mut("att.v").unwrap().data_mut().fill(0.0);
    assert!(scores(&cfg, &p, &q, &h, &prev).iter().all(|e| *e == 0.0));

    let mut p = attention_params(&mut rng, 4, 6, 2, 3, 5);
    p.get_mut("att.W").unwrap().data_mut().fill(0.0);
    p.get_mut("att.U").unwrap().data_mut().fill(0.0);
    let (b, v) = (p.get("att.b").unwrap(), p.get("att.v").unwrap());
    let constant: f64 = (0..5).map(|d| v.get(d, 0) * b.get(0, d).tanh()).sum();
    for e in scores(&cfg, &p, &q, &h, &prev) {
        assert!((e - constant).abs() < 1e-14);
    }
}

fn step(e: &[f64], prev: &[f64]) -> Result<Vec<f64>, ModelError> {
    let p = ParamStore::new();
    let mut g = Graph::new(&p);
    let ev = g.input(Tensor::row_vector(e.to_vec()));
    let pv = g.input(Tensor::row_vector(prev.to_vec()));
    let a = forward_attention_step(&mut g, ev, pv, 0)?;
    Ok(g.value(a).data().to_vec())
}

#[test]
fn forward_attention_hand_case_and_init() {
    let p = ParamStore::new();
    let mut g = Graph::new(&p);
    let a0 = initial_alignment(&mut g, 4);
    assert_eq!(g.value(a0).data(), &[1.0, 0.0, 0.0, 0.0]);
    let a1 = step(&[0.3, 0.3, 0.3], &[1.0, 0.0, 0.0]).unwrap();
    for (a, b) in a1.iter().zip([0.5, 0.5, 0.0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn forward_attention_is_stochastic_and_advances_one_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut prev = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    for i in 0..2000 {
        if i % 50 == 0 {
            prev = vec![0.0; 7];
            prev[0] = 1.0;
        }
        let e: Vec<f64> = (0..7).map(|_| rng.random_range(-4.0..4.0)).collect();
        let next = step(&e, &prev).unwrap();
        assert!((next.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(next.iter().all(|v| *v >= 0.0));
        let last_prev = prev.iter().rposition(|v| *v > 0.0).unwrap();
        assert!(next.iter().skip(last_prev + 2).all(|v| *v == 0.0));
        prev = next;
    }
}

#[test]
fn forward_attention_reports_vanished_mass() {
    let err = step(&[-1e4, -1e4, 1e4], &[1.0, 0.0, 0.0]).unwrap_err();
    assert_eq!(err, ModelError::DegenerateAlignment { step: 0 });
}

#[test]
fn context_is_a_convex_combination() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = random_tensor(&mut rng, 4, 3, 1.0);
    let p = ParamStore::new();
    let run = |alpha: &[f64]| {
        let mut g = Graph::new(&p);
        let hv = g.input(h.clone());
        let h_t = g.transpose(hv).unwrap();
        let enc = EncoderStates {
            h: hv,
            h_t,
            t_h: 4,
            t_x: 16,
        };
        let a = g.input(Tensor::row_vector(alpha.to_vec()));
        let c = context(&mut g, a, &enc).unwrap();
        g.value(c).data().to_vec()
    };
    assert_eq!(run(&[0.0, 0.0, 1.0, 0.0]), h.row(2));
    let mean = run(&[0.25; 4]);
    for (j, m) in mean.iter().enumerate() {
        let want = (0..4).map(|n| h.get(n, j)).sum::<f64>() / 4.0;
        assert!((m - want).abs() < 1e-12);
    }
    let alpha = [0.1, 0.2, 0.3, 0.4];
    let got = run(&alpha);
    for (j, c) in got.iter().enumerate() {
        let want: f64 = (0..4).map(|n| alpha[n] * h.get(n, j)).sum();
        assert!((c - want).abs() < 1e-12);
    }
}

#[test]
fn gmm_partition_cases() {
    let z = gmm_partition(&[0.0; 2 * (2 * 3 + 1)], 2, 3).unwrap();
    assert_eq!(z.weights, vec![0.5, 0.5]);
    assert!(z.sigmas.iter().flatten().all(|s| (s - 2f64.ln()).abs() < 1e-15));
    assert!((z.sigmas[0][0] - 0.693147).abs() < 1e-6);
    assert!(z.means.iter().flatten().all(|m| *m == 0.0));

    let mut o = vec![0.0; 6];
    o[0] = 3f64.ln();
    o[2] = -100.0;
    let p = gmm_partition(&o, 2, 1).unwrap();
    assert!((p.weights[0] - 0.75).abs() < 1e-15 && (p.weights[1] - 0.25).abs() < 1e-15);
    assert!(p.sigmas[0][0] > 0.0);
    assert!(gmm_partition(&o, 2, 3).is_err());
}

#[test]
fn gmm_random_outputs_are_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let o: Vec<f64> = (0..2 * (2 * 8 + 1)).map(|_| rng.random_range(-20.0..20.0)).collect();
        let p = gmm_partition(&o, 2, 8).unwrap();
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(p.sigmas.iter().flatten().all(|s| *s > 0.0));
    }
}

#[test]
fn gmm_select_mean_cases() {
    let one = GmmFrameParams {
        weights: vec![1.0],
        means: vec![vec![3.0]],
        sigmas: vec![vec![1.0]],
    };
    assert_eq!(gmm_select_mean(&one), &[3.0]);
    let mut two = GmmFrameParams {
        weights: vec![0.3, 0.7],
        means: vec![vec![1.0], vec![2.0]],
        sigmas: vec![vec![1.0], vec![1.0]],
    };
    assert_eq!(gmm_select_mean(&two), &[2.0]);
    two.weights = vec![0.5, 0.5];
    assert_eq!(gmm_select_mean(&two), &[1.0]);
}

#[test]
fn gmm_nll_hand_case() {
    let p = GmmFrameParams {
        weights: vec![0.5, 0.5],
        means: vec![vec![0.0], vec![2.0]],
        sigmas: vec![vec![1.0], vec![1.0]],
    };
    assert!((p.nll(&[0.0]) - 1.4851577027216454).abs() < 1e-12);
    let s = (1f64.exp() - 1.0).ln();
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let o = g.input(Tensor::row_vector(vec![0.0, 0.0, s, s, 0.0, 2.0]));
    let nll = gmm_nll(&mut g, o, &[0.0], 1, 2, 1).unwrap();
    assert!((g.value(nll).item() - p.nll(&[0.0])).abs() < 1e-12);
}

#[test]
fn gmm_nll_masks_padded_dims() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let full = g.input(Tensor::row_vector(vec![0.2, 0.1, -0.3, 0.5, 9.0]));
    let part = gmm_nll(&mut g, full, &[0.7, 123.0], 1, 1, 2).unwrap();
    let single = g.input(Tensor::row_vector(vec![0.2, 0.1, 0.5]));
    let want = gmm_nll(&mut g, single, &[0.7], 1, 1, 1).unwrap();
    assert!((g.value(part).item() - g.value(want).item()).abs() < 1e-12);
}

fn one_step_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    x: &FeatureSequence,
    seed: u64,
) -> Result<crate::numerics::Var, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Masks::inference(cfg);
    let enc = pyramid_encode(g, cfg, x, &mut masks)?;
    let state = DecoderState::initial(g, cfg, &enc);
    let prev = g.input(random_tensor(&mut rng, 1, cfg.d_mel, 1.0));
    let (out, _) = decoder_step(g, cfg, prev, 0, &state, &enc, &mut masks)?;
    let mut terms = Vec::new();
    for o in [&out] {
        let y: Vec<f64> = (0..cfg.block_dims()).map(|_| rng.random_range(-1.0..1.0)).collect();
        if cfg.output.is_gmm() {
            terms.push(gmm_nll(g, o.output, &y, y.len(), cfg.mixtures(), cfg.block_dims())?);
        }
        let w = g.input(random_tensor(&mut rng, cfg.r, cfg.d_mel, 1.0));
        let fw = g.mul(o.frames, w)?;
        terms.push(g.sum(fw)?);
        let aw = g.input(random_tensor(&mut rng, 1, enc.t_h, 1.0));
        let a = g.mul(o.alignment, aw)?;
        terms.push(g.sum(a)?);
        terms.push(g.scale(o.end_logit, 0.7)?);
    }
    let all = g.concat_cols(&terms)?;
    Ok(g.sum(all)?)
}

#[test]
fn decoder_step_gradients_match_finite_differences() {
    for output in [OutputMode::Mse, OutputMode::Gmm { mixtures: 2 }] {
        let cfg = tiny(output);
        let params = init_params(&cfg, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = source(&mut rng, &cfg, 12);
        let report = finite_difference_check(&params, 1e-5, 1e-4, |g| {
            one_step_graph(g, &cfg, &x, 10).map_err(|e| match e {
                ModelError::Numerics(n) => n,
                other => panic!("{other}"),
            })
        })
        .unwrap();
        assert!(report.passed(), "{output}: worst {:?}", report.max_rel_error);
    }
}

#[test]
fn zero_projection_gives_zero_frames_and_even_odds() {
    let cfg = tiny(OutputMode::Mse);
    let mut params = init_params(&cfg, 11).unwrap();
    for n in ["dec.proj.w", "dec.proj.b", "dec.end.w", "dec.end.b"] {
        params.get_mut(n).unwrap().data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = source(&mut rng, &cfg, 9);
    let mut g = Graph::new(&params);
    let mut masks = Masks::inference(&cfg);
    let enc = pyramid_encode(&mut g, &cfg, &x, &mut masks).unwrap();
    let state = DecoderState::initial(&mut g, &cfg, &enc);
    let prev = g.input(Tensor::zeros(1, cfg.d_mel));
    let (out, _) = decoder_step(&mut g, &cfg, prev, 0, &state, &enc, &mut masks).unwrap();
    assert!(g.value(out.frames).data().iter().all(|v| *v == 0.0));
    assert_eq!(g.value(out.p_end).item(), 0.5);
    assert_eq!(g.shape(out.frames), (cfg.r, cfg.d_mel));
}

#[test]
fn postnet_identity_lengths_and_gradients() {
    let cfg = tiny(OutputMode::Mse);
    let params = init_params(&cfg, 13).unwrap();
    let zero = zeroed(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for t in [1, 7, 64] {
        let y: FeatureSequence = random_tensor(&mut rng, t, cfg.d_mel, 1.0).into();
        assert_eq!(refine(&cfg, &zero, &y).unwrap(), y);
        let z = refine(&cfg, &params, &y).unwrap();
        assert_eq!((z.frames(), z.dims()), (t, cfg.d_mel));
    }
    let y = random_tensor(&mut rng, 9, cfg.d_mel, 1.0);
    let w = random_tensor(&mut rng, 9, cfg.d_mel, 1.0);
    let report = finite_difference_check(&params, 1e-5, 1e-4, |g| {
        let yv = g.input(y.clone());
        let z = postnet_refine(g, &cfg, yv).map_err(|e| match e {
            ModelError::Numerics(n) => n,
            other => panic!("{other}"),
        })?;
        let wv = g.input(w.clone());
        let m = g.mul(z, wv)?;
        g.sum(m)
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report.max_rel_error);
}

#[test]
fn step_cap_and_row_sums() {
    let cfg = tiny(OutputMode::Mse);
    let mut params = init_params(&cfg, 15).unwrap();
    params.get_mut("dec.end.w").unwrap().data_mut().fill(0.0);
    params.get_mut("dec.end.b").unwrap().data_mut().fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = source(&mut rng, &cfg, 10);
    let c = convert(&cfg, &params, &x, ConvertLimits::with_max_steps(1)).unwrap();
    assert_eq!(c.mel.frames(), cfg.r);
    assert!(c.hit_step_cap());
    let c = convert(&cfg, &params, &x, ConvertLimits::default()).unwrap();
    assert_eq!(c.alignment.steps(), 3 * 5);
    for t in 0..c.alignment.steps() {
        assert!((c.alignment.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn end_flag_stops_and_fixed_length_without_attention() {
    let cfg = tiny(OutputMode::Mse);
    let mut params = init_params(&cfg, 17).unwrap();
    params.get_mut("dec.end.w").unwrap().data_mut().fill(0.0);
    params.get_mut("dec.end.b").unwrap().data_mut().fill(5.0);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = source(&mut rng, &cfg, 10);
    let c = convert(&cfg, &params, &x, ConvertLimits::default()).unwrap();
    assert_eq!((c.stop, c.mel.frames()), (StopReason::EndFlag, cfg.r));

    let cfg = ModelConfig {
        attention: false,
        ..tiny(OutputMode::Mse)
    };
    let params = init_params(&cfg, 17).unwrap();
    assert!(!params.contains("att.W"));
    let c = convert(&cfg, &params, &x, ConvertLimits::default()).unwrap();
    assert_eq!((c.stop, c.mel.frames()), (StopReason::FixedLength, 10));
    let want = [0, 0, 1, 1, 2];
    for (t, w) in want.iter().enumerate() {
        assert_eq!(c.alignment.argmax(t), *w);
    }
}

#[test]
fn conversion_is_deterministic() {
    let cfg = tiny(OutputMode::Gmm { mixtures: 2 });
    let params = init_params(&cfg, 19).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = source(&mut rng, &cfg, 13);
    let a = convert(&cfg, &params, &x, ConvertLimits::with_max_steps(6)).unwrap();
    let b = convert(&cfg, &params, &x, ConvertLimits::with_max_steps(6)).unwrap();
    assert_eq!(a.mel, b.mel);
    assert_eq!(a.p_end, b.p_end);
}
