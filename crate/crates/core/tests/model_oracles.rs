//! Model pieces against brute-force re-implementations.

use mmvt_core::eval::infer_clip;
use mmvt_core::gradcheck::{random_inputs, randomized_model};
use mmvt_core::model::{load_checkpoint, save_checkpoint, INIT_STD};
use mmvt_core::model_spec::{token_geometry, PATCH};
use mmvt_core::trainer::{eval_inputs, ClipData};
use mmvt_core::{parse_model_spec, EncoderDims, MMModel, ModelConfig};
use mmvt_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dims(layers: usize, heads: usize, hidden: usize) -> EncoderDims {
    EncoderDims {
        layers,
        heads,
        hidden,
        mlp_dim: 2 * hidden,
    }
}

fn small(spec: &str, frames: usize) -> ModelConfig {
    let mut c = ModelConfig::new(parse_model_spec(spec).unwrap(), frames, 32, 32);
    c.view_dims = Some(dims(2, 2, 8));
    c.global_dims = Some(dims(1, 2, 8));
    c.n_verbs = 3;
    c.n_nouns = 5;
    c
}

fn param<'a>(m: &'a MMModel<f64>, name: &str) -> &'a [f64] {
    m.params.get(m.params.find(name).unwrap_or_else(|| panic!("no {name}"))).data()
}

fn layer_norm(x: &[f64], scale: &[f64], shift: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-6).sqrt() * scale[i] + shift[i])
        .collect()
}

fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, bias)| bias + x.iter().enumerate().map(|(i, v)| v * w[o * x.len() + i]).sum::<f64>())
        .collect()
}

#[test]
fn cross_view_attention_matches_dense_loops() {
    let mut c = ModelConfig::new(parse_model_spec("Ti/2:R+Ti/4:F").unwrap(), 8, 32, 32);
    c.view_dims = Some(dims(2, 2, 8));
    c.global_dims = Some(dims(1, 2, 8));
    let m = randomized_model(c, 3).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let recv = Tensor::<f64>::from_fn(vec![4, 5, 8], |_| r.random_range(-1.0..1.0));
    let donor = Tensor::<f64>::from_fn(vec![2, 5, 8], |_| r.random_range(-1.0..1.0));

    let mut t = Tape::no_grad();
    let p = m.params.bind(&mut t);
    let (vr, vd) = (t.constant(recv.clone()), t.constant(donor.clone()));
    let out = m.cross_view_attend(&mut t, &p, 0, vr, vd).unwrap();
    let got = t.value(out).data().to_vec();

    let w = |n: &str| param(&m, &format!("fusion0.{n}"));
    let rows = |x: &Tensor<f64>| x.data().chunks(8).map(<[f64]>::to_vec).collect::<Vec<_>>();
    let q_in: Vec<_> = rows(&recv).iter().map(|x| layer_norm(x, w("receiver_norm.scale"), w("receiver_norm.shift"))).collect();
    let kv_in: Vec<_> = rows(&donor)
        .iter()
        .map(|x| layer_norm(x, w("donor_norm.scale"), w("donor_norm.shift")))
        .map(|x| affine(&x, w("donor_proj.weight"), w("donor_proj.bias")))
        .collect();
    let proj = |xs: &[Vec<f64>], n: &str| -> Vec<Vec<f64>> {
        xs.iter().map(|x| affine(x, w(&format!("attn.{n}.weight")), w(&format!("attn.{n}.bias")))).collect()
    };
    let (q, k, v) = (proj(&q_in, "query"), proj(&kv_in, "key"), proj(&kv_in, "value"));
    let (heads, dh) = (2, 4);
    for (i, qi) in q.iter().enumerate() {
        let mut mixed = vec![0.0; 8];
        for h in 0..heads {
            let s: Vec<f64> = k
                .iter()
                .map(|kj| (0..dh).map(|d| qi[h * dh + d] * kj[h * dh + d]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
            for (j, vj) in v.iter().enumerate() {
                let a = (s[j] - mx).exp() / z;
                for d in 0..dh {
                    mixed[h * dh + d] += a * vj[h * dh + d];
                }
            }
        }
        let o = affine(&mixed, w("attn.out.weight"), w("attn.out.bias"));
        for d in 0..8 {
            let want = recv.data()[i * 8 + d] + o[d];
            assert!((got[i * 8 + d] - want).abs() < 1e-10, "token {i} dim {d}");
        }
    }
}

/// Parameter count from the architecture description alone.
fn expected_params(c: &ModelConfig) -> usize {
    let block = |d: &EncoderDims| 4 * d.hidden + 4 * (d.hidden * d.hidden + d.hidden) + 2 * d.hidden * d.mlp_dim + d.mlp_dim + d.hidden;
    let g = c.global_encoder_dims();
    let mut total = 0;
    let mut hidden = Vec::new();
    for v in &c.spec.views {
        let d = c.view_encoder_dims(v);
        let (tt, s) = token_geometry(v, c.frames, c.height, c.width).unwrap();
        let tubelet = v.tubelet_t * PATCH * PATCH * v.modality.channels();
        total += tubelet * d.hidden + d.hidden + tt * s * d.hidden + d.hidden + d.layers * block(&d) + 2 * d.hidden;
        total += d.hidden * g.hidden + g.hidden;
        hidden.push(d.hidden);
    }
    for pair in hidden.windows(2) {
        let (r, d) = (pair[0], pair[1]);
        total += 2 * r + 2 * d + d * r + r + 4 * (r * r + r);
    }
    total + g.hidden + g.layers * block(&g) + 2 * g.hidden + (g.hidden + 1) * (c.n_verbs + c.n_nouns)
}

#[test]
fn parameter_count_matches_formula() {
    for spec in ["Ti/2:R", "Ti/2:R+Ti/4:S+Ti/8:F", "Ti/4:F+Ti/2:S"] {
        let c = small(spec, 8);
        let m = MMModel::<f32>::init(c.clone(), 0, INIT_STD).unwrap();
        assert_eq!(m.num_params(), expected_params(&c), "{spec}");
    }
    let mut c = small("Ti/2:R+Ti/4:F", 8);
    c.view_dims = None;
    c.global_dims = Some(dims(1, 3, 192));
    let m = MMModel::<f32>::init(c.clone(), 0, INIT_STD).unwrap();
    assert_eq!(m.num_params(), expected_params(&c));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let c = small("Ti/2:R+Ti/4:S", 8);
    let m = randomized_model(c.clone(), 4).unwrap().cast::<f32>();
    let bytes = save_checkpoint(&m).unwrap();
    let back: MMModel<f32> = load_checkpoint(&bytes).unwrap();
    assert_eq!(back.params, m.params);
    assert_eq!(back.config, m.config);
    assert_eq!(save_checkpoint(&back).unwrap(), bytes);
    let x = random_inputs(&c, 4).cast::<f32>();
    assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());

    let mut other = c.clone();
    other.n_verbs += 1;
    assert!(MMModel::<f32>::load_matching(&bytes, &other).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 1;
    assert!(load_checkpoint::<f32>(&bad).is_err());
    assert!(load_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
}

fn clip(frames: usize, seed: u64) -> ClipData {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    ClipData {
        clip_id: "c".into(),
        rgb: Some(Tensor::from_fn(vec![frames, 32, 32, 3], |_| r.random_range(0.0f32..1.0))),
        flow: None,
        spec: None,
        verb: 0,
        noun: 0,
    }
}

#[test]
fn four_crops_of_a_clip_of_model_length_equal_one_crop() {
    let c = small("Ti/4:R", 8);
    let m = randomized_model(c.clone(), 5).unwrap().cast::<f32>();
    let x = clip(8, 1);
    let (v, n) = infer_clip(&m, &x).unwrap();
    let (v1, n1) = m.predict(&eval_inputs(&x, 0, 8, 32, 32).unwrap()).unwrap();
    for (a, b) in v.iter().zip(&v1).chain(n.iter().zip(&n1)) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
    }
}

#[test]
fn four_crops_of_a_long_clip_match_explicit_passes() {
    let c = small("Ti/16:R", 64);
    let m = randomized_model(c.clone(), 6).unwrap().cast::<f32>();
    let x = clip(256, 2);
    let (v, n) = infer_clip(&m, &x).unwrap();
    let (mut ve, mut ne) = (vec![0.0f64; 3], vec![0.0f64; 5]);
    for start in [0, 64, 128, 192] {
        let window = x.rgb.as_ref().unwrap().narrow(0, start, 64).unwrap();
        let inputs = mmvt_core::ModelInputs {
            rgb: Some(window),
            flow: None,
            spec: None,
        };
        let (a, b) = m.predict(&inputs).unwrap();
        ve.iter_mut().zip(&a).for_each(|(s, x)| *s += f64::from(*x) / 4.0);
        ne.iter_mut().zip(&b).for_each(|(s, x)| *s += f64::from(*x) / 4.0);
    }
    for (a, b) in v.iter().zip(&ve).chain(n.iter().zip(&ne)) {
        assert!((f64::from(*a) - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn tokens_follow_the_tubelet_loop_order() {
    let c = small("Ti/2:F", 4);
    let m = randomized_model(c.clone(), 7).unwrap();
    let x = random_inputs(&c, 7);
    let flow = x.flow.as_ref().unwrap();
    let mut t = Tape::no_grad();
    let p = m.params.bind(&mut t);
    let tokens = m.embed_tokens(&mut t, &p, 0, flow).unwrap();
    let got = t.value(tokens).clone();
    assert_eq!(got.dims(), &[2, 4, 8]);
    let w = param(&m, "view0.embed.weight");
    let b = param(&m, "view0.embed.bias");
    let pos = param(&m, "view0.pos");
    let f = flow.data();
    for ti in 0..2 {
        for s in 0..4 {
            let (py, px) = (s / 2, s % 2);
            let mut patch = Vec::new();
            for dt in 0..2 {
                for dy in 0..16 {
                    for dx in 0..16 {
                        for ch in 0..2 {
                            patch.push(f[(((ti * 2 + dt) * 32 + py * 16 + dy) * 32 + px * 16 + dx) * 2 + ch]);
                        }
                    }
                }
            }
            let e = affine(&patch, w, b);
            for d in 0..8 {
                let want = e[d] + pos[(ti * 4 + s) * 8 + d];
                assert!((got.data()[(ti * 4 + s) * 8 + d] - want).abs() < 1e-10);
            }
        }
    }
}
