//! Forward-pass oracles written with plain loops over named parameters,
//! plus shape and determinism contracts for every family.

mod common;

use proptest::prelude::*;

use osd::nn::{build_model, Family, Model, ModelConfig};

type Mat = Vec<Vec<f64>>;

struct Named<'a>(&'a Model);

impl Named<'_> {
    fn vec(&self, name: &str) -> Vec<f64> {
        self.0.params().get(name).unwrap_or_else(|| panic!("missing {name}")).1.to_vec()
    }

    fn mat(&self, name: &str) -> Mat {
        let (shape, data) = self.0.params().get(name).unwrap_or_else(|| panic!("missing {name}"));
        data.chunks(shape[1]).map(|r| r.to_vec()).collect()
    }

    fn linear(&self, prefix: &str, x: &Mat) -> Mat {
        let w = self.mat(&format!("{prefix}.weight"));
        let b = self.vec(&format!("{prefix}.bias"));
        x.iter()
            .map(|row| {
                (0..b.len())
                    .map(|o| b[o] + row.iter().enumerate().map(|(i, v)| v * w[i][o]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn layer_norm(&self, prefix: &str, x: &Mat) -> Mat {
        let g = self.vec(&format!("{prefix}.gamma"));
        let b = self.vec(&format!("{prefix}.beta"));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                let s = (var + 1e-5).sqrt();
                row.iter().enumerate().map(|(i, v)| (v - mu) / s * g[i] + b[i]).collect()
            })
            .collect()
    }
}

fn swish(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn add(a: &Mat, b: &Mat, scale: f64) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + scale * y).collect()).collect()
}

fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let a = pos / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

fn feed_forward(p: &Named, prefix: &str, x: &Mat) -> Mat {
    let h = map(&p.linear(&format!("{prefix}.up"), x), swish);
    p.linear(&format!("{prefix}.down"), &h)
}

fn rel_attention(p: &Named, prefix: &str, x: &Mat, heads: usize) -> Mat {
    let t = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let q = p.linear(&format!("{prefix}.query"), x);
    let k = p.linear(&format!("{prefix}.key"), x);
    let v = p.linear(&format!("{prefix}.value"), x);
    let proj = p.mat(&format!("{prefix}.pos_proj"));
    let u = p.vec(&format!("{prefix}.pos_bias_u"));
    let vb = p.vec(&format!("{prefix}.pos_bias_v"));
    let rel = |offset: i64| -> Vec<f64> {
        let e = sinusoid(offset as f64, d);
        (0..d).map(|o| (0..d).map(|i| e[i] * proj[i][o]).sum()).collect()
    };
    let mut out = vec![vec![0.0; d]; t];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| {
                    let r = rel(i as i64 - j as i64);
                    cols.clone()
                        .map(|c| (q[i][c] + u[c]) * k[j][c] + (q[i][c] + vb[c]) * r[c])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..t).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    p.linear(&format!("{prefix}.out"), &out)
}

fn conv_module(p: &Named, prefix: &str, x: &Mat, kernel: usize) -> Mat {
    let t = x.len();
    let d = x[0].len();
    let n = p.layer_norm(&format!("{prefix}.ln_in"), x);
    let e = p.linear(&format!("{prefix}.pointwise_in"), &n);
    let g: Mat = e.iter().map(|r| (0..d).map(|c| r[c] / (1.0 + (-r[c + d]).exp())).collect()).collect();
    let w = p.mat(&format!("{prefix}.depthwise.weight"));
    let b = p.vec(&format!("{prefix}.depthwise.bias"));
    let half = (kernel / 2) as i64;
    let conv: Mat = (0..t)
        .map(|i| {
            (0..d)
                .map(|c| {
                    b[c] + (0..kernel)
                        .filter_map(|k| {
                            let src = i as i64 + k as i64 - half;
                            (0..t as i64).contains(&src).then(|| w[k][c] * g[src as usize][c])
                        })
                        .sum::<f64>()
                })
                .collect()
        })
        .collect();
    let m = map(&p.layer_norm(&format!("{prefix}.ln_mid"), &conv), swish);
    p.linear(&format!("{prefix}.pointwise_out"), &m)
}

fn conformer_oracle(model: &Model, input: &Mat) -> Mat {
    let cfg = model.config();
    let p = Named(model);
    let mut h = p.linear("prenet", input);
    for b in 0..cfg.block_count {
        let pre = format!("encoder.block{b}");
        let f1 = feed_forward(&p, &format!("{pre}.ff1"), &p.layer_norm(&format!("{pre}.ln_ff1"), &h));
        h = add(&h, &f1, 0.5);
        let a = rel_attention(&p, &format!("{pre}.attention"), &p.layer_norm(&format!("{pre}.ln_att"), &h), cfg.head_count);
        h = add(&h, &a, 1.0);
        let c = conv_module(&p, &format!("{pre}.conv"), &h, cfg.conv_kernel);
        h = add(&h, &c, 1.0);
        let f2 = feed_forward(&p, &format!("{pre}.ff2"), &p.layer_norm(&format!("{pre}.ln_ff2"), &h));
        h = add(&h, &f2, 0.5);
        h = p.layer_norm(&format!("{pre}.ln_out"), &h);
    }
    p.linear("postnet", &h)
}

fn transformer_oracle_input(model: &Model, input: &Mat) -> Mat {
    let p = Named(model);
    let d = model.config().model_dim;
    let h = p.linear("prenet", input);
    h.iter().enumerate().map(|(t, r)| r.iter().zip(sinusoid(t as f64, d)).map(|(a, b)| a + b).collect()).collect()
}

fn input_rows(f: &osd::features::FeatureMatrix) -> Mat {
    (0..f.valid_frames).map(|t| (0..64).map(|c| f.values[[c, t]] as f64).collect()).collect()
}

#[test]
fn conformer_matches_unrolled_oracle() {
    let cfg = ModelConfig {
        model_dim: 8,
        block_count: 2,
        head_count: 2,
        ff_dim: 12,
        conv_kernel: 5,
        seed: 17,
        ..ModelConfig::toy(Family::Cf)
    };
    let model = build_model(&cfg).unwrap();
    let feats = common::random_features(14, 11, 4);
    let expected = conformer_oracle(&model, &input_rows(&feats));
    let got = model.forward(&feats).unwrap();
    let mut worst = 0.0f64;
    for (t, row) in expected.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((got.logits[[c, t]] - v).abs() / v.abs().max(1.0));
        }
    }
    assert!(worst < 1e-10, "conformer oracle mismatch {worst:e}");
    for t in 11..14 {
        for c in 0..3 {
            assert_eq!(got.logits[[c, t]], 0.0);
        }
    }
}

#[test]
fn transformer_adds_absolute_positions_before_the_encoder() {
    // With every block's residual branch silenced and unit layer norm, the
    // encoder reduces to the final layer norm of prenet(x) + PE(t).
    let cfg = ModelConfig {
        seed: 3,
        ..ModelConfig::toy(Family::Tf)
    };
    let mut model = build_model(&cfg).unwrap();
    let names: Vec<String> = model
        .params()
        .infos()
        .iter()
        .map(|i| i.name.clone())
        .filter(|n| n.ends_with("out.weight") || n.ends_with("out.bias") || n.ends_with("down.weight") || n.ends_with("down.bias"))
        .filter(|n| n.starts_with("encoder.block"))
        .collect();
    assert!(!names.is_empty());
    for n in &names {
        let id = model.params().find(n).unwrap();
        let info = model.params().info(id).clone();
        model.params_mut().data_mut()[info.offset..info.offset + info.len].fill(0.0);
    }
    let feats = common::random_features(9, 9, 8);
    let x = transformer_oracle_input(&model, &input_rows(&feats));
    let p = Named(&model);
    let expected = p.linear("postnet", &p.layer_norm("encoder.ln_out", &x));
    let got = model.forward(&feats).unwrap();
    for (t, row) in expected.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!((got.logits[[c, t]] - v).abs() < 1e-10, "frame {t} class {c}");
        }
    }
}

#[test]
fn toy_parameter_counts_are_frozen() {
    let counts: Vec<(Family, usize)> = Family::ALL
        .iter()
        .map(|&f| (f, build_model(&ModelConfig::toy(f)).unwrap().param_count()))
        .collect();
    assert_eq!(
        counts,
        vec![(Family::Tf, 1163), (Family::Tcn, 1163), (Family::Cf, 1819), (Family::Rosd, 1279)]
    );
}

#[test]
fn evaluation_forward_is_deterministic_and_seed_sensitive() {
    let feats = common::random_features(30, 30, 1);
    for family in Family::ALL {
        let a = build_model(&ModelConfig { seed: 5, ..ModelConfig::toy(family) }).unwrap();
        let b = build_model(&ModelConfig { seed: 5, ..ModelConfig::toy(family) }).unwrap();
        let c = build_model(&ModelConfig { seed: 6, ..ModelConfig::toy(family) }).unwrap();
        assert_eq!(a.params().data(), b.params().data(), "{family}");
        assert_ne!(a.params().data(), c.params().data(), "{family}");
        assert_eq!(a.forward(&feats).unwrap().logits, a.forward(&feats).unwrap().logits, "{family}");
        assert_eq!(a.forward(&feats).unwrap().logits, b.forward(&feats).unwrap().logits, "{family}");
    }
}

#[test]
fn wrong_mel_count_is_a_shape_error() {
    let model = build_model(&ModelConfig::toy(Family::Tcn)).unwrap();
    let mut feats = common::random_features(10, 10, 2);
    feats.values = ndarray::Array2::zeros((40, 10));
    assert!(matches!(model.forward(&feats), Err(osd::OsdError::Shape { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_shape_follows_input(family in 0usize..4, frames in 1usize..40, pad in 0usize..6, seed in 0u64..1000) {
        let family = Family::ALL[family];
        let model = build_model(&ModelConfig::toy(family)).unwrap();
        let feats = common::random_features(frames + pad, frames, seed);
        let pred = model.forward(&feats).unwrap();
        prop_assert_eq!(pred.logits.dim(), (3, frames + pad));
        prop_assert_eq!(pred.valid_frames, frames);
        prop_assert!(pred.logits.iter().all(|v| v.is_finite()));
        prop_assert_eq!(pred.argmax().len(), frames + pad);
        let emb = model.embed(&feats).unwrap();
        prop_assert_eq!(emb.values.ncols(), frames + pad);
    }

    #[test]
    fn padding_does_not_change_valid_logits(family in 0usize..4, frames in 2usize..30, pad in 1usize..8, seed in 0u64..1000) {
        let model = build_model(&ModelConfig::toy(Family::ALL[family])).unwrap();
        let short = common::random_features(frames, frames, seed);
        let mut long = common::random_features(frames + pad, frames, seed);
        long.values.slice_mut(ndarray::s![.., ..frames]).assign(&short.values);
        let a = model.forward(&short).unwrap();
        let b = model.forward(&long).unwrap();
        prop_assert_eq!(a.logits, b.logits.slice(ndarray::s![.., ..frames]).to_owned());
    }
}
