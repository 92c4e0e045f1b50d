use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ssm::make_stable_a;
use crate::tensor::Tensor;

fn tiny(layers: usize) -> ModelConfig {
    ModelConfig {
        layers,
        d_model: 6,
        d_state: 4,
        d_sum: 5,
        d_attn: 3,
        pool_capacity: 4,
        vocab: 11,
        period: 2,
        lookback: 2,
        seed: 9,
        ..ModelConfig::default()
    }
}

fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Plain stacked SSM language model written out with explicit loops.
fn oracle_logits(model: &MemMamba, toks: &[usize]) -> Vec<Vec<f64>> {
    let cfg = model.config();
    let p = model.params();
    let (d, ds) = (cfg.d_model, cfg.d_state);
    let mv = |w: &Tensor, x: &[f64]| -> Vec<f64> {
        (0..w.rows())
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..x.len() {
                    acc += w.get2(i, j) * x[j];
                }
                acc
            })
            .collect()
    };
    let mut hs = vec![vec![0.0; ds]; cfg.layers];
    let mut out = Vec::new();
    for &tok in toks {
        let mut x = model.embedding().row(tok).to_vec();
        for l in 1..=cfg.layers {
            let a = make_stable_a(p.by_name(&format!("layer{l}.ssm.a_raw")).unwrap());
            let b = p.by_name(&format!("layer{l}.ssm.b")).unwrap();
            let c = p.by_name(&format!("layer{l}.ssm.c")).unwrap();
            let bx = mv(b, &x);
            let h = &mut hs[l - 1];
            for i in 0..ds {
                h[i] = a.data()[i] * h[i] + bx[i];
            }
            x = mv(c, h);
            assert_eq!(x.len(), d);
        }
        out.push(mv(model.w_out(), &x));
    }
    out
}

#[test]
fn single_token_shapes() {
    let m = MemMamba::new(tiny(3)).unwrap();
    let (logits, trace) = m.forward(&[4]).unwrap();
    assert_eq!(logits.shape(), &[1, 11]);
    assert_eq!(trace.hidden.shape(), &[3, 1, 6]);
}

#[test]
fn forward_is_deterministic() {
    let m = MemMamba::new(tiny(3)).unwrap();
    let toks = tokens(40, 11, 1);
    let a = m.forward(&toks).unwrap();
    let b = m.forward(&toks).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert!(a.0.is_finite());
}

#[test]
fn out_of_range_token_is_an_input_error() {
    let m = MemMamba::new(tiny(1)).unwrap();
    assert!(matches!(m.forward(&[1, 11]), Err(crate::Error::Input(_))));
    assert!(matches!(m.forward(&[]), Err(crate::Error::Input(_))));
}

#[test]
fn ablation_matches_plain_ssm_bitwise() {
    for layers in [1, 3] {
        let m = MemMamba::new(tiny(layers).ablated()).unwrap();
        let toks = tokens(30, 11, layers as u64);
        let (logits, trace) = m.forward(&toks).unwrap();
        let want = oracle_logits(&m, &toks);
        for (t, row) in want.iter().enumerate() {
            assert_eq!(logits.row(t), row.as_slice(), "layers={layers} t={t}");
        }
        assert!(trace.steps.iter().all(|s| !s.inserted && !s.token_attention && !s.layer_attention));
    }
}

#[test]
fn always_inserting_fills_pool_to_capacity() {
    let cfg = ModelConfig {
        tau1: -1.0,
        ..tiny(2)
    };
    let m = MemMamba::new(cfg).unwrap();
    let (_, trace) = m.forward(&tokens(10, 11, 2)).unwrap();
    for t in 0..10 {
        for l in 1..=2 {
            assert_eq!(trace.step(t, l).pool_len, (t + 1).min(4));
        }
    }
}

#[test]
fn layer_attention_only_on_period_layers() {
    let cfg = ModelConfig {
        tau1: -1.0,
        tau2: -1.0,
        period: 4,
        lookback: 3,
        ..tiny(5)
    };
    let m = MemMamba::new(cfg).unwrap();
    let (_, trace) = m.forward(&tokens(12, 11, 3)).unwrap();
    for s in &trace.steps {
        if s.layer % 4 != 0 {
            assert!(!s.layer_attention);
            assert_eq!(s.c_layer_norm, 0.0);
        } else {
            assert!(s.layer_attention);
        }
    }
}

#[test]
fn attention_weights_sum_to_one() {
    let cfg = ModelConfig {
        tau1: -1.0,
        tau2: -1.0,
        ..tiny(4)
    };
    let m = MemMamba::new(cfg).unwrap();
    let (_, trace) = m.forward(&tokens(25, 11, 4)).unwrap();
    let sums: Vec<f64> = trace
        .steps
        .iter()
        .flat_map(|s| [s.token_weight_sum, s.layer_weight_sum])
        .flatten()
        .collect();
    assert!(!sums.is_empty());
    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
}

#[test]
fn replay_reproduces_live_pass() {
    for policy in [PoolPolicy::Fifo, PoolPolicy::Priority] {
        let cfg = ModelConfig {
            pool_policy: policy,
            pool_capacity: 3,
            ..tiny(3)
        };
        let m = MemMamba::new(cfg).unwrap();
        let toks = tokens(30, 11, 5);
        let live = m.forward_with(&toks, None).unwrap();
        let replayed = m.forward_with(&toks, Some(&live.record)).unwrap();
        assert_eq!(live.logits, replayed.logits);
        assert_eq!(live.record, replayed.record);
        assert!(m.forward_with(&toks[..5], Some(&live.record)).is_err());
    }
}

#[test]
fn session_matches_forward() {
    let cfg = ModelConfig {
        window: 3,
        pooling: Pooling::Mean,
        fusion: FusionMethod::Gated,
        ..tiny(4)
    };
    let m = MemMamba::new(cfg).unwrap();
    let toks = tokens(20, 11, 6);
    let (logits, _) = m.forward(&toks).unwrap();
    let mut s = m.session();
    for (t, &tok) in toks.iter().enumerate() {
        assert_eq!(s.step(tok).unwrap().as_slice(), logits.row(t));
    }
    assert_eq!(s.steps_taken(), 20);
    assert!(s.peak_state_bytes() > 0);
}

#[test]
fn every_fusion_method_runs_and_ablates() {
    let toks = tokens(16, 11, 7);
    for fusion in FusionMethod::ALL {
        let cfg = ModelConfig {
            fusion,
            ..tiny(2)
        };
        let m = MemMamba::new(cfg.clone()).unwrap();
        let (logits, _) = m.forward(&toks).unwrap();
        assert!(logits.is_finite(), "{fusion:?}");
        let abl = MemMamba::new(cfg.ablated()).unwrap();
        let (al, _) = abl.forward(&toks).unwrap();
        let want = oracle_logits(&abl, &toks);
        assert_eq!(al.row(15), want[15].as_slice(), "{fusion:?}");
    }
}

#[test]
fn ablation_shares_common_weights() {
    let a = MemMamba::new(tiny(3)).unwrap();
    let b = MemMamba::new(tiny(3).ablated()).unwrap();
    for (_, name, t) in b.params().iter() {
        assert_eq!(a.params().by_name(name), Some(t), "{name}");
    }
}

#[test]
fn dead_summary_path_has_exactly_zero_gradient() {
    let cfg = ModelConfig {
        tau1: -1.0,
        tau2: 1.1,
        period: 9,
        ..tiny(2)
    };
    let m = MemMamba::new(cfg).unwrap();
    let toks = tokens(12, 11, 8);
    let targets: Vec<(usize, usize)> = (0..11).map(|t| (t, toks[t + 1])).collect();
    let (_, grads, _) = m.loss_and_grad(&toks, &targets, None).unwrap();
    for (id, name, _) in m.params().iter() {
        let g = grads.get(id);
        let dead = ["note.", "tok.", "state.", "fuse."].iter().any(|k| name.contains(k));
        if dead {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name} should be dead");
        } else if name.ends_with("ssm.b") || name == "out" {
            assert!(g.norm() > 0.0, "{name} should be live");
        }
    }
}

#[test]
fn fired_attention_sends_gradient_to_summaries() {
    let cfg = ModelConfig {
        tau1: -1.0,
        tau2: -1.0,
        ..tiny(2)
    };
    let m = MemMamba::new(cfg).unwrap();
    let toks = tokens(12, 11, 9);
    let targets: Vec<(usize, usize)> = (0..11).map(|t| (t, toks[t + 1])).collect();
    let (_, grads, _) = m.loss_and_grad(&toks, &targets, None).unwrap();
    for name in ["layer1.note.proj", "layer1.tok.wk", "layer1.tok.wv", "layer1.note.w", "layer2.lay.wv"] {
        let id = m.params().id(name).unwrap();
        assert!(grads.get(id).norm() > 0.0, "{name}");
    }
}

#[test]
fn from_parts_rejects_wrong_layout() {
    let m = MemMamba::new(tiny(2)).unwrap();
    let other = tiny(3);
    assert!(MemMamba::from_parts(other, m.params().clone()).is_err());
}
