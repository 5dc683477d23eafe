use super::*;
use crate::rng;
use crate::tensor::fd::check_grads;
use rand::Rng;

/// Independent scalar-loop attention: no tape, no shared kernels.
fn host_attention(
    q_in: &[Vec<f64>],
    kv: &[Vec<f64>],
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
    wv: &[Vec<f64>],
    wo: &[Vec<f64>],
    heads: usize,
    causal: bool,
) -> Vec<Vec<f64>> {
    let d = wq.len();
    let dh = d / heads;
    let matvec = |m: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        (0..m[0].len())
            .map(|j| (0..x.len()).map(|i| x[i] * m[i][j]).sum())
            .collect()
    };
    let q: Vec<Vec<f64>> = q_in.iter().map(|r| matvec(wq, r)).collect();
    let k: Vec<Vec<f64>> = kv.iter().map(|r| matvec(wk, r)).collect();
    let v: Vec<Vec<f64>> = kv.iter().map(|r| matvec(wv, r)).collect();
    let mut merged = vec![vec![0.0; d]; q_in.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qrow) in q.iter().enumerate() {
            let mut scores: Vec<f64> = k
                .iter()
                .map(|krow| {
                    qrow[cols.clone()]
                        .iter()
                        .zip(&krow[cols.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            if causal {
                for (j, s) in scores.iter_mut().enumerate() {
                    if j > i {
                        *s = f64::NEG_INFINITY;
                    }
                }
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for (j, vrow) in v.iter().enumerate() {
                let w = exps[j] / denom;
                for c in cols.clone() {
                    merged[i][c] += w * vrow[c];
                }
            }
        }
    }
    merged.iter().map(|r| matvec(wo, r)).collect()
}

fn rows(data: &[f64], cols: usize) -> Vec<Vec<f64>> {
    data.chunks(cols).map(|c| c.to_vec()).collect()
}

fn rand_weights(tape: &mut Tape, d: usize, heads: usize, seed: u64) -> AttentionWeights {
    let mut r = rng::seeded(seed);
    let mut mat = |t: &mut Tape| {
        t.leaf(rng::uniform_vec(&mut r, d * d, -0.5, 0.5), vec![d, d])
            .unwrap()
    };
    AttentionWeights {
        w_q: mat(tape),
        w_k: mat(tape),
        w_v: mat(tape),
        w_o: mat(tape),
        heads,
    }
}

fn rand_block(tape: &mut Tape, d: usize, heads: usize, seed: u64) -> BlockWeights {
    let mut r = rng::seeded(seed);
    let attn = rand_weights(tape, d, heads, seed ^ 0xabc);
    BlockWeights {
        attn,
        ffn_w1: tape
            .leaf(rng::uniform_vec(&mut r, d * 4 * d, -0.3, 0.3), vec![d, 4 * d])
            .unwrap(),
        ffn_b1: tape
            .leaf(rng::uniform_vec(&mut r, 4 * d, -0.1, 0.1), vec![4 * d])
            .unwrap(),
        ffn_w2: tape
            .leaf(rng::uniform_vec(&mut r, 4 * d * d, -0.3, 0.3), vec![4 * d, d])
            .unwrap(),
        ffn_b2: tape
            .leaf(rng::uniform_vec(&mut r, d, -0.1, 0.1), vec![d])
            .unwrap(),
        ln1_gain: tape.leaf(vec![1.0; d], vec![d]).unwrap(),
        ln1_bias: tape.leaf(vec![0.0; d], vec![d]).unwrap(),
        ln2_gain: tape.leaf(vec![1.0; d], vec![d]).unwrap(),
        ln2_bias: tape.leaf(vec![0.0; d], vec![d]).unwrap(),
    }
}

#[test]
fn mhsa_single_token_is_value_path() {
    let d = 4;
    let mut tape = Tape::new();
    let w = rand_weights(&mut tape, d, 2, 1);
    let mut r = rng::seeded(2);
    let xv = rng::uniform_vec(&mut r, d, -1.0, 1.0);
    let x = tape.constant(xv.clone(), vec![1, d]).unwrap();
    let y = mhsa(&mut tape, x, &w, false).unwrap();
    // with one token the attention weight is 1, so out = (x Wv) Wo
    let v = tape.matmul(x, w.w_v).unwrap();
    let want = tape.matmul(v, w.w_o).unwrap();
    for (a, b) in tape.value(y).iter().zip(tape.value(want)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn causal_position_zero_ignores_the_future() {
    let d = 4;
    let t = 3;
    let build = |future: f64| {
        let mut tape = Tape::new();
        let w = rand_weights(&mut tape, d, 2, 7);
        let mut xv = {
            let mut r = rng::seeded(8);
            rng::uniform_vec(&mut r, t * d, -1.0, 1.0)
        };
        for slot in xv[d..].iter_mut() {
            *slot += future;
        }
        let x = tape.constant(xv, vec![t, d]).unwrap();
        let y = mhsa(&mut tape, x, &w, true).unwrap();
        tape.value(y)[..d].to_vec()
    };
    let row0_a = build(0.0);
    let row0_b = build(10.0);
    assert_eq!(row0_a, row0_b);
}

#[test]
fn mhsa_matches_host_oracle() {
    let d = 4;
    let t = 2;
    let mut tape = Tape::new();
    let w = rand_weights(&mut tape, d, 1, 21);
    let mut r = rng::seeded(22);
    let xv = rng::uniform_vec(&mut r, t * d, -1.0, 1.0);
    let x = tape.constant(xv.clone(), vec![t, d]).unwrap();
    let y = mhsa(&mut tape, x, &w, false).unwrap();
    let want = host_attention(
        &rows(&xv, d),
        &rows(&xv, d),
        &rows(tape.value(w.w_q), d),
        &rows(tape.value(w.w_k), d),
        &rows(tape.value(w.w_v), d),
        &rows(tape.value(w.w_o), d),
        1,
        false,
    );
    for (row, wrow) in tape.value(y).chunks(d).zip(&want) {
        for (a, b) in row.iter().zip(wrow) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_attention_single_key_collapses() {
    let d = 4;
    let mut tape = Tape::new();
    let w = rand_weights(&mut tape, d, 2, 31);
    let mut r = rng::seeded(32);
    let q = tape
        .constant(rng::uniform_vec(&mut r, 3 * d, -1.0, 1.0), vec![3, d])
        .unwrap();
    let kv = tape
        .constant(rng::uniform_vec(&mut r, d, -1.0, 1.0), vec![1, d])
        .unwrap();
    let y = cross_attention(&mut tape, q, kv, &w).unwrap();
    // single key: every query's weight is 1, so out rows all equal (kv Wv) Wo
    let v = tape.matmul(kv, w.w_v).unwrap();
    let want = tape.matmul(v, w.w_o).unwrap();
    for row in tape.value(y).chunks(d) {
        for (a, b) in row.iter().zip(tape.value(want)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_attention_identical_keys_depend_only_on_value() {
    let d = 4;
    let mut tape = Tape::new();
    let w = rand_weights(&mut tape, d, 2, 41);
    let mut r = rng::seeded(42);
    let q = tape
        .constant(rng::uniform_vec(&mut r, 2 * d, -1.0, 1.0), vec![2, d])
        .unwrap();
    let row = rng::uniform_vec(&mut r, d, -1.0, 1.0);
    let kv = tape
        .constant([row.clone(), row.clone(), row].concat(), vec![3, d])
        .unwrap();
    let y = cross_attention(&mut tape, q, kv, &w).unwrap();
    let vals = tape.value(y);
    for (a, b) in vals[..d].iter().zip(&vals[d..2 * d]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cross_attention_matches_host_oracle() {
    let d = 4;
    let mut tape = Tape::new();
    let w = rand_weights(&mut tape, d, 2, 51);
    let mut r = rng::seeded(52);
    let qv = rng::uniform_vec(&mut r, 2 * d, -1.0, 1.0);
    let kvv = rng::uniform_vec(&mut r, 3 * d, -1.0, 1.0);
    let q = tape.constant(qv.clone(), vec![2, d]).unwrap();
    let kv = tape.constant(kvv.clone(), vec![3, d]).unwrap();
    let y = cross_attention(&mut tape, q, kv, &w).unwrap();
    let want = host_attention(
        &rows(&qv, d),
        &rows(&kvv, d),
        &rows(tape.value(w.w_q), d),
        &rows(tape.value(w.w_k), d),
        &rows(tape.value(w.w_v), d),
        &rows(tape.value(w.w_o), d),
        2,
        false,
    );
    for (row, wrow) in tape.value(y).chunks(d).zip(&want) {
        for (a, b) in row.iter().zip(wrow) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn pair_cross_matches_concatenated_kv() {
    // one softmax over [kv_a; kv_b] is the reference semantics
    let d = 4;
    let mut tape = Tape::new();
    let w = rand_weights(&mut tape, d, 2, 61);
    let mut r = rng::seeded(62);
    let qv = rng::uniform_vec(&mut r, 2 * d, -1.0, 1.0);
    let av = rng::uniform_vec(&mut r, 3 * d, -1.0, 1.0);
    let bv = rng::uniform_vec(&mut r, 3 * d, -1.0, 1.0);
    let q = tape.constant(qv.clone(), vec![2, d]).unwrap();
    let a = tape.constant(av.clone(), vec![3, d]).unwrap();
    let b = tape.constant(bv.clone(), vec![3, d]).unwrap();
    let y = pair_cross_attention(&mut tape, q, a, b, &w).unwrap();
    let want = host_attention(
        &rows(&qv, d),
        &rows(&[av, bv].concat(), d),
        &rows(tape.value(w.w_q), d),
        &rows(tape.value(w.w_k), d),
        &rows(tape.value(w.w_v), d),
        &rows(tape.value(w.w_o), d),
        2,
        false,
    );
    for (row, wrow) in tape.value(y).chunks(d).zip(&want) {
        for (x, z) in row.iter().zip(wrow) {
            assert!((x - z).abs() < 1e-12);
        }
    }
}

#[test]
fn pair_cross_swap_is_bit_identical() {
    let d = 8;
    for seed in [71u64, 72, 73] {
        let run = |swap: bool| {
            let mut tape = Tape::new();
            let w = rand_weights(&mut tape, d, 4, seed);
            let mut r = rng::seeded(seed ^ 0xff);
            let qv = rng::uniform_vec(&mut r, 3 * d, -1.0, 1.0);
            let av = rng::uniform_vec(&mut r, 5 * d, -1.0, 1.0);
            let bv = rng::uniform_vec(&mut r, 5 * d, -1.0, 1.0);
            let q = tape.constant(qv, vec![3, d]).unwrap();
            let a = tape.constant(av, vec![5, d]).unwrap();
            let b = tape.constant(bv, vec![5, d]).unwrap();
            let (first, second) = if swap { (b, a) } else { (a, b) };
            let y = pair_cross_attention(&mut tape, q, first, second, &w).unwrap();
            tape.value(y).to_vec()
        };
        assert_eq!(run(false), run(true));
    }
}

#[test]
fn encoder_layer_with_zero_projections_is_identity() {
    let d = 4;
    let mut tape = Tape::new();
    let mut w = rand_block(&mut tape, d, 2, 81);
    w.attn.w_o = tape.constant(vec![0.0; d * d], vec![d, d]).unwrap();
    w.ffn_w2 = tape.constant(vec![0.0; 4 * d * d], vec![4 * d, d]).unwrap();
    w.ffn_b2 = tape.constant(vec![0.0; d], vec![d]).unwrap();
    let mut r = rng::seeded(82);
    let xv = rng::uniform_vec(&mut r, 3 * d, -1.0, 1.0);
    let x = tape.constant(xv.clone(), vec![3, d]).unwrap();
    let y = encoder_layer(&mut tape, x, &w).unwrap();
    assert_eq!(tape.value(y), xv.as_slice());
}

#[test]
fn full_layer_gradient_check() {
    let d = 4;
    let heads = 2;
    let t = 3;
    for seed in [91u64, 92, 93] {
        let mut r = rng::seeded(seed);
        let shapes: Vec<Vec<usize>> = vec![
            vec![t, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, 4 * d],
            vec![4 * d],
            vec![4 * d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d],
            vec![d],
        ];
        let mut inputs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| rng::uniform_vec(&mut r, s.iter().product(), -0.5, 0.5))
            .collect();
        // keep the norms well-conditioned
        inputs[9] = vec![1.0; d];
        inputs[11] = vec![1.0; d];
        let err = check_grads(
            |tape, ids| {
                let w = BlockWeights {
                    attn: AttentionWeights {
                        w_q: ids[1],
                        w_k: ids[2],
                        w_v: ids[3],
                        w_o: ids[4],
                        heads,
                    },
                    ffn_w1: ids[5],
                    ffn_b1: ids[6],
                    ffn_w2: ids[7],
                    ffn_b2: ids[8],
                    ln1_gain: ids[9],
                    ln1_bias: ids[10],
                    ln2_gain: ids[11],
                    ln2_bias: ids[12],
                };
                let y = decoder_layer(tape, ids[0], &w).unwrap();
                let n = tape.value(y).len();
                let rw = {
                    let mut rr = rng::seeded(seed ^ 0x5);
                    tape.constant(rng::uniform_vec(&mut rr, n, -1.0, 1.0), vec![t, d])
                        .unwrap()
                };
                let p = tape.mul(y, rw).unwrap();
                tape.sum(p)
            },
            &inputs,
            &shapes,
        );
        assert!(err < 1e-4, "layer fd err {err} at seed {seed}");
    }
}

#[test]
fn non_causal_layer_is_permutation_equivariant() {
    let d = 4;
    // two tokens: attention reduces two summands, where f64 addition
    // commutes, so the swap is bit-exact
    let run2 = |swapped: bool| {
        let mut tape = Tape::new();
        let w = rand_block(&mut tape, d, 2, 101);
        let mut r = rng::seeded(102);
        let t0 = rng::uniform_vec(&mut r, d, -1.0, 1.0);
        let t1 = rng::uniform_vec(&mut r, d, -1.0, 1.0);
        let xv = if swapped {
            [t1.clone(), t0.clone()].concat()
        } else {
            [t0, t1].concat()
        };
        let x = tape.constant(xv, vec![2, d]).unwrap();
        let y = encoder_layer(&mut tape, x, &w).unwrap();
        tape.value(y).to_vec()
    };
    let base = run2(false);
    let swapped = run2(true);
    assert_eq!(&base[..d], &swapped[d..]);
    assert_eq!(&base[d..], &swapped[..d]);

    // larger sizes: same multiset of summands in permuted order; checked
    // at tight tolerance since f64 addition does not reassociate exactly
    let t = 5;
    let perm_cases: Vec<Vec<usize>> = vec![vec![4, 2, 0, 1, 3], vec![1, 0, 3, 4, 2]];
    let mut tape = Tape::new();
    let w = rand_block(&mut tape, d, 2, 103);
    let mut r = rng::seeded(104);
    let xv = rng::uniform_vec(&mut r, t * d, -1.0, 1.0);
    let x = tape.constant(xv.clone(), vec![t, d]).unwrap();
    let y = encoder_layer(&mut tape, x, &w).unwrap();
    let base = tape.value(y).to_vec();
    for perm in perm_cases {
        let mut pv = vec![0.0; t * d];
        for (i, &p) in perm.iter().enumerate() {
            pv[i * d..(i + 1) * d].copy_from_slice(&xv[p * d..(p + 1) * d]);
        }
        let xp = tape.constant(pv, vec![t, d]).unwrap();
        let yp = encoder_layer(&mut tape, xp, &w).unwrap();
        let got = tape.value(yp);
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..d {
                let diff = (got[i * d + c] - base[p * d + c]).abs();
                assert!(diff < 1e-12, "perm diff {diff}");
            }
        }
    }
}

#[test]
fn causal_output_ignores_later_edits() {
    let d = 4;
    let t = 4;
    let run = |edit: bool| {
        let mut tape = Tape::new();
        let w = rand_block(&mut tape, d, 2, 111);
        let mut r = rng::seeded(112);
        let mut xv = rng::uniform_vec(&mut r, t * d, -1.0, 1.0);
        if edit {
            for slot in xv[2 * d..].iter_mut() {
                *slot = -*slot + 0.5;
            }
        }
        let x = tape.constant(xv, vec![t, d]).unwrap();
        let y = decoder_layer(&mut tape, x, &w).unwrap();
        tape.value(y)[..2 * d].to_vec()
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn attention_rows_sum_to_one_under_causal_mask() {
    // the mask adds -inf above the diagonal; rows must still normalize
    let t = 5;
    let mut tape = Tape::new();
    let mut r = rng::seeded(121);
    let scores = tape
        .constant(rng::uniform_vec(&mut r, t * t, -3.0, 3.0), vec![t, t])
        .unwrap();
    let mut mv = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            mv[i * t + j] = f64::NEG_INFINITY;
        }
    }
    let mask = tape.constant(mv, vec![t, t]).unwrap();
    let masked = tape.add(scores, mask).unwrap();
    let attn = tape.softmax(masked, 1).unwrap();
    let v = tape.value(attn);
    for i in 0..t {
        let row = &v[i * t..(i + 1) * t];
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (j, &p) in row.iter().enumerate() {
            if j > i {
                assert_eq!(p, 0.0);
            }
        }
    }
}

#[test]
fn pair_cross_gradient_check() {
    let d = 4;
    let (k, s) = (2, 3);
    let shapes = vec![vec![k, d], vec![s, d], vec![s, d], vec![d, d], vec![d, d], vec![d, d], vec![d, d]];
    let mut r = rng::seeded(131);
    let inputs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|sh| rng::uniform_vec(&mut r, sh.iter().product(), -0.8, 0.8))
        .collect();
    let err = check_grads(
        |tape, ids| {
            let w = AttentionWeights {
                w_q: ids[3],
                w_k: ids[4],
                w_v: ids[5],
                w_o: ids[6],
                heads: 2,
            };
            let y = pair_cross_attention(tape, ids[0], ids[1], ids[2], &w).unwrap();
            let n = tape.value(y).len();
            let rw = {
                let mut rr = rng::seeded(132);
                tape.constant(rng::uniform_vec(&mut rr, n, -1.0, 1.0), vec![k, d])
                    .unwrap()
            };
            let p = tape.mul(y, rw).unwrap();
            tape.sum(p)
        },
        &inputs,
        &shapes,
    );
    assert!(err < 1e-4, "pair cross fd err {err}");
}

#[test]
fn indivisible_heads_is_a_config_error() {
    let mut tape = Tape::new();
    let w = AttentionWeights {
        w_q: tape.zeros(vec![6, 6]),
        w_k: tape.zeros(vec![6, 6]),
        w_v: tape.zeros(vec![6, 6]),
        w_o: tape.zeros(vec![6, 6]),
        heads: 4,
    };
    let x = tape.zeros(vec![2, 6]);
    assert!(mhsa(&mut tape, x, &w, false).is_err());
}
