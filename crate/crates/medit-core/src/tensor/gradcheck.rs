//! Finite-difference validation of the tape's backward rules.
//!
//! `grad_check` builds the same scalar loss twice: once through the tape to
//! get analytic gradients, and once per perturbed element to get central
//! differences. The two paths share no code beyond the forward ops
//! themselves, so a broken backward rule cannot hide.

use super::tape::{Graph, NodeId};
use super::Tensor;
use crate::error::{Error, Result};

/// Step size used by the checks unless a caller overrides it.
pub const DEFAULT_STEP: f32 = 1e-3;
/// A backward rule passes when the worst relative error stays below this.
pub const PASS_TOLERANCE: f32 = 1e-3;

/// Builds a scalar loss node from mounted copies of the inputs.
pub type LossBuilder<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'a;

fn eval_loss(build: &LossBuilder, inputs: &[Tensor]) -> Result<f32> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = false;
            g.leaf(t)
        })
        .collect();
    let loss = build(&mut g, &ids)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::contract(format!("loss must be scalar, got {:?}", v.shape)));
    }
    Ok(v.item())
}

/// Central differences (f(x+h) - f(x-h)) / 2h for every element of every
/// input, evaluated through fresh forward passes.
pub fn finite_difference_grads(
    build: &LossBuilder,
    inputs: &[Tensor],
    h: f32,
) -> Result<Vec<Vec<f32>>> {
    if h <= 0.0 {
        return Err(Error::parameter("finite_difference_grads: step must be positive"));
    }
    let mut grads = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut gi = vec![0.0f32; inputs[i].numel()];
        for j in 0..inputs[i].numel() {
            let orig = work[i].data[j];
            work[i].data[j] = orig + h;
            let up = eval_loss(build, &work)? as f64;
            work[i].data[j] = orig - h;
            let down = eval_loss(build, &work)? as f64;
            work[i].data[j] = orig;
            gi[j] = ((up - down) / (2.0 * h as f64)) as f32;
        }
        grads.push(gi);
    }
    Ok(grads)
}

/// max over elements of |a - n| / max(|a|, |n|, 1e-8).
pub fn max_rel_err(analytic: &[f32], numeric: &[f32]) -> f32 {
    debug_assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f32;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs()).max(1e-8);
        let err = (a - n).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Compare tape gradients against central differences; returns the worst
/// relative error across all inputs and elements.
pub fn grad_check(build: &LossBuilder, inputs: &[Tensor], h: f32) -> Result<f32> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            g.leaf(t)
        })
        .collect();
    let loss = build(&mut g, &ids)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check: loss must be scalar, got {:?}",
            g.value(loss).shape
        )));
    }
    g.backward(loss)?;
    let numeric = finite_difference_grads(build, inputs, h)?;
    let mut worst = 0.0f32;
    for (i, num) in numeric.iter().enumerate() {
        let zeros;
        let analytic: &[f32] = match g.grad(ids[i]) {
            Some(a) => a,
            None => {
                zeros = vec![0.0f32; num.len()];
                &zeros
            }
        };
        worst = worst.max(max_rel_err(analytic, num));
    }
    Ok(worst)
}

/// Test-loss construction kit. Central differences in f32 carry ~ulp(loss)/2h
/// of absolute noise, so a check is only meaningful when every gradient entry
/// stays well above that floor. `anchor` adds 〈w, x - x0〉 per input with
/// w = ±1.5 and x0 the unperturbed input: gradients are pushed away from
/// zero while the added term itself stays at magnitude ~h, keeping the loss
/// (and its rounding noise) small.
pub mod probes {
    use super::*;
    use crate::tensor::rng::Rng;

    /// Entries with magnitude in [0.5, 1.5] and random sign: bounded away
    /// from zero so products and squares keep usable gradients.
    pub fn signed_unit(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::seeded(seed);
        let mut t = Tensor::zeros(shape);
        for v in t.data.iter_mut() {
            let mag = rng.uniform_in(0.5, 1.5);
            *v = if rng.uniform() < 0.5 { -mag } else { mag };
        }
        t
    }

    /// 0.3 * op_loss + sum_i 〈w_i, x_i - x0_i〉.
    pub fn anchor(
        g: &mut Graph,
        op_loss: NodeId,
        ids: &[NodeId],
        originals: &[Tensor],
        seed: u64,
    ) -> Result<NodeId> {
        let mut total = g.scale(op_loss, 0.3);
        for (i, (&id, orig)) in ids.iter().zip(originals).enumerate() {
            let n = orig.numel();
            let mut w = Tensor::zeros(&[n]);
            let mut rng = Rng::seeded(seed ^ (0x5eed + i as u64));
            for v in w.data.iter_mut() {
                *v = if rng.uniform() < 0.5 { -1.5 } else { 1.5 };
            }
            let x0 = g.constant(orig.clone().reshaped(&[n])?);
            let wc = g.constant(w);
            let flat = g.reshape(id, &[n])?;
            let centered = g.sub(flat, x0)?;
            let dotted = g.mul(centered, wc)?;
            let s = g.sum_all(dotted);
            total = g.add(total, s)?;
        }
        Ok(total)
    }
}

/// Named finite-difference checks covering every differentiable op family.
/// Returns (op name, worst relative error) per entry; callers decide how to
/// report or gate on the numbers.
pub fn op_suite() -> Result<Vec<(String, f32)>> {
    use probes::{anchor, signed_unit};

    type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;
    let mut cases: Vec<(&str, Vec<Tensor>, Builder)> = Vec::new();
    let case = |name: &'static str,
                    inputs: Vec<Tensor>,
                    b: Builder,
                    cases: &mut Vec<(&str, Vec<Tensor>, Builder)>| {
        cases.push((name, inputs, b));
    };

    case(
        "add_broadcast",
        vec![signed_unit(&[3, 4], 101), signed_unit(&[4], 102)],
        Box::new(|g, ids| {
            let y = g.add(ids[0], ids[1])?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        }),
        &mut cases,
    );
    case(
        "sub",
        vec![signed_unit(&[3, 4], 103), signed_unit(&[3, 4], 104)],
        Box::new(|g, ids| {
            let y = g.sub(ids[0], ids[1])?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        }),
        &mut cases,
    );
    case(
        "mul_broadcast",
        vec![signed_unit(&[3, 4], 105), signed_unit(&[4], 106)],
        Box::new(|g, ids| {
            let y = g.mul(ids[0], ids[1])?;
            g.mean_all(y)
        }),
        &mut cases,
    );
    case(
        "mul_scalar",
        vec![signed_unit(&[3, 4], 141), signed_unit(&[1], 142)],
        Box::new(|g, ids| {
            let y = g.mul(ids[0], ids[1])?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        }),
        &mut cases,
    );
    case(
        "affine",
        vec![signed_unit(&[5], 107)],
        Box::new(|g, ids| {
            let y = g.affine(ids[0], 0.7, -0.2);
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        }),
        &mut cases,
    );
    case(
        "matmul",
        vec![signed_unit(&[3, 4], 108), signed_unit(&[4, 2], 109)],
        Box::new(|g, ids| {
            let c = g.matmul(ids[0], ids[1])?;
            g.mean_all(c)
        }),
        &mut cases,
    );
    case(
        "bmm",
        vec![signed_unit(&[2, 3, 4], 110), signed_unit(&[2, 4, 5], 111)],
        Box::new(|g, ids| {
            let c = g.bmm(ids[0], ids[1], false)?;
            g.mean_all(c)
        }),
        &mut cases,
    );
    case(
        "bmm_transposed",
        vec![signed_unit(&[2, 3, 4], 112), signed_unit(&[2, 5, 4], 113)],
        Box::new(|g, ids| {
            let c = g.bmm(ids[0], ids[1], true)?;
            g.mean_all(c)
        }),
        &mut cases,
    );
    case(
        "conv2d",
        vec![signed_unit(&[2, 4, 4], 114), signed_unit(&[3, 2, 3, 3], 115), signed_unit(&[3], 116)],
        Box::new(|g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1)?;
            g.mean_all(y)
        }),
        &mut cases,
    );
    case(
        "conv2d_strided",
        vec![signed_unit(&[1, 6, 6], 117), signed_unit(&[2, 1, 3, 3], 118)],
        Box::new(|g, ids| {
            let y = g.conv2d(ids[0], ids[1], None, 2, 1)?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        }),
        &mut cases,
    );
    case(
        "upsample2x",
        vec![signed_unit(&[2, 3, 3], 119)],
        Box::new(|g, ids| {
            let u = g.upsample2x(ids[0])?;
            let sq = g.mul(u, u)?;
            g.mean_all(sq)
        }),
        &mut cases,
    );
    case(
        "concat_slice_permute",
        vec![signed_unit(&[4, 3], 120), signed_unit(&[2, 3], 121)],
        Box::new(|g, ids| {
            let cat = g.concat(&[ids[0], ids[1]], 0)?;
            let t = g.permute(cat, &[1, 0])?;
            let back = g.permute(t, &[1, 0])?;
            let sl = g.slice_rows(back, 1, 4)?;
            let sq = g.mul(sl, sl)?;
            g.mean_all(sq)
        }),
        &mut cases,
    );
    case(
        "reshape_mean_axis",
        vec![signed_unit(&[2, 6], 122)],
        Box::new(|g, ids| {
            let r = g.reshape(ids[0], &[4, 3])?;
            let m = g.mean_axis(r, 0)?;
            let sq = g.mul(m, m)?;
            Ok(g.sum_all(sq))
        }),
        &mut cases,
    );
    case(
        "embedding",
        vec![signed_unit(&[5, 4], 123)],
        Box::new(|g, ids| {
            let e = g.embedding(ids[0], &[0, 2, 2, 4])?;
            let sq = g.mul(e, e)?;
            g.mean_all(sq)
        }),
        &mut cases,
    );
    case(
        "softmax",
        vec![signed_unit(&[2, 5], 124), signed_unit(&[2, 5], 125)],
        Box::new(|g, ids| {
            let sm = g.softmax(ids[0], 1)?;
            let prod = g.mul(sm, ids[1])?;
            Ok(g.sum_all(prod))
        }),
        &mut cases,
    );
    case(
        "layer_norm",
        vec![
            signed_unit(&[3, 6], 126),
            signed_unit(&[6], 127),
            signed_unit(&[6], 128),
            signed_unit(&[3, 6], 129),
        ],
        Box::new(|g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            let p = g.mul(y, ids[3])?;
            Ok(g.sum_all(p))
        }),
        &mut cases,
    );
    case(
        "gelu",
        vec![signed_unit(&[8], 130)],
        Box::new(|g, ids| {
            let y = g.gelu(ids[0]);
            g.mean_all(y)
        }),
        &mut cases,
    );
    case(
        "cross_entropy",
        vec![signed_unit(&[3, 5], 131)],
        Box::new(|g, ids| g.cross_entropy(ids[0], &[1, 0, 4], &[1.0, 0.5, 1.0])),
        &mut cases,
    );
    case(
        "mse",
        vec![signed_unit(&[3, 5], 132), signed_unit(&[3, 5], 133)],
        Box::new(|g, ids| g.mse(ids[0], ids[1])),
        &mut cases,
    );
    case(
        "cosine_rows",
        vec![signed_unit(&[3, 5], 134), signed_unit(&[3, 5], 135)],
        Box::new(|g, ids| {
            let cos = g.cosine_rows(ids[0], ids[1])?;
            let one_minus = g.affine(cos, -1.0, 1.0);
            g.mean_all(one_minus)
        }),
        &mut cases,
    );
    case(
        "normalize_rows",
        vec![signed_unit(&[3, 5], 136), signed_unit(&[3, 5], 137)],
        Box::new(|g, ids| {
            let n = g.normalize_rows(ids[0], 1e-6)?;
            let p = g.mul(n, ids[1])?;
            Ok(g.sum_all(p))
        }),
        &mut cases,
    );
    case(
        "attention_pattern",
        vec![signed_unit(&[2, 4, 3], 138), signed_unit(&[2, 4, 3], 139), signed_unit(&[2, 4, 3], 140)],
        Box::new(|g, ids| {
            let scores = g.bmm(ids[0], ids[1], true)?;
            let scaled = g.scale(scores, 1.0 / (3.0f32).sqrt());
            let probs = g.softmax(scaled, 2)?;
            let out = g.bmm(probs, ids[2], false)?;
            let sq = g.mul(out, out)?;
            g.mean_all(sq)
        }),
        &mut cases,
    );

    let mut out = Vec::with_capacity(cases.len());
    for (name, inputs, op) in cases {
        let originals = inputs.clone();
        let err = grad_check(
            &|g, ids| {
                let op_loss = op(g, ids)?;
                anchor(g, op_loss, ids, &originals, 0xfeed ^ name.len() as u64)
            },
            &inputs,
            DEFAULT_STEP,
        )?;
        out.push((name.to_string(), err));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::probes::{anchor, signed_unit};
    use super::*;

    fn check(inputs: Vec<Tensor>, op: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>) {
        let originals = inputs.clone();
        let err = grad_check(
            &|g, ids| {
                let op_loss = op(g, ids)?;
                anchor(g, op_loss, ids, &originals, 0xabc)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < PASS_TOLERANCE, "err {err}");
    }

    #[test]
    fn quadratic_grad_is_exact() {
        // f(x) = sum(x*x)/2 has grad exactly x; entries are bounded away
        // from zero by construction, so no anchor is needed.
        let x = signed_unit(&[6], 31);
        let err = grad_check(
            &|g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                let s = g.sum_all(sq);
                Ok(g.scale(s, 0.5))
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < PASS_TOLERANCE, "err {err}");
    }

    #[test]
    fn matmul_gelu_chain_passes() {
        check(vec![signed_unit(&[3, 4], 32), signed_unit(&[4, 2], 33)], |g, ids| {
            let c = g.matmul(ids[0], ids[1])?;
            let e = g.gelu(c);
            g.mean_all(e)
        });
    }

    #[test]
    fn cross_entropy_passes() {
        check(vec![signed_unit(&[3, 5], 34)], |g, ids| {
            g.cross_entropy(ids[0], &[1, 0, 4], &[1.0, 0.5, 1.0])
        });
    }

    #[test]
    fn cross_entropy_masked_row_passes() {
        check(vec![signed_unit(&[2, 4], 56)], |g, ids| {
            g.cross_entropy(ids[0], &[3, 1], &[1.0, 0.0])
        });
    }

    #[test]
    fn softmax_weighted_sum_passes() {
        check(vec![signed_unit(&[2, 5], 35), signed_unit(&[2, 5], 36)], |g, ids| {
            let sm = g.softmax(ids[0], 1)?;
            let prod = g.mul(sm, ids[1])?;
            Ok(g.sum_all(prod))
        });
    }

    #[test]
    fn layer_norm_passes() {
        check(
            vec![
                signed_unit(&[3, 6], 37),
                signed_unit(&[6], 38),
                signed_unit(&[6], 39),
                signed_unit(&[3, 6], 40),
            ],
            |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let p = g.mul(y, ids[3])?;
                Ok(g.sum_all(p))
            },
        );
    }

    #[test]
    fn conv_upsample_passes() {
        check(
            vec![
                signed_unit(&[2, 4, 4], 41),
                signed_unit(&[3, 2, 3, 3], 42),
                signed_unit(&[3], 43),
            ],
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1)?;
                let u = g.upsample2x(y)?;
                let a = g.gelu(u);
                g.mean_all(a)
            },
        );
    }

    #[test]
    fn strided_conv_passes() {
        check(vec![signed_unit(&[1, 6, 6], 44), signed_unit(&[2, 1, 3, 3], 45)], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], None, 2, 1)?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        });
    }

    #[test]
    fn attention_shaped_bmm_passes() {
        // Two heads over four positions, the same shape pattern real
        // attention uses: softmax(q k^T / sqrt(d)) v.
        check(
            vec![
                signed_unit(&[2, 4, 3], 46),
                signed_unit(&[2, 4, 3], 47),
                signed_unit(&[2, 4, 3], 48),
            ],
            |g, ids| {
                let scores = g.bmm(ids[0], ids[1], true)?;
                let scaled = g.scale(scores, 1.0 / (3.0f32).sqrt());
                let probs = g.softmax(scaled, 2)?;
                let out = g.bmm(probs, ids[2], false)?;
                let sq = g.mul(out, out)?;
                g.mean_all(sq)
            },
        );
    }

    #[test]
    fn bmm_plain_passes() {
        check(vec![signed_unit(&[2, 3, 4], 57), signed_unit(&[2, 4, 5], 58)], |g, ids| {
            let c = g.bmm(ids[0], ids[1], false)?;
            g.mean_all(c)
        });
    }

    #[test]
    fn cosine_loss_passes() {
        check(vec![signed_unit(&[3, 5], 49), signed_unit(&[3, 5], 50)], |g, ids| {
            let cos = g.cosine_rows(ids[0], ids[1])?;
            let one_minus = g.affine(cos, -1.0, 1.0);
            g.mean_all(one_minus)
        });
    }

    #[test]
    fn mse_passes() {
        check(vec![signed_unit(&[3, 5], 59), signed_unit(&[3, 5], 60)], |g, ids| {
            g.mse(ids[0], ids[1])
        });
    }

    #[test]
    fn slice_concat_permute_pass() {
        check(vec![signed_unit(&[4, 3], 51), signed_unit(&[2, 3], 52)], |g, ids| {
            let cat = g.concat(&[ids[0], ids[1]], 0)?;
            let t = g.permute(cat, &[1, 0])?;
            let back = g.permute(t, &[1, 0])?;
            let sl = g.slice_rows(back, 1, 4)?;
            let sq = g.mul(sl, sl)?;
            g.mean_all(sq)
        });
    }

    #[test]
    fn embedding_mean_axis_pass() {
        check(vec![signed_unit(&[5, 4], 53)], |g, ids| {
            let e = g.embedding(ids[0], &[0, 2, 2, 4])?;
            let m = g.mean_axis(e, 0)?;
            let sq = g.mul(m, m)?;
            Ok(g.sum_all(sq))
        });
    }

    #[test]
    fn add_sub_broadcast_pass() {
        check(vec![signed_unit(&[3, 4], 61), signed_unit(&[4], 62)], |g, ids| {
            let y = g.add(ids[0], ids[1])?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        });
    }

    #[test]
    fn scalar_multiplier_broadcast_passes() {
        // A single-element right operand scales the whole left tensor; its
        // gradient is the full sum of g * a, the reduction path worth checking.
        check(vec![signed_unit(&[3, 4], 65), signed_unit(&[1], 66)], |g, ids| {
            let y = g.mul(ids[0], ids[1])?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        });
    }

    #[test]
    fn normalize_rows_passes_including_floored_row() {
        // Third input row is near zero so the eps floor branch is exercised;
        // its gradient is g/eps which finite differences reproduce exactly
        // because the denominator never switches within +-h.
        let mut x = signed_unit(&[3, 5], 63);
        for j in 0..5 {
            x.data[2 * 5 + j] = 0.0;
        }
        let w = signed_unit(&[3, 5], 64);
        check(vec![x, w], |g, ids| {
            let n = g.normalize_rows(ids[0], 0.01)?;
            let p = g.mul(n, ids[1])?;
            Ok(g.sum_all(p))
        });
    }

    #[test]
    fn op_suite_reports_all_ops_below_tolerance() {
        let rows = op_suite().unwrap();
        assert!(rows.len() >= 20);
        for (name, err) in &rows {
            assert!(*err < PASS_TOLERANCE, "{name}: {err}");
        }
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        // Negative control: scaling one analytic entry by 1.5 must push the
        // reported error well past the pass threshold.
        let x = signed_unit(&[6], 54);
        let build: &LossBuilder = &|g, ids| {
            let sq = g.mul(ids[0], ids[0])?;
            Ok(g.sum_all(sq))
        };
        let numeric = finite_difference_grads(build, std::slice::from_ref(&x), DEFAULT_STEP)
            .unwrap()
            .remove(0);
        let mut analytic: Vec<f32> = x.data.iter().map(|&v| 2.0 * v).collect();
        assert!(max_rel_err(&analytic, &numeric) < PASS_TOLERANCE);
        analytic[2] *= 1.5;
        assert!(max_rel_err(&analytic, &numeric) > 0.1);
    }

    #[test]
    fn rejects_bad_step() {
        let x = signed_unit(&[2], 55);
        let build: &LossBuilder = &|g, ids| Ok(g.sum_all(ids[0]));
        assert!(finite_difference_grads(build, &[x], 0.0).is_err());
    }
}
