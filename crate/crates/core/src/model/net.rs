use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4};
use rand::{Rng, RngCore};

use super::layers::*;
use super::*;
use crate::features::FeatureMatrix;

/// Forward-pass mode. Training uses batch statistics and dropout.
pub enum Pass<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

#[derive(Debug, Clone)]
struct BlockTape {
    input: Array4<f64>,
    bn: Option<BnCache>,
    /// Post-activation feature map.
    act: Array4<f64>,
    pool_idx: Option<Array4<usize>>,
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub version: u64,
    pub training: bool,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    blocks: Vec<BlockTape>,
    last_dim: (usize, usize, usize, usize),
    gap: Array2<f64>,
    hidden_pre: Option<Array2<f64>>,
    dropout_scale: Option<Array2<f64>>,
    head_in: Array2<f64>,
}

impl Tape {
    pub fn feature_map(&self, name: &str) -> Option<&Array4<f64>> {
        (0..self.blocks.len())
            .find(|&i| block_name(i) == name)
            .map(|i| &self.blocks[i].act)
    }

    pub fn feature_maps(&self) -> BTreeMap<String, &Array4<f64>> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (block_name(i), &b.act))
            .collect()
    }

    pub(crate) fn batch_stats(&self) -> Vec<(usize, (Array1<f64>, Array1<f64>))> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.bn.as_ref()?.batch_stats.clone().map(|s| (i, s)))
            .collect()
    }
}

/// Stacks equally-shaped inputs into a `(batch, 1, rows, cols)` tensor.
pub fn stack_inputs<'a>(xs: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<Array4<f64>> {
    let xs: Vec<&FeatureMatrix> = xs.into_iter().collect();
    let Some(first) = xs.first() else {
        return Err(Error::EmptyDataset("no inputs to stack".into()));
    };
    let (r, c) = first.shape();
    let mut out = Array4::zeros((xs.len(), 1, r, c));
    for (i, x) in xs.iter().enumerate() {
        if x.shape() != (r, c) {
            return Err(Error::shape(format!("({r}, {c})"), format!("{:?}", x.shape())));
        }
        out.slice_mut(ndarray::s![i, 0, .., ..]).assign(&x.values);
    }
    Ok(out)
}

pub fn forward(state: &ModelState, x: &FeatureMatrix, pass: Pass<'_>) -> Result<Tape> {
    forward_batch(state, &stack_inputs([x])?, pass)
}

pub fn forward_batch(state: &ModelState, x: &Array4<f64>, pass: Pass<'_>) -> Result<Tape> {
    let cfg = &state.config;
    let (n, ch, r, c) = x.dim();
    if ch != 1 || (r, c) != cfg.input_shape || n == 0 {
        return Err(Error::shape(
            format!("(batch, 1, {}, {})", cfg.input_shape.0, cfg.input_shape.1),
            format!("{:?}", x.dim()),
        ));
    }
    let (training, mut rng) = match pass {
        Pass::Eval => (false, None),
        Pass::Train(rng) => (true, Some(rng)),
    };
    let p = &state.params;
    let mut cur = x.clone();
    let mut blocks = Vec::with_capacity(cfg.blocks.len());
    for (i, b) in cfg.blocks.iter().enumerate() {
        let input = cur;
        let z = if b.batch_norm {
            conv2d_forward(&input, &p.as4(&conv_w(i)), None, b.stride)
        } else {
            conv2d_forward(&input, &p.as4(&conv_w(i)), Some(&p.as1(&conv_b(i))), b.stride)
        };
        let (z, bn) = if b.batch_norm {
            let (g, be) = (p.as1(&bn_gamma(i)), p.as1(&bn_beta(i)));
            let running = (state.buffers.as1(&bn_mean(i)), state.buffers.as1(&bn_var(i)));
            let (y, cache) = batchnorm_forward(&z, &g, &be, (!training).then_some((&running.0, &running.1)));
            (y, Some(cache))
        } else {
            (z, None)
        };
        let act = relu_forward(&z);
        let (out, pool_idx) = if b.pool != (1, 1) {
            let (y, idx) = maxpool_forward(&act, b.pool.0, b.pool.1);
            (y, Some(idx))
        } else {
            (act.clone(), None)
        };
        blocks.push(BlockTape {
            input,
            bn,
            act,
            pool_idx,
        });
        cur = out;
    }
    let last_dim = cur.dim();
    let gap = gap_forward(&cur);
    let (mut head_in, hidden_pre) = if cfg.dense_units > 0 {
        let pre = dense_forward(&gap, &p.as2(HIDDEN_W), &p.as1(HIDDEN_B));
        (pre.mapv(|v| v.max(0.0)), Some(pre))
    } else {
        (gap.clone(), None)
    };
    let dropout_scale = match rng.as_mut() {
        Some(rng) if cfg.dropout_rate > 0.0 => {
            let keep = 1.0 - cfg.dropout_rate;
            let mask = head_in.mapv(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
            head_in = &head_in * &mask;
            Some(mask)
        }
        _ => None,
    };
    let logits2 = dense_forward(&head_in, &p.as2(OUT_W), &p.as1(OUT_B));
    let logits: Vec<f64> = logits2.column(0).to_vec();
    let probabilities = logits.iter().map(|&z| sigmoid(z)).collect();
    Ok(Tape {
        version: state.version,
        training,
        logits,
        probabilities,
        blocks,
        last_dim,
        gap,
        hidden_pre,
        dropout_scale,
        head_in,
    })
}

/// Gradients of `Σ dlogits[i] · logit[i]`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ParamSet,
    /// Keyed by [`block_name`].
    pub feature_maps: BTreeMap<String, Array4<f64>>,
}

pub fn backward(state: &ModelState, tape: &Tape, dlogits: &[f64]) -> Result<Gradients> {
    if tape.version != state.version {
        return Err(Error::StaleTape {
            tape: tape.version,
            model: state.version,
        });
    }
    if dlogits.len() != tape.logits.len() {
        return Err(Error::shape(tape.logits.len(), dlogits.len()));
    }
    let cfg = &state.config;
    let p = &state.params;
    let mut grads = p.zeros_like();
    let mut put = |name: &str, g: ndarray::ArrayD<f64>| {
        let i = grads.index(name).expect("known parameter");
        grads.tensors[i] = g;
    };
    let dz = Array2::from_shape_vec((dlogits.len(), 1), dlogits.to_vec()).expect("column");
    let (mut dh, dw, db) = dense_backward(&tape.head_in, &p.as2(OUT_W), &dz);
    put(OUT_W, dw.into_dyn());
    put(OUT_B, db.into_dyn());
    if let Some(mask) = &tape.dropout_scale {
        dh = dh * mask;
    }
    let dgap = match &tape.hidden_pre {
        Some(pre) => {
            let mut d = dh;
            ndarray::Zip::from(&mut d).and(pre).for_each(|g, &v| {
                if v <= 0.0 {
                    *g = 0.0;
                }
            });
            let (dx, dw, db) = dense_backward(&tape.gap, &p.as2(HIDDEN_W), &d);
            put(HIDDEN_W, dw.into_dyn());
            put(HIDDEN_B, db.into_dyn());
            dx
        }
        None => dh,
    };
    let mut dcur = gap_backward(tape.last_dim, &dgap);
    let mut feature_maps = BTreeMap::new();
    for (i, b) in cfg.blocks.iter().enumerate().rev() {
        let bt = &tape.blocks[i];
        let dact = match &bt.pool_idx {
            Some(idx) => maxpool_backward(idx, bt.act.dim(), &dcur),
            None => dcur,
        };
        let mut dz = relu_backward(&bt.act, &dact);
        feature_maps.insert(block_name(i), dact);
        if let Some(cache) = &bt.bn {
            let (dx, dg, dbeta) = batchnorm_backward(cache, &p.as1(&bn_gamma(i)), &dz);
            put(&bn_gamma(i), dg.into_dyn());
            put(&bn_beta(i), dbeta.into_dyn());
            dz = dx;
        }
        let g = conv2d_backward(&bt.input, &p.as4(&conv_w(i)), b.stride, &dz, i > 0);
        put(&conv_w(i), g.dw.into_dyn());
        if !b.batch_norm {
            put(&conv_b(i), g.db.into_dyn());
        }
        dcur = g.dx.unwrap_or_else(|| Array4::zeros(bt.input.dim()));
    }
    Ok(Gradients {
        params: grads,
        feature_maps,
    })
}

/// `(p_patient, p_control)` in eval mode.
pub fn predict_window(state: &ModelState, x: &FeatureMatrix) -> Result<(f64, f64)> {
    let tape = forward(state, x, Pass::Eval)?;
    let p = tape.probabilities[0];
    Ok((p, 1.0 - p))
}

/// Eval-mode probabilities for many inputs, `batch` at a time.
pub fn predict_many(state: &ModelState, xs: &[&FeatureMatrix], batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(batch.max(1)) {
        let tape = forward_batch(state, &stack_inputs(chunk.iter().copied())?, Pass::Eval)?;
        out.extend(tape.probabilities);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Layout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(bn: bool, dense: usize) -> ModelConfig {
        ModelConfig {
            blocks: vec![
                ConvBlock {
                    out_channels: 3,
                    kernel: (3, 3),
                    stride: 1,
                    pool: (2, 2),
                    batch_norm: bn,
                },
                ConvBlock {
                    out_channels: 2,
                    kernel: (3, 2),
                    stride: 2,
                    pool: (1, 1),
                    batch_norm: bn,
                },
            ],
            dense_units: dense,
            dropout_rate: 0.0,
            input_shape: (6, 9),
        }
    }

    fn input(rng: &mut ChaCha8Rng, n: usize, shape: (usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn((n, 1, shape.0, shape.1), |_| rng.random_range(-1.0..1.0))
    }

    fn perturb_biases(state: &mut ModelState, rng: &mut ChaCha8Rng) {
        for (name, t) in state.params.names.iter().zip(state.params.tensors.iter_mut()) {
            if name.ends_with("bias") || name.ends_with("beta") {
                t.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            }
        }
    }

    fn objective(state: &ModelState, x: &Array4<f64>, r: &[f64], train: bool) -> f64 {
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let pass = if train { Pass::Train(&mut dummy) } else { Pass::Eval };
        let tape = forward_batch(state, x, pass).unwrap();
        tape.logits.iter().zip(r).map(|(z, w)| z * w).sum()
    }

    fn check_all(mut state: ModelState, x: &Array4<f64>, train: bool, rng: &mut ChaCha8Rng) {
        let r: Vec<f64> = (0..x.dim().0).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let pass = if train { Pass::Train(&mut dummy) } else { Pass::Eval };
        let tape = forward_batch(&state, x, pass).unwrap();
        let g = backward(&state, &tape, &r).unwrap();
        let h = 1e-6;
        for k in 0..state.params.len() {
            for j in 0..state.params.tensors[k].len() {
                let orig = state.params.tensors[k].as_slice().unwrap()[j];
                state.params.tensors[k].as_slice_mut().unwrap()[j] = orig + h;
                let up = objective(&state, x, &r, train);
                state.params.tensors[k].as_slice_mut().unwrap()[j] = orig - h;
                let down = objective(&state, x, &r, train);
                state.params.tensors[k].as_slice_mut().unwrap()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = g.params.tensors[k].as_slice().unwrap()[j];
                assert!(
                    (analytic - numeric).abs() <= 1e-3 * analytic.abs().max(numeric.abs()) + 1e-9,
                    "{}[{j}]: analytic {analytic} numeric {numeric}",
                    state.params.names[k]
                );
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (bn, dense, train) in [(true, 4, true), (true, 4, false), (false, 0, false), (false, 3, true)] {
            let mut state = ModelState::init(tiny(bn, dense), 5).unwrap();
            perturb_biases(&mut state, &mut rng);
            if bn {
                for t in state.buffers.tensors.iter_mut() {
                    t.mapv_inplace(|_| rng.random_range(0.2..0.9));
                }
            }
            let x = input(&mut rng, 3, (6, 9));
            check_all(state, &x, train, &mut rng);
        }
    }

    #[test]
    fn logit_gradient_of_logit_is_one() {
        let state = ModelState::init(tiny(false, 0), 1).unwrap();
        let x = input(&mut ChaCha8Rng::seed_from_u64(0), 1, (6, 9));
        let tape = forward_batch(&state, &x, Pass::Eval).unwrap();
        let g = backward(&state, &tape, &[1.0]).unwrap();
        let w = state.params.get(OUT_W).unwrap();
        let gb = g.params.get(OUT_B).unwrap();
        assert_eq!(gb[[0]], 1.0);
        assert_eq!(g.params.get(OUT_W).unwrap().dim(), w.dim());
    }

    #[test]
    fn feature_map_gradients_match_finite_differences() {
        // Perturb the block-0 activation through the remaining layers.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut state = ModelState::init(tiny(false, 3), 2).unwrap();
        perturb_biases(&mut state, &mut rng);
        let x = input(&mut rng, 1, (6, 9));
        let tape = forward_batch(&state, &x, Pass::Eval).unwrap();
        let g = backward(&state, &tape, &[1.0]).unwrap();
        let a0 = tape.feature_map("block0").unwrap().clone();
        let ga = &g.feature_maps["block0"];
        let tail = |a: &Array4<f64>| -> f64 {
            let (pooled, _) = maxpool_forward(a, 2, 2);
            let p = &state.params;
            let z = conv2d_forward(&pooled, &p.as4(&conv_w(1)), Some(&p.as1(&conv_b(1))), 2);
            let act = relu_forward(&z);
            let h = dense_forward(&gap_forward(&act), &p.as2(HIDDEN_W), &p.as1(HIDDEN_B)).mapv(|v| v.max(0.0));
            dense_forward(&h, &p.as2(OUT_W), &p.as1(OUT_B))[[0, 0]]
        };
        assert!((tail(&a0) - tape.logits[0]).abs() < 1e-12);
        let mut a = a0.clone();
        for j in 0..a.len() {
            let orig = a.as_slice().unwrap()[j];
            // Zeros sit on pooling ties, where the map is not differentiable.
            if orig == 0.0 {
                continue;
            }
            a.as_slice_mut().unwrap()[j] = orig + 1e-6;
            let up = tail(&a);
            a.as_slice_mut().unwrap()[j] = orig - 1e-6;
            let down = tail(&a);
            a.as_slice_mut().unwrap()[j] = orig;
            let numeric = (up - down) / 2e-6;
            let analytic = ga.as_slice().unwrap()[j];
            assert!((analytic - numeric).abs() <= 1e-3 * analytic.abs().max(numeric.abs()) + 1e-9);
        }
    }

    #[test]
    fn dead_unit_gets_zero_gradient() {
        let mut state = ModelState::init(tiny(false, 0), 3).unwrap();
        // Channel 1 of block 0 never fires.
        state.params.get_mut(&conv_b(0)).unwrap()[[1]] = -1e3;
        let x = input(&mut ChaCha8Rng::seed_from_u64(4), 2, (6, 9));
        let tape = forward_batch(&state, &x, Pass::Eval).unwrap();
        let g = backward(&state, &tape, &[1.0, -0.5]).unwrap();
        let gw = g.params.get(&conv_w(0)).unwrap();
        assert!(gw.index_axis(ndarray::Axis(0), 1).iter().all(|&v| v == 0.0));
        assert_eq!(g.params.get(&conv_b(0)).unwrap()[[1]], 0.0);
        assert!(gw.index_axis(ndarray::Axis(0), 0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_parameters_give_one_half() {
        let state = ModelState::zeroed(ModelConfig::default_for((80, 401))).unwrap();
        let x = FeatureMatrix::raw(Array2::from_elem((80, 401), 0.3), Layout::SpecOnly);
        assert_eq!(predict_window(&state, &x).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn eval_forward_is_deterministic_and_in_range() {
        let state = ModelState::init(tiny(true, 4), 9).unwrap();
        let x = input(&mut ChaCha8Rng::seed_from_u64(1), 4, (6, 9));
        let a = forward_batch(&state, &x, Pass::Eval).unwrap();
        let b = forward_batch(&state, &x, Pass::Eval).unwrap();
        assert_eq!(a.logits, b.logits);
        assert!(a.probabilities.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn predict_matches_forward_and_sums_to_one() {
        let state = ModelState::init(tiny(true, 4), 9).unwrap();
        let x = FeatureMatrix::raw(Array2::from_shape_fn((6, 9), |(r, c)| (r * c) as f64 * 0.1), Layout::SpecOnly);
        let (pp, pc) = predict_window(&state, &x).unwrap();
        let t = forward(&state, &x, Pass::Eval).unwrap();
        assert_eq!(pp, t.probabilities[0]);
        assert!((pp + pc - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stale_tape_and_bad_shape_rejected() {
        let mut state = ModelState::init(tiny(false, 0), 1).unwrap();
        let x = input(&mut ChaCha8Rng::seed_from_u64(0), 1, (6, 9));
        let tape = forward_batch(&state, &x, Pass::Eval).unwrap();
        state.bump();
        assert!(matches!(backward(&state, &tape, &[1.0]), Err(Error::StaleTape { .. })));
        let wrong = input(&mut ChaCha8Rng::seed_from_u64(0), 1, (5, 9));
        assert!(matches!(forward_batch(&state, &wrong, Pass::Eval), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn collapsing_input_rejected() {
        let cfg = ModelConfig::default_for((8, 401));
        assert!(ModelState::init(cfg, 0).is_err());
    }
}
