//! Convolutional-LSTM feedback blocks over the first three backbone taps.
//!
//! Each block re-reads the same feature map at every time step and carries a
//! hidden/cell state across steps. The hidden map is projected to a
//! 32-dimensional quality vector per step. Gate order in the stacked weights is
//! input, forget, output, candidate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::graph::{Tape, Var};
use crate::params::{lecun_normal, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const QUALITY_DIM: usize = 32;
const GATES: usize = 4;
const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackConfig {
    /// Hidden channels of blocks 1..3.
    pub hidden_channels: [usize; 3],
    /// Width of each per-step quality vector.
    pub head_dim: usize,
}

impl FeedbackConfig {
    pub fn tiny() -> Self {
        Self {
            hidden_channels: [8, 16, 32],
            head_dim: QUALITY_DIM,
        }
    }

    pub fn full() -> Self {
        Self {
            hidden_channels: [32, 64, 128],
            head_dim: QUALITY_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels.contains(&0) || self.head_dim == 0 {
            return config("feedback widths must be positive");
        }
        Ok(())
    }
}

/// Recurrent state of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockState {
    pub hidden: Var,
    pub cell: Var,
    /// Set for the initial all-zero state so the recurrent convolution can be skipped.
    zero: bool,
}

/// Per-block hidden and cell maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackState {
    pub blocks: Vec<BlockState>,
}

/// One convolutional-LSTM block plus its quality head.
#[derive(Debug, Clone)]
pub struct FeedbackBlock {
    pub in_channels: usize,
    pub hidden: usize,
    /// `[4h, C_in, 3, 3]`: stacked `W_x` for the four gates.
    pub w_x: ParamId,
    /// `[4h, h, 3, 3]`: stacked `W_h`.
    pub w_h: ParamId,
    /// `[4h]`.
    pub bias: ParamId,
    /// `[h, head_dim]`.
    pub head_w: ParamId,
    /// `[head_dim]`.
    pub head_b: ParamId,
}

impl FeedbackBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        hidden: usize,
        head_dim: usize,
    ) -> Self {
        let k2 = KERNEL * KERNEL;
        let w_x = store.add(
            format!("{name}.w_x"),
            ParamGroup::Other,
            lecun_normal(
                [GATES * hidden, in_channels, KERNEL, KERNEL],
                in_channels * k2,
                rng,
            ),
        );
        let w_h = store.add(
            format!("{name}.w_h"),
            ParamGroup::Other,
            lecun_normal([GATES * hidden, hidden, KERNEL, KERNEL], hidden * k2, rng),
        );
        let mut b = vec![0.0; GATES * hidden];
        // forget gate starts open
        b[hidden..2 * hidden].fill(1.0);
        let bias = store.add(format!("{name}.bias"), ParamGroup::Other, Tensor::vector(b));
        let head_w = store.add(
            format!("{name}.head.weight"),
            ParamGroup::Other,
            lecun_normal([hidden, head_dim], hidden, rng),
        );
        let head_b = store.add(
            format!("{name}.head.bias"),
            ParamGroup::Other,
            Tensor::zeros([head_dim]),
        );
        Self {
            in_channels,
            hidden,
            w_x,
            w_h,
            bias,
            head_w,
            head_b,
        }
    }

    /// All-zero state matching the spatial size of `fm`.
    pub fn zero_state(&self, tape: &mut Tape, fm: Var) -> Result<BlockState> {
        let (_, h, w) = tape.value(fm).chw();
        let hidden = tape.constant(Tensor::zeros([self.hidden, h, w]));
        let cell = tape.constant(Tensor::zeros([self.hidden, h, w]));
        Ok(BlockState {
            hidden,
            cell,
            zero: true,
        })
    }

    fn check(&self, tape: &Tape, fm: Var, state: &BlockState) -> Result<()> {
        let (c, h, w) = tape.value(fm).chw();
        if c != self.in_channels {
            return domain(format!(
                "feedback block expects {} input channels, got {c}",
                self.in_channels
            ));
        }
        for v in [state.hidden, state.cell] {
            if tape.value(v).chw() != (self.hidden, h, w) {
                return domain(format!(
                    "state shape {:?} does not match input {:?}",
                    tape.value(v).shape(),
                    [self.hidden, h, w]
                ));
            }
        }
        Ok(())
    }

    /// `W_x * fm + b`, shared by every time step.
    pub fn input_projection(&self, tape: &mut Tape, store: &ParamStore, fm: Var) -> Var {
        let w = tape.param(store, self.w_x);
        let b = tape.param(store, self.bias);
        let x = tape.conv2d(fm, w, 1, KERNEL / 2);
        tape.add_channel_bias(x, b)
    }

    /// One recurrence given a precomputed [`input_projection`](Self::input_projection).
    pub fn step_projected(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        projection: Var,
        state: BlockState,
    ) -> (Var, BlockState) {
        let pre = if state.zero {
            projection
        } else {
            let wh = tape.param(store, self.w_h);
            let rec = tape.conv2d(state.hidden, wh, 1, KERNEL / 2);
            tape.add(projection, rec)
        };
        let h = self.hidden;
        let i = tape.slice_channels(pre, 0, h);
        let f = tape.slice_channels(pre, h, h);
        let o = tape.slice_channels(pre, 2 * h, h);
        let c = tape.slice_channels(pre, 3 * h, h);
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let o = tape.sigmoid(o);
        let candidate = tape.tanh(c);
        let kept = tape.mul(f, state.cell);
        let written = tape.mul(i, candidate);
        let cell = tape.add(kept, written);
        let squashed = tape.tanh(cell);
        let hidden = tape.mul(o, squashed);
        (
            hidden,
            BlockState {
                hidden,
                cell,
                zero: false,
            },
        )
    }

    /// Full gate computation for one step; returns the block output (the new
    /// hidden map) and the new state.
    pub fn feedback_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fm: Var,
        state: BlockState,
    ) -> Result<(Var, BlockState)> {
        self.check(tape, fm, &state)?;
        let projection = self.input_projection(tape, store, fm);
        let state = BlockState {
            zero: false,
            ..state
        };
        Ok(self.step_projected(tape, store, projection, state))
    }

    /// Global average pool followed by an affine map, giving `[1, head_dim]`.
    pub fn head(&self, tape: &mut Tape, store: &ParamStore, out: Var) -> Var {
        let pooled = tape.global_avg_pool(out);
        let row = tape.reshape(pooled, [1, self.hidden]);
        let w = tape.param(store, self.head_w);
        let b = tape.param(store, self.head_b);
        tape.linear(row, w, b)
    }
}

/// The three feedback blocks.
#[derive(Debug, Clone)]
pub struct FeedbackNet {
    pub blocks: [FeedbackBlock; 3],
}

impl FeedbackNet {
    pub fn new(
        cfg: &FeedbackConfig,
        tap_channels: [usize; 3],
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let blocks = [0, 1, 2].map(|d| {
            FeedbackBlock::new(
                store,
                rng,
                &format!("feedback.block{}", d + 1),
                tap_channels[d],
                cfg.hidden_channels[d],
                cfg.head_dim,
            )
        });
        Ok(Self { blocks })
    }

    /// Runs `steps` iterations over constant inputs `fms` from a zero state and
    /// returns the per-step triples of quality vectors.
    pub fn run_feedback(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fms: [Var; 3],
        steps: usize,
    ) -> Result<Vec<[Var; 3]>> {
        if steps == 0 {
            return config("T must be at least 1");
        }
        let mut states = Vec::with_capacity(3);
        let mut projections = Vec::with_capacity(3);
        for (block, &fm) in self.blocks.iter().zip(&fms) {
            let state = block.zero_state(tape, fm)?;
            block.check(tape, fm, &state)?;
            states.push(state);
            projections.push(block.input_projection(tape, store, fm));
        }
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut triple = Vec::with_capacity(3);
            for d in 0..3 {
                let (o, s) = self.blocks[d].step_projected(tape, store, projections[d], states[d]);
                states[d] = s;
                triple.push(self.blocks[d].head(tape, store, o));
            }
            out.push([triple[0], triple[1], triple[2]]);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            [c, h, w],
            (0..c * h * w).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
    }

    #[test]
    fn zero_everything_gives_zero_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = FeedbackBlock::new(&mut store, &mut rng, "b", 2, 3, QUALITY_DIM);
        for id in [block.w_x, block.w_h, block.bias] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let fm = tape.constant(Tensor::zeros([2, 4, 4]));
        let s0 = block.zero_state(&mut tape, fm).unwrap();
        let (out, s1) = block.feedback_step(&mut tape, &store, fm, s0).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(s1.cell).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(out).chw(), (3, 4, 4));
    }

    #[test]
    fn single_pixel_cell_matches_scalar_lstm() {
        // 1x1 maps: only the kernel centre touches data, so the block is a scalar LSTM.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = FeedbackBlock::new(&mut store, &mut rng, "b", 1, 1, QUALITY_DIM);
        let wx = [0.7, -0.4, 1.1, 0.9];
        let wh = [-0.3, 0.8, 0.5, -1.2];
        let b = [0.1, 0.6, -0.2, 0.05];
        for g in 0..4 {
            store.get_mut(block.w_x).data_mut()[g * 9 + 4] = wx[g];
            store.get_mut(block.w_h).data_mut()[g * 9 + 4] = wh[g];
            store.get_mut(block.bias).data_mut()[g] = b[g];
        }
        let x = 0.35;
        let (mut h, mut c) = (0.0f64, 0.0f64);
        let mut tape = Tape::new();
        let fm = tape.constant(Tensor::new([1, 1, 1], vec![x]));
        let mut state = block.zero_state(&mut tape, fm).unwrap();
        for _ in 0..4 {
            let i = sigmoid(wx[0] * x + wh[0] * h + b[0]);
            let f = sigmoid(wx[1] * x + wh[1] * h + b[1]);
            let o = sigmoid(wx[2] * x + wh[2] * h + b[2]);
            let cand = (wx[3] * x + wh[3] * h + b[3]).tanh();
            c = f * c + i * cand;
            h = o * c.tanh();
            let (out, next) = block.feedback_step(&mut tape, &store, fm, state).unwrap();
            state = next;
            assert!((tape.value(out).data()[0] - h).abs() < 1e-14);
            assert!((tape.value(state.cell).data()[0] - c).abs() < 1e-14);
        }
    }

    #[test]
    fn head_pools_then_maps() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = FeedbackBlock::new(&mut store, &mut rng, "b", 2, 2, QUALITY_DIM);
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::zeros([2, 3, 3]));
        let v = block.head(&mut tape, &store, zero);
        assert_eq!(tape.shape(v), &[1, QUALITY_DIM]);
        assert!(tape.value(v).data().iter().all(|&x| x == 0.0));

        // identity-like map: channel 0 -> output 0, channel 1 -> output 1
        let w = store.get_mut(block.head_w).data_mut();
        w.fill(0.0);
        w[0] = 1.0;
        w[QUALITY_DIM + 1] = 1.0;
        let mut data = vec![0.25; 9];
        data.extend(vec![-2.0; 9]);
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::new([2, 3, 3], data));
        let v = block.head(&mut tape, &store, m);
        let out = tape.value(v).data();
        assert!((out[0] - 0.25).abs() < 1e-15 && (out[1] + 2.0).abs() < 1e-15);
        assert!(out[2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = FeedbackBlock::new(&mut store, &mut rng, "b", 2, 3, QUALITY_DIM);
        let mut tape = Tape::new();
        let fm = tape.constant(Tensor::zeros([2, 4, 4]));
        let other = tape.constant(Tensor::zeros([2, 5, 5]));
        let s = block.zero_state(&mut tape, other).unwrap();
        assert!(block.feedback_step(&mut tape, &store, fm, s).is_err());
        let wrong_c = tape.constant(Tensor::zeros([3, 4, 4]));
        let s = block.zero_state(&mut tape, fm).unwrap();
        assert!(block.feedback_step(&mut tape, &store, wrong_c, s).is_err());
    }

    fn net() -> (FeedbackNet, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net =
            FeedbackNet::new(&FeedbackConfig::tiny(), [4, 6, 8], &mut store, &mut rng).unwrap();
        (net, store)
    }

    fn inputs(tape: &mut Tape) -> [Var; 3] {
        [
            tape.constant(random_map(4, 8, 8, 1)),
            tape.constant(random_map(6, 4, 4, 2)),
            tape.constant(random_map(8, 2, 2, 3)),
        ]
    }

    #[test]
    fn run_feedback_steps_and_weight_tying() {
        let (net, store) = net();
        let mut tape1 = Tape::new();
        let fms = inputs(&mut tape1);
        let one = net.run_feedback(&mut tape1, &store, fms, 1).unwrap();
        assert_eq!(one.len(), 1);

        let mut tape4 = Tape::new();
        let fms4 = inputs(&mut tape4);
        let four = net.run_feedback(&mut tape4, &store, fms4, 4).unwrap();
        assert_eq!(four.len(), 4);
        // step 1 of a longer run equals the single-step run
        for d in 0..3 {
            assert_eq!(tape1.value(one[0][d]), tape4.value(four[0][d]));
            assert_eq!(tape4.shape(four[3][d]), &[1, QUALITY_DIM]);
        }
        // every step reuses the same parameter leaves
        assert_eq!(tape4.param_leaf_count(), store.len());
        // and the recurrence changes the output
        assert!(
            tape4
                .value(four[0][0])
                .max_abs_diff(tape4.value(four[1][0]))
                > 1e-6
        );
        assert!(net.run_feedback(&mut tape4, &store, fms4, 0).is_err());
    }

    #[test]
    fn single_step_equals_step_plus_head() {
        let (net, store) = net();
        let mut tape = Tape::new();
        let fms = inputs(&mut tape);
        let run = net.run_feedback(&mut tape, &store, fms, 1).unwrap();
        for d in 0..3 {
            let block = &net.blocks[d];
            let s0 = block.zero_state(&mut tape, fms[d]).unwrap();
            let (o, _) = block.feedback_step(&mut tape, &store, fms[d], s0).unwrap();
            let v = block.head(&mut tape, &store, o);
            assert!(tape.value(v).max_abs_diff(tape.value(run[0][d])) < 1e-14);
        }
    }

    #[test]
    fn deterministic() {
        let (net, store) = net();
        let go = || {
            let mut tape = Tape::new();
            let fms = inputs(&mut tape);
            let out = net.run_feedback(&mut tape, &store, fms, 3).unwrap();
            out.iter()
                .flat_map(|t| t.iter().map(|v| tape.value(*v).clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = FeedbackConfig {
            hidden_channels: [2, 2, 2],
            head_dim: 3,
        };
        let net = FeedbackNet::new(&cfg, [2, 3, 2], &mut store, &mut rng).unwrap();
        let maps = [
            random_map(2, 3, 3, 1),
            random_map(3, 2, 2, 2),
            random_map(2, 1, 1, 3),
        ];
        let build = |tape: &mut Tape, s: &ParamStore| {
            let fms = [0, 1, 2].map(|d| tape.constant(maps[d].clone()));
            let out = net.run_feedback(tape, s, fms, 3).unwrap();
            let all: Vec<Var> = out.iter().flatten().copied().collect();
            tape.concat_cols(&all)
        };
        let ids: Vec<_> = store.ids().collect();
        let err = crate::testutil::param_fd_error(&store, &ids, build, 1e-6);
        assert!(err < 1e-4, "relative error {err}");
    }
}
