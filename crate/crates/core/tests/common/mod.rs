#![allow(dead_code)]

use absa_core::encoder::attention_mask_bias;
use absa_core::heads::{hsum_forward, psum_forward, AggregationMode, BranchSet, Target, Task};
use absa_core::tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const T: usize = 5;
pub const H: usize = 8;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub struct Aggregator {
    pub store: ParamStore,
    pub set: BranchSet,
    pub hiddens: Vec<Tensor>,
    pub target: Target,
}

impl Aggregator {
    /// Four random hidden states (deepest first) feeding freshly
    /// initialized branches. Word positions are `1..T-1`.
    pub fn new(task: Task, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let set = BranchSet::new(task, &mut store, H, 16, 2, 1e-12, 0.3, 0.0, &mut rng).unwrap();
        let hiddens = (0..4).map(|_| random_tensor(&mut rng, &[T, H], 1.0)).collect();
        let target = match task {
            Task::Ae => Target::Tags(vec![0, 1, 2]),
            Task::Asc => Target::Class(1),
        };
        Self {
            store,
            set,
            hiddens,
            target,
        }
    }

    pub fn word_positions() -> Vec<usize> {
        (1..T - 1).collect()
    }

    /// Per-branch losses for the given hidden states.
    pub fn branch_losses(&self, mode: AggregationMode, hiddens: &[Tensor]) -> Vec<f64> {
        let mut g = Graph::new();
        let hs: Vec<_> = hiddens.iter().map(|h| g.constant(h.clone())).collect();
        let mask = g.constant(attention_mask_bias(&[true; T]));
        let positions = Self::word_positions();
        let outs = match mode {
            AggregationMode::PSum => psum_forward(&mut g, &self.store, &hs, &self.set, mask, &positions, None),
            AggregationMode::HSum => hsum_forward(&mut g, &self.store, &hs, &self.set, mask, &positions, None),
            AggregationMode::Vanilla => panic!("no branches in vanilla mode"),
        }
        .unwrap();
        outs.iter()
            .zip(&self.set.heads)
            .map(|(o, head)| {
                let l = head.loss(&mut g, &self.store, o.scores, &self.target).unwrap();
                g.item(l).unwrap()
            })
            .collect()
    }

    /// `response[i][j]`: largest change of branch `i`'s loss when hidden
    /// `j` is nudged by `delta` in each of a few coordinates.
    pub fn response(&self, mode: AggregationMode, delta: f64) -> Vec<Vec<f64>> {
        let base = self.branch_losses(mode, &self.hiddens);
        let mut out = vec![vec![0.0; 4]; 4];
        for j in 0..4 {
            for coord in [0, H + 3, 2 * H + 5, 3 * H + 1] {
                let mut hs = self.hiddens.clone();
                hs[j].data_mut()[coord] += delta;
                let moved = self.branch_losses(mode, &hs);
                for i in 0..4 {
                    out[i][j] = f64::max(out[i][j], (moved[i] - base[i]).abs());
                }
            }
        }
        out
    }
}

/// Checks the response matrix against the expected dependency pattern and
/// returns a description of the first violation.
pub fn check_pattern(resp: &[Vec<f64>], depends: impl Fn(usize, usize) -> bool, threshold: f64) -> Result<(), String> {
    for (i, row) in resp.iter().enumerate() {
        for (j, &r) in row.iter().enumerate() {
            let expect = depends(i, j);
            if expect && r <= threshold {
                return Err(format!("branch {i} should respond to hidden {j}, change {r:e}"));
            }
            if !expect && r != 0.0 {
                return Err(format!("branch {i} should ignore hidden {j}, change {r:e}"));
            }
        }
    }
    Ok(())
}
