use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch_space::{inner_channels, BlockSpec, Path, SearchSpace};
use crate::tensor::{checkpoint, Tape, Tensor, TensorError, Var};

use super::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub input_dim: usize,
    pub output_dim: usize,
    pub teacher_hidden: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 0,
            input_dim: 16,
            output_dim: 4,
            teacher_hidden: 32,
            train_samples: 2048,
            val_samples: 512,
            batch_size: 64,
            lr: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Fixed regression task: Gaussian inputs, targets from a frozen tanh MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub x_train: Tensor,
    pub y_train: Tensor,
    pub x_val: Tensor,
    pub y_val: Tensor,
}

impl ToyTask {
    pub fn generate(cfg: &ToyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w1 = Tensor::normal(cfg.input_dim, cfg.teacher_hidden, 1.0 / (cfg.input_dim as f64).sqrt(), &mut rng);
        let w2 = Tensor::normal(cfg.teacher_hidden, cfg.output_dim, 1.0 / (cfg.teacher_hidden as f64).sqrt(), &mut rng);
        let mut make = |n: usize| {
            let x = Tensor::normal(n, cfg.input_dim, 1.0, &mut rng);
            let mut tape = Tape::new();
            let (xv, a, b) = (tape.leaf(x.clone()), tape.leaf(w1.clone()), tape.leaf(w2.clone()));
            let h = tape.matmul(xv, a).expect("teacher shapes");
            let h = tanh(&mut tape, h);
            let y = tape.matmul(h, b).expect("teacher shapes");
            (x, tape.value(y).clone())
        };
        let (x_train, y_train) = make(cfg.train_samples);
        let (x_val, y_val) = make(cfg.val_samples);
        ToyTask { x_train, y_train, x_val, y_val }
    }
}

// tanh(x) = 2·sigmoid(2x) − 1
fn tanh(tape: &mut Tape, x: Var) -> Var {
    let s = tape.scale(x, 2.0);
    let s = tape.sigmoid(s);
    let s = tape.scale(s, 2.0);
    tape.add_scalar(s, -1.0)
}

fn rows_of(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), c, data).expect("row gather")
}

fn leading(t: &Tensor, rows: usize, cols: usize) -> Tensor {
    let full = t.cols();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        data.extend_from_slice(&t.data()[r * full..r * full + cols]);
    }
    Tensor::matrix(rows, cols, data).expect("leading slice")
}

/// The space the toy supernet is sized for by default: the standard 4-block
/// depth/width/expand grid on narrow fully connected blocks. Resolution 4 and
/// kernel 1 make every block one "pixel", so analytic FLOPs equal the MACs of
/// the dense layers.
pub fn toy_space() -> SearchSpace {
    let b = BlockSpec::new(&[0, 1, 2], &[0.65, 0.8, 1.0], &[0.2, 0.25, 0.35]);
    SearchSpace::new(vec![b.clone(), b.clone(), b.clone(), b], 4, vec![32, 48, 64, 96], 1).expect("toy space is valid")
}

/// Shared weights for every path of a space: FC residual bottlenecks
/// (reduce → inner → restore) per layer, dense transitions between blocks.
/// A path uses the leading rows/columns of each tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySupernet {
    space: SearchSpace,
    config: ToyConfig,
    task: ToyTask,
    names: Vec<String>,
    params: Vec<Tensor>,
}

const LAYER_TENSORS: usize = 6;

struct Leaf {
    param: usize,
    rows: usize,
    cols: usize,
    var: Var,
}

impl ToySupernet {
    /// `config.seed` fixes the task; `init_seed` the initial weights.
    pub fn new(space: &SearchSpace, config: ToyConfig, init_seed: u64) -> Result<Self, SimError> {
        if config.batch_size == 0 || config.train_samples == 0 || config.val_samples == 0 {
            return Err(SimError::Config("toy supernet needs positive batch and sample counts".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let cmax: Vec<usize> = (0..space.num_blocks()).map(|b| space.channels(b, max_of(&space.blocks[b].width_choices))).collect();
        let mut named: Vec<(String, Tensor)> = Vec::new();
        named.push(("stem.w".into(), Tensor::fan_in_uniform(config.input_dim, cmax[0], &mut rng)));
        named.push(("stem.b".into(), Tensor::zeros(&[1, cmax[0]])));
        for (b, spec) in space.blocks.iter().enumerate() {
            let c = cmax[b];
            let m = inner_channels(c, max_of(&spec.expand_choices));
            for l in 0..spec.max_layers() {
                let mut restore = Tensor::fan_in_uniform(m, c, &mut rng);
                restore.data_mut().iter_mut().for_each(|v| *v *= 0.5);
                named.push((format!("block{b}.layer{l}.reduce.w"), Tensor::fan_in_uniform(c, m, &mut rng)));
                named.push((format!("block{b}.layer{l}.reduce.b"), Tensor::zeros(&[1, m])));
                named.push((format!("block{b}.layer{l}.inner.w"), Tensor::fan_in_uniform(m, m, &mut rng)));
                named.push((format!("block{b}.layer{l}.inner.b"), Tensor::zeros(&[1, m])));
                named.push((format!("block{b}.layer{l}.restore.w"), restore));
                named.push((format!("block{b}.layer{l}.restore.b"), Tensor::zeros(&[1, c])));
            }
            if b + 1 < space.num_blocks() {
                named.push((format!("trans{b}.w"), Tensor::fan_in_uniform(c, cmax[b + 1], &mut rng)));
                named.push((format!("trans{b}.b"), Tensor::zeros(&[1, cmax[b + 1]])));
            }
        }
        let last = *cmax.last().ok_or_else(|| SimError::Config("space has no blocks".into()))?;
        named.push(("head.w".into(), Tensor::fan_in_uniform(last, config.output_dim, &mut rng)));
        named.push(("head.b".into(), Tensor::zeros(&[1, config.output_dim])));
        let task = ToyTask::generate(&config);
        let (names, params) = named.into_iter().unzip();
        Ok(ToySupernet { space: space.clone(), config, task, names, params })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn task(&self) -> &ToyTask {
        &self.task
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    // index of layer l of block b's first tensor
    fn layer_base(&self, b: usize, l: usize) -> usize {
        let mut i = 2;
        for (k, spec) in self.space.blocks.iter().enumerate() {
            if k == b {
                return i + l * LAYER_TENSORS;
            }
            i += spec.max_layers() * LAYER_TENSORS + 2;
        }
        unreachable!("block index checked by caller")
    }

    /// Multiply-accumulates per sample of the active bottleneck layers,
    /// counted from the slice shapes actually used.
    pub fn path_macs(&self, path: &Path) -> Result<u64, SimError> {
        Ok(self
            .slices(path)?
            .into_iter()
            .flatten()
            .map(|(r, m, o)| (r.0 * r.1 + m.0 * m.1 + o.0 * o.1) as u64)
            .sum())
    }

    // per block, per active layer: (reduce, inner, restore) slice shapes
    #[allow(clippy::type_complexity)]
    fn slices(&self, path: &Path) -> Result<Vec<Vec<((usize, usize), (usize, usize), (usize, usize))>>, SimError> {
        if !self.space.validate_path(path) {
            return Err(SimError::InvalidPath(path.to_string()));
        }
        Ok(path
            .blocks
            .iter()
            .enumerate()
            .map(|(b, choice)| {
                let c = self.space.channels(b, choice.width);
                choice
                    .expands
                    .iter()
                    .map(|&e| {
                        let m = inner_channels(c, e);
                        ((c, m), (m, m), (m, c))
                    })
                    .collect()
            })
            .collect())
    }

    fn forward(&self, tape: &mut Tape, path: &Path, x: Tensor) -> Result<(Var, Vec<Leaf>), SimError> {
        let shapes = self.slices(path)?;
        let mut leaves: Vec<Leaf> = Vec::new();
        let mut take = |tape: &mut Tape, param: usize, rows: usize, cols: usize| -> Var {
            let var = tape.leaf(leading(&self.params[param], rows, cols));
            leaves.push(Leaf { param, rows, cols, var });
            var
        };
        let n = self.space.num_blocks();
        let c0 = self.space.channels(0, path.blocks[0].width);
        let xv = tape.leaf(x);
        let (w, bias) = (take(tape, 0, self.config.input_dim, c0), take(tape, 1, 1, c0));
        let mut h = dense(tape, xv, w, bias)?;
        h = tape.relu(h);
        for b in 0..n {
            let c = self.space.channels(b, path.blocks[b].width);
            for (l, &(_, (m, _), _)) in shapes[b].iter().enumerate() {
                let base = self.layer_base(b, l);
                let (rw, rb) = (take(tape, base, c, m), take(tape, base + 1, 1, m));
                let (iw, ib) = (take(tape, base + 2, m, m), take(tape, base + 3, 1, m));
                let (ow, ob) = (take(tape, base + 4, m, c), take(tape, base + 5, 1, c));
                let z = dense(tape, h, rw, rb)?;
                let z = tape.relu(z);
                let z = dense(tape, z, iw, ib)?;
                let z = tape.relu(z);
                let z = dense(tape, z, ow, ob)?;
                h = tape.add(h, z)?;
            }
            let next = self.layer_base(b, self.space.blocks[b].max_layers());
            if b + 1 < n {
                let c2 = self.space.channels(b + 1, path.blocks[b + 1].width);
                let (tw, tb) = (take(tape, next, c, c2), take(tape, next + 1, 1, c2));
                h = dense(tape, h, tw, tb)?;
                h = tape.relu(h);
            } else {
                let (hw, hb) = (take(tape, next, c, self.config.output_dim), take(tape, next + 1, 1, self.config.output_dim));
                h = dense(tape, h, hw, hb)?;
            }
        }
        Ok((h, leaves))
    }

    fn mse(&self, tape: &mut Tape, y: Var, target: Tensor) -> Result<Var, SimError> {
        let t = tape.leaf(target);
        let d = tape.sub(y, t)?;
        let sq = tape.mul(d, d)?;
        Ok(tape.mean(sq))
    }

    /// Network outputs of `path` on inputs `x`.
    pub fn predict(&self, path: &Path, x: &Tensor) -> Result<Tensor, SimError> {
        let mut tape = Tape::new();
        let (y, _) = self.forward(&mut tape, path, x.clone())?;
        Ok(tape.value(y).clone())
    }

    /// Mean squared error of `path` on a whole split.
    pub fn eval(&self, path: &Path, split: Split) -> Result<f64, SimError> {
        let (x, y) = match split {
            Split::Train => (&self.task.x_train, &self.task.y_train),
            Split::Val => (&self.task.x_val, &self.task.y_val),
        };
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, path, x.clone())?;
        let l = self.mse(&mut tape, out, y.clone())?;
        Ok(tape.value(l).item())
    }

    /// One plain SGD step of `path` on the given training rows; only the
    /// path's slices change. Returns the minibatch loss before the update.
    pub fn step(&mut self, path: &Path, rows: &[usize]) -> Result<f64, SimError> {
        let x = rows_of(&self.task.x_train, rows);
        let y = rows_of(&self.task.y_train, rows);
        let mut tape = Tape::new();
        let (out, leaves) = self.forward(&mut tape, path, x)?;
        let l = self.mse(&mut tape, out, y)?;
        let loss = tape.value(l).item();
        let grads = tape.backward(l)?;
        let lr = self.config.lr;
        for leaf in leaves {
            let Some(g) = grads.get(leaf.var) else { continue };
            let p = &mut self.params[leaf.param];
            let full = p.cols();
            let data = p.data_mut();
            for r in 0..leaf.rows {
                let dst = &mut data[r * full..r * full + leaf.cols];
                let src = &g.data()[r * leaf.cols..(r + 1) * leaf.cols];
                dst.iter_mut().zip(src).for_each(|(w, g)| *w -= lr * g);
            }
        }
        if !loss.is_finite() {
            return Err(SimError::Diverged(loss));
        }
        Ok(loss)
    }

    pub fn save<W: Write>(&self, w: W, extra: serde_json::Value) -> Result<(), SimError> {
        let meta = serde_json::json!({
            "kind": "toy_supernet",
            "space": self.space,
            "config": self.config,
            "extra": extra,
        });
        let named: Vec<(String, Tensor)> = self.names.iter().cloned().zip(self.params.iter().cloned()).collect();
        checkpoint::write(w, meta, &named)?;
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<(Self, serde_json::Value), SimError> {
        let (meta, named) = checkpoint::read(r)?;
        let de = |k: &str| -> Result<serde_json::Value, SimError> {
            meta.get(k).cloned().ok_or_else(|| SimError::Checkpoint(format!("missing {k}")))
        };
        let space: SearchSpace = serde_json::from_value(de("space")?).map_err(|e| SimError::Checkpoint(e.to_string()))?;
        let config: ToyConfig = serde_json::from_value(de("config")?).map_err(|e| SimError::Checkpoint(e.to_string()))?;
        let mut net = ToySupernet::new(&space, config, 0)?;
        if named.len() != net.params.len()
            || named.iter().zip(&net.params).zip(&net.names).any(|(((n, t), p), name)| n != name || t.shape() != p.shape())
        {
            return Err(SimError::Checkpoint("tensor layout does not match the space".into()));
        }
        net.params = named.into_iter().map(|(_, t)| t).collect();
        Ok((net, meta.get("extra").cloned().unwrap_or(serde_json::Value::Null)))
    }
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}
