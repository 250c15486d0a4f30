//! A small multilayer perceptron `s_θ(z, t)` with hand-written backpropagation
//! and an Adam optimizer.
//!
//! Parameters live in one flat vector, layer by layer: the `out × in`
//! weight matrix in row-major order followed by the `out` biases.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::atomic_write;

const MAGIC: &str = "FHDM-MLP v1";
const CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    /// `[state_dim + 1, hidden..., state_dim]`.
    pub dims: Vec<usize>,
    pub params: Vec<f64>,
    /// When set, outputs pass through `B·tanh(·/B)`.
    pub output_bound: Option<f64>,
    /// The time input is `t / time_scale`.
    pub time_scale: f64,
    /// Descriptor of the scheme the network was trained for.
    pub scheme: String,
}

/// One term of the snapshot loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossItem {
    pub state: Vec<f64>,
    pub t: f64,
    pub target: Vec<f64>,
    pub mask: Vec<bool>,
    /// Multiplier of this item's term in the batch mean; 1 for the plain loss.
    pub weight: f64,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// He-initialized hidden layers, zero output layer.
    pub fn new(dims: Vec<usize>, output_bound: Option<f64>, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::config("network needs at least two positive layer widths"));
        }
        if dims[0] != dims[dims.len() - 1] + 1 {
            return Err(Error::config("input width must be the state dimension plus one"));
        }
        if output_bound.is_some_and(|b| !(b > 0.0)) {
            return Err(Error::config("output bound must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(&dims));
        let layers = dims.len() - 1;
        for (l, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = if l + 1 == layers { 0.0 } else { (2.0 / fan_in as f64).sqrt() };
            for _ in 0..fan_in * fan_out {
                let g: f64 = rng.sample(StandardNormal);
                params.push(std * g);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            dims,
            params,
            output_bound,
            time_scale: 1.0,
            scheme: "none".into(),
        })
    }

    /// `[d + 1, hidden × (layers - 1), d]` with `layers` linear maps.
    pub fn with_hidden(d: usize, hidden: usize, layers: usize, output_bound: Option<f64>, seed: u64) -> Result<Self> {
        if layers == 0 {
            return Err(Error::config("network needs at least one layer"));
        }
        let mut dims = vec![d + 1];
        dims.extend(std::iter::repeat_n(hidden, layers - 1));
        dims.push(d);
        Self::new(dims, output_bound, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check_finite(&self) -> Result<()> {
        match self.params.iter().position(|p| !p.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Simulation {
                t: f64::NAN,
                state: vec![],
                msg: format!("network parameter {i} is not finite"),
            }),
        }
    }

    /// Network output at `(z, t)`.
    pub fn forward(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        if z.len() + 1 != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim() - 1,
                got: z.len(),
            });
        }
        self.check_finite()?;
        let mut out = vec![0.0; self.output_dim()];
        self.forward_into(z, t, &mut out);
        Ok(out)
    }

    /// Unchecked forward pass for validated networks.
    pub fn forward_into(&self, z: &[f64], t: f64, out: &mut [f64]) {
        let width = self.dims.iter().copied().max().unwrap();
        let mut cur = Vec::with_capacity(width);
        cur.extend_from_slice(z);
        cur.push(t / self.time_scale);
        let mut next = vec![0.0; width];
        let mut off = 0;
        let layers = self.dims.len() - 1;
        for l in 0..layers {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let a = b[o] + row.iter().zip(&cur).map(|(p, q)| p * q).sum::<f64>();
                next[o] = if l + 1 < layers { relu(a) } else { a };
            }
            cur.clear();
            cur.extend_from_slice(&next[..n_out]);
        }
        for (o, &a) in out.iter_mut().zip(&cur) {
            *o = match self.output_bound {
                Some(bound) => bound * bounded_tanh(a / bound),
                None => a,
            };
        }
    }

    /// Adds the gradient of `½‖mask ∘ (s(z,t) - target)‖² · weight` to `grad`
    /// and returns the unweighted loss term.
    fn accumulate(&self, item: &LossItem, weight: f64, grad: &mut [f64]) -> f64 {
        let layers = self.dims.len() - 1;
        // activations a_0 (input) .. a_L (pre-bound output)
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers + 1);
        let mut input = item.state.clone();
        input.push(item.t / self.time_scale);
        acts.push(input);
        let mut off = 0;
        let mut offsets = Vec::with_capacity(layers);
        for l in 0..layers {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            offsets.push(off);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let prev = &acts[l];
            let a: Vec<f64> = (0..n_out)
                .map(|o| {
                    let v = b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(prev).map(|(p, q)| p * q).sum::<f64>();
                    if l + 1 < layers {
                        relu(v)
                    } else {
                        v
                    }
                })
                .collect();
            acts.push(a);
        }
        let pre = &acts[layers];
        let mut delta = vec![0.0; pre.len()];
        let mut loss = 0.0;
        for i in 0..pre.len() {
            if !item.mask[i] {
                continue;
            }
            let (y, dy) = match self.output_bound {
                Some(bound) => {
                    let th = bounded_tanh(pre[i] / bound);
                    (bound * th, 1.0 - th * th)
                }
                None => (pre[i], 1.0),
            };
            let r = y - item.target[i];
            loss += 0.5 * r * r * item.weight;
            delta[i] = weight * item.weight * r * dy;
        }
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            let prev = &acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let gw = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                gw.iter_mut().zip(prev).for_each(|(g, p)| *g += d * p);
                grad[off + n_in * n_out + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut back = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                back.iter_mut()
                    .zip(&w[o * n_in..(o + 1) * n_in])
                    .for_each(|(b, wv)| *b += d * wv);
            }
            // ReLU derivative on the hidden activation
            for (b, &a) in back.iter_mut().zip(prev) {
                if a <= 0.0 {
                    *b = 0.0;
                }
            }
            delta = back;
        }
        loss
    }

    /// Snapshot loss `½ mean ‖mask ∘ (s - target)‖²` and its gradient.
    ///
    /// Items are processed in fixed-size chunks whose partial sums are added in
    /// index order, so the result does not depend on the thread count.
    pub fn backward(&self, batch: &[LossItem]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::pre("loss batch is empty"));
        }
        let d_in = self.input_dim() - 1;
        let d_out = self.output_dim();
        for it in batch {
            if it.state.len() != d_in || it.target.len() != d_out || it.mask.len() != d_out {
                return Err(Error::Dimension {
                    expected: d_out,
                    got: it.target.len().min(it.state.len()).min(it.mask.len()),
                });
            }
        }
        let w = 1.0 / batch.len() as f64;
        let partials: Vec<(f64, Vec<f64>)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = vec![0.0; self.params.len()];
                let l: f64 = chunk.iter().map(|it| self.accumulate(it, w, &mut g)).sum();
                (l, g)
            })
            .collect();
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (l, g) in partials {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok((loss * w, grad))
    }

    /// Loss only.
    pub fn loss(&self, batch: &[LossItem]) -> Result<f64> {
        Ok(self.backward(batch)?.0)
    }

    pub fn to_text(&self) -> String {
        let mut params = self.params.clone();
        // fold the time scale into the weights on the time input
        if self.time_scale != 1.0 {
            let (n_in, n_out) = (self.dims[0], self.dims[1]);
            for o in 0..n_out {
                params[o * n_in + n_in - 1] /= self.time_scale;
            }
        }
        let mut s = String::with_capacity(params.len() * 25 + 64);
        writeln!(s, "{MAGIC}").unwrap();
        writeln!(s, "{}", self.scheme).unwrap();
        writeln!(s, "{}", self.dims.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")).unwrap();
        match self.output_bound {
            Some(b) => writeln!(s, "{b:.16e}").unwrap(),
            None => writeln!(s, "none").unwrap(),
        }
        for p in params {
            writeln!(s, "{p:.16e}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("file ends before {what}"),
            })
        };
        let (_, magic) = next("the magic line")?;
        if magic != MAGIC {
            return Err(Error::Format(format!("expected `{MAGIC}`, found `{magic}`")));
        }
        let (_, scheme) = next("the scheme line")?;
        let (ln, dims_line) = next("the layer widths")?;
        let dims: Vec<usize> = dims_line
            .split_whitespace()
            .map(|v| v.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line: ln,
                msg: "layer widths must be integers".into(),
            })?;
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) || dims[0] != dims[dims.len() - 1] + 1 {
            return Err(Error::Parse {
                line: ln,
                msg: "invalid layer widths".into(),
            });
        }
        let (ln, bound_line) = next("the output bound")?;
        let output_bound = match bound_line {
            "none" => None,
            v => Some(v.parse::<f64>().ok().filter(|b| *b > 0.0).ok_or_else(|| Error::Parse {
                line: ln,
                msg: format!("invalid output bound `{v}`"),
            })?),
        };
        let n = param_count(&dims);
        let mut params = Vec::with_capacity(n);
        let mut last_line = ln;
        for (ln, l) in lines.by_ref() {
            last_line = ln;
            if l.is_empty() {
                continue;
            }
            if params.len() == n {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("more than the expected {n} parameters"),
                });
            }
            params.push(l.parse::<f64>().map_err(|_| Error::Parse {
                line: ln,
                msg: format!("invalid parameter `{l}`"),
            })?);
        }
        if params.len() != n {
            return Err(Error::Parse {
                line: last_line + 1,
                msg: format!("expected {n} parameters, found {}", params.len()),
            });
        }
        Ok(Self {
            dims,
            params,
            output_bound,
            time_scale: 1.0,
            scheme: scheme.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// `tanh` kept strictly inside `(-1, 1)` so bounded outputs never reach the bound.
#[inline]
fn bounded_tanh(v: f64) -> f64 {
    v.tanh().clamp(-1.0 + f64::EPSILON, 1.0 - f64::EPSILON)
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params`.
pub fn adam_step(params: &mut [f64], state: &mut AdamState, grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != params.len() {
        return Err(Error::Dimension {
            expected: params.len(),
            got: grad.len(),
        });
    }
    state.step += 1;
    let b1t = 1.0 - state.beta1.powi(state.step as i32);
    let b2t = 1.0 - state.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mh = state.m[i] / b1t;
        let vh = state.v[i] / b2t;
        params[i] -= state.lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_net(dims: Vec<usize>, bound: Option<f64>, seed: u64) -> Mlp {
        let mut net = Mlp::new(dims, bound, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for p in net.params.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *p = 0.7 * g;
        }
        net
    }

    pub(crate) fn random_batch(net: &Mlp, n: usize, seed: u64) -> Vec<LossItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = net.output_dim();
        (0..n)
            .map(|_| LossItem {
                state: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                t: rng.random_range(0.0..1.0),
                target: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                mask: (0..d).map(|_| rng.random::<f64>() < 0.8).collect(),
                weight: rng.random_range(0.5..2.0),
            })
            .collect()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = Mlp::with_hidden(3, 5, 3, Some(5.0), 1).unwrap();
        net.params.fill(0.0);
        assert_eq!(net.forward(&[0.3, -0.1, 2.0], 0.5).unwrap(), vec![0.0; 3]);
        let fresh = Mlp::with_hidden(3, 5, 3, None, 1).unwrap();
        assert_eq!(fresh.forward(&[0.3, -0.1, 2.0], 0.5).unwrap(), vec![0.0; 3]);
        assert_eq!(fresh.dims, vec![4, 5, 5, 3]);
    }

    #[test]
    fn non_finite_parameters_are_reported() {
        let mut net = Mlp::with_hidden(1, 2, 2, None, 0).unwrap();
        net.params[0] = f64::NAN;
        assert!(net.forward(&[0.0], 0.0).is_err());
        assert!(net.forward(&[0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn exact_fit_and_full_mask_give_zero() {
        let net = random_net(vec![4, 6, 3], None, 2);
        let mut batch = random_batch(&net, 5, 3);
        for it in batch.iter_mut() {
            it.target = net.forward(&it.state, it.t).unwrap();
        }
        let (l, g) = net.backward(&batch).unwrap();
        assert!(l.abs() < 1e-28 && g.iter().all(|v| v.abs() < 1e-14));
        let mut batch = random_batch(&net, 5, 4);
        batch.iter_mut().for_each(|it| it.mask.fill(false));
        let (l, g) = net.backward(&batch).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(net.backward(&[]).is_err());
    }

    fn fd_check(net: &Mlp, batch: &[LossItem]) -> f64 {
        let (_, g) = net.backward(batch).unwrap();
        let mut worst: f64 = 0.0;
        let h = 1e-5;
        for i in 0..net.n_params() {
            let mut p = net.clone();
            p.params[i] += h;
            let mut m = net.clone();
            m.params[i] -= h;
            let fd = (p.loss(batch).unwrap() - m.loss(batch).unwrap()) / (2.0 * h);
            let err = (g[i] - fd).abs() / fd.abs().max(g[i].abs()).max(1e-3);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let net = random_net(vec![3, 4, 2], if seed % 2 == 0 { Some(1.5) } else { None }, seed);
            let batch = random_batch(&net, 8, 100 + seed);
            let err = fd_check(&net, &batch);
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
        let net = random_net(vec![5, 7, 7, 4], Some(5.0), 42);
        assert!(fd_check(&net, &random_batch(&net, 6, 7)) < 1e-5);
    }

    #[test]
    fn backward_is_thread_count_independent() {
        let net = random_net(vec![5, 20, 20, 4], None, 5);
        let batch = random_batch(&net, 300, 6);
        let a = net.backward(&batch).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| net.backward(&batch).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut w = [1.0];
        let mut st = AdamState::new(1, 0.1);
        adam_step(&mut w, &mut st, &[1.0]).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-6);
        let mut z = [0.3, -0.2];
        let mut st = AdamState::new(2, 0.1);
        adam_step(&mut z, &mut st, &[0.0, 0.0]).unwrap();
        assert_eq!(z, [0.3, -0.2]);
        assert!(adam_step(&mut z, &mut st, &[0.0]).is_err());
    }

    #[test]
    fn adam_runs_are_reproducible() {
        let run = || {
            let mut net = random_net(vec![3, 4, 2], None, 9);
            let batch = random_batch(&net, 10, 1);
            let mut st = AdamState::new(net.n_params(), 1e-2);
            for _ in 0..20 {
                let (_, g) = net.backward(&batch).unwrap();
                adam_step(&mut net.params, &mut st, &g).unwrap();
            }
            net.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let mut net = random_net(vec![4, 6, 3], Some(5.0), 3);
        net.scheme = "categorical:d=3,m=1".into();
        net.time_scale = 2.5;
        net.save(&path).unwrap();
        let back = Mlp::load(&path).unwrap();
        assert_eq!(back.scheme, net.scheme);
        for (z, t) in [([0.1, 0.2, 0.3], 0.4), ([-1.0, 0.0, 2.0], 2.0)] {
            let a = net.forward(&z, t).unwrap();
            let b = back.forward(&z, t).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300) + 1e-15);
            }
        }
        let plain = random_net(vec![3, 5, 2], None, 8);
        let back = Mlp::from_text(&plain.to_text()).unwrap();
        for (a, b) in plain.params.iter().zip(&back.params) {
            assert!((a - b).abs() <= 1e-12 * a.abs());
        }
    }

    #[test]
    fn malformed_model_files() {
        let mut net = random_net(vec![3, 5, 2], None, 8);
        net.scheme = "sphere:d=2".into();
        let text = net.to_text();
        let truncated: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(matches!(Mlp::from_text(&truncated), Err(Error::Parse { .. })));
        let wrong = text.replacen(MAGIC, "FHDM-MLP v0", 1);
        assert!(matches!(Mlp::from_text(&wrong), Err(Error::Format(_))));
        let bad = text.replacen("none", "-3", 1);
        assert!(matches!(Mlp::from_text(&bad), Err(Error::Parse { line: 4, .. })));
        let mut lines: Vec<&str> = text.lines().collect();
        lines[7] = "abc";
        assert!(matches!(Mlp::from_text(&lines.join("\n")), Err(Error::Parse { line: 8, .. })));
    }

    proptest! {
        #[test]
        fn bounded_outputs_stay_inside_bound(
            z in proptest::collection::vec(-1e6f64..1e6, 3), t in -1e6f64..1e6, seed in 0u64..50
        ) {
            let mut net = random_net(vec![4, 8, 3], Some(5.0), seed);
            net.params.iter_mut().for_each(|p| *p *= 1e3);
            let out = net.forward(&z, t).unwrap();
            prop_assert!(out.iter().all(|v| v.abs() < 5.0));
        }

        #[test]
        fn loss_is_nonnegative(seed in 0u64..200) {
            let net = random_net(vec![3, 4, 2], Some(2.0), seed);
            let batch = random_batch(&net, 4, seed + 1);
            prop_assert!(net.loss(&batch).unwrap() >= 0.0);
        }
    }
}
