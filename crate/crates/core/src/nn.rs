//! Transformer building blocks on top of the tape: dense layers, pre-norm
//! ViT blocks, single-query attentive pooling, and a finite-difference
//! gradient checker.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamGrads, ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;

pub fn xavier<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Vec<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| T::of(rng.gen_range(-a..a))).collect()
}

pub fn gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::of(dist.sample(rng))).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in, fan_out, xavier(rng, fan_in, fan_out));
        let bias = store.zeros(format!("{name}.bias"), 1, fan_out);
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.filled(format!("{name}.gain"), 1, width, T::one()),
            bias: store.zeros(format!("{name}.bias"), 1, width),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `h + MLP(LN(h))`
/// with a 4x GELU MLP. Matrix multiplies per block: `12 L C² + 2 L² C`.
#[derive(Debug, Clone)]
pub struct Block {
    pub width: usize,
    pub heads: usize,
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "width must be divisible by heads");
        Self {
            width,
            heads,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            query: Linear::new(store, &format!("{name}.attn.q"), width, width, rng),
            key: Linear::new(store, &format!("{name}.attn.k"), width, width, rng),
            value: Linear::new(store, &format!("{name}.attn.v"), width, width, rng),
            out: Linear::new(store, &format!("{name}.attn.o"), width, width, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), width, 4 * width, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), 4 * width, width, rng),
        }
    }

    pub fn attention<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let q = self.query.forward(tape, x);
        let k = self.key.forward(tape, x);
        let v = self.value.forward(tape, x);
        let d = self.width / self.heads;
        let scale = T::one() / T::of_usize(d).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                tape.slice_cols(q, h * d, d),
                tape.slice_cols(k, h * d, d),
                tape.slice_cols(v, h * d, d),
            );
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.out.forward(tape, merged)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let n1 = self.norm1.forward(tape, x);
        let a = self.attention(tape, n1);
        let h = tape.add(x, a);
        let n2 = self.norm2.forward(tape, h);
        let f = self.fc1.forward(tape, n2);
        let f = tape.gelu(f);
        let f = self.fc2.forward(tape, f);
        tape.add(h, f)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.norm1.params(), self.query.params(), self.key.params(), self.value.params()]
            .into_iter()
            .chain([self.out.params(), self.norm2.params(), self.fc1.params(), self.fc2.params()])
            .flatten()
            .collect()
    }
}

/// Stack of blocks followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub norm: Option<LayerNorm>,
}

impl Stack {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        depth: usize,
        width: usize,
        heads: usize,
        final_norm: bool,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..depth).map(|i| Block::new(store, &format!("{name}.blocks.{i}"), width, heads, rng)).collect();
        let norm = final_norm.then(|| LayerNorm::new(store, &format!("{name}.norm"), width));
        Self { blocks, norm }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, mut x: Var) -> Var {
        for b in &self.blocks {
            x = b.forward(tape, x);
        }
        match &self.norm {
            Some(n) => n.forward(tape, x),
            None => x,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.blocks.iter().flat_map(Block::params).collect();
        if let Some(n) = &self.norm {
            p.extend(n.params());
        }
        p
    }
}

/// Cross-attention of one learned query over a token set, followed by a
/// value projection.
#[derive(Debug, Clone, Copy)]
pub struct AttentivePool {
    pub width: usize,
    pub query: ParamId,
    pub value: Linear,
}

impl AttentivePool {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            width,
            query: store.add(format!("{name}.query"), 1, width, gaussian(rng, width, 0.02)),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
        }
    }

    /// `[L x C] -> [1 x C]`
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var) -> Var {
        let q = tape.param(self.query);
        let scores = tape.matmul_nt(q, tokens);
        let scores = tape.scale(scores, T::one() / T::of_usize(self.width).sqrt());
        let attn = tape.softmax_rows(scores);
        let pooled = tape.matmul(attn, tokens);
        self.value.forward(tape, pooled)
    }

    /// Pools `K` aligned token sets position-wise: every input is `[R x C]`
    /// and row `r` of the output pools row `r` of all inputs.
    pub fn forward_rows<T: Scalar>(&self, tape: &mut Tape<'_, T>, sets: &[Var]) -> Var {
        let q = tape.param(self.query);
        let scale = T::one() / T::of_usize(self.width).sqrt();
        let scores: Vec<Var> = sets.iter().map(|&s| tape.matmul_nt(s, q)).collect();
        let scores = if scores.len() == 1 { scores[0] } else { tape.concat_cols(&scores) };
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        let mut pooled = None;
        for (k, &s) in sets.iter().enumerate() {
            let w = tape.slice_cols(attn, k, 1);
            let part = tape.scale_rows(s, w);
            pooled = Some(match pooled {
                None => part,
                Some(p) => tape.add(p, part),
            });
        }
        let pooled = pooled.expect("at least one token set");
        self.value.forward(tape, pooled)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.query];
        p.extend(self.value.params());
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Absolute floor under the relative-error denominator, so entries whose
/// true gradient is numerically zero do not dominate the report.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Central-difference check of the analytic gradient returned by `f`.
/// Checks at most `per_param` evenly spaced entries of every parameter.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, h: f64, per_param: usize) -> GradCheckReport
where
    F: Fn(&ParamStore<f64>) -> (f64, ParamGrads<f64>),
{
    let (_, analytic) = f(store);
    let mut probe = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_param: String::new(), worst_index: 0, checked: 0 };
    for id in store.ids() {
        let len = store.get(id).data.len();
        let stride = (len / per_param.max(1)).max(1);
        for i in (0..len).step_by(stride).take(per_param) {
            let orig = store.get(id).data[i];
            probe.get_mut(id).data[i] = orig + h;
            let (up, _) = f(&probe);
            probe.get_mut(id).data[i] = orig - h;
            let (down, _) = f(&probe);
            probe.get_mut(id).data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = i;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(t: &mut Tape<'_, f64>, rows: usize, cols: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        t.constant(rows, cols, v)
    }

    #[test]
    fn zero_block_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = Block::new(&mut store, "b", 8, 2, &mut rng);
        for e in store.entries_mut() {
            e.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut t = Tape::new(&store);
        let x = random_input(&mut t, 3, 8, 2);
        let y = block.forward(&mut t, x);
        assert_eq!(t.value(x), t.value(y));
    }

    #[test]
    fn block_multiply_count_matches_formula() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (l, c) = (5u64, 12u64);
        let block = Block::new(&mut store, "b", c as usize, 3, &mut rng);
        let mut t = Tape::new(&store);
        let x = random_input(&mut t, l as usize, c as usize, 3);
        block.forward(&mut t, x);
        assert_eq!(t.total_mults(), 12 * l * c * c + 2 * l * l * c);
    }

    #[test]
    fn single_token_block_is_finite() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = Block::new(&mut store, "b", 8, 2, &mut rng);
        let mut t = Tape::new(&store);
        let x = random_input(&mut t, 1, 8, 5);
        let y = block.forward(&mut t, x);
        assert!(t.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = Block::new(&mut store, "b", 8, 2, &mut rng);
        let f = |s: &ParamStore<f64>| {
            let mut t = Tape::new(s);
            let x = random_input(&mut t, 4, 8, 10);
            let y = block.forward(&mut t, x);
            let w = random_input(&mut t, 4, 8, 11);
            let p = t.mul(y, w);
            let loss = t.sum(p);
            (t.scalar(loss), t.backward(loss))
        };
        let r = grad_check(&store, f, 1e-5, 16);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn pool_of_single_token_is_value_projection() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pool = AttentivePool::new(&mut store, "p", 6, &mut rng);
        let mut t = Tape::new(&store);
        let x = random_input(&mut t, 1, 6, 3);
        let y = pool.forward(&mut t, x);
        let direct = pool.value.forward(&mut t, x);
        for (a, b) in t.value(y).iter().zip(t.value(direct)) {
            assert!((a - b).abs() < 1e-12);
        }
        let xx = t.concat_rows(&[x, x]);
        let yy = pool.forward(&mut t, xx);
        for (a, b) in t.value(y).iter().zip(t.value(yy)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_detects_corrupted_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", 1, 2, vec![0.5, -1.5]);
        let exact = |s: &ParamStore<f64>| {
            let mut t = Tape::new(s);
            let x = t.param(a);
            let sq = t.mul(x, x);
            let loss = t.sum(sq);
            (t.scalar(loss), t.backward(loss))
        };
        assert!(grad_check(&store, exact, 1e-5, 4).max_rel_error < 1e-9);
        let corrupted = |s: &ParamStore<f64>| {
            let (v, mut g) = exact(s);
            g.grads[0].as_mut().unwrap()[1] *= 1.01;
            (v, g)
        };
        assert!(grad_check(&store, corrupted, 1e-5, 4).max_rel_error > 1e-3);
    }
}
