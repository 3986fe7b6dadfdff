//! Transformer building blocks with explicit forward caches and hand-written
//! backward passes. Activations are packed `(batch * tokens) x dim` matrices;
//! attention is the only place that needs the (batch, tokens) factorization.

use ndarray::{Array1, Array2, Axis, s};
use rand_chacha::ChaCha8Rng;

use crate::nn::{Init, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Linear {
        let w = store.add(&format!("{name}.w"), &[in_dim, out_dim], Init::Normal(0.02), rng);
        let b = store.add(&format!("{name}.b"), &[out_dim], Init::Zeros, rng);
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&store.view2(self.w));
        let b = store.view1(self.b);
        for mut row in y.rows_mut() {
            row += &b;
        }
        y
    }

    /// Accumulates dW and db, returns dx.
    pub fn backward(&self, store: &mut ParamStore, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        let dx = dy.dot(&store.view2(self.w).t());
        let dw = x.t().dot(dy);
        let db = dy.sum_axis(Axis(0));
        store.accum_grad(self.w, dw.as_slice().expect("contiguous"));
        store.accum_grad(self.b, db.as_slice().expect("contiguous"));
        dx
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
    pub eps: f64,
}

pub struct LnCache {
    mean: Array1<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> LayerNorm {
        let g = store.add(&format!("{name}.g"), &[dim], Init::Ones, rng);
        let b = store.add(&format!("{name}.b"), &[dim], Init::Zeros, rng);
        LayerNorm { g, b, eps: 1e-5 }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let n = x.nrows();
        let d = x.ncols() as f64;
        let mut mean = Array1::zeros(n);
        let mut rstd = Array1::zeros(n);
        let mut y = x.clone();
        let gain = store.view1(self.g);
        let bias = store.view1(self.b);
        for (i, mut row) in y.rows_mut().into_iter().enumerate() {
            let m = row.sum() / d;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d;
            let r = 1.0 / (var + self.eps).sqrt();
            mean[i] = m;
            rstd[i] = r;
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - m) * r * gain[j] + bias[j];
            }
        }
        (y, LnCache { mean, rstd })
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        x: &Array2<f64>,
        cache: &LnCache,
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let n = x.nrows();
        let d = x.ncols();
        let df = d as f64;
        let gain = store.view1(self.g).to_owned();
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        let mut dx = Array2::zeros((n, d));
        for i in 0..n {
            let m = cache.mean[i];
            let r = cache.rstd[i];
            let xr = x.row(i);
            let dyr = dy.row(i);
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for j in 0..d {
                let xhat = (xr[j] - m) * r;
                let dxhat = dyr[j] * gain[j];
                dg[j] += dyr[j] * xhat;
                db[j] += dyr[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            for j in 0..d {
                let xhat = (xr[j] - m) * r;
                let dxhat = dyr[j] * gain[j];
                dx[[i, j]] = r * (dxhat - sum_dxhat / df - xhat * sum_dxhat_xhat / df);
            }
        }
        store.accum_grad(self.g, &dg);
        store.accum_grad(self.b, &db);
        dx
    }
}

const GELU_K: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_K * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    hidden_pre: Array2<f64>,
    hidden_act: Array2<f64>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Mlp {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let hidden_pre = self.fc1.forward(store, x);
        let hidden_act = hidden_pre.mapv(gelu);
        let y = self.fc2.forward(store, &hidden_act);
        (y, MlpCache { hidden_pre, hidden_act })
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        x: &Array2<f64>,
        cache: &MlpCache,
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let dact = self.fc2.backward(store, &cache.hidden_act, dy);
        let dpre = &dact * &cache.hidden_pre.mapv(gelu_grad);
        self.fc1.backward(store, x, &dpre)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttnCache {
    qkv_out: Array2<f64>,
    /// Softmax matrices, one per (sample, head) in row-major order.
    attn: Vec<Array2<f64>>,
    concat: Array2<f64>,
    batch: usize,
    tokens: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Attention {
        assert_eq!(dim % heads, 0, "dim must be divisible by heads");
        Attention {
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim),
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Array2<f64>,
        batch: usize,
        tokens: usize,
    ) -> (Array2<f64>, AttnCache) {
        debug_assert_eq!(x.nrows(), batch * tokens);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv_out = self.qkv.forward(store, x);
        let mut concat = Array2::zeros((batch * tokens, self.dim));
        let mut attn = Vec::with_capacity(batch * self.heads);
        for s in 0..batch {
            let rows = s * tokens..(s + 1) * tokens;
            for h in 0..self.heads {
                let q = qkv_out.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = qkv_out.slice(s![rows.clone(), self.dim + h * dh..self.dim + (h + 1) * dh]);
                let v = qkv_out
                    .slice(s![rows.clone(), 2 * self.dim + h * dh..2 * self.dim + (h + 1) * dh]);
                let mut scores = q.dot(&k.t());
                scores *= scale;
                softmax_rows(&mut scores);
                let ctx = scores.dot(&v);
                concat
                    .slice_mut(s![rows.clone(), h * dh..(h + 1) * dh])
                    .assign(&ctx);
                attn.push(scores);
            }
        }
        let y = self.proj.forward(store, &concat);
        (
            y,
            AttnCache {
                qkv_out,
                attn,
                concat,
                batch,
                tokens,
            },
        )
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        x: &Array2<f64>,
        cache: &AttnCache,
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dconcat = self.proj.backward(store, &cache.concat, dy);
        let mut dqkv = Array2::zeros((cache.batch * cache.tokens, 3 * self.dim));
        for s in 0..cache.batch {
            let rows = s * cache.tokens..(s + 1) * cache.tokens;
            for h in 0..self.heads {
                let a = &cache.attn[s * self.heads + h];
                let q = cache
                    .qkv_out
                    .slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = cache
                    .qkv_out
                    .slice(s![rows.clone(), self.dim + h * dh..self.dim + (h + 1) * dh]);
                let v = cache
                    .qkv_out
                    .slice(s![rows.clone(), 2 * self.dim + h * dh..2 * self.dim + (h + 1) * dh]);
                let dctx = dconcat.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let dattn = dctx.dot(&v.t());
                let dv = a.t().dot(&dctx);
                // softmax backward per row, then the 1/sqrt(dh) scale
                let mut dscores = Array2::zeros(a.raw_dim());
                for i in 0..a.nrows() {
                    let arow = a.row(i);
                    let drow = dattn.row(i);
                    let dot = arow.iter().zip(drow.iter()).map(|(p, d)| p * d).sum::<f64>();
                    for j in 0..a.ncols() {
                        dscores[[i, j]] = arow[j] * (drow[j] - dot) * scale;
                    }
                }
                let dq = dscores.dot(&k);
                let dk = dscores.t().dot(&q);
                dqkv.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh])
                    .assign(&dq);
                dqkv.slice_mut(s![rows.clone(), self.dim + h * dh..self.dim + (h + 1) * dh])
                    .assign(&dk);
                dqkv.slice_mut(s![rows.clone(), 2 * self.dim + h * dh..2 * self.dim + (h + 1) * dh])
                    .assign(&dv);
            }
        }
        self.qkv.backward(store, x, &dqkv)
    }
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// One pre-norm transformer block: x + attn(ln1(x)), then + mlp(ln2(.)).
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

pub struct BlockCache {
    x: Array2<f64>,
    n1: Array2<f64>,
    ln1c: LnCache,
    attnc: AttnCache,
    x1: Array2<f64>,
    n2: Array2<f64>,
    ln2c: LnCache,
    mlpc: MlpCache,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: f64,
    ) -> Block {
        let hidden = ((dim as f64) * mlp_ratio).round() as usize;
        Block {
            ln1: LayerNorm::new(store, rng, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(store, rng, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, hidden),
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: Array2<f64>,
        batch: usize,
        tokens: usize,
    ) -> (Array2<f64>, BlockCache) {
        let (n1, ln1c) = self.ln1.forward(store, &x);
        let (a, attnc) = self.attn.forward(store, &n1, batch, tokens);
        let x1 = &x + &a;
        let (n2, ln2c) = self.ln2.forward(store, &x1);
        let (m, mlpc) = self.mlp.forward(store, &n2);
        let y = &x1 + &m;
        (
            y,
            BlockCache {
                x,
                n1,
                ln1c,
                attnc,
                x1,
                n2,
                ln2c,
                mlpc,
            },
        )
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &BlockCache, dy: &Array2<f64>) -> Array2<f64> {
        let dn2 = self.mlp.backward(store, &cache.n2, &cache.mlpc, dy);
        let dx1 = dy + &self.ln2.backward(store, &cache.x1, &cache.ln2c, &dn2);
        let dn1 = self.attn.backward(store, &cache.n1, &cache.attnc, &dx1);
        &dx1 + &self.ln1.backward(store, &cache.x, &cache.ln1c, &dn1)
    }
}

/// A stack of blocks sharing one (batch, tokens) packing.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub blocks: Vec<Block>,
}

pub struct TrunkCache {
    blocks: Vec<BlockCache>,
}

impl Trunk {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: f64,
    ) -> Trunk {
        let blocks = (0..depth)
            .map(|i| Block::new(store, rng, &format!("{name}.block{i}"), dim, heads, mlp_ratio))
            .collect();
        Trunk { blocks }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        mut x: Array2<f64>,
        batch: usize,
        tokens: usize,
    ) -> (Array2<f64>, TrunkCache) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(store, x, batch, tokens);
            caches.push(cache);
            x = y;
        }
        (x, TrunkCache { blocks: caches })
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &TrunkCache, dy: &Array2<f64>) -> Array2<f64> {
        let mut d = dy.clone();
        for (block, c) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            d = block.backward(store, c, &d);
        }
        d
    }

    /// Inference-time forward that rejects non-finite activations, naming
    /// the offending block.
    pub fn forward_checked(
        &self,
        store: &ParamStore,
        mut x: Array2<f64>,
        batch: usize,
        tokens: usize,
        layer_prefix: &str,
    ) -> crate::error::Result<Array2<f64>> {
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, _) = block.forward(store, x, batch, tokens);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(crate::error::Error::NonFiniteActivation {
                    layer: format!("{layer_prefix}.block{i}"),
                    index: i,
                });
            }
            x = y;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdamW;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite difference over every parameter and every input
    /// element of a scalar loss built from the layer output.
    fn check_grads<F>(store: &mut ParamStore, x: &Array2<f64>, forward: F)
    where
        F: Fn(&ParamStore, &Array2<f64>) -> Array2<f64>,
    {
        let weights: Array2<f64> =
            Array2::from_shape_fn(forward(store, x).raw_dim(), |(i, j)| {
                ((i * 7 + j * 3) % 5) as f64 * 0.25 - 0.5
            });
        let loss = |st: &ParamStore, input: &Array2<f64>| (&forward(st, input) * &weights).sum();

        // analytic: caller-specific backward is driven outside; here we only
        // FD-check by perturbing the flat parameter buffer.
        let h = 1e-5;
        let base_params = store.values().to_vec();
        let analytic_grads = store.grads_all().to_vec();
        for idx in 0..base_params.len() {
            store.values_mut()[idx] = base_params[idx] + h;
            let lp = loss(store, x);
            store.values_mut()[idx] = base_params[idx] - h;
            let lm = loss(store, x);
            store.values_mut()[idx] = base_params[idx];
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic_grads[idx];
            let tol = 1e-6 + 1e-5 * fd.abs().max(an.abs());
            assert!(
                (fd - an).abs() <= tol,
                "param {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "lin", 4, 3);
        let x = rand_matrix(&mut rng, 5, 4);
        let weights = Array2::from_shape_fn((5, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.25 - 0.5);
        let y = lin.forward(&store, &x);
        let dy = weights.clone();
        let _ = lin.backward(&mut store, &x, &dy);
        check_grads(&mut store, &x, |st, input| lin.forward(st, input));
        let _ = y;
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, &mut rng, "ln", 6);
        // non-trivial gain
        let gains: Vec<f64> = (0..6).map(|i| 0.5 + 0.1 * i as f64).collect();
        store.set_by_name("ln.g", &gains).unwrap();
        let x = rand_matrix(&mut rng, 4, 6);
        let (_, cache) = ln.forward(&store, &x);
        let weights = Array2::from_shape_fn((4, 6), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.25 - 0.5);
        let _ = ln.backward(&mut store, &x, &cache, &weights);
        check_grads(&mut store, &x, |st, input| ln.forward(st, input).0);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, &mut rng, "b", 8, 2, 2.0);
        let x = rand_matrix(&mut rng, 6, 8); // 2 samples x 3 tokens
        let weights = Array2::from_shape_fn((6, 8), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.25 - 0.5);
        let (_, cache) = block.forward(&store, x.clone(), 2, 3);
        let _ = block.backward(&mut store, &cache, &weights);
        check_grads(&mut store, &x, |st, input| {
            st_forward_block(&block, st, input)
        });
    }

    fn st_forward_block(block: &Block, st: &ParamStore, input: &Array2<f64>) -> Array2<f64> {
        block.forward(st, input.clone(), 2, 3).0
    }

    #[test]
    fn attention_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, &mut rng, "a", 4, 2);
        let x = rand_matrix(&mut rng, 4, 4); // 2 samples x 2 tokens
        let weights = Array2::from_shape_fn((4, 4), |(i, j)| ((i + j) % 3) as f64 - 1.0);
        let (_, cache) = attn.forward(&store, &x, 2, 2);
        let dx = attn.backward(&mut store, &x, &cache, &weights);
        let h = 1e-5;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let lp = (&attn.forward(&store, &xp, 2, 2).0 * &weights).sum();
                xp[[i, j]] -= 2.0 * h;
                let lm = (&attn.forward(&store, &xp, 2, 2).0 * &weights).sum();
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - dx[[i, j]]).abs() <= 1e-6 + 1e-5 * fd.abs().max(dx[[i, j]].abs()),
                    "input ({i},{j}): fd {fd} vs {}",
                    dx[[i, j]]
                );
            }
        }
    }

    #[test]
    fn trunk_trains_toward_a_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let trunk = Trunk::new(&mut store, &mut rng, "t", 4, 1, 2, 2.0);
        let x = rand_matrix(&mut rng, 4, 4);
        let target = rand_matrix(&mut rng, 4, 4);
        let mut opt = AdamW::new(store.len(), 0.9, 0.999, 1e-8);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..60 {
            store.zero_grads();
            let (y, cache) = trunk.forward(&store, x.clone(), 2, 2);
            let diff = &y - &target;
            last = diff.mapv(|v| v * v).sum() / (diff.len() as f64);
            first.get_or_insert(last);
            let dy = diff.mapv(|v| 2.0 * v / diff.len() as f64);
            let _ = trunk.backward(&mut store, &cache, &dy);
            opt.step(&mut store, 1e-2, 0.0);
        }
        assert!(last < first.unwrap() * 0.5, "loss {last} vs {}", first.unwrap());
    }
}
