//! Layers of the causal transformer with hand-written backward passes.
//! Shapes are tiny (sequence <= 13, width 64) so everything is plain ndarray.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    /// in x out
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

impl Linear {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Linear { w: Array2::zeros((inp, out)), b: Array1::zeros(out) }
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        x.dot(&self.w) + &self.b
    }

    /// Returns dx and accumulates parameter grads into `grad`.
    pub fn backward(&self, x: &Array2<f32>, dy: &Array2<f32>, grad: &mut Linear) -> Array2<f32> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
}

pub struct LayerNormCache {
    pub xhat: Array2<f32>,
    pub inv_std: Array1<f32>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm { gamma: Array1::ones(dim), beta: Array1::zeros(dim) }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm { gamma: Array1::zeros(dim), beta: Array1::zeros(dim) }
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, LayerNormCache) {
        let (rows, d) = x.dim();
        let mut xhat = Array2::zeros((rows, d));
        let mut inv_std = Array1::zeros(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.sum() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = istd;
            for c in 0..d {
                xhat[[r, c]] = (x[[r, c]] - mean) * istd;
            }
        }
        let mut y = xhat.clone();
        for r in 0..rows {
            for c in 0..d {
                y[[r, c]] = xhat[[r, c]] * self.gamma[c] + self.beta[c];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f32>,
        grad: &mut LayerNorm,
    ) -> Array2<f32> {
        let (rows, d) = dy.dim();
        let mut dx = Array2::zeros((rows, d));
        for r in 0..rows {
            let mut g_mean = 0.0f32;
            let mut gx_mean = 0.0f32;
            for c in 0..d {
                let g = dy[[r, c]] * self.gamma[c];
                g_mean += g;
                gx_mean += g * cache.xhat[[r, c]];
                grad.gamma[c] += dy[[r, c]] * cache.xhat[[r, c]];
                grad.beta[c] += dy[[r, c]];
            }
            g_mean /= d as f32;
            gx_mean /= d as f32;
            for c in 0..d {
                let g = dy[[r, c]] * self.gamma[c];
                dx[[r, c]] = cache.inv_std[r] * (g - g_mean - cache.xhat[[r, c]] * gx_mean);
            }
        }
        dx
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    pub x: Array2<f32>,
    pub q: Array2<f32>,
    pub k: Array2<f32>,
    pub v: Array2<f32>,
    /// softmax weights per head, each S x S (lower triangular)
    pub attn: Vec<Array2<f32>>,
    pub concat: Array2<f32>,
}

impl Attention {
    /// Causal multi-head self-attention.
    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, AttentionCache) {
        let (s, d) = x.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let mut concat = Array2::zeros((s, d));
        let mut attn_all = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let col = h * dh..(h + 1) * dh;
            let mut attn = Array2::zeros((s, s));
            for i in 0..s {
                let mut max = f32::NEG_INFINITY;
                let mut scores = vec![0.0f32; i + 1];
                for j in 0..=i {
                    let mut dot = 0.0;
                    for c in col.clone() {
                        dot += q[[i, c]] * k[[j, c]];
                    }
                    let sc = dot * scale;
                    scores[j] = sc;
                    max = max.max(sc);
                }
                let mut denom = 0.0f32;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    denom += *sc;
                }
                for j in 0..=i {
                    attn[[i, j]] = scores[j] / denom;
                }
                for c in col.clone() {
                    let mut acc = 0.0;
                    for j in 0..=i {
                        acc += attn[[i, j]] * v[[j, c]];
                    }
                    concat[[i, c]] = acc;
                }
            }
            attn_all.push(attn);
        }
        let out = self.wo.forward(&concat);
        let cache = AttentionCache { x: x.clone(), q, k, v, attn: attn_all, concat };
        (out, cache)
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        dy: &Array2<f32>,
        grad: &mut Attention,
    ) -> Array2<f32> {
        let (s, d) = cache.x.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let dconcat = self.wo.backward(&cache.concat, dy, &mut grad.wo);
        let mut dq = Array2::<f32>::zeros((s, d));
        let mut dk = Array2::<f32>::zeros((s, d));
        let mut dv = Array2::<f32>::zeros((s, d));
        for h in 0..self.heads {
            let col = h * dh..(h + 1) * dh;
            let attn = &cache.attn[h];
            for i in 0..s {
                // d attn weights
                let mut dattn = vec![0.0f32; i + 1];
                for j in 0..=i {
                    let mut acc = 0.0;
                    for c in col.clone() {
                        acc += dconcat[[i, c]] * cache.v[[j, c]];
                    }
                    dattn[j] = acc;
                    for c in col.clone() {
                        dv[[j, c]] += attn[[i, j]] * dconcat[[i, c]];
                    }
                }
                // softmax backward
                let mut dot = 0.0f32;
                for j in 0..=i {
                    dot += dattn[j] * attn[[i, j]];
                }
                for j in 0..=i {
                    let dscore = attn[[i, j]] * (dattn[j] - dot) * scale;
                    for c in col.clone() {
                        dq[[i, c]] += dscore * cache.k[[j, c]];
                        dk[[j, c]] += dscore * cache.q[[i, c]];
                    }
                }
            }
        }
        let mut dx = self.wq.backward(&cache.x, &dq, &mut grad.wq);
        dx += &self.wk.backward(&cache.x, &dk, &mut grad.wk);
        dx += &self.wv.backward(&cache.x, &dv, &mut grad.wv);
        dx
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct BlockCache {
    pub x_in: Array2<f32>,
    pub ln1: LayerNormCache,
    pub ln1_out: Array2<f32>,
    pub attn: AttentionCache,
    pub x_mid: Array2<f32>,
    pub ln2: LayerNormCache,
    pub ln2_out: Array2<f32>,
    pub pre_act: Array2<f32>,
    pub act: Array2<f32>,
}

impl Block {
    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, BlockCache) {
        let (ln1_out, ln1) = self.ln1.forward(x);
        let (attn_out, attn) = self.attn.forward(&ln1_out);
        let x_mid = x + &attn_out;
        let (ln2_out, ln2) = self.ln2.forward(&x_mid);
        let pre_act = self.fc1.forward(&ln2_out);
        let act = pre_act.mapv(gelu);
        let mlp_out = self.fc2.forward(&act);
        let out = &x_mid + &mlp_out;
        let cache = BlockCache {
            x_in: x.clone(),
            ln1,
            ln1_out,
            attn,
            x_mid,
            ln2,
            ln2_out,
            pre_act,
            act,
        };
        (out, cache)
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Array2<f32>, grad: &mut Block) -> Array2<f32> {
        let dact = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        let mut dpre = dact;
        for (dp, pa) in dpre.iter_mut().zip(cache.pre_act.iter()) {
            *dp *= gelu_grad(*pa);
        }
        let dln2_out = self.fc1.backward(&cache.ln2_out, &dpre, &mut grad.fc1);
        let mut dx_mid = self.ln2.backward(&cache.ln2, &dln2_out, &mut grad.ln2);
        dx_mid += dy; // residual
        let dln1_out = self.attn.backward(&cache.attn, &dx_mid, &mut grad.attn);
        let mut dx = self.ln1.backward(&cache.ln1, &dln1_out, &mut grad.ln1);
        dx += &dx_mid; // residual
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{gaussian_matrix, rng_from_seed};

    fn seeded_linear(rng: &mut rand_chacha::ChaCha8Rng, inp: usize, out: usize) -> Linear {
        Linear {
            w: gaussian_matrix(rng, inp, out).mapv(|x| x * 0.2),
            b: gaussian_matrix(rng, 1, out).row(0).to_owned(),
        }
    }

    fn seeded_block(rng: &mut rand_chacha::ChaCha8Rng, d: usize, heads: usize) -> Block {
        Block {
            ln1: LayerNorm::new(d),
            attn: Attention {
                wq: seeded_linear(rng, d, d),
                wk: seeded_linear(rng, d, d),
                wv: seeded_linear(rng, d, d),
                wo: seeded_linear(rng, d, d),
                heads,
            },
            ln2: LayerNorm::new(d),
            fc1: seeded_linear(rng, d, d * 2),
            fc2: seeded_linear(rng, d * 2, d),
        }
    }

    /// Finite-difference check of the full block backward pass.
    #[test]
    fn block_backward_matches_finite_differences() {
        let d = 8;
        let s = 5;
        let mut rng = rng_from_seed(42);
        let block = seeded_block(&mut rng, d, 2);
        let x = gaussian_matrix(&mut rng, s, d);
        let target = gaussian_matrix(&mut rng, s, d);
        let loss = |b: &Block, x: &Array2<f32>| -> f64 {
            let (y, _) = b.forward(x);
            y.iter().zip(target.iter()).map(|(a, t)| ((a - t) as f64).powi(2)).sum()
        };
        let (y, cache) = block.forward(&x);
        let dy = (&y - &target).mapv(|v| 2.0 * v);
        let mut grad = Block {
            ln1: LayerNorm::zeros(d),
            attn: Attention {
                wq: Linear::zeros(d, d),
                wk: Linear::zeros(d, d),
                wv: Linear::zeros(d, d),
                wo: Linear::zeros(d, d),
                heads: 2,
            },
            ln2: LayerNorm::zeros(d),
            fc1: Linear::zeros(d, d * 2),
            fc2: Linear::zeros(d * 2, d),
        };
        let dx = block.backward(&cache, &dy, &mut grad);

        let h = 1e-3f32;
        // input gradient
        for idx in [(0usize, 0usize), (2, 3), (4, 7)] {
            let mut xp = x.clone();
            xp[[idx.0, idx.1]] += h;
            let mut xm = x.clone();
            xm[[idx.0, idx.1]] -= h;
            let num = (loss(&block, &xp) - loss(&block, &xm)) / (2.0 * h as f64);
            let ana = dx[[idx.0, idx.1]] as f64;
            assert!((num - ana).abs() < 2e-2 * (1.0 + ana.abs()), "dx at {idx:?}: {num} vs {ana}");
        }
        // a few parameter gradients across layer types
        let check_param = |get: &dyn Fn(&mut Block) -> &mut f32, ana: f64| {
            let mut bp = block.clone();
            *get(&mut bp) += h;
            let mut bm = block.clone();
            *get(&mut bm) -= h;
            let num = (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * h as f64);
            assert!((num - ana).abs() < 2e-2 * (1.0 + ana.abs()), "param grad: {num} vs {ana}");
        };
        check_param(&|b| &mut b.attn.wq.w[[1, 2]], grad.attn.wq.w[[1, 2]] as f64);
        check_param(&|b| &mut b.attn.wo.b[3], grad.attn.wo.b[3] as f64);
        check_param(&|b| &mut b.fc1.w[[0, 5]], grad.fc1.w[[0, 5]] as f64);
        check_param(&|b| &mut b.fc2.w[[9, 1]], grad.fc2.w[[9, 1]] as f64);
        check_param(&|b| &mut b.ln1.gamma[4], grad.ln1.gamma[4] as f64);
        check_param(&|b| &mut b.ln2.beta[6], grad.ln2.beta[6] as f64);
    }

    #[test]
    fn attention_is_causal() {
        let d = 8;
        let s = 6;
        let mut rng = rng_from_seed(5);
        let block = seeded_block(&mut rng, d, 2);
        let x = gaussian_matrix(&mut rng, s, d);
        let (y, _) = block.forward(&x);
        let mut x2 = x.clone();
        // perturb the last token; earlier outputs must not move
        for c in 0..d {
            x2[[s - 1, c]] += 1.0;
        }
        let (y2, _) = block.forward(&x2);
        for i in 0..s - 1 {
            for c in 0..d {
                assert_eq!(y[[i, c]], y2[[i, c]]);
            }
        }
    }

    #[test]
    fn layernorm_rows_standardized() {
        let ln = LayerNorm::new(6);
        let mut rng = rng_from_seed(1);
        let x = gaussian_matrix(&mut rng, 3, 6).mapv(|v| v * 3.0 + 1.0);
        let (y, _) = ln.forward(&x);
        for r in 0..3 {
            let mean = y.row(r).sum() / 6.0;
            let var = y.row(r).iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 6.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
