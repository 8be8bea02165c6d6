//! Small layer building blocks shared by the networks and mechanisms.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::Result;

/// Parameter factory. Building the same structure twice from clones of the
/// same generator yields identical values, which is how momentum copies are made.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub trainable: bool,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng, trainable: bool) -> Self {
        Self { rng, trainable }
    }

    pub fn tensor(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.trainable {
            Tensor::param(data, shape)
        } else {
            Tensor::new(data, shape)
        }
    }

    /// `rows x cols` matrix with orthonormal columns (or rows, when wide), scaled by `gain`.
    pub fn orthogonal(&mut self, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
        let (n, k) = if rows >= cols { (rows, cols) } else { (cols, rows) };
        // k vectors of length n, Gram-Schmidt orthonormalized
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
        while basis.len() < k {
            let mut v: Vec<f64> = (0..n).map(|_| self.rng.sample(StandardNormal)).collect();
            for _ in 0..2 {
                for b in &basis {
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = gain * if rows >= cols { basis[c][r] } else { basis[r][c] };
            }
        }
        out
    }

    pub fn linear(&mut self, input: usize, output: usize, gain: f64) -> Result<Linear> {
        let w = self.orthogonal(input, output, gain);
        Ok(Linear {
            weight: self.tensor(w, &[input, output])?,
            bias: self.tensor(vec![0.0; output], &[output])?,
        })
    }
}

/// Affine map over the last axis: `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add(&self.bias)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.weight.clone()));
        out.push((format!("{prefix}.b"), self.bias.clone()));
    }
}

/// Tanh MLP; the final layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(init: &mut Init, input: usize, hidden: usize, hidden_layers: usize, output: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut width = input;
        for _ in 0..hidden_layers {
            layers.push(init.linear(width, hidden, 1.0)?);
            width = hidden;
        }
        layers.push(init.linear(width, output, 1.0)?);
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i < last {
                h = h.tanh()?;
            }
        }
        Ok(h)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.params(&format!("{prefix}.{i}"), out);
        }
    }
}

/// Single-head scaled dot-product attention over per-feature tokens.
///
/// A latent `x: [B, d]` is read as `d` tokens of width 1, embedded to width
/// `h` with a learned positional table, and attended over. Outputs are
/// projected back to one value per token, so `[B, d] -> [B, d]`.
#[derive(Debug, Clone)]
pub struct TokenAttention {
    pub embed: Tensor,
    pub position: Tensor,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl TokenAttention {
    pub fn new(init: &mut Init, tokens: usize, width: usize) -> Result<Self> {
        let embed = init.orthogonal(1, width, 1.0);
        let position: Vec<f64> = (0..tokens * width)
            .map(|_| 0.1 * init.rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self {
            embed: init.tensor(embed, &[1, width])?,
            position: init.tensor(position, &[tokens, width])?,
            query: init.linear(width, width, 1.0)?,
            key: init.linear(width, width, 1.0)?,
            value: init.linear(width, width, 1.0)?,
            out: init.linear(width, 1, 1.0)?,
        })
    }

    pub fn width(&self) -> usize {
        self.embed.shape()[1]
    }

    /// `[B, d] -> [B, d, h]`
    pub fn tokens(&self, x: &Tensor) -> Result<Tensor> {
        let (b, d) = (x.shape()[0], x.shape()[1]);
        x.reshape(&[b, d, 1])?.matmul(&self.embed)?.add(&self.position)
    }

    /// Row-stochastic attention weights `[B, d, d]` of query tokens over key tokens.
    pub fn weights(&self, queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
        let k = self.key.forward(keys)?;
        let scale = 1.0 / (self.width() as f64).sqrt();
        queries.matmul(&k.transpose()?)?.scale(scale)?.softmax()
    }

    /// Projects a token-space query through the query map.
    pub fn project_query(&self, tokens: &Tensor) -> Result<Tensor> {
        self.query.forward(tokens)
    }

    /// Applies attention weights to value tokens and maps back to `[B, d]`.
    pub fn read(&self, weights: &Tensor, values: &Tensor) -> Result<Tensor> {
        let v = self.value.forward(values)?;
        let o = self.out.forward(&weights.matmul(&v)?)?;
        let (b, d) = (o.shape()[0], o.shape()[1]);
        o.reshape(&[b, d])
    }

    /// Queries from `q_src`, keys and values from `kv_src`.
    pub fn attend(&self, q_src: &Tensor, kv_src: &Tensor) -> Result<Tensor> {
        let kv = self.tokens(kv_src)?;
        let q = self.project_query(&self.tokens(q_src)?)?;
        let a = self.weights(&q, &kv)?;
        self.read(&a, &kv)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.embed"), self.embed.clone()));
        out.push((format!("{prefix}.position"), self.position.clone()));
        self.query.params(&format!("{prefix}.query"), out);
        self.key.params(&format!("{prefix}.key"), out);
        self.value.params(&format!("{prefix}.value"), out);
        self.out.params(&format!("{prefix}.out"), out);
    }
}

/// `[B, n]` tensor whose every row equals the `[n]` vector `v`.
pub fn broadcast_rows(v: &Tensor, rows: usize) -> Result<Tensor> {
    let n = v.numel();
    Tensor::new(vec![1.0; rows], &[rows, 1])?.matmul(&v.reshape(&[1, n])?)
}
