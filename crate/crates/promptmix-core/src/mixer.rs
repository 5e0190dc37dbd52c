//! The five attribute-composition strategies that fold one soft prompt per
//! attribute into a single mixed prompt, plus analytic gradients for the
//! learnable variants.
//!
//! Attention and bottleneck mixing score each attribute, normalize the
//! scores (parameter-free LayerNorm, then temperature softmax), and emit a
//! weighted sum of the full prompt matrices, so the mixed prompt keeps its
//! token structure. The scalar score per attribute is the mean over the
//! d-vector produced by the strategy's projection.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epsilon inside the LayerNorm standard deviation.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixStrategy {
    Concat,
    Pooling,
    Attention,
    Bottleneck,
    Convolution,
}

impl std::fmt::Display for MixStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MixStrategy::Concat => "concat",
            MixStrategy::Pooling => "pooling",
            MixStrategy::Attention => "attention",
            MixStrategy::Bottleneck => "bottleneck",
            MixStrategy::Convolution => "convolution",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for MixStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(MixStrategy::Concat),
            "pooling" => Ok(MixStrategy::Pooling),
            "attention" => Ok(MixStrategy::Attention),
            "bottleneck" => Ok(MixStrategy::Bottleneck),
            "convolution" => Ok(MixStrategy::Convolution),
            other => Err(Error::Argument(format!("unknown mixer strategy '{other}'"))),
        }
    }
}

/// Learnable (and fixed) parameters of one mixing strategy.
///
/// The temperature is a fixed hyperparameter: it shapes the softmax but
/// receives no gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum MixerParams {
    Concat,
    Pooling,
    Attention {
        /// (d × d) query projection.
        w_q: Array2<f64>,
        temperature: f64,
    },
    Bottleneck {
        /// (d × b) down-projection, applied transposed.
        w_down: Array2<f64>,
        /// (b × d) up-projection, applied transposed.
        w_up: Array2<f64>,
        temperature: f64,
    },
    Convolution {
        /// (channels × n_max × k × k) first conv kernel.
        conv1_w: Array4<f64>,
        conv1_b: Array1<f64>,
        /// (1 × channels × k × k) second conv kernel.
        conv2_w: Array4<f64>,
        conv2_b: Array1<f64>,
        /// Attribute slots the input volume is zero-padded to.
        n_max: usize,
    },
}

/// Sizing knobs for parameter initialization. Values unset fall back to the
/// documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixerHyper {
    pub temperature: f64,
    /// Bottleneck width; default floor(d/4), at least 1.
    pub bottleneck_width: Option<usize>,
    pub conv_channels: usize,
    /// Odd kernel size, same-padding.
    pub kernel_size: usize,
    pub n_max: usize,
}

impl Default for MixerHyper {
    fn default() -> Self {
        MixerHyper {
            temperature: 1.0,
            bottleneck_width: None,
            conv_channels: 16,
            kernel_size: 3,
            n_max: 8,
        }
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

impl MixerParams {
    /// Fresh parameters for `strategy`, uniform in ±1/√fan_in, biases zero,
    /// fully determined by `seed`.
    pub fn init(
        strategy: MixStrategy,
        embed_dim: usize,
        hyper: &MixerHyper,
        seed: u64,
    ) -> Result<MixerParams> {
        if embed_dim == 0 {
            return Err(Error::Parameter("embed_dim must be positive".into()));
        }
        if hyper.temperature <= 0.0 || !hyper.temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {}",
                hyper.temperature
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = embed_dim;
        match strategy {
            MixStrategy::Concat => Ok(MixerParams::Concat),
            MixStrategy::Pooling => Ok(MixerParams::Pooling),
            MixStrategy::Attention => {
                let w_q = Array2::from_shape_vec((d, d), uniform_tensor(&mut rng, d * d, d))
                    .expect("shape matches length");
                Ok(MixerParams::Attention { w_q, temperature: hyper.temperature })
            }
            MixStrategy::Bottleneck => {
                let b = hyper.bottleneck_width.unwrap_or_else(|| (d / 4).max(1));
                if b >= d {
                    return Err(Error::Parameter(format!(
                        "bottleneck width {b} must be smaller than embed_dim {d}"
                    )));
                }
                let w_down = Array2::from_shape_vec((d, b), uniform_tensor(&mut rng, d * b, d))
                    .expect("shape matches length");
                let w_up = Array2::from_shape_vec((b, d), uniform_tensor(&mut rng, b * d, b))
                    .expect("shape matches length");
                Ok(MixerParams::Bottleneck { w_down, w_up, temperature: hyper.temperature })
            }
            MixStrategy::Convolution => {
                let c = hyper.conv_channels;
                let k = hyper.kernel_size;
                let n_max = hyper.n_max;
                if c == 0 || n_max == 0 {
                    return Err(Error::Parameter("conv_channels and n_max must be positive".into()));
                }
                if k % 2 == 0 || k == 0 {
                    return Err(Error::Parameter(format!("kernel_size must be odd, got {k}")));
                }
                let conv1_w = Array4::from_shape_vec(
                    (c, n_max, k, k),
                    uniform_tensor(&mut rng, c * n_max * k * k, n_max * k * k),
                )
                .expect("shape matches length");
                let conv2_w = Array4::from_shape_vec(
                    (1, c, k, k),
                    uniform_tensor(&mut rng, c * k * k, c * k * k),
                )
                .expect("shape matches length");
                Ok(MixerParams::Convolution {
                    conv1_w,
                    conv1_b: Array1::zeros(c),
                    conv2_w,
                    conv2_b: Array1::zeros(1),
                    n_max,
                })
            }
        }
    }

    pub fn strategy(&self) -> MixStrategy {
        match self {
            MixerParams::Concat => MixStrategy::Concat,
            MixerParams::Pooling => MixStrategy::Pooling,
            MixerParams::Attention { .. } => MixStrategy::Attention,
            MixerParams::Bottleneck { .. } => MixStrategy::Bottleneck,
            MixerParams::Convolution { .. } => MixStrategy::Convolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn finite(name: &str, mut it: impl Iterator<Item = f64>) -> Result<()> {
            if it.any(|v| !v.is_finite()) {
                return Err(Error::Parameter(format!("{name} contains non-finite entries")));
            }
            Ok(())
        }
        match self {
            MixerParams::Concat | MixerParams::Pooling => Ok(()),
            MixerParams::Attention { w_q, temperature } => {
                if *temperature <= 0.0 {
                    return Err(Error::Parameter("temperature must be positive".into()));
                }
                if w_q.nrows() != w_q.ncols() {
                    return Err(Error::Parameter("w_q must be square".into()));
                }
                finite("w_q", w_q.iter().copied())
            }
            MixerParams::Bottleneck { w_down, w_up, temperature } => {
                if *temperature <= 0.0 {
                    return Err(Error::Parameter("temperature must be positive".into()));
                }
                let (d, b) = w_down.dim();
                if w_up.dim() != (b, d) {
                    return Err(Error::Parameter(format!(
                        "w_up shape {:?} does not mirror w_down shape {:?}",
                        w_up.dim(),
                        w_down.dim()
                    )));
                }
                if b >= d {
                    return Err(Error::Parameter(format!(
                        "bottleneck width {b} must be smaller than embed_dim {d}"
                    )));
                }
                finite("w_down", w_down.iter().copied())?;
                finite("w_up", w_up.iter().copied())
            }
            MixerParams::Convolution { conv1_w, conv1_b, conv2_w, conv2_b, n_max } => {
                let (c, cin, kh, kw) = conv1_w.dim();
                if cin != *n_max {
                    return Err(Error::Parameter(format!(
                        "conv1 input channels {cin} must equal n_max {n_max}"
                    )));
                }
                if conv2_w.dim() != (1, c, kh, kw) {
                    return Err(Error::Parameter("conv2 shape does not chain after conv1".into()));
                }
                if conv1_b.len() != c || conv2_b.len() != 1 {
                    return Err(Error::Parameter("conv bias lengths do not match kernels".into()));
                }
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::Parameter("conv kernels must have odd size".into()));
                }
                finite("conv1_w", conv1_w.iter().copied())?;
                finite("conv2_w", conv2_w.iter().copied())?;
                finite("conv1_b", conv1_b.iter().copied())?;
                finite("conv2_b", conv2_b.iter().copied())
            }
        }
    }

    /// Learnable tensors as named mutable slices, for the optimizer.
    /// Temperature and n_max are not learnable and are not listed.
    pub fn tensor_slices_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            MixerParams::Concat | MixerParams::Pooling => Vec::new(),
            MixerParams::Attention { w_q, .. } => {
                vec![("mixer:w_q", w_q.as_slice_mut().expect("standard layout"))]
            }
            MixerParams::Bottleneck { w_down, w_up, .. } => vec![
                ("mixer:w_down", w_down.as_slice_mut().expect("standard layout")),
                ("mixer:w_up", w_up.as_slice_mut().expect("standard layout")),
            ],
            MixerParams::Convolution { conv1_w, conv1_b, conv2_w, conv2_b, .. } => vec![
                ("mixer:conv1_w", conv1_w.as_slice_mut().expect("standard layout")),
                ("mixer:conv1_b", conv1_b.as_slice_mut().expect("standard layout")),
                ("mixer:conv2_w", conv2_w.as_slice_mut().expect("standard layout")),
                ("mixer:conv2_b", conv2_b.as_slice_mut().expect("standard layout")),
            ],
        }
    }
}

/// Output of a mixing strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedPrompt {
    /// (20n × d) for concat, (20 × d) for every other strategy.
    pub matrix: Array2<f64>,
    /// Per-attribute softmax weights; attention and bottleneck only.
    pub attention_weights: Option<Vec<f64>>,
}

/// Gradients of a scalar loss with respect to mixer parameters.
#[derive(Debug, Clone)]
pub enum MixerParamGrads {
    None,
    Attention { w_q: Array2<f64> },
    Bottleneck { w_down: Array2<f64>, w_up: Array2<f64> },
    Convolution {
        conv1_w: Array4<f64>,
        conv1_b: Array1<f64>,
        conv2_w: Array4<f64>,
        conv2_b: Array1<f64>,
    },
}

impl MixerParamGrads {
    pub fn tensor_slices(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            MixerParamGrads::None => Vec::new(),
            MixerParamGrads::Attention { w_q } => {
                vec![("mixer:w_q", w_q.as_slice().expect("standard layout"))]
            }
            MixerParamGrads::Bottleneck { w_down, w_up } => vec![
                ("mixer:w_down", w_down.as_slice().expect("standard layout")),
                ("mixer:w_up", w_up.as_slice().expect("standard layout")),
            ],
            MixerParamGrads::Convolution { conv1_w, conv1_b, conv2_w, conv2_b } => vec![
                ("mixer:conv1_w", conv1_w.as_slice().expect("standard layout")),
                ("mixer:conv1_b", conv1_b.as_slice().expect("standard layout")),
                ("mixer:conv2_w", conv2_w.as_slice().expect("standard layout")),
                ("mixer:conv2_b", conv2_b.as_slice().expect("standard layout")),
            ],
        }
    }
}

/// Gradients flowing out of [`mixer_backward`]: one matrix per input prompt
/// plus parameter gradients for the learnable strategies.
#[derive(Debug, Clone)]
pub struct MixerGrads {
    pub prompts: Vec<Array2<f64>>,
    pub params: MixerParamGrads,
}

fn check_prompts(prompts: &[&Array2<f64>]) -> Result<(usize, usize)> {
    let first = prompts
        .first()
        .ok_or_else(|| Error::Argument("cannot mix an empty prompt list".into()))?;
    let (l, d) = first.dim();
    for (i, p) in prompts.iter().enumerate() {
        if p.dim() != (l, d) {
            return Err(Error::Argument(format!(
                "prompt {i} has shape {:?}, expected {:?}",
                p.dim(),
                (l, d)
            )));
        }
    }
    Ok((l, d))
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_prime(x: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-x).exp());
    sig * (1.0 + x * (1.0 - sig))
}

/// LayerNorm (no affine) over the score vector, then softmax at temperature
/// `tau`. The weights are non-negative and sum to 1.
pub fn attention_weights_from_scores(scores: &[f64], tau: f64) -> Vec<f64> {
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
    let sigma = (var + LN_EPS).sqrt();
    let logits: Vec<f64> = scores.iter().map(|s| (s - mean) / sigma / tau).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|t| (t - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Row-wise concatenation in input order: (20n × d).
pub fn mix_concat(prompts: &[&Array2<f64>]) -> Result<MixedPrompt> {
    let (l, d) = check_prompts(prompts)?;
    let mut matrix = Array2::zeros((l * prompts.len(), d));
    for (i, p) in prompts.iter().enumerate() {
        matrix.slice_mut(s![i * l..(i + 1) * l, ..]).assign(p);
    }
    Ok(MixedPrompt { matrix, attention_weights: None })
}

/// Element-wise mean of the prompt matrices: (20 × d).
pub fn mix_pool(prompts: &[&Array2<f64>]) -> Result<MixedPrompt> {
    let (l, d) = check_prompts(prompts)?;
    let mut matrix = Array2::zeros((l, d));
    for p in prompts {
        matrix += *p;
    }
    matrix /= prompts.len() as f64;
    Ok(MixedPrompt { matrix, attention_weights: None })
}

struct ScoreTail {
    weights: Vec<f64>,
    z: Vec<f64>,
    sigma: f64,
}

fn score_tail(scores: &[f64], tau: f64) -> ScoreTail {
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
    let sigma = (var + LN_EPS).sqrt();
    let z: Vec<f64> = scores.iter().map(|s| (s - mean) / sigma).collect();
    let logits: Vec<f64> = z.iter().map(|v| v / tau).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|t| (t - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    ScoreTail { weights: exps.iter().map(|e| e / total).collect(), z, sigma }
}

fn weighted_sum(prompts: &[&Array2<f64>], weights: &[f64], l: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((l, d));
    for (p, w) in prompts.iter().zip(weights) {
        out.scaled_add(*w, *p);
    }
    out
}

fn pooled_rows(prompts: &[&Array2<f64>]) -> Vec<Array1<f64>> {
    prompts
        .iter()
        .map(|p| p.mean_axis(Axis(0)).expect("prompts have rows"))
        .collect()
}

/// Attention mixing: score each attribute through the query projection,
/// normalize, and return the weighted sum of the full prompt matrices.
pub fn mix_attention(prompts: &[&Array2<f64>], params: &MixerParams) -> Result<MixedPrompt> {
    let (l, d) = check_prompts(prompts)?;
    let MixerParams::Attention { w_q, temperature } = params else {
        return Err(Error::Parameter("expected attention parameters".into()));
    };
    if *temperature <= 0.0 {
        return Err(Error::Parameter("temperature must be positive".into()));
    }
    if w_q.dim() != (d, d) {
        return Err(Error::Parameter(format!(
            "w_q shape {:?} does not match embed_dim {d}",
            w_q.dim()
        )));
    }
    let qbar = pooled_rows(prompts);
    let scores: Vec<f64> = qbar
        .iter()
        .map(|q| {
            let u = w_q.dot(q);
            u.iter().map(|&v| silu(v)).sum::<f64>() / d as f64
        })
        .collect();
    let tail = score_tail(&scores, *temperature);
    Ok(MixedPrompt {
        matrix: weighted_sum(prompts, &tail.weights, l, d),
        attention_weights: Some(tail.weights),
    })
}

/// Bottleneck mixing: like attention, but the score comes from a
/// down-projection / SiLU / up-projection sandwich.
pub fn mix_bottleneck(prompts: &[&Array2<f64>], params: &MixerParams) -> Result<MixedPrompt> {
    let (l, d) = check_prompts(prompts)?;
    let MixerParams::Bottleneck { w_down, w_up, temperature } = params else {
        return Err(Error::Parameter("expected bottleneck parameters".into()));
    };
    if *temperature <= 0.0 {
        return Err(Error::Parameter("temperature must be positive".into()));
    }
    if w_down.nrows() != d || w_up.ncols() != d || w_down.ncols() != w_up.nrows() {
        return Err(Error::Parameter(format!(
            "bottleneck shapes {:?}/{:?} do not match embed_dim {d}",
            w_down.dim(),
            w_up.dim()
        )));
    }
    let qbar = pooled_rows(prompts);
    let scores: Vec<f64> = qbar
        .iter()
        .map(|q| {
            let h: Array1<f64> = w_down.t().dot(q).mapv(silu);
            let up = w_up.t().dot(&h);
            up.sum() / d as f64
        })
        .collect();
    let tail = score_tail(&scores, *temperature);
    Ok(MixedPrompt {
        matrix: weighted_sum(prompts, &tail.weights, l, d),
        attention_weights: Some(tail.weights),
    })
}

/// Same-padding 2-D cross-correlation over (channels, H, W).
fn conv2d_same(input: &Array3<f64>, weight: &Array4<f64>, bias: &Array1<f64>) -> Array3<f64> {
    let (cin, h, w) = input.dim();
    let (cout, cin_w, kh, kw) = weight.dim();
    debug_assert_eq!(cin, cin_w);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = Array3::zeros((cout, h, w));
    for o in 0..cout {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias[o];
                for c in 0..cin {
                    for u in 0..kh {
                        let ii = i as isize + u as isize - ph as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let jj = j as isize + v as isize - pw as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            acc += input[(c, ii as usize, jj as usize)] * weight[(o, c, u, v)];
                        }
                    }
                }
                out[(o, i, j)] = acc;
            }
        }
    }
    out
}

/// Backward pass of [`conv2d_same`]: gradients w.r.t. input, weight, bias.
fn conv2d_same_backward(
    input: &Array3<f64>,
    weight: &Array4<f64>,
    dout: &Array3<f64>,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (cin, h, w) = input.dim();
    let (cout, _, kh, kw) = weight.dim();
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dinput = Array3::zeros((cin, h, w));
    let mut dweight = Array4::zeros((cout, cin, kh, kw));
    let mut dbias = Array1::zeros(cout);
    for o in 0..cout {
        for i in 0..h {
            for j in 0..w {
                let g = dout[(o, i, j)];
                if g == 0.0 {
                    continue;
                }
                dbias[o] += g;
                for c in 0..cin {
                    for u in 0..kh {
                        let ii = i as isize + u as isize - ph as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let jj = j as isize + v as isize - pw as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            dweight[(o, c, u, v)] += input[(c, ii as usize, jj as usize)] * g;
                            dinput[(c, ii as usize, jj as usize)] += weight[(o, c, u, v)] * g;
                        }
                    }
                }
            }
        }
    }
    (dinput, dweight, dbias)
}

fn stack_padded(prompts: &[&Array2<f64>], n_max: usize, l: usize, d: usize) -> Array3<f64> {
    let mut x = Array3::zeros((n_max, l, d));
    for (a, p) in prompts.iter().enumerate() {
        x.slice_mut(s![a, .., ..]).assign(p);
    }
    x
}

/// Convolution mixing: prompts stacked as channels (zero-padded to n_max),
/// two convolution layers with a ReLU between, down to one output channel.
pub fn mix_cnn(prompts: &[&Array2<f64>], params: &MixerParams) -> Result<MixedPrompt> {
    let (l, d) = check_prompts(prompts)?;
    let MixerParams::Convolution { conv1_w, conv1_b, conv2_w, conv2_b, n_max } = params else {
        return Err(Error::Parameter("expected convolution parameters".into()));
    };
    if prompts.len() > *n_max {
        return Err(Error::Capacity { n: prompts.len(), max: *n_max });
    }
    params.validate()?;
    let x = stack_padded(prompts, *n_max, l, d);
    let y1 = conv2d_same(&x, conv1_w, conv1_b);
    let y1r = y1.mapv(|v| v.max(0.0));
    let y2 = conv2d_same(&y1r, conv2_w, conv2_b);
    Ok(MixedPrompt {
        matrix: y2.index_axis(Axis(0), 0).to_owned(),
        attention_weights: None,
    })
}

/// Dispatch on the parameter variant.
pub fn mix(prompts: &[&Array2<f64>], params: &MixerParams) -> Result<MixedPrompt> {
    match params {
        MixerParams::Concat => mix_concat(prompts),
        MixerParams::Pooling => mix_pool(prompts),
        MixerParams::Attention { .. } => mix_attention(prompts, params),
        MixerParams::Bottleneck { .. } => mix_bottleneck(prompts, params),
        MixerParams::Convolution { .. } => mix_cnn(prompts, params),
    }
}

/// Backward of the score tail shared by attention and bottleneck: given
/// d(loss)/d(weights), produce d(loss)/d(scores).
fn score_tail_backward(tail: &ScoreTail, dweights: &[f64], tau: f64) -> Vec<f64> {
    let n = tail.weights.len() as f64;
    // Softmax backward.
    let dot: f64 = dweights.iter().zip(&tail.weights).map(|(g, s)| g * s).sum();
    let dlogits: Vec<f64> =
        tail.weights.iter().zip(dweights).map(|(s, g)| s * (g - dot)).collect();
    let dz: Vec<f64> = dlogits.iter().map(|v| v / tau).collect();
    // LayerNorm backward (no affine): dx = (dz - mean(dz) - z*mean(dz*z)) / sigma.
    let mean_dz = dz.iter().sum::<f64>() / n;
    let mean_dzz = dz.iter().zip(&tail.z).map(|(a, b)| a * b).sum::<f64>() / n;
    dz.iter()
        .zip(&tail.z)
        .map(|(dzi, zi)| (dzi - mean_dz - zi * mean_dzz) / tail.sigma)
        .collect()
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Analytic gradients of a scalar loss with upstream gradient `upstream`
/// (same shape as the forward output) w.r.t. each input prompt and the
/// mixer parameters.
pub fn mixer_backward(
    prompts: &[&Array2<f64>],
    params: &MixerParams,
    upstream: &Array2<f64>,
) -> Result<MixerGrads> {
    let (l, d) = check_prompts(prompts)?;
    let n = prompts.len();
    let expected = match params {
        MixerParams::Concat => (l * n, d),
        _ => (l, d),
    };
    if upstream.dim() != expected {
        return Err(Error::Argument(format!(
            "upstream gradient has shape {:?}, expected {:?}",
            upstream.dim(),
            expected
        )));
    }
    match params {
        MixerParams::Concat => {
            let prompts_grads = (0..n)
                .map(|a| upstream.slice(s![a * l..(a + 1) * l, ..]).to_owned())
                .collect();
            Ok(MixerGrads { prompts: prompts_grads, params: MixerParamGrads::None })
        }
        MixerParams::Pooling => {
            let scaled = upstream / n as f64;
            Ok(MixerGrads { prompts: vec![scaled; n], params: MixerParamGrads::None })
        }
        MixerParams::Attention { w_q, temperature } => {
            let qbar = pooled_rows(prompts);
            let u: Vec<Array1<f64>> = qbar.iter().map(|q| w_q.dot(q)).collect();
            let scores: Vec<f64> =
                u.iter().map(|ua| ua.iter().map(|&v| silu(v)).sum::<f64>() / d as f64).collect();
            let tail = score_tail(&scores, *temperature);
            // d(loss)/d(weight_a) via the weighted sum.
            let dweights: Vec<f64> =
                prompts.iter().map(|p| (&upstream.view() * &p.view()).sum()).collect();
            let dscores = score_tail_backward(&tail, &dweights, *temperature);
            let mut dw_q = Array2::zeros(w_q.dim());
            let mut prompt_grads: Vec<Array2<f64>> = prompts
                .iter()
                .zip(&tail.weights)
                .map(|(_, wgt)| upstream * *wgt)
                .collect();
            for a in 0..n {
                // score = mean(silu(u)); per-entry: du = dscore/d * silu'(u).
                let du: Array1<f64> = u[a].mapv(|v| silu_prime(v) * dscores[a] / d as f64);
                dw_q += &outer(&du, &qbar[a]);
                let dqbar = w_q.t().dot(&du);
                let per_row = dqbar / l as f64;
                for mut row in prompt_grads[a].axis_iter_mut(Axis(0)) {
                    row += &per_row;
                }
            }
            Ok(MixerGrads {
                prompts: prompt_grads,
                params: MixerParamGrads::Attention { w_q: dw_q },
            })
        }
        MixerParams::Bottleneck { w_down, w_up, temperature } => {
            let qbar = pooled_rows(prompts);
            let u_down: Vec<Array1<f64>> = qbar.iter().map(|q| w_down.t().dot(q)).collect();
            let h: Vec<Array1<f64>> = u_down.iter().map(|ud| ud.mapv(silu)).collect();
            let scores: Vec<f64> =
                h.iter().map(|ha| w_up.t().dot(ha).sum() / d as f64).collect();
            let tail = score_tail(&scores, *temperature);
            let dweights: Vec<f64> =
                prompts.iter().map(|p| (&upstream.view() * &p.view()).sum()).collect();
            let dscores = score_tail_backward(&tail, &dweights, *temperature);
            let mut dw_down = Array2::zeros(w_down.dim());
            let mut dw_up = Array2::zeros(w_up.dim());
            let mut prompt_grads: Vec<Array2<f64>> = prompts
                .iter()
                .zip(&tail.weights)
                .map(|(_, wgt)| upstream * *wgt)
                .collect();
            for a in 0..n {
                // score = mean over d of (w_upᵀ h), so dH is uniform.
                let dh_up = Array1::from_elem(d, dscores[a] / d as f64);
                dw_up += &outer(&h[a], &dh_up);
                let dh: Array1<f64> = w_up.dot(&dh_up);
                let du: Array1<f64> = dh
                    .iter()
                    .zip(u_down[a].iter())
                    .map(|(dhv, udv)| dhv * silu_prime(*udv))
                    .collect();
                dw_down += &outer(&qbar[a], &du);
                let dqbar = w_down.dot(&du);
                let per_row = dqbar / l as f64;
                for mut row in prompt_grads[a].axis_iter_mut(Axis(0)) {
                    row += &per_row;
                }
            }
            Ok(MixerGrads {
                prompts: prompt_grads,
                params: MixerParamGrads::Bottleneck { w_down: dw_down, w_up: dw_up },
            })
        }
        MixerParams::Convolution { conv1_w, conv1_b, conv2_w, conv2_b: _, n_max } => {
            if n > *n_max {
                return Err(Error::Capacity { n, max: *n_max });
            }
            let x = stack_padded(prompts, *n_max, l, d);
            let y1 = conv2d_same(&x, conv1_w, conv1_b);
            let y1r = y1.mapv(|v| v.max(0.0));
            let dy2 = upstream
                .to_owned()
                .into_shape_with_order((1, l, d))
                .expect("row-major reshape");
            let (dy1r, dconv2_w, dconv2_b) = conv2d_same_backward(&y1r, conv2_w, &dy2);
            let mask = y1.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let dy1 = &dy1r * &mask;
            let (dx, dconv1_w, dconv1_b) = conv2d_same_backward(&x, conv1_w, &dy1);
            let prompt_grads: Vec<Array2<f64>> =
                (0..n).map(|a| dx.index_axis(Axis(0), a).to_owned()).collect();
            Ok(MixerGrads {
                prompts: prompt_grads,
                params: MixerParamGrads::Convolution {
                    conv1_w: dconv1_w,
                    conv1_b: dconv1_b,
                    conv2_w: dconv2_w,
                    conv2_b: dconv2_b,
                },
            })
        }
    }
}
