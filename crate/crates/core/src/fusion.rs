//! Attention pooling and bi-directional cross-attention over feature tokens.
//!
//! Inference only: weights are either seeded at random or read from a weight
//! file; nothing here is trained. Tokens are treated as row vectors, so a
//! projection `z W` is computed as `W^T z`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const DEFAULT_DIM: usize = 32;
const WEIGHTS_MAGIC: &str = "fusion-weights v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("no input tokens")]
    Empty,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{heads} heads do not divide dimension {dim}")]
    Heads { dim: usize, heads: usize },
    #[error("weight file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub values: DVector<f64>,
}

impl Token {
    pub fn new(values: Vec<f64>) -> Result<Self, FusionError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite("token"));
        }
        Ok(Self {
            values: DVector::from_vec(values),
        })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }
}

/// Two-layer map `in -> hidden (ReLU) -> out`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayer {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl TwoLayer {
    fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: DMatrix::zeros(hidden, input),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(output, hidden),
            b2: DVector::zeros(output),
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let hidden = (&self.w1 * x + &self.b1).map(|v| v.max(0.0));
        &self.w2 * hidden + &self.b2
    }

    fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ]
    }

    fn params(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub dim: usize,
    pub heads: usize,
    /// Bilinear patch-attention matrix.
    pub patch_attn: DMatrix<f64>,
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wq_rev: DMatrix<f64>,
    pub wk_rev: DMatrix<f64>,
    pub wv_rev: DMatrix<f64>,
    /// Point score map, `2d -> d -> 1`.
    pub score: TwoLayer,
    /// Fusion block, `2d -> d -> d`, added to the mean of the attended streams.
    pub ffn: TwoLayer,
}

impl FusionWeights {
    pub fn zeros(dim: usize, heads: usize) -> Result<Self, FusionError> {
        if heads == 0 || dim % heads != 0 {
            return Err(FusionError::Heads { dim, heads });
        }
        let sq = || DMatrix::zeros(dim, dim);
        Ok(Self {
            dim,
            heads,
            patch_attn: sq(),
            wq: sq(),
            wk: sq(),
            wv: sq(),
            wq_rev: sq(),
            wk_rev: sq(),
            wv_rev: sq(),
            score: TwoLayer::zeros(2 * dim, dim, 1),
            ffn: TwoLayer::zeros(2 * dim, dim, dim),
        })
    }

    /// Uniform(-1/sqrt(d), 1/sqrt(d)) initialization from a ChaCha8 stream.
    pub fn seeded(dim: usize, heads: usize, seed: u64) -> Result<Self, FusionError> {
        let mut w = Self::zeros(dim, heads)?;
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in w.blocks_mut() {
            for v in block.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(w)
    }

    fn blocks(&self) -> Vec<&[f64]> {
        let mut out = vec![
            self.patch_attn.as_slice(),
            self.wq.as_slice(),
            self.wk.as_slice(),
            self.wv.as_slice(),
            self.wq_rev.as_slice(),
            self.wk_rev.as_slice(),
            self.wv_rev.as_slice(),
        ];
        out.extend(self.score.params());
        out.extend(self.ffn.params());
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.patch_attn.as_mut_slice(),
            self.wq.as_mut_slice(),
            self.wk.as_mut_slice(),
            self.wv.as_mut_slice(),
            self.wq_rev.as_mut_slice(),
            self.wk_rev.as_mut_slice(),
            self.wv_rev.as_mut_slice(),
        ];
        out.extend(self.score.params_mut());
        out.extend(self.ffn.params_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Serializes to the text weight format.
    ///
    /// Blocks follow in this order, each flattened column-major:
    /// `W, Wq, Wk, Wv, Wq', Wk', Wv', score.w1, score.b1, score.w2, score.b2,
    /// ffn.w1, ffn.b1, ffn.w2, ffn.b2`. One value per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{WEIGHTS_MAGIC} d={} heads={}\n", self.dim, self.heads);
        for block in self.blocks() {
            for v in block {
                let _ = writeln!(s, "{v:?}");
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, FusionError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| FusionError::Format("empty file".into()))?;
        let rest = header
            .strip_prefix(WEIGHTS_MAGIC)
            .ok_or_else(|| FusionError::Format(format!("bad header `{header}`")))?;
        let mut dim = None;
        let mut heads = None;
        for tok in rest.split_whitespace() {
            if let Some(v) = tok.strip_prefix("d=") {
                dim = v.parse().ok();
            } else if let Some(v) = tok.strip_prefix("heads=") {
                heads = v.parse().ok();
            } else {
                return Err(FusionError::Format(format!("unknown header field `{tok}`")));
            }
        }
        let (Some(dim), Some(heads)) = (dim, heads) else {
            return Err(FusionError::Format("header needs d= and heads=".into()));
        };
        let mut w = Self::zeros(dim, heads)?;
        let expected = w.parameter_count();
        let values: Vec<f64> = lines
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| FusionError::Format(format!("bad value `{l}`")))
            })
            .collect::<Result<_, _>>()?;
        if values.len() != expected {
            return Err(FusionError::Format(format!(
                "expected {expected} values, found {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite("weights"));
        }
        let mut it = values.into_iter();
        for block in w.blocks_mut() {
            for slot in block.iter_mut() {
                *slot = it.next().expect("counted above");
            }
        }
        Ok(w)
    }
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_dims<'a>(
    tokens: impl IntoIterator<Item = &'a Token>,
    dim: usize,
) -> Result<(), FusionError> {
    for t in tokens {
        if t.dim() != dim {
            return Err(FusionError::Dimension {
                expected: dim,
                actual: t.dim(),
            });
        }
    }
    Ok(())
}

fn pool(tokens: &[Token], weights: &[f64]) -> Token {
    let mut acc = DVector::zeros(tokens[0].dim());
    for (t, &a) in tokens.iter().zip(weights) {
        acc.axpy(a, &t.values, 1.0);
    }
    Token { values: acc }
}

/// Patch pooling for the camera stream: `alpha_k = softmax_k(g^T W f_k)`.
pub fn image_token(
    patches: &[Token],
    global_desc: &Token,
    w: &FusionWeights,
) -> Result<(Token, Vec<f64>), FusionError> {
    if patches.is_empty() {
        return Err(FusionError::Empty);
    }
    check_dims(patches.iter().chain([global_desc]), w.dim)?;
    let gw = w.patch_attn.tr_mul(&global_desc.values);
    let logits: Vec<f64> = patches.iter().map(|f| gw.dot(&f.values)).collect();
    let alpha = softmax(&logits);
    Ok((pool(patches, &alpha), alpha))
}

/// Point pooling for the lidar stream: `beta_i = softmax_i(score([h_i; u]))`.
pub fn lidar_token(
    point_feats: &[Token],
    context: &Token,
    w: &FusionWeights,
) -> Result<(Token, Vec<f64>), FusionError> {
    if point_feats.is_empty() {
        return Err(FusionError::Empty);
    }
    check_dims(point_feats.iter().chain([context]), w.dim)?;
    let logits: Vec<f64> = point_feats
        .iter()
        .map(|h| {
            let cat = concat(&h.values, &context.values);
            w.score.apply(&cat)[0]
        })
        .collect();
    let beta = softmax(&logits);
    Ok((pool(point_feats, &beta), beta))
}

fn concat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// Multi-head scaled dot-product attention of `queries` over `keys`.
pub fn cross_attend(
    queries: &[Token],
    keys: &[Token],
    wq: &DMatrix<f64>,
    wk: &DMatrix<f64>,
    wv: &DMatrix<f64>,
    heads: usize,
) -> Result<Vec<Token>, FusionError> {
    if queries.is_empty() || keys.is_empty() {
        return Err(FusionError::Empty);
    }
    let dim = wq.nrows();
    if heads == 0 || dim % heads != 0 {
        return Err(FusionError::Heads { dim, heads });
    }
    check_dims(queries.iter().chain(keys), dim)?;
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let q: Vec<DVector<f64>> = queries.iter().map(|t| wq.tr_mul(&t.values)).collect();
    let k: Vec<DVector<f64>> = keys.iter().map(|t| wk.tr_mul(&t.values)).collect();
    let v: Vec<DVector<f64>> = keys.iter().map(|t| wv.tr_mul(&t.values)).collect();

    let mut out = Vec::with_capacity(queries.len());
    for qi in &q {
        let mut attended = DVector::zeros(dim);
        for h in 0..heads {
            let range = h * head_dim..(h + 1) * head_dim;
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| {
                    qi.rows(range.start, head_dim)
                        .dot(&kj.rows(range.start, head_dim))
                        * scale
                })
                .collect();
            let a = softmax(&logits);
            for (aj, vj) in a.iter().zip(&v) {
                let mut seg = attended.rows_mut(range.start, head_dim);
                seg.axpy(*aj, &vj.rows(range.start, head_dim), 1.0);
            }
        }
        if attended.iter().any(|x| !x.is_finite()) {
            return Err(FusionError::NonFinite("attention output"));
        }
        out.push(Token { values: attended });
    }
    Ok(out)
}

/// Both attended streams and the fused token.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedTokens {
    pub img: Token,
    pub lidar: Token,
    pub fused: Token,
}

/// Bi-directional cross-attention over token sets, mean-pooled per stream and
/// merged as `0.5 (img + lidar) + FFN([img || lidar])`.
pub fn cross_fuse_sets(
    img: &[Token],
    lidar: &[Token],
    w: &FusionWeights,
) -> Result<FusedTokens, FusionError> {
    let img_att = cross_attend(img, lidar, &w.wq, &w.wk, &w.wv, w.heads)?;
    let lidar_att = cross_attend(lidar, img, &w.wq_rev, &w.wk_rev, &w.wv_rev, w.heads)?;
    let mean = |ts: &[Token]| {
        let mut acc = DVector::zeros(w.dim);
        for t in ts {
            acc += &t.values;
        }
        Token {
            values: acc / ts.len() as f64,
        }
    };
    let img_hat = mean(&img_att);
    let lidar_hat = mean(&lidar_att);
    let residual = (&img_hat.values + &lidar_hat.values) * 0.5;
    let fused = residual + w.ffn.apply(&concat(&img_hat.values, &lidar_hat.values));
    if fused.iter().any(|x| !x.is_finite()) {
        return Err(FusionError::NonFinite("fused token"));
    }
    Ok(FusedTokens {
        img: img_hat,
        lidar: lidar_hat,
        fused: Token { values: fused },
    })
}

pub fn cross_fuse(z_img: &Token, z_lidar: &Token, w: &FusionWeights) -> Result<Token, FusionError> {
    Ok(cross_fuse_sets(
        std::slice::from_ref(z_img),
        std::slice::from_ref(z_lidar),
        w,
    )?
    .fused)
}

/// Affine read-out to a dead-end probability.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub weights: DVector<f64>,
    pub bias: f64,
}

impl HeadWeights {
    pub fn new(weights: Vec<f64>, bias: f64) -> Self {
        Self {
            weights: DVector::from_vec(weights),
            bias,
        }
    }

    pub fn seeded(dim: usize, seed: u64) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self::new(weights, 0.0)
    }
}

/// Largest double below one.
const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function clamped into the open interval (0, 1).
pub fn open_sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, ONE_MINUS)
}

pub fn deadend_head(z_fuse: &Token, head: &HeadWeights) -> Result<f64, FusionError> {
    if z_fuse.dim() != head.weights.len() {
        return Err(FusionError::Dimension {
            expected: head.weights.len(),
            actual: z_fuse.dim(),
        });
    }
    let logit = head.weights.dot(&z_fuse.values) + head.bias;
    if !logit.is_finite() {
        return Err(FusionError::NonFinite("head logit"));
    }
    Ok(open_sigmoid(logit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tok(v: &[f64]) -> Token {
        Token::new(v.to_vec()).unwrap()
    }

    fn small(dim: usize) -> FusionWeights {
        FusionWeights::zeros(dim, 1).unwrap()
    }

    #[test]
    fn identical_patches_pool_to_themselves() {
        let w = FusionWeights::seeded(4, 1, 9).unwrap();
        let f = tok(&[0.3, -1.0, 2.0, 0.5]);
        let (z, alpha) = image_token(&[f.clone(), f.clone(), f.clone()], &tok(&[1.0, 2.0, 3.0, 4.0]), &w).unwrap();
        assert_abs_diff_eq!(alpha.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for (a, b) in z.as_slice().iter().zip(f.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_attention_matrix_gives_uniform_weights() {
        let w = small(3);
        let patches: Vec<Token> = (0..5).map(|i| tok(&[i as f64, 1.0, -2.0])).collect();
        let (_, alpha) = image_token(&patches, &tok(&[1.0, 1.0, 1.0]), &w).unwrap();
        for a in alpha {
            assert_abs_diff_eq!(a, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn two_patch_example() {
        let mut w = small(2);
        w.patch_attn = DMatrix::identity(2, 2);
        let (z, alpha) =
            image_token(&[tok(&[1.0, 0.0]), tok(&[0.0, 1.0])], &tok(&[1.0, 0.0]), &w).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(alpha[0], e / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(alpha[1], 1.0 / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(alpha[0], 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(z.as_slice()[1], 0.2689, epsilon = 1e-4);
    }

    #[test]
    fn lidar_pooling_examples() {
        let mut w = small(2);
        let (z, beta) = lidar_token(&[tok(&[3.0, -1.0])], &tok(&[0.0, 0.0]), &w).unwrap();
        assert_eq!(beta, vec![1.0]);
        assert_eq!(z.as_slice(), &[3.0, -1.0]);

        // constant score map: bias only
        w.score.b2[0] = 4.0;
        let pts = [tok(&[1.0, 0.0]), tok(&[0.0, 1.0]), tok(&[5.0, 5.0])];
        let (_, beta) = lidar_token(&pts, &tok(&[1.0, 1.0]), &w).unwrap();
        for b in beta {
            assert_abs_diff_eq!(b, 1.0 / 3.0, epsilon = 1e-15);
        }

        // hidden unit 0 copies h[0]; output weight 2 gives logits (2, 0)
        w.score.b2[0] = 0.0;
        w.score.w1[(0, 0)] = 1.0;
        w.score.w2[(0, 0)] = 2.0;
        let (_, beta) = lidar_token(&[tok(&[1.0, 0.0]), tok(&[0.0, 1.0])], &tok(&[0.0, 0.0]), &w).unwrap();
        let e2 = 2.0f64.exp();
        assert_abs_diff_eq!(beta[0], e2 / (e2 + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(beta[0], 0.8808, epsilon = 1e-4);
        assert_abs_diff_eq!(beta[1], 0.1192, epsilon = 1e-4);
    }

    #[test]
    fn pooling_errors() {
        let w = small(2);
        assert_eq!(image_token(&[], &tok(&[0.0, 0.0]), &w).unwrap_err(), FusionError::Empty);
        assert!(matches!(
            lidar_token(&[tok(&[1.0])], &tok(&[0.0, 0.0]), &w),
            Err(FusionError::Dimension { .. })
        ));
        assert!(Token::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn zero_weights_fuse_to_residual() {
        let w = small(4);
        let out = cross_fuse(&tok(&[1.0, 2.0, 3.0, 4.0]), &tok(&[-1.0, 0.0, 1.0, 0.5]), &w).unwrap();
        // attended streams are zero, so the residual mean is zero as well
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_weights_give_symmetric_streams() {
        let mut w = FusionWeights::seeded(8, 2, 5).unwrap();
        w.wq_rev = w.wq.clone();
        w.wk_rev = w.wk.clone();
        w.wv_rev = w.wv.clone();
        let z = tok(&[0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8]);
        let f = cross_fuse_sets(&[z.clone()], &[z], &w).unwrap();
        assert_eq!(f.img, f.lidar);
    }

    #[test]
    fn multi_head_splits_dimension() {
        assert!(FusionWeights::zeros(6, 4).is_err());
        let w = FusionWeights::seeded(8, 4, 1).unwrap();
        let a: Vec<Token> = (0..3).map(|i| tok(&[i as f64 * 0.1; 8])).collect();
        let b: Vec<Token> = (0..2).map(|i| tok(&[1.0 - i as f64; 8])).collect();
        let out = cross_attend(&a, &b, &w.wq, &w.wk, &w.wv, 4).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|t| t.dim() == 8));
    }

    #[test]
    fn head_examples() {
        let zero = HeadWeights::new(vec![0.0; 3], 0.0);
        let z = tok(&[1.0, 2.0, 3.0]);
        assert_eq!(deadend_head(&z, &zero).unwrap(), 0.5);
        let biased = HeadWeights::new(vec![0.0; 3], 4f64.ln());
        assert_abs_diff_eq!(deadend_head(&z, &biased).unwrap(), 0.8, epsilon = 1e-12);
        let huge = HeadWeights::new(vec![0.0; 3], 37.0);
        let p = deadend_head(&z, &huge).unwrap();
        assert!(p < 1.0 && p > 0.99);
        let tiny = HeadWeights::new(vec![0.0; 3], -800.0);
        assert!(deadend_head(&z, &tiny).unwrap() > 0.0);
        assert!(deadend_head(&tok(&[1.0]), &zero).is_err());
    }

    #[test]
    fn weight_file_round_trip() {
        let w = FusionWeights::seeded(4, 2, 77).unwrap();
        let text = w.to_text();
        assert!(text.starts_with("fusion-weights v1 d=4 heads=2\n"));
        assert_eq!(FusionWeights::from_text(&text).unwrap(), w);
        assert!(FusionWeights::from_text("fusion-weights v1 d=4 heads=2\n1.0\n").is_err());
        assert!(FusionWeights::from_text("weights d=4\n").is_err());
    }
}
