//! Deterministic toy denoiser with token-conditioned cross-attention.
//!
//! The network is a short stack of cross-attention layers over the latent
//! grid. Layer `k` reads the latent plus the upsampled value outputs of all
//! earlier layers, average-pools it by `2^(L-1-k)`, projects each pooled
//! cell to a query, attends over the prompt tokens and emits an
//! attention-weighted token value. The predicted noise is a linear residual
//! of the latent minus the upsampled values. Weights are drawn from a seeded
//! generator and never trained.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GridDims;

/// Scale of the query projection; sets how peaked attention is on an
/// N(0, 1) latent.
const QUERY_GAIN: f64 = 6.0;
/// Strength with which a cell's attended token values feed back into the
/// predicted clean latent.
const VALUE_GAIN: f64 = 1.5;
/// Coefficient of the latent in the predicted noise.
const NOISE_GAIN: f64 = 1.0;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    // SplitMix-style mixing keeps neighbouring seeds and streams decorrelated.
    let mut x = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(x ^ (x >> 31))
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub d_k: usize,
    pub layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 16,
            width: 16,
            channels: 8,
            d_k: 8,
            layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self) -> GridDims {
        GridDims::new(self.height, self.width)
    }

    pub fn pool_factor(&self, layer: usize) -> usize {
        1 << (self.layers - 1 - layer)
    }

    pub fn layer_dims(&self, layer: usize) -> GridDims {
        let p = self.pool_factor(layer);
        GridDims::new(self.height / p, self.width / p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.layers > 4 {
            return Err(Error::InvalidConfig(format!(
                "layer count {} outside 1..=4",
                self.layers
            )));
        }
        let p = self.pool_factor(0);
        if self.height < 2 * p || self.width < 2 * p || self.height % p != 0 || self.width % p != 0 {
            return Err(Error::InvalidDims {
                height: self.height,
                width: self.width,
            });
        }
        if self.d_k < 2 || self.channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "d_k {} / channels {} too small",
                self.d_k, self.channels
            )));
        }
        Ok(())
    }
}

/// Prompt tokens with their (unit-norm) embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub tokens: Vec<u32>,
    pub embeddings: Array2<f64>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn d_k(&self) -> usize {
        self.embeddings.ncols()
    }
}

/// Seeded lookup-table embedding: one unit Gaussian direction per token id.
pub fn embed_tokens(prompt: &[u32], d_k: usize, seed: u64) -> Result<TokenSet> {
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if d_k < 2 {
        return Err(Error::InvalidConfig(format!("d_k {d_k} must be >= 2")));
    }
    let mut embeddings = Array2::zeros((prompt.len(), d_k));
    for (row, &id) in embeddings.rows_mut().into_iter().zip(prompt) {
        let mut rng = rng_for(seed, 0x7EA5_0000_0000 | id as u64);
        let mut row = row;
        row.map_inplace(|x: &mut f64| *x = StandardNormal.sample(&mut rng));
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    Ok(TokenSet {
        tokens: prompt.to_vec(),
        embeddings,
    })
}

fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    logits
}

/// Row-softmax of `features · embeddingsᵀ / √d_k`: one distribution over
/// tokens per location.
pub fn cross_attention(features: ArrayView2<'_, f64>, tokens: &TokenSet) -> Result<Array2<f64>> {
    if features.ncols() != tokens.d_k() {
        return Err(Error::Shape(format!(
            "feature width {} != d_k {}",
            features.ncols(),
            tokens.d_k()
        )));
    }
    let scale = (tokens.d_k() as f64).sqrt();
    Ok(softmax_rows(features.dot(&tokens.embeddings.t()) / scale))
}

/// Location-by-token attention of one layer, rows over the layer's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub dims: GridDims,
    pub values: Array2<f64>,
}

impl AttentionMap {
    pub fn column(&self, token: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.column(token)
    }

    /// Nearest-neighbour upsampling to a finer grid; rows stay stochastic.
    pub fn upsampled(&self, dims: GridDims) -> AttentionMap {
        if dims == self.dims {
            return self.clone();
        }
        let fh = dims.height / self.dims.height;
        let fw = dims.width / self.dims.width;
        let mut values = Array2::zeros((dims.len(), self.values.ncols()));
        for (i, mut row) in values.rows_mut().into_iter().enumerate() {
            let (r, c) = dims.cell(i);
            row.assign(&self.values.row(self.dims.index(r / fh, c / fw)));
        }
        AttentionMap {
            layer: self.layer,
            dims,
            values,
        }
    }
}

/// Latent grid at a given timestep, stored `height × width × channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Array3<f64>,
    pub t: usize,
}

impl LatentState {
    pub fn new(z: Array3<f64>, t: usize) -> Self {
        Self { z, t }
    }

    /// Standard normal latent drawn from `seed`.
    pub fn noise(config: &ModelConfig, seed: u64, t: usize) -> Self {
        let mut rng = rng_for(seed, 0x2A7E_0000);
        let z = Array3::from_shape_simple_fn((config.height, config.width, config.channels), || {
            StandardNormal.sample(&mut rng)
        });
        Self { z, t }
    }

    pub fn dims(&self) -> GridDims {
        GridDims::new(self.z.shape()[0], self.z.shape()[1])
    }

    pub fn norm(&self) -> f64 {
        self.z.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().all(|x| x.is_finite())
    }

    /// `z` flattened to `(H·W) × C`.
    fn rows(&self) -> ArrayView2<'_, f64> {
        let (h, w, c) = self.z.dim();
        self.z.view().into_shape_with_order((h * w, c)).expect("contiguous latent")
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps_hat: Array3<f64>,
    pub attention: Vec<AttentionMap>,
}

#[derive(Debug, Clone)]
struct CrossAttentionLayer {
    dims: GridDims,
    pool: usize,
    /// `d_k × C` query projection.
    query: Array2<f64>,
    /// `C × d_k` value projection.
    value: Array2<f64>,
}

/// Intermediate values of one forward pass, enough to run the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    attention: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    latent_rows: Array2<f64>,
}

impl ForwardCache {
    pub fn attention(&self) -> &[Array2<f64>] {
        &self.attention
    }
}

#[derive(Debug, Clone)]
pub struct SandboxModel {
    config: ModelConfig,
    layers: Vec<CrossAttentionLayer>,
}

impl SandboxModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let layers = (0..config.layers)
            .map(|k| {
                let mut rng = rng_for(config.seed, 0x1A7E_0000 + k as u64);
                let query = gaussian_matrix(&mut rng, config.d_k, c, QUERY_GAIN / (c as f64).sqrt());
                let value = gaussian_matrix(&mut rng, c, config.d_k, 1.0 / (config.d_k as f64).sqrt());
                CrossAttentionLayer {
                    dims: config.layer_dims(k),
                    pool: config.pool_factor(k),
                    query,
                    value,
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> GridDims {
        self.config.dims()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_dims(&self, layer: usize) -> GridDims {
        self.layers[layer].dims
    }

    fn check(&self, state: &LatentState, tokens: &TokenSet) -> Result<()> {
        let (h, w, c) = state.z.dim();
        if (h, w, c) != (self.config.height, self.config.width, self.config.channels) {
            return Err(Error::Shape(format!(
                "latent {h}x{w}x{c} does not match model {}x{}x{}",
                self.config.height, self.config.width, self.config.channels
            )));
        }
        if tokens.d_k() != self.config.d_k {
            return Err(Error::Shape(format!(
                "token width {} != model d_k {}",
                tokens.d_k(),
                self.config.d_k
            )));
        }
        if tokens.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        Ok(())
    }

    fn pool(&self, rows: &Array2<f64>, pool: usize, dims: GridDims) -> Array2<f64> {
        if pool == 1 {
            return rows.clone();
        }
        let base = self.dims();
        let mut out = Array2::zeros((dims.len(), rows.ncols()));
        for (i, row) in rows.rows().into_iter().enumerate() {
            let (r, c) = base.cell(i);
            let mut o = out.row_mut(dims.index(r / pool, c / pool));
            o.scaled_add(1.0, &row);
        }
        out / (pool * pool) as f64
    }

    fn upsample_add(&self, target: &mut Array2<f64>, coarse: &Array2<f64>, pool: usize, dims: GridDims) {
        let base = self.dims();
        for (i, mut row) in target.rows_mut().into_iter().enumerate() {
            let (r, c) = base.cell(i);
            row.scaled_add(1.0, &coarse.row(dims.index(r / pool, c / pool)));
        }
    }

    /// Forward pass keeping what the reverse pass needs.
    pub fn forward(&self, state: &LatentState, tokens: &TokenSet) -> Result<ForwardCache> {
        self.check(state, tokens)?;
        let latent_rows = state.rows().to_owned();
        let mut hidden = latent_rows.clone();
        let mut attention = Vec::with_capacity(self.layers.len());
        let mut values = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = self.pool(&hidden, layer.pool, layer.dims);
            let q = x.dot(&layer.query.t());
            let a = cross_attention(q.view(), tokens)?;
            let token_values = tokens.embeddings.dot(&layer.value.t()); // m × C
            let v = a.dot(&token_values);
            self.upsample_add(&mut hidden, &v, layer.pool, layer.dims);
            attention.push(a);
            values.push(v);
        }
        Ok(ForwardCache {
            attention,
            values,
            latent_rows,
        })
    }

    pub fn attention_maps(&self, cache: &ForwardCache) -> Vec<AttentionMap> {
        cache
            .attention
            .iter()
            .zip(&self.layers)
            .enumerate()
            .map(|(k, (values, layer))| AttentionMap {
                layer: k,
                dims: layer.dims,
                values: values.clone(),
            })
            .collect()
    }

    pub fn denoise_step(&self, state: &LatentState, tokens: &TokenSet) -> Result<DenoiserOutput> {
        let cache = self.forward(state, tokens)?;
        Ok(self.output(cache))
    }

    pub(crate) fn output(&self, cache: ForwardCache) -> DenoiserOutput {
        let mut eps = cache.latent_rows * NOISE_GAIN;
        for (layer, v) in self.layers.iter().zip(&cache.values) {
            let scaled = v * -VALUE_GAIN;
            self.upsample_add(&mut eps, &scaled, layer.pool, layer.dims);
        }
        let (h, w, c) = (self.config.height, self.config.width, self.config.channels);
        let eps_hat = eps.into_shape_with_order((h, w, c)).expect("row count");
        let attention = cache
            .attention
            .into_iter()
            .zip(&self.layers)
            .enumerate()
            .map(|(k, (values, layer))| AttentionMap {
                layer: k,
                dims: layer.dims,
                values,
            })
            .collect();
        DenoiserOutput { eps_hat, attention }
    }

    /// Reverse pass: gradient w.r.t. the latent of a scalar whose partial
    /// derivatives w.r.t. each layer's attention are `energy_grad`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        tokens: &TokenSet,
        energy_grad: &[Array2<f64>],
    ) -> Result<Array3<f64>> {
        if energy_grad.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} attention gradients for {} layers",
                energy_grad.len(),
                self.layers.len()
            )));
        }
        for (g, a) in energy_grad.iter().zip(&cache.attention) {
            if g.dim() != a.dim() {
                return Err(Error::Shape(format!(
                    "attention gradient {:?} != attention {:?}",
                    g.dim(),
                    a.dim()
                )));
            }
        }
        let base = self.dims();
        let c = self.config.channels;
        let scale = (self.config.d_k as f64).sqrt();
        let mut grad_latent = Array2::<f64>::zeros((base.len(), c));
        // Gradient w.r.t. each layer's value output, filled by later layers.
        let mut grad_values: Vec<Array2<f64>> = self
            .layers
            .iter()
            .map(|l| Array2::zeros((l.dims.len(), c)))
            .collect();

        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let a = &cache.attention[k];
            let token_values = tokens.embeddings.dot(&layer.value.t());
            let mut grad_a = energy_grad[k].clone();
            grad_a += &grad_values[k].dot(&token_values.t());

            // softmax: dL/dlogit = A ⊙ (G − ⟨A, G⟩_row)
            let inner = (a * &grad_a).sum_axis(Axis(1));
            let mut grad_logits = grad_a;
            for ((mut gl, ar), s) in grad_logits.rows_mut().into_iter().zip(a.rows()).zip(inner.iter()) {
                gl.zip_mut_with(&ar, |g, &av| *g = av * (*g - s));
            }
            let grad_q = grad_logits.dot(&tokens.embeddings) / scale;
            let grad_x = grad_q.dot(&layer.query);

            // Un-pool onto the hidden state, which is the latent plus the
            // upsampled values of every earlier layer.
            let spread = 1.0 / (layer.pool * layer.pool) as f64;
            for (i, mut row) in grad_latent.rows_mut().into_iter().enumerate() {
                let (r, cc) = base.cell(i);
                let g = grad_x.row(layer.dims.index(r / layer.pool, cc / layer.pool));
                row.scaled_add(spread, &g);
                for (j, earlier) in self.layers[..k].iter().enumerate() {
                    let mut gv = grad_values[j].row_mut(earlier.dims.index(r / earlier.pool, cc / earlier.pool));
                    gv.scaled_add(spread, &g);
                }
            }
        }
        let (h, w) = (base.height, base.width);
        Ok(grad_latent.into_shape_with_order((h, w, c)).expect("row count"))
    }

    /// Gradient of an attention-space energy w.r.t. the latent, given the
    /// energy's partial derivatives w.r.t. each layer's attention.
    pub fn grad_energy_wrt_latent(
        &self,
        state: &LatentState,
        tokens: &TokenSet,
        energy_grad: &[Array2<f64>],
    ) -> Result<Array3<f64>> {
        let cache = self.forward(state, tokens)?;
        self.backward(&cache, tokens, energy_grad)
    }
}

/// Attention-weighted centroid and isotropic spread of a column over `dims`,
/// in that grid's cell coordinates.
pub fn column_moments(column: ndarray::ArrayView1<'_, f64>, dims: GridDims) -> ((f64, f64), f64) {
    let mass: f64 = column.sum();
    let (mut sr, mut sc) = (0.0, 0.0);
    for (i, &a) in column.iter().enumerate() {
        let (r, c) = dims.cell(i);
        sr += a * r as f64;
        sc += a * c as f64;
    }
    let centroid = (sr / mass, sc / mass);
    let mut var = 0.0;
    for (i, &a) in column.iter().enumerate() {
        let (r, c) = dims.cell(i);
        let (dr, dc) = (r as f64 - centroid.0, c as f64 - centroid.1);
        var += a * (dr * dr + dc * dc);
    }
    (centroid, (var / mass / 2.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn row_sums(a: &Array2<f64>) -> Array1<f64> {
        a.sum_axis(Axis(1))
    }

    fn small() -> ModelConfig {
        ModelConfig {
            seed: 3,
            height: 4,
            width: 4,
            channels: 3,
            d_k: 4,
            layers: 2,
        }
    }

    #[test]
    fn embeddings_are_deterministic_unit_rows() {
        let a = embed_tokens(&[4, 9, 4], 8, 11).unwrap();
        let b = embed_tokens(&[4, 9, 4], 8, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.embeddings.row(0), a.embeddings.row(2));
        assert_ne!(a.embeddings.row(0), a.embeddings.row(1));
        for row in a.embeddings.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
        }
        assert!(matches!(embed_tokens(&[], 8, 0), Err(Error::EmptyPrompt)));
        assert!(embed_tokens(&[1], 1, 0).is_err());
    }

    #[test]
    fn identical_embeddings_split_evenly() {
        let tokens = embed_tokens(&[5, 5], 4, 0).unwrap();
        let features = array![[1.0, -2.0, 0.5, 3.0], [0.0, 0.1, 0.2, 0.3]];
        let a = cross_attention(features.view(), &tokens).unwrap();
        for x in a.iter() {
            assert!((x - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_scalar_oracle() {
        // Logits (0, ln 3) give (1/4, 3/4).
        let tokens = TokenSet {
            tokens: vec![0, 1],
            embeddings: array![[0.0, 0.0], [1.0, 0.0]],
        };
        let features = array![[2f64.sqrt() * 3f64.ln(), 0.0]];
        let a = cross_attention(features.view(), &tokens).unwrap();
        assert!((a[[0, 0]] - 0.25).abs() < 1e-12);
        assert!((a[[0, 1]] - 0.75).abs() < 1e-12);
        assert!(cross_attention(array![[1.0, 2.0, 3.0]].view(), &tokens).is_err());
    }

    #[test]
    fn zero_latent_gives_uniform_rows() {
        let cfg = small();
        let model = SandboxModel::new(cfg).unwrap();
        let tokens = embed_tokens(&[1, 2, 3], cfg.d_k, 0).unwrap();
        let state = LatentState::new(Array3::zeros((4, 4, 3)), 1);
        let out = model.denoise_step(&state, &tokens).unwrap();
        // Layer 0 sees a zero latent; later layers see the (spatially
        // constant) value output of layer 0, so every row is identical.
        for map in &out.attention {
            let first = map.values.row(0).to_owned();
            for row in map.values.rows() {
                for (x, y) in row.iter().zip(first.iter()) {
                    assert!((x - y).abs() < 1e-15);
                }
            }
        }
        for x in out.attention[0].values.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = ModelConfig::default();
        let model = SandboxModel::new(cfg).unwrap();
        let tokens = embed_tokens(&[1, 2, 3, 4], cfg.d_k, 0).unwrap();
        let state = LatentState::noise(&cfg, 450, 50);
        let out = model.denoise_step(&state, &tokens).unwrap();
        assert_eq!(out.attention.len(), 2);
        assert_eq!(out.attention[0].dims, GridDims::new(8, 8));
        assert_eq!(out.attention[1].dims, GridDims::new(16, 16));
        for map in &out.attention {
            for s in row_sums(&map.values).iter() {
                assert!((s - 1.0).abs() < 1e-6);
            }
            assert!(map.values.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn perturbation_stays_in_receptive_field() {
        let cfg = ModelConfig::default();
        let model = SandboxModel::new(cfg).unwrap();
        let tokens = embed_tokens(&[1, 2, 3], cfg.d_k, 0).unwrap();
        let state = LatentState::noise(&cfg, 7, 50);
        let before = model.denoise_step(&state, &tokens).unwrap();
        let mut bumped = state.clone();
        bumped.z[[5, 6, 2]] += 1e-3;
        let after = model.denoise_step(&bumped, &tokens).unwrap();
        for (k, (b, a)) in before.attention.iter().zip(&after.attention).enumerate() {
            let pool = cfg.pool_factor(0);
            for i in 0..b.dims.len() {
                let (r, c) = b.dims.cell(i);
                // Base-resolution cell of this row, then its coarsest block.
                let scale = cfg.pool_factor(k);
                let (br, bc) = (r * scale, c * scale);
                let same_block = br / pool == 5 / pool && bc / pool == 6 / pool;
                let changed = b.values.row(i) != a.values.row(i);
                if !same_block {
                    assert!(!changed, "layer {k} row {i} changed outside receptive field");
                }
            }
            let scale = cfg.pool_factor(k);
            let touched = b.dims.index(5 / scale, 6 / scale);
            assert_ne!(b.values.row(touched), a.values.row(touched));
        }
    }

    #[test]
    fn backward_rejects_bad_shapes_and_is_zero_for_zero_grad() {
        let cfg = small();
        let model = SandboxModel::new(cfg).unwrap();
        let tokens = embed_tokens(&[1, 2], cfg.d_k, 0).unwrap();
        let state = LatentState::noise(&cfg, 1, 1);
        let zeros: Vec<_> = (0..2)
            .map(|k| Array2::zeros((cfg.layer_dims(k).len(), 2)))
            .collect();
        let g = model.grad_energy_wrt_latent(&state, &tokens, &zeros).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(model.grad_energy_wrt_latent(&state, &tokens, &zeros[..1]).is_err());
        let wrong = vec![Array2::zeros((3, 2)), zeros[1].clone()];
        assert!(model.grad_energy_wrt_latent(&state, &tokens, &wrong).is_err());
    }

    #[test]
    fn column_moments_of_point_mass() {
        let dims = GridDims::new(4, 4);
        let mut col = Array1::from_elem(16, 1e-300);
        col[dims.index(1, 2)] = 1.0;
        let ((r, c), s) = column_moments(col.view(), dims);
        assert!((r - 1.0).abs() < 1e-12 && (c - 2.0).abs() < 1e-12 && s < 1e-12);
    }
}
