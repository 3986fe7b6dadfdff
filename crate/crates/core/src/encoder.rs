//! The image encoder: 3D patchification, masked-token sampling, a pre-norm
//! transformer trunk over patch embeddings, and the mean-pooled feature
//! vector used for retrieval.

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Linear, Trunk, TrunkCache};
use crate::nn::{Init, ParamId, ParamStore};
use crate::seeding::stream_rng;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Patch extents (px, py, pz); must divide the grid dims exactly.
    pub patch_size: [usize; 3],
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl EncoderConfig {
    /// Small configuration for CPU-scale runs on a 32x32x16 grid.
    pub fn desk() -> EncoderConfig {
        EncoderConfig {
            patch_size: [8, 8, 8],
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
        }
    }

    /// Defaults sized for the full 96x112x48 grid, with the 768-dim feature.
    /// Depth and head count are conventional ViT-Base choices.
    pub fn canonical() -> EncoderConfig {
        EncoderConfig {
            patch_size: [16, 16, 8],
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4.0,
        }
    }

    /// The retrieval feature length equals the embedding width (mean pooling
    /// preserves the token dimension).
    pub fn feature_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        for (axis, (d, p)) in dims.iter().zip(self.patch_size.iter()).enumerate() {
            if *p == 0 || d % p != 0 {
                let name = ['x', 'y', 'z'][axis];
                return Err(Error::PatchDivisibility {
                    axis: name,
                    dim: *d,
                    patch: *p,
                });
            }
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patch-grid extents (gx, gy, gz).
    pub fn grid(&self, dims: [usize; 3]) -> [usize; 3] {
        [
            dims[0] / self.patch_size[0],
            dims[1] / self.patch_size[1],
            dims[2] / self.patch_size[2],
        ]
    }

    pub fn token_count(&self, dims: [usize; 3]) -> usize {
        let g = self.grid(dims);
        g[0] * g[1] * g[2]
    }

    pub fn token_dim(&self, channels: usize) -> usize {
        channels * self.patch_size[0] * self.patch_size[1] * self.patch_size[2]
    }
}

/// Reconstruction decoder sizing: narrower and shallower than the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl DecoderConfig {
    /// Half the encoder width, a single block.
    pub fn derived(enc: &EncoderConfig) -> DecoderConfig {
        let embed_dim = (enc.embed_dim / 2).max(4);
        let heads = (enc.heads / 2).max(1);
        DecoderConfig {
            embed_dim: embed_dim - embed_dim % heads,
            depth: 1,
            heads,
        }
    }
}

/// Flattened volume patches in x-fastest raster order over the patch grid.
/// Within a token: channel-major, then x-fastest, i.e. index =
/// lx + px*(ly + py*(lz + pz*c)).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub tokens: Array2<f64>,
    pub grid_shape: [usize; 3],
    pub patch_size: [usize; 3],
    pub channels: usize,
    pub spacing: [f64; 3],
}

impl PatchGrid {
    pub fn token_count(&self) -> usize {
        self.tokens.nrows()
    }
}

/// Token index of the patch containing voxel (x, y, z) and the position of
/// channel `c`'s copy of that voxel inside the flattened token.
pub fn voxel_token_position(
    cfg: &EncoderConfig,
    dims: [usize; 3],
    c: usize,
    x: usize,
    y: usize,
    z: usize,
) -> (usize, usize) {
    let [px, py, pz] = cfg.patch_size;
    let g = cfg.grid(dims);
    let (gx, gy) = (g[0], g[1]);
    let token = (x / px) + gx * ((y / py) + gy * (z / pz));
    let (lx, ly, lz) = (x % px, y % py, z % pz);
    let inner = lx + px * (ly + py * (lz + pz * c));
    (token, inner)
}

/// Lossless rearrangement of a volume into flattened patch tokens.
pub fn patchify(v: &Volume, cfg: &EncoderConfig) -> Result<PatchGrid> {
    let dims = v.dims();
    cfg.validate(dims)?;
    let [px, py, pz] = cfg.patch_size;
    let grid = cfg.grid(dims);
    let p_total = grid[0] * grid[1] * grid[2];
    let token_dim = cfg.token_dim(v.channels());
    let mut tokens = Array2::zeros((p_total, token_dim));
    let data = v.data();
    for c in 0..v.channels() {
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let token = (x / px) + grid[0] * ((y / py) + grid[1] * (z / pz));
                    let inner = (x % px) + px * ((y % py) + py * ((z % pz) + pz * c));
                    tokens[[token, inner]] = data[[c, z, y, x]] as f64;
                }
            }
        }
    }
    Ok(PatchGrid {
        tokens,
        grid_shape: grid,
        patch_size: cfg.patch_size,
        channels: v.channels(),
        spacing: v.spacing(),
    })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(g: &PatchGrid) -> Result<Volume> {
    let [gx, gy, gz] = g.grid_shape;
    let [px, py, pz] = g.patch_size;
    let expected_tokens = gx * gy * gz;
    let expected_dim = g.channels * px * py * pz;
    if g.tokens.nrows() != expected_tokens || g.tokens.ncols() != expected_dim {
        return Err(Error::VolumeShape {
            context: format!(
                "token matrix {}x{} does not match grid {:?} / patch {:?} / {} channels",
                g.tokens.nrows(),
                g.tokens.ncols(),
                g.grid_shape,
                g.patch_size,
                g.channels
            ),
        });
    }
    let dims = [gx * px, gy * py, gz * pz];
    let mut data = Array4::<f32>::zeros((g.channels, dims[2], dims[1], dims[0]));
    for c in 0..g.channels {
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let token = (x / px) + gx * ((y / py) + gy * (z / pz));
                    let inner = (x % px) + px * ((y % py) + py * ((z % pz) + pz * c));
                    data[[c, z, y, x]] = g.tokens[[token, inner]] as f32;
                }
            }
        }
    }
    Volume::new(data, g.spacing)
}

/// Which token indices stay visible to the encoder. `q` is the visible
/// fraction: |visible| = round(q * P), the remaining tokens are masked and
/// must be reconstructed.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub q: f64,
}

impl MaskPlan {
    pub fn token_count(&self) -> usize {
        self.visible.len() + self.masked.len()
    }
}

/// Uniformly random visible subset of size round(q*P); deterministic per seed.
pub fn sample_mask(p: usize, q: f64, seed: u64) -> Result<MaskPlan> {
    if p < 2 || !(0.0 < q && q < 1.0) {
        return Err(Error::Config(format!("mask needs P >= 2 and 0 < q < 1, got P={p}, q={q}")));
    }
    let n_visible = (q * p as f64).round() as usize;
    if n_visible == 0 || n_visible == p {
        return Err(Error::DegenerateMask {
            visible: n_visible,
            total: p,
        });
    }
    let mut rng = stream_rng(seed, "mask-plan", 0);
    let mut indices: Vec<usize> = (0..p).collect();
    // Partial Fisher-Yates: the first n_visible entries become the sample.
    for i in 0..n_visible {
        let j = rng.random_range(i..p);
        indices.swap(i, j);
    }
    let mut visible: Vec<usize> = indices[..n_visible].to_vec();
    let mut masked: Vec<usize> = indices[n_visible..].to_vec();
    visible.sort_unstable();
    masked.sort_unstable();
    Ok(MaskPlan { visible, masked, q })
}

/// The encoder output embedding used for retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Patch embedding + learned positional embeddings + pre-norm trunk.
#[derive(Debug, Clone)]
pub struct VitEncoder {
    pub cfg: EncoderConfig,
    pub dims: [usize; 3],
    pub channels: usize,
    pub embed: Linear,
    pub pos: ParamId,
    pub trunk: Trunk,
}

pub struct EncoderCache {
    pub tokens: Array2<f64>,
    pub positions: Vec<usize>,
    pub batch: usize,
    pub tokens_per_sample: usize,
    trunk: TrunkCache,
}

impl VitEncoder {
    /// Registers all encoder parameters in `store` under the `encoder.` prefix.
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &EncoderConfig,
        dims: [usize; 3],
        channels: usize,
    ) -> Result<VitEncoder> {
        cfg.validate(dims)?;
        let p_total = cfg.token_count(dims);
        let embed = Linear::new(store, rng, "encoder.embed", cfg.token_dim(channels), cfg.embed_dim);
        let pos = store.add("encoder.pos", &[p_total, cfg.embed_dim], Init::Normal(0.02), rng);
        let trunk = Trunk::new(
            store,
            rng,
            "encoder",
            cfg.embed_dim,
            cfg.depth,
            cfg.heads,
            cfg.mlp_ratio,
        );
        Ok(VitEncoder {
            cfg: *cfg,
            dims,
            channels,
            embed,
            pos,
            trunk,
        })
    }

    pub fn token_count(&self) -> usize {
        self.cfg.token_count(self.dims)
    }

    /// Training-mode forward over packed token rows. `positions[r]` is the
    /// original patch index of row `r`, used to select positional embeddings.
    pub fn forward_tokens(
        &self,
        store: &ParamStore,
        tokens: Array2<f64>,
        positions: Vec<usize>,
        batch: usize,
        tokens_per_sample: usize,
    ) -> (Array2<f64>, EncoderCache) {
        debug_assert_eq!(tokens.nrows(), batch * tokens_per_sample);
        debug_assert_eq!(positions.len(), tokens.nrows());
        let mut x = self.embed.forward(store, &tokens);
        let pos = store.view2(self.pos);
        for (r, &p) in positions.iter().enumerate() {
            let mut row = x.row_mut(r);
            row += &pos.row(p);
        }
        let (y, trunk) = self.trunk.forward(store, x, batch, tokens_per_sample);
        (
            y,
            EncoderCache {
                tokens,
                positions,
                batch,
                tokens_per_sample,
                trunk,
            },
        )
    }

    /// Backward through trunk, positional embeddings and patch embedding;
    /// returns the gradient w.r.t. the input token matrix.
    pub fn backward_tokens(
        &self,
        store: &mut ParamStore,
        cache: &EncoderCache,
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let dx = self.trunk.backward(store, &cache.trunk, dy);
        let p_total = self.token_count();
        let mut dpos = Array2::<f64>::zeros((p_total, self.cfg.embed_dim));
        for (r, &p) in cache.positions.iter().enumerate() {
            let mut row = dpos.row_mut(p);
            row += &dx.row(r);
        }
        store.accum_grad(self.pos, dpos.as_slice().expect("contiguous"));
        self.embed.backward(store, &cache.tokens, &dx)
    }

    /// Inference forward with non-finite rejection; returns per-token
    /// representations for all P patches.
    fn forward_all_checked(&self, store: &ParamStore, v: &Volume) -> Result<Array2<f64>> {
        if v.dims() != self.dims || v.channels() != self.channels {
            return Err(Error::VolumeShape {
                context: format!(
                    "encoder built for dims {:?} x{} channels, got {:?} x{}",
                    self.dims,
                    self.channels,
                    v.dims(),
                    v.channels()
                ),
            });
        }
        let grid = patchify(v, &self.cfg)?;
        let p_total = grid.token_count();
        let mut x = self.embed.forward(store, &grid.tokens);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation {
                layer: "encoder.embed".into(),
                index: 0,
            });
        }
        let pos = store.view2(self.pos);
        for r in 0..p_total {
            let mut row = x.row_mut(r);
            row += &pos.row(r);
        }
        self.trunk.forward_checked(store, x, 1, p_total, "encoder")
    }

    /// Mean-pooled feature for a volume on the canonical grid. Deterministic;
    /// non-finite activations are rejected with the offending layer.
    pub fn encode(&self, store: &ParamStore, v: &Volume) -> Result<FeatureVector> {
        let y = self.forward_all_checked(store, v)?;
        let p = y.nrows() as f64;
        let pooled = y.sum_axis(ndarray::Axis(0)).mapv(|s| s / p);
        Ok(FeatureVector(pooled.to_vec()))
    }

    /// Applies the trunk only to the plan's visible tokens, with positional
    /// embeddings indexed by original patch position.
    pub fn encode_visible(
        &self,
        store: &ParamStore,
        grid: &PatchGrid,
        plan: &MaskPlan,
    ) -> Result<Array2<f64>> {
        let p_total = grid.token_count();
        if plan.token_count() != p_total {
            return Err(Error::Config(format!(
                "mask plan covers {} tokens, grid has {p_total}",
                plan.token_count()
            )));
        }
        if plan.visible.iter().any(|&i| i >= p_total) {
            return Err(Error::Config("mask plan index out of range".into()));
        }
        let n_vis = plan.visible.len();
        let mut tokens = Array2::zeros((n_vis, grid.tokens.ncols()));
        for (r, &p) in plan.visible.iter().enumerate() {
            tokens.row_mut(r).assign(&grid.tokens.row(p));
        }
        let (y, _) = self.forward_tokens(store, tokens, plan.visible.clone(), 1, n_vis);
        Ok(y)
    }

    /// Feature plus the gradient of its L2 norm w.r.t. every input token
    /// element; used by derivative checks.
    pub fn encode_with_input_gradient(
        &self,
        store: &mut ParamStore,
        v: &Volume,
    ) -> Result<(FeatureVector, Array2<f64>)> {
        let grid = patchify(v, &self.cfg)?;
        let p_total = grid.token_count();
        let positions: Vec<usize> = (0..p_total).collect();
        let (y, cache) = self.forward_tokens(store, grid.tokens.clone(), positions, 1, p_total);
        let p = p_total as f64;
        let pooled = y.sum_axis(ndarray::Axis(0)).mapv(|s| s / p);
        let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
        // d||f||/df = f / ||f||, spread back through the mean pool.
        let mut dy = Array2::zeros(y.raw_dim());
        for r in 0..y.nrows() {
            for c in 0..y.ncols() {
                dy[[r, c]] = pooled[c] / norm / p;
            }
        }
        let dtokens = self.backward_tokens(store, &cache, &dy);
        Ok((FeatureVector(pooled.to_vec()), dtokens))
    }
}

/// Builds a fresh encoder with seeded initialization in a new store.
pub fn build_encoder(
    seed: u64,
    cfg: &EncoderConfig,
    dims: [usize; 3],
    channels: usize,
) -> Result<(ParamStore, VitEncoder)> {
    let mut store = ParamStore::new();
    let mut rng = stream_rng(seed, "init", 0);
    let enc = VitEncoder::build(&mut store, &mut rng, cfg, dims, channels)?;
    Ok((store, enc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn random_volume(seed: u64, dims: [usize; 3]) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Volume::zeros(2, dims, [1.0, 1.0, 1.0]);
        for c in 0..2 {
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        v.set(c, x, y, z, rng.random_range(-1.0f32..1.0));
                    }
                }
            }
        }
        v
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            patch_size: [8, 8, 8],
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
        }
    }

    #[test]
    fn token_counts_match_arithmetic() {
        let cfg = EncoderConfig { patch_size: [8, 8, 8], ..EncoderConfig::desk() };
        assert_eq!(cfg.token_count([32, 32, 16]), 32);
        assert_eq!(cfg.token_dim(2), 1024);
        let canonical = EncoderConfig::canonical();
        assert_eq!(canonical.token_count([96, 112, 48]), 252);
    }

    #[test]
    fn patchify_rejects_non_divisible_dims() {
        let v = random_volume(1, [30, 32, 16]);
        let err = patchify(&v, &EncoderConfig::desk()).unwrap_err();
        match err {
            Error::PatchDivisibility { axis, dim, patch } => {
                assert_eq!((axis, dim, patch), ('x', 30, 8));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn patchify_unpatchify_round_trip_bit_exact() {
        let cfg = EncoderConfig::desk();
        for seed in [0u64, 1] {
            let v = random_volume(seed, [32, 32, 16]);
            let g = patchify(&v, &cfg).unwrap();
            assert_eq!(g.token_count(), 32);
            let back = unpatchify(&g).unwrap();
            assert_eq!(back, v);
        }
        let zero = Volume::zeros(2, [32, 32, 16], [1.0, 1.0, 1.0]);
        let g = patchify(&zero, &cfg).unwrap();
        assert_eq!(unpatchify(&g).unwrap(), zero);
    }

    #[test]
    fn swapping_tokens_swaps_exactly_two_voxel_blocks() {
        let cfg = EncoderConfig::desk();
        let v = random_volume(3, [32, 32, 16]);
        let mut g = patchify(&v, &cfg).unwrap();
        let a = 1usize;
        let b = 20usize;
        let row_a = g.tokens.row(a).to_owned();
        let row_b = g.tokens.row(b).to_owned();
        g.tokens.row_mut(a).assign(&row_b);
        g.tokens.row_mut(b).assign(&row_a);
        let swapped = unpatchify(&g).unwrap();
        // Block-diff oracle: voxels outside tokens a and b are untouched,
        // voxels inside moved between the two blocks.
        let dims = v.dims();
        let mut changed = 0usize;
        for c in 0..2 {
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let (token, _) = voxel_token_position(&cfg, dims, c, x, y, z);
                        let orig = v.get(c, x, y, z);
                        let now = swapped.get(c, x, y, z);
                        if token == a || token == b {
                            if orig != now {
                                changed += 1;
                            }
                        } else {
                            assert_eq!(orig, now, "voxel outside swapped blocks moved");
                        }
                    }
                }
            }
        }
        assert!(changed > 0, "swap moved nothing (degenerate random volume)");
    }

    #[test]
    fn mask_arithmetic_and_determinism() {
        let plan = sample_mask(252, 0.25, 7).unwrap();
        assert_eq!(plan.visible.len(), 63);
        assert_eq!(plan.masked.len(), 189);
        let plan32 = sample_mask(32, 0.25, 7).unwrap();
        assert_eq!(plan32.visible.len(), 8);

        assert_eq!(sample_mask(252, 0.25, 9).unwrap(), sample_mask(252, 0.25, 9).unwrap());

        // visible and masked partition 0..P
        let mut all: Vec<usize> = plan32.visible.iter().chain(plan32.masked.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_mask_plans_are_rejected() {
        assert!(matches!(sample_mask(4, 0.01, 0), Err(Error::DegenerateMask { .. })));
        assert!(matches!(sample_mask(4, 0.99, 0), Err(Error::DegenerateMask { .. })));
        assert!(sample_mask(1, 0.5, 0).is_err());
        assert!(sample_mask(10, 0.0, 0).is_err());
    }

    #[test]
    fn encode_shape_and_determinism() {
        let dims = [16, 16, 8];
        let cfg = EncoderConfig {
            patch_size: [8, 8, 8],
            embed_dim: 24,
            depth: 2,
            heads: 4,
            mlp_ratio: 2.0,
        };
        let (store, enc) = build_encoder(5, &cfg, dims, 2).unwrap();
        let v = random_volume(8, dims);
        let f1 = enc.encode(&store, &v).unwrap();
        assert_eq!(f1.dim(), cfg.feature_dim());
        assert!(f1.l2_norm() > 0.0);
        let f2 = enc.encode(&store, &v).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn encode_visible_returns_only_visible_rows() {
        let dims = [32, 32, 16];
        let (store, enc) = build_encoder(5, &small_cfg(), dims, 2).unwrap();
        let v = random_volume(9, dims);
        let grid = patchify(&v, &small_cfg()).unwrap();
        let plan = sample_mask(32, 0.25, 3).unwrap();
        let y = enc.encode_visible(&store, &grid, &plan).unwrap();
        assert_eq!(y.nrows(), 8);
        assert_eq!(y.ncols(), small_cfg().embed_dim);
    }

    #[test]
    fn encode_visible_rejects_inconsistent_plan() {
        let dims = [32, 32, 16];
        let (store, enc) = build_encoder(5, &small_cfg(), dims, 2).unwrap();
        let v = random_volume(9, dims);
        let grid = patchify(&v, &small_cfg()).unwrap();
        let plan = sample_mask(64, 0.25, 3).unwrap();
        assert!(enc.encode_visible(&store, &grid, &plan).is_err());
    }

    #[test]
    fn depth_zero_tokens_do_not_mix() {
        // At depth 0 the encoder is embedding + positions only, so each
        // output row depends only on its own token: a plan covering all but
        // one token must agree with the full forward on shared tokens, and
        // permuting the visible list permutes outputs identically.
        let dims = [32, 32, 16];
        let cfg = EncoderConfig { depth: 0, ..small_cfg() };
        let (store, enc) = build_encoder(6, &cfg, dims, 2).unwrap();
        let v = random_volume(10, dims);
        let grid = patchify(&v, &cfg).unwrap();

        let all_but_one = MaskPlan {
            visible: (0..31).collect(),
            masked: vec![31],
            q: 31.0 / 32.0,
        };
        let partial = enc.encode_visible(&store, &grid, &all_but_one).unwrap();
        let full_positions: Vec<usize> = (0..32).collect();
        let (full, _) = enc.forward_tokens(&store, grid.tokens.clone(), full_positions, 1, 32);
        for r in 0..31 {
            for c in 0..cfg.embed_dim {
                assert!((partial[[r, c]] - full[[r, c]]).abs() < 1e-12);
            }
        }

        // permutation oracle
        let fwd = |vis: Vec<usize>| {
            let n = vis.len();
            let mut tokens = Array2::zeros((n, grid.tokens.ncols()));
            for (r, &p) in vis.iter().enumerate() {
                tokens.row_mut(r).assign(&grid.tokens.row(p));
            }
            enc.forward_tokens(&store, tokens, vis, 1, n).0
        };
        let order_a = vec![2usize, 7, 11, 30];
        let order_b = vec![30usize, 11, 7, 2];
        let ya = fwd(order_a);
        let yb = fwd(order_b);
        for r in 0..4 {
            for c in 0..cfg.embed_dim {
                assert!((ya[[r, c]] - yb[[3 - r, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_positional_embeddings_make_pooling_permutation_invariant() {
        let dims = [32, 32, 16];
        let (mut store, enc) = build_encoder(7, &small_cfg(), dims, 2).unwrap();
        let zeros = vec![0.0; store.entry(enc.pos).len];
        store.set(enc.pos, &zeros);
        let v = random_volume(11, dims);
        let grid = patchify(&v, &small_cfg()).unwrap();

        let pool = |tokens: Array2<f64>, positions: Vec<usize>| {
            let n = positions.len();
            let (y, _) = enc.forward_tokens(&store, tokens, positions, 1, n);
            y.sum_axis(ndarray::Axis(0)).mapv(|s| s / n as f64)
        };
        let identity: Vec<usize> = (0..32).collect();
        let f_id = pool(grid.tokens.clone(), identity.clone());

        // reversed token order (positions zeroed, so embedding order is the
        // only thing that changes)
        let mut reversed = Array2::zeros(grid.tokens.raw_dim());
        for r in 0..32 {
            reversed.row_mut(r).assign(&grid.tokens.row(31 - r));
        }
        let f_rev = pool(reversed, identity);
        for c in 0..small_cfg().embed_dim {
            assert!((f_id[c] - f_rev[c]).abs() < 1e-5, "component {c} differs");
        }
    }

    #[test]
    fn desk_config_directional_derivative_matches_finite_difference() {
        // Central finite difference (h = 1e-3) of the pooled-feature L2 norm
        // w.r.t. a single input voxel, against the analytic input gradient.
        let dims = [32, 32, 16];
        let cfg = EncoderConfig::desk();
        let (mut store, enc) = build_encoder(12, &cfg, dims, 2).unwrap();
        let v = random_volume(13, dims);
        let (_, dtokens) = enc.encode_with_input_gradient(&mut store, &v).unwrap();

        let h = 1e-3f32;
        for (c, x, y, z) in [(0usize, 3usize, 5usize, 2usize), (1, 17, 20, 9)] {
            let mut vp = v.clone();
            vp.set(c, x, y, z, v.get(c, x, y, z) + h);
            let np = enc.encode(&store, &vp).unwrap().l2_norm();
            let mut vm = v.clone();
            vm.set(c, x, y, z, v.get(c, x, y, z) - h);
            let nm = enc.encode(&store, &vm).unwrap().l2_norm();
            let fd = (np - nm) / (2.0 * h as f64);
            let (token, inner) = voxel_token_position(&cfg, dims, c, x, y, z);
            let analytic = dtokens[[token, inner]];
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-12);
            assert!(rel < 1e-3, "voxel ({c},{x},{y},{z}): fd {fd} vs analytic {analytic} rel {rel}");
        }
    }
}
