//! Feature extractors.
//!
//! * `VolumeEncoder` — non-overlapping 3D patch embedding, learned absolute
//!   positions and pre-norm transformer layers; produces a [`TokenSequence`].
//! * `Adapter` — learned latent queries cross-attending to the tokens, then a
//!   linear map into the decoder width. Output row count is independent of the
//!   token count.
//! * `MaskEncoder` — a lightweight transformer over the uncropped mask, mean
//!   pooled to one row and projected to the decoder width.
//!
//! The global feature reuses the volume encoder and adapter parameters
//! verbatim, so the global and texture paths share weights by name.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, Block, LayerNorm, Linear, Mlp, ParamStore};
use crate::region::{GeometryInput, TextureInput};
use crate::tensor::Matrix;
use crate::volume::{Area, RegionMask, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dims: [usize; 3],
    pub patch_size: [usize; 3],
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub adapter_latents: usize,
    pub llm_dim: usize,
    pub mask_input_dims: [usize; 3],
    pub mask_patch_size: [usize; 3],
    pub mask_dim: usize,
    pub mask_layers: usize,
    pub mask_heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dims: [32, 32, 16],
            patch_size: [8, 8, 8],
            model_dim: 128,
            num_layers: 2,
            num_heads: 4,
            adapter_latents: 32,
            llm_dim: 192,
            mask_input_dims: [32, 32, 16],
            mask_patch_size: [8, 8, 8],
            mask_dim: 64,
            mask_layers: 3,
            mask_heads: 4,
        }
    }
}

impl EncoderConfig {
    pub fn paper_scale() -> Self {
        Self {
            input_dims: [256, 256, 64],
            patch_size: [32, 32, 4],
            model_dim: 768,
            num_layers: 12,
            num_heads: 12,
            adapter_latents: 32,
            llm_dim: 4096,
            mask_input_dims: [256, 256, 64],
            mask_patch_size: [32, 32, 4],
            mask_dim: 256,
            mask_layers: 3,
            mask_heads: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.model_dim,
            self.num_layers,
            self.num_heads,
            self.adapter_latents,
            self.llm_dim,
            self.mask_dim,
            self.mask_layers,
            self.mask_heads,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("encoder sizes must be > 0".into()));
        }
        check_divisible(self.input_dims, self.patch_size)?;
        check_divisible(self.mask_input_dims, self.mask_patch_size)?;
        if self.model_dim % self.num_heads != 0 || self.mask_dim % self.mask_heads != 0 {
            return Err(Error::Config("encoder widths must be divisible by head counts".into()));
        }
        Ok(())
    }

    pub fn texture_tokens(&self) -> usize {
        token_count(self.input_dims, self.patch_size)
    }

    pub fn mask_tokens(&self) -> usize {
        token_count(self.mask_input_dims, self.mask_patch_size)
    }
}

fn check_divisible(dims: [usize; 3], patch: [usize; 3]) -> Result<()> {
    if patch.contains(&0) || (0..3).any(|a| dims[a] == 0 || dims[a] % patch[a] != 0) {
        return Err(Error::Shape(format!(
            "input dims {dims:?} not divisible by patch size {patch:?}"
        )));
    }
    Ok(())
}

fn token_count(dims: [usize; 3], patch: [usize; 3]) -> usize {
    (0..3).map(|a| dims[a] / patch[a]).product()
}

/// Which halves of a local feature are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFlags {
    pub texture: bool,
    pub geometry: bool,
}

impl Default for FeatureFlags {
    fn default() -> Self {
        Self {
            texture: true,
            geometry: true,
        }
    }
}

impl FeatureFlags {
    pub fn validate(&self) -> Result<()> {
        if !self.texture {
            return Err(Error::Config(
                "texture features cannot be disabled; only geometry is ablatable".into(),
            ));
        }
        Ok(())
    }
}

/// Splits a grid into non-overlapping patches: one row per patch, patches in
/// row-major order, voxels within a patch in row-major order.
pub fn patchify(data: impl Fn(usize, usize, usize) -> f64, dims: [usize; 3], patch: [usize; 3]) -> Result<Matrix> {
    check_divisible(dims, patch)?;
    let grid = [dims[0] / patch[0], dims[1] / patch[1], dims[2] / patch[2]];
    let pv = patch[0] * patch[1] * patch[2];
    let mut out = Matrix::zeros(grid[0] * grid[1] * grid[2], pv);
    let mut row = 0;
    for gx in 0..grid[0] {
        for gy in 0..grid[1] {
            for gz in 0..grid[2] {
                let r = out.row_mut(row);
                let mut k = 0;
                for x in 0..patch[0] {
                    for y in 0..patch[1] {
                        for z in 0..patch[2] {
                            r[k] = data(gx * patch[0] + x, gy * patch[1] + y, gz * patch[2] + z);
                            k += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Ok(out)
}

pub fn patchify_volume(v: &Volume, patch: [usize; 3]) -> Result<Matrix> {
    patchify(|x, y, z| v.get(x, y, z) as f64, v.dims(), patch)
}

pub fn patchify_mask(m: &RegionMask, patch: [usize; 3]) -> Result<Matrix> {
    patchify(|x, y, z| m.get(x, y, z) as f64, m.dims(), patch)
}

/// Output of the volume encoder: `L x model_dim` on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    pub tokens: Var,
    pub len: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TextureFeature(pub Var);

#[derive(Debug, Clone, Copy)]
pub struct GeometryFeature(pub Var);

#[derive(Debug, Clone, Copy)]
pub struct GlobalFeature(pub Var);

/// Texture rows followed by the geometry row (when enabled).
#[derive(Debug, Clone, Copy)]
pub struct LocalFeature {
    pub rows: Var,
    pub n_rows: usize,
    pub area: Area,
}

fn noop_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

#[derive(Debug, Clone)]
struct PatchTransformer {
    embed: Linear,
    pos: String,
    blocks: Vec<Block>,
    ln: LayerNorm,
    dims: [usize; 3],
    width: usize,
}

impl PatchTransformer {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dims: [usize; 3],
        patch: [usize; 3],
        width: usize,
        layers: usize,
        heads: usize,
    ) -> Self {
        let pv = patch.iter().product();
        let embed = Linear::new(store, rng, &format!("{name}.patch_embed"), pv, width, true);
        let pos = format!("{name}.pos");
        store.insert(pos.clone(), Matrix::uniform(token_count(dims, patch), width, 0.1, rng));
        let blocks = (0..layers)
            .map(|i| Block::new(store, rng, &format!("{name}.block{i}"), width, heads))
            .collect();
        let ln = LayerNorm::new(store, &format!("{name}.ln_out"), width);
        Self {
            embed,
            pos,
            blocks,
            ln,
            dims,
            width,
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, patches: Matrix, dims: [usize; 3]) -> Result<TokenSequence> {
        if dims != self.dims {
            return Err(Error::DimMismatch(format!(
                "encoder input {dims:?}, configured {:?}",
                self.dims
            )));
        }
        let len = patches.rows();
        let x = tape.constant(patches);
        let x = self.embed.forward(tape, store, x);
        let pos = tape.param(store, &self.pos);
        let mut x = tape.add(x, pos);
        let mut rng = noop_rng();
        for b in &self.blocks {
            x = b.forward(tape, store, x, false, 0.0, &mut rng);
        }
        let tokens = self.ln.forward(tape, store, x);
        Ok(TokenSequence {
            tokens,
            len,
            width: self.width,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Adapter {
    pub latents: String,
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: Attention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
    ln_out: LayerNorm,
    pub proj: Linear,
    model_dim: usize,
    n_latents: usize,
}

impl Adapter {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &EncoderConfig) -> Self {
        let d = cfg.model_dim;
        let latents = "fa.latents".to_string();
        store.insert(latents.clone(), Matrix::uniform(cfg.adapter_latents, d, 1.0, rng));
        Self {
            latents,
            ln_q: LayerNorm::new(store, "fa.ln_q", d),
            ln_kv: LayerNorm::new(store, "fa.ln_kv", d),
            attn: Attention::new(store, rng, "fa.cross", d, d, cfg.num_heads),
            ln_mlp: LayerNorm::new(store, "fa.ln_mlp", d),
            mlp: Mlp::new(store, rng, "fa.mlp", d, 4 * d),
            ln_out: LayerNorm::new(store, "fa.ln_out", d),
            proj: Linear::new(store, rng, "fa.proj", d, cfg.llm_dim, true),
            model_dim: d,
            n_latents: cfg.adapter_latents,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, t: &TokenSequence) -> Result<Var> {
        if t.width != self.model_dim {
            return Err(Error::Shape(format!(
                "adapter expects width {}, got {}",
                self.model_dim, t.width
            )));
        }
        let q = tape.param(store, &self.latents);
        let qn = self.ln_q.forward(tape, store, q);
        let kv = self.ln_kv.forward(tape, store, t.tokens);
        let h = self.attn.forward(tape, store, qn, kv, false);
        let x = tape.add(q, h);
        let h = self.ln_mlp.forward(tape, store, x);
        let h = self.mlp.forward(tape, store, h);
        let x = tape.add(x, h);
        let x = self.ln_out.forward(tape, store, x);
        let out = self.proj.forward(tape, store, x);
        debug_assert_eq!(tape.shape(out).0, self.n_latents);
        Ok(out)
    }
}

/// The full set of feature extractors.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub cfg: EncoderConfig,
    volume: PatchTransformer,
    pub adapter: Adapter,
    mask: PatchTransformer,
    pub mask_proj: Linear,
}

impl Encoders {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let volume = PatchTransformer::new(
            store,
            rng,
            "fv",
            cfg.input_dims,
            cfg.patch_size,
            cfg.model_dim,
            cfg.num_layers,
            cfg.num_heads,
        );
        let adapter = Adapter::new(store, rng, cfg);
        let mask = PatchTransformer::new(
            store,
            rng,
            "fm",
            cfg.mask_input_dims,
            cfg.mask_patch_size,
            cfg.mask_dim,
            cfg.mask_layers,
            cfg.mask_heads,
        );
        let mask_proj = Linear::new(store, rng, "fp", cfg.mask_dim, cfg.llm_dim, true);
        Ok(Self {
            cfg: cfg.clone(),
            volume,
            adapter,
            mask,
            mask_proj,
        })
    }

    /// Volume encoder over any grid at the configured input dims.
    pub fn encode_volume(&self, tape: &mut Tape, store: &ParamStore, v: &Volume) -> Result<TokenSequence> {
        let patches = patchify_volume(v, self.cfg.patch_size)?;
        self.volume.forward(tape, store, patches, v.dims())
    }

    pub fn encode_texture(&self, tape: &mut Tape, store: &ParamStore, x: &TextureInput) -> Result<TokenSequence> {
        self.encode_volume(tape, store, &x.grid)
    }

    pub fn adapt(&self, tape: &mut Tape, store: &ParamStore, t: &TokenSequence) -> Result<Var> {
        self.adapter.forward(tape, store, t)
    }

    pub fn texture_feature(&self, tape: &mut Tape, store: &ParamStore, x: &TextureInput) -> Result<TextureFeature> {
        let t = self.encode_texture(tape, store, x)?;
        Ok(TextureFeature(self.adapt(tape, store, &t)?))
    }

    /// Mask encoder, mean pooling over tokens, then projection.
    pub fn encode_mask(&self, tape: &mut Tape, store: &ParamStore, g: &GeometryInput) -> Result<GeometryFeature> {
        let patches = patchify_mask(&g.grid, self.cfg.mask_patch_size)?;
        let t = self.mask.forward(tape, store, patches, g.grid.dims())?;
        let pooled = tape.mean_rows(t.tokens);
        Ok(GeometryFeature(self.mask_proj.forward(tape, store, pooled)))
    }

    pub fn encode_global(&self, tape: &mut Tape, store: &ParamStore, v: &Volume) -> Result<GlobalFeature> {
        let t = self.encode_volume(tape, store, v)?;
        Ok(GlobalFeature(self.adapt(tape, store, &t)?))
    }

    /// Names of the parameters of each block, for per-block checks.
    pub fn block_prefixes() -> [(&'static str, &'static str); 4] {
        [
            ("volume encoder", "fv"),
            ("adapter", "fa"),
            ("mask encoder", "fm"),
            ("mask projection", "fp"),
        ]
    }
}

/// Row-wise concatenation: texture rows, then the geometry row if present.
pub fn build_local_feature(
    tape: &mut Tape,
    texture: TextureFeature,
    geometry: Option<GeometryFeature>,
    area: Area,
    flags: FeatureFlags,
) -> Result<LocalFeature> {
    flags.validate()?;
    let tc = tape.shape(texture.0).1;
    let rows = match (flags.geometry, geometry) {
        (true, Some(g)) => {
            let (_, gc) = tape.shape(g.0);
            if gc != tc {
                return Err(Error::Shape(format!(
                    "texture width {tc} vs geometry width {gc}"
                )));
            }
            tape.concat_rows(&[texture.0, g.0])
        }
        (true, None) => {
            return Err(Error::Config("geometry enabled but no geometry feature".into()))
        }
        (false, _) => texture.0,
    };
    Ok(LocalFeature {
        rows,
        n_rows: tape.shape(rows).0,
        area,
    })
}
