use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderLayer, Forward, Init, Linear, Norm};
use crate::numerics::{ParamId, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageEncoderConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout_p: f64,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            image_h: 16,
            image_w: 16,
            channels: 3,
            patch_size: 4,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            dropout_p: 0.1,
        }
    }
}

impl ImageEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image.image_h", self.image_h),
            ("image.image_w", self.image_w),
            ("image.channels", self.channels),
            ("image.patch_size", self.patch_size),
            ("image.d_model", self.d_model),
            ("image.n_heads", self.n_heads),
            ("image.ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {}×{} not divisible into {}-pixel patches",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "image.d_model {} not divisible by image.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("image.dropout_p must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Number of patches `k`.
    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Raw image, `h × w × c` values in row-major `(row, col, channel)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub values: Vec<f64>,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, c: usize, values: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Dimension(format!("image {h}×{w}×{c} has an empty axis")));
        }
        if values.len() != h * w * c {
            return Err(Error::Dimension(format!(
                "image {h}×{w}×{c} needs {} values, got {}",
                h * w * c,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixel".into()));
        }
        Ok(Self { h, w, c, values })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            values: vec![0.0; h * w * c],
        }
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.values[(row * self.w + col) * self.c + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        self.values[(row * self.w + col) * self.c + ch] = v;
    }
}

/// Cut an image into `P × P` patches.
///
/// Patches are ordered row-major over the patch grid; inside a patch the
/// values run row-major over `(row, col, channel)`.
pub fn patchify(img: &PatchGrid, p: usize) -> Result<Tensor> {
    if p == 0 || img.h % p != 0 || img.w % p != 0 {
        return Err(Error::Dimension(format!(
            "image {}×{} not divisible into {p}-pixel patches",
            img.h, img.w
        )));
    }
    let (gh, gw) = (img.h / p, img.w / p);
    let dim = p * p * img.c;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..p {
                for c in 0..p {
                    for ch in 0..img.c {
                        out.push(img.get(pr * p + r, pc * p + c, ch));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub cfg: ImageEncoderConfig,
    pub patch_proj: Linear,
    pub cls: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub out_norm: Norm,
}

impl ImageEncoder {
    pub fn new(init: &mut Init, cfg: &ImageEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let patch_proj = Linear::new(init, "image.patch_proj", cfg.patch_dim(), d, true);
        let cls = init.embedding("image.cls", 1, d);
        let position_embedding = init.embedding("image.position_embedding", cfg.num_patches() + 1, d);
        let layers = (0..cfg.n_layers)
            .map(|i| {
                EncoderLayer::new(
                    init,
                    &format!("image.layer{i}"),
                    d,
                    cfg.n_heads,
                    cfg.ffn_dim,
                    cfg.dropout_p,
                )
            })
            .collect();
        let out_norm = Norm::new(init, "image.out_norm", d);
        Ok(Self {
            cfg: cfg.clone(),
            patch_proj,
            cls,
            position_embedding,
            layers,
            out_norm,
        })
    }

    /// Standardized image features `H̄ᵛ ∈ ℝ^{(k+1)×d}`; row 0 is CLS.
    pub fn forward(&self, f: &mut Forward, img: &PatchGrid) -> Result<Var> {
        let cfg = &self.cfg;
        if img.h != cfg.image_h || img.w != cfg.image_w || img.c != cfg.channels {
            return Err(Error::Dimension(format!(
                "image {}×{}×{} does not match configured {}×{}×{}",
                img.h, img.w, img.c, cfg.image_h, cfg.image_w, cfg.channels
            )));
        }
        let patches = patchify(img, cfg.patch_size)?;
        let patches = f.input(patches);
        let proj = self.patch_proj.forward(f, patches)?;
        let cls = f.p(self.cls);
        let seq = f.tape.concat_rows(&[cls, proj])?;
        let pos = f.p(self.position_embedding);
        let mut x = f.tape.add(seq, pos)?;
        for layer in &self.layers {
            x = layer.forward(f, x)?;
        }
        let x = f.dropout(x, cfg.dropout_p)?;
        self.out_norm.forward(f, x)
    }
}
