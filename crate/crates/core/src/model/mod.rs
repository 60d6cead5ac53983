//! Dual-branch column-boundary network.
//!
//! ```text
//! image ─ shared 4-scale conv backbone ─ per-branch height compression ─┐
//!   (pano: circular padding, pp: zero padding)                          │
//!   flatten height into channels, resize width, concat scales ──────────┘
//!   ─ (pp: zero-pad to panorama width) ─ positional embedding
//!   ─ [window, global, shifted window, global] x repeats ─ linear head
//!   ─ ceiling / floor latitude per column
//! ```

pub mod checkpoint;
pub mod config;
pub mod flops;
pub mod graph;
pub mod params;
pub mod tensor;

use std::sync::Arc;

pub use config::{Branch, ModelConfig, Placement, StageSpec, SwgConfig};
pub use flops::{count_flops, FlopsReport};
pub use graph::{ColumnMix, ConvGeom, Graph, HPad, Var};
pub use params::Params;
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::raster::RgbImage;
use params::{branch_tag, kernel_for_stride};

/// Which attention pattern a transformer block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Window,
    Global,
    ShiftedWindow,
}

pub fn block_kind(index: usize) -> BlockKind {
    match index % 4 {
        0 => BlockKind::Window,
        2 => BlockKind::ShiftedWindow,
        _ => BlockKind::Global,
    }
}

/// Network definition: a validated config plus cached resampling maps.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    upsample: [Vec<Arc<ColumnMix>>; 2],
    pad_pp: Arc<ColumnMix>,
    roll: Arc<ColumnMix>,
    unroll: Arc<ColumnMix>,
}

fn branch_index(branch: Branch) -> usize {
    match branch {
        Branch::Pano => 0,
        Branch::Pp => 1,
    }
}

/// `[3, h, w]` tensor from an RGB image.
pub fn image_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width(), img.height());
    let mut data = vec![0.0; 3 * w * h];
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f64;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Appends the last column before and the first column after a feature map
/// of shape `[.., w]`.
pub fn circular_extend(x: &Tensor) -> Tensor {
    let w = *x.shape().last().expect("rank >= 1");
    ColumnMix::circular_extend(w).apply(x)
}

/// Zero-pads perspective maps `[c, w_pp]` to the panorama width and returns
/// the batch (panoramas first) with per-item column validity.
pub fn zero_pad_and_concat(
    pano: &[Tensor],
    pp: &[Tensor],
    pano_width: usize,
    placement: Placement,
) -> Result<(Vec<Tensor>, Vec<Vec<bool>>)> {
    let channels = pano.first().or(pp.first()).map(|t| t.dim(0));
    let mut batch = Vec::with_capacity(pano.len() + pp.len());
    let mut masks = Vec::with_capacity(pano.len() + pp.len());
    for t in pano.iter().chain(pp) {
        if Some(t.dim(0)) != channels {
            return Err(Error::Shape(format!(
                "feature maps disagree on channel count ({} vs {:?})",
                t.dim(0),
                channels
            )));
        }
    }
    for t in pano {
        if t.dim(1) != pano_width {
            return Err(Error::Shape("panorama map has the wrong width".into()));
        }
        batch.push(t.clone());
        masks.push(vec![true; pano_width]);
    }
    for t in pp {
        let w = t.dim(1);
        if w > pano_width {
            return Err(Error::Shape("perspective map wider than panorama map".into()));
        }
        let offset = match placement {
            Placement::Centered => (pano_width - w) / 2,
            Placement::Left => 0,
        };
        batch.push(ColumnMix::place(w, pano_width, offset).apply(t));
        masks.push((0..pano_width).map(|j| (offset..offset + w).contains(&j)).collect());
    }
    Ok((batch, masks))
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let strides = config.scale_strides();
        let upsample = [Branch::Pano, Branch::Pp].map(|b| {
            let circular = b == Branch::Pano;
            strides
                .iter()
                .map(|s| {
                    Arc::new(ColumnMix::linear_resize(
                        config.input_width(b) / s,
                        config.feature_width(b),
                        circular,
                    ))
                })
                .collect()
        });
        let l = config.pano_feature_width;
        let half = config.swg.window_size / 2;
        Ok(Self {
            pad_pp: Arc::new(ColumnMix::place(config.pp_feature_width, l, config.pp_offset())),
            roll: Arc::new(ColumnMix::roll(l, half)),
            unroll: Arc::new(ColumnMix::roll(l, l - half)),
            upsample,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init_params(&self, seed: u64) -> Params {
        Params::init(&self.config, seed)
    }

    fn check_params(&self, params: &Params) -> Result<()> {
        if params.matches(&self.config) {
            Ok(())
        } else {
            Err(Error::Shape("parameters do not match the model config".into()))
        }
    }

    fn hpad(&self, branch: Branch) -> HPad {
        match branch {
            Branch::Pano => self.config.pano_backbone_hpad,
            Branch::Pp => HPad::Zero,
        }
    }

    fn check_image(&self, image: &Tensor, branch: Branch) -> Result<()> {
        let want = [3, self.config.pano_input[0], self.config.input_width(branch)];
        if image.shape() != want {
            return Err(Error::Shape(format!(
                "{branch:?} input must be {want:?}, got {:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Backbone on the graph: one feature map per scale.
    pub fn backbone_graph(&self, g: &mut Graph, params: &Params, x: Var, branch: Branch) -> Vec<Var> {
        let hpad = self.hpad(branch);
        let mut h = x;
        let mut scales = Vec::new();
        for (s, stage) in self.config.backbone.iter().enumerate() {
            for l in 0..self.config.layers_per_stage {
                let stride = if l == 0 { stage.stride } else { 1 };
                let k = kernel_for_stride(stride);
                let w = g.param(params.id(&format!("backbone.{s}.{l}.weight")));
                let b = g.param(params.id(&format!("backbone.{s}.{l}.bias")));
                let geom = ConvGeom {
                    stride: (stride, stride),
                    pad: (k / 2, k / 2),
                    hpad,
                };
                let y = g.conv2d(h, w, b, geom);
                h = g.relu(y);
            }
            scales.push(h);
        }
        scales
    }

    /// The three height-compression convs of one scale (no width resize).
    pub fn compress_scale_graph(
        &self,
        g: &mut Graph,
        params: &Params,
        feature: Var,
        scale: usize,
        branch: Branch,
    ) -> Var {
        let tag = branch_tag(branch);
        let hpad = match branch {
            Branch::Pano => HPad::Circular,
            Branch::Pp => HPad::Zero,
        };
        let mut h = feature;
        for l in 0..3 {
            let kh = self.config.compress_strides[l];
            let w = g.param(params.id(&format!("compress.{tag}.{scale}.{l}.weight")));
            let b = g.param(params.id(&format!("compress.{tag}.{scale}.{l}.bias")));
            let geom = ConvGeom {
                stride: (kh, 1),
                pad: (0, 1),
                hpad,
            };
            let y = g.conv2d(h, w, b, geom);
            h = g.relu(y);
        }
        h
    }

    /// Compresses every scale, flattens height into channels, resizes to the
    /// branch feature width and concatenates: `[merged_channels, width]`.
    pub fn branch_compress_graph(&self, g: &mut Graph, params: &Params, scales: &[Var], branch: Branch) -> Var {
        let mut parts = Vec::with_capacity(scales.len());
        for (s, &f) in scales.iter().enumerate() {
            let c = self.compress_scale_graph(g, params, f, s, branch);
            let shape = g.value(c).shape().to_vec();
            let flat = g.reshape(c, &[shape[0] * shape[1], shape[2]]);
            parts.push(g.column_mix(flat, self.upsample[branch_index(branch)][s].clone()));
        }
        g.concat(&parts)
    }

    fn block_graph(&self, g: &mut Graph, params: &Params, x: Var, index: usize, kind: BlockKind) -> Var {
        let p = |g: &mut Graph, n: &str| g.param(params.id(&format!("swg.{index}.{n}")));
        let l = g.value(x).dim(0);
        let window = match kind {
            BlockKind::Global => l,
            _ => self.config.swg.window_size,
        };
        let (g1, b1) = (p(g, "norm1.gamma"), p(g, "norm1.beta"));
        let n1 = g.layer_norm(x, g1, b1);
        let mut qkv = Vec::with_capacity(3);
        for name in ["query", "key", "value"] {
            let (w, b) = (p(g, &format!("{name}.weight")), p(g, &format!("{name}.bias")));
            qkv.push(g.linear(n1, w, b));
        }
        let att = g.attention(qkv[0], qkv[1], qkv[2], self.config.swg.heads, window);
        let (pw, pb) = (p(g, "proj.weight"), p(g, "proj.bias"));
        let att = g.linear(att, pw, pb);
        let x = g.add(x, att);
        let (g2, b2) = (p(g, "norm2.gamma"), p(g, "norm2.beta"));
        let n2 = g.layer_norm(x, g2, b2);
        let (w1, bb1) = (p(g, "ffn1.weight"), p(g, "ffn1.bias"));
        let hdn = g.linear(n2, w1, bb1);
        let hdn = g.gelu(hdn);
        let (w2, bb2) = (p(g, "ffn2.weight"), p(g, "ffn2.bias"));
        let ff = g.linear(hdn, w2, bb2);
        g.add(x, ff)
    }

    /// Rolls tokens `[l, c]` along the sequence axis.
    fn roll_tokens(&self, g: &mut Graph, x: Var, mix: Arc<ColumnMix>) -> Var {
        let t = g.transpose(x);
        let r = g.column_mix(t, mix);
        g.transpose(r)
    }

    /// One transformer block on tokens `[l, c]`.
    pub fn block(&self, g: &mut Graph, params: &Params, x: Var, index: usize) -> Var {
        match block_kind(index) {
            BlockKind::ShiftedWindow => {
                let rolled = self.roll_tokens(g, x, self.roll.clone());
                let y = self.block_graph(g, params, rolled, index, BlockKind::ShiftedWindow);
                self.roll_tokens(g, y, self.unroll.clone())
            }
            kind => self.block_graph(g, params, x, index, kind),
        }
    }

    /// Runs an attention block with an explicit pattern, bypassing the
    /// position-derived schedule (used to test the shifted-window identity).
    pub fn block_as(&self, g: &mut Graph, params: &Params, x: Var, index: usize, kind: BlockKind) -> Var {
        self.block_graph(g, params, x, index, kind)
    }

    /// Tokens `[l, c]` through every transformer block.
    pub fn swg_graph(&self, g: &mut Graph, params: &Params, tokens: Var) -> Var {
        let mut x = tokens;
        for b in 0..self.config.swg.repeats * 4 {
            x = self.block(g, params, x, b);
        }
        x
    }

    /// Features `[c, l]` to latitudes `[2, l]` (row 0 ceiling, row 1 floor).
    pub fn head_graph(&self, g: &mut Graph, params: &Params, features: Var) -> Var {
        let gam = g.param(params.id("norm.gamma"));
        let bet = g.param(params.id("norm.beta"));
        let t = g.transpose(features);
        let n = g.layer_norm(t, gam, bet);
        let w = g.param(params.id("head.weight"));
        let b = g.param(params.id("head.bias"));
        let y = g.linear(n, w, b);
        let y = g.transpose(y);
        g.squash(y)
    }

    /// Image `[3, h, w]` to latitudes `[2, pano_feature_width]`. Perspective
    /// items are zero-padded to the panorama width before the transformer.
    pub fn forward_graph(&self, g: &mut Graph, params: &Params, image: Var, branch: Branch) -> Var {
        let scales = self.backbone_graph(g, params, image, branch);
        let mut f = self.branch_compress_graph(g, params, &scales, branch);
        if branch == Branch::Pp {
            f = g.column_mix(f, self.pad_pp.clone());
        }
        let tokens = g.transpose(f);
        let pos = g.param(params.id("pos_embed"));
        let tokens = g.add(tokens, pos);
        let out = self.swg_graph(g, params, tokens);
        let out = g.transpose(out);
        self.head_graph(g, params, out)
    }

    pub fn backbone_forward(&self, image: &Tensor, branch: Branch, params: &Params) -> Result<Vec<Tensor>> {
        self.check_params(params)?;
        self.check_image(image, branch)?;
        let mut g = Graph::new(params.tensors());
        let x = g.input(image.clone());
        let scales = self.backbone_graph(&mut g, params, x, branch);
        Ok(scales.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Compression of one backbone scale, before the width resize.
    pub fn compress_scale(&self, feature: &Tensor, scale: usize, branch: Branch, params: &Params) -> Result<Tensor> {
        self.check_params(params)?;
        let mut g = Graph::new(params.tensors());
        let x = g.input(feature.clone());
        let y = self.compress_scale_graph(&mut g, params, x, scale, branch);
        Ok(g.value(y).clone())
    }

    pub fn branch_compress(&self, scales: &[Tensor], branch: Branch, params: &Params) -> Result<Tensor> {
        self.check_params(params)?;
        if scales.len() != self.config.backbone.len() {
            return Err(Error::Shape("expected one feature map per backbone scale".into()));
        }
        let cs: usize = self.config.compress_strides.iter().product();
        for (s, f) in scales.iter().enumerate() {
            if f.shape().len() != 3 || f.dim(1) % cs != 0 {
                return Err(Error::Shape(format!(
                    "scale {s} height not divisible by compression factor {cs}"
                )));
            }
        }
        let mut g = Graph::new(params.tensors());
        let vars: Vec<Var> = scales.iter().map(|t| g.input(t.clone())).collect();
        let y = self.branch_compress_graph(&mut g, params, &vars, branch);
        Ok(g.value(y).clone())
    }

    /// Transformer over merged features `[c, l]`; returns the same shape.
    pub fn swg_transformer(&self, features: &Tensor, params: &Params) -> Result<Tensor> {
        self.check_params(params)?;
        let l = features.dim(1);
        if !l.is_multiple_of(self.config.swg.window_size) || l != self.config.pano_feature_width {
            return Err(Error::Shape(format!(
                "{l} columns incompatible with window size {}",
                self.config.swg.window_size
            )));
        }
        let mut g = Graph::new(params.tensors());
        let x = g.input(features.transposed());
        let y = self.swg_graph(&mut g, params, x);
        Ok(g.value(y).transposed())
    }

    /// Per-column linear head: `(ceiling, floor)` latitudes.
    pub fn head_predict(&self, features: &Tensor, params: &Params) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_params(params)?;
        let mut g = Graph::new(params.tensors());
        let x = g.input(features.clone());
        let y = self.head_graph(&mut g, params, x);
        let v = g.value(y);
        let l = v.dim(1);
        Ok((v.data()[..l].to_vec(), v.data()[l..].to_vec()))
    }

    /// Full inference for one image.
    pub fn predict(&self, image: &Tensor, branch: Branch, params: &Params) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_params(params)?;
        self.check_image(image, branch)?;
        let mut g = Graph::new(params.tensors());
        let x = g.input(image.clone());
        let y = self.forward_graph(&mut g, params, x, branch);
        let v = g.value(y);
        let l = v.dim(1);
        Ok((v.data()[..l].to_vec(), v.data()[l..].to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn backbone_scale_widths() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let params = model.init_params(0);
        let pano = model
            .backbone_forward(&random(&[3, 64, 128], 1), Branch::Pano, &params)
            .unwrap();
        let widths: Vec<usize> = pano.iter().map(|t| t.dim(2)).collect();
        assert_eq!(widths, vec![32, 16, 8, 4]);
        let pp = model
            .backbone_forward(&random(&[3, 64, 32], 1), Branch::Pp, &params)
            .unwrap();
        let widths: Vec<usize> = pp.iter().map(|t| t.dim(2)).collect();
        assert_eq!(widths, vec![8, 4, 2, 1]);
        assert!(model
            .backbone_forward(&random(&[3, 64, 100], 1), Branch::Pano, &params)
            .is_err());
    }

    #[test]
    fn branches_share_backbone_weights() {
        let mut config = ModelConfig::toy();
        config.pano_backbone_hpad = HPad::Zero;
        let model = Model::new(config).unwrap();
        let params = model.init_params(0);
        // same tensor through both paths: only the padding rule could differ
        let img = random(&[3, 64, 128], 2);
        let a = model.backbone_forward(&img, Branch::Pano, &params).unwrap();
        let mut g = Graph::new(params.tensors());
        let x = g.input(img.clone());
        let b = model.backbone_graph(&mut g, &params, x, Branch::Pp);
        for (ta, vb) in a.iter().zip(b) {
            assert_eq!(ta, g.value(vb));
        }
    }

    #[test]
    fn toy_branch_output_shapes() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let params = model.init_params(0);
        for (branch, w, fw) in [(Branch::Pano, 128, 32), (Branch::Pp, 32, 8)] {
            let scales = model
                .backbone_forward(&random(&[3, 64, w], 3), branch, &params)
                .unwrap();
            let merged = model.branch_compress(&scales, branch, &params).unwrap();
            assert_eq!(merged.shape(), &[64, fw]);
        }
    }

    #[test]
    fn circular_extend_definition() {
        let x = Tensor::from_vec(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let e = circular_extend(&x);
        assert_eq!(e.shape(), &[2, 6]);
        assert_eq!(e.data(), &[4.0, 1.0, 2.0, 3.0, 4.0, 1.0, 8.0, 5.0, 6.0, 7.0, 8.0, 5.0]);
        let c = Tensor::filled(&[3, 5], 2.5);
        assert_eq!(circular_extend(&c), Tensor::filled(&[3, 7], 2.5));
    }

    #[test]
    fn circular_conv_equals_explicit_extension() {
        let x = random(&[2, 4, 6], 4);
        let w = random(&[3, 2, 2, 3], 5);
        let b = random(&[3], 6);
        let wrap = graph::conv2d_forward(
            &x,
            &w,
            &b,
            ConvGeom {
                stride: (2, 1),
                pad: (0, 1),
                hpad: HPad::Circular,
            },
        );
        let ext = graph::conv2d_forward(
            &circular_extend(&x),
            &w,
            &b,
            ConvGeom {
                stride: (2, 1),
                pad: (0, 0),
                hpad: HPad::Zero,
            },
        );
        assert_eq!(wrap, ext);
    }

    #[test]
    fn zero_pad_merge() {
        let pano = vec![Tensor::filled(&[4, 256], 0.5)];
        let pp = vec![Tensor::filled(&[4, 64], 1.0), Tensor::filled(&[4, 64], 1.0)];
        let (batch, masks) = zero_pad_and_concat(&pano, &pp, 256, Placement::Centered).unwrap();
        assert_eq!(batch.len(), 3);
        for j in 0..256 {
            let inside = (96..160).contains(&j);
            assert_eq!(batch[1].data()[j] != 0.0, inside);
            assert_eq!(masks[1][j], inside);
        }
        assert_eq!(batch[0], pano[0]);
        let (only, _) = zero_pad_and_concat(&pano, &[], 256, Placement::Centered).unwrap();
        assert_eq!(only, pano);
        assert!(zero_pad_and_concat(&pano, &[Tensor::zeros(&[5, 64])], 256, Placement::Centered).is_err());
        let (left, _) = zero_pad_and_concat(&[], &pp[..1], 256, Placement::Left).unwrap();
        assert_eq!(left[0].data()[0], 1.0);
    }

    #[test]
    fn transformer_keeps_shape_and_residual_identity() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let mut params = model.init_params(1);
        let x = random(&[16, 16], 7);
        assert_eq!(model.swg_transformer(&x, &params).unwrap().shape(), &[16, 16]);
        for b in 0..8 {
            for name in ["proj", "ffn2"] {
                params.get_mut(&format!("swg.{b}.{name}.weight")).scale(0.0);
                params.get_mut(&format!("swg.{b}.{name}.bias")).scale(0.0);
            }
        }
        assert_eq!(model.swg_transformer(&x, &params).unwrap(), x);
    }

    #[test]
    fn shifted_window_is_rolled_window() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let params = model.init_params(2);
        let x = random(&[16, 16], 8);
        let mut g = Graph::new(params.tensors());
        let xv = g.input(x.clone());
        let sw = model.block(&mut g, &params, xv, 2);
        let sw = g.value(sw).clone();

        let half = 4;
        let rolled = ColumnMix::roll(16, half).apply(&x.transposed()).transposed();
        let mut g2 = Graph::new(params.tensors());
        let rv = g2.input(rolled);
        let w = model.block_as(&mut g2, &params, rv, 2, BlockKind::Window);
        let unrolled = ColumnMix::roll(16, 16 - half)
            .apply(&g2.value(w).transposed())
            .transposed();
        assert_eq!(sw, unrolled);
    }

    #[test]
    fn head_zero_weights_and_rotation() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let mut params = model.init_params(3);
        let f = random(&[16, 32], 9);
        let (c, fl) = model.head_predict(&f, &params).unwrap();
        let rolled = ColumnMix::roll(32, 5).apply(&f);
        let (c2, fl2) = model.head_predict(&rolled, &params).unwrap();
        for j in 0..32 {
            assert!((c2[j] - c[(j + 5) % 32]).abs() < 1e-12);
            assert!((fl2[j] - fl[(j + 5) % 32]).abs() < 1e-12);
        }
        params.get_mut("head.weight").scale(0.0);
        let (c, fl) = model.head_predict(&f, &params).unwrap();
        assert!(c.iter().all(|&v| (v - std::f64::consts::FRAC_PI_4).abs() < 1e-15));
        assert!(fl.iter().all(|&v| (v + std::f64::consts::FRAC_PI_4).abs() < 1e-15));
    }

    #[test]
    fn forward_shapes_for_both_branches() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let params = model.init_params(4);
        for (branch, w) in [(Branch::Pano, 128), (Branch::Pp, 32)] {
            let (c, f) = model.predict(&random(&[3, 64, w], 10), branch, &params).unwrap();
            assert_eq!((c.len(), f.len()), (32, 32));
            assert!(c.iter().all(|&v| v > 0.0) && f.iter().all(|&v| v < 0.0));
        }
    }
}
