//! Analytic operation counts for the convolutional front end.
//!
//! Convention: 2 FLOPs per multiply-accumulate, bias adds and activations not
//! counted; memory is output activation bytes at 4 bytes per element.

use serde::{Deserialize, Serialize};

use super::config::{Branch, ModelConfig};
use super::params::kernel_for_stride;

const BYTES_PER_ELEMENT: u64 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub output_shape: [usize; 3],
    pub flops: u64,
    pub activation_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub branch: Branch,
    pub backbone_flops: u64,
    pub conv1d_flops: u64,
    pub backbone_mem: u64,
    pub conv1d_mem: u64,
    pub layers: Vec<LayerCost>,
}

impl FlopsReport {
    pub fn total_flops(&self) -> u64 {
        self.backbone_flops + self.conv1d_flops
    }
}

fn conv_cost(name: String, cin: usize, cout: usize, kernel: (usize, usize), out: (usize, usize)) -> LayerCost {
    let outputs = (cout * out.0 * out.1) as u64;
    LayerCost {
        name,
        output_shape: [cout, out.0, out.1],
        flops: 2 * outputs * (cin * kernel.0 * kernel.1) as u64,
        activation_bytes: outputs * BYTES_PER_ELEMENT,
    }
}

/// Per-layer costs of the shared backbone and one branch's compression convs
/// for a single input image. Does not require a valid config: a backbone
/// without layers costs nothing.
pub fn count_flops(config: &ModelConfig, branch: Branch) -> FlopsReport {
    let mut h = config.pano_input[0];
    let mut w = config.input_width(branch);
    let mut cin = 3;
    let mut layers = Vec::new();
    let mut scale_inputs = Vec::new();
    for (s, stage) in config.backbone.iter().enumerate() {
        for l in 0..config.layers_per_stage {
            let stride = if l == 0 { stage.stride } else { 1 };
            let k = kernel_for_stride(stride);
            let pad = k / 2;
            h = (h + 2 * pad).saturating_sub(k) / stride + 1;
            w = (w + 2 * pad).saturating_sub(k) / stride + 1;
            layers.push(conv_cost(
                format!("backbone.{s}.{l}"),
                cin,
                stage.channels,
                (k, k),
                (h, w),
            ));
            cin = stage.channels;
        }
        scale_inputs.push((s, cin, h, w));
    }
    let n_backbone = layers.len();
    if config.layers_per_stage > 0 {
        for (s, c, mut hs, ws) in scale_inputs {
            let ch = config.compress_channels(s);
            debug_assert_eq!(ch[0], c);
            for l in 0..3 {
                let kh = config.compress_strides[l];
                hs = hs.saturating_sub(kh) / kh + 1;
                layers.push(conv_cost(
                    format!("compress.{s}.{l}"),
                    ch[l],
                    ch[l + 1],
                    (kh, 3),
                    (hs, ws),
                ));
            }
        }
    }
    let sum = |ls: &[LayerCost], f: fn(&LayerCost) -> u64| ls.iter().map(f).sum::<u64>();
    let (bb, cc) = layers.split_at(n_backbone);
    FlopsReport {
        branch,
        backbone_flops: sum(bb, |l| l.flops),
        conv1d_flops: sum(cc, |l| l.flops),
        backbone_mem: sum(bb, |l| l.activation_bytes),
        conv1d_mem: sum(cc, |l| l.activation_bytes),
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_width_ratio() {
        let c = ModelConfig::full_scale();
        let pano = count_flops(&c, Branch::Pano);
        let pp = count_flops(&c, Branch::Pp);
        let r = pp.backbone_flops as f64 / pano.backbone_flops as f64;
        assert!((r - 0.25).abs() < 0.01, "{r}");
        let r = pp.conv1d_flops as f64 / pano.conv1d_flops as f64;
        assert!((r - 0.25).abs() < 0.01, "{r}");
        let r = pp.backbone_mem as f64 / pano.backbone_mem as f64;
        assert!((r - 0.25).abs() < 0.01, "{r}");
    }

    #[test]
    fn linear_in_width_and_zero_layers() {
        let mut c = ModelConfig::toy();
        let a = count_flops(&c, Branch::Pano);
        c.pano_input = [64, 256];
        let b = count_flops(&c, Branch::Pano);
        assert_eq!(b.backbone_flops, 2 * a.backbone_flops);
        c.layers_per_stage = 0;
        let z = count_flops(&c, Branch::Pano);
        assert_eq!(z.total_flops(), 0);
        assert_eq!(z.backbone_mem + z.conv1d_mem, 0);
    }

    #[test]
    fn monotone_in_height_and_channels() {
        let c = ModelConfig::toy();
        let base = count_flops(&c, Branch::Pp);
        let mut taller = c.clone();
        taller.pano_input = [128, 256];
        assert!(count_flops(&taller, Branch::Pp).total_flops() > base.total_flops());
        let mut wider = c.clone();
        wider.backbone[1].channels = 48;
        assert!(count_flops(&wider, Branch::Pp).backbone_flops > base.backbone_flops);
    }

    #[test]
    fn deterministic() {
        let c = ModelConfig::full_scale();
        assert_eq!(count_flops(&c, Branch::Pano), count_flops(&c, Branch::Pano));
    }
}
