//! Harmonic densely connected encoder.
//!
//! Layer `k` of a block reads the outputs of layers `k - 2^i` for every
//! `2^i` dividing `k`; its width is the growth rate multiplied by the growth
//! multiplier once per extra link, rounded to an even number. The block
//! concatenates the odd-indexed layers and the last layer as its output.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{max_pool_2x2, max_pool_3x3_s2, relu6, BatchNorm2d, Conv2d, Mode};
use crate::params::Scope;

/// Structural hyper-parameters of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct HardnetArch {
    pub stem_channels: [usize; 2],
    pub stage_channels: Vec<usize>,
    pub growth_rates: Vec<usize>,
    pub block_layers: Vec<usize>,
    pub downsample_after: Vec<bool>,
    pub growth_multiplier: f64,
}

impl HardnetArch {
    pub fn hardnet85(stage_channels: Vec<usize>) -> Self {
        Self {
            stem_channels: [48, 96],
            stage_channels,
            growth_rates: vec![24, 24, 28, 36, 48, 256],
            block_layers: vec![8, 16, 16, 16, 16, 4],
            downsample_after: vec![true, false, true, false, true, false],
            growth_multiplier: 1.7,
        }
    }

    pub fn tiny(stage_channels: Vec<usize>) -> Self {
        Self {
            stem_channels: [8, 8],
            stage_channels,
            growth_rates: vec![4; 6],
            block_layers: vec![2; 6],
            downsample_after: vec![true, false, true, false, true, false],
            growth_multiplier: 1.7,
        }
    }

    /// Output stride of every stage's feature map.
    pub fn stage_strides(&self) -> Vec<usize> {
        let mut stride = 4;
        self.downsample_after
            .iter()
            .map(|&down| {
                let s = stride;
                if down {
                    stride *= 2;
                }
                s
            })
            .collect()
    }
}

/// `(out_channels, in_channels, links)` of layer `layer` (1-based; 0 is the block input).
pub fn harmonic_link(
    layer: usize,
    base_channels: usize,
    growth_rate: usize,
    multiplier: f64,
) -> (usize, usize, Vec<usize>) {
    if layer == 0 {
        return (base_channels, 0, Vec::new());
    }
    let mut out = growth_rate as f64;
    let mut links = Vec::new();
    for i in 0..10 {
        let dv = 1usize << i;
        if layer % dv == 0 {
            links.push(layer - dv);
            if i > 0 {
                out *= multiplier;
            }
        }
    }
    let out = ((out + 1.0) as usize / 2) * 2;
    let in_channels = links
        .iter()
        .map(|&l| harmonic_link(l, base_channels, growth_rate, multiplier).0)
        .sum();
    (out, in_channels, links)
}

/// Convolution without bias, batch norm, ReLU6.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnAct {
    pub fn new(
        scope: &mut Scope<'_>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut scope.sub("conv"), cin, cout, kernel, stride, kernel / 2, false)?,
            bn: BatchNorm2d::new(&mut scope.sub("bn"), cout)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        relu6(&self.bn.forward(&self.conv.forward(x)?, mode)?)
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }
}

#[derive(Clone, Debug)]
pub struct HarmonicBlock {
    layers: Vec<ConvBnAct>,
    links: Vec<Vec<usize>>,
    out_channels: usize,
}

impl HarmonicBlock {
    pub fn new(
        scope: &mut Scope<'_>,
        in_channels: usize,
        growth_rate: usize,
        multiplier: f64,
        n_layers: usize,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_layers);
        let mut links = Vec::with_capacity(n_layers);
        let mut out_channels = 0;
        for i in 0..n_layers {
            let (out, inp, link) = harmonic_link(i + 1, in_channels, growth_rate, multiplier);
            layers.push(ConvBnAct::new(&mut scope.sub(format!("layers.{i}")), inp, out, 3, 1)?);
            links.push(link);
            if i % 2 == 0 || i == n_layers - 1 {
                out_channels += out;
            }
        }
        Ok(Self {
            layers,
            links,
            out_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut outputs = vec![x.clone()];
        for (layer, link) in self.layers.iter().zip(&self.links) {
            let inputs: Vec<&Tensor> = link.iter().map(|&i| &outputs[i]).collect();
            let input = if inputs.len() == 1 {
                inputs[0].clone()
            } else {
                Tensor::cat(&inputs, 1)?
            };
            outputs.push(layer.forward(&input, mode)?);
        }
        let last = outputs.len() - 1;
        let kept: Vec<&Tensor> = outputs
            .iter()
            .enumerate()
            .filter(|(i, _)| *i == last || i % 2 == 1)
            .map(|(_, t)| t)
            .collect();
        Ok(Tensor::cat(&kept, 1)?)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.layers.iter().map(|l| l.conv().macs(h, w)).sum()
    }
}

#[derive(Clone, Debug)]
struct Stage {
    block: HarmonicBlock,
    transition: ConvBnAct,
    downsample: bool,
}

/// Stem (3x3/2 conv, 3x3 conv, 3x3/2 max-pool) followed by harmonic stages,
/// each closed by a 1x1 transition convolution.
#[derive(Clone, Debug)]
pub struct HardnetEncoder {
    stem: [ConvBnAct; 2],
    stages: Vec<Stage>,
    arch: HardnetArch,
}

impl HardnetEncoder {
    pub fn new(scope: &mut Scope<'_>, arch: &HardnetArch) -> Result<Self> {
        let [c0, c1] = arch.stem_channels;
        let stem = [
            ConvBnAct::new(&mut scope.sub("stem.0"), 3, c0, 3, 2)?,
            ConvBnAct::new(&mut scope.sub("stem.1"), c0, c1, 3, 1)?,
        ];
        let mut stages = Vec::with_capacity(arch.stage_channels.len());
        let mut ch = c1;
        for (i, &out) in arch.stage_channels.iter().enumerate() {
            let mut s = scope.sub(format!("stages.{i}"));
            let block = HarmonicBlock::new(
                &mut s.sub("block"),
                ch,
                arch.growth_rates[i],
                arch.growth_multiplier,
                arch.block_layers[i],
            )?;
            let transition = ConvBnAct::new(&mut s.sub("transition"), block.out_channels(), out, 1, 1)?;
            stages.push(Stage {
                block,
                transition,
                downsample: arch.downsample_after[i],
            });
            ch = out;
        }
        Ok(Self {
            stem,
            stages,
            arch: arch.clone(),
        })
    }

    pub fn arch(&self) -> &HardnetArch {
        &self.arch
    }

    /// Feature map of every stage, taken after its transition and before
    /// any down-sampling.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let x = self.stem[0].forward(x, mode)?;
        let x = self.stem[1].forward(&x, mode)?;
        // ReLU6 output is non-negative, which the zero-padded pool relies on.
        let mut x = max_pool_3x3_s2(&x)?;
        let mut features = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let y = stage.block.forward(&x, mode)?;
            let y = stage.transition.forward(&y, mode)?;
            x = if stage.downsample { max_pool_2x2(&y)? } else { y.clone() };
            features.push(y);
        }
        Ok(features)
    }

    /// Convolution MACs and the `(h, w)` of every stage output.
    pub fn macs(&self, h: usize, w: usize) -> (u64, Vec<(usize, usize)>) {
        let mut total = self.stem[0].conv().macs(h, w);
        let (h, w) = self.stem[0].conv().output_size(h, w);
        total += self.stem[1].conv().macs(h, w);
        let (mut h, mut w) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
        let mut sizes = Vec::new();
        for stage in &self.stages {
            total += stage.block.macs(h, w);
            total += stage.transition.conv().macs(h, w);
            sizes.push((h, w));
            if stage.downsample {
                h /= 2;
                w /= 2;
            }
        }
        (total, sizes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_links_match_reference_pattern() {
        assert_eq!(harmonic_link(1, 96, 24, 1.7).2, vec![0]);
        assert_eq!(harmonic_link(2, 96, 24, 1.7).2, vec![1, 0]);
        assert_eq!(harmonic_link(4, 96, 24, 1.7).2, vec![3, 2, 0]);
        assert_eq!(harmonic_link(6, 96, 24, 1.7).2, vec![5, 4]);
        // 24 * 1.7 * 1.7 = 69.36 -> 70
        assert_eq!(harmonic_link(4, 96, 24, 1.7).0, 70);
    }

    #[test]
    fn hardnet85_block_widths() {
        // Concatenated block outputs of the 85-layer configuration.
        let arch = HardnetArch::hardnet85(vec![192, 256, 320, 480, 720, 1280]);
        let mut ch = arch.stem_channels[1];
        let mut widths = Vec::new();
        for i in 0..6 {
            let mut out = 0;
            for l in 0..arch.block_layers[i] {
                let (o, _, _) = harmonic_link(l + 1, ch, arch.growth_rates[i], 1.7);
                if l % 2 == 0 || l == arch.block_layers[i] - 1 {
                    out += o;
                }
            }
            widths.push(out);
            ch = arch.stage_channels[i];
        }
        assert_eq!(widths, vec![214, 392, 458, 588, 784, 1252]);
    }

    #[test]
    fn strides() {
        let arch = HardnetArch::tiny(vec![8; 6]);
        assert_eq!(arch.stage_strides(), vec![4, 8, 8, 16, 16, 32]);
    }
}
