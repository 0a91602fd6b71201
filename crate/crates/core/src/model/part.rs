//! Residual blocks, stacks and heads assembled into a trainable part
//! (encoder, performer or classifier).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    activate, activate_backward, relu, relu_backward_owned, relu_owned, Activation, BatchNorm,
    BnCache, Conv, ConvCache, Mode,
};
use super::tensor::Tensor;
use crate::rng::StreamRng;
use crate::{Error, Result};

pub const BASE_CHANNELS: f64 = 8.0;

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Rounds halves away from zero, so 2.5 -> 3.
pub fn round_half_up(x: f64) -> usize {
    x.round() as usize
}

/// Output channels of stack `s` (0-based).
pub fn stack_channels(k2: f64, s: usize) -> usize {
    round_half_up(BASE_CHANNELS * k2 * (s + 1) as f64).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// 2-D kernels over an `h x w` image.
    Image,
    /// 1-D kernels along `w` of a `1 x w` sequence.
    Sequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub reducer: bool,
    pub groups: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackSpec {
    pub blocks: Vec<BlockSpec>,
    /// Spatial size after the stack.
    pub out_hw: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub layout: Layout,
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    pub k0: usize,
    pub k1: usize,
    pub k2: f64,
    pub stacks: Vec<StackSpec>,
    pub head_channels: usize,
    pub out_channels: usize,
    pub activation: Activation,
}

impl PartSpec {
    pub fn final_hw(&self) -> (usize, usize) {
        self.stacks
            .last()
            .map(|s| s.out_hw)
            .unwrap_or(self.input_hw)
    }
}

fn reduce(d: usize, k: usize) -> usize {
    (d - k) / 2 + 1
}

/// Lays out stacks of `k1` blocks with channel schedule
/// `round(8 k2 (s + 1))` until the smallest spatial size drops below `k0`,
/// then a head that collapses the remaining extent to 1.
pub fn build_part(
    layout: Layout,
    input_channels: usize,
    input_hw: (usize, usize),
    k0: usize,
    k1: usize,
    k2: f64,
    out_channels: usize,
    activation: Activation,
) -> Result<PartSpec> {
    if k0 == 0 || k1 == 0 || !(k2 > 0.0) || out_channels == 0 {
        return Err(Error::Config(format!(
            "invalid part knobs k0={k0} k1={k1} k2={k2}"
        )));
    }
    let extent = |(h, w): (usize, usize)| match layout {
        Layout::Image => h.min(w),
        Layout::Sequence => w,
    };
    if layout == Layout::Sequence && input_hw.0 != 1 {
        return Err(Error::Shape(format!(
            "sequence parts need height 1, got {}",
            input_hw.0
        )));
    }
    if extent(input_hw) < k0 {
        return Err(Error::Shape(format!(
            "input {input_hw:?} smaller than kernel {k0}"
        )));
    }
    let mut stacks = Vec::new();
    let mut hw = input_hw;
    let mut channels = input_channels;
    while extent(hw) >= k0 {
        let out = stack_channels(k2, stacks.len());
        let blocks = (0..k1)
            .map(|b| {
                let cin = if b == 0 { channels } else { out };
                BlockSpec {
                    in_channels: cin,
                    out_channels: out,
                    kernel: k0,
                    reducer: b == k1 - 1,
                    groups: gcd(cin, out),
                }
            })
            .collect();
        hw = match layout {
            Layout::Image => (reduce(hw.0, k0), reduce(hw.1, k0)),
            Layout::Sequence => (1, reduce(hw.1, k0)),
        };
        stacks.push(StackSpec { blocks, out_hw: hw });
        channels = out;
    }
    Ok(PartSpec {
        layout,
        input_channels,
        input_hw,
        k0,
        k1,
        k2,
        stacks,
        head_channels: channels,
        out_channels,
        activation,
    })
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    main: Conv,
    bn1: BatchNorm,
    pointwise: Conv,
    bn2: BatchNorm,
    skip: Conv,
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    conv: Conv,
    bn: BatchNorm,
    out: Conv,
}

/// A part's layers plus its flat parameter vector and batch-norm running
/// statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Part {
    pub spec: PartSpec,
    pub params: Vec<f64>,
    pub stats: Vec<f64>,
    blocks: Vec<Block>,
    head: Head,
}

struct BlockCache {
    input: Tensor,
    main: ConvCache,
    bn1: BnCache,
    a1: Tensor,
    pointwise: ConvCache,
    bn2: BnCache,
    a2: Tensor,
    skip: ConvCache,
}

struct HeadCache {
    input: Tensor,
    conv: ConvCache,
    bn: BnCache,
    a: Tensor,
    out: ConvCache,
    y: Tensor,
}

pub struct PartCache {
    blocks: Vec<BlockCache>,
    head: HeadCache,
    planes: Vec<usize>,
}

struct Alloc {
    params: usize,
    stats: usize,
    convs: Vec<Conv>,
    bns: Vec<BatchNorm>,
}

impl Alloc {
    fn conv(
        &mut self,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        groups: usize,
        bias: bool,
    ) -> Conv {
        let mut c = Conv {
            cin,
            cout,
            kernel,
            stride,
            pad,
            groups,
            bias,
            w_off: self.params,
            b_off: 0,
        };
        c.b_off = c.w_off + c.weight_len();
        self.params += c.param_len();
        self.convs.push(c.clone());
        c
    }

    fn bn(&mut self, c: usize) -> BatchNorm {
        let bn = BatchNorm {
            c,
            gamma_off: self.params,
            beta_off: self.params + c,
            stat_off: self.stats,
        };
        self.params += 2 * c;
        self.stats += 2 * c;
        self.bns.push(bn.clone());
        bn
    }
}

impl Part {
    /// Instantiates a spec with centered uniform fan-in initialization
    /// (`U(-1/sqrt(fan_in), 1/sqrt(fan_in))`), unit BN scales, zero shifts.
    pub fn new(spec: PartSpec, rng: &mut StreamRng) -> Self {
        let mut alloc = Alloc {
            params: 0,
            stats: 0,
            convs: Vec::new(),
            bns: Vec::new(),
        };
        let seq = spec.layout == Layout::Sequence;
        let kern = |k: usize| if seq { (1, k) } else { (k, k) };
        let same = |k: usize| if seq { (0, k / 2) } else { (k / 2, k / 2) };
        let two = if seq { (1, 2) } else { (2, 2) };
        let mut blocks = Vec::new();
        for stack in &spec.stacks {
            for b in &stack.blocks {
                let (stride, pad) = if b.reducer {
                    (two, (0, 0))
                } else {
                    ((1, 1), same(b.kernel))
                };
                let main = alloc.conv(
                    b.in_channels,
                    b.out_channels,
                    kern(b.kernel),
                    stride,
                    pad,
                    b.groups,
                    false,
                );
                let bn1 = alloc.bn(b.out_channels);
                let pointwise = alloc.conv(
                    b.out_channels,
                    b.out_channels,
                    (1, 1),
                    (1, 1),
                    (0, 0),
                    1,
                    false,
                );
                let bn2 = alloc.bn(b.out_channels);
                let skip = if b.reducer {
                    alloc.conv(
                        b.in_channels,
                        b.out_channels,
                        kern(b.kernel),
                        two,
                        (0, 0),
                        b.groups,
                        false,
                    )
                } else {
                    alloc.conv(
                        b.in_channels,
                        b.out_channels,
                        (1, 1),
                        (1, 1),
                        (0, 0),
                        b.groups,
                        false,
                    )
                };
                blocks.push(Block {
                    main,
                    bn1,
                    pointwise,
                    bn2,
                    skip,
                });
            }
        }
        let hw = spec.final_hw();
        let c = spec.head_channels;
        let conv = alloc.conv(c, c, hw, (1, 1), (0, 0), 1, false);
        let bn = alloc.bn(c);
        let out = alloc.conv(
            c,
            spec.out_channels,
            (1, 1),
            (1, 1),
            (0, 0),
            gcd(c, spec.out_channels),
            true,
        );
        let head = Head { conv, bn, out };

        let mut params = vec![0.0; alloc.params];
        for c in &alloc.convs {
            let bound = 1.0 / (c.fan_in() as f64).sqrt();
            for p in &mut params[c.w_off..c.w_off + c.weight_len()] {
                *p = rng.random_range(-bound..bound);
            }
            if c.bias {
                for p in &mut params[c.b_off..c.b_off + c.cout] {
                    *p = rng.random_range(-bound..bound);
                }
            }
        }
        let mut stats = vec![0.0; alloc.stats];
        for bn in &alloc.bns {
            params[bn.gamma_off..bn.gamma_off + bn.c].fill(1.0);
            stats[bn.stat_off + bn.c..bn.stat_off + 2 * bn.c].fill(1.0);
        }
        Part {
            spec,
            params,
            stats,
            blocks,
            head,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = &self.spec;
        if x.c != s.input_channels || (x.h, x.w) != s.input_hw {
            return Err(Error::Shape(format!(
                "part expects {}x{:?}, got {}x{:?}",
                s.input_channels,
                s.input_hw,
                x.c,
                (x.h, x.w)
            )));
        }
        if x.n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }

    /// Output is `[out_channels][N][1][1]`.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, PartCache)> {
        self.check_input(x)?;
        let p = &self.params;
        let st = &self.stats;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut planes = Vec::new();
        for b in &self.blocks {
            let (z, main) = b.main.forward(p, &h);
            let (z, bn1) = b.bn1.forward(p, st, &z, mode);
            planes.push(z.plane());
            let a1 = relu_owned(z);
            let (z, pointwise) = b.pointwise.forward(p, &a1);
            let (z, bn2) = b.bn2.forward(p, st, &z, mode);
            planes.push(z.plane());
            let a2 = relu_owned(z);
            let (mut out, skip) = b.skip.forward(p, &h);
            out.data.iter_mut().zip(&a2.data).for_each(|(o, v)| *o += v);
            caches.push(BlockCache {
                input: std::mem::replace(&mut h, out),
                main,
                bn1,
                a1,
                pointwise,
                bn2,
                a2,
                skip,
            });
        }
        let (z, conv) = self.head.conv.forward(p, &h);
        let (z, bn) = self.head.bn.forward(p, st, &z, mode);
        planes.push(z.plane());
        let a = relu_owned(z);
        let (z, out) = self.head.out.forward(p, &a);
        let y = activate(self.spec.activation, &z);
        let cache = PartCache {
            blocks: caches,
            head: HeadCache {
                input: h,
                conv,
                bn,
                a,
                out,
                y: y.clone(),
            },
            planes,
        };
        Ok((y, cache))
    }

    /// Updates running statistics from a training-mode forward pass.
    pub fn absorb_stats(&mut self, cache: &PartCache) {
        let mut planes = cache.planes.iter();
        for (b, c) in self.blocks.iter().zip(&cache.blocks) {
            b.bn1
                .absorb(&mut self.stats, &c.bn1, *planes.next().unwrap());
            b.bn2
                .absorb(&mut self.stats, &c.bn2, *planes.next().unwrap());
        }
        self.head
            .bn
            .absorb(&mut self.stats, &cache.head.bn, *planes.next().unwrap());
    }

    /// Gradient w.r.t. the part output (after its activation) in, gradient
    /// w.r.t. the input out; parameter gradients accumulate into `grad`.
    pub fn backward(&self, cache: &PartCache, dy: &Tensor, grad: &mut [f64]) -> Tensor {
        let p = &self.params;
        let hc = &cache.head;
        let dz = activate_backward(self.spec.activation, &hc.y, dy);
        let da = self.head.out.backward(p, &hc.out, &hc.a, &dz, grad);
        let dz = relu_backward_owned(&hc.a, da);
        let dz = self.head.bn.backward(p, &hc.bn, dz, grad);
        let mut dh = self.head.conv.backward(p, &hc.conv, &hc.input, &dz, grad);
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let d_skip = b.skip.backward(p, &c.skip, &c.input, &dh, grad);
            let dz = relu_backward_owned(&c.a2, dh);
            let dz = b.bn2.backward(p, &c.bn2, dz, grad);
            let da1 = b.pointwise.backward(p, &c.pointwise, &c.a1, &dz, grad);
            let dz = relu_backward_owned(&c.a1, da1);
            let dz = b.bn1.backward(p, &c.bn1, dz, grad);
            let mut dx = b.main.backward(p, &c.main, &c.input, &dz, grad);
            dx.data
                .iter_mut()
                .zip(&d_skip.data)
                .for_each(|(a, b)| *a += b);
            dh = dx;
        }
        dh
    }

    /// Zeroes every main-path convolution, leaving only the skip paths.
    pub fn zero_main_paths(&mut self) {
        for b in &self.blocks {
            for c in [&b.main, &b.pointwise] {
                self.params[c.w_off..c.w_off + c.weight_len()].fill(0.0);
            }
        }
    }

    /// Output of block `i` alone on input `x` (for inspection and tests).
    pub fn block_forward(&self, i: usize, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let b = self
            .blocks
            .get(i)
            .ok_or_else(|| Error::Shape(format!("no block {i}")))?;
        if x.c != b.main.cin {
            return Err(Error::Shape(format!(
                "block {i} expects {} channels, got {}",
                b.main.cin, x.c
            )));
        }
        let p = &self.params;
        let (z, _) = b.main.forward(p, x);
        let (z, _) = b.bn1.forward(p, &self.stats, &z, mode);
        let (z, _) = b.pointwise.forward(p, &relu(&z));
        let (z, _) = b.bn2.forward(p, &self.stats, &z, mode);
        let mut out = relu(&z);
        let (s, _) = b.skip.forward(p, x);
        out.data.iter_mut().zip(&s.data).for_each(|(o, v)| *o += v);
        Ok(out)
    }

    /// Skip-path transform of block `i` alone.
    pub fn block_skip(&self, i: usize, x: &Tensor) -> Tensor {
        self.blocks[i].skip.forward(&self.params, x).0
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_layouts() {
        let s = build_part(Layout::Image, 1, (13, 30), 3, 4, 1.0, 16, Activation::Relu).unwrap();
        let hw: Vec<_> = s.stacks.iter().map(|s| s.out_hw).collect();
        assert_eq!(hw, vec![(6, 14), (2, 6)]);
        assert_eq!(s.head_channels, 16);
        let s = build_part(Layout::Image, 1, (13, 30), 5, 4, 1.0, 16, Activation::Relu).unwrap();
        let hw: Vec<_> = s.stacks.iter().map(|s| s.out_hw).collect();
        assert_eq!(hw, vec![(5, 13), (1, 5)]);
        let s = build_part(Layout::Image, 1, (13, 30), 3, 4, 3.0, 48, Activation::Relu).unwrap();
        let ch: Vec<_> = s.stacks.iter().map(|s| s.blocks[0].out_channels).collect();
        assert_eq!(ch, vec![24, 48]);
        assert!(build_part(Layout::Image, 1, (2, 30), 3, 4, 1.0, 16, Activation::Relu).is_err());
    }

    #[test]
    fn stacks_reduce_only_at_the_end() {
        let s = build_part(
            Layout::Sequence,
            1,
            (1, 48),
            3,
            4,
            2.0,
            1,
            Activation::Sigmoid,
        )
        .unwrap();
        for stack in &s.stacks {
            let r: Vec<bool> = stack.blocks.iter().map(|b| b.reducer).collect();
            assert_eq!(r, vec![false, false, false, true]);
            assert_ne!(stack.blocks[0].in_channels, stack.blocks[0].out_channels);
        }
        assert!(s.final_hw().1 < 3);
    }

    #[test]
    fn channel_rounding() {
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(1.25), 1);
        assert_eq!(round_half_up(6.25), 6);
        assert_eq!(stack_channels(1.25, 0), 10);
    }

    fn rng() -> StreamRng {
        crate::rng::substream(1, "part")
    }

    #[test]
    fn block_shapes() {
        let spec = build_part(Layout::Image, 1, (13, 30), 3, 4, 1.0, 16, Activation::Relu).unwrap();
        let part = Part::new(spec, &mut rng());
        let x = Tensor::from_data(8, 2, 6, 14, vec![0.3; 8 * 2 * 84]);
        let y = part.block_forward(1, &x, Mode::Train).unwrap();
        assert_eq!((y.c, y.h, y.w), (8, 6, 14));
        let y = part.block_forward(4, &x, Mode::Train).unwrap();
        assert_eq!((y.c, y.h, y.w), (16, 6, 14));
        let x = Tensor::from_data(8, 2, 13, 30, vec![0.0; 8 * 2 * 390]);
        let y = part.block_forward(3, &x, Mode::Train).unwrap();
        assert_eq!((y.c, y.h, y.w), (8, 6, 14));
        let z = Tensor::zeros(16, 2, 6, 14);
        let y = part.block_forward(5, &z, Mode::Train).unwrap();
        assert!(y.is_finite());
        assert!(part
            .block_forward(5, &Tensor::zeros(3, 1, 6, 14), Mode::Train)
            .is_err());
    }

    #[test]
    fn zero_main_path_leaves_the_skip() {
        let spec = build_part(Layout::Image, 1, (13, 30), 3, 4, 1.0, 16, Activation::Relu).unwrap();
        let mut part = Part::new(spec, &mut rng());
        part.zero_main_paths();
        let mut r = crate::rng::substream(2, "x");
        let data: Vec<f64> = (0..8 * 3 * 84).map(|_| r.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_data(8, 3, 6, 14, data);
        for i in [1, 2] {
            assert_eq!(
                part.block_forward(i, &x, Mode::Train).unwrap(),
                part.block_skip(i, &x)
            );
        }
    }

    #[test]
    fn forward_output_and_running_stats() {
        let spec = build_part(Layout::Image, 1, (13, 30), 3, 4, 1.0, 16, Activation::Relu).unwrap();
        let mut part = Part::new(spec, &mut rng());
        let mut r = crate::rng::substream(3, "x");
        let x = Tensor::from_data(
            1,
            4,
            13,
            30,
            (0..4 * 390).map(|_| r.random_range(-1.0..1.0)).collect(),
        );
        let (y, cache) = part.forward(&x, Mode::Train).unwrap();
        assert_eq!((y.c, y.n, y.h, y.w), (16, 4, 1, 1));
        assert!(y.data.iter().all(|&v| v >= 0.0));
        let before = part.stats.clone();
        part.absorb_stats(&cache);
        assert_ne!(before, part.stats);
        let (ye, _) = part.forward(&x, Mode::Eval).unwrap();
        assert!(ye.is_finite());
        assert!(part
            .forward(&Tensor::zeros(1, 1, 12, 30), Mode::Eval)
            .is_err());
    }
}
