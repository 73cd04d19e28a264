use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// One convolution stage: valid convolution, ReLU, optional 2x2 max-pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub pool: bool,
}

impl ConvSpec {
    pub const fn new(kernel: usize, out_channels: usize, stride: usize, pool: bool) -> Self {
        ConvSpec {
            kernel,
            out_channels,
            stride,
            pool,
        }
    }
}

/// Dual-stream architecture: a patch stream and a whole-box context stream
/// whose final feature maps are flattened and concatenated, followed by a
/// fully connected head. Hidden head layers use ReLU; the last layer is linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetArch {
    pub in_channels: usize,
    pub patch_side: usize,
    pub context_side: usize,
    pub patch_stream: Vec<ConvSpec>,
    pub context_stream: Vec<ConvSpec>,
    /// Widths of the hidden fully connected layers.
    pub hidden: Vec<usize>,
    /// Width of the final (logit) layer.
    pub outputs: usize,
    /// Index into `hidden` of the layer whose post-ReLU activations form the embedding.
    pub embed_layer: usize,
}

impl Default for NetArch {
    fn default() -> Self {
        let stream = vec![ConvSpec::new(3, 8, 1, true), ConvSpec::new(3, 16, 1, true)];
        NetArch {
            in_channels: 1,
            patch_side: 16,
            context_side: 16,
            patch_stream: stream.clone(),
            context_stream: stream,
            hidden: vec![512],
            outputs: 2,
            embed_layer: 0,
        }
    }
}

impl NetArch {
    pub fn with_outputs(&self, outputs: usize) -> NetArch {
        NetArch {
            outputs,
            ..self.clone()
        }
    }

    pub fn layout(&self) -> Result<Layout> {
        Layout::new(self)
    }

    pub fn embed_dim(&self) -> usize {
        self.hidden.get(self.embed_layer).copied().unwrap_or(0)
    }

    pub fn patch_input_len(&self) -> usize {
        self.in_channels * self.patch_side * self.patch_side
    }

    pub fn context_input_len(&self) -> usize {
        self.in_channels * self.context_side * self.context_side
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayout {
    pub in_channels: usize,
    pub in_side: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub conv_side: usize,
    pub pool: bool,
    pub out_side: usize,
    pub weights: core::ops::Range<usize>,
    pub bias: core::ops::Range<usize>,
}

impl ConvLayout {
    pub fn conv_len(&self) -> usize {
        self.out_channels * self.conv_side * self.conv_side
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_side * self.out_side
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseLayout {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: core::ops::Range<usize>,
    pub bias: core::ops::Range<usize>,
}

/// Resolved shapes and parameter offsets of a [`NetArch`].
///
/// Parameters are stored flat: patch-stream layers, then context-stream
/// layers, then head layers; each layer stores weights before biases. Conv
/// weights are `[out][in][row][col]`, dense weights `[out][in]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub patch: Vec<ConvLayout>,
    pub context: Vec<ConvLayout>,
    pub head: Vec<DenseLayout>,
    pub patch_features: usize,
    pub context_features: usize,
    pub total: usize,
}

impl Layout {
    fn new(arch: &NetArch) -> Result<Layout> {
        if arch.in_channels == 0 {
            return Err(Error::config("net.in_channels", "must be at least 1"));
        }
        if arch.hidden.is_empty() {
            return Err(Error::config("net.hidden", "at least one hidden layer is required for the embedding"));
        }
        if arch.embed_layer >= arch.hidden.len() {
            return Err(Error::config("net.embed_layer", "must index a hidden layer"));
        }
        if arch.outputs == 0 || arch.hidden.contains(&0) {
            return Err(Error::config("net.hidden", "layer widths must be at least 1"));
        }
        let mut offset = 0;
        let (patch, patch_features) =
            stream_layout(arch.in_channels, arch.patch_side, &arch.patch_stream, &mut offset, "net.patch_stream")?;
        let (context, context_features) = stream_layout(
            arch.in_channels,
            arch.context_side,
            &arch.context_stream,
            &mut offset,
            "net.context_stream",
        )?;
        let mut head = Vec::new();
        let mut inputs = patch_features + context_features;
        for &outputs in arch.hidden.iter().chain(core::iter::once(&arch.outputs)) {
            let w = offset..offset + inputs * outputs;
            let b = w.end..w.end + outputs;
            offset = b.end;
            head.push(DenseLayout {
                inputs,
                outputs,
                weights: w,
                bias: b,
            });
            inputs = outputs;
        }
        Ok(Layout {
            patch,
            context,
            head,
            patch_features,
            context_features,
            total: offset,
        })
    }

    pub fn concat_dim(&self) -> usize {
        self.patch_features + self.context_features
    }

    /// Parameter ranges of all convolution layers (weights and biases).
    pub fn conv_ranges(&self) -> Vec<core::ops::Range<usize>> {
        self.patch
            .iter()
            .chain(&self.context)
            .flat_map(|l| [l.weights.clone(), l.bias.clone()])
            .collect()
    }

    pub fn is_bias(&self, index: usize) -> bool {
        self.patch
            .iter()
            .chain(&self.context)
            .map(|l| &l.bias)
            .chain(self.head.iter().map(|l| &l.bias))
            .any(|r| r.contains(&index))
    }

    pub fn final_layer(&self) -> &DenseLayout {
        self.head.last().expect("layout always has an output layer")
    }
}

fn stream_layout(
    in_channels: usize,
    side: usize,
    specs: &[ConvSpec],
    offset: &mut usize,
    key: &'static str,
) -> Result<(Vec<ConvLayout>, usize)> {
    if side == 0 {
        return Err(Error::config(key, "input side must be at least 1"));
    }
    let mut layers = Vec::new();
    let (mut c, mut s) = (in_channels, side);
    for (i, spec) in specs.iter().enumerate() {
        if spec.kernel == 0 || spec.stride == 0 || spec.out_channels == 0 {
            return Err(Error::config(key, format!("layer {i}: kernel, stride and channels must be >= 1")));
        }
        if spec.kernel > s {
            return Err(Error::config(key, format!("layer {i}: kernel {} exceeds input side {s}", spec.kernel)));
        }
        let conv_side = (s - spec.kernel) / spec.stride + 1;
        let out_side = if spec.pool { conv_side / 2 } else { conv_side };
        if out_side == 0 {
            return Err(Error::config(key, format!("layer {i}: pooling a {conv_side}-pixel map leaves nothing")));
        }
        let w = *offset..*offset + spec.out_channels * c * spec.kernel * spec.kernel;
        let b = w.end..w.end + spec.out_channels;
        *offset = b.end;
        layers.push(ConvLayout {
            in_channels: c,
            in_side: s,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            conv_side,
            pool: spec.pool,
            out_side,
            weights: w,
            bias: b,
        });
        c = spec.out_channels;
        s = out_side;
    }
    Ok((layers, c * s * s))
}
