//! Pluggable convolutional feature extractor: forward evaluation with layer
//! taps, Gram matrices, and vector-Jacobian products with respect to the
//! input image. Extractor weights are constants; they are loaded from a
//! file or generated deterministically, never trained here.
//!
//! # Weight file format
//!
//! Little-endian binary:
//!
//! ```text
//! magic  4 bytes          "SFX1"
//! u32    layer count
//! per layer:
//!   u32 kh, u32 kw, u32 c_in, u32 c_out
//!   f32 weights  [kh * kw * c_in * c_out]   row-major (ky, kx, ci, co)
//!   f32 biases   [c_out]
//!   u8  activation code                     0 = identity, 1 = relu
//!   u8  stride                              1 or 2
//! u32    content tap count, then u32 tap indices
//! u32    style tap count, then u32 tap indices
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Lcg;
use crate::tensor::Tensor3;

const MAGIC: &[u8; 4] = b"SFX1";

/// Output-channel tile width of the convolution microkernels.
const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            other => Err(Error::format(format!("invalid activation code {other}"))),
        }
    }
}

/// One convolution layer with same-padding.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    kh: usize,
    kw: usize,
    c_in: usize,
    c_out: usize,
    /// Row-major `(ky, kx, ci, co)`.
    weights: Vec<f64>,
    /// The same weights laid out `(ky, kx, co, ci)`, so the backward walk
    /// can accumulate over contiguous input channels.
    weights_t: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
    stride: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kh: usize,
        kw: usize,
        c_in: usize,
        c_out: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
        stride: usize,
    ) -> Result<Self> {
        if kh == 0 || kw == 0 || c_in == 0 || c_out == 0 {
            return Err(Error::dimension("conv layer dimensions must be >= 1"));
        }
        if weights.len() != kh * kw * c_in * c_out {
            return Err(Error::dimension(format!(
                "expected {} weights, got {}",
                kh * kw * c_in * c_out,
                weights.len()
            )));
        }
        if bias.len() != c_out {
            return Err(Error::dimension(format!(
                "expected {} biases, got {}",
                c_out,
                bias.len()
            )));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::format(format!("stride must be 1 or 2, got {stride}")));
        }
        let mut weights_t = vec![0.0; weights.len()];
        for k in 0..kh * kw {
            for ci in 0..c_in {
                for co in 0..c_out {
                    weights_t[(k * c_out + co) * c_in + ci] =
                        weights[(k * c_in + ci) * c_out + co];
                }
            }
        }
        Ok(ConvLayer {
            kh,
            kw,
            c_in,
            c_out,
            weights,
            weights_t,
            bias,
            activation,
            stride,
        })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    /// Same-padding offsets (rows above, columns left of the input).
    fn padding(&self, h: usize, w: usize) -> (usize, usize) {
        let (oh, ow) = self.out_hw(h, w);
        let pad_h = ((oh - 1) * self.stride + self.kh).saturating_sub(h);
        let pad_w = ((ow - 1) * self.stride + self.kw).saturating_sub(w);
        (pad_h / 2, pad_w / 2)
    }

    fn forward(&self, input: &Tensor3) -> Tensor3 {
        let (h, w, _) = input.shape();
        let (oh, ow) = self.out_hw(h, w);
        let (pad_t, pad_l) = self.padding(h, w);
        let c_out = self.c_out;
        let mut out = Tensor3::zeros(oh, ow, self.c_out);
        let chunked = (c_out / CHUNK) * CHUNK;
        let mut acc_tail = vec![0.0f64; c_out - chunked];
        for oy in 0..oh {
            for ox in 0..ow {
                let base_y = (oy * self.stride) as isize - pad_t as isize;
                let base_x = (ox * self.stride) as isize - pad_l as isize;

                // Output channels in register-resident tiles of CHUNK; the
                // accumulators stay live across the whole kernel window.
                for c0 in (0..chunked).step_by(CHUNK) {
                    let mut acc = [0.0f64; CHUNK];
                    acc.copy_from_slice(&self.bias[c0..c0 + CHUNK]);
                    self.window_major(
                        input,
                        (h, w),
                        (base_y, base_x),
                        c0,
                        &mut acc,
                    );
                    let dst = &mut out.pixel_mut(oy, ox)[c0..c0 + CHUNK];
                    match self.activation {
                        Activation::Identity => dst.copy_from_slice(&acc),
                        Activation::Relu => {
                            for (d, &v) in dst.iter_mut().zip(&acc) {
                                *d = v.max(0.0);
                            }
                        }
                    }
                }

                if !acc_tail.is_empty() {
                    acc_tail.copy_from_slice(&self.bias[chunked..]);
                    self.window_tail(input, (h, w), (base_y, base_x), chunked, &mut acc_tail);
                    let dst = &mut out.pixel_mut(oy, ox)[chunked..];
                    match self.activation {
                        Activation::Identity => dst.copy_from_slice(&acc_tail),
                        Activation::Relu => {
                            for (d, &v) in dst.iter_mut().zip(&acc_tail) {
                                *d = v.max(0.0);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates one CHUNK-wide output-channel tile over the full kernel
    /// window. Fixed-size accumulators keep the hot loop in registers.
    #[inline(always)]
    fn window_major(
        &self,
        input: &Tensor3,
        (h, w): (usize, usize),
        (base_y, base_x): (isize, isize),
        c0: usize,
        acc: &mut [f64; CHUNK],
    ) {
        for ky in 0..self.kh {
            let iy = base_y + ky as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for kx in 0..self.kw {
                let ix = base_x + kx as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let src = input.pixel(iy as usize, ix as usize);
                let mut base = ((ky * self.kw + kx) * self.c_in) * self.c_out + c0;
                for &a in src {
                    let row = &self.weights[base..base + CHUNK];
                    for j in 0..CHUNK {
                        acc[j] = a.mul_add(row[j], acc[j]);
                    }
                    base += self.c_out;
                }
            }
        }
    }

    /// Same accumulation for the remaining output channels past the last
    /// full tile.
    fn window_tail(
        &self,
        input: &Tensor3,
        (h, w): (usize, usize),
        (base_y, base_x): (isize, isize),
        c0: usize,
        acc: &mut [f64],
    ) {
        let tail = acc.len();
        for ky in 0..self.kh {
            let iy = base_y + ky as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for kx in 0..self.kw {
                let ix = base_x + kx as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let src = input.pixel(iy as usize, ix as usize);
                let mut base = ((ky * self.kw + kx) * self.c_in) * self.c_out + c0;
                for &a in src {
                    let row = &self.weights[base..base + tail];
                    for (slot, &k) in acc.iter_mut().zip(row) {
                        *slot = a.mul_add(k, *slot);
                    }
                    base += self.c_out;
                }
            }
        }
    }

    /// Gradient with respect to the layer input, given the gradient at the
    /// layer output (post-activation) and the stored output.
    fn backward_input(
        &self,
        input_hw: (usize, usize),
        output: &Tensor3,
        grad_out: &Tensor3,
    ) -> Tensor3 {
        let (h, w) = input_hw;
        let (oh, ow, _) = output.shape();
        let (pad_t, pad_l) = self.padding(h, w);

        // Fold the activation derivative into the output gradient once.
        let masked;
        let g_masked = match self.activation {
            Activation::Identity => grad_out,
            Activation::Relu => {
                masked = grad_out
                    .zip(output, |g, a| if a > 0.0 { g } else { 0.0 })
                    .expect("output and gradient share a shape");
                &masked
            }
        };

        // Gather formulation: every input pixel collects from the output
        // pixels whose kernel window covers it, with the transposed weights
        // driving the same register-tiled microkernel as the forward pass.
        let c_in = self.c_in;
        let chunked = (c_in / CHUNK) * CHUNK;
        let s = self.stride as isize;
        let mut grad_in = Tensor3::zeros(h, w, c_in);
        for iy in 0..h as isize {
            for ix in 0..w as isize {
                for c0 in (0..chunked).step_by(CHUNK) {
                    let mut acc = [0.0f64; CHUNK];
                    self.gather_tile(
                        g_masked,
                        (oh, ow),
                        (pad_t as isize, pad_l as isize),
                        (iy, ix),
                        s,
                        c0,
                        &mut acc,
                    );
                    grad_in.pixel_mut(iy as usize, ix as usize)[c0..c0 + CHUNK]
                        .copy_from_slice(&acc);
                }
                if chunked < c_in {
                    let mut acc = vec![0.0f64; c_in - chunked];
                    self.gather_tail(
                        g_masked,
                        (oh, ow),
                        (pad_t as isize, pad_l as isize),
                        (iy, ix),
                        s,
                        chunked,
                        &mut acc,
                    );
                    grad_in.pixel_mut(iy as usize, ix as usize)[chunked..]
                        .copy_from_slice(&acc);
                }
            }
        }
        grad_in
    }

    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    fn gather_tile(
        &self,
        g_masked: &Tensor3,
        (oh, ow): (usize, usize),
        (pad_t, pad_l): (isize, isize),
        (iy, ix): (isize, isize),
        s: isize,
        c0: usize,
        acc: &mut [f64; CHUNK],
    ) {
        for ky in 0..self.kh as isize {
            let num_y = iy + pad_t - ky;
            if num_y < 0 || num_y % s != 0 {
                continue;
            }
            let oy = num_y / s;
            if oy >= oh as isize {
                continue;
            }
            for kx in 0..self.kw as isize {
                let num_x = ix + pad_l - kx;
                if num_x < 0 || num_x % s != 0 {
                    continue;
                }
                let ox = num_x / s;
                if ox >= ow as isize {
                    continue;
                }
                let src = g_masked.pixel(oy as usize, ox as usize);
                let mut base = ((ky as usize * self.kw + kx as usize) * self.c_out) * self.c_in
                    + c0;
                for &gv in src {
                    let row = &self.weights_t[base..base + CHUNK];
                    for j in 0..CHUNK {
                        acc[j] = gv.mul_add(row[j], acc[j]);
                    }
                    base += self.c_in;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn gather_tail(
        &self,
        g_masked: &Tensor3,
        (oh, ow): (usize, usize),
        (pad_t, pad_l): (isize, isize),
        (iy, ix): (isize, isize),
        s: isize,
        c0: usize,
        acc: &mut [f64],
    ) {
        let tail = acc.len();
        for ky in 0..self.kh as isize {
            let num_y = iy + pad_t - ky;
            if num_y < 0 || num_y % s != 0 {
                continue;
            }
            let oy = num_y / s;
            if oy >= oh as isize {
                continue;
            }
            for kx in 0..self.kw as isize {
                let num_x = ix + pad_l - kx;
                if num_x < 0 || num_x % s != 0 {
                    continue;
                }
                let ox = num_x / s;
                if ox >= ow as isize {
                    continue;
                }
                let src = g_masked.pixel(oy as usize, ox as usize);
                let mut base = ((ky as usize * self.kw + kx as usize) * self.c_out) * self.c_in
                    + c0;
                for &gv in src {
                    let row = &self.weights_t[base..base + tail];
                    for (slot, &k) in acc.iter_mut().zip(row) {
                        *slot = gv.mul_add(k, *slot);
                    }
                    base += self.c_in;
                }
            }
        }
    }
}

/// Layered convolutional pipeline with declared content and style taps.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    layers: Vec<ConvLayer>,
    content_taps: Vec<usize>,
    style_taps: Vec<usize>,
}

impl FeatureExtractor {
    pub fn new(
        layers: Vec<ConvLayer>,
        content_taps: Vec<usize>,
        style_taps: Vec<usize>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::dimension("extractor needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].c_out != pair[1].c_in {
                return Err(Error::dimension(format!(
                    "layer channel mismatch: {} feeds {}",
                    pair[0].c_out, pair[1].c_in
                )));
            }
        }
        for &tap in content_taps.iter().chain(&style_taps) {
            if tap >= layers.len() {
                return Err(Error::dimension(format!(
                    "tap index {tap} out of range for {} layers",
                    layers.len()
                )));
            }
        }
        Ok(FeatureExtractor {
            layers,
            content_taps,
            style_taps,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].c_in
    }

    pub fn content_taps(&self) -> &[usize] {
        &self.content_taps
    }

    pub fn style_taps(&self) -> &[usize] {
        &self.style_taps
    }

    /// Sorted union of content and style taps; `extract` and `extract_vjp`
    /// order their lists this way.
    pub fn tap_indices(&self) -> Vec<usize> {
        let mut taps: Vec<usize> = self
            .content_taps
            .iter()
            .chain(&self.style_taps)
            .copied()
            .collect();
        taps.sort_unstable();
        taps.dedup();
        taps
    }

    fn check_input(&self, img: &Tensor3) -> Result<()> {
        if img.channels() != self.input_channels() {
            return Err(Error::dimension(format!(
                "extractor expects {} input channels, got {}",
                self.input_channels(),
                img.channels()
            )));
        }
        Ok(())
    }

    /// Runs all layers, keeping every activation for reuse by the VJP.
    pub fn forward(&self, img: &Tensor3) -> Result<ForwardPass> {
        self.check_input(img)?;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut current = img;
        for layer in &self.layers {
            let out = layer.forward(current);
            activations.push(out);
            current = activations.last().unwrap();
        }
        Ok(ForwardPass { activations })
    }

    /// Feature maps at the tapped layers, in [`tap_indices`] order.
    ///
    /// [`tap_indices`]: FeatureExtractor::tap_indices
    pub fn extract(&self, img: &Tensor3) -> Result<Vec<Tensor3>> {
        let pass = self.forward(img)?;
        Ok(self
            .tap_indices()
            .into_iter()
            .map(|i| pass.activations[i].clone())
            .collect())
    }

    /// Pulls a cotangent per tapped layer (in [`tap_indices`] order) back to
    /// an input-image gradient.
    ///
    /// [`tap_indices`]: FeatureExtractor::tap_indices
    pub fn extract_vjp(&self, img: &Tensor3, cotangents: &[Tensor3]) -> Result<Tensor3> {
        let taps = self.tap_indices();
        if cotangents.len() != taps.len() {
            return Err(Error::dimension(format!(
                "expected {} cotangents, got {}",
                taps.len(),
                cotangents.len()
            )));
        }
        let pass = self.forward(img)?;
        let pairs: Vec<(usize, &Tensor3)> = taps.into_iter().zip(cotangents).collect();
        self.vjp_with_pass(img, &pass, &pairs)
    }

    /// Backward walk reusing a stored forward pass. `cotangents` pairs layer
    /// indices with gradients at those layers' outputs.
    pub fn vjp_with_pass(
        &self,
        img: &Tensor3,
        pass: &ForwardPass,
        cotangents: &[(usize, &Tensor3)],
    ) -> Result<Tensor3> {
        self.check_input(img)?;
        if pass.activations.len() != self.layers.len() {
            return Err(Error::dimension("forward pass does not match extractor"));
        }
        for &(layer, cot) in cotangents {
            if layer >= self.layers.len() {
                return Err(Error::dimension(format!("cotangent layer {layer} out of range")));
            }
            if cot.shape() != pass.activations[layer].shape() {
                return Err(Error::dimension(format!(
                    "cotangent shape mismatch at layer {layer}"
                )));
            }
        }

        let top = match cotangents.iter().map(|&(i, _)| i).max() {
            Some(top) => top,
            None => return Ok(Tensor3::zeros(img.height(), img.width(), img.channels())),
        };

        let mut grad: Option<Tensor3> = None;
        for layer_idx in (0..=top).rev() {
            let mut g = match grad.take() {
                Some(g) => g,
                None => {
                    let a = &pass.activations[layer_idx];
                    Tensor3::zeros(a.height(), a.width(), a.channels())
                }
            };
            for &(i, cot) in cotangents {
                if i == layer_idx {
                    g.add_scaled_assign(cot, 1.0)?;
                }
            }
            let input_hw = if layer_idx == 0 {
                img.hw()
            } else {
                pass.activations[layer_idx - 1].hw()
            };
            grad = Some(self.layers[layer_idx].backward_input(
                input_hw,
                &pass.activations[layer_idx],
                &g,
            ));
        }
        Ok(grad.expect("at least one layer walked"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path.as_ref())?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            for dim in [layer.kh, layer.kw, layer.c_in, layer.c_out] {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
            for &v in &layer.weights {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
            for &v in &layer.bias {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
            w.write_all(&[layer.activation.code(), layer.stride as u8])?;
        }
        for taps in [&self.content_taps, &self.style_taps] {
            w.write_all(&(taps.len() as u32).to_le_bytes())?;
            for &t in taps.iter() {
                w.write_all(&(t as u32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::parse(format!("{}: truncated extractor file", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::format(format!(
                "{}: bad extractor magic {magic:?}",
                path.display()
            )));
        }

        let layer_count = read_u32(&mut r)? as usize;
        if layer_count == 0 || layer_count > 1024 {
            return Err(Error::format(format!("implausible layer count {layer_count}")));
        }
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let kh = read_u32(&mut r)? as usize;
            let kw = read_u32(&mut r)? as usize;
            let c_in = read_u32(&mut r)? as usize;
            let c_out = read_u32(&mut r)? as usize;
            let n = kh
                .checked_mul(kw)
                .and_then(|v| v.checked_mul(c_in))
                .and_then(|v| v.checked_mul(c_out))
                .filter(|&v| v > 0 && v <= (1 << 28))
                .ok_or_else(|| Error::format("implausible layer shape".to_string()))?;
            let weights = read_f32_vec(&mut r, n)?;
            let bias = read_f32_vec(&mut r, c_out)?;
            let mut tail = [0u8; 2];
            r.read_exact(&mut tail)
                .map_err(|_| Error::parse("truncated extractor layer".to_string()))?;
            let activation = Activation::from_code(tail[0])?;
            layers.push(ConvLayer::new(
                kh,
                kw,
                c_in,
                c_out,
                weights,
                bias,
                activation,
                tail[1] as usize,
            )?);
        }

        let mut taps = [Vec::new(), Vec::new()];
        for list in taps.iter_mut() {
            let n = read_u32(&mut r)? as usize;
            if n > layer_count {
                return Err(Error::format("more taps than layers".to_string()));
            }
            for _ in 0..n {
                list.push(read_u32(&mut r)? as usize);
            }
        }
        let [content_taps, style_taps] = taps;
        FeatureExtractor::new(layers, content_taps, style_taps)
    }

    /// The bundled default: four 3x3 relu layers, 3 -> 16 -> 32 -> 64 -> 64
    /// channels, stride 2 on the last two, content tap at layer 2, style
    /// taps at all four layers. Weights are He-uniform draws from the
    /// crate's deterministic generator, quantized to f32 so the extractor
    /// round-trips through its file format bit-exactly.
    pub fn bundled_default() -> Self {
        let mut rng = Lcg::new(0x5EED_FEA7);
        let plan = [(3usize, 16usize, 1usize), (16, 32, 1), (32, 64, 2), (64, 64, 2)];
        let layers = plan
            .iter()
            .map(|&(c_in, c_out, stride)| {
                let fan_in = (3 * 3 * c_in) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let weights = (0..3 * 3 * c_in * c_out)
                    .map(|_| rng.range(-bound, bound) as f32 as f64)
                    .collect();
                ConvLayer::new(
                    3,
                    3,
                    c_in,
                    c_out,
                    weights,
                    vec![0.0; c_out],
                    Activation::Relu,
                    stride,
                )
                .expect("valid bundled layer")
            })
            .collect();
        FeatureExtractor::new(layers, vec![2], vec![0, 1, 2, 3]).expect("valid bundled extractor")
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::parse("truncated extractor file".to_string()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32_vec(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)
        .map_err(|_| Error::parse("truncated extractor weights".to_string()))?;
    Ok(raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

/// All layer activations of one forward evaluation.
pub struct ForwardPass {
    activations: Vec<Tensor3>,
}

impl ForwardPass {
    pub fn layer_output(&self, layer: usize) -> &Tensor3 {
        &self.activations[layer]
    }

    pub fn final_output(&self) -> &Tensor3 {
        self.activations.last().expect("non-empty extractor")
    }
}

/// Channel-by-channel inner products of a feature map, normalized by the
/// element count `H * W * C`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    channels: usize,
    data: Vec<f64>,
}

impl GramMatrix {
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.channels + b]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mean of squared entry differences; the style distance between maps.
    pub fn sq_distance(&self, other: &GramMatrix) -> Result<f64> {
        if self.channels != other.channels {
            return Err(Error::dimension(format!(
                "gram size mismatch: {} vs {}",
                self.channels, other.channels
            )));
        }
        let n = (self.channels * self.channels) as f64;
        let mut sum = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = a - b;
            sum += d * d;
        }
        Ok(sum / n)
    }
}

/// Builds a Gram-shaped matrix from raw entries (crate-internal; used to
/// carry gradients with respect to a Gram matrix).
pub(crate) fn gram_matrix_from_raw(channels: usize, data: Vec<f64>) -> GramMatrix {
    debug_assert_eq!(data.len(), channels * channels);
    GramMatrix { channels, data }
}

pub fn gram(f: &Tensor3) -> GramMatrix {
    let (h, w, c) = f.shape();
    let norm = 1.0 / (h * w * c) as f64;
    let mut data = vec![0.0f64; c * c];
    // Pixels are visited in symmetric pairs around each row's center so the
    // accumulation is invariant to horizontal mirroring of f.
    for y in 0..h {
        for i in 0..w.div_ceil(2) {
            let j = w - 1 - i;
            let p = f.pixel(y, i);
            if i == j {
                accumulate_outer(&mut data, p, None, c);
            } else {
                accumulate_outer(&mut data, p, Some(f.pixel(y, j)), c);
            }
        }
    }
    for v in data.iter_mut() {
        *v *= norm;
    }
    GramMatrix { channels: c, data }
}

#[inline]
fn accumulate_outer(data: &mut [f64], p: &[f64], q: Option<&[f64]>, c: usize) {
    for a in 0..c {
        let row = &mut data[a * c..(a + 1) * c];
        match q {
            Some(q) => {
                let (pa, qa) = (p[a], q[a]);
                // Both products round independently before the commutative
                // add, so swapping p and q cannot change the result.
                for (b, slot) in row.iter_mut().enumerate() {
                    *slot += pa * p[b] + qa * q[b];
                }
            }
            None => {
                let pa = p[a];
                for (b, slot) in row.iter_mut().enumerate() {
                    *slot = pa.mul_add(p[b], *slot);
                }
            }
        }
    }
}

/// Pulls a gradient on the Gram matrix back to the feature map:
/// `dL/df(p, a) = sum_b (dG[a][b] + dG[b][a]) * f(p, b) / (H * W * C)`.
pub fn gram_vjp(f: &Tensor3, grad_gram: &GramMatrix) -> Result<Tensor3> {
    let (h, w, c) = f.shape();
    if grad_gram.channels != c {
        return Err(Error::dimension("gram gradient channel mismatch"));
    }
    let norm = 1.0 / (h * w * c) as f64;
    let mut sym = vec![0.0f64; c * c];
    for a in 0..c {
        for b in 0..c {
            sym[a * c + b] = (grad_gram.get(a, b) + grad_gram.get(b, a)) * norm;
        }
    }
    let mut out = Tensor3::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let p = f.pixel(y, x);
            let dst = out.pixel_mut(y, x);
            // sym is symmetric, so row b doubles as column b and the
            // accumulation runs over contiguous memory.
            for (b, &pb) in p.iter().enumerate() {
                let row = &sym[b * c..(b + 1) * c];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d = pb.mul_add(s, *d);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    pub(crate) fn identity_extractor(channels: usize) -> FeatureExtractor {
        let mut weights = vec![0.0; channels * channels];
        for c in 0..channels {
            weights[c * channels + c] = 1.0;
        }
        let layer = ConvLayer::new(
            1,
            1,
            channels,
            channels,
            weights,
            vec![0.0; channels],
            Activation::Identity,
            1,
        )
        .unwrap();
        FeatureExtractor::new(vec![layer], vec![0], vec![0]).unwrap()
    }

    fn random_extractor(rng: &mut Lcg) -> FeatureExtractor {
        let mk = |rng: &mut Lcg, kh, kw, c_in, c_out, act, stride| {
            let weights = (0..kh * kw * c_in * c_out).map(|_| rng.range(-0.5, 0.5)).collect();
            let bias = (0..c_out).map(|_| rng.range(-0.1, 0.1)).collect();
            ConvLayer::new(kh, kw, c_in, c_out, weights, bias, act, stride).unwrap()
        };
        let layers = vec![
            mk(rng, 3, 3, 2, 4, Activation::Relu, 1),
            mk(rng, 3, 3, 4, 5, Activation::Identity, 2),
        ];
        FeatureExtractor::new(layers, vec![1], vec![0, 1]).unwrap()
    }

    /// Direct dense-loop convolution, independent of the layer code.
    fn naive_conv(
        input: &Tensor3,
        layer_weights: impl Fn(usize, usize, usize, usize) -> f64,
        bias: impl Fn(usize) -> f64,
        (kh, kw, c_in, c_out): (usize, usize, usize, usize),
        stride: usize,
        relu: bool,
    ) -> Tensor3 {
        let (h, w, _) = input.shape();
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let pad_t = (((oh - 1) * stride + kh).saturating_sub(h)) / 2;
        let pad_l = (((ow - 1) * stride + kw).saturating_sub(w)) / 2;
        Tensor3::from_fn(oh, ow, c_out, |oy, ox, co| {
            let mut acc = bias(co);
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (oy * stride + ky) as isize - pad_t as isize;
                    let ix = (ox * stride + kx) as isize - pad_l as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    for ci in 0..c_in {
                        acc += input.get(iy as usize, ix as usize, ci)
                            * layer_weights(ky, kx, ci, co);
                    }
                }
            }
            if relu {
                acc.max(0.0)
            } else {
                acc
            }
        })
    }

    #[test]
    fn identity_network_returns_input() {
        let e = identity_extractor(3);
        let img = Tensor3::from_fn(4, 5, 3, |y, x, c| (y * 15 + x * 3 + c) as f64 * 0.01);
        let taps = e.extract(&img).unwrap();
        assert_eq!(taps.len(), 1);
        assert_eq!(taps[0], img);
    }

    #[test]
    fn zero_kernels_give_zero_features() {
        let layer = ConvLayer::new(3, 3, 2, 4, vec![0.0; 72], vec![0.0; 4], Activation::Relu, 1)
            .unwrap();
        let e = FeatureExtractor::new(vec![layer], vec![0], vec![]).unwrap();
        let img = Tensor3::from_fn(5, 5, 2, |y, x, _| (y + x) as f64);
        let taps = e.extract(&img).unwrap();
        assert!(taps[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_extractor_matches_naive_convolution() {
        let mut rng = Lcg::new(99);
        let e = random_extractor(&mut rng);
        let img = Tensor3::from_fn(5, 5, 2, |_, _, _| rng.range(-1.0, 1.0));

        let l0 = &e.layers[0];
        let expected0 = naive_conv(
            &img,
            |ky, kx, ci, co| l0.weights[((ky * 3 + kx) * 2 + ci) * 4 + co],
            |co| l0.bias[co],
            (3, 3, 2, 4),
            1,
            true,
        );
        let l1 = &e.layers[1];
        let expected1 = naive_conv(
            &expected0,
            |ky, kx, ci, co| l1.weights[((ky * 3 + kx) * 4 + ci) * 5 + co],
            |co| l1.bias[co],
            (3, 3, 4, 5),
            2,
            false,
        );

        let pass = e.forward(&img).unwrap();
        for (got, want) in pass.layer_output(0).data().iter().zip(expected0.data()) {
            assert!((got - want).abs() < 1e-6);
        }
        for (got, want) in pass.layer_output(1).data().iter().zip(expected1.data()) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let e = identity_extractor(3);
        let img = Tensor3::zeros(4, 4, 2);
        assert!(e.extract(&img).is_err());
    }

    #[test]
    fn gram_of_zeros_is_zero() {
        let g = gram(&Tensor3::zeros(3, 3, 4));
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gram_constant_map_closed_form() {
        // 2x2x1 map of 3s: inner product sums 3*3 over 4 pixels = 36,
        // normalized by H*W*C = 4, so G = [9].
        let f = Tensor3::from_fn(2, 2, 1, |_, _, _| 3.0);
        let g = gram(&f);
        assert_eq!(g.channels(), 1);
        assert!((g.get(0, 0) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn gram_is_invariant_to_spatial_permutation() {
        let f = Tensor3::from_fn(3, 4, 2, |y, x, c| ((y * 7 + x * 3 + c * 5) % 11) as f64);
        // Shuffle pixels deterministically: reverse rows and columns.
        let shuffled = Tensor3::from_fn(3, 4, 2, |y, x, c| f.get(2 - y, 3 - x, c));
        let a = gram(&f);
        let b = gram(&shuffled);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_is_exactly_mirror_invariant() {
        let f = Tensor3::from_fn(3, 5, 3, |y, x, c| ((y * 31 + x * 17 + c * 7) % 13) as f64 / 13.0);
        let a = gram(&f);
        let b = gram(&f.mirror_x());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn gram_is_positive_semidefinite() {
        let mut rng = Lcg::new(4);
        let f = Tensor3::from_fn(6, 6, 5, |_, _, _| rng.range(-2.0, 2.0));
        let g = gram(&f);
        // G + 1e-6 I admits a Cholesky factorization iff the smallest
        // eigenvalue is >= -1e-6.
        let c = g.channels();
        let mut m: Vec<f64> = g.data().to_vec();
        for i in 0..c {
            m[i * c + i] += 1e-6;
        }
        assert!(cholesky_ok(&mut m, c), "gram matrix not PSD within 1e-6");
    }

    fn cholesky_ok(m: &mut [f64], n: usize) -> bool {
        for k in 0..n {
            for j in 0..k {
                let f = m[k * n + j];
                for i in k..n {
                    m[i * n + k] -= m[i * n + j] * f;
                }
            }
            let d = m[k * n + k];
            if d <= 0.0 {
                return false;
            }
            let s = d.sqrt();
            for i in k..n {
                m[i * n + k] /= s;
            }
        }
        true
    }

    #[test]
    fn identity_vjp_passes_cotangent_through() {
        let e = identity_extractor(2);
        let img = Tensor3::from_fn(3, 3, 2, |y, x, c| (y + x + c) as f64);
        let cot = Tensor3::from_fn(3, 3, 2, |y, x, c| (y * 9 + x * 3 + c) as f64 * 0.1);
        let grad = e.extract_vjp(&img, std::slice::from_ref(&cot)).unwrap();
        assert_eq!(grad, cot);
    }

    #[test]
    fn zero_cotangents_give_zero_grad() {
        let mut rng = Lcg::new(123);
        let e = random_extractor(&mut rng);
        let img = Tensor3::from_fn(6, 6, 2, |_, _, _| rng.range(0.0, 1.0));
        let taps = e.extract(&img).unwrap();
        let cots: Vec<Tensor3> = taps
            .iter()
            .map(|t| Tensor3::zeros(t.height(), t.width(), t.channels()))
            .collect();
        let grad = e.extract_vjp(&img, &cots).unwrap();
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("extractor.bin");
        let mut rng = Lcg::new(5);
        // Quantize to f32 like the writer does so equality is exact.
        let mk = |rng: &mut Lcg, c_in: usize, c_out: usize, act, stride| {
            let weights = (0..9 * c_in * c_out)
                .map(|_| rng.range(-0.4, 0.4) as f32 as f64)
                .collect();
            let bias = (0..c_out).map(|_| rng.range(-0.1, 0.1) as f32 as f64).collect();
            ConvLayer::new(3, 3, c_in, c_out, weights, bias, act, stride).unwrap()
        };
        let e = FeatureExtractor::new(
            vec![
                mk(&mut rng, 3, 6, Activation::Relu, 1),
                mk(&mut rng, 6, 8, Activation::Identity, 2),
                mk(&mut rng, 8, 4, Activation::Relu, 1),
            ],
            vec![1],
            vec![0, 2],
        )
        .unwrap();
        e.save(&path).unwrap();
        let back = FeatureExtractor::load(&path).unwrap();
        assert_eq!(back.layer_count(), 3);
        assert_eq!(back.content_taps(), &[1]);
        assert_eq!(back.style_taps(), &[0, 2]);
        for (a, b) in e.layers.iter().zip(&back.layers) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bias, b.bias);
            assert_eq!(a.activation, b.activation);
            assert_eq!(a.stride, b.stride);
        }
    }

    #[test]
    fn bundled_default_round_trips_through_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("default.bin");
        let e = FeatureExtractor::bundled_default();
        e.save(&path).unwrap();
        let back = FeatureExtractor::load(&path).unwrap();
        for (a, b) in e.layers.iter().zip(&back.layers) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn load_empty_file_is_parse_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        std::fs::write(&path, b"").unwrap();
        assert!(matches!(FeatureExtractor::load(&path), Err(Error::Parse(_))));
    }

    #[test]
    fn load_wrong_magic_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(FeatureExtractor::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn load_truncated_file_is_parse_error() {
        let dir = tempdir().unwrap();
        let good = dir.path().join("good.bin");
        let e = identity_extractor(2);
        e.save(&good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let bad = dir.path().join("trunc.bin");
        std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(FeatureExtractor::load(&bad), Err(Error::Parse(_))));
    }

    #[test]
    fn load_invalid_activation_is_format_error() {
        let dir = tempdir().unwrap();
        let good = dir.path().join("good.bin");
        identity_extractor(1).save(&good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        // Activation code sits two bytes before the stride byte at the end
        // of the single layer: magic(4) + count(4) + dims(16) + w(4) + b(4).
        let act_pos = 4 + 4 + 16 + 4 + 4;
        bytes[act_pos] = 9;
        let bad = dir.path().join("badact.bin");
        std::fs::write(&bad, bytes).unwrap();
        assert!(matches!(FeatureExtractor::load(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn strided_output_dimensions() {
        let e = FeatureExtractor::bundled_default();
        let img = Tensor3::zeros(64, 64, 3);
        let pass = e.forward(&img).unwrap();
        assert_eq!(pass.layer_output(0).hw(), (64, 64));
        assert_eq!(pass.layer_output(1).hw(), (64, 64));
        assert_eq!(pass.layer_output(2).hw(), (32, 32));
        assert_eq!(pass.layer_output(3).hw(), (16, 16));
    }
}
